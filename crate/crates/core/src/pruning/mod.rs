//! Pruning units, importance scores and the pruning loop.
//!
//! Every unit owns `2d` prunable weights whichever its kind, so one global
//! ranking across query, value and FFN units is meaningful.

mod heads;
mod schedule;

pub use heads::{
    check_pool_targets, heads_importance, overall_density, prune_pools, register_heads, HeadUnit,
};
pub use schedule::{density_schedule, ScheduleParams};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::GradChannel;
use crate::error::{GrainError, Result};
use crate::model::EncoderModel;
use crate::tensor::{Scalar, Tensor};

/// Declaration order is the tie-break order between kinds.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum UnitKind {
    Query,
    Value,
    Ffn,
}

impl UnitKind {
    pub fn as_str(self) -> &'static str {
        match self {
            UnitKind::Query => "query",
            UnitKind::Value => "value",
            UnitKind::Ffn => "ffn",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PruningUnit {
    pub kind: UnitKind,
    pub layer: usize,
    /// Always 0 for FFN units.
    pub head: usize,
    pub row: usize,
    pub live: bool,
}

impl PruningUnit {
    fn order_key(&self) -> (usize, UnitKind, usize, usize) {
        (self.layer, self.kind, self.head, self.row)
    }
}

/// All pruning units of a model, stored in tie-break order so that a unit's
/// index doubles as its position in that order.
#[derive(Clone, Debug)]
pub struct Registry {
    units: Vec<PruningUnit>,
    hidden: usize,
    /// `[layer][head] -> (value units registered, value units live)`.
    value_counts: Vec<Vec<(usize, usize)>>,
}

pub fn register_units<S: Scalar>(model: &EncoderModel<S>) -> Registry {
    let mut units = Vec::new();
    let mut value_counts = Vec::with_capacity(model.blocks.len());
    for (layer, block) in model.blocks.iter().enumerate() {
        for (kind, masks) in [
            (
                UnitKind::Query,
                block
                    .heads
                    .iter()
                    .map(|h| &h.query_mask)
                    .collect::<Vec<_>>(),
            ),
            (
                UnitKind::Value,
                block.heads.iter().map(|h| &h.value_mask).collect(),
            ),
        ] {
            for (head, mask) in masks.into_iter().enumerate() {
                units.extend(mask.iter().enumerate().map(|(row, &live)| PruningUnit {
                    kind,
                    layer,
                    head,
                    row,
                    live,
                }));
            }
        }
        units.extend(
            block
                .ffn_mask
                .iter()
                .enumerate()
                .map(|(row, &live)| PruningUnit {
                    kind: UnitKind::Ffn,
                    layer,
                    head: 0,
                    row,
                    live,
                }),
        );
        value_counts.push(
            block
                .heads
                .iter()
                .map(|h| (h.value_mask.len(), h.live_values()))
                .collect(),
        );
    }
    debug_assert!(units
        .windows(2)
        .all(|w| w[0].order_key() < w[1].order_key()));
    Registry {
        units,
        hidden: model.config.hidden,
        value_counts,
    }
}

impl Registry {
    pub fn units(&self) -> &[PruningUnit] {
        &self.units
    }

    pub fn len(&self) -> usize {
        self.units.len()
    }

    pub fn is_empty(&self) -> bool {
        self.units.is_empty()
    }

    /// Weights per unit.
    pub fn unit_params(&self) -> usize {
        2 * self.hidden
    }

    pub fn total_params(&self) -> usize {
        self.unit_params() * self.units.len()
    }

    pub fn live_params(&self) -> usize {
        self.unit_params() * self.units.iter().filter(|u| u.live).count()
    }

    /// `D(M)`: live value units of a head over its registered value units.
    pub fn value_density(&self, layer: usize, head: usize) -> f64 {
        let (total, live) = self.value_counts[layer][head];
        if total == 0 {
            0.0
        } else {
            live as f64 / total as f64
        }
    }

    fn head_has_values(&self, layer: usize, head: usize) -> bool {
        self.value_counts[layer][head].1 > 0
    }

    /// Marks a unit dead in the registry and in the model. Idempotent.
    pub fn prune<S: Scalar>(&mut self, model: &mut EncoderModel<S>, index: usize) {
        let unit = &mut self.units[index];
        if !unit.live {
            return;
        }
        unit.live = false;
        match unit.kind {
            UnitKind::Query => model.prune_query(unit.layer, unit.head, unit.row),
            UnitKind::Value => {
                model.prune_value(unit.layer, unit.head, unit.row);
                self.value_counts[unit.layer][unit.head].1 -= 1;
            }
            UnitKind::Ffn => model.prune_ffn(unit.layer, unit.row),
        }
    }

    fn check_geometry<S: Scalar>(&self, model: &EncoderModel<S>) -> Result<()> {
        let fits = self.units.iter().all(|u| {
            model.blocks.get(u.layer).is_some_and(|b| match u.kind {
                UnitKind::Query => b
                    .heads
                    .get(u.head)
                    .is_some_and(|h| u.row < h.query_mask.len()),
                UnitKind::Value => b
                    .heads
                    .get(u.head)
                    .is_some_and(|h| u.row < h.value_mask.len()),
                UnitKind::Ffn => u.row < b.ffn_mask.len(),
            })
        });
        if fits && self.hidden == model.config.hidden {
            Ok(())
        } else {
            Err(GrainError::Contract(
                "registry does not match the model geometry".into(),
            ))
        }
    }
}

fn row_dot<S: Scalar>(w: &Tensor<S>, g: &Tensor<S>, row: usize) -> f64 {
    w.row(row)
        .iter()
        .zip(g.row(row))
        .map(|(a, b)| a.as_f64() * b.as_f64())
        .sum()
}

fn col_dot<S: Scalar>(w: &Tensor<S>, g: &Tensor<S>, col: usize) -> f64 {
    (0..w.rows())
        .map(|r| w.at(r, col).as_f64() * g.at(r, col).as_f64())
        .sum()
}

/// `|Σ grad_ce · w|` over each unit's weights, read from the CE channel only.
/// Pruned units score 0.
pub fn raw_importance<S: Scalar>(registry: &Registry, model: &EncoderModel<S>) -> Result<Vec<f64>> {
    registry.check_geometry(model)?;
    let pair = |id| {
        let p = model.params.get(id);
        (&p.value, p.grad(GradChannel::Ce))
    };
    let scores = registry
        .units
        .iter()
        .map(|u| {
            if !u.live {
                return 0.0;
            }
            let block = &model.blocks[u.layer];
            let total = match u.kind {
                UnitKind::Query | UnitKind::Value => {
                    let h = &block.heads[u.head];
                    let (a, b) = if u.kind == UnitKind::Query {
                        (h.wq, h.wk)
                    } else {
                        (h.wv, h.wo)
                    };
                    let (wa, ga) = pair(a);
                    let (wb, gb) = pair(b);
                    row_dot(wa, ga, u.row) + row_dot(wb, gb, u.row)
                }
                UnitKind::Ffn => {
                    let (w1, g1) = pair(block.w1);
                    let (w2, g2) = pair(block.w2);
                    col_dot(w1, g1, u.row) + row_dot(w2, g2, u.row)
                }
            };
            total.abs()
        })
        .collect();
    Ok(scores)
}

/// Multiplies value-unit scores by `tanh(D(M)/α)` of their head.
pub fn apply_struct_reg(scores: &[f64], registry: &Registry, alpha: f64) -> Result<Vec<f64>> {
    if !alpha.is_finite() || alpha < 0.0 {
        return Err(GrainError::Param(format!(
            "structure regularization strength must be finite and >= 0, got {alpha}"
        )));
    }
    if scores.len() != registry.len() {
        return Err(GrainError::Contract(format!(
            "{} scores for {} units",
            scores.len(),
            registry.len()
        )));
    }
    Ok(scores
        .iter()
        .zip(&registry.units)
        .map(|(&s, u)| {
            if alpha == 0.0 || u.kind != UnitKind::Value {
                s
            } else {
                s * (registry.value_density(u.layer, u.head) / alpha).tanh()
            }
        })
        .collect())
}

/// Independent uniform `[0,1)` draws, one per unit.
pub fn random_scores(registry: &Registry, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    registry.units.iter().map(|_| rng.random::<f64>()).collect()
}

/// Exponentially smoothed scores, seeded with the first update.
#[derive(Clone, Debug, PartialEq)]
pub struct ImportanceTable {
    pub smoothed: Vec<f64>,
    /// Number of updates folded in so far.
    pub step: usize,
}

impl ImportanceTable {
    pub fn new(units: usize) -> Self {
        Self {
            smoothed: vec![0.0; units],
            step: 0,
        }
    }

    pub fn smooth_update(&mut self, scores: &[f64], beta: f64) -> Result<()> {
        if !(0.0..=1.0).contains(&beta) {
            return Err(GrainError::Param(format!(
                "smoothing factor must lie in [0, 1], got {beta}"
            )));
        }
        if scores.len() != self.smoothed.len() {
            return Err(GrainError::Contract(format!(
                "{} scores for a table of {}",
                scores.len(),
                self.smoothed.len()
            )));
        }
        if let Some(bad) = scores.iter().find(|s| !s.is_finite() || **s < 0.0) {
            return Err(GrainError::Contract(format!(
                "importance scores must be finite and >= 0, got {bad}"
            )));
        }
        if self.step == 0 {
            self.smoothed.copy_from_slice(scores);
        } else {
            for (s, &x) in self.smoothed.iter_mut().zip(scores) {
                *s = beta * *s + (1.0 - beta) * x;
            }
        }
        self.step += 1;
        Ok(())
    }
}

/// Prunes live units in increasing smoothed score until the live prunable
/// weights are at most `target · P`. Query units of a head that has lost all
/// of its value units compute nothing, so they go first. Returns registry
/// indices of the units pruned by this call, in pruning order.
pub fn prune_to_density<S: Scalar>(
    model: &mut EncoderModel<S>,
    registry: &mut Registry,
    table: &ImportanceTable,
    target: f64,
) -> Result<Vec<usize>> {
    if !(0.0..=1.0).contains(&target) {
        return Err(GrainError::Param(format!(
            "target density must lie in [0, 1], got {target}"
        )));
    }
    if table.smoothed.len() != registry.len() {
        return Err(GrainError::Contract(
            "importance table and registry disagree in size".into(),
        ));
    }
    registry.check_geometry(model)?;
    let budget = target * registry.total_params() as f64;
    let mut live = registry.live_params();
    let mut pruned = Vec::new();
    while live as f64 > budget {
        let next = registry
            .units
            .iter()
            .enumerate()
            .filter(|(_, u)| u.live)
            .min_by(|(i, a), (j, b)| {
                let ordinary = |u: &PruningUnit| {
                    u.kind != UnitKind::Query || registry.head_has_values(u.layer, u.head)
                };
                ordinary(a)
                    .cmp(&ordinary(b))
                    .then(table.smoothed[*i].total_cmp(&table.smoothed[*j]))
                    .then(i.cmp(j))
            })
            .map(|(i, _)| i);
        let Some(index) = next else { break };
        registry.prune(model, index);
        live -= registry.unit_params();
        pruned.push(index);
    }
    Ok(pruned)
}

/// CSV dump with columns `kind,layer,head,row,smoothed_score,live`.
pub fn score_table_csv(registry: &Registry, table: &ImportanceTable) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["kind", "layer", "head", "row", "smoothed_score", "live"])?;
    for (u, s) in registry.units.iter().zip(&table.smoothed) {
        w.write_record([
            u.kind.as_str().to_string(),
            u.layer.to_string(),
            u.head.to_string(),
            u.row.to_string(),
            format!("{s:e}"),
            u8::from(u.live).to_string(),
        ])?;
    }
    let bytes = w.into_inner().map_err(|e| GrainError::Io(e.into_error()))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}
