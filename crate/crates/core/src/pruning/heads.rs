//! Heads+FFN baseline: whole attention heads and FFN units ranked in two
//! separate pools, each with its own density target.

use super::{ImportanceTable, Registry, UnitKind};
use crate::autodiff::GradChannel;
use crate::error::{GrainError, Result};
use crate::model::{EncoderModel, ModelConfig};
use crate::tensor::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct HeadUnit {
    pub layer: usize,
    pub head: usize,
    pub live: bool,
}

pub fn register_heads<S: Scalar>(model: &EncoderModel<S>) -> Vec<HeadUnit> {
    model
        .blocks
        .iter()
        .enumerate()
        .flat_map(|(layer, b)| {
            b.heads.iter().enumerate().map(move |(head, h)| HeadUnit {
                layer,
                head,
                live: h.live_queries() + h.live_values() > 0,
            })
        })
        .collect()
}

/// `|Σ grad_ce · W_O|` over the whole output projection of each head.
pub fn heads_importance<S: Scalar>(heads: &[HeadUnit], model: &EncoderModel<S>) -> Vec<f64> {
    heads
        .iter()
        .map(|u| {
            if !u.live {
                return 0.0;
            }
            let p = model.params.get(model.blocks[u.layer].heads[u.head].wo);
            p.value
                .data()
                .iter()
                .zip(p.grad(GradChannel::Ce).data())
                .map(|(w, g)| w.as_f64() * g.as_f64())
                .sum::<f64>()
                .abs()
        })
        .collect()
}

/// Overall prunable density reached by the given pool densities.
pub fn overall_density(config: &ModelConfig, heads_density: f64, ffn_density: f64) -> f64 {
    let attn = config.attention_params() as f64;
    let ffn = config.ffn_params() as f64;
    (heads_density * attn + ffn_density * ffn) / (attn + ffn)
}

/// Checks that the two pool targets combine to the overall final density.
pub fn check_pool_targets(
    config: &ModelConfig,
    heads_density: f64,
    ffn_density: f64,
    final_density: f64,
) -> Result<()> {
    for (name, v) in [("heads", heads_density), ("ffn", ffn_density)] {
        if !(0.0..=1.0).contains(&v) {
            return Err(GrainError::Param(format!(
                "{name} density must lie in [0, 1], got {v}"
            )));
        }
    }
    let reached = overall_density(config, heads_density, ffn_density);
    if (reached - final_density).abs() > 1e-6 {
        return Err(GrainError::Param(format!(
            "heads density {heads_density} and ffn density {ffn_density} give overall density \
             {reached:.6}, not the final density {final_density}"
        )));
    }
    Ok(())
}

fn head_weight(model_head: &crate::model::AttentionHead, hidden: usize) -> usize {
    2 * hidden * (model_head.live_queries() + model_head.live_values())
}

/// Prunes whole heads until live attention weights are at most
/// `heads_target · P_attn`, and FFN units until live FFN weights are at most
/// `ffn_target · P_ffn`. Lowest smoothed score goes first in each pool, ties
/// broken by position. Returns the newly pruned head and registry indices.
#[allow(clippy::too_many_arguments)]
pub fn prune_pools<S: Scalar>(
    model: &mut EncoderModel<S>,
    heads: &mut [HeadUnit],
    head_table: &ImportanceTable,
    registry: &mut Registry,
    ffn_table: &ImportanceTable,
    heads_target: f64,
    ffn_target: f64,
) -> Result<(Vec<usize>, Vec<usize>)> {
    for (name, v) in [("heads", heads_target), ("ffn", ffn_target)] {
        if !(0.0..=1.0).contains(&v) {
            return Err(GrainError::Param(format!(
                "{name} target must lie in [0, 1], got {v}"
            )));
        }
    }
    if head_table.smoothed.len() != heads.len() || ffn_table.smoothed.len() != registry.len() {
        return Err(GrainError::Contract(
            "importance tables and unit lists disagree in size".into(),
        ));
    }
    let config = model.config;
    let d = config.hidden;

    let attn_budget = heads_target * config.attention_params() as f64;
    let mut attn_live: usize = model
        .blocks
        .iter()
        .flat_map(|b| b.heads.iter())
        .map(|h| head_weight(h, d))
        .sum();
    let mut pruned_heads = Vec::new();
    while attn_live as f64 > attn_budget {
        let next = (0..heads.len())
            .filter(|&i| heads[i].live)
            .min_by(|&i, &j| {
                head_table.smoothed[i]
                    .total_cmp(&head_table.smoothed[j])
                    .then(i.cmp(&j))
            });
        let Some(i) = next else { break };
        let HeadUnit { layer, head, .. } = heads[i];
        attn_live -= head_weight(&model.blocks[layer].heads[head], d);
        let indices: Vec<usize> = registry
            .units()
            .iter()
            .enumerate()
            .filter(|(_, u)| u.kind != UnitKind::Ffn && u.layer == layer && u.head == head)
            .map(|(k, _)| k)
            .collect();
        for k in indices {
            registry.prune(model, k);
        }
        heads[i].live = false;
        pruned_heads.push(i);
    }

    let ffn_budget = ffn_target * config.ffn_params() as f64;
    let is_live_ffn = |r: &Registry, k: usize| {
        let u = r.units()[k];
        u.kind == UnitKind::Ffn && u.live
    };
    let mut ffn_live = (0..registry.len())
        .filter(|&k| is_live_ffn(registry, k))
        .count()
        * registry.unit_params();
    let mut pruned_ffn = Vec::new();
    while ffn_live as f64 > ffn_budget {
        let next = (0..registry.len())
            .filter(|&k| is_live_ffn(registry, k))
            .min_by(|&i, &j| {
                ffn_table.smoothed[i]
                    .total_cmp(&ffn_table.smoothed[j])
                    .then(i.cmp(&j))
            });
        let Some(k) = next else { break };
        registry.prune(model, k);
        ffn_live -= registry.unit_params();
        pruned_ffn.push(k);
    }
    Ok((pruned_heads, pruned_ffn))
}
