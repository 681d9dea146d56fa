//! Distillation losses against a frozen teacher and the gradient-separation
//! contract: the soft cross-entropy gradient feeds both the optimizer and the
//! importance scores, the hidden-state gradient feeds the optimizer only.

use crate::autodiff::{GradChannel, Graph, ParamId, ParamStore, Var};
use crate::data::Batch;
use crate::error::{GrainError, Result};
use crate::model::{EncoderModel, HiddenStates};
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LayerStrategy {
    /// Pairs `(i, i)` for every hidden state, embedding output included.
    Full,
    /// No hidden-state matching at all.
    LogitsOnly,
}

impl std::str::FromStr for LayerStrategy {
    type Err = GrainError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(Self::Full),
            "logits-only" => Ok(Self::LogitsOnly),
            other => Err(GrainError::Param(format!(
                "unknown layer map strategy {other:?} (expected full or logits-only)"
            ))),
        }
    }
}

impl std::fmt::Display for LayerStrategy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Full => "full",
            Self::LogitsOnly => "logits-only",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DistillConfig {
    pub tau: f64,
    pub hidden_weight: f64,
    pub layer_map: LayerStrategy,
}

impl Default for DistillConfig {
    fn default() -> Self {
        Self {
            tau: 8.0,
            hidden_weight: 1.0,
            layer_map: LayerStrategy::Full,
        }
    }
}

impl DistillConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(GrainError::Param(format!(
                "temperature must be > 0, got {}",
                self.tau
            )));
        }
        if !(self.hidden_weight >= 0.0 && self.hidden_weight.is_finite()) {
            return Err(GrainError::Param(format!(
                "hidden loss weight must be >= 0, got {}",
                self.hidden_weight
            )));
        }
        Ok(())
    }
}

/// Student/teacher layer pairs, each with a trainable `d × d` mapping held in
/// a store of its own.
#[derive(Clone, Debug)]
pub struct LayerMap<S: Scalar> {
    pub pairs: Vec<(usize, usize)>,
    pub mappings: Vec<ParamId>,
    pub params: ParamStore<S>,
}

pub fn build_layer_map<S: Scalar>(
    student_layers: usize,
    teacher_layers: usize,
    hidden: usize,
    strategy: LayerStrategy,
) -> Result<LayerMap<S>> {
    if student_layers != teacher_layers {
        return Err(GrainError::Contract(format!(
            "student has {student_layers} layers, teacher {teacher_layers}"
        )));
    }
    let mut params = ParamStore::new();
    let (pairs, mappings) = match strategy {
        LayerStrategy::LogitsOnly => (Vec::new(), Vec::new()),
        LayerStrategy::Full => (0..=student_layers)
            .map(|i| {
                let id = params.add(format!("map.{i}"), Tensor::identity(hidden));
                ((i, i), id)
            })
            .unzip(),
    };
    Ok(LayerMap {
        pairs,
        mappings,
        params,
    })
}

/// Teacher outputs as plain tensors, so nothing on the student's graph can
/// reach teacher parameters.
#[derive(Clone, Debug)]
pub struct TeacherStates<S> {
    pub layers: Vec<Tensor<S>>,
    pub logits: Tensor<S>,
}

pub fn teacher_states<S: Scalar>(
    teacher: &EncoderModel<S>,
    batch: &Batch,
) -> Result<TeacherStates<S>> {
    let mut g = Graph::new();
    let hs = teacher.forward(&mut g, batch)?;
    Ok(TeacherStates {
        layers: hs.layers.iter().map(|&v| g.value(v).clone()).collect(),
        logits: g.value(hs.logits).clone(),
    })
}

/// `(L_ce, L_hidden)`. The hidden loss is the weighted sum over layer pairs
/// of the mean squared error between mapped student states and teacher
/// states, restricted to `rows` (token positions) when given.
pub fn distill_losses<S: Scalar>(
    g: &mut Graph<S>,
    student: &HiddenStates,
    teacher: &TeacherStates<S>,
    cfg: &DistillConfig,
    map: &LayerMap<S>,
    rows: Option<&[usize]>,
) -> Result<(Var, Var)> {
    if g.shape(student.logits) != teacher.logits.shape() {
        return Err(GrainError::Contract(format!(
            "student logits {:?} vs teacher logits {:?}",
            g.shape(student.logits),
            teacher.logits.shape()
        )));
    }
    let t_logits = g.constant(teacher.logits.clone());
    let l_ce = g.soft_cross_entropy(student.logits, t_logits, S::of(cfg.tau))?;

    let mut total: Option<Var> = None;
    if cfg.hidden_weight > 0.0 {
        for (&(i, j), &m) in map.pairs.iter().zip(&map.mappings) {
            let (Some(&hs), Some(ht)) = (student.layers.get(i), teacher.layers.get(j)) else {
                return Err(GrainError::Contract(format!(
                    "layer pair ({i}, {j}) out of range"
                )));
            };
            if g.shape(hs) != ht.shape() {
                return Err(GrainError::Contract(format!(
                    "student state {:?} vs teacher state {:?} (sequence lengths differ?)",
                    g.shape(hs),
                    ht.shape()
                )));
            }
            let (hs, ht) = match rows {
                Some(r) => (g.gather_rows(hs, r)?, ht.select_rows(r)),
                None => (hs, ht.clone()),
            };
            let w = g.param(&map.params, m);
            let mapped = g.matmul(hs, w)?;
            let target = g.constant(ht);
            let mse = g.mse(mapped, target)?;
            total = Some(match total {
                Some(t) => g.add(t, mse)?,
                None => mse,
            });
        }
    }
    let l_hidden = match total {
        Some(t) if cfg.hidden_weight != 1.0 => g.scale(t, S::of(cfg.hidden_weight)),
        Some(t) => t,
        None => g.constant(Tensor::scalar(S::zero())),
    };
    Ok((l_ce, l_hidden))
}

/// Backward of both losses into the given stores. With `separate`, `L_ce`
/// lands in the CE channel and `L_hidden` in the auxiliary channel; without
/// it (ablation) their sum lands in the CE channel. Either way the optimizer
/// sees the same total gradient.
pub fn backprop_with_separation<S: Scalar>(
    g: &mut Graph<S>,
    l_ce: Var,
    l_hidden: Var,
    stores: &mut [&mut ParamStore<S>],
    separate: bool,
) -> Result<()> {
    if separate {
        g.backward_into(l_ce, GradChannel::Ce, stores)?;
        g.backward_into(l_hidden, GradChannel::Aux, stores)
    } else {
        let total = g.add(l_ce, l_hidden)?;
        g.backward_into(total, GradChannel::Ce, stores)
    }
}
