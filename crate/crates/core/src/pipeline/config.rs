use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

use crate::distill::{DistillConfig, LayerStrategy};
use crate::error::{GrainError, Result};
use crate::model::ModelConfig;
use crate::pruning::check_pool_targets;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// Intra-attention pruning with embedding factorization.
    Grain,
    /// Same, keeping the full embedding table.
    GrainNoEf,
    /// Whole heads and FFN units pruned in two pools, with factorization.
    HeadsFfn,
    /// Uniform random scores in place of gradient importance, everything
    /// else as in `Grain`.
    RandomScore,
}

impl FromStr for Mode {
    type Err = GrainError;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "grain" => Mode::Grain,
            "grain-no-ef" => Mode::GrainNoEf,
            "heads-ffn" => Mode::HeadsFfn,
            "random-score" => Mode::RandomScore,
            other => return Err(GrainError::Config(format!(
                "unknown mode {other:?} (expected grain, grain-no-ef, heads-ffn or random-score)"
            ))),
        })
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Mode::Grain => "grain",
            Mode::GrainNoEf => "grain-no-ef",
            Mode::HeadsFfn => "heads-ffn",
            Mode::RandomScore => "random-score",
        })
    }
}

/// Everything a teacher or pruning run needs besides the data itself.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub p_s: f64,
    pub p_e: f64,
    pub final_density: f64,
    pub distill: DistillConfig,
    pub alpha: f64,
    pub beta: f64,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub seed: u64,
    pub mode: Mode,
    pub grad_sep: bool,
    pub ef_rank: usize,
    pub heads_density: Option<f64>,
    pub ffn_density: Option<f64>,
    pub teacher_epochs: usize,
    pub teacher_lr: f64,
    pub train_path: Option<PathBuf>,
    pub dev_path: Option<PathBuf>,
    pub train_size: usize,
    pub dev_size: usize,
    pub data_seed: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::desk(),
            p_s: 0.2,
            p_e: 0.4,
            final_density: 0.05,
            distill: DistillConfig::default(),
            alpha: 0.3,
            beta: 0.998,
            batch_size: 32,
            lr: 3e-4,
            weight_decay: 0.01,
            epochs: 5,
            seed: 0,
            mode: Mode::Grain,
            grad_sep: true,
            ef_rank: 16,
            heads_density: None,
            ffn_density: None,
            teacher_epochs: 5,
            teacher_lr: 2e-3,
            train_path: None,
            dev_path: None,
            train_size: 4000,
            dev_size: 1000,
            data_seed: 0,
        }
    }
}

fn parse_value<T: FromStr>(key: &str, value: &str, line: usize) -> Result<T> {
    value
        .parse()
        .map_err(|_| GrainError::Config(format!("line {line}: invalid value {value:?} for {key}")))
}

impl RunConfig {
    /// Parses `key = value` lines on top of the defaults. `#` starts a
    /// comment; unknown keys are rejected. The result is validated.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (idx, raw) in text.lines().enumerate() {
            let line = idx + 1;
            let content = raw.split('#').next().unwrap_or("").trim();
            if content.is_empty() {
                continue;
            }
            let Some((key, value)) = content.split_once('=') else {
                return Err(GrainError::Config(format!(
                    "line {line}: expected `key = value`, got {content:?}"
                )));
            };
            cfg.set(key.trim(), value.trim(), line)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    /// Sets one field from its textual form. `line` is only used in messages.
    pub fn set(&mut self, key: &str, value: &str, line: usize) -> Result<()> {
        let m = &mut self.model;
        match key {
            "hidden" => m.hidden = parse_value(key, value, line)?,
            "head_size" => m.head_size = parse_value(key, value, line)?,
            "heads" => m.heads = parse_value(key, value, line)?,
            "ffn_size" => m.ffn_size = parse_value(key, value, line)?,
            "layers" => m.layers = parse_value(key, value, line)?,
            "vocab" => m.vocab = parse_value(key, value, line)?,
            "max_len" => m.max_len = parse_value(key, value, line)?,
            "classes" => m.classes = parse_value(key, value, line)?,
            "p_s" => self.p_s = parse_value(key, value, line)?,
            "p_e" => self.p_e = parse_value(key, value, line)?,
            "final_density" => self.final_density = parse_value(key, value, line)?,
            "tau" => self.distill.tau = parse_value(key, value, line)?,
            "hidden_weight" => self.distill.hidden_weight = parse_value(key, value, line)?,
            "layer_map" => {
                self.distill.layer_map = value
                    .parse::<LayerStrategy>()
                    .map_err(|e| GrainError::Config(format!("line {line}: {e}")))?
            }
            "alpha" => self.alpha = parse_value(key, value, line)?,
            "beta" => self.beta = parse_value(key, value, line)?,
            "batch_size" => self.batch_size = parse_value(key, value, line)?,
            "lr" => self.lr = parse_value(key, value, line)?,
            "weight_decay" => self.weight_decay = parse_value(key, value, line)?,
            "epochs" => self.epochs = parse_value(key, value, line)?,
            "seed" => self.seed = parse_value(key, value, line)?,
            "mode" => self.mode = value.parse()?,
            "grad_sep" => self.grad_sep = parse_value(key, value, line)?,
            "ef_rank" => self.ef_rank = parse_value(key, value, line)?,
            "heads_density" => self.heads_density = Some(parse_value(key, value, line)?),
            "ffn_density" => self.ffn_density = Some(parse_value(key, value, line)?),
            "teacher_epochs" => self.teacher_epochs = parse_value(key, value, line)?,
            "teacher_lr" => self.teacher_lr = parse_value(key, value, line)?,
            "train_path" => self.train_path = Some(PathBuf::from(value)),
            "dev_path" => self.dev_path = Some(PathBuf::from(value)),
            "train_size" => self.train_size = parse_value(key, value, line)?,
            "dev_size" => self.dev_size = parse_value(key, value, line)?,
            "data_seed" => self.data_seed = parse_value(key, value, line)?,
            other => {
                return Err(GrainError::Config(format!(
                    "line {line}: unknown key {other:?}"
                )))
            }
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let config = |e: GrainError| match e {
            GrainError::Param(msg) | GrainError::Contract(msg) => GrainError::Config(msg),
            other => other,
        };
        self.model.validate().map_err(config)?;
        self.distill.validate().map_err(config)?;
        crate::pruning::ScheduleParams::new(self.p_s, self.p_e, self.final_density, 1)
            .map_err(config)?;
        let bad = |msg: String| Err(GrainError::Config(msg));
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return bad(format!("alpha must be >= 0, got {}", self.alpha));
        }
        if !(0.0..=1.0).contains(&self.beta) {
            return bad(format!("beta must lie in [0, 1], got {}", self.beta));
        }
        if self.batch_size == 0 {
            return bad("batch_size must be >= 1".into());
        }
        for (name, v) in [("lr", self.lr), ("teacher_lr", self.teacher_lr)] {
            if !(v > 0.0 && v.is_finite()) {
                return bad(format!("{name} must be > 0, got {v}"));
            }
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return bad(format!(
                "weight_decay must be >= 0, got {}",
                self.weight_decay
            ));
        }
        if self.epochs == 0 {
            return bad("epochs must be >= 1".into());
        }
        let max_rank = self.model.vocab.min(self.model.hidden);
        if self.mode != Mode::GrainNoEf && (self.ef_rank == 0 || self.ef_rank > max_rank) {
            return bad(format!(
                "ef_rank must lie in [1, {max_rank}], got {}",
                self.ef_rank
            ));
        }
        match (self.mode, self.heads_density, self.ffn_density) {
            (Mode::HeadsFfn, Some(h), Some(f)) => {
                check_pool_targets(&self.model, h, f, self.final_density).map_err(config)?;
                for (name, v) in [("heads_density", h), ("ffn_density", f)] {
                    if v <= 0.0 {
                        return bad(format!("{name} must be > 0, got {v}"));
                    }
                }
            }
            (Mode::HeadsFfn, _, _) => {
                return bad("heads-ffn mode needs both heads_density and ffn_density".into())
            }
            (_, None, None) => {}
            _ => return bad("heads_density and ffn_density only apply to heads-ffn mode".into()),
        }
        if self.train_size == 0 || self.dev_size == 0 {
            return bad("train_size and dev_size must be >= 1".into());
        }
        Ok(())
    }

    /// Canonical `key = value` form; parsing it gives back the same config.
    pub fn to_text(&self) -> String {
        let m = &self.model;
        let mut lines = vec![
            format!("hidden = {}", m.hidden),
            format!("head_size = {}", m.head_size),
            format!("heads = {}", m.heads),
            format!("ffn_size = {}", m.ffn_size),
            format!("layers = {}", m.layers),
            format!("vocab = {}", m.vocab),
            format!("max_len = {}", m.max_len),
            format!("classes = {}", m.classes),
            format!("p_s = {}", self.p_s),
            format!("p_e = {}", self.p_e),
            format!("final_density = {}", self.final_density),
            format!("tau = {}", self.distill.tau),
            format!("hidden_weight = {}", self.distill.hidden_weight),
            format!("layer_map = {}", self.distill.layer_map),
            format!("alpha = {}", self.alpha),
            format!("beta = {}", self.beta),
            format!("batch_size = {}", self.batch_size),
            format!("lr = {}", self.lr),
            format!("weight_decay = {}", self.weight_decay),
            format!("epochs = {}", self.epochs),
            format!("seed = {}", self.seed),
            format!("mode = {}", self.mode),
            format!("grad_sep = {}", self.grad_sep),
            format!("ef_rank = {}", self.ef_rank),
        ];
        if let Some(h) = self.heads_density {
            lines.push(format!("heads_density = {h}"));
        }
        if let Some(f) = self.ffn_density {
            lines.push(format!("ffn_density = {f}"));
        }
        lines.extend([
            format!("teacher_epochs = {}", self.teacher_epochs),
            format!("teacher_lr = {}", self.teacher_lr),
        ]);
        if let Some(p) = &self.train_path {
            lines.push(format!("train_path = {}", p.display()));
        }
        if let Some(p) = &self.dev_path {
            lines.push(format!("dev_path = {}", p.display()));
        }
        lines.extend([
            format!("train_size = {}", self.train_size),
            format!("dev_size = {}", self.dev_size),
            format!("data_seed = {}", self.data_seed),
        ]);
        let mut text = lines.join("\n");
        text.push('\n');
        text
    }
}
