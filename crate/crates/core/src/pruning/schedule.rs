use crate::error::{GrainError, Result};

/// Cubic density schedule over `steps` training steps.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ScheduleParams {
    pub p_s: f64,
    pub p_e: f64,
    pub s_f: f64,
    pub steps: usize,
}

impl ScheduleParams {
    pub fn new(p_s: f64, p_e: f64, s_f: f64, steps: usize) -> Result<Self> {
        let sp = Self {
            p_s,
            p_e,
            s_f,
            steps,
        };
        sp.validate()?;
        Ok(sp)
    }

    pub fn validate(&self) -> Result<()> {
        let in_open = |x: f64| x > 0.0 && x < 1.0;
        if !in_open(self.p_s) || !in_open(self.p_e) || self.p_s >= self.p_e {
            return Err(GrainError::Param(format!(
                "schedule needs 0 < p_s < p_e < 1, got p_s={} p_e={}",
                self.p_s, self.p_e
            )));
        }
        if !(self.s_f > 0.0 && self.s_f <= 1.0) {
            return Err(GrainError::Param(format!(
                "final density must lie in (0, 1], got {}",
                self.s_f
            )));
        }
        if self.steps == 0 {
            return Err(GrainError::Param("schedule needs at least one step".into()));
        }
        Ok(())
    }

    /// Training fraction `t = i/N` of the 1-based step `i`.
    pub fn fraction(&self, step: usize) -> f64 {
        step as f64 / self.steps as f64
    }

    /// Target density at 1-based step `i`.
    pub fn at_step(&self, step: usize) -> f64 {
        density_schedule(self.fraction(step), self)
    }

    /// Whether step `i` falls in the pruning stage `p_s ≤ t ≤ p_e`.
    pub fn is_pruning_step(&self, step: usize) -> bool {
        let t = self.fraction(step);
        t >= self.p_s && t <= self.p_e
    }

    /// Stage 1, 2 or 3 of step `i`.
    pub fn stage(&self, step: usize) -> u8 {
        let t = self.fraction(step);
        if t < self.p_s {
            1
        } else if t <= self.p_e {
            2
        } else {
            3
        }
    }
}

/// `1` before `p_s`, `s_f` after `p_e`, a cubic decay in between.
pub fn density_schedule(t: f64, sp: &ScheduleParams) -> f64 {
    if t < sp.p_s {
        1.0
    } else if t <= sp.p_e {
        let x = 1.0 - (t - sp.p_s) / (sp.p_e - sp.p_s);
        sp.s_f + (1.0 - sp.s_f) * x * x * x
    } else {
        sp.s_f
    }
}
