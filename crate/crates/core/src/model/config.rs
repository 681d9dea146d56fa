use crate::error::{GrainError, Result};

/// Encoder geometry.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ModelConfig {
    /// Hidden size `d`.
    pub hidden: usize,
    /// Head size `d_h`.
    pub head_size: usize,
    /// Heads per layer `N_h`.
    pub heads: usize,
    /// FFN intermediate size `d_f`.
    pub ffn_size: usize,
    pub layers: usize,
    pub vocab: usize,
    pub max_len: usize,
    pub classes: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl ModelConfig {
    /// Small geometry that trains in seconds on one core.
    pub fn desk() -> Self {
        Self {
            hidden: 64,
            head_size: 16,
            heads: 4,
            ffn_size: 256,
            layers: 4,
            vocab: 64,
            max_len: 32,
            classes: 2,
        }
    }

    /// BERT-base sized geometry, only used for parameter arithmetic.
    pub fn bert_base() -> Self {
        Self {
            hidden: 768,
            head_size: 64,
            heads: 12,
            ffn_size: 3072,
            layers: 12,
            vocab: 30522,
            max_len: 512,
            classes: 2,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let sizes = [
            ("hidden", self.hidden),
            ("head_size", self.head_size),
            ("heads", self.heads),
            ("ffn_size", self.ffn_size),
            ("layers", self.layers),
            ("vocab", self.vocab),
            ("max_len", self.max_len),
            ("classes", self.classes),
        ];
        if let Some((name, _)) = sizes.iter().find(|(_, v)| *v == 0) {
            return Err(GrainError::Config(format!("{name} must be at least 1")));
        }
        if self.hidden != self.heads * self.head_size {
            return Err(GrainError::Config(format!(
                "hidden ({}) must equal heads ({}) x head_size ({})",
                self.hidden, self.heads, self.head_size
            )));
        }
        Ok(())
    }

    /// Parameters carried by one pruning unit (query, value or FFN).
    pub fn unit_params(&self) -> usize {
        2 * self.hidden
    }

    pub fn attention_params(&self) -> usize {
        self.layers * 4 * self.hidden * self.hidden
    }

    pub fn ffn_params(&self) -> usize {
        self.layers * 2 * self.hidden * self.ffn_size
    }

    /// Prunable weights of the unpruned encoder (attention and FFN matrices).
    pub fn prunable_params(&self) -> usize {
        self.attention_params() + self.ffn_params()
    }

    /// Parameters of one whole attention head.
    pub fn head_params(&self) -> usize {
        4 * self.head_size * self.hidden
    }
}
