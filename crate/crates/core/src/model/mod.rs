//! BERT-style post-norm encoder whose attention heads and FFN layers are
//! addressable, and maskable, one pruning unit at a time.
//!
//! Each head keeps its own `d_h × d` matrices. Query units are paired rows of
//! `W_Q`/`W_K`; value units are paired rows of `W_V`/`W_O`; FFN units are a
//! column of `W_1` with the matching row of `W_2`. A masked unit has all of
//! its weights at exactly zero.

mod checkpoint;
mod compact;
mod config;
mod forward;

pub use checkpoint::{
    load_checkpoint, read_checkpoint, save_checkpoint, write_atomic, write_checkpoint,
};
pub use config::ModelConfig;
pub use forward::{ForwardCtx, HiddenStates};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::autodiff::{GradChannel, ParamId, ParamStore};
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AttentionHead {
    pub wq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
    pub wo: ParamId,
    pub query_mask: Vec<bool>,
    pub value_mask: Vec<bool>,
}

impl AttentionHead {
    pub fn live_queries(&self) -> usize {
        self.query_mask.iter().filter(|&&m| m).count()
    }

    pub fn live_values(&self) -> usize {
        self.value_mask.iter().filter(|&&m| m).count()
    }

    /// A head contributes to the output only while it has value units.
    pub fn is_live(&self) -> bool {
        self.live_values() > 0
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EncoderBlock {
    pub heads: Vec<AttentionHead>,
    pub ln1_gain: ParamId,
    pub ln1_bias: ParamId,
    /// `d × d_f`.
    pub w1: ParamId,
    /// `d_f × d`.
    pub w2: ParamId,
    pub ffn_mask: Vec<bool>,
    pub ln2_gain: ParamId,
    pub ln2_bias: ParamId,
}

impl EncoderBlock {
    pub fn live_ffn(&self) -> usize {
        self.ffn_mask.iter().filter(|&&m| m).count()
    }

    pub fn live_heads(&self) -> usize {
        self.heads.iter().filter(|h| h.is_live()).count()
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Embedding {
    Full {
        table: ParamId,
    },
    /// `W_r: q × r` and `V_r: r × d`.
    Factorized {
        w: ParamId,
        v: ParamId,
        rank: usize,
    },
}

#[derive(Clone, Debug)]
pub struct EncoderModel<S: Scalar> {
    pub config: ModelConfig,
    pub params: ParamStore<S>,
    pub embedding: Embedding,
    pub position: ParamId,
    pub emb_ln_gain: ParamId,
    pub emb_ln_bias: ParamId,
    pub blocks: Vec<EncoderBlock>,
    /// `d × K`.
    pub cls_w: ParamId,
    pub cls_b: ParamId,
}

fn normal<S: Scalar>(rng: &mut ChaCha8Rng, shape: &[usize], std: f64) -> Tensor<S> {
    Tensor::from_fn(shape, |_| S::of(rng.sample::<f64, _>(StandardNormal) * std))
}

impl<S: Scalar> EncoderModel<S> {
    /// Randomly initialised, unpruned model.
    pub fn init(config: ModelConfig, seed: u64) -> crate::Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (d, dh, df) = (config.hidden, config.head_size, config.ffn_size);
        let mut params = ParamStore::new();
        let table = params.add("embedding.table", normal(&mut rng, &[config.vocab, d], 1.0));
        let position = params.add("position", normal(&mut rng, &[config.max_len, d], 1.0));
        let emb_ln_gain = params.add("embedding.ln.gain", Tensor::filled(&[d], S::one()));
        let emb_ln_bias = params.add("embedding.ln.bias", Tensor::zeros(&[d]));
        let attn_std = 1.0 / (d as f64).sqrt();
        let mut blocks = Vec::with_capacity(config.layers);
        for l in 0..config.layers {
            let heads = (0..config.heads)
                .map(|h| {
                    let mut add = |name: &str| {
                        params.add(
                            format!("layer.{l}.head.{h}.{name}"),
                            normal(&mut rng, &[dh, d], attn_std),
                        )
                    };
                    AttentionHead {
                        wq: add("wq"),
                        wk: add("wk"),
                        wv: add("wv"),
                        wo: add("wo"),
                        query_mask: vec![true; dh],
                        value_mask: vec![true; dh],
                    }
                })
                .collect();
            let ln1_gain = params.add(
                format!("layer.{l}.ln1.gain"),
                Tensor::filled(&[d], S::one()),
            );
            let ln1_bias = params.add(format!("layer.{l}.ln1.bias"), Tensor::zeros(&[d]));
            let w1 = params.add(
                format!("layer.{l}.ffn.w1"),
                normal(&mut rng, &[d, df], attn_std),
            );
            let w2 = params.add(
                format!("layer.{l}.ffn.w2"),
                normal(&mut rng, &[df, d], 1.0 / (df as f64).sqrt()),
            );
            let ln2_gain = params.add(
                format!("layer.{l}.ln2.gain"),
                Tensor::filled(&[d], S::one()),
            );
            let ln2_bias = params.add(format!("layer.{l}.ln2.bias"), Tensor::zeros(&[d]));
            blocks.push(EncoderBlock {
                heads,
                ln1_gain,
                ln1_bias,
                w1,
                w2,
                ffn_mask: vec![true; df],
                ln2_gain,
                ln2_bias,
            });
        }
        let cls_w = params.add(
            "classifier.w",
            normal(&mut rng, &[d, config.classes], attn_std),
        );
        let cls_b = params.add("classifier.b", Tensor::zeros(&[config.classes]));
        Ok(Self {
            config,
            params,
            embedding: Embedding::Full { table },
            position,
            emb_ln_gain,
            emb_ln_bias,
            blocks,
            cls_w,
            cls_b,
        })
    }

    /// Live weights in the attention and FFN matrices.
    pub fn count_prunable_params(&self) -> usize {
        let d = self.config.hidden;
        self.blocks
            .iter()
            .map(|b| {
                let attn: usize = b
                    .heads
                    .iter()
                    .map(|h| 2 * d * (h.live_queries() + h.live_values()))
                    .sum();
                attn + 2 * d * b.live_ffn()
            })
            .sum()
    }

    /// Live prunable weights relative to the unpruned geometry.
    pub fn model_density(&self) -> f64 {
        self.count_prunable_params() as f64 / self.config.prunable_params() as f64
    }

    pub fn embedding_params(&self) -> usize {
        match &self.embedding {
            Embedding::Full { table } => self.params.value(*table).len(),
            Embedding::Factorized { w, v, .. } => {
                self.params.value(*w).len() + self.params.value(*v).len()
            }
        }
    }

    /// Every stored parameter, prunable or not, excluding masked weights.
    pub fn total_params(&self) -> usize {
        let stored: usize = self.params.iter().map(|(_, p)| p.value.len()).sum();
        let mut masked = 0;
        let d = self.config.hidden;
        for b in &self.blocks {
            for h in &b.heads {
                masked += 2 * d * (h.query_mask.len() - h.live_queries());
                masked += 2 * d * (h.value_mask.len() - h.live_values());
            }
            masked += 2 * d * (b.ffn_mask.len() - b.live_ffn());
        }
        stored - masked
    }

    pub fn live_heads(&self) -> usize {
        self.blocks.iter().map(EncoderBlock::live_heads).sum()
    }

    /// Parameters belonging to one head, in `wq, wk, wv, wo` order.
    fn head_params(&self, layer: usize, head: usize) -> [ParamId; 4] {
        let h = &self.blocks[layer].heads[head];
        [h.wq, h.wk, h.wv, h.wo]
    }

    fn zero_row(&mut self, id: ParamId, row: usize, include_value: bool) {
        let p = self.params.get_mut(id);
        if include_value {
            p.value.row_mut(row).iter_mut().for_each(|x| *x = S::zero());
        }
        p.grad_ce
            .row_mut(row)
            .iter_mut()
            .for_each(|x| *x = S::zero());
        p.grad_aux
            .row_mut(row)
            .iter_mut()
            .for_each(|x| *x = S::zero());
    }

    fn zero_col(&mut self, id: ParamId, col: usize, include_value: bool) {
        let p = self.params.get_mut(id);
        let zero_in = |t: &mut Tensor<S>| {
            let rows = t.rows();
            for r in 0..rows {
                t.set(r, col, S::zero());
            }
        };
        if include_value {
            zero_in(&mut p.value);
        }
        zero_in(&mut p.grad_ce);
        zero_in(&mut p.grad_aux);
    }

    pub fn prune_query(&mut self, layer: usize, head: usize, row: usize) {
        self.blocks[layer].heads[head].query_mask[row] = false;
        let [wq, wk, _, _] = self.head_params(layer, head);
        self.zero_row(wq, row, true);
        self.zero_row(wk, row, true);
    }

    pub fn prune_value(&mut self, layer: usize, head: usize, row: usize) {
        self.blocks[layer].heads[head].value_mask[row] = false;
        let [_, _, wv, wo] = self.head_params(layer, head);
        self.zero_row(wv, row, true);
        self.zero_row(wo, row, true);
    }

    pub fn prune_ffn(&mut self, layer: usize, unit: usize) {
        self.blocks[layer].ffn_mask[unit] = false;
        let (w1, w2) = (self.blocks[layer].w1, self.blocks[layer].w2);
        self.zero_col(w1, unit, true);
        self.zero_row(w2, unit, true);
    }

    fn apply_masks(&mut self, include_value: bool) {
        for l in 0..self.blocks.len() {
            for h in 0..self.blocks[l].heads.len() {
                let head = self.blocks[l].heads[h].clone();
                for (r, _) in head.query_mask.iter().enumerate().filter(|(_, &m)| !m) {
                    self.zero_row(head.wq, r, include_value);
                    self.zero_row(head.wk, r, include_value);
                }
                for (r, _) in head.value_mask.iter().enumerate().filter(|(_, &m)| !m) {
                    self.zero_row(head.wv, r, include_value);
                    self.zero_row(head.wo, r, include_value);
                }
            }
            let block = &self.blocks[l];
            let (w1, w2) = (block.w1, block.w2);
            let dead: Vec<usize> = block
                .ffn_mask
                .iter()
                .enumerate()
                .filter(|(_, &m)| !m)
                .map(|(j, _)| j)
                .collect();
            for j in dead {
                self.zero_col(w1, j, include_value);
                self.zero_row(w2, j, include_value);
            }
        }
    }

    /// Zeroes both gradient channels on every pruned row or column.
    pub fn mask_gradients(&mut self) {
        self.apply_masks(false);
    }

    /// Zeroes weights and gradients of every pruned unit.
    pub fn enforce_masks(&mut self) {
        self.apply_masks(true);
    }

    /// Largest absolute weight stored in any pruned unit (0 when masks hold).
    pub fn masked_weight_max(&self) -> f64 {
        let mut worst = 0.0f64;
        for b in &self.blocks {
            for h in &b.heads {
                for (r, &live) in h.query_mask.iter().enumerate() {
                    if !live {
                        for id in [h.wq, h.wk] {
                            worst = self
                                .params
                                .value(id)
                                .row(r)
                                .iter()
                                .fold(worst, |m, x| m.max(x.as_f64().abs()));
                        }
                    }
                }
                for (r, &live) in h.value_mask.iter().enumerate() {
                    if !live {
                        for id in [h.wv, h.wo] {
                            worst = self
                                .params
                                .value(id)
                                .row(r)
                                .iter()
                                .fold(worst, |m, x| m.max(x.as_f64().abs()));
                        }
                    }
                }
            }
            let (w1, w2) = (self.params.value(b.w1), self.params.value(b.w2));
            for (j, &live) in b.ffn_mask.iter().enumerate() {
                if !live {
                    for r in 0..w1.rows() {
                        worst = worst.max(w1.at(r, j).as_f64().abs());
                    }
                    worst = w2.row(j).iter().fold(worst, |m, x| m.max(x.as_f64().abs()));
                }
            }
        }
        worst
    }

    pub fn zero_grads(&mut self) {
        self.params.zero_grads();
    }

    /// Sum over both channels, the gradient the optimizer consumes.
    pub fn total_grad(&self, id: ParamId) -> Tensor<S> {
        let p = self.params.get(id);
        let mut g = p.grad(GradChannel::Ce).clone();
        g.add_assign(p.grad(GradChannel::Aux));
        g
    }

    pub fn cast<T: Scalar>(&self) -> EncoderModel<T> {
        let mut params = ParamStore::new();
        for (_, p) in self.params.iter() {
            let id = params.add(p.name.clone(), p.value.cast());
            params.get_mut(id).trainable = p.trainable;
        }
        EncoderModel {
            config: self.config,
            params,
            embedding: self.embedding.clone(),
            position: self.position,
            emb_ln_gain: self.emb_ln_gain,
            emb_ln_bias: self.emb_ln_bias,
            blocks: self.blocks.clone(),
            cls_w: self.cls_w,
            cls_b: self.cls_b,
        }
    }
}

#[cfg(test)]
mod tests;
