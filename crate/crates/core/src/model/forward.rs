use crate::autodiff::{Graph, Var};
use crate::data::{Batch, PAD};
use crate::error::{GrainError, Result};
use crate::model::{AttentionHead, Embedding, EncoderBlock, EncoderModel};
use crate::tensor::{Scalar, Tensor};

/// Per-batch values shared by every attention head.
pub struct ForwardCtx {
    pub batch: usize,
    pub seq_len: usize,
    /// Additive `(batch·seq_len) × seq_len` padding mask.
    pub attn_mask: Var,
}

impl ForwardCtx {
    pub fn new<S: Scalar>(g: &mut Graph<S>, batch: &Batch) -> Self {
        let n = batch.seq_len;
        let mask = Tensor::from_fn(&[batch.batch * n, n], |i| {
            let b = i / (n * n);
            let j = i % n;
            if batch.tokens[b * n + j] == PAD {
                S::of(-1e9)
            } else {
                S::zero()
            }
        });
        Self {
            batch: batch.batch,
            seq_len: n,
            attn_mask: g.constant(mask),
        }
    }
}

/// `H_0 … H_L` as `(batch·seq_len) × d` nodes, plus `batch × K` logits.
pub struct HiddenStates {
    pub layers: Vec<Var>,
    pub logits: Var,
}

impl<S: Scalar> EncoderModel<S> {
    fn check_tokens(&self, batch: &Batch) -> Result<()> {
        if batch.seq_len > self.config.max_len {
            return Err(GrainError::Input(format!(
                "sequence length {} exceeds max_len {}",
                batch.seq_len, self.config.max_len
            )));
        }
        if let Some(&bad) = batch
            .tokens
            .iter()
            .find(|&&t| t as usize >= self.config.vocab)
        {
            return Err(GrainError::Input(format!(
                "token id {bad} out of range for vocabulary size {}",
                self.config.vocab
            )));
        }
        Ok(())
    }

    /// Token plus position embedding followed by layer norm.
    pub fn embed(&self, g: &mut Graph<S>, batch: &Batch) -> Result<Var> {
        let ids: Vec<usize> = batch.tokens.iter().map(|&t| t as usize).collect();
        let tokens = match &self.embedding {
            Embedding::Full { table } => {
                let e = g.param(&self.params, *table);
                g.gather_rows(e, &ids)?
            }
            Embedding::Factorized { w, v, .. } => {
                let wr = g.param(&self.params, *w);
                let vr = g.param(&self.params, *v);
                let rows = g.gather_rows(wr, &ids)?;
                g.matmul(rows, vr)?
            }
        };
        let positions: Vec<usize> = (0..batch.tokens.len()).map(|i| i % batch.seq_len).collect();
        let p = g.param(&self.params, self.position);
        let pos = g.gather_rows(p, &positions)?;
        let x = g.add(tokens, pos)?;
        let gain = g.param(&self.params, self.emb_ln_gain);
        let bias = g.param(&self.params, self.emb_ln_bias);
        g.layer_norm(x, gain, bias)
    }

    /// One head's contribution, or `None` for a head without value units
    /// (its output is identically zero).
    pub fn attention_head_forward(
        &self,
        g: &mut Graph<S>,
        x: Var,
        head: &AttentionHead,
        ctx: &ForwardCtx,
    ) -> Result<Option<Var>> {
        if !head.is_live() {
            return Ok(None);
        }
        let wq = g.param(&self.params, head.wq);
        let wk = g.param(&self.params, head.wk);
        let wv = g.param(&self.params, head.wv);
        let wo = g.param(&self.params, head.wo);
        let q = g.matmul_nt(x, wq)?;
        let k = g.matmul_nt(x, wk)?;
        let scores = g.batched_matmul_nt(q, k, ctx.batch)?;
        let scale = S::one() / S::of(head.live_queries().max(1) as f64).sqrt();
        let scores = g.scale(scores, scale);
        let scores = g.add(scores, ctx.attn_mask)?;
        let probs = g.softmax_rows(scores);
        let v = g.matmul_nt(x, wv)?;
        let mixed = g.batched_matmul(probs, v, ctx.batch)?;
        Ok(Some(g.matmul(mixed, wo)?))
    }

    /// Sum of the head outputs, in head order. `None` when no head is live.
    pub fn mha_pre_residual(
        &self,
        g: &mut Graph<S>,
        x: Var,
        block: &EncoderBlock,
        ctx: &ForwardCtx,
    ) -> Result<Option<Var>> {
        let mut total: Option<Var> = None;
        for head in &block.heads {
            if let Some(out) = self.attention_head_forward(g, x, head, ctx)? {
                total = Some(match total {
                    Some(t) => g.add(t, out)?,
                    None => out,
                });
            }
        }
        Ok(total)
    }

    /// Multi-head attention with residual and post layer norm.
    pub fn mha_forward(
        &self,
        g: &mut Graph<S>,
        x: Var,
        block: &EncoderBlock,
        ctx: &ForwardCtx,
    ) -> Result<Var> {
        let residual = match self.mha_pre_residual(g, x, block, ctx)? {
            Some(attn) => g.add(x, attn)?,
            None => x,
        };
        let gain = g.param(&self.params, block.ln1_gain);
        let bias = g.param(&self.params, block.ln1_bias);
        g.layer_norm(residual, gain, bias)
    }

    /// `GeLU(X·W_1)·W_2` before the residual.
    pub fn ffn_pre_residual(&self, g: &mut Graph<S>, x: Var, block: &EncoderBlock) -> Result<Var> {
        let w1 = g.param(&self.params, block.w1);
        let w2 = g.param(&self.params, block.w2);
        let h = g.matmul(x, w1)?;
        let h = g.gelu(h);
        g.matmul(h, w2)
    }

    pub fn ffn_forward(&self, g: &mut Graph<S>, x: Var, block: &EncoderBlock) -> Result<Var> {
        let f = self.ffn_pre_residual(g, x, block)?;
        let residual = g.add(x, f)?;
        let gain = g.param(&self.params, block.ln2_gain);
        let bias = g.param(&self.params, block.ln2_bias);
        g.layer_norm(residual, gain, bias)
    }

    pub fn forward(&self, g: &mut Graph<S>, batch: &Batch) -> Result<HiddenStates> {
        self.check_tokens(batch)?;
        let ctx = ForwardCtx::new(g, batch);
        let mut x = self.embed(g, batch)?;
        let mut layers = Vec::with_capacity(self.blocks.len() + 1);
        layers.push(x);
        for block in &self.blocks {
            x = self.mha_forward(g, x, block, &ctx)?;
            x = self.ffn_forward(g, x, block)?;
            layers.push(x);
        }
        let first: Vec<usize> = (0..batch.batch).map(|b| b * batch.seq_len).collect();
        let pooled = g.gather_rows(x, &first)?;
        let w = g.param(&self.params, self.cls_w);
        let b = g.param(&self.params, self.cls_b);
        let logits = g.matmul(pooled, w)?;
        let logits = g.add_row(logits, b)?;
        Ok(HiddenStates { layers, logits })
    }

    /// Logits of a batch, without keeping the graph.
    pub fn logits(&self, batch: &Batch) -> Result<Tensor<S>> {
        let mut g = Graph::new();
        let hs = self.forward(&mut g, batch)?;
        Ok(g.value(hs.logits).clone())
    }
}
