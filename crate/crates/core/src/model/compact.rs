use crate::autodiff::{ParamId, ParamStore};
use crate::model::{AttentionHead, Embedding, EncoderBlock, EncoderModel};
use crate::tensor::Scalar;

fn live_indices(mask: &[bool]) -> Vec<usize> {
    mask.iter()
        .enumerate()
        .filter(|(_, &m)| m)
        .map(|(i, _)| i)
        .collect()
}

impl<S: Scalar> EncoderModel<S> {
    /// Physically removes pruned rows and columns and drops heads without
    /// value units. Head indices are renumbered densely within each block.
    pub fn compact(&self) -> EncoderModel<S> {
        let mut params = ParamStore::new();
        let copy = |params: &mut ParamStore<S>, id: ParamId, name: String| {
            params.add(name, self.params.value(id).clone())
        };
        let embedding = match &self.embedding {
            Embedding::Full { table } => Embedding::Full {
                table: copy(&mut params, *table, "embedding.table".into()),
            },
            Embedding::Factorized { w, v, rank } => Embedding::Factorized {
                w: copy(&mut params, *w, "embedding.w".into()),
                v: copy(&mut params, *v, "embedding.v".into()),
                rank: *rank,
            },
        };
        let position = copy(&mut params, self.position, "position".into());
        let emb_ln_gain = copy(&mut params, self.emb_ln_gain, "embedding.ln.gain".into());
        let emb_ln_bias = copy(&mut params, self.emb_ln_bias, "embedding.ln.bias".into());

        let mut blocks = Vec::with_capacity(self.blocks.len());
        for (l, block) in self.blocks.iter().enumerate() {
            let mut heads = Vec::new();
            for head in block.heads.iter().filter(|h| h.is_live()) {
                let h = heads.len();
                let q_rows = live_indices(&head.query_mask);
                let v_rows = live_indices(&head.value_mask);
                let mut take = |id: ParamId, rows: &[usize], name: &str| {
                    params.add(
                        format!("layer.{l}.head.{h}.{name}"),
                        self.params.value(id).select_rows(rows),
                    )
                };
                heads.push(AttentionHead {
                    wq: take(head.wq, &q_rows, "wq"),
                    wk: take(head.wk, &q_rows, "wk"),
                    wv: take(head.wv, &v_rows, "wv"),
                    wo: take(head.wo, &v_rows, "wo"),
                    query_mask: vec![true; q_rows.len()],
                    value_mask: vec![true; v_rows.len()],
                });
            }
            let ffn = live_indices(&block.ffn_mask);
            let ln1_gain = copy(&mut params, block.ln1_gain, format!("layer.{l}.ln1.gain"));
            let ln1_bias = copy(&mut params, block.ln1_bias, format!("layer.{l}.ln1.bias"));
            let w1 = params.add(
                format!("layer.{l}.ffn.w1"),
                self.params.value(block.w1).select_cols(&ffn),
            );
            let w2 = params.add(
                format!("layer.{l}.ffn.w2"),
                self.params.value(block.w2).select_rows(&ffn),
            );
            let ln2_gain = copy(&mut params, block.ln2_gain, format!("layer.{l}.ln2.gain"));
            let ln2_bias = copy(&mut params, block.ln2_bias, format!("layer.{l}.ln2.bias"));
            blocks.push(EncoderBlock {
                heads,
                ln1_gain,
                ln1_bias,
                w1,
                w2,
                ffn_mask: vec![true; ffn.len()],
                ln2_gain,
                ln2_bias,
            });
        }
        let cls_w = copy(&mut params, self.cls_w, "classifier.w".into());
        let cls_b = copy(&mut params, self.cls_b, "classifier.b".into());
        EncoderModel {
            config: self.config,
            params,
            embedding,
            position,
            emb_ln_gain,
            emb_ln_bias,
            blocks,
            cls_w,
            cls_b,
        }
    }
}
