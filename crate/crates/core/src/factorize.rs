//! Truncated SVD of the word-embedding matrix.

use std::collections::HashMap;

use crate::autodiff::{ParamId, ParamStore};
use crate::error::{GrainError, Result};
use crate::model::{Embedding, EncoderModel};
use crate::tensor::{Scalar, Tensor};

/// Thin singular value decomposition `A = U·diag(s)·Vᵀ` of an `m×n` matrix,
/// with `k = min(m, n)` singular values sorted in descending order.
#[derive(Clone, Debug)]
pub struct Svd {
    /// `m × k`.
    pub u: Tensor<f64>,
    pub s: Vec<f64>,
    /// `k × n`.
    pub vt: Tensor<f64>,
}

/// One-sided Jacobi SVD.
pub fn svd(a: &Tensor<f64>) -> Svd {
    let (m, n) = a.dims2();
    if m < n {
        let t = svd(&a.transpose());
        return Svd {
            u: t.vt.transpose(),
            s: t.s,
            vt: t.u.transpose(),
        };
    }
    // Columns of A, rotated in place until mutually orthogonal.
    let mut cols: Vec<Vec<f64>> = (0..n)
        .map(|j| (0..m).map(|i| a.at(i, j)).collect())
        .collect();
    let mut v: Vec<Vec<f64>> = (0..n)
        .map(|j| (0..n).map(|i| f64::from(u8::from(i == j))).collect())
        .collect();
    let dot = |x: &[f64], y: &[f64]| x.iter().zip(y).map(|(a, b)| a * b).sum::<f64>();
    let rotate = |x: &mut Vec<Vec<f64>>, p: usize, q: usize, c: f64, s: f64| {
        let (lo, hi) = x.split_at_mut(q);
        for (xp, xq) in lo[p].iter_mut().zip(hi[0].iter_mut()) {
            let (a, b) = (*xp, *xq);
            *xp = c * a - s * b;
            *xq = s * a + c * b;
        }
    };
    for _sweep in 0..100 {
        let mut rotated = false;
        for p in 0..n {
            for q in p + 1..n {
                let alpha = dot(&cols[p], &cols[p]);
                let beta = dot(&cols[q], &cols[q]);
                let gamma = dot(&cols[p], &cols[q]);
                if gamma == 0.0 || gamma.abs() <= 1e-15 * (alpha * beta).sqrt() {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                rotate(&mut cols, p, q, c, s);
                rotate(&mut v, p, q, c, s);
            }
        }
        if !rotated {
            break;
        }
    }
    let norms: Vec<f64> = cols.iter().map(|c| dot(c, c).sqrt()).collect();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| norms[j].total_cmp(&norms[i]).then(i.cmp(&j)));
    let s: Vec<f64> = order.iter().map(|&j| norms[j]).collect();
    let scale = s.first().copied().unwrap_or(0.0);
    let u = Tensor::from_fn(&[m, n], |idx| {
        let (i, k) = (idx / n, idx % n);
        let j = order[k];
        if norms[j] > 1e-300 && norms[j] > 1e-15 * scale {
            cols[j][i] / norms[j]
        } else {
            0.0
        }
    });
    let vt = Tensor::from_fn(&[n, n], |idx| v[order[idx / n]][idx % n]);
    Svd { u, s, vt }
}

/// Rank-`r` factor pair replacing a `q × d` embedding table.
#[derive(Clone, Debug, PartialEq)]
pub struct FactorizedEmbedding<S> {
    /// `q × r`, equal to `U_r Σ_r`.
    pub w: Tensor<S>,
    /// `r × d`.
    pub v: Tensor<S>,
    pub rank: usize,
}

impl<S: Scalar> FactorizedEmbedding<S> {
    pub fn param_count(&self) -> usize {
        self.w.len() + self.v.len()
    }

    pub fn reconstruct(&self) -> Tensor<S> {
        self.w.matmul(&self.v).expect("factor shapes agree")
    }

    /// Embedding rows of the given token ids.
    pub fn lookup(&self, tokens: &[u32]) -> Result<Tensor<S>> {
        let q = self.w.rows();
        if let Some(&bad) = tokens.iter().find(|&&t| t as usize >= q) {
            return Err(GrainError::Input(format!(
                "token id {bad} out of range for vocabulary size {q}"
            )));
        }
        let rows: Vec<usize> = tokens.iter().map(|&t| t as usize).collect();
        self.w.select_rows(&rows).matmul(&self.v)
    }
}

/// Keeps the top `r` singular triplets of `e`.
pub fn svd_truncate<S: Scalar>(e: &Tensor<S>, r: usize) -> Result<FactorizedEmbedding<S>> {
    let (q, d) = e.dims2();
    if r == 0 || r > q.min(d) {
        return Err(GrainError::Param(format!(
            "rank must lie in [1, {}], got {r}",
            q.min(d)
        )));
    }
    let dec = svd(&e.cast());
    let w = Tensor::from_fn(&[q, r], |i| S::of(dec.u.at(i / r, i % r) * dec.s[i % r]));
    let v = Tensor::from_fn(&[r, d], |i| S::of(dec.vt.at(i / d, i % d)));
    Ok(FactorizedEmbedding { w, v, rank: r })
}

impl<S: Scalar> EncoderModel<S> {
    /// Copy of the model whose embedding table is replaced by rank-`r`
    /// trainable factors. Every other parameter keeps its value.
    pub fn factorize_embedding(&self, r: usize) -> Result<EncoderModel<S>> {
        let Embedding::Full { table } = self.embedding else {
            return Err(GrainError::Contract(
                "embedding is already factorized".into(),
            ));
        };
        let fe = svd_truncate(self.params.value(table), r)?;
        let mut params = ParamStore::new();
        let mut remap = HashMap::new();
        let mut factors = None;
        for (id, p) in self.params.iter() {
            if id == table {
                let w = params.add("embedding.w", fe.w.clone());
                let v = params.add("embedding.v", fe.v.clone());
                factors = Some((w, v));
                continue;
            }
            let new = params.add(p.name.clone(), p.value.clone());
            params.get_mut(new).trainable = p.trainable;
            remap.insert(id, new);
        }
        let (w, v) = factors.expect("table is in the store");
        let map = |id: ParamId| remap[&id];
        let mut out = self.clone();
        out.params = params;
        out.embedding = Embedding::Factorized { w, v, rank: r };
        out.position = map(self.position);
        out.emb_ln_gain = map(self.emb_ln_gain);
        out.emb_ln_bias = map(self.emb_ln_bias);
        out.cls_w = map(self.cls_w);
        out.cls_b = map(self.cls_b);
        for block in &mut out.blocks {
            for h in &mut block.heads {
                for id in [&mut h.wq, &mut h.wk, &mut h.wv, &mut h.wo] {
                    *id = map(*id);
                }
            }
            for id in [
                &mut block.ln1_gain,
                &mut block.ln1_bias,
                &mut block.w1,
                &mut block.w2,
                &mut block.ln2_gain,
                &mut block.ln2_bias,
            ] {
                *id = map(*id);
            }
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::random_tensor;
    use crate::data::{Batch, Example, CLS};
    use crate::model::ModelConfig;
    use nalgebra::DMatrix;
    use proptest::prelude::*;

    fn rel_err(e: &Tensor<f64>, approx: &Tensor<f64>) -> f64 {
        let mut diff = e.clone();
        diff.data_mut()
            .iter_mut()
            .zip(approx.data())
            .for_each(|(a, b)| *a -= b);
        diff.frobenius() / e.frobenius()
    }

    fn nalgebra_singular_values(a: &Tensor<f64>) -> Vec<f64> {
        let (m, n) = a.dims2();
        let mat = DMatrix::from_row_slice(m, n, a.data());
        let mut s: Vec<f64> = mat
            .svd(false, false)
            .singular_values
            .iter()
            .copied()
            .collect();
        s.sort_by(|x, y| y.total_cmp(x));
        s
    }

    #[test]
    fn diagonal_example() {
        let e = Tensor::<f64>::from_rows(&[&[3.0, 0.0], &[0.0, 1.0]]);
        let fe = svd_truncate(&e, 1).unwrap();
        let expected = Tensor::from_rows(&[&[3.0, 0.0], &[0.0, 0.0]]);
        assert!(fe.reconstruct().max_abs_diff(&expected) < 1e-8);
    }

    #[test]
    fn full_rank_reconstructs_exactly() {
        for (shape, seed) in [([16, 8], 1), ([8, 16], 2), ([64, 64], 3), ([5, 5], 4)] {
            let e = random_tensor(&shape, seed);
            let k = shape[0].min(shape[1]);
            let fe = svd_truncate(&e, k).unwrap();
            assert!(rel_err(&e, &fe.reconstruct()) < 1e-8, "{shape:?}");
        }
    }

    #[test]
    fn singular_values_match_reference() {
        for seed in 0..5 {
            let a = random_tensor(&[16, 8], seed);
            let ours = svd(&a).s;
            let reference = nalgebra_singular_values(&a);
            for (x, y) in ours.iter().zip(&reference) {
                assert!((x - y).abs() < 1e-10 * reference[0]);
            }
            assert!(ours.windows(2).all(|w| w[0] >= w[1]) && ours.iter().all(|&s| s >= 0.0));
        }
    }

    #[test]
    fn truncation_is_optimal() {
        // Eckart-Young: the rank-r error is the tail of the singular values.
        let e = random_tensor(&[16, 8], 7);
        let s = nalgebra_singular_values(&e);
        for r in 1..=8 {
            let fe = svd_truncate(&e, r).unwrap();
            let tail: f64 = s[r..].iter().map(|x| x * x).sum::<f64>().sqrt();
            let mut diff = e.clone();
            diff.data_mut()
                .iter_mut()
                .zip(fe.reconstruct().data())
                .for_each(|(a, b)| *a -= b);
            assert!((diff.frobenius() - tail).abs() < 1e-9);
        }
    }

    #[test]
    fn rank_bounds_and_param_count() {
        let e = random_tensor(&[64, 32], 0);
        assert!(matches!(svd_truncate(&e, 0), Err(GrainError::Param(_))));
        assert!(matches!(svd_truncate(&e, 33), Err(GrainError::Param(_))));
        let fe = svd_truncate(&e, 8).unwrap();
        assert_eq!(e.len(), 2048);
        assert_eq!(fe.param_count(), 768);
        assert_eq!(fe.param_count(), (64 + 32) * 8);
    }

    #[test]
    fn lookup_examples() {
        let fe = FactorizedEmbedding::<f64> {
            w: Tensor::from_rows(&[&[1.0, 2.0], &[0.0, 0.0], &[-1.0, 0.5]]),
            v: Tensor::from_rows(&[&[3.0, 1.0], &[0.0, 2.0]]),
            rank: 2,
        };
        let out = fe.lookup(&[2]).unwrap();
        assert_eq!(out, Tensor::from_rows(&[&[-3.0, 0.0]]));
        assert!(fe.lookup(&[1]).unwrap().data().iter().all(|&x| x == 0.0));
        assert!(matches!(fe.lookup(&[3]), Err(GrainError::Input(_))));

        let e = random_tensor(&[10, 4], 3);
        let full = svd_truncate(&e, 4).unwrap();
        let tokens = [0, 9, 3, 3];
        let rows: Vec<usize> = tokens.iter().map(|&t| t as usize).collect();
        assert!(
            full.lookup(&tokens)
                .unwrap()
                .max_abs_diff(&e.select_rows(&rows))
                < 1e-5
        );
    }

    #[test]
    fn full_rank_model_factorization_keeps_logits() {
        let cfg = ModelConfig {
            hidden: 8,
            head_size: 4,
            heads: 2,
            ffn_size: 6,
            layers: 2,
            vocab: 12,
            max_len: 6,
            classes: 2,
        };
        let m = EncoderModel::<f64>::init(cfg, 5).unwrap();
        let f = m.factorize_embedding(8).unwrap();
        assert!(matches!(f.embedding, Embedding::Factorized { rank: 8, .. }));
        assert_eq!(f.embedding_params(), (12 + 8) * 8);
        let ex = Example {
            tokens: vec![CLS, 4, 9, 11, 3],
            label: 1,
        };
        let batch = Batch::from_examples(&[&ex], 6);
        assert!(
            f.logits(&batch)
                .unwrap()
                .max_abs_diff(&m.logits(&batch).unwrap())
                < 1e-5
        );
        assert!(f.factorize_embedding(4).is_err());

        let bytes = crate::model::write_checkpoint(&f);
        let back: EncoderModel<f64> = crate::model::read_checkpoint(&bytes).unwrap();
        assert_eq!(back.logits(&batch).unwrap(), f.logits(&batch).unwrap());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(16))]
        #[test]
        fn error_is_non_increasing_in_rank(seed in 0u64..10_000) {
            let e = random_tensor(&[16, 8], seed);
            let mut prev = f64::INFINITY;
            for r in 1..=8 {
                let err = rel_err(&e, &svd_truncate(&e, r).unwrap().reconstruct());
                prop_assert!(err <= prev + 1e-12);
                prev = err;
            }
            prop_assert!(prev < 1e-8);
        }
    }
}
