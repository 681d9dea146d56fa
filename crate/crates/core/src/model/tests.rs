use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::autodiff::Graph;
use crate::data::{Batch, Example, CLS};
use crate::GrainError;

fn tiny_config() -> ModelConfig {
    ModelConfig {
        hidden: 8,
        head_size: 4,
        heads: 2,
        ffn_size: 6,
        layers: 2,
        vocab: 20,
        max_len: 10,
        classes: 3,
    }
}

fn random_batch(cfg: &ModelConfig, batch: usize, seed: u64) -> Batch {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let examples: Vec<Example> = (0..batch)
        .map(|_| {
            let len = rng.random_range(2..=cfg.max_len);
            let tokens = std::iter::once(CLS)
                .chain((1..len).map(|_| rng.random_range(1..cfg.vocab as u32)))
                .collect();
            Example { tokens, label: 0 }
        })
        .collect();
    let refs: Vec<&Example> = examples.iter().collect();
    Batch::from_examples(&refs, cfg.max_len)
}

fn model64(cfg: ModelConfig, seed: u64) -> EncoderModel<f64> {
    EncoderModel::init(cfg, seed).unwrap()
}

fn input_var(g: &mut Graph<f64>, rows: usize, d: usize, seed: u64) -> Var {
    g.constant(crate::autodiff::random_tensor(&[rows, d], seed))
}

use crate::autodiff::Var;

#[test]
fn value_masked_head_contributes_nothing() {
    let cfg = tiny_config();
    let mut m = model64(cfg, 1);
    for r in 0..cfg.head_size {
        m.prune_value(0, 0, r);
    }
    let batch = random_batch(&cfg, 2, 2);
    let mut g = Graph::new();
    let ctx = ForwardCtx::new(&mut g, &batch);
    let x = input_var(&mut g, 2 * cfg.max_len, cfg.hidden, 3);
    let block = m.blocks[0].clone();
    assert!(m
        .attention_head_forward(&mut g, x, &block.heads[0], &ctx)
        .unwrap()
        .is_none());
    let other = m
        .attention_head_forward(&mut g, x, &block.heads[1], &ctx)
        .unwrap()
        .unwrap();
    let total = m
        .mha_pre_residual(&mut g, x, &block, &ctx)
        .unwrap()
        .unwrap();
    assert_eq!(g.value(total), g.value(other));
}

#[test]
fn query_masked_head_attends_uniformly() {
    let cfg = tiny_config();
    let mut m = model64(cfg, 4);
    for r in 0..cfg.head_size {
        m.prune_query(0, 1, r);
    }
    let batch = random_batch(&cfg, 3, 5);
    let mut g = Graph::new();
    let ctx = ForwardCtx::new(&mut g, &batch);
    let x = input_var(&mut g, 3 * cfg.max_len, cfg.hidden, 6);
    let head = m.blocks[0].heads[1].clone();
    let out = m
        .attention_head_forward(&mut g, x, &head, &ctx)
        .unwrap()
        .unwrap();

    // Oracle: mean over the example's real positions of X·W_Vᵀ·W_O.
    let xv = g.value(x).clone();
    let vo = xv
        .matmul(&m.params.value(head.wv).transpose())
        .unwrap()
        .matmul(m.params.value(head.wo))
        .unwrap();
    let n = cfg.max_len;
    for b in 0..3 {
        let live: Vec<usize> = (0..n).filter(|&j| batch.tokens[b * n + j] != 0).collect();
        for c in 0..cfg.hidden {
            let mean = live.iter().map(|&j| vo.at(b * n + j, c)).sum::<f64>() / live.len() as f64;
            for i in 0..n {
                assert!((g.value(out).at(b * n + i, c) - mean).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn single_unit_head_matches_hand_calculation() {
    let cfg = ModelConfig {
        hidden: 2,
        head_size: 1,
        heads: 2,
        ffn_size: 1,
        layers: 1,
        vocab: 4,
        max_len: 2,
        classes: 2,
    };
    let mut m = model64(cfg, 0);
    let head = m.blocks[0].heads[0].clone();
    *m.params.value_mut(head.wq) = Tensor::from_rows(&[&[1.0, 0.5]]);
    *m.params.value_mut(head.wk) = Tensor::from_rows(&[&[-1.0, 2.0]]);
    *m.params.value_mut(head.wv) = Tensor::from_rows(&[&[0.5, 1.0]]);
    *m.params.value_mut(head.wo) = Tensor::from_rows(&[&[2.0, -1.0]]);
    let batch = Batch {
        tokens: vec![1, 2],
        batch: 1,
        seq_len: 2,
        labels: vec![0],
    };
    let mut g = Graph::new();
    let ctx = ForwardCtx::new(&mut g, &batch);
    let x = g.constant(Tensor::from_rows(&[&[1.0, 2.0], &[0.0, -1.0]]));
    let out = m
        .attention_head_forward(&mut g, x, &head, &ctx)
        .unwrap()
        .unwrap();

    // q = [2, -0.5], k = [3, -2], v = [2.5, -1]
    // scores row 0: [6, -4], row 1: [-1.5, 1]
    let p0 = 1.0 / (1.0 + (-10f64).exp());
    let p1 = 1.0 / (1.0 + (2.5f64).exp());
    let mix = [p0 * 2.5 - (1.0 - p0), p1 * 2.5 - (1.0 - p1)];
    let expected = Tensor::from_rows(&[&[2.0 * mix[0], -mix[0]], &[2.0 * mix[1], -mix[1]]]);
    assert!(g.value(out).max_abs_diff(&expected) < 1e-12);
}

#[test]
fn mha_is_additive_over_heads() {
    let cfg = tiny_config();
    let mut m = model64(cfg, 7);
    let batch = random_batch(&cfg, 2, 8);
    let head0 = m.blocks[0].heads[0].clone();
    for r in 0..cfg.head_size {
        m.prune_value(0, 1, r);
    }
    let mut g = Graph::new();
    let ctx = ForwardCtx::new(&mut g, &batch);
    let x = input_var(&mut g, 2 * cfg.max_len, cfg.hidden, 9);
    let block = m.blocks[0].clone();
    let single = m
        .attention_head_forward(&mut g, x, &head0, &ctx)
        .unwrap()
        .unwrap();
    let pre = m
        .mha_pre_residual(&mut g, x, &block, &ctx)
        .unwrap()
        .unwrap();
    assert_eq!(g.value(pre), g.value(single));

    // Copy head 0 into head 1: the sum is exactly twice one head.
    let mut m2 = model64(cfg, 7);
    let [a, b] = [m2.blocks[0].heads[0].clone(), m2.blocks[0].heads[1].clone()];
    for (src, dst) in [(a.wq, b.wq), (a.wk, b.wk), (a.wv, b.wv), (a.wo, b.wo)] {
        let v = m2.params.value(src).clone();
        *m2.params.value_mut(dst) = v;
    }
    let mut g = Graph::new();
    let ctx = ForwardCtx::new(&mut g, &batch);
    let x = input_var(&mut g, 2 * cfg.max_len, cfg.hidden, 9);
    let block = m2.blocks[0].clone();
    let one = m2
        .attention_head_forward(&mut g, x, &block.heads[0], &ctx)
        .unwrap()
        .unwrap();
    let pre = m2
        .mha_pre_residual(&mut g, x, &block, &ctx)
        .unwrap()
        .unwrap();
    assert_eq!(g.value(pre), &g.value(one).map(|v| v + v));
}

#[test]
fn all_heads_empty_leaves_layer_norm_of_input() {
    let cfg = tiny_config();
    let mut m = model64(cfg, 10);
    for h in 0..cfg.heads {
        for r in 0..cfg.head_size {
            m.prune_value(1, h, r);
        }
    }
    let batch = random_batch(&cfg, 2, 11);
    let mut g = Graph::new();
    let ctx = ForwardCtx::new(&mut g, &batch);
    let x = input_var(&mut g, 2 * cfg.max_len, cfg.hidden, 12);
    let block = m.blocks[1].clone();
    assert!(m
        .mha_pre_residual(&mut g, x, &block, &ctx)
        .unwrap()
        .is_none());
    let out = m.mha_forward(&mut g, x, &block, &ctx).unwrap();
    let gain = g.param(&m.params, block.ln1_gain);
    let bias = g.param(&m.params, block.ln1_bias);
    let ln = g.layer_norm(x, gain, bias).unwrap();
    assert_eq!(g.value(out), g.value(ln));
}

#[test]
fn ffn_masking_examples() {
    let cfg = tiny_config();
    let mut m = model64(cfg, 13);
    for j in 0..cfg.ffn_size {
        m.prune_ffn(0, j);
    }
    let mut g = Graph::new();
    let x = input_var(&mut g, 5, cfg.hidden, 14);
    let block = m.blocks[0].clone();
    let f = m.ffn_pre_residual(&mut g, x, &block).unwrap();
    assert!(g.value(f).data().iter().all(|&v| v == 0.0));

    let tiny = ModelConfig {
        hidden: 1,
        head_size: 1,
        heads: 1,
        ffn_size: 1,
        layers: 1,
        vocab: 4,
        max_len: 2,
        classes: 2,
    };
    let mut t = model64(tiny, 0);
    let b = t.blocks[0].clone();
    *t.params.value_mut(b.w1) = Tensor::from_rows(&[&[1.0]]);
    *t.params.value_mut(b.w2) = Tensor::from_rows(&[&[1.0]]);
    let mut g = Graph::new();
    let x = g.constant(Tensor::from_rows(&[&[0.0]]));
    let f = t.ffn_pre_residual(&mut g, x, &b).unwrap();
    assert_eq!(g.value(f).item(), 0.0);
}

#[test]
fn ffn_mask_equals_deleting_the_unit() {
    let cfg = ModelConfig {
        hidden: 2,
        head_size: 1,
        heads: 2,
        ffn_size: 4,
        layers: 1,
        vocab: 4,
        max_len: 2,
        classes: 2,
    };
    let mut m = model64(cfg, 21);
    let mut g = Graph::new();
    let x = input_var(&mut g, 2, 2, 22);
    let block = m.blocks[0].clone();
    let w1 = m.params.value(block.w1).select_cols(&[0, 2, 3]);
    let w2 = m.params.value(block.w2).select_rows(&[0, 2, 3]);
    m.prune_ffn(0, 1);
    let masked = m.ffn_pre_residual(&mut g, x, &block).unwrap();
    let expected = {
        let xv = g.value(x).clone();
        let h = xv.matmul(&w1).unwrap();
        let h = h.map(|v| v * 0.5 * (1.0 + libm::erf(v / 2f64.sqrt())));
        h.matmul(&w2).unwrap()
    };
    assert!(g.value(masked).max_abs_diff(&expected) < 1e-6);
}

#[test]
fn forward_basics() {
    let cfg = tiny_config();
    let mut m = model64(cfg, 30);
    let batch = random_batch(&cfg, 4, 31);
    let a = m.logits(&batch).unwrap();
    let b = m.logits(&batch).unwrap();
    assert_eq!(a, b);

    let mut g = Graph::new();
    let hs = m.forward(&mut g, &batch).unwrap();
    assert_eq!(hs.layers.len(), cfg.layers + 1);
    for &h in &hs.layers {
        assert_eq!(g.shape(h), &[4 * cfg.max_len, cfg.hidden]);
    }

    m.params.value_mut(m.cls_w).fill_zero();
    let z = m.logits(&batch).unwrap();
    for r in 0..4 {
        assert!(z.row(r).iter().all(|&v| v == z.at(r, 0)));
    }

    let mut bad = batch.clone();
    bad.tokens[1] = cfg.vocab as u32;
    assert!(matches!(m.logits(&bad), Err(GrainError::Input(_))));
}

#[test]
fn trailing_padding_does_not_change_logits() {
    let cfg = tiny_config();
    let m = model64(cfg, 40);
    for seed in 0..5 {
        let batch = random_batch(&cfg, 3, 100 + seed);
        let full = m.logits(&batch).unwrap();
        let short = m.logits(&batch.trimmed()).unwrap();
        assert!(full.max_abs_diff(&short) < 1e-5);
    }
}

#[test]
fn density_counting() {
    let cfg = ModelConfig::desk();
    let mut m = EncoderModel::<f32>::init(cfg, 0).unwrap();
    let p = cfg.prunable_params();
    assert_eq!(m.count_prunable_params(), p);
    assert_eq!(m.model_density(), 1.0);
    m.prune_query(0, 0, 3);
    m.prune_value(1, 2, 0);
    m.prune_ffn(3, 100);
    let k = 3;
    assert_eq!(m.count_prunable_params(), p - 2 * cfg.hidden * k);
    assert_eq!(
        m.model_density(),
        (p - 2 * cfg.hidden * k) as f64 / p as f64
    );
    for l in 0..cfg.layers {
        for h in 0..cfg.heads {
            for r in 0..cfg.head_size {
                m.prune_query(l, h, r);
                m.prune_value(l, h, r);
            }
        }
        for j in 0..cfg.ffn_size {
            m.prune_ffn(l, j);
        }
    }
    assert_eq!(m.model_density(), 0.0);
    assert_eq!(m.masked_weight_max(), 0.0);
}

#[test]
fn enforce_masks_rezeroes_weights() {
    let cfg = tiny_config();
    let mut m = model64(cfg, 50);
    m.prune_value(0, 1, 2);
    m.prune_ffn(1, 4);
    let wv = m.blocks[0].heads[1].wv;
    m.params.value_mut(wv).row_mut(2)[0] = 3.0;
    let w1 = m.blocks[1].w1;
    m.params.value_mut(w1).set(0, 4, -1.0);
    assert!(m.masked_weight_max() > 0.0);
    m.enforce_masks();
    assert_eq!(m.masked_weight_max(), 0.0);
}

fn prune_some(m: &mut EncoderModel<f64>, seed: u64) {
    let cfg = m.config;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for l in 0..cfg.layers {
        for h in 0..cfg.heads {
            for r in 0..cfg.head_size {
                if rng.random_bool(0.4) {
                    m.prune_query(l, h, r);
                }
                if rng.random_bool(0.4) {
                    m.prune_value(l, h, r);
                }
            }
        }
        for j in 0..cfg.ffn_size {
            if rng.random_bool(0.5) {
                m.prune_ffn(l, j);
            }
        }
    }
}

#[test]
fn compact_without_pruning_is_identical() {
    let cfg = tiny_config();
    let m = model64(cfg, 60);
    let c = m.compact();
    assert_eq!(c.blocks, m.blocks);
    assert_eq!(c.params.len(), m.params.len());
    let batch = random_batch(&cfg, 3, 61);
    assert_eq!(c.logits(&batch).unwrap(), m.logits(&batch).unwrap());
}

#[test]
fn compact_matches_masked_model() {
    let cfg = tiny_config();
    let mut m = model64(cfg, 70);
    for r in 0..cfg.head_size {
        m.prune_value(0, 0, r);
        m.prune_query(0, 0, r);
    }
    let c = m.compact();
    assert_eq!(c.blocks[0].heads.len(), cfg.heads - 1);
    for seed in 0..100 {
        let batch = random_batch(&cfg, 1, 1000 + seed);
        let diff = c
            .logits(&batch)
            .unwrap()
            .max_abs_diff(&m.logits(&batch).unwrap());
        assert!(diff <= 1e-5, "{diff}");
    }

    let mut m = model64(cfg, 71);
    prune_some(&mut m, 72);
    let c = m.compact();
    let batch = random_batch(&cfg, 8, 73);
    assert!(
        c.logits(&batch)
            .unwrap()
            .max_abs_diff(&m.logits(&batch).unwrap())
            <= 1e-5
    );
    assert!(c.count_prunable_params() <= m.count_prunable_params());
}

#[test]
fn compact_handles_empty_attention_block() {
    let cfg = tiny_config();
    let mut m = model64(cfg, 80);
    for h in 0..cfg.heads {
        for r in 0..cfg.head_size {
            m.prune_value(1, h, r);
        }
    }
    let c = m.compact();
    assert_eq!(c.blocks[1].heads.len(), 0);
    assert_eq!(c.blocks[1].live_ffn(), cfg.ffn_size);
    let batch = random_batch(&cfg, 4, 81);
    assert!(
        c.logits(&batch)
            .unwrap()
            .max_abs_diff(&m.logits(&batch).unwrap())
            <= 1e-5
    );
}

#[test]
fn checkpoint_round_trip_is_byte_stable() {
    let cfg = tiny_config();
    let mut m = model64(cfg, 90);
    prune_some(&mut m, 91);
    let bytes = write_checkpoint(&m);
    assert_eq!(&bytes[..4], b"GRN1");
    let back: EncoderModel<f64> = read_checkpoint(&bytes).unwrap();
    assert_eq!(back.blocks, m.blocks);
    assert_eq!(write_checkpoint(&back), bytes);
    let batch = random_batch(&cfg, 2, 92);
    assert_eq!(back.logits(&batch).unwrap(), m.logits(&batch).unwrap());

    let compacted = m.compact();
    let bytes = write_checkpoint(&compacted);
    let back: EncoderModel<f64> = read_checkpoint(&bytes).unwrap();
    assert_eq!(
        back.count_prunable_params(),
        compacted.count_prunable_params()
    );

    let as_f32: EncoderModel<f32> = read_checkpoint(&write_checkpoint(&m)).unwrap();
    assert_eq!(write_checkpoint(&as_f32)[..4], *b"GRN1");
}

#[test]
fn corrupt_checkpoints_report_offsets() {
    let m = model64(tiny_config(), 93);
    let bytes = write_checkpoint(&m);
    let err = read_checkpoint::<f64>(b"GRN2abcd").unwrap_err();
    assert!(matches!(err, GrainError::Format { offset: 0, .. }));
    let err = read_checkpoint::<f64>(&bytes[..bytes.len() - 3]).unwrap_err();
    match err {
        GrainError::Format { offset, .. } => assert!(offset > 4 && offset < bytes.len()),
        other => panic!("unexpected {other}"),
    }
    let mut extra = bytes.clone();
    extra.push(0);
    assert!(matches!(
        read_checkpoint::<f64>(&extra),
        Err(GrainError::Format { .. })
    ));
}
