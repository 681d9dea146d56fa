use proptest::prelude::*;

use super::*;
use crate::tensor::Tensor;

fn t(rows: &[&[f64]]) -> Tensor<f64> {
    Tensor::from_rows(rows)
}

#[test]
fn matmul_examples() {
    let mut g = Graph::<f64>::new();
    let eye = g.constant(Tensor::identity(2));
    let b = g.constant(t(&[&[5.0, 6.0], &[7.0, 8.0]]));
    let out = g.matmul(eye, b).unwrap();
    assert_eq!(g.value(out), &t(&[&[5.0, 6.0], &[7.0, 8.0]]));

    let a = g.constant(t(&[&[1.0, 2.0], &[3.0, 4.0]]));
    let ones = g.constant(t(&[&[1.0], &[1.0]]));
    let out = g.matmul(a, ones).unwrap();
    assert_eq!(g.value(out), &t(&[&[3.0], &[7.0]]));

    let z = g.constant(Tensor::zeros(&[2, 3]));
    let out = g.matmul(a, z).unwrap();
    assert!(g.value(out).data().iter().all(|&x| x == 0.0));
}

#[test]
fn matmul_shape_error_names_both_shapes() {
    let mut g = Graph::<f64>::new();
    let a = g.constant(Tensor::zeros(&[2, 3]));
    let b = g.constant(Tensor::zeros(&[2, 3]));
    let msg = g.matmul(a, b).unwrap_err().to_string();
    assert!(msg.contains("[2, 3] vs [2, 3]"), "{msg}");
}

#[test]
fn softmax_examples() {
    let mut g = Graph::<f64>::new();
    let x = g.constant(t(&[&[0.0, 0.0], &[2f64.ln(), 0.0], &[0.0, -1e9]]));
    let y = g.softmax_rows(x);
    let y = g.value(y);
    assert_eq!(y.row(0), &[0.5, 0.5]);
    assert!((y.at(1, 0) - 2.0 / 3.0).abs() < 1e-12);
    assert!((y.at(1, 1) - 1.0 / 3.0).abs() < 1e-12);
    assert!((y.at(2, 0) - 1.0).abs() < 1e-12);
    assert!(y.at(2, 1).abs() < 1e-12);
}

#[test]
fn gelu_examples() {
    let mut g = Graph::<f64>::new();
    let x = g.input(t(&[&[0.0, 10.0, 1.0]]));
    let y = g.gelu(x);
    let v = g.value(y);
    assert_eq!(v.at(0, 0), 0.0);
    assert!((v.at(0, 1) - 10.0).abs() < 1e-6);
    // 1·Φ(1), Φ(1) = 0.841344746...
    assert!((v.at(0, 2) - 0.841_344_746).abs() < 1e-5);
}

#[test]
fn gelu_slope_at_zero() {
    let mut g = Graph::<f64>::new();
    let x = g.input(Tensor::scalar(0.0));
    let y = g.gelu(x);
    let s = g.sum(y);
    let grads = g.backward(s).unwrap();
    let analytic = grads.wrt(x).unwrap().item();
    assert!((analytic - 0.5).abs() < 1e-12);
    let err = grad_check(
        |g, v| {
            let y = g.gelu(v[0]);
            Ok(g.sum(y))
        },
        &[Tensor::scalar(0.0)],
        1e-5,
    )
    .unwrap();
    assert!(err < 1e-7, "{err}");
}

#[test]
fn layer_norm_examples() {
    let mut g = Graph::<f64>::new();
    let x = g.constant(t(&[&[3.0, 3.0, 3.0], &[1.0, -1.0, 0.0]]));
    let ones = g.constant(Tensor::filled(&[3], 1.0));
    let zeros = g.constant(Tensor::zeros(&[3]));
    let y = g.layer_norm(x, ones, zeros).unwrap();
    assert!(g.value(y).row(0).iter().all(|&v| v == 0.0));

    let x2 = g.constant(t(&[&[1.0, -1.0]]));
    let ones2 = g.constant(Tensor::filled(&[2], 1.0));
    let zeros2 = g.constant(Tensor::zeros(&[2]));
    let y2 = g.layer_norm(x2, ones2, zeros2).unwrap();
    let r = g.value(y2).row(0);
    assert!((r[0] - 1.0).abs() < 1e-6 && (r[1] + 1.0).abs() < 1e-6);

    let zero_gain = g.constant(Tensor::zeros(&[3]));
    let c = g.constant(Tensor::filled(&[3], 4.5));
    let y3 = g.layer_norm(x, zero_gain, c).unwrap();
    assert!(g.value(y3).data().iter().all(|&v| v == 4.5));
}

#[test]
fn soft_cross_entropy_examples() {
    let mut g = Graph::<f64>::new();
    let s = g.constant(t(&[&[0.0, 0.0]]));
    let tt = g.constant(t(&[&[0.0, 0.0]]));
    for tau in [0.5, 1.0, 8.0] {
        let l = g.soft_cross_entropy(s, tt, tau).unwrap();
        assert!((g.value(l).item() - 2f64.ln()).abs() < 1e-12);
    }

    let s4 = g.constant(t(&[&[3.0, -2.0, 0.5, 7.0]]));
    let t4 = g.constant(t(&[&[-1.0, 4.0, 2.0, 0.0]]));
    let l = g.soft_cross_entropy(s4, t4, 1e6).unwrap();
    assert!((g.value(l).item() - 4f64.ln()).abs() < 1e-4);

    assert!(g.soft_cross_entropy(s, tt, 0.0).is_err());
    assert!(g.soft_cross_entropy(s, tt, -1.0).is_err());
}

#[test]
fn soft_cross_entropy_minimum_is_teacher_entropy() {
    let teacher = [0.3, -1.2, 2.0];
    let tau = 2.0;
    let loss_at = |student: &[f64]| {
        let mut g = Graph::<f64>::new();
        let s = g.constant(t(&[student]));
        let tt = g.constant(t(&[&teacher]));
        let l = g.soft_cross_entropy(s, tt, tau).unwrap();
        g.value(l).item()
    };
    let z: f64 = teacher.iter().map(|x| (x / tau).exp()).sum();
    let entropy: f64 = teacher
        .iter()
        .map(|x| {
            let p = (x / tau).exp() / z;
            -p * p.ln()
        })
        .sum();
    let at_teacher = loss_at(&teacher);
    assert!((at_teacher - entropy).abs() < 1e-12);
    for probe in [[0.0, 0.0, 0.0], [0.4, -1.2, 2.0], [5.0, 1.0, -3.0]] {
        assert!(loss_at(&probe) >= at_teacher - 1e-12);
    }
}

#[test]
fn mse_examples() {
    let mut g = Graph::<f64>::new();
    let a = g.constant(t(&[&[1.0, 2.0]]));
    let b = g.constant(t(&[&[0.0, 0.0]]));
    let l = g.mse(a, a).unwrap();
    assert_eq!(g.value(l).item(), 0.0);
    let ab = g.mse(a, b).unwrap();
    let ba = g.mse(b, a).unwrap();
    assert_eq!(g.value(ab).item(), 2.5);
    assert_eq!(g.value(ab).item(), g.value(ba).item());
    let c = g.constant(Tensor::zeros(&[3]));
    assert!(g.mse(a, c).is_err());
}

#[test]
fn backward_rejects_non_scalar() {
    let mut g = Graph::<f64>::new();
    let a = g.input(Tensor::zeros(&[2, 2]));
    assert!(matches!(g.backward(a), Err(crate::GrainError::Contract(_))));
}

fn store_with(shape: &[usize], seed: u64) -> (ParamStore<f64>, ParamId) {
    let mut store = ParamStore::new();
    let id = store.add("p", random_tensor(shape, seed));
    (store, id)
}

#[test]
fn backward_sum_fills_only_named_channel() {
    let (mut store, id) = store_with(&[2, 3], 1);
    let mut g = Graph::new();
    let p = g.param(&store, id);
    let s = g.sum(p);
    g.backward_into(s, GradChannel::Ce, &mut [&mut store])
        .unwrap();
    assert!(store.get(id).grad_ce.data().iter().all(|&x| x == 1.0));
    assert!(store.get(id).grad_aux.data().iter().all(|&x| x == 0.0));

    // A second call on the same loss doubles the accumulator.
    g.backward_into(s, GradChannel::Ce, &mut [&mut store])
        .unwrap();
    assert!(store.get(id).grad_ce.data().iter().all(|&x| x == 2.0));
}

#[test]
fn two_losses_two_channels() {
    let (mut store, id) = store_with(&[3], 2);
    let mut g = Graph::new();
    let p = g.param(&store, id);
    let s = g.sum(p);
    let sq = g.mul(p, p).unwrap();
    let s2 = g.sum(sq);
    g.backward_into(s, GradChannel::Ce, &mut [&mut store])
        .unwrap();
    g.backward_into(s2, GradChannel::Aux, &mut [&mut store])
        .unwrap();
    let param = store.get(id);
    assert!(param.grad_ce.data().iter().all(|&x| x == 1.0));
    for (g2, v) in param.grad_aux.data().iter().zip(param.value.data()) {
        assert!((g2 - 2.0 * v).abs() < 1e-15);
    }
}

#[test]
fn frozen_params_and_foreign_stores_get_nothing() {
    let (mut store, id) = store_with(&[2], 3);
    let mut other = store.clone();
    store.get_mut(id).trainable = false;
    let mut g = Graph::new();
    let p = g.param(&store, id);
    let s = g.sum(p);
    g.backward_into(s, GradChannel::Ce, &mut [&mut store, &mut other])
        .unwrap();
    assert!(store.get(id).grad_ce.data().iter().all(|&x| x == 0.0));
    assert!(other.get(id).grad_ce.data().iter().all(|&x| x == 0.0));
}

const SEEDS: [u64; 3] = [11, 23, 47];

fn check(err: f64, what: &str) {
    assert!(err < 1e-5, "{what}: relative error {err}");
}

#[test]
fn grad_check_matmul_family() {
    for seed in SEEDS {
        let (a, b) = (
            random_tensor(&[4, 4], seed),
            random_tensor(&[4, 4], seed + 1),
        );
        let err = grad_check(
            |g, v| {
                let y = g.matmul(v[0], v[1])?;
                random_projection(g, y, seed)
            },
            &[a.clone(), b.clone()],
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-6, "matmul {err}");

        let (a, b) = (
            random_tensor(&[5, 3], seed),
            random_tensor(&[7, 3], seed + 2),
        );
        check(
            grad_check(
                |g, v| {
                    let y = g.matmul_nt(v[0], v[1])?;
                    random_projection(g, y, seed)
                },
                &[a, b],
                1e-5,
            )
            .unwrap(),
            "matmul_nt",
        );

        let (q, k) = (
            random_tensor(&[8, 3], seed),
            random_tensor(&[8, 3], seed + 3),
        );
        check(
            grad_check(
                |g, v| {
                    let y = g.batched_matmul_nt(v[0], v[1], 2)?;
                    random_projection(g, y, seed)
                },
                &[q, k],
                1e-5,
            )
            .unwrap(),
            "batched_matmul_nt",
        );

        let (p, w) = (
            random_tensor(&[8, 4], seed),
            random_tensor(&[8, 5], seed + 4),
        );
        check(
            grad_check(
                |g, v| {
                    let y = g.batched_matmul(v[0], v[1], 2)?;
                    random_projection(g, y, seed)
                },
                &[p, w],
                1e-5,
            )
            .unwrap(),
            "batched_matmul",
        );
    }
}

#[test]
fn grad_check_elementwise_family() {
    for seed in SEEDS {
        let shape = [3 + seed as usize % 5, 2 + seed as usize % 6];
        let (a, b) = (random_tensor(&shape, seed), random_tensor(&shape, seed + 9));
        for (name, which) in [("add", 0), ("sub", 1), ("mul", 2)] {
            let err = grad_check(
                |g, v| {
                    let y = match which {
                        0 => g.add(v[0], v[1])?,
                        1 => g.sub(v[0], v[1])?,
                        _ => g.mul(v[0], v[1])?,
                    };
                    random_projection(g, y, seed)
                },
                &[a.clone(), b.clone()],
                1e-5,
            )
            .unwrap();
            check(err, name);
        }
        let bias = random_tensor(&[shape[1]], seed + 5);
        check(
            grad_check(
                |g, v| {
                    let y = g.add_row(v[0], v[1])?;
                    let y = g.scale(y, 0.7);
                    random_projection(g, y, seed)
                },
                &[a.clone(), bias],
                1e-5,
            )
            .unwrap(),
            "add_row/scale",
        );
        check(
            grad_check(
                |g, v| {
                    let y = g.gelu(v[0]);
                    random_projection(g, y, seed)
                },
                std::slice::from_ref(&a),
                1e-5,
            )
            .unwrap(),
            "gelu",
        );
    }
}

#[test]
fn grad_check_softmax_and_norm() {
    for seed in SEEDS {
        let x = random_tensor(&[3, 5], seed);
        let err = grad_check(
            |g, v| {
                let y = g.softmax_rows(v[0]);
                random_projection(g, y, seed)
            },
            &[x],
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-6, "softmax {err}");

        let x = random_tensor(&[6, 8], seed);
        let gain = random_tensor(&[8], seed + 1);
        let bias = random_tensor(&[8], seed + 2);
        check(
            grad_check(
                |g, v| {
                    let y = g.layer_norm(v[0], v[1], v[2])?;
                    random_projection(g, y, seed)
                },
                &[x, gain, bias],
                1e-5,
            )
            .unwrap(),
            "layer_norm",
        );
    }
}

#[test]
fn grad_check_gather_and_losses() {
    for seed in SEEDS {
        let table = random_tensor(&[6, 4], seed);
        check(
            grad_check(
                |g, v| {
                    let y = g.gather_rows(v[0], &[1, 4, 1, 0])?;
                    random_projection(g, y, seed)
                },
                &[table],
                1e-5,
            )
            .unwrap(),
            "gather_rows",
        );

        let student = random_tensor(&[4, 3], seed);
        let teacher = random_tensor(&[4, 3], seed + 7);
        check(
            grad_check(
                |g, v| {
                    let tt = g.constant(teacher.clone());
                    g.soft_cross_entropy(v[0], tt, 2.5)
                },
                std::slice::from_ref(&student),
                1e-5,
            )
            .unwrap(),
            "soft_cross_entropy",
        );
        check(
            grad_check(
                |g, v| g.cross_entropy(v[0], &[0, 2, 1, 2]),
                std::slice::from_ref(&student),
                1e-5,
            )
            .unwrap(),
            "cross_entropy",
        );
        check(
            grad_check(|g, v| g.mse(v[0], v[1]), &[student, teacher], 1e-5).unwrap(),
            "mse",
        );
    }
}

proptest! {
    #[test]
    fn softmax_rows_sum_to_one(values in proptest::collection::vec(-50.0f64..50.0, 12)) {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::new(vec![3, 4], values).unwrap());
        let y = g.softmax_rows(x);
        for i in 0..3 {
            let row = g.value(y).row(i);
            prop_assert!(row.iter().all(|&p| p >= 0.0));
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn channel_isolation(seed in 0u64..1000, aux_first in any::<bool>()) {
        let mut store = ParamStore::<f64>::new();
        let w = store.add("w", random_tensor(&[3, 4], seed));
        let u = store.add("u", random_tensor(&[4, 2], seed + 1));
        store.get_mut(w).grad_aux = random_tensor(&[3, 4], seed + 2);
        store.get_mut(u).grad_ce = random_tensor(&[4, 2], seed + 3);
        let before_aux = store.get(w).grad_aux.clone();
        let before_ce = store.get(u).grad_ce.clone();

        let mut g = Graph::new();
        let x = g.constant(random_tensor(&[5, 3], seed + 4));
        let wv = g.param(&store, w);
        let uv = g.param(&store, u);
        let h = g.matmul(x, wv).unwrap();
        let h = g.gelu(h);
        let y = g.matmul(h, uv).unwrap();
        let loss = random_projection(&mut g, y, seed).unwrap();

        let channel = if aux_first { GradChannel::Aux } else { GradChannel::Ce };
        g.backward_into(loss, channel, &mut [&mut store]).unwrap();
        match channel {
            GradChannel::Ce => prop_assert_eq!(&store.get(w).grad_aux, &before_aux),
            GradChannel::Aux => prop_assert_eq!(&store.get(u).grad_ce, &before_ce),
        }
    }
}
