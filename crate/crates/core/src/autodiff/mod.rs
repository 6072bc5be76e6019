//! Reverse-mode differentiation over dense matrices and per-edge segment ops.
//!
//! The op set is exactly what a graph block needs: dense and sparse matrix
//! products, row gathers, segment reductions and softmax keyed by edge
//! target, elementwise nonlinearities, straight-through transforms and the
//! two classification losses.

mod activation;
mod tape;
mod tensor;

pub use activation::{ActivationKind, ELU_ALPHA, LEAKY_RELU_SLOPE, SOFTPLUS_BETA};
pub use tape::{Aggregation, Tape, Var};
pub use tensor::{CsrMatrix, Tensor};

/// Central finite-difference gradient of a scalar function.
pub fn numerical_gradient(mut f: impl FnMut(&Tensor) -> f64, x: &Tensor, h: f64) -> Vec<f64> {
    let mut probe = x.clone();
    (0..x.len())
        .map(|i| {
            let orig = probe.data()[i];
            probe.data_mut()[i] = orig + h;
            let up = f(&probe);
            probe.data_mut()[i] = orig - h;
            let down = f(&probe);
            probe.data_mut()[i] = orig;
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// `‖a − b‖ / max(‖a‖, ‖b‖, floor)`; the floor keeps all-zero gradients comparable.
pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    diff / na.max(nb).max(1e-8)
}

#[cfg(test)]
mod tests {
    use std::sync::Arc;

    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    /// Analytic gradient of `build(leaf)` w.r.t. the leaf.
    fn analytic(x: &Tensor, build: &dyn Fn(&mut Tape, Var) -> Var) -> Vec<f64> {
        let mut tape = Tape::new();
        let v = tape.leaf(x.clone());
        let loss = build(&mut tape, v);
        tape.backward(loss).unwrap();
        tape.grad(v).map(|g| g.to_vec()).unwrap_or_else(|| vec![0.0; x.len()])
    }

    fn forward(x: &Tensor, build: &dyn Fn(&mut Tape, Var) -> Var) -> f64 {
        let mut tape = Tape::new();
        let v = tape.constant(x.clone());
        let loss = build(&mut tape, v);
        tape.value(loss).item()
    }

    fn check(x: &Tensor, build: &dyn Fn(&mut Tape, Var) -> Var) -> f64 {
        let a = analytic(x, build);
        let n = numerical_gradient(|p| forward(p, build), x, 1e-5);
        relative_error(&a, &n)
    }

    #[test]
    fn identity_and_zero_products() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = random(&[2, 3], &mut rng);
        let mut tape = Tape::new();
        let i = tape.constant(Tensor::identity(2));
        let z = tape.constant(Tensor::zeros(&[2, 2]));
        let xv = tape.constant(x.clone());
        let ix = tape.matmul(i, xv).unwrap();
        let zx = tape.matmul(z, xv).unwrap();
        assert_eq!(tape.value(ix), &x);
        assert!(tape.value(zx).data().iter().all(|&v| v == 0.0));
        let bad = tape.constant(Tensor::zeros(&[3, 3]));
        assert!(matches!(tape.matmul(i, bad), Err(crate::Error::Dimension { .. })));
    }

    #[test]
    fn matmul_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a = random(&[3, 4], &mut rng);
        let b = random(&[4, 2], &mut rng);
        let w = random(&[3, 2], &mut rng);
        let (bc, wc) = (b.clone(), w.clone());
        let err_a = check(&a, &move |t, x| {
            let bv = t.constant(bc.clone());
            let wv = t.constant(wc.clone());
            let y = t.matmul(x, bv).unwrap();
            let y = t.mul(y, wv).unwrap();
            t.sum(y)
        });
        let (ac, wc) = (a.clone(), w.clone());
        let err_b = check(&b, &move |t, x| {
            let av = t.constant(ac.clone());
            let wv = t.constant(wc.clone());
            let y = t.matmul(av, x).unwrap();
            let y = t.mul(y, wv).unwrap();
            t.sum(y)
        });
        assert!(err_a < 1e-6, "{err_a}");
        assert!(err_b < 1e-6, "{err_b}");
    }

    #[test]
    fn segment_aggregate_small_cases() {
        let mut tape = Tape::new();
        let m = tape.constant(Tensor::matrix(2, 1, vec![1.0, 3.0]).unwrap());
        let targets: Arc<[usize]> = vec![0, 0].into();
        let add = tape.segment_aggregate(m, targets.clone(), Aggregation::Add, 2).unwrap();
        let mean = tape.segment_aggregate(m, targets.clone(), Aggregation::Mean, 2).unwrap();
        let max = tape.segment_aggregate(m, targets.clone(), Aggregation::Max, 2).unwrap();
        assert_eq!(tape.value(add).data(), &[4.0, 0.0]);
        assert_eq!(tape.value(mean).data(), &[2.0, 0.0]);
        assert_eq!(tape.value(max).data(), &[3.0, 0.0]);
        assert!(matches!(
            tape.segment_aggregate(m, vec![0, 2].into(), Aggregation::Add, 2),
            Err(crate::Error::Index { .. })
        ));
    }

    fn naive_aggregate(msgs: &Tensor, targets: &[usize], mode: Aggregation, n: usize) -> Vec<f64> {
        let d = msgs.cols();
        let mut out = vec![0.0; n * d];
        for node in 0..n {
            let incoming: Vec<usize> = (0..targets.len()).filter(|&e| targets[e] == node).collect();
            if incoming.is_empty() {
                continue;
            }
            for j in 0..d {
                let vals: Vec<f64> = incoming.iter().map(|&e| msgs.at(e, j)).collect();
                out[node * d + j] = match mode {
                    Aggregation::Add => vals.iter().sum(),
                    Aggregation::Mean => vals.iter().sum::<f64>() / vals.len() as f64,
                    Aggregation::Max => vals.iter().copied().fold(f64::NEG_INFINITY, f64::max),
                };
            }
        }
        out
    }

    #[test]
    fn segment_aggregate_matches_per_node_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let n = 12;
        let msgs = random(&[50, 3], &mut rng);
        let targets: Vec<usize> = (0..50).map(|_| rng.gen_range(0..n)).collect();
        for mode in Aggregation::ALL {
            let mut tape = Tape::new();
            let m = tape.constant(msgs.clone());
            let out = tape.segment_aggregate(m, targets.clone().into(), mode, n).unwrap();
            assert_eq!(tape.value(out).data(), &naive_aggregate(&msgs, &targets, mode, n)[..], "{mode}");
        }
    }

    #[test]
    fn max_ties_route_to_lowest_edge() {
        let mut tape = Tape::new();
        let m = tape.leaf(Tensor::matrix(3, 1, vec![2.0, 2.0, 1.0]).unwrap());
        let out = tape.segment_aggregate(m, vec![0, 0, 0].into(), Aggregation::Max, 1).unwrap();
        let s = tape.sum(out);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(m).unwrap(), &[1.0, 0.0, 0.0]);
    }

    #[test]
    fn aggregation_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let msgs = random(&[20, 3], &mut rng);
        let targets: Arc<[usize]> = (0..20).map(|_| rng.gen_range(0..6)).collect::<Vec<_>>().into();
        let w = random(&[6, 3], &mut rng);
        for mode in Aggregation::ALL {
            let (t2, w2) = (targets.clone(), w.clone());
            let err = check(&msgs, &move |t, x| {
                let y = t.segment_aggregate(x, t2.clone(), mode, 6).unwrap();
                let wv = t.constant(w2.clone());
                let y = t.mul(y, wv).unwrap();
                t.sum(y)
            });
            assert!(err < 1e-6, "{mode}: {err}");
        }
    }

    #[test]
    fn segment_softmax_cases() {
        let mut tape = Tape::new();
        let s = tape.constant(Tensor::vector(vec![0.3, 5.0, 5.0]));
        let p = tape.segment_softmax(s, vec![0, 1, 1].into()).unwrap();
        assert_eq!(tape.value(p).data(), &[1.0, 0.5, 0.5]);
    }

    #[test]
    fn segment_softmax_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let scores = random(&[30], &mut rng);
        let targets: Arc<[usize]> = (0..30).map(|_| rng.gen_range(0..5)).collect::<Vec<_>>().into();
        let w = random(&[30], &mut rng);
        let err = check(&scores, &move |t, x| {
            let p = t.segment_softmax(x, targets.clone()).unwrap();
            t.weighted_sum(p, w.data().to_vec()).unwrap()
        });
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn activation_gradients_away_from_kinks() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for kind in ActivationKind::ALL {
            let mut pts = Vec::new();
            while pts.len() < 100 {
                let v: f64 = rng.gen_range(-8.0..8.0);
                if kind.kinks().iter().all(|k| (v - k).abs() > 1e-4) {
                    pts.push(v);
                }
            }
            let x = Tensor::vector(pts);
            let w = random(&[100], &mut rng);
            let err = check(&x, &move |t, v| {
                let y = t.activation(v, kind);
                t.weighted_sum(y, w.data().to_vec()).unwrap()
            });
            assert!(err < 1e-5, "{kind}: {err}");
        }
    }

    #[test]
    fn trivial_backward_cases() {
        let mut tape = Tape::new();
        let w = tape.leaf(Tensor::vector(vec![1.0, 2.0, 3.0]));
        let s = tape.sum(w);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(w).unwrap(), &[1.0, 1.0, 1.0]);

        let mut tape = Tape::new();
        let w = tape.leaf(Tensor::vector(vec![1.0, 2.0, 3.0]));
        let z = tape.scale(w, 0.0);
        let s = tape.sum(z);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(w).unwrap(), &[0.0, 0.0, 0.0]);
        assert!(matches!(tape.backward(w), Err(crate::Error::Contract(_))));
    }

    #[test]
    fn gradients_accumulate_across_calls() {
        let mut tape = Tape::new();
        let w = tape.leaf(Tensor::vector(vec![1.0, 2.0]));
        let y = tape.mul(w, w).unwrap();
        let s = tape.sum(y);
        tape.backward(s).unwrap();
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(w).unwrap(), &[4.0, 8.0]);
        tape.zero_grads();
        assert!(tape.grad(w).is_none());
    }

    #[test]
    fn losses_and_misc_ops_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let logits = random(&[6, 4], &mut rng);
        let labels: Arc<[usize]> = vec![0, 3, 1, 2, 2, 0].into();
        let rows: Arc<[usize]> = vec![0, 2, 3, 5].into();
        let (l2, r2) = (labels.clone(), rows.clone());
        assert!(check(&logits, &move |t, x| t.softmax_cross_entropy(x, l2.clone(), r2.clone()).unwrap()) < 1e-6);

        let targets = Arc::new(Tensor::new(vec![6, 4], (0..24).map(|i| (i % 3 == 0) as u8 as f64).collect()).unwrap());
        assert!(check(&logits, &move |t, x| t.sigmoid_bce(x, targets.clone(), rows.clone()).unwrap()) < 1e-6);

        let v = random(&[4], &mut rng);
        let other = random(&[6, 4], &mut rng);
        let idx: Arc<[usize]> = vec![5, 0, 0, 3].into();
        let err = check(&logits, &move |t, x| {
            let ov = t.constant(other.clone());
            let vv = t.constant(v.clone());
            let a = t.mul_broadcast(x, vv).unwrap();
            let b = t.row_dot(a, ov).unwrap();
            let c = t.matvec(x, vv).unwrap();
            let d = t.scale_rows(x, c).unwrap();
            let e = t.concat(&[d, a]).unwrap();
            let f = t.gather_rows(e, idx.clone()).unwrap();
            let g = t.leaky_relu(f, 0.2);
            let s1 = t.sum(g);
            let s2 = t.weighted_sum(b, vec![1.0, -2.0, 0.5, 0.0, 3.0, 1.0]).unwrap();
            let s = t.add(s1, s2).unwrap();
            let m = t.mean(x);
            let s = t.mul_scalar(s, m).unwrap();
            t.sub(s, m).unwrap()
        });
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn unit_gate_is_exactly_one_and_routes_gradient() {
        let mut tape = Tape::new();
        let logits = tape.leaf(Tensor::vector(vec![0.1, 0.7, -0.2]));
        let p = tape.softmax(logits).unwrap();
        let g = tape.unit_gate(p, 1).unwrap();
        assert_eq!(tape.value(g).item(), 1.0);
        let x = tape.constant(Tensor::vector(vec![2.0, 3.0]));
        let y = tape.mul_scalar(x, g).unwrap();
        assert_eq!(tape.value(y).data(), &[2.0, 3.0]);
        let s = tape.sum(y);
        tape.backward(s).unwrap();
        let pv = tape.value(p).data().to_vec();
        let grad = tape.grad(logits).unwrap();
        // d p1 / d logits scaled by dL/dg = 5.
        let expected: Vec<f64> = (0..3)
            .map(|k| 5.0 * pv[1] * (if k == 1 { 1.0 } else { 0.0 } - pv[k]))
            .collect();
        assert!(relative_error(grad, &expected) < 1e-12);
    }

    #[test]
    fn seeded_runs_are_bitwise_identical() {
        let run = || {
            let mut rng = ChaCha8Rng::seed_from_u64(9);
            let x = random(&[10, 4], &mut rng);
            let mut tape = Tape::new();
            let w = tape.leaf(random(&[4, 4], &mut rng));
            let xv = tape.constant(x);
            let h = tape.matmul(xv, w).unwrap();
            let h = tape.dropout(h, 0.5, &mut rng);
            let h = tape.activation(h, ActivationKind::Elu);
            let s = tape.sum(h);
            tape.backward(s).unwrap();
            tape.grad(w).unwrap().to_vec()
        };
        let (a, b) = (run(), run());
        assert!(a.iter().zip(&b).all(|(x, y)| x.to_bits() == y.to_bits()));
    }

    proptest! {
        #[test]
        fn add_aggregation_conserves_mass(
            vals in proptest::collection::vec(-10.0f64..10.0, 1..40),
            seed in any::<u64>(),
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let targets: Vec<usize> = vals.iter().map(|_| rng.gen_range(0..7)).collect();
            let mut tape = Tape::new();
            let m = tape.constant(Tensor::vector(vals.clone()));
            let out = tape.segment_aggregate(m, targets.into(), Aggregation::Add, 7).unwrap();
            let total: f64 = vals.iter().sum();
            prop_assert!((tape.value(out).sum() - total).abs() < 1e-9);
        }

        #[test]
        fn segment_softmax_is_a_distribution_per_segment(
            vals in proptest::collection::vec(-50.0f64..50.0, 1..40),
            seed in any::<u64>(),
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let targets: Vec<usize> = vals.iter().map(|_| rng.gen_range(0..5)).collect();
            let mut tape = Tape::new();
            let s = tape.constant(Tensor::vector(vals));
            let p = tape.segment_softmax(s, targets.clone().into()).unwrap();
            let mut sums = [0.0f64; 5];
            for (&v, &t) in tape.value(p).data().iter().zip(&targets) {
                prop_assert!(v >= 0.0);
                sums[t] += v;
            }
            for t in 0..5 {
                if targets.contains(&t) {
                    prop_assert!((sums[t] - 1.0).abs() <= 1e-12);
                }
            }
        }
    }
}
