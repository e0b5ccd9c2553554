use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::error::Error;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn arr(shape: &[usize], data: &[f64]) -> Array<f64> {
    Array::new(shape, data.to_vec()).unwrap()
}

/// Gradcheck of `loss = Σ out ⊙ R` for a random fixed `R`, where `out` is
/// produced by `build` from the named inputs.
fn check_op<B>(inputs: &[(&str, Array<f64>)], seed: u64, build: B) -> GradCheckReport
where
    B: Fn(&mut Graph<f64>, &[Var]) -> crate::Result<Var>,
{
    let mut store = ParameterStore::new();
    for (name, value) in inputs {
        store.insert(*name, value.clone());
    }
    let names: Vec<String> = inputs.iter().map(|(n, _)| (*n).to_owned()).collect();
    let weights = std::cell::RefCell::new(None::<Array<f64>>);
    finite_difference_check(&store, 1e-5, |p| {
        evaluate_with_grads(p, |g, p| {
            let vars: Vec<Var> = names.iter().map(|n| g.param(p, n)).collect::<Result<_, _>>()?;
            let out = build(g, &vars)?;
            let shape = g.value(out).shape().to_vec();
            let w = weights
                .borrow_mut()
                .get_or_insert_with(|| Array::uniform(&shape, 1.0, &mut rng(seed ^ 0xabcdef)))
                .clone();
            let w = g.constant(w);
            let prod = g.mul(out, w)?;
            Ok(g.sum(prod))
        })
    })
    .unwrap()
}

// ------------------------------------------------------------- leaky relu

#[test]
fn leaky_relu_examples() {
    let mut g = Graph::new();
    let x = g.constant(arr(&[2], &[2.0, -1.0]));
    let y = g.leaky_relu(x, 0.2).unwrap();
    assert_eq!(g.value(y).data(), &[2.0, -0.2]);
}

#[test]
fn leaky_relu_rejects_bad_input() {
    let mut g = Graph::<f64>::new();
    let x = g.constant(arr(&[1], &[f64::NAN]));
    assert!(matches!(g.leaky_relu(x, 0.2), Err(Error::NonFinite(_))));
    let x = g.constant(arr(&[1], &[1.0]));
    assert!(g.leaky_relu(x, 1.5).is_err());
}

#[test]
fn leaky_relu_kink_uses_slope() {
    let mut g = Graph::new();
    let x = g.leaf(arr(&[1], &[0.0]), true);
    let y = g.leaky_relu(x, 0.2).unwrap();
    let s = g.sum(y);
    g.backward(s).unwrap();
    assert_eq!(g.grad(x).unwrap().data(), &[0.2]);
}

#[test]
fn leaky_relu_gradient_matches_central_differences() {
    for seed in 0..10 {
        let mut r = rng(seed);
        // Keep every coordinate at least 1e-3 away from the kink.
        let x = Array::from_fn(&[4, 4], |_| {
            let v: f64 = r.random_range(0.001..2.0);
            if r.random_bool(0.5) { v } else { -v }
        });
        let rep = check_op(&[("x", x)], seed, |g, v| g.leaky_relu(v[0], 0.2));
        assert!(rep.max_rel_error < 1e-6, "seed {seed}: {rep:?}");
    }
}

// ---------------------------------------------------------------- softmax

#[test]
fn softmax_analytic_rows() {
    let mut g = Graph::new();
    let x = g.constant(arr(&[2, 3], &[5.0, 5.0, 5.0, 0.0, 2f64.ln(), 0.0]));
    let y = g.softmax_rows(x).unwrap();
    let v = g.value(y);
    for j in 0..3 {
        assert!((v.at2(0, j) - 1.0 / 3.0).abs() < 1e-15);
    }
    assert!((v.at2(1, 0) - 0.25).abs() < 1e-15);
    assert!((v.at2(1, 1) - 0.5).abs() < 1e-15);
}

#[test]
fn softmax_two_entry_row() {
    let mut g = Graph::new();
    let x = g.constant(arr(&[1, 2], &[0.0, 2f64.ln()]));
    let y = g.softmax_rows(x).unwrap();
    assert!((g.value(y).at2(0, 0) - 1.0 / 3.0).abs() < 1e-15);
    assert!((g.value(y).at2(0, 1) - 2.0 / 3.0).abs() < 1e-15);
}

#[test]
fn softmax_matches_naive_formula() {
    let mut r = rng(3);
    let x = Array::<f64>::uniform(&[5, 5], 3.0, &mut r);
    let mut g = Graph::new();
    let xv = g.constant(x.clone());
    let y = g.softmax_rows(xv).unwrap();
    for i in 0..5 {
        let denom: f64 = (0..5).map(|j| x.at2(i, j).exp()).sum();
        let mut row_sum = 0.0;
        for j in 0..5 {
            let naive = x.at2(i, j).exp() / denom;
            assert!((g.value(y).at2(i, j) - naive).abs() < 1e-12);
            assert!(g.value(y).at2(i, j) > 0.0);
            row_sum += g.value(y).at2(i, j);
        }
        assert!((row_sum - 1.0).abs() < 1e-9);
    }
}

#[test]
fn softmax_stable_for_large_logits() {
    let mut g = Graph::new();
    let x = g.constant(arr(&[1, 3], &[1000.0, 1000.0, -1000.0]));
    let y = g.softmax_rows(x).unwrap();
    assert!(g.value(y).is_finite());
    assert!((g.value(y).at2(0, 0) - 0.5).abs() < 1e-12);
}

#[test]
fn softmax_gradient() {
    for seed in 0..10 {
        let x = Array::uniform(&[3, 5], 2.0, &mut rng(seed));
        let rep = check_op(&[("x", x)], seed, |g, v| g.softmax_rows(v[0]));
        assert!(rep.max_rel_error < 1e-4, "{rep:?}");
        let x = Array::uniform(&[4, 4], 2.0, &mut rng(seed + 100));
        let rep = check_op(&[("x", x)], seed, |g, v| g.softmax_rows_causal(v[0]));
        assert!(rep.max_rel_error < 1e-4, "{rep:?}");
    }
}

#[test]
fn causal_softmax_zeroes_future() {
    let mut g = Graph::new();
    let x = g.constant(Array::uniform(&[3, 3], 1.0, &mut rng(1)));
    let y = g.softmax_rows_causal(x).unwrap();
    let v = g.value(y);
    assert_eq!(v.at2(0, 0), 1.0);
    assert_eq!(v.at2(0, 1), 0.0);
    assert_eq!(v.at2(1, 2), 0.0);
    assert!((v.row(2).iter().sum::<f64>() - 1.0).abs() < 1e-12);
}

// ---------------------------------------------------------- cross-entropy

#[test]
fn cross_entropy_uniform_logits_is_ln_v() {
    let mut g = Graph::new();
    let z = g.constant(Array::zeros(&[3, 7]));
    let l = g
        .cross_entropy_label_smoothed(z, &[0, 4, 6], &[true, true, true], 0.0)
        .unwrap();
    assert!((g.value(l).data()[0] - 7f64.ln()).abs() < 1e-12);
}

#[test]
fn cross_entropy_confident_target_goes_to_zero() {
    let mut g = Graph::new();
    let z = g.constant(arr(&[1, 3], &[0.0, 60.0, 0.0]));
    let l = g.cross_entropy_label_smoothed(z, &[1], &[true], 0.0).unwrap();
    assert!(g.value(l).data()[0] < 1e-20);
}

/// Scalar evaluation of the smoothed loss for a single row.
fn ce_oracle(logits: &[f64], target: usize, eps: f64) -> f64 {
    let v = logits.len();
    let denom: f64 = logits.iter().map(|z| z.exp()).sum();
    let mut loss = 0.0;
    for (j, z) in logits.iter().enumerate() {
        let p = z.exp() / denom;
        let q = if j == target { 1.0 - eps } else { eps / (v as f64 - 1.0) };
        loss -= q * p.ln();
    }
    loss
}

#[test]
fn cross_entropy_matches_scalar_oracle() {
    let rows = [[0.3, -1.2, 2.0, 0.5], [1.0, 0.0, -0.5, 0.25], [-2.0, 0.1, 0.2, 0.3]];
    let targets = [2usize, 0, 3];
    let mask = [true, false, true];
    let data: Vec<f64> = rows.iter().flatten().copied().collect();
    let mut g = Graph::new();
    let z = g.constant(arr(&[3, 4], &data));
    let l = g.cross_entropy_label_smoothed(z, &targets, &mask, 0.1).unwrap();
    let expected = (ce_oracle(&rows[0], 2, 0.1) + ce_oracle(&rows[2], 3, 0.1)) / 2.0;
    assert!((g.value(l).data()[0] - expected).abs() < 1e-12);
}

#[test]
fn cross_entropy_rejects_out_of_range_target() {
    let mut g = Graph::<f64>::new();
    let z = g.constant(Array::zeros(&[1, 4]));
    assert!(matches!(
        g.cross_entropy_label_smoothed(z, &[4], &[true], 0.1),
        Err(Error::TokenOutOfRange { index: 4, size: 4 })
    ));
}

#[test]
fn cross_entropy_gradient() {
    for seed in 0..10 {
        let z = Array::uniform(&[3, 5], 2.0, &mut rng(seed));
        let mut store = ParameterStore::new();
        store.insert("z", z);
        let rep = finite_difference_check(&store, 1e-5, |p| {
            evaluate_with_grads(p, |g, p| {
                let z = g.param(p, "z")?;
                g.cross_entropy_label_smoothed(z, &[1, 4, 0], &[true, true, false], 0.1)
            })
        })
        .unwrap();
        assert!(rep.max_rel_error < 1e-4, "{rep:?}");
    }
}

// ------------------------------------------------------------------- adam

#[test]
fn adam_zero_gradient_leaves_parameters() {
    let mut store = ParameterStore::new();
    store.insert("w", arr(&[3], &[1.0, -2.0, 0.5]));
    store.set_grad("w", Array::zeros(&[3])).unwrap();
    let mut st = AdamState::new(1e-3);
    adam_step(&mut store, &mut st).unwrap();
    assert_eq!(store.get("w").unwrap().data(), &[1.0, -2.0, 0.5]);
    assert_eq!(st.step_count, 1);
    assert!(store.grad("w").is_none(), "gradients cleared after step");
}

#[test]
fn adam_first_step_moves_by_lr() {
    for g in [3.0, -0.01] {
        let mut store = ParameterStore::new();
        store.insert("w", arr(&[1], &[0.0]));
        store.set_grad("w", arr(&[1], &[g])).unwrap();
        let mut st = AdamState::new(1e-4);
        adam_step(&mut store, &mut st).unwrap();
        let w = store.get("w").unwrap().data()[0];
        assert!((w.abs() - 1e-4).abs() < 1e-9, "{w}");
        assert_eq!(w.signum(), -g.signum());
    }
}

#[test]
fn adam_missing_gradient_is_an_error() {
    let mut store = ParameterStore::<f64>::new();
    store.insert("a", arr(&[1], &[0.0]));
    store.insert("b", arr(&[1], &[0.0]));
    store.set_grad("a", arr(&[1], &[1.0])).unwrap();
    let mut st = AdamState::new(0.1);
    assert!(matches!(adam_step(&mut store, &mut st), Err(Error::MissingGradient(n)) if n == "b"));
    assert_eq!(st.step_count, 0);
}

#[test]
fn adam_three_steps_on_square() {
    // Independent scalar Adam on f(θ) = θ².
    let (lr, b1, b2, eps) = (0.1f64, 0.9f64, 0.999f64, 1e-8f64);
    let (mut theta, mut m, mut v) = (1.0f64, 0.0f64, 0.0f64);
    let mut expected = Vec::new();
    for t in 1..=3 {
        let g = 2.0 * theta;
        m = b1 * m + (1.0 - b1) * g;
        v = b2 * v + (1.0 - b2) * g * g;
        let mh = m / (1.0 - b1.powi(t));
        let vh = v / (1.0 - b2.powi(t));
        theta -= lr * mh / (vh.sqrt() + eps);
        expected.push(theta);
    }

    let mut store = ParameterStore::new();
    store.insert("theta", arr(&[1], &[1.0]));
    let mut st = AdamState::new(lr);
    for want in expected {
        let mut g = Graph::new();
        let th = g.param(&store, "theta").unwrap();
        let sq = g.mul(th, th).unwrap();
        let l = g.sum(sq);
        g.backward(l).unwrap();
        g.accumulate_into(&mut store).unwrap();
        adam_step(&mut store, &mut st).unwrap();
        let got = store.get("theta").unwrap().data()[0];
        assert!((got - want).abs() < 1e-10, "{got} vs {want}");
    }
}

// -------------------------------------------------------------- gradcheck

#[test]
fn gradcheck_exact_quadratic() {
    let mut store = ParameterStore::new();
    store.insert("theta", Array::uniform(&[6], 2.0, &mut rng(9)));
    let rep = finite_difference_check(&store, 1e-5, |p| {
        evaluate_with_grads(p, |g, p| {
            let t = g.param(p, "theta")?;
            let sq = g.mul(t, t)?;
            Ok(g.sum(sq))
        })
    })
    .unwrap();
    assert!(rep.max_rel_error < 1e-9, "{rep:?}");
    assert_eq!(rep.coordinates, 6);
}

#[test]
fn gradcheck_detects_nondeterminism() {
    let mut store = ParameterStore::new();
    store.insert("theta", arr(&[1], &[1.0]));
    let mut calls = 0.0;
    let res = finite_difference_check(&store, 1e-5, |p| {
        calls += 1.0;
        Ok(Evaluation {
            loss: p.get("theta")?.data()[0] + calls,
            grads: [("theta".to_owned(), arr(&[1], &[1.0]))].into(),
        })
    });
    assert!(matches!(res, Err(Error::NonDeterministic { .. })));
}

#[test]
fn gradcheck_rejects_nonpositive_step() {
    let store = ParameterStore::<f64>::new();
    let res = finite_difference_check(&store, 0.0, |_| unreachable!());
    assert!(matches!(res, Err(Error::InvalidArgument(_))));
}

// ------------------------------------------------------ remaining op grads

#[test]
fn matmul_gradients_all_transpose_modes() {
    for (seed, (ta, tb)) in [(false, false), (true, false), (false, true), (true, true)]
        .into_iter()
        .enumerate()
    {
        let a_shape = if ta { [4, 3] } else { [3, 4] };
        let b_shape = if tb { [5, 4] } else { [4, 5] };
        let a = Array::uniform(&a_shape, 1.0, &mut rng(seed as u64));
        let b = Array::uniform(&b_shape, 1.0, &mut rng(seed as u64 + 50));
        let rep = check_op(&[("a", a), ("b", b)], seed as u64, |g, v| g.matmul_t(v[0], v[1], ta, tb));
        assert!(rep.max_rel_error < 1e-6, "{ta} {tb}: {rep:?}");
    }
}

#[test]
fn elementwise_and_broadcast_gradients() {
    for seed in 0..10 {
        let mut r = rng(seed);
        let x = Array::uniform(&[3, 4], 1.0, &mut r);
        let y = Array::uniform(&[3, 4], 1.0, &mut r);
        let gam = Array::uniform(&[4], 1.0, &mut r);
        let bet = Array::uniform(&[4], 1.0, &mut r);
        let rep = check_op(
            &[("x", x.clone()), ("y", y), ("g", gam), ("b", bet.clone())],
            seed,
            |g, v| {
                let s = g.add(v[0], v[1])?;
                let m = g.mul(s, v[0])?;
                let a = g.scale_shift_cols(m, v[2], v[3])?;
                let b = g.add_row_vector(a, v[3])?;
                Ok(g.scale(b, 0.5))
            },
        );
        assert!(rep.max_rel_error < 1e-6, "{rep:?}");

        let c = Array::uniform(&[3], 1.0, &mut r);
        let sh = Array::uniform(&[3], 1.0, &mut r);
        let rep = check_op(&[("x", x), ("c", c), ("s", sh)], seed, |g, v| {
            let y = g.scale_shift_rows(v[0], v[1], v[2])?;
            let t = g.transpose(y)?;
            Ok(g.relu(t))
        });
        assert!(rep.max_rel_error < 1e-6, "{rep:?}");
    }
}

#[test]
fn structural_op_gradients() {
    for seed in 0..10 {
        let mut r = rng(seed);
        let x = Array::uniform(&[3, 6], 1.0, &mut r);
        let s = Array::uniform(&[4, 1], 1.0, &mut r);
        let t = Array::uniform(&[5, 1], 1.0, &mut r);
        let table = Array::uniform(&[7, 10], 1.0, &mut r);
        let rep = check_op(&[("x", x), ("s", s), ("t", t), ("e", table)], seed, |g, v| {
            let a = g.slice_cols(v[0], 1, 3)?;
            let b = g.slice_cols(v[0], 4, 6)?;
            let c = g.concat_cols(&[b, a, v[0]])?;
            let o = g.outer_sum(v[1], v[2])?;
            let emb = g.embedding(v[3], &[2, 0, 2])?;
            let prod = g.matmul_nt(c, emb)?;
            let ones = g_ones(g, 5, 3);
            let oo = g.matmul(o, ones)?;
            let oo = g.slice_cols(oo, 0, 3)?;
            let oo = g.transpose(oo)?;
            let oo = g.slice_cols(oo, 0, 3)?;
            g.add(prod, oo)
        });
        assert!(rep.max_rel_error < 1e-4, "{rep:?}");
    }
}

fn g_ones(g: &mut Graph<f64>, r: usize, c: usize) -> Var {
    g.constant(Array::full(&[r, c], 1.0))
}

#[test]
fn conv_pool_band_mean_gradients() {
    for seed in 0..10 {
        let mut r = rng(seed);
        let x = Array::uniform(&[2, 5, 7], 1.0, &mut r);
        let w = Array::uniform(&[3, 2, 3, 3], 1.0, &mut r);
        let rep = check_op(&[("x", x), ("w", w)], seed, |g, v| {
            let c = g.conv2d_same(v[0], v[1])?;
            let p = g.avg_pool_last(c, 2)?;
            g.band_mean(p)
        });
        assert!(rep.max_rel_error < 1e-6, "{rep:?}");
    }
}

/// Direct-loop convolution used as an oracle for the im2col path.
#[test]
fn conv_matches_direct_loops() {
    let mut r = rng(4);
    let (ci, co, h, w) = (2, 3, 4, 6);
    let x = Array::<f64>::uniform(&[ci, h, w], 1.0, &mut r);
    let k = Array::<f64>::uniform(&[co, ci, 3, 5], 1.0, &mut r);
    let mut g = Graph::new();
    let (xv, kv) = (g.constant(x.clone()), g.constant(k.clone()));
    let y = g.conv2d_same(xv, kv).unwrap();
    for o in 0..co {
        for yy in 0..h {
            for xx in 0..w {
                let mut acc = 0.0;
                for c in 0..ci {
                    for dy in 0..3 {
                        for dx in 0..5 {
                            let sy = yy as isize + dy as isize - 1;
                            let sx = xx as isize + dx as isize - 2;
                            if sy < 0 || sx < 0 || sy >= h as isize || sx >= w as isize {
                                continue;
                            }
                            acc += k.data()[((o * ci + c) * 3 + dy) * 5 + dx]
                                * x.data()[(c * h + sy as usize) * w + sx as usize];
                        }
                    }
                }
                let got = g.value(y).data()[(o * h + yy) * w + xx];
                assert!((got - acc).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn topk_gradient_only_through_kept_entries() {
    let mut g = Graph::new();
    let x = g.leaf(arr(&[2, 3], &[0.5, 0.3, 0.2, 0.1, 0.7, 0.2]), true);
    let y = g.topk_rows(x, 2).unwrap();
    assert_eq!(g.value(y).data(), &[0.5, 0.3, 0.0, 0.0, 0.7, 0.2]);
    let s = g.sum(y);
    g.backward(s).unwrap();
    assert_eq!(g.grad(x).unwrap().data(), &[1.0, 1.0, 0.0, 0.0, 1.0, 1.0]);
}

// ------------------------------------------------------------- properties

#[test]
fn backward_of_sum_is_sum_of_backwards() {
    let mut r = rng(21);
    let x0 = Array::<f64>::uniform(&[3, 3], 1.0, &mut r);
    let grad_of = |which: u8| {
        let mut g = Graph::new();
        let x = g.leaf(x0.clone(), true);
        let a = g.softmax_rows(x).unwrap();
        let a = g.sum(a);
        let b = g.leaky_relu(x, 0.2).unwrap();
        let b = g.mul(b, x).unwrap();
        let b = g.sum(b);
        let loss = match which {
            0 => a,
            1 => b,
            _ => g.add(a, b).unwrap(),
        };
        g.backward(loss).unwrap();
        g.grad(x).unwrap().clone()
    };
    let (ga, gb, gab) = (grad_of(0), grad_of(1), grad_of(2));
    for i in 0..9 {
        assert!((ga.data()[i] + gb.data()[i] - gab.data()[i]).abs() < 1e-14);
    }
}

#[test]
fn repeated_forward_is_bit_identical() {
    let run = || {
        let mut r = rng(5);
        let mut g = Graph::<f64>::new();
        let x = g.constant(Array::uniform(&[4, 6], 1.0, &mut r));
        let w = g.constant(Array::uniform(&[5, 6], 1.0, &mut r));
        let y = g.matmul_nt(x, w).unwrap();
        let y = g.softmax_rows(y).unwrap();
        g.value(y).data().iter().map(|v| v.to_bits()).collect::<Vec<_>>()
    };
    assert_eq!(run(), run());
}

#[test]
fn parameter_grads_accumulate_across_graphs() {
    let mut store = ParameterStore::new();
    store.insert("w", arr(&[2], &[1.0, 2.0]));
    for _ in 0..2 {
        let mut g = Graph::new();
        let w = g.param(&store, "w").unwrap();
        let s = g.sum(w);
        g.backward(s).unwrap();
        g.accumulate_into(&mut store).unwrap();
    }
    assert_eq!(store.grad("w").unwrap().data(), &[2.0, 2.0]);
}

#[test]
fn normalize_rows_gradient() {
    for seed in 0..10 {
        let x = Array::uniform(&[3, 6], 1.0, &mut rng(seed));
        let rep = check_op(&[("x", x)], seed, |g, v| g.normalize_rows(v[0], 1e-5));
        assert!(rep.max_rel_error < 1e-6, "{rep:?}");
    }
}
