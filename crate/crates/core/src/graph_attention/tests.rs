use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::autodiff::{evaluate_with_grads, finite_difference_check, Evaluation};

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn random_params(d: usize, k: usize, r: &mut ChaCha8Rng) -> GraphAttentionParams<f64> {
    GraphAttentionParams::new(
        Array::uniform(&[d, d], 1.0, r),
        Array::uniform(&[1, 2 * d], 1.0, r),
        0.2,
        k,
    )
    .unwrap()
}

fn leaky(v: f64, slope: f64) -> f64 {
    if v >= 0.0 {
        v
    } else {
        slope * v
    }
}

/// e_ij evaluated pair by pair with explicit loops.
fn relation_oracle(x: &Array<f64>, p: &GraphAttentionParams<f64>) -> Vec<Vec<f64>> {
    let (t, d) = x.dims2().unwrap();
    let embed = |i: usize| -> Vec<f64> {
        (0..d)
            .map(|r| (0..d).map(|c| p.w_phi.at2(r, c) * x.at2(i, c)).sum())
            .collect()
    };
    let mut e = vec![vec![0.0; t]; t];
    for i in 0..t {
        for j in 0..t {
            let concat: Vec<f64> = embed(i).into_iter().chain(embed(j)).collect();
            let z: f64 = concat.iter().enumerate().map(|(c, v)| p.w_theta.at2(0, c) * v).sum();
            e[i][j] = leaky(z, p.leaky_slope);
        }
    }
    e
}

/// Stable sort by descending value; the first k indices are kept.
fn topk_oracle(row: &[f64], k: usize) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..row.len()).collect();
    idx.sort_by(|&a, &b| row[b].partial_cmp(&row[a]).unwrap());
    let mut out = vec![0.0; row.len()];
    for &j in idx.iter().take(k) {
        out[j] = row[j];
    }
    out
}

#[test]
fn zero_theta_gives_zero_relations() {
    let mut r = rng(1);
    let mut p = random_params(3, 2, &mut r);
    p.w_theta = Array::zeros(&[1, 6]);
    let x = Array::uniform(&[4, 3], 1.0, &mut r);
    let e = relation_coefficients(&x, &p).unwrap();
    assert!(e.data().iter().all(|&v| v == 0.0));
}

#[test]
fn single_node_graph() {
    let mut r = rng(2);
    let p = random_params(3, 25, &mut r);
    let x = Array::uniform(&[1, 3], 1.0, &mut r);
    assert_eq!(relation_coefficients(&x, &p).unwrap().shape(), &[1, 1]);
    let (out, adj) = graph_attention_forward(&x, &p).unwrap();
    assert_eq!(adj.values.data(), &[1.0]);
    assert_eq!(adj.k_used, 1);
    for c in 0..3 {
        let proj: f64 = (0..3).map(|j| p.w_phi.at2(c, j) * x.at2(0, j)).sum();
        assert!((out.at2(0, c) - (x.at2(0, c) + proj)).abs() < 1e-14);
    }
}

#[test]
fn relations_match_per_pair_oracle() {
    let mut r = rng(3);
    let p = GraphAttentionParams::new(
        Array::from_rows(&[vec![0.3, -0.2], vec![0.1, 0.4]]).unwrap(),
        Array::from_rows(&[vec![0.5, -0.7, 0.2, 0.9]]).unwrap(),
        0.2,
        2,
    )
    .unwrap();
    let x = Array::uniform(&[3, 2], 1.0, &mut r);
    let e = relation_coefficients(&x, &p).unwrap();
    let oracle = relation_oracle(&x, &p);
    for i in 0..3 {
        for j in 0..3 {
            assert!((e.at2(i, j) - oracle[i][j]).abs() < 1e-12);
        }
    }
}

#[test]
fn relation_dimension_mismatch() {
    let mut r = rng(4);
    let p = random_params(3, 2, &mut r);
    let x = Array::uniform(&[4, 5], 1.0, &mut r);
    assert!(matches!(relation_coefficients(&x, &p), Err(Error::Shape { .. })));
}

#[test]
fn params_validate_shapes() {
    let mut r = rng(5);
    assert!(GraphAttentionParams::new(
        Array::<f64>::uniform(&[3, 3], 1.0, &mut r),
        Array::uniform(&[1, 5], 1.0, &mut r),
        0.2,
        2
    )
    .is_err());
    assert!(GraphAttentionParams::new(
        Array::<f64>::uniform(&[3, 2], 1.0, &mut r),
        Array::uniform(&[1, 6], 1.0, &mut r),
        0.2,
        2
    )
    .is_err());
}

#[test]
fn topk_examples() {
    let a = Array::from_rows(&[vec![0.5, 0.3, 0.2]]).unwrap();
    assert_eq!(topk_mask::<f64>(&a, 2).unwrap().values.data(), &[0.5, 0.3, 0.0]);
    assert_eq!(topk_mask::<f64>(&a, 3).unwrap().values, a);
    assert_eq!(topk_mask::<f64>(&a, 10).unwrap().values, a);
    assert_eq!(topk_mask::<f64>(&a, 10).unwrap().k_used, 3);

    let tie = Array::from_rows(&[vec![0.4, 0.4, 0.2]]).unwrap();
    let got = topk_mask::<f64>(&tie, 1).unwrap();
    assert_eq!(got.values.data(), &[0.4, 0.0, 0.0]);
    assert_eq!(got.values.data(), topk_oracle(tie.row(0), 1).as_slice());

    assert!(matches!(topk_mask::<f64>(&a, 0), Err(Error::InvalidArgument(_))));
}

#[test]
fn topk_matches_stable_sort_oracle_with_ties() {
    let mut r = rng(6);
    for _ in 0..50 {
        // Values on a coarse grid so ties are common.
        let a = Array::<f64>::from_fn(&[5, 7], |_| (r.random_range(0..4) as f64) / 4.0);
        for k in 1..=8 {
            let got = topk_mask(&a, k).unwrap();
            for i in 0..5 {
                assert_eq!(got.values.row(i), topk_oracle(a.row(i), k).as_slice());
            }
        }
    }
}

#[test]
fn aggregate_examples() {
    let mut r = rng(7);
    let p = random_params(3, 4, &mut r);
    let x = Array::uniform(&[4, 3], 1.0, &mut r);
    let zero = AdjacencyGraph {
        values: Array::zeros(&[4, 4]),
        k_used: 4,
    };
    assert_eq!(aggregate(&zero, &x, &p).unwrap(), x);

    let mut ident = p.clone();
    ident.w_phi = Array::from_fn(&[3, 3], |i| if i % 4 == 0 { 1.0 } else { 0.0 });
    let eye = AdjacencyGraph {
        values: Array::from_fn(&[4, 4], |i| if i % 5 == 0 { 1.0 } else { 0.0 }),
        k_used: 1,
    };
    let out = aggregate(&eye, &x, &ident).unwrap();
    assert_eq!(out, x.map(|v| 2.0 * v));
}

#[test]
fn aggregate_matches_triple_loop() {
    let mut r = rng(8);
    let p = random_params(3, 4, &mut r);
    let x = Array::uniform(&[4, 3], 1.0, &mut r);
    let adj = AdjacencyGraph {
        values: Array::uniform(&[4, 4], 1.0, &mut r),
        k_used: 4,
    };
    let out = aggregate(&adj, &x, &p).unwrap();
    for i in 0..4 {
        for c in 0..3 {
            let mut acc = x.at2(i, c);
            for j in 0..4 {
                for m in 0..3 {
                    acc += adj.values.at2(i, j) * x.at2(j, m) * p.w_phi.at2(c, m);
                }
            }
            assert!((out.at2(i, c) - acc).abs() < 1e-12);
        }
    }
}

#[test]
fn aggregate_shape_mismatch() {
    let mut r = rng(9);
    let p = random_params(3, 4, &mut r);
    let x = Array::uniform(&[4, 3], 1.0, &mut r);
    let adj = AdjacencyGraph {
        values: Array::zeros(&[3, 3]),
        k_used: 3,
    };
    assert!(aggregate(&adj, &x, &p).is_err());
}

#[test]
fn zero_theta_full_k_is_uniform_mixing() {
    let mut r = rng(10);
    let mut p = random_params(3, 10, &mut r);
    p.w_theta = Array::zeros(&[1, 6]);
    let x = Array::uniform(&[5, 3], 1.0, &mut r);
    let (out, adj) = graph_attention_forward(&x, &p).unwrap();
    assert!(adj.values.data().iter().all(|&v| (v - 0.2).abs() < 1e-15));
    let mean: Vec<f64> = (0..3).map(|c| (0..5).map(|i| x.at2(i, c)).sum::<f64>() / 5.0).collect();
    for i in 0..5 {
        for c in 0..3 {
            let proj: f64 = (0..3).map(|m| mean[m] * p.w_phi.at2(c, m)).sum();
            assert!((out.at2(i, c) - (proj + x.at2(i, c))).abs() < 1e-12);
        }
    }
}

/// Smallest gap between the k-th and (k+1)-th attention weight of any row,
/// and the smallest |pre-activation score|.
fn margins(x: &Array<f64>, p: &GraphAttentionParams<f64>) -> (f64, f64) {
    let e = relation_coefficients(x, p).unwrap();
    let (t, _) = e.dims2().unwrap();
    let mut kink = f64::INFINITY;
    for v in e.data() {
        kink = kink.min(v.abs());
    }
    let mut gap = f64::INFINITY;
    for i in 0..t {
        let row = e.row(i);
        let mx = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = row.iter().map(|v| (v - mx).exp()).sum();
        let mut a: Vec<f64> = row.iter().map(|v| (v - mx).exp() / z).collect();
        a.sort_by(|x, y| y.partial_cmp(x).unwrap());
        if p.k < t {
            gap = gap.min(a[p.k - 1] - a[p.k]);
        }
    }
    (gap, kink)
}

fn tie_free_instance(t: usize, d: usize, k: usize, seed: u64) -> (Array<f64>, GraphAttentionParams<f64>) {
    for s in seed.. {
        let mut r = rng(s);
        let p = random_params(d, k, &mut r);
        let x = Array::uniform(&[t, d], 1.0, &mut r);
        let (gap, kink) = margins(&x, &p);
        if gap > 1e-3 && kink > 1e-3 {
            return (x, p);
        }
    }
    unreachable!()
}

fn graph_loss(
    p: &crate::autodiff::ParameterStore<f64>,
    weights: &Array<f64>,
    k: usize,
    drop_residual: bool,
) -> crate::Result<Evaluation> {
    evaluate_with_grads(p, |g, p| {
        let x = g.param(p, "x")?;
        let vars = GraphVars {
            w_phi: g.param(p, W_PHI)?,
            w_theta: g.param(p, W_THETA)?,
            w_agg: None,
        };
        let out = forward_on_tape(g, x, &vars, 0.2, k)?;
        let feats = if drop_residual {
            // Same value, but the residual's gradient path is severed.
            let detached = g.constant(g.value(x).clone());
            let proj = g.matmul_nt(x, vars.w_phi)?;
            let mixed = g.matmul(out.adjacency, proj)?;
            g.add(mixed, detached)?
        } else {
            out.features
        };
        let w = g.constant(weights.clone());
        let prod = g.mul(feats, w)?;
        Ok(g.sum(prod))
    })
}

fn store_for(x: &Array<f64>, p: &GraphAttentionParams<f64>) -> crate::autodiff::ParameterStore<f64> {
    let mut store = crate::autodiff::ParameterStore::new();
    store.insert("x", x.clone());
    store.insert(W_PHI, p.w_phi.clone());
    store.insert(W_THETA, p.w_theta.clone());
    store
}

#[test]
fn end_to_end_gradcheck() {
    let (x, p) = tie_free_instance(6, 4, 3, 100);
    let weights = Array::uniform(&[6, 4], 1.0, &mut rng(11));
    let store = store_for(&x, &p);
    let rep = finite_difference_check(&store, 1e-5, |s| graph_loss(s, &weights, 3, false)).unwrap();
    assert!(rep.max_rel_error < 1e-4, "{rep:?}");
}

#[test]
fn gradcheck_catches_dropped_residual() {
    let (x, p) = tie_free_instance(6, 4, 3, 200);
    let weights = Array::uniform(&[6, 4], 1.0, &mut rng(12));
    let store = store_for(&x, &p);
    let rep = finite_difference_check(&store, 1e-5, |s| {
        let full = graph_loss(s, &weights, 3, false)?;
        let buggy = graph_loss(s, &weights, 3, true)?;
        Ok(Evaluation {
            loss: full.loss,
            grads: buggy.grads,
        })
    })
    .unwrap();
    assert!(rep.max_rel_error > 1e-2, "{rep:?}");
}

#[test]
fn adjacency_invariants_hold_on_random_inputs() {
    let mut r = rng(13);
    for trial in 0..100 {
        let t = r.random_range(1..=12);
        let d = r.random_range(1..=6);
        let k = r.random_range(1..=14);
        let p = random_params(d, k, &mut r);
        let x = Array::uniform(&[t, d], 2.0, &mut r);

        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let vars = GraphVars::constants(&mut g, &p);
        let out = forward_on_tape(&mut g, xv, &vars, 0.2, k).unwrap();
        let att = g.value(out.attention);
        let adj = g.value(out.adjacency);
        assert_eq!(g.value(out.features).shape(), &[t, d], "trial {trial}");
        for i in 0..t {
            assert!((att.row(i).iter().sum::<f64>() - 1.0).abs() < 1e-9);
            let nz: Vec<f64> = adj.row(i).iter().copied().filter(|&v| v != 0.0).collect();
            assert_eq!(nz.len(), k.min(t), "trial {trial}");
            assert!(nz.iter().all(|&v| v > 0.0 && v <= 1.0));
            let s: f64 = nz.iter().sum();
            assert!(s > 0.0 && s <= 1.0 + 1e-9);
        }
    }
}

#[test]
fn asymmetry_witness() {
    let mut r = rng(14);
    let p = random_params(4, 3, &mut r);
    let x = Array::uniform(&[6, 4], 1.0, &mut r);
    let e = relation_coefficients(&x, &p).unwrap();
    let (_, adj) = graph_attention_forward(&x, &p).unwrap();
    assert_ne!(e, e.transpose2().unwrap());
    assert_ne!(adj.values, adj.values.transpose2().unwrap());
}

#[test]
fn permutation_equivariance() {
    let (x, p) = tie_free_instance(7, 5, 3, 300);
    let e = relation_coefficients(&x, &p).unwrap();
    let (out, _) = graph_attention_forward(&x, &p).unwrap();
    let mut r = rng(15);
    for _ in 0..20 {
        let mut perm: Vec<usize> = (0..7).collect();
        perm.shuffle(&mut r);
        let px = Array::from_fn(&[7, 5], |i| x.at2(perm[i / 5], i % 5));
        let pe = relation_coefficients(&px, &p).unwrap();
        let (pout, _) = graph_attention_forward(&px, &p).unwrap();
        for i in 0..7 {
            for j in 0..7 {
                assert!((pe.at2(i, j) - e.at2(perm[i], perm[j])).abs() < 1e-10);
            }
            for c in 0..5 {
                assert!((pout.at2(i, c) - out.at2(perm[i], c)).abs() < 1e-10);
            }
        }
    }
}

#[test]
fn gradient_reaches_only_kept_attention_entries() {
    let (x, p) = tie_free_instance(6, 4, 3, 400);
    let mut g = Graph::new();
    let xv = g.leaf(x.clone(), true);
    let vars = GraphVars::constants(&mut g, &p);
    let out = forward_on_tape(&mut g, xv, &vars, 0.2, 3).unwrap();
    let w = g.constant(Array::uniform(&[6, 4], 1.0, &mut rng(16)));
    let prod = g.mul(out.features, w).unwrap();
    let loss = g.sum(prod);
    g.backward(loss).unwrap();
    let adj = g.value(out.adjacency).clone();
    // Upstream of the mask, the gradient on the attention weights vanishes
    // exactly where the mask dropped the entry.
    let d_att = g.grad(out.attention).unwrap();
    for (a, d) in adj.data().iter().zip(d_att.data()) {
        if *a == 0.0 {
            assert_eq!(*d, 0.0);
        } else {
            assert_ne!(*d, 0.0);
        }
    }

    // Nudging a dropped entry's score by less than the selection margin
    // keeps the selection pattern.
    let (gap, _) = margins(&x, &p);
    let e = g.value(out.relations).clone();
    for idx in (0..36).filter(|&i| adj.data()[i] == 0.0) {
        let mut nudged = e.clone();
        nudged.data_mut()[idx] += 0.1 * gap;
        let mut g2 = Graph::new();
        let ev = g2.constant(nudged);
        let a2 = g2.softmax_rows(ev).unwrap();
        let m2 = g2.topk_rows(a2, 3).unwrap();
        let pattern: Vec<bool> = g2.value(m2).data().iter().map(|&v| v != 0.0).collect();
        let base: Vec<bool> = adj.data().iter().map(|&v| v != 0.0).collect();
        assert_eq!(pattern, base);
    }
}

#[test]
fn unshared_aggregation_projection() {
    let cfg = GraphAttentionConfig {
        dim: 4,
        k: 3,
        shared_phi: false,
        ..GraphAttentionConfig::default()
    };
    let mut store = crate::autodiff::ParameterStore::<f64>::new();
    cfg.init_params(&mut store, &mut rng(17));
    assert!(store.contains(W_AGG));
    let p = GraphAttentionParams::from_store(&store, &cfg).unwrap();
    let x = Array::uniform(&[5, 4], 1.0, &mut rng(18));
    let (out, adj) = graph_attention_forward(&x, &p).unwrap();
    assert_eq!(out, aggregate(&adj, &x, &p).unwrap());
    let mut shared = p.clone();
    shared.w_agg = None;
    assert_ne!(out, aggregate(&adj, &x, &shared).unwrap());
}
