//! Graph attention over audio feature nodes.
//!
//! Each row of the feature matrix `X` (`T×D`) is a node. Pairwise relation
//! scores `e_ij = LeakyReLU(W_θ [W_φ x_i ; W_φ x_j])` are softmax-normalised
//! per row, the `k` strongest edges of each row are kept, and the nodes are
//! aggregated along the resulting directed graph with a residual path:
//! `X̂ = Â X W_φᵀ + X`.

use rand::Rng;

use crate::autodiff::{topk_keep_mask, Array, Graph, ParameterStore, Real, Var};
use crate::error::{Error, Result};

pub const W_PHI: &str = "graph.w_phi";
pub const W_THETA: &str = "graph.w_theta";
/// Separate aggregation projection, present only when `shared_phi` is off.
pub const W_AGG: &str = "graph.w_agg";

#[derive(Clone, Debug, PartialEq)]
pub struct GraphAttentionConfig {
    pub dim: usize,
    pub k: usize,
    pub leaky_slope: f64,
    /// When false the module is the identity (backbone ablation).
    pub enabled: bool,
    /// Reuse `W_φ` for aggregation instead of a separate matrix.
    pub shared_phi: bool,
}

impl Default for GraphAttentionConfig {
    fn default() -> Self {
        Self {
            dim: 128,
            k: 25,
            leaky_slope: 0.2,
            enabled: true,
            shared_phi: true,
        }
    }
}

impl GraphAttentionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k < 1 {
            return Err(Error::InvalidArgument("graph k must be >= 1".into()));
        }
        if self.dim == 0 {
            return Err(Error::InvalidArgument("graph dim must be >= 1".into()));
        }
        if !(self.leaky_slope > 0.0 && self.leaky_slope < 1.0) {
            return Err(Error::InvalidArgument(format!(
                "leaky slope must lie in (0, 1), got {}",
                self.leaky_slope
            )));
        }
        Ok(())
    }

    /// Adds the module's parameters to `store` (nothing when disabled).
    pub fn init_params<F: Real>(&self, store: &mut ParameterStore<F>, rng: &mut impl Rng) {
        if !self.enabled {
            return;
        }
        let d = self.dim;
        let phi_bound = (6.0 / (2 * d) as f64).sqrt();
        store.insert(W_PHI, Array::uniform(&[d, d], phi_bound, rng));
        let theta_bound = (6.0 / (1 + 2 * d) as f64).sqrt();
        store.insert(W_THETA, Array::uniform(&[1, 2 * d], theta_bound, rng));
        if !self.shared_phi {
            store.insert(W_AGG, Array::uniform(&[d, d], phi_bound, rng));
        }
    }
}

/// Learnable matrices and hyperparameters of one graph-attention module.
#[derive(Clone, Debug)]
pub struct GraphAttentionParams<F> {
    pub w_phi: Array<F>,
    pub w_theta: Array<F>,
    /// `None` means aggregation reuses `w_phi`.
    pub w_agg: Option<Array<F>>,
    pub leaky_slope: f64,
    pub k: usize,
}

impl<F: Real> GraphAttentionParams<F> {
    pub fn new(w_phi: Array<F>, w_theta: Array<F>, leaky_slope: f64, k: usize) -> Result<Self> {
        let p = Self {
            w_phi,
            w_theta,
            w_agg: None,
            leaky_slope,
            k,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn from_store(store: &ParameterStore<F>, cfg: &GraphAttentionConfig) -> Result<Self> {
        let mut p = Self::new(
            store.get(W_PHI)?.clone(),
            store.get(W_THETA)?.clone(),
            cfg.leaky_slope,
            cfg.k,
        )?;
        if !cfg.shared_phi {
            p.w_agg = Some(store.get(W_AGG)?.clone());
        }
        Ok(p)
    }

    pub fn dim(&self) -> usize {
        self.w_phi.shape()[0]
    }

    fn validate(&self) -> Result<()> {
        let (r, c) = self.w_phi.dims2()?;
        if r != c {
            return Err(Error::shape("graph attention", format!("W_phi is {r}x{c}, not square")));
        }
        if self.w_theta.shape() != [1, 2 * r] {
            return Err(Error::shape(
                "graph attention",
                format!("W_theta is {:?}, expected [1, {}]", self.w_theta.shape(), 2 * r),
            ));
        }
        if let Some(w) = &self.w_agg {
            if w.shape() != [r, r] {
                return Err(Error::shape("graph attention", "W_agg must match W_phi"));
            }
        }
        if self.k < 1 {
            return Err(Error::InvalidArgument("graph k must be >= 1".into()));
        }
        Ok(())
    }
}

/// Row-stochastic attention after top-k masking.
#[derive(Clone, Debug)]
pub struct AdjacencyGraph<F> {
    pub values: Array<F>,
    /// `min(k, T)`: nonzero entries kept per row.
    pub k_used: usize,
}

impl<F: Real> AdjacencyGraph<F> {
    pub fn nodes(&self) -> usize {
        self.values.shape()[0]
    }
}

/// Handles of the module's parameters on a tape.
#[derive(Clone, Copy, Debug)]
pub struct GraphVars {
    pub w_phi: Var,
    pub w_theta: Var,
    pub w_agg: Option<Var>,
}

impl GraphVars {
    pub fn bind<F: Real>(g: &mut Graph<F>, store: &ParameterStore<F>, cfg: &GraphAttentionConfig) -> Result<Self> {
        Ok(Self {
            w_phi: g.param(store, W_PHI)?,
            w_theta: g.param(store, W_THETA)?,
            w_agg: if cfg.shared_phi {
                None
            } else {
                Some(g.param(store, W_AGG)?)
            },
        })
    }

    pub fn constants<F: Real>(g: &mut Graph<F>, p: &GraphAttentionParams<F>) -> Self {
        Self {
            w_phi: g.constant(p.w_phi.clone()),
            w_theta: g.constant(p.w_theta.clone()),
            w_agg: p.w_agg.clone().map(|w| g.constant(w)),
        }
    }
}

/// Tape outputs of [`forward_on_tape`].
#[derive(Clone, Copy, Debug)]
pub struct GraphOutput {
    pub features: Var,
    pub relations: Var,
    pub attention: Var,
    pub adjacency: Var,
}

fn check_features<F: Real>(g: &Graph<F>, x: Var, w_phi: Var) -> Result<usize> {
    let (t, d) = g
        .value(x)
        .dims2()
        .map_err(|_| Error::shape("graph attention", "features must be T x D"))?;
    let dp = g.value(w_phi).shape()[1];
    if d != dp {
        return Err(Error::shape(
            "graph attention",
            format!("features have {d} columns, W_phi expects {dp}"),
        ));
    }
    g.value(x).ensure_finite("graph attention features")?;
    Ok(t)
}

/// Records `E` and the node embeddings `H = X W_φᵀ` on the tape.
pub fn relation_coefficients_on_tape<F: Real>(
    g: &mut Graph<F>,
    x: Var,
    vars: &GraphVars,
    slope: f64,
) -> Result<(Var, Var)> {
    check_features(g, x, vars.w_phi)?;
    let d = g.value(vars.w_phi).shape()[0];
    let h = g.matmul_nt(x, vars.w_phi)?;
    // W_θ [a; b] = θ_src · a + θ_dst · b, so e_ij = σ(s_i + t_j).
    let theta_src = g.slice_cols(vars.w_theta, 0, d)?;
    let theta_dst = g.slice_cols(vars.w_theta, d, 2 * d)?;
    let s = g.matmul_nt(h, theta_src)?;
    let t = g.matmul_nt(h, theta_dst)?;
    let scores = g.outer_sum(s, t)?;
    let e = g.leaky_relu(scores, F::of(slope))?;
    Ok((e, h))
}

/// Full module on the tape: relations, softmax, top-k mask, aggregation.
pub fn forward_on_tape<F: Real>(
    g: &mut Graph<F>,
    x: Var,
    vars: &GraphVars,
    slope: f64,
    k: usize,
) -> Result<GraphOutput> {
    let (e, h) = relation_coefficients_on_tape(g, x, vars, slope)?;
    let attention = g.softmax_rows(e)?;
    let adjacency = g.topk_rows(attention, k)?;
    let projected = match vars.w_agg {
        Some(w) => g.matmul_nt(x, w)?,
        None => h,
    };
    let mixed = g.matmul(adjacency, projected)?;
    let features = g.add(mixed, x)?;
    Ok(GraphOutput {
        features,
        relations: e,
        attention,
        adjacency,
    })
}

/// Relation matrix `E` (`T×T`) for every ordered node pair, self-pairs included.
pub fn relation_coefficients<F: Real>(x: &Array<F>, params: &GraphAttentionParams<F>) -> Result<Array<F>> {
    let mut g = Graph::new();
    let xv = g.constant(x.clone());
    let vars = GraphVars::constants(&mut g, params);
    let (e, _) = relation_coefficients_on_tape(&mut g, xv, &vars, params.leaky_slope)?;
    Ok(g.value(e).clone())
}

/// Keeps the `min(k, T)` largest entries per row verbatim and zeroes the
/// rest, without renormalising. Ties keep the lower column index.
pub fn topk_mask<F: Real>(attention_rows: &Array<F>, k: usize) -> Result<AdjacencyGraph<F>> {
    if k < 1 {
        return Err(Error::InvalidArgument("top-k needs k >= 1".into()));
    }
    let (r, c) = attention_rows.dims2()?;
    let keep = topk_keep_mask(attention_rows.data(), r, c, k);
    let data = attention_rows
        .data()
        .iter()
        .zip(&keep)
        .map(|(&v, &kept)| if kept { v } else { F::zero() })
        .collect();
    Ok(AdjacencyGraph {
        values: Array::new(&[r, c], data)?,
        k_used: k.min(c),
    })
}

/// `X̂ = Â X W_φᵀ + X` (or `W_agg` in place of `W_φ` when unshared).
pub fn aggregate<F: Real>(
    adj: &AdjacencyGraph<F>,
    x: &Array<F>,
    params: &GraphAttentionParams<F>,
) -> Result<Array<F>> {
    let (t, d) = x.dims2()?;
    if adj.values.shape() != [t, t] {
        return Err(Error::shape(
            "aggregate",
            format!("adjacency {:?} for {t} nodes", adj.values.shape()),
        ));
    }
    if d != params.dim() {
        return Err(Error::shape("aggregate", format!("features have {d} columns, W_phi is {}", params.dim())));
    }
    let w = params.w_agg.as_ref().unwrap_or(&params.w_phi);
    let mut g = Graph::new();
    let (av, xv, wv) = (g.constant(adj.values.clone()), g.constant(x.clone()), g.constant(w.clone()));
    let proj = g.matmul_nt(xv, wv)?;
    let mixed = g.matmul(av, proj)?;
    let out = g.add(mixed, xv)?;
    Ok(g.value(out).clone())
}

/// Runs the module and returns the aggregated features with the adjacency graph.
pub fn graph_attention_forward<F: Real>(
    x: &Array<F>,
    params: &GraphAttentionParams<F>,
) -> Result<(Array<F>, AdjacencyGraph<F>)> {
    let mut g = Graph::new();
    let xv = g.constant(x.clone());
    let vars = GraphVars::constants(&mut g, params);
    let out = forward_on_tape(&mut g, xv, &vars, params.leaky_slope, params.k)?;
    let t = g.value(out.adjacency).shape()[0];
    Ok((
        g.value(out.features).clone(),
        AdjacencyGraph {
            values: g.value(out.adjacency).clone(),
            k_used: params.k.min(t),
        },
    ))
}

#[cfg(test)]
mod tests;
