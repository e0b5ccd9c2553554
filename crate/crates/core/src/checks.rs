//! Seeded gradient-check instances for the trainable modules.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{
    evaluate_with_grads, finite_difference_check, Array, Evaluation, GradCheckReport, ParameterStore,
};
use crate::decoder::{decode_on_tape, DecoderConfig, DecoderVars};
use crate::error::{Error, Result};
use crate::feature_io::{EOS, SOS};
use crate::frontend::{encode_on_tape, FrontendConfig, FrontendVars};
use crate::graph_attention::{
    forward_on_tape, relation_coefficients, GraphAttentionParams, GraphVars, W_PHI, W_THETA,
};

/// Tolerance on the maximum relative error used by the `gradcheck` command.
pub const GRADCHECK_TOLERANCE: f64 = 1e-4;
/// Central-difference step.
pub const GRADCHECK_STEP: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ProbeModule {
    GraphAttention,
    Frontend,
    Decoder,
}

impl ProbeModule {
    pub const ALL: [ProbeModule; 3] = [Self::GraphAttention, Self::Frontend, Self::Decoder];

    pub fn name(self) -> &'static str {
        match self {
            Self::GraphAttention => "graph-attention",
            Self::Frontend => "frontend",
            Self::Decoder => "decoder",
        }
    }
}

impl fmt::Display for ProbeModule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ProbeModule {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown module {s:?}")))
    }
}

enum Instance {
    Graph { weights: Array<f64>, k: usize, slope: f64 },
    Frontend { cfg: FrontendConfig, mel: Array<f64>, weights: Array<f64> },
    Decoder { cfg: DecoderConfig, input: Vec<usize>, targets: Vec<usize> },
}

/// A scalar loss over a small random instance of one module, with the
/// parameters (inputs included) it is differentiated against.
pub struct GradProbe {
    pub module: ProbeModule,
    pub params: ParameterStore<f64>,
    instance: Instance,
}

impl GradProbe {
    /// Graph attention with T=6, D=4, k=3 on an input whose top-k choice and
    /// LeakyReLU signs stay fixed under a perturbation of the step size.
    /// Frontend with 2 blocks and D=8. Decoder with 1 layer, 2 heads, D=8,
    /// V=11 and the memory as a parameter.
    pub fn new(module: ProbeModule, seed: u64) -> Result<Self> {
        match module {
            ProbeModule::GraphAttention => graph_probe(seed),
            ProbeModule::Frontend => frontend_probe(seed),
            ProbeModule::Decoder => decoder_probe(seed),
        }
    }

    /// Loss and analytic gradients at `params`.
    pub fn evaluate(&self, params: &ParameterStore<f64>) -> Result<Evaluation> {
        match &self.instance {
            Instance::Graph { weights, k, slope } => evaluate_with_grads(params, |g, p| {
                let x = g.param(p, "x")?;
                let vars = GraphVars {
                    w_phi: g.param(p, W_PHI)?,
                    w_theta: g.param(p, W_THETA)?,
                    w_agg: None,
                };
                let out = forward_on_tape(g, x, &vars, *slope, *k)?;
                let w = g.constant(weights.clone());
                let prod = g.mul(out.features, w)?;
                Ok(g.sum(prod))
            }),
            Instance::Frontend { cfg, mel, weights } => evaluate_with_grads(params, |g, p| {
                let vars = FrontendVars::bind(g, p, cfg)?;
                let out = encode_on_tape(g, mel, &vars, cfg)?;
                let w = g.constant(weights.clone());
                let prod = g.mul(out, w)?;
                Ok(g.sum(prod))
            }),
            Instance::Decoder { cfg, input, targets } => evaluate_with_grads(params, |g, p| {
                let vars = DecoderVars::bind(g, p, cfg)?;
                let mem = g.param(p, "memory")?;
                let logits = decode_on_tape(g, mem, input, &vars, cfg)?;
                let mask = vec![true; targets.len()];
                g.cross_entropy_label_smoothed(logits, targets, &mask, 0.1)
            }),
        }
    }

    /// Central-difference check of every coordinate with step `h`.
    pub fn check(&self, h: f64) -> Result<GradCheckReport> {
        finite_difference_check(&self.params, h, |p| self.evaluate(p))
    }
}

fn graph_probe(seed: u64) -> Result<GradProbe> {
    let (t, d, k, slope) = (6, 4, 3, 0.2);
    for s in seed.wrapping_mul(1000).. {
        let mut rng = ChaCha8Rng::seed_from_u64(s);
        let params = GraphAttentionParams::new(
            Array::uniform(&[d, d], 1.0, &mut rng),
            Array::uniform(&[1, 2 * d], 1.0, &mut rng),
            slope,
            k,
        )?;
        let x = Array::uniform(&[t, d], 1.0, &mut rng);
        if separation(&x, &params)? > 1e-3 {
            let mut store = ParameterStore::new();
            store.insert("x", x);
            store.insert(W_PHI, params.w_phi);
            store.insert(W_THETA, params.w_theta);
            return Ok(GradProbe {
                module: ProbeModule::GraphAttention,
                params: store,
                instance: Instance::Graph {
                    weights: Array::uniform(&[t, d], 1.0, &mut rng),
                    k,
                    slope,
                },
            });
        }
    }
    unreachable!("seed space exhausted")
}

/// Smallest distance of any relation score from the LeakyReLU kink and of
/// any row's k-th attention weight from its (k+1)-th.
fn separation(x: &Array<f64>, p: &GraphAttentionParams<f64>) -> Result<f64> {
    let e = relation_coefficients(x, p)?;
    let (t, _) = e.dims2()?;
    let mut margin = e.data().iter().fold(f64::INFINITY, |m, v| m.min(v.abs()));
    for i in 0..t {
        let row = e.row(i);
        let mx = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = row.iter().map(|v| (v - mx).exp()).sum();
        let mut a: Vec<f64> = row.iter().map(|v| (v - mx).exp() / z).collect();
        a.sort_by(|x, y| y.total_cmp(x));
        if p.k < t {
            margin = margin.min(a[p.k - 1] - a[p.k]);
        }
    }
    Ok(margin)
}

fn frontend_probe(seed: u64) -> Result<GradProbe> {
    let cfg = FrontendConfig {
        channels: vec![4, 8],
        pools: vec![2, 2],
        kernel: 3,
        leaky_slope: 0.2,
        band_channels: 3,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParameterStore::new();
    cfg.init_params(&mut store, &mut rng);
    // Scales and shifts away from their neutral initial values.
    for name in cfg.param_names() {
        if !name.ends_with(".conv") {
            for v in store.get_mut(&name)?.data_mut() {
                *v += rng.random_range(-0.5..0.5);
            }
        }
    }
    let mel = Array::uniform(&[12, 6], 1.0, &mut rng);
    let weights = Array::uniform(&[3, 8], 1.0, &mut rng);
    Ok(GradProbe {
        module: ProbeModule::Frontend,
        params: store,
        instance: Instance::Frontend { cfg, mel, weights },
    })
}

fn decoder_probe(seed: u64) -> Result<GradProbe> {
    let cfg = DecoderConfig {
        n_layers: 1,
        n_heads: 2,
        dim: 8,
        ff_dim: 16,
        max_len: 8,
        vocab_size: 11,
        dropout: 0.0,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParameterStore::new();
    cfg.init_params(&mut store, &mut rng);
    let names: Vec<String> = store.names().map(str::to_owned).collect();
    for name in names {
        for v in store.get_mut(&name)?.data_mut() {
            *v += rng.random_range(-0.3..0.3);
        }
    }
    store.insert("memory", Array::uniform(&[5, 8], 1.0, &mut rng));
    let words: Vec<usize> = (0..5).map(|_| rng.random_range(4..11)).collect();
    let mut input = vec![SOS as usize];
    input.extend(&words);
    let mut targets = words;
    targets.push(EOS as usize);
    Ok(GradProbe {
        module: ProbeModule::Decoder,
        params: store,
        instance: Instance::Decoder { cfg, input, targets },
    })
}
