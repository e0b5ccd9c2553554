//! Autoregressive caption decoder and beam search.
//!
//! A pre-norm Transformer decoder: token embeddings scaled by `sqrt(D)` plus
//! sinusoidal positions, then per layer masked self-attention, cross-attention
//! over the audio nodes and a ReLU feed-forward block, each wrapped in a
//! residual. The audio nodes are layer-normalised and given their own
//! sinusoidal positions before cross-attention, since the graph module
//! carries no notion of time order.

use rand::{Rng, RngCore};

use crate::autodiff::{Array, Graph, ParameterStore, Real, Var};
use crate::error::{Error, Result};
use crate::feature_io::{TokenSequence, EOS, PAD, SOS};

const LN_EPS: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq)]
pub struct DecoderConfig {
    pub n_layers: usize,
    pub n_heads: usize,
    pub dim: usize,
    pub ff_dim: usize,
    /// Longest token sequence fed to or produced by the decoder.
    pub max_len: usize,
    pub vocab_size: usize,
    /// Dropout on the embeddings and on each sublayer output, training only.
    pub dropout: f64,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        Self {
            n_layers: 2,
            n_heads: 4,
            dim: 128,
            ff_dim: 512,
            max_len: 12,
            vocab_size: 24,
            dropout: 0.2,
        }
    }
}

impl DecoderConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::InvalidArgument(m));
        if self.n_layers == 0 || self.n_heads == 0 || self.dim == 0 || self.ff_dim == 0 {
            return fail("decoder layers, heads, dim and ff_dim must be >= 1".into());
        }
        if self.dim % self.n_heads != 0 {
            return fail(format!(
                "decoder dim {} is not divisible by {} heads",
                self.dim, self.n_heads
            ));
        }
        if self.max_len == 0 {
            return fail("max_len must be >= 1".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return fail(format!("dropout must lie in [0, 1), got {}", self.dropout));
        }
        if self.vocab_size < 2 {
            return fail(format!("vocab_size must be >= 2, got {}", self.vocab_size));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.dim / self.n_heads
    }

    /// Initialises every decoder parameter in `store`.
    pub fn init_params<F: Real>(&self, store: &mut ParameterStore<F>, rng: &mut impl Rng) {
        let (d, f, v) = (self.dim, self.ff_dim, self.vocab_size);
        let xavier = |out: usize, inp: usize| (6.0 / (out + inp) as f64).sqrt();
        store.insert(names::EMBED, Array::randn(&[v, d], (d as f64).powf(-0.5), rng));
        norm_init(store, names::MEMORY_NORM, d);
        for l in 0..self.n_layers {
            for part in ["self_attn", "cross_attn"] {
                for w in ["wq", "wk", "wv", "wo"] {
                    store.insert(names::layer(l, part, w), Array::uniform(&[d, d], xavier(d, d), rng));
                }
                for b in ["bq", "bv", "bo"] {
                    store.insert(names::layer(l, part, b), Array::zeros(&[d]));
                }
            }
            for n in ["self_norm", "cross_norm", "ff_norm"] {
                norm_init(store, &names::layer_prefix(l, n), d);
            }
            store.insert(names::layer(l, "ff", "w1"), Array::uniform(&[f, d], xavier(f, d), rng));
            store.insert(names::layer(l, "ff", "b1"), Array::zeros(&[f]));
            store.insert(names::layer(l, "ff", "w2"), Array::uniform(&[d, f], xavier(d, f), rng));
            store.insert(names::layer(l, "ff", "b2"), Array::zeros(&[d]));
        }
        norm_init(store, names::FINAL_NORM, d);
        store.insert(names::OUT_WEIGHT, Array::uniform(&[v, d], xavier(v, d), rng));
        store.insert(names::OUT_BIAS, Array::zeros(&[v]));
    }
}

fn norm_init<F: Real>(store: &mut ParameterStore<F>, prefix: &str, d: usize) {
    store.insert(format!("{prefix}.gain"), Array::full(&[d], F::one()));
    store.insert(format!("{prefix}.bias"), Array::zeros(&[d]));
}

/// Parameter names used by the decoder.
pub mod names {
    pub const EMBED: &str = "decoder.embed";
    pub const MEMORY_NORM: &str = "decoder.memory_norm";
    pub const FINAL_NORM: &str = "decoder.final_norm";
    pub const OUT_WEIGHT: &str = "decoder.out.weight";
    pub const OUT_BIAS: &str = "decoder.out.bias";

    pub fn layer_prefix(layer: usize, part: &str) -> String {
        format!("decoder.layer{layer}.{part}")
    }

    pub fn layer(layer: usize, part: &str, leaf: &str) -> String {
        format!("decoder.layer{layer}.{part}.{leaf}")
    }
}

/// Sinusoidal table: `sin(p / 10000^(2i/D))` at column `2i`, `cos` at `2i+1`.
pub fn positional_encoding<F: Real>(n: usize, d: usize) -> Result<Array<F>> {
    if n == 0 || d == 0 {
        return Err(Error::InvalidArgument(format!(
            "positional encoding needs n, d >= 1, got {n}x{d}"
        )));
    }
    Ok(Array::from_fn(&[n, d], |idx| {
        let (p, c) = (idx / d, idx % d);
        let angle = p as f64 / 10000f64.powf((c - c % 2) as f64 / d as f64);
        F::of(if c % 2 == 0 { angle.sin() } else { angle.cos() })
    }))
}

#[derive(Clone, Copy, Debug)]
struct NormVars {
    gain: Var,
    bias: Var,
}

#[derive(Clone, Copy, Debug)]
struct AttnVars {
    wq: Var,
    wk: Var,
    wv: Var,
    wo: Var,
    bq: Var,
    bv: Var,
    bo: Var,
}

#[derive(Clone, Copy, Debug)]
struct LayerVars {
    self_norm: NormVars,
    self_attn: AttnVars,
    cross_norm: NormVars,
    cross_attn: AttnVars,
    ff_norm: NormVars,
    w1: Var,
    b1: Var,
    w2: Var,
    b2: Var,
}

/// Tape handles of every decoder parameter.
#[derive(Clone, Debug)]
pub struct DecoderVars {
    embed: Var,
    memory_norm: NormVars,
    layers: Vec<LayerVars>,
    final_norm: NormVars,
    out_w: Var,
    out_b: Var,
}

fn bind_norm<F: Real>(g: &mut Graph<F>, s: &ParameterStore<F>, prefix: &str) -> Result<NormVars> {
    Ok(NormVars {
        gain: g.param(s, &format!("{prefix}.gain"))?,
        bias: g.param(s, &format!("{prefix}.bias"))?,
    })
}

fn bind_attn<F: Real>(g: &mut Graph<F>, s: &ParameterStore<F>, l: usize, part: &str) -> Result<AttnVars> {
    let mut p = |leaf: &str| g.param(s, &names::layer(l, part, leaf));
    Ok(AttnVars {
        wq: p("wq")?,
        wk: p("wk")?,
        wv: p("wv")?,
        wo: p("wo")?,
        bq: p("bq")?,
        bv: p("bv")?,
        bo: p("bo")?,
    })
}

impl DecoderVars {
    pub fn bind<F: Real>(g: &mut Graph<F>, s: &ParameterStore<F>, cfg: &DecoderConfig) -> Result<Self> {
        let embed = g.param(s, names::EMBED)?;
        let memory_norm = bind_norm(g, s, names::MEMORY_NORM)?;
        let mut layers = Vec::with_capacity(cfg.n_layers);
        for l in 0..cfg.n_layers {
            layers.push(LayerVars {
                self_norm: bind_norm(g, s, &names::layer_prefix(l, "self_norm"))?,
                self_attn: bind_attn(g, s, l, "self_attn")?,
                cross_norm: bind_norm(g, s, &names::layer_prefix(l, "cross_norm"))?,
                cross_attn: bind_attn(g, s, l, "cross_attn")?,
                ff_norm: bind_norm(g, s, &names::layer_prefix(l, "ff_norm"))?,
                w1: g.param(s, &names::layer(l, "ff", "w1"))?,
                b1: g.param(s, &names::layer(l, "ff", "b1"))?,
                w2: g.param(s, &names::layer(l, "ff", "w2"))?,
                b2: g.param(s, &names::layer(l, "ff", "b2"))?,
            });
        }
        Ok(Self {
            embed,
            memory_norm,
            layers,
            final_norm: bind_norm(g, s, names::FINAL_NORM)?,
            out_w: g.param(s, names::OUT_WEIGHT)?,
            out_b: g.param(s, names::OUT_BIAS)?,
        })
    }
}

fn layer_norm<F: Real>(g: &mut Graph<F>, x: Var, n: NormVars) -> Result<Var> {
    let z = g.normalize_rows(x, F::of(LN_EPS))?;
    g.scale_shift_cols(z, n.gain, n.bias)
}

fn linear<F: Real>(g: &mut Graph<F>, x: Var, w: Var, b: Var) -> Result<Var> {
    let y = g.matmul_nt(x, w)?;
    g.add_row_vector(y, b)
}

fn attention<F: Real>(
    g: &mut Graph<F>,
    query: Var,
    source: Var,
    a: &AttnVars,
    heads: usize,
    causal: bool,
) -> Result<Var> {
    let q = linear(g, query, a.wq, a.bq)?;
    // No key bias: it shifts every score in a row equally and cancels in softmax.
    let k = g.matmul_nt(source, a.wk)?;
    let v = linear(g, source, a.wv, a.bv)?;
    let d = g.value(q).shape()[1];
    let dh = d / heads;
    let scale = F::of(1.0 / (dh as f64).sqrt());
    let mut ctx = Vec::with_capacity(heads);
    for h in 0..heads {
        let (lo, hi) = (h * dh, (h + 1) * dh);
        let (qh, kh, vh) = (g.slice_cols(q, lo, hi)?, g.slice_cols(k, lo, hi)?, g.slice_cols(v, lo, hi)?);
        let raw = g.matmul_t(qh, kh, false, true)?;
        let scores = g.scale(raw, scale);
        let weights = if causal {
            g.softmax_rows_causal(scores)?
        } else {
            g.softmax_rows(scores)?
        };
        ctx.push(g.matmul(weights, vh)?);
    }
    let joined = if heads == 1 { ctx[0] } else { g.concat_cols(&ctx)? };
    linear(g, joined, a.wo, a.bo)
}

/// Zeroes entries with probability `p` and rescales the rest by `1/(1-p)`;
/// the identity without an RNG.
fn dropout<F: Real>(g: &mut Graph<F>, x: Var, p: f64, rng: &mut Option<&mut dyn RngCore>) -> Result<Var> {
    let Some(rng) = rng.as_deref_mut() else {
        return Ok(x);
    };
    if p == 0.0 {
        return Ok(x);
    }
    let keep = F::of(1.0 / (1.0 - p));
    let mask = Array::from_fn(g.value(x).shape(), |_| {
        if rng.random::<f64>() < p {
            F::zero()
        } else {
            keep
        }
    });
    let mask = g.constant(mask);
    g.mul(x, mask)
}

/// Records the decoder on the tape and returns `N × V` logits for the token
/// ids `ids`, conditioned on `memory` (`T × D`). Row `n` depends only on
/// `ids[..=n]`. Dropout is off.
pub fn decode_on_tape<F: Real>(
    g: &mut Graph<F>,
    memory: Var,
    ids: &[usize],
    vars: &DecoderVars,
    cfg: &DecoderConfig,
) -> Result<Var> {
    decode_on_tape_with(g, memory, ids, vars, cfg, None)
}

/// [`decode_on_tape`] with dropout drawn from `rng` when one is given.
pub fn decode_on_tape_with<F: Real>(
    g: &mut Graph<F>,
    memory: Var,
    ids: &[usize],
    vars: &DecoderVars,
    cfg: &DecoderConfig,
    mut rng: Option<&mut dyn RngCore>,
) -> Result<Var> {
    let n = ids.len();
    if n == 0 {
        return Err(Error::Empty("decoder input tokens"));
    }
    if n > cfg.max_len {
        return Err(Error::InvalidArgument(format!(
            "decoder input has {n} tokens, max_len is {}",
            cfg.max_len
        )));
    }
    let (t, d) = g.value(memory).dims2()?;
    if d != cfg.dim {
        return Err(Error::shape(
            "decoder",
            format!("memory has {d} features, decoder dim is {}", cfg.dim),
        ));
    }
    let p = cfg.dropout;
    let mem = layer_norm(g, memory, vars.memory_norm)?;
    let mem = g.add_const(mem, &positional_encoding(t, d)?)?;

    let emb = g.embedding(vars.embed, ids)?;
    let emb = g.scale(emb, F::of((d as f64).sqrt()));
    let x = g.add_const(emb, &positional_encoding(n, d)?)?;
    let mut x = dropout(g, x, p, &mut rng)?;
    for layer in &vars.layers {
        let h = layer_norm(g, x, layer.self_norm)?;
        let h = attention(g, h, h, &layer.self_attn, cfg.n_heads, true)?;
        let h = dropout(g, h, p, &mut rng)?;
        x = g.add(x, h)?;
        let h = layer_norm(g, x, layer.cross_norm)?;
        let h = attention(g, h, mem, &layer.cross_attn, cfg.n_heads, false)?;
        let h = dropout(g, h, p, &mut rng)?;
        x = g.add(x, h)?;
        let h = layer_norm(g, x, layer.ff_norm)?;
        let h = linear(g, h, layer.w1, layer.b1)?;
        let h = g.relu(h);
        let h = linear(g, h, layer.w2, layer.b2)?;
        let h = dropout(g, h, p, &mut rng)?;
        x = g.add(x, h)?;
    }
    let x = layer_norm(g, x, vars.final_norm)?;
    linear(g, x, vars.out_w, vars.out_b)
}

/// Logits for every position of `input`, which must start with `<sos>`.
pub fn decode_teacher_forced<F: Real>(
    memory: &Array<F>,
    input: &TokenSequence,
    params: &ParameterStore<F>,
    cfg: &DecoderConfig,
) -> Result<Array<F>> {
    if input.as_slice().first() != Some(&SOS) {
        return Err(Error::InvalidArgument("decoder input must start with <sos>".into()));
    }
    let mut g = Graph::new();
    let vars = DecoderVars::bind(&mut g, params, cfg)?;
    let mem = g.constant(memory.clone());
    let logits = decode_on_tape(&mut g, mem, &input.ids(), &vars, cfg)?;
    Ok(g.value(logits).clone())
}

/// Numerically stable `log_softmax` of one row, evaluated in `f64`.
pub fn log_softmax<F: Real>(row: &[F]) -> Vec<f64> {
    let max = row.iter().map(|v| v.as_f64()).fold(f64::NEG_INFINITY, f64::max);
    let lse = row.iter().map(|v| (v.as_f64() - max).exp()).sum::<f64>().ln() + max;
    row.iter().map(|v| v.as_f64() - lse).collect()
}

/// Source of next-token log-probabilities for a partial caption.
pub trait NextTokenScorer {
    fn vocab_size(&self) -> usize;
    /// `generated` holds the tokens produced so far, without `<sos>`.
    fn next_log_probs(&self, generated: &[u32]) -> Result<Vec<f64>>;
}

/// Scores prefixes with a trained decoder over a fixed memory.
pub struct DecoderScorer<'a, F> {
    params: &'a ParameterStore<F>,
    cfg: &'a DecoderConfig,
    memory: Array<F>,
}

impl<'a, F: Real> DecoderScorer<'a, F> {
    pub fn new(params: &'a ParameterStore<F>, cfg: &'a DecoderConfig, memory: Array<F>) -> Self {
        Self { params, cfg, memory }
    }
}

impl<F: Real> NextTokenScorer for DecoderScorer<'_, F> {
    fn vocab_size(&self) -> usize {
        self.cfg.vocab_size
    }

    fn next_log_probs(&self, generated: &[u32]) -> Result<Vec<f64>> {
        let mut input = Vec::with_capacity(generated.len() + 1);
        input.push(SOS);
        input.extend_from_slice(generated);
        let logits = decode_teacher_forced(&self.memory, &TokenSequence(input), self.params, self.cfg)?;
        Ok(log_softmax(logits.row(logits.shape()[0] - 1)))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BeamConfig {
    pub beam_size: usize,
    /// Maximum number of generated tokens, `<eos>` included.
    pub max_len: usize,
    pub eos: u32,
    /// Tokens never proposed.
    pub forbidden: Vec<u32>,
    /// Rank finished hypotheses by `log_prob / len` instead of `log_prob`.
    pub length_normalize: bool,
}

impl BeamConfig {
    pub fn new(beam_size: usize, max_len: usize) -> Self {
        Self {
            beam_size,
            max_len,
            eos: EOS,
            forbidden: vec![PAD, SOS],
            length_normalize: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Hypothesis {
    /// Generated tokens, `<sos>` excluded, trailing `<eos>` included if produced.
    pub tokens: TokenSequence,
    pub log_prob: f64,
    pub finished: bool,
}

impl Hypothesis {
    pub fn score(&self, length_normalize: bool) -> f64 {
        if length_normalize {
            self.log_prob / self.tokens.len().max(1) as f64
        } else {
            self.log_prob
        }
    }
}

/// Ranking used for finished hypotheses: higher score first, then the
/// lexicographically smaller token sequence.
pub fn better(a: &Hypothesis, b: &Hypothesis, length_normalize: bool) -> bool {
    let (sa, sb) = (a.score(length_normalize), b.score(length_normalize));
    sa > sb || (sa == sb && a.tokens.as_slice() < b.tokens.as_slice())
}

/// Beam search whose live width shrinks as hypotheses finish, so width 1 is
/// greedy decoding. Candidates are ranked by cumulative log-probability,
/// ties by (parent, token); the best finished hypothesis is returned.
pub fn beam_search_with(scorer: &impl NextTokenScorer, cfg: &BeamConfig) -> Result<Hypothesis> {
    if cfg.beam_size < 1 {
        return Err(Error::InvalidArgument("beam size must be >= 1".into()));
    }
    if cfg.max_len < 1 {
        return Err(Error::InvalidArgument("max_len must be >= 1".into()));
    }
    let v = scorer.vocab_size();
    let allowed: Vec<u32> = (0..v as u32).filter(|t| !cfg.forbidden.contains(t)).collect();
    if allowed.is_empty() {
        return Err(Error::InvalidArgument("every token is forbidden".into()));
    }
    let mut live = vec![Hypothesis {
        tokens: TokenSequence::default(),
        log_prob: 0.0,
        finished: false,
    }];
    let mut finished: Vec<Hypothesis> = Vec::new();
    while !live.is_empty() {
        let mut candidates = Vec::with_capacity(live.len() * allowed.len());
        for (parent, hyp) in live.iter().enumerate() {
            let lp = scorer.next_log_probs(hyp.tokens.as_slice())?;
            if lp.len() != v {
                return Err(Error::shape("beam search", format!("{} scores for vocab {v}", lp.len())));
            }
            for &tok in &allowed {
                candidates.push((parent, tok, hyp.log_prob + lp[tok as usize]));
            }
        }
        candidates.sort_by(|a, b| b.2.total_cmp(&a.2).then(a.0.cmp(&b.0)).then(a.1.cmp(&b.1)));
        let width = cfg.beam_size - finished.len();
        let mut next = Vec::with_capacity(width);
        for &(parent, tok, log_prob) in candidates.iter().take(width) {
            let mut tokens = live[parent].tokens.0.clone();
            tokens.push(tok);
            let done = tok == cfg.eos || tokens.len() >= cfg.max_len;
            let hyp = Hypothesis {
                tokens: TokenSequence(tokens),
                log_prob,
                finished: done,
            };
            if done {
                finished.push(hyp);
            } else {
                next.push(hyp);
            }
        }
        live = next;
    }
    let mut best = finished[0].clone();
    for h in &finished[1..] {
        if better(h, &best, cfg.length_normalize) {
            best = h.clone();
        }
    }
    Ok(best)
}

/// Picks the most probable allowed token at every step.
pub fn greedy_decode(scorer: &impl NextTokenScorer, cfg: &BeamConfig) -> Result<Hypothesis> {
    let mut tokens = Vec::new();
    let mut log_prob = 0.0;
    loop {
        let lp = scorer.next_log_probs(&tokens)?;
        let (tok, best) = lp
            .iter()
            .enumerate()
            .filter(|(t, _)| !cfg.forbidden.contains(&(*t as u32)))
            .fold((usize::MAX, f64::NEG_INFINITY), |acc, (t, &p)| if p > acc.1 { (t, p) } else { acc });
        if tok == usize::MAX {
            return Err(Error::InvalidArgument("every token is forbidden".into()));
        }
        tokens.push(tok as u32);
        log_prob += best;
        if tok as u32 == cfg.eos || tokens.len() >= cfg.max_len {
            return Ok(Hypothesis {
                tokens: TokenSequence(tokens),
                log_prob,
                finished: true,
            });
        }
    }
}

/// Decodes a caption for `memory` with the trained decoder.
pub fn beam_search<F: Real>(
    memory: &Array<F>,
    params: &ParameterStore<F>,
    cfg: &DecoderConfig,
    beam: &BeamConfig,
) -> Result<TokenSequence> {
    let mut beam = beam.clone();
    // The decoder sees <sos> plus all but the final generated token.
    beam.max_len = beam.max_len.min(cfg.max_len);
    let scorer = DecoderScorer::new(params, cfg, memory.clone());
    Ok(beam_search_with(&scorer, &beam)?.tokens)
}
