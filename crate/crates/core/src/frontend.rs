//! Convolutional frontend turning a mel spectrogram into audio feature nodes.
//!
//! Each block is `conv3x3 -> per-channel scale/shift -> LeakyReLU -> average
//! pool over time`. After the last block the mel-band axis is averaged away,
//! leaving one `D`-dimensional node per pooled time step.
//!
//! Plain convolutions are translation equivariant along the band axis, so a
//! band mean at the end would make every band look alike. The input is
//! therefore expanded to `band_channels` planes `x · cos(π m b / (F - 1))`
//! (plane `m`, band `b` of `F`); plane 0 is the raw input. The expansion is
//! linear in `x`, which keeps a zero spectrogram mapped to zero.

use std::f64::consts::PI;

use rand::Rng;

use crate::autodiff::{Array, Graph, ParameterStore, Real, Var};
use crate::error::{Error, Result};
use crate::feature_io::FeatureMatrix;

#[derive(Clone, Debug, PartialEq)]
pub struct FrontendConfig {
    /// Output channels per block; the last entry is the node dimension `D`.
    pub channels: Vec<usize>,
    /// Temporal average-pooling factor per block.
    pub pools: Vec<usize>,
    /// Odd square kernel extent.
    pub kernel: usize,
    pub leaky_slope: f64,
    /// Number of band-position planes the input is expanded into (>= 1).
    pub band_channels: usize,
}

impl Default for FrontendConfig {
    fn default() -> Self {
        Self {
            channels: vec![32, 64, 128, 128],
            pools: vec![2, 2, 2, 2],
            kernel: 3,
            leaky_slope: 0.2,
            band_channels: 32,
        }
    }
}

fn prefix(block: usize) -> String {
    format!("frontend.block{block}")
}

pub fn conv_name(block: usize) -> String {
    format!("{}.conv", prefix(block))
}

pub fn scale_name(block: usize) -> String {
    format!("{}.scale", prefix(block))
}

pub fn shift_name(block: usize) -> String {
    format!("{}.shift", prefix(block))
}

impl FrontendConfig {
    pub fn validate(&self) -> Result<()> {
        if self.channels.is_empty() {
            return Err(Error::InvalidArgument("frontend needs at least one block".into()));
        }
        if self.channels.len() != self.pools.len() {
            return Err(Error::InvalidArgument(format!(
                "{} channel counts but {} pool factors",
                self.channels.len(),
                self.pools.len()
            )));
        }
        if self.channels.contains(&0) || self.pools.contains(&0) {
            return Err(Error::InvalidArgument(
                "channel counts and pool factors must be >= 1".into(),
            ));
        }
        if self.kernel % 2 == 0 {
            return Err(Error::InvalidArgument(format!(
                "kernel extent must be odd, got {}",
                self.kernel
            )));
        }
        if self.band_channels == 0 {
            return Err(Error::InvalidArgument("band_channels must be >= 1".into()));
        }
        if !(self.leaky_slope > 0.0 && self.leaky_slope < 1.0) {
            return Err(Error::InvalidArgument(format!(
                "leaky slope must lie in (0, 1), got {}",
                self.leaky_slope
            )));
        }
        Ok(())
    }

    pub fn dim(&self) -> usize {
        *self.channels.last().unwrap_or(&0)
    }

    pub fn n_blocks(&self) -> usize {
        self.channels.len()
    }

    /// Shortest accepted input, the product of the pool factors.
    pub fn min_frames(&self) -> usize {
        self.pools.iter().product()
    }

    pub fn output_frames(&self, frames: usize) -> usize {
        frames.div_ceil(self.min_frames())
    }

    /// He-initialised kernels, unit scales, zero shifts.
    pub fn init_params<F: Real>(&self, store: &mut ParameterStore<F>, rng: &mut impl Rng) {
        let mut c_in = self.band_channels;
        let k = self.kernel;
        for (b, &c_out) in self.channels.iter().enumerate() {
            let std = (2.0 / (c_in * k * k) as f64).sqrt();
            store.insert(conv_name(b), Array::randn(&[c_out, c_in, k, k], std, rng));
            store.insert(scale_name(b), Array::full(&[c_out], F::one()));
            store.insert(shift_name(b), Array::zeros(&[c_out]));
            c_in = c_out;
        }
    }

    /// Every parameter name the frontend owns.
    pub fn param_names(&self) -> Vec<String> {
        (0..self.n_blocks())
            .flat_map(|b| [conv_name(b), scale_name(b), shift_name(b)])
            .collect()
    }
}

/// Tape handles of one block.
#[derive(Clone, Copy, Debug)]
pub struct BlockVars {
    pub conv: Var,
    pub scale: Var,
    pub shift: Var,
}

#[derive(Clone, Debug)]
pub struct FrontendVars {
    pub blocks: Vec<BlockVars>,
}

impl FrontendVars {
    pub fn bind<F: Real>(g: &mut Graph<F>, store: &ParameterStore<F>, cfg: &FrontendConfig) -> Result<Self> {
        let blocks = (0..cfg.n_blocks())
            .map(|b| {
                Ok(BlockVars {
                    conv: g.param(store, &conv_name(b))?,
                    scale: g.param(store, &scale_name(b))?,
                    shift: g.param(store, &shift_name(b))?,
                })
            })
            .collect::<Result<_>>()?;
        Ok(Self { blocks })
    }
}

/// `[band_channels, bands, frames]` planes built from a `frames × bands` input.
pub fn band_planes<F: Real>(mel: &Array<F>, band_channels: usize) -> Result<Array<F>> {
    let (frames, bands) = mel.dims2()?;
    let denom = bands.saturating_sub(1).max(1) as f64;
    let mut out = vec![F::zero(); band_channels * bands * frames];
    for m in 0..band_channels {
        for b in 0..bands {
            let w = F::of((PI * m as f64 * b as f64 / denom).cos());
            let dst = &mut out[(m * bands + b) * frames..(m * bands + b + 1) * frames];
            for (t, d) in dst.iter_mut().enumerate() {
                *d = mel.at2(t, b) * w;
            }
        }
    }
    Array::new(&[band_channels, bands, frames], out)
}

/// Records the frontend on the tape; `mel` is `frames × bands`, the result
/// is `T × D`.
pub fn encode_on_tape<F: Real>(
    g: &mut Graph<F>,
    mel: &Array<F>,
    vars: &FrontendVars,
    cfg: &FrontendConfig,
) -> Result<Var> {
    let (frames, _) = mel.dims2()?;
    if frames < cfg.min_frames() {
        return Err(Error::InputTooShort {
            frames,
            minimum: cfg.min_frames(),
        });
    }
    mel.ensure_finite("mel input")?;
    let mut h = g.constant(band_planes(mel, cfg.band_channels)?);
    let slope = F::of(cfg.leaky_slope);
    for (block, &pool) in vars.blocks.iter().zip(&cfg.pools) {
        h = g.conv2d_same(h, block.conv)?;
        h = g.scale_shift_rows(h, block.scale, block.shift)?;
        h = g.leaky_relu(h, slope)?;
        h = g.avg_pool_last(h, pool)?;
    }
    g.band_mean(h)
}

/// Runs the frontend outside of training.
pub fn encode<F: Real>(mel: &FeatureMatrix, params: &ParameterStore<F>, cfg: &FrontendConfig) -> Result<FeatureMatrix> {
    cfg.validate()?;
    let mut g = Graph::new();
    let vars = FrontendVars::bind(&mut g, params, cfg)?;
    let out = encode_on_tape(&mut g, &mel.to_array(), &vars, cfg)?;
    FeatureMatrix::from_array(g.value(out))
}
