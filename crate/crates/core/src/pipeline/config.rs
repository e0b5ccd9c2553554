use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::str::FromStr;

use crate::decoder::DecoderConfig;
use crate::error::{Error, Result};
use crate::frontend::FrontendConfig;
use crate::graph_attention::GraphAttentionConfig;

/// Architecture and loss settings of a captioning model.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub frontend: FrontendConfig,
    pub graph: GraphAttentionConfig,
    pub decoder: DecoderConfig,
    pub label_smoothing: f64,
    /// Seeds parameter initialisation and the epoch shuffles.
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            frontend: FrontendConfig::default(),
            graph: GraphAttentionConfig::default(),
            decoder: DecoderConfig::default(),
            label_smoothing: 0.1,
            seed: 42,
        }
    }
}

impl ModelConfig {
    pub fn dim(&self) -> usize {
        self.frontend.dim()
    }

    /// Sets the node dimension in all three stages.
    pub fn with_dim(mut self, dim: usize) -> Self {
        if let Some(last) = self.frontend.channels.last_mut() {
            *last = dim;
        }
        self.graph.dim = dim;
        self.decoder.dim = dim;
        self
    }

    pub fn validate(&self) -> Result<()> {
        self.frontend.validate()?;
        self.graph.validate()?;
        self.decoder.validate()?;
        let d = self.frontend.dim();
        if self.graph.dim != d || self.decoder.dim != d {
            return Err(Error::InvalidArgument(format!(
                "feature dims disagree: frontend {d}, graph {}, decoder {}",
                self.graph.dim, self.decoder.dim
            )));
        }
        if !(0.0..1.0).contains(&self.label_smoothing) {
            return Err(Error::InvalidArgument(format!(
                "label_smoothing must lie in [0, 1), got {}",
                self.label_smoothing
            )));
        }
        Ok(())
    }

    /// `key=value` lines, one per field.
    pub fn to_text(&self) -> String {
        let list = |v: &[usize]| v.iter().map(usize::to_string).collect::<Vec<_>>().join(",");
        let mut s = String::new();
        let f = &self.frontend;
        let _ = writeln!(s, "frontend.channels={}", list(&f.channels));
        let _ = writeln!(s, "frontend.pools={}", list(&f.pools));
        let _ = writeln!(s, "frontend.kernel={}", f.kernel);
        let _ = writeln!(s, "frontend.leaky_slope={}", f.leaky_slope);
        let _ = writeln!(s, "frontend.band_channels={}", f.band_channels);
        let g = &self.graph;
        let _ = writeln!(s, "graph.dim={}", g.dim);
        let _ = writeln!(s, "graph.k={}", g.k);
        let _ = writeln!(s, "graph.leaky_slope={}", g.leaky_slope);
        let _ = writeln!(s, "graph.enabled={}", g.enabled);
        let _ = writeln!(s, "graph.shared_phi={}", g.shared_phi);
        let d = &self.decoder;
        let _ = writeln!(s, "decoder.layers={}", d.n_layers);
        let _ = writeln!(s, "decoder.heads={}", d.n_heads);
        let _ = writeln!(s, "decoder.dim={}", d.dim);
        let _ = writeln!(s, "decoder.ff_dim={}", d.ff_dim);
        let _ = writeln!(s, "decoder.max_len={}", d.max_len);
        let _ = writeln!(s, "decoder.vocab_size={}", d.vocab_size);
        let _ = writeln!(s, "decoder.dropout={}", d.dropout);
        let _ = writeln!(s, "label_smoothing={}", self.label_smoothing);
        let _ = writeln!(s, "seed={}", self.seed);
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut kv = KeyValues::parse(text)?;
        let list = |v: String| -> Result<Vec<usize>> {
            v.split(',')
                .map(|x| x.trim().parse().map_err(|_| Error::InvalidArgument(format!("bad list entry {x:?}"))))
                .collect()
        };
        let cfg = Self {
            frontend: FrontendConfig {
                channels: list(kv.take("frontend.channels")?)?,
                pools: list(kv.take("frontend.pools")?)?,
                kernel: kv.get("frontend.kernel")?,
                leaky_slope: kv.get("frontend.leaky_slope")?,
                band_channels: kv.get("frontend.band_channels")?,
            },
            graph: GraphAttentionConfig {
                dim: kv.get("graph.dim")?,
                k: kv.get("graph.k")?,
                leaky_slope: kv.get("graph.leaky_slope")?,
                enabled: kv.get("graph.enabled")?,
                shared_phi: kv.get("graph.shared_phi")?,
            },
            decoder: DecoderConfig {
                n_layers: kv.get("decoder.layers")?,
                n_heads: kv.get("decoder.heads")?,
                dim: kv.get("decoder.dim")?,
                ff_dim: kv.get("decoder.ff_dim")?,
                max_len: kv.get("decoder.max_len")?,
                vocab_size: kv.get("decoder.vocab_size")?,
                dropout: kv.get("decoder.dropout")?,
            },
            label_smoothing: kv.get("label_smoothing")?,
            seed: kv.get("seed")?,
        };
        kv.finish()?;
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Optimisation settings.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: 16,
            learning_rate: 1e-4,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::InvalidArgument("epochs and batch_size must be >= 1".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "learning rate must be positive, got {}",
                self.learning_rate
            )));
        }
        Ok(())
    }
}

/// Flat `key=value` text; blank lines and `#` comments are skipped.
#[derive(Debug, Default)]
pub struct KeyValues {
    entries: BTreeMap<String, String>,
}

impl KeyValues {
    pub fn parse(text: &str) -> Result<Self> {
        let mut entries = BTreeMap::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let Some((k, v)) = line.split_once('=') else {
                return Err(Error::InvalidArgument(format!("line {}: expected key=value, got {line:?}", i + 1)));
            };
            if entries.insert(k.trim().to_owned(), v.trim().to_owned()).is_some() {
                return Err(Error::InvalidArgument(format!("line {}: duplicate key {:?}", i + 1, k.trim())));
            }
        }
        Ok(Self { entries })
    }

    pub fn entries(&self) -> &BTreeMap<String, String> {
        &self.entries
    }

    pub fn take(&mut self, key: &str) -> Result<String> {
        self.entries
            .remove(key)
            .ok_or_else(|| Error::InvalidArgument(format!("missing key {key:?}")))
    }

    pub fn get<T: FromStr>(&mut self, key: &str) -> Result<T> {
        let v = self.take(key)?;
        v.parse()
            .map_err(|_| Error::InvalidArgument(format!("bad value {v:?} for {key:?}")))
    }

    /// Fails on keys that were never taken.
    pub fn finish(self) -> Result<()> {
        match self.entries.keys().next() {
            Some(k) => Err(Error::InvalidArgument(format!("unknown key {k:?}"))),
            None => Ok(()),
        }
    }
}
