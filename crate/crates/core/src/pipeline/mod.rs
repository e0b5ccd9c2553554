//! The captioning model (frontend, graph attention, decoder) with training,
//! evaluation, checkpoints and adjacency export.

mod checkpoint;
mod config;
mod evaluate;
mod export;
mod train;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub use checkpoint::{load_checkpoint, save_checkpoint, CONFIG_FILE, MANIFEST_FILE, VOCAB_FILE};
pub use config::{KeyValues, ModelConfig, TrainConfig};
pub use evaluate::{
    evaluate, event_recall, exact_token_accuracy, teacher_forced_loss, ClipCaption, EvalReport, LossStats,
};
pub use export::{bilinear_upscale, export_adjacency, heatmap_pixels, read_pgm, write_pgm, AdjacencyExport};
pub use train::{split_train_validation, train, EpochRecord, TrainReport, TRAIN_LOG_FILE};

use crate::autodiff::{Array, Graph, ParameterStore, Var};
use crate::decoder::{beam_search, decode_on_tape_with, BeamConfig, DecoderVars};
use crate::error::{Error, Result};
use crate::feature_io::{FeatureMatrix, TokenSequence, Vocabulary};
use crate::frontend::{encode_on_tape, FrontendVars};
use crate::graph_attention::{forward_on_tape, AdjacencyGraph, GraphOutput, GraphVars};

/// Training and inference precision.
pub type Float = f32;

/// Parameters, configuration and vocabulary of a trained or fresh model.
#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ParameterStore<Float>,
    pub vocab: Vocabulary,
}

/// Encoder activations for one clip.
#[derive(Clone, Debug)]
pub struct Encoded {
    /// Frontend output `X`.
    pub frontend: Array<Float>,
    /// Decoder memory `X̂` (equal to `X` when the graph is disabled).
    pub nodes: Array<Float>,
    pub adjacency: Option<AdjacencyGraph<Float>>,
}

/// Tape handles for one forward pass through the encoder.
#[derive(Clone, Copy, Debug)]
pub struct EncoderTape {
    pub frontend: Var,
    pub nodes: Var,
    pub graph: Option<GraphOutput>,
}

/// Decoder input (`<sos> w1 .. wn`) and targets (`w1 .. wn <eos>`) for a caption.
pub fn teacher_forcing_pair(vocab: &Vocabulary, words: &[String], max_len: usize) -> Result<(Vec<usize>, Vec<usize>)> {
    let ids = vocab.encode(words).ids();
    let n = ids.len() - 1;
    if n > max_len {
        return Err(Error::InvalidArgument(format!(
            "caption of {} words exceeds decoder max_len {max_len}",
            words.len()
        )));
    }
    Ok((ids[..n].to_vec(), ids[1..].to_vec()))
}

impl Model {
    /// Fresh model; the decoder vocabulary size is taken from `vocab`.
    pub fn new(mut config: ModelConfig, vocab: Vocabulary) -> Result<Self> {
        config.decoder.vocab_size = vocab.len();
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut params = ParameterStore::new();
        config.frontend.init_params(&mut params, &mut rng);
        config.graph.init_params(&mut params, &mut rng);
        config.decoder.init_params(&mut params, &mut rng);
        Ok(Self { config, params, vocab })
    }

    pub fn graph_enabled(&self) -> bool {
        self.config.graph.enabled
    }

    /// Records the encoder for `mel` (`frames × bands`) on `g`.
    pub fn encoder_on_tape(&self, g: &mut Graph<Float>, mel: &Array<Float>) -> Result<EncoderTape> {
        let fv = FrontendVars::bind(g, &self.params, &self.config.frontend)?;
        let frontend = encode_on_tape(g, mel, &fv, &self.config.frontend)?;
        if !self.graph_enabled() {
            return Ok(EncoderTape {
                frontend,
                nodes: frontend,
                graph: None,
            });
        }
        let gv = GraphVars::bind(g, &self.params, &self.config.graph)?;
        let out = forward_on_tape(g, frontend, &gv, self.config.graph.leaky_slope, self.config.graph.k)?;
        Ok(EncoderTape {
            frontend,
            nodes: out.features,
            graph: Some(out),
        })
    }

    /// Teacher-forced logits (`N × V`) for `input` token ids; dropout is
    /// applied only when `rng` is given.
    pub fn logits_on_tape(
        &self,
        g: &mut Graph<Float>,
        mel: &Array<Float>,
        input: &[usize],
        rng: Option<&mut dyn RngCore>,
    ) -> Result<Var> {
        let enc = self.encoder_on_tape(g, mel)?;
        let dv = DecoderVars::bind(g, &self.params, &self.config.decoder)?;
        decode_on_tape_with(g, enc.nodes, input, &dv, &self.config.decoder, rng)
    }

    pub fn encode(&self, mel: &FeatureMatrix) -> Result<Encoded> {
        let mut g = Graph::new();
        let enc = self.encoder_on_tape(&mut g, &mel.to_array())?;
        let adjacency = enc.graph.map(|o| {
            let values = g.value(o.adjacency).clone();
            let k_used = self.config.graph.k.min(values.shape()[0]);
            AdjacencyGraph { values, k_used }
        });
        Ok(Encoded {
            frontend: g.value(enc.frontend).clone(),
            nodes: g.value(enc.nodes).clone(),
            adjacency,
        })
    }

    /// Beam-search caption as token ids (`<sos>` excluded).
    pub fn caption_tokens(&self, mel: &FeatureMatrix, beam_size: usize) -> Result<TokenSequence> {
        let memory = self.encode(mel)?.nodes;
        let beam = BeamConfig::new(beam_size, self.config.decoder.max_len);
        beam_search(&memory, &self.params, &self.config.decoder, &beam)
    }

    /// Beam-search caption as words.
    pub fn caption(&self, mel: &FeatureMatrix, beam_size: usize) -> Result<Vec<String>> {
        Ok(self.vocab.decode(&self.caption_tokens(mel, beam_size)?))
    }
}

#[cfg(test)]
mod tests;
