//! Graph-attention audio captioning.
//!
//! The crate is organised bottom-up:
//!
//! * [`autodiff`]: dense arrays, a reverse-mode tape, Adam and a
//!   finite-difference gradient checker.
//! * [`feature_io`]: the FMAT feature format, caption files, the vocabulary
//!   and the synthetic event-captioning dataset.
//! * [`frontend`]: the convolutional encoder producing audio feature nodes.
//! * [`graph_attention`]: relation scoring, top-k masked adjacency and
//!   residual node aggregation.
//! * [`decoder`]: the autoregressive transformer decoder and beam search.
//! * [`pipeline`]: model composition, training, evaluation, checkpoints and
//!   adjacency export.
//! * [`metrics`]: BLEU, ROUGE-L and CIDEr-D.
//! * [`checks`]: seeded finite-difference probes for the trainable modules.

pub mod autodiff;
pub mod checks;
pub mod decoder;
pub mod error;
pub mod feature_io;
pub mod frontend;
pub mod graph_attention;
pub mod metrics;
pub mod pipeline;

pub use error::{Error, Result};
