//! Feature files, caption files, vocabulary and the synthetic dataset.

mod captions;
mod fmat;
mod synthetic;
mod vocab;

pub use captions::{read_captions, write_captions, CaptionRecord};
pub use fmat::{
    decode_feature_matrix, encode_feature_matrix, read_feature_matrix, write_feature_matrix,
    FeatureMatrix, FormatError, FMAT_MAGIC, FMAT_VERSION,
};
pub use synthetic::{
    event_band, event_word, generate_synthetic_dataset, write_dataset, read_dataset, CaptionedClip,
    SyntheticSpec,
};
pub use vocab::{TokenSequence, Vocabulary, EOS, PAD, SOS, UNK};
