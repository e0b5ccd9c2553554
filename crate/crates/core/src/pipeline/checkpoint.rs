use std::fs;
use std::path::Path;

use super::{Float, Model, ModelConfig};
use crate::autodiff::Array;
use crate::error::{Error, Result};
use crate::feature_io::{read_feature_matrix, write_feature_matrix, FeatureMatrix, Vocabulary};

pub const MANIFEST_FILE: &str = "manifest.txt";
pub const CONFIG_FILE: &str = "config.txt";
pub const VOCAB_FILE: &str = "vocab.txt";

fn shape_text(shape: &[usize]) -> String {
    shape.iter().map(usize::to_string).collect::<Vec<_>>().join(",")
}

/// Writes `manifest.txt` (`name<TAB>shape<TAB>file`), one FMAT per
/// parameter under `params/`, `config.txt` and `vocab.txt`.
///
/// Arrays are stored as `shape[0] × (product of the rest)` matrices; 1-D
/// arrays as a single row.
pub fn save_checkpoint(model: &Model, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    let pdir = dir.join("params");
    fs::create_dir_all(&pdir).map_err(|e| Error::io(&pdir, e))?;
    let mut manifest = String::new();
    for (name, p) in model.params.iter() {
        let shape = p.value.shape();
        let (rows, cols) = match shape {
            [n] => (1, *n),
            [r, rest @ ..] => (*r, rest.iter().product()),
            [] => (1, 1),
        };
        let file = format!("params/{name}.fmat");
        let m = FeatureMatrix::new(rows, cols, p.value.data().to_vec())?;
        write_feature_matrix(dir.join(&file), &m)?;
        manifest.push_str(&format!("{name}\t{}\t{file}\n", shape_text(shape)));
    }
    let write = |name: &str, text: &str| {
        let path = dir.join(name);
        fs::write(&path, text).map_err(|e| Error::io(&path, e))
    };
    write(MANIFEST_FILE, &manifest)?;
    write(CONFIG_FILE, &model.config.to_text())?;
    model.vocab.write(dir.join(VOCAB_FILE))
}

/// Reads a checkpoint written by [`save_checkpoint`]. Every parameter the
/// configuration implies must be present with its expected shape.
pub fn load_checkpoint(dir: impl AsRef<Path>) -> Result<Model> {
    let dir = dir.as_ref();
    let read = |name: &str| {
        let path = dir.join(name);
        fs::read_to_string(&path).map_err(|e| Error::io(&path, e))
    };
    let config = ModelConfig::from_text(&read(CONFIG_FILE)?)?;
    let vocab = Vocabulary::read(dir.join(VOCAB_FILE))?;
    if vocab.len() != config.decoder.vocab_size {
        return Err(Error::VocabularyMismatch(format!(
            "vocabulary has {} tokens, decoder expects {}",
            vocab.len(),
            config.decoder.vocab_size
        )));
    }
    let mut model = Model::new(config, vocab)?;
    let manifest_path = dir.join(MANIFEST_FILE);
    let mut seen = std::collections::BTreeSet::new();
    for (i, line) in read(MANIFEST_FILE)?.lines().enumerate() {
        let parse_err = |message: String| Error::Parse {
            path: manifest_path.clone(),
            line: i + 1,
            message,
        };
        let fields: Vec<&str> = line.split('\t').collect();
        let &[name, shape, file] = fields.as_slice() else {
            return Err(parse_err(format!("expected 3 tab-separated fields, got {}", fields.len())));
        };
        let shape: Vec<usize> = shape
            .split(',')
            .map(|s| s.parse().map_err(|_| parse_err(format!("bad shape entry {s:?}"))))
            .collect::<Result<_>>()?;
        let slot = model
            .params
            .get_mut(name)
            .map_err(|_| Error::UnknownParameter(name.to_owned()))?;
        if slot.shape() != shape.as_slice() {
            return Err(parse_err(format!(
                "{name} has shape {shape:?}, configuration implies {:?}",
                slot.shape()
            )));
        }
        let m = read_feature_matrix(dir.join(file))?;
        *slot = Array::<Float>::new(&shape, m.values().to_vec())?;
        if !seen.insert(name.to_owned()) {
            return Err(parse_err(format!("duplicate parameter {name}")));
        }
    }
    if let Some(missing) = model.params.names().find(|n| !seen.contains(*n)) {
        return Err(Error::InvalidArgument(format!("checkpoint lacks parameter {missing:?}")));
    }
    Ok(model)
}

