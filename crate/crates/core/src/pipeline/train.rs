use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::checkpoint::save_checkpoint;
use super::evaluate::{argmax_hits, teacher_forced_loss, LossStats};
use super::{teacher_forcing_pair, Float, Model, ModelConfig, TrainConfig};
use crate::autodiff::{adam_step, AdamState, Graph};
use crate::error::{Error, Result};
use crate::feature_io::{CaptionedClip, Vocabulary};

pub const TRAIN_LOG_FILE: &str = "train_log.tsv";

/// Mixed into the model seed so the data order and dropout masks do not
/// reuse the initialisation stream.
const SHUFFLE_SALT: u64 = 0x5348_5546;
const DROPOUT_SALT: u64 = 0x4452_4f50;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train: LossStats,
    pub validation: Option<LossStats>,
}

#[derive(Clone, Debug)]
pub struct TrainReport {
    pub epochs: Vec<EpochRecord>,
    pub wall_clock: Duration,
    pub checkpoint: Option<PathBuf>,
}

impl TrainReport {
    /// Line records `epoch<TAB>split<TAB>loss<TAB>accuracy`.
    pub fn to_records(&self) -> String {
        let mut out = String::from("epoch\tsplit\tloss\taccuracy\n");
        for e in &self.epochs {
            out.push_str(&record_lines(e));
        }
        out
    }

    pub fn train_losses(&self) -> Vec<f64> {
        self.epochs.iter().map(|e| e.train.loss).collect()
    }

    pub fn final_validation(&self) -> Option<LossStats> {
        self.epochs.last().and_then(|e| e.validation)
    }
}

fn record_lines(e: &EpochRecord) -> String {
    let mut s = format!("{}\ttrain\t{}\t{}\n", e.epoch, e.train.loss, e.train.accuracy);
    if let Some(v) = e.validation {
        s.push_str(&format!("{}\tvalidation\t{}\t{}\n", e.epoch, v.loss, v.accuracy));
    }
    s
}

/// Seed-fixed split: a shuffled `fraction` of the clips (at least one when
/// there are two or more) goes to validation, both halves keep input order.
pub fn split_train_validation(
    clips: &[CaptionedClip],
    fraction: f64,
    seed: u64,
) -> Result<(Vec<CaptionedClip>, Vec<CaptionedClip>)> {
    if !(0.0..1.0).contains(&fraction) {
        return Err(Error::InvalidArgument(format!(
            "validation fraction must lie in [0, 1), got {fraction}"
        )));
    }
    let mut idx: Vec<usize> = (0..clips.len()).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut n_val = (clips.len() as f64 * fraction).round() as usize;
    if fraction > 0.0 && clips.len() >= 2 {
        n_val = n_val.clamp(1, clips.len() - 1);
    }
    let mut is_val = vec![false; clips.len()];
    for &i in &idx[..n_val] {
        is_val[i] = true;
    }
    let (mut train, mut val) = (Vec::new(), Vec::new());
    for (c, v) in clips.iter().zip(is_val) {
        if v { val.push(c.clone()) } else { train.push(c.clone()) }
    }
    Ok((train, val))
}

/// Trains a fresh model with teacher forcing, label-smoothed cross-entropy
/// and Adam. Each batch averages the loss over all of its target tokens.
///
/// With `out_dir`, the per-epoch log and the final checkpoint (under
/// `checkpoint/`) are written there.
pub fn train(
    config: &ModelConfig,
    train_cfg: &TrainConfig,
    train_set: &[CaptionedClip],
    val_set: &[CaptionedClip],
    out_dir: Option<&Path>,
) -> Result<(Model, TrainReport)> {
    train_cfg.validate()?;
    if train_set.is_empty() {
        return Err(Error::Empty("training set"));
    }
    let start = Instant::now();
    let vocab = Vocabulary::from_captions(train_set.iter().flat_map(|c| c.references.iter().map(Vec::as_slice)));
    let mut model = Model::new(config.clone(), vocab)?;
    let max_len = model.config.decoder.max_len;

    // One sample per (clip, reference) pair.
    let mut samples = Vec::new();
    for (ci, clip) in train_set.iter().enumerate() {
        let mel = clip.features.to_array::<Float>();
        for r in &clip.references {
            let (input, targets) = teacher_forcing_pair(&model.vocab, r, max_len)?;
            samples.push((ci, mel.clone(), input, targets));
        }
    }
    let mut log = match out_dir {
        Some(dir) => {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            let path = dir.join(TRAIN_LOG_FILE);
            let mut f = fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
            f.write_all(b"epoch\tsplit\tloss\taccuracy\n").map_err(|e| Error::io(&path, e))?;
            Some((path, f))
        }
        None => None,
    };

    let mut rng = ChaCha8Rng::seed_from_u64(model.config.seed ^ SHUFFLE_SALT);
    let mut dropout_rng = ChaCha8Rng::seed_from_u64(model.config.seed ^ DROPOUT_SALT);
    let mut adam = AdamState::new(train_cfg.learning_rate);
    let eps = model.config.label_smoothing as Float;
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut epochs = Vec::with_capacity(train_cfg.epochs);
    let mut step = 0usize;
    for epoch in 1..=train_cfg.epochs {
        order.shuffle(&mut rng);
        let (mut total, mut positions, mut hits) = (0.0f64, 0usize, 0usize);
        for batch in order.chunks(train_cfg.batch_size) {
            step += 1;
            let batch_positions: usize = batch.iter().map(|&i| samples[i].3.len()).sum();
            let weight = 1.0 / batch_positions as Float;
            let mut batch_loss = 0.0f64;
            for &i in batch {
                let (_, mel, input, targets) = &samples[i];
                let mut g = Graph::new();
                let logits = model
                    .logits_on_tape(&mut g, mel, input, Some(&mut dropout_rng))
                    .map_err(|e| diverged(e, step))?;
                hits += argmax_hits(g.value(logits), targets);
                let weights = vec![weight; targets.len()];
                let loss = g
                    .cross_entropy_weighted(logits, targets, &weights, eps)
                    .map_err(|e| diverged(e, step))?;
                let value = g.value(loss).data()[0] as f64;
                if !value.is_finite() {
                    return Err(Error::Diverged { step, loss: value });
                }
                batch_loss += value;
                g.backward(loss)?;
                g.accumulate_into(&mut model.params)?;
            }
            total += batch_loss * batch_positions as f64;
            positions += batch_positions;
            adam_step(&mut model.params, &mut adam)?;
        }
        let record = EpochRecord {
            epoch,
            train: LossStats {
                loss: total / positions as f64,
                accuracy: hits as f64 / positions as f64,
                positions,
            },
            validation: if val_set.is_empty() {
                None
            } else {
                Some(teacher_forced_loss(&model, val_set)?)
            },
        };
        if let Some((path, f)) = log.as_mut() {
            f.write_all(record_lines(&record).as_bytes()).map_err(|e| Error::io(&*path, e))?;
        }
        epochs.push(record);
    }
    let checkpoint = match out_dir {
        Some(dir) => {
            let path = dir.join("checkpoint");
            save_checkpoint(&model, &path)?;
            Some(path)
        }
        None => None,
    };
    Ok((
        model,
        TrainReport {
            epochs,
            wall_clock: start.elapsed(),
            checkpoint,
        },
    ))
}

/// Non-finite activations surface as a divergence at the current step.
fn diverged(e: Error, step: usize) -> Error {
    match e {
        Error::NonFinite(_) => Error::Diverged { step, loss: f64::NAN },
        other => other,
    }
}
