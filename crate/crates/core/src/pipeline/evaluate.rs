use std::collections::BTreeSet;

use super::{teacher_forcing_pair, Float, Model};
use crate::autodiff::{Array, Graph};
use crate::error::{Error, Result};
use crate::feature_io::{CaptionedClip, Vocabulary};
use crate::metrics::{Caption, MetricReport};

/// Mean teacher-forced loss and argmax accuracy over target tokens.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossStats {
    pub loss: f64,
    pub accuracy: f64,
    pub positions: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClipCaption {
    pub id: String,
    pub candidate: Caption,
    pub references: Vec<Caption>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub beam_size: usize,
    pub metrics: MetricReport,
    /// Fraction of reference event words that appear in the decoded caption.
    pub event_recall: f64,
    /// Position-wise word matches over the longer of candidate and reference.
    pub token_accuracy: f64,
    pub captions: Vec<ClipCaption>,
}

impl EvalReport {
    pub fn to_records(&self) -> String {
        format!(
            "setting\tbeam_size\t{}\nmetric\tevent_recall\t{}\nmetric\ttoken_accuracy\t{}\n{}",
            self.beam_size,
            self.event_recall,
            self.token_accuracy,
            self.metrics.to_records()
        )
    }
}

pub(crate) fn argmax_hits(logits: &Array<Float>, targets: &[usize]) -> usize {
    targets
        .iter()
        .enumerate()
        .filter(|&(n, &t)| {
            let row = logits.row(n);
            let best = row
                .iter()
                .enumerate()
                .fold(0, |b, (j, &v)| if v > row[b] { j } else { b });
            best == t
        })
        .count()
}

fn check_vocabulary(vocab: &Vocabulary, clips: &[CaptionedClip]) -> Result<()> {
    for clip in clips {
        for r in &clip.references {
            if let Some(w) = r.iter().find(|w| vocab.id(w).is_none()) {
                return Err(Error::VocabularyMismatch(format!(
                    "word {w:?} in clip {} is not in the model vocabulary",
                    clip.id
                )));
            }
        }
    }
    Ok(())
}

/// Label-smoothed cross-entropy (the training objective) and token accuracy
/// over every reference of every clip.
pub fn teacher_forced_loss(model: &Model, clips: &[CaptionedClip]) -> Result<LossStats> {
    check_vocabulary(&model.vocab, clips)?;
    let eps = model.config.label_smoothing as Float;
    let (mut total, mut positions, mut hits) = (0.0f64, 0usize, 0usize);
    for clip in clips {
        let mel = clip.features.to_array::<Float>();
        for r in &clip.references {
            let (input, targets) = teacher_forcing_pair(&model.vocab, r, model.config.decoder.max_len)?;
            let mut g = Graph::new();
            let logits = model.logits_on_tape(&mut g, &mel, &input, None)?;
            hits += argmax_hits(g.value(logits), &targets);
            let ones = vec![1.0; targets.len()];
            let loss = g.cross_entropy_weighted(logits, &targets, &ones, eps)?;
            total += g.value(loss).data()[0] as f64;
            positions += targets.len();
        }
    }
    if positions == 0 {
        return Err(Error::Empty("evaluation clips"));
    }
    Ok(LossStats {
        loss: total / positions as f64,
        accuracy: hits as f64 / positions as f64,
        positions,
    })
}

/// Micro-averaged recall of reference words (as a set per clip) in the
/// candidates.
pub fn event_recall(candidates: &[Caption], references: &[Caption]) -> f64 {
    let (mut found, mut total) = (0usize, 0usize);
    for (c, r) in candidates.iter().zip(references) {
        let want: BTreeSet<&String> = r.iter().collect();
        let have: BTreeSet<&String> = c.iter().collect();
        total += want.len();
        found += want.intersection(&have).count();
    }
    if total == 0 {
        1.0
    } else {
        found as f64 / total as f64
    }
}

/// Corpus exact token accuracy: position-wise matches summed over clips,
/// divided by the summed `max(|candidate|, |reference|)`.
pub fn exact_token_accuracy(candidates: &[Caption], references: &[Caption]) -> f64 {
    let (mut hits, mut total) = (0usize, 0usize);
    for (c, r) in candidates.iter().zip(references) {
        hits += c.iter().zip(r).filter(|(a, b)| a == b).count();
        total += c.len().max(r.len());
    }
    if total == 0 {
        1.0
    } else {
        hits as f64 / total as f64
    }
}

/// Decodes every clip with beam search and scores the captions. Recall and
/// token accuracy compare against each clip's first reference.
pub fn evaluate(model: &Model, clips: &[CaptionedClip], beam_size: usize) -> Result<EvalReport> {
    if clips.is_empty() {
        return Err(Error::Empty("evaluation clips"));
    }
    if let Some(c) = clips.iter().find(|c| c.references.is_empty()) {
        return Err(Error::InvalidArgument(format!("clip {} has no references", c.id)));
    }
    check_vocabulary(&model.vocab, clips)?;
    let mut captions = Vec::with_capacity(clips.len());
    for clip in clips {
        captions.push(ClipCaption {
            id: clip.id.clone(),
            candidate: model.caption(&clip.features, beam_size)?,
            references: clip.references.clone(),
        });
    }
    let ids: Vec<String> = captions.iter().map(|c| c.id.clone()).collect();
    let cands: Vec<Caption> = captions.iter().map(|c| c.candidate.clone()).collect();
    let refs: Vec<Vec<Caption>> = captions.iter().map(|c| c.references.clone()).collect();
    let firsts: Vec<Caption> = refs.iter().map(|r| r[0].clone()).collect();
    Ok(EvalReport {
        beam_size,
        metrics: MetricReport::compute(&ids, &cands, &refs)?,
        event_recall: event_recall(&cands, &firsts),
        token_accuracy: exact_token_accuracy(&cands, &firsts),
        captions,
    })
}
