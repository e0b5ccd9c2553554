//! Synthetic event-captioning clips: each event type owns a fixed band of
//! mel bins and appears as a rectangular energy burst over Gaussian noise.
//! The caption lists event words in onset order.

use std::fs;
use std::path::Path;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::captions::{read_captions, write_captions, CaptionRecord};
use super::fmat::{read_feature_matrix, write_feature_matrix, FeatureMatrix};
use crate::error::{Error, Result};

const EVENT_WORDS: [&str; 20] = [
    "dog", "bell", "bird", "car", "rain", "door", "siren", "wind", "water", "engine", "speech",
    "music", "clock", "phone", "horn", "thunder", "footsteps", "keyboard", "train", "applause",
];

/// Word naming event type `e`.
pub fn event_word(e: usize) -> String {
    EVENT_WORDS
        .get(e)
        .map(|w| (*w).to_owned())
        .unwrap_or_else(|| format!("event{e}"))
}

/// Half-open mel-bin range owned by event type `e`.
pub fn event_band(e: usize, n_event_types: usize, mel_bins: usize) -> std::ops::Range<usize> {
    (e * mel_bins / n_event_types)..((e + 1) * mel_bins / n_event_types)
}

#[derive(Clone, Debug, PartialEq)]
pub struct CaptionedClip {
    pub id: String,
    /// Mel input, `frames × mel_bins`.
    pub features: FeatureMatrix,
    /// One or more reference captions as words.
    pub references: Vec<Vec<String>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticSpec {
    pub n_clips: usize,
    pub n_event_types: usize,
    pub mel_bins: usize,
    pub frames: usize,
    pub min_events: usize,
    pub max_events: usize,
    pub noise_std: f64,
    pub amplitude: f64,
    pub min_duration: usize,
    pub max_duration: usize,
    /// Minimum distance between consecutive onsets, in frames.
    pub min_onset_gap: usize,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            n_clips: 512,
            n_event_types: 20,
            mel_bins: 64,
            frames: 256,
            min_events: 1,
            max_events: 4,
            noise_std: 0.1,
            amplitude: 1.0,
            min_duration: 16,
            max_duration: 64,
            min_onset_gap: 16,
            seed: 42,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::InvalidArgument(m));
        if self.n_clips == 0 {
            return fail("n_clips must be >= 1".into());
        }
        if self.n_event_types == 0 || self.n_event_types > self.mel_bins {
            return fail(format!(
                "n_event_types must be in 1..={} (one band per type), got {}",
                self.mel_bins, self.n_event_types
            ));
        }
        if self.min_events == 0 || self.min_events > self.max_events {
            return fail(format!(
                "events per clip range {}..={} is empty or starts at 0",
                self.min_events, self.max_events
            ));
        }
        if self.max_events > self.n_event_types {
            return fail(format!(
                "max_events {} exceeds n_event_types {}",
                self.max_events, self.n_event_types
            ));
        }
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            return fail(format!("noise_std must be finite and >= 0, got {}", self.noise_std));
        }
        if !self.amplitude.is_finite() {
            return fail("amplitude must be finite".into());
        }
        if self.min_duration == 0 || self.min_duration > self.max_duration || self.max_duration > self.frames {
            return fail(format!(
                "durations {}..={} must be nonempty, >= 1 and <= frames {}",
                self.min_duration, self.max_duration, self.frames
            ));
        }
        if (self.max_events - 1) * self.min_onset_gap + self.min_duration > self.frames {
            return fail(format!(
                "{} events spaced {} frames apart do not fit in {} frames",
                self.max_events, self.min_onset_gap, self.frames
            ));
        }
        Ok(())
    }

    /// `key=value` lines describing the spec.
    pub fn to_config_text(&self) -> String {
        format!(
            "clips={}\nevents={}\nmel-bins={}\nframes={}\nmin-events={}\nmax-events={}\n\
             noise-std={}\namplitude={}\nmin-duration={}\nmax-duration={}\nonset-gap={}\nseed={}\n",
            self.n_clips,
            self.n_event_types,
            self.mel_bins,
            self.frames,
            self.min_events,
            self.max_events,
            self.noise_std,
            self.amplitude,
            self.min_duration,
            self.max_duration,
            self.min_onset_gap,
            self.seed
        )
    }
}

struct Event {
    kind: usize,
    onset: usize,
    duration: usize,
}

/// Generates `spec.n_clips` clips; a pure function of `spec`.
pub fn generate_synthetic_dataset(spec: &SyntheticSpec) -> Result<Vec<CaptionedClip>> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let noise = Normal::new(0.0, spec.noise_std).map_err(|e| Error::InvalidArgument(e.to_string()))?;
    let width = (spec.n_clips - 1).to_string().len().max(4);
    let mut clips = Vec::with_capacity(spec.n_clips);
    for c in 0..spec.n_clips {
        let events = sample_events(spec, &mut rng);
        let mut values = vec![0f32; spec.frames * spec.mel_bins];
        if spec.noise_std > 0.0 {
            for v in &mut values {
                *v = noise.sample(&mut rng) as f32;
            }
        }
        for ev in &events {
            let band = event_band(ev.kind, spec.n_event_types, spec.mel_bins);
            for t in ev.onset..ev.onset + ev.duration {
                for m in band.clone() {
                    values[t * spec.mel_bins + m] += spec.amplitude as f32;
                }
            }
        }
        let caption = events.iter().map(|e| event_word(e.kind)).collect();
        clips.push(CaptionedClip {
            id: format!("clip_{c:0width$}"),
            features: FeatureMatrix::new(spec.frames, spec.mel_bins, values)?,
            references: vec![caption],
        });
    }
    Ok(clips)
}

/// Events sorted by onset, ties broken by event-type index.
fn sample_events(spec: &SyntheticSpec, rng: &mut ChaCha8Rng) -> Vec<Event> {
    let n = rng.random_range(spec.min_events..=spec.max_events);
    let kinds = sample(rng, spec.n_event_types, n).into_vec();
    // Uniform sorted onsets with the gap folded out, then spread back in.
    let slack = spec.frames - spec.min_duration - (n - 1) * spec.min_onset_gap;
    let mut raw: Vec<usize> = (0..n).map(|_| rng.random_range(0..=slack)).collect();
    raw.sort_unstable();
    let mut events: Vec<Event> = raw
        .iter()
        .enumerate()
        .zip(kinds)
        .map(|((i, &r), kind)| {
            let onset = r + i * spec.min_onset_gap;
            let longest = spec.max_duration.min(spec.frames - onset);
            let duration = rng.random_range(spec.min_duration..=longest);
            Event { kind, onset, duration }
        })
        .collect();
    events.sort_by_key(|e| (e.onset, e.kind));
    events
}

/// Writes `mel/<id>.fmat` per clip, `captions.tsv` and `dataset.txt`.
pub fn write_dataset(dir: impl AsRef<Path>, clips: &[CaptionedClip], spec: Option<&SyntheticSpec>) -> Result<()> {
    let dir = dir.as_ref();
    let mel = dir.join("mel");
    fs::create_dir_all(&mel).map_err(|e| Error::io(&mel, e))?;
    let mut records = Vec::new();
    for clip in clips {
        write_feature_matrix(mel.join(format!("{}.fmat", clip.id)), &clip.features)?;
        for r in &clip.references {
            records.push(CaptionRecord {
                id: clip.id.clone(),
                words: r.clone(),
            });
        }
    }
    write_captions(dir.join("captions.tsv"), &records)?;
    if let Some(spec) = spec {
        let p = dir.join("dataset.txt");
        fs::write(&p, spec.to_config_text()).map_err(|e| Error::io(&p, e))?;
    }
    Ok(())
}

/// Reads a directory written by [`write_dataset`]; clips keep the order of
/// their first caption record.
pub fn read_dataset(dir: impl AsRef<Path>) -> Result<Vec<CaptionedClip>> {
    let dir = dir.as_ref();
    let records = read_captions(dir.join("captions.tsv"))?;
    let mut clips: Vec<CaptionedClip> = Vec::new();
    let mut index = std::collections::HashMap::new();
    for rec in records {
        match index.get(&rec.id) {
            Some(&i) => {
                let clip: &mut CaptionedClip = &mut clips[i];
                clip.references.push(rec.words);
            }
            None => {
                let features = read_feature_matrix(dir.join("mel").join(format!("{}.fmat", rec.id)))?;
                index.insert(rec.id.clone(), clips.len());
                clips.push(CaptionedClip {
                    id: rec.id,
                    features,
                    references: vec![rec.words],
                });
            }
        }
    }
    if clips.is_empty() {
        return Err(Error::Empty("dataset"));
    }
    Ok(clips)
}
