use super::*;
use crate::decoder::DecoderConfig;
use crate::feature_io::{generate_synthetic_dataset, read_feature_matrix, SyntheticSpec};
use crate::frontend::FrontendConfig;
use crate::graph_attention::GraphAttentionConfig;
use crate::metrics::{Caption, MetricReport};

fn tiny_config() -> ModelConfig {
    ModelConfig {
        frontend: FrontendConfig {
            channels: vec![4, 8],
            pools: vec![2, 2],
            kernel: 3,
            leaky_slope: 0.2,
            band_channels: 2,
        },
        graph: GraphAttentionConfig {
            dim: 8,
            k: 3,
            ..GraphAttentionConfig::default()
        },
        decoder: DecoderConfig {
            n_layers: 1,
            n_heads: 2,
            dim: 8,
            ff_dim: 16,
            max_len: 6,
            vocab_size: 0,
            dropout: 0.0,
        },
        label_smoothing: 0.1,
        seed: 7,
    }
}

fn tiny_spec(n_clips: usize, frames: usize) -> SyntheticSpec {
    SyntheticSpec {
        n_clips,
        n_event_types: 4,
        mel_bins: 8,
        frames,
        min_events: 1,
        max_events: 2,
        min_duration: 2,
        max_duration: 6,
        min_onset_gap: 4,
        ..SyntheticSpec::default()
    }
}

fn tiny_data(n_clips: usize) -> Vec<CaptionedClip> {
    generate_synthetic_dataset(&tiny_spec(n_clips, 16)).unwrap()
}

fn train_cfg(epochs: usize, batch_size: usize, learning_rate: f64) -> TrainConfig {
    TrainConfig {
        epochs,
        batch_size,
        learning_rate,
    }
}

use crate::feature_io::CaptionedClip;

#[test]
fn checkpoint_round_trip_reproduces_validation_loss_bit_exactly() {
    let clips = tiny_data(10);
    let (tr, va) = split_train_validation(&clips, 0.2, 42).unwrap();
    assert_eq!((tr.len(), va.len()), (8, 2));
    let dir = tempfile::tempdir().unwrap();
    let (model, report) = train(&tiny_config(), &train_cfg(1, 4, 1e-3), &tr, &va, Some(dir.path())).unwrap();
    let ckpt = report.checkpoint.clone().unwrap();
    assert!(ckpt.join(MANIFEST_FILE).exists());
    assert!(dir.path().join(TRAIN_LOG_FILE).exists());

    let loaded = load_checkpoint(&ckpt).unwrap();
    assert_eq!(loaded.config, model.config);
    assert_eq!(loaded.vocab, model.vocab);
    let before = teacher_forced_loss(&model, &va).unwrap();
    let after = teacher_forced_loss(&loaded, &va).unwrap();
    assert_eq!(before.loss.to_bits(), after.loss.to_bits());
    assert_eq!(before.loss.to_bits(), report.final_validation().unwrap().loss.to_bits());
}

#[test]
fn corrupted_checkpoint_is_rejected() {
    let clips = tiny_data(4);
    let model = Model::new(tiny_config(), Vocabulary::from_captions(clips.iter().map(|c| c.references[0].as_slice()))).unwrap();
    let dir = tempfile::tempdir().unwrap();
    save_checkpoint(&model, dir.path()).unwrap();
    let manifest = dir.path().join(MANIFEST_FILE);
    let text = std::fs::read_to_string(&manifest).unwrap();
    let trimmed: String = text.lines().skip(1).map(|l| format!("{l}\n")).collect();
    std::fs::write(&manifest, trimmed).unwrap();
    assert!(load_checkpoint(dir.path()).is_err());
}

#[test]
fn overfit_probe_memorises_four_clips() {
    let clips = tiny_data(4);
    let mut cfg = tiny_config();
    cfg.label_smoothing = 0.0;
    let (_, report) = train(&cfg, &train_cfg(200, 4, 1e-2), &clips, &[], None).unwrap();
    let last = report.epochs.last().unwrap().train;
    assert!(last.accuracy >= 0.99, "training accuracy {}", last.accuracy);
}

#[test]
fn seed_fixed_runs_repeat_and_seeds_matter() {
    let clips = tiny_data(12);
    let (tr, va) = split_train_validation(&clips, 0.25, 1).unwrap();
    let mut cfg = tiny_config();
    cfg.decoder.dropout = 0.2;
    let tc = train_cfg(3, 4, 1e-3);
    let (_, a) = train(&cfg, &tc, &tr, &va, None).unwrap();
    let (_, b) = train(&cfg, &tc, &tr, &va, None).unwrap();
    assert_eq!(a.epochs, b.epochs);
    cfg.seed += 1;
    let (_, c) = train(&cfg, &tc, &tr, &va, None).unwrap();
    assert_ne!(a.train_losses(), c.train_losses());
}

#[test]
fn split_is_seeded_and_sized() {
    let clips = tiny_data(20);
    let (tr, va) = split_train_validation(&clips, 0.1, 42).unwrap();
    assert_eq!((tr.len(), va.len()), (18, 2));
    let (tr2, va2) = split_train_validation(&clips, 0.1, 42).unwrap();
    assert_eq!((tr, va.clone()), (tr2, va2));
    let (_, va3) = split_train_validation(&clips, 0.1, 43).unwrap();
    let ids = |v: &[CaptionedClip]| v.iter().map(|c| c.id.clone()).collect::<Vec<_>>();
    assert_ne!(ids(&va), ids(&va3));
    assert!(split_train_validation(&clips, 1.0, 42).is_err());
}

#[test]
fn disabled_graph_passes_frontend_output_through_unchanged() {
    let clips = tiny_data(3);
    let vocab = Vocabulary::from_captions(clips.iter().map(|c| c.references[0].as_slice()));
    let mut cfg = tiny_config();
    cfg.graph.enabled = false;
    let model = Model::new(cfg, vocab).unwrap();
    assert!(!model.params.names().any(|n| n.starts_with("graph.")));
    for clip in &clips {
        let enc = model.encode(&clip.features).unwrap();
        assert!(enc.adjacency.is_none());
        assert_eq!(enc.nodes, enc.frontend);
    }
}

#[test]
fn enabled_graph_changes_the_memory() {
    let clips = tiny_data(1);
    let vocab = Vocabulary::from_captions(clips.iter().map(|c| c.references[0].as_slice()));
    let model = Model::new(tiny_config(), vocab).unwrap();
    let enc = model.encode(&clips[0].features).unwrap();
    assert_ne!(enc.nodes, enc.frontend);
    let adj = enc.adjacency.unwrap();
    assert_eq!(adj.values.shape(), [4, 4]);
    assert_eq!(adj.k_used, 3);
}

#[test]
fn references_as_candidates_score_perfectly() {
    let clips = generate_synthetic_dataset(&SyntheticSpec {
        n_clips: 32,
        ..tiny_spec(32, 32)
    })
    .unwrap();
    let ids: Vec<String> = clips.iter().map(|c| c.id.clone()).collect();
    let refs: Vec<Vec<Caption>> = clips.iter().map(|c| c.references.clone()).collect();
    let cands: Vec<Caption> = refs.iter().map(|r| r[0].clone()).collect();
    assert!(cands.iter().any(|c| c.len() >= 2));
    let report = MetricReport::compute(&ids, &cands, &refs).unwrap();
    assert_eq!(report.bleu[0], 1.0);
    assert_eq!(report.bleu[1], 1.0);
    assert_eq!(report.rouge_l, 1.0);
    let firsts: Vec<Caption> = refs.iter().map(|r| r[0].clone()).collect();
    assert_eq!(event_recall(&cands, &firsts), 1.0);
    assert_eq!(exact_token_accuracy(&cands, &firsts), 1.0);
}

#[test]
fn recall_and_accuracy_worked_example() {
    let w = |s: &str| s.split_whitespace().map(String::from).collect::<Vec<_>>();
    let cands = vec![w("dog bird"), w("rain rain car")];
    let refs = vec![w("bird dog"), w("rain car")];
    // Sets {bird, dog} fully found, {rain, car} fully found.
    assert_eq!(event_recall(&cands, &refs), 1.0);
    // Positions: dog/bird, bird/dog miss; rain hits, rain/car miss, car extra.
    assert_eq!(exact_token_accuracy(&cands, &refs), 1.0 / 5.0);
    let refs = vec![w("bird dog horn"), w("car")];
    assert_eq!(event_recall(&cands, &refs), 3.0 / 4.0);
}

#[test]
fn beam_one_and_five_both_run_and_are_recorded() {
    let clips = tiny_data(6);
    let (model, _) = train(&tiny_config(), &train_cfg(2, 3, 1e-3), &clips, &[], None).unwrap();
    for beam in [1, 5] {
        let report = evaluate(&model, &clips, beam).unwrap();
        assert_eq!(report.beam_size, beam);
        assert_eq!(report.captions.len(), clips.len());
        assert!(report.to_records().starts_with(&format!("setting\tbeam_size\t{beam}\n")));
        for c in &report.captions {
            assert!(c.candidate.len() <= model.config.decoder.max_len);
        }
    }
}

#[test]
fn evaluation_rejects_words_outside_the_vocabulary() {
    let clips = tiny_data(4);
    let (model, _) = train(&tiny_config(), &train_cfg(1, 4, 1e-3), &clips, &[], None).unwrap();
    let mut odd = clips[0].clone();
    odd.references = vec![vec!["zebra".to_string()]];
    assert!(matches!(evaluate(&model, &[odd.clone()], 1), Err(Error::VocabularyMismatch(_))));
    assert!(matches!(teacher_forced_loss(&model, &[odd]), Err(Error::VocabularyMismatch(_))));
}

#[test]
fn non_finite_input_reports_divergence_at_the_first_step() {
    let mut clips = tiny_data(2);
    clips[1].features.values_mut()[0] = f32::NAN;
    let err = train(&tiny_config(), &train_cfg(1, 2, 1e-3), &clips, &[], None).unwrap_err();
    assert!(matches!(err, Error::Diverged { step: 1, .. }), "{err:?}");
}

#[test]
fn training_loss_moving_average_decreases() {
    let clips = generate_synthetic_dataset(&SyntheticSpec {
        noise_std: 0.05,
        ..tiny_spec(48, 16)
    })
    .unwrap();
    let (_, report) = train(&tiny_config(), &train_cfg(30, 16, 3e-3), &clips, &[], None).unwrap();
    let losses = report.train_losses();
    let avg: Vec<f64> = losses.windows(5).map(|w| w.iter().sum::<f64>() / 5.0).collect();
    for (i, w) in avg.windows(2).enumerate() {
        assert!(w[1] <= w[0], "moving average rose at window {i}: {avg:?}");
    }
}

#[test]
fn export_writes_raw_matrix_and_image() {
    let clips = generate_synthetic_dataset(&tiny_spec(1, 64)).unwrap();
    let vocab = Vocabulary::from_captions(clips.iter().map(|c| c.references[0].as_slice()));
    let model = Model::new(tiny_config(), vocab).unwrap();
    let dir = tempfile::tempdir().unwrap();

    let one = export_adjacency(&model, &clips[0], 1, dir.path()).unwrap();
    let (w, h, _) = read_pgm(&one.image_path).unwrap();
    assert_eq!((w, h), (16, 16));
    let raw = read_feature_matrix(&one.matrix_path).unwrap();
    assert_eq!((raw.rows(), raw.cols()), (16, 16));
    for r in 0..16 {
        let nz = (0..16).filter(|&c| raw.get(r, c) != 0.0).count();
        assert_eq!(nz, 3);
    }

    let four = export_adjacency(&model, &clips[0], 4, dir.path().join("x4")).unwrap();
    let (w, h, px) = read_pgm(&four.image_path).unwrap();
    assert_eq!((w, h), (64, 64));
    let v = raw.values();
    let (lo, hi) = v.iter().fold((f64::MAX, f64::MIN), |(a, b), &x| (a.min(x as f64), b.max(x as f64)));
    let expect = |x: f32| ((x as f64 - lo) / (hi - lo) * 255.0).round() as u8;
    assert_eq!(px[0], expect(raw.get(0, 0)));
    assert_eq!(px[63], expect(raw.get(0, 15)));
    assert_eq!(px[63 * 64], expect(raw.get(15, 0)));
    assert_eq!(px[63 * 64 + 63], expect(raw.get(15, 15)));

    assert!(export_adjacency(&model, &clips[0], 0, dir.path()).is_err());
    let mut off = tiny_config();
    off.graph.enabled = false;
    let plain = Model::new(off, model.vocab.clone()).unwrap();
    assert!(export_adjacency(&plain, &clips[0], 1, dir.path()).is_err());
}

#[test]
fn export_rejects_clips_below_the_frontend_minimum() {
    let clips = tiny_data(1);
    let model = Model::new(tiny_config(), Vocabulary::from_captions(clips.iter().map(|c| c.references[0].as_slice()))).unwrap();
    let mut short = clips[0].clone();
    short.features = FeatureMatrix::zeros(3, 8).unwrap();
    let dir = tempfile::tempdir().unwrap();
    assert!(matches!(
        export_adjacency(&model, &short, 1, dir.path()),
        Err(Error::InputTooShort { .. })
    ));
}

#[test]
fn model_config_text_round_trips_and_rejects_unknown_keys() {
    let mut cfg = tiny_config();
    cfg.graph.shared_phi = false;
    cfg.decoder.vocab_size = 9;
    let back = ModelConfig::from_text(&cfg.to_text()).unwrap();
    assert_eq!(back, cfg);
    let text = format!("{}bogus=1\n", cfg.to_text());
    assert!(ModelConfig::from_text(&text).is_err());
    assert!(ModelConfig::default().validate().is_ok());
    assert!(ModelConfig::default().with_dim(16).validate().is_ok());
}

#[test]
fn teacher_forcing_pair_shifts_by_one() {
    let vocab = Vocabulary::from_captions([["dog", "bird"].as_slice()]);
    let words = vec!["dog".to_string(), "bird".to_string()];
    let (input, targets) = teacher_forcing_pair(&vocab, &words, 6).unwrap();
    assert_eq!(input[0], crate::feature_io::SOS as usize);
    assert_eq!(&input[1..], &targets[..2]);
    assert_eq!(*targets.last().unwrap(), crate::feature_io::EOS as usize);
    assert!(teacher_forcing_pair(&vocab, &words, 1).is_err());
}
