//! `graphac` command line: dataset generation, training, evaluation,
//! gradient checks and adjacency export.
//!
//! Exit codes: 0 success, 1 invalid arguments or inputs, 2 runtime failure.

use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{ArgMatches, Args, CommandFactory, FromArgMatches, Parser, Subcommand};

use graphac::checks::{GradProbe, ProbeModule, GRADCHECK_STEP, GRADCHECK_TOLERANCE};
use graphac::feature_io::{generate_synthetic_dataset, read_dataset, write_dataset, SyntheticSpec};
use graphac::pipeline::{
    evaluate, export_adjacency, load_checkpoint, split_train_validation, train, KeyValues, ModelConfig, TrainConfig,
};
use graphac::Error;

pub const EXIT_OK: i32 = 0;
pub const EXIT_INVALID: i32 = 1;
pub const EXIT_RUNTIME: i32 = 2;

#[derive(Parser, Debug)]
#[command(name = "graphac", version, about = "Graph-attention audio captioning toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic event-captioning dataset
    GenData(GenDataArgs),
    /// Train a captioning model on a dataset directory
    Train(TrainArgs),
    /// Decode a dataset split with beam search and score the captions
    Eval(EvalArgs),
    /// Compare analytic gradients against central finite differences
    Gradcheck(GradcheckArgs),
    /// Export the learned adjacency matrix of one clip as FMAT and PGM
    InspectGraph(InspectArgs),
}

#[derive(Args, Debug)]
struct GenDataArgs {
    /// key=value file of flag defaults (keys are flag names without dashes)
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory
    #[arg(long, default_value = "data")]
    out_dir: PathBuf,
    /// Number of clips
    #[arg(long, default_value_t = 512)]
    clips: usize,
    /// Number of event types
    #[arg(long, default_value_t = 20)]
    events: usize,
    /// Mel bins per frame
    #[arg(long, default_value_t = 64)]
    mel_bins: usize,
    /// Frames per clip
    #[arg(long, default_value_t = 256)]
    frames: usize,
    /// Fewest events per clip
    #[arg(long, default_value_t = 1)]
    min_events: usize,
    /// Most events per clip
    #[arg(long, default_value_t = 4)]
    max_events: usize,
    /// Standard deviation of the background noise
    #[arg(long, default_value_t = 0.1)]
    noise_std: f64,
    /// Event amplitude
    #[arg(long, default_value_t = 1.0)]
    amplitude: f64,
    /// Shortest event, in frames
    #[arg(long, default_value_t = 16)]
    min_duration: usize,
    /// Longest event, in frames
    #[arg(long, default_value_t = 64)]
    max_duration: usize,
    /// Minimum gap between consecutive onsets, in frames
    #[arg(long, default_value_t = 16)]
    onset_gap: usize,
    /// Random seed
    #[arg(long, default_value_t = 42)]
    seed: u64,
}

#[derive(Args, Debug)]
struct ModelArgs {
    /// Frontend channels per block (comma separated; the last is the node dimension)
    #[arg(long, default_value = "32,64,128,128")]
    channels: String,
    /// Temporal pooling factor per block (comma separated)
    #[arg(long, default_value = "2,2,2,2")]
    pools: String,
    /// Frontend convolution kernel size
    #[arg(long, default_value_t = 3)]
    kernel: usize,
    /// Number of band-position input planes of the frontend
    #[arg(long, default_value_t = 32)]
    band_channels: usize,
    /// Enable the graph-attention module
    #[arg(long, default_value_t = true, action = clap::ArgAction::Set)]
    graph: bool,
    /// Edges kept per node in the adjacency matrix
    #[arg(long, default_value_t = 25)]
    k: usize,
    /// Reuse the relation projection for aggregation
    #[arg(long, default_value_t = true, action = clap::ArgAction::Set)]
    shared_phi: bool,
    /// Decoder layers
    #[arg(long, default_value_t = 2)]
    layers: usize,
    /// Decoder attention heads
    #[arg(long, default_value_t = 4)]
    heads: usize,
    /// Decoder feed-forward width
    #[arg(long, default_value_t = 512)]
    ff_dim: usize,
    /// Longest caption in words
    #[arg(long, default_value_t = 12)]
    max_len: usize,
    /// Decoder dropout rate
    #[arg(long, default_value_t = 0.2)]
    dropout: f64,
    /// Label smoothing of the training loss
    #[arg(long, default_value_t = 0.1)]
    label_smoothing: f64,
}

#[derive(Args, Debug)]
struct TrainArgs {
    /// key=value file of flag defaults (keys are flag names without dashes)
    #[arg(long)]
    config: Option<PathBuf>,
    /// Dataset directory written by gen-data
    #[arg(long, default_value = "data")]
    data: PathBuf,
    /// Output directory for the log, report and checkpoint
    #[arg(long, default_value = "run")]
    out_dir: PathBuf,
    /// Training epochs
    #[arg(long, default_value_t = 30)]
    epochs: usize,
    /// Clips per optimiser step
    #[arg(long, default_value_t = 16)]
    batch_size: usize,
    /// Adam learning rate
    #[arg(long, default_value_t = 1e-4)]
    lr: f64,
    /// Fraction of clips held out for validation
    #[arg(long, default_value_t = 0.1)]
    val_fraction: f64,
    /// Random seed (initialisation, split, shuffling, dropout)
    #[arg(long, default_value_t = 42)]
    seed: u64,
    #[command(flatten)]
    model: ModelArgs,
}

#[derive(Args, Debug)]
struct EvalArgs {
    /// key=value file of flag defaults (keys are flag names without dashes)
    #[arg(long)]
    config: Option<PathBuf>,
    /// Checkpoint directory
    #[arg(long, default_value = "run/checkpoint")]
    checkpoint: PathBuf,
    /// Dataset directory written by gen-data
    #[arg(long, default_value = "data")]
    data: PathBuf,
    /// Clips to evaluate: the held-out split or every clip
    #[arg(long, default_value = "validation", value_parser = ["validation", "all"])]
    split: String,
    /// Fraction of clips held out for validation (must match training)
    #[arg(long, default_value_t = 0.1)]
    val_fraction: f64,
    /// Beam width
    #[arg(long, default_value_t = 5)]
    beam: usize,
    /// Output directory for the report and captions
    #[arg(long, default_value = "eval")]
    out_dir: PathBuf,
    /// Random seed of the validation split (must match training)
    #[arg(long, default_value_t = 42)]
    seed: u64,
}

#[derive(Args, Debug)]
struct GradcheckArgs {
    /// key=value file of flag defaults (keys are flag names without dashes)
    #[arg(long)]
    config: Option<PathBuf>,
    /// Module to check
    #[arg(long, default_value = "all", value_parser = ["graph-attention", "frontend", "decoder", "all"])]
    module: String,
    /// Central-difference step
    #[arg(long, default_value_t = GRADCHECK_STEP)]
    step: f64,
    /// Largest accepted relative error
    #[arg(long, default_value_t = GRADCHECK_TOLERANCE)]
    tolerance: f64,
    /// Random seed of the probe instance
    #[arg(long, default_value_t = 42)]
    seed: u64,
}

#[derive(Args, Debug)]
struct InspectArgs {
    /// key=value file of flag defaults (keys are flag names without dashes)
    #[arg(long)]
    config: Option<PathBuf>,
    /// Checkpoint directory
    #[arg(long, default_value = "run/checkpoint")]
    checkpoint: PathBuf,
    /// Dataset directory holding the clip
    #[arg(long, default_value = "data")]
    data: PathBuf,
    /// Clip id
    #[arg(long, default_value = "clip_0000")]
    clip: String,
    /// Bilinear upscaling factor of the image
    #[arg(long, default_value_t = 4)]
    interp: usize,
    /// Output directory
    #[arg(long, default_value = "graphs")]
    out_dir: PathBuf,
    /// Random seed (unused by inference; recorded for reproducibility)
    #[arg(long, default_value_t = 42)]
    seed: u64,
}

/// Failure with its exit code.
#[derive(Debug)]
struct Failure {
    code: i32,
    message: String,
}

impl Failure {
    fn invalid(message: impl Into<String>) -> Self {
        Self {
            code: EXIT_INVALID,
            message: message.into(),
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::Io { .. } | Error::Diverged { .. } | Error::NonFinite(_) | Error::NonDeterministic { .. } => {
                EXIT_RUNTIME
            }
            _ => EXIT_INVALID,
        };
        Self {
            code,
            message: e.to_string(),
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Self {
            code: EXIT_RUNTIME,
            message: e.to_string(),
        }
    }
}

type Outcome = std::result::Result<(), Failure>;

/// Runs the command line `argv` (program name first) and returns the exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    run_with(argv, &mut std::io::stdout(), &mut std::io::stderr())
}

/// [`run`] with explicit output streams.
pub fn run_with<I, T>(argv: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let argv: Vec<OsString> = argv.into_iter().map(Into::into).collect();
    match dispatch(argv, out) {
        Ok(()) => EXIT_OK,
        Err(f) => {
            let msg = f.message.trim_end();
            // clap renders its own "error:" prefix.
            let msg = msg.strip_prefix("error: ").unwrap_or(msg);
            let _ = writeln!(err, "error: {msg}");
            f.code
        }
    }
}

fn command() -> clap::Command {
    let cmd = Cli::command();
    let names: Vec<String> = cmd.get_subcommands().map(|s| s.get_name().to_owned()).collect();
    // Later occurrences win, so flags typed after config-file values override them.
    names
        .iter()
        .fold(cmd, |c, n| c.mut_subcommand(n, |s| s.args_override_self(true)))
}

fn parse(argv: &[OsString], out: &mut dyn Write) -> std::result::Result<Option<ArgMatches>, Failure> {
    match command().try_get_matches_from(argv) {
        Ok(m) => Ok(Some(m)),
        Err(e) => {
            use clap::error::ErrorKind;
            match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => {
                    write!(out, "{}", e.render())?;
                    Ok(None)
                }
                ErrorKind::DisplayHelpOnMissingArgumentOrSubcommand => {
                    write!(out, "{}", e.render())?;
                    Err(Failure::invalid("no subcommand given"))
                }
                _ => Err(Failure::invalid(e.render().to_string())),
            }
        }
    }
}

/// Inserts `--key value` for each config-file entry right after the
/// subcommand, ahead of the flags typed by the user.
fn merge_config_file(argv: &[OsString], matches: &ArgMatches) -> std::result::Result<Option<Vec<OsString>>, Failure> {
    let Some((_, sub)) = matches.subcommand() else {
        return Ok(None);
    };
    let Some(path) = sub.get_one::<PathBuf>("config") else {
        return Ok(None);
    };
    let text = fs::read_to_string(path)
        .map_err(|e| Failure::invalid(format!("--config {}: {e}", path.display())))?;
    let kv = KeyValues::parse(&text).map_err(|e| Failure::invalid(format!("--config {}: {e}", path.display())))?;
    let mut merged = argv[..2].to_vec();
    for (k, v) in kv.entries() {
        if k == "config" {
            return Err(Failure::invalid(format!("--config {}: nested config files are not supported", path.display())));
        }
        merged.push(format!("--{k}").into());
        merged.push(v.into());
    }
    merged.extend_from_slice(&argv[2..]);
    Ok(Some(merged))
}

fn dispatch(argv: Vec<OsString>, out: &mut dyn Write) -> Outcome {
    let Some(mut matches) = parse(&argv, out)? else {
        return Ok(());
    };
    if let Some(merged) = merge_config_file(&argv, &matches)? {
        matches = match command().try_get_matches_from(&merged) {
            Ok(m) => m,
            Err(e) => {
                let path = matches
                    .subcommand()
                    .and_then(|(_, s)| s.get_one::<PathBuf>("config"))
                    .map(|p| p.display().to_string())
                    .unwrap_or_default();
                let msg = e.render().to_string();
                let msg = msg.strip_prefix("error: ").unwrap_or(&msg).trim_end().to_string();
                return Err(Failure::invalid(format!("--config {path}: {msg}")));
            }
        };
    }
    echo_resolved(&matches, out)?;
    let cli = Cli::from_arg_matches(&matches).map_err(|e| Failure::invalid(e.to_string()))?;
    match cli.command {
        Command::GenData(a) => gen_data(&a, out),
        Command::Train(a) => train_cmd(&a, out),
        Command::Eval(a) => eval_cmd(&a, out),
        Command::Gradcheck(a) => gradcheck(&a, out),
        Command::InspectGraph(a) => inspect_graph(&a, out),
    }
}

/// Prints every flag of the subcommand with its effective value.
fn echo_resolved(matches: &ArgMatches, out: &mut dyn Write) -> Outcome {
    let Some((name, sub)) = matches.subcommand() else {
        return Ok(());
    };
    let cmd = command();
    let sub_cmd = cmd.find_subcommand(name).expect("parsed subcommand exists");
    writeln!(out, "# {name} configuration")?;
    for arg in sub_cmd.get_arguments() {
        let Some(long) = arg.get_long() else { continue };
        let id = arg.get_id().as_str();
        if long == "help" {
            continue;
        }
        let value = match sub.get_raw(id) {
            Some(mut vals) => vals.next().map(|v| v.to_string_lossy().into_owned()).unwrap_or_default(),
            None => "none".to_string(),
        };
        writeln!(out, "{long}={value}")?;
    }
    Ok(())
}

fn usize_list(flag: &str, s: &str) -> std::result::Result<Vec<usize>, Failure> {
    s.split(',')
        .map(|x| {
            x.trim()
                .parse()
                .map_err(|_| Failure::invalid(format!("--{flag}: {x:?} is not a non-negative integer")))
        })
        .collect()
}

fn model_config(a: &ModelArgs, seed: u64) -> std::result::Result<ModelConfig, Failure> {
    let mut cfg = ModelConfig::default();
    cfg.frontend.channels = usize_list("channels", &a.channels)?;
    cfg.frontend.pools = usize_list("pools", &a.pools)?;
    cfg.frontend.kernel = a.kernel;
    cfg.frontend.band_channels = a.band_channels;
    let dim = *cfg
        .frontend
        .channels
        .last()
        .ok_or_else(|| Failure::invalid("--channels: at least one block is required"))?;
    cfg = cfg.with_dim(dim);
    cfg.graph.enabled = a.graph;
    cfg.graph.k = a.k;
    cfg.graph.shared_phi = a.shared_phi;
    cfg.decoder.n_layers = a.layers;
    cfg.decoder.n_heads = a.heads;
    cfg.decoder.ff_dim = a.ff_dim;
    cfg.decoder.max_len = a.max_len;
    cfg.decoder.dropout = a.dropout;
    cfg.label_smoothing = a.label_smoothing;
    cfg.seed = seed;
    cfg.validate()?;
    Ok(cfg)
}

fn gen_data(a: &GenDataArgs, out: &mut dyn Write) -> Outcome {
    let spec = SyntheticSpec {
        n_clips: a.clips,
        n_event_types: a.events,
        mel_bins: a.mel_bins,
        frames: a.frames,
        min_events: a.min_events,
        max_events: a.max_events,
        noise_std: a.noise_std,
        amplitude: a.amplitude,
        min_duration: a.min_duration,
        max_duration: a.max_duration,
        min_onset_gap: a.onset_gap,
        seed: a.seed,
    };
    let clips = generate_synthetic_dataset(&spec)?;
    write_dataset(&a.out_dir, &clips, Some(&spec))?;
    writeln!(out, "wrote {} clips to {}", clips.len(), a.out_dir.display())?;
    Ok(())
}

fn load_data(dir: &Path) -> std::result::Result<Vec<graphac::feature_io::CaptionedClip>, Failure> {
    read_dataset(dir).map_err(|e| match e {
        Error::Io { .. } => Failure::invalid(format!("--data: {e}")),
        other => other.into(),
    })
}

fn train_cmd(a: &TrainArgs, out: &mut dyn Write) -> Outcome {
    let cfg = model_config(&a.model, a.seed)?;
    let tc = TrainConfig {
        epochs: a.epochs,
        batch_size: a.batch_size,
        learning_rate: a.lr,
    };
    tc.validate()?;
    let clips = load_data(&a.data)?;
    let (tr, va) = split_train_validation(&clips, a.val_fraction, a.seed)?;
    writeln!(out, "training on {} clips, validating on {}", tr.len(), va.len())?;
    let (model, report) = train(&cfg, &tc, &tr, &va, Some(&a.out_dir))?;
    for e in &report.epochs {
        match e.validation {
            Some(v) => writeln!(
                out,
                "epoch {:>3}  train loss {:.4} acc {:.3}  validation loss {:.4} acc {:.3}",
                e.epoch, e.train.loss, e.train.accuracy, v.loss, v.accuracy
            )?,
            None => writeln!(out, "epoch {:>3}  train loss {:.4} acc {:.3}", e.epoch, e.train.loss, e.train.accuracy)?,
        }
    }
    writeln!(out, "vocabulary: {} tokens", model.vocab.len())?;
    writeln!(out, "wall clock: {:.1} s", report.wall_clock.as_secs_f64())?;
    if let Some(c) = &report.checkpoint {
        writeln!(out, "checkpoint: {}", c.display())?;
    }
    Ok(())
}

fn eval_cmd(a: &EvalArgs, out: &mut dyn Write) -> Outcome {
    if a.beam == 0 {
        return Err(Failure::invalid("--beam must be >= 1"));
    }
    let model = load_checkpoint(&a.checkpoint).map_err(|e| match e {
        Error::Io { .. } => Failure::invalid(format!("--checkpoint: {e}")),
        other => other.into(),
    })?;
    let clips = load_data(&a.data)?;
    let clips = if a.split == "all" {
        clips
    } else {
        split_train_validation(&clips, a.val_fraction, a.seed)?.1
    };
    let report = evaluate(&model, &clips, a.beam)?;
    fs::create_dir_all(&a.out_dir).map_err(|e| Error::Io {
        path: a.out_dir.clone(),
        source: e,
    })?;
    let path = a.out_dir.join("eval_report.tsv");
    fs::write(&path, report.to_records()).map_err(|e| Error::Io { path: path.clone(), source: e })?;
    let mut captions = String::from("id\tcandidate\treference\n");
    for c in &report.captions {
        captions.push_str(&format!("{}\t{}\t{}\n", c.id, c.candidate.join(" "), c.references[0].join(" ")));
    }
    let cap_path = a.out_dir.join("captions.tsv");
    fs::write(&cap_path, captions).map_err(|e| Error::Io {
        path: cap_path.clone(),
        source: e,
    })?;
    writeln!(out, "clips: {}  beam: {}", clips.len(), report.beam_size)?;
    write!(out, "{}", report.metrics.to_table())?;
    writeln!(out, "event recall: {:.4}", report.event_recall)?;
    writeln!(out, "token accuracy: {:.4}", report.token_accuracy)?;
    Ok(())
}

fn gradcheck(a: &GradcheckArgs, out: &mut dyn Write) -> Outcome {
    let modules: Vec<ProbeModule> = if a.module == "all" {
        ProbeModule::ALL.to_vec()
    } else {
        vec![a.module.parse()?]
    };
    let mut all_pass = true;
    for m in modules {
        let report = GradProbe::new(m, a.seed)?.check(a.step)?;
        let pass = report.passes(a.tolerance);
        all_pass &= pass;
        let worst = report
            .worst
            .as_ref()
            .map(|(n, i)| format!("{n}[{i}]"))
            .unwrap_or_else(|| "-".into());
        writeln!(
            out,
            "{m}: max relative error {:.3e} over {} coordinates (worst {worst}) {} (tolerance {:e})",
            report.max_rel_error,
            report.coordinates,
            if pass { "PASS" } else { "FAIL" },
            a.tolerance
        )?;
    }
    if all_pass {
        Ok(())
    } else {
        Err(Failure {
            code: EXIT_RUNTIME,
            message: "gradient check failed".into(),
        })
    }
}

fn inspect_graph(a: &InspectArgs, out: &mut dyn Write) -> Outcome {
    let model = load_checkpoint(&a.checkpoint).map_err(|e| match e {
        Error::Io { .. } => Failure::invalid(format!("--checkpoint: {e}")),
        other => other.into(),
    })?;
    let clips = load_data(&a.data)?;
    let clip = clips
        .iter()
        .find(|c| c.id == a.clip)
        .ok_or_else(|| Failure::invalid(format!("--clip: no clip {:?} in {}", a.clip, a.data.display())))?;
    let export = export_adjacency(&model, clip, a.interp, &a.out_dir)?;
    let t = export.adjacency.shape()[0];
    writeln!(out, "adjacency: {t}x{t}")?;
    writeln!(out, "matrix: {}", export.matrix_path.display())?;
    writeln!(out, "image: {}", export.image_path.display())?;
    Ok(())
}
