//! The `nic` command line.
//!
//! Exit codes: 0 success, 2 usage error, 3 malformed input file, 4 inputs
//! that do not fit together, 5 any other failure.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use log::{error, info};
use rayon::prelude::*;
use serde::Serialize;

use crate::analysis::nn_study;
use crate::data::{
    read_captions, synth_dataset, write_captions, CaptionSample, FeatureRecord, FeatureSet, Vocabulary, VocabSpec, END,
};
use crate::decode::beam_decode;
use crate::error::Error;
use crate::metrics::evaluate_run;
use crate::models::{Arch, ModelConfig};
use crate::train::{final_checkpoint_path, train, Checkpoint, OptimizerConfig, TrainOptions, TrainingSet};

pub const EXIT_USAGE: i32 = 2;
pub const EXIT_FORMAT: i32 = 3;
pub const EXIT_CONFIG: i32 = 4;
pub const EXIT_RUNTIME: i32 = 5;

#[derive(Parser, Debug)]
#[command(name = "nic", version, about = "Train, run and evaluate image caption decoders")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Build a vocabulary from a caption file.
    BuildVocab(BuildVocabArgs),
    /// Write a synthetic feature file, caption file and vocabulary.
    Synth(SynthArgs),
    /// Train a decoder with teacher forcing.
    Train(TrainArgs),
    /// Caption images, one JSON object per line on stdout.
    Caption(CaptionArgs),
    /// Score beam-search captions with BLEU and CIDEr.
    Eval(EvalArgs),
    /// Compare image-space and caption-space nearest neighbors.
    Nn(NnArgs),
}

#[derive(Args, Debug, Serialize)]
struct BuildVocabArgs {
    #[arg(long)]
    captions: PathBuf,
    #[arg(long, default_value_t = 1)]
    min_count: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug, Serialize)]
struct SynthArgs {
    #[arg(long, default_value_t = 32)]
    n: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out_dir: PathBuf,
    /// Standard deviation of the Gaussian feature noise.
    #[arg(long, default_value_t = 0.05)]
    noise: f64,
}

#[derive(Args, Debug, Serialize)]
struct TrainArgs {
    /// `specimen` or `topdown-lstmgru`.
    #[arg(long)]
    arch: Arch,
    #[arg(long, default_value_t = 1, value_parser = clap::value_parser!(u8).range(1..=2))]
    lstm_layers: u8,
    #[arg(long)]
    features: PathBuf,
    #[arg(long)]
    captions: PathBuf,
    #[arg(long)]
    vocab: PathBuf,
    /// Defaults to 10 for specimen and 25 for topdown-lstmgru.
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long, default_value_t = 32)]
    batch: usize,
    #[arg(long, default_value_t = 0.1)]
    lr: f64,
    #[arg(long, default_value_t = 0.9)]
    momentum: f64,
    #[arg(long, default_value_t = 1e-4)]
    weight_decay: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output directory for checkpoints and `loss.csv`.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    embed_size: Option<usize>,
    #[arg(long)]
    hidden_size: Option<usize>,
    #[arg(long)]
    attention_size: Option<usize>,
    /// Keep a numbered checkpoint every this many epochs.
    #[arg(long, default_value_t = 0)]
    checkpoint_every: usize,
    /// Continue from this checkpoint up to `--epochs`.
    #[arg(long)]
    resume: Option<PathBuf>,
}

#[derive(Args, Debug, Serialize)]
struct CaptionArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    features: PathBuf,
    #[arg(long, default_value_t = 3)]
    beam: usize,
    #[arg(long, default_value_t = 30)]
    max_len: usize,
    /// Caption only this image.
    #[arg(long)]
    image_id: Option<u64>,
}

#[derive(Args, Debug, Serialize)]
struct EvalArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    features: PathBuf,
    #[arg(long)]
    captions: PathBuf,
    #[arg(long, default_value_t = 3)]
    beam: usize,
    /// Report path; printed to stdout when omitted.
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Args, Debug, Serialize)]
struct NnArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    features: PathBuf,
    #[arg(long, default_value_t = 1000)]
    samples: usize,
    #[arg(long, default_value_t = 3)]
    k: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Per-anchor JSON lines; the summary goes next to it as
    /// `<stem>.summary.json` and to stdout.
    #[arg(long)]
    report: PathBuf,
}

enum Failure {
    Usage(String),
    Core(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Core(e)
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Core(e.into())
    }
}

impl From<serde_json::Error> for Failure {
    fn from(e: serde_json::Error) -> Self {
        Failure::Core(e.into())
    }
}

type CliResult<T = ()> = std::result::Result<T, Failure>;

/// Exit code for a library error.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        e if e.is_format_error() => EXIT_FORMAT,
        Error::ConfigMismatch(_) => EXIT_CONFIG,
        Error::InvalidArgument(_) => EXIT_USAGE,
        _ => EXIT_RUNTIME,
    }
}

/// Parses `argv` (program name first), runs the command and returns the
/// process exit code.
pub fn run<I, S>(argv: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    let result = match &cli.command {
        Command::BuildVocab(a) => echo("build-vocab", a).and_then(|_| build_vocab(a)),
        Command::Synth(a) => echo("synth", a).and_then(|_| synth(a)),
        Command::Train(a) => echo("train", a).and_then(|_| run_train(a)),
        Command::Caption(a) => echo("caption", a).and_then(|_| caption(a)),
        Command::Eval(a) => echo("eval", a).and_then(|_| eval(a)),
        Command::Nn(a) => echo("nn", a).and_then(|_| nn(a)),
    };
    match result {
        Ok(()) => 0,
        Err(Failure::Usage(msg)) => {
            error!("{msg}");
            eprintln!("error: {msg}");
            EXIT_USAGE
        }
        Err(Failure::Core(e)) => {
            error!("{e}");
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

fn echo<T: Serialize>(command: &str, args: &T) -> CliResult {
    info!("{command} {}", serde_json::to_string(args)?);
    Ok(())
}

fn require_beam(beam: usize) -> CliResult {
    if beam == 0 {
        return Err(Failure::Usage("--beam must be at least 1".into()));
    }
    Ok(())
}

fn write_text(path: &Path, text: &str) -> CliResult {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, text)?;
    Ok(())
}

fn check_features(config: &ModelConfig, features: &FeatureSet) -> CliResult {
    if features.feature_dim != config.feature_dim
        || features.region_count != config.region_count
        || features.region_dim != config.region_dim
    {
        return Err(Error::ConfigMismatch(format!(
            "features have D_f={}, R={}, D_a={} but the model expects D_f={}, R={}, D_a={}",
            features.feature_dim,
            features.region_count,
            features.region_dim,
            config.feature_dim,
            config.region_count,
            config.region_dim
        ))
        .into());
    }
    Ok(())
}

fn build_vocab(a: &BuildVocabArgs) -> CliResult {
    if a.min_count == 0 {
        return Err(Failure::Usage("--min-count must be at least 1".into()));
    }
    let entries = read_captions(&a.captions)?;
    let corpus: Vec<&str> = entries.iter().flat_map(|e| e.captions.iter().map(String::as_str)).collect();
    let vocab = Vocabulary::build(&corpus, a.min_count)?;
    vocab.save(&a.out)?;
    info!("wrote {} tokens to {}", vocab.len(), a.out.display());
    Ok(())
}

fn synth(a: &SynthArgs) -> CliResult {
    let data = synth_dataset(a.n, &VocabSpec::default().with_noise(a.noise), a.seed)?;
    fs::create_dir_all(&a.out_dir)?;
    data.features.write(a.out_dir.join("features.nicf"))?;
    write_captions(a.out_dir.join("captions.jsonl"), &data.captions)?;
    data.vocab.save(a.out_dir.join("vocab.json"))?;
    info!(
        "wrote {} images and a {}-token vocabulary to {}",
        data.features.len(),
        data.vocab.len(),
        a.out_dir.display()
    );
    Ok(())
}

fn run_train(a: &TrainArgs) -> CliResult {
    let features = FeatureSet::read(&a.features)?;
    let vocab = Vocabulary::load(&a.vocab)?;
    let samples = read_captions(&a.captions)?
        .iter()
        .map(|e| CaptionSample::from_entry(e, &vocab))
        .collect::<crate::Result<Vec<_>>>()?;

    let mut config = ModelConfig::new(a.arch, vocab.len(), features.feature_dim, features.region_count, features.region_dim);
    config.lstm_layers = a.lstm_layers as usize;
    config.embed_size = a.embed_size.unwrap_or(config.embed_size);
    config.hidden_size = a.hidden_size.unwrap_or(config.hidden_size);
    config.attention_size = a.attention_size.unwrap_or(config.attention_size);
    config.validate()?;

    let defaults = OptimizerConfig::for_arch(a.arch, a.seed);
    let opt = OptimizerConfig {
        lr: a.lr,
        momentum: a.momentum,
        weight_decay: a.weight_decay,
        batch_size: a.batch,
        epochs: a.epochs.unwrap_or(defaults.epochs),
        seed: a.seed,
    };
    opt.validate()?;
    info!("model {}", serde_json::to_string(&config)?);
    info!("optimizer {}", serde_json::to_string(&opt)?);

    let resume = a.resume.as_ref().map(Checkpoint::load).transpose()?;
    let data = TrainingSet::new(&features, &samples).map_err(|e| match e {
        Error::InvalidArgument(msg) => Error::ConfigMismatch(msg),
        e => e,
    })?;
    let options = TrainOptions {
        checkpoint_dir: Some(a.out.clone()),
        checkpoint_every: a.checkpoint_every,
    };
    let report = train(&data, &vocab, &config, &opt, &options, resume)?;
    if let Some(loss) = report.epoch_losses.last() {
        info!("final mean loss {loss:.6}");
    }
    info!("wrote {}", final_checkpoint_path(&a.out).display());
    Ok(())
}

#[derive(Serialize)]
struct CaptionLine {
    image_id: u64,
    caption: String,
    tokens: Vec<usize>,
    logprob_sum: f64,
}

fn caption(a: &CaptionArgs) -> CliResult {
    require_beam(a.beam)?;
    if a.max_len == 0 {
        return Err(Failure::Usage("--max-len must be at least 1".into()));
    }
    let mut ckpt = Checkpoint::load(&a.ckpt)?;
    ckpt.config.max_caption_len = a.max_len;
    let features = FeatureSet::read(&a.features)?;
    check_features(&ckpt.config, &features)?;
    let records: Vec<&FeatureRecord> = match a.image_id {
        Some(id) => vec![features
            .find(id)
            .ok_or_else(|| Failure::Usage(format!("image {id} is not in {}", a.features.display())))?],
        None => features.records.iter().collect(),
    };

    let model = ckpt.model()?;
    let lines = records
        .par_iter()
        .map(|rec| {
            let best = beam_decode(&model, &ckpt.params, rec, a.beam)?
                .into_iter()
                .next()
                .ok_or(Error::Empty("beam search result"))?;
            let mut tokens = best.tokens;
            if tokens.last() == Some(&END) {
                tokens.pop();
            }
            Ok(serde_json::to_string(&CaptionLine {
                image_id: rec.image_id,
                caption: ckpt.vocab.decode(&tokens),
                tokens,
                logprob_sum: best.logprob_sum,
            })?)
        })
        .collect::<crate::Result<Vec<String>>>()?;
    for line in lines {
        println!("{line}");
    }
    Ok(())
}

fn eval(a: &EvalArgs) -> CliResult {
    require_beam(a.beam)?;
    let ckpt = Checkpoint::load(&a.ckpt)?;
    let features = FeatureSet::read(&a.features)?;
    let captions = read_captions(&a.captions)?;
    let report = evaluate_run(&ckpt, &features, &a.features.to_string_lossy(), &captions, a.beam)?;
    let text = serde_json::to_string_pretty(&report)? + "\n";
    match &a.report {
        Some(path) => {
            write_text(path, &text)?;
            info!(
                "BLEU-1..4 {:?}, CIDEr {:.4}; wrote {}",
                report.bleu,
                report.cider,
                path.display()
            );
        }
        None => print!("{text}"),
    }
    Ok(())
}

/// Where the summary of an `nn` run goes.
pub fn nn_summary_path(report: &Path) -> PathBuf {
    report.with_extension("summary.json")
}

fn nn(a: &NnArgs) -> CliResult {
    if a.k == 0 {
        return Err(Failure::Usage("--k must be at least 1".into()));
    }
    let ckpt = Checkpoint::load(&a.ckpt)?;
    let features = FeatureSet::read(&a.features)?;
    check_features(&ckpt.config, &features)?;
    let study = nn_study(&ckpt, &features, a.samples, a.k, a.seed)?;
    write_text(&a.report, &study.to_jsonl()?)?;
    let summary = serde_json::to_string_pretty(&study.summary)? + "\n";
    let summary_path = nn_summary_path(&a.report);
    write_text(&summary_path, &summary)?;
    print!("{summary}");
    info!("wrote {} and {}", a.report.display(), summary_path.display());
    Ok(())
}
