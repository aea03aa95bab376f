//! Command-line surface of the enhancement pipeline.
//!
//! Subcommands: `synth` (synthetic corpus), `mix` (manifest and noisy
//! WAVs), `train`, `enhance`, `evaluate` and `params`. Exit codes: 0
//! success, 2 usage or input error, 3 data or format error, 4 numeric
//! failure.

pub mod config;
pub mod error;

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use rayon::prelude::*;
use specunet::data::synth::{write_corpus, CorpusSpec};
use specunet::data::{build_manifest, image_pairs, ImagePair, Manifest, ManifestConfig, ManifestEntry, Split};
use specunet::dsp::{load_mono, write_wav, SampleFormat, SAMPLE_RATE};
use specunet::enhance::enhance_utterance;
use specunet::metrics::{evaluate_manifest, EvaluateOptions};
use specunet::model::{self, ArchKind, ArchitectureSpec};
use specunet::perceptual::{write_mpow, FrontEnd};
use specunet::train::{load_checkpoint, save_checkpoint, train};

pub use config::RunConfig;
pub use error::CliError;

#[derive(Debug, Parser)]
#[command(name = "specunet", version, about = "Speech enhancement with spectrum-image U-Nets")]
pub struct Cli {
    /// TOML config file; command-line flags override its values.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Cap on worker threads.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a synthetic clean/noise corpus of speech-like signals.
    Synth(SynthArgs),
    /// Pair clean and noise files at random SNRs into a manifest.
    Mix(MixArgs),
    /// Train a network on a manifest's train split, selecting on dev.
    Train(TrainArgs),
    /// Enhance one WAV file, or every entry of a manifest split.
    Enhance(EnhanceArgs),
    /// Score enhanced test files and write a report.
    Evaluate(EvaluateArgs),
    /// Print the trainable parameter count of an architecture.
    Params(ParamsArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub utterances: Option<usize>,
    #[arg(long)]
    pub speakers: Option<usize>,
    /// Utterance length in samples at 16 kHz.
    #[arg(long)]
    pub utterance_len: Option<usize>,
    #[arg(long)]
    pub noise_len: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct MixArgs {
    #[arg(long)]
    pub clean_dir: PathBuf,
    #[arg(long)]
    pub noise_dir: PathBuf,
    /// Train/dev SNRs in dB, comma separated.
    #[arg(long, allow_hyphen_values = true)]
    pub snr_list: Option<String>,
    /// Test SNRs in dB, comma separated.
    #[arg(long, allow_hyphen_values = true)]
    pub test_snr_list: Option<String>,
    /// Train, dev and test shares, comma separated.
    #[arg(long)]
    pub splits: Option<String>,
    /// Regex naming the speaker of a clean file; keeps speakers within one split.
    #[arg(long)]
    pub speaker_pattern: Option<String>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Skip rendering noisy WAVs.
    #[arg(long)]
    pub lazy: bool,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub arch: Option<String>,
    #[arg(long)]
    pub width: Option<f64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub steps_per_epoch: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory for the checkpoint and epoch log.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EnhanceArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    /// Noisy WAV; requires --out.
    #[arg(long = "in", conflicts_with = "manifest", requires = "out")]
    pub input: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Enhance every entry of --split instead of a single file; requires --out-dir.
    #[arg(long, requires = "out_dir")]
    pub manifest: Option<PathBuf>,
    #[arg(long, default_value = "test")]
    pub split: String,
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
    /// Also write noisy and enhanced MPOW images here.
    #[arg(long)]
    pub dump_images: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub enhanced_dir: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Print the SNR-by-metric table.
    #[arg(long)]
    pub table: bool,
    /// Also score the unprocessed mixtures.
    #[arg(long)]
    pub include_noisy: bool,
    /// External PESQ command with {clean} and {degraded} placeholders.
    #[arg(long)]
    pub pesq_command: Option<String>,
}

#[derive(Debug, Args)]
pub struct ParamsArgs {
    #[arg(long)]
    pub arch: Option<String>,
    #[arg(long)]
    pub width: Option<f64>,
}

/// Parses arguments, runs the subcommand and maps failures to exit codes.
pub fn main_with(args: impl IntoIterator<Item = String>, out: &mut dyn Write) -> u8 {
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { error::EXIT_USAGE } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match run(cli, out) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.code
        }
    }
}

pub fn run(cli: Cli, out: &mut dyn Write) -> Result<(), CliError> {
    let mut config = RunConfig::load(cli.config.as_deref())?;
    if cli.threads.is_some() {
        config.threads = cli.threads;
    }
    if let Some(n) = config.threads {
        if n == 0 {
            return Err(CliError::usage("--threads must be >= 1"));
        }
        // Only the first call in a process can size the global pool.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    match cli.command {
        Command::Synth(a) => cmd_synth(config, a, out),
        Command::Mix(a) => cmd_mix(config, a, out),
        Command::Train(a) => cmd_train(config, a, out),
        Command::Enhance(a) => cmd_enhance(config, a, out),
        Command::Evaluate(a) => cmd_evaluate(config, a, out),
        Command::Params(a) => cmd_params(config, a, out),
    }
}

fn parse_arch(name: &str) -> Result<ArchKind, CliError> {
    name.parse().map_err(|e: specunet::Error| CliError::usage(e.to_string()))
}

fn apply_arch(config: &mut RunConfig, arch: Option<&str>, width: Option<f64>) -> Result<(), CliError> {
    if let Some(a) = arch {
        config.train.arch.kind = parse_arch(a)?;
    }
    if let Some(w) = width {
        config.train.arch.width_multiplier = w;
    }
    config.train.arch.validate()?;
    Ok(())
}

fn require_dir(path: &Path, what: &str) -> Result<(), CliError> {
    if path.is_dir() {
        Ok(())
    } else {
        Err(CliError::usage(format!("{what} {} is not a directory", path.display())))
    }
}

fn require_file(path: &Path, what: &str) -> Result<(), CliError> {
    if path.is_file() {
        Ok(())
    } else {
        Err(CliError::usage(format!("{what} {} does not exist", path.display())))
    }
}

fn load_manifest(path: &Path) -> Result<Manifest, CliError> {
    require_file(path, "manifest")?;
    Ok(Manifest::load(path)?)
}

/// Trainable parameters of `spec`, without building the network.
pub fn param_count(spec: &ArchitectureSpec) -> Result<usize, CliError> {
    Ok(model::param_count(spec)?)
}

pub fn cmd_params(mut config: RunConfig, args: ParamsArgs, out: &mut dyn Write) -> Result<(), CliError> {
    apply_arch(&mut config, args.arch.as_deref(), args.width)?;
    let spec = config.train.arch;
    let n = param_count(&spec)?;
    writeln!(
        out,
        "{} width {}: {n} trainable parameters, bottleneck {} channels",
        spec.kind,
        spec.width_multiplier,
        spec.bottleneck_channels()
    )?;
    Ok(())
}

pub fn cmd_synth(mut config: RunConfig, args: SynthArgs, out: &mut dyn Write) -> Result<(), CliError> {
    let s = &mut config.synth;
    s.utterances = args.utterances.unwrap_or(s.utterances);
    s.speakers = args.speakers.unwrap_or(s.speakers);
    s.utterance_len = args.utterance_len.unwrap_or(s.utterance_len);
    s.noise_len = args.noise_len.unwrap_or(s.noise_len);
    config.seed = args.seed.unwrap_or(config.seed);
    config.paths.insert("out".into(), args.out.clone());
    config.finish("synth");
    let spec = CorpusSpec {
        utterances: config.synth.utterances,
        utterance_len: config.synth.utterance_len,
        noise_len: config.synth.noise_len,
        speakers: config.synth.speakers,
        seed: config.seed,
    };
    fs::create_dir_all(&args.out)?;
    write_corpus(&args.out, &spec)?;
    write_sidecar_json(&args.out.join("corpus.run.json"), &config)?;
    writeln!(out, "wrote {} utterances and 2 noise files under {}", spec.utterances, args.out.display())?;
    Ok(())
}

fn write_sidecar_json(path: &Path, config: &RunConfig) -> Result<(), CliError> {
    fs::write(path, serde_json::to_string_pretty(config)?)?;
    Ok(())
}

/// Directory receiving rendered mixtures of `manifest_path`.
pub fn noisy_dir(manifest_path: &Path) -> PathBuf {
    manifest_path.parent().unwrap_or(Path::new(".")).join("noisy")
}

pub fn cmd_mix(mut config: RunConfig, args: MixArgs, out: &mut dyn Write) -> Result<(), CliError> {
    require_dir(&args.clean_dir, "clean dir")?;
    require_dir(&args.noise_dir, "noise dir")?;
    let list = |flag: &str, text: &str| config::parse_list(text).map_err(|e| CliError::usage(format!("--{flag}: {e}")));
    let m = &mut config.mix;
    if let Some(t) = &args.snr_list {
        m.train_snrs = list("snr-list", t)?;
    }
    if let Some(t) = &args.test_snr_list {
        m.test_snrs = list("test-snr-list", t)?;
    }
    if let Some(t) = &args.splits {
        m.split_ratios = list("splits", t)?
            .try_into()
            .map_err(|v: Vec<f64>| CliError::usage(format!("--splits needs 3 values, got {}", v.len())))?;
    }
    if args.speaker_pattern.is_some() {
        m.speaker_pattern = args.speaker_pattern;
    }
    m.lazy |= args.lazy;
    config.seed = args.seed.unwrap_or(config.seed);
    config.paths.insert("clean_dir".into(), args.clean_dir.clone());
    config.paths.insert("noise_dir".into(), args.noise_dir.clone());
    config.paths.insert("manifest".into(), args.out.clone());
    config.finish("mix");

    let mc = ManifestConfig {
        clean_dir: args.clean_dir,
        noise_dir: args.noise_dir,
        train_snrs: config.mix.train_snrs.clone(),
        test_snrs: config.mix.test_snrs.clone(),
        split_ratios: config.mix.split_ratios,
        seed: config.seed,
        speaker_pattern: config.mix.speaker_pattern.clone(),
    };
    let manifest = build_manifest(&mc)?;
    if let Some(dir) = args.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    manifest.save(&args.out)?;
    config::write_sidecar(&args.out, &config)?;
    let count = |s| manifest.split(s).count();
    writeln!(
        out,
        "manifest {}: {} train, {} dev, {} test entries",
        args.out.display(),
        count(Split::Train),
        count(Split::Dev),
        count(Split::Test)
    )?;
    if config.mix.lazy {
        return Ok(());
    }
    let dir = noisy_dir(&args.out);
    fs::create_dir_all(&dir)?;
    manifest
        .entries
        .par_iter()
        .map(|e| -> Result<(), CliError> {
            let pair = e.render(config.resample)?;
            write_wav(dir.join(format!("{}.wav", e.id())), &pair.noisy, SAMPLE_RATE, SampleFormat::Float32)?;
            Ok(())
        })
        .collect::<Result<(), _>>()?;
    config::write_sidecar(&dir, &config)?;
    writeln!(out, "rendered {} mixtures into {}", manifest.entries.len(), dir.display())?;
    Ok(())
}

fn split_images(entries: &[&ManifestEntry], front: &FrontEnd, config: &RunConfig) -> Result<Vec<ImagePair>, CliError> {
    let per: Vec<Vec<ImagePair>> = entries
        .par_iter()
        .map(|e| -> Result<Vec<ImagePair>, CliError> {
            let pair = e.render(config.resample)?;
            Ok(image_pairs(front, &pair.clean, &pair.noisy)?)
        })
        .collect::<Result<_, _>>()?;
    Ok(per.into_iter().flatten().collect())
}

pub fn cmd_train(mut config: RunConfig, args: TrainArgs, out: &mut dyn Write) -> Result<(), CliError> {
    let manifest = load_manifest(&args.manifest)?;
    apply_arch(&mut config, args.arch.as_deref(), args.width)?;
    let t = &mut config.train;
    t.epochs = args.epochs.unwrap_or(t.epochs);
    t.batch_size = args.batch.unwrap_or(t.batch_size);
    t.lr = args.lr.unwrap_or(t.lr);
    if args.steps_per_epoch.is_some() {
        t.steps_per_epoch = args.steps_per_epoch;
    }
    config.seed = args.seed.unwrap_or(config.seed);
    config.paths.insert("manifest".into(), args.manifest.clone());
    config.paths.insert("out".into(), args.out.clone());
    config.finish("train");
    config.train.validate()?;

    let spec = config.train.arch;
    writeln!(out, "{}", config.train.summary())?;
    writeln!(
        out,
        "{} width {}: {} parameters, bottleneck channels {}",
        spec.kind,
        spec.width_multiplier,
        param_count(&spec)?,
        spec.bottleneck_channels()
    )?;

    let front = FrontEnd::new(config.stft)?;
    let train_entries: Vec<&ManifestEntry> = manifest.split(Split::Train).collect();
    let dev_entries: Vec<&ManifestEntry> = manifest.split(Split::Dev).collect();
    if train_entries.is_empty() || dev_entries.is_empty() {
        return Err(CliError::usage("manifest needs train and dev entries"));
    }
    let train_set = split_images(&train_entries, &front, &config)?;
    let dev_set = split_images(&dev_entries, &front, &config)?;
    writeln!(out, "{} training images, {} dev images", train_set.len(), dev_set.len())?;

    fs::create_dir_all(&args.out)?;
    let log_path = args.out.join("train_log.jsonl");
    let mut log = BufWriter::new(File::create(&log_path)?);
    let mut log_err = None;
    let outcome = train(&config.train, &train_set, &dev_set, config.to_value(), |r| {
        let line = serde_json::to_string(r).expect("records serialize");
        if let Err(e) = writeln!(log, "{line}").and_then(|_| log.flush()) {
            log_err.get_or_insert(e);
        }
        eprintln!(
            "epoch {} train_mse {:.5} dev_mse {} ({:.0} s)",
            r.epoch,
            r.train_mse,
            r.dev_mse.map_or("-".into(), |d| format!("{d:.5}")),
            r.wall_seconds
        );
    })?;
    if let Some(e) = log_err {
        return Err(e.into());
    }
    drop(log);
    config::write_sidecar(&log_path, &config)?;
    let ckpt_path = args.out.join("best.ckpt");
    save_checkpoint(&ckpt_path, &outcome.best)?;
    config::write_sidecar(&ckpt_path, &config)?;
    writeln!(out, "best epoch {} written to {}", outcome.best.epoch, ckpt_path.display())?;
    Ok(())
}

fn enhance_file(
    model: &specunet::model::Model,
    front: &FrontEnd,
    noisy: &[f64],
    dest: &Path,
    dump: Option<&Path>,
    config: &RunConfig,
) -> Result<(), CliError> {
    let r = enhance_utterance(model, front, noisy)?;
    write_wav(dest, &r.enhanced, SAMPLE_RATE, SampleFormat::Float32)?;
    config::write_sidecar(dest, config)?;
    if let Some(dir) = dump {
        let stem = dest.file_stem().unwrap_or_default().to_string_lossy();
        for (tag, frames) in [("noisy", &r.noisy_melpow), ("enhanced", &r.enhanced_melpow)] {
            let p = dir.join(format!("{stem}.{tag}.mpow"));
            let mut w = BufWriter::new(File::create(&p)?);
            write_mpow(&mut w, frames)?;
            w.flush()?;
        }
    }
    Ok(())
}

pub fn cmd_enhance(mut config: RunConfig, args: EnhanceArgs, out: &mut dyn Write) -> Result<(), CliError> {
    require_file(&args.ckpt, "checkpoint")?;
    let ckpt = load_checkpoint(&args.ckpt)?;
    config.train.arch = *ckpt.model.spec();
    config.paths.insert("ckpt".into(), args.ckpt.clone());
    if let Some(d) = &args.dump_images {
        fs::create_dir_all(d)?;
        config.paths.insert("dump_images".into(), d.clone());
    }
    let front = FrontEnd::new(config.stft)?;
    let model = &ckpt.model;

    if let Some(input) = &args.input {
        require_file(input, "input")?;
        let dest = args.out.clone().ok_or_else(|| CliError::usage("--in requires --out"))?;
        config.paths.insert("in".into(), input.clone());
        config.paths.insert("out".into(), dest.clone());
        config.finish("enhance");
        let noisy = load_mono(input, config.resample)?;
        enhance_file(model, &front, &noisy, &dest, args.dump_images.as_deref(), &config)?;
        if let Some(d) = &args.dump_images {
            write_sidecar_json(&d.join("images.run.json"), &config)?;
        }
        writeln!(out, "enhanced {} -> {}", input.display(), dest.display())?;
        return Ok(());
    }

    let (Some(mpath), Some(out_dir)) = (&args.manifest, &args.out_dir) else {
        return Err(CliError::usage("enhance needs --in/--out or --manifest/--out-dir"));
    };
    let split: Split = args.split.parse().map_err(|e: specunet::Error| CliError::usage(e.to_string()))?;
    let manifest = load_manifest(mpath)?;
    config.paths.insert("manifest".into(), mpath.clone());
    config.paths.insert("out_dir".into(), out_dir.clone());
    config.finish("enhance");
    fs::create_dir_all(out_dir)?;
    let entries: Vec<&ManifestEntry> = manifest.split(split).collect();
    entries
        .par_iter()
        .map(|e| -> Result<(), CliError> {
            let pair = e.render(config.resample)?;
            let dest = out_dir.join(format!("{}.wav", e.id()));
            enhance_file(model, &front, &pair.noisy, &dest, args.dump_images.as_deref(), &config)
        })
        .collect::<Result<(), _>>()?;
    if let Some(d) = &args.dump_images {
        write_sidecar_json(&d.join("images.run.json"), &config)?;
    }
    writeln!(out, "enhanced {} {split} entries into {}", entries.len(), out_dir.display())?;
    Ok(())
}

pub fn cmd_evaluate(mut config: RunConfig, args: EvaluateArgs, out: &mut dyn Write) -> Result<(), CliError> {
    let manifest = load_manifest(&args.manifest)?;
    require_dir(&args.enhanced_dir, "enhanced dir")?;
    config.paths.insert("manifest".into(), args.manifest.clone());
    config.paths.insert("enhanced_dir".into(), args.enhanced_dir.clone());
    config.paths.insert("out".into(), args.out.clone());
    config.finish("evaluate");
    let opts = EvaluateOptions {
        include_noisy: args.include_noisy,
        pesq_command: args.pesq_command,
        resample_quality: config.resample,
    };
    let mut report = evaluate_manifest(&manifest, &args.enhanced_dir, &opts)?;
    report.run_config = config.to_value();
    if let Some(dir) = args.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    fs::write(&args.out, report.to_json()?)?;
    if args.table {
        write!(out, "{}", report.render_table())?;
    }
    for w in &report.warnings {
        eprintln!("warning: {w}");
    }
    let scored = report.utterances.len();
    let total = scored + report.missing.len();
    writeln!(out, "scored {scored} of {total} test entries; report {}", args.out.display())?;
    if !report.complete {
        for m in &report.missing {
            eprintln!("missing {}: {}", m.id, m.reason);
        }
        return Err(CliError::data(format!(
            "coverage {scored}/{total}: {} enhanced files missing or unusable",
            report.missing.len()
        )));
    }
    Ok(())
}
