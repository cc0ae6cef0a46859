//! `freeup` — command-line front end for the frequency-decoupled anomaly
//! detection toolkit.
//!
//! Subcommands cover the whole pipeline: synthesize or ingest a corpus,
//! inspect its spectra, train (optionally ablated), score, evaluate, emit a
//! full report, and sweep a hyperparameter. Every run writes an
//! `effective_config_<command>.toml` record under its output directory so it
//! can be reproduced exactly.
//!
//! Exit codes: 0 success, 1 usage or configuration error, 2 data/shape/IO
//! error, 3 training divergence.

use std::collections::BTreeMap;
use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use freeup_core::error::{Error, Result};
use freeup_core::eval::{
    read_rows_csv, reconstruction_report, score_density, write_rows_csv, AnomalyReport,
};
use freeup_core::ingest::{
    build_split, flow_to_sample, ingest_flow_dir, ingest_hex_csv, synth_corpus, DatasetManifest,
    Label, SynthSpec, TrafficSample,
};
use freeup_core::model::layers::Nonlinearity;
use freeup_core::spectral::{decouple_array, power_spectrum_profile};
use freeup_core::training::{score_dataset, train, Ablation, Checkpoint, TrainConfig};

const EXIT_USAGE: u8 = 1;
const EXIT_DATA: u8 = 2;
const EXIT_DIVERGENCE: u8 = 3;

/// Environment variable prepended to relative `--out` paths.
const OUT_ROOT_ENV: &str = "FREEUP_OUT_ROOT";

#[derive(Parser)]
#[command(
    name = "freeup",
    version,
    about = "Zero-positive anomaly detection on flow images via frequency decoupling"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a labeled synthetic corpus of flow images.
    Synth(SynthArgs),
    /// Convert raw flows (packet files or hex CSV) into a corpus.
    Ingest(IngestArgs),
    /// Export radial power-spectrum profiles of a corpus, per label and band.
    Spectrum(SpectrumArgs),
    /// Train a model on the normal samples of a corpus.
    Train(TrainArgs),
    /// Score a corpus with a trained checkpoint.
    Score(ScoreArgs),
    /// Compute AUROC/ACC/F1 from a scores CSV.
    Eval(EvalArgs),
    /// Full evaluation report: scores, metrics, densities, reconstructions.
    Report(ReportArgs),
    /// Train and evaluate across a list of values for one hyperparameter.
    Sweep(SweepArgs),
}

// ---------------------------------------------------------------------------
// Shared flag groups
// ---------------------------------------------------------------------------

/// Texture and noise flags of the synthetic generator (shared by `synth`
/// and `sweep`; geometry comes from a separate group so `sweep` can take it
/// from the training config instead).
#[derive(Args, Clone, Serialize)]
struct SynthTexture {
    /// Number of normal traffic classes.
    #[arg(long, default_value_t = 2)]
    classes: usize,
    /// Texture basis fields per class (1 = a single fixed texture).
    #[arg(long, default_value_t = 4)]
    textures_per_class: usize,
    /// Standard deviation of the high-frequency texture.
    #[arg(long, default_value_t = 0.18)]
    texture_amp: f64,
    /// Half-width of the uniform per-pixel noise.
    #[arg(long, default_value_t = 0.02)]
    noise_amp: f64,
    /// Gaussian cutoff shaping the synthetic texture band.
    #[arg(long, default_value_t = 5.0)]
    cutoff: f64,
    /// Fraction of the texture replaced by a fresh field in anomalies.
    #[arg(long, default_value_t = 1.0)]
    anomaly_mix: f64,
    /// Drift of the anomalous smooth template toward the next class.
    #[arg(long, default_value_t = 0.0)]
    anomaly_low_shift: f64,
}

impl SynthTexture {
    fn to_spec(&self, p: usize, h: usize, w: usize) -> SynthSpec {
        SynthSpec {
            p,
            h,
            w,
            n_classes: self.classes,
            textures_per_class: self.textures_per_class,
            texture_amp: self.texture_amp,
            noise_amp: self.noise_amp,
            cutoff: self.cutoff,
            anomaly_texture_mix: self.anomaly_mix,
            anomaly_low_shift: self.anomaly_low_shift,
        }
    }
}

/// Optional training-config overrides; flags mirror `TrainConfig` field
/// names and take precedence over `--config` file values.
#[derive(Args, Clone)]
struct TrainOverrides {
    #[arg(long)]
    learning_rate: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    max_epochs: Option<usize>,
    #[arg(long)]
    lambda_nll: Option<f64>,
    #[arg(long)]
    lambda_pen: Option<f64>,
    #[arg(long)]
    lambda_f: Option<f64>,
    /// Packet planes per flow image (also sets the autoencoder input).
    #[arg(long)]
    p: Option<usize>,
    /// Gaussian mask cutoff in frequency bins.
    #[arg(long)]
    d: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    patience: Option<usize>,
    #[arg(long)]
    n_runs: Option<usize>,
    #[arg(long)]
    adam_beta1: Option<f64>,
    #[arg(long)]
    adam_beta2: Option<f64>,
    #[arg(long)]
    adam_eps: Option<f64>,
    /// Image height the model expects.
    #[arg(long)]
    height: Option<usize>,
    /// Image width the model expects.
    #[arg(long)]
    width: Option<usize>,
    /// Encoder channel widths, comma-separated (e.g. 16 or 8,16).
    #[arg(long)]
    widths: Option<String>,
    #[arg(long)]
    latent: Option<usize>,
    /// Enable or disable the attention blocks.
    #[arg(long)]
    attention: Option<bool>,
    /// Activation: relu or leaky_relu.
    #[arg(long)]
    nonlinearity: Option<String>,
}

impl TrainOverrides {
    fn apply(&self, cfg: &mut TrainConfig) -> Result<()> {
        if let Some(v) = self.learning_rate {
            cfg.learning_rate = v;
        }
        if let Some(v) = self.batch_size {
            cfg.batch_size = v;
        }
        if let Some(v) = self.max_epochs {
            cfg.max_epochs = v;
        }
        if let Some(v) = self.lambda_nll {
            cfg.lambda_nll = v;
        }
        if let Some(v) = self.lambda_pen {
            cfg.lambda_pen = v;
        }
        if let Some(v) = self.lambda_f {
            cfg.lambda_f = v;
        }
        if let Some(v) = self.p {
            cfg.p = v;
            cfg.ae.in_planes = v;
        }
        if let Some(v) = self.d {
            cfg.d = v;
        }
        if let Some(v) = self.seed {
            cfg.seed = v;
        }
        if let Some(v) = self.patience {
            cfg.patience = v;
        }
        if let Some(v) = self.n_runs {
            cfg.n_runs = v;
        }
        if let Some(v) = self.adam_beta1 {
            cfg.adam_beta1 = v;
        }
        if let Some(v) = self.adam_beta2 {
            cfg.adam_beta2 = v;
        }
        if let Some(v) = self.adam_eps {
            cfg.adam_eps = v;
        }
        if let Some(v) = self.height {
            cfg.ae.h = v;
        }
        if let Some(v) = self.width {
            cfg.ae.w = v;
        }
        if let Some(text) = &self.widths {
            cfg.ae.widths = parse_usize_list(text)?;
        }
        if let Some(v) = self.latent {
            cfg.ae.latent = v;
        }
        if let Some(v) = self.attention {
            cfg.ae.attention = v;
        }
        if let Some(text) = &self.nonlinearity {
            cfg.ae.nonlinearity = match text.as_str() {
                "relu" => Nonlinearity::Relu,
                "leaky_relu" => Nonlinearity::LeakyRelu,
                other => {
                    return Err(Error::Config(format!(
                        "unknown nonlinearity '{other}' (expected relu or leaky_relu)"
                    )))
                }
            };
        }
        Ok(())
    }
}

/// Resolves the effective training config: file values (or defaults),
/// then flag overrides, then validation.
fn resolve_config(config: Option<&Path>, overrides: &TrainOverrides) -> Result<TrainConfig> {
    let mut cfg = match config {
        Some(path) => {
            let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            toml::from_str::<TrainConfig>(&text)
                .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?
        }
        None => TrainConfig::default(),
    };
    overrides.apply(&mut cfg)?;
    cfg.validate()?;
    Ok(cfg)
}

fn parse_usize_list(text: &str) -> Result<Vec<usize>> {
    text.split(',')
        .map(|s| {
            s.trim()
                .parse::<usize>()
                .map_err(|_| Error::Config(format!("invalid integer '{s}' in list")))
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Subcommand argument structs
// ---------------------------------------------------------------------------

#[derive(Args)]
struct SynthArgs {
    /// Number of normal samples.
    #[arg(long)]
    normal: usize,
    /// Number of anomalous samples.
    #[arg(long, default_value_t = 0)]
    anomalous: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output directory for the corpus.
    #[arg(long)]
    out: PathBuf,
    /// Packet planes per flow image.
    #[arg(long, default_value_t = 8)]
    p: usize,
    /// Image height in pixels.
    #[arg(long, default_value_t = 32)]
    height: usize,
    /// Image width in pixels.
    #[arg(long, default_value_t = 32)]
    width: usize,
    #[command(flatten)]
    texture: SynthTexture,
}

#[derive(Args)]
struct IngestArgs {
    /// Directory of flows: <label>/<flow_id>/<packet files>.
    #[arg(long, required_unless_present = "hex_csv", conflicts_with = "hex_csv")]
    flows: Option<PathBuf>,
    /// CSV of flows: header flow_id,label,packets; packets are
    /// space-separated hex-encoded bodies.
    #[arg(long)]
    hex_csv: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    /// Packet planes per flow image.
    #[arg(long, default_value_t = 8)]
    p: usize,
    #[arg(long, default_value_t = 32)]
    height: usize,
    #[arg(long, default_value_t = 32)]
    width: usize,
}

#[derive(Args)]
struct SpectrumArgs {
    /// Corpus directory (must contain a manifest).
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Gaussian cutoff used for the band decomposition.
    #[arg(long, default_value_t = 5.0)]
    cutoff: f64,
    /// Radial bins (default: half the smaller image dimension).
    #[arg(long)]
    bins: Option<usize>,
    /// Maximum samples per label to average over.
    #[arg(long, default_value_t = 64)]
    limit: usize,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// TOML file with `TrainConfig` fields; flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Model variant: full, no_low_branch, no_high_branch, no_decouple,
    /// no_freq_loss, static_fusion_product, static_fusion_sum.
    #[arg(long, default_value = "full")]
    ablation: String,
    /// Normal samples used for training (default: all in the corpus).
    #[arg(long)]
    train_normals: Option<usize>,
    #[command(flatten)]
    overrides: TrainOverrides,
}

#[derive(Args)]
struct ScoreArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// File of source ids (one per line) to skip, e.g. the training split.
    #[arg(long)]
    exclude_ids: Option<PathBuf>,
    /// Also evaluate the scores and write a summary.
    #[arg(long)]
    eval: bool,
    /// Histogram bins for the density table.
    #[arg(long, default_value_t = 20)]
    bins: usize,
}

#[derive(Args)]
struct EvalArgs {
    /// Scores CSV as written by `score`.
    #[arg(long)]
    scores: PathBuf,
    /// Output directory (default: alongside the scores file).
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, default_value_t = 20)]
    bins: usize,
}

#[derive(Args)]
struct ReportArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    exclude_ids: Option<PathBuf>,
    /// Samples rendered in the reconstruction gallery (max 64).
    #[arg(long, default_value_t = 16)]
    limit: usize,
    #[arg(long, default_value_t = 20)]
    bins: usize,
}

#[derive(Args)]
struct SweepArgs {
    /// Hyperparameter to sweep: p (planes) or d (mask cutoff).
    #[arg(long, value_parser = ["p", "d"])]
    param: String,
    /// Comma-separated values, at least two (e.g. 1,3,5,10,20).
    #[arg(long)]
    values: String,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
    /// Run the sweep values on parallel threads.
    #[arg(long)]
    parallel: bool,
    /// Independent training runs per value (default: 1); seeds increment.
    #[arg(long)]
    runs: Option<usize>,
    /// Normal samples generated per value.
    #[arg(long, default_value_t = 300)]
    normal: usize,
    /// Anomalous samples generated per value.
    #[arg(long, default_value_t = 100)]
    anomalous: usize,
    /// Normal samples used for training; the rest are test normals.
    #[arg(long, default_value_t = 200)]
    train_normals: usize,
    #[command(flatten)]
    texture: SynthTexture,
    #[command(flatten)]
    overrides: TrainOverrides,
}

// ---------------------------------------------------------------------------
// Entry point and plumbing
// ---------------------------------------------------------------------------

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            let _ = e.print();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => ExitCode::SUCCESS,
                _ => ExitCode::from(EXIT_USAGE),
            };
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            let mut source = std::error::Error::source(&e);
            while let Some(cause) = source {
                eprintln!("  caused by: {cause}");
                source = cause.source();
            }
            ExitCode::from(exit_class(&e))
        }
    }
}

fn exit_class(e: &Error) -> u8 {
    match e {
        Error::Config(_) => EXIT_USAGE,
        Error::Divergence(_) => EXIT_DIVERGENCE,
        _ => EXIT_DATA,
    }
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::Synth(a) => run_synth(a),
        Command::Ingest(a) => run_ingest(a),
        Command::Spectrum(a) => run_spectrum(a),
        Command::Train(a) => run_train(a),
        Command::Score(a) => run_score(a),
        Command::Eval(a) => run_eval(a),
        Command::Report(a) => run_report(a),
        Command::Sweep(a) => run_sweep(a),
    }
}

/// Applies the output-root environment override to a relative `--out` path;
/// absolute paths are returned unchanged.
fn resolve_out(out: &Path) -> PathBuf {
    match std::env::var_os(OUT_ROOT_ENV) {
        Some(root) if !root.is_empty() => PathBuf::from(root).join(out),
        _ => out.to_path_buf(),
    }
}

fn ensure_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_record<T: Serialize>(dir: &Path, command: &str, record: &T) -> Result<()> {
    let text = toml::to_string_pretty(record)
        .map_err(|e| Error::Config(format!("cannot serialize effective config: {e}")))?;
    let path = dir.join(format!("effective_config_{command}.toml"));
    fs::write(&path, text).map_err(|e| Error::io(path, e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn load_exclusions(path: Option<&Path>) -> Result<HashSet<String>> {
    let Some(path) = path else {
        return Ok(HashSet::new());
    };
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .map(String::from)
        .collect())
}

fn load_samples(data: &Path, exclude: &HashSet<String>) -> Result<Vec<TrafficSample>> {
    let manifest = DatasetManifest::load(data)?;
    let mut samples = Vec::new();
    for record in &manifest.records {
        if exclude.contains(&record.source_id) {
            continue;
        }
        samples.push(manifest.load_record(record)?);
    }
    if samples.is_empty() {
        return Err(Error::Data(format!(
            "no samples left in {} after exclusions",
            data.display()
        )));
    }
    Ok(samples)
}

fn print_metrics(report: &AnomalyReport) {
    let m = &report.metrics;
    println!("auc {:.6}", m.auc);
    println!("acc {:.6}", m.acc);
    println!("f1 {:.6}", m.f1);
    println!("threshold {:.6}", m.threshold);
}

// ---------------------------------------------------------------------------
// synth / ingest / spectrum
// ---------------------------------------------------------------------------

#[derive(Serialize)]
struct SynthRecord<'a> {
    command: &'a str,
    normal: usize,
    anomalous: usize,
    seed: u64,
    out: &'a Path,
    spec: &'a SynthSpec,
}

fn run_synth(a: SynthArgs) -> Result<()> {
    let out = resolve_out(&a.out);
    let spec = a.texture.to_spec(a.p, a.height, a.width);
    ensure_dir(&out)?;
    let manifest = synth_corpus(&out, a.normal, a.anomalous, a.seed, &spec)?;
    write_record(
        &out,
        "synth",
        &SynthRecord {
            command: "synth",
            normal: a.normal,
            anomalous: a.anomalous,
            seed: a.seed,
            out: &out,
            spec: &spec,
        },
    )?;
    println!(
        "wrote {} normal + {} anomalous samples ({}x{}x{}) to {}",
        manifest.count(Label::Normal),
        manifest.count(Label::Anomalous),
        spec.p,
        spec.h,
        spec.w,
        out.display()
    );
    Ok(())
}

#[derive(Serialize)]
struct IngestRecord<'a> {
    command: &'a str,
    source: String,
    out: &'a Path,
    p: usize,
    height: usize,
    width: usize,
}

fn run_ingest(a: IngestArgs) -> Result<()> {
    let out = resolve_out(&a.out);
    let (flows, source) = match (&a.flows, &a.hex_csv) {
        (Some(dir), None) => (ingest_flow_dir(dir)?, dir.display().to_string()),
        (None, Some(file)) => (ingest_hex_csv(file)?, file.display().to_string()),
        _ => unreachable!("clap enforces exactly one source"),
    };
    if flows.is_empty() {
        return Err(Error::Data(format!("no flows found in {source}")));
    }
    let samples: Vec<TrafficSample> = flows
        .iter()
        .map(|f| flow_to_sample(f, a.p, a.height, a.width))
        .collect();
    ensure_dir(&out)?;
    let manifest = freeup_core::ingest::write_corpus(&out, &samples)?;
    write_record(
        &out,
        "ingest",
        &IngestRecord {
            command: "ingest",
            source,
            out: &out,
            p: a.p,
            height: a.height,
            width: a.width,
        },
    )?;
    let counts = manifest.counts();
    let summary: Vec<String> = counts
        .iter()
        .map(|(label, n)| format!("{n} {}", label.as_str()))
        .collect();
    println!(
        "ingested {} flows ({}) into {}",
        flows.len(),
        summary.join(", "),
        out.display()
    );
    Ok(())
}

#[derive(Serialize)]
struct SpectrumRecord<'a> {
    command: &'a str,
    data: &'a Path,
    out: &'a Path,
    cutoff: f64,
    bins: usize,
    limit: usize,
}

fn run_spectrum(a: SpectrumArgs) -> Result<()> {
    let out = resolve_out(&a.out);
    let manifest = DatasetManifest::load(&a.data)?;
    let shape = manifest.shape;
    let n_bins = a.bins.unwrap_or_else(|| (shape.h.min(shape.w) / 2).max(2));
    ensure_dir(&out)?;

    let mut by_label: BTreeMap<Label, Vec<_>> = BTreeMap::new();
    for record in &manifest.records {
        let bucket = by_label.entry(record.label).or_default();
        if bucket.len() >= a.limit {
            continue;
        }
        bucket.push(manifest.load_record(record)?.to_f64());
    }

    let mut written = Vec::new();
    for (label, xs) in &by_label {
        let mut lows = Vec::with_capacity(xs.len());
        let mut highs = Vec::with_capacity(xs.len());
        for x in xs {
            let bands = decouple_array(x, a.cutoff)?;
            lows.push(bands.low);
            highs.push(bands.high);
        }
        for (suffix, set) in [("", xs), ("_low", &lows), ("_high", &highs)] {
            let profile = power_spectrum_profile(set, n_bins)?;
            let path = out.join(format!("spectrum_{}{suffix}.csv", label.as_str()));
            profile.write_csv(&path)?;
            written.push(path);
        }
        println!("{}: averaged {} samples", label.as_str(), xs.len());
    }
    write_record(
        &out,
        "spectrum",
        &SpectrumRecord {
            command: "spectrum",
            data: &a.data,
            out: &out,
            cutoff: a.cutoff,
            bins: n_bins,
            limit: a.limit,
        },
    )?;
    for path in &written {
        println!("wrote {}", path.display());
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// train
// ---------------------------------------------------------------------------

#[derive(Serialize)]
struct TrainRecord<'a> {
    command: &'a str,
    data: &'a Path,
    out: &'a Path,
    ablation: &'a str,
    train_normals: usize,
    config_hash: String,
    config: &'a TrainConfig,
}

fn run_train(a: TrainArgs) -> Result<()> {
    let out = resolve_out(&a.out);
    let ablation = Ablation::parse(&a.ablation)?;
    let cfg = resolve_config(a.config.as_deref(), &a.overrides)?;

    let manifest = DatasetManifest::load(&a.data)?;
    let n_train = a.train_normals.unwrap_or_else(|| manifest.count(Label::Normal));
    let (train_recs, test_recs) = build_split(&manifest, n_train, cfg.seed)?;
    let train_set: Vec<TrafficSample> = train_recs
        .iter()
        .map(|r| manifest.load_record(r))
        .collect::<Result<_>>()?;

    let outcome = train(&train_set, &cfg, ablation)?;

    ensure_dir(&out)?;
    let ckpt_path = out.join(format!("checkpoint_{}.bin", ablation.tag()));
    outcome.checkpoint.save(&ckpt_path)?;

    let mut log = String::from("epoch,mean_loss\n");
    for (i, loss) in outcome.state.loss_history.iter().enumerate() {
        log.push_str(&format!("{},{}\n", i + 1, loss));
    }
    write_text(&out.join("training_log.csv"), &log)?;

    let ids = |recs: &[freeup_core::ingest::ManifestRecord]| {
        recs.iter()
            .map(|r| r.source_id.as_str())
            .collect::<Vec<_>>()
            .join("\n")
            + "\n"
    };
    write_text(&out.join("train_ids.txt"), &ids(&train_recs))?;
    write_text(&out.join("test_ids.txt"), &ids(&test_recs))?;

    write_record(
        &out,
        "train",
        &TrainRecord {
            command: "train",
            data: &a.data,
            out: &out,
            ablation: ablation.tag(),
            train_normals: n_train,
            config_hash: cfg.config_hash(),
            config: &cfg,
        },
    )?;
    println!(
        "trained {} on {} normals: epochs {}, best loss {:.6}",
        ablation.tag(),
        train_set.len(),
        outcome.state.epoch,
        outcome.state.best_loss
    );
    println!("checkpoint {}", ckpt_path.display());
    Ok(())
}

// ---------------------------------------------------------------------------
// score / eval / report
// ---------------------------------------------------------------------------

#[derive(Serialize)]
struct ScoreRecord<'a> {
    command: &'a str,
    checkpoint: &'a Path,
    data: &'a Path,
    out: &'a Path,
    excluded: usize,
    eval: bool,
    config_hash: String,
}

fn run_score(a: ScoreArgs) -> Result<()> {
    let out = resolve_out(&a.out);
    let ckpt = Checkpoint::load(&a.checkpoint)?;
    let exclude = load_exclusions(a.exclude_ids.as_deref())?;
    let samples = load_samples(&a.data, &exclude)?;
    let rows = score_dataset(&ckpt, &samples)?;

    ensure_dir(&out)?;
    write_rows_csv(&rows, &out.join("scores.csv"))?;
    println!("scored {} samples -> {}", rows.len(), out.join("scores.csv").display());

    if a.eval {
        let report = AnomalyReport::new(rows, ckpt.cfg.seed, ckpt.cfg.config_hash())?;
        report.write_summary(&out.join("summary.toml"))?;
        score_density(&report, a.bins)?.write_csv(&out.join("density.csv"))?;
        print_metrics(&report);
    }
    write_record(
        &out,
        "score",
        &ScoreRecord {
            command: "score",
            checkpoint: &a.checkpoint,
            data: &a.data,
            out: &out,
            excluded: exclude.len(),
            eval: a.eval,
            config_hash: ckpt.cfg.config_hash(),
        },
    )
}

#[derive(Serialize)]
struct EvalRecord<'a> {
    command: &'a str,
    scores: &'a Path,
    out: &'a Path,
    bins: usize,
}

fn run_eval(a: EvalArgs) -> Result<()> {
    let out = match &a.out {
        Some(dir) => resolve_out(dir),
        None => a
            .scores
            .parent()
            .filter(|p| !p.as_os_str().is_empty())
            .map(Path::to_path_buf)
            .unwrap_or_else(|| PathBuf::from(".")),
    };
    let rows = read_rows_csv(&a.scores)?;
    let report = AnomalyReport::new(rows, 0, "scores-csv")?;
    ensure_dir(&out)?;
    report.write_summary(&out.join("summary.toml"))?;
    score_density(&report, a.bins)?.write_csv(&out.join("density.csv"))?;
    write_record(
        &out,
        "eval",
        &EvalRecord {
            command: "eval",
            scores: &a.scores,
            out: &out,
            bins: a.bins,
        },
    )?;
    print_metrics(&report);
    Ok(())
}

#[derive(Serialize)]
struct ReportRecord<'a> {
    command: &'a str,
    checkpoint: &'a Path,
    data: &'a Path,
    out: &'a Path,
    limit: usize,
    bins: usize,
    config_hash: String,
}

fn run_report(a: ReportArgs) -> Result<()> {
    let out = resolve_out(&a.out);
    let ckpt = Checkpoint::load(&a.checkpoint)?;
    let exclude = load_exclusions(a.exclude_ids.as_deref())?;
    let samples = load_samples(&a.data, &exclude)?;

    ensure_dir(&out)?;
    let rows = score_dataset(&ckpt, &samples)?;
    write_rows_csv(&rows, &out.join("scores.csv"))?;
    let report = AnomalyReport::new(rows, ckpt.cfg.seed, ckpt.cfg.config_hash())?;
    report.write_summary(&out.join("summary.toml"))?;
    score_density(&report, a.bins)?.write_csv(&out.join("density.csv"))?;

    let n_gallery = a.limit.min(64).min(samples.len());
    let n_written = reconstruction_report(&ckpt, &samples[..n_gallery], &out.join("reconstructions"))?;

    write_record(
        &out,
        "report",
        &ReportRecord {
            command: "report",
            checkpoint: &a.checkpoint,
            data: &a.data,
            out: &out,
            limit: a.limit,
            bins: a.bins,
            config_hash: ckpt.cfg.config_hash(),
        },
    )?;
    print_metrics(&report);
    println!(
        "report in {} ({} gallery samples, {} files)",
        out.display(),
        n_gallery,
        n_written
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// sweep
// ---------------------------------------------------------------------------

#[derive(Clone, Serialize)]
struct SweepRow {
    value: f64,
    status: String,
    runs: usize,
    auc_mean: f64,
    auc_std: f64,
    acc_mean: f64,
    f1_mean: f64,
}

#[derive(Serialize)]
struct SweepRecord<'a> {
    command: &'a str,
    param: &'a str,
    values: Vec<f64>,
    out: &'a Path,
    runs: usize,
    parallel: bool,
    normal: usize,
    anomalous: usize,
    train_normals: usize,
    seed: u64,
    spec: SynthSpec,
    config: &'a TrainConfig,
}

fn run_sweep(a: SweepArgs) -> Result<()> {
    let out = resolve_out(&a.out);
    let base_cfg = resolve_config(a.config.as_deref(), &a.overrides)?;
    let base_spec = a
        .texture
        .to_spec(base_cfg.p, base_cfg.ae.h, base_cfg.ae.w);
    let runs = a.runs.unwrap_or(1).max(1);

    let values: Vec<f64> = a
        .values
        .split(',')
        .map(|s| {
            s.trim()
                .parse::<f64>()
                .map_err(|_| Error::Config(format!("invalid sweep value '{s}'")))
        })
        .collect::<Result<_>>()?;
    if values.len() < 2 {
        return Err(Error::Config("sweep needs at least two values".into()));
    }
    if a.param == "p" {
        for &v in &values {
            if v.fract() != 0.0 || v < 1.0 {
                return Err(Error::Config(format!(
                    "p values must be positive integers, got {v}"
                )));
            }
        }
    }
    if a.train_normals >= a.normal {
        return Err(Error::Config(format!(
            "train_normals ({}) must leave test normals (< normal = {})",
            a.train_normals, a.normal
        )));
    }
    if a.anomalous == 0 {
        return Err(Error::Config(
            "sweep needs anomalous samples to evaluate AUC".into(),
        ));
    }
    ensure_dir(&out)?;

    let run_value = |value: f64| -> Result<SweepRow> {
        let run_dir = out.join(format!("{}_{}", a.param, value));
        ensure_dir(&run_dir)?;
        let mut cfg = base_cfg.clone();
        let mut spec = base_spec.clone();
        match a.param.as_str() {
            "p" => {
                cfg.p = value as usize;
                cfg.ae.in_planes = value as usize;
                spec.p = value as usize;
            }
            "d" => cfg.d = value,
            _ => unreachable!("clap restricts --param"),
        }
        cfg.validate()?;

        let data_dir = run_dir.join("data");
        let manifest = synth_corpus(&data_dir, a.normal, a.anomalous, cfg.seed, &spec)?;
        let (train_recs, test_recs) = build_split(&manifest, a.train_normals, cfg.seed)?;
        let train_set: Vec<TrafficSample> = train_recs
            .iter()
            .map(|r| manifest.load_record(r))
            .collect::<Result<_>>()?;
        let test_set: Vec<TrafficSample> = test_recs
            .iter()
            .map(|r| manifest.load_record(r))
            .collect::<Result<_>>()?;

        let cfg_text = toml::to_string_pretty(&cfg)
            .map_err(|e| Error::Config(format!("cannot serialize config: {e}")))?;
        write_text(&run_dir.join("config.toml"), &cfg_text)?;

        let mut aucs = Vec::with_capacity(runs);
        let mut accs = Vec::with_capacity(runs);
        let mut f1s = Vec::with_capacity(runs);
        for run_i in 0..runs {
            let mut run_cfg = cfg.clone();
            run_cfg.seed = cfg.seed + run_i as u64;
            let outcome = train(&train_set, &run_cfg, Ablation::None)?;
            let rows = score_dataset(&outcome.checkpoint, &test_set)?;
            let report = AnomalyReport::new(rows, run_cfg.seed, run_cfg.config_hash())?;
            aucs.push(report.metrics.auc);
            accs.push(report.metrics.acc);
            f1s.push(report.metrics.f1);
            if run_i == 0 {
                outcome
                    .checkpoint
                    .save(&run_dir.join("checkpoint_full.bin"))?;
                report.write_csv(&run_dir.join("scores.csv"))?;
                report.write_summary(&run_dir.join("summary.toml"))?;
            }
        }
        let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
        let std = |v: &[f64]| {
            let m = mean(v);
            (v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / v.len() as f64).sqrt()
        };
        Ok(SweepRow {
            value,
            status: "ok".into(),
            runs,
            auc_mean: mean(&aucs),
            auc_std: std(&aucs),
            acc_mean: mean(&accs),
            f1_mean: mean(&f1s),
        })
    };

    let results: Vec<std::result::Result<SweepRow, Error>> = if a.parallel {
        std::thread::scope(|scope| {
            let handles: Vec<_> = values
                .iter()
                .map(|&v| scope.spawn(move || run_value(v)))
                .collect();
            handles
                .into_iter()
                .map(|h| h.join().expect("sweep worker panicked"))
                .collect()
        })
    } else {
        values.iter().map(|&v| run_value(v)).collect()
    };

    let mut rows = Vec::with_capacity(values.len());
    let mut first_error = None;
    for (value, result) in values.iter().zip(results) {
        match result {
            Ok(row) => rows.push(row),
            Err(e) => {
                if first_error.is_none() {
                    first_error = Some(e.to_string().replace(',', ";"));
                }
                rows.push(SweepRow {
                    value: *value,
                    status: format!("error: {}", e.to_string().replace(',', ";")),
                    runs: 0,
                    auc_mean: f64::NAN,
                    auc_std: f64::NAN,
                    acc_mean: f64::NAN,
                    f1_mean: f64::NAN,
                });
            }
        }
    }

    let mut csv = String::from("param,value,status,runs,auc_mean,auc_std,acc_mean,f1_mean\n");
    println!("{:>8} {:>10} {:>10} {:>10} {:>10}  status", a.param, "auc", "auc_std", "acc", "f1");
    for row in &rows {
        csv.push_str(&format!(
            "{},{},{},{},{},{},{},{}\n",
            a.param,
            row.value,
            row.status,
            row.runs,
            row.auc_mean,
            row.auc_std,
            row.acc_mean,
            row.f1_mean
        ));
        println!(
            "{:>8} {:>10.4} {:>10.4} {:>10.4} {:>10.4}  {}",
            row.value, row.auc_mean, row.auc_std, row.acc_mean, row.f1_mean, row.status
        );
    }
    write_text(&out.join("sweep.csv"), &csv)?;

    write_record(
        &out,
        "sweep",
        &SweepRecord {
            command: "sweep",
            param: &a.param,
            values: values.clone(),
            out: &out,
            runs,
            parallel: a.parallel,
            normal: a.normal,
            anomalous: a.anomalous,
            train_normals: a.train_normals,
            seed: base_cfg.seed,
            spec: base_spec,
            config: &base_cfg,
        },
    )?;

    let any_ok = rows.iter().any(|r| r.status == "ok");
    match (any_ok, first_error) {
        (false, Some(msg)) => Err(Error::Data(format!("all sweep values failed: {msg}"))),
        _ => Ok(()),
    }
}
