//! Command-line front end: `synth`, `featurize`, `train`, `eval`, `predict`,
//! `pn-ratio`, `bench` and `ablate`.
//!
//! Exit codes: 0 success, 1 usage error, 2 data error, 3 numeric failure,
//! 4 checkpoint or config mismatch.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fmt::Write as _;
use std::fs::File;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::audio::{labels_for, load_canonical, read_manifest, split_time_units, ManifestRecord};
use crate::features::{tfe_forward, FeatureSources};
use crate::metrics::{audio_metrics, aggregate, render_table, threshold_predictions, EvalReport, DEFAULT_TAU};
use crate::model::{Model, ModelConfig, ModelKind};
use crate::scope::{default_sigma_grid, estimate_sigma, mean_pn_ratio};
use crate::synth::{generate_dataset, SynthSpec};
use crate::tensor::write_checkpoint;
use crate::train::{
    ablation_csv, ablation_text, benchmark_throughput, flops_estimate, load_examples, run_ablation, split_records, train,
    AblationGrid, TrainConfig,
};
use crate::Error;

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DATA: i32 = 2;
pub const EXIT_NUMERIC: i32 = 3;
pub const EXIT_MISMATCH: i32 = 4;

#[derive(Debug, Parser)]
#[command(name = "beatx", version, about = "Audio beat matching: train, evaluate and apply transition predictors")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a labeled synthetic click-track dataset.
    Synth(SynthArgs),
    /// Write per-unit feature rows of one WAV file as a checkpoint container.
    Featurize(FeaturizeArgs),
    /// Train a model on a manifest.
    Train(TrainArgs),
    /// Score predictions against a manifest.
    Eval(EvalArgs),
    /// Predict transition points for a WAV file or every audio of a manifest.
    Predict(PredictArgs),
    /// Mean PN ratio over the sigma grid for a manifest.
    PnRatio(PnRatioArgs),
    /// Throughput and cost of a model at several depths and lengths.
    Bench(BenchArgs),
    /// Train and evaluate one model per grid point.
    Ablate(AblateArgs),
}

#[derive(Debug, Args)]
struct SynthArgs {
    /// Output directory for WAV files and manifest.jsonl.
    #[arg(long)]
    out: PathBuf,
    /// Number of audios.
    #[arg(long = "n")]
    n_audios: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    min_duration: Option<f64>,
    #[arg(long)]
    max_duration: Option<f64>,
    #[arg(long)]
    min_bpm: Option<f64>,
    #[arg(long)]
    max_bpm: Option<f64>,
    #[arg(long)]
    beats_per_bar: Option<usize>,
    #[arg(long)]
    subdivisions: Option<usize>,
    #[arg(long)]
    cut_fraction: Option<f64>,
    #[arg(long)]
    max_cuts: Option<usize>,
    #[arg(long)]
    noise_level: Option<f32>,
    #[arg(long)]
    min_click_gain: Option<f32>,
    #[arg(long)]
    max_click_gain: Option<f32>,
    #[arg(long)]
    accent: Option<f32>,
    /// Time of the first downbeat in seconds.
    #[arg(long)]
    beat_offset: Option<f64>,
    #[arg(long)]
    annotation_jitter: Option<f64>,
    #[arg(long)]
    sample_rate: Option<u32>,
    /// JSON file with a full generator spec; flags override its fields.
    #[arg(long)]
    spec: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct ModelSource {
    /// Trained checkpoint; its `.json` sidecar supplies the config.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Fresh model kind when no checkpoint is given.
    #[arg(long, default_value = "beatx")]
    model: String,
    /// Initialization seed of a fresh model.
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

impl ModelSource {
    fn load(&self) -> anyhow::Result<Model> {
        match &self.checkpoint {
            Some(p) => Ok(Model::load(p)?),
            None => Ok(Model::build(ModelConfig::desk(ModelKind::parse(&self.model)?).with_seed(self.seed))?),
        }
    }
}

#[derive(Debug, Args)]
struct FeaturizeArgs {
    #[arg(long)]
    wav: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    source: ModelSource,
}

#[derive(Debug, Args)]
struct TrainOverrides {
    /// JSON training config; flags override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    model: Option<String>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f32>,
    #[arg(long)]
    halving_period: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    sigma: Option<f64>,
    /// Label-scope weighting: on or off.
    #[arg(long)]
    scope: Option<String>,
    /// Comma-separated subset of mel, energy, raw.
    #[arg(long)]
    sources: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    val_fraction: Option<f64>,
    #[arg(long)]
    tau: Option<f32>,
}

impl TrainOverrides {
    fn resolve(&self) -> anyhow::Result<TrainConfig> {
        let mut cfg = match &self.config {
            Some(p) => serde_json::from_str::<TrainConfig>(&read_text(p)?)
                .with_context(|| format!("parsing {}", p.display()))
                .map_err(|e| Error::InvalidConfig(format!("{e:#}")))?,
            None => TrainConfig::default(),
        };
        if let Some(m) = &self.model {
            let seed = cfg.model.seed;
            cfg.model = ModelConfig::desk(ModelKind::parse(m)?).with_seed(seed);
        }
        if let Some(v) = self.seed {
            cfg.seed = v;
            cfg.model.seed = v;
        }
        if let Some(v) = self.epochs {
            cfg.epochs = v;
        }
        if let Some(v) = self.lr {
            cfg.lr0 = v;
        }
        if let Some(v) = self.halving_period {
            cfg.halving_period = v;
        }
        if let Some(v) = self.batch_size {
            cfg.batch_size = v;
        }
        if let Some(v) = self.sigma {
            cfg.sigma_hat = v;
        }
        if let Some(v) = &self.scope {
            cfg.use_scope = parse_switch(v)?;
        }
        if let Some(v) = &self.sources {
            cfg.model.sources = FeatureSources::parse(v)?;
        }
        if let Some(v) = self.val_fraction {
            cfg.val_fraction = v;
        }
        if let Some(v) = self.tau {
            cfg.tau = v;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[arg(long)]
    manifest: PathBuf,
    /// Checkpoint path; the config is written next to it as `<out>.json`.
    #[arg(long)]
    out: PathBuf,
    /// JSON-lines history path (default `<out>.history.jsonl`).
    #[arg(long)]
    history: Option<PathBuf>,
    #[command(flatten)]
    overrides: TrainOverrides,
}

#[derive(Debug, Args)]
struct EvalArgs {
    #[arg(long)]
    manifest: PathBuf,
    /// JSON-lines file of `{"id", "probs"}` records.
    #[arg(long, conflicts_with = "checkpoint")]
    predictions: Option<PathBuf>,
    /// Evaluate a checkpoint directly on every manifest audio.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long, default_value_t = DEFAULT_TAU)]
    tau: f32,
    /// Unit duration for prediction records that omit it.
    #[arg(long, default_value_t = crate::audio::DEFAULT_UNIT_SECONDS)]
    unit_seconds: f64,
    /// Write the report as JSON here.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct PredictArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long, required_unless_present = "manifest", conflicts_with = "manifest")]
    wav: Option<PathBuf>,
    /// Predict every audio of this manifest, one record per line.
    #[arg(long)]
    manifest: Option<PathBuf>,
    #[arg(long, default_value_t = DEFAULT_TAU)]
    tau: f32,
    /// Output file (stdout when absent).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct PnRatioArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long, default_value_t = crate::audio::DEFAULT_UNIT_SECONDS)]
    unit_seconds: f64,
}

#[derive(Debug, Args)]
struct BenchArgs {
    #[arg(long, default_value = "beatx")]
    model: String,
    /// Global attention depths, comma-separated.
    #[arg(long, default_value = "2,4,8")]
    depth: String,
    /// Sequence lengths in units, comma-separated.
    #[arg(long, default_value = "256,512")]
    n: String,
    #[arg(long, default_value_t = 5)]
    repeats: usize,
    /// Write the rows as JSON here.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct AblateArgs {
    #[arg(long)]
    manifest: PathBuf,
    /// JSON grid file; axis flags are merged into it.
    #[arg(long)]
    grid: Option<PathBuf>,
    /// Scope settings, e.g. `off,on`.
    #[arg(long = "scope-axis")]
    scope_axis: Option<String>,
    /// Feature subsets separated by `;`, e.g. `mel;energy;mel,energy`.
    #[arg(long = "sources-axis")]
    sources_axis: Option<String>,
    #[arg(long = "k-axis")]
    k_axis: Option<String>,
    #[arg(long = "proj-axis")]
    proj_axis: Option<String>,
    #[arg(long = "heads-axis")]
    heads_axis: Option<String>,
    #[arg(long = "depth-axis")]
    depth_axis: Option<String>,
    /// Write the table as CSV here.
    #[arg(long)]
    csv: Option<PathBuf>,
    #[command(flatten)]
    overrides: TrainOverrides,
}

/// Output of `predict`, one JSON object per audio.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub id: String,
    pub unit_seconds: f64,
    pub probs: Vec<f32>,
    /// Start time of every unit whose probability exceeds the threshold.
    pub cuts_s: Vec<f64>,
}

impl PredictionRecord {
    pub fn new(id: String, unit_seconds: f64, probs: Vec<f32>, tau: f32) -> Self {
        let cuts_s = threshold_predictions(&probs, tau)
            .iter()
            .enumerate()
            .filter(|(_, &v)| v == 1)
            .map(|(i, _)| i as f64 * unit_seconds)
            .collect();
        Self { id, unit_seconds, probs, cuts_s }
    }
}

#[derive(Debug, Deserialize)]
struct ProbsLine {
    id: String,
    probs: Vec<f32>,
    #[serde(default)]
    unit_seconds: Option<f64>,
}

#[derive(Debug, Serialize)]
struct BenchRow {
    depth: usize,
    n_units: usize,
    units_per_sec: f64,
    median_s: f64,
    gflops: f64,
}

/// Runs the CLI on `args` (including the program name) and returns the exit code.
pub fn run<I, T>(args: I, stdout: &mut dyn Write, stderr: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => EXIT_OK,
                _ => EXIT_USAGE,
            };
            let text = e.render().to_string();
            let _ = if code == EXIT_OK { write!(stdout, "{text}") } else { write!(stderr, "{text}") };
            return code;
        }
    };
    match dispatch(cli.command, stdout) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            let _ = writeln!(stderr, "error: {e:#}");
            exit_code(&e)
        }
    }
}

/// Maps a failure to its process exit code.
pub fn exit_code(e: &anyhow::Error) -> i32 {
    match e.downcast_ref::<Error>() {
        Some(Error::NonFiniteLoss { .. } | Error::Shape(_)) => EXIT_NUMERIC,
        Some(Error::Checkpoint(_)) => EXIT_MISMATCH,
        Some(Error::LengthMismatch { .. } | Error::Capacity { .. }) => EXIT_MISMATCH,
        _ => EXIT_DATA,
    }
}

fn dispatch(cmd: Command, out: &mut dyn Write) -> anyhow::Result<()> {
    match cmd {
        Command::Synth(a) => synth(a, out),
        Command::Featurize(a) => featurize(a, out),
        Command::Train(a) => train_cmd(a, out),
        Command::Eval(a) => eval(a, out),
        Command::Predict(a) => predict(a, out),
        Command::PnRatio(a) => pn_ratio(a, out),
        Command::Bench(a) => bench(a, out),
        Command::Ablate(a) => ablate(a, out),
    }
}

fn read_text(p: &Path) -> anyhow::Result<String> {
    if !p.is_file() {
        return Err(Error::MissingFile(p.to_path_buf()).into());
    }
    Ok(std::fs::read_to_string(p).map_err(Error::from)?)
}

fn write_text(p: &Path, text: &str) -> anyhow::Result<()> {
    std::fs::write(p, text).map_err(Error::from).with_context(|| format!("writing {}", p.display()))
}

fn parse_switch(s: &str) -> anyhow::Result<bool> {
    match s {
        "on" | "true" | "yes" => Ok(true),
        "off" | "false" | "no" => Ok(false),
        other => Err(Error::InvalidConfig(format!("expected on/off, got `{other}`")).into()),
    }
}

fn parse_list<T: std::str::FromStr>(s: &str) -> anyhow::Result<Vec<T>> {
    s.split(',')
        .map(str::trim)
        .filter(|p| !p.is_empty())
        .map(|p| p.parse::<T>().map_err(|_| Error::InvalidConfig(format!("bad list item `{p}`")).into()))
        .collect()
}

fn synth(a: SynthArgs, out: &mut dyn Write) -> anyhow::Result<()> {
    let mut spec = match &a.spec {
        Some(p) => serde_json::from_str::<SynthSpec>(&read_text(p)?).map_err(Error::from)?,
        None => SynthSpec::default(),
    };
    macro_rules! set {
        ($($field:ident <- $flag:ident),* $(,)?) => { $( if let Some(v) = a.$flag { spec.$field = v; } )* };
    }
    set!(
        n_audios <- n_audios, seed <- seed, min_duration_s <- min_duration, max_duration_s <- max_duration,
        min_bpm <- min_bpm, max_bpm <- max_bpm, beats_per_bar <- beats_per_bar, subdivisions <- subdivisions,
        cut_fraction <- cut_fraction, max_cuts <- max_cuts, noise_level <- noise_level,
        min_click_gain <- min_click_gain, max_click_gain <- max_click_gain, accent <- accent,
        annotation_jitter_s <- annotation_jitter, sample_rate <- sample_rate,
    );
    if let Some(v) = a.beat_offset {
        spec.beat_offset_s = Some(v);
    }
    let manifest = generate_dataset(&spec, &a.out)?;
    writeln!(out, "{}", manifest.display())?;
    Ok(())
}

fn featurize(a: FeaturizeArgs, out: &mut dyn Write) -> anyhow::Result<()> {
    let model = a.source.load()?;
    let cfg = model.config();
    let seq = split_time_units(&load_canonical(&a.wav)?, cfg.unit_seconds)?;
    let fm = tfe_forward(&seq, model.params(), &cfg.tfe()?)?;
    let file = File::create(&a.out).map_err(Error::from)?;
    write_checkpoint(std::io::BufWriter::new(file), &[("features".to_string(), fm.values.clone())])?;
    writeln!(out, "{} units x {} channels ({}) -> {}", fm.rows(), fm.channels(), fm.sources.label(), a.out.display())?;
    Ok(())
}

fn train_cmd(a: TrainArgs, out: &mut dyn Write) -> anyhow::Result<()> {
    let cfg = a.overrides.resolve()?;
    let records = read_manifest(&a.manifest)?;
    let (tr, va) = split_records(&records, cfg.val_fraction, cfg.seed);
    let mut model = Model::build(cfg.model.clone())?;
    let train_ex = load_examples(&model, &a.manifest, &tr)?;
    let val_ex = load_examples(&model, &a.manifest, &va)?;
    let history = train(&mut model, &train_ex, &val_ex, &cfg)?;
    model.save(&a.out)?;
    let hist_path = a.history.unwrap_or_else(|| {
        let mut s = a.out.as_os_str().to_owned();
        s.push(".history.jsonl");
        PathBuf::from(s)
    });
    history.write_jsonl(&hist_path)?;
    let best = history.best().context("empty history")?;
    writeln!(
        out,
        "{} epochs, best epoch {} (val F1@0 {:.2}, F1@1 {:.2}, F1@2 {:.2}); checkpoint {}; history {}",
        history.epochs.len(),
        best.epoch,
        best.val_f1[0],
        best.val_f1[1],
        best.val_f1[2],
        a.out.display(),
        hist_path.display()
    )?;
    Ok(())
}

fn read_prob_lines(p: &Path) -> anyhow::Result<Vec<ProbsLine>> {
    if !p.is_file() {
        return Err(Error::MissingFile(p.to_path_buf()).into());
    }
    let reader = BufReader::new(File::open(p).map_err(Error::from)?);
    let mut rows = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line.map_err(Error::from)?;
        if line.trim().is_empty() {
            continue;
        }
        let row: ProbsLine =
            serde_json::from_str(&line).map_err(Error::from).with_context(|| format!("{}:{}", p.display(), i + 1))?;
        rows.push(row);
    }
    Ok(rows)
}

fn labels_of(rec: &ManifestRecord, n_units: usize, unit_seconds: f64) -> anyhow::Result<Vec<u8>> {
    Ok(labels_for(&rec.cuts_s, unit_seconds, n_units, rec.duration_s)?.values().to_vec())
}

fn eval(a: EvalArgs, out: &mut dyn Write) -> anyhow::Result<()> {
    let records = read_manifest(&a.manifest)?;
    if records.is_empty() {
        return Err(Error::EmptyManifest(a.manifest.display().to_string()).into());
    }
    let mut per = Vec::with_capacity(records.len());
    match (&a.predictions, &a.checkpoint) {
        (Some(p), _) => {
            let mut by_id: BTreeMap<String, ProbsLine> = BTreeMap::new();
            for row in read_prob_lines(p)? {
                if by_id.contains_key(&row.id) {
                    bail!(Error::InvalidConfig(format!("duplicate prediction for `{}`", row.id)));
                }
                by_id.insert(row.id.clone(), row);
            }
            for rec in &records {
                let row = by_id
                    .remove(&rec.id)
                    .ok_or_else(|| Error::InvalidConfig(format!("no prediction for `{}`", rec.id)))?;
                let y = labels_of(rec, row.probs.len(), row.unit_seconds.unwrap_or(a.unit_seconds))?;
                per.push(audio_metrics(&y, &threshold_predictions(&row.probs, a.tau))?);
            }
            if let Some(id) = by_id.keys().next() {
                bail!(Error::InvalidConfig(format!("prediction `{id}` is not in the manifest")));
            }
        }
        (None, Some(c)) => {
            let model = Model::load(c)?;
            for ex in load_examples(&model, &a.manifest, &records)? {
                let p = model.predict_inputs(&ex.inputs)?;
                per.push(audio_metrics(ex.labels.values(), &threshold_predictions(p.probs(), a.tau))?);
            }
        }
        (None, None) => bail!(Error::InvalidConfig("eval needs --predictions or --checkpoint".into())),
    }
    let report = aggregate(&per)?;
    write!(out, "{}", render_table(&[("model".to_string(), report)]))?;
    if let Some(p) = &a.out {
        write_text(p, &report_json(&report)?)?;
    }
    Ok(())
}

fn report_json(r: &EvalReport) -> anyhow::Result<String> {
    Ok(serde_json::to_string_pretty(r).map_err(Error::from)? + "\n")
}

fn predict(a: PredictArgs, out: &mut dyn Write) -> anyhow::Result<()> {
    let model = Model::load(&a.checkpoint)?;
    let u = model.config().unit_seconds;
    let mut lines = String::new();
    let mut push = |rec: PredictionRecord| -> anyhow::Result<()> {
        lines += &serde_json::to_string(&rec).map_err(Error::from)?;
        lines.push('\n');
        Ok(())
    };
    if let Some(wav) = &a.wav {
        let seq = split_time_units(&load_canonical(wav)?, u)?;
        let probs = model.forward(&seq)?.into_vec();
        let id = wav.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
        push(PredictionRecord::new(id, u, probs, a.tau))?;
    } else if let Some(m) = &a.manifest {
        let records = read_manifest(m)?;
        for ex in load_examples(&model, m, &records)? {
            let probs = model.predict_inputs(&ex.inputs)?.into_vec();
            push(PredictionRecord::new(ex.id, u, probs, a.tau))?;
        }
    }
    match &a.out {
        Some(p) => write_text(p, &lines)?,
        None => out.write_all(lines.as_bytes())?,
    }
    Ok(())
}

fn pn_ratio(a: PnRatioArgs, out: &mut dyn Write) -> anyhow::Result<()> {
    let records = read_manifest(&a.manifest)?;
    let labels = records
        .iter()
        .map(|r| labels_for(&r.cuts_s, a.unit_seconds, (r.duration_s / a.unit_seconds).ceil().max(1.0) as usize, r.duration_s))
        .collect::<crate::Result<Vec<_>>>()?;
    let grid = default_sigma_grid();
    let mut text = format!("{:>5}  {:>9}\n", "sigma", "PN ratio");
    for &s in &grid {
        match mean_pn_ratio(&labels, s)? {
            Some(v) => writeln!(text, "{s:>5.1}  {v:>9.4}")?,
            None => writeln!(text, "{s:>5.1}  {:>9}", "n/a")?,
        }
    }
    let best = estimate_sigma(&labels, &grid)?;
    writeln!(text, "estimated sigma: {best:.1}")?;
    out.write_all(text.as_bytes())?;
    Ok(())
}

fn bench(a: BenchArgs, out: &mut dyn Write) -> anyhow::Result<()> {
    let kind = ModelKind::parse(&a.model)?;
    let depths: Vec<usize> = parse_list(&a.depth)?;
    let ns: Vec<usize> = parse_list(&a.n)?;
    let mut rows = Vec::new();
    let mut text = format!("{:>5} {:>7} {:>12} {:>10}\n", "depth", "units", "units/sec", "GFLOPs");
    let mut cfgs = Vec::with_capacity(depths.len());
    let mut models = Vec::with_capacity(depths.len());
    for &d in &depths {
        let mut cfg = ModelConfig::desk(kind);
        match kind {
            ModelKind::Encoder => cfg.encoder.layers = d,
            _ => cfg.lgf.layers = d,
        }
        models.push(Model::build(cfg.clone())?);
        cfgs.push(cfg);
    }
    let refs: Vec<&Model> = models.iter().collect();
    let results = benchmark_throughput(&refs, &ns, a.repeats)?;
    for ((&d, cfg), ts) in depths.iter().zip(&cfgs).zip(results) {
        for t in ts {
            let gflops = flops_estimate(cfg, t.n_units)?;
            writeln!(text, "{d:>5} {:>7} {:>12.1} {gflops:>10.4}", t.n_units, t.units_per_sec)?;
            rows.push(BenchRow { depth: d, n_units: t.n_units, units_per_sec: t.units_per_sec, median_s: t.median_s, gflops });
        }
    }
    out.write_all(text.as_bytes())?;
    if let Some(p) = &a.out {
        write_text(p, &(serde_json::to_string_pretty(&rows).map_err(Error::from)? + "\n"))?;
    }
    Ok(())
}

fn ablate(a: AblateArgs, out: &mut dyn Write) -> anyhow::Result<()> {
    let base = a.overrides.resolve()?;
    let mut grid = match &a.grid {
        Some(p) => serde_json::from_str::<AblationGrid>(&read_text(p)?).map_err(Error::from)?,
        None => AblationGrid::default(),
    };
    if let Some(s) = &a.scope_axis {
        grid.use_scope = s.split(',').map(str::trim).map(parse_switch).collect::<anyhow::Result<_>>()?;
    }
    if let Some(s) = &a.sources_axis {
        grid.sources = s.split(';').map(FeatureSources::parse).collect::<crate::Result<_>>()?;
    }
    if let Some(s) = &a.k_axis {
        grid.k = parse_list(s)?;
    }
    if let Some(s) = &a.proj_axis {
        grid.proj_dim = parse_list(s)?;
    }
    if let Some(s) = &a.heads_axis {
        grid.heads = parse_list(s)?;
    }
    if let Some(s) = &a.depth_axis {
        grid.depth = parse_list(s)?;
    }
    let rows = run_ablation(&grid.points(), &base, &a.manifest)?;
    out.write_all(ablation_text(&rows).as_bytes())?;
    if let Some(p) = &a.csv {
        write_text(p, &ablation_csv(&rows))?;
    }
    Ok(())
}
