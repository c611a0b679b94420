//! Training loop, ablation harness and throughput measurements.

use std::fmt::Write as _;
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::audio::{cut_times_to_labels, load_canonical, read_manifest, split_time_units, LabelVector, ManifestRecord, SignalBuffer};
use crate::error::{Error, Result};
use crate::features::{FeatureSources, UnitInputs};
use crate::metrics::{evaluate, EvalReport};
use crate::model::{Model, ModelConfig, ModelKind, CNN_KERNEL, CNN_LAYERS};
use crate::scope::{scope_mask, weighted_bce_loss, ScopeMask, DEFAULT_SIGMA};
use crate::tensor::{lr_at_epoch, AdamW, AdamWState, Graph, ParamStore};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr0: f32,
    /// Epochs between learning-rate halvings.
    pub halving_period: usize,
    /// Audios whose gradients are averaged per optimizer step.
    pub batch_size: usize,
    pub sigma_hat: f64,
    pub use_scope: bool,
    pub model: ModelConfig,
    /// Seeds the validation split and the per-epoch shuffle.
    pub seed: u64,
    pub val_fraction: f64,
    /// Decision threshold for validation metrics.
    pub tau: f32,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 300,
            lr0: 2e-4,
            halving_period: 20,
            batch_size: 1,
            sigma_hat: DEFAULT_SIGMA,
            use_scope: true,
            model: ModelConfig::desk(ModelKind::Beatx),
            seed: 0,
            val_fraction: 0.1,
            tau: 0.5,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 || self.halving_period == 0 {
            return Err(Error::InvalidConfig("epochs, batch_size and halving_period must be at least 1".into()));
        }
        if !(self.lr0 > 0.0 && self.lr0.is_finite()) {
            return Err(Error::InvalidConfig("lr0 must be positive".into()));
        }
        if !(self.sigma_hat > 0.0) {
            return Err(Error::InvalidConfig("sigma_hat must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return Err(Error::InvalidConfig("val_fraction must lie in [0, 1)".into()));
        }
        if !(self.tau > 0.0 && self.tau < 1.0) {
            return Err(Error::InvalidConfig("tau must lie in (0, 1)".into()));
        }
        self.model.validate()
    }

    pub fn lr_at(&self, epoch: usize) -> f32 {
        lr_at_epoch(self.lr0, self.halving_period, epoch)
    }
}

/// One audio ready for training: cached unit inputs and labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    pub id: String,
    pub inputs: UnitInputs,
    pub labels: LabelVector,
}

/// Loads, splits and featurizes every record of a manifest.
pub fn load_examples(model: &Model, manifest: &Path, records: &[ManifestRecord]) -> Result<Vec<Example>> {
    let dir = manifest.parent().unwrap_or(Path::new("."));
    records
        .iter()
        .map(|r| {
            let sig = load_canonical(&r.wav_path(dir))?;
            example_from_signal(model, &r.id, &sig, &r.cuts_s)
        })
        .collect()
}

pub fn example_from_signal(model: &Model, id: &str, sig: &SignalBuffer, cuts_s: &[f64]) -> Result<Example> {
    let seq = split_time_units(sig, model.config().unit_seconds)?;
    Ok(Example { id: id.to_string(), inputs: model.prepare(&seq)?, labels: cut_times_to_labels(cuts_s, &seq)? })
}

/// By-audio random split. With fewer than two records everything is
/// training data and the validation part is empty.
pub fn split_records(records: &[ManifestRecord], val_fraction: f64, seed: u64) -> (Vec<ManifestRecord>, Vec<ManifestRecord>) {
    let n = records.len();
    if n < 2 || val_fraction <= 0.0 {
        return (records.to_vec(), Vec::new());
    }
    let n_val = ((n as f64 * val_fraction).round() as usize).clamp(1, n - 1);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut is_val = vec![false; n];
    order[..n_val].iter().for_each(|&i| is_val[i] = true);
    let (val, train): (Vec<_>, Vec<_>) = records.iter().cloned().zip(is_val).partition(|(_, v)| *v);
    (train.into_iter().map(|(r, _)| r).collect(), val.into_iter().map(|(r, _)| r).collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f32,
    /// Mean loss over the epoch's training audios.
    pub train_loss: f64,
    /// Validation F1 at k = 0, 1, 2 in percent.
    pub val_f1: [f64; 3],
    pub best: bool,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TrainHistory {
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: usize,
}

impl TrainHistory {
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for e in &self.epochs {
            out.push_str(&serde_json::to_string(e).expect("plain record"));
            out.push('\n');
        }
        out
    }

    pub fn write_jsonl(&self, path: &Path) -> Result<()> {
        Ok(std::fs::write(path, self.to_jsonl())?)
    }

    pub fn best(&self) -> Option<&EpochRecord> {
        self.epochs.get(self.best_epoch)
    }
}

fn mask_for(cfg: &TrainConfig, y: &LabelVector) -> Result<ScopeMask> {
    if cfg.use_scope {
        scope_mask(y, cfg.sigma_hat)
    } else {
        Ok(ScopeMask::disabled(y.len(), cfg.sigma_hat))
    }
}

/// Loss of one audio under the current parameters, without an update.
pub fn example_loss(model: &Model, ex: &Example, cfg: &TrainConfig) -> Result<f32> {
    let mut g = Graph::new();
    let p = model.forward_graph(&mut g, &ex.inputs)?;
    let loss = weighted_bce_loss(&mut g, p, &ex.labels, &mask_for(cfg, &ex.labels)?)?;
    Ok(g.value(loss)[0])
}

/// Audio-wise metrics of `model` on `examples`.
pub fn evaluate_examples(model: &Model, examples: &[Example], tau: f32) -> Result<EvalReport> {
    let probs: Vec<Vec<f32>> = examples.iter().map(|e| model.predict_inputs(&e.inputs).map(|p| p.into_vec())).collect::<Result<_>>()?;
    let pairs: Vec<(&[u8], &[f32])> = examples.iter().zip(&probs).map(|(e, p)| (e.labels.values(), p.as_slice())).collect();
    evaluate(&pairs, tau)
}

/// Optimizes `model` in place and leaves it holding the parameters of the
/// epoch with the best validation F1@0 (the training set stands in when
/// `val` is empty).
pub fn train(model: &mut Model, train: &[Example], val: &[Example], cfg: &TrainConfig) -> Result<TrainHistory> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::EmptyManifest("no training audios".into()));
    }
    let val = if val.is_empty() { train } else { val };
    let masks: Vec<ScopeMask> = train.iter().map(|e| mask_for(cfg, &e.labels)).collect::<Result<_>>()?;
    let opt = AdamW::default();
    let mut state = AdamWState::for_store(model.params());
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut history = TrainHistory::default();
    let mut best: Option<(f64, ParamStore)> = None;
    let mut order: Vec<usize> = (0..train.len()).collect();

    for epoch in 0..cfg.epochs {
        let lr = cfg.lr_at(epoch);
        order.shuffle(&mut rng);
        let mut total = 0.0f64;
        for group in order.chunks(cfg.batch_size) {
            model.params_mut().zero_grad();
            for &i in group {
                let ex = &train[i];
                let mut g = Graph::new();
                let p = model.forward_graph(&mut g, &ex.inputs)?;
                let loss = weighted_bce_loss(&mut g, p, &ex.labels, &masks[i])?;
                let value = g.value(loss)[0];
                if !value.is_finite() {
                    return Err(Error::NonFiniteLoss { epoch, audio: ex.id.clone() });
                }
                total += value as f64;
                g.backward(loss)?;
                g.accumulate_param_grads(model.params_mut())?;
            }
            model.params_mut().scale_grads(1.0 / group.len() as f32);
            let grads_ok = model.params().iter().all(|(_, t)| t.grad().is_none_or(|g| g.iter().all(|v| v.is_finite())));
            if !grads_ok {
                return Err(Error::NonFiniteLoss { epoch, audio: train[group[0]].id.clone() });
            }
            opt.step(model.params_mut(), &mut state, lr)?;
        }
        let report = evaluate_examples(model, val, cfg.tau)?;
        let improved = best.as_ref().is_none_or(|(f, _)| report.f1[0] > *f);
        if improved {
            best = Some((report.f1[0], model.params().clone()));
            history.best_epoch = epoch;
            history.epochs.iter_mut().for_each(|e| e.best = false);
        }
        history.epochs.push(EpochRecord {
            epoch,
            lr,
            train_loss: total / train.len() as f64,
            val_f1: report.f1,
            best: improved,
        });
    }
    if let Some((_, params)) = best {
        model.set_params(&params)?;
    }
    Ok(history)
}

/// Builds the model of `cfg`, splits `manifest` and trains.
pub fn train_manifest(manifest: &Path, cfg: &TrainConfig) -> Result<(Model, TrainHistory, Vec<Example>)> {
    cfg.validate()?;
    let records = read_manifest(manifest)?;
    let (tr, va) = split_records(&records, cfg.val_fraction, cfg.seed);
    let mut model = Model::build(cfg.model.clone())?;
    let train_ex = load_examples(&model, manifest, &tr)?;
    let val_ex = load_examples(&model, manifest, &va)?;
    let history = train(&mut model, &train_ex, &val_ex, cfg)?;
    Ok((model, history, val_ex))
}

// ---- ablations ---------------------------------------------------------

/// Overrides applied to a base configuration; `None` keeps the base value.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct AblationPoint {
    pub use_scope: Option<bool>,
    pub sources: Option<FeatureSources>,
    pub k: Option<usize>,
    pub proj_dim: Option<usize>,
    /// Heads of the global attention layers.
    pub heads: Option<usize>,
    /// Number of global attention layers.
    pub depth: Option<usize>,
}

impl AblationPoint {
    pub fn apply(&self, base: &TrainConfig) -> TrainConfig {
        let mut c = base.clone();
        if let Some(v) = self.use_scope {
            c.use_scope = v;
        }
        if let Some(v) = self.sources {
            c.model.sources = v;
        }
        if let Some(v) = self.k {
            c.model.lcg.k = v;
        }
        if let Some(v) = self.proj_dim {
            c.model.proj_dim = v;
        }
        if let Some(v) = self.heads {
            c.model.lgf.heads = v;
        }
        if let Some(v) = self.depth {
            c.model.lgf.layers = v;
        }
        c
    }

    pub fn label(&self) -> String {
        let mut parts = Vec::new();
        if let Some(v) = self.use_scope {
            parts.push(format!("scope={}", if v { "on" } else { "off" }));
        }
        if let Some(v) = self.sources {
            parts.push(format!("features={}", v.label()));
        }
        if let Some(v) = self.k {
            parts.push(format!("k={v}"));
        }
        if let Some(v) = self.proj_dim {
            parts.push(format!("proj={v}"));
        }
        if let Some(v) = self.heads {
            parts.push(format!("heads={v}"));
        }
        if let Some(v) = self.depth {
            parts.push(format!("depth={v}"));
        }
        if parts.is_empty() {
            "base".into()
        } else {
            parts.join(" ")
        }
    }
}

/// Axes of an ablation; the grid is the product of the non-empty axes.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AblationGrid {
    pub use_scope: Vec<bool>,
    pub sources: Vec<FeatureSources>,
    pub k: Vec<usize>,
    pub proj_dim: Vec<usize>,
    pub heads: Vec<usize>,
    pub depth: Vec<usize>,
}

impl AblationGrid {
    pub fn points(&self) -> Vec<AblationPoint> {
        fn axis<T: Copy>(points: Vec<AblationPoint>, values: &[T], set: impl Fn(&mut AblationPoint, T)) -> Vec<AblationPoint> {
            if values.is_empty() {
                return points;
            }
            points
                .into_iter()
                .flat_map(|p| {
                    values.iter().map(|&v| {
                        let mut q = p.clone();
                        set(&mut q, v);
                        q
                    }).collect::<Vec<_>>()
                })
                .collect()
        }
        if *self == Self::default() {
            return Vec::new();
        }
        let mut pts = vec![AblationPoint::default()];
        pts = axis(pts, &self.use_scope, |p, v| p.use_scope = Some(v));
        pts = axis(pts, &self.sources, |p, v| p.sources = Some(v));
        pts = axis(pts, &self.k, |p, v| p.k = Some(v));
        pts = axis(pts, &self.proj_dim, |p, v| p.proj_dim = Some(v));
        pts = axis(pts, &self.heads, |p, v| p.heads = Some(v));
        pts = axis(pts, &self.depth, |p, v| p.depth = Some(v));
        pts
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub label: String,
    pub report: EvalReport,
    /// Estimated cost of one 100-unit audio.
    pub gflops: f64,
    /// F1@0 minus the first row's F1@0, in points.
    pub f1_gain: f64,
}

/// Sequence length used for the per-row cost column.
pub const ABLATION_FLOPS_UNITS: usize = 100;

/// Trains and evaluates one model per grid point on a fixed split.
pub fn run_ablation(points: &[AblationPoint], base: &TrainConfig, manifest: &Path) -> Result<Vec<AblationRow>> {
    if points.is_empty() {
        return Ok(Vec::new());
    }
    let records = read_manifest(manifest)?;
    let (tr, va) = split_records(&records, base.val_fraction, base.seed);
    let mut rows: Vec<AblationRow> = Vec::with_capacity(points.len());
    for pt in points {
        let cfg = pt.apply(base);
        cfg.validate()?;
        let mut model = Model::build(cfg.model.clone())?;
        let train_ex = load_examples(&model, manifest, &tr)?;
        let val_ex = load_examples(&model, manifest, &va)?;
        train(&mut model, &train_ex, &val_ex, &cfg)?;
        let eval_set = if val_ex.is_empty() { &train_ex } else { &val_ex };
        let report = evaluate_examples(&model, eval_set, cfg.tau)?;
        let f1_gain = rows.first().map_or(0.0, |r| report.f1[0] - r.report.f1[0]);
        rows.push(AblationRow {
            label: pt.label(),
            gflops: flops_estimate(&cfg.model, ABLATION_FLOPS_UNITS)?,
            report,
            f1_gain,
        });
    }
    Ok(rows)
}

pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let mut out = String::from("label,p0,r0,f1_0,p1,r1,f1_1,p2,r2,f1_2,acc,f1_gain,gflops\n");
    for r in rows {
        let m = &r.report;
        let _ = writeln!(
            out,
            "{},{:.2},{:.2},{:.2},{:.2},{:.2},{:.2},{:.2},{:.2},{:.2},{:.2},{:.2},{:.4}",
            r.label, m.precision[0], m.recall[0], m.f1[0], m.precision[1], m.recall[1], m.f1[1], m.precision[2], m.recall[2],
            m.f1[2], m.acc, r.f1_gain, r.gflops
        );
    }
    out
}

pub fn ablation_text(rows: &[AblationRow]) -> String {
    let w = rows.iter().map(|r| r.label.len()).max().unwrap_or(0).max(5);
    let mut out = format!("{:<w$}  {:>7} {:>7} {:>7} {:>7} {:>8} {:>9}\n", "label", "F1@0", "F1@1", "F1@2", "ACC", "gain", "GFLOPs");
    for r in rows {
        let m = &r.report;
        let _ = writeln!(
            out,
            "{:<w$}  {:>7.2} {:>7.2} {:>7.2} {:>7.2} {:>+8.2} {:>9.4}",
            r.label, m.f1[0], m.f1[1], m.f1[2], m.acc, r.f1_gain, r.gflops
        );
    }
    out
}

// ---- cost ----------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Throughput {
    pub n_units: usize,
    pub median_s: f64,
    pub units_per_sec: f64,
}

/// Median forward time over `repeats` (at least 5) passes on seeded noise of
/// each length, after one untimed warm-up pass per model. Timing rounds
/// visit the models in turn, so slow drift affects all of them alike.
/// Feature inputs are prepared outside the timed region. Returns one row
/// per model, each with one entry per length.
pub fn benchmark_throughput(models: &[&Model], ns: &[usize], repeats: usize) -> Result<Vec<Vec<Throughput>>> {
    let mut out: Vec<Vec<Throughput>> = vec![Vec::with_capacity(ns.len()); models.len()];
    for &n in ns {
        let mut inputs = Vec::with_capacity(models.len());
        for model in models {
            let cfg = model.config();
            let mut rng = ChaCha8Rng::seed_from_u64(0);
            let samples: Vec<f32> = (0..n * cfg.unit_len()?).map(|_| rng.random_range(-0.5..0.5)).collect();
            let seq = split_time_units(&SignalBuffer::new(samples, cfg.sample_rate)?, cfg.unit_seconds)?;
            let prepared = model.prepare(&seq)?;
            model.predict_inputs(&prepared)?;
            inputs.push(prepared);
        }
        let mut times = vec![Vec::new(); models.len()];
        for _ in 0..repeats.max(5) {
            for (i, model) in models.iter().enumerate() {
                let t = Instant::now();
                model.predict_inputs(&inputs[i])?;
                times[i].push(t.elapsed().as_secs_f64());
            }
        }
        for (row, mut ts) in out.iter_mut().zip(times) {
            ts.sort_by(f64::total_cmp);
            let median_s = ts[ts.len() / 2];
            row.push(Throughput { n_units: n, median_s, units_per_sec: n as f64 / median_s });
        }
    }
    Ok(out)
}

fn encoder_flops(b: usize, t: usize, tq: usize, c: usize, ffn: usize) -> f64 {
    let (b, t, tq, c, ffn) = (b as f64, t as f64, tq as f64, c as f64, ffn as f64);
    let proj = 2.0 * b * (2.0 * tq + 2.0 * t) * c * c;
    let attn = 2.0 * 2.0 * b * tq * t * c;
    let ff = 2.0 * 2.0 * b * tq * c * ffn;
    proj + attn + ff
}

fn low_rank_flops(n: usize, p: usize, c: usize, ffn: usize) -> f64 {
    let (n, p, c, ffn) = (n as f64, p as f64, c as f64, ffn as f64);
    let proj = 2.0 * 4.0 * n * c * c;
    let squeeze = 2.0 * 2.0 * p * n * c;
    let attn = 2.0 * 2.0 * n * p * c;
    let ff = 2.0 * 2.0 * n * c * ffn;
    proj + squeeze + attn + ff
}

/// Analytic multiply-add count (two FLOPs each) of one forward pass over
/// `n` units, in GFLOPs.
pub fn flops_estimate(cfg: &ModelConfig, n: usize) -> Result<f64> {
    cfg.validate()?;
    let tfe = cfg.tfe()?;
    let (nf, w, p) = (n as f64, tfe.mel_width as f64, tfe.proj_dim as f64);
    let frames = tfe.n_frames() as f64;
    let mut total = 0.0;
    if tfe.sources.mel {
        let pixels = frames * tfe.mel.n_ceps as f64;
        total += nf * (2.0 * pixels * 9.0 * w + 4.0 * 2.0 * pixels * 9.0 * w * w + 2.0 * w * p);
    }
    if tfe.sources.energy {
        total += nf * 2.0 * frames * p;
    }
    if tfe.sources.raw {
        total += nf * 2.0 * tfe.unit_len as f64 * p;
    }
    let c = cfg.feature_dim();
    let h = cfg.hidden as f64;
    let cf = c as f64;
    match cfg.kind {
        ModelKind::Beatx => {
            let t = cfg.lcg.window();
            for l in 0..cfg.lcg.layers {
                let tq = if l + 1 == cfg.lcg.layers { 1 } else { t };
                total += encoder_flops(n, t, tq, c, cfg.lcg.ffn);
            }
            let pr = cfg.lgf.p;
            total += cfg.lgf.layers as f64 * low_rank_flops(n, pr, c, cfg.lgf.ffn);
            total += 2.0 * nf * cf;
        }
        ModelKind::Linear => total += 2.0 * nf * (cf * h + 2.0 * h * h + h),
        ModelKind::Cnn1d => {
            let k = CNN_KERNEL as f64;
            total += 2.0 * nf * k * (cf * h + (CNN_LAYERS - 1) as f64 * h * h);
            total += 2.0 * nf * (h * h + h);
        }
        ModelKind::Encoder => {
            total += cfg.encoder.layers as f64 * encoder_flops(1, n, n, c, cfg.encoder.ffn);
            total += 2.0 * nf * cf;
        }
    }
    Ok(total / 1e9)
}
