//! hit@k evaluation: one-to-one tolerance matching, precision/recall/F1,
//! per-unit accuracy and audio-wise aggregation.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Tolerances reported by [`EvalReport`].
pub const HIT_KS: [usize; 3] = [0, 1, 2];

/// Default decision threshold.
pub const DEFAULT_TAU: f32 = 0.5;

/// `ŷ_i = 1` iff `p_i > tau`.
pub fn threshold_predictions(p: &[f32], tau: f32) -> Vec<u8> {
    p.iter().map(|&v| u8::from(v > tau)).collect()
}

fn check_len(y: &[u8], y_hat: &[u8]) -> Result<()> {
    if y.len() != y_hat.len() {
        return Err(Error::LengthMismatch { expected: y.len(), got: y_hat.len() });
    }
    Ok(())
}

/// Size of a maximum one-to-one matching between predicted and true
/// positives, pairing indices at most `k` apart.
pub fn match_hits(y: &[u8], y_hat: &[u8], k: usize) -> Result<usize> {
    check_len(y, y_hat)?;
    let truth: Vec<usize> = (0..y.len()).filter(|&i| y[i] == 1).collect();
    let mut t = 0;
    let mut hits = 0;
    for i in (0..y_hat.len()).filter(|&i| y_hat[i] == 1) {
        while t < truth.len() && truth[t] + k < i {
            t += 1;
        }
        if t < truth.len() && truth[t] <= i + k {
            hits += 1;
            t += 1;
        }
    }
    Ok(hits)
}

/// Values used when a precision or recall denominator is zero.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ZeroDivision {
    /// Precision when nothing is predicted.
    pub empty_prediction_precision: f64,
    /// Recall when the audio has no transitions.
    pub empty_truth_recall: f64,
}

impl Default for ZeroDivision {
    fn default() -> Self {
        Self { empty_prediction_precision: 1.0, empty_truth_recall: 1.0 }
    }
}

/// `(P@k, R@k)` as fractions.
pub fn pr_at_k(y: &[u8], y_hat: &[u8], k: usize) -> Result<(f64, f64)> {
    pr_at_k_with(y, y_hat, k, ZeroDivision::default())
}

pub fn pr_at_k_with(y: &[u8], y_hat: &[u8], k: usize, zd: ZeroDivision) -> Result<(f64, f64)> {
    let hits = match_hits(y, y_hat, k)? as f64;
    let n_pred = y_hat.iter().filter(|&&v| v == 1).count();
    let n_true = y.iter().filter(|&&v| v == 1).count();
    let p = if n_pred == 0 { zd.empty_prediction_precision } else { hits / n_pred as f64 };
    let r = if n_true == 0 { zd.empty_truth_recall } else { hits / n_true as f64 };
    Ok((p, r))
}

pub fn f1(p: f64, r: f64) -> f64 {
    if p + r == 0.0 {
        0.0
    } else {
        2.0 * p * r / (p + r)
    }
}

/// Fraction of units with `y_i == ŷ_i`.
pub fn audio_accuracy(y: &[u8], y_hat: &[u8]) -> Result<f64> {
    check_len(y, y_hat)?;
    if y.is_empty() {
        return Ok(1.0);
    }
    let same = y.iter().zip(y_hat).filter(|(a, b)| a == b).count();
    Ok(same as f64 / y.len() as f64)
}

/// Metrics of one audio, as fractions in `[0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AudioMetrics {
    pub precision: [f64; 3],
    pub recall: [f64; 3],
    pub f1: [f64; 3],
    pub acc: f64,
}

pub fn audio_metrics(y: &[u8], y_hat: &[u8]) -> Result<AudioMetrics> {
    audio_metrics_with(y, y_hat, ZeroDivision::default())
}

pub fn audio_metrics_with(y: &[u8], y_hat: &[u8], zd: ZeroDivision) -> Result<AudioMetrics> {
    let mut m = AudioMetrics { precision: [0.0; 3], recall: [0.0; 3], f1: [0.0; 3], acc: audio_accuracy(y, y_hat)? };
    for (slot, &k) in HIT_KS.iter().enumerate() {
        let (p, r) = pr_at_k_with(y, y_hat, k, zd)?;
        m.precision[slot] = p;
        m.recall[slot] = r;
        m.f1[slot] = f1(p, r);
    }
    Ok(m)
}

/// Audio-wise averaged metrics in percent.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub precision: [f64; 3],
    pub recall: [f64; 3],
    pub f1: [f64; 3],
    pub acc: f64,
    pub n_audios: usize,
}

impl EvalReport {
    /// F1 at tolerance `k` (0, 1 or 2), in percent.
    pub fn f1_at(&self, k: usize) -> f64 {
        self.f1[k]
    }
}

/// Unweighted mean over audios, scaled to percent.
pub fn aggregate(per_audio: &[AudioMetrics]) -> Result<EvalReport> {
    if per_audio.is_empty() {
        return Err(Error::InvalidConfig("cannot aggregate zero audios".into()));
    }
    let n = per_audio.len() as f64;
    let mean = |f: &dyn Fn(&AudioMetrics) -> f64| 100.0 * per_audio.iter().map(f).sum::<f64>() / n;
    let mut r = EvalReport {
        precision: [0.0; 3],
        recall: [0.0; 3],
        f1: [0.0; 3],
        acc: mean(&|m| m.acc),
        n_audios: per_audio.len(),
    };
    for s in 0..3 {
        r.precision[s] = mean(&|m| m.precision[s]);
        r.recall[s] = mean(&|m| m.recall[s]);
        r.f1[s] = mean(&|m| m.f1[s]);
    }
    Ok(r)
}

/// Thresholds each probability vector and aggregates against its labels.
pub fn evaluate(pairs: &[(&[u8], &[f32])], tau: f32) -> Result<EvalReport> {
    let per: Vec<AudioMetrics> = pairs
        .iter()
        .map(|(y, p)| audio_metrics(y, &threshold_predictions(p, tau)))
        .collect::<Result<_>>()?;
    aggregate(&per)
}

/// Fixed-width table with one row per named report.
pub fn render_table(rows: &[(String, EvalReport)]) -> String {
    let name_w = rows.iter().map(|(n, _)| n.len()).max().unwrap_or(0).max(6);
    let mut s = format!("{:<name_w$}", "Method");
    for k in HIT_KS {
        s += &format!(" | {:>6} {:>6} {:>6}", format!("P@{k}"), format!("R@{k}"), format!("F1@{k}"));
    }
    s += &format!(" | {:>6}\n", "ACC");
    s += &"-".repeat(s.len() - 1);
    s.push('\n');
    for (name, r) in rows {
        s += &format!("{name:<name_w$}");
        for i in 0..3 {
            s += &format!(" | {:>6.2} {:>6.2} {:>6.2}", r.precision[i], r.recall[i], r.f1[i]);
        }
        s += &format!(" | {:>6.2}\n", r.acc);
    }
    s
}
