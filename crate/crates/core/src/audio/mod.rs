//! Audio loading, resampling, time-unit segmentation and cut labels.

mod manifest;
mod wav;

pub use manifest::{read_manifest, write_manifest, ManifestRecord};
pub use wav::{load_wav, write_wav};

use std::path::Path;

use crate::error::{Error, Result};

/// Sample rate every audio is resampled to before segmentation.
pub const CANONICAL_RATE: u32 = 16_000;

/// Default time-unit duration in seconds.
pub const DEFAULT_UNIT_SECONDS: f64 = 0.1;

/// Mono waveform in `[-1, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct SignalBuffer {
    samples: Vec<f32>,
    sample_rate: u32,
}

impl SignalBuffer {
    pub fn new(samples: Vec<f32>, sample_rate: u32) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::EmptySignal);
        }
        if sample_rate == 0 {
            return Err(Error::InvalidConfig("sample rate must be positive".into()));
        }
        if let Some(i) = samples.iter().position(|v| !v.is_finite()) {
            return Err(Error::MalformedWav(format!("non-finite sample at index {i}")));
        }
        Ok(Self { samples, sample_rate })
    }

    pub fn samples(&self) -> &[f32] {
        &self.samples
    }

    pub fn sample_rate(&self) -> u32 {
        self.sample_rate
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration_s(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }
}

/// Linear-interpolation resampling. Output length is
/// `round(len · target / source)` (at least one sample).
pub fn resample(sig: &SignalBuffer, target_rate: u32) -> Result<SignalBuffer> {
    if target_rate == 0 {
        return Err(Error::InvalidConfig("target rate must be positive".into()));
    }
    if target_rate == sig.sample_rate {
        return Ok(sig.clone());
    }
    let src = sig.samples();
    let ratio = sig.sample_rate as f64 / target_rate as f64;
    let out_len = ((src.len() as f64 / ratio).round() as usize).max(1);
    let last = src.len() - 1;
    let out = (0..out_len)
        .map(|i| {
            let pos = i as f64 * ratio;
            let i0 = (pos.floor() as usize).min(last);
            let i1 = (i0 + 1).min(last);
            let frac = (pos - i0 as f64).clamp(0.0, 1.0) as f32;
            src[i0] + (src[i1] - src[i0]) * frac
        })
        .collect();
    SignalBuffer::new(out, target_rate)
}

/// Loads a WAV file and resamples it to [`CANONICAL_RATE`].
pub fn load_canonical(path: &Path) -> Result<SignalBuffer> {
    resample(&load_wav(path)?, CANONICAL_RATE)
}

/// An audio signal split into `n_units` equal clips, the last one
/// zero-padded at its end.
#[derive(Debug, Clone, PartialEq)]
pub struct TimeUnitSequence {
    padded: Vec<f32>,
    unit_len: usize,
    n_units: usize,
    unit_seconds: f64,
    sample_rate: u32,
    original_len: usize,
}

impl TimeUnitSequence {
    pub fn unit(&self, i: usize) -> &[f32] {
        &self.padded[i * self.unit_len..(i + 1) * self.unit_len]
    }

    pub fn units(&self) -> impl ExactSizeIterator<Item = &[f32]> {
        self.padded.chunks(self.unit_len)
    }

    /// All unit samples back to back, padding included.
    pub fn padded_samples(&self) -> &[f32] {
        &self.padded
    }

    pub fn unit_len(&self) -> usize {
        self.unit_len
    }

    pub fn n_units(&self) -> usize {
        self.n_units
    }

    pub fn unit_seconds(&self) -> f64 {
        self.unit_seconds
    }

    pub fn sample_rate(&self) -> u32 {
        self.sample_rate
    }

    pub fn original_len(&self) -> usize {
        self.original_len
    }

    pub fn original_duration_s(&self) -> f64 {
        self.original_len as f64 / self.sample_rate as f64
    }

    /// Concatenated units with the trailing padding dropped.
    pub fn flatten(&self) -> Vec<f32> {
        self.padded[..self.original_len].to_vec()
    }

    /// Builds a sequence directly from already-segmented units.
    pub fn from_units(units: Vec<Vec<f32>>, unit_seconds: f64, sample_rate: u32) -> Result<Self> {
        let unit_len = units.first().map(Vec::len).ok_or(Error::EmptySignal)?;
        if unit_len == 0 || units.iter().any(|u| u.len() != unit_len) {
            return Err(Error::Shape("units must share one non-zero length".into()));
        }
        let n_units = units.len();
        Ok(Self {
            padded: units.concat(),
            unit_len,
            n_units,
            unit_seconds,
            sample_rate,
            original_len: n_units * unit_len,
        })
    }

    /// Reorders units; `order[i]` is the source index of unit `i`.
    pub fn permuted(&self, order: &[usize]) -> Self {
        let units = order.iter().map(|&i| self.unit(i).to_vec()).collect();
        Self::from_units(units, self.unit_seconds, self.sample_rate).expect("same unit length")
    }
}

/// Number of samples per unit: `round(unit_seconds · sample_rate)`.
pub fn unit_len_for(unit_seconds: f64, sample_rate: u32) -> Result<usize> {
    if !(unit_seconds > 0.0) {
        return Err(Error::InvalidConfig(format!("unit_seconds must be positive, got {unit_seconds}")));
    }
    let len = (unit_seconds * sample_rate as f64).round() as usize;
    if len == 0 {
        return Err(Error::InvalidConfig(format!(
            "unit of {unit_seconds}s holds no sample at {sample_rate} Hz"
        )));
    }
    Ok(len)
}

/// Splits into `ceil(len / unit_len)` units, zero-padding the last one.
pub fn split_time_units(sig: &SignalBuffer, unit_seconds: f64) -> Result<TimeUnitSequence> {
    if sig.is_empty() {
        return Err(Error::EmptySignal);
    }
    let unit_len = unit_len_for(unit_seconds, sig.sample_rate())?;
    let n_units = sig.len().div_ceil(unit_len);
    let mut padded = sig.samples().to_vec();
    padded.resize(n_units * unit_len, 0.0);
    Ok(TimeUnitSequence {
        padded,
        unit_len,
        n_units,
        unit_seconds,
        sample_rate: sig.sample_rate(),
        original_len: sig.len(),
    })
}

/// Per-unit binary targets: `values[i] == 1` means a transition belongs
/// right after unit `i`.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct LabelVector {
    values: Vec<u8>,
}

impl LabelVector {
    pub fn new(values: Vec<u8>) -> Result<Self> {
        if let Some(v) = values.iter().find(|&&v| v > 1) {
            return Err(Error::InvalidConfig(format!("label entries must be 0 or 1, got {v}")));
        }
        Ok(Self { values })
    }

    pub fn zeros(n: usize) -> Self {
        Self { values: vec![0; n] }
    }

    pub fn values(&self) -> &[u8] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn positives(&self) -> usize {
        self.values.iter().filter(|&&v| v == 1).count()
    }

    pub fn as_f32(&self) -> Vec<f32> {
        self.values.iter().map(|&v| v as f32).collect()
    }
}

/// Slack for floating-point boundary cases such as `0.3 / 0.1`.
const BOUNDARY_SLACK: f64 = 1e-9;

/// Unit index of a cut at `t` seconds: `min(floor(t / unit), n − 1)`.
/// A cut exactly on a boundary belongs to the unit starting there.
pub fn unit_index_of(t: f64, unit_seconds: f64, n_units: usize) -> usize {
    let idx = (t / unit_seconds + BOUNDARY_SLACK).floor().max(0.0) as usize;
    idx.min(n_units.saturating_sub(1))
}

/// Maps cut timestamps to a label vector over the units of `seq`.
pub fn cut_times_to_labels(cut_times_s: &[f64], seq: &TimeUnitSequence) -> Result<LabelVector> {
    labels_for(cut_times_s, seq.unit_seconds(), seq.n_units(), seq.original_duration_s())
}

/// [`cut_times_to_labels`] without a materialized sequence.
pub fn labels_for(cut_times_s: &[f64], unit_seconds: f64, n_units: usize, duration_s: f64) -> Result<LabelVector> {
    let mut values = vec![0u8; n_units];
    for &t in cut_times_s {
        if !(t >= 0.0 && t <= duration_s + BOUNDARY_SLACK) {
            return Err(Error::CutOutOfRange { time: t, duration: duration_s });
        }
        values[unit_index_of(t, unit_seconds, n_units)] = 1;
    }
    Ok(LabelVector { values })
}
