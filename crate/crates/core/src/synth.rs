//! Labeled synthetic click tracks.
//!
//! Each audio is a tonal bed plus a click on every subdivision of a steady
//! beat. A seeded subset of downbeats becomes cut points; their clicks are
//! louder than the audio's other clicks. Click loudness varies from audio
//! to audio, so a cut is recognizable by comparison with its neighbors
//! rather than by absolute level.

use std::f64::consts::PI;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::audio::{write_manifest, write_wav, ManifestRecord, SignalBuffer, CANONICAL_RATE};
use crate::error::{Error, Result};

/// Generator settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub n_audios: usize,
    pub min_duration_s: f64,
    pub max_duration_s: f64,
    pub min_bpm: f64,
    pub max_bpm: f64,
    pub beats_per_bar: usize,
    /// Clicks per beat.
    pub subdivisions: usize,
    /// Probability that a downbeat becomes a cut.
    pub cut_fraction: f64,
    pub max_cuts: usize,
    /// Standard deviation of additive white noise.
    pub noise_level: f32,
    /// Per-audio click gain is log-uniform in this range.
    pub min_click_gain: f32,
    pub max_click_gain: f32,
    /// Gain multiplier of clicks on cut points.
    pub accent: f32,
    /// Fixed time of the first downbeat; random within one bar when `None`.
    pub beat_offset_s: Option<f64>,
    /// Annotated cut times deviate from the accented click by a uniform
    /// offset of at most this many seconds.
    #[serde(default)]
    pub annotation_jitter_s: f64,
    pub sample_rate: u32,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            n_audios: 200,
            min_duration_s: 6.0,
            max_duration_s: 10.0,
            min_bpm: 90.0,
            max_bpm: 150.0,
            beats_per_bar: 4,
            subdivisions: 4,
            cut_fraction: 0.5,
            max_cuts: 8,
            noise_level: 0.01,
            min_click_gain: 0.1,
            max_click_gain: 0.35,
            accent: 2.5,
            beat_offset_s: None,
            annotation_jitter_s: 0.0,
            sample_rate: CANONICAL_RATE,
            seed: 0,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.to_string()));
        if !(self.min_duration_s > 0.0 && self.max_duration_s >= self.min_duration_s) {
            return bad("durations must be positive with min <= max");
        }
        if !(self.min_bpm > 0.0 && self.max_bpm >= self.min_bpm) {
            return bad("tempo range must be positive with min <= max");
        }
        if !(self.cut_fraction >= 0.0 && self.cut_fraction <= 1.0) {
            return bad("cut fraction must lie in [0, 1]");
        }
        if self.beats_per_bar == 0 || self.subdivisions == 0 || self.sample_rate == 0 {
            return bad("beats_per_bar, subdivisions and sample_rate must be positive");
        }
        if !(self.min_click_gain > 0.0 && self.max_click_gain >= self.min_click_gain && self.accent > 0.0) {
            return bad("click gains and accent must be positive with min <= max");
        }
        if self.noise_level < 0.0 {
            return bad("noise level must be non-negative");
        }
        if !(self.annotation_jitter_s >= 0.0 && self.annotation_jitter_s.is_finite()) {
            return bad("annotation jitter must be finite and non-negative");
        }
        Ok(())
    }

    /// Generator for audio `index`: one independent stream per audio.
    pub fn rng_for(&self, index: usize) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(index as u64);
        rng
    }
}

const CLICK_SECONDS: f64 = 0.04;
const CLICK_HZ: f64 = 2200.0;

fn add_click(buf: &mut [f32], sr: f64, at: f64, gain: f32) {
    let start = (at * sr).round() as usize;
    let len = (CLICK_SECONDS * sr) as usize;
    for i in 0..len {
        let Some(slot) = buf.get_mut(start + i) else { break };
        let t = i as f64 / sr;
        let env = (-t / (CLICK_SECONDS / 5.0)).exp();
        *slot += gain * (env * (2.0 * PI * CLICK_HZ * t).sin()) as f32;
    }
}

/// One synthetic audio and its cut times in seconds (ascending).
pub fn generate_audio<R: Rng>(spec: &SynthSpec, rng: &mut R) -> Result<(SignalBuffer, Vec<f64>)> {
    spec.validate()?;
    let sr = spec.sample_rate as f64;
    let duration = rng.random_range(spec.min_duration_s..=spec.max_duration_s);
    let n = ((duration * sr).round() as usize).max(1);
    let duration = n as f64 / sr;
    let bpm = rng.random_range(spec.min_bpm..=spec.max_bpm);
    let beat = 60.0 / bpm;
    let bar = beat * spec.beats_per_bar as f64;
    let offset = match spec.beat_offset_s {
        Some(o) => o,
        None => rng.random_range(0.0..bar),
    };
    if offset >= duration {
        return Err(Error::NoBeats);
    }
    let downbeats = (0..).map(|j| offset + j as f64 * bar).take_while(|&t| t < duration);
    let mut cuts: Vec<f64> = downbeats.filter(|_| rng.random_bool(spec.cut_fraction)).collect();
    while cuts.len() > spec.max_cuts {
        let drop = rng.random_range(0..cuts.len());
        cuts.remove(drop);
    }

    let mut buf = vec![0.0f32; n];
    let bed_gain = rng.random_range(0.005..0.02);
    for _ in 0..3 {
        let f = rng.random_range(110.0..440.0);
        let phase = rng.random_range(0.0..2.0 * PI);
        let lfo = rng.random_range(0.1..0.5);
        for (i, s) in buf.iter_mut().enumerate() {
            let t = i as f64 / sr;
            let amp = 0.75 + 0.25 * (2.0 * PI * lfo * t).sin();
            *s += (bed_gain * amp * (2.0 * PI * f * t + phase).sin()) as f32;
        }
    }
    if spec.noise_level > 0.0 {
        let normal = Normal::new(0.0f32, spec.noise_level).expect("finite std");
        buf.iter_mut().for_each(|s| *s += normal.sample(rng));
    }

    let (lo, hi) = (spec.min_click_gain.ln(), spec.max_click_gain.ln());
    let gain = rng.random_range(lo..=hi).exp();
    let tick = beat / spec.subdivisions as f64;
    let first = offset - (offset / tick).floor() * tick;
    let mut c = 0;
    for t in (0..).map(|m| first + m as f64 * tick).take_while(|&t| t < duration) {
        let jitter = rng.random_range(0.85f32..1.15);
        while c < cuts.len() && cuts[c] < t - tick / 2.0 {
            c += 1;
        }
        let is_cut = c < cuts.len() && (cuts[c] - t).abs() < tick / 2.0;
        let g = if is_cut { gain * spec.accent } else { gain } * jitter;
        add_click(&mut buf, sr, t, g);
    }
    buf.iter_mut().for_each(|s| *s = s.clamp(-1.0, 1.0));
    if spec.annotation_jitter_s > 0.0 {
        let j = spec.annotation_jitter_s;
        cuts.iter_mut().for_each(|c| *c = (*c + rng.random_range(-j..=j)).clamp(0.0, duration));
        cuts.sort_by(f64::total_cmp);
    }
    Ok((SignalBuffer::new(buf, spec.sample_rate)?, cuts))
}

/// Writes `n_audios` WAV files and `manifest.jsonl` into `out_dir`.
pub fn generate_dataset(spec: &SynthSpec, out_dir: &Path) -> Result<PathBuf> {
    spec.validate()?;
    std::fs::create_dir_all(out_dir)?;
    let mut records = Vec::with_capacity(spec.n_audios);
    for i in 0..spec.n_audios {
        let (sig, cuts) = generate_audio(spec, &mut spec.rng_for(i))?;
        let id = format!("synth_{i:05}");
        let wav = format!("{id}.wav");
        write_wav(&out_dir.join(&wav), &sig)?;
        records.push(ManifestRecord { id, wav, duration_s: sig.duration_s(), cuts_s: cuts });
    }
    let manifest = out_dir.join("manifest.jsonl");
    write_manifest(&manifest, &records)?;
    Ok(manifest)
}
