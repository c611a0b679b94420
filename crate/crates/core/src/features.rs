//! Time-wise feature extraction: per-unit mel cepstrum, short-term energy
//! and raw-signal projection, each embedded to `proj_dim` channels and
//! concatenated in (mel, energy, raw) order.

use std::sync::Arc;

use rand::Rng;
use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::audio::TimeUnitSequence;
use crate::error::{Error, Result};
use crate::layers;
use crate::tensor::{Graph, ParamStore, Tensor, Var};

/// Floor added before the logarithm of filterbank energies.
pub const LOG_FLOOR: f64 = 1e-10;

/// Fixed scale applied to cepstra before the convolutional embedding.
pub const MEL_INPUT_SCALE: f32 = 0.25;

/// Scaled cepstra are clipped to `±MEL_INPUT_CLIP` so silent frames, whose
/// zeroth coefficient sits at the log floor, stay bounded.
pub const MEL_INPUT_CLIP: f32 = 8.0;

/// Reference level of the energy compression `ln(1 + e / ENERGY_REF)`.
pub const ENERGY_REF: f32 = 1e-3;

/// Analysis settings for [`mel_cepstrum`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MelConfig {
    pub sample_rate: u32,
    pub n_fft: usize,
    pub hop: usize,
    pub n_mels: usize,
    pub n_ceps: usize,
    pub fmin: f64,
    /// Upper filterbank edge; `None` means Nyquist.
    pub fmax: Option<f64>,
}

impl Default for MelConfig {
    fn default() -> Self {
        Self { sample_rate: 16_000, n_fft: 400, hop: 160, n_mels: 40, n_ceps: 13, fmin: 0.0, fmax: None }
    }
}

impl MelConfig {
    pub fn fmax_hz(&self) -> f64 {
        self.fmax.unwrap_or(self.sample_rate as f64 / 2.0)
    }

    pub fn validate(&self) -> Result<()> {
        let nyquist = self.sample_rate as f64 / 2.0;
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.n_fft == 0 || self.hop == 0 || self.sample_rate == 0 {
            return bad("n_fft, hop and sample_rate must be positive".into());
        }
        if self.n_ceps == 0 || self.n_mels < self.n_ceps {
            return bad(format!("need 0 < n_ceps <= n_mels, got {} and {}", self.n_ceps, self.n_mels));
        }
        if self.fmax_hz() > nyquist {
            return bad(format!("fmax {} exceeds Nyquist {nyquist}", self.fmax_hz()));
        }
        if !(self.fmin >= 0.0 && self.fmin < self.fmax_hz()) {
            return bad(format!("need 0 <= fmin < fmax, got {} and {}", self.fmin, self.fmax_hz()));
        }
        Ok(())
    }

    /// Frames covering `len` samples; shorter inputs are padded to one frame.
    pub fn n_frames(&self, len: usize) -> usize {
        frame_count(len, self.n_fft, self.hop)
    }
}

fn frame_count(len: usize, frame: usize, hop: usize) -> usize {
    if len <= frame {
        1
    } else {
        1 + (len - frame) / hop
    }
}

/// Frame `f` of `x`, zero-padded to `frame` samples.
fn frame_of(x: &[f32], f: usize, frame: usize, hop: usize) -> impl Iterator<Item = f32> + '_ {
    let start = f * hop;
    (0..frame).map(move |i| x.get(start + i).copied().unwrap_or(0.0))
}

pub fn hz_to_mel(f: f64) -> f64 {
    2595.0 * (1.0 + f / 700.0).log10()
}

pub fn mel_to_hz(m: f64) -> f64 {
    700.0 * (10f64.powf(m / 2595.0) - 1.0)
}

/// Precomputed FFT plan, window, filterbank and DCT for one [`MelConfig`].
#[derive(Clone)]
pub struct MelExtractor {
    cfg: MelConfig,
    fft: Arc<dyn Fft<f32>>,
    window: Vec<f32>,
    /// Per filter: first FFT bin and its triangular weights.
    filters: Vec<(usize, Vec<f32>)>,
    /// Corner frequencies (n_mels + 2 points) in Hz.
    edges_hz: Vec<f64>,
    /// Orthonormal type-II DCT, `n_ceps × n_mels`.
    dct: Vec<f64>,
}

impl std::fmt::Debug for MelExtractor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("MelExtractor").field("cfg", &self.cfg).finish_non_exhaustive()
    }
}

impl MelExtractor {
    pub fn new(cfg: MelConfig) -> Result<Self> {
        cfg.validate()?;
        let n = cfg.n_fft;
        let window = (0..n)
            .map(|i| (0.5 - 0.5 * (2.0 * std::f64::consts::PI * i as f64 / n as f64).cos()) as f32)
            .collect();
        let (lo, hi) = (hz_to_mel(cfg.fmin), hz_to_mel(cfg.fmax_hz()));
        let edges_hz: Vec<f64> = (0..cfg.n_mels + 2)
            .map(|i| mel_to_hz(lo + (hi - lo) * i as f64 / (cfg.n_mels + 1) as f64))
            .collect();
        let n_bins = n / 2 + 1;
        let bin_hz = cfg.sample_rate as f64 / n as f64;
        let filters = (0..cfg.n_mels)
            .map(|m| {
                let w: Vec<f32> = (0..n_bins).map(|b| triangle(&edges_hz[m..m + 3], b as f64 * bin_hz) as f32).collect();
                let first = w.iter().position(|&v| v > 0.0).unwrap_or(0);
                let last = w.iter().rposition(|&v| v > 0.0).map_or(first, |l| l + 1);
                (first, w[first..last].to_vec())
            })
            .collect();
        let (nm, nc) = (cfg.n_mels, cfg.n_ceps);
        let mut dct = vec![0.0; nc * nm];
        for k in 0..nc {
            let s = if k == 0 { (1.0 / nm as f64).sqrt() } else { (2.0 / nm as f64).sqrt() };
            for i in 0..nm {
                dct[k * nm + i] = s * (std::f64::consts::PI * k as f64 * (2 * i + 1) as f64 / (2 * nm) as f64).cos();
            }
        }
        let fft = FftPlanner::new().plan_fft_forward(n);
        Ok(Self { cfg, fft, window, filters, edges_hz, dct })
    }

    pub fn config(&self) -> &MelConfig {
        &self.cfg
    }

    /// Weight of mel filter `m` at frequency `hz`.
    pub fn filter_weight(&self, m: usize, hz: f64) -> f64 {
        triangle(&self.edges_hz[m..m + 3], hz)
    }

    /// Magnitude spectra (`n_fft/2 + 1` bins) of every Hann-windowed frame.
    pub fn magnitude_frames(&self, unit: &[f32]) -> Vec<Vec<f32>> {
        let (n, hop) = (self.cfg.n_fft, self.cfg.hop);
        let mut buf = vec![Complex::new(0.0f32, 0.0); n];
        (0..self.cfg.n_frames(unit.len()))
            .map(|f| {
                for ((slot, x), w) in buf.iter_mut().zip(frame_of(unit, f, n, hop)).zip(&self.window) {
                    *slot = Complex::new(x * w, 0.0);
                }
                self.fft.process(&mut buf);
                buf[..n / 2 + 1].iter().map(|c| c.norm()).collect()
            })
            .collect()
    }

    /// Mel filterbank energies, `[frames × n_mels]`.
    pub fn filterbank_energies(&self, unit: &[f32]) -> Tensor {
        let frames = self.magnitude_frames(unit);
        let nm = self.cfg.n_mels;
        let mut out = Vec::with_capacity(frames.len() * nm);
        for spec in &frames {
            for (first, w) in &self.filters {
                out.push(w.iter().zip(&spec[*first..]).map(|(a, b)| a * b).sum::<f32>());
            }
        }
        Tensor::new(&[frames.len(), nm], out).expect("frames >= 1")
    }

    fn dct_of_log(&self, energies: &[f32], out: &mut Vec<f32>) {
        let nm = self.cfg.n_mels;
        let logs: Vec<f64> = energies.iter().map(|&e| (e as f64 + LOG_FLOOR).ln()).collect();
        for k in 0..self.cfg.n_ceps {
            out.push(self.dct[k * nm..(k + 1) * nm].iter().zip(&logs).map(|(a, b)| a * b).sum::<f64>() as f32);
        }
    }

    /// Cepstral coefficients, `[frames × n_ceps]`.
    pub fn cepstrum(&self, unit: &[f32]) -> Tensor {
        let fb = self.filterbank_energies(unit);
        let frames = fb.shape()[0];
        let mut out = Vec::with_capacity(frames * self.cfg.n_ceps);
        for row in fb.data().chunks(self.cfg.n_mels) {
            self.dct_of_log(row, &mut out);
        }
        Tensor::new(&[frames, self.cfg.n_ceps], out).expect("frames >= 1")
    }

    /// Cepstrum of a silent frame: the transform of a constant `ln ε` vector.
    pub fn silence_floor(&self) -> Vec<f32> {
        let mut out = Vec::with_capacity(self.cfg.n_ceps);
        self.dct_of_log(&vec![0.0; self.cfg.n_mels], &mut out);
        out
    }
}

fn triangle(edges: &[f64], hz: f64) -> f64 {
    let (l, c, r) = (edges[0], edges[1], edges[2]);
    if hz <= l || hz >= r {
        0.0
    } else if hz <= c {
        (hz - l) / (c - l)
    } else {
        (r - hz) / (r - c)
    }
}

/// Hann → |FFT| → mel filterbank → `ln(· + ε)` → DCT-II, keeping `n_ceps`.
pub fn mel_cepstrum(unit: &[f32], cfg: &MelConfig) -> Result<Tensor> {
    Ok(MelExtractor::new(*cfg)?.cepstrum(unit))
}

/// Per-frame mean of squared samples (frames zero-padded to `frame`).
pub fn short_term_energy(unit: &[f32], frame: usize, hop: usize) -> Result<Tensor> {
    if frame == 0 || hop == 0 {
        return Err(Error::InvalidConfig("frame and hop must be positive".into()));
    }
    let n = frame_count(unit.len(), frame, hop);
    let e = (0..n).map(|f| frame_of(unit, f, frame, hop).map(|x| x * x).sum::<f32>() / frame as f32).collect();
    Tensor::new(&[n], e)
}

/// Which descriptors feed the feature vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct FeatureSources {
    pub mel: bool,
    pub energy: bool,
    pub raw: bool,
}

impl Default for FeatureSources {
    fn default() -> Self {
        Self::ALL
    }
}

impl FeatureSources {
    pub const ALL: Self = Self { mel: true, energy: true, raw: true };

    pub fn count(&self) -> usize {
        usize::from(self.mel) + usize::from(self.energy) + usize::from(self.raw)
    }

    /// Parses a comma-separated subset of `mel`, `energy`, `raw`.
    pub fn parse(s: &str) -> Result<Self> {
        let mut out = Self { mel: false, energy: false, raw: false };
        for part in s.split(',').map(str::trim).filter(|p| !p.is_empty()) {
            match part {
                "mel" => out.mel = true,
                "energy" => out.energy = true,
                "raw" => out.raw = true,
                other => return Err(Error::InvalidConfig(format!("unknown feature source `{other}`"))),
            }
        }
        out.check()?;
        Ok(out)
    }

    pub fn check(&self) -> Result<()> {
        if self.count() == 0 {
            return Err(Error::InvalidConfig("at least one feature source must be active".into()));
        }
        Ok(())
    }

    pub fn label(&self) -> String {
        let names: Vec<&str> = [(self.mel, "mel"), (self.energy, "energy"), (self.raw, "raw")]
            .iter()
            .filter(|(on, _)| *on)
            .map(|(_, n)| *n)
            .collect();
        names.join(",")
    }
}

/// Shape settings of the feature extractor.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TfeConfig {
    pub sources: FeatureSources,
    /// Channels per source.
    pub proj_dim: usize,
    /// Channels of the residual conv blocks in the mel branch.
    pub mel_width: usize,
    /// Samples per time unit.
    pub unit_len: usize,
    pub mel: MelConfig,
}

impl TfeConfig {
    pub fn out_dim(&self) -> usize {
        self.proj_dim * self.sources.count()
    }

    pub fn n_frames(&self) -> usize {
        self.mel.n_frames(self.unit_len)
    }

    pub fn validate(&self) -> Result<()> {
        self.sources.check()?;
        self.mel.validate()?;
        if self.proj_dim == 0 || self.mel_width == 0 || self.unit_len == 0 {
            return Err(Error::InvalidConfig("proj_dim, mel_width and unit_len must be positive".into()));
        }
        Ok(())
    }
}

/// Registers every feature-extractor parameter under the `tfe.` prefix.
pub fn init_tfe<R: Rng>(store: &mut ParamStore, cfg: &TfeConfig, rng: &mut R) -> Result<()> {
    cfg.validate()?;
    let (w, p) = (cfg.mel_width, cfg.proj_dim);
    if cfg.sources.mel {
        layers::init_conv3x3(store, rng, "tfe.mel.stem", 1, w)?;
        for blk in 0..2 {
            for c in 0..2 {
                layers::init_conv3x3(store, rng, &format!("tfe.mel.block{blk}.conv{c}"), w, w)?;
                layers::init_layer_norm(store, rng, &format!("tfe.mel.block{blk}.ln{c}"), w)?;
            }
        }
        layers::init_linear(store, rng, "tfe.mel.out", cfg.mel.n_ceps * w, p, false)?;
    }
    if cfg.sources.energy {
        layers::init_linear(store, rng, "tfe.energy", cfg.n_frames(), p, true)?;
    }
    if cfg.sources.raw {
        layers::init_linear(store, rng, "tfe.raw", cfg.unit_len, p, true)?;
    }
    Ok(())
}

/// Fixed (non-learned) per-unit inputs of the feature extractor, computed
/// once per audio and reused across epochs.
#[derive(Debug, Clone, PartialEq)]
pub struct UnitInputs {
    n_units: usize,
    /// Scaled cepstra `[N × frames × n_ceps × 1]`.
    mel: Option<Tensor>,
    /// Compressed energies `[N × frames]`.
    energy: Option<Tensor>,
    /// Unit samples `[N × unit_len]`.
    raw: Option<Tensor>,
}

impl UnitInputs {
    pub fn n_units(&self) -> usize {
        self.n_units
    }

    /// Restricts to the units listed in `rows` (in order).
    pub fn select(&self, rows: &[usize]) -> Self {
        let pick = |t: &Option<Tensor>| {
            t.as_ref().map(|t| {
                let row = t.numel() / self.n_units;
                let mut shape = t.shape().to_vec();
                shape[0] = rows.len();
                let data = rows.iter().flat_map(|&r| t.data()[r * row..(r + 1) * row].iter().copied()).collect();
                Tensor::new(&shape, data).expect("row gather keeps shape")
            })
        };
        Self { n_units: rows.len(), mel: pick(&self.mel), energy: pick(&self.energy), raw: pick(&self.raw) }
    }
}

/// Computes the fixed per-unit descriptors of every active source.
pub fn prepare_inputs(seq: &TimeUnitSequence, cfg: &TfeConfig, mel: &MelExtractor) -> Result<UnitInputs> {
    cfg.validate()?;
    if seq.unit_len() != cfg.unit_len {
        return Err(Error::LengthMismatch { expected: cfg.unit_len, got: seq.unit_len() });
    }
    let n = seq.n_units();
    let frames = cfg.n_frames();
    let mel_t = if cfg.sources.mel {
        let nc = cfg.mel.n_ceps;
        let mut data = Vec::with_capacity(n * frames * nc);
        for u in seq.units() {
            let c = mel.cepstrum(u);
            data.extend(c.data().iter().map(|v| (v * MEL_INPUT_SCALE).clamp(-MEL_INPUT_CLIP, MEL_INPUT_CLIP)));
        }
        Some(Tensor::new(&[n, frames, nc, 1], data)?)
    } else {
        None
    };
    let energy_t = if cfg.sources.energy {
        let mut data = Vec::with_capacity(n * frames);
        for u in seq.units() {
            let e = short_term_energy(u, cfg.mel.n_fft, cfg.mel.hop)?;
            data.extend(e.data().iter().map(|&v| (1.0 + v / ENERGY_REF).ln()));
        }
        Some(Tensor::new(&[n, frames], data)?)
    } else {
        None
    };
    let raw_t = if cfg.sources.raw {
        Some(Tensor::new(&[n, cfg.unit_len], seq.padded_samples().to_vec())?)
    } else {
        None
    };
    Ok(UnitInputs { n_units: n, mel: mel_t, energy: energy_t, raw: raw_t })
}

/// Mel branch: stem conv, two residual blocks, average pool over frames,
/// linear over the flattened (coefficient, channel) map.
pub fn mel_embed(g: &mut Graph, store: &ParamStore, mel: Var) -> Result<Var> {
    let (n, h, w) = match *g.shape(mel) {
        [n, h, w, 1] => (n, h, w),
        ref s => return Err(Error::Shape(format!("mel input must be [N×frames×ceps×1], got {s:?}"))),
    };
    let mut x = layers::conv3x3(g, store, "tfe.mel.stem", mel)?;
    x = g.relu(x);
    for blk in 0..2 {
        let p = format!("tfe.mel.block{blk}");
        let mut h1 = layers::conv3x3(g, store, &format!("{p}.conv0"), x)?;
        h1 = layers::map_norm(g, store, &format!("{p}.ln0"), h1)?;
        h1 = g.relu(h1);
        h1 = layers::conv3x3(g, store, &format!("{p}.conv1"), h1)?;
        h1 = layers::map_norm(g, store, &format!("{p}.ln1"), h1)?;
        let sum = g.add(h1, x)?;
        x = g.relu(sum);
    }
    let width = *g.shape(x).last().expect("rank 4");
    let flat = g.reshape(x, &[n, h, w * width])?;
    let pooled = g.mean_axis1(flat)?;
    layers::linear(g, store, "tfe.mel.out", pooled)
}

/// Energy branch: `ReLU(W·e + b)`.
pub fn energy_embed(g: &mut Graph, store: &ParamStore, energy: Var) -> Result<Var> {
    let y = layers::linear(g, store, "tfe.energy", energy)?;
    Ok(g.relu(y))
}

/// Raw branch: `ReLU(W·unit + b)`.
pub fn raw_project(g: &mut Graph, store: &ParamStore, raw: Var) -> Result<Var> {
    let want = store.get("tfe.raw.w").map(|t| t.shape()[0]);
    let got = *g.shape(raw).last().expect("rank >= 1");
    if let Some(want) = want {
        if want != got {
            return Err(Error::LengthMismatch { expected: want, got });
        }
    }
    let y = layers::linear(g, store, "tfe.raw", raw)?;
    Ok(g.relu(y))
}

/// Feature rows `[N × C]` of one audio with channels in (mel, energy, raw)
/// order restricted to the sources present in `inputs`.
pub fn tfe_graph(g: &mut Graph, store: &ParamStore, inputs: &UnitInputs) -> Result<Var> {
    let mut parts = Vec::with_capacity(3);
    if let Some(m) = &inputs.mel {
        let v = g.leaf(m);
        parts.push(mel_embed(g, store, v)?);
    }
    if let Some(e) = &inputs.energy {
        let v = g.leaf(e);
        parts.push(energy_embed(g, store, v)?);
    }
    if let Some(r) = &inputs.raw {
        let v = g.leaf(r);
        parts.push(raw_project(g, store, v)?);
    }
    match parts.len() {
        0 => Err(Error::InvalidConfig("at least one feature source must be active".into())),
        1 => Ok(parts[0]),
        _ => g.concat_cols(&parts),
    }
}

/// Per-unit feature matrix together with the sources that produced it.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    pub values: Tensor,
    pub sources: FeatureSources,
}

impl FeatureMatrix {
    pub fn rows(&self) -> usize {
        self.values.shape()[0]
    }

    pub fn channels(&self) -> usize {
        self.values.shape()[1]
    }
}

/// Evaluates the feature extractor on a whole sequence.
pub fn tfe_forward(seq: &TimeUnitSequence, store: &ParamStore, cfg: &TfeConfig) -> Result<FeatureMatrix> {
    let inputs = prepare_inputs(seq, cfg, &MelExtractor::new(cfg.mel)?)?;
    let mut g = Graph::new();
    let v = tfe_graph(&mut g, store, &inputs)?;
    Ok(FeatureMatrix { values: g.tensor(v), sources: cfg.sources })
}

/// Zeroes the final mel linear layer (used by tests and diagnostics).
pub fn zero_mel_output(store: &mut ParamStore) {
    for name in ["tfe.mel.out.w", "tfe.mel.out.b"] {
        if let Some(t) = store.get_mut(name) {
            t.data_mut().fill(0.0);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::audio::{split_time_units, SignalBuffer};
    use approx::assert_abs_diff_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn sine(freq: f64, amp: f32, len: usize) -> Vec<f32> {
        (0..len).map(|i| amp * (2.0 * std::f64::consts::PI * freq * i as f64 / 16_000.0).sin() as f32).collect()
    }

    fn desk_cfg(sources: FeatureSources) -> TfeConfig {
        TfeConfig { sources, proj_dim: 128, mel_width: 4, unit_len: 1600, mel: MelConfig::default() }
    }

    #[test]
    fn config_validation() {
        let bad = MelConfig { n_mels: 10, n_ceps: 13, ..MelConfig::default() };
        assert!(matches!(bad.validate(), Err(Error::InvalidConfig(_))));
        let bad = MelConfig { fmax: Some(9000.0), ..MelConfig::default() };
        assert!(matches!(MelExtractor::new(bad), Err(Error::InvalidConfig(_))));
        assert_eq!(MelConfig::default().n_frames(1600), 8);
        assert_eq!(MelConfig::default().n_frames(100), 1);
    }

    #[test]
    fn zero_unit_gives_floor_cepstrum() {
        let c = mel_cepstrum(&[0.0; 1600], &MelConfig::default()).unwrap();
        assert_eq!(c.shape(), &[8, 13]);
        let floor = (LOG_FLOOR).ln() * (40f64).sqrt();
        for row in c.data().chunks(13) {
            assert_abs_diff_eq!(row[0] as f64, floor, epsilon = 1e-4);
            assert!(row[1..].iter().all(|v| v.abs() < 1e-4));
        }
    }

    #[test]
    fn magnitude_matches_naive_dft() {
        let ex = MelExtractor::new(MelConfig::default()).unwrap();
        let x: Vec<f32> = (0..400).map(|i| ((i * 37 % 101) as f32 / 50.0) - 1.0).collect();
        let got = &ex.magnitude_frames(&x)[0];
        for k in [0usize, 1, 17, 100, 200] {
            let (mut re, mut im) = (0.0f64, 0.0f64);
            for (t, &v) in x.iter().enumerate() {
                let w = 0.5 - 0.5 * (2.0 * std::f64::consts::PI * t as f64 / 400.0).cos();
                let ph = -2.0 * std::f64::consts::PI * (k * t) as f64 / 400.0;
                re += v as f64 * w * ph.cos();
                im += v as f64 * w * ph.sin();
            }
            assert_abs_diff_eq!(got[k] as f64, (re * re + im * im).sqrt(), epsilon = 1e-3);
        }
    }

    #[test]
    fn sine_peaks_in_its_filter() {
        let ex = MelExtractor::new(MelConfig::default()).unwrap();
        let fb = ex.filterbank_energies(&sine(1000.0, 0.5, 1600));
        let row = &fb.data()[40 * 3..40 * 4];
        let best = (0..40).max_by(|&a, &b| row[a].total_cmp(&row[b])).unwrap();
        let owner = (0..40).max_by(|&a, &b| ex.filter_weight(a, 1000.0).total_cmp(&ex.filter_weight(b, 1000.0))).unwrap();
        assert!(ex.filter_weight(best, 1000.0) > 0.0);
        assert_eq!(best, owner);
    }

    #[test]
    fn doubling_amplitude_shifts_only_c0() {
        let cfg = MelConfig::default();
        let x = sine(700.0, 0.2, 1600);
        let y: Vec<f32> = x.iter().map(|v| 2.0 * v).collect();
        let (a, b) = (mel_cepstrum(&x, &cfg).unwrap(), mel_cepstrum(&y, &cfg).unwrap());
        for (ra, rb) in a.data().chunks(13).zip(b.data().chunks(13)) {
            assert_abs_diff_eq!((rb[0] - ra[0]) as f64, (2f64).ln() * (40f64).sqrt(), epsilon = 1e-3);
            for j in 1..13 {
                assert_abs_diff_eq!(ra[j], rb[j], epsilon = 1e-4);
            }
        }
    }

    #[test]
    fn energy_examples() {
        let e = short_term_energy(&[0.0; 1600], 400, 160).unwrap();
        assert!(e.data().iter().all(|&v| v == 0.0));
        let e = short_term_energy(&[0.3; 1600], 400, 160).unwrap();
        assert!(e.data().iter().all(|&v| (v - 0.09).abs() < 1e-6));
        let e = short_term_energy(&sine(2000.0, 1.0, 1600), 400, 160).unwrap();
        assert!(e.data().iter().all(|&v| (v - 0.5).abs() < 1e-2));
    }

    fn seq(n_units: usize, seed: u64) -> TimeUnitSequence {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let s: Vec<f32> = (0..n_units * 1600).map(|_| rng.random_range(-0.5..0.5)).collect();
        split_time_units(&SignalBuffer::new(s, 16_000).unwrap(), 0.1).unwrap()
    }

    fn store(cfg: &TfeConfig) -> ParamStore {
        let mut s = ParamStore::new();
        init_tfe(&mut s, cfg, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        s
    }

    #[test]
    fn feature_dims_follow_sources() {
        let all = desk_cfg(FeatureSources::ALL);
        let f = tfe_forward(&seq(3, 1), &store(&all), &all).unwrap();
        assert_eq!((f.rows(), f.channels()), (3, 384));
        let only_e = desk_cfg(FeatureSources::parse("energy").unwrap());
        let f = tfe_forward(&seq(3, 1), &store(&only_e), &only_e).unwrap();
        assert_eq!(f.channels(), 128);
        assert!(FeatureSources::parse("").is_err());
        assert!(FeatureSources::parse("mel,pitch").is_err());
        assert_eq!(FeatureSources::parse("raw, mel").unwrap().label(), "mel,raw");
    }

    #[test]
    fn branch_examples() {
        let cfg = desk_cfg(FeatureSources::ALL);
        let mut s = store(&cfg);
        zero_mel_output(&mut s);
        let f = tfe_forward(&seq(2, 5), &s, &cfg).unwrap();
        for r in 0..2 {
            assert!(f.values.data()[r * 384..r * 384 + 128].iter().all(|&v| v == 0.0));
            assert!(f.values.data()[r * 384 + 128..(r + 1) * 384].iter().all(|&v| v >= 0.0));
        }

        let silent = split_time_units(&SignalBuffer::new(vec![0.0; 1600], 16_000).unwrap(), 0.1).unwrap();
        let raw_only = desk_cfg(FeatureSources::parse("raw").unwrap());
        let f = tfe_forward(&silent, &store(&raw_only), &raw_only).unwrap();
        assert!(f.values.data().iter().all(|&v| v == 0.0));

        let mut g = Graph::new();
        let wrong = g.leaf(&Tensor::zeros(&[1, 800]));
        assert!(matches!(raw_project(&mut g, &store(&raw_only), wrong), Err(Error::LengthMismatch { .. })));
    }

    #[test]
    fn raw_projection_is_homogeneous_before_relu() {
        let cfg = desk_cfg(FeatureSources::parse("raw").unwrap());
        let s = store(&cfg);
        let x = Tensor::from_fn(&[1, 1600], |i| ((i * 13 % 29) as f32 / 29.0) - 0.5);
        let x2 = Tensor::from_fn(&[1, 1600], |i| 2.0 * x.data()[i]);
        let pre = |t: &Tensor| {
            let mut g = Graph::new();
            let v = g.leaf(t);
            let y = layers::linear(&mut g, &s, "tfe.raw", v).unwrap();
            g.value(y).to_vec()
        };
        for (a, b) in pre(&x).iter().zip(pre(&x2)) {
            assert_abs_diff_eq!(2.0 * a, b, epsilon = 1e-5);
        }
    }

    #[test]
    fn rows_are_independent_and_deterministic() {
        let cfg = desk_cfg(FeatureSources::ALL);
        let s = store(&cfg);
        let base = seq(5, 9);
        let f0 = tfe_forward(&base, &s, &cfg).unwrap();
        assert_eq!(f0, tfe_forward(&base, &s, &cfg).unwrap());

        let order = [3, 0, 4, 1, 2];
        let fp = tfe_forward(&base.permuted(&order), &s, &cfg).unwrap();
        for (i, &src) in order.iter().enumerate() {
            assert_eq!(&fp.values.data()[i * 384..(i + 1) * 384], &f0.values.data()[src * 384..(src + 1) * 384]);
        }

        let mut units: Vec<Vec<f32>> = base.units().map(<[f32]>::to_vec).collect();
        units[2].iter_mut().for_each(|v| *v *= -0.5);
        let pert = TimeUnitSequence::from_units(units, 0.1, 16_000).unwrap();
        let f1 = tfe_forward(&pert, &s, &cfg).unwrap();
        for r in [0, 1, 3, 4] {
            assert_eq!(&f1.values.data()[r * 384..(r + 1) * 384], &f0.values.data()[r * 384..(r + 1) * 384]);
        }
        assert_ne!(&f1.values.data()[2 * 384..3 * 384], &f0.values.data()[2 * 384..3 * 384]);
    }
}
