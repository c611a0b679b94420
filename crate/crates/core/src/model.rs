//! BeatX and the comparison baselines behind one interface.
//!
//! Every kind consumes the same per-unit feature rows from
//! [`crate::features`] and ends in a per-unit sigmoid:
//!
//! * `beatx`: features → local context fusion → low-rank global fusion → head
//! * `linear`: four linear layers applied to each unit on its own
//! * `cnn1d`: four width-3 convolutions along the unit axis, two linear layers
//! * `encoder`: a stack of exact global attention layers

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{self, check_heads, LgfConfig, PredictionVector, N_MAX};
use crate::audio::{unit_len_for, TimeUnitSequence, CANONICAL_RATE, DEFAULT_UNIT_SECONDS};
use crate::context::{self, LcgConfig};
use crate::error::{Error, Result};
use crate::features::{self, FeatureSources, MelConfig, MelExtractor, TfeConfig, UnitInputs};
use crate::layers;
use crate::tensor::{read_checkpoint, write_checkpoint, Graph, ParamStore, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    Beatx,
    Linear,
    Cnn1d,
    Encoder,
}

impl ModelKind {
    pub const ALL: [ModelKind; 4] = [ModelKind::Beatx, ModelKind::Linear, ModelKind::Cnn1d, ModelKind::Encoder];

    pub fn name(self) -> &'static str {
        match self {
            ModelKind::Beatx => "beatx",
            ModelKind::Linear => "linear",
            ModelKind::Cnn1d => "cnn1d",
            ModelKind::Encoder => "encoder",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::InvalidConfig(format!("unknown model kind `{s}` (beatx, linear, cnn1d, encoder)")))
    }
}

/// Global exact-attention baseline settings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub layers: usize,
    pub heads: usize,
    pub ffn: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub kind: ModelKind,
    pub sources: FeatureSources,
    /// Channels per feature source.
    pub proj_dim: usize,
    pub mel_width: usize,
    pub unit_seconds: f64,
    pub sample_rate: u32,
    pub lcg: LcgConfig,
    pub lgf: LgfConfig,
    pub encoder: EncoderConfig,
    /// Hidden width of the linear and cnn1d baselines.
    pub hidden: usize,
    pub seed: u64,
}

impl ModelConfig {
    /// Small preset for CPU training: 32 channels per source.
    pub fn desk(kind: ModelKind) -> Self {
        Self {
            kind,
            sources: FeatureSources::ALL,
            proj_dim: 32,
            mel_width: 8,
            unit_seconds: DEFAULT_UNIT_SECONDS,
            sample_rate: CANONICAL_RATE,
            lcg: LcgConfig { k: 5, layers: 2, heads: 4, ffn: 128 },
            lgf: LgfConfig { layers: 1, heads: 4, ffn: 128, p: 32, n_max: N_MAX },
            encoder: EncoderConfig { layers: 4, heads: 8, ffn: 128 },
            hidden: 96,
            seed: 0,
        }
    }

    /// Full-width preset: 128 channels per source, 512-wide feed-forwards.
    pub fn full(kind: ModelKind) -> Self {
        Self {
            kind,
            sources: FeatureSources::ALL,
            proj_dim: 128,
            mel_width: 64,
            unit_seconds: DEFAULT_UNIT_SECONDS,
            sample_rate: CANONICAL_RATE,
            lcg: LcgConfig { k: 5, layers: 2, heads: 4, ffn: 512 },
            lgf: LgfConfig { layers: 1, heads: 4, ffn: 512, p: 256, n_max: N_MAX },
            encoder: EncoderConfig { layers: 4, heads: 8, ffn: 512 },
            hidden: 384,
            seed: 0,
        }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn unit_len(&self) -> Result<usize> {
        unit_len_for(self.unit_seconds, self.sample_rate)
    }

    pub fn tfe(&self) -> Result<TfeConfig> {
        Ok(TfeConfig {
            sources: self.sources,
            proj_dim: self.proj_dim,
            mel_width: self.mel_width,
            unit_len: self.unit_len()?,
            mel: MelConfig { sample_rate: self.sample_rate, ..MelConfig::default() },
        })
    }

    /// Width of the feature rows.
    pub fn feature_dim(&self) -> usize {
        self.proj_dim * self.sources.count()
    }

    pub fn validate(&self) -> Result<()> {
        self.tfe()?.validate()?;
        let dim = self.feature_dim();
        match self.kind {
            ModelKind::Beatx => {
                self.lcg.validate(dim)?;
                self.lgf.validate(dim)?;
            }
            ModelKind::Encoder => {
                check_heads(dim, self.encoder.heads)?;
                if self.encoder.layers == 0 || self.encoder.ffn == 0 {
                    return Err(Error::InvalidConfig("encoder baseline needs layers and ffn > 0".into()));
                }
            }
            ModelKind::Linear | ModelKind::Cnn1d => {
                if self.hidden == 0 {
                    return Err(Error::InvalidConfig("hidden width must be positive".into()));
                }
            }
        }
        Ok(())
    }

    /// Longest accepted sequence, if the kind has one.
    pub fn capacity(&self) -> Option<usize> {
        match self.kind {
            ModelKind::Beatx => Some(self.lgf.n_max),
            ModelKind::Encoder => Some(N_MAX),
            _ => None,
        }
    }
}

/// Number of stacked 1-D convolutions in the cnn1d baseline.
pub const CNN_LAYERS: usize = 4;
/// Kernel width of the cnn1d baseline.
pub const CNN_KERNEL: usize = 3;

/// A configured network with its parameters.
#[derive(Debug, Clone)]
pub struct Model {
    config: ModelConfig,
    params: ParamStore,
    mel: MelExtractor,
}

/// Fixed sinusoidal position table `[n × dim]`.
fn sinusoid_table(n: usize, dim: usize) -> Vec<f32> {
    let mut out = Vec::with_capacity(n * dim);
    for pos in 0..n {
        for i in 0..dim {
            let rate = 1.0 / 10_000f64.powf((2 * (i / 2)) as f64 / dim as f64);
            let a = pos as f64 * rate;
            out.push(if i % 2 == 0 { a.sin() } else { a.cos() } as f32);
        }
    }
    out
}

impl Model {
    /// Seeded initialization.
    pub fn build(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut s = ParamStore::new();
        let tfe = config.tfe()?;
        features::init_tfe(&mut s, &tfe, &mut rng)?;
        let dim = config.feature_dim();
        let h = config.hidden;
        match config.kind {
            ModelKind::Beatx => {
                context::init_lcg(&mut s, &mut rng, &config.lcg, dim)?;
                attention::init_lgf(&mut s, &mut rng, &config.lgf, dim)?;
                attention::init_head(&mut s, &mut rng, dim)?;
            }
            ModelKind::Linear => {
                layers::init_linear(&mut s, &mut rng, "linear.l0", dim, h, true)?;
                layers::init_linear(&mut s, &mut rng, "linear.l1", h, h, true)?;
                layers::init_linear(&mut s, &mut rng, "linear.l2", h, h, true)?;
                attention::init_head(&mut s, &mut rng, h)?;
            }
            ModelKind::Cnn1d => {
                for l in 0..CNN_LAYERS {
                    let c_in = if l == 0 { dim } else { h };
                    layers::init_conv1d(&mut s, &mut rng, &format!("cnn.conv{l}"), CNN_KERNEL, c_in, h)?;
                }
                layers::init_linear(&mut s, &mut rng, "cnn.fc", h, h, true)?;
                attention::init_head(&mut s, &mut rng, h)?;
            }
            ModelKind::Encoder => {
                for l in 0..config.encoder.layers {
                    attention::init_encoder_layer(&mut s, &mut rng, &format!("enc.l{l}"), dim, config.encoder.ffn)?;
                }
                attention::init_head(&mut s, &mut rng, dim)?;
            }
        }
        let mel = MelExtractor::new(tfe.mel)?;
        Ok(Self { config, params: s, mel })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn parameter_count(&self) -> usize {
        self.params.parameter_count()
    }

    /// Fixed per-unit descriptors of one audio; reusable across epochs.
    pub fn prepare(&self, seq: &TimeUnitSequence) -> Result<UnitInputs> {
        features::prepare_inputs(seq, &self.config.tfe()?, &self.mel)
    }

    fn check_capacity(&self, n: usize) -> Result<()> {
        match self.config.capacity() {
            Some(max) if n > max => Err(Error::Capacity { n, max }),
            _ => Ok(()),
        }
    }

    /// Records the forward pass into `g`; returns probabilities `[N]`.
    pub fn forward_graph(&self, g: &mut Graph, inputs: &UnitInputs) -> Result<Var> {
        self.forward_graph_with(g, &self.params, inputs)
    }

    /// Forward pass with an explicit parameter store of this model's layout.
    pub fn forward_graph_with(&self, g: &mut Graph, s: &ParamStore, inputs: &UnitInputs) -> Result<Var> {
        let n = inputs.n_units();
        self.check_capacity(n)?;
        let feats = features::tfe_graph(g, s, inputs)?;
        let cfg = &self.config;
        let top = match cfg.kind {
            ModelKind::Beatx => {
                let local = context::local_fuse_graph(g, s, &cfg.lcg, feats)?;
                attention::lgf_forward(g, s, &cfg.lgf, local)?
            }
            ModelKind::Linear => {
                let mut x = feats;
                for l in 0..3 {
                    let y = layers::linear(g, s, &format!("linear.l{l}"), x)?;
                    x = g.relu(y);
                }
                x
            }
            ModelKind::Cnn1d => {
                let mut x = feats;
                for l in 0..CNN_LAYERS {
                    let y = layers::conv1d(g, s, &format!("cnn.conv{l}"), x, CNN_KERNEL / 2)?;
                    x = g.relu(y);
                }
                let y = layers::linear(g, s, "cnn.fc", x)?;
                g.relu(y)
            }
            ModelKind::Encoder => {
                let dim = cfg.feature_dim();
                let pos = g.constant(&[n, dim], sinusoid_table(n, dim))?;
                let mut x = g.add(feats, pos)?;
                for l in 0..cfg.encoder.layers {
                    x = attention::exact_attention(g, s, &format!("enc.l{l}"), x, cfg.encoder.heads)?;
                }
                x
            }
        };
        attention::classifier_head(g, s, top)
    }

    pub fn predict_inputs(&self, inputs: &UnitInputs) -> Result<PredictionVector> {
        let mut g = Graph::new();
        let p = self.forward_graph(&mut g, inputs)?;
        Ok(PredictionVector::new(g.value(p).to_vec()))
    }

    /// Per-unit transition probabilities of one audio.
    pub fn forward(&self, seq: &TimeUnitSequence) -> Result<PredictionVector> {
        self.predict_inputs(&self.prepare(seq)?)
    }

    /// Writes parameters to `path` and the config to `<path>.json`.
    pub fn save(&self, path: &Path) -> Result<()> {
        write_checkpoint(BufWriter::new(File::create(path)?), &self.params.to_named_vec())?;
        std::fs::write(config_sidecar(path), serde_json::to_string_pretty(&self.config)?)?;
        Ok(())
    }

    /// Rebuilds the model described by `<path>.json` and loads `path`.
    pub fn load(path: &Path) -> Result<Self> {
        let side = config_sidecar(path);
        if !path.is_file() {
            return Err(Error::MissingFile(path.to_path_buf()));
        }
        if !side.is_file() {
            return Err(Error::MissingFile(side));
        }
        let config: ModelConfig = serde_json::from_str(&std::fs::read_to_string(&side)?)
            .map_err(|e| Error::Checkpoint(format!("bad config sidecar: {e}")))?;
        let mut model = Self::build(config)?;
        let tensors = read_checkpoint(BufReader::new(File::open(path)?))?;
        model.params.load_from(tensors)?;
        Ok(model)
    }

    /// Replaces parameters with `store`, which must match names and shapes.
    pub fn set_params(&mut self, store: &ParamStore) -> Result<()> {
        self.params.load_from(store.to_named_vec())
    }
}

/// Path of the JSON config written next to a checkpoint.
pub fn config_sidecar(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::audio::{split_time_units, SignalBuffer};

    fn tiny(kind: ModelKind) -> ModelConfig {
        let mut c = ModelConfig::desk(kind);
        c.proj_dim = 8;
        c.mel_width = 2;
        c.hidden = 8;
        c.lcg = LcgConfig { k: 2, layers: 2, heads: 4, ffn: 16 };
        c.lgf = LgfConfig { layers: 1, heads: 4, ffn: 16, p: 4, n_max: 64 };
        c.encoder = EncoderConfig { layers: 2, heads: 8, ffn: 16 };
        c
    }

    fn seq(n: usize, seed: u32) -> TimeUnitSequence {
        let s: Vec<f32> = (0..n * 1600)
            .map(|i| (((i as u32).wrapping_mul(2654435761).wrapping_add(seed) >> 8) as f32 / (1u32 << 24) as f32) - 0.5)
            .collect();
        split_time_units(&SignalBuffer::new(s, 16_000).unwrap(), 0.1).unwrap()
    }

    #[test]
    fn build_is_deterministic_and_counts_params() {
        for kind in ModelKind::ALL {
            let a = Model::build(tiny(kind).with_seed(3)).unwrap();
            let b = Model::build(tiny(kind).with_seed(3)).unwrap();
            assert_eq!(a.params(), b.params());
            let sum: usize = a.params().iter().map(|(_, t)| t.numel()).sum();
            assert_eq!(a.parameter_count(), sum);
            let c = Model::build(tiny(kind).with_seed(4)).unwrap();
            assert_ne!(a.params(), c.params());
        }
        let lin = Model::build(tiny(ModelKind::Linear)).unwrap();
        let n_linear = lin.params().names().filter(|n| n.ends_with(".w") && !n.starts_with("tfe.")).count();
        assert_eq!(n_linear, 4);
    }

    #[test]
    fn every_kind_maps_n_units_to_n_probs() {
        for kind in ModelKind::ALL {
            let m = Model::build(tiny(kind)).unwrap();
            for n in [1, 7] {
                let p = m.forward(&seq(n, 1)).unwrap();
                assert_eq!(p.len(), n);
                assert!(p.probs().iter().all(|&v| v > 0.0 && v < 1.0));
            }
        }
    }

    #[test]
    fn forward_is_bit_reproducible() {
        let m = Model::build(tiny(ModelKind::Beatx).with_seed(9)).unwrap();
        let s = seq(12, 2);
        assert_eq!(m.forward(&s).unwrap(), m.forward(&s).unwrap());
        assert_eq!(m.forward(&s).unwrap(), Model::build(tiny(ModelKind::Beatx).with_seed(9)).unwrap().forward(&s).unwrap());
    }

    /// Rows whose output moves when unit `j` is perturbed.
    fn influenced(kind: ModelKind, n: usize, j: usize) -> Vec<usize> {
        let m = Model::build(tiny(kind).with_seed(5)).unwrap();
        let base = seq(n, 3);
        let mut units: Vec<Vec<f32>> = base.units().map(<[f32]>::to_vec).collect();
        units[j].iter_mut().for_each(|v| *v = -*v * 0.7 + 0.1);
        let pert = TimeUnitSequence::from_units(units, 0.1, 16_000).unwrap();
        let (a, b) = (m.forward(&base).unwrap(), m.forward(&pert).unwrap());
        (0..n).filter(|&i| a.probs()[i] != b.probs()[i]).collect()
    }

    #[test]
    fn receptive_fields_are_ordered() {
        let (n, j) = (24, 12);
        assert_eq!(influenced(ModelKind::Linear, n, j), vec![j]);
        let cnn = influenced(ModelKind::Cnn1d, n, j);
        assert!(cnn.iter().all(|&i| i.abs_diff(j) <= CNN_LAYERS));
        assert!(cnn.len() > 1);
        for kind in [ModelKind::Encoder, ModelKind::Beatx] {
            assert_eq!(influenced(kind, n, j).len(), n, "{kind:?}");
        }
    }

    #[test]
    fn capacity_and_config_errors() {
        let m = Model::build(tiny(ModelKind::Beatx)).unwrap();
        assert!(matches!(m.forward(&seq(65, 1)), Err(Error::Capacity { n: 65, max: 64 })));
        let mut bad = tiny(ModelKind::Encoder);
        bad.encoder.heads = 5;
        assert!(matches!(Model::build(bad), Err(Error::InvalidConfig(_))));
        assert!(ModelKind::parse("rnn").is_err());
        assert_eq!(ModelKind::parse("cnn1d").unwrap(), ModelKind::Cnn1d);
    }

    #[test]
    fn checkpoint_round_trip_and_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let m = Model::build(tiny(ModelKind::Beatx).with_seed(11)).unwrap();
        m.save(&path).unwrap();
        let back = Model::load(&path).unwrap();
        assert_eq!(back.params(), m.params());
        assert_eq!(back.config(), m.config());

        let mut other = tiny(ModelKind::Beatx);
        other.proj_dim = 12;
        std::fs::write(config_sidecar(&path), serde_json::to_string(&other).unwrap()).unwrap();
        assert!(matches!(Model::load(&path), Err(Error::Checkpoint(_))));
        std::fs::remove_file(config_sidecar(&path)).unwrap();
        assert!(matches!(Model::load(&path), Err(Error::MissingFile(_))));
    }

    #[test]
    fn presets_validate() {
        for kind in ModelKind::ALL {
            ModelConfig::desk(kind).validate().unwrap();
            ModelConfig::full(kind).validate().unwrap();
        }
        assert_eq!(ModelConfig::desk(ModelKind::Beatx).feature_dim(), 96);
        assert_eq!(ModelConfig::full(ModelKind::Beatx).feature_dim(), 384);
    }
}
