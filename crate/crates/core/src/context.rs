//! Local context generation: every unit's `2k + 1` neighbor window is
//! fused by a small encoder and the middle token is kept.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{check_heads, exact_encoder_layer, init_encoder_layer};
use crate::error::{Error, Result};
use crate::tensor::{Graph, Init, ParamStore, Tensor, Var};

/// Settings of the local fusion encoder.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LcgConfig {
    /// Semi-window: each context spans `2k + 1` units.
    pub k: usize,
    pub layers: usize,
    pub heads: usize,
    pub ffn: usize,
}

impl LcgConfig {
    pub fn window(&self) -> usize {
        2 * self.k + 1
    }

    pub fn validate(&self, dim: usize) -> Result<()> {
        check_heads(dim, self.heads)?;
        if self.layers == 0 || self.ffn == 0 {
            return Err(Error::InvalidConfig("local fusion needs at least one layer and a positive ffn width".into()));
        }
        Ok(())
    }
}

/// Neighbor windows `[N × (2k+1) × C]` plus which slots are zero padding.
#[derive(Debug, Clone, PartialEq)]
pub struct ContextTensor {
    pub values: Tensor,
    pub k: usize,
    /// `padding_mask[i * (2k+1) + j]` is true when slot `j` of row `i`
    /// lies outside the sequence.
    pub padding_mask: Vec<bool>,
}

impl ContextTensor {
    pub fn n(&self) -> usize {
        self.values.shape()[0]
    }

    /// Number of in-range neighbors (excluding the row itself) of row `i`.
    pub fn real_neighbors(&self, i: usize) -> usize {
        let t = 2 * self.k + 1;
        self.padding_mask[i * t..(i + 1) * t].iter().filter(|&&p| !p).count() - 1
    }
}

/// Builds all windows in one pass over a zero-padded copy of `features`.
pub fn spos_contexts(features: &Tensor, k: usize) -> Result<ContextTensor> {
    let (n, _) = features.dims2()?;
    let mut g = Graph::new();
    let x = g.leaf(features);
    let ctx = g.spos(x, k)?;
    let t = 2 * k + 1;
    let padding_mask = (0..n * t)
        .map(|idx| {
            let pos = (idx / t + idx % t) as isize - k as isize;
            pos < 0 || pos >= n as isize
        })
        .collect();
    Ok(ContextTensor { values: g.tensor(ctx), k, padding_mask })
}

/// Registers positional embeddings `lcg.pos` and the encoder layers.
pub fn init_lcg<R: Rng>(store: &mut ParamStore, rng: &mut R, cfg: &LcgConfig, dim: usize) -> Result<()> {
    cfg.validate(dim)?;
    store.init("lcg.pos", &[cfg.window(), dim], Init::Gaussian { variance: 0.02 * 0.02 }, rng)?;
    for l in 0..cfg.layers {
        init_encoder_layer(store, rng, &format!("lcg.l{l}"), dim, cfg.ffn)?;
    }
    Ok(())
}

/// Fuses windows `ctx[N × T × C]` and returns the middle tokens `[N × C]`.
pub fn local_fuse_windows(g: &mut Graph, store: &ParamStore, cfg: &LcgConfig, ctx: Var) -> Result<Var> {
    let pos = g.param(store, "lcg.pos")?;
    let mut x = g.add_broadcast(ctx, pos)?;
    for l in 0..cfg.layers {
        let query = (l + 1 == cfg.layers).then_some(cfg.k);
        x = exact_encoder_layer(g, store, &format!("lcg.l{l}"), x, cfg.heads, query)?;
    }
    Ok(x)
}

/// Feature rows `[N × C]` → fused rows `[N × C]`.
pub fn local_fuse_graph(g: &mut Graph, store: &ParamStore, cfg: &LcgConfig, features: Var) -> Result<Var> {
    let ctx = g.spos(features, cfg.k)?;
    local_fuse_windows(g, store, cfg, ctx)
}

/// Evaluates local fusion on precomputed contexts.
pub fn local_fuse(ctx: &ContextTensor, store: &ParamStore, cfg: &LcgConfig) -> Result<Tensor> {
    if ctx.k != cfg.k {
        return Err(Error::InvalidConfig(format!("contexts built with k={} but encoder expects k={}", ctx.k, cfg.k)));
    }
    let mut g = Graph::new();
    let x = g.leaf(&ctx.values);
    let y = local_fuse_windows(&mut g, store, cfg, x)?;
    Ok(g.tensor(y))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Row-by-row construction straight from the definition.
    fn naive(features: &Tensor, k: usize) -> Vec<f32> {
        let (n, c) = features.dims2().unwrap();
        let mut out = Vec::new();
        for i in 0..n {
            for j in 0..2 * k + 1 {
                let src = i as isize - k as isize + j as isize;
                for ch in 0..c {
                    out.push(if src >= 0 && (src as usize) < n { features.at2(src as usize, ch) } else { 0.0 });
                }
            }
        }
        out
    }

    fn rand_t(shape: &[usize], seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn spos_examples() {
        let f = Tensor::new(&[3, 1], vec![1.0, 2.0, 3.0]).unwrap();
        let c = spos_contexts(&f, 1).unwrap();
        assert_eq!(c.values.shape(), &[3, 3, 1]);
        assert_eq!(c.values.data(), &[0.0, 1.0, 2.0, 1.0, 2.0, 3.0, 2.0, 3.0, 0.0]);
        assert_eq!(c.padding_mask, vec![true, false, false, false, false, false, false, false, true]);
        assert_eq!(spos_contexts(&f, 0).unwrap().values.data(), f.data());

        let f = rand_t(&[5, 3], 1);
        assert_eq!(spos_contexts(&f, 2).unwrap().values.data(), naive(&f, 2).as_slice());
    }

    #[test]
    fn spos_exhaustive_small() {
        let mut seed = 0;
        for n in 1..=8 {
            for k in 0..=3 {
                for c in 1..=4 {
                    seed += 1;
                    let f = rand_t(&[n, c], seed);
                    let ctx = spos_contexts(&f, k).unwrap();
                    assert_eq!(ctx.values.data(), naive(&f, k).as_slice());
                    for i in 0..n {
                        assert_eq!(ctx.real_neighbors(i), k.min(i) + k.min(n - 1 - i));
                    }
                }
            }
        }
    }

    fn setup(k: usize, dim: usize) -> (ParamStore, LcgConfig) {
        let cfg = LcgConfig { k, layers: 2, heads: 4, ffn: 16 };
        let mut s = ParamStore::new();
        init_lcg(&mut s, &mut ChaCha8Rng::seed_from_u64(7), &cfg, dim).unwrap();
        (s, cfg)
    }

    fn fuse(s: &ParamStore, cfg: &LcgConfig, f: &Tensor) -> Tensor {
        local_fuse(&spos_contexts(f, cfg.k).unwrap(), s, cfg).unwrap()
    }

    #[test]
    fn single_token_window() {
        let (s, cfg) = setup(0, 8);
        let y = fuse(&s, &cfg, &rand_t(&[1, 8], 3));
        assert_eq!(y.shape(), &[1, 8]);
        assert!(y.is_finite());
    }

    #[test]
    fn rows_equal_independent_window_runs() {
        let (s, cfg) = setup(1, 8);
        let f = rand_t(&[3, 8], 4);
        let all = fuse(&s, &cfg, &f);
        let ctx = spos_contexts(&f, 1).unwrap();
        for i in 0..3 {
            let one = Tensor::new(&[1, 3, 8], ctx.values.data()[i * 24..(i + 1) * 24].to_vec()).unwrap();
            let single = ContextTensor { values: one, k: 1, padding_mask: vec![false; 3] };
            let y = local_fuse(&single, &s, &cfg).unwrap();
            for j in 0..8 {
                assert!((y.data()[j] - all.data()[i * 8 + j]).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn output_depends_only_on_window() {
        let (s, cfg) = setup(2, 8);
        let f = rand_t(&[12, 8], 5);
        let base = fuse(&s, &cfg, &f);
        assert_eq!(base.shape(), &[12, 8]);
        let mut pert = f.clone();
        let j = 8;
        pert.data_mut()[j * 8..(j + 1) * 8].iter_mut().for_each(|v| *v += 3.0);
        let moved = fuse(&s, &cfg, &pert);
        for i in 0..12 {
            let same = base.data()[i * 8..(i + 1) * 8] == moved.data()[i * 8..(i + 1) * 8];
            assert_eq!(same, i.abs_diff(j) > cfg.k, "row {i}");
        }
    }

    #[test]
    fn mismatched_k_or_heads_rejected() {
        let (s, cfg) = setup(1, 8);
        let ctx = spos_contexts(&rand_t(&[4, 8], 1), 2).unwrap();
        assert!(matches!(local_fuse(&ctx, &s, &cfg), Err(Error::InvalidConfig(_))));
        let bad = LcgConfig { k: 1, layers: 2, heads: 3, ffn: 8 };
        assert!(bad.validate(8).is_err());
    }

    proptest! {
        #[test]
        fn spos_matches_naive(n in 1usize..20, k in 0usize..6, c in 1usize..6, seed in any::<u64>()) {
            let f = rand_t(&[n, c], seed);
            let got = spos_contexts(&f, k).unwrap().values.into_data();
            prop_assert_eq!(got, naive(&f, k));
        }
    }
}
