//! Multi-head self-attention encoder layers: exact softmax attention and
//! the low-rank linear variant used for global fusion, plus the per-unit
//! classification head.
//!
//! Layer parameters live under a prefix: `{p}.q`, `{p}.k`, `{p}.v`, `{p}.o`
//! (linear maps), `{p}.ln1`, `{p}.ln2` (layer norms) and `{p}.ffn1`,
//! `{p}.ffn2` (feed-forward). Low-rank layers add `{p}.E` and `{p}.F`,
//! `[p × n_max]` projection banks shared by all heads.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers;
use crate::tensor::{sigmoid, Graph, Init, ParamStore, Tensor, Var};

/// Longest sequence the low-rank banks cover.
pub const N_MAX: usize = 4096;

/// Settings of the global fusion stack.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LgfConfig {
    pub layers: usize,
    pub heads: usize,
    pub ffn: usize,
    /// Low-rank projection size.
    pub p: usize,
    pub n_max: usize,
}

impl LgfConfig {
    pub fn validate(&self, dim: usize) -> Result<()> {
        check_heads(dim, self.heads)?;
        if self.p == 0 || self.p >= self.n_max {
            return Err(Error::InvalidConfig(format!("need 0 < p < n_max, got p={} n_max={}", self.p, self.n_max)));
        }
        if self.ffn == 0 {
            return Err(Error::InvalidConfig("ffn width must be positive".into()));
        }
        Ok(())
    }
}

pub(crate) fn check_heads(dim: usize, heads: usize) -> Result<()> {
    if heads == 0 || dim % heads != 0 {
        return Err(Error::InvalidConfig(format!("width {dim} is not divisible by {heads} heads")));
    }
    Ok(())
}

/// Registers one encoder layer (attention + feed-forward) of width `dim`.
pub fn init_encoder_layer<R: Rng>(store: &mut ParamStore, rng: &mut R, prefix: &str, dim: usize, ffn: usize) -> Result<()> {
    for m in ["q", "k", "v", "o"] {
        layers::init_linear(store, rng, &format!("{prefix}.{m}"), dim, dim, false)?;
    }
    layers::init_layer_norm(store, rng, &format!("{prefix}.ln1"), dim)?;
    layers::init_linear(store, rng, &format!("{prefix}.ffn1"), dim, ffn, true)?;
    layers::init_linear(store, rng, &format!("{prefix}.ffn2"), ffn, dim, false)?;
    layers::init_layer_norm(store, rng, &format!("{prefix}.ln2"), dim)
}

/// Registers the `[p × n_max]` projection banks of a low-rank layer.
pub fn init_low_rank<R: Rng>(store: &mut ParamStore, rng: &mut R, prefix: &str, p: usize, n_max: usize) -> Result<()> {
    let init = Init::Gaussian { variance: 1.0 / p as f32 };
    store.init(format!("{prefix}.E"), &[p, n_max], init, rng)?;
    store.init(format!("{prefix}.F"), &[p, n_max], init, rng)
}

/// Registers the global fusion stack under `lgf.l{i}`.
pub fn init_lgf<R: Rng>(store: &mut ParamStore, rng: &mut R, cfg: &LgfConfig, dim: usize) -> Result<()> {
    cfg.validate(dim)?;
    for l in 0..cfg.layers {
        let prefix = format!("lgf.l{l}");
        init_encoder_layer(store, rng, &prefix, dim, cfg.ffn)?;
        init_low_rank(store, rng, &prefix, cfg.p, cfg.n_max)?;
    }
    Ok(())
}

/// Splits `[rows × C]` into per-head `[rows × C/heads]` column blocks.
fn heads_of(g: &mut Graph, x: Var, heads: usize) -> Result<Vec<Var>> {
    let dh = g.shape(x)[1] / heads;
    (0..heads).map(|h| g.slice_cols(x, h * dh, dh)).collect()
}

/// Attention output projection, residual, layer norm, feed-forward,
/// residual, layer norm. `attn` and `resid` are `[rows × C]`.
fn finish_layer(g: &mut Graph, store: &ParamStore, prefix: &str, heads: Vec<Var>, resid: Var) -> Result<Var> {
    let cat = if heads.len() == 1 { heads[0] } else { g.concat_cols(&heads)? };
    let mixed = layers::linear(g, store, &format!("{prefix}.o"), cat)?;
    let x = g.add(mixed, resid)?;
    let x = layers::layer_norm(g, store, &format!("{prefix}.ln1"), x)?;
    let h = layers::linear(g, store, &format!("{prefix}.ffn1"), x)?;
    let h = g.relu(h);
    let h = layers::linear(g, store, &format!("{prefix}.ffn2"), h)?;
    let y = g.add(h, x)?;
    layers::layer_norm(g, store, &format!("{prefix}.ln2"), y)
}

/// Exact multi-head encoder layer over `B` independent sequences
/// `x[B × T × C]`. With `query` set, only that position is updated and the
/// result is `[B × C]`; otherwise `[B × T × C]`.
pub fn exact_encoder_layer(
    g: &mut Graph,
    store: &ParamStore,
    prefix: &str,
    x: Var,
    heads: usize,
    query: Option<usize>,
) -> Result<Var> {
    let (b, t, c) = match *g.shape(x) {
        [b, t, c] => (b, t, c),
        ref s => return Err(Error::Shape(format!("encoder input must be [B×T×C], got {s:?}"))),
    };
    check_heads(c, heads)?;
    let dh = c / heads;
    let flat = g.reshape(x, &[b * t, c])?;
    let (q_in, tq) = match query {
        Some(pos) => {
            if pos >= t {
                return Err(Error::Shape(format!("query position {pos} outside {t} tokens")));
            }
            let rows: Vec<usize> = (0..b).map(|i| i * t + pos).collect();
            (g.select_rows(flat, &rows)?, 1)
        }
        None => (flat, t),
    };
    let q = layers::linear(g, store, &format!("{prefix}.q"), q_in)?;
    let k = layers::linear(g, store, &format!("{prefix}.k"), flat)?;
    let v = layers::linear(g, store, &format!("{prefix}.v"), flat)?;
    let (qs, ks, vs) = (heads_of(g, q, heads)?, heads_of(g, k, heads)?, heads_of(g, v, heads)?);
    let scale = 1.0 / (dh as f32).sqrt();
    let mut outs = Vec::with_capacity(heads);
    for h in 0..heads {
        let qh = g.reshape(qs[h], &[b, tq, dh])?;
        let kh = g.reshape(ks[h], &[b, t, dh])?;
        let vh = g.reshape(vs[h], &[b, t, dh])?;
        let s = g.bmm_nt(qh, kh)?;
        let s = g.scale(s, scale);
        let p = g.softmax_rows(s);
        let o = g.bmm(p, vh)?;
        outs.push(g.reshape(o, &[b * tq, dh])?);
    }
    let y = finish_layer(g, store, prefix, outs, q_in)?;
    if query.is_some() {
        Ok(y)
    } else {
        g.reshape(y, &[b, t, c])
    }
}

/// Exact global attention layer over one sequence `f[N × C]`.
pub fn exact_attention(g: &mut Graph, store: &ParamStore, prefix: &str, f: Var, heads: usize) -> Result<Var> {
    let (n, c) = g.dims2_of(f)?;
    let x = g.reshape(f, &[1, n, c])?;
    let y = exact_encoder_layer(g, store, prefix, x, heads, None)?;
    g.reshape(y, &[n, c])
}

/// Low-rank attention layer over `f[N × C]`: keys and values are first
/// projected along the sequence axis by the first `N` columns of the
/// `E`/`F` banks, so no `N × N` matrix is formed.
pub fn linear_attention(g: &mut Graph, store: &ParamStore, prefix: &str, f: Var, heads: usize) -> Result<Var> {
    let (n, c) = g.dims2_of(f)?;
    check_heads(c, heads)?;
    let n_max = store
        .get(&format!("{prefix}.E"))
        .map(|t| t.shape()[1])
        .ok_or_else(|| Error::Checkpoint(format!("missing parameter `{prefix}.E`")))?;
    if n > n_max {
        return Err(Error::Capacity { n, max: n_max });
    }
    let dh = c / heads;
    let e = g.param(store, &format!("{prefix}.E"))?;
    let fb = g.param(store, &format!("{prefix}.F"))?;
    let e_n = g.slice_cols(e, 0, n)?;
    let f_n = g.slice_cols(fb, 0, n)?;
    let q = layers::linear(g, store, &format!("{prefix}.q"), f)?;
    let k = layers::linear(g, store, &format!("{prefix}.k"), f)?;
    let v = layers::linear(g, store, &format!("{prefix}.v"), f)?;
    let ek = g.matmul(e_n, k)?;
    let fv = g.matmul(f_n, v)?;
    let (qs, eks, fvs) = (heads_of(g, q, heads)?, heads_of(g, ek, heads)?, heads_of(g, fv, heads)?);
    let scale = 1.0 / (dh as f32).sqrt();
    let mut outs = Vec::with_capacity(heads);
    for h in 0..heads {
        let s = g.matmul_nt(qs[h], eks[h])?;
        let s = g.scale(s, scale);
        let p = g.softmax_rows(s);
        outs.push(g.matmul(p, fvs[h])?);
    }
    finish_layer(g, store, prefix, outs, f)
}

/// Runs the global fusion stack.
pub fn lgf_forward(g: &mut Graph, store: &ParamStore, cfg: &LgfConfig, f: Var) -> Result<Var> {
    let mut x = f;
    for l in 0..cfg.layers {
        x = linear_attention(g, store, &format!("lgf.l{l}"), x, cfg.heads)?;
    }
    Ok(x)
}

/// Row-stochastic attention matrices (one `[N × N]` per head) of an exact
/// layer, for inspection.
pub fn exact_attention_weights(store: &ParamStore, prefix: &str, f: &Tensor, heads: usize) -> Result<Vec<Tensor>> {
    let mut g = Graph::new();
    let x = g.leaf(f);
    let (_, c) = f.dims2()?;
    check_heads(c, heads)?;
    let dh = c / heads;
    let q = layers::linear(&mut g, store, &format!("{prefix}.q"), x)?;
    let k = layers::linear(&mut g, store, &format!("{prefix}.k"), x)?;
    let (qs, ks) = (heads_of(&mut g, q, heads)?, heads_of(&mut g, k, heads)?);
    (0..heads)
        .map(|h| {
            let s = g.matmul_nt(qs[h], ks[h])?;
            let s = g.scale(s, 1.0 / (dh as f32).sqrt());
            let p = g.softmax_rows(s);
            Ok(g.tensor(p))
        })
        .collect()
}

pub fn init_head<R: Rng>(store: &mut ParamStore, rng: &mut R, dim: usize) -> Result<()> {
    layers::init_linear(store, rng, "head", dim, 1, false)
}

/// Per-row logit followed by a sigmoid: `[N × C] → [N]`.
pub fn classifier_head(g: &mut Graph, store: &ParamStore, h: Var) -> Result<Var> {
    let logits = layers::linear(g, store, "head", h)?;
    let n = g.shape(logits)[0];
    let flat = g.reshape(logits, &[n])?;
    Ok(g.sigmoid(flat))
}

/// Per-unit probabilities in `(0, 1)`.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictionVector {
    probs: Vec<f32>,
}

impl PredictionVector {
    pub fn new(probs: Vec<f32>) -> Self {
        Self { probs }
    }

    pub fn from_logits(logits: &[f32]) -> Self {
        Self { probs: logits.iter().map(|&z| sigmoid(z)).collect() }
    }

    pub fn probs(&self) -> &[f32] {
        &self.probs
    }

    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }

    pub fn into_vec(self) -> Vec<f32> {
        self.probs
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    const P: &str = "att";

    fn layer(dim: usize, p: usize, n_max: usize, seed: u64) -> ParamStore {
        let mut s = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        init_encoder_layer(&mut s, &mut rng, P, dim, 2 * dim).unwrap();
        init_low_rank(&mut s, &mut rng, P, p, n_max).unwrap();
        s
    }

    fn rand_t(shape: &[usize], seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
    }

    fn run(store: &ParamStore, f: &Tensor, exact: bool) -> Result<Tensor> {
        let mut g = Graph::new();
        let x = g.leaf(f);
        let y = if exact { exact_attention(&mut g, store, P, x, 4)? } else { linear_attention(&mut g, store, P, x, 4)? };
        Ok(g.tensor(y))
    }

    fn set(store: &mut ParamStore, name: &str, f: impl Fn(usize, usize) -> f32) {
        let t = store.get_mut(name).unwrap();
        let cols = t.shape()[1];
        for (i, v) in t.data_mut().iter_mut().enumerate() {
            *v = f(i / cols, i % cols);
        }
    }

    fn max_diff(a: &Tensor, b: &Tensor) -> f32 {
        a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).fold(0.0, f32::max)
    }

    #[test]
    fn single_token_attends_to_itself() {
        let s = layer(8, 2, 16, 1);
        let w = exact_attention_weights(&s, P, &rand_t(&[1, 8], 2), 4).unwrap();
        assert!(w.iter().all(|p| p.data() == [1.0]));
    }

    #[test]
    fn weights_are_row_stochastic() {
        let s = layer(8, 2, 16, 1);
        for p in exact_attention_weights(&s, P, &rand_t(&[6, 8], 3), 4).unwrap() {
            for row in p.data().chunks(6) {
                assert!((row.iter().sum::<f32>() - 1.0).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn identical_rows_stay_identical() {
        let s = layer(8, 4, 16, 4);
        let row = rand_t(&[1, 8], 5);
        let f = Tensor::from_fn(&[5, 8], |i| row.data()[i % 8]);
        for exact in [true, false] {
            let y = run(&s, &f, exact).unwrap();
            for r in 1..5 {
                assert_eq!(&y.data()[r * 8..(r + 1) * 8], &y.data()[..8]);
            }
        }
    }

    #[test]
    fn identity_projection_recovers_exact() {
        let n = 12;
        let mut s = layer(8, n, 32, 6);
        set(&mut s, "att.E", |i, j| if i == j { 1.0 } else { 0.0 });
        set(&mut s, "att.F", |i, j| if i == j { 1.0 } else { 0.0 });
        let f = rand_t(&[n, 8], 7);
        assert!(max_diff(&run(&s, &f, true).unwrap(), &run(&s, &f, false).unwrap()) < 1e-5);
    }

    #[test]
    fn permutation_projection_recovers_exact() {
        let n = 16;
        let mut s = layer(8, n, 20, 8);
        let perm = |i: usize| (i * 5 + 3) % n;
        set(&mut s, "att.E", |i, j| if j == perm(i) { 1.0 } else { 0.0 });
        set(&mut s, "att.F", |i, j| if j == perm(i) { 1.0 } else { 0.0 });
        let f = rand_t(&[n, 8], 9);
        assert!(max_diff(&run(&s, &f, true).unwrap(), &run(&s, &f, false).unwrap()) < 1e-5);
    }

    #[test]
    fn low_rank_error_is_finite() {
        let s = layer(16, 16, 128, 10);
        let f = rand_t(&[64, 16], 11);
        let (a, b) = (run(&s, &f, true).unwrap(), run(&s, &f, false).unwrap());
        let num: f32 = a.data().iter().zip(b.data()).map(|(x, y)| (x - y).powi(2)).sum();
        let den: f32 = a.data().iter().map(|x| x * x).sum();
        assert!((num / den).sqrt().is_finite());
    }

    #[test]
    fn capacity_is_enforced() {
        let s = layer(8, 2, 4, 1);
        assert!(matches!(run(&s, &rand_t(&[5, 8], 1), false), Err(Error::Capacity { n: 5, max: 4 })));
        assert!(run(&s, &rand_t(&[4, 8], 1), false).is_ok());
    }

    #[test]
    fn heads_must_divide_width() {
        let s = layer(6, 2, 8, 1);
        assert!(matches!(run(&s, &rand_t(&[3, 6], 1), true), Err(Error::InvalidConfig(_))));
        let cfg = LgfConfig { layers: 1, heads: 4, ffn: 8, p: 8, n_max: 8 };
        assert!(cfg.validate(16).is_err());
    }

    #[test]
    fn no_square_intermediate_in_linear_layer() {
        let (n, c, p) = (96, 8, 4);
        let s = layer(c, p, 128, 12);
        let mut g = Graph::new();
        let x = g.leaf(&rand_t(&[n, c], 13));
        linear_attention(&mut g, &s, P, x, 4).unwrap();
        for shape in g.intermediate_shapes() {
            assert!(shape.iter().filter(|&&d| d == n).count() <= 1, "{shape:?}");
        }
        assert!(g.largest_intermediate() <= n * (2 * c).max(p));

        let mut g = Graph::new();
        let x = g.leaf(&rand_t(&[n, c], 13));
        exact_attention(&mut g, &s, P, x, 4).unwrap();
        assert!(g.intermediate_shapes().iter().any(|s| s.iter().filter(|&&d| d == n).count() == 2));
    }

    #[test]
    fn permutation_equivariance() {
        let s = layer(8, 8, 8, 14);
        let f = rand_t(&[8, 8], 15);
        let order = [2, 7, 0, 5, 1, 3, 6, 4];
        let pf = Tensor::from_fn(&[8, 8], |i| f.data()[order[i / 8] * 8 + i % 8]);
        let (y, py) = (run(&s, &f, true).unwrap(), run(&s, &pf, true).unwrap());
        for (i, &src) in order.iter().enumerate() {
            for j in 0..8 {
                assert!((py.data()[i * 8 + j] - y.data()[src * 8 + j]).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn query_only_layer_matches_full_layer_row() {
        let s = layer(8, 2, 8, 16);
        let x = rand_t(&[3, 5, 8], 17);
        let mut g = Graph::new();
        let xv = g.leaf(&x);
        let full = exact_encoder_layer(&mut g, &s, P, xv, 4, None).unwrap();
        let mid = exact_encoder_layer(&mut g, &s, P, xv, 4, Some(2)).unwrap();
        let (full, mid) = (g.tensor(full), g.tensor(mid));
        for b in 0..3 {
            for j in 0..8 {
                let a = full.data()[(b * 5 + 2) * 8 + j];
                assert!((a - mid.data()[b * 8 + j]).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn head_examples() {
        let mut s = ParamStore::new();
        init_head(&mut s, &mut ChaCha8Rng::seed_from_u64(0), 4).unwrap();
        s.get_mut("head.w").unwrap().data_mut().fill(0.0);
        let mut g = Graph::new();
        let h = g.leaf(&rand_t(&[3, 4], 1));
        let p = classifier_head(&mut g, &s, h).unwrap();
        assert_eq!(g.value(p), &[0.5; 3]);

        assert!((sigmoid(3f32.ln()) - 0.75).abs() < 1e-6);
        let pv = PredictionVector::from_logits(&[0.0, 1.0, 0.0]);
        let bumped = PredictionVector::from_logits(&[0.0, 2.0, 0.0]);
        assert!(bumped.probs()[1] > pv.probs()[1]);
        assert_eq!(bumped.probs()[0], pv.probs()[0]);
    }
}
