//! Parameter registration and application helpers shared by the models.

use rand::Rng;

use crate::error::Result;
use crate::tensor::{Graph, Init, ParamStore, Var};

/// Registers `{name}.w [fan_in×fan_out]` and a zero `{name}.b`.
pub(crate) fn init_linear<R: Rng>(
    store: &mut ParamStore,
    rng: &mut R,
    name: &str,
    fan_in: usize,
    fan_out: usize,
    relu: bool,
) -> Result<()> {
    let init = if relu { Init::he(fan_in) } else { Init::lecun(fan_in) };
    store.init(format!("{name}.w"), &[fan_in, fan_out], init, rng)?;
    store.init(format!("{name}.b"), &[fan_out], Init::Zeros, rng)
}

/// `x·W + b` over the last axis of `x` (any rank).
pub(crate) fn linear(g: &mut Graph, store: &ParamStore, name: &str, x: Var) -> Result<Var> {
    let w = g.param(store, &format!("{name}.w"))?;
    let b = g.param(store, &format!("{name}.b"))?;
    let shape = g.shape(x).to_vec();
    let fan_in = *shape.last().expect("rank >= 1");
    let rows = g.value(x).len() / fan_in;
    let x2 = if shape.len() == 2 { x } else { g.reshape(x, &[rows, fan_in])? };
    let y = g.matmul(x2, w)?;
    let y = g.add_broadcast(y, b)?;
    if shape.len() == 2 {
        Ok(y)
    } else {
        let mut out_shape = shape;
        *out_shape.last_mut().expect("rank >= 1") = g.shape(y)[1];
        g.reshape(y, &out_shape)
    }
}

pub(crate) fn init_layer_norm<R: Rng>(store: &mut ParamStore, rng: &mut R, name: &str, dim: usize) -> Result<()> {
    store.init(format!("{name}.gain"), &[dim], Init::Ones, rng)?;
    store.init(format!("{name}.bias"), &[dim], Init::Zeros, rng)
}

pub(crate) fn layer_norm(g: &mut Graph, store: &ParamStore, name: &str, x: Var) -> Result<Var> {
    let gain = g.param(store, &format!("{name}.gain"))?;
    let bias = g.param(store, &format!("{name}.bias"))?;
    g.layer_norm(x, gain, bias)
}

/// Layer norm over each example's whole `[H×W×C]` map of `x[B×H×W×C]`,
/// followed by per-channel gain and bias.
pub(crate) fn map_norm(g: &mut Graph, store: &ParamStore, name: &str, x: Var) -> Result<Var> {
    let shape = g.shape(x).to_vec();
    let b = shape[0];
    let per = g.value(x).len() / b.max(1);
    let flat = g.reshape(x, &[b, per])?;
    let ones = g.constant(&[per], vec![1.0; per])?;
    let zeros = g.constant(&[per], vec![0.0; per])?;
    let normed = g.layer_norm(flat, ones, zeros)?;
    let normed = g.reshape(normed, &shape)?;
    let gain = g.param(store, &format!("{name}.gain"))?;
    let bias = g.param(store, &format!("{name}.bias"))?;
    let scaled = g.mul_broadcast(normed, gain)?;
    g.add_broadcast(scaled, bias)
}

/// Registers a 3×3 conv kernel `{name}.w [3×3×c_in×c_out]` and bias.
pub(crate) fn init_conv3x3<R: Rng>(store: &mut ParamStore, rng: &mut R, name: &str, c_in: usize, c_out: usize) -> Result<()> {
    store.init(format!("{name}.w"), &[3, 3, c_in, c_out], Init::he(9 * c_in), rng)?;
    store.init(format!("{name}.b"), &[c_out], Init::Zeros, rng)
}

/// Same-size 3×3 convolution over `[B×H×W×C]`.
pub(crate) fn conv3x3(g: &mut Graph, store: &ParamStore, name: &str, x: Var) -> Result<Var> {
    let w = g.param(store, &format!("{name}.w"))?;
    let b = g.param(store, &format!("{name}.b"))?;
    g.conv2d(x, w, b, 1, 1)
}

/// Registers a width-`k` 1-D conv kernel `{name}.w [k×c_in×c_out]`.
pub(crate) fn init_conv1d<R: Rng>(store: &mut ParamStore, rng: &mut R, name: &str, k: usize, c_in: usize, c_out: usize) -> Result<()> {
    store.init(format!("{name}.w"), &[k, c_in, c_out], Init::he(k * c_in), rng)?;
    store.init(format!("{name}.b"), &[c_out], Init::Zeros, rng)
}

pub(crate) fn conv1d(g: &mut Graph, store: &ParamStore, name: &str, x: Var, pad: usize) -> Result<Var> {
    let w = g.param(store, &format!("{name}.w"))?;
    let b = g.param(store, &format!("{name}.b"))?;
    g.conv1d(x, w, b, 1, pad)
}
