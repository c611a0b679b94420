//! Dynamic computation graph ("tape") rebuilt on every forward pass.
//!
//! Nodes are appended in execution order, so node index order is a
//! topological order and backward is a single reverse sweep.

use super::kernels::{self, Conv2dGeom};
use super::{ParamStore, Tensor};
use crate::error::{Error, Result};

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul { a: usize, b: usize, trans_b: bool },
    BatchMatMul { a: usize, b: usize, trans_b: bool },
    Add { a: usize, b: usize },
    Mul { a: usize, b: usize },
    Scale { a: usize, factor: f32 },
    AddBroadcast { a: usize, b: usize },
    MulBroadcast { a: usize, b: usize },
    Relu { a: usize },
    Sigmoid { a: usize },
    Softmax { a: usize },
    LayerNorm { x: usize, gain: usize, bias: usize, xhat: Vec<f32>, rstd: Vec<f32> },
    ConcatCols { parts: Vec<usize> },
    SliceCols { a: usize, start: usize },
    SelectRows { a: usize, rows: Vec<usize> },
    Reshape { a: usize },
    Conv { x: usize, w: usize, b: usize, geom: Conv2dGeom, cols: Vec<f32> },
    MeanAxis1 { a: usize },
    Spos { a: usize, k: usize },
    Sum { a: usize },
    WeightedBce { p: usize, target: Vec<f32>, weight: Vec<f32> },
}

#[derive(Debug)]
struct Node {
    shape: Vec<usize>,
    value: Vec<f32>,
    op: Op,
    requires_grad: bool,
}

/// Probability clipping bound of [`Graph::weighted_bce`].
pub const BCE_EPS: f32 = 1e-7;

/// Layer-norm variance floor.
pub const LN_EPS: f32 = 1e-5;

/// Records one forward pass and differentiates it.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f32>>>,
    bindings: Vec<(usize, usize)>,
}

fn shape_err(msg: String) -> Error {
    Error::Shape(msg)
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<f32>, op: Op, requires_grad: bool) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        self.nodes.push(Node { shape, value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, ids: &[usize]) -> bool {
        ids.iter().any(|&i| self.nodes[i].requires_grad)
    }

    /// Adds a leaf holding a copy of `t`. Its gradient is tracked iff
    /// `t.requires_grad()`.
    pub fn leaf(&mut self, t: &Tensor) -> Var {
        self.push(t.shape().to_vec(), t.data().to_vec(), Op::Leaf, t.requires_grad())
    }

    /// Adds a constant leaf (never differentiated).
    pub fn constant(&mut self, shape: &[usize], data: Vec<f32>) -> Result<Var> {
        let t = Tensor::new(shape, data)?;
        Ok(self.push(t.shape().to_vec(), t.into_data(), Op::Leaf, false))
    }

    /// Binds the named parameter of `store` as a differentiable leaf.
    pub fn param(&mut self, store: &ParamStore, name: &str) -> Result<Var> {
        let idx = store
            .index_of(name)
            .ok_or_else(|| Error::Checkpoint(format!("missing parameter `{name}`")))?;
        let t = store.get_index(idx);
        let v = self.push(t.shape().to_vec(), t.data().to_vec(), Op::Leaf, true);
        self.bindings.push((v.0, idx));
        Ok(v)
    }

    pub fn value(&self, v: Var) -> &[f32] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn tensor(&self, v: Var) -> Tensor {
        Tensor::new(&self.nodes[v.0].shape, self.nodes[v.0].value.clone())
            .expect("graph node shape is consistent")
    }

    /// Gradient of the last backward pass with respect to `v`.
    pub fn grad(&self, v: Var) -> Option<&[f32]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Shapes of every non-leaf node, in execution order.
    pub fn intermediate_shapes(&self) -> Vec<Vec<usize>> {
        self.nodes
            .iter()
            .filter(|n| !matches!(n.op, Op::Leaf))
            .map(|n| n.shape.clone())
            .collect()
    }

    /// Element count of the largest non-leaf node.
    pub fn largest_intermediate(&self) -> usize {
        self.nodes
            .iter()
            .filter(|n| !matches!(n.op, Op::Leaf))
            .map(|n| n.value.len())
            .max()
            .unwrap_or(0)
    }

    /// Rows and columns of a matrix node.
    pub fn dims2_of(&self, v: Var) -> Result<(usize, usize)> {
        self.dims2(v)
    }

    fn dims2(&self, v: Var) -> Result<(usize, usize)> {
        match self.shape(v) {
            [r, c] => Ok((*r, *c)),
            s => Err(shape_err(format!("expected a matrix, got {s:?}"))),
        }
    }

    fn dims3(&self, v: Var) -> Result<(usize, usize, usize)> {
        match self.shape(v) {
            [b, r, c] => Ok((*b, *r, *c)),
            s => Err(shape_err(format!("expected a rank-3 tensor, got {s:?}"))),
        }
    }

    fn last_dim(&self, v: Var) -> usize {
        *self.shape(v).last().expect("tensors have rank >= 1")
    }

    // ---- linear algebra -------------------------------------------------

    /// `a[m×k] · b[k×n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, false)
    }

    /// `a[m×k] · b[n×k]ᵀ`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, true)
    }

    fn matmul_impl(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (m, k) = self.dims2(a)?;
        let (br, bc) = self.dims2(b)?;
        let (bk, n) = if trans_b { (bc, br) } else { (br, bc) };
        if k != bk {
            return Err(shape_err(format!(
                "matmul inner dimensions differ: {:?} x {:?}{}",
                self.shape(a),
                self.shape(b),
                if trans_b { "ᵀ" } else { "" }
            )));
        }
        let mut out = vec![0.0; m * n];
        let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if trans_b {
            kernels::gemm_nt(m, k, n, av, bv, &mut out);
        } else {
            kernels::gemm_nn(m, k, n, av, bv, &mut out);
        }
        let rg = self.rg(&[a.0, b.0]);
        Ok(self.push(vec![m, n], out, Op::MatMul { a: a.0, b: b.0, trans_b }, rg))
    }

    /// Batched `a[B×m×k] · b[B×k×n]`.
    pub fn bmm(&mut self, a: Var, b: Var) -> Result<Var> {
        self.bmm_impl(a, b, false)
    }

    /// Batched `a[B×m×k] · b[B×n×k]ᵀ`.
    pub fn bmm_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        self.bmm_impl(a, b, true)
    }

    fn bmm_impl(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (ba, m, k) = self.dims3(a)?;
        let (bb, br, bc) = self.dims3(b)?;
        let (bk, n) = if trans_b { (bc, br) } else { (br, bc) };
        if ba != bb || k != bk {
            return Err(shape_err(format!(
                "bmm shapes incompatible: {:?} x {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        let mut out = vec![0.0; ba * m * n];
        let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        for i in 0..ba {
            let (x, y, o) = (
                &av[i * m * k..(i + 1) * m * k],
                &bv[i * k * n..(i + 1) * k * n],
                &mut out[i * m * n..(i + 1) * m * n],
            );
            if trans_b {
                kernels::gemm_nt(m, k, n, x, y, o);
            } else {
                kernels::gemm_nn(m, k, n, x, y, o);
            }
        }
        let rg = self.rg(&[a.0, b.0]);
        Ok(self.push(vec![ba, m, n], out, Op::BatchMatMul { a: a.0, b: b.0, trans_b }, rg))
    }

    // ---- elementwise ----------------------------------------------------

    fn same_shape(&self, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err(format!(
                "elementwise shapes differ: {:?} vs {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b)?;
        let out: Vec<f32> = self.value(a).iter().zip(self.value(b)).map(|(x, y)| x + y).collect();
        let rg = self.rg(&[a.0, b.0]);
        Ok(self.push(self.shape(a).to_vec(), out, Op::Add { a: a.0, b: b.0 }, rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b)?;
        let out: Vec<f32> = self.value(a).iter().zip(self.value(b)).map(|(x, y)| x * y).collect();
        let rg = self.rg(&[a.0, b.0]);
        Ok(self.push(self.shape(a).to_vec(), out, Op::Mul { a: a.0, b: b.0 }, rg))
    }

    pub fn scale(&mut self, a: Var, factor: f32) -> Var {
        let out: Vec<f32> = self.value(a).iter().map(|x| x * factor).collect();
        let rg = self.rg(&[a.0]);
        self.push(self.shape(a).to_vec(), out, Op::Scale { a: a.0, factor }, rg)
    }

    /// Adds `b` to every trailing block of `a`; `b`'s shape must equal a
    /// suffix of `a`'s shape (bias vectors, positional tables).
    pub fn add_broadcast(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sb.len() > sa.len() || sa[sa.len() - sb.len()..] != *sb {
            return Err(shape_err(format!("cannot broadcast {sb:?} onto {sa:?}")));
        }
        let block = self.value(b).len();
        let bv = self.value(b).to_vec();
        let mut out = self.value(a).to_vec();
        for chunk in out.chunks_mut(block) {
            chunk.iter_mut().zip(&bv).for_each(|(x, y)| *x += y);
        }
        let rg = self.rg(&[a.0, b.0]);
        Ok(self.push(self.shape(a).to_vec(), out, Op::AddBroadcast { a: a.0, b: b.0 }, rg))
    }

    /// Multiplies every trailing block of `a` by `b` (per-channel gains).
    pub fn mul_broadcast(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sb.len() > sa.len() || sa[sa.len() - sb.len()..] != *sb {
            return Err(shape_err(format!("cannot broadcast {sb:?} onto {sa:?}")));
        }
        let bv = self.value(b);
        let mut out = self.value(a).to_vec();
        for chunk in out.chunks_mut(bv.len()) {
            chunk.iter_mut().zip(bv).for_each(|(x, y)| *x *= y);
        }
        let rg = self.rg(&[a.0, b.0]);
        Ok(self.push(self.shape(a).to_vec(), out, Op::MulBroadcast { a: a.0, b: b.0 }, rg))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out: Vec<f32> = self.value(a).iter().map(|&x| x.max(0.0)).collect();
        let rg = self.rg(&[a.0]);
        self.push(self.shape(a).to_vec(), out, Op::Relu { a: a.0 }, rg)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let out: Vec<f32> = self.value(a).iter().map(|&x| sigmoid(x)).collect();
        let rg = self.rg(&[a.0]);
        self.push(self.shape(a).to_vec(), out, Op::Sigmoid { a: a.0 }, rg)
    }

    /// Softmax over the last axis, stabilized by row-max subtraction.
    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let n = self.last_dim(a);
        let mut out = self.value(a).to_vec();
        for row in out.chunks_mut(n) {
            softmax_in_place(row);
        }
        let rg = self.rg(&[a.0]);
        self.push(self.shape(a).to_vec(), out, Op::Softmax { a: a.0 }, rg)
    }

    /// Normalizes each row over the last axis, then applies `gain` and `bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let c = self.last_dim(x);
        if self.shape(gain) != [c] || self.shape(bias) != [c] {
            return Err(shape_err(format!(
                "layer_norm affine params must be [{c}], got {:?}/{:?}",
                self.shape(gain),
                self.shape(bias)
            )));
        }
        let xv = self.value(x);
        let rows = xv.len() / c;
        let mut xhat = vec![0.0; xv.len()];
        let mut rstd = vec![0.0; rows];
        for r in 0..rows {
            let row = &xv[r * c..(r + 1) * c];
            let mean = row.iter().sum::<f32>() / c as f32;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f32>() / c as f32;
            let s = 1.0 / (var + LN_EPS).sqrt();
            rstd[r] = s;
            for j in 0..c {
                xhat[r * c + j] = (row[j] - mean) * s;
            }
        }
        let (gv, bv) = (self.value(gain), self.value(bias));
        let out: Vec<f32> = xhat
            .iter()
            .enumerate()
            .map(|(i, h)| h * gv[i % c] + bv[i % c])
            .collect();
        let rg = self.rg(&[x.0, gain.0, bias.0]);
        Ok(self.push(
            self.shape(x).to_vec(),
            out,
            Op::LayerNorm { x: x.0, gain: gain.0, bias: bias.0, xhat, rstd },
            rg,
        ))
    }

    // ---- layout ---------------------------------------------------------

    /// Column-wise concatenation of matrices sharing their row count.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(shape_err("concat of zero tensors".into()));
        }
        let rows = self.dims2(parts[0])?.0;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (r, c) = self.dims2(p)?;
            if r != rows {
                return Err(shape_err(format!(
                    "concat leading dimensions differ: {rows} vs {r}"
                )));
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.value(p)[r * w..(r + 1) * w]);
            }
        }
        let ids: Vec<usize> = parts.iter().map(|p| p.0).collect();
        let rg = self.rg(&ids);
        Ok(self.push(vec![rows, total], out, Op::ConcatCols { parts: ids }, rg))
    }

    /// Columns `start..start + len` of a matrix.
    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let (rows, cols) = self.dims2(a)?;
        if len == 0 || start + len > cols {
            return Err(shape_err(format!(
                "column slice {start}..{} out of {cols}",
                start + len
            )));
        }
        let av = self.value(a);
        let mut out = Vec::with_capacity(rows * len);
        for r in 0..rows {
            out.extend_from_slice(&av[r * cols + start..r * cols + start + len]);
        }
        let rg = self.rg(&[a.0]);
        Ok(self.push(vec![rows, len], out, Op::SliceCols { a: a.0, start }, rg))
    }

    /// Gathers the listed rows of a matrix.
    pub fn select_rows(&mut self, a: Var, rows: &[usize]) -> Result<Var> {
        let (n, c) = self.dims2(a)?;
        if let Some(&bad) = rows.iter().find(|&&r| r >= n) {
            return Err(shape_err(format!("row {bad} out of {n}")));
        }
        if rows.is_empty() {
            return Err(shape_err("empty row selection".into()));
        }
        let av = self.value(a);
        let mut out = Vec::with_capacity(rows.len() * c);
        for &r in rows {
            out.extend_from_slice(&av[r * c..(r + 1) * c]);
        }
        let rg = self.rg(&[a.0]);
        Ok(self.push(vec![rows.len(), c], out, Op::SelectRows { a: a.0, rows: rows.to_vec() }, rg))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let numel: usize = shape.iter().product();
        if numel != self.value(a).len() || shape.contains(&0) {
            return Err(shape_err(format!(
                "cannot reshape {:?} into {shape:?}",
                self.shape(a)
            )));
        }
        let out = self.value(a).to_vec();
        let rg = self.rg(&[a.0]);
        Ok(self.push(shape.to_vec(), out, Op::Reshape { a: a.0 }, rg))
    }

    /// Mean over axis 1 of a `[B×M×C]` tensor, giving `[B×C]`.
    pub fn mean_axis1(&mut self, a: Var) -> Result<Var> {
        let (b, m, c) = self.dims3(a)?;
        let av = self.value(a);
        let mut out = vec![0.0; b * c];
        for i in 0..b {
            for j in 0..m {
                let src = &av[(i * m + j) * c..(i * m + j + 1) * c];
                out[i * c..(i + 1) * c].iter_mut().zip(src).for_each(|(o, s)| *o += s);
            }
        }
        let inv = 1.0 / m as f32;
        out.iter_mut().for_each(|v| *v *= inv);
        let rg = self.rg(&[a.0]);
        Ok(self.push(vec![b, c], out, Op::MeanAxis1 { a: a.0 }, rg))
    }

    /// Windowed neighbor contexts: `[N×C] → [N×(2k+1)×C]`, zero-padded at
    /// both ends. Built from one padded buffer; window `i` is the contiguous
    /// slice starting at row `i`.
    pub fn spos(&mut self, a: Var, k: usize) -> Result<Var> {
        let (n, c) = self.dims2(a)?;
        let t = 2 * k + 1;
        let mut padded = vec![0.0; (n + 2 * k) * c];
        padded[k * c..(k + n) * c].copy_from_slice(self.value(a));
        let mut out = Vec::with_capacity(n * t * c);
        for i in 0..n {
            out.extend_from_slice(&padded[i * c..(i + t) * c]);
        }
        let rg = self.rg(&[a.0]);
        Ok(self.push(vec![n, t, c], out, Op::Spos { a: a.0, k }, rg))
    }

    // ---- convolution ----------------------------------------------------

    /// 1-D cross-correlation of `x[N×C_in]` with `w[K×C_in×C_out]` along
    /// the row axis.
    pub fn conv1d(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Result<Var> {
        let (n, c_in) = self.dims2(x)?;
        let (k, wc, c_out) = self.dims3(w)?;
        if wc != c_in {
            return Err(shape_err(format!("conv1d kernel expects {wc} channels, input has {c_in}")));
        }
        let geom = Conv2dGeom { batch: 1, h: n, w: 1, c_in, kh: k, kw: 1, c_out, stride, pad_h: pad, pad_w: 0 };
        let out = self.conv_impl(x, w, b, geom)?;
        let oh = geom.out_h();
        self.nodes[out.0].shape = vec![oh, c_out];
        Ok(out)
    }

    /// 2-D cross-correlation of `x[H×W×C_in]` (or batched `[B×H×W×C_in]`)
    /// with `w[kh×kw×C_in×C_out]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Result<Var> {
        let (batch, h, wd, c_in, batched) = match *self.shape(x) {
            [h, w, c] => (1, h, w, c, false),
            [b, h, w, c] => (b, h, w, c, true),
            ref s => return Err(shape_err(format!("conv2d input must be rank 3 or 4, got {s:?}"))),
        };
        let (kh, kw, wc, c_out) = match *self.shape(w) {
            [a, b, c, d] => (a, b, c, d),
            ref s => return Err(shape_err(format!("conv2d kernel must be rank 4, got {s:?}"))),
        };
        if wc != c_in {
            return Err(shape_err(format!("conv2d kernel expects {wc} channels, input has {c_in}")));
        }
        let geom = Conv2dGeom { batch, h, w: wd, c_in, kh, kw, c_out, stride, pad_h: pad, pad_w: pad };
        let out = self.conv_impl(x, w, b, geom)?;
        let (oh, ow) = (geom.out_h(), geom.out_w());
        self.nodes[out.0].shape = if batched {
            vec![batch, oh, ow, c_out]
        } else {
            vec![oh, ow, c_out]
        };
        Ok(out)
    }

    fn conv_impl(&mut self, x: Var, w: Var, b: Var, geom: Conv2dGeom) -> Result<Var> {
        if geom.stride == 0 {
            return Err(Error::InvalidConfig("convolution stride must be positive".into()));
        }
        if geom.kh > geom.h + 2 * geom.pad_h || geom.kw > geom.w + 2 * geom.pad_w {
            return Err(shape_err(format!(
                "kernel {}x{} larger than padded input {}x{}",
                geom.kh,
                geom.kw,
                geom.h + 2 * geom.pad_h,
                geom.w + 2 * geom.pad_w
            )));
        }
        if self.shape(b) != [geom.c_out] {
            return Err(shape_err(format!(
                "conv bias must be [{}], got {:?}",
                geom.c_out,
                self.shape(b)
            )));
        }
        let cols = geom.im2col(self.value(x));
        let rows = geom.batch * geom.out_h() * geom.out_w();
        let mut out = vec![0.0; rows * geom.c_out];
        kernels::gemm_nn(rows, geom.patch(), geom.c_out, &cols, self.value(w), &mut out);
        let bv = self.value(b);
        for row in out.chunks_mut(geom.c_out) {
            row.iter_mut().zip(bv).for_each(|(o, bb)| *o += bb);
        }
        let rg = self.rg(&[x.0, w.0, b.0]);
        let numel = out.len();
        Ok(self.push(vec![numel], out, Op::Conv { x: x.0, w: w.0, b: b.0, geom, cols }, rg))
    }

    // ---- reductions and losses ------------------------------------------

    pub fn sum(&mut self, a: Var) -> Var {
        let s: f64 = self.value(a).iter().map(|&v| v as f64).sum();
        let rg = self.rg(&[a.0]);
        self.push(vec![1], vec![s as f32], Op::Sum { a: a.0 }, rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).len() as f32;
        let s = self.sum(a);
        self.scale(s, 1.0 / n)
    }

    /// `−(1/N) Σ wᵢ [yᵢ log pᵢ + (1−yᵢ) log(1−pᵢ)]` with `p` clipped to
    /// `[ε, 1−ε]`. `target` and `weight` are constants.
    pub fn weighted_bce(&mut self, p: Var, target: &[f32], weight: &[f32]) -> Result<Var> {
        let n = self.value(p).len();
        if target.len() != n {
            return Err(Error::LengthMismatch { expected: n, got: target.len() });
        }
        if weight.len() != n {
            return Err(Error::LengthMismatch { expected: n, got: weight.len() });
        }
        let mut acc = 0.0f64;
        for ((&pi, &yi), &wi) in self.value(p).iter().zip(target).zip(weight) {
            let pc = pi.clamp(BCE_EPS, 1.0 - BCE_EPS) as f64;
            let (y, w) = (yi as f64, wi as f64);
            acc += w * (y * pc.ln() + (1.0 - y) * (1.0 - pc).ln());
        }
        let loss = (-acc / n as f64) as f32;
        let rg = self.rg(&[p.0]);
        Ok(self.push(
            vec![1],
            vec![loss],
            Op::WeightedBce { p: p.0, target: target.to_vec(), weight: weight.to_vec() },
            rg,
        ))
    }

    // ---- backward ------------------------------------------------------

    /// Reverse sweep from the scalar `loss`. Every differentiable leaf
    /// receives a gradient buffer (zeros when unreachable).
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.nodes[loss.0].value.len() != 1 {
            return Err(shape_err(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        self.grads = (0..self.nodes.len()).map(|_| None).collect();
        self.grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = self.grads[i].take() else { continue };
            self.propagate(i, &g);
            self.grads[i] = Some(g);
        }
        for (i, node) in self.nodes.iter().enumerate() {
            if matches!(node.op, Op::Leaf) && node.requires_grad && self.grads[i].is_none() {
                self.grads[i] = Some(vec![0.0; node.value.len()]);
            }
        }
        Ok(())
    }

    /// Adds the gradients of every bound parameter into `store`.
    pub fn accumulate_param_grads(&self, store: &mut ParamStore) -> Result<()> {
        for &(node, idx) in &self.bindings {
            if let Some(g) = self.grads.get(node).and_then(|g| g.as_ref()) {
                store.get_index_mut(idx).accumulate_grad(g)?;
            }
        }
        Ok(())
    }

    fn grad_buf(&mut self, id: usize) -> Option<&mut Vec<f32>> {
        if !self.nodes[id].requires_grad {
            return None;
        }
        let len = self.nodes[id].shape.iter().product();
        Some(self.grads[id].get_or_insert_with(|| vec![0.0; len]))
    }

    fn propagate(&mut self, i: usize, g: &[f32]) {
        // Ops are taken out temporarily so parent buffers can be borrowed.
        let op = std::mem::replace(&mut self.nodes[i].op, Op::Leaf);
        match &op {
            Op::Leaf => {}
            &Op::MatMul { a, b, trans_b } => {
                let (m, k) = (self.nodes[a].shape[0], self.nodes[a].shape[1]);
                let n = self.nodes[i].shape[1];
                let bv = std::mem::take(&mut self.nodes[b].value);
                if let Some(da) = self.grad_buf(a) {
                    if trans_b {
                        kernels::gemm_nn(m, n, k, g, &bv, da);
                    } else {
                        kernels::gemm_nt(m, n, k, g, &bv, da);
                    }
                }
                self.nodes[b].value = bv;
                let av = std::mem::take(&mut self.nodes[a].value);
                if let Some(db) = self.grad_buf(b) {
                    if trans_b {
                        kernels::gemm_tn(n, m, k, g, &av, db);
                    } else {
                        kernels::gemm_tn(k, m, n, &av, g, db);
                    }
                }
                self.nodes[a].value = av;
            }
            &Op::BatchMatMul { a, b, trans_b } => {
                let (bs, m, k) = (self.nodes[a].shape[0], self.nodes[a].shape[1], self.nodes[a].shape[2]);
                let n = self.nodes[i].shape[2];
                let bv = std::mem::take(&mut self.nodes[b].value);
                if let Some(da) = self.grad_buf(a) {
                    for s in 0..bs {
                        let (gs, bb, d) = (
                            &g[s * m * n..(s + 1) * m * n],
                            &bv[s * k * n..(s + 1) * k * n],
                            &mut da[s * m * k..(s + 1) * m * k],
                        );
                        if trans_b {
                            kernels::gemm_nn(m, n, k, gs, bb, d);
                        } else {
                            kernels::gemm_nt(m, n, k, gs, bb, d);
                        }
                    }
                }
                self.nodes[b].value = bv;
                let av = std::mem::take(&mut self.nodes[a].value);
                if let Some(db) = self.grad_buf(b) {
                    for s in 0..bs {
                        let (gs, aa, d) = (
                            &g[s * m * n..(s + 1) * m * n],
                            &av[s * m * k..(s + 1) * m * k],
                            &mut db[s * k * n..(s + 1) * k * n],
                        );
                        if trans_b {
                            kernels::gemm_tn(n, m, k, gs, aa, d);
                        } else {
                            kernels::gemm_tn(k, m, n, aa, gs, d);
                        }
                    }
                }
                self.nodes[a].value = av;
            }
            &Op::Add { a, b } => {
                for id in [a, b] {
                    if let Some(d) = self.grad_buf(id) {
                        d.iter_mut().zip(g).for_each(|(x, y)| *x += y);
                    }
                }
            }
            &Op::Mul { a, b } => {
                let bv = std::mem::take(&mut self.nodes[b].value);
                if let Some(d) = self.grad_buf(a) {
                    for j in 0..g.len() {
                        d[j] += g[j] * bv[j];
                    }
                }
                self.nodes[b].value = bv;
                let av = std::mem::take(&mut self.nodes[a].value);
                if let Some(d) = self.grad_buf(b) {
                    for j in 0..g.len() {
                        d[j] += g[j] * av[j];
                    }
                }
                self.nodes[a].value = av;
            }
            &Op::Scale { a, factor } => {
                if let Some(d) = self.grad_buf(a) {
                    d.iter_mut().zip(g).for_each(|(x, y)| *x += factor * y);
                }
            }
            &Op::AddBroadcast { a, b } => {
                if let Some(d) = self.grad_buf(a) {
                    d.iter_mut().zip(g).for_each(|(x, y)| *x += y);
                }
                if let Some(d) = self.grad_buf(b) {
                    let block = d.len();
                    for chunk in g.chunks(block) {
                        d.iter_mut().zip(chunk).for_each(|(x, y)| *x += y);
                    }
                }
            }
            &Op::MulBroadcast { a, b } => {
                let bv = std::mem::take(&mut self.nodes[b].value);
                if let Some(d) = self.grad_buf(a) {
                    for (dc, gc) in d.chunks_mut(bv.len()).zip(g.chunks(bv.len())) {
                        for j in 0..bv.len() {
                            dc[j] += gc[j] * bv[j];
                        }
                    }
                }
                let block = bv.len();
                self.nodes[b].value = bv;
                let av = std::mem::take(&mut self.nodes[a].value);
                if let Some(d) = self.grad_buf(b) {
                    for (ac, gc) in av.chunks(block).zip(g.chunks(block)) {
                        for j in 0..block {
                            d[j] += gc[j] * ac[j];
                        }
                    }
                }
                self.nodes[a].value = av;
            }
            &Op::Relu { a } => {
                let y = std::mem::take(&mut self.nodes[i].value);
                if let Some(d) = self.grad_buf(a) {
                    for j in 0..g.len() {
                        if y[j] > 0.0 {
                            d[j] += g[j];
                        }
                    }
                }
                self.nodes[i].value = y;
            }
            &Op::Sigmoid { a } => {
                let y = std::mem::take(&mut self.nodes[i].value);
                if let Some(d) = self.grad_buf(a) {
                    for j in 0..g.len() {
                        d[j] += g[j] * y[j] * (1.0 - y[j]);
                    }
                }
                self.nodes[i].value = y;
            }
            &Op::Softmax { a } => {
                let n = *self.nodes[i].shape.last().unwrap();
                let y = std::mem::take(&mut self.nodes[i].value);
                if let Some(d) = self.grad_buf(a) {
                    for r in 0..y.len() / n {
                        let (yr, gr) = (&y[r * n..(r + 1) * n], &g[r * n..(r + 1) * n]);
                        let s = kernels::dot(yr, gr);
                        for j in 0..n {
                            d[r * n + j] += yr[j] * (gr[j] - s);
                        }
                    }
                }
                self.nodes[i].value = y;
            }
            Op::LayerNorm { x, gain, bias, xhat, rstd } => {
                let (x, gain, bias) = (*x, *gain, *bias);
                let c = self.nodes[gain].value.len();
                let gv = self.nodes[gain].value.clone();
                if let Some(d) = self.grad_buf(gain) {
                    for (j, (gj, hj)) in g.iter().zip(xhat.iter()).enumerate() {
                        d[j % c] += gj * hj;
                    }
                }
                if let Some(d) = self.grad_buf(bias) {
                    for (j, gj) in g.iter().enumerate() {
                        d[j % c] += gj;
                    }
                }
                if let Some(d) = self.grad_buf(x) {
                    let mut dxhat = vec![0.0; c];
                    for r in 0..rstd.len() {
                        let (gr, hr) = (&g[r * c..(r + 1) * c], &xhat[r * c..(r + 1) * c]);
                        for j in 0..c {
                            dxhat[j] = gr[j] * gv[j];
                        }
                        let m1 = dxhat.iter().sum::<f32>() / c as f32;
                        let m2 = kernels::dot(&dxhat, hr) / c as f32;
                        for j in 0..c {
                            d[r * c + j] += rstd[r] * (dxhat[j] - m1 - hr[j] * m2);
                        }
                    }
                }
            }
            Op::ConcatCols { parts } => {
                let rows = self.nodes[i].shape[0];
                let total = self.nodes[i].shape[1];
                let mut start = 0;
                for &p in parts {
                    let w = self.nodes[p].shape[1];
                    if let Some(d) = self.grad_buf(p) {
                        for r in 0..rows {
                            let src = &g[r * total + start..r * total + start + w];
                            d[r * w..(r + 1) * w].iter_mut().zip(src).for_each(|(x, y)| *x += y);
                        }
                    }
                    start += w;
                }
            }
            &Op::SliceCols { a, start } => {
                let (rows, len) = (self.nodes[i].shape[0], self.nodes[i].shape[1]);
                let cols = self.nodes[a].shape[1];
                if let Some(d) = self.grad_buf(a) {
                    for r in 0..rows {
                        let dst = &mut d[r * cols + start..r * cols + start + len];
                        dst.iter_mut().zip(&g[r * len..(r + 1) * len]).for_each(|(x, y)| *x += y);
                    }
                }
            }
            Op::SelectRows { a, rows } => {
                let c = self.nodes[i].shape[1];
                if let Some(d) = self.grad_buf(*a) {
                    for (k, &r) in rows.iter().enumerate() {
                        let dst = &mut d[r * c..(r + 1) * c];
                        dst.iter_mut().zip(&g[k * c..(k + 1) * c]).for_each(|(x, y)| *x += y);
                    }
                }
            }
            &Op::Reshape { a } => {
                if let Some(d) = self.grad_buf(a) {
                    d.iter_mut().zip(g).for_each(|(x, y)| *x += y);
                }
            }
            Op::Conv { x, w, b, geom, cols } => {
                let (x, w, b, geom) = (*x, *w, *b, *geom);
                let rows = geom.batch * geom.out_h() * geom.out_w();
                if let Some(d) = self.grad_buf(b) {
                    for row in g.chunks(geom.c_out) {
                        d.iter_mut().zip(row).for_each(|(x, y)| *x += y);
                    }
                }
                if let Some(d) = self.grad_buf(w) {
                    kernels::gemm_tn(geom.patch(), rows, geom.c_out, cols, g, d);
                }
                if self.nodes[x].requires_grad {
                    let mut dcols = vec![0.0; cols.len()];
                    kernels::gemm_nt(rows, geom.c_out, geom.patch(), g, &self.nodes[w].value, &mut dcols);
                    let d = self.grad_buf(x).expect("requires grad");
                    geom.col2im(&dcols, d);
                }
            }
            &Op::MeanAxis1 { a } => {
                let (b, m, c) = (self.nodes[a].shape[0], self.nodes[a].shape[1], self.nodes[a].shape[2]);
                let inv = 1.0 / m as f32;
                if let Some(d) = self.grad_buf(a) {
                    for s in 0..b {
                        for j in 0..m {
                            let dst = &mut d[(s * m + j) * c..(s * m + j + 1) * c];
                            dst.iter_mut().zip(&g[s * c..(s + 1) * c]).for_each(|(x, y)| *x += inv * y);
                        }
                    }
                }
            }
            &Op::Spos { a, k } => {
                let (n, c) = (self.nodes[a].shape[0], self.nodes[a].shape[1]);
                let t = 2 * k + 1;
                if let Some(d) = self.grad_buf(a) {
                    for row in 0..n {
                        for slot in 0..t {
                            let src = row + slot;
                            if src < k || src >= n + k {
                                continue;
                            }
                            let src = src - k;
                            let gs = &g[(row * t + slot) * c..(row * t + slot + 1) * c];
                            d[src * c..(src + 1) * c].iter_mut().zip(gs).for_each(|(x, y)| *x += y);
                        }
                    }
                }
            }
            &Op::Sum { a } => {
                let g0 = g[0];
                if let Some(d) = self.grad_buf(a) {
                    d.iter_mut().for_each(|x| *x += g0);
                }
            }
            Op::WeightedBce { p, target, weight } => {
                let p = *p;
                let n = target.len() as f32;
                let g0 = g[0];
                let pv = std::mem::take(&mut self.nodes[p].value);
                if let Some(d) = self.grad_buf(p) {
                    for j in 0..pv.len() {
                        let pj = pv[j];
                        if pj <= BCE_EPS || pj >= 1.0 - BCE_EPS {
                            continue;
                        }
                        let y = target[j];
                        d[j] += -g0 * weight[j] / n * (y / pj - (1.0 - y) / (1.0 - pj));
                    }
                }
                self.nodes[p].value = pv;
            }
        }
        self.nodes[i].op = op;
    }
}

#[inline]
pub fn sigmoid(x: f32) -> f32 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn softmax_in_place(row: &mut [f32]) {
    let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let mut total = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    let inv = 1.0 / total;
    row.iter_mut().for_each(|v| *v *= inv);
}
