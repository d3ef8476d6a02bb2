//! Reverse-mode automatic differentiation over dense tensors.
//!
//! A [`Tape`] records every operation applied to [`Var`] handles in append
//! order. [`Tape::backward`] walks the nodes in strict reverse order, so each
//! node is visited exactly once after all of its consumers.
//!
//! Leaves created with [`Tape::param`] receive gradients; leaves created with
//! [`Tape::constant`] never do, and neither does anything computed only from
//! constants.

use std::sync::Arc;

use crate::error::{shape_err, Result, VineError};
use crate::tensor::Tensor;

/// Denominator floor for cosine similarity.
pub const COS_EPS: f64 = 1e-8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// A fixed sparse linear map applied independently to every channel of a
/// `C×H×W` map: `out[c, o] = Σ_k w_k · in[c, idx_k]` over the taps of `o`.
///
/// Bilinear warps and upsampling are both expressed this way, so they are
/// linear in the image and differentiable with respect to it.
#[derive(Clone, Debug)]
pub struct ResampleTable {
    pub in_hw: (usize, usize),
    pub out_hw: (usize, usize),
    row_ptr: Vec<usize>,
    taps: Vec<(usize, f64)>,
}

impl ResampleTable {
    /// Builds a table from per-output-pixel tap lists in row-major order.
    pub fn from_rows(in_hw: (usize, usize), out_hw: (usize, usize), rows: Vec<Vec<(usize, f64)>>) -> Self {
        assert_eq!(rows.len(), out_hw.0 * out_hw.1);
        let mut row_ptr = Vec::with_capacity(rows.len() + 1);
        let mut taps = Vec::new();
        row_ptr.push(0);
        for r in rows {
            for &(i, _) in &r {
                assert!(i < in_hw.0 * in_hw.1);
            }
            taps.extend(r);
            row_ptr.push(taps.len());
        }
        Self {
            in_hw,
            out_hw,
            row_ptr,
            taps,
        }
    }

    pub fn taps(&self, out_index: usize) -> &[(usize, f64)] {
        &self.taps[self.row_ptr[out_index]..self.row_ptr[out_index + 1]]
    }

    /// Applies the map to a `C×H×W` tensor (or `H×W`, treated as one channel).
    pub fn apply(&self, x: &Tensor) -> Result<Tensor> {
        let (c, h, w) = chw(x.shape()).ok_or_else(|| shape_err("resample", x.shape(), &[self.in_hw.0, self.in_hw.1]))?;
        if (h, w) != self.in_hw {
            return Err(shape_err("resample", x.shape(), &[self.in_hw.0, self.in_hw.1]));
        }
        let n_in = h * w;
        let n_out = self.out_hw.0 * self.out_hw.1;
        let mut out = vec![0.0; c * n_out];
        let xd = x.data();
        for ch in 0..c {
            let src = &xd[ch * n_in..(ch + 1) * n_in];
            let dst = &mut out[ch * n_out..(ch + 1) * n_out];
            for (o, d) in dst.iter_mut().enumerate() {
                let mut taps = self.taps(o).iter();
                *d = match taps.next() {
                    Some(&(i, wt)) => taps.fold(wt * src[i], |acc, &(i, wt)| acc + wt * src[i]),
                    None => 0.0,
                };
            }
        }
        let shape = if x.rank() == 2 {
            vec![self.out_hw.0, self.out_hw.1]
        } else {
            vec![c, self.out_hw.0, self.out_hw.1]
        };
        Tensor::new(&shape, out)
    }
}

fn chw(shape: &[usize]) -> Option<(usize, usize, usize)> {
    match *shape {
        [c, h, w] => Some((c, h, w)),
        [h, w] => Some((1, h, w)),
        _ => None,
    }
}

/// Incoming neighbourhoods of a directed graph in CSR form: for destination
/// node `i`, `sources(i)` lists every `j` with an edge `j → i`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct InNeighborhoods {
    offsets: Vec<usize>,
    sources: Vec<usize>,
}

impl InNeighborhoods {
    pub fn from_edges(num_nodes: usize, edges: &[(usize, usize)]) -> Self {
        let mut lists = vec![Vec::new(); num_nodes];
        for &(src, dst) in edges {
            lists[dst].push(src);
        }
        let mut offsets = Vec::with_capacity(num_nodes + 1);
        let mut sources = Vec::with_capacity(edges.len());
        offsets.push(0);
        for mut l in lists {
            l.sort_unstable();
            sources.extend(l);
            offsets.push(sources.len());
        }
        Self { offsets, sources }
    }

    pub fn num_nodes(&self) -> usize {
        self.offsets.len() - 1
    }

    pub fn sources(&self, dst: usize) -> &[usize] {
        &self.sources[self.offsets[dst]..self.offsets[dst + 1]]
    }

    pub fn num_edges(&self) -> usize {
        self.sources.len()
    }

    fn edge_range(&self, dst: usize) -> std::ops::Range<usize> {
        self.offsets[dst]..self.offsets[dst + 1]
    }
}

/// Attention coefficients for every edge, grouped by destination in CSR order:
/// `α_ij = softmax_j(LeakyReLU(s_src[j] + s_dst[i]))` over the in-neighbourhood of `i`.
pub fn edge_softmax(s_src: &[f64], s_dst: &[f64], nbr: &InNeighborhoods, slope: f64) -> Vec<f64> {
    let mut alpha = vec![0.0; nbr.num_edges()];
    for i in 0..nbr.num_nodes() {
        let range = nbr.edge_range(i);
        if range.is_empty() {
            continue;
        }
        let mut max = f64::NEG_INFINITY;
        for (e, &j) in range.clone().zip(nbr.sources(i)) {
            let u = s_src[j] + s_dst[i];
            let l = if u > 0.0 { u } else { slope * u };
            alpha[e] = l;
            max = max.max(l);
        }
        let mut sum = 0.0;
        for a in &mut alpha[range.clone()] {
            *a = (*a - max).exp();
            sum += *a;
        }
        for a in &mut alpha[range] {
            *a /= sum;
        }
    }
    alpha
}

/// Softmax along the last axis with an optional keep-mask over last-axis
/// positions (shared by every row). Masked positions get weight exactly 0.
pub fn softmax_rows(data: &[f64], n: usize, mask: Option<&[bool]>) -> Vec<f64> {
    let mut out = vec![0.0; data.len()];
    for (row, o) in data.chunks(n).zip(out.chunks_mut(n)) {
        let keep = |k: usize| mask.is_none_or(|m| m[k]);
        let mut max = f64::NEG_INFINITY;
        for (k, &x) in row.iter().enumerate() {
            if keep(k) {
                max = max.max(x);
            }
        }
        let mut sum = 0.0;
        for (k, (&x, y)) in row.iter().zip(o.iter_mut()).enumerate() {
            if keep(k) {
                *y = (x - max).exp();
                sum += *y;
            }
        }
        for y in o.iter_mut() {
            *y /= sum;
        }
    }
    out
}

pub(crate) fn matmul_kernel(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
    c
}

/// Stable `log(1 + exp(-|x|)) + max(x, 0) - x·t`.
pub fn bce_with_logits_elem(x: f64, t: f64) -> f64 {
    x.max(0.0) - x * t + (-x.abs()).exp().ln_1p()
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[derive(Clone, Copy, Debug)]
struct ConvGeom {
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    k: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
}

impl ConvGeom {
    fn im2col(&self, x: &[f64]) -> Vec<f64> {
        let rows = self.cin * self.k * self.k;
        let cols = self.ho * self.wo;
        let mut out = vec![0.0; rows * cols];
        for c in 0..self.cin {
            for ky in 0..self.k {
                for kx in 0..self.k {
                    let r = (c * self.k + ky) * self.k + kx;
                    let orow = &mut out[r * cols..(r + 1) * cols];
                    for oy in 0..self.ho {
                        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                        if iy < 0 || iy >= self.h as isize {
                            continue;
                        }
                        let xrow = &x[(c * self.h + iy as usize) * self.w..][..self.w];
                        for ox in 0..self.wo {
                            let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                            if ix >= 0 && ix < self.w as isize {
                                orow[oy * self.wo + ox] = xrow[ix as usize];
                            }
                        }
                    }
                }
            }
        }
        out
    }

    fn col2im(&self, cols_data: &[f64], dx: &mut [f64]) {
        let cols = self.ho * self.wo;
        for c in 0..self.cin {
            for ky in 0..self.k {
                for kx in 0..self.k {
                    let r = (c * self.k + ky) * self.k + kx;
                    let crow = &cols_data[r * cols..(r + 1) * cols];
                    for oy in 0..self.ho {
                        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                        if iy < 0 || iy >= self.h as isize {
                            continue;
                        }
                        let base = (c * self.h + iy as usize) * self.w;
                        for ox in 0..self.wo {
                            let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                            if ix >= 0 && ix < self.w as isize {
                                dx[base + ix as usize] += crow[oy * self.wo + ox];
                            }
                        }
                    }
                }
            }
        }
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    MatMul(Var, Var),
    Transpose(Var),
    Reshape(Var),
    Relu(Var),
    LeakyRelu(Var, f64),
    Sigmoid(Var),
    Softmax(Var),
    Concat(Vec<Var>, usize),
    Rows(Var, usize),
    SumAll(Var),
    MeanAll(Var),
    MeanAxis(Var, usize),
    BroadcastHw(Var),
    Conv2d { x: Var, w: Var, b: Var, geom: ConvGeom },
    CosineMap(Var, Var),
    Mse(Var, Var),
    BceLogits(Var, Arc<Tensor>),
    Dice(Var, Arc<Tensor>, f64),
    Resample(Var, Arc<ResampleTable>),
    GraphAttention { z: Var, s_src: Var, s_dst: Var, nbr: Arc<InNeighborhoods>, slope: f64, alpha: Vec<f64> },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::MatMul(..) => "matmul",
            Op::Transpose(..) => "transpose",
            Op::Reshape(..) => "reshape",
            Op::Relu(..) => "relu",
            Op::LeakyRelu(..) => "leaky_relu",
            Op::Sigmoid(..) => "sigmoid",
            Op::Softmax(..) => "softmax",
            Op::Concat(..) => "concat",
            Op::Rows(..) => "rows",
            Op::SumAll(..) => "sum",
            Op::MeanAll(..) => "mean",
            Op::MeanAxis(..) => "mean_axis",
            Op::BroadcastHw(..) => "broadcast_hw",
            Op::Conv2d { .. } => "conv2d",
            Op::CosineMap(..) => "cosine_map",
            Op::Mse(..) => "mse",
            Op::BceLogits(..) => "bce_with_logits",
            Op::Dice(..) => "dice",
            Op::Resample(..) => "resample",
            Op::GraphAttention { .. } => "graph_attention",
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
#[derive(Debug, Default)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient of the loss with respect to `v`, or `None` when `v` does not
    /// require gradients or does not influence the loss.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }
}

/// Append-only operation record for one forward pass.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    fault: Option<&'static str>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// Scales the upstream gradient of every node of the named op by 1.5
    /// during backward. Used by the gradient checker's negative control.
    #[doc(hidden)]
    pub fn inject_backward_fault(&mut self, op_name: &'static str) {
        self.fault = Some(op_name);
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// A leaf that never receives gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// A leaf whose gradient is tracked.
    pub fn param(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    fn unary(&mut self, a: Var, value: Tensor, op: Op) -> Var {
        let rg = self.nodes[a.0].requires_grad;
        self.push(value, op, rg)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err(op, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    fn zip_with(&mut self, a: Var, b: Var, op: Op, f: impl Fn(f64, f64) -> f64) -> Var {
        let av = &self.nodes[a.0].value;
        let bv = &self.nodes[b.0].value;
        let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| f(x, y)).collect();
        let value = Tensor::new(av.shape(), data).expect("same shape");
        let rg = self.any_grad(&[a, b]);
        self.push(value, op, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        Ok(self.zip_with(a, b, Op::Add(a, b), |x, y| x + y))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        Ok(self.zip_with(a, b, Op::Sub(a, b), |x, y| x - y))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        Ok(self.zip_with(a, b, Op::Mul(a, b), |x, y| x * y))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let value = self.value(a).map(|x| x * factor);
        self.unary(a, value, Op::Scale(a, factor))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let (m, k, n) = match (sa, sb) {
            (&[m, k], &[k2, n]) if k == k2 => (m, k, n),
            _ => return Err(shape_err("matmul", sa, sb)),
        };
        let c = matmul_kernel(self.value(a).data(), self.value(b).data(), m, k, n);
        let value = Tensor::new(&[m, n], c)?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(value, Op::MatMul(a, b), rg))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let (r, c) = match *self.shape(a) {
            [r, c] => (r, c),
            _ => return Err(shape_err("transpose", self.shape(a), &[0, 0])),
        };
        let d = self.value(a).data();
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = d[i * c + j];
            }
        }
        let value = Tensor::new(&[c, r], out)?;
        Ok(self.unary(a, value, Op::Transpose(a)))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(a).clone().reshape(shape)?;
        Ok(self.unary(a, value, Op::Reshape(a)))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|x| x.max(0.0));
        self.unary(a, value, Op::Relu(a))
    }

    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Var {
        let value = self.value(a).map(|x| if x > 0.0 { x } else { slope * x });
        self.unary(a, value, Op::LeakyRelu(a, slope))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let value = self.value(a).map(sigmoid);
        self.unary(a, value, Op::Sigmoid(a))
    }

    /// Softmax along the last axis, with max subtraction.
    pub fn softmax(&mut self, a: Var) -> Var {
        self.softmax_masked(a, None).expect("unmasked softmax is total")
    }

    /// Softmax along the last axis restricted to positions where `keep` is
    /// true. At least one position must be kept.
    pub fn softmax_masked(&mut self, a: Var, keep: Option<Arc<[bool]>>) -> Result<Var> {
        let n = *self.shape(a).last().expect("rank >= 1");
        if let Some(m) = &keep {
            if m.len() != n {
                return Err(shape_err("softmax_masked", self.shape(a), &[m.len()]));
            }
            if !m.iter().any(|&k| k) {
                return Err(VineError::InvalidArgument("softmax mask keeps no position".into()));
            }
        }
        let data = softmax_rows(self.value(a).data(), n, keep.as_deref());
        let value = Tensor::new(self.shape(a), data)?;
        Ok(self.unary(a, value, Op::Softmax(a)))
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = self.shape(parts[0]).to_vec();
        if axis >= first.len() {
            return Err(shape_err("concat", &first, &[axis]));
        }
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            if s.len() != first.len() || s.iter().enumerate().any(|(i, &d)| i != axis && d != first[i]) {
                return Err(shape_err("concat", &first, s));
            }
            total += s[axis];
        }
        let outer: usize = first[..axis].iter().product();
        let inner: usize = first[axis + 1..].iter().product();
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &p in parts {
                let chunk = self.shape(p)[axis] * inner;
                data.extend_from_slice(&self.value(p).data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let mut shape = first;
        shape[axis] = total;
        let value = Tensor::new(&shape, data)?;
        let rg = self.any_grad(parts);
        Ok(self.push(value, Op::Concat(parts.to_vec(), axis), rg))
    }

    /// Rows `start..start+len` of a 2-D tensor.
    pub fn rows(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let (r, c) = match *self.shape(a) {
            [r, c] if start + len <= r && len > 0 => (r, c),
            _ => return Err(shape_err("rows", self.shape(a), &[start, len])),
        };
        let _ = r;
        let data = self.value(a).data()[start * c..(start + len) * c].to_vec();
        let value = Tensor::new(&[len, c], data)?;
        Ok(self.unary(a, value, Op::Rows(a, start)))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        self.unary(a, Tensor::scalar(s), Op::SumAll(a))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let s = t.data().iter().sum::<f64>() / t.len() as f64;
        self.unary(a, Tensor::scalar(s), Op::MeanAll(a))
    }

    /// Mean of a 2-D tensor over `axis`, dropping that axis.
    pub fn mean_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let (r, c) = match *self.shape(a) {
            [r, c] if axis < 2 => (r, c),
            _ => return Err(shape_err("mean_axis", self.shape(a), &[axis])),
        };
        let d = self.value(a).data();
        let value = if axis == 0 {
            let mut out = vec![0.0; c];
            for row in d.chunks(c) {
                for (o, &x) in out.iter_mut().zip(row) {
                    *o += x;
                }
            }
            out.iter_mut().for_each(|o| *o /= r as f64);
            Tensor::new(&[c], out)?
        } else {
            let out = d.chunks(c).map(|row| row.iter().sum::<f64>() / c as f64).collect();
            Tensor::new(&[r], out)?
        };
        Ok(self.unary(a, value, Op::MeanAxis(a, axis)))
    }

    /// Spatial mean of a `C×H×W` map, giving a `C` vector.
    pub fn global_avg_pool(&mut self, a: Var) -> Result<Var> {
        let (c, h, w) = match *self.shape(a) {
            [c, h, w] => (c, h, w),
            _ => return Err(shape_err("global_avg_pool", self.shape(a), &[0, 0, 0])),
        };
        let flat = self.reshape(a, &[c, h * w])?;
        self.mean_axis(flat, 1)
    }

    /// Broadcasts a `C` vector over an `H×W` grid.
    pub fn broadcast_hw(&mut self, v: Var, h: usize, w: usize) -> Result<Var> {
        let c = match *self.shape(v) {
            [c] => c,
            _ => return Err(shape_err("broadcast_hw", self.shape(v), &[h, w])),
        };
        let d = self.value(v).data();
        let mut out = Vec::with_capacity(c * h * w);
        for &x in d {
            out.extend(std::iter::repeat_n(x, h * w));
        }
        let value = Tensor::new(&[c, h, w], out)?;
        Ok(self.unary(v, value, Op::BroadcastHw(v)))
    }

    /// Adds a per-channel bias `b: C` to `x: C×H×W`.
    pub fn add_channel_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let (h, w) = match *self.shape(x) {
            [_, h, w] => (h, w),
            _ => return Err(shape_err("add_channel_bias", self.shape(x), self.shape(b))),
        };
        let bb = self.broadcast_hw(b, h, w)?;
        self.add(x, bb)
    }

    /// 2-D convolution of `x: Cin×H×W` with `w: Cout×Cin×k×k`, bias `b: Cout`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Result<Var> {
        let (cin, h, wd) = match *self.shape(x) {
            [c, h, w] => (c, h, w),
            _ => return Err(shape_err("conv2d", self.shape(x), self.shape(w))),
        };
        let (cout, k) = match *self.shape(w) {
            [co, ci, k1, k2] if ci == cin && k1 == k2 => (co, k1),
            _ => return Err(shape_err("conv2d", self.shape(x), self.shape(w))),
        };
        if self.shape(b) != [cout] {
            return Err(shape_err("conv2d", self.shape(w), self.shape(b)));
        }
        if stride == 0 || h + 2 * pad < k || wd + 2 * pad < k {
            return Err(shape_err("conv2d", self.shape(x), self.shape(w)));
        }
        let ho = (h + 2 * pad - k) / stride + 1;
        let wo = (wd + 2 * pad - k) / stride + 1;
        let geom = ConvGeom {
            cin,
            h,
            w: wd,
            cout,
            k,
            stride,
            pad,
            ho,
            wo,
        };
        let cols = geom.im2col(self.value(x).data());
        let mut out = matmul_kernel(self.value(w).data(), &cols, cout, cin * k * k, ho * wo);
        for (co, row) in out.chunks_mut(ho * wo).enumerate() {
            let bias = self.value(b).data()[co];
            row.iter_mut().for_each(|v| *v += bias);
        }
        let value = Tensor::new(&[cout, ho, wo], out)?;
        let rg = self.any_grad(&[x, w, b]);
        Ok(self.push(value, Op::Conv2d { x, w, b, geom }, rg))
    }

    /// Per-location linear map: `w: Cout×Cin` applied to every pixel of
    /// `x: Cin×H×W`, plus bias `b: Cout`.
    pub fn conv1x1(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (cin, h, wd) = match *self.shape(x) {
            [c, h, w] => (c, h, w),
            _ => return Err(shape_err("conv1x1", self.shape(x), self.shape(w))),
        };
        let cout = match *self.shape(w) {
            [co, ci] if ci == cin => co,
            _ => return Err(shape_err("conv1x1", self.shape(x), self.shape(w))),
        };
        let flat = self.reshape(x, &[cin, h * wd])?;
        let y = self.matmul(w, flat)?;
        let y = self.reshape(y, &[cout, h, wd])?;
        self.add_channel_bias(y, b)
    }

    /// Per-location cosine similarity between `features: C×H×W` and `proto: C`.
    pub fn cosine_map(&mut self, features: Var, proto: Var) -> Result<Var> {
        let (c, h, w) = match *self.shape(features) {
            [c, h, w] if self.shape(proto) == [c] => (c, h, w),
            _ => return Err(shape_err("cosine_map", self.shape(features), self.shape(proto))),
        };
        let out = cosine_map_kernel(self.value(features).data(), self.value(proto).data(), c, h * w);
        let value = Tensor::new(&[h, w], out)?;
        let rg = self.any_grad(&[features, proto]);
        Ok(self.push(value, Op::CosineMap(features, proto), rg))
    }

    /// Mean squared error between two same-shaped tensors.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mse", a, b)?;
        let (av, bv) = (self.value(a), self.value(b));
        let n = av.len() as f64;
        let s = av.data().iter().zip(bv.data()).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / n;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(Tensor::scalar(s), Op::Mse(a, b), rg))
    }

    /// Mean binary cross-entropy of logits against a fixed target.
    pub fn bce_with_logits(&mut self, logits: Var, target: Arc<Tensor>) -> Result<Var> {
        if self.shape(logits) != target.shape() {
            return Err(shape_err("bce_with_logits", self.shape(logits), target.shape()));
        }
        let x = self.value(logits);
        let s = x
            .data()
            .iter()
            .zip(target.data())
            .map(|(&x, &t)| bce_with_logits_elem(x, t))
            .sum::<f64>()
            / x.len() as f64;
        Ok(self.unary(logits, Tensor::scalar(s), Op::BceLogits(logits, target)))
    }

    /// Smoothed soft Dice loss `1 − (2Σpg + ε)/(Σp + Σg + ε)` of probabilities.
    pub fn dice(&mut self, probs: Var, target: Arc<Tensor>, eps: f64) -> Result<Var> {
        if self.shape(probs) != target.shape() {
            return Err(shape_err("dice", self.shape(probs), target.shape()));
        }
        let l = dice_kernel(self.value(probs).data(), target.data(), eps);
        Ok(self.unary(probs, Tensor::scalar(l), Op::Dice(probs, target, eps)))
    }

    pub fn resample(&mut self, x: Var, table: Arc<ResampleTable>) -> Result<Var> {
        let value = table.apply(self.value(x))?;
        Ok(self.unary(x, value, Op::Resample(x, table)))
    }

    /// Attention-weighted aggregation over in-neighbourhoods:
    /// `out_i = Σ_j α_ij z_j` with `α` from [`edge_softmax`].
    pub fn graph_attention(
        &mut self,
        z: Var,
        s_src: Var,
        s_dst: Var,
        nbr: Arc<InNeighborhoods>,
        slope: f64,
    ) -> Result<Var> {
        let (n, c) = match *self.shape(z) {
            [n, c] if n == nbr.num_nodes() => (n, c),
            _ => return Err(shape_err("graph_attention", self.shape(z), &[nbr.num_nodes()])),
        };
        if self.value(s_src).len() != n || self.value(s_dst).len() != n {
            return Err(shape_err("graph_attention", self.shape(s_src), self.shape(s_dst)));
        }
        let alpha = edge_softmax(self.value(s_src).data(), self.value(s_dst).data(), &nbr, slope);
        let zd = self.value(z).data();
        let mut out = vec![0.0; n * c];
        for i in 0..n {
            let orow = &mut out[i * c..(i + 1) * c];
            for (e, &j) in nbr.edge_range(i).zip(nbr.sources(i)) {
                let a = alpha[e];
                for (o, &zv) in orow.iter_mut().zip(&zd[j * c..(j + 1) * c]) {
                    *o += a * zv;
                }
            }
        }
        let value = Tensor::new(&[n, c], out)?;
        let rg = self.any_grad(&[z, s_src, s_dst]);
        Ok(self.push(
            value,
            Op::GraphAttention {
                z,
                s_src,
                s_dst,
                nbr,
                slope,
                alpha,
            },
            rg,
        ))
    }

    /// Reverse pass from a single-element `loss`.
    /// Hash of the branch taken at every non-differentiable point recorded so
    /// far (ReLU and LeakyReLU inputs, GAT edge scores, cosine norm clamps).
    /// Two tapes with equal signatures evaluated the same smooth piece.
    pub fn kink_signature(&self) -> u64 {
        use std::hash::{Hash, Hasher};
        let mut h = std::collections::hash_map::DefaultHasher::new();
        for node in &self.nodes {
            match &node.op {
                Op::Relu(a) | Op::LeakyRelu(a, _) => {
                    self.value(*a).data().iter().for_each(|&x| (x > 0.0).hash(&mut h));
                }
                Op::GraphAttention { s_src, s_dst, nbr, .. } => {
                    let (s, d) = (self.value(*s_src).data(), self.value(*s_dst).data());
                    for i in 0..nbr.num_nodes() {
                        nbr.sources(i).iter().for_each(|&j| (s[j] + d[i] > 0.0).hash(&mut h));
                    }
                }
                Op::CosineMap(f, p) => {
                    let (f, p) = (self.value(*f), self.value(*p));
                    let c = p.len();
                    let n = f.len() / c;
                    let pn = p.data().iter().map(|x| x * x).sum::<f64>().sqrt();
                    for k in 0..n {
                        let norm = (0..c).map(|ch| f.data()[ch * n + k].powi(2)).sum::<f64>().sqrt();
                        (norm * pn > COS_EPS).hash(&mut h);
                    }
                }
                _ => {}
            }
        }
        h.finish()
    }

    pub fn backward(&self, loss: Var) -> Gradients {
        assert_eq!(self.value(loss).len(), 1, "backward expects a scalar loss");
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        if self.nodes[loss.0].requires_grad {
            grads[loss.0] = Some(vec![1.0]);
        }
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(mut g) = grads[idx].take() else {
                continue;
            };
            if self.fault == Some(node.op.name()) {
                g.iter_mut().for_each(|x| *x *= 1.5);
            }
            self.backward_node(node, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Gradients {
            grads: grads
                .into_iter()
                .zip(&self.nodes)
                .map(|(g, n)| g.map(|d| Tensor::new(n.value.shape(), d).expect("grad shape")))
                .collect(),
        }
    }

    fn backward_node(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let nodes = &self.nodes;
        let val = |v: Var| nodes[v.0].value.data();
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
            if nodes[v.0].requires_grad {
                let slot = grads[v.0].get_or_insert_with(|| vec![0.0; nodes[v.0].value.len()]);
                f(slot);
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                acc(*a, &mut |d| d.iter_mut().zip(g).for_each(|(d, &g)| *d += g));
                acc(*b, &mut |d| d.iter_mut().zip(g).for_each(|(d, &g)| *d += g));
            }
            Op::Sub(a, b) => {
                acc(*a, &mut |d| d.iter_mut().zip(g).for_each(|(d, &g)| *d += g));
                acc(*b, &mut |d| d.iter_mut().zip(g).for_each(|(d, &g)| *d -= g));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                acc(*a, &mut |d| {
                    for ((d, &g), &y) in d.iter_mut().zip(g).zip(bv) {
                        *d += g * y;
                    }
                });
                acc(*b, &mut |d| {
                    for ((d, &g), &x) in d.iter_mut().zip(g).zip(av) {
                        *d += g * x;
                    }
                });
            }
            Op::Scale(a, f) => acc(*a, &mut |d| d.iter_mut().zip(g).for_each(|(d, &g)| *d += g * f)),
            Op::MatMul(a, b) => {
                let (m, k) = (nodes[a.0].value.shape()[0], nodes[a.0].value.shape()[1]);
                let n = nodes[b.0].value.shape()[1];
                let (av, bv) = (val(*a), val(*b));
                acc(*a, &mut |d| {
                    for i in 0..m {
                        let grow = &g[i * n..(i + 1) * n];
                        for p in 0..k {
                            let brow = &bv[p * n..(p + 1) * n];
                            d[i * k + p] += grow.iter().zip(brow).map(|(x, y)| x * y).sum::<f64>();
                        }
                    }
                });
                acc(*b, &mut |d| {
                    for i in 0..m {
                        let grow = &g[i * n..(i + 1) * n];
                        for p in 0..k {
                            let av = av[i * k + p];
                            if av == 0.0 {
                                continue;
                            }
                            for (dv, &gv) in d[p * n..(p + 1) * n].iter_mut().zip(grow) {
                                *dv += av * gv;
                            }
                        }
                    }
                });
            }
            Op::Transpose(a) => {
                let (r, c) = (nodes[a.0].value.shape()[0], nodes[a.0].value.shape()[1]);
                acc(*a, &mut |d| {
                    for i in 0..r {
                        for j in 0..c {
                            d[i * c + j] += g[j * r + i];
                        }
                    }
                });
            }
            Op::Reshape(a) => acc(*a, &mut |d| d.iter_mut().zip(g).for_each(|(d, &g)| *d += g)),
            Op::Relu(a) => {
                let x = val(*a);
                acc(*a, &mut |d| {
                    for ((d, &g), &x) in d.iter_mut().zip(g).zip(x) {
                        if x > 0.0 {
                            *d += g;
                        }
                    }
                });
            }
            Op::LeakyRelu(a, slope) => {
                let x = val(*a);
                acc(*a, &mut |d| {
                    for ((d, &g), &x) in d.iter_mut().zip(g).zip(x) {
                        *d += if x > 0.0 { g } else { slope * g };
                    }
                });
            }
            Op::Sigmoid(a) => {
                let y = node.value.data();
                acc(*a, &mut |d| {
                    for ((d, &g), &y) in d.iter_mut().zip(g).zip(y) {
                        *d += g * y * (1.0 - y);
                    }
                });
            }
            Op::Softmax(a) => {
                let y = node.value.data();
                let n = *node.value.shape().last().unwrap();
                acc(*a, &mut |d| {
                    for ((drow, grow), yrow) in d.chunks_mut(n).zip(g.chunks(n)).zip(y.chunks(n)) {
                        let dot: f64 = grow.iter().zip(yrow).map(|(g, y)| g * y).sum();
                        for ((d, &g), &y) in drow.iter_mut().zip(grow).zip(yrow) {
                            *d += y * (g - dot);
                        }
                    }
                });
            }
            Op::Concat(parts, axis) => {
                let shape = node.value.shape();
                let outer: usize = shape[..*axis].iter().product();
                let inner: usize = shape[axis + 1..].iter().product();
                let total = shape[*axis] * inner;
                let mut off = 0;
                for &p in parts {
                    let chunk = nodes[p.0].value.shape()[*axis] * inner;
                    acc(p, &mut |d| {
                        for o in 0..outer {
                            let src = &g[o * total + off..o * total + off + chunk];
                            for (d, &s) in d[o * chunk..(o + 1) * chunk].iter_mut().zip(src) {
                                *d += s;
                            }
                        }
                    });
                    off += chunk;
                }
            }
            Op::Rows(a, start) => {
                let c = nodes[a.0].value.shape()[1];
                acc(*a, &mut |d| {
                    for (d, &g) in d[start * c..start * c + g.len()].iter_mut().zip(g) {
                        *d += g;
                    }
                });
            }
            Op::SumAll(a) => acc(*a, &mut |d| d.iter_mut().for_each(|d| *d += g[0])),
            Op::MeanAll(a) => {
                let n = nodes[a.0].value.len() as f64;
                acc(*a, &mut |d| d.iter_mut().for_each(|d| *d += g[0] / n));
            }
            Op::MeanAxis(a, axis) => {
                let (r, c) = (nodes[a.0].value.shape()[0], nodes[a.0].value.shape()[1]);
                acc(*a, &mut |d| {
                    for i in 0..r {
                        for j in 0..c {
                            d[i * c + j] += if *axis == 0 { g[j] / r as f64 } else { g[i] / c as f64 };
                        }
                    }
                });
            }
            Op::BroadcastHw(v) => {
                let hw = node.value.shape()[1] * node.value.shape()[2];
                acc(*v, &mut |d| {
                    for (d, grow) in d.iter_mut().zip(g.chunks(hw)) {
                        *d += grow.iter().sum::<f64>();
                    }
                });
            }
            Op::Conv2d { x, w, b, geom } => {
                let ckk = geom.cin * geom.k * geom.k;
                let hw = geom.ho * geom.wo;
                let wv = val(*w);
                acc(*b, &mut |d| {
                    for (d, grow) in d.iter_mut().zip(g.chunks(hw)) {
                        *d += grow.iter().sum::<f64>();
                    }
                });
                if nodes[w.0].requires_grad {
                    let cols = geom.im2col(val(*x));
                    acc(*w, &mut |d| {
                        for co in 0..geom.cout {
                            let grow = &g[co * hw..(co + 1) * hw];
                            for r in 0..ckk {
                                let crow = &cols[r * hw..(r + 1) * hw];
                                d[co * ckk + r] += grow.iter().zip(crow).map(|(a, b)| a * b).sum::<f64>();
                            }
                        }
                    });
                }
                if nodes[x.0].requires_grad {
                    let mut dcols = vec![0.0; ckk * hw];
                    for co in 0..geom.cout {
                        let grow = &g[co * hw..(co + 1) * hw];
                        for r in 0..ckk {
                            let wv = wv[co * ckk + r];
                            if wv == 0.0 {
                                continue;
                            }
                            for (dc, &gv) in dcols[r * hw..(r + 1) * hw].iter_mut().zip(grow) {
                                *dc += wv * gv;
                            }
                        }
                    }
                    acc(*x, &mut |d| geom.col2im(&dcols, d));
                }
            }
            Op::CosineMap(f, p) => {
                let c = nodes[p.0].value.len();
                let n = node.value.len();
                let (fv, pv) = (val(*f), val(*p));
                let y = node.value.data();
                let pn = pv.iter().map(|x| x * x).sum::<f64>().sqrt();
                let fnorm: Vec<f64> = (0..n)
                    .map(|i| (0..c).map(|ch| fv[ch * n + i].powi(2)).sum::<f64>().sqrt())
                    .collect();
                // d(y_i)/d f[:, i] and d(y_i)/d p for every location
                let coeffs: Vec<(f64, f64, f64)> = (0..n)
                    .map(|i| {
                        let raw = fnorm[i] * pn;
                        if raw > COS_EPS {
                            (1.0 / raw, y[i] / (fnorm[i] * fnorm[i]), y[i] / (pn * pn))
                        } else {
                            (1.0 / COS_EPS, 0.0, 0.0)
                        }
                    })
                    .collect();
                acc(*f, &mut |d| {
                    for ch in 0..c {
                        for i in 0..n {
                            let (inv, yf, _) = coeffs[i];
                            d[ch * n + i] += g[i] * (pv[ch] * inv - yf * fv[ch * n + i]);
                        }
                    }
                });
                acc(*p, &mut |d| {
                    for ch in 0..c {
                        let mut s = 0.0;
                        for i in 0..n {
                            let (inv, _, yp) = coeffs[i];
                            s += g[i] * (fv[ch * n + i] * inv - yp * pv[ch]);
                        }
                        d[ch] += s;
                    }
                });
            }
            Op::Mse(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                let n = av.len() as f64;
                acc(*a, &mut |d| {
                    for ((d, &x), &y) in d.iter_mut().zip(av).zip(bv) {
                        *d += g[0] * 2.0 * (x - y) / n;
                    }
                });
                acc(*b, &mut |d| {
                    for ((d, &x), &y) in d.iter_mut().zip(av).zip(bv) {
                        *d -= g[0] * 2.0 * (x - y) / n;
                    }
                });
            }
            Op::BceLogits(x, t) => {
                let xv = val(*x);
                let n = xv.len() as f64;
                acc(*x, &mut |d| {
                    for ((d, &x), &t) in d.iter_mut().zip(xv).zip(t.data()) {
                        *d += g[0] * (sigmoid(x) - t) / n;
                    }
                });
            }
            Op::Dice(p, t, eps) => {
                let pv = val(*p);
                let inter: f64 = pv.iter().zip(t.data()).map(|(p, t)| p * t).sum();
                let denom = pv.iter().sum::<f64>() + t.data().iter().sum::<f64>() + eps;
                let num = 2.0 * inter + eps;
                acc(*p, &mut |d| {
                    for (d, &t) in d.iter_mut().zip(t.data()) {
                        *d -= g[0] * (2.0 * t * denom - num) / (denom * denom);
                    }
                });
            }
            Op::Resample(x, table) => {
                let n_in = table.in_hw.0 * table.in_hw.1;
                let n_out = table.out_hw.0 * table.out_hw.1;
                acc(*x, &mut |d| {
                    for (dch, gch) in d.chunks_mut(n_in).zip(g.chunks(n_out)) {
                        for (o, &gv) in gch.iter().enumerate() {
                            for &(i, w) in table.taps(o) {
                                dch[i] += w * gv;
                            }
                        }
                    }
                });
            }
            Op::GraphAttention {
                z,
                s_src,
                s_dst,
                nbr,
                slope,
                alpha,
            } => {
                let c = nodes[z.0].value.shape()[1];
                let zv = val(*z);
                let (ss, sd) = (val(*s_src), val(*s_dst));
                let mut dz = vec![0.0; zv.len()];
                let mut du = vec![0.0; alpha.len()];
                for i in 0..nbr.num_nodes() {
                    let gi = &g[i * c..(i + 1) * c];
                    let range = nbr.edge_range(i);
                    let mut dalpha = Vec::with_capacity(range.len());
                    for (e, &j) in range.clone().zip(nbr.sources(i)) {
                        let zj = &zv[j * c..(j + 1) * c];
                        dalpha.push(gi.iter().zip(zj).map(|(a, b)| a * b).sum::<f64>());
                        for (d, &gv) in dz[j * c..(j + 1) * c].iter_mut().zip(gi) {
                            *d += alpha[e] * gv;
                        }
                    }
                    let weighted: f64 = range.clone().zip(&dalpha).map(|(e, da)| alpha[e] * da).sum();
                    for ((e, &j), da) in range.zip(nbr.sources(i)).zip(&dalpha) {
                        let de = alpha[e] * (da - weighted);
                        let u = ss[j] + sd[i];
                        du[e] = if u > 0.0 { de } else { slope * de };
                    }
                }
                acc(*z, &mut |d| d.iter_mut().zip(&dz).for_each(|(d, &x)| *d += x));
                acc(*s_src, &mut |d| {
                    for i in 0..nbr.num_nodes() {
                        for (e, &j) in nbr.edge_range(i).zip(nbr.sources(i)) {
                            d[j] += du[e];
                        }
                    }
                });
                acc(*s_dst, &mut |d| {
                    for i in 0..nbr.num_nodes() {
                        d[i] += nbr.edge_range(i).map(|e| du[e]).sum::<f64>();
                    }
                });
            }
        }
    }
}

pub(crate) fn cosine_map_kernel(f: &[f64], p: &[f64], c: usize, n: usize) -> Vec<f64> {
    let pn = p.iter().map(|x| x * x).sum::<f64>().sqrt();
    (0..n)
        .map(|i| {
            let mut dot = 0.0;
            let mut ff = 0.0;
            for ch in 0..c {
                let x = f[ch * n + i];
                dot += x * p[ch];
                ff += x * x;
            }
            dot / (ff.sqrt() * pn).max(COS_EPS)
        })
        .collect()
}

pub(crate) fn dice_kernel(p: &[f64], t: &[f64], eps: f64) -> f64 {
    let inter: f64 = p.iter().zip(t).map(|(p, t)| p * t).sum();
    let denom = p.iter().sum::<f64>() + t.iter().sum::<f64>() + eps;
    1.0 - (2.0 * inter + eps) / denom
}
