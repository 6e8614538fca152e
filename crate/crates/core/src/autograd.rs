//! Reverse-mode automatic differentiation over a linear tape.
//!
//! Every forward op appends one node; node inputs always have smaller
//! indices, so a reverse sweep over the node list is a valid topological
//! order. Parameter leaves borrow their storage from a [`ParamSet`] and are
//! never copied.

use std::collections::HashMap;

use crate::conv;
use crate::error::{Error, Result};
use crate::gemm::gemm;
use crate::tensor::{ParamId, ParamSet, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Storage<'a> {
    Owned(Vec<f32>),
    Borrowed(&'a [f32]),
}

impl Storage<'_> {
    fn as_slice(&self) -> &[f32] {
        match self {
            Storage::Owned(v) => v,
            Storage::Borrowed(s) => s,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub cout: usize,
    pub kh: usize,
    pub kw: usize,
    pub sh: usize,
    pub sw: usize,
    pub ph: usize,
    pub pw: usize,
    pub ho: usize,
    pub wo: usize,
}

impl ConvGeom {
    pub(crate) fn k(&self) -> usize {
        self.cin * self.kh * self.kw
    }

    pub(crate) fn n(&self) -> usize {
        self.ho * self.wo
    }
}

/// Output extent of a strided, padded sliding window.
pub fn conv_out_len(len: usize, kernel: usize, stride: usize, pad: usize) -> Option<usize> {
    let padded = len + 2 * pad;
    if padded < kernel || stride == 0 {
        return None;
    }
    Some((padded - kernel) / stride + 1)
}

enum Op {
    Leaf,
    MatMul { a: usize, b: usize, m: usize, k: usize, n: usize },
    Conv2d { x: usize, w: usize, b: Option<usize>, g: ConvGeom, cols: Vec<f32> },
    Add { a: usize, b: usize },
    Sub { a: usize, b: usize },
    Mul { a: usize, b: usize },
    AddBias { x: usize, b: usize, width: usize },
    Scale { x: usize, c: f32 },
    AddScalar { x: usize },
    LayerNorm { x: usize, gamma: usize, beta: usize, d: usize, xhat: Vec<f32>, rstd: Vec<f32> },
    Softmax { x: usize, d: usize },
    LeakyRelu { x: usize, slope: f32 },
    Sigmoid { x: usize },
    Mean { x: usize },
    Transpose { x: usize, rows: usize, cols: usize },
    Reshape { x: usize },
    Attention { q: usize, k: usize, v: usize, heads: usize, t: usize, s: usize, d: usize, probs: Vec<f32> },
}

struct Node<'a> {
    shape: Vec<usize>,
    value: Storage<'a>,
    op: Op,
    requires_grad: bool,
    param: Option<(u64, ParamId)>,
}

/// Gradients produced by one backward pass.
#[derive(Debug, Default)]
pub struct Gradients {
    params: HashMap<(u64, ParamId), Vec<f32>>,
    leaves: HashMap<usize, Vec<f32>>,
}

impl Gradients {
    pub fn param(&self, set: &ParamSet, id: ParamId) -> Option<&[f32]> {
        self.params.get(&(set.uid(), id)).map(|v| v.as_slice())
    }

    /// Gradient with respect to a non-parameter leaf created by [`Tape::leaf`].
    pub fn wrt(&self, var: Var) -> Option<&[f32]> {
        self.leaves.get(&var.0).map(|v| v.as_slice())
    }

    /// Copy the gradients belonging to `set` into its tensors' grad slots.
    pub fn write_to(&self, set: &mut ParamSet) -> Result<()> {
        let uid = set.uid();
        for (id, p) in set.iter_mut() {
            match self.params.get(&(uid, id)) {
                Some(g) => p.tensor.set_grad(g.clone())?,
                None => p.tensor.clear_grad(),
            }
        }
        Ok(())
    }
}

pub struct Tape<'a> {
    nodes: Vec<Node<'a>>,
    grad_enabled: bool,
}

impl Default for Tape<'_> {
    fn default() -> Self {
        Self::new()
    }
}

fn check_finite(op: &str, data: &[f32]) -> Result<()> {
    if data.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite { op: op.to_string() })
    }
}

fn slot(grads: &mut [Option<Vec<f32>>], idx: usize, len: usize) -> &mut Vec<f32> {
    grads[idx].get_or_insert_with(|| vec![0.0; len])
}

fn sigmoid(x: f32) -> f32 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softmax_rows(data: &mut [f32], d: usize) {
    for row in data.chunks_mut(d) {
        let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        let inv = 1.0 / sum;
        for v in row.iter_mut() {
            *v *= inv;
        }
    }
}

pub(crate) fn im2col(x: &[f32], g: &ConvGeom) -> Vec<f32> {
    let n = g.n();
    let mut cols = vec![0.0f32; g.k() * n];
    for c in 0..g.cin {
        let plane = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let dst = &mut cols[row * n..(row + 1) * n];
                for oh in 0..g.ho {
                    let ih = (oh * g.sh + ki) as isize - g.ph as isize;
                    if ih < 0 || ih >= g.h as isize {
                        continue;
                    }
                    let src = &plane[ih as usize * g.w..(ih as usize + 1) * g.w];
                    let out = &mut dst[oh * g.wo..(oh + 1) * g.wo];
                    for (ow, o) in out.iter_mut().enumerate() {
                        let iw = (ow * g.sw + kj) as isize - g.pw as isize;
                        if iw >= 0 && iw < g.w as isize {
                            *o = src[iw as usize];
                        }
                    }
                }
            }
        }
    }
    cols
}

pub(crate) fn col2im(cols: &[f32], g: &ConvGeom, dx: &mut [f32]) {
    let n = g.n();
    for c in 0..g.cin {
        let plane = &mut dx[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let src = &cols[row * n..(row + 1) * n];
                for oh in 0..g.ho {
                    let ih = (oh * g.sh + ki) as isize - g.ph as isize;
                    if ih < 0 || ih >= g.h as isize {
                        continue;
                    }
                    let dst = &mut plane[ih as usize * g.w..(ih as usize + 1) * g.w];
                    for ow in 0..g.wo {
                        let iw = (ow * g.sw + kj) as isize - g.pw as isize;
                        if iw >= 0 && iw < g.w as isize {
                            dst[iw as usize] += src[oh * g.wo + ow];
                        }
                    }
                }
            }
        }
    }
}

impl<'a> Tape<'a> {
    /// A recording tape.
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            grad_enabled: true,
        }
    }

    /// A tape that records values only; backward is unavailable.
    pub fn inference() -> Self {
        Tape {
            nodes: Vec::new(),
            grad_enabled: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn value(&self, v: Var) -> &[f32] {
        self.nodes[v.0].value.as_slice()
    }

    pub fn scalar(&self, v: Var) -> f32 {
        self.value(v)[0]
    }

    pub fn to_tensor(&self, v: Var) -> Tensor {
        Tensor::new(self.shape(v).to_vec(), self.value(v).to_vec()).expect("node shape")
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, shape: Vec<usize>, value: Storage<'a>, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            shape,
            value,
            op,
            requires_grad: requires_grad && self.grad_enabled,
            param: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, idx: usize) -> bool {
        self.nodes[idx].requires_grad
    }

    /// Bind a parameter as a leaf; its storage is borrowed, not copied.
    pub fn param(&mut self, set: &'a ParamSet, id: ParamId) -> Var {
        let p = set.get(id);
        let v = self.push(
            p.tensor.shape().to_vec(),
            Storage::Borrowed(p.tensor.data()),
            Op::Leaf,
            p.tensor.requires_grad(),
        );
        self.nodes[v.0].param = Some((set.uid(), id));
        v
    }

    /// Leaf that honours the tensor's `requires_grad` flag.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        let rg = t.requires_grad();
        let shape = t.shape().to_vec();
        self.push(shape, Storage::Owned(t.into_data()), Op::Leaf, rg)
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        let shape = t.shape().to_vec();
        self.push(shape, Storage::Owned(t.into_data()), Op::Leaf, false)
    }

    /// Constant leaf borrowing external data (e.g. cached features).
    pub fn input(&mut self, shape: &[usize], data: &'a [f32]) -> Result<Var> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::shape(
                "input",
                format!("shape {shape:?} vs {} values", data.len()),
            ));
        }
        Ok(self.push(shape.to_vec(), Storage::Borrowed(data), Op::Leaf, false))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::shape("matmul", format!("{sa:?} x {sb:?}")));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, 1.0, self.value(a), k, 1, self.value(b), n, 1, 0.0, &mut out, n);
        check_finite("matmul", &out)?;
        let rg = self.rg(a.0) || self.rg(b.0);
        Ok(self.push(
            vec![m, n],
            Storage::Owned(out),
            Op::MatMul { a: a.0, b: b.0, m, k, n },
            rg,
        ))
    }

    /// 2-D convolution of a `[cin, h, w]` input with `[cout, cin, kh, kw]`
    /// kernels and optional `[cout]` bias.
    pub fn conv2d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: (usize, usize),
        padding: (usize, usize),
    ) -> Result<Var> {
        let (sx, sw) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if sx.len() != 3 || sw.len() != 4 || sx[0] != sw[1] {
            return Err(Error::shape("conv2d", format!("input {sx:?} with kernel {sw:?}")));
        }
        if let Some(b) = b {
            if self.shape(b) != [sw[0]] {
                return Err(Error::shape(
                    "conv2d",
                    format!("bias {:?} for {} output channels", self.shape(b), sw[0]),
                ));
            }
        }
        let ho = conv_out_len(sx[1], sw[2], stride.0, padding.0);
        let wo = conv_out_len(sx[2], sw[3], stride.1, padding.1);
        let (Some(ho), Some(wo)) = (ho, wo) else {
            return Err(Error::shape(
                "conv2d",
                format!("input {sx:?} too small for kernel {sw:?} with padding {padding:?}"),
            ));
        };
        let g = ConvGeom {
            cin: sx[0],
            h: sx[1],
            w: sx[2],
            cout: sw[0],
            kh: sw[2],
            kw: sw[3],
            sh: stride.0,
            sw: stride.1,
            ph: padding.0,
            pw: padding.1,
            ho,
            wo,
        };
        let (kk, n) = (g.k(), g.n());
        let mut out = vec![0.0; g.cout * n];
        if let Some(b) = b {
            let bias = self.value(b);
            for (c, row) in out.chunks_mut(n).enumerate() {
                row.fill(bias[c]);
            }
        }
        let cols = if conv::use_direct(&g) {
            conv::forward(self.value(x), self.value(w), &g, &mut out);
            Vec::new()
        } else {
            let cols = im2col(self.value(x), &g);
            gemm(g.cout, kk, n, 1.0, self.value(w), kk, 1, &cols, n, 1, 1.0, &mut out, n);
            cols
        };
        check_finite("conv2d", &out)?;
        let rg = self.rg(x.0) || self.rg(w.0) || b.is_some_and(|b| self.rg(b.0));
        let keep_cols = self.grad_enabled && self.rg(w.0);
        Ok(self.push(
            vec![g.cout, ho, wo],
            Storage::Owned(out),
            Op::Conv2d {
                x: x.0,
                w: w.0,
                b: b.map(|b| b.0),
                g,
                cols: if keep_cols { cols } else { Vec::new() },
            },
            rg,
        ))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(
                op,
                format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            ));
        }
        Ok(())
    }

    fn binary(&mut self, op: &'static str, a: Var, b: Var, f: impl Fn(f32, f32) -> f32, node: Op) -> Result<Var> {
        self.same_shape(op, a, b)?;
        let out: Vec<f32> = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(x, y)| f(*x, *y))
            .collect();
        check_finite(op, &out)?;
        let rg = self.rg(a.0) || self.rg(b.0);
        let shape = self.shape(a).to_vec();
        Ok(self.push(shape, Storage::Owned(out), node, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add { a: a.0, b: b.0 })
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub { a: a.0, b: b.0 })
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul { a: a.0, b: b.0 })
    }

    /// Adds a `[n]` bias across the trailing dimension of `x`.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let sx = self.shape(x);
        let width = *sx.last().unwrap_or(&0);
        if self.shape(b) != [width] {
            return Err(Error::shape(
                "add_bias",
                format!("bias {:?} over {:?}", self.shape(b), sx),
            ));
        }
        let bias = self.value(b);
        let mut out = self.value(x).to_vec();
        for row in out.chunks_mut(width) {
            for (o, bv) in row.iter_mut().zip(bias) {
                *o += bv;
            }
        }
        check_finite("add_bias", &out)?;
        let rg = self.rg(x.0) || self.rg(b.0);
        let shape = sx.to_vec();
        Ok(self.push(shape, Storage::Owned(out), Op::AddBias { x: x.0, b: b.0, width }, rg))
    }

    pub fn scale(&mut self, x: Var, c: f32) -> Result<Var> {
        let out: Vec<f32> = self.value(x).iter().map(|v| v * c).collect();
        check_finite("scale", &out)?;
        let (rg, shape) = (self.rg(x.0), self.shape(x).to_vec());
        Ok(self.push(shape, Storage::Owned(out), Op::Scale { x: x.0, c }, rg))
    }

    pub fn add_scalar(&mut self, x: Var, c: f32) -> Result<Var> {
        let out: Vec<f32> = self.value(x).iter().map(|v| v + c).collect();
        check_finite("add_scalar", &out)?;
        let (rg, shape) = (self.rg(x.0), self.shape(x).to_vec());
        Ok(self.push(shape, Storage::Owned(out), Op::AddScalar { x: x.0 }, rg))
    }

    /// Layer normalization over the last dimension of a `[n, d]` input.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        const EPS: f32 = 1e-5;
        let sx = self.shape(x).to_vec();
        let d = *sx.last().unwrap_or(&0);
        if d == 0 || self.shape(gamma) != [d] || self.shape(beta) != [d] {
            return Err(Error::shape(
                "layer_norm",
                format!("input {sx:?}, gamma {:?}, beta {:?}", self.shape(gamma), self.shape(beta)),
            ));
        }
        let xs = self.value(x);
        let (g, bt) = (self.value(gamma), self.value(beta));
        let rows = xs.len() / d;
        let mut xhat = vec![0.0; xs.len()];
        let mut rstd = vec![0.0; rows];
        let mut out = vec![0.0; xs.len()];
        for r in 0..rows {
            let row = &xs[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f32>() / d as f32;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f32>() / d as f32;
            let rs = 1.0 / (var + EPS).sqrt();
            rstd[r] = rs;
            for j in 0..d {
                let h = (row[j] - mean) * rs;
                xhat[r * d + j] = h;
                out[r * d + j] = h * g[j] + bt[j];
            }
        }
        check_finite("layer_norm", &out)?;
        let rg = self.rg(x.0) || self.rg(gamma.0) || self.rg(beta.0);
        let keep = self.grad_enabled && rg;
        Ok(self.push(
            sx,
            Storage::Owned(out),
            Op::LayerNorm {
                x: x.0,
                gamma: gamma.0,
                beta: beta.0,
                d,
                xhat: if keep { xhat } else { Vec::new() },
                rstd: if keep { rstd } else { Vec::new() },
            },
            rg,
        ))
    }

    /// Softmax over the last dimension.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let d = *sx.last().unwrap_or(&0);
        if d == 0 {
            return Err(Error::shape("softmax", format!("{sx:?}")));
        }
        let mut out = self.value(x).to_vec();
        softmax_rows(&mut out, d);
        check_finite("softmax", &out)?;
        let rg = self.rg(x.0);
        Ok(self.push(sx, Storage::Owned(out), Op::Softmax { x: x.0, d }, rg))
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f32) -> Result<Var> {
        let out: Vec<f32> = self
            .value(x)
            .iter()
            .map(|&v| if v >= 0.0 { v } else { slope * v })
            .collect();
        check_finite("leaky_relu", &out)?;
        let (rg, shape) = (self.rg(x.0), self.shape(x).to_vec());
        Ok(self.push(shape, Storage::Owned(out), Op::LeakyRelu { x: x.0, slope }, rg))
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        let out: Vec<f32> = self.value(x).iter().map(|&v| sigmoid(v)).collect();
        check_finite("sigmoid", &out)?;
        let (rg, shape) = (self.rg(x.0), self.shape(x).to_vec());
        Ok(self.push(shape, Storage::Owned(out), Op::Sigmoid { x: x.0 }, rg))
    }

    /// Mean of all elements, as a `[1]` scalar.
    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let xs = self.value(x);
        if xs.is_empty() {
            return Err(Error::shape("mean", "empty input"));
        }
        let m = (xs.iter().map(|&v| v as f64).sum::<f64>() / xs.len() as f64) as f32;
        check_finite("mean", &[m])?;
        let rg = self.rg(x.0);
        Ok(self.push(vec![1], Storage::Owned(vec![m]), Op::Mean { x: x.0 }, rg))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let sx = self.shape(x);
        if sx.len() != 2 {
            return Err(Error::shape("transpose", format!("{sx:?} is not rank 2")));
        }
        let (rows, cols) = (sx[0], sx[1]);
        let xs = self.value(x);
        let mut out = vec![0.0; xs.len()];
        for r in 0..rows {
            for c in 0..cols {
                out[c * rows + r] = xs[r * cols + c];
            }
        }
        let rg = self.rg(x.0);
        Ok(self.push(
            vec![cols, rows],
            Storage::Owned(out),
            Op::Transpose { x: x.0, rows, cols },
            rg,
        ))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let n: usize = shape.iter().product();
        if n != self.value(x).len() {
            return Err(Error::shape(
                "reshape",
                format!("{:?} -> {shape:?}", self.shape(x)),
            ));
        }
        let out = self.value(x).to_vec();
        let rg = self.rg(x.0);
        Ok(self.push(shape.to_vec(), Storage::Owned(out), Op::Reshape { x: x.0 }, rg))
    }

    /// Multi-head scaled dot-product attention. `q` is `[t, d]`, `k` and `v`
    /// are `[s, d]`; heads split `d` into equal contiguous slices.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize) -> Result<Var> {
        let (sq, sk, sv) = (self.shape(q), self.shape(k), self.shape(v));
        if sq.len() != 2 || sk.len() != 2 || sk != sv || sq[1] != sk[1] {
            return Err(Error::shape(
                "attention",
                format!("q {sq:?}, k {sk:?}, v {sv:?}"),
            ));
        }
        let (t, s, d) = (sq[0], sk[0], sq[1]);
        if heads == 0 || d % heads != 0 || s == 0 {
            return Err(Error::shape(
                "attention",
                format!("{heads} heads over width {d} and {s} keys"),
            ));
        }
        let dh = d / heads;
        let scale = 1.0 / (dh as f32).sqrt();
        let (qs, ks, vs) = (self.value(q), self.value(k), self.value(v));
        let mut probs = vec![0.0; heads * t * s];
        let mut out = vec![0.0; t * d];
        for h in 0..heads {
            let p = &mut probs[h * t * s..(h + 1) * t * s];
            gemm(t, dh, s, scale, &qs[h * dh..], d, 1, &ks[h * dh..], 1, d, 0.0, p, s);
            softmax_rows(p, s);
            gemm(t, s, dh, 1.0, p, s, 1, &vs[h * dh..], d, 1, 0.0, &mut out[h * dh..], d);
        }
        check_finite("attention", &out)?;
        let rg = self.rg(q.0) || self.rg(k.0) || self.rg(v.0);
        let keep = self.grad_enabled && rg;
        Ok(self.push(
            vec![t, d],
            Storage::Owned(out),
            Op::Attention {
                q: q.0,
                k: k.0,
                v: v.0,
                heads,
                t,
                s,
                d,
                probs: if keep { probs } else { Vec::new() },
            },
            rg,
        ))
    }

    /// Reverse sweep from a scalar loss.
    ///
    /// Every parameter leaf on the tape receives a gradient entry (zeros when
    /// the loss does not depend on it).
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if !self.grad_enabled {
            return Err(Error::Backward("tape was created without gradient recording".into()));
        }
        let root = &self.nodes[loss.0];
        if root.value.as_slice().len() != 1 {
            return Err(Error::Backward(format!(
                "loss must be scalar, got shape {:?}",
                root.shape
            )));
        }
        if !root.requires_grad {
            return Err(Error::Backward(
                "loss is detached: it does not depend on any tensor requiring grad".into(),
            ));
        }
        let mut grads: Vec<Option<Vec<f32>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            let Some(gout) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                grads[i] = Some(gout);
                continue;
            }
            self.backprop_node(node, &gout, &mut grads);
        }

        let mut out = Gradients::default();
        for (i, node) in self.nodes.iter().enumerate().take(loss.0 + 1) {
            if !node.requires_grad || !matches!(node.op, Op::Leaf) {
                continue;
            }
            let g = grads[i]
                .take()
                .unwrap_or_else(|| vec![0.0; node.value.as_slice().len()]);
            match node.param {
                Some(key) => match out.params.get_mut(&key) {
                    Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                    None => {
                        out.params.insert(key, g);
                    }
                },
                None => {
                    out.leaves.insert(i, g);
                }
            }
        }
        // Parameters bound after the loss node still get zero entries.
        for node in self.nodes.iter().skip(loss.0 + 1) {
            if let (Some(key), true) = (node.param, node.requires_grad) {
                out.params
                    .entry(key)
                    .or_insert_with(|| vec![0.0; node.value.as_slice().len()]);
            }
        }
        Ok(out)
    }

    fn backprop_node(&self, node: &Node<'a>, gout: &[f32], grads: &mut [Option<Vec<f32>>]) {
        let val = |idx: usize| self.nodes[idx].value.as_slice();
        let len = |idx: usize| self.nodes[idx].value.as_slice().len();
        match &node.op {
            Op::Leaf => {}
            &Op::MatMul { a, b, m, k, n } => {
                if self.rg(a) {
                    let da = slot(grads, a, m * k);
                    gemm(m, n, k, 1.0, gout, n, 1, val(b), 1, n, 1.0, da, k);
                }
                if self.rg(b) {
                    let db = slot(grads, b, k * n);
                    gemm(k, m, n, 1.0, val(a), 1, k, gout, n, 1, 1.0, db, n);
                }
            }
            Op::Conv2d { x, w, b, g, cols } => {
                let (kk, n) = (g.k(), g.n());
                let direct = conv::use_direct(g);
                if self.rg(*w) {
                    let dw = slot(grads, *w, g.cout * kk);
                    if direct {
                        conv::backward_weights(val(*x), gout, g, dw);
                    } else {
                        gemm(g.cout, n, kk, 1.0, gout, n, 1, cols, 1, n, 1.0, dw, kk);
                    }
                }
                if let Some(b) = *b {
                    if self.rg(b) {
                        let db = slot(grads, b, g.cout);
                        for (c, row) in gout.chunks(n).enumerate() {
                            db[c] += row.iter().sum::<f32>();
                        }
                    }
                }
                if self.rg(*x) && direct {
                    let dx = slot(grads, *x, g.cin * g.h * g.w);
                    conv::backward_input(val(*w), gout, g, dx);
                } else if self.rg(*x) {
                    let mut dcols = vec![0.0; kk * n];
                    gemm(kk, g.cout, n, 1.0, val(*w), 1, kk, gout, n, 1, 0.0, &mut dcols, n);
                    let dx = slot(grads, *x, g.cin * g.h * g.w);
                    col2im(&dcols, g, dx);
                }
            }
            &Op::Add { a, b } => {
                for (idx, sign) in [(a, 1.0f32), (b, 1.0)] {
                    if self.rg(idx) {
                        let d = slot(grads, idx, gout.len());
                        d.iter_mut().zip(gout).for_each(|(d, g)| *d += sign * g);
                    }
                }
            }
            &Op::Sub { a, b } => {
                for (idx, sign) in [(a, 1.0f32), (b, -1.0)] {
                    if self.rg(idx) {
                        let d = slot(grads, idx, gout.len());
                        d.iter_mut().zip(gout).for_each(|(d, g)| *d += sign * g);
                    }
                }
            }
            &Op::Mul { a, b } => {
                if self.rg(a) {
                    let other = val(b);
                    let d = slot(grads, a, gout.len());
                    for ((d, g), o) in d.iter_mut().zip(gout).zip(other) {
                        *d += g * o;
                    }
                }
                if self.rg(b) {
                    let other = val(a);
                    let d = slot(grads, b, gout.len());
                    for ((d, g), o) in d.iter_mut().zip(gout).zip(other) {
                        *d += g * o;
                    }
                }
            }
            &Op::AddBias { x, b, width } => {
                if self.rg(x) {
                    let d = slot(grads, x, gout.len());
                    d.iter_mut().zip(gout).for_each(|(d, g)| *d += g);
                }
                if self.rg(b) {
                    let d = slot(grads, b, width);
                    for row in gout.chunks(width) {
                        d.iter_mut().zip(row).for_each(|(d, g)| *d += g);
                    }
                }
            }
            &Op::Scale { x, c } => {
                let d = slot(grads, x, gout.len());
                d.iter_mut().zip(gout).for_each(|(d, g)| *d += c * g);
            }
            &Op::AddScalar { x } | &Op::Reshape { x } => {
                let d = slot(grads, x, gout.len());
                d.iter_mut().zip(gout).for_each(|(d, g)| *d += g);
            }
            Op::LayerNorm { x, gamma, beta, d, xhat, rstd } => {
                let d = *d;
                if self.rg(*gamma) {
                    let dg = slot(grads, *gamma, d);
                    for (grow, hrow) in gout.chunks(d).zip(xhat.chunks(d)) {
                        for j in 0..d {
                            dg[j] += grow[j] * hrow[j];
                        }
                    }
                }
                if self.rg(*beta) {
                    let db = slot(grads, *beta, d);
                    for grow in gout.chunks(d) {
                        db.iter_mut().zip(grow).for_each(|(a, g)| *a += g);
                    }
                }
                if self.rg(*x) {
                    let gamma_v = val(*gamma);
                    let dx = slot(grads, *x, gout.len());
                    let mut dh = vec![0.0; d];
                    for r in 0..gout.len() / d {
                        let grow = &gout[r * d..(r + 1) * d];
                        let hrow = &xhat[r * d..(r + 1) * d];
                        let mut m1 = 0.0;
                        let mut m2 = 0.0;
                        for j in 0..d {
                            dh[j] = grow[j] * gamma_v[j];
                            m1 += dh[j];
                            m2 += dh[j] * hrow[j];
                        }
                        m1 /= d as f32;
                        m2 /= d as f32;
                        for j in 0..d {
                            dx[r * d + j] += rstd[r] * (dh[j] - m1 - hrow[j] * m2);
                        }
                    }
                }
            }
            &Op::Softmax { x, d } => {
                let y = node.value.as_slice();
                let dx = slot(grads, x, gout.len());
                for ((yr, gr), dr) in y.chunks(d).zip(gout.chunks(d)).zip(dx.chunks_mut(d)) {
                    let dot: f32 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for j in 0..d {
                        dr[j] += yr[j] * (gr[j] - dot);
                    }
                }
            }
            &Op::LeakyRelu { x, slope } => {
                let xs = val(x);
                let dx = slot(grads, x, gout.len());
                for ((d, g), v) in dx.iter_mut().zip(gout).zip(xs) {
                    *d += if *v >= 0.0 { *g } else { slope * g };
                }
            }
            &Op::Sigmoid { x } => {
                let y = node.value.as_slice();
                let dx = slot(grads, x, gout.len());
                for ((d, g), s) in dx.iter_mut().zip(gout).zip(y) {
                    *d += g * s * (1.0 - s);
                }
            }
            &Op::Mean { x } => {
                let n = len(x);
                let share = gout[0] / n as f32;
                let dx = slot(grads, x, n);
                dx.iter_mut().for_each(|d| *d += share);
            }
            &Op::Transpose { x, rows, cols } => {
                let dx = slot(grads, x, rows * cols);
                for r in 0..rows {
                    for c in 0..cols {
                        dx[r * cols + c] += gout[c * rows + r];
                    }
                }
            }
            Op::Attention { q, k, v, heads, t, s, d, probs } => {
                let (heads, t, s, d) = (*heads, *t, *s, *d);
                let dh = d / heads;
                let scale = 1.0 / (dh as f32).sqrt();
                let mut dp = vec![0.0; t * s];
                for h in 0..heads {
                    let p = &probs[h * t * s..(h + 1) * t * s];
                    if self.rg(*v) {
                        let dv = slot(grads, *v, s * d);
                        gemm(s, t, dh, 1.0, p, 1, s, &gout[h * dh..], d, 1, 1.0, &mut dv[h * dh..], d);
                    }
                    if !self.rg(*q) && !self.rg(*k) {
                        continue;
                    }
                    gemm(t, dh, s, 1.0, &gout[h * dh..], d, 1, &val(*v)[h * dh..], 1, d, 0.0, &mut dp, s);
                    for (prow, drow) in p.chunks(s).zip(dp.chunks_mut(s)) {
                        let dot: f32 = prow.iter().zip(drow.iter()).map(|(a, b)| a * b).sum();
                        for j in 0..s {
                            drow[j] = prow[j] * (drow[j] - dot);
                        }
                    }
                    if self.rg(*q) {
                        let dq = slot(grads, *q, t * d);
                        gemm(t, s, dh, scale, &dp, s, 1, &val(*k)[h * dh..], d, 1, 1.0, &mut dq[h * dh..], d);
                    }
                    if self.rg(*k) {
                        let dk = slot(grads, *k, s * d);
                        gemm(s, t, dh, scale, &dp, 1, s, &val(*q)[h * dh..], d, 1, 1.0, &mut dk[h * dh..], d);
                    }
                }
            }
        }
    }
}
