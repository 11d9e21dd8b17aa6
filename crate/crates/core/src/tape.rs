//! Reverse-mode automatic differentiation over [`Tensor`] values.
//!
//! Every forward pass records onto a fresh [`Tape`]. Nodes are appended in
//! evaluation order, so walking the node list backwards is a valid
//! topological order for the backward sweep. A node only participates in the
//! sweep when at least one of its inputs requires a gradient; frozen
//! parameters and constants never allocate gradient buffers.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::tensor::{bilinear_taps, Tensor};

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_K: f64 = 0.044_715;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    /// `[.., n] + [n]`
    AddRow(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    MatMul(Var, Var),
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    Conv2d {
        x: Var,
        k: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
        groups: usize,
    },
    Gelu(Var),
    Sigmoid(Var),
    LogSigmoid(Var),
    Exp(Var),
    Log(Var),
    Powf(Var, f64),
    Softmax(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        eps: f64,
    },
    Sum(Var),
    Mean(Var),
    Reshape(Var),
    Transpose(Var),
    Concat {
        parts: Vec<Var>,
        axis: usize,
    },
    Slice {
        x: Var,
        axis: usize,
        start: usize,
    },
    Upsample2(Var),
    MaxPool2 {
        x: Var,
        argmax: Vec<usize>,
    },
    Bilinear(Var),
    Patchify {
        x: Var,
        patch: usize,
    },
    Mse(Var, Var),
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    /// Keyed by store uid and parameter id.
    params: HashMap<(u64, ParamId), Var>,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    params: Vec<((u64, ParamId), Var)>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Adds the gradients of parameters read from `store` into its `grad`
    /// buffers. Parameters of other stores are ignored.
    pub fn accumulate_into(&self, store: &mut ParamStore) {
        for &((uid, pid), v) in &self.params {
            if uid != store.uid() {
                continue;
            }
            if let Some(g) = self.get(v) {
                store.get_mut(pid).tensor.accumulate_grad(g);
            }
        }
    }
}

fn shape_err(op: &'static str, a: &[usize], b: &[usize]) -> Error {
    Error::dim(op, format!("incompatible shapes {a:?} and {b:?}"))
}

// c[m,n] += a[m,k] * b[k,n]
fn mm_acc(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (cv, bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
}

// c[m,n] += a[k,m]^T * b[k,n]
fn mm_at_b_acc(a: &[f64], b: &[f64], c: &mut [f64], k: usize, m: usize, n: usize) {
    for p in 0..k {
        let brow = &b[p * n..(p + 1) * n];
        for i in 0..m {
            let av = a[p * m + i];
            if av == 0.0 {
                continue;
            }
            let crow = &mut c[i * n..(i + 1) * n];
            for (cv, bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
}

// c[m,n] += a[m,k] * b[n,k]^T
fn mm_a_bt_acc(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            c[i * n + j] += arow.iter().zip(brow).map(|(x, y)| x * y).sum::<f64>();
        }
    }
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_K * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_K * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_K * x * x)
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn log_sigmoid(x: f64) -> f64 {
    x.min(0.0) - (-x.abs()).exp().ln_1p()
}

/// Outer/axis/inner extents for an axis-wise view of `shape`.
fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

/// Plain-value GELU (tanh approximation).
pub fn gelu_scalar(x: f64) -> f64 {
    gelu(x)
}

pub fn sigmoid_scalar(x: f64) -> f64 {
    sigmoid(x)
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
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
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    /// A leaf that takes no gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// A leaf that collects a gradient (used for inputs under test).
    pub fn leaf(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Records a parameter as a leaf. Frozen parameters enter as constants.
    /// Repeated calls for the same store and id return the same [`Var`].
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        let key = (store.uid(), id);
        if let Some(&v) = self.params.get(&key) {
            return v;
        }
        let p = store.get(id);
        let v = self.push(p.tensor.data_clone(), Op::Leaf, !p.frozen);
        self.params.insert(key, v);
        v
    }

    fn unary(&mut self, x: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let xv = &self.nodes[x.0].value;
        let data = xv.data().iter().map(|&a| f(a)).collect();
        let out = Tensor::from_parts(xv.shape().to_vec(), data);
        let ng = self.ng(&[x]);
        self.push(out, op, ng)
    }

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        op: Op,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Var> {
        let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if av.shape() != bv.shape() {
            return Err(shape_err(name, av.shape(), bv.shape()));
        }
        let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| f(x, y)).collect();
        let out = Tensor::from_parts(av.shape().to_vec(), data);
        let ng = self.ng(&[a, b]);
        Ok(self.push(out, op, ng))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, Op::Mul(a, b), |x, y| x * y)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("div", a, b, Op::Div(a, b), |x, y| x / y)
    }

    /// Broadcast-adds a `[n]` row vector over the last axis of `x`.
    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let (xv, rv) = (&self.nodes[x.0].value, &self.nodes[row.0].value);
        let n = *xv.shape().last().unwrap_or(&0);
        if rv.shape() != [n] {
            return Err(shape_err("add_row", xv.shape(), rv.shape()));
        }
        let data = xv
            .data()
            .chunks(n)
            .flat_map(|c| c.iter().zip(rv.data()).map(|(a, b)| a + b))
            .collect();
        let out = Tensor::from_parts(xv.shape().to_vec(), data);
        let ng = self.ng(&[x, row]);
        Ok(self.push(out, Op::AddRow(x, row), ng))
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        self.unary(x, Op::Scale(x, s), |a| a * s)
    }

    pub fn add_scalar(&mut self, x: Var, s: f64) -> Var {
        self.unary(x, Op::AddScalar(x), |a| a + s)
    }

    pub fn neg(&mut self, x: Var) -> Var {
        self.scale(x, -1.0)
    }

    /// `[m,k] x [k,n] -> [m,n]`
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let (&[m, k], &[k2, n]) = (av.shape(), bv.shape()) else {
            return Err(shape_err("matmul", av.shape(), bv.shape()));
        };
        if k != k2 {
            return Err(shape_err("matmul", av.shape(), bv.shape()));
        }
        let mut out = vec![0.0; m * n];
        mm_acc(av.data(), bv.data(), &mut out, m, k, n);
        let ng = self.ng(&[a, b]);
        Ok(self.push(Tensor::from_parts(vec![m, n], out), Op::MatMul(a, b), ng))
    }

    /// `y = x w + b` over the last axis of `x`; `w` is `[in, out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (xv, wv) = (&self.nodes[x.0].value, &self.nodes[w.0].value);
        let in_dim = *xv.shape().last().unwrap_or(&0);
        let &[wi, out_dim] = wv.shape() else {
            return Err(shape_err("linear", xv.shape(), wv.shape()));
        };
        if wi != in_dim || xv.ndim() == 0 {
            return Err(shape_err("linear", xv.shape(), wv.shape()));
        }
        if let Some(b) = b {
            let bs = self.nodes[b.0].value.shape();
            if bs != [out_dim] {
                return Err(shape_err("linear(bias)", wv.shape(), bs));
            }
        }
        let m = xv.numel() / in_dim;
        let mut out = vec![0.0; m * out_dim];
        if let Some(b) = b {
            let bd = self.nodes[b.0].value.data();
            out.chunks_mut(out_dim).for_each(|r| r.copy_from_slice(bd));
        }
        mm_acc(xv.data(), wv.data(), &mut out, m, in_dim, out_dim);
        let mut shape = xv.shape().to_vec();
        *shape.last_mut().unwrap() = out_dim;
        let mut deps = vec![x, w];
        deps.extend(b);
        let ng = self.ng(&deps);
        Ok(self.push(Tensor::from_parts(shape, out), Op::Linear { x, w, b }, ng))
    }

    /// Zero-padded 2-D cross-correlation of `x: [C_in,H,W]` with
    /// `k: [C_out, C_in/groups, kh, kw]`; optional bias `[C_out]`.
    pub fn conv2d(
        &mut self,
        x: Var,
        k: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
        groups: usize,
    ) -> Result<Var> {
        let (xv, kv) = (&self.nodes[x.0].value, &self.nodes[k.0].value);
        let (&[cin, h, w], &[cout, cin_g, kh, kw]) = (xv.shape(), kv.shape()) else {
            return Err(shape_err("conv2d", xv.shape(), kv.shape()));
        };
        if groups == 0 || cin % groups != 0 || cout % groups != 0 || cin / groups != cin_g {
            return Err(Error::dim(
                "conv2d",
                format!("input {:?} kernel {:?} groups {groups}", xv.shape(), kv.shape()),
            ));
        }
        if kh % 2 == 0 || kw % 2 == 0 {
            return Err(Error::dim("conv2d", format!("kernel extent {kh}x{kw} must be odd")));
        }
        if stride == 0 || h + 2 * pad < kh || w + 2 * pad < kw {
            return Err(Error::dim(
                "conv2d",
                format!("non-positive output extent for input {h}x{w}, kernel {kh}x{kw}, pad {pad}"),
            ));
        }
        let oh = (h + 2 * pad - kh) / stride + 1;
        let ow = (w + 2 * pad - kw) / stride + 1;
        if let Some(b) = b {
            let bs = self.nodes[b.0].value.shape();
            if bs != [cout] {
                return Err(shape_err("conv2d(bias)", kv.shape(), bs));
            }
        }
        let (xd, kd) = (xv.data(), kv.data());
        let cout_g = cout / groups;
        let mut out = vec![0.0; cout * oh * ow];
        for co in 0..cout {
            let g = co / cout_g;
            let oplane = &mut out[co * oh * ow..(co + 1) * oh * ow];
            if let Some(b) = b {
                let bv = self.nodes[b.0].value.data()[co];
                oplane.iter_mut().for_each(|o| *o = bv);
            }
            for cl in 0..cin_g {
                let ci = g * cin_g + cl;
                let iplane = &xd[ci * h * w..(ci + 1) * h * w];
                for ky in 0..kh {
                    for kx in 0..kw {
                        let wv = kd[((co * cin_g + cl) * kh + ky) * kw + kx];
                        if wv == 0.0 {
                            continue;
                        }
                        for oy in 0..oh {
                            let iy = (oy * stride + ky) as isize - pad as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            let irow = &iplane[iy as usize * w..(iy as usize + 1) * w];
                            let orow = &mut oplane[oy * ow..(oy + 1) * ow];
                            for (ox, o) in orow.iter_mut().enumerate() {
                                let ix = (ox * stride + kx) as isize - pad as isize;
                                if ix >= 0 && ix < w as isize {
                                    *o += wv * irow[ix as usize];
                                }
                            }
                        }
                    }
                }
            }
        }
        let mut deps = vec![x, k];
        deps.extend(b);
        let ng = self.ng(&deps);
        Ok(self.push(
            Tensor::from_parts(vec![cout, oh, ow], out),
            Op::Conv2d {
                x,
                k,
                b,
                stride,
                pad,
                groups,
            },
            ng,
        ))
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        self.unary(x, Op::Gelu(x), gelu)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, Op::Sigmoid(x), sigmoid)
    }

    /// Numerically stable `ln(sigmoid(x))`.
    pub fn log_sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, Op::LogSigmoid(x), log_sigmoid)
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(x, Op::Exp(x), f64::exp)
    }

    pub fn log(&mut self, x: Var) -> Var {
        self.unary(x, Op::Log(x), f64::ln)
    }

    pub fn powf(&mut self, x: Var, p: f64) -> Var {
        self.unary(x, Op::Powf(x, p), |a| a.powf(p))
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Var {
        let xv = &self.nodes[x.0].value;
        let n = *xv.shape().last().unwrap_or(&1);
        let mut data = xv.data().to_vec();
        for row in data.chunks_mut(n) {
            let mx = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut s = 0.0;
            for v in row.iter_mut() {
                *v = (*v - mx).exp();
                s += *v;
            }
            row.iter_mut().for_each(|v| *v /= s);
        }
        let out = Tensor::from_parts(xv.shape().to_vec(), data);
        let ng = self.ng(&[x]);
        self.push(out, Op::Softmax(x), ng)
    }

    /// Layer normalisation over the last axis with affine `gamma`, `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let xv = &self.nodes[x.0].value;
        let n = *xv.shape().last().unwrap_or(&0);
        let (gv, bv) = (&self.nodes[gamma.0].value, &self.nodes[beta.0].value);
        if gv.shape() != [n] || bv.shape() != [n] {
            return Err(shape_err("layer_norm", xv.shape(), gv.shape()));
        }
        let mut data = Vec::with_capacity(xv.numel());
        for row in xv.data().chunks(n) {
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let rstd = 1.0 / (var + eps).sqrt();
            for (i, v) in row.iter().enumerate() {
                data.push((v - mean) * rstd * gv.data()[i] + bv.data()[i]);
            }
        }
        let out = Tensor::from_parts(xv.shape().to_vec(), data);
        let ng = self.ng(&[x, gamma, beta]);
        Ok(self.push(
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                eps,
            },
            ng,
        ))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.nodes[x.0].value.data().iter().sum();
        let ng = self.ng(&[x]);
        self.push(Tensor::scalar(s), Op::Sum(x), ng)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let v = &self.nodes[x.0].value;
        let s = v.data().iter().sum::<f64>() / v.numel() as f64;
        let ng = self.ng(&[x]);
        self.push(Tensor::scalar(s), Op::Mean(x), ng)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.nodes[x.0].value.reshaped(shape)?;
        let ng = self.ng(&[x]);
        Ok(self.push(out, Op::Reshape(x), ng))
    }

    /// Transpose of a 2-D tensor.
    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let xv = &self.nodes[x.0].value;
        let &[r, c] = xv.shape() else {
            return Err(Error::dim("transpose", format!("expected 2-D, got {:?}", xv.shape())));
        };
        let d = xv.data();
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = d[i * c + j];
            }
        }
        let ng = self.ng(&[x]);
        Ok(self.push(Tensor::from_parts(vec![c, r], out), Op::Transpose(x), ng))
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = self.nodes[parts.first().ok_or_else(|| Error::dim("concat", "no inputs"))?.0]
            .value
            .shape()
            .to_vec();
        if axis >= first.len() {
            return Err(Error::dim("concat", format!("axis {axis} out of range for {first:?}")));
        }
        let mut total = 0;
        for p in parts {
            let s = self.nodes[p.0].value.shape();
            let compatible = s.len() == first.len()
                && s.iter().zip(&first).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(shape_err("concat", &first, s));
            }
            total += s[axis];
        }
        let (outer, _, inner) = axis_split(&first, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for p in parts {
                let v = &self.nodes[p.0].value;
                let chunk = v.shape()[axis] * inner;
                out.extend_from_slice(&v.data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let mut shape = first;
        shape[axis] = total;
        let ng = self.ng(parts);
        Ok(self.push(
            Tensor::from_parts(shape, out),
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
            ng,
        ))
    }

    /// `x[.., start..start+len, ..]` along `axis`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let xv = &self.nodes[x.0].value;
        if axis >= xv.ndim() || start + len > xv.shape()[axis] || len == 0 {
            return Err(Error::dim(
                "slice",
                format!("range {start}..{} on axis {axis} of {:?}", start + len, xv.shape()),
            ));
        }
        let (outer, n, inner) = axis_split(xv.shape(), axis);
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = o * n * inner + start * inner;
            out.extend_from_slice(&xv.data()[base..base + len * inner]);
        }
        let mut shape = xv.shape().to_vec();
        shape[axis] = len;
        let ng = self.ng(&[x]);
        Ok(self.push(Tensor::from_parts(shape, out), Op::Slice { x, axis, start }, ng))
    }

    /// Nearest-neighbour 2x upsampling of `[C,H,W]`.
    pub fn upsample2(&mut self, x: Var) -> Result<Var> {
        let xv = &self.nodes[x.0].value;
        let &[c, h, w] = xv.shape() else {
            return Err(Error::dim("upsample2", format!("expected [C,H,W], got {:?}", xv.shape())));
        };
        let d = xv.data();
        let mut out = vec![0.0; c * 4 * h * w];
        for ch in 0..c {
            for y in 0..2 * h {
                for x_ in 0..2 * w {
                    out[(ch * 2 * h + y) * 2 * w + x_] = d[(ch * h + y / 2) * w + x_ / 2];
                }
            }
        }
        let ng = self.ng(&[x]);
        Ok(self.push(Tensor::from_parts(vec![c, 2 * h, 2 * w], out), Op::Upsample2(x), ng))
    }

    /// 2x2 max pooling with stride 2 on `[C,H,W]` (even extents).
    pub fn max_pool2(&mut self, x: Var) -> Result<Var> {
        let xv = &self.nodes[x.0].value;
        let &[c, h, w] = xv.shape() else {
            return Err(Error::dim("max_pool2", format!("expected [C,H,W], got {:?}", xv.shape())));
        };
        if h % 2 != 0 || w % 2 != 0 || h == 0 || w == 0 {
            return Err(Error::dim("max_pool2", format!("odd or empty extent {h}x{w}")));
        }
        let (oh, ow) = (h / 2, w / 2);
        let d = xv.data();
        let mut out = vec![0.0; c * oh * ow];
        let mut argmax = vec![0; c * oh * ow];
        for ch in 0..c {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = usize::MAX;
                    let mut bv = f64::NEG_INFINITY;
                    for dy in 0..2 {
                        for dx in 0..2 {
                            let i = (ch * h + 2 * oy + dy) * w + 2 * ox + dx;
                            if d[i] > bv {
                                bv = d[i];
                                best = i;
                            }
                        }
                    }
                    let o = (ch * oh + oy) * ow + ox;
                    out[o] = bv;
                    argmax[o] = best;
                }
            }
        }
        let ng = self.ng(&[x]);
        Ok(self.push(
            Tensor::from_parts(vec![c, oh, ow], out),
            Op::MaxPool2 { x, argmax },
            ng,
        ))
    }

    /// Bilinear resize of `[C,H,W]` to `[C,out_h,out_w]` (half-pixel centres).
    pub fn bilinear(&mut self, x: Var, out_h: usize, out_w: usize) -> Result<Var> {
        let out = crate::tensor::resize_bilinear(&self.nodes[x.0].value, out_h, out_w)?;
        let ng = self.ng(&[x]);
        Ok(self.push(out, Op::Bilinear(x), ng))
    }

    /// Non-overlapping `patch x patch` unfold of `[C,H,W]` into
    /// `[(H/p)*(W/p), C*p*p]` token rows.
    pub fn patchify(&mut self, x: Var, patch: usize) -> Result<Var> {
        let xv = &self.nodes[x.0].value;
        let &[c, h, w] = xv.shape() else {
            return Err(Error::dim("patchify", format!("expected [C,H,W], got {:?}", xv.shape())));
        };
        if patch == 0 || h % patch != 0 || w % patch != 0 {
            return Err(Error::Config(format!(
                "image {h}x{w} is not divisible by patch size {patch}"
            )));
        }
        let (gh, gw) = (h / patch, w / patch);
        let row = c * patch * patch;
        let d = xv.data();
        let mut out = vec![0.0; gh * gw * row];
        for (src, &v) in d.iter().enumerate() {
            out[patchify_index(src, c, h, w, patch)] = v;
        }
        let ng = self.ng(&[x]);
        Ok(self.push(
            Tensor::from_parts(vec![gh * gw, c * patch * patch], out),
            Op::Patchify { x, patch },
            ng,
        ))
    }

    /// Mean of squared elementwise differences.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if av.shape() != bv.shape() {
            return Err(shape_err("mse", av.shape(), bv.shape()));
        }
        let s: f64 = av.data().iter().zip(bv.data()).map(|(x, y)| (x - y) * (x - y)).sum();
        let n = av.numel() as f64;
        let ng = self.ng(&[a, b]);
        Ok(self.push(Tensor::scalar(s / n), Op::Mse(a, b), ng))
    }

    /// Reverse sweep from a one-element `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = &self.nodes[loss.0].value;
        if lv.numel() != 1 {
            return Err(Error::dim("backward", format!("loss must be scalar, got {:?}", lv.shape())));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        if self.nodes[loss.0].needs_grad {
            grads[loss.0] = Some(vec![1.0]);
        }
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        let params = self.params.iter().map(|(&p, &v)| (p, v)).collect();
        Ok(Gradients { grads, params })
    }

    /// Backward sweep followed by accumulation into `store`.
    pub fn backward_into(&self, loss: Var, store: &mut ParamStore) -> Result<()> {
        self.backward(loss)?.accumulate_into(store);
        Ok(())
    }

    /// Runs `f` on the gradient buffer of `v`, allocating it on first use.
    /// Input nodes always precede their consumer, so the buffer is never
    /// the one currently being propagated.
    fn with_buf(&self, grads: &mut [Option<Vec<f64>>], v: Var, f: impl FnOnce(&mut [f64])) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        let n = self.nodes[v.0].value.numel();
        f(grads[v.0].get_or_insert_with(|| vec![0.0; n]));
    }

    fn propagate(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let val = |v: Var| &self.nodes[v.0].value;
        macro_rules! with_grad {
            ($v:expr, |$b:ident| $body:expr) => {
                self.with_buf(grads, $v, |$b: &mut [f64]| $body)
            };
        }
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                with_grad!(*a, |ga| add_into(ga, g));
                with_grad!(*b, |gb| add_into(gb, g));
            }
            Op::Sub(a, b) => {
                with_grad!(*a, |ga| add_into(ga, g));
                with_grad!(*b, |gb| gb.iter_mut().zip(g).for_each(|(x, y)| *x -= y));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (val(*a).data(), val(*b).data());
                with_grad!(*a, |ga| for k in 0..g.len() {
                    ga[k] += g[k] * bv[k];
                });
                with_grad!(*b, |gb| for k in 0..g.len() {
                    gb[k] += g[k] * av[k];
                });
            }
            Op::Div(a, b) => {
                let (av, bv) = (val(*a).data(), val(*b).data());
                with_grad!(*a, |ga| for k in 0..g.len() {
                    ga[k] += g[k] / bv[k];
                });
                with_grad!(*b, |gb| for k in 0..g.len() {
                    gb[k] -= g[k] * av[k] / (bv[k] * bv[k]);
                });
            }
            Op::AddRow(x, r) => {
                with_grad!(*x, |gx| add_into(gx, g));
                let n = val(*r).numel();
                with_grad!(*r, |gr| for chunk in g.chunks(n) {
                    add_into(gr, chunk);
                });
            }
            Op::Scale(x, s) => {
                with_grad!(*x, |gx| gx.iter_mut().zip(g).for_each(|(a, b)| *a += s * b));
            }
            Op::AddScalar(x) => {
                with_grad!(*x, |gx| add_into(gx, g));
            }
            Op::MatMul(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                let (m, k, n) = (av.shape()[0], av.shape()[1], bv.shape()[1]);
                with_grad!(*a, |ga| mm_a_bt_acc(g, bv.data(), ga, m, n, k));
                with_grad!(*b, |gb| mm_at_b_acc(av.data(), g, gb, m, k, n));
            }
            Op::Linear { x, w, b } => {
                let (xv, wv) = (val(*x), val(*w));
                let (din, dout) = (wv.shape()[0], wv.shape()[1]);
                let m = xv.numel() / din;
                with_grad!(*x, |gx| mm_a_bt_acc(g, wv.data(), gx, m, dout, din));
                with_grad!(*w, |gw| mm_at_b_acc(xv.data(), g, gw, m, din, dout));
                if let Some(b) = b {
                    with_grad!(*b, |gb| for row in g.chunks(dout) {
                        add_into(gb, row);
                    });
                }
            }
            Op::Conv2d {
                x,
                k,
                b,
                stride,
                pad,
                groups,
            } => {
                let (xv, kv) = (val(*x), val(*k));
                let (h, w) = (xv.shape()[1], xv.shape()[2]);
                let (cout, cin_g, kh, kw) = (kv.shape()[0], kv.shape()[1], kv.shape()[2], kv.shape()[3]);
                let (oh, ow) = (node.value.shape()[1], node.value.shape()[2]);
                let cout_g = cout / groups;
                let (stride, pad) = (*stride as isize, *pad as isize);
                let mut dx = self.nodes[x.0].needs_grad.then(|| vec![0.0; xv.numel()]);
                let mut dk = self.nodes[k.0].needs_grad.then(|| vec![0.0; kv.numel()]);
                for co in 0..cout {
                    let grp = co / cout_g;
                    let gplane = &g[co * oh * ow..(co + 1) * oh * ow];
                    for cl in 0..cin_g {
                        let ci = grp * cin_g + cl;
                        for ky in 0..kh {
                            for kx in 0..kw {
                                let kidx = ((co * cin_g + cl) * kh + ky) * kw + kx;
                                let wv = kv.data()[kidx];
                                let mut acc_k = 0.0;
                                for oy in 0..oh {
                                    let iy = oy as isize * stride + ky as isize - pad;
                                    if iy < 0 || iy >= h as isize {
                                        continue;
                                    }
                                    let ibase = (ci * h + iy as usize) * w;
                                    for ox in 0..ow {
                                        let ix = ox as isize * stride + kx as isize - pad;
                                        if ix < 0 || ix >= w as isize {
                                            continue;
                                        }
                                        let gv = gplane[oy * ow + ox];
                                        let ii = ibase + ix as usize;
                                        acc_k += gv * xv.data()[ii];
                                        if let Some(d) = dx.as_mut() {
                                            d[ii] += gv * wv;
                                        }
                                    }
                                }
                                if let Some(d) = dk.as_mut() {
                                    d[kidx] += acc_k;
                                }
                            }
                        }
                    }
                }
                if let Some(d) = dx {
                    with_grad!(*x, |gx| add_into(gx, &d));
                }
                if let Some(d) = dk {
                    with_grad!(*k, |gk| add_into(gk, &d));
                }
                if let Some(b) = b {
                    with_grad!(*b, |gb| for co in 0..cout {
                        gb[co] += g[co * oh * ow..(co + 1) * oh * ow].iter().sum::<f64>();
                    });
                }
            }
            Op::Gelu(x) => {
                let xv = val(*x).data();
                with_grad!(*x, |gx| for k in 0..g.len() {
                    gx[k] += g[k] * gelu_grad(xv[k]);
                });
            }
            Op::Sigmoid(x) => {
                let y = node.value.data();
                with_grad!(*x, |gx| for k in 0..g.len() {
                    gx[k] += g[k] * y[k] * (1.0 - y[k]);
                });
            }
            Op::LogSigmoid(x) => {
                let xv = val(*x).data();
                with_grad!(*x, |gx| for k in 0..g.len() {
                    gx[k] += g[k] * sigmoid(-xv[k]);
                });
            }
            Op::Exp(x) => {
                let y = node.value.data();
                with_grad!(*x, |gx| for k in 0..g.len() {
                    gx[k] += g[k] * y[k];
                });
            }
            Op::Log(x) => {
                let xv = val(*x).data();
                with_grad!(*x, |gx| for k in 0..g.len() {
                    gx[k] += g[k] / xv[k];
                });
            }
            Op::Powf(x, p) => {
                let xv = val(*x).data();
                with_grad!(*x, |gx| for k in 0..g.len() {
                    gx[k] += g[k] * p * xv[k].powf(p - 1.0);
                });
            }
            Op::Softmax(x) => {
                let y = node.value.data();
                let n = *node.value.shape().last().unwrap_or(&1);
                with_grad!(*x, |gx| for r in 0..y.len() / n {
                    let (ys, gs) = (&y[r * n..(r + 1) * n], &g[r * n..(r + 1) * n]);
                    let dot: f64 = ys.iter().zip(gs).map(|(a, b)| a * b).sum();
                    for j in 0..n {
                        gx[r * n + j] += ys[j] * (gs[j] - dot);
                    }
                });
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                eps,
            } => {
                let xv = val(*x).data();
                let gam = val(*gamma).data();
                let n = gam.len();
                let need = |v: Var| self.nodes[v.0].needs_grad;
                let mut dx = need(*x).then(|| vec![0.0; xv.len()]);
                let mut dg = need(*gamma).then(|| vec![0.0; n]);
                let mut db = need(*beta).then(|| vec![0.0; n]);
                let mut xhat = vec![0.0; n];
                let mut dxhat = vec![0.0; n];
                for r in 0..xv.len() / n {
                    let row = &xv[r * n..(r + 1) * n];
                    let gr = &g[r * n..(r + 1) * n];
                    let mean = row.iter().sum::<f64>() / n as f64;
                    let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
                    let rstd = 1.0 / (var + eps).sqrt();
                    for j in 0..n {
                        xhat[j] = (row[j] - mean) * rstd;
                        dxhat[j] = gr[j] * gam[j];
                    }
                    if let Some(d) = dg.as_mut() {
                        (0..n).for_each(|j| d[j] += gr[j] * xhat[j]);
                    }
                    if let Some(d) = db.as_mut() {
                        add_into(d, gr);
                    }
                    if let Some(d) = dx.as_mut() {
                        let m1 = dxhat.iter().sum::<f64>() / n as f64;
                        let m2 = dxhat.iter().zip(&xhat).map(|(a, b)| a * b).sum::<f64>() / n as f64;
                        for j in 0..n {
                            d[r * n + j] = rstd * (dxhat[j] - m1 - xhat[j] * m2);
                        }
                    }
                }
                for (v, d) in [(*x, dx), (*gamma, dg), (*beta, db)] {
                    if let Some(d) = d {
                        with_grad!(v, |gv| add_into(gv, &d));
                    }
                }
            }
            Op::Sum(x) => {
                with_grad!(*x, |gx| gx.iter_mut().for_each(|v| *v += g[0]));
            }
            Op::Mean(x) => {
                let n = val(*x).numel() as f64;
                with_grad!(*x, |gx| gx.iter_mut().for_each(|v| *v += g[0] / n));
            }
            Op::Reshape(x) => {
                with_grad!(*x, |gx| add_into(gx, g));
            }
            Op::Transpose(x) => {
                let (r, c) = (val(*x).shape()[0], val(*x).shape()[1]);
                with_grad!(*x, |gx| for i in 0..r {
                    for j in 0..c {
                        gx[i * c + j] += g[j * r + i];
                    }
                });
            }
            Op::Concat { parts, axis } => {
                let shape = node.value.shape();
                let (outer, total, inner) = axis_split(shape, *axis);
                let mut offset = 0;
                for p in parts {
                    let len = val(*p).shape()[*axis];
                    with_grad!(*p, |gp| for o in 0..outer {
                        let src = &g[(o * total + offset) * inner..(o * total + offset + len) * inner];
                        add_into(&mut gp[o * len * inner..(o + 1) * len * inner], src);
                    });
                    offset += len;
                }
            }
            Op::Slice { x, axis, start } => {
                let (outer, n, inner) = axis_split(val(*x).shape(), *axis);
                let len = node.value.shape()[*axis];
                with_grad!(*x, |gx| for o in 0..outer {
                    let base = o * n * inner + start * inner;
                    add_into(&mut gx[base..base + len * inner], &g[o * len * inner..(o + 1) * len * inner]);
                });
            }
            Op::Upsample2(x) => {
                let (c, h, w) = (val(*x).shape()[0], val(*x).shape()[1], val(*x).shape()[2]);
                with_grad!(*x, |gx| for ch in 0..c {
                    for y in 0..2 * h {
                        for x_ in 0..2 * w {
                            gx[(ch * h + y / 2) * w + x_ / 2] += g[(ch * 2 * h + y) * 2 * w + x_];
                        }
                    }
                });
            }
            Op::MaxPool2 { x, argmax } => {
                with_grad!(*x, |gx| for (o, &src) in argmax.iter().enumerate() {
                    gx[src] += g[o];
                });
            }
            Op::Bilinear(x) => {
                let (c, h, w) = (val(*x).shape()[0], val(*x).shape()[1], val(*x).shape()[2]);
                let (oh, ow) = (node.value.shape()[1], node.value.shape()[2]);
                let ty = bilinear_taps(oh, h);
                let tx = bilinear_taps(ow, w);
                with_grad!(*x, |gx| for ch in 0..c {
                    let base = ch * h * w;
                    for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
                        for (ox, &(x0, x1, fx)) in tx.iter().enumerate() {
                            let gv = g[(ch * oh + oy) * ow + ox];
                            gx[base + y0 * w + x0] += gv * (1.0 - fy) * (1.0 - fx);
                            gx[base + y0 * w + x1] += gv * (1.0 - fy) * fx;
                            gx[base + y1 * w + x0] += gv * fy * (1.0 - fx);
                            gx[base + y1 * w + x1] += gv * fy * fx;
                        }
                    }
                });
            }
            Op::Patchify { x, patch } => {
                let s = val(*x).shape();
                let (c, h, w) = (s[0], s[1], s[2]);
                with_grad!(*x, |gx| for (src, gv) in gx.iter_mut().enumerate() {
                    *gv += g[patchify_index(src, c, h, w, *patch)];
                });
            }
            Op::Mse(a, b) => {
                let (av, bv) = (val(*a).data(), val(*b).data());
                let scale = 2.0 * g[0] / av.len() as f64;
                with_grad!(*a, |ga| for k in 0..av.len() {
                    ga[k] += scale * (av[k] - bv[k]);
                });
                with_grad!(*b, |gb| for k in 0..av.len() {
                    gb[k] -= scale * (av[k] - bv[k]);
                });
            }
        }
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    dst.iter_mut().zip(src).for_each(|(a, b)| *a += b);
}

/// Destination index in the patchified layout for flat source index `src`
/// of a `[c,h,w]` image.
fn patchify_index(src: usize, c: usize, h: usize, w: usize, p: usize) -> usize {
    let ch = src / (h * w);
    let y = (src / w) % h;
    let x = src % w;
    debug_assert!(ch < c);
    let gw = w / p;
    let token = (y / p) * gw + x / p;
    let within = (ch * p + y % p) * p + x % p;
    token * (c * p * p) + within
}

impl Tensor {
    /// Value copy without the gradient state.
    pub(crate) fn data_clone(&self) -> Tensor {
        Tensor::from_parts(self.shape().to_vec(), self.data().to_vec())
    }
}
