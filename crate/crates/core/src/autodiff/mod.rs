//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Graph`] is an append-only list of nodes. Every primitive evaluates
//! eagerly, checks its output for non-finite values, and records its inputs
//! when any of them requires a gradient. [`Graph::backward`] walks the nodes
//! in reverse append order, visiting each once.
//!
//! Layout convention for spatial primitives is channels-last:
//! `[lines, pixels, channels]`, with any leading extents treated as batch.

mod backward;
mod broadcast;
pub(crate) mod kernels;

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub use backward::Gradients;
use kernels::ConvGeom;

/// Handle to a node of one [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
pub(crate) enum Op {
    Leaf,
    Add(Var, Var, broadcast::Plan),
    Sub(Var, Var, broadcast::Plan),
    Mul(Var, Var, broadcast::Plan),
    Scale(Var, f64),
    Exp(Var),
    Silu(Var),
    Sigmoid(Var),
    Softplus(Var),
    Tanh(Var),
    Relu(Var),
    MatMul(Var, Var),
    Bmm(Var, Var),
    TransposeLast2(Var),
    Conv1d(Var, Var, ConvGeom),
    ConvTranspose1d(Var, Var, ConvGeom),
    Softmax(Var),
    LayerNorm(Var, Vec<(f64, f64)>),
    SumAll(Var),
    MeanAll(Var),
    MeanAxis(Var, usize),
    VarianceAxis(Var, usize),
    MaxAxis(Var, usize, Vec<usize>),
    Slice(Var, usize, usize),
    Concat(Vec<Var>, usize),
    Pad(Var, usize, usize),
    Reshape(Var),
    CausalConvLines {
        x: Var,
        w: Var,
        history: Tensor,
    },
    SelectiveScan {
        u: Var,
        dt: Var,
        a: Var,
        b: Var,
        c: Var,
        d: Var,
        h0: Tensor,
        states: Vec<f64>,
    },
}

pub(crate) struct Node {
    pub value: Arc<Tensor>,
    pub op: Op,
    pub requires_grad: bool,
}

/// Append-only computation record.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    consumed: bool,
}

/// `[outer, axis, inner]` decomposition of a shape around `axis`.
fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn check_finite(op: &'static str, t: &Tensor) -> Result<()> {
    if t.all_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite { op })
    }
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

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Leaf that receives a gradient.
    pub fn param(&mut self, t: impl Into<Arc<Tensor>>) -> Result<Var> {
        self.leaf(t.into(), true)
    }

    /// Leaf without gradient.
    pub fn constant(&mut self, t: impl Into<Arc<Tensor>>) -> Result<Var> {
        self.leaf(t.into(), false)
    }

    fn leaf(&mut self, t: Arc<Tensor>, requires_grad: bool) -> Result<Var> {
        check_finite("leaf", &t)?;
        self.nodes.push(Node {
            value: t,
            op: Op::Leaf,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn push(&mut self, name: &'static str, value: Tensor, op: Op, inputs: &[Var]) -> Result<Var> {
        check_finite(name, &value)?;
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        let op = if requires_grad { op } else { Op::Leaf };
        self.nodes.push(Node {
            value: Arc::new(value),
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        mk: impl FnOnce(Var, Var, broadcast::Plan) -> Op,
    ) -> Result<Var> {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let (shape, plan) = broadcast::plan(name, ta.shape(), tb.shape())?;
        let n: usize = shape.iter().product();
        let mut out = vec![0.0; n];
        let (da, db) = (ta.data(), tb.data());
        broadcast::for_each(&plan, n, |i, ia, ib| out[i] = f(da[ia], db[ib]));
        let value = Tensor::from_parts(shape, out);
        self.push(name, value, mk(a, b, plan), &[a, b])
    }

    /// Elementwise sum with broadcasting.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub)
    }

    /// Elementwise product with broadcasting.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Result<Var> {
        let value = self.value(a).map(|v| v * s);
        self.push("scale", value, Op::Scale(a, s), &[a])
    }

    pub fn neg(&mut self, a: Var) -> Result<Var> {
        self.scale(a, -1.0)
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        let value = self.value(a).map(f64::exp);
        self.push("exp", value, Op::Exp(a), &[a])
    }

    pub fn silu(&mut self, a: Var) -> Result<Var> {
        let value = self.value(a).map(|x| x * kernels::sigmoid(x));
        self.push("silu", value, Op::Silu(a), &[a])
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        let value = self.value(a).map(kernels::sigmoid);
        self.push("sigmoid", value, Op::Sigmoid(a), &[a])
    }

    pub fn softplus(&mut self, a: Var) -> Result<Var> {
        let value = self.value(a).map(kernels::softplus);
        self.push("softplus", value, Op::Softplus(a), &[a])
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        let value = self.value(a).map(f64::tanh);
        self.push("tanh", value, Op::Tanh(a), &[a])
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let value = self.value(a).map(|x| x.max(0.0));
        self.push("relu", value, Op::Relu(a), &[a])
    }

    /// `[..., K] x [K, N] -> [..., N]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (sa, sb) = (ta.shape(), tb.shape());
        if sb.len() != 2 || sa.last() != Some(&sb[0]) {
            return Err(Error::shape("matmul", sa, sb));
        }
        let (k, n) = (sb[0], sb[1]);
        let m = ta.len() / k;
        let mut shape = sa.to_vec();
        *shape.last_mut().unwrap() = n;
        let out = kernels::matmul(ta.data(), tb.data(), m, k, n);
        self.push("matmul", Tensor::from_parts(shape, out), Op::MatMul(a, b), &[a, b])
    }

    /// Batched `[B, M, K] x [B, K, N] -> [B, M, N]`.
    pub fn bmm(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (sa, sb) = (ta.shape(), tb.shape());
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] || sa[2] != sb[1] {
            return Err(Error::shape("bmm", sa, sb));
        }
        let (bs, m, k, n) = (sa[0], sa[1], sa[2], sb[2]);
        let mut out = Vec::with_capacity(bs * m * n);
        for i in 0..bs {
            out.extend(kernels::matmul(
                &ta.data()[i * m * k..(i + 1) * m * k],
                &tb.data()[i * k * n..(i + 1) * k * n],
                m,
                k,
                n,
            ));
        }
        self.push("bmm", Tensor::from_parts(vec![bs, m, n], out), Op::Bmm(a, b), &[a, b])
    }

    pub fn transpose_last2(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let s = t.shape();
        if s.len() < 2 {
            return Err(Error::invalid("transpose", format!("needs rank >= 2, got {s:?}")));
        }
        let (r, c) = (s[s.len() - 2], s[s.len() - 1]);
        let batch = t.len() / (r * c);
        let mut out = vec![0.0; t.len()];
        for b in 0..batch {
            for i in 0..r {
                for j in 0..c {
                    out[b * r * c + j * r + i] = t.data()[b * r * c + i * c + j];
                }
            }
        }
        let mut shape = s.to_vec();
        let nd = shape.len();
        shape.swap(nd - 2, nd - 1);
        self.push("transpose", Tensor::from_parts(shape, out), Op::TransposeLast2(a), &[a])
    }

    /// Channels-last 1-D convolution of `x: [..., len, c_in]` with kernel
    /// `w: [c_out, c_in / groups, k]`. Output length is
    /// `(len + pad_left + pad_right - k) / stride + 1`.
    pub fn conv1d(
        &mut self,
        x: Var,
        w: Var,
        stride: usize,
        pad_left: usize,
        pad_right: usize,
        groups: usize,
    ) -> Result<Var> {
        let (tx, tw) = (self.value(x), self.value(w));
        let (sx, sw) = (tx.shape(), tw.shape());
        if sx.len() < 2 || sw.len() != 3 || groups == 0 || stride == 0 {
            return Err(Error::shape("conv1d", sx, sw));
        }
        let (len, c_in) = (sx[sx.len() - 2], sx[sx.len() - 1]);
        let (c_out, cin_g, k) = (sw[0], sw[1], sw[2]);
        if c_in % groups != 0 || c_out % groups != 0 || cin_g * groups != c_in {
            return Err(Error::shape("conv1d", sx, sw));
        }
        let padded = len + pad_left + pad_right;
        if padded < k {
            return Err(Error::invalid("conv1d", format!("length {len} shorter than kernel {k}")));
        }
        let geom = ConvGeom {
            batch: tx.len() / (len * c_in),
            len,
            c_in,
            c_out,
            k,
            stride,
            pad_left,
            out_len: (padded - k) / stride + 1,
            groups,
        };
        let out = kernels::conv1d(tx.data(), tw.data(), &geom);
        let mut shape = sx.to_vec();
        let nd = shape.len();
        shape[nd - 2] = geom.out_len;
        shape[nd - 1] = c_out;
        self.push("conv1d", Tensor::from_parts(shape, out), Op::Conv1d(x, w, geom), &[x, w])
    }

    /// Transposed 1-D convolution, kernel `w: [c_in, c_out, k]`.
    pub fn conv_transpose1d(&mut self, x: Var, w: Var, stride: usize) -> Result<Var> {
        let (tx, tw) = (self.value(x), self.value(w));
        let (sx, sw) = (tx.shape(), tw.shape());
        if sx.len() < 2 || sw.len() != 3 || sx[sx.len() - 1] != sw[0] || stride == 0 {
            return Err(Error::shape("conv_transpose1d", sx, sw));
        }
        let (len, c_in) = (sx[sx.len() - 2], sx[sx.len() - 1]);
        let (c_out, k) = (sw[1], sw[2]);
        let geom = ConvGeom {
            batch: tx.len() / (len * c_in),
            len,
            c_in,
            c_out,
            k,
            stride,
            pad_left: 0,
            out_len: (len - 1) * stride + k,
            groups: 1,
        };
        let out = kernels::conv_transpose1d(tx.data(), tw.data(), &geom);
        let mut shape = sx.to_vec();
        let nd = shape.len();
        shape[nd - 2] = geom.out_len;
        shape[nd - 1] = c_out;
        self.push(
            "conv_transpose1d",
            Tensor::from_parts(shape, out),
            Op::ConvTranspose1d(x, w, geom),
            &[x, w],
        )
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let w = *t.shape().last().unwrap();
        let out = kernels::softmax_rows(t.data(), w);
        let value = Tensor::from_parts(t.shape().to_vec(), out);
        self.push("softmax", value, Op::Softmax(a), &[a])
    }

    /// Normalization over the last axis, no affine part.
    pub fn layernorm(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let w = *t.shape().last().unwrap();
        let (out, stats) = kernels::layernorm_rows(t.data(), w);
        let value = Tensor::from_parts(t.shape().to_vec(), out);
        self.push("layernorm", value, Op::LayerNorm(a, stats), &[a])
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).sum();
        self.push("sum", Tensor::scalar(s), Op::SumAll(a), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let s = t.sum() / t.len() as f64;
        self.push("mean", Tensor::scalar(s), Op::MeanAll(a), &[a])
    }

    fn reduce_axis(
        &mut self,
        name: &'static str,
        a: Var,
        axis: usize,
        f: impl Fn(&[f64]) -> (f64, usize),
        mk: impl FnOnce(Vec<usize>) -> Op,
    ) -> Result<Var> {
        let t = self.value(a);
        if axis >= t.ndim() {
            return Err(Error::invalid(name, format!("axis {axis} out of range for {:?}", t.shape())));
        }
        let (outer, n, inner) = split_axis(t.shape(), axis);
        let mut out = vec![0.0; outer * inner];
        let mut arg = vec![0; outer * inner];
        let mut buf = vec![0.0; n];
        for o in 0..outer {
            for i in 0..inner {
                for (j, b) in buf.iter_mut().enumerate() {
                    *b = t.data()[(o * n + j) * inner + i];
                }
                let (v, k) = f(&buf);
                out[o * inner + i] = v;
                arg[o * inner + i] = k;
            }
        }
        let mut shape = t.shape().to_vec();
        shape[axis] = 1;
        self.push(name, Tensor::from_parts(shape, out), mk(arg), &[a])
    }

    /// Mean over `axis`, kept as extent 1.
    pub fn mean_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        self.reduce_axis(
            "mean_axis",
            a,
            axis,
            |xs| (xs.iter().sum::<f64>() / xs.len() as f64, 0),
            |_| Op::MeanAxis(a, axis),
        )
    }

    /// Population variance over `axis`, kept as extent 1.
    pub fn variance_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        self.reduce_axis(
            "variance_axis",
            a,
            axis,
            |xs| (population_variance(xs), 0),
            |_| Op::VarianceAxis(a, axis),
        )
    }

    /// Maximum over `axis`, kept as extent 1. Ties go to the first index.
    pub fn max_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        self.reduce_axis(
            "max_axis",
            a,
            axis,
            |xs| {
                let mut best = (xs[0], 0);
                for (j, &v) in xs.iter().enumerate().skip(1) {
                    if v > best.0 {
                        best = (v, j);
                    }
                }
                best
            },
            |arg| Op::MaxAxis(a, axis, arg),
        )
    }

    /// `[start, start + len)` along `axis`.
    pub fn slice(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let t = self.value(a);
        if axis >= t.ndim() || len == 0 || start + len > t.shape()[axis] {
            return Err(Error::invalid(
                "slice",
                format!("{start}..{} on axis {axis} of {:?}", start + len, t.shape()),
            ));
        }
        let (outer, n, inner) = split_axis(t.shape(), axis);
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * n + start) * inner;
            out.extend_from_slice(&t.data()[base..base + len * inner]);
        }
        let mut shape = t.shape().to_vec();
        shape[axis] = len;
        self.push("slice", Tensor::from_parts(shape, out), Op::Slice(a, axis, start), &[a])
    }

    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        let first = self
            .value(*xs.first().ok_or_else(|| Error::invalid("concat", "no inputs"))?)
            .shape()
            .to_vec();
        if axis >= first.len() {
            return Err(Error::invalid("concat", format!("axis {axis} out of range for {first:?}")));
        }
        let mut total = 0;
        for &x in xs {
            let s = self.value(x).shape();
            let compatible = s.len() == first.len()
                && s.iter().zip(&first).enumerate().all(|(i, (p, q))| i == axis || p == q);
            if !compatible {
                return Err(Error::shape("concat", &first, s));
            }
            total += s[axis];
        }
        let (outer, _, inner) = split_axis(&first, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &x in xs {
                let t = self.value(x);
                let n = t.shape()[axis];
                out.extend_from_slice(&t.data()[o * n * inner..(o + 1) * n * inner]);
            }
        }
        let mut shape = first;
        shape[axis] = total;
        self.push("concat", Tensor::from_parts(shape, out), Op::Concat(xs.to_vec(), axis), xs)
    }

    /// Zero padding along `axis`.
    pub fn pad(&mut self, a: Var, axis: usize, before: usize, after: usize) -> Result<Var> {
        let t = self.value(a);
        if axis >= t.ndim() {
            return Err(Error::invalid("pad", format!("axis {axis} out of range for {:?}", t.shape())));
        }
        let (outer, n, inner) = split_axis(t.shape(), axis);
        let m = n + before + after;
        let mut out = vec![0.0; outer * m * inner];
        for o in 0..outer {
            let dst = (o * m + before) * inner;
            out[dst..dst + n * inner].copy_from_slice(&t.data()[o * n * inner..(o + 1) * n * inner]);
        }
        let mut shape = t.shape().to_vec();
        shape[axis] = m;
        self.push("pad", Tensor::from_parts(shape, out), Op::Pad(a, axis, before), &[a])
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(a).reshape(shape)?;
        self.push("reshape", value, Op::Reshape(a), &[a])
    }

    /// Depthwise causal convolution along axis 0 of `x: [lines, pixels, ch]`
    /// with `w: [ch, k]`; tap `k - 1` multiplies the current line.
    /// `history` holds the `k - 1` lines preceding `x`.
    pub fn causal_conv_lines(&mut self, x: Var, w: Var, history: &Tensor) -> Result<Var> {
        let (tx, tw) = (self.value(x), self.value(w));
        let (sx, sw) = (tx.shape(), tw.shape());
        if sx.len() != 3 || sw.len() != 2 || sw[0] != sx[2] {
            return Err(Error::shape("causal_conv_lines", sx, sw));
        }
        let k = sw[1];
        let hist_shape = [k.saturating_sub(1), sx[1], sx[2]];
        if k > 1 && history.shape() != hist_shape {
            return Err(Error::shape("causal_conv_lines", history.shape(), &hist_shape));
        }
        let plane = sx[1] * sx[2];
        let out = kernels::causal_conv_lines(tx.data(), history.data(), tw.data(), sx[0], plane, sx[2], k);
        let value = Tensor::from_parts(sx.to_vec(), out);
        let op = Op::CausalConvLines {
            x,
            w,
            history: history.clone(),
        };
        self.push("causal_conv_lines", value, op, &[x, w])
    }

    /// Selective state-space scan along axis 0.
    ///
    /// `u`, `dt`: `[L, N, C]`; `a`: `[C, S]` (negative); `b`, `c`:
    /// `[L, N, S]`; `d`: `[C]`; `h0`: `[N, C, S]`. Returns the output
    /// `[L, N, C]` and the hidden state after the last line.
    #[allow(clippy::too_many_arguments)]
    pub fn selective_scan(
        &mut self,
        u: Var,
        dt: Var,
        a: Var,
        b: Var,
        c: Var,
        d: Var,
        h0: &Tensor,
    ) -> Result<(Var, Tensor)> {
        let su = self.shape(u).to_vec();
        if su.len() != 3 {
            return Err(Error::invalid("selective_scan", format!("input must be rank 3, got {su:?}")));
        }
        let (l, n, ch) = (su[0], su[1], su[2]);
        let sa = self.shape(a).to_vec();
        if sa.len() != 2 || sa[0] != ch {
            return Err(Error::shape("selective_scan", &su, &sa));
        }
        let s = sa[1];
        for (v, want) in [(dt, vec![l, n, ch]), (b, vec![l, n, s]), (c, vec![l, n, s]), (d, vec![ch])] {
            if self.shape(v) != want.as_slice() {
                return Err(Error::shape("selective_scan", self.shape(v), &want));
            }
        }
        if h0.shape() != [n, ch, s] {
            return Err(Error::shape("selective_scan", h0.shape(), &[n, ch, s]));
        }
        let dims = kernels::ScanDims {
            lines: l,
            pixels: n,
            ch,
            state: s,
        };
        let out = kernels::selective_scan(
            self.value(u).data(),
            self.value(dt).data(),
            self.value(a).data(),
            self.value(b).data(),
            self.value(c).data(),
            self.value(d).data(),
            h0.data(),
            &dims,
        );
        let hsz = n * ch * s;
        let needs_grad = [u, dt, a, b, c, d].iter().any(|&v| self.requires_grad(v));
        let mut states = out.states;
        let last_data = if !needs_grad && l == 1 {
            std::mem::take(&mut states)
        } else {
            states[(l - 1) * hsz..].to_vec()
        };
        let last = Tensor::from_parts(vec![n, ch, s], last_data);
        check_finite("selective_scan", &last)?;
        let value = Tensor::from_parts(su, out.y);
        let op = if needs_grad {
            Op::SelectiveScan {
                u,
                dt,
                a,
                b,
                c,
                d,
                h0: h0.clone(),
                states,
            }
        } else {
            Op::Leaf
        };
        let y = self.push("selective_scan", value, op, &[u, dt, a, b, c, d])?;
        Ok((y, last))
    }

    /// Drops recorded activations; later `backward` calls fail.
    pub fn release(&mut self) {
        for node in &mut self.nodes {
            node.op = Op::Leaf;
        }
        self.consumed = true;
    }

    pub fn is_consumed(&self) -> bool {
        self.consumed
    }
}

pub(crate) fn population_variance(xs: &[f64]) -> f64 {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    xs.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n
}
