use super::broadcast::{self, Plan};
use super::kernels::{self, ScanDims};
use super::{split_axis, Graph, Op, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Gradients of one scalar with respect to every node that requires one.
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient for `v`; zeros if `v` did not influence the loss.
    pub fn get(&self, v: Var) -> Tensor {
        match &self.grads[v.0] {
            Some(g) => Tensor::from_parts(self.shapes[v.0].clone(), g.clone()),
            None => Tensor::zeros(&self.shapes[v.0]),
        }
    }

    /// Whether any gradient reached `v`.
    pub fn reached(&self, v: Var) -> bool {
        self.grads[v.0].is_some()
    }
}

fn acc<'a>(grads: &'a mut [Option<Vec<f64>>], g: &Graph, v: Var) -> Option<&'a mut Vec<f64>> {
    if !g.nodes[v.0].requires_grad {
        return None;
    }
    let n = g.nodes[v.0].value.len();
    Some(grads[v.0].get_or_insert_with(|| vec![0.0; n]))
}

fn reduce_into(target: &mut [f64], plan: &Plan, gout: &[f64], side_b: bool, f: impl Fn(usize, usize, usize) -> f64) {
    broadcast::for_each(plan, gout.len(), |i, ia, ib| {
        let idx = if side_b { ib } else { ia };
        target[idx] += f(i, ia, ib);
    });
}

impl Graph {
    /// Reverse-mode gradients of the scalar `loss`.
    ///
    /// Does not modify the graph, so repeated calls give bitwise-identical
    /// results until [`Graph::release`] is called.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.consumed {
            return Err(Error::Backward("graph already consumed".into()));
        }
        if self.value(loss).len() != 1 {
            return Err(Error::Backward(format!(
                "loss must be scalar, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        if self.nodes[loss.0].requires_grad {
            grads[loss.0] = Some(vec![1.0]);
        }
        for idx in (0..=loss.0).rev() {
            let Some(gout) = grads[idx].take() else { continue };
            self.backprop_node(idx, &gout, &mut grads)?;
            grads[idx] = Some(gout);
        }
        Ok(Gradients {
            grads,
            shapes: self.nodes.iter().map(|n| n.value.shape().to_vec()).collect(),
        })
    }

    fn backprop_node(&self, idx: usize, gout: &[f64], grads: &mut [Option<Vec<f64>>]) -> Result<()> {
        let node = &self.nodes[idx];
        let out = node.value.data();
        let val = |v: Var| self.nodes[v.0].value.data();
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b, plan) | Op::Sub(a, b, plan) => {
                let sign = if matches!(node.op, Op::Sub(..)) { -1.0 } else { 1.0 };
                if let Some(ga) = acc(grads, self, *a) {
                    reduce_into(ga, plan, gout, false, |i, _, _| gout[i]);
                }
                if let Some(gb) = acc(grads, self, *b) {
                    reduce_into(gb, plan, gout, true, |i, _, _| sign * gout[i]);
                }
            }
            Op::Mul(a, b, plan) => {
                let (da, db) = (val(*a), val(*b));
                if let Some(ga) = acc(grads, self, *a) {
                    reduce_into(ga, plan, gout, false, |i, _, ib| gout[i] * db[ib]);
                }
                if let Some(gb) = acc(grads, self, *b) {
                    reduce_into(gb, plan, gout, true, |i, ia, _| gout[i] * da[ia]);
                }
            }
            Op::Scale(a, s) => {
                if let Some(ga) = acc(grads, self, *a) {
                    ga.iter_mut().zip(gout).for_each(|(g, &o)| *g += o * s);
                }
            }
            Op::Exp(a) => {
                if let Some(ga) = acc(grads, self, *a) {
                    for i in 0..gout.len() {
                        ga[i] += gout[i] * out[i];
                    }
                }
            }
            Op::Silu(a) => {
                let x = val(*a);
                if let Some(ga) = acc(grads, self, *a) {
                    for i in 0..gout.len() {
                        let s = kernels::sigmoid(x[i]);
                        ga[i] += gout[i] * s * (1.0 + x[i] * (1.0 - s));
                    }
                }
            }
            Op::Sigmoid(a) => {
                if let Some(ga) = acc(grads, self, *a) {
                    for i in 0..gout.len() {
                        ga[i] += gout[i] * out[i] * (1.0 - out[i]);
                    }
                }
            }
            Op::Softplus(a) => {
                let x = val(*a);
                if let Some(ga) = acc(grads, self, *a) {
                    for i in 0..gout.len() {
                        ga[i] += gout[i] * kernels::sigmoid(x[i]);
                    }
                }
            }
            Op::Tanh(a) => {
                if let Some(ga) = acc(grads, self, *a) {
                    for i in 0..gout.len() {
                        ga[i] += gout[i] * (1.0 - out[i] * out[i]);
                    }
                }
            }
            Op::Relu(a) => {
                let x = val(*a);
                if let Some(ga) = acc(grads, self, *a) {
                    for i in 0..gout.len() {
                        if x[i] > 0.0 {
                            ga[i] += gout[i];
                        }
                    }
                }
            }
            Op::MatMul(a, b) => {
                let sb = self.shape(*b);
                let (k, n) = (sb[0], sb[1]);
                let m = val(*a).len() / k;
                let (da, db) = (val(*a), val(*b));
                if let Some(ga) = acc(grads, self, *a) {
                    kernels::matmul_grad_a(gout, db, ga, m, k, n);
                }
                if let Some(gb) = acc(grads, self, *b) {
                    kernels::matmul_grad_b(da, gout, gb, m, k, n);
                }
            }
            Op::Bmm(a, b) => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (bs, m, k, n) = (sa[0], sa[1], sa[2], sb[2]);
                let (da, db) = (val(*a), val(*b));
                if let Some(ga) = acc(grads, self, *a) {
                    for i in 0..bs {
                        kernels::matmul_grad_a(
                            &gout[i * m * n..(i + 1) * m * n],
                            &db[i * k * n..(i + 1) * k * n],
                            &mut ga[i * m * k..(i + 1) * m * k],
                            m,
                            k,
                            n,
                        );
                    }
                }
                if let Some(gb) = acc(grads, self, *b) {
                    for i in 0..bs {
                        kernels::matmul_grad_b(
                            &da[i * m * k..(i + 1) * m * k],
                            &gout[i * m * n..(i + 1) * m * n],
                            &mut gb[i * k * n..(i + 1) * k * n],
                            m,
                            k,
                            n,
                        );
                    }
                }
            }
            Op::TransposeLast2(a) => {
                let s = self.shape(*a);
                let (r, c) = (s[s.len() - 2], s[s.len() - 1]);
                if let Some(ga) = acc(grads, self, *a) {
                    let batch = ga.len() / (r * c);
                    for b in 0..batch {
                        for i in 0..r {
                            for j in 0..c {
                                ga[b * r * c + i * c + j] += gout[b * r * c + j * r + i];
                            }
                        }
                    }
                }
            }
            Op::Conv1d(x, w, geom) => {
                let need_x = self.nodes[x.0].requires_grad;
                let need_w = self.nodes[w.0].requires_grad;
                let mut gx = need_x.then(|| vec![0.0; val(*x).len()]);
                let mut gw = need_w.then(|| vec![0.0; val(*w).len()]);
                kernels::conv1d_grad(val(*x), val(*w), gout, geom, gx.as_deref_mut(), gw.as_deref_mut());
                add_into(grads, self, *x, gx);
                add_into(grads, self, *w, gw);
            }
            Op::ConvTranspose1d(x, w, geom) => {
                let need_x = self.nodes[x.0].requires_grad;
                let need_w = self.nodes[w.0].requires_grad;
                let mut gx = need_x.then(|| vec![0.0; val(*x).len()]);
                let mut gw = need_w.then(|| vec![0.0; val(*w).len()]);
                kernels::conv_transpose1d_grad(val(*x), val(*w), gout, geom, gx.as_deref_mut(), gw.as_deref_mut());
                add_into(grads, self, *x, gx);
                add_into(grads, self, *w, gw);
            }
            Op::Softmax(a) => {
                let width = *self.shape(*a).last().unwrap();
                if let Some(ga) = acc(grads, self, *a) {
                    for r in 0..gout.len() / width {
                        let (o, g) = (&out[r * width..(r + 1) * width], &gout[r * width..(r + 1) * width]);
                        let dot: f64 = o.iter().zip(g).map(|(p, q)| p * q).sum();
                        for j in 0..width {
                            ga[r * width + j] += o[j] * (g[j] - dot);
                        }
                    }
                }
            }
            Op::LayerNorm(a, stats) => {
                let width = *self.shape(*a).last().unwrap();
                let nf = width as f64;
                if let Some(ga) = acc(grads, self, *a) {
                    for (r, &(_, rstd)) in stats.iter().enumerate() {
                        let xh = &out[r * width..(r + 1) * width];
                        let g = &gout[r * width..(r + 1) * width];
                        let mg = g.iter().sum::<f64>() / nf;
                        let mgx = g.iter().zip(xh).map(|(p, q)| p * q).sum::<f64>() / nf;
                        for j in 0..width {
                            ga[r * width + j] += rstd * (g[j] - mg - xh[j] * mgx);
                        }
                    }
                }
            }
            Op::SumAll(a) => {
                if let Some(ga) = acc(grads, self, *a) {
                    ga.iter_mut().for_each(|g| *g += gout[0]);
                }
            }
            Op::MeanAll(a) => {
                if let Some(ga) = acc(grads, self, *a) {
                    let s = gout[0] / ga.len() as f64;
                    ga.iter_mut().for_each(|g| *g += s);
                }
            }
            Op::MeanAxis(a, axis) | Op::VarianceAxis(a, axis) => {
                let (outer, n, inner) = split_axis(self.shape(*a), *axis);
                let is_var = matches!(node.op, Op::VarianceAxis(..));
                let x = val(*a);
                if let Some(ga) = acc(grads, self, *a) {
                    let nf = n as f64;
                    for o in 0..outer {
                        for i in 0..inner {
                            let g = gout[o * inner + i];
                            if !is_var {
                                for j in 0..n {
                                    ga[(o * n + j) * inner + i] += g / nf;
                                }
                                continue;
                            }
                            let mean = (0..n).map(|j| x[(o * n + j) * inner + i]).sum::<f64>() / nf;
                            for j in 0..n {
                                let at = (o * n + j) * inner + i;
                                ga[at] += g * 2.0 * (x[at] - mean) / nf;
                            }
                        }
                    }
                }
            }
            Op::MaxAxis(a, axis, arg) => {
                let (outer, n, inner) = split_axis(self.shape(*a), *axis);
                if let Some(ga) = acc(grads, self, *a) {
                    for o in 0..outer {
                        for i in 0..inner {
                            let j = arg[o * inner + i];
                            ga[(o * n + j) * inner + i] += gout[o * inner + i];
                        }
                    }
                }
            }
            Op::Slice(a, axis, start) => {
                let (outer, n, inner) = split_axis(self.shape(*a), *axis);
                let len = node.value.shape()[*axis];
                if let Some(ga) = acc(grads, self, *a) {
                    for o in 0..outer {
                        let dst = (o * n + start) * inner;
                        let src = o * len * inner;
                        for t in 0..len * inner {
                            ga[dst + t] += gout[src + t];
                        }
                    }
                }
            }
            Op::Concat(xs, axis) => {
                let (outer, total, inner) = split_axis(node.value.shape(), *axis);
                let mut offset = 0;
                for &x in xs {
                    let n = self.shape(x)[*axis];
                    if let Some(gx) = acc(grads, self, x) {
                        for o in 0..outer {
                            let src = (o * total + offset) * inner;
                            for t in 0..n * inner {
                                gx[o * n * inner + t] += gout[src + t];
                            }
                        }
                    }
                    offset += n;
                }
            }
            Op::Pad(a, axis, before) => {
                let (outer, n, inner) = split_axis(self.shape(*a), *axis);
                let m = node.value.shape()[*axis];
                if let Some(ga) = acc(grads, self, *a) {
                    for o in 0..outer {
                        let src = (o * m + before) * inner;
                        for t in 0..n * inner {
                            ga[o * n * inner + t] += gout[src + t];
                        }
                    }
                }
            }
            Op::Reshape(a) => {
                if let Some(ga) = acc(grads, self, *a) {
                    ga.iter_mut().zip(gout).for_each(|(g, &o)| *g += o);
                }
            }
            Op::CausalConvLines { x, w, history } => {
                let s = self.shape(*x);
                let (lines, plane, ch) = (s[0], s[1] * s[2], s[2]);
                let k = self.shape(*w)[1];
                let (xd, wd) = (val(*x), val(*w));
                let hd = history.data();
                let at = |e: usize, i: usize| if e < k - 1 { hd[e * plane + i] } else { xd[(e - (k - 1)) * plane + i] };
                if let Some(gw) = acc(grads, self, *w) {
                    for l in 0..lines {
                        for i in 0..plane {
                            let g = gout[l * plane + i];
                            for j in 0..k {
                                gw[(i % ch) * k + j] += g * at(l + j, i);
                            }
                        }
                    }
                }
                if let Some(gx) = acc(grads, self, *x) {
                    for l in 0..lines {
                        for i in 0..plane {
                            let g = gout[l * plane + i];
                            for j in 0..k {
                                let e = l + j;
                                if e >= k - 1 {
                                    gx[(e - (k - 1)) * plane + i] += g * wd[(i % ch) * k + j];
                                }
                            }
                        }
                    }
                }
            }
            Op::SelectiveScan {
                u,
                dt,
                a,
                b,
                c,
                d,
                h0,
                states,
            } => {
                let su = self.shape(*u);
                let dims = ScanDims {
                    lines: su[0],
                    pixels: su[1],
                    ch: su[2],
                    state: self.shape(*a)[1],
                };
                let g = kernels::selective_scan_grad(
                    val(*u),
                    val(*dt),
                    val(*a),
                    val(*b),
                    val(*c),
                    val(*d),
                    h0.data(),
                    states,
                    gout,
                    &dims,
                );
                add_into(grads, self, *u, Some(g.u));
                add_into(grads, self, *dt, Some(g.dt));
                add_into(grads, self, *a, Some(g.a));
                add_into(grads, self, *b, Some(g.b));
                add_into(grads, self, *c, Some(g.c));
                add_into(grads, self, *d, Some(g.d));
            }
        }
        Ok(())
    }
}

fn add_into(grads: &mut [Option<Vec<f64>>], g: &Graph, v: Var, delta: Option<Vec<f64>>) {
    let Some(delta) = delta else { return };
    if let Some(target) = acc(grads, g, v) {
        target.iter_mut().zip(delta).for_each(|(t, d)| *t += d);
    }
}
