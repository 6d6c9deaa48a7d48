//! Spatially 1-D layers operating on channels-last lines `[..., pixels, ch]`.
//!
//! Leading axes are treated as a batch of independent lines, so a single
//! line and a stack of lines go through exactly the same arithmetic.
//!
//! FLOP counts follow the usual convention of two operations per
//! multiply-accumulate; bias additions and elementwise work are not counted.
//! `rate` is the number of positions at the layer's resolution per
//! full-resolution pixel.

use rand::Rng;

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::params::{Bound, ParamId, ParamKind, ParamStore};
use crate::tensor::Tensor;

fn kaiming(shape: &[usize], fan_in: usize, rng: &mut impl Rng) -> Tensor {
    let bound = 1.0 / (fan_in as f64).sqrt();
    Tensor::uniform(shape, -bound, bound, rng)
}

fn pixel_axis(g: &Graph, x: Var) -> Result<usize> {
    let nd = g.shape(x).len();
    if nd < 2 {
        return Err(Error::invalid("layer", format!("expected [..., pixels, ch], got {:?}", g.shape(x))));
    }
    Ok(nd - 2)
}

fn check_channels(op: &'static str, g: &Graph, x: Var, ch: usize) -> Result<()> {
    let s = g.shape(x);
    if s.last() != Some(&ch) {
        return Err(Error::shape(op, s, &[ch]));
    }
    Ok(())
}

/// Dense map over the channel axis, weight stored `[d_in, d_out]`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub d_in: usize,
    pub d_out: usize,
}

impl Linear {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        name: &str,
        d_in: usize,
        d_out: usize,
        bias: bool,
    ) -> Self {
        let w = store.add(format!("{name}.w"), ParamKind::LinearWeight, kaiming(&[d_in, d_out], d_in, rng));
        let b = bias.then(|| store.add(format!("{name}.b"), ParamKind::Bias, Tensor::zeros(&[d_out])));
        Linear { w, b, d_in, d_out }
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, x: Var) -> Result<Var> {
        check_channels("linear", g, x, self.d_in)?;
        let y = g.matmul(x, p[self.w])?;
        match self.b {
            Some(b) => g.add(y, p[b]),
            None => Ok(y),
        }
    }

    pub fn flops(&self, rate: f64) -> f64 {
        2.0 * (self.d_in * self.d_out) as f64 * rate
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ConvMode {
    /// Stride 1 with zero "same" padding.
    Same,
    /// Kernel 2, stride 2; odd lengths are zero-padded on the right, so the
    /// output length is `ceil(len / 2)`.
    Down,
    /// Transposed kernel 2, stride 2; doubles the length.
    Up,
}

/// 1-D convolution over the pixel axis.
///
/// Plain kernels are stored `[c_out, c_in / groups, k]`, transposed ones
/// `[c_in, c_out, k]`.
#[derive(Clone, Debug)]
pub struct Conv1d {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub c_in: usize,
    pub c_out: usize,
    pub k: usize,
    pub groups: usize,
    pub mode: ConvMode,
}

impl Conv1d {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        name: &str,
        c_in: usize,
        c_out: usize,
        k: usize,
        groups: usize,
        mode: ConvMode,
        bias: bool,
    ) -> Self {
        assert!(c_in.is_multiple_of(groups) && c_out.is_multiple_of(groups), "channels not divisible by groups");
        let k = match mode {
            ConvMode::Same => k,
            ConvMode::Down | ConvMode::Up => 2,
        };
        let (shape, fan_in) = match mode {
            ConvMode::Up => ([c_in, c_out, k], c_in * k),
            _ => ([c_out, c_in / groups, k], c_in / groups * k),
        };
        let w = store.add(format!("{name}.w"), ParamKind::ConvWeight, kaiming(&shape, fan_in, rng));
        let b = bias.then(|| store.add(format!("{name}.b"), ParamKind::Bias, Tensor::zeros(&[c_out])));
        Conv1d {
            w,
            b,
            c_in,
            c_out,
            k,
            groups,
            mode,
        }
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, x: Var) -> Result<Var> {
        check_channels("conv1d", g, x, self.c_in)?;
        let ax = pixel_axis(g, x)?;
        let len = g.shape(x)[ax];
        let y = match self.mode {
            ConvMode::Same => {
                let left = (self.k - 1) / 2;
                g.conv1d(x, p[self.w], 1, left, self.k - 1 - left, self.groups)?
            }
            ConvMode::Down => g.conv1d(x, p[self.w], 2, 0, len % 2, self.groups)?,
            ConvMode::Up => g.conv_transpose1d(x, p[self.w], 2)?,
        };
        match self.b {
            Some(b) => g.add(y, p[b]),
            None => Ok(y),
        }
    }

    /// `rate` refers to the output resolution.
    pub fn flops(&self, rate: f64) -> f64 {
        let macs = match self.mode {
            ConvMode::Same | ConvMode::Down => self.c_in / self.groups * self.k * self.c_out,
            // Each output position of a stride-2, kernel-2 transpose gets one tap.
            ConvMode::Up => self.c_in * self.c_out * self.k / 2,
        };
        2.0 * macs as f64 * rate
    }
}

/// Normalization over channels with a learnable scale and shift.
#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub scale: ParamId,
    pub shift: ParamId,
    pub ch: usize,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, ch: usize) -> Self {
        LayerNorm {
            scale: store.add(format!("{name}.scale"), ParamKind::NormScale, Tensor::full(&[ch], 1.0)),
            shift: store.add(format!("{name}.shift"), ParamKind::NormShift, Tensor::zeros(&[ch])),
            ch,
        }
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, x: Var) -> Result<Var> {
        check_channels("layernorm", g, x, self.ch)?;
        let n = g.layernorm(x)?;
        let s = g.mul(n, p[self.scale])?;
        g.add(s, p[self.shift])
    }
}

/// Channel attention gate: average- and max-pooled descriptors over the
/// pixels pass through a shared squeeze/excite MLP, are summed and squashed
/// by a sigmoid into per-channel weights in (0, 1).
#[derive(Clone, Debug)]
pub struct ChannelAttention {
    pub squeeze: Linear,
    pub excite: Linear,
}

impl ChannelAttention {
    pub const REDUCTION: usize = 4;

    pub fn new(store: &mut ParamStore, rng: &mut impl Rng, name: &str, ch: usize) -> Self {
        let hidden = (ch / Self::REDUCTION).max(1);
        ChannelAttention {
            squeeze: Linear::new(store, rng, &format!("{name}.squeeze"), ch, hidden, true),
            excite: Linear::new(store, rng, &format!("{name}.excite"), hidden, ch, true),
        }
    }

    pub fn weights(&self, g: &mut Graph, p: &Bound, x: Var) -> Result<Var> {
        let ax = pixel_axis(g, x)?;
        let avg = g.mean_axis(x, ax)?;
        let max = g.max_axis(x, ax)?;
        let mut branches = [avg, max];
        for v in &mut branches {
            let h = self.squeeze.forward(g, p, *v)?;
            let h = g.relu(h)?;
            *v = self.excite.forward(g, p, h)?;
        }
        let s = g.add(branches[0], branches[1])?;
        g.sigmoid(s)
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, x: Var) -> Result<Var> {
        let w = self.weights(g, p, x)?;
        g.mul(x, w)
    }

    pub fn flops(&self, n_c: usize) -> f64 {
        // Two pooled descriptors per line, amortized over its pixels.
        2.0 * (self.squeeze.flops(1.0) + self.excite.flops(1.0)) / n_c as f64
    }
}

/// Splits the channels in half and multiplies the halves.
pub fn simple_gate(g: &mut Graph, x: Var) -> Result<Var> {
    let s = g.shape(x).to_vec();
    let ch = *s.last().ok_or_else(|| Error::invalid("simple_gate", "scalar input"))?;
    if ch % 2 != 0 {
        return Err(Error::shape("simple_gate", &s, &[2]));
    }
    let ax = s.len() - 1;
    let a = g.slice(x, ax, 0, ch / 2)?;
    let b = g.slice(x, ax, ch / 2, ch / 2)?;
    g.mul(a, b)
}

/// Simplified channel attention: a linear map of the pixel-averaged
/// descriptor rescales every channel.
#[derive(Clone, Debug)]
pub struct SimplifiedChannelAttention {
    pub proj: Linear,
}

impl SimplifiedChannelAttention {
    pub fn new(store: &mut ParamStore, rng: &mut impl Rng, name: &str, ch: usize) -> Self {
        SimplifiedChannelAttention {
            proj: Linear::new(store, rng, name, ch, ch, true),
        }
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, x: Var) -> Result<Var> {
        let ax = pixel_axis(g, x)?;
        let avg = g.mean_axis(x, ax)?;
        let w = self.proj.forward(g, p, avg)?;
        g.mul(x, w)
    }

    pub fn flops(&self, n_c: usize) -> f64 {
        self.proj.flops(1.0) / n_c as f64
    }
}

/// Residual block made of a spatial-mixing half (norm, pointwise expand,
/// depthwise k=3, gate, simplified channel attention, pointwise) and a
/// channel-mixing half (norm, pointwise expand, gate, pointwise), each added
/// back with a zero-initialized per-channel scale.
#[derive(Clone, Debug)]
pub struct DascBlock {
    pub ch: usize,
    pub norm1: LayerNorm,
    pub expand1: Conv1d,
    pub depthwise: Conv1d,
    pub sca: SimplifiedChannelAttention,
    pub project1: Conv1d,
    pub beta: ParamId,
    pub norm2: LayerNorm,
    pub expand2: Conv1d,
    pub project2: Conv1d,
    pub gamma: ParamId,
    /// Replaces normalization, gating and channel attention by identities
    /// (the gate keeps the first half). Only meant for testing.
    pub linear: bool,
}

impl DascBlock {
    pub fn new(store: &mut ParamStore, rng: &mut impl Rng, name: &str, ch: usize) -> Self {
        let c2 = 2 * ch;
        let pw = |store: &mut ParamStore, rng: &mut _, n: &str, cin, cout| {
            Conv1d::new(store, rng, &format!("{name}.{n}"), cin, cout, 1, 1, ConvMode::Same, true)
        };
        let norm1 = LayerNorm::new(store, &format!("{name}.norm1"), ch);
        let expand1 = pw(store, rng, "expand1", ch, c2);
        let depthwise = Conv1d::new(store, rng, &format!("{name}.dw"), c2, c2, 3, c2, ConvMode::Same, true);
        let sca = SimplifiedChannelAttention::new(store, rng, &format!("{name}.sca"), ch);
        let project1 = pw(store, rng, "project1", ch, ch);
        let beta = store.add(format!("{name}.beta"), ParamKind::ResidualScale, Tensor::zeros(&[ch]));
        let norm2 = LayerNorm::new(store, &format!("{name}.norm2"), ch);
        let expand2 = pw(store, rng, "expand2", ch, c2);
        let project2 = pw(store, rng, "project2", ch, ch);
        let gamma = store.add(format!("{name}.gamma"), ParamKind::ResidualScale, Tensor::zeros(&[ch]));
        DascBlock {
            ch,
            norm1,
            expand1,
            depthwise,
            sca,
            project1,
            beta,
            norm2,
            expand2,
            project2,
            gamma,
            linear: false,
        }
    }

    fn gate(&self, g: &mut Graph, x: Var) -> Result<Var> {
        if self.linear {
            let ax = g.shape(x).len() - 1;
            g.slice(x, ax, 0, self.ch)
        } else {
            simple_gate(g, x)
        }
    }

    /// Spatial-mixing branch before its residual scale.
    pub fn spatial_branch(&self, g: &mut Graph, p: &Bound, x: Var) -> Result<Var> {
        let t = if self.linear { x } else { self.norm1.forward(g, p, x)? };
        let t = self.expand1.forward(g, p, t)?;
        let t = self.depthwise.forward(g, p, t)?;
        let t = self.gate(g, t)?;
        let t = if self.linear { t } else { self.sca.forward(g, p, t)? };
        self.project1.forward(g, p, t)
    }

    /// Channel-mixing branch before its residual scale.
    pub fn channel_branch(&self, g: &mut Graph, p: &Bound, y: Var) -> Result<Var> {
        let t = if self.linear { y } else { self.norm2.forward(g, p, y)? };
        let t = self.expand2.forward(g, p, t)?;
        let t = self.gate(g, t)?;
        self.project2.forward(g, p, t)
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, x: Var) -> Result<Var> {
        check_channels("dasc", g, x, self.ch)?;
        let t = self.spatial_branch(g, p, x)?;
        let t = g.mul(t, p[self.beta])?;
        let y = g.add(x, t)?;
        let t = self.channel_branch(g, p, y)?;
        let t = g.mul(t, p[self.gamma])?;
        g.add(y, t)
    }

    pub fn flops(&self, rate: f64, n_c: usize) -> f64 {
        self.expand1.flops(rate)
            + self.depthwise.flops(rate)
            + self.sca.flops(n_c)
            + self.project1.flops(rate)
            + self.expand2.flops(rate)
            + self.project2.flops(rate)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn run(store: &ParamStore, x: &Tensor, f: impl Fn(&mut Graph, &Bound, Var) -> Result<Var>) -> Tensor {
        let mut g = Graph::new();
        let p = store.bind(&mut g, false).unwrap();
        let xv = g.constant(x.clone()).unwrap();
        let y = f(&mut g, &p, xv).unwrap();
        g.value(y).clone()
    }

    /// Checks gradients with respect to the input and every parameter.
    fn gradcheck_layer(store: &ParamStore, x: &Tensor, f: impl Fn(&mut Graph, &Bound, Var) -> Result<Var>) -> f64 {
        let mut inputs = vec![x.clone()];
        inputs.extend(store.entries().iter().map(|e| (*e.value).clone()));
        let report = gradcheck::check(
            &inputs,
            |g, v| {
                let p = crate::params::Bound::from_vars(v[1..].to_vec());
                let y = f(g, &p, v[0])?;
                let r = Tensor::from_fn(g.shape(y), |i| ((i * 7919) % 13) as f64 / 13.0 - 0.4);
                let r = g.constant(r)?;
                let m = g.mul(y, r)?;
                g.sum(m)
            },
            1e-5,
            Some(24),
        )
        .unwrap();
        report.max_rel_err
    }

    #[test]
    fn identity_pointwise_conv() {
        let mut s = ParamStore::new();
        let c = Conv1d::new(&mut s, &mut rng(1), "c", 1, 1, 1, 1, ConvMode::Same, true);
        s.set(c.w, Tensor::full(&[1, 1, 1], 1.0)).unwrap();
        let x = Tensor::uniform(&[1, 6, 1], -1.0, 1.0, &mut rng(2));
        assert!(run(&s, &x, |g, p, v| c.forward(g, p, v)).bitwise_eq(&x));
    }

    #[test]
    fn stride_two_shape_arithmetic() {
        let mut s = ParamStore::new();
        let d = Conv1d::new(&mut s, &mut rng(1), "d", 2, 3, 0, 1, ConvMode::Down, true);
        let u = Conv1d::new(&mut s, &mut rng(1), "u", 3, 2, 0, 1, ConvMode::Up, true);
        let x = Tensor::uniform(&[1, 8, 2], -1.0, 1.0, &mut rng(2));
        assert_eq!(run(&s, &x, |g, p, v| d.forward(g, p, v)).shape(), [1, 4, 3]);
        let x = Tensor::uniform(&[1, 4, 3], -1.0, 1.0, &mut rng(2));
        assert_eq!(run(&s, &x, |g, p, v| u.forward(g, p, v)).shape(), [1, 8, 2]);
        let x = Tensor::uniform(&[1, 7, 2], -1.0, 1.0, &mut rng(2));
        assert_eq!(run(&s, &x, |g, p, v| d.forward(g, p, v)).shape(), [1, 4, 3]);
    }

    #[test]
    fn channel_mismatch_is_a_shape_error() {
        let mut s = ParamStore::new();
        let c = Conv1d::new(&mut s, &mut rng(1), "c", 3, 2, 3, 1, ConvMode::Same, true);
        let mut g = Graph::new();
        let p = s.bind(&mut g, false).unwrap();
        let x = g.constant(Tensor::zeros(&[1, 4, 2])).unwrap();
        assert!(matches!(c.forward(&mut g, &p, x), Err(Error::Shape { .. })));
    }

    #[test]
    fn hand_convolution() {
        let mut s = ParamStore::new();
        let c = Conv1d::new(&mut s, &mut rng(1), "c", 1, 1, 3, 1, ConvMode::Same, false);
        s.set(c.w, Tensor::new(&[1, 1, 3], vec![0.0, 0.0, 1.0]).unwrap()).unwrap();
        let x = Tensor::new(&[1, 4, 1], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        // Oracle: enumerate positions t-1, t, t+1 with zero padding.
        let w = [0.0, 0.0, 1.0];
        let xs = [1.0, 2.0, 3.0, 4.0];
        let expect: Vec<f64> = (0..4)
            .map(|t: i64| {
                (0..3)
                    .map(|j| {
                        let p = t + j as i64 - 1;
                        if (0..4).contains(&p) {
                            w[j] * xs[p as usize]
                        } else {
                            0.0
                        }
                    })
                    .sum()
            })
            .collect();
        assert_eq!(expect, vec![2.0, 3.0, 4.0, 0.0]);
        assert_eq!(run(&s, &x, |g, p, v| c.forward(g, p, v)).data(), expect.as_slice());
    }

    #[test]
    fn simple_gate_cases() {
        let mut g = Graph::new();
        let mut r = rng(3);
        let first = Tensor::uniform(&[1, 4, 3], -1.0, 1.0, &mut r);
        let ones = g.constant(Tensor::full(&[1, 4, 3], 1.0)).unwrap();
        let zeros = g.constant(Tensor::zeros(&[1, 4, 3])).unwrap();
        let f = g.constant(first.clone()).unwrap();
        let with_ones = g.concat(&[f, ones], 2).unwrap();
        let with_zeros = g.concat(&[f, zeros], 2).unwrap();
        let a = simple_gate(&mut g, with_ones).unwrap();
        let b = simple_gate(&mut g, with_zeros).unwrap();
        assert!(g.value(a).bitwise_eq(&first));
        assert!(g.value(b).data().iter().all(|&v| v == 0.0));

        let x = Tensor::uniform(&[1, 4, 6], -1.0, 1.0, &mut r);
        let xv = g.constant(x.clone()).unwrap();
        let y = simple_gate(&mut g, xv).unwrap();
        for n in 0..4 {
            for c in 0..3 {
                assert_eq!(g.value(y).at(&[0, n, c]), x.at(&[0, n, c]) * x.at(&[0, n, c + 3]));
            }
        }
        let odd = g.constant(Tensor::zeros(&[1, 4, 5])).unwrap();
        assert!(matches!(simple_gate(&mut g, odd), Err(Error::Shape { .. })));
    }

    #[test]
    fn zero_excite_weights_gate_at_one_half() {
        let mut s = ParamStore::new();
        let ca = ChannelAttention::new(&mut s, &mut rng(4), "ca", 8);
        s.set(ca.excite.w, Tensor::zeros(&[2, 8])).unwrap();
        let x = Tensor::uniform(&[1, 5, 8], -1.0, 1.0, &mut rng(5));
        let w = run(&s, &x, |g, p, v| ca.weights(g, p, v));
        assert!(w.data().iter().all(|&v| v == 0.5));
        let y = run(&s, &x, |g, p, v| ca.forward(g, p, v));
        assert_eq!(y.shape(), x.shape());
    }

    #[test]
    fn attention_weights_lie_in_unit_interval() {
        let mut s = ParamStore::new();
        let ca = ChannelAttention::new(&mut s, &mut rng(6), "ca", 8);
        let x = Tensor::uniform(&[3, 5, 8], -4.0, 4.0, &mut rng(7));
        let w = run(&s, &x, |g, p, v| ca.weights(g, p, v));
        assert!(w.data().iter().all(|&v| v > 0.0 && v < 1.0));
    }

    #[test]
    fn fresh_dasc_block_is_identity() {
        let mut s = ParamStore::new();
        let b = DascBlock::new(&mut s, &mut rng(8), "b", 4);
        let x = Tensor::uniform(&[1, 8, 4], -1.0, 1.0, &mut rng(9));
        assert!(run(&s, &x, |g, p, v| b.forward(g, p, v)).bitwise_eq(&x));
    }

    fn randomize_scales(s: &mut ParamStore, rng: &mut ChaCha8Rng) {
        let ids: Vec<_> = s
            .entries()
            .iter()
            .enumerate()
            .filter(|(_, e)| e.kind != ParamKind::ConvWeight && e.kind != ParamKind::LinearWeight)
            .map(|(i, e)| (ParamId(i), e.value.shape().to_vec()))
            .collect();
        for (id, shape) in ids {
            s.set(id, Tensor::uniform(&shape, 0.2, 0.8, rng)).unwrap();
        }
    }

    #[test]
    fn linearized_dasc_is_homogeneous() {
        let mut s = ParamStore::new();
        let mut b = DascBlock::new(&mut s, &mut rng(10), "b", 4);
        b.linear = true;
        let ids: Vec<_> = s
            .entries()
            .iter()
            .enumerate()
            .filter(|(_, e)| e.kind == ParamKind::ResidualScale)
            .map(|(i, _)| ParamId(i))
            .collect();
        for id in ids {
            s.set(id, Tensor::full(&[4], 0.7)).unwrap();
        }
        // Bias-free: keep biases at their zero init.
        let x = Tensor::uniform(&[1, 8, 4], -1.0, 1.0, &mut rng(11));
        let fx = |x: &Tensor| {
            let y = run(&s, x, |g, p, v| b.forward(g, p, v));
            Tensor::new(x.shape(), y.data().iter().zip(x.data()).map(|(a, b)| a - b).collect()).unwrap()
        };
        let f1 = fx(&x);
        let f2 = fx(&x.map(|v| 2.0 * v));
        assert!(f1.max_abs() > 0.0);
        let doubled = f1.map(|v| 2.0 * v);
        assert!(f2.max_abs_diff(&doubled) < 1e-12);
    }

    #[test]
    fn layer_gradients_match_finite_differences() {
        let mut r = rng(12);
        let x = Tensor::uniform(&[1, 8, 4], -1.0, 1.0, &mut r);

        let mut s = ParamStore::new();
        let c = Conv1d::new(&mut s, &mut r, "c", 4, 6, 3, 1, ConvMode::Same, true);
        randomize_scales(&mut s, &mut r);
        assert!(gradcheck_layer(&s, &x, |g, p, v| c.forward(g, p, v)) <= 1e-4);

        let mut s = ParamStore::new();
        let c = Conv1d::new(&mut s, &mut r, "d", 4, 6, 0, 1, ConvMode::Down, true);
        randomize_scales(&mut s, &mut r);
        assert!(gradcheck_layer(&s, &x, |g, p, v| c.forward(g, p, v)) <= 1e-4);

        let mut s = ParamStore::new();
        let c = Conv1d::new(&mut s, &mut r, "u", 4, 2, 0, 1, ConvMode::Up, true);
        randomize_scales(&mut s, &mut r);
        assert!(gradcheck_layer(&s, &x, |g, p, v| c.forward(g, p, v)) <= 1e-4);

        let mut s = ParamStore::new();
        let l = Linear::new(&mut s, &mut r, "l", 4, 3, true);
        randomize_scales(&mut s, &mut r);
        assert!(gradcheck_layer(&s, &x, |g, p, v| l.forward(g, p, v)) <= 1e-4);

        let mut s = ParamStore::new();
        let n = LayerNorm::new(&mut s, "n", 4);
        randomize_scales(&mut s, &mut r);
        assert!(gradcheck_layer(&s, &x, |g, p, v| n.forward(g, p, v)) <= 1e-4);

        let mut s = ParamStore::new();
        let ca = ChannelAttention::new(&mut s, &mut r, "ca", 4);
        randomize_scales(&mut s, &mut r);
        assert!(gradcheck_layer(&s, &x, |g, p, v| ca.forward(g, p, v)) <= 1e-4);

        let mut s = ParamStore::new();
        let sca = SimplifiedChannelAttention::new(&mut s, &mut r, "sca", 4);
        randomize_scales(&mut s, &mut r);
        assert!(gradcheck_layer(&s, &x, |g, p, v| sca.forward(g, p, v)) <= 1e-4);

        assert!(gradcheck_layer(&ParamStore::new(), &x, |g, _, v| simple_gate(g, v)) <= 1e-4);

        let mut s = ParamStore::new();
        let b = DascBlock::new(&mut s, &mut r, "b", 4);
        randomize_scales(&mut s, &mut r);
        assert!(gradcheck_layer(&s, &x, |g, p, v| b.forward(g, p, v)) <= 1e-4);
    }

    #[test]
    fn lines_are_processed_independently() {
        let mut s = ParamStore::new();
        let b = DascBlock::new(&mut s, &mut rng(13), "b", 4);
        randomize_scales(&mut s, &mut rng(14));
        let x = Tensor::uniform(&[3, 8, 4], -1.0, 1.0, &mut rng(15));
        let all = run(&s, &x, |g, p, v| b.forward(g, p, v));
        for l in 0..3 {
            let one = run(&s, &x.slice_outer(l, 1).unwrap(), |g, p, v| b.forward(g, p, v));
            assert!(one.bitwise_eq(&all.slice_outer(l, 1).unwrap()));
        }
    }

    #[test]
    fn pointwise_flops_closed_form() {
        let mut s = ParamStore::new();
        let c = Conv1d::new(&mut s, &mut rng(1), "c", 2, 3, 1, 1, ConvMode::Same, true);
        assert_eq!(c.flops(1.0), 12.0);
    }
}
