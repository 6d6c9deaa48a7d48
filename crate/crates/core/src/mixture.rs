//! Attention aggregation of several denoisers' features, attention-based
//! fault screening and line-by-line mixture inference.

use std::collections::VecDeque;
use std::fmt;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::codec::{Reader, Writer};
use crate::denoiser::{Denoiser, DenoiserConfig, DenoiserStream};
use crate::error::{Error, Result};
use crate::nn::{Conv1d, ConvMode, Linear};
use crate::params::{Bound, ParamStore};
use crate::tensor::Tensor;

pub const DEFAULT_TAU: f64 = 0.01;

/// Shared key/query/value maps over the stacked member features and the
/// output convolution from features to a per-band noise estimate.
#[derive(Clone, Debug)]
pub struct Aggregator {
    features: usize,
    bands: usize,
    params: ParamStore,
    key: Linear,
    query: Linear,
    value: Linear,
    out: Conv1d,
}

impl Aggregator {
    pub fn new(features: usize, bands: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut s = ParamStore::new();
        let key = Linear::new(&mut s, &mut rng, "agg.key", features, features, false);
        let query = Linear::new(&mut s, &mut rng, "agg.query", features, features, false);
        let value = Linear::new(&mut s, &mut rng, "agg.value", features, features, false);
        let out = Conv1d::new(&mut s, &mut rng, "agg.out", features, bands, 3, 1, ConvMode::Same, true);
        Aggregator {
            features,
            bands,
            params: s,
            key,
            query,
            value,
            out,
        }
    }

    pub fn features(&self) -> usize {
        self.features
    }

    pub fn bands(&self) -> usize {
        self.bands
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn set_params(&mut self, params: ParamStore) -> Result<()> {
        self.params.check_layout(&params)?;
        self.params = params;
        Ok(())
    }

    /// Zeroes the value map, so attention contributes nothing.
    pub fn zero_value_map(&mut self) {
        let f = self.features;
        self.params.set(self.value.w, Tensor::zeros(&[f, f])).unwrap();
    }

    /// Zeroes the output convolution, so the noise estimate is zero.
    pub fn zero_output(&mut self) {
        let shape = self.params.get(self.out.w).shape().to_vec();
        self.params.set(self.out.w, Tensor::zeros(&shape)).unwrap();
        self.params.set(self.out.b.unwrap(), Tensor::zeros(&[self.bands])).unwrap();
    }

    /// `y - conv(mean_d(attention(H)_d + h_d))` over the given member
    /// features, each `[lines, pixels, F]`; `y` is `[lines, pixels, bands]`.
    pub fn forward(&self, g: &mut Graph, p: &Bound, y: Var, feats: &[Var]) -> Result<Var> {
        let n_hat = self.noise_estimate(g, p, feats)?;
        if g.shape(y) != g.shape(n_hat) {
            return Err(Error::shape("aggregate", g.shape(y), g.shape(n_hat)));
        }
        g.sub(y, n_hat)
    }

    pub fn noise_estimate(&self, g: &mut Graph, p: &Bound, feats: &[Var]) -> Result<Var> {
        let first = *feats.first().ok_or(Error::AllFaulty { count: 0 })?;
        let s = g.shape(first).to_vec();
        if s.len() != 3 || s[2] != self.features {
            return Err(Error::shape("aggregate", &s, &[0, 0, self.features]));
        }
        let (l, n, f) = (s[0], s[1], s[2]);
        let d = feats.len();
        let mut stacked = Vec::with_capacity(d);
        for &h in feats {
            if g.shape(h) != s.as_slice() {
                return Err(Error::shape("aggregate", g.shape(h), &s));
            }
            stacked.push(g.reshape(h, &[l * n, 1, f])?);
        }
        let hs = if d == 1 { stacked[0] } else { g.concat(&stacked, 1)? };
        let k = self.key.forward(g, p, hs)?;
        let q = self.query.forward(g, p, hs)?;
        let v = self.value.forward(g, p, hs)?;
        let qt = g.transpose_last2(q)?;
        let scores = g.bmm(k, qt)?;
        let scores = g.scale(scores, 1.0 / (f as f64).sqrt())?;
        let attn = g.softmax(scores)?;
        let sa = g.bmm(attn, v)?;
        let z = g.add(sa, hs)?;
        let m = g.mean_axis(z, 1)?;
        let m = g.reshape(m, &[l, n, f])?;
        self.out.forward(g, p, m)
    }

    /// Per-pixel keys and queries of each member, `[member][pixel * F + j]`.
    fn project(&self, feats: &[&Tensor]) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
        let f = self.features;
        let wk = self.params.get(self.key.w).data();
        let wq = self.params.get(self.query.w).data();
        let apply = |x: &[f64], w: &[f64]| {
            let mut out = vec![0.0; x.len()];
            for (xr, or) in x.chunks_exact(f).zip(out.chunks_exact_mut(f)) {
                for (i, &xi) in xr.iter().enumerate() {
                    for (o, &wv) in or.iter_mut().zip(&w[i * f..(i + 1) * f]) {
                        *o += xi * wv;
                    }
                }
            }
            out
        };
        let ks = feats.iter().map(|t| apply(t.data(), wk)).collect();
        let qs = feats.iter().map(|t| apply(t.data(), wq)).collect();
        (ks, qs)
    }

    /// Diagonal of the per-pixel attention matrix among the members in
    /// `subset`, one series over pixels per subset entry, and the largest
    /// absolute scaled logit seen.
    fn diagonals(&self, ks: &[Vec<f64>], qs: &[Vec<f64>], subset: &[usize]) -> (Vec<Vec<f64>>, f64) {
        let f = self.features;
        let rows = ks[subset[0]].len() / f;
        let scale = 1.0 / (f as f64).sqrt();
        let mut diag = vec![vec![0.0; rows]; subset.len()];
        let mut logits = vec![0.0; subset.len()];
        let mut peak = 0.0f64;
        for r in 0..rows {
            for (a, &i) in subset.iter().enumerate() {
                let k = &ks[i][r * f..(r + 1) * f];
                for (lg, &j) in logits.iter_mut().zip(subset) {
                    *lg = k.iter().zip(&qs[j][r * f..(r + 1) * f]).map(|(x, y)| x * y).sum::<f64>() * scale;
                }
                let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let denom: f64 = logits.iter().map(|v| (v - max).exp()).sum();
                diag[a][r] = (logits[a] - max).exp() / denom;
                peak = logits.iter().fold(peak, |p, v| p.max(v.abs()));
            }
        }
        (diag, peak)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    Ok,
    Faulty,
}

impl fmt::Display for Verdict {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Verdict::Ok => "ok",
            Verdict::Faulty => "faulty",
        })
    }
}

/// Screening outcome for one line. Entries follow the order of the
/// screened member ids.
#[derive(Clone, Debug, PartialEq)]
pub struct FaultReport {
    pub members: Vec<usize>,
    /// Variance of each member's attention diagonal across pixels; NaN
    /// when the member produced non-finite features.
    pub variances: Vec<f64>,
    pub verdicts: Vec<Verdict>,
}

impl FaultReport {
    pub fn active(&self) -> Vec<usize> {
        self.members
            .iter()
            .zip(&self.verdicts)
            .filter(|(_, v)| **v == Verdict::Ok)
            .map(|(m, _)| *m)
            .collect()
    }

    pub fn any_faulty(&self) -> bool {
        self.verdicts.contains(&Verdict::Faulty)
    }
}

/// Screens member features by the spatial variance of each member's
/// diagonal attention weight.
///
/// `features[i]` is `None` when member `members[i]` produced non-finite
/// output; such members are faulty without further computation. The
/// variance is taken over all pixels of all lines in `features` (one line in
/// streaming use). Fails with [`Error::AllFaulty`] when nothing passes.
pub fn detect_faults(
    agg: &Aggregator,
    members: &[usize],
    features: &[Option<&Tensor>],
    tau: f64,
) -> Result<FaultReport> {
    let screen = Screen {
        tau,
        isolate: true,
    };
    let (variances, verdicts) = screen.run(agg, features, &mut None)?;
    let report = FaultReport {
        members: members.to_vec(),
        variances,
        verdicts,
    };
    if !members.is_empty() && report.active().is_empty() {
        return Err(Error::AllFaulty { count: members.len() });
    }
    Ok(report)
}

/// Diagonal history for windowed variance, one deque per member slot.
type DiagHistory = Option<(usize, Vec<VecDeque<Vec<f64>>>)>;

/// Above this many usable members the isolation pass drops members greedily
/// instead of trying every subset.
const EXHAUSTIVE_LIMIT: usize = 8;

struct Screen {
    tau: f64,
    isolate: bool,
}

impl Screen {
    /// Variance of `diag` pooled with the member's recent history.
    fn pooled(history: &DiagHistory, slot: usize, diag: &[f64]) -> f64 {
        match history {
            Some((window, hist)) if *window > 1 => {
                let h = &hist[slot];
                let skip = (h.len() + 1).saturating_sub(*window);
                let all: Vec<f64> = h.iter().skip(skip).flatten().chain(diag).copied().collect();
                crate::autodiff::population_variance(&all)
            }
            _ => crate::autodiff::population_variance(diag),
        }
    }

    fn ok(&self, var: f64) -> bool {
        var.is_finite() && var <= self.tau
    }

    /// Variances of the members in `subset` (indices into `usable`) when
    /// only they take part in the attention.
    fn subset_variances(
        agg: &Aggregator,
        ks: &[Vec<f64>],
        qs: &[Vec<f64>],
        usable: &[usize],
        subset: &[usize],
        history: &DiagHistory,
    ) -> (Vec<f64>, Vec<Vec<f64>>, f64) {
        let (diags, peak) = agg.diagonals(ks, qs, subset);
        let vars = subset
            .iter()
            .zip(&diags)
            .map(|(&u, d)| Self::pooled(history, usable[u], d))
            .collect();
        (vars, diags, peak)
    }

    /// The largest subset of usable members whose joint attention is stable.
    /// Ties go to the subset with the smallest peak attention logit: a member
    /// with runaway features can pin a partner's row to a constant one-hot,
    /// which has zero variance but enormous logits.
    fn isolate(
        &self,
        agg: &Aggregator,
        ks: &[Vec<f64>],
        qs: &[Vec<f64>],
        usable: &[usize],
        history: &DiagHistory,
    ) -> Vec<usize> {
        let n = usable.len();
        if n > EXHAUSTIVE_LIMIT {
            let mut keep: Vec<usize> = (0..n).collect();
            loop {
                let (vars, _, _) = Self::subset_variances(agg, ks, qs, usable, &keep, history);
                if keep.len() == 1 || vars.iter().all(|&v| self.ok(v)) {
                    return keep;
                }
                let worst = (0..keep.len())
                    .max_by(|&a, &b| nan_high(vars[a]).total_cmp(&nan_high(vars[b])))
                    .expect("non-empty");
                keep.remove(worst);
            }
        }
        for size in (1..n).rev() {
            let mut best: Option<(f64, Vec<usize>)> = None;
            for mask in 0u32..(1 << n) {
                if mask.count_ones() as usize != size {
                    continue;
                }
                let subset: Vec<usize> = (0..n).filter(|i| mask >> i & 1 == 1).collect();
                let (vars, _, peak) = Self::subset_variances(agg, ks, qs, usable, &subset, history);
                if vars.iter().all(|&v| self.ok(v)) && best.as_ref().is_none_or(|(c, _)| peak < *c) {
                    best = Some((peak, subset));
                }
            }
            if let Some((_, s)) = best {
                return s;
            }
        }
        unreachable!("a single member always has zero diagonal variance")
    }

    /// Per-slot variances and verdicts. The first pass uses the full
    /// attention matrix over every usable member. If it flags anything and
    /// isolation is on, the largest stable subset is kept: its members are
    /// re-scored within the subset, and every other member gets the largest
    /// diagonal variance it causes when added back to that subset.
    fn run(
        &self,
        agg: &Aggregator,
        features: &[Option<&Tensor>],
        history: &mut DiagHistory,
    ) -> Result<(Vec<f64>, Vec<Verdict>)> {
        if !(self.tau > 0.0) {
            return Err(Error::Config(format!("fault threshold must be positive, got {}", self.tau)));
        }
        let usable: Vec<usize> = (0..features.len())
            .filter(|&i| features[i].is_some_and(Tensor::all_finite))
            .collect();
        let finite: Vec<&Tensor> = usable.iter().map(|&i| features[i].unwrap()).collect();
        for t in &finite {
            if t.shape().last() != Some(&agg.features) || t.shape() != finite[0].shape() {
                return Err(Error::shape("detect_faults", t.shape(), finite[0].shape()));
            }
        }
        let mut variances = vec![f64::NAN; features.len()];
        let mut verdicts = vec![Verdict::Faulty; features.len()];
        if finite.is_empty() {
            return Ok((variances, verdicts));
        }
        let (ks, qs) = agg.project(&finite);
        let all: Vec<usize> = (0..usable.len()).collect();
        let (full, mut diags, _) = Self::subset_variances(agg, &ks, &qs, &usable, &all, history);
        let mut kept = all.clone();
        let mut scores = full.clone();
        if self.isolate && !full.iter().all(|&v| self.ok(v)) {
            kept = self.isolate(agg, &ks, &qs, &usable, history);
            let (vars, kept_diags, _) = Self::subset_variances(agg, &ks, &qs, &usable, &kept, history);
            for (a, &u) in kept.iter().enumerate() {
                scores[u] = vars[a];
                diags[u] = kept_diags[a].clone();
            }
            for u in all.iter().filter(|u| !kept.contains(u)) {
                let mut with: Vec<usize> = kept.clone();
                with.push(*u);
                with.sort_unstable();
                let (vars, _, _) = Self::subset_variances(agg, &ks, &qs, &usable, &with, history);
                scores[*u] = vars.into_iter().map(nan_high).fold(f64::NEG_INFINITY, f64::max);
            }
        }
        for (u, &slot) in usable.iter().enumerate() {
            variances[slot] = scores[u];
            verdicts[slot] = if kept.contains(&u) && self.ok(scores[u]) {
                Verdict::Ok
            } else {
                Verdict::Faulty
            };
            if let Some((window, hist)) = history {
                if *window > 1 {
                    let h = &mut hist[slot];
                    h.push_back(std::mem::take(&mut diags[u]));
                    while h.len() > *window - 1 {
                        h.pop_front();
                    }
                }
            }
        }
        Ok((variances, verdicts))
    }
}

fn nan_high(v: f64) -> f64 {
    if v.is_nan() {
        f64::INFINITY
    } else {
        v
    }
}

/// One fault log record.
#[derive(Clone, Debug, PartialEq)]
pub struct FaultEvent {
    pub line: u64,
    pub denoiser: usize,
    pub variance: f64,
    pub verdict: Verdict,
}

impl fmt::Display for FaultEvent {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "line={} denoiser={} variance={:.6e} verdict={}",
            self.line, self.denoiser, self.variance, self.verdict
        )
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MixtureConfig {
    pub members: usize,
    pub denoiser: DenoiserConfig,
    /// Fault threshold on the diagonal attention variance.
    pub tau: f64,
    /// Number of recent lines pooled into the variance (1 = current line).
    pub variance_window: usize,
    /// Whether the active set may change in the middle of an image.
    pub allow_switching: bool,
    /// When the full-set screen flags a member, keep the largest subset of
    /// members whose joint attention passes instead of trusting the
    /// full-set scores alone. One member with runaway features otherwise
    /// destabilizes every row of the attention matrix.
    pub isolate_faults: bool,
}

impl Default for MixtureConfig {
    fn default() -> Self {
        MixtureConfig {
            members: 3,
            denoiser: DenoiserConfig::default(),
            tau: DEFAULT_TAU,
            variance_window: 1,
            allow_switching: true,
            isolate_faults: true,
        }
    }
}

impl MixtureConfig {
    pub fn validate(&self) -> Result<()> {
        if self.members == 0 {
            return Err(Error::Config("a mixture needs at least one member".into()));
        }
        if !(self.tau > 0.0) {
            return Err(Error::Config(format!("tau must be positive, got {}", self.tau)));
        }
        if self.variance_window == 0 {
            return Err(Error::Config("variance window must be at least one line".into()));
        }
        self.denoiser.validate()
    }
}

#[derive(Clone, Debug)]
pub struct Mixture {
    pub cfg: MixtureConfig,
    pub members: Vec<Denoiser>,
    pub aggregator: Aggregator,
}

const MAGIC: &[u8; 4] = b"PBMX";
const VERSION: u32 = 1;

impl Mixture {
    /// Fresh mixture; member `d` is seeded with `seed + d`, the aggregator
    /// with `seed + members`.
    pub fn new(cfg: MixtureConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let members = (0..cfg.members)
            .map(|d| Denoiser::new(cfg.denoiser.clone(), seed + d as u64))
            .collect::<Result<Vec<_>>>()?;
        let aggregator = Aggregator::new(cfg.denoiser.features, cfg.denoiser.bands, seed + cfg.members as u64);
        Ok(Mixture {
            cfg,
            members,
            aggregator,
        })
    }

    /// Builds a mixture around existing members.
    pub fn from_members(cfg: MixtureConfig, members: Vec<Denoiser>, aggregator: Aggregator) -> Result<Self> {
        let mut cfg = cfg;
        cfg.members = members.len();
        cfg.validate()?;
        for m in &members {
            if m.config() != &cfg.denoiser {
                return Err(Error::Config("member configuration differs from the mixture's".into()));
            }
        }
        if aggregator.features != cfg.denoiser.features || aggregator.bands != cfg.denoiser.bands {
            return Err(Error::Config("aggregator shape differs from the members'".into()));
        }
        Ok(Mixture {
            cfg,
            members,
            aggregator,
        })
    }

    /// The same head over a subset of members, in the given order.
    pub fn subset(&self, ids: &[usize]) -> Result<Mixture> {
        let members = ids
            .iter()
            .map(|&i| self.members.get(i).cloned().ok_or_else(|| bad_member(i, self.members.len())))
            .collect::<Result<Vec<_>>>()?;
        Mixture::from_members(self.cfg.clone(), members, self.aggregator.clone())
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    /// Batch forward of `y: [lines, pixels, bands]` through the members in
    /// `active` from zero states, without gradients.
    pub fn denoise_batch(&self, y: &Tensor, active: &[usize]) -> Result<Tensor> {
        let feats = active
            .iter()
            .map(|&d| {
                self.members
                    .get(d)
                    .ok_or_else(|| bad_member(d, self.members.len()))?
                    .forward_batch(y)
            })
            .collect::<Result<Vec<_>>>()?;
        self.aggregate(y, &feats)
    }

    /// Aggregates precomputed features without gradients.
    pub fn aggregate(&self, y: &Tensor, feats: &[Tensor]) -> Result<Tensor> {
        let mut g = Graph::new();
        let p = self.aggregator.params.bind(&mut g, false)?;
        let yv = g.constant(y.clone())?;
        let fv = feats.iter().map(|f| g.constant(f.clone())).collect::<Result<Vec<_>>>()?;
        let x = self.aggregator.forward(&mut g, &p, yv, &fv)?;
        Ok(g.value(x).clone())
    }

    pub fn stream(&self, pixels: usize, mode: FilterMode) -> Result<MixtureStream> {
        if pixels == 0 {
            return Err(Error::Config("lines must have at least one pixel".into()));
        }
        // Validate the width once up front.
        self.members[0].init_state(pixels)?;
        Ok(MixtureStream {
            pixels,
            mode,
            streams: (0..self.members.len()).map(|_| None).collect(),
            history: (0..self.members.len()).map(|_| VecDeque::new()).collect(),
            line: 0,
            last_active: None,
            threads: 1,
        })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::new();
        w.magic(MAGIC, VERSION);
        w.str(&toml::to_string(&self.cfg).expect("config serializes"));
        for m in &self.members {
            m.encode(&mut w);
        }
        self.aggregator.params.encode(&mut w);
        w.finish()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes);
        r.magic(MAGIC, VERSION)?;
        let cfg: MixtureConfig =
            toml::from_str(&r.str()?).map_err(|e| Error::Format(format!("mixture config: {e}")))?;
        cfg.validate()?;
        let members = (0..cfg.members).map(|_| Denoiser::decode(&mut r)).collect::<Result<Vec<_>>>()?;
        let mut aggregator = Aggregator::new(cfg.denoiser.features, cfg.denoiser.bands, 0);
        aggregator.set_params(ParamStore::decode(&mut r)?)?;
        r.finish()?;
        Mixture::from_members(cfg, members, aggregator)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        Ok(std::fs::write(path, self.to_bytes())?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

fn bad_member(d: usize, n: usize) -> Error {
    Error::Config(format!("denoiser {d} out of range for a {n}-member mixture"))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FilterMode {
    /// Exclude members flagged by the screening.
    Filtered,
    /// Aggregate every active member regardless of the screening.
    Unfiltered,
}

/// Result of one streamed line.
#[derive(Clone, Debug)]
pub struct LineOutput {
    /// Denoised line `[1, pixels, bands]`.
    pub line: Tensor,
    pub report: FaultReport,
    /// Members actually aggregated.
    pub used: Vec<usize>,
    /// True when every member was rejected and the noisy line was passed on.
    pub passthrough: bool,
}

impl LineOutput {
    /// Log records for this line; empty when nothing was flagged.
    pub fn events(&self, line: u64) -> Vec<FaultEvent> {
        if !self.report.any_faulty() {
            return Vec::new();
        }
        self.report
            .members
            .iter()
            .zip(&self.report.variances)
            .zip(&self.report.verdicts)
            .map(|((&d, &v), &verdict)| FaultEvent {
                line,
                denoiser: d,
                variance: v,
                verdict,
            })
            .collect()
    }
}

/// Line-by-line mixture inference.
#[derive(Debug)]
pub struct MixtureStream {
    pixels: usize,
    mode: FilterMode,
    streams: Vec<Option<DenoiserStream>>,
    history: Vec<VecDeque<Vec<f64>>>,
    line: u64,
    last_active: Option<Vec<usize>>,
    threads: usize,
}

impl MixtureStream {
    /// Members advance in parallel when `threads > 1`; results do not depend
    /// on the thread count.
    pub fn set_threads(&mut self, threads: usize) {
        self.threads = threads.max(1);
    }

    pub fn line_index(&self) -> u64 {
        self.line
    }

    /// Serialized size of all live member states.
    pub fn state_bytes(&self) -> usize {
        self.streams.iter().flatten().map(|s| s.state().byte_size()).sum()
    }

    /// Processes one noisy line `[1, pixels, bands]` with members `active`.
    /// Members that were inactive on the previous line start from a zero state.
    pub fn step(&mut self, mix: &Mixture, y: &Tensor, active: &[usize]) -> Result<LineOutput> {
        let n = mix.members.len();
        if active.is_empty() {
            return Err(Error::Config("at least one denoiser must be active".into()));
        }
        let mut sorted = active.to_vec();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.len() != active.len() || sorted.iter().any(|&d| d >= n) {
            return Err(Error::Config(format!("invalid active set {active:?} for {n} members")));
        }
        if let Some(prev) = &self.last_active {
            if prev.as_slice() != active && !mix.cfg.allow_switching {
                return Err(Error::Config(format!(
                    "active set changed from {prev:?} to {active:?} at line {} with switching disabled",
                    self.line
                )));
            }
        }
        let y = match y.ndim() {
            2 => y.reshape(&[1, y.shape()[0], y.shape()[1]])?,
            _ => y.clone(),
        };
        let want = [1, self.pixels, mix.cfg.denoiser.bands];
        if y.shape() != want {
            return Err(Error::shape("mixture step", y.shape(), &want));
        }
        for d in 0..n {
            if !active.contains(&d) {
                self.streams[d] = None;
                self.history[d].clear();
            } else if self.streams[d].is_none() {
                self.streams[d] = Some(mix.members[d].stream(self.pixels)?);
            }
        }

        let mut slots: Vec<(usize, &mut DenoiserStream)> = self
            .streams
            .iter_mut()
            .enumerate()
            .filter_map(|(d, s)| s.as_mut().map(|s| (d, s)))
            .collect();
        slots.sort_by_key(|(d, _)| active.iter().position(|a| a == d));
        let step = |(d, s): &mut (usize, &mut DenoiserStream)| match s.step(&mix.members[*d], &y) {
            Ok(h) => Ok(Some(h)),
            Err(Error::FaultSuspected { .. }) => Ok(None),
            Err(e) => Err(e),
        };
        let feats: Vec<Option<Tensor>> = if self.threads > 1 {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(self.threads)
                .build()
                .map_err(|e| Error::Config(e.to_string()))?;
            pool.install(|| slots.par_iter_mut().map(step).collect::<Result<Vec<_>>>())?
        } else {
            slots.iter_mut().map(step).collect::<Result<Vec<_>>>()?
        };

        let refs: Vec<Option<&Tensor>> = feats.iter().map(Option::as_ref).collect();
        let mut hist: DiagHistory = None;
        if mix.cfg.variance_window > 1 {
            let slots_hist = active.iter().map(|&d| std::mem::take(&mut self.history[d])).collect();
            hist = Some((mix.cfg.variance_window, slots_hist));
        }
        let screen = Screen {
            tau: mix.cfg.tau,
            isolate: mix.cfg.isolate_faults,
        };
        let (variances, verdicts) = screen.run(&mix.aggregator, &refs, &mut hist)?;
        if let Some((_, slots_hist)) = hist {
            for (&d, h) in active.iter().zip(slots_hist) {
                self.history[d] = h;
            }
        }
        let report = FaultReport {
            members: active.to_vec(),
            variances,
            verdicts,
        };

        let chosen: Vec<usize> = match self.mode {
            FilterMode::Filtered => (0..active.len())
                .filter(|&i| report.verdicts[i] == Verdict::Ok)
                .collect(),
            FilterMode::Unfiltered => (0..active.len()).filter(|&i| feats[i].is_some()).collect(),
        };
        self.line += 1;
        self.last_active = Some(active.to_vec());
        if chosen.is_empty() {
            log::warn!(
                "line {}: all {} active denoisers rejected; passing the noisy line through",
                self.line - 1,
                active.len()
            );
            return Ok(LineOutput {
                line: y,
                report,
                used: Vec::new(),
                passthrough: true,
            });
        }
        let used_feats: Vec<Tensor> = chosen.iter().map(|&i| feats[i].clone().unwrap()).collect();
        let out = match mix.aggregate(&y, &used_feats) {
            Ok(x) => x,
            // Overflow inside the head: nothing sensible to aggregate.
            Err(Error::NonFinite { .. }) => {
                log::warn!("line {}: non-finite aggregation; passing the noisy line through", self.line - 1);
                return Ok(LineOutput {
                    line: y,
                    report,
                    used: Vec::new(),
                    passthrough: true,
                });
            }
            Err(e) => return Err(e),
        };
        Ok(LineOutput {
            line: out,
            report,
            used: chosen.iter().map(|&i| active[i]).collect(),
            passthrough: false,
        })
    }
}

/// Area under the ROC curve for separating `positive` (expected larger)
/// from `negative` scores, with ties counted half. NaN scores rank highest.
pub fn auc(negative: &[f64], positive: &[f64]) -> Option<f64> {
    if negative.is_empty() || positive.is_empty() {
        return None;
    }
    let key = |v: f64| if v.is_nan() { f64::INFINITY } else { v };
    let mut wins = 0.0;
    for &p in positive {
        for &n in negative {
            let (p, n) = (key(p), key(n));
            if p > n {
                wins += 1.0;
            } else if p == n {
                wins += 0.5;
            }
        }
    }
    Some(wins / (negative.len() * positive.len()) as f64)
}

/// Detection rates at threshold `tau`: `(TPR, FPR)`; NaN scores count as
/// detections.
pub fn rates_at(negative: &[f64], positive: &[f64], tau: f64) -> (f64, f64) {
    let flagged = |v: &f64| v.is_nan() || *v > tau;
    let rate = |xs: &[f64]| {
        if xs.is_empty() {
            f64::NAN
        } else {
            xs.iter().filter(|v| flagged(v)).count() as f64 / xs.len() as f64
        }
    };
    (rate(positive), rate(negative))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ssm::MemoryConfig;

    fn toy_cfg(members: usize) -> MixtureConfig {
        MixtureConfig {
            members,
            denoiser: DenoiserConfig {
                bands: 4,
                features: 8,
                memory: MemoryConfig {
                    state: 4,
                    ..MemoryConfig::default()
                },
                ..DenoiserConfig::default()
            },
            ..MixtureConfig::default()
        }
    }

    fn rand_t(shape: &[usize], seed: u64) -> Tensor {
        Tensor::uniform(shape, -1.0, 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
    }

    #[test]
    fn single_member_diagonal_has_zero_variance() {
        let agg = Aggregator::new(8, 4, 1);
        let h = rand_t(&[1, 16, 8], 2);
        let r = detect_faults(&agg, &[0], &[Some(&h)], DEFAULT_TAU).unwrap();
        assert_eq!(r.variances, vec![0.0]);
        assert_eq!(r.verdicts, vec![Verdict::Ok]);
    }

    #[test]
    fn identical_members_have_zero_variance() {
        let agg = Aggregator::new(8, 4, 1);
        let h = rand_t(&[1, 16, 8], 3);
        let r = detect_faults(&agg, &[0, 1, 2], &[Some(&h), Some(&h), Some(&h)], DEFAULT_TAU).unwrap();
        assert!(r.variances.iter().all(|&v| v < 1e-30));
        assert_eq!(r.active(), vec![0, 1, 2]);
    }

    #[test]
    fn non_finite_members_are_faulty_and_all_faulty_is_an_error() {
        let agg = Aggregator::new(8, 4, 1);
        let h = rand_t(&[1, 16, 8], 4);
        let r = detect_faults(&agg, &[0, 1], &[Some(&h), None], DEFAULT_TAU).unwrap();
        assert_eq!(r.verdicts, vec![Verdict::Ok, Verdict::Faulty]);
        assert!(r.variances[1].is_nan());
        assert!(matches!(
            detect_faults(&agg, &[0, 1], &[None, None], DEFAULT_TAU),
            Err(Error::AllFaulty { count: 2 })
        ));
    }

    fn near(base: &Tensor, seed: u64, eps: f64) -> Tensor {
        let n = rand_t(base.shape(), seed);
        let data = base.data().iter().zip(n.data()).map(|(b, e)| b + eps * e).collect();
        Tensor::new(base.shape(), data).unwrap()
    }

    #[test]
    fn a_runaway_member_is_isolated_from_healthy_ones() {
        let agg = Aggregator::new(8, 4, 1);
        let base = rand_t(&[1, 32, 8], 5);
        let (h0, h1) = (near(&base, 6, 0.01), near(&base, 7, 0.01));
        let wild = rand_t(&[1, 32, 8], 8).map(|v| v * 1e30);
        for slot in 0..3 {
            let mut feats = vec![Some(&h0), Some(&h1)];
            feats.insert(slot, Some(&wild));
            let r = detect_faults(&agg, &[0, 1, 2], &feats, DEFAULT_TAU).unwrap();
            let want: Vec<usize> = (0..3).filter(|&i| i != slot).collect();
            assert_eq!(r.active(), want, "{:?}", r.variances);
            assert!(r.variances[slot] > DEFAULT_TAU);
        }
        let r = detect_faults(&agg, &[0, 1], &[Some(&wild), Some(&h1)], DEFAULT_TAU).unwrap();
        assert_eq!(r.active(), vec![1]);
    }

    #[test]
    fn isolation_is_inert_when_the_full_screen_passes() {
        let agg = Aggregator::new(8, 4, 1);
        let base = rand_t(&[1, 32, 8], 9);
        let hs: Vec<Tensor> = (0..4).map(|i| near(&base, 10 + i, 0.02)).collect();
        let feats: Vec<Option<&Tensor>> = hs.iter().map(Some).collect();
        let run = |isolate| Screen { tau: DEFAULT_TAU, isolate }.run(&agg, &feats, &mut None).unwrap();
        let (plain, isolated) = (run(false), run(true));
        assert!(plain.1.iter().all(|v| *v == Verdict::Ok));
        assert_eq!(plain, isolated);
    }

    #[test]
    fn zero_output_conv_passes_input_through() {
        let mut agg = Aggregator::new(8, 4, 1);
        agg.zero_output();
        let mix = Mixture::from_members(toy_cfg(1), vec![Denoiser::new(toy_cfg(1).denoiser, 5).unwrap()], agg).unwrap();
        let y = rand_t(&[2, 8, 4], 6);
        assert!(mix.denoise_batch(&y, &[0]).unwrap().bitwise_eq(&y));
    }

    #[test]
    fn zero_value_map_with_identical_members_reduces_to_single_head() {
        let mut agg = Aggregator::new(8, 4, 1);
        agg.zero_value_map();
        let d = Denoiser::new(toy_cfg(1).denoiser, 7).unwrap();
        let one = Mixture::from_members(toy_cfg(1), vec![d.clone()], agg.clone()).unwrap();
        let three = Mixture::from_members(toy_cfg(3), vec![d.clone(), d.clone(), d], agg).unwrap();
        let y = rand_t(&[2, 8, 4], 8);
        let a = one.denoise_batch(&y, &[0]).unwrap();
        let b = three.denoise_batch(&y, &[0, 1, 2]).unwrap();
        assert!(a.max_abs_diff(&b) < 1e-12);
    }

    #[test]
    fn excluding_a_member_equals_mixture_without_it() {
        let mix = Mixture::new(toy_cfg(3), 10).unwrap();
        let y = rand_t(&[3, 8, 4], 11);
        let filtered = mix.denoise_batch(&y, &[0, 2]).unwrap();
        let reduced = mix.subset(&[0, 2]).unwrap().denoise_batch(&y, &[0, 1]).unwrap();
        assert!(filtered.bitwise_eq(&reduced));
    }

    #[test]
    fn member_order_does_not_change_output() {
        let mix = Mixture::new(toy_cfg(3), 12).unwrap();
        let y = rand_t(&[2, 8, 4], 13);
        let a = mix.denoise_batch(&y, &[0, 1, 2]).unwrap();
        let b = mix.denoise_batch(&y, &[2, 0, 1]).unwrap();
        assert!(a.max_abs_diff(&b) < 1e-12);
    }

    #[test]
    fn attention_rows_sum_to_one() {
        let agg = Aggregator::new(8, 4, 1);
        let mut g = Graph::new();
        let p = agg.params().bind(&mut g, false).unwrap();
        let hs: Vec<Var> = (0..3).map(|i| g.constant(rand_t(&[2, 4, 8], 20 + i)).unwrap()).collect();
        let stacked: Vec<Var> = hs.iter().map(|&h| g.reshape(h, &[8, 1, 8]).unwrap()).collect();
        let h = g.concat(&stacked, 1).unwrap();
        let k = agg.key.forward(&mut g, &p, h).unwrap();
        let q = agg.query.forward(&mut g, &p, h).unwrap();
        let qt = g.transpose_last2(q).unwrap();
        let s = g.bmm(k, qt).unwrap();
        let a = g.softmax(s).unwrap();
        for row in g.value(a).data().chunks(3) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        }
    }

    #[test]
    fn streaming_matches_batch_and_thread_count_is_irrelevant() {
        let mix = Mixture::new(toy_cfg(2), 14).unwrap();
        let y = rand_t(&[5, 8, 4], 15).map(|v| 0.5 + 0.5 * v);
        let batch = mix.denoise_batch(&y, &[0, 1]).unwrap();
        let mut outs = Vec::new();
        for threads in [1, 2] {
            let mut s = mix.stream(8, FilterMode::Unfiltered).unwrap();
            s.set_threads(threads);
            let lines: Vec<_> = (0..5)
                .map(|l| s.step(&mix, &y.slice_outer(l, 1).unwrap(), &[0, 1]).unwrap().line)
                .collect();
            outs.push(Tensor::concat_outer(&lines).unwrap());
        }
        assert!(outs[0].bitwise_eq(&outs[1]));
        assert!(outs[0].max_abs_diff(&batch) <= 1e-10);
    }

    #[test]
    fn switching_can_be_forbidden() {
        let mut cfg = toy_cfg(2);
        cfg.allow_switching = false;
        let mix = Mixture::new(cfg, 16).unwrap();
        let mut s = mix.stream(8, FilterMode::Filtered).unwrap();
        let y = rand_t(&[1, 8, 4], 17);
        s.step(&mix, &y, &[0, 1]).unwrap();
        assert!(matches!(s.step(&mix, &y, &[0]), Err(Error::Config(_))));
    }

    #[test]
    fn mixture_round_trips() {
        let mix = Mixture::new(toy_cfg(2), 18).unwrap();
        let back = Mixture::from_bytes(&mix.to_bytes()).unwrap();
        assert_eq!(back.to_bytes(), mix.to_bytes());
    }

    #[test]
    fn auc_and_rates() {
        assert_eq!(auc(&[0.1, 0.2], &[0.3, 0.4]), Some(1.0));
        assert_eq!(auc(&[0.3], &[0.3]), Some(0.5));
        assert_eq!(auc(&[0.3], &[]), None);
        let (tpr, fpr) = rates_at(&[0.001, 0.02], &[0.5, f64::NAN, 0.005], 0.01);
        assert!((tpr - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(fpr, 0.5);
    }
}
