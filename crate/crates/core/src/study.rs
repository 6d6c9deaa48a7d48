//! Measurement drivers shared by the CLI and the acceptance suite: fault
//! detection trials, variance separation, the power tradeoff, latency and
//! streaming-state probes.

use std::fmt;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::cube::ImageCube;
use crate::denoiser::Denoiser;
use crate::error::{Error, Result};
use crate::fault::{bitflip_msb, inject, scaled_probability, FaultModel, FaultSpec};
use crate::metrics::psnr;
use crate::mixture::{auc, FilterMode, Mixture, Verdict};
use crate::params::ParamKind;
use crate::power::prefix;
use crate::tensor::Tensor;
use crate::train::{Model, TrainConfig, Trainer};

/// Per-line latency of the reference pushbroom imager, in milliseconds.
pub const REFERENCE_LINE_MS: f64 = 4.34;

fn line_psnr(clean: &ImageCube, l: usize, out: &Tensor) -> Result<f64> {
    let c = ImageCube::from_tensor(clean.line(l))?;
    let o = ImageCube::from_tensor(out.clone())?;
    psnr(&c, &o, 1.0)
}

fn population_std(xs: &[f64]) -> f64 {
    crate::autodiff::population_variance(xs).sqrt()
}

/// Settings for single-weight fault trials.
#[derive(Clone, Debug)]
pub struct DetectionConfig {
    pub trials: usize,
    pub tau: f64,
    /// Only weights whose bitflip moves them by at least this many standard
    /// deviations of their tensor are used.
    pub min_sigmas: f64,
    pub seed: u64,
}

impl Default for DetectionConfig {
    fn default() -> Self {
        DetectionConfig {
            trials: 100,
            tau: crate::mixture::DEFAULT_TAU,
            min_sigmas: 10.0,
            seed: 0,
        }
    }
}

/// One corrupted weight.
#[derive(Clone, Debug, PartialEq)]
pub struct WeightFault {
    pub member: usize,
    pub param: String,
    pub offset: usize,
    pub old: f64,
    pub new: f64,
    /// `|new - old|` over the tensor's standard deviation.
    pub sigmas: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DetectionResult {
    pub faults: Vec<WeightFault>,
    /// Lines on which the faulty member was flagged, over all faulty lines.
    pub tpr: f64,
    /// Flagged (healthy member, line) pairs over all such pairs.
    pub fpr: f64,
    /// Lines where filtered PSNR is at least the unfiltered PSNR.
    pub filtered_not_worse: f64,
    pub lines: usize,
    pub mean_psnr_filtered: f64,
    pub mean_psnr_unfiltered: f64,
}

impl fmt::Display for DetectionResult {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "trials={} lines={} tpr={:.4} fpr={:.4} filtered_not_worse={:.4} psnr_filtered={:.2} psnr_unfiltered={:.2}",
            self.faults.len(),
            self.lines,
            self.tpr,
            self.fpr,
            self.filtered_not_worse,
            self.mean_psnr_filtered,
            self.mean_psnr_unfiltered
        )
    }
}

/// Picks a weight in `member`'s fault surface whose most significant bitflip
/// is at least `min_sigmas` standard deviations away from the original.
pub fn pick_large_fault(mix: &Mixture, member: usize, min_sigmas: f64, rng: &mut impl Rng) -> Result<WeightFault> {
    let den = &mix.members[member];
    let store = den.params();
    let n = store.fault_surface_len();
    if n == 0 {
        return Err(Error::Config("denoiser has no fault-target weights".into()));
    }
    for _ in 0..10_000 {
        let (id, offset) = store.locate(rng.random_range(0..n)).expect("flat index in range");
        let t = store.get(id);
        let std = population_std(t.data());
        let old = t.data()[offset];
        let new = bitflip_msb(old);
        let sigmas = (new - old).abs() / std;
        if std > 0.0 && sigmas >= min_sigmas {
            return Ok(WeightFault {
                member,
                param: store.entries()[id.0].name.clone(),
                offset,
                old,
                new,
                sigmas,
            });
        }
    }
    Err(Error::Config(format!(
        "no weight of member {member} moves by {min_sigmas} standard deviations under a bitflip"
    )))
}

/// Returns `mix` with `fault` written into its member.
pub fn apply_fault(mix: &Mixture, fault: &WeightFault) -> Result<Mixture> {
    let mut out = mix.clone();
    let store = out.members[fault.member].params_mut();
    let id = store
        .find(&fault.param)
        .ok_or_else(|| Error::Config(format!("unknown parameter {}", fault.param)))?;
    let mut t = store.get(id).clone();
    t.data_mut()[fault.offset] = fault.new;
    store.set(id, t)?;
    Ok(out)
}

/// Corrupts one large weight of a random member per trial, streams a noisy
/// cube with and without the filter and scores both.
pub fn detection_study(mix: &Mixture, set: &[(ImageCube, ImageCube)], cfg: &DetectionConfig) -> Result<DetectionResult> {
    if set.is_empty() || cfg.trials == 0 {
        return Err(Error::Config("detection study needs trials and validation cubes".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut mix = mix.clone();
    mix.cfg.tau = cfg.tau;
    let active: Vec<usize> = (0..mix.len()).collect();
    let (mut tp, mut pos, mut fp, mut neg, mut not_worse, mut lines) = (0usize, 0usize, 0usize, 0usize, 0usize, 0usize);
    let (mut sum_f, mut sum_u) = (0.0, 0.0);
    let mut faults = Vec::with_capacity(cfg.trials);
    for trial in 0..cfg.trials {
        let member = rng.random_range(0..mix.len());
        let fault = pick_large_fault(&mix, member, cfg.min_sigmas, &mut rng)?;
        let faulty = apply_fault(&mix, &fault)?;
        let (clean, noisy) = &set[trial % set.len()];
        let mut filtered = faulty.stream(noisy.cols(), FilterMode::Filtered)?;
        let mut unfiltered = faulty.stream(noisy.cols(), FilterMode::Unfiltered)?;
        for l in 0..noisy.lines() {
            let y = noisy.line(l);
            let a = filtered.step(&faulty, &y, &active)?;
            let b = unfiltered.step(&faulty, &y, &active)?;
            for (&d, &v) in a.report.members.iter().zip(&a.report.verdicts) {
                let flagged = v == Verdict::Faulty;
                if d == member {
                    pos += 1;
                    tp += flagged as usize;
                } else {
                    neg += 1;
                    fp += flagged as usize;
                }
            }
            let pf = line_psnr(clean, l, &a.line)?;
            let pu = line_psnr(clean, l, &b.line)?;
            // A NaN output line counts as infinitely bad.
            let pu_cmp = if pu.is_nan() { f64::NEG_INFINITY } else { pu };
            not_worse += (pf >= pu_cmp) as usize;
            sum_f += pf.min(100.0);
            sum_u += if pu.is_finite() { pu } else { pu_cmp.clamp(-100.0, 100.0) };
            lines += 1;
        }
        faults.push(fault);
    }
    Ok(DetectionResult {
        faults,
        tpr: tp as f64 / pos.max(1) as f64,
        fpr: fp as f64 / neg.max(1) as f64,
        filtered_not_worse: not_worse as f64 / lines as f64,
        lines,
        mean_psnr_filtered: sum_f / lines as f64,
        mean_psnr_unfiltered: sum_u / lines as f64,
    })
}

/// Random-fault injection at several probabilities, scored per member.
#[derive(Clone, Debug)]
pub struct SeparationConfig {
    /// Per-weight fault probabilities at the reference weight count; they are
    /// rescaled to the actual fault surface so the expected number of faults
    /// per denoiser is preserved.
    pub probabilities: Vec<f64>,
    pub trials: usize,
    pub tau: f64,
    pub model: FaultModel,
    pub seed: u64,
}

impl Default for SeparationConfig {
    fn default() -> Self {
        SeparationConfig {
            probabilities: vec![1e-7, 5e-7, 1e-6],
            trials: 30,
            tau: crate::mixture::DEFAULT_TAU,
            model: FaultModel::BitflipMsb,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SeparationPoint {
    pub probability: f64,
    pub scaled_probability: f64,
    /// Mean per-line attention variance of members without faults.
    pub healthy: Vec<f64>,
    /// The same score for members with at least one injected fault; NaN when
    /// the member produced non-finite features.
    pub faulty: Vec<f64>,
    pub auc: Option<f64>,
    pub tpr: f64,
    pub fpr: f64,
}

impl fmt::Display for SeparationPoint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let auc = self.auc.map_or("na".into(), |a| format!("{a:.4}"));
        let median = |v: &[f64]| {
            let mut v: Vec<f64> = v.iter().copied().filter(|x| x.is_finite()).collect();
            v.sort_by(f64::total_cmp);
            v.get(v.len() / 2).map_or("na".into(), |m| format!("{m:.3e}"))
        };
        write!(
            f,
            "p={:.1e} p_scaled={:.3e} healthy={} faulty={} auc={auc} tpr={:.3} fpr={:.3} median_healthy={} median_faulty={}",
            self.probability,
            self.scaled_probability,
            self.healthy.len(),
            self.faulty.len(),
            self.tpr,
            self.fpr,
            median(&self.healthy),
            median(&self.faulty)
        )
    }
}

/// Injects random faults into every member independently and records how
/// well the mean attention variance separates faulty from healthy members.
/// Trials reuse the same seeds across probabilities.
pub fn separation_study(
    mix: &Mixture,
    set: &[(ImageCube, ImageCube)],
    cfg: &SeparationConfig,
) -> Result<Vec<SeparationPoint>> {
    if set.is_empty() || cfg.trials == 0 {
        return Err(Error::Config("separation study needs trials and validation cubes".into()));
    }
    let surface = mix.members[0].params().fault_surface_len();
    let active: Vec<usize> = (0..mix.len()).collect();
    let mut out = Vec::with_capacity(cfg.probabilities.len());
    for &p in &cfg.probabilities {
        let scaled = scaled_probability(p, surface);
        let (mut healthy, mut faulty) = (Vec::new(), Vec::new());
        for trial in 0..cfg.trials {
            let mut m = mix.clone();
            m.cfg.tau = cfg.tau;
            let mut hit = vec![false; m.len()];
            for (d, den) in m.members.iter_mut().enumerate() {
                let spec = FaultSpec {
                    probability: scaled,
                    model: cfg.model,
                    seed: cfg.seed ^ ((trial as u64) << 16) ^ d as u64,
                };
                let (store, manifest) = inject(den.params(), &spec)?;
                hit[d] = !manifest.is_empty();
                den.set_params(store)?;
            }
            let (_, noisy) = &set[trial % set.len()];
            let mut s = m.stream(noisy.cols(), FilterMode::Filtered)?;
            let mut sums = vec![0.0; m.len()];
            for l in 0..noisy.lines() {
                let r = s.step(&m, &noisy.line(l), &active)?;
                for (&d, &v) in r.report.members.iter().zip(&r.report.variances) {
                    sums[d] += v;
                }
            }
            for (d, sum) in sums.into_iter().enumerate() {
                let score = sum / noisy.lines() as f64;
                if hit[d] {
                    faulty.push(score);
                } else {
                    healthy.push(score);
                }
            }
        }
        let flagged = |v: &f64| !(v.is_finite() && *v <= cfg.tau);
        let rate = |v: &[f64]| v.iter().filter(|x| flagged(x)).count() as f64 / v.len().max(1) as f64;
        out.push(SeparationPoint {
            probability: p,
            scaled_probability: scaled,
            auc: auc(&healthy, &faulty),
            tpr: rate(&faulty),
            fpr: rate(&healthy),
            healthy,
            faulty,
        });
    }
    Ok(out)
}

/// Validation PSNR of one trained mixture for each prefix size.
#[derive(Clone, Debug, PartialEq)]
pub struct PowerRun {
    pub lambda: f64,
    pub seed: u64,
    /// Entry `n - 1` is the PSNR with the first `n` members active.
    pub psnr_by_active: Vec<f64>,
}

/// PSNR of `mix` on `set` with `1..=members` active, batch inference.
pub fn psnr_by_active(mix: &Mixture, set: &[(ImageCube, ImageCube)]) -> Result<Vec<f64>> {
    (1..=mix.len())
        .map(|n| {
            let active = prefix(n, mix.len())?;
            let mut total = 0.0;
            for (clean, noisy) in set {
                let den = ImageCube::from_tensor(mix.denoise_batch(&noisy.to_tensor(), &active)?)?;
                total += psnr(clean, &den, 1.0)?;
            }
            Ok(total / set.len() as f64)
        })
        .collect()
}

/// Trains one mixture per (λ, seed) pair and measures the quality/power
/// tradeoff. `progress` sees each finished run.
pub fn power_study(
    base: &Mixture,
    data: &[ImageCube],
    set: &[(ImageCube, ImageCube)],
    train: &TrainConfig,
    lambdas: &[f64],
    seeds: &[u64],
    mut progress: impl FnMut(&PowerRun),
) -> Result<Vec<PowerRun>> {
    let mut runs = Vec::new();
    for &seed in seeds {
        for &lambda in lambdas {
            let mix = Mixture::new(base.cfg.clone(), seed)?;
            let cfg = TrainConfig {
                lambda,
                seed,
                ..train.clone()
            };
            let mut t = Trainer::new(mix, cfg)?;
            t.run(data, |_, _| {})?;
            let run = PowerRun {
                lambda,
                seed,
                psnr_by_active: psnr_by_active(&t.model, set)?,
            };
            progress(&run);
            runs.push(run);
        }
    }
    Ok(runs)
}

/// Seed-averaged PSNR per active count for one λ.
pub fn mean_curve(runs: &[PowerRun], lambda: f64) -> Vec<f64> {
    let sel: Vec<&PowerRun> = runs.iter().filter(|r| r.lambda == lambda).collect();
    let Some(first) = sel.first() else {
        return Vec::new();
    };
    (0..first.psnr_by_active.len())
        .map(|i| sel.iter().map(|r| r.psnr_by_active[i]).sum::<f64>() / sel.len() as f64)
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct BenchReport {
    pub pixels: usize,
    pub bands: usize,
    pub members: usize,
    pub features: usize,
    pub lines: usize,
    pub threads: usize,
    pub mean_ms: f64,
    pub p95_ms: f64,
    /// Stream state after line 10 (or the last line of shorter runs).
    pub state_bytes_line10: usize,
    pub state_bytes_last: usize,
    /// Peak resident set size from the OS, when available.
    pub peak_rss_kib: Option<u64>,
}

impl fmt::Display for BenchReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(
            f,
            "config: members={} features={} line={}x{} threads={} lines={}",
            self.members, self.features, self.pixels, self.bands, self.threads, self.lines
        )?;
        writeln!(f, "latency_mean_ms={:.3}", self.mean_ms)?;
        writeln!(f, "latency_p95_ms={:.3}", self.p95_ms)?;
        writeln!(f, "reference_line_ms={REFERENCE_LINE_MS:.2}")?;
        writeln!(f, "realtime_ratio={:.3}", self.mean_ms / REFERENCE_LINE_MS)?;
        writeln!(
            f,
            "state_bytes_line10={} state_bytes_last={}",
            self.state_bytes_line10, self.state_bytes_last
        )?;
        match self.peak_rss_kib {
            Some(k) => write!(f, "peak_rss_kib={k}"),
            None => write!(f, "peak_rss_kib=na"),
        }
    }
}

/// Peak resident set size of this process (`VmHWM`), Linux only.
pub fn peak_rss_kib() -> Option<u64> {
    let status = std::fs::read_to_string("/proc/self/status").ok()?;
    status
        .lines()
        .find_map(|l| l.strip_prefix("VmHWM:"))
        .and_then(|v| v.trim().trim_end_matches("kB").trim().parse().ok())
}

/// `q`-quantile by nearest rank.
pub fn quantile(xs: &[f64], q: f64) -> f64 {
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    let rank = ((q * v.len() as f64).ceil() as usize).clamp(1, v.len());
    v[rank - 1]
}

/// Streams `lines` random lines through all members and times each one.
/// `warmup` extra lines run first and are not timed.
pub fn bench(mix: &Mixture, pixels: usize, lines: usize, warmup: usize, threads: usize, seed: u64) -> Result<BenchReport> {
    if lines == 0 {
        return Err(Error::Config("bench needs at least one line".into()));
    }
    let bands = mix.cfg.denoiser.bands;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let active: Vec<usize> = (0..mix.len()).collect();
    let mut s = mix.stream(pixels, FilterMode::Filtered)?;
    s.set_threads(threads);
    let mut times = Vec::with_capacity(lines);
    let mut line10 = None;
    for i in 0..warmup + lines {
        let y = Tensor::uniform(&[1, pixels, bands], 0.0, 1.0, &mut rng);
        let t0 = Instant::now();
        s.step(mix, &y, &active)?;
        let dt = t0.elapsed().as_secs_f64() * 1e3;
        if i + 1 == 10 {
            line10 = Some(s.state_bytes());
        }
        if i >= warmup {
            times.push(dt);
        }
    }
    Ok(BenchReport {
        pixels,
        bands,
        members: mix.len(),
        features: mix.cfg.denoiser.features,
        lines,
        threads,
        mean_ms: times.iter().sum::<f64>() / times.len() as f64,
        p95_ms: quantile(&times, 0.95),
        state_bytes_line10: line10.unwrap_or_else(|| s.state_bytes()),
        state_bytes_last: s.state_bytes(),
        peak_rss_kib: peak_rss_kib(),
    })
}

/// Streaming-state sizes of a denoiser's memory blocks at two line counts.
#[derive(Clone, Debug, PartialEq)]
pub struct StateProbe {
    pub early_lines: u64,
    pub early_bytes: usize,
    pub late_lines: u64,
    pub late_bytes: usize,
}

/// Drives both memory blocks of `den` with random feature lines and records
/// the combined state size after `early` and after `late` lines. Everything
/// outside the memory blocks is stateless, so this is the whole stream state.
pub fn state_probe(den: &Denoiser, pixels: usize, early: u64, late: u64, seed: u64) -> Result<StateProbe> {
    if early == 0 || late < early {
        return Err(Error::Config("state probe needs 0 < early <= late".into()));
    }
    let f = den.config().features;
    let blocks = den.memory_blocks();
    let mut states: Vec<_> = blocks.iter().map(|b| b.init_state(pixels)).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut early_bytes = 0;
    for line in 1..=late {
        let x = Tensor::uniform(&[1, pixels, f], -1.0, 1.0, &mut rng);
        for (b, st) in blocks.iter().zip(states.iter_mut()) {
            b.step_line(den.params(), st, &x)?;
        }
        if line == early {
            early_bytes = states.iter().map(|s| s.byte_size()).sum();
        }
    }
    Ok(StateProbe {
        early_lines: early,
        early_bytes,
        late_lines: late,
        late_bytes: states.iter().map(|s| s.byte_size()).sum(),
    })
}

/// Number of weights per denoiser that faults can hit, by parameter kind.
pub fn fault_surface_breakdown(den: &Denoiser) -> Vec<(ParamKind, usize)> {
    let mut out: Vec<(ParamKind, usize)> = Vec::new();
    for e in den.params().entries() {
        if !e.kind.is_fault_target() {
            continue;
        }
        match out.iter_mut().find(|(k, _)| *k == e.kind) {
            Some((_, n)) => *n += e.value.len(),
            None => out.push((e.kind, e.value.len())),
        }
    }
    out
}

/// Trains `model` for `cfg.steps` steps and returns it.
pub fn train_model<M: Model>(model: M, cfg: TrainConfig, data: &[ImageCube]) -> Result<M> {
    let mut t = Trainer::new(model, cfg)?;
    t.run(data, |_, _| {})?;
    Ok(t.model)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::denoiser::DenoiserConfig;
    use crate::mixture::MixtureConfig;
    use crate::noise::NoiseSpec;
    use crate::ssm::MemoryConfig;
    use crate::synth::synth_cube;
    use crate::train::validation_set;

    fn tiny_mix(members: usize) -> Mixture {
        let cfg = MixtureConfig {
            members,
            denoiser: DenoiserConfig {
                bands: 3,
                features: 4,
                memory: MemoryConfig {
                    state: 2,
                    ..MemoryConfig::default()
                },
                ..DenoiserConfig::default()
            },
            ..MixtureConfig::default()
        };
        Mixture::new(cfg, 5).unwrap()
    }

    fn tiny_set() -> Vec<(ImageCube, ImageCube)> {
        let clean = vec![synth_cube(4, 8, 3, 1).unwrap()];
        validation_set(&clean, &NoiseSpec::gaussian(10.0, 10.0, 0), 3).unwrap()
    }

    #[test]
    fn nearest_rank_quantile() {
        let xs: Vec<f64> = (1..=20).map(f64::from).collect();
        assert_eq!(quantile(&xs, 0.95), 19.0);
        assert_eq!(quantile(&xs, 1.0), 20.0);
        assert_eq!(quantile(&[3.0], 0.5), 3.0);
    }

    #[test]
    fn picked_faults_are_large_and_applied() {
        let mix = tiny_mix(2);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let f = pick_large_fault(&mix, 1, 10.0, &mut rng).unwrap();
        assert!(f.sigmas >= 10.0);
        let m = apply_fault(&mix, &f).unwrap();
        let id = m.members[1].params().find(&f.param).unwrap();
        assert_eq!(m.members[1].params().get(id).data()[f.offset], f.new);
        assert!(m.members[0].params().bitwise_eq(mix.members[0].params()));
    }

    #[test]
    fn detection_study_runs_and_counts_lines() {
        let cfg = DetectionConfig {
            trials: 2,
            ..DetectionConfig::default()
        };
        let r = detection_study(&tiny_mix(3), &tiny_set(), &cfg).unwrap();
        assert_eq!(r.lines, 8);
        assert_eq!(r.faults.len(), 2);
        assert!((0.0..=1.0).contains(&r.tpr) && (0.0..=1.0).contains(&r.fpr));
    }

    #[test]
    fn separation_without_faults_has_no_positives() {
        let cfg = SeparationConfig {
            probabilities: vec![0.0],
            trials: 2,
            ..SeparationConfig::default()
        };
        let pts = separation_study(&tiny_mix(2), &tiny_set(), &cfg).unwrap();
        assert_eq!(pts[0].healthy.len(), 4);
        assert!(pts[0].faulty.is_empty() && pts[0].auc.is_none());
    }

    #[test]
    fn state_probe_is_flat() {
        let den = Denoiser::new(tiny_mix(1).cfg.denoiser, 1).unwrap();
        let p = state_probe(&den, 8, 2, 9, 0).unwrap();
        assert_eq!(p.early_bytes, p.late_bytes);
        assert!(p.early_bytes > 0);
    }

    #[test]
    fn state_grows_linearly_in_columns_and_width() {
        let base = tiny_mix(1).cfg.denoiser;
        let den = Denoiser::new(base.clone(), 1).unwrap();
        let payload = |px: usize| -> usize {
            den.memory_blocks().iter().map(|b| b.init_state(px).payload_bytes()).sum()
        };
        assert_eq!(payload(16), 2 * payload(8));
        let a = state_probe(&den, 8, 1, 1, 0).unwrap().early_bytes;
        let b = state_probe(&den, 16, 1, 1, 0).unwrap().early_bytes;
        assert_eq!(b - a, payload(8));
        let wide = Denoiser::new(
            DenoiserConfig {
                features: 2 * base.features,
                ..base
            },
            1,
        )
        .unwrap();
        let s1 = den.memory_blocks()[0].init_state(8);
        let s2 = wide.memory_blocks()[0].init_state(8);
        assert_eq!(s2.ring().unwrap().len(), 2 * s1.ring().unwrap().len());
        assert_eq!(s2.hidden()[0].len(), 2 * s1.hidden()[0].len());
    }

    #[test]
    fn bench_reports_all_lines() {
        let r = bench(&tiny_mix(2), 8, 12, 1, 1, 0).unwrap();
        assert_eq!(r.lines, 12);
        assert!(r.p95_ms >= 0.0 && r.mean_ms >= 0.0);
        assert_eq!(r.state_bytes_line10, r.state_bytes_last);
        assert!(r.to_string().contains("reference_line_ms=4.34"));
    }

    #[test]
    fn power_curve_has_one_entry_per_prefix() {
        let mix = tiny_mix(3);
        let v = psnr_by_active(&mix, &tiny_set()).unwrap();
        assert_eq!(v.len(), 3);
        let runs = vec![
            PowerRun {
                lambda: 1.0,
                seed: 0,
                psnr_by_active: vec![1.0, 3.0],
            },
            PowerRun {
                lambda: 1.0,
                seed: 1,
                psnr_by_active: vec![3.0, 5.0],
            },
        ];
        assert_eq!(mean_curve(&runs, 1.0), vec![2.0, 4.0]);
        assert!(mean_curve(&runs, -1.0).is_empty());
    }
}
