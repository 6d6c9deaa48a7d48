//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! Every criterion runs by default. `ACCEPTANCE_ONLY=3,5` selects a subset
//! and `ACCEPTANCE_STRICT=1` turns any failure into a nonzero exit status.
//! A criterion passes only if its check holds and it finishes within its
//! time budget.

use std::process::ExitCode;
use std::time::Instant;

use pushbroom::autodiff::{Graph, Var};
use pushbroom::cube::ImageCube;
use pushbroom::denoiser::{Denoiser, DenoiserConfig};
use pushbroom::gradcheck::check;
use pushbroom::mixture::{Aggregator, FilterMode, Mixture, MixtureConfig};
use pushbroom::nn::{simple_gate, ChannelAttention, Conv1d, ConvMode, DascBlock, LayerNorm, Linear, SimplifiedChannelAttention};
use pushbroom::noise::NoiseSpec;
use pushbroom::params::{Bound, ParamId, ParamStore};
use pushbroom::power::{cardinality_pmf, PowerPolicy};
use pushbroom::ssm::{Backend, MemoryBlock, MemoryConfig};
use pushbroom::study::{self, DetectionConfig, SeparationConfig};
use pushbroom::synth::synth_cube;
use pushbroom::train::{evaluate_identity, evaluate_mixture, evaluate_model, validation_set, ConvBaseline, TrainConfig, Trainer};
use pushbroom::{Result, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Check = Result<(bool, String)>;
type LayerFn = Box<dyn Fn(&mut Graph, &Bound, Var) -> Result<Var>>;

struct Suite {
    only: Option<Vec<u32>>,
    failed: Vec<u32>,
}

impl Suite {
    fn wants(&self, n: u32) -> bool {
        self.only.as_ref().is_none_or(|v| v.contains(&n))
    }

    fn run(&mut self, n: u32, name: &str, budget_s: f64, f: impl FnOnce() -> Check) {
        if !self.wants(n) {
            return;
        }
        let t0 = Instant::now();
        let res = f();
        let secs = t0.elapsed().as_secs_f64();
        let (ok, detail) = match res {
            Ok(r) => r,
            Err(e) => (false, format!("error: {e}")),
        };
        let in_time = secs <= budget_s;
        let pass = ok && in_time;
        if !pass {
            self.failed.push(n);
        }
        let timing = if in_time {
            format!("{secs:.1}s of {budget_s:.0}s")
        } else {
            format!("{secs:.1}s, over the {budget_s:.0}s budget")
        };
        println!(
            "criterion {n:>2} {name}: {} ({detail}; {timing})",
            if pass { "PASS" } else { "FAIL" }
        );
    }
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn toy_denoiser(bands: usize, features: usize, backend: Backend, state: usize) -> DenoiserConfig {
    DenoiserConfig {
        bands,
        features,
        memory: MemoryConfig {
            backend,
            state,
            ..MemoryConfig::default()
        },
        ..DenoiserConfig::default()
    }
}

/// Adds small noise to every parameter so that zero-initialized branches
/// take part in the comparison.
fn perturb(store: &mut ParamStore, seed: u64, amount: f64) {
    let mut r = rng(seed);
    for i in 0..store.len() {
        let t = store.get(ParamId(i));
        let n = Tensor::uniform(t.shape(), -amount, amount, &mut r);
        let data = t.data().iter().zip(n.data()).map(|(a, b)| a + b).collect();
        let shape = t.shape().to_vec();
        store.set(ParamId(i), Tensor::new(&shape, data).unwrap()).unwrap();
    }
}

fn stream_features(den: &Denoiser, y: &Tensor) -> Result<Tensor> {
    let (lines, pixels) = (y.shape()[0], y.shape()[1]);
    let mut s = den.stream(pixels)?;
    let mut out = Vec::with_capacity(lines);
    for l in 0..lines {
        out.push(s.step(den, &y.slice_outer(l, 1)?)?);
    }
    Tensor::concat_outer(&out)
}

fn streaming_equivalence() -> Check {
    let mut r = rng(1);
    let mut worst = 0.0f64;
    for trial in 0..50 {
        let backend = Backend::ALL[trial % 3];
        let bands = r.random_range(1..=8);
        let cfg = toy_denoiser(bands, r.random_range(2..=6), backend, r.random_range(1..=4));
        let mut den = Denoiser::new(cfg, trial as u64)?;
        perturb(den.params_mut(), 100 + trial as u64, 0.05);
        let lines = r.random_range(1..=32);
        let cols = r.random_range(4..=16);
        let y = Tensor::uniform(&[lines, cols, bands], 0.0, 1.0, &mut r);
        let batch = den.forward_batch(&y)?;
        let streamed = stream_features(&den, &y)?;
        worst = worst.max(batch.max_abs_diff(&streamed));
    }
    Ok((worst <= 1e-10, format!("max |stream - batch| = {worst:.2e} over 50 configs")))
}

fn causality() -> Check {
    let mut r = rng(2);
    let mut broken = 0;
    for trial in 0..20 {
        let backend = Backend::ALL[trial % 3];
        let cfg = MixtureConfig {
            members: 2,
            denoiser: toy_denoiser(3, 4, backend, 2),
            ..MixtureConfig::default()
        };
        let mut mix = Mixture::new(cfg, 50 + trial as u64)?;
        for (i, m) in mix.members.iter_mut().enumerate() {
            perturb(m.params_mut(), 200 + 10 * trial as u64 + i as u64, 0.05);
        }
        let lines = r.random_range(2..=16);
        let y = Tensor::uniform(&[lines, 8, 3], 0.0, 1.0, &mut r);
        let full = mix.denoise_batch(&y, &[0, 1])?;
        let cut = r.random_range(1..lines);
        let part = mix.denoise_batch(&y.slice_outer(0, cut)?, &[0, 1])?;
        if !part.bitwise_eq(&full.slice_outer(0, cut)?) {
            broken += 1;
        }
    }
    Ok((broken == 0, format!("{broken} of 20 truncated runs changed a prefix output")))
}

fn constant_memory() -> Check {
    let den = Denoiser::new(DenoiserConfig::full_size(66), 7)?;
    let p = study::state_probe(&den, 1000, 16, 4096, 3)?;
    Ok((
        p.early_bytes == p.late_bytes,
        format!(
            "stream state {} bytes after {} lines, {} bytes after {} lines",
            p.early_bytes, p.early_lines, p.late_bytes, p.late_lines
        ),
    ))
}

fn weighted_sum(g: &mut Graph, y: Var) -> Result<Var> {
    let r = Tensor::from_fn(g.shape(y), |i| ((i * 7919) % 13) as f64 / 13.0 - 0.4);
    let r = g.constant(r)?;
    let m = g.mul(y, r)?;
    g.sum(m)
}

/// Worst relative error over the input and every parameter of a layer.
fn layer_err(store: &ParamStore, x: &Tensor, f: impl Fn(&mut Graph, &Bound, Var) -> Result<Var>) -> Result<f64> {
    let mut inputs = vec![x.clone()];
    inputs.extend(store.entries().iter().map(|e| (*e.value).clone()));
    let rep = check(
        &inputs,
        |g, v| {
            let p = Bound::from_vars(v[1..].to_vec());
            let y = f(g, &p, v[0])?;
            weighted_sum(g, y)
        },
        1e-5,
        Some(24),
    )?;
    Ok(rep.max_rel_err)
}

fn gradients() -> Check {
    let mut r = rng(4);
    let x = Tensor::uniform(&[1, 8, 4], -1.0, 1.0, &mut r);
    let mut errs: Vec<(String, f64)> = Vec::new();
    let mut layer = |name: &str, build: &dyn Fn(&mut ParamStore, &mut ChaCha8Rng) -> LayerFn| -> Result<()> {
        let mut s = ParamStore::new();
        let mut lr = rng(errs.len() as u64 + 10);
        let f = build(&mut s, &mut lr);
        perturb(&mut s, errs.len() as u64 + 40, 0.3);
        errs.push((name.into(), layer_err(&s, &x, f)?));
        Ok(())
    };
    layer("conv", &|s, r| {
        let c = Conv1d::new(s, r, "c", 4, 6, 3, 1, ConvMode::Same, true);
        Box::new(move |g, p, v| c.forward(g, p, v))
    })?;
    layer("conv-grouped", &|s, r| {
        let c = Conv1d::new(s, r, "c", 4, 4, 3, 2, ConvMode::Same, true);
        Box::new(move |g, p, v| c.forward(g, p, v))
    })?;
    layer("down", &|s, r| {
        let c = Conv1d::new(s, r, "d", 4, 6, 0, 1, ConvMode::Down, true);
        Box::new(move |g, p, v| c.forward(g, p, v))
    })?;
    layer("up", &|s, r| {
        let c = Conv1d::new(s, r, "u", 4, 2, 0, 1, ConvMode::Up, true);
        Box::new(move |g, p, v| c.forward(g, p, v))
    })?;
    layer("linear", &|s, r| {
        let l = Linear::new(s, r, "l", 4, 3, true);
        Box::new(move |g, p, v| l.forward(g, p, v))
    })?;
    layer("layernorm", &|s, _| {
        let n = LayerNorm::new(s, "n", 4);
        Box::new(move |g, p, v| n.forward(g, p, v))
    })?;
    layer("channel-attention", &|s, r| {
        let c = ChannelAttention::new(s, r, "ca", 4);
        Box::new(move |g, p, v| c.forward(g, p, v))
    })?;
    layer("simplified-channel-attention", &|s, r| {
        let c = SimplifiedChannelAttention::new(s, r, "sca", 4);
        Box::new(move |g, p, v| c.forward(g, p, v))
    })?;
    layer("simple-gate", &|_, _| Box::new(|g, _, v| simple_gate(g, v)))?;
    layer("dasc", &|s, r| {
        let b = DascBlock::new(s, r, "b", 4);
        Box::new(move |g, p, v| b.forward(g, p, v))
    })?;
    for backend in Backend::ALL {
        layer(&format!("memory-{backend:?}").to_lowercase(), &|s, r| {
            let cfg = MemoryConfig {
                backend,
                state: 3,
                ..MemoryConfig::default()
            };
            let b = MemoryBlock::new(s, r, "m", 4, cfg);
            Box::new(move |g, p, v| {
                let mut st = b.init_state(8);
                b.forward(g, p, v, &mut st)
            })
        })?;
    }
    // Aggregation head over two feature maps derived from the input.
    {
        let agg = Aggregator::new(4, 3, 9);
        let h2 = Tensor::uniform(&[1, 8, 4], -1.0, 1.0, &mut r);
        let y = Tensor::uniform(&[1, 8, 3], 0.0, 1.0, &mut r);
        let mut store = agg.params().clone();
        perturb(&mut store, 77, 0.3);
        let mut inputs = vec![x.clone(), h2, y];
        inputs.extend(store.entries().iter().map(|e| (*e.value).clone()));
        let rep = check(
            &inputs,
            |g, v| {
                let p = Bound::from_vars(v[3..].to_vec());
                let out = agg.forward(g, &p, v[2], &[v[0], v[1]])?;
                weighted_sum(g, out)
            },
            1e-5,
            Some(24),
        )?;
        errs.push(("aggregator".into(), rep.max_rel_err));
    }
    let (worst_name, worst) = errs
        .iter()
        .max_by(|a, b| a.1.total_cmp(&b.1))
        .map(|(n, e)| (n.clone(), *e))
        .unwrap();

    // The full denoiser on an 8x8x4 cube, every parameter tensor probed.
    let mut den = Denoiser::new(toy_denoiser(4, 4, Backend::Mamba, 2), 5)?;
    perturb(den.params_mut(), 88, 0.1);
    let y = Tensor::uniform(&[8, 8, 4], 0.0, 1.0, &mut r);
    let mut inputs = vec![y];
    inputs.extend(den.params().entries().iter().map(|e| (*e.value).clone()));
    let rep = check(
        &inputs,
        |g, v| {
            let p = Bound::from_vars(v[1..].to_vec());
            let mut st = den.init_state(8)?;
            let h = den.forward(g, &p, v[0], &mut st)?;
            weighted_sum(g, h)
        },
        1e-5,
        Some(6),
    )?;
    let e2e = rep.max_rel_err;
    Ok((
        worst <= 1e-4 && e2e <= 1e-3,
        format!(
            "{} layers, worst {worst_name} rel err {worst:.2e}; end-to-end 8x8x4 rel err {e2e:.2e} over {} coordinates",
            errs.len(),
            rep.checked
        ),
    ))
}

/// `p_n = 1 / sum_j exp(λ (j - n))`, summed smallest term first.
fn pmf_oracle(lambda: f64, members: usize) -> Vec<f64> {
    (1..=members)
        .map(|n| {
            let mut terms: Vec<f64> = (1..=members).map(|j| (lambda * (j as f64 - n as f64)).exp()).collect();
            terms.sort_by(f64::total_cmp);
            1.0 / terms.iter().sum::<f64>()
        })
        .collect()
}

/// Upper 1% points of the χ² distribution for 1 to 6 degrees of freedom.
const CHI2_99: [f64; 6] = [6.635, 9.210, 11.345, 13.277, 15.086, 16.812];

fn power_pmf() -> Check {
    let mut worst = 0.0f64;
    let mut uniform = true;
    for lambda in [-50.0, -1.0, 0.0, 1.0, 50.0] {
        for d in [1, 3, 5, 7] {
            let p = cardinality_pmf(lambda, d)?;
            for (a, b) in p.iter().zip(pmf_oracle(lambda, d)) {
                worst = worst.max((a - b).abs());
            }
            if lambda == 0.0 {
                uniform &= p.iter().all(|&v| v == 1.0 / d as f64);
            }
        }
    }
    let mut chi_fail = Vec::new();
    let mut r = rng(5);
    for lambda in [-50.0, -1.0, 0.0, 1.0, 50.0] {
        for d in [3, 5, 7] {
            let pol = PowerPolicy::new(lambda, d)?;
            let mut counts = vec![0usize; d];
            let draws = 30_000;
            for _ in 0..draws {
                counts[pol.sample_cardinality(&mut r) - 1] += 1;
            }
            // Pool bins with expected count below 5 into their neighbour.
            let mut bins: Vec<(f64, f64)> = Vec::new();
            let mut acc = (0.0, 0.0);
            for (c, p) in counts.iter().zip(pol.pmf()) {
                acc.0 += *c as f64;
                acc.1 += p * draws as f64;
                if acc.1 >= 5.0 {
                    bins.push(acc);
                    acc = (0.0, 0.0);
                }
            }
            match bins.last_mut() {
                Some(last) => {
                    last.0 += acc.0;
                    last.1 += acc.1;
                }
                None => bins.push(acc),
            }
            if bins.len() < 2 {
                // A degenerate pmf: every draw must land on the single bin.
                if bins[0].0 as usize != draws {
                    chi_fail.push(format!("λ={lambda} D={d}"));
                }
                continue;
            }
            let chi2: f64 = bins.iter().map(|(o, e)| (o - e) * (o - e) / e).sum();
            if chi2 > CHI2_99[bins.len() - 2] {
                chi_fail.push(format!("λ={lambda} D={d} χ²={chi2:.2}"));
            }
        }
    }
    Ok((
        worst <= 1e-12 && uniform && chi_fail.is_empty(),
        format!(
            "max |pmf - oracle| = {worst:.2e}, λ=0 exactly uniform: {uniform}, χ² rejections: {}",
            if chi_fail.is_empty() { "none".to_string() } else { chi_fail.join(", ") }
        ),
    ))
}

struct Data {
    train: Vec<ImageCube>,
    val: Vec<(ImageCube, ImageCube)>,
    noise: NoiseSpec,
}

fn desk_data() -> Result<Data> {
    let train = (0..8).map(|s| synth_cube(64, 64, 8, s)).collect::<Result<Vec<_>>>()?;
    let clean = (100..104).map(|s| synth_cube(32, 32, 8, s)).collect::<Result<Vec<_>>>()?;
    let noise = NoiseSpec::gaussian(0.0, 25.0, 0);
    let val = validation_set(&clean, &noise, 999)?;
    Ok(Data { train, val, noise })
}

fn desk_train(data: &Data, steps: u64, seed: u64) -> TrainConfig {
    TrainConfig {
        patch_lines: 16,
        patch_cols: 16,
        steps,
        noise: data.noise.clone(),
        seed,
        ..TrainConfig::default()
    }
}

fn fault_mixture(data: &Data) -> Result<Mixture> {
    let mix = Mixture::new(
        MixtureConfig {
            members: 3,
            ..MixtureConfig::default()
        },
        1,
    )?;
    study::train_model(mix, desk_train(data, 2000, 1), &data.train)
}

fn fault_detection(mix: &Mixture, data: &Data) -> Check {
    let r = study::detection_study(mix, &data.val, &DetectionConfig::default())?;
    Ok((r.tpr >= 0.95 && r.fpr <= 0.05 && r.filtered_not_worse >= 0.9, r.to_string()))
}

fn variance_separation(mix: &Mixture, data: &Data) -> Check {
    let pts = study::separation_study(mix, &data.val, &SeparationConfig::default())?;
    let aucs: Vec<Option<f64>> = pts.iter().map(|p| p.auc).collect();
    let first = aucs[0].is_some_and(|a| a >= 0.95);
    let monotone = aucs.windows(2).all(|w| matches!((w[0], w[1]), (Some(a), Some(b)) if b <= a));
    let detail = pts
        .iter()
        .map(|p| {
            format!(
                "p={:.0e}: auc={} ({} faulty / {} healthy)",
                p.probability,
                p.auc.map_or("na".into(), |a| format!("{a:.3}")),
                p.faulty.len(),
                p.healthy.len()
            )
        })
        .collect::<Vec<_>>()
        .join(", ");
    Ok((first && monotone, detail))
}

fn efficacy(data: &Data) -> Check {
    let clean_val: Vec<_> = data.val.iter().take(2).cloned().collect();
    let noisy = evaluate_identity(&clean_val)?.psnr;
    let baseline = study::train_model(ConvBaseline::new(8, 16, 5), desk_train(data, 4000, 1), &data.train)?;
    let base_gain = evaluate_model(&baseline, &clean_val)?.psnr - noisy;
    let mix = Mixture::new(
        MixtureConfig {
            members: 2,
            ..MixtureConfig::default()
        },
        1,
    )?;
    let mix = study::train_model(mix, desk_train(data, 4000, 1), &data.train)?;
    let gain = evaluate_mixture(&mix, &clean_val, &[0, 1], FilterMode::Filtered)?.psnr - noisy;
    Ok((
        gain >= 6.0 && base_gain >= 4.0,
        format!("noisy {noisy:.2} dB; mixture +{gain:.2} dB (need 6); conv baseline +{base_gain:.2} dB (need 4)"),
    ))
}

fn power_trend(data: &Data) -> Check {
    let base = Mixture::new(
        MixtureConfig {
            members: 2,
            ..MixtureConfig::default()
        },
        0,
    )?;
    // Two validation cubes keep the sweep affordable.
    let val: Vec<_> = data.val.iter().take(2).cloned().collect();
    let runs = study::power_study(
        &base,
        &data.train,
        &val,
        &desk_train(data, POWER_STEPS, 0),
        &[-1.0, 1.0],
        &[11, 12, 13],
        |_| {},
    )?;
    let neg = study::mean_curve(&runs, -1.0);
    let pos = study::mean_curve(&runs, 1.0);
    let d = neg.len();
    Ok((
        neg[0] > pos[0] && pos[d - 1] > neg[d - 1],
        format!(
            "mean PSNR at 1 active: λ=-1 {:.2} vs λ=+1 {:.2}; at {d} active: λ=-1 {:.2} vs λ=+1 {:.2}",
            neg[0],
            pos[0],
            neg[d - 1],
            pos[d - 1]
        ),
    ))
}

const POWER_STEPS: u64 = 2000;

fn subset_consistency() -> Check {
    let cfg = MixtureConfig {
        members: 3,
        denoiser: toy_denoiser(4, 4, Backend::Mamba, 2),
        ..MixtureConfig::default()
    };
    let mut mix = Mixture::new(cfg, 3)?;
    for (i, m) in mix.members.iter_mut().enumerate() {
        perturb(m.params_mut(), 300 + i as u64, 0.05);
    }
    let fault = study::pick_large_fault(&mix, 1, 10.0, &mut rng(6))?;
    let faulty = study::apply_fault(&mix, &fault)?;
    let reduced = mix.subset(&[0, 2])?;
    let y = synth_cube(12, 8, 4, 9)?;
    let mut a = faulty.stream(8, FilterMode::Filtered)?;
    let mut b = reduced.stream(8, FilterMode::Filtered)?;
    let (mut excluded, mut identical) = (0, 0);
    for l in 0..y.lines() {
        let oa = a.step(&faulty, &y.line(l), &[0, 1, 2])?;
        let ob = b.step(&reduced, &y.line(l), &[0, 1])?;
        excluded += (oa.used == [0, 2]) as usize;
        identical += oa.line.bitwise_eq(&ob.line) as usize;
    }

    let data = vec![synth_cube(16, 16, 4, 10)?];
    let tc = TrainConfig {
        patch_lines: 8,
        patch_cols: 8,
        ..TrainConfig::default()
    };
    let mut t = Trainer::new(mix.clone(), tc)?;
    let batch = t.draw_batch(&data)?;
    let before = t.model.clone();
    t.step_on(&batch, &[0, 3])?;
    let batch = t.draw_batch(&data)?;
    t.step_on(&batch, &[2, 3])?;
    let untouched = t.model.members[1].params().bitwise_eq(before.members[1].params());
    let moved = !t.model.members[0].params().bitwise_eq(before.members[0].params())
        && !t.model.members[2].params().bitwise_eq(before.members[2].params());
    Ok((
        excluded == y.lines() && identical == y.lines() && untouched && moved,
        format!(
            "faulty member excluded on {excluded}/{} lines, bitwise equal to the reduced mixture on {identical}; \
             unsampled member untouched: {untouched}, sampled members updated: {moved}",
            y.lines()
        ),
    ))
}

fn latency() -> Check {
    let mut cfg = MixtureConfig {
        members: 5,
        ..MixtureConfig::default()
    };
    cfg.denoiser = DenoiserConfig::full_size(66);
    let mix = Mixture::new(cfg, 0)?;
    let r = study::bench(&mix, 1000, 3, 1, 1, 0)?;
    for line in r.to_string().lines() {
        println!("    bench {line}");
    }
    Ok((
        r.mean_ms.is_finite() && r.p95_ms.is_finite() && r.state_bytes_line10 == r.state_bytes_last,
        format!(
            "mean {:.1} ms, p95 {:.1} ms per line against the {:.2} ms reference (informational)",
            r.mean_ms,
            r.p95_ms,
            study::REFERENCE_LINE_MS
        ),
    ))
}

fn main() -> ExitCode {
    let only = std::env::var("ACCEPTANCE_ONLY")
        .ok()
        .map(|s| s.split(',').filter_map(|v| v.trim().parse().ok()).collect());
    let mut suite = Suite {
        only,
        failed: Vec::new(),
    };
    suite.run(1, "streaming equivalence", 60.0, streaming_equivalence);
    suite.run(2, "causality", 60.0, causality);
    suite.run(3, "constant memory", 120.0, constant_memory);
    suite.run(4, "gradient correctness", 300.0, gradients);
    suite.run(5, "power pmf", 60.0, power_pmf);
    if [6, 7, 8, 9].iter().any(|&n| suite.wants(n)) {
        let data = desk_data().expect("procedural cubes");
        if suite.wants(6) || suite.wants(7) {
            let t0 = Instant::now();
            let mix = fault_mixture(&data);
            let train_s = t0.elapsed().as_secs_f64();
            match mix {
                Ok(mix) => {
                    println!("    fault mixture trained in {train_s:.0}s");
                    suite.run(6, "fault detection", 1800.0 - train_s, || fault_detection(&mix, &data));
                    suite.run(7, "variance separation", 900.0, || variance_separation(&mix, &data));
                }
                Err(e) => {
                    let msg = format!("training failed: {e}");
                    suite.run(6, "fault detection", 1800.0, || Ok((false, msg.clone())));
                    suite.run(7, "variance separation", 900.0, || Ok((false, msg)));
                }
            }
        }
        suite.run(8, "denoising efficacy", 2700.0, || efficacy(&data));
        suite.run(9, "power tradeoff", 5400.0, || power_trend(&data));
    }
    suite.run(10, "fault and subset consistency", 60.0, subset_consistency);
    suite.run(11, "latency report", 600.0, latency);

    if suite.failed.is_empty() {
        println!("acceptance: all selected criteria passed");
    } else {
        println!("acceptance: failed {:?}", suite.failed);
    }
    let strict = std::env::var("ACCEPTANCE_STRICT").is_ok_and(|v| v == "1");
    if strict && !suite.failed.is_empty() {
        ExitCode::FAILURE
    } else {
        ExitCode::SUCCESS
    }
}
