use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde::Deserialize;

use pushbroom::cube::{header_path, CubeReader, CubeWriter, Dtype, ImageCube};
use pushbroom::denoiser::Denoiser;
use pushbroom::fault::{inject, FaultModel, FaultSpec};
use pushbroom::metrics::QualityReport;
use pushbroom::mixture::{Aggregator, FilterMode, Mixture, MixtureConfig, DEFAULT_TAU};
use pushbroom::noise::{add_noise, NoiseSpec};
use pushbroom::power::{prefix, Schedule};
use pushbroom::study::{self, DetectionConfig, SeparationConfig};
use pushbroom::synth::synth_cube;
use pushbroom::train::{
    evaluate_mixture, load_denoiser, load_mixture, validation_set, MetricsLog, Pretrain, TrainConfig, Trainer,
};

/// Streaming hyperspectral denoising for pushbroom imagers.
#[derive(Parser)]
#[command(name = "pushbroom", version)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Write a procedural test cube.
    Synth {
        #[arg(long)]
        lines: usize,
        #[arg(long)]
        cols: usize,
        #[arg(long)]
        bands: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value = "f32le", value_parser = parse_dtype)]
        dtype: Dtype,
    },
    /// Corrupt a cube with the noise described by a TOML spec.
    Noise {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        spec: PathBuf,
        /// Overrides the seed in the spec.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a mixture of denoisers.
    Train(TrainArgs),
    /// Pretrain a single denoiser with a temporary linear head.
    Pretrain(TrainArgs),
    /// Denoise a cube line by line.
    Denoise(DenoiseArgs),
    /// Compare a cube against its clean reference.
    Eval {
        #[arg(long)]
        clean: PathBuf,
        #[arg(long)]
        test: PathBuf,
    },
    /// Per-line latency and stream-state size.
    Bench(BenchArgs),
    /// Fault injection studies on a trained mixture.
    FaultStudy(FaultStudyArgs),
    /// PSNR against the number of active denoisers for trained checkpoints.
    PowerStudy(PowerStudyArgs),
}

#[derive(Args)]
struct TrainArgs {
    /// TOML file with `[mixture]` and `[train]` tables.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Directory of training cubes, or a single cube.
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    steps: Option<u64>,
    /// Continue from a checkpoint written by the same command.
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Pretrained member checkpoints, one per member.
    #[arg(long, value_delimiter = ',')]
    init: Vec<PathBuf>,
    /// Clean validation cubes; enables the metrics log.
    #[arg(long)]
    val: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    eval_every: u64,
}

#[derive(Args)]
struct DenoiseArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Run the first N denoisers on every line.
    #[arg(long, conflicts_with = "budget")]
    active: Option<usize>,
    /// Power schedule mapping line ranges to active counts.
    #[arg(long)]
    budget: Option<PathBuf>,
    /// Per-weight fault probability applied to every member.
    #[arg(long)]
    fault_prob: Option<f64>,
    #[arg(long, default_value_t = 0)]
    fault_seed: u64,
    #[arg(long, default_value = "bitflip-msb")]
    fault_model: FaultModel,
    #[arg(long, default_value_t = DEFAULT_TAU)]
    tau: f64,
    #[arg(long, default_value_t = 1)]
    threads: usize,
    /// Aggregate every member with finite features, ignoring the detector.
    #[arg(long)]
    unfiltered: bool,
    /// Fault events, one per flagged member and line. Defaults to stderr.
    #[arg(long)]
    fault_log: Option<PathBuf>,
    /// Directory for the injected-fault manifests, one file per member.
    #[arg(long)]
    manifests: Option<PathBuf>,
}

#[derive(Args)]
struct BenchArgs {
    /// Trained mixture; a randomly initialized one is used otherwise.
    #[arg(long)]
    ckpt: Option<PathBuf>,
    #[arg(long, default_value_t = 1000)]
    cols: usize,
    #[arg(long, default_value_t = 66)]
    bands: usize,
    #[arg(long, default_value_t = 512)]
    lines: usize,
    #[arg(long, default_value_t = 2)]
    warmup: usize,
    #[arg(long, default_value_t = 5)]
    members: usize,
    #[arg(long, default_value_t = 96)]
    features: usize,
    #[arg(long, default_value_t = 1)]
    threads: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct FaultStudyArgs {
    #[arg(long)]
    ckpt: PathBuf,
    /// Clean validation cubes; procedural ones matching the model otherwise.
    #[arg(long)]
    val: Option<PathBuf>,
    #[arg(long)]
    noise: Option<PathBuf>,
    #[arg(long, value_delimiter = ',', default_value = "1e-7,5e-7,1e-6")]
    probs: Vec<f64>,
    #[arg(long, default_value_t = 30)]
    trials: usize,
    #[arg(long, default_value_t = DEFAULT_TAU)]
    tau: f64,
    /// Thresholds for the TPR/FPR table.
    #[arg(long, value_delimiter = ',', default_value = "0.001,0.003,0.01,0.03,0.1,0.3")]
    taus: Vec<f64>,
    /// Also run this many single-weight detection trials.
    #[arg(long, default_value_t = 0)]
    detection_trials: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct PowerStudyArgs {
    /// Mixture training checkpoints; λ is read from each.
    #[arg(long, value_delimiter = ',', required = true)]
    ckpt_list: Vec<PathBuf>,
    #[arg(long)]
    val: Option<PathBuf>,
    #[arg(long)]
    noise: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct RunConfig {
    mixture: MixtureConfig,
    train: TrainConfig,
}

fn parse_dtype(s: &str) -> std::result::Result<Dtype, String> {
    match s {
        "f32le" => Ok(Dtype::F32le),
        "f64le" => Ok(Dtype::F64le),
        _ => Err(format!("unknown dtype {s:?}; expected f32le or f64le")),
    }
}

/// Cube payloads in `path`: the file itself, or every file in the directory
/// that has a header sidecar.
fn cube_paths(path: &Path) -> Result<Vec<PathBuf>> {
    if path.is_file() {
        return Ok(vec![path.to_path_buf()]);
    }
    let mut out = Vec::new();
    for entry in fs::read_dir(path).with_context(|| format!("reading {}", path.display()))? {
        let p = entry?.path();
        if p.extension().is_some_and(|e| e == "hdr") || !header_path(&p).exists() {
            continue;
        }
        out.push(p);
    }
    out.sort();
    if out.is_empty() {
        bail!("no cubes with header sidecars in {}", path.display());
    }
    Ok(out)
}

fn load_cubes(path: &Path) -> Result<Vec<ImageCube>> {
    cube_paths(path)?
        .iter()
        .map(|p| ImageCube::load(p).with_context(|| format!("loading {}", p.display())))
        .collect()
}

fn load_noise(path: Option<&Path>) -> Result<NoiseSpec> {
    match path {
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            Ok(NoiseSpec::from_toml(&text)?)
        }
        None => Ok(NoiseSpec::gaussian(0.0, 25.0, 0)),
    }
}

fn validation(mix: &Mixture, val: Option<&Path>, noise: Option<&Path>, seed: u64) -> Result<Vec<(ImageCube, ImageCube)>> {
    let clean = match val {
        Some(p) => load_cubes(p)?,
        None => (0..4)
            .map(|i| synth_cube(32, 32, mix.cfg.denoiser.bands, 100 + i))
            .collect::<pushbroom::Result<_>>()?,
    };
    Ok(validation_set(&clean, &load_noise(noise)?, seed)?)
}

fn read_run_config(args: &TrainArgs) -> Result<RunConfig> {
    let mut cfg: RunConfig = match &args.config {
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            toml::from_str(&text).with_context(|| format!("parsing {}", p.display()))?
        }
        None => RunConfig::default(),
    };
    if let Some(s) = args.seed {
        cfg.train.seed = s;
    }
    if let Some(s) = args.steps {
        cfg.train.steps = s;
    }
    Ok(cfg)
}

fn train(args: TrainArgs) -> Result<()> {
    let data = load_cubes(&args.data)?;
    let mut t = match &args.resume {
        Some(p) => {
            let mut t = Trainer::<Mixture>::load(p).with_context(|| format!("resuming from {}", p.display()))?;
            if let Some(s) = args.steps {
                t.cfg.steps = s;
            }
            t
        }
        None => {
            let cfg = read_run_config(&args)?;
            let seed = cfg.train.seed;
            let mix = if args.init.is_empty() {
                Mixture::new(cfg.mixture, seed)?
            } else {
                let members = args
                    .init
                    .iter()
                    .map(|p| load_denoiser(p).with_context(|| format!("loading {}", p.display())))
                    .collect::<Result<Vec<_>>>()?;
                let d = &cfg.mixture.denoiser;
                let agg = Aggregator::new(d.features, d.bands, seed + members.len() as u64);
                Mixture::from_members(cfg.mixture, members, agg)?
            };
            Trainer::new(mix, cfg.train)?
        }
    };
    let val = match &args.val {
        Some(p) => Some(validation_set(&load_cubes(p)?, &t.cfg.noise, t.cfg.seed ^ 0x5641)?),
        None => None,
    };
    let mut log = MetricsLog::new();
    let mut failure = None;
    let members = t.model.len();
    t.run(&data, |tr, rec| {
        log::info!("step {} epoch {} lr {:.3e} loss {:.4e}", rec.step + 1, rec.epoch, rec.lr, rec.loss);
        let due = args.eval_every > 0 && (rec.step + 1) % args.eval_every == 0;
        if let (true, Some(val), None) = (due, &val, &failure) {
            for n in 1..=members {
                match prefix(n, members).and_then(|a| evaluate_mixture(&tr.model, val, &a, FilterMode::Filtered)) {
                    Ok(e) => log.record(rec.epoch, rec.step + 1, n, &e),
                    Err(e) => failure = Some(e),
                }
            }
        }
    })?;
    if let Some(e) = failure {
        return Err(e.into());
    }
    t.save(&args.out)?;
    if val.is_some() {
        let p = args.out.with_extension("metrics.csv");
        fs::write(&p, log.as_str())?;
        println!("metrics: {}", p.display());
    }
    println!("trained {} steps: {}", t.step_count(), args.out.display());
    Ok(())
}

fn pretrain(args: TrainArgs) -> Result<()> {
    let data = load_cubes(&args.data)?;
    let mut t = match &args.resume {
        Some(p) => {
            let mut t = Trainer::<Pretrain>::load(p)?;
            if let Some(s) = args.steps {
                t.cfg.steps = s;
            }
            t
        }
        None => {
            let cfg = read_run_config(&args)?;
            let den = Denoiser::new(cfg.mixture.denoiser, cfg.train.seed)?;
            Trainer::new(Pretrain::new(den, cfg.train.seed), cfg.train)?
        }
    };
    t.run(&data, |_, rec| {
        log::info!("step {} loss {:.4e}", rec.step + 1, rec.loss);
    })?;
    t.save(&args.out)?;
    println!("pretrained {} steps: {}", t.step_count(), args.out.display());
    Ok(())
}

fn denoise(args: DenoiseArgs) -> Result<()> {
    let mut mix = load_mixture(&args.ckpt).with_context(|| format!("loading {}", args.ckpt.display()))?;
    mix.cfg.tau = args.tau;
    mix.cfg.validate()?;
    if let Some(p) = args.fault_prob {
        if let Some(dir) = &args.manifests {
            fs::create_dir_all(dir)?;
        }
        for (d, den) in mix.members.iter_mut().enumerate() {
            let spec = FaultSpec {
                probability: p,
                model: args.fault_model,
                seed: args.fault_seed.wrapping_add(d as u64),
            };
            let (store, manifest) = inject(den.params(), &spec)?;
            den.set_params(store)?;
            eprintln!("denoiser {d}: {} weights corrupted", manifest.len());
            if let Some(dir) = &args.manifests {
                fs::write(dir.join(format!("denoiser-{d}.faults")), manifest.to_text())?;
            }
        }
    }
    let schedule = match &args.budget {
        Some(p) => Some(Schedule::parse(
            &fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?,
        )?),
        None => None,
    };
    let mut reader = CubeReader::open(&args.input)?;
    let header = reader.header().clone();
    if header.bands != mix.cfg.denoiser.bands {
        bail!(
            "{} has {} bands but the model expects {}",
            args.input.display(),
            header.bands,
            mix.cfg.denoiser.bands
        );
    }
    let mode = if args.unfiltered {
        FilterMode::Unfiltered
    } else {
        FilterMode::Filtered
    };
    let mut stream = mix.stream(header.columns, mode)?;
    stream.set_threads(args.threads);
    let mut writer = CubeWriter::create(&args.out, header.clone())?;
    let mut log: Box<dyn std::io::Write> = match &args.fault_log {
        Some(p) => Box::new(std::io::BufWriter::new(fs::File::create(p)?)),
        None => Box::new(std::io::stderr()),
    };
    let mut line = 0u64;
    let mut flagged = 0usize;
    while let Some(y) = reader.read_line()? {
        let active = match (&schedule, args.active) {
            (Some(s), _) => s.active_for_line(line, mix.len())?,
            (None, Some(n)) => prefix(n, mix.len())?,
            (None, None) => (0..mix.len()).collect(),
        };
        let out = stream.step(&mix, &y, &active)?;
        reader.release();
        for ev in out.events(line) {
            writeln!(log, "{ev}")?;
        }
        flagged += out.report.verdicts.iter().filter(|v| **v != pushbroom::mixture::Verdict::Ok).count();
        writer.write_line(&out.line)?;
        line += 1;
    }
    writer.finish()?;
    log.flush()?;
    log::info!("peak resident input lines: {}", reader.peak_resident_lines());
    println!("denoised {line} lines, {flagged} member-lines flagged: {}", args.out.display());
    Ok(())
}

fn bench(args: BenchArgs) -> Result<()> {
    let mix = match &args.ckpt {
        Some(p) => load_mixture(p)?,
        None => {
            let mut cfg = MixtureConfig {
                members: args.members,
                ..MixtureConfig::default()
            };
            cfg.denoiser.bands = args.bands;
            cfg.denoiser.features = args.features;
            Mixture::new(cfg, args.seed)?
        }
    };
    if mix.cfg.denoiser.bands != args.bands {
        bail!("model expects {} bands, not {}", mix.cfg.denoiser.bands, args.bands);
    }
    let r = study::bench(&mix, args.cols, args.lines, args.warmup, args.threads, args.seed)?;
    println!("{r}");
    let verdict = if r.mean_ms <= study::REFERENCE_LINE_MS {
        "within"
    } else {
        "over"
    };
    println!("realtime: {verdict} the reference line time (informational)");
    Ok(())
}

fn fault_study(args: FaultStudyArgs) -> Result<()> {
    let mix = load_mixture(&args.ckpt)?;
    let set = validation(&mix, args.val.as_deref(), args.noise.as_deref(), args.seed)?;
    let cfg = SeparationConfig {
        probabilities: args.probs.clone(),
        trials: args.trials,
        tau: args.tau,
        seed: args.seed,
        ..SeparationConfig::default()
    };
    println!("# variance separation");
    let points = study::separation_study(&mix, &set, &cfg)?;
    for p in &points {
        println!("{p}");
    }
    println!("# threshold sweep");
    println!("probability,tau,tpr,fpr");
    for p in &points {
        for &tau in &args.taus {
            let (tpr, fpr) = pushbroom::mixture::rates_at(&p.healthy, &p.faulty, tau);
            println!("{:e},{tau},{tpr:.4},{fpr:.4}", p.probability);
        }
    }
    if args.detection_trials > 0 {
        let cfg = DetectionConfig {
            trials: args.detection_trials,
            tau: args.tau,
            seed: args.seed,
            ..DetectionConfig::default()
        };
        println!("# single-weight detection");
        println!("{}", study::detection_study(&mix, &set, &cfg)?);
    }
    Ok(())
}

fn power_study(args: PowerStudyArgs) -> Result<()> {
    println!("checkpoint,lambda,active,psnr");
    for p in &args.ckpt_list {
        let t = Trainer::<Mixture>::load(p).with_context(|| format!("loading {}", p.display()))?;
        let set = validation(&t.model, args.val.as_deref(), args.noise.as_deref(), args.seed)?;
        for (i, v) in study::psnr_by_active(&t.model, &set)?.iter().enumerate() {
            println!("{},{},{},{v:.4}", p.display(), t.cfg.lambda, i + 1);
        }
    }
    Ok(())
}

fn run(cmd: Cmd) -> Result<()> {
    match cmd {
        Cmd::Synth {
            lines,
            cols,
            bands,
            seed,
            out,
            dtype,
        } => {
            synth_cube(lines, cols, bands, seed)?.save(&out, dtype)?;
            println!("wrote {lines}x{cols}x{bands}: {}", out.display());
        }
        Cmd::Noise { input, spec, seed, out } => {
            let mut s = load_noise(Some(&spec))?;
            if let Some(seed) = seed {
                s.seed = seed;
            }
            let x = ImageCube::load(&input)?;
            let dtype = CubeReader::open(&input)?.header().dtype;
            add_noise(&x, &s)?.save(&out, dtype)?;
            println!("wrote {}", out.display());
        }
        Cmd::Train(a) => train(a)?,
        Cmd::Pretrain(a) => pretrain(a)?,
        Cmd::Denoise(a) => denoise(a)?,
        Cmd::Eval { clean, test } => {
            let c = ImageCube::load(&clean)?;
            let t = ImageCube::load(&test)?;
            println!("{}", QualityReport::compute(&c, &t)?);
        }
        Cmd::Bench(a) => bench(a)?,
        Cmd::FaultStudy(a) => fault_study(a)?,
        Cmd::PowerStudy(a) => power_study(a)?,
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli.cmd) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
