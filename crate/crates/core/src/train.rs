//! Patch-based training: denoiser pretraining with a throwaway linear head,
//! joint mixture training with sampled member subsets, and a plain
//! convolutional baseline. Checkpoints capture the full optimizer and RNG
//! state so a resumed run continues bitwise.

use std::fmt::Write as _;
use std::path::Path;

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::codec::{Reader, Writer};
use crate::cube::ImageCube;
use crate::denoiser::Denoiser;
use crate::error::{Error, Result};
use crate::metrics::{psnr, sam, ssim, QualityReport};
use crate::mixture::{FilterMode, Mixture};
use crate::nn::{Conv1d, ConvMode, Linear};
use crate::noise::{add_noise, NoiseSpec};
use crate::params::{Bound, ParamStore};
use crate::power::PowerPolicy;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Loss {
    Mse,
    L1,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub patch_lines: usize,
    pub patch_cols: usize,
    /// Patches per optimizer step.
    pub batch: usize,
    pub steps: u64,
    pub steps_per_epoch: u64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Power-scalability factor for member subset sampling.
    pub lambda: f64,
    pub loss: Loss,
    pub noise: NoiseSpec,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            patch_lines: 64,
            patch_cols: 64,
            batch: 1,
            steps: 1000,
            steps_per_epoch: 100,
            lr: 5e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            lambda: 0.0,
            loss: Loss::Mse,
            noise: NoiseSpec::gaussian(0.0, 25.0, 0),
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.patch_lines == 0 || self.patch_cols == 0 || self.batch == 0 || self.steps_per_epoch == 0 {
            return Err(Error::Config("patch size, batch and steps per epoch must be positive".into()));
        }
        if !(self.lr > 0.0) || !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::Config("need lr > 0 and Adam betas in [0, 1)".into()));
        }
        self.noise.validate()
    }

    pub fn epoch(&self, step: u64) -> u64 {
        step / self.steps_per_epoch
    }
}

/// Learning rate at `epoch`: `base` until epoch 30, halved there and again
/// every 100 epochs after.
pub fn lr_at(base: f64, epoch: u64) -> f64 {
    if epoch < 30 {
        base
    } else {
        base * 0.5f64.powi(1 + ((epoch - 30) / 100) as i32)
    }
}

/// Adam moments for one parameter store.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub t: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new(store: &ParamStore) -> Self {
        let zeros: Vec<Vec<f64>> = store.entries().iter().map(|e| vec![0.0; e.value.len()]).collect();
        AdamState {
            t: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn update(&mut self, store: &mut ParamStore, grads: &[Tensor], lr: f64, cfg: &TrainConfig) {
        self.t += 1;
        let c1 = 1.0 - cfg.beta1.powi(self.t as i32);
        let c2 = 1.0 - cfg.beta2.powi(self.t as i32);
        for (i, g) in grads.iter().enumerate() {
            let w = store.get_mut(crate::params::ParamId(i)).data_mut();
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (((w, &g), m), v) in w.iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * g;
                *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * g * g;
                *w -= lr * (*m / c1) / ((*v / c2).sqrt() + cfg.eps);
            }
        }
    }

    fn encode(&self, w: &mut Writer) {
        w.u64(self.t);
        w.u64(self.m.len() as u64);
        for (m, v) in self.m.iter().zip(&self.v) {
            w.f64s(m);
            w.f64s(v);
        }
    }

    fn decode(r: &mut Reader<'_>, store: &ParamStore) -> Result<Self> {
        let t = r.u64()?;
        let n = r.u64()? as usize;
        if n != store.len() {
            return Err(Error::Format("optimizer state does not match the parameters".into()));
        }
        let (mut m, mut v) = (Vec::with_capacity(n), Vec::with_capacity(n));
        for e in store.entries() {
            let (a, b) = (r.f64s()?, r.f64s()?);
            if a.len() != e.value.len() || b.len() != e.value.len() {
                return Err(Error::Format(format!("optimizer moments for {} have the wrong size", e.name)));
            }
            m.push(a);
            v.push(b);
        }
        Ok(AdamState { t, m, v })
    }
}

/// Something the trainer can optimize: a list of parameter groups and a
/// differentiable clean-image estimate.
pub trait Model: Clone {
    const KIND: u8;

    fn groups(&self) -> Vec<&ParamStore>;

    fn group_mut(&mut self, i: usize) -> &mut ParamStore;

    /// Groups that take part in the next step.
    fn sample_groups(&self, _cfg: &TrainConfig, _rng: &mut ChaCha8Rng) -> Result<Vec<usize>> {
        Ok((0..self.groups().len()).collect())
    }

    /// Clean estimate for `y: [lines, pixels, bands]`. `p[i]` is bound for
    /// exactly the groups that take part.
    fn estimate(&self, g: &mut Graph, p: &[Option<Bound>], y: Var) -> Result<Var>;

    fn encode(&self, w: &mut Writer);

    fn decode(r: &mut Reader<'_>) -> Result<Self>;

    /// Inference over a whole cube with every group, as one batch.
    fn denoise(&self, y: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let p = self
            .groups()
            .iter()
            .map(|s| s.bind(&mut g, false).map(Some))
            .collect::<Result<Vec<_>>>()?;
        let yv = g.constant(y.clone())?;
        let x = self.estimate(&mut g, &p, yv)?;
        Ok(g.value(x).clone())
    }
}

/// A denoiser with a temporary linear head mapping features to a noise
/// estimate.
#[derive(Clone, Debug)]
pub struct Pretrain {
    pub denoiser: Denoiser,
    head: Linear,
    head_params: ParamStore,
}

impl Pretrain {
    pub fn new(denoiser: Denoiser, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x4845_4144);
        let mut head_params = ParamStore::new();
        let c = denoiser.config();
        let head = Linear::new(&mut head_params, &mut rng, "head", c.features, c.bands, true);
        Pretrain {
            denoiser,
            head,
            head_params,
        }
    }

    /// Drops the head.
    pub fn into_denoiser(self) -> Denoiser {
        self.denoiser
    }
}

impl Model for Pretrain {
    const KIND: u8 = 0;

    fn groups(&self) -> Vec<&ParamStore> {
        vec![self.denoiser.params(), &self.head_params]
    }

    fn group_mut(&mut self, i: usize) -> &mut ParamStore {
        match i {
            0 => self.denoiser.params_mut(),
            _ => &mut self.head_params,
        }
    }

    fn estimate(&self, g: &mut Graph, p: &[Option<Bound>], y: Var) -> Result<Var> {
        let pixels = g.shape(y)[1];
        let mut state = self.denoiser.init_state(pixels)?;
        let h = self.denoiser.forward(g, bound(p, 0)?, y, &mut state)?;
        let n = self.head.forward(g, bound(p, 1)?, h)?;
        g.sub(y, n)
    }

    fn encode(&self, w: &mut Writer) {
        self.denoiser.encode(w);
        self.head_params.encode(w);
    }

    fn decode(r: &mut Reader<'_>) -> Result<Self> {
        let denoiser = Denoiser::decode(r)?;
        let mut out = Pretrain::new(denoiser, 0);
        let params = ParamStore::decode(r)?;
        out.head_params.check_layout(&params)?;
        out.head_params = params;
        Ok(out)
    }
}

fn bound(p: &[Option<Bound>], i: usize) -> Result<&Bound> {
    p.get(i)
        .and_then(Option::as_ref)
        .ok_or_else(|| Error::Config(format!("parameter group {i} is not active")))
}

/// Members are groups `0..D`, the aggregator is group `D`. Each step trains
/// a sampled member subset plus the aggregator.
impl Model for Mixture {
    const KIND: u8 = 1;

    fn groups(&self) -> Vec<&ParamStore> {
        let mut v: Vec<&ParamStore> = self.members.iter().map(|m| m.params()).collect();
        v.push(self.aggregator.params());
        v
    }

    fn group_mut(&mut self, i: usize) -> &mut ParamStore {
        if i < self.members.len() {
            self.members[i].params_mut()
        } else {
            self.aggregator.params_mut()
        }
    }

    fn sample_groups(&self, cfg: &TrainConfig, rng: &mut ChaCha8Rng) -> Result<Vec<usize>> {
        let mut ids = PowerPolicy::new(cfg.lambda, self.members.len())?.sample_subset(rng);
        ids.push(self.members.len());
        Ok(ids)
    }

    fn estimate(&self, g: &mut Graph, p: &[Option<Bound>], y: Var) -> Result<Var> {
        let pixels = g.shape(y)[1];
        let mut feats = Vec::new();
        for (d, m) in self.members.iter().enumerate() {
            if let Some(Some(pb)) = p.get(d) {
                let mut state = m.init_state(pixels)?;
                feats.push(m.forward(g, pb, y, &mut state)?);
            }
        }
        self.aggregator.forward(g, bound(p, self.members.len())?, y, &feats)
    }

    fn encode(&self, w: &mut Writer) {
        w.bytes(&self.to_bytes());
    }

    fn decode(r: &mut Reader<'_>) -> Result<Self> {
        Mixture::from_bytes(r.bytes()?)
    }
}

/// Three line-wise convolutions with ReLUs predicting the noise; no memory
/// across lines. Reference point for the mixture's gains.
#[derive(Clone, Debug)]
pub struct ConvBaseline {
    params: ParamStore,
    bands: usize,
    features: usize,
    convs: [Conv1d; 3],
}

impl ConvBaseline {
    pub fn new(bands: usize, features: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut s = ParamStore::new();
        let convs = [
            Conv1d::new(&mut s, &mut rng, "base.0", bands, features, 3, 1, ConvMode::Same, true),
            Conv1d::new(&mut s, &mut rng, "base.1", features, features, 3, 1, ConvMode::Same, true),
            Conv1d::new(&mut s, &mut rng, "base.2", features, bands, 3, 1, ConvMode::Same, true),
        ];
        ConvBaseline {
            params: s,
            bands,
            features,
            convs,
        }
    }
}

impl Model for ConvBaseline {
    const KIND: u8 = 2;

    fn groups(&self) -> Vec<&ParamStore> {
        vec![&self.params]
    }

    fn group_mut(&mut self, _: usize) -> &mut ParamStore {
        &mut self.params
    }

    fn estimate(&self, g: &mut Graph, p: &[Option<Bound>], y: Var) -> Result<Var> {
        let p = bound(p, 0)?;
        let a = self.convs[0].forward(g, p, y)?;
        let a = g.relu(a)?;
        let a = self.convs[1].forward(g, p, a)?;
        let a = g.relu(a)?;
        let n = self.convs[2].forward(g, p, a)?;
        g.sub(y, n)
    }

    fn encode(&self, w: &mut Writer) {
        w.u64(self.bands as u64);
        w.u64(self.features as u64);
        self.params.encode(w);
    }

    fn decode(r: &mut Reader<'_>) -> Result<Self> {
        let (bands, features) = (r.u64()? as usize, r.u64()? as usize);
        let mut out = ConvBaseline::new(bands, features, 0);
        let params = ParamStore::decode(r)?;
        out.params.check_layout(&params)?;
        out.params = params;
        Ok(out)
    }
}

/// One noisy/clean training pair, each `[lines, pixels, bands]`.
#[derive(Clone, Debug)]
pub struct Sample {
    pub noisy: Tensor,
    pub clean: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepRecord {
    pub step: u64,
    pub epoch: u64,
    pub lr: f64,
    pub loss: f64,
    pub groups: Vec<usize>,
}

pub struct Trainer<M: Model> {
    pub cfg: TrainConfig,
    pub model: M,
    adam: Vec<AdamState>,
    rng: ChaCha8Rng,
    step: u64,
}

const MAGIC: &[u8; 4] = b"PBCK";
const VERSION: u32 = 1;

impl<M: Model> Trainer<M> {
    pub fn new(model: M, cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let adam = model.groups().into_iter().map(AdamState::new).collect();
        let rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        Ok(Trainer {
            cfg,
            model,
            adam,
            rng,
            step: 0,
        })
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn lr(&self) -> f64 {
        lr_at(self.cfg.lr, self.cfg.epoch(self.step))
    }

    /// Draws `batch` random patches from `data` and noises them.
    pub fn draw_batch(&mut self, data: &[ImageCube]) -> Result<Vec<Sample>> {
        draw_batch(&mut self.rng, data, &self.cfg)
    }

    /// Loss on `batch` with the given groups active, without updating.
    pub fn batch_loss(&self, batch: &[Sample], groups: &[usize]) -> Result<f64> {
        let mut g = Graph::new();
        let (loss, _) = self.build_loss(&mut g, batch, groups, false)?;
        Ok(g.value(loss).item())
    }

    fn build_loss(
        &self,
        g: &mut Graph,
        batch: &[Sample],
        groups: &[usize],
        trainable: bool,
    ) -> Result<(Var, Vec<Option<Bound>>)> {
        let stores = self.model.groups();
        let mut p: Vec<Option<Bound>> = (0..stores.len()).map(|_| None).collect();
        for &i in groups {
            p[i] = Some(stores[i].bind(g, trainable)?);
        }
        let mut total = None;
        for s in batch {
            let y = g.constant(s.noisy.clone())?;
            let x = g.constant(s.clean.clone())?;
            let est = self.model.estimate(g, &p, y)?;
            let d = g.sub(est, x)?;
            let per = match self.cfg.loss {
                Loss::Mse => g.mul(d, d)?,
                Loss::L1 => {
                    let pos = g.relu(d)?;
                    let nd = g.neg(d)?;
                    let neg = g.relu(nd)?;
                    g.add(pos, neg)?
                }
            };
            let l = g.mean(per)?;
            total = Some(match total {
                None => l,
                Some(t) => g.add(t, l)?,
            });
        }
        let total = total.ok_or_else(|| Error::Config("empty batch".into()))?;
        Ok((g.scale(total, 1.0 / batch.len() as f64)?, p))
    }

    /// One optimizer step on `batch` over `groups`; other groups are not
    /// touched at all, moments included.
    pub fn step_on(&mut self, batch: &[Sample], groups: &[usize]) -> Result<StepRecord> {
        let diverged = |step, e: Error| match e {
            Error::NonFinite { op } => Error::Diverged {
                step: step as usize,
                detail: format!("non-finite value in {op}"),
            },
            e => e,
        };
        let mut g = Graph::new();
        let (loss, p) = self.build_loss(&mut g, batch, groups, true).map_err(|e| diverged(self.step, e))?;
        let loss_value = g.value(loss).item();
        if !loss_value.is_finite() {
            return Err(Error::Diverged {
                step: self.step as usize,
                detail: format!("loss is {loss_value}"),
            });
        }
        let grads = g.backward(loss).map_err(|e| diverged(self.step, e))?;
        let lr = self.lr();
        for &i in groups {
            let b = p[i].as_ref().expect("bound group");
            let gs: Vec<Tensor> = b.vars().iter().map(|&v| grads.get(v)).collect();
            if let Some(bad) = gs.iter().position(|t| !t.all_finite()) {
                return Err(Error::Diverged {
                    step: self.step as usize,
                    detail: format!("non-finite gradient for parameter {} of group {i}", bad),
                });
            }
            self.adam[i].update(self.model.group_mut(i), &gs, lr, &self.cfg);
        }
        let record = StepRecord {
            step: self.step,
            epoch: self.cfg.epoch(self.step),
            lr,
            loss: loss_value,
            groups: groups.to_vec(),
        };
        self.step += 1;
        Ok(record)
    }

    /// Samples groups and a batch, then steps.
    pub fn step(&mut self, data: &[ImageCube]) -> Result<StepRecord> {
        let groups = self.model.sample_groups(&self.cfg, &mut self.rng)?;
        let batch = self.draw_batch(data)?;
        self.step_on(&batch, &groups)
    }

    /// Steps until `cfg.steps`, calling `on_step` after each.
    pub fn run(&mut self, data: &[ImageCube], mut on_step: impl FnMut(&Self, &StepRecord)) -> Result<()> {
        while self.step < self.cfg.steps {
            let rec = self.step(data)?;
            on_step(self, &rec);
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::new();
        w.magic(MAGIC, VERSION);
        w.u8(M::KIND);
        w.str(&toml::to_string(&self.cfg).expect("config serializes"));
        w.u64(self.step);
        w.bytes(&self.rng.get_seed());
        w.u64(self.rng.get_stream());
        w.u128(self.rng.get_word_pos());
        self.model.encode(&mut w);
        for a in &self.adam {
            a.encode(&mut w);
        }
        w.finish()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes);
        r.magic(MAGIC, VERSION)?;
        let kind = r.u8()?;
        if kind != M::KIND {
            return Err(Error::Format(format!("checkpoint holds model kind {kind}, expected {}", M::KIND)));
        }
        let cfg: TrainConfig =
            toml::from_str(&r.str()?).map_err(|e| Error::Format(format!("checkpoint config: {e}")))?;
        let step = r.u64()?;
        let seed: [u8; 32] = r
            .bytes()?
            .try_into()
            .map_err(|_| Error::Format("bad RNG seed length".into()))?;
        let mut rng = ChaCha8Rng::from_seed(seed);
        rng.set_stream(r.u64()?);
        rng.set_word_pos(r.u128()?);
        let model = M::decode(&mut r)?;
        let adam = model
            .groups()
            .into_iter()
            .map(|s| AdamState::decode(&mut r, s))
            .collect::<Result<Vec<_>>>()?;
        r.finish()?;
        Ok(Trainer {
            cfg,
            model,
            adam,
            rng,
            step,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        Ok(std::fs::write(path, self.to_bytes())?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

/// Model kind stored in a checkpoint, without decoding it.
pub fn checkpoint_kind(bytes: &[u8]) -> Result<u8> {
    let mut r = Reader::new(bytes);
    r.magic(MAGIC, VERSION)?;
    r.u8()
}

/// A mixture from either a bare mixture file or a mixture training checkpoint.
pub fn load_mixture(path: &Path) -> Result<Mixture> {
    let bytes = std::fs::read(path)?;
    if bytes.starts_with(MAGIC) {
        return Ok(Trainer::<Mixture>::from_bytes(&bytes)?.model);
    }
    Mixture::from_bytes(&bytes)
}

/// A denoiser from a bare denoiser file or a pretraining checkpoint.
pub fn load_denoiser(path: &Path) -> Result<Denoiser> {
    let bytes = std::fs::read(path)?;
    if bytes.starts_with(MAGIC) {
        return Ok(Trainer::<Pretrain>::from_bytes(&bytes)?.model.into_denoiser());
    }
    Denoiser::from_bytes(&bytes)
}

pub fn draw_batch(rng: &mut ChaCha8Rng, data: &[ImageCube], cfg: &TrainConfig) -> Result<Vec<Sample>> {
    if data.is_empty() {
        return Err(Error::Config("no training cubes".into()));
    }
    (0..cfg.batch)
        .map(|_| {
            let cube = &data[rng.random_range(0..data.len())];
            let (pl, pc) = (cfg.patch_lines.min(cube.lines()), cfg.patch_cols.min(cube.cols()));
            let l0 = rng.random_range(0..=cube.lines() - pl);
            let c0 = rng.random_range(0..=cube.cols() - pc);
            let clean = cube.patch(l0, c0, pl, pc)?;
            let spec = NoiseSpec {
                seed: rng.next_u64(),
                ..cfg.noise.clone()
            };
            let noisy = add_noise(&clean, &spec)?;
            Ok(Sample {
                noisy: noisy.to_tensor(),
                clean: clean.to_tensor(),
            })
        })
        .collect()
}

/// Held-out pairs: each clean cube with its noisy version under `noise`
/// reseeded per cube from `seed`.
pub fn validation_set(clean: &[ImageCube], noise: &NoiseSpec, seed: u64) -> Result<Vec<(ImageCube, ImageCube)>> {
    clean
        .iter()
        .enumerate()
        .map(|(i, c)| {
            let spec = NoiseSpec {
                seed: seed.wrapping_add(i as u64),
                ..noise.clone()
            };
            Ok((c.clone(), add_noise(c, &spec)?))
        })
        .collect()
}

/// Quality averaged over a validation set.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Evaluation {
    pub psnr: f64,
    pub ssim: Option<f64>,
    pub sam: f64,
}

fn average(reports: &[QualityReport]) -> Evaluation {
    let n = reports.len() as f64;
    let ssim = reports.iter().map(|r| r.ssim).collect::<Option<Vec<_>>>().map(|v| v.iter().sum::<f64>() / n);
    Evaluation {
        psnr: reports.iter().map(|r| r.psnr).sum::<f64>() / n,
        ssim,
        sam: reports.iter().map(|r| r.sam).sum::<f64>() / n,
    }
}

/// Streams each noisy cube through `active` members line by line.
pub fn evaluate_mixture(
    mix: &Mixture,
    set: &[(ImageCube, ImageCube)],
    active: &[usize],
    mode: FilterMode,
) -> Result<Evaluation> {
    let mut reports = Vec::with_capacity(set.len());
    for (clean, noisy) in set {
        let mut s = mix.stream(noisy.cols(), mode)?;
        let mut out = Vec::with_capacity(noisy.lines());
        for l in 0..noisy.lines() {
            out.push(s.step(mix, &noisy.line(l), active)?.line);
        }
        let den = ImageCube::from_tensor(Tensor::concat_outer(&out)?)?;
        reports.push(QualityReport::compute(clean, &den)?);
    }
    Ok(average(&reports))
}

/// Batch evaluation of any model over a validation set.
pub fn evaluate_model<M: Model>(model: &M, set: &[(ImageCube, ImageCube)]) -> Result<Evaluation> {
    let reports = set
        .iter()
        .map(|(clean, noisy)| {
            let den = ImageCube::from_tensor(model.denoise(&noisy.to_tensor())?)?;
            QualityReport::compute(clean, &den)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(average(&reports))
}

/// Quality of the noisy inputs themselves.
pub fn evaluate_identity(set: &[(ImageCube, ImageCube)]) -> Result<Evaluation> {
    let reports = set
        .iter()
        .map(|(c, n)| {
            Ok(QualityReport {
                psnr: psnr(c, n, 1.0)?,
                ssim: ssim(c, n, 1.0).ok(),
                sam: sam(c, n)?.0,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(average(&reports))
}

/// CSV metrics log: one record per evaluation.
#[derive(Clone, Debug, Default)]
pub struct MetricsLog {
    text: String,
}

impl MetricsLog {
    pub const HEADER: &'static str = "epoch,step,active,psnr,ssim,sam";

    pub fn new() -> Self {
        MetricsLog {
            text: format!("{}\n", Self::HEADER),
        }
    }

    pub fn record(&mut self, epoch: u64, step: u64, active: usize, e: &Evaluation) {
        let ssim = e.ssim.map_or("na".to_string(), |v| format!("{v:.6}"));
        let _ = writeln!(self.text, "{epoch},{step},{active},{:.4},{ssim},{:.6}", e.psnr, e.sam);
    }

    pub fn as_str(&self) -> &str {
        &self.text
    }
}
