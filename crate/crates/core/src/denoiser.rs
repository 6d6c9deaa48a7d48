//! One line denoiser: band projection, shallow refinement, a 1-D U-Net of
//! residual blocks and memory blocks at the two full-resolution stages.
//!
//! The output is a feature map `[lines, pixels, F]`; turning features into
//! a noise estimate is the aggregator's job.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::codec::{Reader, Writer};
use crate::error::{Error, Result};
use crate::nn::{ChannelAttention, Conv1d, ConvMode, DascBlock, LayerNorm};
use crate::params::{Bound, ParamStore};
use crate::ssm::{MemoryBlock, MemoryConfig, StreamState};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PadPolicy {
    /// Reflect-pad lines to a multiple of the U-Net stride and crop after.
    Reflect,
    /// Refuse line widths that are not a multiple of the U-Net stride.
    Reject,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DenoiserConfig {
    pub bands: usize,
    pub features: usize,
    /// Width of each U-Net level relative to `features`, full resolution first.
    pub width_multipliers: Vec<usize>,
    /// Residual blocks before each downsampling step.
    pub encoder_blocks: Vec<usize>,
    /// Residual blocks at the coarsest level.
    pub middle_blocks: usize,
    /// Residual blocks after each upsampling step, listed full resolution first.
    pub decoder_blocks: Vec<usize>,
    pub memory: MemoryConfig,
    pub pad_policy: PadPolicy,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        DenoiserConfig {
            bands: 8,
            features: 16,
            width_multipliers: vec![1, 2, 4],
            encoder_blocks: vec![1, 1],
            middle_blocks: 2,
            decoder_blocks: vec![1, 1],
            memory: MemoryConfig::default(),
            pad_policy: PadPolicy::Reflect,
        }
    }
}

impl DenoiserConfig {
    /// The full-size member configuration: 96 features.
    pub fn full_size(bands: usize) -> Self {
        DenoiserConfig {
            bands,
            features: 96,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let depth = self.width_multipliers.len();
        if self.bands == 0 || self.features == 0 {
            return Err(Error::Config("bands and features must be positive".into()));
        }
        if depth == 0 || self.width_multipliers.contains(&0) {
            return Err(Error::Config("width multipliers must be non-empty and positive".into()));
        }
        if self.encoder_blocks.len() != depth - 1 || self.decoder_blocks.len() != depth - 1 {
            return Err(Error::Config(format!(
                "{depth} levels need {} encoder and decoder block counts",
                depth - 1
            )));
        }
        if self.width_multipliers[0] != 1 {
            return Err(Error::Config("the first width multiplier must be 1".into()));
        }
        if depth == 1 && self.middle_blocks == 0 {
            return Err(Error::Config("a single-level network needs at least one block".into()));
        }
        self.memory.validate()
    }

    /// Line widths must be a multiple of this (before padding).
    pub fn stride(&self) -> usize {
        1 << (self.width_multipliers.len() - 1)
    }
}

#[derive(Clone, Debug)]
struct Level {
    blocks: Vec<DascBlock>,
    down: Conv1d,
}

#[derive(Clone, Debug)]
struct UpLevel {
    up: Conv1d,
    blocks: Vec<DascBlock>,
}

#[derive(Clone, Debug)]
struct Layers {
    proj: Conv1d,
    norm: LayerNorm,
    attention: ChannelAttention,
    encoder: Vec<Level>,
    middle: Vec<DascBlock>,
    /// Coarsest first.
    decoder: Vec<UpLevel>,
    first_memory: MemoryBlock,
    last_memory: MemoryBlock,
}

#[derive(Clone, Debug)]
pub struct Denoiser {
    cfg: DenoiserConfig,
    params: ParamStore,
    layers: Layers,
}

/// Both memory-block states of one denoiser.
#[derive(Clone, Debug, PartialEq)]
pub struct DenoiserState {
    pub first: StreamState,
    pub last: StreamState,
}

impl DenoiserState {
    pub fn byte_size(&self) -> usize {
        self.first.byte_size() + self.last.byte_size()
    }

    pub fn line_index(&self) -> u64 {
        self.first.line_index()
    }
}

const MAGIC: &[u8; 4] = b"PBDN";
const VERSION: u32 = 1;

impl Denoiser {
    pub fn new(cfg: DenoiserConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let f = cfg.features;
        let widths: Vec<usize> = cfg.width_multipliers.iter().map(|m| m * f).collect();
        let depth = widths.len();
        let proj = Conv1d::new(&mut store, &mut rng, "proj", cfg.bands, f, 3, 1, ConvMode::Same, true);
        let norm = LayerNorm::new(&mut store, "refine.norm", f);
        let attention = ChannelAttention::new(&mut store, &mut rng, "refine.attention", f);
        let r = &mut rng;
        let s = &mut store;
        let mut encoder = Vec::new();
        let mut first_memory = None;
        for i in 0..depth - 1 {
            let blocks = (0..cfg.encoder_blocks[i])
                .map(|b| DascBlock::new(s, r, &format!("enc{i}.{b}"), widths[i]))
                .collect();
            if i == 0 {
                first_memory = Some(MemoryBlock::new(s, r, "memory.first", f, cfg.memory));
            }
            let down = Conv1d::new(s, r, &format!("down{i}"), widths[i], widths[i + 1], 2, 1, ConvMode::Down, true);
            encoder.push(Level { blocks, down });
        }
        let middle = (0..cfg.middle_blocks)
            .map(|b| DascBlock::new(s, r, &format!("mid.{b}"), widths[depth - 1]))
            .collect();
        if depth == 1 {
            first_memory = Some(MemoryBlock::new(s, r, "memory.first", f, cfg.memory));
        }
        let mut decoder = Vec::new();
        for i in (0..depth - 1).rev() {
            let up = Conv1d::new(s, r, &format!("up{i}"), widths[i + 1], widths[i], 2, 1, ConvMode::Up, true);
            let blocks = (0..cfg.decoder_blocks[i])
                .map(|b| DascBlock::new(s, r, &format!("dec{i}.{b}"), widths[i]))
                .collect();
            decoder.push(UpLevel { up, blocks });
        }
        let last_memory = MemoryBlock::new(s, r, "memory.last", f, cfg.memory);
        let layers = Layers {
            proj,
            norm,
            attention,
            encoder,
            middle,
            decoder,
            first_memory: first_memory.expect("level 0 always exists"),
            last_memory,
        };
        Ok(Denoiser {
            cfg,
            params: store,
            layers,
        })
    }

    pub fn config(&self) -> &DenoiserConfig {
        &self.cfg
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    /// The full-resolution memory blocks, input side first. They hold all
    /// of the streaming state.
    pub fn memory_blocks(&self) -> [&MemoryBlock; 2] {
        [&self.layers.first_memory, &self.layers.last_memory]
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    /// Replaces all parameters; layout must match.
    pub fn set_params(&mut self, params: ParamStore) -> Result<()> {
        self.params.check_layout(&params)?;
        self.params = params;
        Ok(())
    }

    fn padded_width(&self, pixels: usize) -> Result<usize> {
        let stride = self.cfg.stride();
        if pixels == 0 {
            return Err(Error::Config("lines must have at least one pixel".into()));
        }
        match self.cfg.pad_policy {
            PadPolicy::Reflect => {
                let padded = pixels.next_multiple_of(stride);
                if padded - pixels >= pixels {
                    return Err(Error::Config(format!(
                        "line width {pixels} too small to reflect-pad to {padded}"
                    )));
                }
                Ok(padded)
            }
            PadPolicy::Reject if !pixels.is_multiple_of(stride) => Err(Error::Config(format!(
                "line width {pixels} is not a multiple of {stride}"
            ))),
            PadPolicy::Reject => Ok(pixels),
        }
    }

    /// Zero state for lines `pixels` wide.
    pub fn init_state(&self, pixels: usize) -> Result<DenoiserState> {
        let padded = self.padded_width(pixels)?;
        Ok(DenoiserState {
            first: self.layers.first_memory.init_state(padded),
            last: self.layers.last_memory.init_state(padded),
        })
    }

    /// Graph-level forward of `y: [lines, pixels, bands]` from `state`,
    /// advancing it. `p` must come from binding this denoiser's parameters.
    pub fn forward(&self, g: &mut Graph, p: &Bound, y: Var, state: &mut DenoiserState) -> Result<Var> {
        let s = g.shape(y).to_vec();
        if s.len() != 3 || s[2] != self.cfg.bands {
            return Err(Error::shape("denoiser", &s, &[0, 0, self.cfg.bands]));
        }
        let pixels = s[1];
        let padded = self.padded_width(pixels)?;
        if state.first.pixels() != padded {
            return Err(Error::shape("denoiser state", &[state.first.pixels()], &[padded]));
        }
        let y = reflect_pad(g, y, padded - pixels)?;
        let l = &self.layers;
        let x = l.proj.forward(g, p, y)?;
        let x = l.norm.forward(g, p, x)?;
        let x = g.silu(x)?;
        let mut x = l.attention.forward(g, p, x)?;

        let mut skips = Vec::new();
        for (i, level) in l.encoder.iter().enumerate() {
            for b in &level.blocks {
                x = b.forward(g, p, x)?;
            }
            if i == 0 {
                x = l.first_memory.forward(g, p, x, &mut state.first)?;
            }
            skips.push(x);
            x = level.down.forward(g, p, x)?;
        }
        for b in &l.middle {
            x = b.forward(g, p, x)?;
        }
        if l.encoder.is_empty() {
            x = l.first_memory.forward(g, p, x, &mut state.first)?;
        }
        for level in &l.decoder {
            x = level.up.forward(g, p, x)?;
            let skip = skips.pop().expect("one skip per level");
            x = g.add(x, skip)?;
            for b in &level.blocks {
                x = b.forward(g, p, x)?;
            }
        }
        x = l.last_memory.forward(g, p, x, &mut state.last)?;
        if padded != pixels {
            x = g.slice(x, 1, 0, pixels)?;
        }
        Ok(x)
    }

    /// Features for every line of `y: [lines, pixels, bands]`, from a zero
    /// state, as one batch.
    pub fn forward_batch(&self, y: &Tensor) -> Result<Tensor> {
        let mut state = self.init_state(y.shape().get(1).copied().unwrap_or(0))?;
        self.run(&mut state, y.clone())
    }

    fn run(&self, state: &mut DenoiserState, y: Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let p = self.params.bind(&mut g, false)?;
        let yv = g.constant(y)?;
        let h = self.forward(&mut g, &p, yv, state)?;
        Ok(g.value(h).clone())
    }

    /// Starts a line stream for lines `pixels` wide.
    pub fn stream(&self, pixels: usize) -> Result<DenoiserStream> {
        Ok(DenoiserStream {
            state: self.init_state(pixels)?,
            pixels,
        })
    }

    /// FLOPs per full-resolution pixel (two per multiply-accumulate) of all
    /// convolution, linear and scan arithmetic, for lines `pixels` wide.
    /// Per-line pooled attention terms are amortized over the line.
    pub fn count_flops_per_pixel(&self, pixels: usize) -> f64 {
        let l = &self.layers;
        let n = pixels;
        let mut total = l.proj.flops(1.0) + l.attention.flops(n);
        let mut rate = 1.0;
        for (i, level) in l.encoder.iter().enumerate() {
            total += level.blocks.iter().map(|b| b.flops(rate, n)).sum::<f64>();
            if i == 0 {
                total += l.first_memory.flops();
            }
            rate /= 2.0;
            total += level.down.flops(rate);
        }
        total += l.middle.iter().map(|b| b.flops(rate, n)).sum::<f64>();
        if l.encoder.is_empty() {
            total += l.first_memory.flops();
        }
        for level in &l.decoder {
            rate *= 2.0;
            total += level.up.flops(rate);
            total += level.blocks.iter().map(|b| b.flops(rate, n)).sum::<f64>();
        }
        total + l.last_memory.flops()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::new();
        w.magic(MAGIC, VERSION);
        self.encode(&mut w);
        w.finish()
    }

    pub(crate) fn encode(&self, w: &mut Writer) {
        w.str(&toml::to_string(&self.cfg).expect("config serializes"));
        self.params.encode(w);
    }

    pub(crate) fn decode(r: &mut Reader<'_>) -> Result<Self> {
        let cfg: DenoiserConfig =
            toml::from_str(&r.str()?).map_err(|e| Error::Format(format!("denoiser config: {e}")))?;
        let params = ParamStore::decode(r)?;
        let mut d = Denoiser::new(cfg, 0)?;
        d.set_params(params)?;
        Ok(d)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes);
        r.magic(MAGIC, VERSION)?;
        let d = Self::decode(&mut r)?;
        r.finish()?;
        Ok(d)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        Ok(std::fs::write(path, self.to_bytes())?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

/// Mirrors the last `extra` pixels (excluding the edge pixel itself) onto
/// the right end of the line.
fn reflect_pad(g: &mut Graph, x: Var, extra: usize) -> Result<Var> {
    if extra == 0 {
        return Ok(x);
    }
    let n = g.shape(x)[1];
    let mut parts = vec![x];
    for j in 0..extra {
        parts.push(g.slice(x, 1, n - 2 - j, 1)?);
    }
    g.concat(&parts, 1)
}

/// Line-by-line inference state of one denoiser.
#[derive(Clone, Debug)]
pub struct DenoiserStream {
    state: DenoiserState,
    pixels: usize,
}

impl DenoiserStream {
    pub fn state(&self) -> &DenoiserState {
        &self.state
    }

    pub fn pixels(&self) -> usize {
        self.pixels
    }

    /// Denoises one line `[1, pixels, bands]` (or `[pixels, bands]`) into
    /// features `[1, pixels, F]`. A non-finite intermediate surfaces as
    /// [`Error::FaultSuspected`] and leaves the state untouched.
    pub fn step(&mut self, den: &Denoiser, line: &Tensor) -> Result<Tensor> {
        let line = match line.ndim() {
            2 => line.reshape(&[1, line.shape()[0], line.shape()[1]])?,
            _ => line.clone(),
        };
        if line.shape()[0] != 1 || line.shape()[1] != self.pixels {
            return Err(Error::shape("denoiser step", line.shape(), &[1, self.pixels, den.cfg.bands]));
        }
        let mut next = self.state.clone();
        match den.run(&mut next, line) {
            Ok(h) => {
                self.state = next;
                Ok(h)
            }
            Err(Error::NonFinite { op }) => Err(Error::FaultSuspected {
                denoiser: 0,
                reason: format!("non-finite value in {op}"),
            }),
            Err(e) => Err(e),
        }
    }
}
