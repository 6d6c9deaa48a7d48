//! Weight corruption over the conv/linear weight surface of a parameter
//! store, with an auditable manifest for exact reversal.

use std::fmt::Write as _;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Geometric};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::ParamStore;

/// Fault-surface size of the reference five-member configuration, used to
/// translate per-weight probabilities to smaller models.
pub const REFERENCE_SURFACE: usize = 817_920;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
#[derive(Default)]
pub enum FaultModel {
    /// Flip the most significant exponent bit of the 32-bit encoding.
    #[default]
    BitflipMsb,
    /// Add `delta` standard deviations of the weight's tensor.
    AdditiveDeviation { delta: f64 },
}


impl FromStr for FaultModel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "bitflip-msb" => Ok(FaultModel::BitflipMsb),
            "additive-deviation" => Ok(FaultModel::AdditiveDeviation { delta: 10.0 }),
            _ => match s.strip_prefix("additive-deviation:") {
                Some(d) => d
                    .parse()
                    .map(|delta| FaultModel::AdditiveDeviation { delta })
                    .map_err(|_| Error::Config(format!("bad deviation in fault model {s:?}"))),
                None => Err(Error::Config(format!(
                    "unknown fault model {s:?} (expected bitflip-msb or additive-deviation[:delta])"
                ))),
            },
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FaultSpec {
    pub probability: f64,
    pub model: FaultModel,
    pub seed: u64,
}

impl FaultSpec {
    pub fn new(probability: f64, seed: u64) -> Self {
        FaultSpec {
            probability,
            model: FaultModel::BitflipMsb,
            seed,
        }
    }
}

/// Scales a per-weight probability quoted for the reference surface so the
/// expected number of faults per model is preserved on a surface of `len`.
pub fn scaled_probability(p: f64, len: usize) -> f64 {
    (p * REFERENCE_SURFACE as f64 / len as f64).min(1.0)
}

/// Flips bit 30 of the f32 encoding of `w`; infinities and NaNs that result
/// are clamped to the largest finite f32 of the same sign.
pub fn bitflip_msb(w: f64) -> f64 {
    let flipped = f32::from_bits((w as f32).to_bits() ^ (1 << 30));
    clamp_f32(flipped as f64, flipped.is_sign_negative())
}

fn clamp_f32(v: f64, negative: bool) -> f64 {
    let max = f32::MAX as f64;
    if v.is_nan() {
        if negative {
            -max
        } else {
            max
        }
    } else {
        v.clamp(-max, max)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FaultRecord {
    pub id: usize,
    pub old: f64,
    pub new: f64,
}

/// Corrupted weights of one injection. Reverting consumes it.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Manifest {
    pub records: Vec<FaultRecord>,
    consumed: bool,
}

impl Manifest {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn is_consumed(&self) -> bool {
        self.consumed
    }

    /// One record per line: flat weight id, old and new value as the hex of
    /// their 64-bit encodings.
    pub fn to_text(&self) -> String {
        let mut s = String::from("# id old new\n");
        for r in &self.records {
            let _ = writeln!(s, "{} {:016x} {:016x}", r.id, r.old.to_bits(), r.new.to_bits());
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut records = Vec::new();
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let bad = || Error::Format(format!("manifest line {}: expected `id old_hex new_hex`", n + 1));
            let f: Vec<&str> = line.split_whitespace().collect();
            if f.len() != 3 {
                return Err(bad());
            }
            let id = f[0].parse().map_err(|_| bad())?;
            let old = u64::from_str_radix(f[1], 16).map_err(|_| bad())?;
            let new = u64::from_str_radix(f[2], 16).map_err(|_| bad())?;
            records.push(FaultRecord {
                id,
                old: f64::from_bits(old),
                new: f64::from_bits(new),
            });
        }
        Ok(Manifest {
            records,
            consumed: false,
        })
    }
}

/// Corrupts each conv/linear weight independently with probability
/// `spec.probability`. Everything outside the manifest is left untouched.
pub fn inject(params: &ParamStore, spec: &FaultSpec) -> Result<(ParamStore, Manifest)> {
    let p = spec.probability;
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::Config(format!("fault probability must lie in [0, 1], got {p}")));
    }
    let n = params.fault_surface_len();
    let mut out = params.clone();
    let mut records = Vec::new();
    if p > 0.0 && n > 0 {
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        // Gaps between successive hits are geometric.
        let gap = Geometric::new(p).map_err(|e| Error::Config(e.to_string()))?;
        let mut next = gap.sample(&mut rng);
        let mut std_cache: Vec<Option<f64>> = vec![None; params.len()];
        while (next as u128) < n as u128 {
            let id = next as usize;
            let (pid, off) = params.locate(id).expect("id inside surface");
            let old = params.get(pid).data()[off];
            let new = match spec.model {
                FaultModel::BitflipMsb => bitflip_msb(old),
                FaultModel::AdditiveDeviation { delta } => {
                    let sd = *std_cache[pid.0]
                        .get_or_insert_with(|| crate::autodiff::population_variance(params.get(pid).data()).sqrt());
                    clamp_f32(old + delta * sd, false)
                }
            };
            out.get_mut(pid).data_mut()[off] = new;
            records.push(FaultRecord { id, old, new });
            next = next.saturating_add(1).saturating_add(gap.sample(&mut rng));
        }
    }
    Ok((
        out,
        Manifest {
            records,
            consumed: false,
        },
    ))
}

/// Restores the weights listed in `manifest` and marks it consumed.
pub fn revert(params: &mut ParamStore, manifest: &mut Manifest) -> Result<()> {
    if manifest.consumed {
        return Err(Error::StaleManifest("manifest was already reverted".into()));
    }
    let mut slots = Vec::with_capacity(manifest.records.len());
    for r in &manifest.records {
        let (pid, off) = params
            .locate(r.id)
            .ok_or_else(|| Error::StaleManifest(format!("weight id {} outside the fault surface", r.id)))?;
        if params.get(pid).data()[off].to_bits() != r.new.to_bits() {
            return Err(Error::StaleManifest(format!(
                "weight {} no longer holds the injected value",
                r.id
            )));
        }
        slots.push((pid, off));
    }
    // Reverse order so repeated ids restore the earliest value.
    for (r, (pid, off)) in manifest.records.iter().zip(slots).rev() {
        params.get_mut(pid).data_mut()[off] = r.old;
    }
    manifest.consumed = true;
    Ok(())
}
