//! Synthetic degradations. Stages always run in the order Gaussian,
//! impulse, stripe, deadline; each band draws from its own substream so the
//! result does not depend on processing order.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::cube::ImageCube;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NoiseSpec {
    /// Per-band standard deviation range on the 0 to 255 scale.
    pub gaussian_sigma: [f64; 2],
    pub impulse: Option<ImpulseSpec>,
    pub stripe: Option<StripeSpec>,
    pub deadline: Option<DeadlineSpec>,
    pub seed: u64,
}

impl Default for NoiseSpec {
    fn default() -> Self {
        NoiseSpec {
            gaussian_sigma: [0.0, 0.0],
            impulse: None,
            stripe: None,
            deadline: None,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ImpulseSpec {
    pub band_fraction: f64,
    /// Range of the per-band salt-and-pepper density.
    pub density: [f64; 2],
}

impl Default for ImpulseSpec {
    fn default() -> Self {
        ImpulseSpec {
            band_fraction: 1.0 / 3.0,
            density: [0.1, 0.7],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StripeSpec {
    pub band_fraction: f64,
    pub column_fraction: [f64; 2],
    /// Offsets are uniform in `[-amplitude, amplitude]`.
    pub amplitude: f64,
}

impl Default for StripeSpec {
    fn default() -> Self {
        StripeSpec {
            band_fraction: 1.0 / 3.0,
            column_fraction: [0.05, 0.15],
            amplitude: 0.25,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DeadlineSpec {
    pub band_fraction: f64,
    pub column_fraction: [f64; 2],
}

impl Default for DeadlineSpec {
    fn default() -> Self {
        DeadlineSpec {
            band_fraction: 1.0 / 3.0,
            column_fraction: [0.05, 0.15],
        }
    }
}

impl NoiseSpec {
    pub fn gaussian(lo: f64, hi: f64, seed: u64) -> Self {
        NoiseSpec {
            gaussian_sigma: [lo, hi],
            seed,
            ..NoiseSpec::default()
        }
    }

    /// Gaussian with every structured component enabled at default settings.
    pub fn mixture(lo: f64, hi: f64, seed: u64) -> Self {
        NoiseSpec {
            gaussian_sigma: [lo, hi],
            impulse: Some(ImpulseSpec::default()),
            stripe: Some(StripeSpec::default()),
            deadline: Some(DeadlineSpec::default()),
            seed,
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let s: NoiseSpec = toml::from_str(text).map_err(|e| Error::Config(format!("noise spec: {e}")))?;
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        let range = |name: &str, r: [f64; 2], lo: f64, hi: f64| {
            if r[0].is_finite() && r[1].is_finite() && lo <= r[0] && r[0] <= r[1] && r[1] <= hi {
                Ok(())
            } else {
                Err(Error::Config(format!("{name} range {r:?} must be ordered within [{lo}, {hi}]")))
            }
        };
        let frac = |name: &str, f: f64| range(name, [f, f], 0.0, 1.0);
        range("gaussian sigma", self.gaussian_sigma, 0.0, f64::MAX)?;
        if let Some(i) = &self.impulse {
            frac("impulse band fraction", i.band_fraction)?;
            range("impulse density", i.density, 0.0, 1.0)?;
        }
        if let Some(s) = &self.stripe {
            frac("stripe band fraction", s.band_fraction)?;
            range("stripe column fraction", s.column_fraction, 0.0, 1.0)?;
            range("stripe amplitude", [s.amplitude, s.amplitude], 0.0, f64::MAX)?;
        }
        if let Some(d) = &self.deadline {
            frac("deadline band fraction", d.band_fraction)?;
            range("deadline column fraction", d.column_fraction, 0.0, 1.0)?;
        }
        Ok(())
    }
}

// Substream layout: stage in the high bits, band (or SELECT) in the low bits.
const GAUSSIAN: u64 = 1;
const IMPULSE: u64 = 2;
const STRIPE: u64 = 3;
const DEADLINE: u64 = 4;
const SELECT: u64 = 0xffff_ffff;

fn substream(seed: u64, stage: u64, lane: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream((stage << 32) | lane);
    rng
}

fn uniform(rng: &mut ChaCha8Rng, r: [f64; 2]) -> f64 {
    if r[0] == r[1] {
        r[0]
    } else {
        rng.random_range(r[0]..r[1])
    }
}

/// `ceil(fraction * n)` without float noise pushing exact products up.
fn count(fraction: f64, n: usize) -> usize {
    ((fraction * n as f64 - 1e-9).ceil().max(0.0) as usize).min(n)
}

fn pick(rng: &mut ChaCha8Rng, n: usize, k: usize) -> Vec<usize> {
    let mut v = rand::seq::index::sample(rng, n, k).into_vec();
    v.sort_unstable();
    v
}

pub fn add_noise(x: &ImageCube, spec: &NoiseSpec) -> Result<ImageCube> {
    spec.validate()?;
    if let Some(v) = x.data().iter().find(|v| !(0.0..=1.0).contains(*v)) {
        return Err(Error::Config(format!("noise input must lie in [0, 1], found {v}")));
    }
    let mut y = x.clone();
    for stage in [GAUSSIAN, IMPULSE, STRIPE, DEADLINE] {
        apply_stage(&mut y, spec, stage);
    }
    Ok(y)
}

fn apply_stage(y: &mut ImageCube, spec: &NoiseSpec, stage: u64) {
    let (nl, nc, nb) = y.dims();
    let seed = spec.seed;
    match stage {
        GAUSSIAN => {
            let [lo, hi] = spec.gaussian_sigma;
            if hi == 0.0 {
                return;
            }
            for b in 0..nb {
                let mut rng = substream(seed, GAUSSIAN, b as u64);
                let sigma = uniform(&mut rng, [lo, hi]) / 255.0;
                if sigma == 0.0 {
                    continue;
                }
                let normal = Normal::new(0.0, sigma).expect("positive sigma");
                for l in 0..nl {
                    for c in 0..nc {
                        let v = y.get(l, c, b) + normal.sample(&mut rng);
                        y.set(l, c, b, v);
                    }
                }
            }
        }
        IMPULSE => {
            let Some(imp) = &spec.impulse else { return };
            let bands = pick(&mut substream(seed, IMPULSE, SELECT), nb, count(imp.band_fraction, nb));
            for b in bands {
                let mut rng = substream(seed, IMPULSE, b as u64);
                let density = uniform(&mut rng, imp.density);
                for l in 0..nl {
                    for c in 0..nc {
                        if rng.random_bool(density) {
                            let v = if rng.random_bool(0.5) { 1.0 } else { 0.0 };
                            y.set(l, c, b, v);
                        }
                    }
                }
            }
        }
        STRIPE => {
            let Some(st) = &spec.stripe else { return };
            let bands = pick(&mut substream(seed, STRIPE, SELECT), nb, count(st.band_fraction, nb));
            for b in bands {
                let mut rng = substream(seed, STRIPE, b as u64);
                let frac = uniform(&mut rng, st.column_fraction);
                for c in pick(&mut rng, nc, count(frac, nc)) {
                    let off = uniform(&mut rng, [-st.amplitude, st.amplitude]);
                    for l in 0..nl {
                        let v = y.get(l, c, b) + off;
                        y.set(l, c, b, v);
                    }
                }
            }
        }
        DEADLINE => {
            let Some(dl) = &spec.deadline else { return };
            let bands = pick(&mut substream(seed, DEADLINE, SELECT), nb, count(dl.band_fraction, nb));
            for b in bands {
                let mut rng = substream(seed, DEADLINE, b as u64);
                let frac = uniform(&mut rng, dl.column_fraction);
                for c in pick(&mut rng, nc, count(frac, nc)) {
                    for l in 0..nl {
                        y.set(l, c, b, 0.0);
                    }
                }
            }
        }
        _ => unreachable!("unknown noise stage"),
    }
}
