//! Procedural test cubes: a few materials, each a smooth spectrum of
//! Gaussian bumps, mixed by random low-frequency spatial abundance fields.

use std::f64::consts::TAU;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::cube::ImageCube;
use crate::error::Result;

const MATERIALS: usize = 4;
const BUMPS: usize = 3;
const WAVES: usize = 4;

pub fn synth_cube(lines: usize, cols: usize, bands: usize, seed: u64) -> Result<ImageCube> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let spectra: Vec<Vec<f64>> = (0..MATERIALS)
        .map(|_| {
            let bumps: Vec<(f64, f64, f64)> = (0..BUMPS)
                .map(|_| {
                    (
                        rng.random_range(0.0..1.0),
                        rng.random_range(0.08..0.35),
                        rng.random_range(0.2..1.0),
                    )
                })
                .collect();
            (0..bands)
                .map(|b| {
                    let t = if bands > 1 { b as f64 / (bands - 1) as f64 } else { 0.5 };
                    bumps
                        .iter()
                        .map(|(mu, s, a)| a * (-(t - mu) * (t - mu) / (2.0 * s * s)).exp())
                        .sum()
                })
                .collect()
        })
        .collect();
    // Each field is a few plane waves with periods of 8 to 64 pixels.
    let fields: Vec<Vec<(f64, f64, f64)>> = (0..MATERIALS)
        .map(|_| {
            (0..WAVES)
                .map(|_| {
                    let period = rng.random_range(8.0..64.0);
                    let angle: f64 = rng.random_range(0.0..TAU);
                    let k = TAU / period;
                    (k * angle.cos(), k * angle.sin(), rng.random_range(0.0..TAU))
                })
                .collect()
        })
        .collect();
    let mut data = vec![0.0; lines * cols * bands];
    let mut weights = [0.0; MATERIALS];
    for l in 0..lines {
        for c in 0..cols {
            for (w, waves) in weights.iter_mut().zip(&fields) {
                let s: f64 = waves
                    .iter()
                    .map(|(kl, kc, ph)| (kl * l as f64 + kc * c as f64 + ph).sin())
                    .sum::<f64>()
                    / WAVES as f64;
                *w = (2.5 * s).exp();
            }
            let z: f64 = weights.iter().sum();
            let px = &mut data[(l * cols + c) * bands..(l * cols + c + 1) * bands];
            for (b, v) in px.iter_mut().enumerate() {
                *v = weights.iter().zip(&spectra).map(|(w, s)| w * s[b]).sum::<f64>() / z;
            }
        }
    }
    let max = data.iter().copied().fold(0.0, f64::max);
    if max > 0.0 {
        // Keep headroom below 1 and round to f32 so files round-trip exactly.
        for v in &mut data {
            *v = (0.9 * *v / max) as f32 as f64;
        }
    }
    ImageCube::new(lines, cols, bands, data)
}
