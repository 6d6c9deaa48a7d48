//! Full-reference quality metrics over `lines x columns x bands` cubes.

use std::fmt;

use crate::cube::ImageCube;
use crate::error::{Error, Result};

const WINDOW: usize = 11;
const WINDOW_SIGMA: f64 = 1.5;

fn same_dims(a: &ImageCube, b: &ImageCube) -> Result<()> {
    if a.dims() != b.dims() {
        let (x, y) = (a.dims(), b.dims());
        return Err(Error::shape("metric", &[x.0, x.1, x.2], &[y.0, y.1, y.2]));
    }
    Ok(())
}

/// Peak signal-to-noise ratio in dB; `f64::INFINITY` when the inputs match.
pub fn psnr(x: &ImageCube, y: &ImageCube, peak: f64) -> Result<f64> {
    same_dims(x, y)?;
    let mse = x.data().iter().zip(y.data()).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / x.data().len() as f64;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (peak * peak / mse).log10())
}

/// Normalized 1-D Gaussian taps; the 2-D window is their outer product.
fn taps() -> [f64; WINDOW] {
    let mut t = [0.0; WINDOW];
    let c = (WINDOW / 2) as f64;
    for (i, v) in t.iter_mut().enumerate() {
        let d = i as f64 - c;
        *v = (-d * d / (2.0 * WINDOW_SIGMA * WINDOW_SIGMA)).exp();
    }
    let s: f64 = t.iter().sum();
    t.map(|v| v / s)
}

/// Valid-mode separable filtering of a `rows x cols` image.
fn filter(img: &[f64], rows: usize, cols: usize, w: &[f64; WINDOW]) -> Vec<f64> {
    let (or, oc) = (rows - WINDOW + 1, cols - WINDOW + 1);
    let mut tmp = vec![0.0; rows * oc];
    for r in 0..rows {
        for c in 0..oc {
            tmp[r * oc + c] = (0..WINDOW).map(|k| w[k] * img[r * cols + c + k]).sum();
        }
    }
    let mut out = vec![0.0; or * oc];
    for r in 0..or {
        for c in 0..oc {
            out[r * oc + c] = (0..WINDOW).map(|k| w[k] * tmp[(r + k) * oc + c]).sum();
        }
    }
    out
}

fn band(x: &ImageCube, b: usize) -> Vec<f64> {
    let (nl, nc, _) = x.dims();
    (0..nl * nc).map(|i| x.get(i / nc, i % nc, b)).collect()
}

/// Mean SSIM over bands, each band treated as a `lines x columns` image
/// with an 11x11 Gaussian window (sigma 1.5) over valid positions.
pub fn ssim(x: &ImageCube, y: &ImageCube, peak: f64) -> Result<f64> {
    same_dims(x, y)?;
    let (nl, nc, nb) = x.dims();
    if nl < WINDOW || nc < WINDOW {
        return Err(Error::Config(format!(
            "SSIM needs at least {WINDOW}x{WINDOW} pixels, got {nl}x{nc}"
        )));
    }
    let c1 = (0.01 * peak).powi(2);
    let c2 = (0.03 * peak).powi(2);
    let w = taps();
    let mut total = 0.0;
    for b in 0..nb {
        let xb = band(x, b);
        let yb = band(y, b);
        let prod = |a: &[f64], c: &[f64]| a.iter().zip(c).map(|(p, q)| p * q).collect::<Vec<_>>();
        let mx = filter(&xb, nl, nc, &w);
        let my = filter(&yb, nl, nc, &w);
        let sxx = filter(&prod(&xb, &xb), nl, nc, &w);
        let syy = filter(&prod(&yb, &yb), nl, nc, &w);
        let sxy = filter(&prod(&xb, &yb), nl, nc, &w);
        let mut acc = 0.0;
        for i in 0..mx.len() {
            let (a, c) = (mx[i], my[i]);
            let vx = sxx[i] - a * a;
            let vy = syy[i] - c * c;
            let cov = sxy[i] - a * c;
            acc += ((2.0 * a * c + c1) * (2.0 * cov + c2)) / ((a * a + c * c + c1) * (vx + vy + c2));
        }
        total += acc / mx.len() as f64;
    }
    Ok(total / nb as f64)
}

/// Mean spectral angle in radians over pixels where both spectra are
/// nonzero, and the number of pixels skipped.
pub fn sam(x: &ImageCube, y: &ImageCube) -> Result<(f64, usize)> {
    same_dims(x, y)?;
    let nb = x.bands();
    let mut sum = 0.0;
    let mut used = 0;
    let mut skipped = 0;
    for (p, q) in x.data().chunks(nb).zip(y.data().chunks(nb)) {
        let dot: f64 = p.iter().zip(q).map(|(a, b)| a * b).sum();
        let np = p.iter().map(|a| a * a).sum::<f64>().sqrt();
        let nq = q.iter().map(|a| a * a).sum::<f64>().sqrt();
        if np == 0.0 || nq == 0.0 {
            skipped += 1;
            continue;
        }
        sum += (dot / (np * nq)).clamp(-1.0, 1.0).acos();
        used += 1;
    }
    if used == 0 {
        return Err(Error::Config("SAM undefined: every spectrum is zero".into()));
    }
    Ok((sum / used as f64, skipped))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct QualityReport {
    pub psnr: f64,
    /// None when the image is smaller than the SSIM window.
    pub ssim: Option<f64>,
    pub sam: f64,
}

impl QualityReport {
    pub fn compute(clean: &ImageCube, test: &ImageCube) -> Result<Self> {
        let ssim = match ssim(clean, test, 1.0) {
            Ok(v) => Some(v),
            Err(Error::Config(_)) => None,
            Err(e) => return Err(e),
        };
        Ok(QualityReport {
            psnr: psnr(clean, test, 1.0)?,
            ssim,
            sam: sam(clean, test)?.0,
        })
    }
}

impl fmt::Display for QualityReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.psnr.is_infinite() {
            write!(f, "psnr=inf")?;
        } else {
            write!(f, "psnr={:.4}", self.psnr)?;
        }
        match self.ssim {
            Some(s) => write!(f, " ssim={s:.6}")?,
            None => write!(f, " ssim=na")?,
        }
        write!(f, " sam={:.6}", self.sam)
    }
}
