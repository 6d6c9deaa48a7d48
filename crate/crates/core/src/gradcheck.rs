//! Central finite-difference gradient checking.
//!
//! The checker only evaluates the forward pass, so it stays independent of
//! the backward implementation it validates.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, Var};
use crate::error::Result;
use crate::tensor::Tensor;

/// Entries with magnitude below this floor are compared on an absolute scale.
pub const REL_FLOOR: f64 = 1e-3;

#[derive(Clone, Debug)]
pub struct GradCheck {
    pub max_rel_err: f64,
    pub checked: usize,
    /// `(input, flat index, analytic, numeric)` at the worst entry.
    pub worst: Option<(usize, usize, f64, f64)>,
}

/// Compares analytic gradients of the scalar `f(inputs)` against central
/// differences with step `h`. At most `max_coords` coordinates per input
/// are probed (sampled deterministically); `None` probes all of them.
pub fn check<F>(inputs: &[Tensor], f: F, h: f64, max_coords: Option<usize>) -> Result<GradCheck>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let eval = |ts: &[Tensor]| -> Result<f64> {
        let mut g = Graph::new();
        let vars = ts.iter().map(|t| g.constant(t.clone())).collect::<Result<Vec<_>>>()?;
        let out = f(&mut g, &vars)?;
        Ok(g.value(out).item())
    };

    let mut g = Graph::new();
    let vars = inputs.iter().map(|t| g.param(t.clone())).collect::<Result<Vec<_>>>()?;
    let loss = f(&mut g, &vars)?;
    let grads = g.backward(loss)?;

    let mut rng = ChaCha8Rng::seed_from_u64(0x6772_6164);
    let mut report = GradCheck {
        max_rel_err: 0.0,
        checked: 0,
        worst: None,
    };
    let mut probe = inputs.to_vec();
    for (ti, t) in inputs.iter().enumerate() {
        let analytic = grads.get(vars[ti]);
        let coords: Vec<usize> = match max_coords {
            Some(m) if m < t.len() => {
                let mut c = sample(&mut rng, t.len(), m).into_vec();
                c.sort_unstable();
                c
            }
            _ => (0..t.len()).collect(),
        };
        for i in coords {
            let orig = t.data()[i];
            probe[ti].data_mut()[i] = orig + h;
            let plus = eval(&probe)?;
            probe[ti].data_mut()[i] = orig - h;
            let minus = eval(&probe)?;
            probe[ti].data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * h);
            let a = analytic.data()[i];
            let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(REL_FLOOR);
            report.checked += 1;
            if err > report.max_rel_err || report.worst.is_none() {
                report.max_rel_err = report.max_rel_err.max(err);
                if err >= report.max_rel_err {
                    report.worst = Some((ti, i, a, numeric));
                }
            }
        }
    }
    Ok(report)
}
