//! How many denoisers run: the exponential cardinality distribution used
//! during training and budget-driven active sets at inference.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rand::Rng;

use crate::error::{Error, Result};

/// `P(s = N) = e^{λN} / Σ_j e^{λj}` for `N = 1..=members`, evaluated with a
/// max shift so large |λ| cannot overflow.
pub fn cardinality_pmf(lambda: f64, members: usize) -> Result<Vec<f64>> {
    if members == 0 {
        return Err(Error::Config("a mixture needs at least one member".into()));
    }
    if !lambda.is_finite() {
        return Err(Error::Config(format!("power factor must be finite, got {lambda}")));
    }
    let logits: Vec<f64> = (1..=members).map(|n| lambda * n as f64).collect();
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let w: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let z: f64 = w.iter().sum();
    Ok(w.into_iter().map(|v| v / z).collect())
}

#[derive(Clone, Debug, PartialEq)]
pub struct PowerPolicy {
    pub lambda: f64,
    pub members: usize,
    /// Power level name to maximum number of active denoisers.
    pub budgets: BTreeMap<String, usize>,
    pmf: Vec<f64>,
}

impl PowerPolicy {
    pub fn new(lambda: f64, members: usize) -> Result<Self> {
        Ok(PowerPolicy {
            lambda,
            members,
            budgets: BTreeMap::new(),
            pmf: cardinality_pmf(lambda, members)?,
        })
    }

    pub fn with_budget(mut self, level: impl Into<String>, max_active: usize) -> Self {
        self.budgets.insert(level.into(), max_active);
        self
    }

    pub fn pmf(&self) -> &[f64] {
        &self.pmf
    }

    /// Draws a cardinality from the pmf, then a uniformly random subset of
    /// that size. Ids are returned ascending.
    pub fn sample_subset(&self, rng: &mut impl Rng) -> Vec<usize> {
        let n = self.sample_cardinality(rng);
        let mut ids = rand::seq::index::sample(rng, self.members, n).into_vec();
        ids.sort_unstable();
        ids
    }

    pub fn sample_cardinality(&self, rng: &mut impl Rng) -> usize {
        let u: f64 = rng.random();
        let mut acc = 0.0;
        for (i, p) in self.pmf.iter().enumerate() {
            acc += p;
            if u < acc {
                return i + 1;
            }
        }
        self.members
    }

    /// The first `min(budget, members)` ids, so streams stay warm when the
    /// budget changes.
    pub fn active_set_for_budget(&self, level: &str) -> Result<Vec<usize>> {
        let max = *self
            .budgets
            .get(level)
            .ok_or_else(|| Error::Config(format!("unknown power level {level:?}")))?;
        prefix(max, self.members)
    }
}

/// `[0, n)` clamped to the mixture size; zero active members is an error.
pub fn prefix(n: usize, members: usize) -> Result<Vec<usize>> {
    if n == 0 {
        return Err(Error::Config("at least one denoiser must run".into()));
    }
    Ok((0..n.min(members)).collect())
}

/// Line ranges mapped to power levels.
///
/// Text form, one record per line, `#` comments:
///
/// ```text
/// level full 5
/// level eclipse 1
/// lines 0 512 full
/// lines 512 1024 eclipse
/// ```
///
/// Line ranges are half-open and must not overlap.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Schedule {
    pub levels: BTreeMap<String, usize>,
    pub ranges: Vec<(u64, u64, String)>,
}

impl Schedule {
    pub fn parse(text: &str) -> Result<Self> {
        let mut s = Schedule::default();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let f: Vec<&str> = line.split_whitespace().collect();
            let err = |m: &str| Error::Format(format!("schedule line {}: {m}: {raw:?}", n + 1));
            match f.as_slice() {
                ["level", name, max] => {
                    let max = max.parse().map_err(|_| err("bad denoiser count"))?;
                    if s.levels.insert(name.to_string(), max).is_some() {
                        return Err(err("duplicate level"));
                    }
                }
                ["lines", a, b, name] => {
                    let a: u64 = a.parse().map_err(|_| err("bad start line"))?;
                    let b: u64 = b.parse().map_err(|_| err("bad end line"))?;
                    if a >= b {
                        return Err(err("empty line range"));
                    }
                    s.ranges.push((a, b, name.to_string()));
                }
                _ => return Err(err("expected `level NAME COUNT` or `lines START END NAME`")),
            }
        }
        for (_, _, name) in &s.ranges {
            if !s.levels.contains_key(name) {
                return Err(Error::Format(format!("schedule uses undefined level {name:?}")));
            }
        }
        let mut sorted = s.ranges.clone();
        sorted.sort();
        for w in sorted.windows(2) {
            if w[1].0 < w[0].1 {
                return Err(Error::Format(format!(
                    "schedule ranges {}..{} and {}..{} overlap",
                    w[0].0, w[0].1, w[1].0, w[1].1
                )));
            }
        }
        Ok(s)
    }

    /// A schedule running `n` denoisers on every line.
    pub fn constant(n: usize, lines: u64) -> Self {
        let mut s = Schedule::default();
        s.levels.insert("fixed".into(), n);
        s.ranges.push((0, lines, "fixed".into()));
        s
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (name, max) in &self.levels {
            let _ = writeln!(out, "level {name} {max}");
        }
        for (a, b, name) in &self.ranges {
            let _ = writeln!(out, "lines {a} {b} {name}");
        }
        out
    }

    pub fn level_for_line(&self, line: u64) -> Result<&str> {
        self.ranges
            .iter()
            .find(|(a, b, _)| (*a..*b).contains(&line))
            .map(|(_, _, n)| n.as_str())
            .ok_or_else(|| Error::Config(format!("line {line} is not covered by the power schedule")))
    }

    pub fn active_for_line(&self, line: u64, members: usize) -> Result<Vec<usize>> {
        prefix(self.levels[self.level_for_line(line)?], members)
    }
}
