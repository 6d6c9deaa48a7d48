//! Named parameter storage with a stable flat index over fault targets.

use std::ops::Index;
use std::sync::Arc;

use crate::autodiff::{Graph, Var};
use crate::codec::{Reader, Writer};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamKind {
    ConvWeight,
    LinearWeight,
    Bias,
    NormScale,
    NormShift,
    ResidualScale,
    SsmDecay,
    SsmSkip,
}

impl ParamKind {
    /// Only convolution and linear weights are exposed to fault injection.
    pub fn is_fault_target(self) -> bool {
        matches!(self, ParamKind::ConvWeight | ParamKind::LinearWeight)
    }

    fn code(self) -> u8 {
        self as u8
    }

    fn from_code(c: u8) -> Result<Self> {
        use ParamKind::*;
        Ok(match c {
            0 => ConvWeight,
            1 => LinearWeight,
            2 => Bias,
            3 => NormScale,
            4 => NormShift,
            5 => ResidualScale,
            6 => SsmDecay,
            7 => SsmSkip,
            _ => return Err(Error::Format(format!("unknown parameter kind {c}"))),
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub usize);

#[derive(Clone, Debug)]
pub struct ParamEntry {
    pub name: String,
    pub kind: ParamKind,
    pub value: Arc<Tensor>,
}

#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    entries: Vec<ParamEntry>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, kind: ParamKind, value: Tensor) -> ParamId {
        self.entries.push(ParamEntry {
            name: name.into(),
            kind,
            value: Arc::new(value),
        });
        ParamId(self.entries.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[ParamEntry] {
        &self.entries
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        Arc::make_mut(&mut self.entries[id.0].value)
    }

    pub fn set(&mut self, id: ParamId, value: Tensor) -> Result<()> {
        let cur = &self.entries[id.0];
        if cur.value.shape() != value.shape() {
            return Err(Error::shape("param set", cur.value.shape(), value.shape()));
        }
        self.entries[id.0].value = Arc::new(value);
        Ok(())
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.entries.iter().position(|e| e.name == name).map(ParamId)
    }

    pub fn scalar_count(&self) -> usize {
        self.entries.iter().map(|e| e.value.len()).sum()
    }

    /// Inserts every parameter as a graph leaf; `trainable` controls
    /// whether they receive gradients.
    pub fn bind(&self, g: &mut Graph, trainable: bool) -> Result<Bound> {
        let vars = self
            .entries
            .iter()
            .map(|e| {
                if trainable {
                    g.param(Arc::clone(&e.value))
                } else {
                    g.constant(Arc::clone(&e.value))
                }
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Bound { vars })
    }

    pub fn bitwise_eq(&self, other: &ParamStore) -> bool {
        self.entries.len() == other.entries.len()
            && self
                .entries
                .iter()
                .zip(&other.entries)
                .all(|(a, b)| a.name == b.name && a.kind == b.kind && a.value.bitwise_eq(&b.value))
    }

    /// Number of scalars in the fault-injection surface.
    pub fn fault_surface_len(&self) -> usize {
        self.entries
            .iter()
            .filter(|e| e.kind.is_fault_target())
            .map(|e| e.value.len())
            .sum()
    }

    /// Maps a flat weight id onto `(parameter, offset)`.
    pub fn locate(&self, flat: usize) -> Option<(ParamId, usize)> {
        let mut base = 0;
        for (i, e) in self.entries.iter().enumerate() {
            if !e.kind.is_fault_target() {
                continue;
            }
            if flat < base + e.value.len() {
                return Some((ParamId(i), flat - base));
            }
            base += e.value.len();
        }
        None
    }

    /// Inverse of [`ParamStore::locate`].
    pub fn flat_id(&self, id: ParamId, offset: usize) -> Option<usize> {
        let e = self.entries.get(id.0)?;
        if !e.kind.is_fault_target() || offset >= e.value.len() {
            return None;
        }
        let base: usize = self.entries[..id.0]
            .iter()
            .filter(|e| e.kind.is_fault_target())
            .map(|e| e.value.len())
            .sum();
        Some(base + offset)
    }

    /// Fault-target weights in flat index order.
    pub fn fault_surface(&self) -> Vec<f64> {
        self.entries
            .iter()
            .filter(|e| e.kind.is_fault_target())
            .flat_map(|e| e.value.data().iter().copied())
            .collect()
    }

    pub(crate) fn encode(&self, w: &mut Writer) {
        w.u64(self.entries.len() as u64);
        for e in &self.entries {
            w.str(&e.name);
            w.u8(e.kind.code());
            w.tensor(&e.value);
        }
    }

    pub(crate) fn decode(r: &mut Reader<'_>) -> Result<Self> {
        let n = r.u64()? as usize;
        let mut store = ParamStore::new();
        for _ in 0..n {
            let name = r.str()?;
            let kind = ParamKind::from_code(r.u8()?)?;
            let value = r.tensor()?;
            store.add(name, kind, value);
        }
        Ok(store)
    }

    /// Checks that `other` has the same names, kinds and shapes.
    pub fn check_layout(&self, other: &ParamStore) -> Result<()> {
        if self.entries.len() != other.entries.len() {
            return Err(Error::Format(format!(
                "parameter count {} does not match expected {}",
                other.entries.len(),
                self.entries.len()
            )));
        }
        for (a, b) in self.entries.iter().zip(&other.entries) {
            if a.name != b.name || a.kind != b.kind || a.value.shape() != b.value.shape() {
                return Err(Error::Format(format!(
                    "parameter {} {:?} does not match expected {} {:?}",
                    b.name,
                    b.value.shape(),
                    a.name,
                    a.value.shape()
                )));
            }
        }
        Ok(())
    }
}

/// Graph handles of a bound [`ParamStore`].
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    /// Wraps handles given in store order.
    pub fn from_vars(vars: Vec<Var>) -> Self {
        Bound { vars }
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

impl Index<ParamId> for Bound {
    type Output = Var;

    fn index(&self, id: ParamId) -> &Var {
        &self.vars[id.0]
    }
}
