//! Numpy-style broadcasting for binary elementwise primitives.

use crate::error::{Error, Result};

/// How the two operands of a binary op map onto the output index space.
#[derive(Clone, Debug)]
pub(crate) enum Plan {
    /// Identical shapes.
    Same,
    /// `b` equals the trailing extents of `a` (bias-style broadcast).
    SuffixB { nb: usize },
    /// General strided broadcast.
    Strided {
        out_shape: Vec<usize>,
        a_strides: Vec<usize>,
        b_strides: Vec<usize>,
    },
}

pub(crate) fn out_shape(op: &'static str, a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let nd = a.len().max(b.len());
    let mut out = vec![0; nd];
    for i in 0..nd {
        let da = if i + a.len() >= nd { a[i + a.len() - nd] } else { 1 };
        let db = if i + b.len() >= nd { b[i + b.len() - nd] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return Err(Error::shape(op, a, b)),
        };
    }
    Ok(out)
}

fn strides_in(out: &[usize], shape: &[usize]) -> Vec<usize> {
    let nd = out.len();
    let mut strides = vec![0; nd];
    let mut acc = 1;
    for i in (0..nd).rev() {
        if i + shape.len() < nd {
            continue;
        }
        let d = shape[i + shape.len() - nd];
        strides[i] = if d == 1 { 0 } else { acc };
        acc *= d;
    }
    strides
}

pub(crate) fn plan(op: &'static str, a: &[usize], b: &[usize]) -> Result<(Vec<usize>, Plan)> {
    let out = out_shape(op, a, b)?;
    if a == b {
        return Ok((out, Plan::Same));
    }
    if out == a && b.len() <= a.len() && a[a.len() - b.len()..] == *b {
        return Ok((
            out,
            Plan::SuffixB {
                nb: b.iter().product(),
            },
        ));
    }
    let a_strides = strides_in(&out, a);
    let b_strides = strides_in(&out, b);
    Ok((
        out.clone(),
        Plan::Strided {
            out_shape: out,
            a_strides,
            b_strides,
        },
    ))
}

/// Visits every output position in row-major order with the matching
/// operand offsets.
pub(crate) fn for_each(plan: &Plan, n_out: usize, mut f: impl FnMut(usize, usize, usize)) {
    match plan {
        Plan::Same => (0..n_out).for_each(|i| f(i, i, i)),
        Plan::SuffixB { nb } => (0..n_out).for_each(|i| f(i, i, i % nb)),
        Plan::Strided {
            out_shape,
            a_strides,
            b_strides,
        } => {
            let nd = out_shape.len();
            let mut idx = vec![0usize; nd];
            let (mut ia, mut ib) = (0usize, 0usize);
            for i in 0..n_out {
                f(i, ia, ib);
                for ax in (0..nd).rev() {
                    idx[ax] += 1;
                    ia += a_strides[ax];
                    ib += b_strides[ax];
                    if idx[ax] < out_shape[ax] {
                        break;
                    }
                    ia -= a_strides[ax] * idx[ax];
                    ib -= b_strides[ax] * idx[ax];
                    idx[ax] = 0;
                }
            }
        }
    }
}
