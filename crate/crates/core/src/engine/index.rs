//! Index-driven data movement: windows, pixel shuffles, permutes, pads and
//! crops all reduce to gathering contiguous rows by a precomputed table.

use std::rc::Rc;

use super::{slot, Node, Op, Var};
use crate::error::{shape_err, Result};
use crate::real::Real;
use crate::tensor::numel;

/// Gather table: output row `i` copies input row `table[i]`, rows are `len`
/// contiguous elements.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Rows {
    pub table: Rc<[usize]>,
    pub len: usize,
}

impl Rows {
    pub fn new(table: Vec<usize>, len: usize) -> Self {
        Self {
            table: table.into(),
            len,
        }
    }

    pub fn out_numel(&self) -> usize {
        self.table.len() * self.len
    }

    /// Applies the table to plain data.
    pub fn apply<T: Copy>(&self, src: &[T]) -> Vec<T> {
        let mut out = Vec::with_capacity(self.out_numel());
        for &r in self.table.iter() {
            out.extend_from_slice(&src[r * self.len..(r + 1) * self.len]);
        }
        out
    }

    /// True when every input row is used exactly once.
    pub fn is_permutation(&self, input_rows: usize) -> bool {
        if self.table.len() != input_rows {
            return false;
        }
        let mut seen = vec![false; input_rows];
        self.table.iter().all(|&r| r < input_rows && !std::mem::replace(&mut seen[r], true))
    }

    /// Inverse of a permutation table.
    pub fn inverse(&self) -> Self {
        let mut inv = vec![0; self.table.len()];
        for (i, &r) in self.table.iter().enumerate() {
            inv[r] = i;
        }
        Self::new(inv, self.len)
    }
}

/// Table realising an axis permutation of a row-major tensor of `shape`.
///
/// Output axis `k` is input axis `axes[k]`.
pub fn permute_index_map(shape: &[usize], axes: &[usize]) -> Rows {
    assert_eq!(shape.len(), axes.len(), "permute rank");
    let r = shape.len();
    // keep the innermost axis contiguous when it does not move
    let (dims, len) = if axes[r - 1] == r - 1 {
        (r - 1, shape[r - 1])
    } else {
        (r, 1)
    };
    let mut in_strides = vec![0usize; r];
    let mut s = 1;
    for d in (0..r).rev() {
        in_strides[d] = s;
        s *= shape[d];
    }
    let out_shape: Vec<usize> = axes[..dims].iter().map(|&a| shape[a]).collect();
    let total = numel(&out_shape);
    let mut table = Vec::with_capacity(total);
    let mut counter = vec![0usize; dims];
    for _ in 0..total {
        let off: usize = counter
            .iter()
            .zip(&axes[..dims])
            .map(|(&c, &a)| c * in_strides[a])
            .sum();
        table.push(off / len);
        for d in (0..dims).rev() {
            counter[d] += 1;
            if counter[d] < out_shape[d] {
                break;
            }
            counter[d] = 0;
        }
    }
    Rows::new(table, len)
}

impl<'t, T: Real> Var<'t, T> {
    pub fn gather(self, rows: &Rows, out_shape: impl Into<Vec<usize>>) -> Result<Self> {
        let out_shape = out_shape.into();
        let value = {
            let nodes = self.tape.nodes();
            let n = &nodes[self.id];
            if numel(&out_shape) != rows.out_numel() {
                return Err(shape_err(format!(
                    "gather of {} rows x {} into {out_shape:?}",
                    rows.table.len(),
                    rows.len
                )));
            }
            let in_rows = n.value.len() / rows.len;
            if n.value.len() % rows.len != 0 || rows.table.iter().any(|&r| r >= in_rows) {
                return Err(shape_err(format!(
                    "gather table out of range for input {:?}",
                    n.shape
                )));
            }
            rows.apply(&n.value)
        };
        Ok(self.tape.push(
            out_shape,
            value,
            Op::Gather {
                a: self.id,
                rows: rows.clone(),
            },
        ))
    }

    pub fn permute(self, axes: &[usize]) -> Result<Self> {
        let shape = self.shape();
        if axes.len() != shape.len() {
            return Err(shape_err(format!("permute {axes:?} of {shape:?}")));
        }
        let mut check = axes.to_vec();
        check.sort_unstable();
        if check.iter().enumerate().any(|(i, &a)| i != a) {
            return Err(shape_err(format!("{axes:?} is not a permutation")));
        }
        let rows = permute_index_map(&shape, axes);
        let out: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
        self.gather(&rows, out)
    }

    /// Concatenation along the last axis.
    pub fn concat(self, other: Var<'t, T>) -> Result<Self> {
        self.same_tape(&other)?;
        let (shape, value, wa, wb) = {
            let nodes = self.tape.nodes();
            let (na, nb) = (&nodes[self.id], &nodes[other.id]);
            let (ra, rb) = (na.shape.len(), nb.shape.len());
            if ra != rb || na.shape[..ra - 1] != nb.shape[..rb - 1] {
                return Err(shape_err(format!(
                    "concat leading dims disagree: {:?} vs {:?}",
                    na.shape, nb.shape
                )));
            }
            let (wa, wb) = (na.shape[ra - 1], nb.shape[rb - 1]);
            let mut out = Vec::with_capacity(na.value.len() + nb.value.len());
            for (x, y) in na.value.chunks(wa).zip(nb.value.chunks(wb)) {
                out.extend_from_slice(x);
                out.extend_from_slice(y);
            }
            let mut shape = na.shape.clone();
            shape[ra - 1] = wa + wb;
            (shape, out, wa, wb)
        };
        Ok(self.tape.push(
            shape,
            value,
            Op::Concat {
                a: self.id,
                b: other.id,
                wa,
                wb,
            },
        ))
    }

    /// Mean over the second-to-last axis: `[.., rows, w] -> [.., w]`.
    pub fn mean_rows(self) -> Result<Self> {
        let (shape, value, rows, width) = {
            let nodes = self.tape.nodes();
            let n = &nodes[self.id];
            let r = n.shape.len();
            if r < 2 {
                return Err(shape_err(format!("mean_rows needs rank >= 2, got {:?}", n.shape)));
            }
            let (rows, width) = (n.shape[r - 2], n.shape[r - 1]);
            let inv = T::one() / T::from_usize(rows).unwrap();
            let mut out = Vec::with_capacity(n.value.len() / rows);
            for blk in n.value.chunks(rows * width) {
                for c in 0..width {
                    let s: T = (0..rows).map(|i| blk[i * width + c]).sum();
                    out.push(s * inv);
                }
            }
            let mut shape = n.shape[..r - 2].to_vec();
            shape.push(width);
            (shape, out, rows, width)
        };
        Ok(self.tape.push(
            shape,
            value,
            Op::MeanRows {
                a: self.id,
                rows,
                width,
            },
        ))
    }
}

pub(crate) fn gather_backward<T: Real>(
    nodes: &[Node<T>],
    grads: &mut [Option<Vec<T>>],
    a: usize,
    rows: &Rows,
    g: &[T],
) {
    let Some(ga) = slot(nodes, grads, a) else {
        return;
    };
    let l = rows.len;
    for (i, &r) in rows.table.iter().enumerate() {
        let dst = &mut ga[r * l..(r + 1) * l];
        dst.iter_mut().zip(&g[i * l..(i + 1) * l]).for_each(|(d, &v)| *d += v);
    }
}

pub(crate) fn concat_backward<T: Real>(
    nodes: &[Node<T>],
    grads: &mut [Option<Vec<T>>],
    a: usize,
    b: usize,
    wa: usize,
    wb: usize,
    g: &[T],
) {
    if let Some(ga) = slot(nodes, grads, a) {
        for (d, row) in ga.chunks_mut(wa).zip(g.chunks(wa + wb)) {
            d.iter_mut().zip(&row[..wa]).for_each(|(x, &v)| *x += v);
        }
    }
    if let Some(gb) = slot(nodes, grads, b) {
        for (d, row) in gb.chunks_mut(wb).zip(g.chunks(wa + wb)) {
            d.iter_mut().zip(&row[wa..]).for_each(|(x, &v)| *x += v);
        }
    }
}
