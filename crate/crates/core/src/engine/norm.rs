use super::{slot, Node, Op, Var};
use crate::error::{shape_err, Result};
use crate::real::Real;

pub const LN_EPS: f64 = 1e-5;
/// Added to the squared norm before the square root.
pub const L2_EPS: f64 = 1e-12;

pub(crate) fn softmax_row<T: Real>(x: &[T], out: &mut [T]) {
    let max = x.iter().copied().fold(T::neg_infinity(), T::max);
    let mut total = T::zero();
    for (o, &v) in out.iter_mut().zip(x) {
        *o = (v - max).exp();
        total += *o;
    }
    let inv = T::one() / total;
    out.iter_mut().for_each(|o| *o *= inv);
}

impl<'t, T: Real> Var<'t, T> {
    /// Softmax over the last axis, max-subtracted.
    pub fn softmax(self) -> Self {
        let (shape, value, width) = {
            let nodes = self.tape.nodes();
            let n = &nodes[self.id];
            let width = *n.shape.last().unwrap();
            let mut out = vec![T::zero(); n.value.len()];
            for (xr, or) in n.value.chunks(width).zip(out.chunks_mut(width)) {
                softmax_row(xr, or);
            }
            (n.shape.clone(), out, width)
        };
        self.tape.push(shape, value, Op::Softmax { a: self.id, width })
    }

    /// Scales each row of the last axis to unit Euclidean norm.
    pub fn l2_normalize(self) -> Self {
        let eps = T::from_f64_lossy(L2_EPS);
        let (shape, value, width, inv) = {
            let nodes = self.tape.nodes();
            let n = &nodes[self.id];
            let width = *n.shape.last().unwrap();
            let mut out = n.value.clone();
            let mut inv = Vec::with_capacity(n.value.len() / width);
            for row in out.chunks_mut(width) {
                let r = T::one() / (row.iter().map(|&v| v * v).sum::<T>() + eps).sqrt();
                row.iter_mut().for_each(|v| *v *= r);
                inv.push(r);
            }
            (n.shape.clone(), out, width, inv)
        };
        self.tape.push(shape, value, Op::L2Normalize { a: self.id, width, inv })
    }

    /// Layer normalisation over the last axis with affine `gamma`, `beta`.
    pub fn layer_norm(self, gamma: Var<'t, T>, beta: Var<'t, T>) -> Result<Self> {
        self.same_tape(&gamma)?;
        self.same_tape(&beta)?;
        let eps = T::from_f64_lossy(LN_EPS);
        let (shape, value, width, rstd) = {
            let nodes = self.tape.nodes();
            let (nx, ng, nb) = (&nodes[self.id], &nodes[gamma.id], &nodes[beta.id]);
            let width = *nx.shape.last().unwrap();
            if ng.value.len() != width || nb.value.len() != width {
                return Err(shape_err(format!(
                    "layer_norm affine {:?}/{:?} for width {width}",
                    ng.shape, nb.shape
                )));
            }
            let rows = nx.value.len() / width;
            let wt = T::from_usize(width).unwrap();
            let mut out = vec![T::zero(); nx.value.len()];
            let mut rstd = Vec::with_capacity(rows);
            for (xr, or) in nx.value.chunks(width).zip(out.chunks_mut(width)) {
                let mean = xr.iter().copied().sum::<T>() / wt;
                let var = xr.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / wt;
                let r = T::one() / (var + eps).sqrt();
                for i in 0..width {
                    or[i] = (xr[i] - mean) * r * ng.value[i] + nb.value[i];
                }
                rstd.push(r);
            }
            (nx.shape.clone(), out, width, rstd)
        };
        Ok(self.tape.push(
            shape,
            value,
            Op::LayerNorm {
                x: self.id,
                gamma: gamma.id,
                beta: beta.id,
                width,
                rstd,
            },
        ))
    }
}

pub(crate) fn softmax_backward<T: Real>(
    nodes: &[Node<T>],
    grads: &mut [Option<Vec<T>>],
    id: usize,
    a: usize,
    width: usize,
    g: &[T],
) {
    let y = &nodes[id].value;
    let Some(ga) = slot(nodes, grads, a) else {
        return;
    };
    for ((yr, gr), dr) in y.chunks(width).zip(g.chunks(width)).zip(ga.chunks_mut(width)) {
        let dot: T = yr.iter().zip(gr).map(|(&p, &q)| p * q).sum();
        for i in 0..width {
            dr[i] += yr[i] * (gr[i] - dot);
        }
    }
}

pub(crate) fn layer_norm_backward<T: Real>(
    nodes: &[Node<T>],
    grads: &mut [Option<Vec<T>>],
    (x, gamma, beta): (usize, usize, usize),
    width: usize,
    rstd: &[T],
    g: &[T],
) {
    let xv = &nodes[x].value;
    let gv = &nodes[gamma].value;
    let wt = T::from_usize(width).unwrap();
    if let Some(gg) = slot(nodes, grads, gamma) {
        for (row, &r) in rstd.iter().enumerate() {
            let xr = &xv[row * width..(row + 1) * width];
            let mean = xr.iter().copied().sum::<T>() / wt;
            for i in 0..width {
                gg[i] += g[row * width + i] * (xr[i] - mean) * r;
            }
        }
    }
    if let Some(gb) = slot(nodes, grads, beta) {
        for row in g.chunks(width) {
            gb.iter_mut().zip(row).for_each(|(d, &v)| *d += v);
        }
    }
    if let Some(gx) = slot(nodes, grads, x) {
        let mut xh = vec![T::zero(); width];
        for (row, &r) in rstd.iter().enumerate() {
            let xr = &xv[row * width..(row + 1) * width];
            let mean = xr.iter().copied().sum::<T>() / wt;
            let gr = &g[row * width..(row + 1) * width];
            let mut sum_d = T::zero();
            let mut sum_dx = T::zero();
            for i in 0..width {
                xh[i] = (xr[i] - mean) * r;
                let d = gr[i] * gv[i];
                sum_d += d;
                sum_dx += d * xh[i];
            }
            let (md, mdx) = (sum_d / wt, sum_dx / wt);
            let dr = &mut gx[row * width..(row + 1) * width];
            for i in 0..width {
                dr[i] += r * (gr[i] * gv[i] - md - xh[i] * mdx);
            }
        }
    }
}

pub(crate) fn l2_normalize_backward<T: Real>(
    nodes: &[Node<T>],
    grads: &mut [Option<Vec<T>>],
    a: usize,
    width: usize,
    inv: &[T],
    g: &[T],
) {
    let xv = &nodes[a].value;
    let Some(ga) = slot(nodes, grads, a) else {
        return;
    };
    for (row, &r) in inv.iter().enumerate() {
        let span = row * width..(row + 1) * width;
        let (xr, gr) = (&xv[span.clone()], &g[span.clone()]);
        let dot: T = xr.iter().zip(gr).map(|(&x, &d)| x * d).sum();
        let r3 = r * r * r;
        for (i, d) in ga[span].iter_mut().enumerate() {
            *d += r * gr[i] - r3 * xr[i] * dot;
        }
    }
}
