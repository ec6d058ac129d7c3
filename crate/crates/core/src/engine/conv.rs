//! 3x3 convolutions on NHWC feature maps, zero padding 1, stride 1.
//!
//! The full convolution lowers to a GEMM through an im2col buffer whose
//! columns are ordered `(ky, kx, cin)`, matching the `[3, 3, cin, cout]`
//! weight layout. The buffer is rebuilt in backward rather than stored.

use super::{slot, ConvDims, Node, Op, Var};
use crate::error::{shape_err, Result};
use crate::real::Real;

fn im2col<T: Real>(x: &[T], d: &ConvDims) -> Vec<T> {
    let (h, w, c) = (d.h, d.w, d.cin);
    let mut cols = vec![T::zero(); d.n * h * w * 9 * c];
    for n in 0..d.n {
        let img = &x[n * h * w * c..(n + 1) * h * w * c];
        for y in 0..h {
            for xx in 0..w {
                let row = ((n * h + y) * w + xx) * 9 * c;
                for ky in 0..3 {
                    let sy = y as isize + ky as isize - 1;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    for kx in 0..3 {
                        let sx = xx as isize + kx as isize - 1;
                        if sx < 0 || sx >= w as isize {
                            continue;
                        }
                        let src = (sy as usize * w + sx as usize) * c;
                        let dst = row + (ky * 3 + kx) * c;
                        cols[dst..dst + c].copy_from_slice(&img[src..src + c]);
                    }
                }
            }
        }
    }
    cols
}

fn col2im<T: Real>(cols: &[T], d: &ConvDims, gx: &mut [T]) {
    let (h, w, c) = (d.h, d.w, d.cin);
    for n in 0..d.n {
        let img = &mut gx[n * h * w * c..(n + 1) * h * w * c];
        for y in 0..h {
            for xx in 0..w {
                let row = ((n * h + y) * w + xx) * 9 * c;
                for ky in 0..3 {
                    let sy = y as isize + ky as isize - 1;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    for kx in 0..3 {
                        let sx = xx as isize + kx as isize - 1;
                        if sx < 0 || sx >= w as isize {
                            continue;
                        }
                        let src = row + (ky * 3 + kx) * c;
                        let dst = (sy as usize * w + sx as usize) * c;
                        for i in 0..c {
                            img[dst + i] += cols[src + i];
                        }
                    }
                }
            }
        }
    }
}

fn nhwc(shape: &[usize]) -> Result<(usize, usize, usize, usize)> {
    match *shape {
        [n, h, w, c] => Ok((n, h, w, c)),
        _ => Err(shape_err(format!("expected an NHWC feature map, got {shape:?}"))),
    }
}

impl<'t, T: Real> Var<'t, T> {
    /// Full 3x3 convolution; `w` is `[3, 3, cin, cout]`, `b` is `[cout]`.
    pub fn conv3x3(self, w: Var<'t, T>, b: Var<'t, T>) -> Result<Self> {
        self.same_tape(&w)?;
        self.same_tape(&b)?;
        let (shape, value, dims) = {
            let nodes = self.tape.nodes();
            let (nx, nw, nb) = (&nodes[self.id], &nodes[w.id], &nodes[b.id]);
            let (n, h, wd, cin) = nhwc(&nx.shape)?;
            let cout = match nw.shape[..] {
                [3, 3, ci, co] if ci == cin => co,
                _ => {
                    return Err(shape_err(format!(
                        "conv3x3 weight {:?} for {cin} input channels",
                        nw.shape
                    )))
                }
            };
            if nb.value.len() != cout {
                return Err(shape_err(format!("conv3x3 bias {:?} for {cout} outputs", nb.shape)));
            }
            let dims = ConvDims {
                n,
                h,
                w: wd,
                cin,
                cout,
            };
            let cols = im2col(&nx.value, &dims);
            let rows = n * h * wd;
            let mut out: Vec<T> = (0..rows).flat_map(|_| nb.value.iter().copied()).collect();
            T::gemm(
                rows,
                9 * cin,
                cout,
                T::one(),
                &cols,
                (9 * cin) as isize,
                1,
                &nw.value,
                cout as isize,
                1,
                T::one(),
                &mut out,
                cout as isize,
                1,
            );
            (vec![n, h, wd, cout], out, dims)
        };
        Ok(self.tape.push(
            shape,
            value,
            Op::Conv3x3 {
                x: self.id,
                w: w.id,
                b: b.id,
                dims,
            },
        ))
    }

    /// Per-channel 3x3 convolution; `w` is `[3, 3, c]`, `b` is `[c]`.
    pub fn depthwise3x3(self, w: Var<'t, T>, b: Var<'t, T>) -> Result<Self> {
        self.same_tape(&w)?;
        self.same_tape(&b)?;
        let (shape, value, dims) = {
            let nodes = self.tape.nodes();
            let (nx, nw, nb) = (&nodes[self.id], &nodes[w.id], &nodes[b.id]);
            let (n, h, wd, c) = nhwc(&nx.shape)?;
            if nw.shape[..] != [3, 3, c] || nb.value.len() != c {
                return Err(shape_err(format!(
                    "depthwise weight {:?} / bias {:?} for {c} channels",
                    nw.shape, nb.shape
                )));
            }
            let dims = ConvDims {
                n,
                h,
                w: wd,
                cin: c,
                cout: c,
            };
            let mut out = vec![T::zero(); nx.value.len()];
            for ni in 0..n {
                for y in 0..h {
                    for xx in 0..wd {
                        let o = ((ni * h + y) * wd + xx) * c;
                        out[o..o + c].copy_from_slice(&nb.value);
                        for ky in 0..3 {
                            let sy = y as isize + ky as isize - 1;
                            if sy < 0 || sy >= h as isize {
                                continue;
                            }
                            for kx in 0..3 {
                                let sx = xx as isize + kx as isize - 1;
                                if sx < 0 || sx >= wd as isize {
                                    continue;
                                }
                                let s = ((ni * h + sy as usize) * wd + sx as usize) * c;
                                let k = (ky * 3 + kx) * c;
                                for ci in 0..c {
                                    out[o + ci] += nx.value[s + ci] * nw.value[k + ci];
                                }
                            }
                        }
                    }
                }
            }
            (nx.shape.clone(), out, dims)
        };
        Ok(self.tape.push(
            shape,
            value,
            Op::Depthwise3x3 {
                x: self.id,
                w: w.id,
                b: b.id,
                dims,
            },
        ))
    }
}

pub(crate) fn conv3x3_backward<T: Real>(
    nodes: &[Node<T>],
    grads: &mut [Option<Vec<T>>],
    (x, w, b): (usize, usize, usize),
    d: &ConvDims,
    g: &[T],
) {
    let rows = d.n * d.h * d.w;
    let kc = 9 * d.cin;
    let need_x = nodes[x].requires_grad;
    let need_w = nodes[w].requires_grad;
    if need_w {
        let cols = im2col(&nodes[x].value, d);
        let gw = slot(nodes, grads, w).unwrap();
        // dW = cols^T * dY
        T::gemm(
            kc,
            rows,
            d.cout,
            T::one(),
            &cols,
            1,
            kc as isize,
            g,
            d.cout as isize,
            1,
            T::one(),
            gw,
            d.cout as isize,
            1,
        );
    }
    if let Some(gb) = slot(nodes, grads, b) {
        for row in g.chunks(d.cout) {
            gb.iter_mut().zip(row).for_each(|(acc, &v)| *acc += v);
        }
    }
    if need_x {
        let wv = &nodes[w].value;
        let mut dcols = vec![T::zero(); rows * kc];
        // dCols = dY * W^T
        T::gemm(
            rows,
            d.cout,
            kc,
            T::one(),
            g,
            d.cout as isize,
            1,
            wv,
            1,
            d.cout as isize,
            T::zero(),
            &mut dcols,
            kc as isize,
            1,
        );
        let gx = slot(nodes, grads, x).unwrap();
        col2im(&dcols, d, gx);
    }
}

pub(crate) fn depthwise_backward<T: Real>(
    nodes: &[Node<T>],
    grads: &mut [Option<Vec<T>>],
    (x, w, b): (usize, usize, usize),
    d: &ConvDims,
    g: &[T],
) {
    let (n, h, wd, c) = (d.n, d.h, d.w, d.cin);
    let xv = &nodes[x].value;
    let wv = &nodes[w].value;
    let taps = |f: &mut dyn FnMut(usize, usize, usize)| {
        for ni in 0..n {
            for y in 0..h {
                for xx in 0..wd {
                    let o = ((ni * h + y) * wd + xx) * c;
                    for ky in 0..3 {
                        let sy = y as isize + ky as isize - 1;
                        if sy < 0 || sy >= h as isize {
                            continue;
                        }
                        for kx in 0..3 {
                            let sx = xx as isize + kx as isize - 1;
                            if sx < 0 || sx >= wd as isize {
                                continue;
                            }
                            let s = ((ni * h + sy as usize) * wd + sx as usize) * c;
                            f(o, s, (ky * 3 + kx) * c);
                        }
                    }
                }
            }
        }
    };
    if let Some(gw) = slot(nodes, grads, w) {
        taps(&mut |o, s, k| {
            for ci in 0..c {
                gw[k + ci] += g[o + ci] * xv[s + ci];
            }
        });
    }
    if let Some(gb) = slot(nodes, grads, b) {
        for row in g.chunks(c) {
            gb.iter_mut().zip(row).for_each(|(acc, &v)| *acc += v);
        }
    }
    if let Some(gx) = slot(nodes, grads, x) {
        taps(&mut |o, s, k| {
            for ci in 0..c {
                gx[s + ci] += g[o + ci] * wv[k + ci];
            }
        });
    }
}
