//! Bilinear upsampling and sub-pixel (pixel shuffle) rearrangement.

use crate::engine::{Rows, Var};
use crate::error::{shape_err, Error, Result};
use crate::real::Real;
use crate::tensor::Tensor;

/// Splits `[H, W, C]` or `[N, H, W, C]` into `(n, h, w, c)`.
pub fn image_dims(shape: &[usize]) -> Result<(usize, usize, usize, usize)> {
    match *shape {
        [h, w, c] => Ok((1, h, w, c)),
        [n, h, w, c] => Ok((n, h, w, c)),
        _ => Err(shape_err(format!("expected [H, W, C] or [N, H, W, C], got {shape:?}"))),
    }
}

fn with_spatial(shape: &[usize], h: usize, w: usize, c: usize) -> Vec<usize> {
    let mut out = shape.to_vec();
    let r = out.len();
    out[r - 3] = h;
    out[r - 2] = w;
    out[r - 1] = c;
    out
}

/// Source taps for one output coordinate: `(i0, i1, frac)`.
///
/// Half-pixel centres: `src = (dst + 0.5) / r - 0.5`, clamped to the edge.
pub fn bilinear_taps(dst: usize, r: usize, len: usize) -> (usize, usize, f64) {
    let src = ((dst as f64 + 0.5) / r as f64 - 0.5).max(0.0);
    let i0 = (src.floor() as usize).min(len - 1);
    let i1 = (i0 + 1).min(len - 1);
    (i0, i1, src - i0 as f64)
}

pub fn bilinear_resize<T: Real>(img: &Tensor<T>, r: usize) -> Result<Tensor<T>> {
    if !(2..=4).contains(&r) {
        return Err(Error::InvalidArgument(format!("bilinear scale {r} not in 2..=4")));
    }
    let (n, h, w, c) = image_dims(img.shape())?;
    let (oh, ow) = (h * r, w * r);
    let ys: Vec<_> = (0..oh).map(|y| bilinear_taps(y, r, h)).collect();
    let xs: Vec<_> = (0..ow).map(|x| bilinear_taps(x, r, w)).collect();
    let src = img.data();
    let mut out = Vec::with_capacity(n * oh * ow * c);
    for ni in 0..n {
        let base = ni * h * w * c;
        let px = |y: usize, x: usize, ch: usize| src[base + (y * w + x) * c + ch];
        for &(y0, y1, fy) in &ys {
            let fy = T::from_f64_lossy(fy);
            for &(x0, x1, fx) in &xs {
                let fx = T::from_f64_lossy(fx);
                for ch in 0..c {
                    let top = px(y0, x0, ch) + (px(y0, x1, ch) - px(y0, x0, ch)) * fx;
                    let bot = px(y1, x0, ch) + (px(y1, x1, ch) - px(y1, x0, ch)) * fx;
                    out.push(top + (bot - top) * fy);
                }
            }
        }
    }
    Tensor::new(with_spatial(img.shape(), oh, ow, c), out)
}

/// Gather table for `[N, H, W, C*r*r] -> [N, H*r, W*r, C]` with
/// `out(y*r+dy, x*r+dx, c) = in(y, x, c*r*r + dy*r + dx)`.
pub fn pixel_shuffle_rows(n: usize, h: usize, w: usize, c: usize, r: usize) -> Rows {
    let cin = c * r * r;
    let mut table = Vec::with_capacity(n * h * r * w * r * c);
    for ni in 0..n {
        for oy in 0..h * r {
            let (y, dy) = (oy / r, oy % r);
            for ox in 0..w * r {
                let (x, dx) = (ox / r, ox % r);
                let base = ((ni * h + y) * w + x) * cin;
                for ch in 0..c {
                    table.push(base + ch * r * r + dy * r + dx);
                }
            }
        }
    }
    Rows::new(table, 1)
}

fn shuffle_dims(shape: &[usize], r: usize) -> Result<(usize, usize, usize, usize)> {
    let (n, h, w, cin) = image_dims(shape)?;
    if r == 0 || cin % (r * r) != 0 {
        return Err(shape_err(format!(
            "pixel shuffle x{r} needs channels divisible by {}, got {cin}",
            r * r
        )));
    }
    Ok((n, h, w, cin / (r * r)))
}

pub fn pixel_shuffle<T: Real>(x: &Tensor<T>, r: usize) -> Result<Tensor<T>> {
    let (n, h, w, c) = shuffle_dims(x.shape(), r)?;
    let rows = pixel_shuffle_rows(n, h, w, c, r);
    Tensor::new(with_spatial(x.shape(), h * r, w * r, c), rows.apply(x.data()))
}

pub fn pixel_unshuffle<T: Real>(x: &Tensor<T>, r: usize) -> Result<Tensor<T>> {
    let (n, h, w, c) = image_dims(x.shape())?;
    if r == 0 || h % r != 0 || w % r != 0 {
        return Err(shape_err(format!("pixel unshuffle x{r} of {:?}", x.shape())));
    }
    let rows = pixel_shuffle_rows(n, h / r, w / r, c, r).inverse();
    Tensor::new(with_spatial(x.shape(), h / r, w / r, c * r * r), rows.apply(x.data()))
}

impl<'t, T: Real> Var<'t, T> {
    pub fn pixel_shuffle(self, r: usize) -> Result<Self> {
        let shape = self.shape();
        let (n, h, w, c) = shuffle_dims(&shape, r)?;
        let rows = pixel_shuffle_rows(n, h, w, c, r);
        self.gather(&rows, with_spatial(&shape, h * r, w * r, c))
    }
}
