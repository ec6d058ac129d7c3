//! PSNR and SSIM on 8-bit quantised RGB, and the per-image CSV report.

use std::fmt::Write as _;

use crate::data::to_u8;
use crate::error::{shape_err, Error, Result};
use crate::resample::image_dims;
use crate::tensor::Tensor;

const PEAK: f64 = 255.0;
const WIN: usize = 11;
const SIGMA: f64 = 1.5;

fn bytes(img: &Tensor<f32>) -> Vec<f64> {
    img.data().iter().map(|&x| to_u8(x) as f64).collect()
}

fn check_pair(a: &Tensor<f32>, b: &Tensor<f32>) -> Result<(usize, usize, usize)> {
    if a.shape() != b.shape() {
        return Err(shape_err(format!(
            "metric inputs differ: {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let (n, h, w, c) = image_dims(a.shape())?;
    if n != 1 {
        return Err(shape_err("metrics take one image at a time"));
    }
    Ok((h, w, c))
}

/// Peak signal-to-noise ratio in dB over all channels; `+inf` for identical
/// images.
pub fn psnr(sr: &Tensor<f32>, hr: &Tensor<f32>) -> Result<f64> {
    check_pair(sr, hr)?;
    let (a, b) = (bytes(sr), bytes(hr));
    let mse = a.iter().zip(&b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.len() as f64;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (PEAK * PEAK / mse).log10())
}

fn gaussian_window() -> Vec<f64> {
    let half = (WIN / 2) as f64;
    let g: Vec<f64> = (0..WIN)
        .map(|i| (-((i as f64 - half).powi(2)) / (2.0 * SIGMA * SIGMA)).exp())
        .collect();
    let s: f64 = g.iter().sum();
    g.into_iter().map(|v| v / s).collect()
}

/// Separable "valid" filtering of one `h x w` plane.
fn filter_valid(plane: &[f64], h: usize, w: usize, g: &[f64]) -> Vec<f64> {
    let (oh, ow) = (h - WIN + 1, w - WIN + 1);
    let mut rows = vec![0.0; h * ow];
    for y in 0..h {
        for x in 0..ow {
            rows[y * ow + x] = (0..WIN).map(|k| plane[y * w + x + k] * g[k]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = (0..WIN).map(|k| rows[(y + k) * ow + x] * g[k]).sum();
        }
    }
    out
}

/// Structural similarity with an 11x11 Gaussian window (sigma 1.5) over the
/// valid region, averaged over channels.
pub fn ssim(sr: &Tensor<f32>, hr: &Tensor<f32>) -> Result<f64> {
    let (h, w, c) = check_pair(sr, hr)?;
    if h < WIN || w < WIN {
        return Err(Error::InvalidArgument(format!(
            "SSIM needs at least {WIN}x{WIN} pixels, got {h}x{w}"
        )));
    }
    let (a, b) = (bytes(sr), bytes(hr));
    let g = gaussian_window();
    let c1 = (0.01 * PEAK).powi(2);
    let c2 = (0.03 * PEAK).powi(2);
    let mut total = 0.0;
    for ch in 0..c {
        let x: Vec<f64> = (0..h * w).map(|i| a[i * c + ch]).collect();
        let y: Vec<f64> = (0..h * w).map(|i| b[i * c + ch]).collect();
        let prod = |p: &[f64], q: &[f64]| p.iter().zip(q).map(|(u, v)| u * v).collect::<Vec<_>>();
        let mx = filter_valid(&x, h, w, &g);
        let my = filter_valid(&y, h, w, &g);
        let sxx = filter_valid(&prod(&x, &x), h, w, &g);
        let syy = filter_valid(&prod(&y, &y), h, w, &g);
        let sxy = filter_valid(&prod(&x, &y), h, w, &g);
        let mut acc = 0.0;
        for i in 0..mx.len() {
            let (ux, uy) = (mx[i], my[i]);
            let vx = sxx[i] - ux * ux;
            let vy = syy[i] - uy * uy;
            let cov = sxy[i] - ux * uy;
            acc += ((2.0 * ux * uy + c1) * (2.0 * cov + c2))
                / ((ux * ux + uy * uy + c1) * (vx + vy + c2));
        }
        total += acc / mx.len() as f64;
    }
    Ok(total / c as f64)
}

#[derive(Clone, Debug, PartialEq)]
pub struct ImageScore {
    pub name: String,
    pub psnr: f64,
    pub ssim: f64,
}

pub fn score(name: &str, sr: &Tensor<f32>, hr: &Tensor<f32>) -> Result<ImageScore> {
    Ok(ImageScore {
        name: name.to_string(),
        psnr: psnr(sr, hr)?,
        ssim: ssim(sr, hr)?,
    })
}

/// Arithmetic means of PSNR and SSIM; a single identical pair makes the
/// PSNR mean infinite.
pub fn mean_scores(rows: &[ImageScore]) -> (f64, f64) {
    let n = rows.len().max(1) as f64;
    let p = rows.iter().map(|r| r.psnr).sum::<f64>() / n;
    let s = rows.iter().map(|r| r.ssim).sum::<f64>() / n;
    (p, s)
}

fn fmt_psnr(p: f64) -> String {
    if p.is_finite() {
        format!("{p:.4}")
    } else {
        "inf".to_string()
    }
}

/// `image,psnr_db,ssim` with one row per image and a final `mean` row.
pub fn csv_report(rows: &[ImageScore]) -> String {
    let mut out = String::from("image,psnr_db,ssim\n");
    for r in rows {
        let _ = writeln!(out, "{},{},{:.6}", r.name, fmt_psnr(r.psnr), r.ssim);
    }
    let (p, s) = mean_scores(rows);
    let _ = writeln!(out, "mean,{},{:.6}", fmt_psnr(p), s);
    out
}
