//! Plain-loop reference implementations in f64, used to check the tape
//! versions. Images are `[H][W][C]` nested vectors, token lists `[n][C]`.

use crate::params::ParamStore;
use crate::tensor::Tensor;

pub type Img = Vec<Vec<Vec<f64>>>;

/// Best context index per local token by exhaustive dot-product scan;
/// ties keep the lowest index. `local` is `[N, nl, C]`, `ctx` `[N, nc, C]`.
pub fn exhaustive_match(local: &Tensor<f64>, ctx: &Tensor<f64>) -> Vec<usize> {
    let (n, nl, c) = (local.shape()[0], local.shape()[1], local.shape()[2]);
    let nc = ctx.shape()[1];
    let mut out = Vec::with_capacity(n * nl);
    for b in 0..n {
        for i in 0..nl {
            let mut best = (f64::NEG_INFINITY, 0);
            for j in 0..nc {
                let d: f64 = (0..c).map(|k| local.at(&[b, i, k]) * ctx.at(&[b, j, k])).sum();
                if d > best.0 {
                    best = (d, j);
                }
            }
            out.push(best.1);
        }
    }
    out
}

/// `x W + b` with `W` stored `[in, out]`; a missing bias counts as zero.
pub fn affine(s: &ParamStore<f64>, name: &str, x: &[f64]) -> Vec<f64> {
    let w = s.get(&format!("{name}.w")).expect("weight");
    let b = s.get(&format!("{name}.b")).ok();
    let (ci, co) = (w.shape()[0], w.shape()[1]);
    (0..co)
        .map(|j| b.map_or(0.0, |b| b.data()[j]) + (0..ci).map(|i| x[i] * w.at(&[i, j])).sum::<f64>())
        .collect()
}

fn softmax(logits: &[f64]) -> Vec<f64> {
    let mx = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|l| (l - mx).exp()).collect();
    let z: f64 = e.iter().sum();
    e.into_iter().map(|v| v / z).collect()
}

/// Multi-head scaled dot-product attention of `xs` over `ms` with
/// `{prefix}.{q,k,v,o}` projections; no residual.
pub fn attention(s: &ParamStore<f64>, prefix: &str, xs: &[Vec<f64>], ms: &[Vec<f64>], heads: usize) -> Vec<Vec<f64>> {
    let c = xs[0].len();
    let d = c / heads;
    let q: Vec<_> = xs.iter().map(|x| affine(s, &format!("{prefix}.q"), x)).collect();
    let k: Vec<_> = ms.iter().map(|x| affine(s, &format!("{prefix}.k"), x)).collect();
    let v: Vec<_> = ms.iter().map(|x| affine(s, &format!("{prefix}.v"), x)).collect();
    q.iter()
        .map(|qt| {
            let mut cat = vec![0.0; c];
            for h in 0..heads {
                let logits: Vec<f64> = k
                    .iter()
                    .map(|ku| (0..d).map(|e| qt[h * d + e] * ku[h * d + e]).sum::<f64>() / (d as f64).sqrt())
                    .collect();
                for (a, vu) in softmax(&logits).iter().zip(&v) {
                    for e in 0..d {
                        cat[h * d + e] += a * vu[h * d + e];
                    }
                }
            }
            affine(s, &format!("{prefix}.o"), &cat)
        })
        .collect()
}

/// Image `n` of an `[N, H, W, C]` tensor.
pub fn to_img(t: &Tensor<f64>, n: usize) -> Img {
    let (h, w, c) = (t.shape()[1], t.shape()[2], t.shape()[3]);
    (0..h)
        .map(|y| (0..w).map(|x| (0..c).map(|k| t.at(&[n, y, x, k])).collect()).collect())
        .collect()
}

fn per_pixel(img: &Img, f: impl Fn(&[f64]) -> Vec<f64>) -> Img {
    img.iter().map(|row| row.iter().map(|px| f(px)).collect()).collect()
}

pub fn layer_norm(s: &ParamStore<f64>, name: &str, img: &Img) -> Img {
    let g = s.get(&format!("{name}.gamma")).expect("gamma");
    let b = s.get(&format!("{name}.beta")).expect("beta");
    per_pixel(img, |px| {
        let n = px.len() as f64;
        let mu = px.iter().sum::<f64>() / n;
        let var = px.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / n;
        px.iter()
            .enumerate()
            .map(|(i, v)| (v - mu) / (var + 1e-5).sqrt() * g.data()[i] + b.data()[i])
            .collect()
    })
}

pub fn pointwise(s: &ParamStore<f64>, name: &str, img: &Img) -> Img {
    per_pixel(img, |px| affine(s, name, px))
}

/// Per-channel 3x3 convolution with zero padding.
pub fn depthwise(s: &ParamStore<f64>, name: &str, img: &Img) -> Img {
    let w = s.get(&format!("{name}.w")).expect("weight");
    let b = s.get(&format!("{name}.b")).expect("bias");
    let (h, wd, c) = (img.len() as i64, img[0].len() as i64, img[0][0].len());
    (0..h)
        .map(|y| {
            (0..wd)
                .map(|x| {
                    (0..c)
                        .map(|k| {
                            let mut acc = b.data()[k];
                            for ky in 0..3i64 {
                                for kx in 0..3i64 {
                                    let (sy, sx) = (y + ky - 1, x + kx - 1);
                                    if (0..h).contains(&sy) && (0..wd).contains(&sx) {
                                        acc += img[sy as usize][sx as usize][k] * w.at(&[ky as usize, kx as usize, k]);
                                    }
                                }
                            }
                            acc
                        })
                        .collect()
                })
                .collect()
        })
        .collect()
}

fn channel(img: &Img, k: usize) -> Vec<f64> {
    img.iter().flat_map(|row| row.iter().map(move |px| px[k])).collect()
}

fn unit(v: Vec<f64>) -> Vec<f64> {
    let n = (v.iter().map(|x| x * x).sum::<f64>() + 1e-12).sqrt();
    v.into_iter().map(|x| x / n).collect()
}

/// Cross-stage channel attention written out channel by channel, residual
/// included.
pub fn csffa(s: &ParamStore<f64>, prefix: &str, cur: &Img, pre: &Img, heads: usize) -> Img {
    let (hh, ww, c) = (cur.len(), cur[0].len(), cur[0][0].len());
    let lc = layer_norm(s, &format!("{prefix}.ln_cur"), cur);
    let lp = layer_norm(s, &format!("{prefix}.ln_pre"), pre);
    let q = depthwise(s, &format!("{prefix}.q.dw"), &pointwise(s, &format!("{prefix}.q.pw"), &lc));
    let stage = |m: &str| {
        let a = pointwise(s, &format!("{prefix}.{m}.pw_cur"), &lc);
        let b = pointwise(s, &format!("{prefix}.{m}.pw_pre"), &lp);
        let y: Img = a
            .iter()
            .zip(&b)
            .map(|(ra, rb)| ra.iter().zip(rb).map(|(x, z)| [x.clone(), z.clone()].concat()).collect())
            .collect();
        depthwise(s, &format!("{prefix}.{m}.dw"), &y)
    };
    let (k, v) = (stage("k"), stage("v"));
    let d = c / heads;
    let alpha = s.get(&format!("{prefix}.log_alpha")).expect("alpha");
    // channel of head j's source t: first d from the current stage, then d from the previous
    let src = |j: usize, t: usize| if t < d { j * d + t } else { c + j * d + (t - d) };
    let mut merged = vec![vec![0.0; c]; hh * ww];
    for j in 0..heads {
        let a = alpha.data()[j].exp();
        for i in 0..d {
            let qi = unit(channel(&q, j * d + i));
            let logits: Vec<f64> = (0..2 * d)
                .map(|t| {
                    let kt = unit(channel(&k, src(j, t)));
                    (qi.iter().zip(&kt).map(|(x, y)| x * y).sum::<f64>() / a).max(0.0)
                })
                .collect();
            for (t, w) in softmax(&logits).into_iter().enumerate() {
                for (px, val) in channel(&v, src(j, t)).iter().enumerate() {
                    merged[px][j * d + i] += w * val;
                }
            }
        }
    }
    (0..hh)
        .map(|y| {
            (0..ww)
                .map(|x| {
                    let proj = affine(s, &format!("{prefix}.proj"), &merged[y * ww + x]);
                    proj.iter().zip(&cur[y][x]).map(|(p, r)| p + r).collect()
                })
                .collect()
        })
        .collect()
}
