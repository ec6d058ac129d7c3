//! PNG IO, bicubic degradation, patch sampling with dihedral augmentation,
//! and a procedural scene generator for experiments without a corpus.

use std::fs;
use std::io::{BufReader, BufWriter};
use std::path::{Path, PathBuf};

use rand::Rng;

use crate::error::{Error, Result};
use crate::resample::image_dims;
use crate::tensor::Tensor;

fn image_err(path: &Path, reason: impl Into<String>) -> Error {
    Error::Image {
        path: path.to_path_buf(),
        reason: reason.into(),
    }
}

/// Reads an 8-bit RGB PNG as `[H, W, 3]` in `[0, 1]`.
pub fn load_image(path: &Path) -> Result<Tensor<f32>> {
    let file = fs::File::open(path).map_err(|e| image_err(path, e.to_string()))?;
    let decoder = png::Decoder::new(BufReader::new(file));
    let mut reader = decoder.read_info().map_err(|e| image_err(path, e.to_string()))?;
    let size = reader
        .output_buffer_size()
        .ok_or_else(|| image_err(path, "image too large"))?;
    let mut buf = vec![0; size];
    let info = reader.next_frame(&mut buf).map_err(|e| image_err(path, e.to_string()))?;
    if info.color_type != png::ColorType::Rgb || info.bit_depth != png::BitDepth::Eight {
        return Err(image_err(
            path,
            format!("need 8-bit RGB, found {:?} at {:?}", info.color_type, info.bit_depth),
        ));
    }
    let (w, h) = (info.width as usize, info.height as usize);
    let mut data = Vec::with_capacity(h * w * 3);
    for row in buf[..info.buffer_size()].chunks(info.line_size) {
        data.extend(row[..w * 3].iter().map(|&b| b as f32 / 255.0));
    }
    Tensor::new(vec![h, w, 3], data)
}

/// Clamp to `[0, 1]`, scale by 255, round half up.
pub fn to_u8(x: f32) -> u8 {
    (x.clamp(0.0, 1.0) * 255.0 + 0.5).floor() as u8
}

pub fn save_image(img: &Tensor<f32>, path: &Path) -> Result<()> {
    let (n, h, w, c) = image_dims(img.shape())?;
    if n != 1 || c != 3 {
        return Err(image_err(path, format!("cannot save tensor {:?} as RGB", img.shape())));
    }
    let file = fs::File::create(path).map_err(|e| image_err(path, e.to_string()))?;
    let mut enc = png::Encoder::new(BufWriter::new(file), w as u32, h as u32);
    enc.set_color(png::ColorType::Rgb);
    enc.set_depth(png::BitDepth::Eight);
    let mut writer = enc.write_header().map_err(|e| image_err(path, e.to_string()))?;
    let bytes: Vec<u8> = img.data().iter().map(|&x| to_u8(x)).collect();
    writer
        .write_image_data(&bytes)
        .and_then(|_| writer.finish())
        .map_err(|e| image_err(path, e.to_string()))
}

/// PNG files directly inside `dir`, sorted by name.
pub fn list_pngs(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for entry in fs::read_dir(dir)? {
        let p = entry?.path();
        let is_png = p
            .extension()
            .and_then(|e| e.to_str())
            .is_some_and(|e| e.eq_ignore_ascii_case("png"));
        if p.is_file() && is_png {
            out.push(p);
        }
    }
    if out.is_empty() {
        return Err(Error::EmptyDataset(dir.to_path_buf()));
    }
    out.sort();
    Ok(out)
}

/// Cubic convolution kernel with `a = -0.5`.
pub fn cubic(x: f64) -> f64 {
    let a = -0.5;
    let x = x.abs();
    if x <= 1.0 {
        (a + 2.0) * x * x * x - (a + 3.0) * x * x + 1.0
    } else if x < 2.0 {
        a * x * x * x - 5.0 * a * x * x + 8.0 * a * x - 4.0 * a
    } else {
        0.0
    }
}

/// Normalised taps `(source index, weight)` for each of the `len / r`
/// outputs; the kernel is stretched by `r` to low-pass before decimation.
pub fn bicubic_taps(len: usize, r: usize) -> Vec<Vec<(usize, f64)>> {
    let rf = r as f64;
    (0..len / r)
        .map(|o| {
            let centre = (o as f64 + 0.5) * rf - 0.5;
            let lo = (centre - 2.0 * rf).floor() as i64;
            let hi = (centre + 2.0 * rf).ceil() as i64;
            let mut taps: Vec<(usize, f64)> = (lo..=hi)
                .map(|i| {
                    let w = cubic((i as f64 - centre) / rf);
                    (i.clamp(0, len as i64 - 1) as usize, w)
                })
                .filter(|&(_, w)| w != 0.0)
                .collect();
            let total: f64 = taps.iter().map(|t| t.1).sum();
            taps.iter_mut().for_each(|t| t.1 /= total);
            taps
        })
        .collect()
}

/// Separable bicubic reduction of `[H, W, C]` by `r`; `H`, `W` must be
/// multiples of `r`.
pub fn bicubic_downsample(img: &Tensor<f32>, r: usize) -> Result<Tensor<f32>> {
    let (n, h, w, _) = image_dims(img.shape())?;
    if n != 1 || r == 0 || h % r != 0 || w % r != 0 {
        return Err(Error::InvalidArgument(format!(
            "cannot reduce {:?} by {r}",
            img.shape()
        )));
    }
    separable(img, &bicubic_taps(h, r), &bicubic_taps(w, r))
}

/// Taps for enlarging `len` samples by `r` with the plain cubic kernel.
pub fn bicubic_up_taps(len: usize, r: usize) -> Vec<Vec<(usize, f64)>> {
    (0..len * r)
        .map(|o| {
            let src = (o as f64 + 0.5) / r as f64 - 0.5;
            let base = src.floor() as i64;
            (base - 1..=base + 2)
                .map(|i| (i.clamp(0, len as i64 - 1) as usize, cubic(i as f64 - src)))
                .collect()
        })
        .collect()
}

fn separable(img: &Tensor<f32>, ty: &[Vec<(usize, f64)>], tx: &[Vec<(usize, f64)>]) -> Result<Tensor<f32>> {
    let (n, h, w, c) = image_dims(img.shape())?;
    if n != 1 {
        return Err(Error::InvalidArgument("resampling takes one image".into()));
    }
    let (oh, ow) = (ty.len(), tx.len());
    let src = img.data();
    // columns first: [h, ow, c]
    let mut mid = vec![0.0f64; h * ow * c];
    for y in 0..h {
        for (x, taps) in tx.iter().enumerate() {
            for ch in 0..c {
                mid[(y * ow + x) * c + ch] = taps
                    .iter()
                    .map(|&(i, wt)| src[(y * w + i) * c + ch] as f64 * wt)
                    .sum();
            }
        }
    }
    let mut out = Vec::with_capacity(oh * ow * c);
    for taps in ty {
        for x in 0..ow {
            for ch in 0..c {
                let v: f64 = taps.iter().map(|&(i, wt)| mid[(i * ow + x) * c + ch] * wt).sum();
                out.push(v as f32);
            }
        }
    }
    let mut shape = img.shape().to_vec();
    let k = shape.len();
    shape[k - 3] = oh;
    shape[k - 2] = ow;
    Tensor::new(shape, out)
}

/// Bicubic enlargement by `r`, the usual reference baseline.
pub fn bicubic_upsample(img: &Tensor<f32>, r: usize) -> Result<Tensor<f32>> {
    let (_, h, w, _) = image_dims(img.shape())?;
    if r == 0 {
        return Err(Error::InvalidArgument("scale must be positive".into()));
    }
    separable(img, &bicubic_up_taps(h, r), &bicubic_up_taps(w, r))
}

/// Crop `[y0..y0+ph, x0..x0+pw]` of an `[H, W, C]` image.
pub fn crop(img: &Tensor<f32>, y0: usize, x0: usize, ph: usize, pw: usize) -> Result<Tensor<f32>> {
    let (_, h, w, c) = image_dims(img.shape())?;
    if y0 + ph > h || x0 + pw > w {
        return Err(Error::InvalidArgument(format!(
            "crop {ph}x{pw} at ({y0}, {x0}) exceeds {h}x{w}"
        )));
    }
    let mut out = Vec::with_capacity(ph * pw * c);
    for y in y0..y0 + ph {
        let off = (y * w + x0) * c;
        out.extend_from_slice(&img.data()[off..off + pw * c]);
    }
    Tensor::new(vec![ph, pw, c], out)
}

/// Quarter turn counter-clockwise of an `[H, W, C]` image.
pub fn rot90(img: &Tensor<f32>) -> Tensor<f32> {
    let (h, w, c) = (img.shape()[0], img.shape()[1], img.shape()[2]);
    // out(y, x) = in(x, w - 1 - y), out is w x h
    let mut out = Vec::with_capacity(img.numel());
    for y in 0..w {
        for x in 0..h {
            let off = (x * w + (w - 1 - y)) * c;
            out.extend_from_slice(&img.data()[off..off + c]);
        }
    }
    Tensor::new(vec![w, h, c], out).expect("rot90 shape")
}

/// Mirror left-right.
pub fn hflip(img: &Tensor<f32>) -> Tensor<f32> {
    let (h, w, c) = (img.shape()[0], img.shape()[1], img.shape()[2]);
    let mut out = Vec::with_capacity(img.numel());
    for y in 0..h {
        for x in (0..w).rev() {
            let off = (y * w + x) * c;
            out.extend_from_slice(&img.data()[off..off + c]);
        }
    }
    Tensor::new(vec![h, w, c], out).expect("hflip shape")
}

/// One of the eight dihedral transforms: `turns` quarter turns, then an
/// optional flip.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Dihedral {
    pub turns: u8,
    pub flip: bool,
}

impl Dihedral {
    pub const IDENTITY: Self = Self { turns: 0, flip: false };

    pub fn random(rng: &mut impl Rng) -> Self {
        Self {
            turns: rng.gen_range(0..4),
            flip: rng.gen(),
        }
    }

    pub fn apply(self, img: &Tensor<f32>) -> Tensor<f32> {
        let mut out = img.clone();
        for _ in 0..self.turns {
            out = rot90(&out);
        }
        if self.flip {
            out = hflip(&out);
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PatchPair {
    pub lr: Tensor<f32>,
    pub hr: Tensor<f32>,
    pub scale: usize,
}

/// Random aligned crop of `p*r` HR pixels and its bicubic reduction, with
/// the same dihedral transform applied to both when `augment` is set.
pub fn sample_patch_pair(
    hr: &Tensor<f32>,
    r: usize,
    p: usize,
    rng: &mut impl Rng,
    augment: bool,
) -> Result<PatchPair> {
    let (_, h, w, _) = image_dims(hr.shape())?;
    let side = p * r;
    if h < side || w < side || p == 0 {
        return Err(Error::InvalidArgument(format!(
            "{h}x{w} image is smaller than a {side}x{side} patch"
        )));
    }
    // top-left on the r-grid so the crop lines up with a whole-image reduction
    let y0 = rng.gen_range(0..=(h - side) / r) * r;
    let x0 = rng.gen_range(0..=(w - side) / r) * r;
    let hr_patch = crop(hr, y0, x0, side, side)?;
    let lr_patch = bicubic_downsample(&hr_patch, r)?;
    let t = if augment { Dihedral::random(rng) } else { Dihedral::IDENTITY };
    Ok(PatchPair {
        lr: t.apply(&lr_patch),
        hr: t.apply(&hr_patch),
        scale: r,
    })
}

/// Crops `img` so both sides are multiples of `r`.
pub fn crop_to_multiple(img: &Tensor<f32>, r: usize) -> Result<Tensor<f32>> {
    let (_, h, w, _) = image_dims(img.shape())?;
    crop(img, 0, 0, h / r * r, w / r * r)
}

/// Sensor grain amplitude used for the synthetic corpus.
pub const SCENE_GRAIN: f32 = 0.015;

/// Procedural aerial-like scene: smooth terrain, striped field parcels,
/// buildings with shadows and roads, plus uniform per-pixel grain of
/// amplitude `noise`. Deterministic in `seed`.
pub fn synthetic_scene(h: usize, w: usize, seed: u64, noise: f32) -> Tensor<f32> {
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let mut img = vec![[0.0f32; 3]; h * w];
    // terrain: a few low-frequency sinusoids around a random base colour
    let base = [rng.gen_range(0.25..0.5), rng.gen_range(0.3..0.55), rng.gen_range(0.2..0.4)];
    let waves: Vec<(f32, f32, f32, f32)> = (0..3)
        .map(|_| {
            (
                rng.gen_range(0.01..0.05),
                rng.gen_range(0.01..0.05),
                rng.gen_range(0.0..6.3),
                rng.gen_range(0.03..0.08),
            )
        })
        .collect();
    for y in 0..h {
        for x in 0..w {
            let t: f32 = waves
                .iter()
                .map(|&(fy, fx, ph, a)| a * (fy * y as f32 * 6.3 + fx * x as f32 * 6.3 + ph).sin())
                .sum();
            img[y * w + x] = [base[0] + t, base[1] + t, base[2] + 0.5 * t];
        }
    }
    let rect = |img: &mut Vec<[f32; 3]>, y0: i64, x0: i64, rh: i64, rw: i64, col: [f32; 3]| {
        for y in y0.max(0)..(y0 + rh).min(h as i64) {
            for x in x0.max(0)..(x0 + rw).min(w as i64) {
                img[y as usize * w + x as usize] = col;
            }
        }
    };
    // field parcels with stripe texture
    for _ in 0..rng.gen_range(2..5) {
        let (y0, x0) = (rng.gen_range(0..h as i64), rng.gen_range(0..w as i64));
        let (rh, rw) = (rng.gen_range(12..40), rng.gen_range(12..40));
        let col = [rng.gen_range(0.3..0.7), rng.gen_range(0.35..0.7), rng.gen_range(0.15..0.4)];
        let period = rng.gen_range(3..7);
        for y in y0.max(0)..(y0 + rh).min(h as i64) {
            for x in x0.max(0)..(x0 + rw).min(w as i64) {
                let s = if (x + y) / period % 2 == 0 { 0.06 } else { -0.06 };
                img[y as usize * w + x as usize] = [col[0] + s, col[1] + s, col[2] + s];
            }
        }
    }
    // roads
    for _ in 0..rng.gen_range(1..3) {
        let horizontal: bool = rng.gen();
        let width = rng.gen_range(2..5);
        let grey = rng.gen_range(0.45..0.65);
        if horizontal {
            rect(&mut img, rng.gen_range(0..h as i64), 0, width, w as i64, [grey; 3]);
        } else {
            rect(&mut img, 0, rng.gen_range(0..w as i64), h as i64, width, [grey; 3]);
        }
    }
    // buildings: bright roofs with a dark shadow offset to the lower right
    for _ in 0..rng.gen_range(6..14) {
        let (y0, x0) = (rng.gen_range(0..h as i64), rng.gen_range(0..w as i64));
        let (rh, rw) = (rng.gen_range(4..14), rng.gen_range(4..14));
        rect(&mut img, y0 + 2, x0 + 2, rh, rw, [0.1, 0.1, 0.12]);
        let roof = rng.gen_range(0.55..0.95);
        let tint = rng.gen_range(-0.1..0.1);
        rect(&mut img, y0, x0, rh, rw, [roof + tint, roof, roof - tint]);
    }
    let mut data = Vec::with_capacity(h * w * 3);
    for px in img {
        for v in px {
            let grain: f32 = rng.gen_range(-1.0..1.0) * noise;
            data.push((v + grain).clamp(0.0, 1.0));
        }
    }
    Tensor::new(vec![h, w, 3], data).expect("scene shape")
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_img(h: usize, w: usize, seed: u64) -> Tensor<f32> {
        Tensor::uniform(vec![h, w, 3], 0.0, 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
    }

    fn quantized(h: usize, w: usize, seed: u64) -> Tensor<f32> {
        rand_img(h, w, seed).map(|x| to_u8(x) as f32 / 255.0)
    }

    #[test]
    fn png_round_trip_is_lossless() {
        let dir = tempfile::tempdir().unwrap();
        let (a, b) = (dir.path().join("a.png"), dir.path().join("b.png"));
        let img = quantized(7, 5, 1);
        save_image(&img, &a).unwrap();
        let back = load_image(&a).unwrap();
        assert_eq!(back, img);
        save_image(&back, &b).unwrap();
        assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
    }

    #[test]
    fn byte_values_map_to_unit_range() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("px.png");
        let mut enc = png::Encoder::new(fs::File::create(&p).unwrap(), 2, 1);
        enc.set_color(png::ColorType::Rgb);
        enc.set_depth(png::BitDepth::Eight);
        enc.write_header().unwrap().write_image_data(&[255, 128, 0, 1, 2, 3]).unwrap();
        let img = load_image(&p).unwrap();
        assert_eq!(img.at(&[0, 0, 0]), 1.0);
        assert_eq!(img.at(&[0, 0, 1]), 128.0 / 255.0);
        assert_eq!(img.at(&[0, 0, 2]), 0.0);
    }

    #[test]
    fn non_rgb_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("g.png");
        let mut enc = png::Encoder::new(fs::File::create(&p).unwrap(), 2, 2);
        enc.set_color(png::ColorType::Grayscale);
        enc.set_depth(png::BitDepth::Eight);
        enc.write_header().unwrap().write_image_data(&[0, 1, 2, 3]).unwrap();
        assert!(matches!(load_image(&p), Err(Error::Image { .. })));
        assert!(load_image(&dir.path().join("missing.png")).is_err());
    }

    #[test]
    fn save_rounds_half_up_after_clamp() {
        assert_eq!(to_u8(-0.3), 0);
        assert_eq!(to_u8(1.7), 255);
        assert_eq!(to_u8(0.5 / 255.0), 1);
        assert_eq!(to_u8(0.49 / 255.0), 0);
    }

    #[test]
    fn listing_skips_other_files_and_errors_when_empty() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(list_pngs(dir.path()), Err(Error::EmptyDataset(_))));
        fs::write(dir.path().join("notes.txt"), b"x").unwrap();
        save_image(&quantized(2, 2, 0), &dir.path().join("b.PNG")).unwrap();
        save_image(&quantized(2, 2, 0), &dir.path().join("a.png")).unwrap();
        fs::create_dir(dir.path().join("sub.png")).unwrap();
        let names: Vec<_> = list_pngs(dir.path())
            .unwrap()
            .iter()
            .map(|p| p.file_name().unwrap().to_string_lossy().into_owned())
            .collect();
        assert_eq!(names, vec!["a.png", "b.PNG"]);
    }

    #[test]
    fn bicubic_constant_stays_constant() {
        let img = Tensor::<f32>::full(vec![12, 24, 3], 0.42);
        for r in 2..=4 {
            let out = bicubic_downsample(&img, r).unwrap();
            assert_eq!(out.shape(), &[12 / r, 24 / r, 3]);
            assert!(out.data().iter().all(|&v| (v - 0.42).abs() < 1e-6));
        }
    }

    #[test]
    fn bicubic_preserves_mean_brightness() {
        for seed in 0..5 {
            let img = rand_img(48, 48, seed);
            let mean = |t: &Tensor<f32>| t.data().iter().map(|&x| x as f64).sum::<f64>() / t.numel() as f64;
            for r in 2..=4 {
                let out = bicubic_downsample(&img, r).unwrap();
                assert!((mean(&out) - mean(&img)).abs() < 1e-3, "r={r}");
            }
        }
    }

    #[test]
    fn bicubic_matches_direct_kernel_sum() {
        let img = rand_img(12, 18, 3);
        for r in [2, 3] {
            let out = bicubic_downsample(&img, r).unwrap();
            let rf = r as f64;
            for oy in 0..12 / r {
                for ox in 0..18 / r {
                    for c in 0..3 {
                        let (cy, cx) = ((oy as f64 + 0.5) * rf - 0.5, (ox as f64 + 0.5) * rf - 0.5);
                        let (mut acc, mut norm_y, mut norm_x) = (0.0, 0.0, 0.0);
                        for dy in -20i64..=20 {
                            norm_y += cubic((cy.floor() + dy as f64 - cy) / rf);
                        }
                        for dx in -20i64..=20 {
                            norm_x += cubic((cx.floor() + dx as f64 - cx) / rf);
                        }
                        for dy in -20i64..=20 {
                            for dx in -20i64..=20 {
                                let (sy, sx) = (cy.floor() + dy as f64, cx.floor() + dx as f64);
                                let wgt = cubic((sy - cy) / rf) * cubic((sx - cx) / rf);
                                let (iy, ix) = ((sy as i64).clamp(0, 11) as usize, (sx as i64).clamp(0, 17) as usize);
                                acc += wgt * img.at(&[iy, ix, c]) as f64;
                            }
                        }
                        let expect = acc / (norm_y * norm_x);
                        assert!((out.at(&[oy, ox, c]) as f64 - expect).abs() < 1e-5);
                    }
                }
            }
        }
    }

    #[test]
    fn bicubic_upsample_keeps_constants_and_ramps() {
        let img = Tensor::<f32>::full(vec![5, 4, 3], 0.3);
        let up = bicubic_upsample(&img, 3).unwrap();
        assert_eq!(up.shape(), &[15, 12, 3]);
        assert!(up.data().iter().all(|&v| (v - 0.3).abs() < 1e-6));
        // cubic convolution reproduces linear functions away from the border
        let ramp = Tensor::from_fn(vec![1, 8, 1], |i| i as f32 * 0.1);
        let up = bicubic_upsample(&ramp, 2).unwrap();
        for x in 4..12 {
            let src = (x as f64 + 0.5) / 2.0 - 0.5;
            assert!((up.at(&[0, x, 0]) as f64 - 0.1 * src).abs() < 1e-6);
        }
    }

    #[test]
    fn bicubic_rejects_indivisible() {
        assert!(bicubic_downsample(&rand_img(7, 8, 0), 2).is_err());
    }

    proptest! {
        #[test]
        fn dihedral_relations(h in 1usize..7, w in 1usize..7, seed in any::<u64>()) {
            let img = rand_img(h, w, seed);
            let mut x = img.clone();
            for _ in 0..4 {
                x = rot90(&x);
            }
            prop_assert_eq!(&x, &img);
            prop_assert_eq!(&hflip(&hflip(&img)), &img);
            let turned = rot90(&img);
            prop_assert_eq!(turned.shape(), &[w, h, 3]);
        }
    }

    #[test]
    fn rot90_direction() {
        // [[a, b]] -> [[b], [a]]
        let img3 = Tensor::new(vec![1, 2, 3], vec![1.0f32, 1.0, 1.0, 2.0, 2.0, 2.0]).unwrap();
        let r3 = rot90(&img3);
        assert_eq!(r3.shape(), &[2, 1, 3]);
        assert_eq!(r3.data(), &[2.0, 2.0, 2.0, 1.0, 1.0, 1.0]);
    }

    #[test]
    fn patch_lr_is_bicubic_of_patch_hr() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let hr = rand_img(100, 120, 9);
        for _ in 0..10 {
            let pair = sample_patch_pair(&hr, 2, 24, &mut rng, false).unwrap();
            assert_eq!(pair.hr.shape(), &[48, 48, 3]);
            assert_eq!(pair.lr, bicubic_downsample(&pair.hr, 2).unwrap());
        }
    }

    #[test]
    fn augmentation_is_shared_by_both_members() {
        let hr = rand_img(64, 64, 2);
        for seed in 0..16 {
            let mut a = ChaCha8Rng::seed_from_u64(seed);
            let mut b = ChaCha8Rng::seed_from_u64(seed);
            let aug = sample_patch_pair(&hr, 2, 16, &mut a, true).unwrap();
            // replay the same draws to recover the transform
            let y0 = b.gen_range(0..=(64 - 32) / 2) * 2;
            let x0 = b.gen_range(0..=(64 - 32) / 2) * 2;
            let t = Dihedral::random(&mut b);
            let hr_patch = crop(&hr, y0, x0, 32, 32).unwrap();
            assert_eq!(aug.hr, t.apply(&hr_patch));
            assert_eq!(aug.lr, t.apply(&bicubic_downsample(&hr_patch, 2).unwrap()));
        }
    }

    #[test]
    fn too_small_image_is_an_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(sample_patch_pair(&rand_img(40, 100, 0), 2, 24, &mut rng, false).is_err());
    }

    #[test]
    fn scenes_are_deterministic_and_in_range() {
        let a = synthetic_scene(64, 80, 3, SCENE_GRAIN);
        assert_eq!(a, synthetic_scene(64, 80, 3, SCENE_GRAIN));
        assert_ne!(a, synthetic_scene(64, 80, 4, SCENE_GRAIN));
        assert!(a.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
    }
}
