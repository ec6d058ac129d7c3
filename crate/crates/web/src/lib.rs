//! Browser bindings: interpolation, network super-resolution and parameter
//! counting on RGBA canvas buffers.
//!
//! The plain functions in [`ops`] do the work and are tested natively; the
//! `#[wasm_bindgen]` wrappers only convert errors.

use wasm_bindgen::prelude::*;

pub mod ops {
    use spiffnet::checkpoint::Checkpoint;
    use spiffnet::config::RunConfig;
    use spiffnet::data::{self, to_u8};
    use spiffnet::model::{Model, ModelConfig};
    use spiffnet::resample::bilinear_resize;
    use spiffnet::Tensor;

    pub type Result<T> = std::result::Result<T, String>;

    fn err(e: impl std::fmt::Display) -> String {
        e.to_string()
    }

    /// RGBA bytes to an `[h, w, 3]` image in [0, 1]; alpha is dropped.
    pub fn from_rgba(rgba: &[u8], width: usize, height: usize) -> Result<Tensor<f32>> {
        if rgba.len() != width * height * 4 {
            return Err(format!("expected {} RGBA bytes, got {}", width * height * 4, rgba.len()));
        }
        let rgb = rgba
            .chunks_exact(4)
            .flat_map(|p| p[..3].iter().map(|&b| b as f32 / 255.0))
            .collect();
        Tensor::new(vec![height, width, 3], rgb).map_err(err)
    }

    pub fn to_rgba(img: &Tensor<f32>) -> Vec<u8> {
        img.data()
            .chunks_exact(3)
            .flat_map(|p| [to_u8(p[0]), to_u8(p[1]), to_u8(p[2]), 255])
            .collect()
    }

    pub fn scene(width: usize, height: usize, seed: u64) -> Vec<u8> {
        to_rgba(&data::synthetic_scene(height, width, seed, data::SCENE_GRAIN))
    }

    /// `r`-times interpolation; `method` is `bicubic` or `bilinear`.
    pub fn upscale(rgba: &[u8], width: usize, height: usize, r: usize, method: &str) -> Result<Vec<u8>> {
        let img = from_rgba(rgba, width, height)?;
        let out = match method {
            "bicubic" => data::bicubic_upsample(&img, r),
            "bilinear" => bilinear_resize(&img, r),
            other => return Err(format!("unknown method {other:?}")),
        }
        .map_err(err)?;
        Ok(to_rgba(&out))
    }

    /// Bicubic ×`r` downsampling, used to make a low-resolution input.
    pub fn downscale(rgba: &[u8], width: usize, height: usize, r: usize) -> Result<Vec<u8>> {
        let img = from_rgba(rgba, width, height)?;
        Ok(to_rgba(&data::bicubic_downsample(&img, r).map_err(err)?))
    }

    /// Runs a checkpointed network, or an untrained ×2 toy network when no
    /// checkpoint is given. Returns the scale and the RGBA output.
    pub fn super_resolve(rgba: &[u8], width: usize, height: usize, ckpt: Option<&[u8]>) -> Result<(usize, Vec<u8>)> {
        let img = from_rgba(rgba, width, height)?;
        let model = match ckpt {
            Some(bytes) => Checkpoint::from_bytes(bytes).map_err(err)?.model().map_err(err)?,
            None => Model::<f32>::init(ModelConfig::toy(2), 0).map_err(err)?,
        };
        let out = model.super_resolve(&img).map_err(err)?;
        Ok((model.config.scale, to_rgba(&out)))
    }

    /// Parameter count for a preset name or `key = value` config text.
    pub fn param_count(config: &str) -> Result<usize> {
        let cfg = match RunConfig::preset(config.trim()) {
            Some(c) => c,
            None => RunConfig::parse(config).map_err(err)?,
        };
        spiffnet::model::param_count(&cfg.model).map_err(err)
    }

    pub fn psnr(a: &[u8], b: &[u8], width: usize, height: usize) -> Result<f64> {
        spiffnet::metrics::psnr(&from_rgba(a, width, height)?, &from_rgba(b, width, height)?).map_err(err)
    }
}

fn js(e: String) -> JsError {
    JsError::new(&e)
}

#[wasm_bindgen]
pub fn scene(width: usize, height: usize, seed: u32) -> Vec<u8> {
    ops::scene(width, height, seed as u64)
}

#[wasm_bindgen]
pub fn upscale(rgba: &[u8], width: usize, height: usize, r: usize, method: &str) -> Result<Vec<u8>, JsError> {
    ops::upscale(rgba, width, height, r, method).map_err(js)
}

#[wasm_bindgen]
pub fn downscale(rgba: &[u8], width: usize, height: usize, r: usize) -> Result<Vec<u8>, JsError> {
    ops::downscale(rgba, width, height, r).map_err(js)
}

/// Output RGBA; the scale is `sqrt(out.len() / rgba.len())`.
#[wasm_bindgen]
pub fn super_resolve(rgba: &[u8], width: usize, height: usize, ckpt: Option<Vec<u8>>) -> Result<Vec<u8>, JsError> {
    ops::super_resolve(rgba, width, height, ckpt.as_deref()).map(|(_, v)| v).map_err(js)
}

#[wasm_bindgen]
pub fn param_count(config: &str) -> Result<usize, JsError> {
    ops::param_count(config).map_err(js)
}

#[wasm_bindgen]
pub fn psnr(a: &[u8], b: &[u8], width: usize, height: usize) -> Result<f64, JsError> {
    ops::psnr(a, b, width, height).map_err(js)
}
