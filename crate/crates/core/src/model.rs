//! Network assembly: shallow conv, K groups, sub-pixel reconstruction plus a
//! bilinear skip from the input.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::cspia::{self, CspibConfig, MatchMode};
use crate::csffb;
use crate::engine::{Rows, Tape, Var};
use crate::error::{shape_err, Error, Result};
use crate::layers;
use crate::lsab;
use crate::params::{Bound, ParamStore};
use crate::real::Real;
use crate::resample::{bilinear_resize, image_dims};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub groups: usize,
    pub channels: usize,
    pub window: usize,
    pub heads: usize,
    pub scale: usize,
    pub mlp_ratio: usize,
    pub ffn_ratio: usize,
    pub gumbel_tau: f64,
    pub enable_cspia: bool,
    pub enable_csffa: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            groups: 10,
            channels: 64,
            window: 16,
            heads: 4,
            scale: 4,
            mlp_ratio: 2,
            ffn_ratio: 2,
            gumbel_tau: 1.0,
            enable_cspia: true,
            enable_csffa: true,
        }
    }
}

fn parse<V: std::str::FromStr>(key: &str, v: &str) -> Result<V> {
    v.trim()
        .parse()
        .map_err(|_| Error::Config(format!("bad value {v:?} for {key}")))
}

impl ModelConfig {
    /// Small network used for the desk-scale experiments.
    pub fn toy(scale: usize) -> Self {
        Self {
            groups: 2,
            channels: 16,
            window: 8,
            scale,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(2..=4).contains(&self.scale) {
            return bad(format!("scale {} not in 2..=4", self.scale));
        }
        if self.channels == 0 || self.heads == 0 || self.channels % self.heads != 0 {
            return bad(format!("{} channels do not split into {} heads", self.channels, self.heads));
        }
        if self.window == 0 || self.mlp_ratio == 0 || self.ffn_ratio == 0 {
            return bad("window and ratios must be positive".into());
        }
        if !(self.gumbel_tau > 0.0 && self.gumbel_tau.is_finite()) {
            return bad(format!("gumbel_tau {} must be positive", self.gumbel_tau));
        }
        Ok(())
    }

    pub fn to_pairs(&self) -> Vec<(&'static str, String)> {
        vec![
            ("groups", self.groups.to_string()),
            ("channels", self.channels.to_string()),
            ("window", self.window.to_string()),
            ("heads", self.heads.to_string()),
            ("scale", self.scale.to_string()),
            ("mlp_ratio", self.mlp_ratio.to_string()),
            ("ffn_ratio", self.ffn_ratio.to_string()),
            ("gumbel_tau", format!("{:?}", self.gumbel_tau)),
            ("enable_cspia", self.enable_cspia.to_string()),
            ("enable_csffa", self.enable_csffa.to_string()),
        ]
    }

    pub const KEYS: [&'static str; 10] = [
        "groups",
        "channels",
        "window",
        "heads",
        "scale",
        "mlp_ratio",
        "ffn_ratio",
        "gumbel_tau",
        "enable_cspia",
        "enable_csffa",
    ];

    /// Applies one `key = value` setting; `Ok(false)` if the key is not a
    /// model key.
    pub fn set(&mut self, key: &str, value: &str) -> Result<bool> {
        match key {
            "groups" => self.groups = parse(key, value)?,
            "channels" => self.channels = parse(key, value)?,
            "window" => self.window = parse(key, value)?,
            "heads" => self.heads = parse(key, value)?,
            "scale" => self.scale = parse(key, value)?,
            "mlp_ratio" => self.mlp_ratio = parse(key, value)?,
            "ffn_ratio" => self.ffn_ratio = parse(key, value)?,
            "gumbel_tau" => self.gumbel_tau = parse(key, value)?,
            "enable_cspia" => self.enable_cspia = parse(key, value)?,
            "enable_csffa" => self.enable_csffa = parse(key, value)?,
            _ => return Ok(false),
        }
        Ok(true)
    }

    /// Rebuilds a config from a key/value map holding every model key.
    pub fn from_map(map: &BTreeMap<String, String>) -> Result<Self> {
        let mut cfg = Self::default();
        for key in Self::KEYS {
            let v = map
                .get(key)
                .ok_or_else(|| Error::Config(format!("missing model key {key}")))?;
            cfg.set(key, v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Matching behaviour for a whole forward pass.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// Hard argmax matching.
    Eval,
    /// Gumbel matching, noise derived from `seed` and the group index.
    Train { seed: u64 },
}

impl Mode {
    fn for_group(self, i: usize, tau: f64) -> MatchMode {
        match self {
            Mode::Eval => MatchMode::Hard,
            Mode::Train { seed } => MatchMode::Gumbel {
                tau,
                seed: seed ^ (i as u64 + 1).wrapping_mul(0x9e37_79b9_7f4a_7c15),
            },
        }
    }
}

/// Names of the output layers that start at zero.
pub fn is_zero_init(name: &str) -> bool {
    [
        ".ca.o.", ".msa.o.", ".mlp.fc2.", ".csffa.proj.", ".ffn.pw0.",
    ]
    .iter()
    .any(|s| name.contains(s))
        || name.starts_with("recon.out.")
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model<T: Real = f32> {
    pub config: ModelConfig,
    pub params: ParamStore<T>,
}

impl<T: Real> Model<T> {
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut s = ParamStore::new();
        let c = config.channels;
        layers::init_conv3x3(&mut s, "shallow", 3, c, false, &mut rng)?;
        for i in 0..config.groups {
            let g = format!("g{i}");
            if config.enable_cspia {
                cspia::init_cspib(&mut s, &format!("{g}.cspib"), c, config.mlp_ratio, &mut rng)?;
            }
            lsab::init_lsab(&mut s, &format!("{g}.lsab"), c, config.mlp_ratio, &mut rng)?;
            lsab::init_local_conv(&mut s, &format!("{g}.conv"), c, &mut rng)?;
            csffb::init_csffb(
                &mut s,
                &format!("{g}.csffb"),
                c,
                config.heads,
                config.ffn_ratio,
                config.enable_csffa,
                &mut rng,
            )?;
        }
        let r = config.scale;
        if r == 4 {
            layers::init_conv3x3(&mut s, "recon.up0", c, 4 * c, false, &mut rng)?;
            layers::init_conv3x3(&mut s, "recon.up1", c, 4 * c, false, &mut rng)?;
            layers::init_conv3x3(&mut s, "recon.out", c, 3, true, &mut rng)?;
        } else {
            layers::init_conv3x3(&mut s, "recon.out", c, 3 * r * r, true, &mut rng)?;
        }
        Ok(Self { config, params: s })
    }

    pub fn param_count(&self) -> usize {
        self.params.numel()
    }

    /// Parameter counts by component, in a fixed order.
    pub fn breakdown(&self) -> Vec<(&'static str, usize)> {
        let mut parts = vec![
            ("shallow", 0),
            ("cspib", 0),
            ("lsab", 0),
            ("local_conv", 0),
            ("csffa", 0),
            ("ffn", 0),
            ("reconstruct", 0),
        ];
        for (name, t) in self.params.iter() {
            let key = if name.starts_with("shallow.") {
                "shallow"
            } else if name.starts_with("recon.") {
                "reconstruct"
            } else if name.contains(".cspib.") {
                "cspib"
            } else if name.contains(".lsab.") {
                "lsab"
            } else if name.contains(".conv.") {
                "local_conv"
            } else if name.contains(".csffa.") {
                "csffa"
            } else {
                "ffn"
            };
            parts.iter_mut().find(|(k, _)| *k == key).unwrap().1 += t.numel();
        }
        parts
    }

    /// Full forward on one tape; the tape keeps every intermediate, so use
    /// [`Model::super_resolve`] for large inputs at inference.
    pub fn forward<'t>(&self, p: &Bound<'t, '_, T>, lr: &Tensor<T>, mode: Mode) -> Result<Var<'t, T>> {
        let staged = Staged::new(&self.config, lr)?;
        let tape = p.tape();
        let mut f = shallow_extract(p, tape.constant(&staged.padded))?;
        for i in 0..self.config.groups {
            f = group_forward(p, i, f, &self.config, mode)?;
        }
        staged.reconstruct(p, f)
    }

    /// Eval-mode forward, one tape per stage to bound memory. Bit-identical
    /// to [`Model::forward`] in [`Mode::Eval`].
    pub fn super_resolve(&self, lr: &Tensor<T>) -> Result<Tensor<T>> {
        let staged = Staged::new(&self.config, lr)?;
        let mut f = {
            let tape = Tape::new();
            let p = Bound::frozen(&tape, &self.params);
            shallow_extract(&p, tape.constant(&staged.padded))?.value()
        };
        for i in 0..self.config.groups {
            let tape = Tape::new();
            let p = Bound::frozen(&tape, &self.params);
            f = group_forward(&p, i, tape.constant(&f), &self.config, Mode::Eval)?.value();
        }
        let tape = Tape::new();
        let p = Bound::frozen(&tape, &self.params);
        let out = staged.reconstruct(&p, tape.constant(&f))?.value();
        if lr.ndim() == 3 {
            let shape = out.shape()[1..].to_vec();
            out.reshape(shape)
        } else {
            Ok(out)
        }
    }
}

pub fn param_count(config: &ModelConfig) -> Result<usize> {
    Ok(Model::<f32>::init(config.clone(), 0)?.param_count())
}

/// 3x3 conv, 3 -> C channels.
pub fn shallow_extract<'t, T: Real>(p: &Bound<'t, '_, T>, x: Var<'t, T>) -> Result<Var<'t, T>> {
    layers::conv3x3(p, "shallow", x)
}

/// One group: CSPIB, LSAB, 3x3 conv, then fusion with the group input.
pub fn group_forward<'t, T: Real>(
    p: &Bound<'t, '_, T>,
    i: usize,
    f_in: Var<'t, T>,
    cfg: &ModelConfig,
    mode: Mode,
) -> Result<Var<'t, T>> {
    let g = format!("g{i}");
    let t1 = if cfg.enable_cspia {
        let bc = CspibConfig {
            window: cfg.window,
            heads: cfg.heads,
        };
        cspia::cspib_forward(p, &format!("{g}.cspib"), f_in, bc, mode.for_group(i, cfg.gumbel_tau))?.0
    } else {
        f_in
    };
    let t2 = lsab::lsab_forward(p, &format!("{g}.lsab"), t1, cfg.window, cfg.heads)?;
    let t3 = lsab::local_conv(p, &format!("{g}.conv"), t2)?;
    csffb::csffb_forward(p, &format!("{g}.csffb"), t3, f_in, cfg.heads, cfg.enable_csffa)
}

/// Mirror index into `0..n` for any `i`, without repeating the edge sample.
pub fn reflect_index(i: usize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n - 1);
    let m = i % period;
    if m < n {
        m
    } else {
        period - m
    }
}

/// Reflect-pads `[N, H, W, C]` on the bottom and right to `(hp, wp)`.
pub fn reflect_pad<T: Real>(x: &Tensor<T>, hp: usize, wp: usize) -> Result<Tensor<T>> {
    let (n, h, w, c) = image_dims(x.shape())?;
    if hp < h || wp < w {
        return Err(shape_err(format!("cannot pad {h}x{w} down to {hp}x{wp}")));
    }
    let mut table = Vec::with_capacity(n * hp * wp);
    for ni in 0..n {
        for y in 0..hp {
            for xx in 0..wp {
                table.push((ni * h + reflect_index(y, h)) * w + reflect_index(xx, w));
            }
        }
    }
    Tensor::new(vec![n, hp, wp, c], Rows::new(table, c).apply(x.data()))
}

/// Rows selecting the top-left `h x w` of an `[N, hp, wp, C]` map.
fn crop_rows(n: usize, hp: usize, wp: usize, h: usize, w: usize, c: usize) -> Rows {
    let mut table = Vec::with_capacity(n * h * w);
    for ni in 0..n {
        for y in 0..h {
            for x in 0..w {
                table.push((ni * hp + y) * wp + x);
            }
        }
    }
    Rows::new(table, c)
}

/// Input geometry shared by the forward variants.
struct Staged<T: Real> {
    scale: usize,
    n: usize,
    h: usize,
    w: usize,
    padded: Tensor<T>,
    skip: Tensor<T>,
}

impl<T: Real> Staged<T> {
    fn new(cfg: &ModelConfig, lr: &Tensor<T>) -> Result<Self> {
        let (n, h, w, c) = image_dims(lr.shape())?;
        if c != 3 {
            return Err(shape_err(format!("expected 3 colour channels, got {c}")));
        }
        let lr4 = lr.clone().reshape(vec![n, h, w, 3])?;
        let g = cfg.window;
        let (hp, wp) = (h.div_ceil(g) * g, w.div_ceil(g) * g);
        let padded = if (hp, wp) == (h, w) { lr4.clone() } else { reflect_pad(&lr4, hp, wp)? };
        let skip = bilinear_resize(&lr4, cfg.scale)?;
        Ok(Self {
            scale: cfg.scale,
            n,
            h,
            w,
            padded,
            skip,
        })
    }

    fn reconstruct<'t>(&self, p: &Bound<'t, '_, T>, f: Var<'t, T>) -> Result<Var<'t, T>> {
        let r = self.scale;
        let up = if r == 4 {
            let a = layers::conv3x3(p, "recon.up0", f)?.pixel_shuffle(2)?;
            let b = layers::conv3x3(p, "recon.up1", a)?.pixel_shuffle(2)?;
            layers::conv3x3(p, "recon.out", b)?
        } else {
            layers::conv3x3(p, "recon.out", f)?.pixel_shuffle(r)?
        };
        let s = up.shape();
        let (oh, ow) = (self.h * r, self.w * r);
        let cropped = if (s[1], s[2]) == (oh, ow) {
            up
        } else {
            up.gather(&crop_rows(self.n, s[1], s[2], oh, ow, 3), vec![self.n, oh, ow, 3])?
        };
        cropped.add(p.tape().constant(&self.skip))
    }
}
