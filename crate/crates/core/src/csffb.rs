//! Cross-stage fusion: channel attention from the current stage over the
//! concatenated current and previous stages, then a gated feed-forward net.

use rand::Rng;

use crate::engine::Var;
use crate::error::{shape_err, Result};
use crate::layers;
use crate::params::{Bound, ParamStore};
use crate::real::Real;
use crate::tensor::Tensor;

fn stage_dims(cur: &[usize], pre: &[usize]) -> Result<(usize, usize, usize, usize)> {
    match (cur, pre) {
        (&[n, h, w, c], p) if p == cur => Ok((n, h, w, c)),
        _ => Err(shape_err(format!("stage shapes disagree: {cur:?} vs {pre:?}"))),
    }
}

pub fn init_csffa<T: Real>(
    store: &mut ParamStore<T>,
    prefix: &str,
    c: usize,
    heads: usize,
    rng: &mut impl Rng,
) -> Result<()> {
    layers::init_layer_norm(store, &format!("{prefix}.ln_cur"), c)?;
    layers::init_layer_norm(store, &format!("{prefix}.ln_pre"), c)?;
    layers::init_linear(store, &format!("{prefix}.q.pw"), c, c, false, rng)?;
    layers::init_depthwise(store, &format!("{prefix}.q.dw"), c, rng)?;
    for m in ["k", "v"] {
        layers::init_linear(store, &format!("{prefix}.{m}.pw_cur"), c, c, false, rng)?;
        layers::init_linear(store, &format!("{prefix}.{m}.pw_pre"), c, c, false, rng)?;
        layers::init_depthwise(store, &format!("{prefix}.{m}.dw"), 2 * c, rng)?;
    }
    store.insert(format!("{prefix}.log_alpha"), Tensor::zeros(vec![heads, 1, 1]))?;
    layers::init_linear(store, &format!("{prefix}.proj"), c, c, true, rng)
}

/// `[N, H, W, C]` -> `[N, heads, C/heads, H*W]`.
fn channel_heads<'t, T: Real>(x: Var<'t, T>, heads: usize) -> Result<Var<'t, T>> {
    let s = x.shape();
    let (n, hw, c) = (s[0], s[1] * s[2], s[3]);
    x.reshape(vec![n, hw, heads, c / heads])?.permute(&[0, 2, 3, 1])
}

/// `[N, H, W, 2C]` laid out `[cur | pre]` -> `[N, heads, 2C/heads, H*W]`,
/// head `j` taking channel block `j` of both stages.
fn stage_heads<'t, T: Real>(y: Var<'t, T>, heads: usize) -> Result<Var<'t, T>> {
    let s = y.shape();
    let (n, hw, d) = (s[0], s[1] * s[2], s[3] / 2 / heads);
    y.reshape(vec![n, hw, 2, heads, d])?
        .permute(&[0, 3, 2, 4, 1])?
        .reshape(vec![n, heads, 2 * d, hw])
}

fn stage_projection<'t, T: Real>(
    p: &Bound<'t, '_, T>,
    prefix: &str,
    cur: Var<'t, T>,
    pre: Var<'t, T>,
) -> Result<Var<'t, T>> {
    let a = layers::linear(p, &format!("{prefix}.pw_cur"), cur)?;
    let b = layers::linear(p, &format!("{prefix}.pw_pre"), pre)?;
    layers::depthwise(p, &format!("{prefix}.dw"), a.concat(b)?)
}

/// Returns the fused `[N, H, W, C]` map and the `[N, heads, C/heads,
/// 2C/heads]` attention map (rows over source channels).
pub fn csffa_forward<'t, T: Real>(
    p: &Bound<'t, '_, T>,
    prefix: &str,
    x_cur: Var<'t, T>,
    x_pre: Var<'t, T>,
    heads: usize,
) -> Result<(Var<'t, T>, Var<'t, T>)> {
    let shape = x_cur.shape();
    let (_, _, _, c) = stage_dims(&shape, &x_pre.shape())?;
    if heads == 0 || c % heads != 0 {
        return Err(shape_err(format!("{c} channels do not split into {heads} heads")));
    }
    let cur = layers::layer_norm(p, &format!("{prefix}.ln_cur"), x_cur)?;
    let pre = layers::layer_norm(p, &format!("{prefix}.ln_pre"), x_pre)?;
    let q = layers::depthwise(p, &format!("{prefix}.q.dw"), layers::linear(p, &format!("{prefix}.q.pw"), cur)?)?;
    let k = stage_projection(p, &format!("{prefix}.k"), cur, pre)?;
    let v = stage_projection(p, &format!("{prefix}.v"), cur, pre)?;

    let qh = channel_heads(q, heads)?.l2_normalize();
    let kh = stage_heads(k, heads)?.l2_normalize();
    let vh = stage_heads(v, heads)?;
    let inv_alpha = p.p(&format!("{prefix}.log_alpha"))?.scale(-T::one()).exp();
    let attn = qh.bmm(kh, false, true)?.mul(inv_alpha)?.relu().softmax();
    let mixed = attn.bmm(vh, false, false)?;
    let merged = mixed.permute(&[0, 3, 1, 2])?.reshape(shape)?;
    let out = layers::linear(p, &format!("{prefix}.proj"), merged)?.add(x_cur)?;
    Ok((out, attn))
}

pub fn init_ffn<T: Real>(
    store: &mut ParamStore<T>,
    prefix: &str,
    c: usize,
    ratio: usize,
    rng: &mut impl Rng,
) -> Result<()> {
    let hidden = c * ratio;
    layers::init_layer_norm(store, &format!("{prefix}.ln"), c)?;
    for b in ["1", "2"] {
        layers::init_linear(store, &format!("{prefix}.pw{b}"), c, hidden, false, rng)?;
        layers::init_depthwise(store, &format!("{prefix}.dw{b}"), hidden, rng)?;
    }
    layers::init_linear(store, &format!("{prefix}.pw0"), hidden, c, true, rng)
}

/// `x + pw0(gelu(dw1(pw1(ln x))) * dw2(pw2(ln x)))`.
pub fn ffn_forward<'t, T: Real>(p: &Bound<'t, '_, T>, prefix: &str, x: Var<'t, T>) -> Result<Var<'t, T>> {
    let xn = layers::layer_norm(p, &format!("{prefix}.ln"), x)?;
    let branch = |b: &str| -> Result<Var<'t, T>> {
        let y = layers::linear(p, &format!("{prefix}.pw{b}"), xn)?;
        layers::depthwise(p, &format!("{prefix}.dw{b}"), y)
    };
    let gate = branch("1")?.gelu().mul(branch("2")?)?;
    layers::linear(p, &format!("{prefix}.pw0"), gate)?.add(x)
}

pub fn init_csffb<T: Real>(
    store: &mut ParamStore<T>,
    prefix: &str,
    c: usize,
    heads: usize,
    ffn_ratio: usize,
    fuse: bool,
    rng: &mut impl Rng,
) -> Result<()> {
    if fuse {
        init_csffa(store, &format!("{prefix}.csffa"), c, heads, rng)?;
    }
    init_ffn(store, &format!("{prefix}.ffn"), c, ffn_ratio, rng)
}

/// Fusion attention (skipped when `fuse` is off) followed by the FFN.
pub fn csffb_forward<'t, T: Real>(
    p: &Bound<'t, '_, T>,
    prefix: &str,
    x_cur: Var<'t, T>,
    x_pre: Var<'t, T>,
    heads: usize,
    fuse: bool,
) -> Result<Var<'t, T>> {
    stage_dims(&x_cur.shape(), &x_pre.shape())?;
    let fused = if fuse {
        csffa_forward(p, &format!("{prefix}.csffa"), x_cur, x_pre, heads)?.0
    } else {
        x_cur
    };
    ffn_forward(p, &format!("{prefix}.ffn"), fused)
}
