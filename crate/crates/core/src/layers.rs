//! Shared building blocks: affine maps, norms, convolutions, MLP and
//! multi-head attention, each as an `init_*` / forward pair keyed by a
//! parameter-name prefix.

use rand::Rng;

use crate::engine::Var;
use crate::error::{shape_err, Result};
use crate::params::{Bound, ParamStore};
use crate::real::Real;
use crate::tensor::Tensor;

pub fn init_linear<T: Real>(
    store: &mut ParamStore<T>,
    prefix: &str,
    cin: usize,
    cout: usize,
    zero: bool,
    rng: &mut impl Rng,
) -> Result<()> {
    if zero {
        store.insert(format!("{prefix}.w"), Tensor::zeros(vec![cin, cout]))?;
        store.insert(format!("{prefix}.b"), Tensor::zeros(vec![cout]))
    } else {
        store.init_uniform(format!("{prefix}.w"), vec![cin, cout], cin, rng)?;
        store.init_uniform(format!("{prefix}.b"), vec![cout], cin, rng)
    }
}

pub fn init_layer_norm<T: Real>(store: &mut ParamStore<T>, prefix: &str, c: usize) -> Result<()> {
    store.insert(format!("{prefix}.gamma"), Tensor::full(vec![c], T::one()))?;
    store.insert(format!("{prefix}.beta"), Tensor::zeros(vec![c]))
}

pub fn init_conv3x3<T: Real>(
    store: &mut ParamStore<T>,
    prefix: &str,
    cin: usize,
    cout: usize,
    zero: bool,
    rng: &mut impl Rng,
) -> Result<()> {
    if zero {
        store.insert(format!("{prefix}.w"), Tensor::zeros(vec![3, 3, cin, cout]))?;
        store.insert(format!("{prefix}.b"), Tensor::zeros(vec![cout]))
    } else {
        store.init_uniform(format!("{prefix}.w"), vec![3, 3, cin, cout], 9 * cin, rng)?;
        store.init_uniform(format!("{prefix}.b"), vec![cout], 9 * cin, rng)
    }
}

pub fn init_depthwise<T: Real>(
    store: &mut ParamStore<T>,
    prefix: &str,
    c: usize,
    rng: &mut impl Rng,
) -> Result<()> {
    store.init_uniform(format!("{prefix}.w"), vec![3, 3, c], 9, rng)?;
    store.init_uniform(format!("{prefix}.b"), vec![c], 9, rng)
}

/// Two affine layers with GELU between.
pub fn init_mlp<T: Real>(
    store: &mut ParamStore<T>,
    prefix: &str,
    c: usize,
    ratio: usize,
    rng: &mut impl Rng,
) -> Result<()> {
    init_linear(store, &format!("{prefix}.fc1"), c, c * ratio, false, rng)?;
    init_linear(store, &format!("{prefix}.fc2"), c * ratio, c, true, rng)
}

pub fn linear<'t, T: Real>(p: &Bound<'t, '_, T>, prefix: &str, x: Var<'t, T>) -> Result<Var<'t, T>> {
    x.matmul(p.p(&format!("{prefix}.w"))?)?
        .add(p.p(&format!("{prefix}.b"))?)
}

pub fn layer_norm<'t, T: Real>(
    p: &Bound<'t, '_, T>,
    prefix: &str,
    x: Var<'t, T>,
) -> Result<Var<'t, T>> {
    x.layer_norm(
        p.p(&format!("{prefix}.gamma"))?,
        p.p(&format!("{prefix}.beta"))?,
    )
}

pub fn conv3x3<'t, T: Real>(p: &Bound<'t, '_, T>, prefix: &str, x: Var<'t, T>) -> Result<Var<'t, T>> {
    x.conv3x3(p.p(&format!("{prefix}.w"))?, p.p(&format!("{prefix}.b"))?)
}

pub fn depthwise<'t, T: Real>(
    p: &Bound<'t, '_, T>,
    prefix: &str,
    x: Var<'t, T>,
) -> Result<Var<'t, T>> {
    x.depthwise3x3(p.p(&format!("{prefix}.w"))?, p.p(&format!("{prefix}.b"))?)
}

pub fn mlp<'t, T: Real>(p: &Bound<'t, '_, T>, prefix: &str, x: Var<'t, T>) -> Result<Var<'t, T>> {
    let hidden = linear(p, &format!("{prefix}.fc1"), x)?.gelu();
    linear(p, &format!("{prefix}.fc2"), hidden)
}

/// Splits the channel axis into heads: `[B, n, h*d] -> [B, h, n, d]`.
pub fn split_heads<'t, T: Real>(x: Var<'t, T>, heads: usize) -> Result<Var<'t, T>> {
    let s = x.shape();
    let (b, n, c) = match s[..] {
        [b, n, c] => (b, n, c),
        _ => return Err(shape_err(format!("split_heads expects [B, n, C], got {s:?}"))),
    };
    if heads == 0 || c % heads != 0 {
        return Err(shape_err(format!("{c} channels do not split into {heads} heads")));
    }
    x.reshape(vec![b, n, heads, c / heads])?.permute(&[0, 2, 1, 3])
}

/// Inverse of [`split_heads`].
pub fn merge_heads<'t, T: Real>(x: Var<'t, T>) -> Result<Var<'t, T>> {
    let s = x.shape();
    let [b, h, n, d] = s[..] else {
        return Err(shape_err(format!("merge_heads expects [B, h, n, d], got {s:?}")));
    };
    x.permute(&[0, 2, 1, 3])?.reshape(vec![b, n, h * d])
}

/// Scaled dot-product attention over heads.
///
/// `q` is `[B, nq, C]`, `k` and `v` are `[B, nk, C]`; returns the merged
/// `[B, nq, C]` output and the `[B, h, nq, nk]` attention probabilities.
pub fn attention<'t, T: Real>(
    q: Var<'t, T>,
    k: Var<'t, T>,
    v: Var<'t, T>,
    heads: usize,
) -> Result<(Var<'t, T>, Var<'t, T>)> {
    let c = *q.shape().last().unwrap();
    let d = c / heads.max(1);
    let (qh, kh, vh) = (split_heads(q, heads)?, split_heads(k, heads)?, split_heads(v, heads)?);
    let scale = T::one() / T::from_usize(d).unwrap().sqrt();
    let probs = qh.bmm(kh, false, true)?.scale(scale).softmax();
    let out = probs.bmm(vh, false, false)?;
    Ok((merge_heads(out)?, probs))
}
