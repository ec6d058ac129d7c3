//! Windowed multi-head self-attention block and the group's 3x3 convolution.

use rand::Rng;

use crate::engine::Var;
use crate::error::{shape_err, Result};
use crate::layers::{self, attention};
use crate::params::{Bound, ParamStore};
use crate::real::Real;
use crate::windowing::Partition;

pub fn init_msa<T: Real>(
    store: &mut ParamStore<T>,
    prefix: &str,
    c: usize,
    rng: &mut impl Rng,
) -> Result<()> {
    for m in ["q", "k", "v"] {
        layers::init_linear(store, &format!("{prefix}.{m}"), c, c, false, rng)?;
    }
    layers::init_linear(store, &format!("{prefix}.o"), c, c, true, rng)
}

/// Self-attention inside each window of a `[B, P*P, C]` batch.
///
/// No positional term, so the map is equivariant to row permutations.
/// Returns the output and the `[B, heads, P*P, P*P]` probabilities.
pub fn msa_window<'t, T: Real>(
    p: &Bound<'t, '_, T>,
    prefix: &str,
    x: Var<'t, T>,
    heads: usize,
) -> Result<(Var<'t, T>, Var<'t, T>)> {
    let s = x.shape();
    if s.len() != 3 {
        return Err(shape_err(format!("window batch must be [B, n, C], got {s:?}")));
    }
    if heads == 0 || s[2] % heads != 0 {
        return Err(shape_err(format!("{} channels do not split into {heads} heads", s[2])));
    }
    let q = layers::linear(p, &format!("{prefix}.q"), x)?;
    let k = layers::linear(p, &format!("{prefix}.k"), x)?;
    let v = layers::linear(p, &format!("{prefix}.v"), x)?;
    let (att, probs) = attention(q, k, v, heads)?;
    Ok((layers::linear(p, &format!("{prefix}.o"), att)?, probs))
}

pub fn init_lsab<T: Real>(
    store: &mut ParamStore<T>,
    prefix: &str,
    c: usize,
    mlp_ratio: usize,
    rng: &mut impl Rng,
) -> Result<()> {
    layers::init_layer_norm(store, &format!("{prefix}.ln1"), c)?;
    init_msa(store, &format!("{prefix}.msa"), c, rng)?;
    layers::init_layer_norm(store, &format!("{prefix}.ln2"), c)?;
    layers::init_mlp(store, &format!("{prefix}.mlp"), c, mlp_ratio, rng)
}

/// `[N, H, W, C]` map through windowed attention and MLP, both residual.
pub fn lsab_forward<'t, T: Real>(
    p: &Bound<'t, '_, T>,
    prefix: &str,
    f: Var<'t, T>,
    window: usize,
    heads: usize,
) -> Result<Var<'t, T>> {
    let shape = f.shape();
    let &[n, h, w, c] = shape.as_slice() else {
        return Err(shape_err(format!("expected [N, H, W, C], got {shape:?}")));
    };
    let part = Partition::local(n, h, w, c, window)?;
    let xn = layers::layer_norm(p, &format!("{prefix}.ln1"), f)?;
    let wins = part
        .partition_var(xn)?
        .reshape(vec![n * part.count, window * window, c])?;
    let (att, _) = msa_window(p, &format!("{prefix}.msa"), wins, heads)?;
    let y = part
        .aggregate_var(att.reshape(part.window_shape())?)?
        .add(f)?;
    let hidden = layers::layer_norm(p, &format!("{prefix}.ln2"), y)?;
    layers::mlp(p, &format!("{prefix}.mlp"), hidden)?.add(y)
}

pub fn init_local_conv<T: Real>(
    store: &mut ParamStore<T>,
    prefix: &str,
    c: usize,
    rng: &mut impl Rng,
) -> Result<()> {
    layers::init_conv3x3(store, prefix, c, c, false, rng)
}

/// One 3x3 convolution, zero padding 1, `C -> C`.
pub fn local_conv<'t, T: Real>(p: &Bound<'t, '_, T>, prefix: &str, f: Var<'t, T>) -> Result<Var<'t, T>> {
    layers::conv3x3(p, prefix, f)
}
