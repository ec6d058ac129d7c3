//! Cross-spatial pixel integration: every local window is pooled to a token,
//! paired with its most similar contextual window, and cross-attends to it.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::engine::Var;
use crate::error::{shape_err, Error, Result};
use crate::layers::{self, attention};
use crate::params::{Bound, ParamStore};
use crate::real::Real;
use crate::tensor::Tensor;
use crate::windowing::{Partition, WindowSet};

/// How windows are paired.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum MatchMode {
    /// Deterministic argmax, ties to the lowest index.
    Hard,
    /// Straight-through Gumbel-softmax sample at temperature `tau`.
    Gumbel { tau: f64, seed: u64 },
}

/// One pooled token per window, `[N, n_windows, C]`.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenSet<T: Real = f32> {
    pub tokens: Tensor<T>,
    pub normalized: bool,
}

impl<T: Real> TokenSet<T> {
    pub fn len(&self) -> usize {
        self.tokens.shape()[1]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MatchAssignment<T: Real = f32> {
    pub mode: MatchMode,
    /// `N * n_local` indices into the contextual windows of the same image.
    pub hard_index: Vec<usize>,
    /// `[N, n_local, n_ctx]` sampling distribution (Gumbel mode only).
    pub soft_weights: Option<Tensor<T>>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CspibConfig {
    pub window: usize,
    pub heads: usize,
}

/// Index of the largest entry; the first one wins ties.
pub fn argmax<T: PartialOrd + Copy>(row: &[T]) -> usize {
    let mut best = 0;
    for (i, v) in row.iter().enumerate() {
        if *v > row[best] {
            best = i;
        }
    }
    best
}

/// Standard Gumbel noise `-ln(-ln u)`, `u` uniform on (0, 1).
pub fn gumbel_noise(rng: &mut impl Rng) -> f64 {
    let u: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
    -(-u.ln()).ln()
}

/// Index picked by perturbing `logits` with Gumbel noise.
pub fn gumbel_pick(logits: &[f64], tau: f64, rng: &mut impl Rng) -> usize {
    let perturbed: Vec<f64> = logits.iter().map(|l| (l + gumbel_noise(rng)) / tau).collect();
    argmax(&perturbed)
}

/// Mean over the window positions followed by layer norm.
pub fn pool_tokens_var<'t, T: Real>(
    windows: Var<'t, T>,
    gamma: Var<'t, T>,
    beta: Var<'t, T>,
) -> Result<Var<'t, T>> {
    windows.mean_rows()?.layer_norm(gamma, beta)
}

/// Tokens of a window set under a unit-affine layer norm.
pub fn pool_tokens<T: Real>(ws: &WindowSet<T>) -> Result<TokenSet<T>> {
    let tape = crate::engine::Tape::new();
    let c = ws.partition.c;
    let gamma = tape.constant(&Tensor::full(vec![c], T::one()));
    let beta = tape.constant(&Tensor::zeros(vec![c]));
    let tokens = pool_tokens_var(tape.constant(&ws.windows), gamma, beta)?.value();
    Ok(TokenSet {
        tokens,
        normalized: true,
    })
}

fn check_tokens(local: &[usize], ctx: &[usize]) -> Result<()> {
    if local.len() != 3 || ctx.len() != 3 || local[0] != ctx[0] || local[2] != ctx[2] {
        return Err(shape_err(format!("token sets {local:?} and {ctx:?} disagree")));
    }
    if ctx[1] == 0 {
        return Err(Error::InvalidArgument("no contextual windows to match".into()));
    }
    Ok(())
}

/// Pairs windows from similarity `scores` (`[N, n_local, n_ctx]`).
///
/// Returns the assignment and the `[N, n_local, n_ctx]` weights used to mix
/// contextual windows: a constant one-hot in hard mode, a straight-through
/// one-hot over the soft sample in Gumbel mode.
pub fn match_scores<'t, T: Real>(
    scores: Var<'t, T>,
    mode: MatchMode,
) -> Result<(MatchAssignment<T>, Var<'t, T>)> {
    let shape = scores.shape();
    let &[n, nl, nc] = shape.as_slice() else {
        return Err(shape_err(format!("scores must be [N, n_local, n_ctx], got {shape:?}")));
    };
    if nc == 0 {
        return Err(Error::InvalidArgument("no contextual windows to match".into()));
    }
    let tape = scores.tape();
    let one_hot = |idx: &[usize]| {
        let mut t = Tensor::zeros(vec![n, nl, nc]);
        for (row, &k) in idx.iter().enumerate() {
            t.data_mut()[row * nc + k] = T::one();
        }
        t
    };
    match mode {
        MatchMode::Hard => {
            let value = scores.value();
            let idx: Vec<usize> = value.data().chunks(nc).map(argmax).collect();
            let weights = tape.constant(&one_hot(&idx));
            Ok((
                MatchAssignment {
                    mode,
                    hard_index: idx,
                    soft_weights: None,
                },
                weights,
            ))
        }
        MatchMode::Gumbel { tau, seed } => {
            if !(tau > 0.0) {
                return Err(Error::InvalidArgument(format!("temperature {tau} must be positive")));
            }
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let noise = Tensor::from_fn(vec![n, nl, nc], |_| T::from_f64_lossy(gumbel_noise(&mut rng)));
            let inv_tau = T::from_f64_lossy(1.0 / tau);
            let soft = scores.add(tape.constant(&noise))?.scale(inv_tau).softmax();
            let soft_value = soft.value();
            let idx: Vec<usize> = soft_value.data().chunks(nc).map(argmax).collect();
            let weights = soft.straight_through(&one_hot(&idx))?;
            Ok((
                MatchAssignment {
                    mode,
                    hard_index: idx,
                    soft_weights: Some(soft_value),
                },
                weights,
            ))
        }
    }
}

/// Pairs every local token with a contextual token by dot-product similarity.
pub fn match_windows<T: Real>(
    local: &TokenSet<T>,
    ctx: &TokenSet<T>,
    mode: MatchMode,
) -> Result<MatchAssignment<T>> {
    check_tokens(local.tokens.shape(), ctx.tokens.shape())?;
    let tape = crate::engine::Tape::new();
    let scores = tape
        .constant(&local.tokens)
        .bmm(tape.constant(&ctx.tokens), false, true)?;
    Ok(match_scores(scores, mode)?.0)
}

/// Mixes contextual windows `[N, n_ctx, P, C]` with `[N, n_local, n_ctx]`
/// weights into one matched window per local window.
pub fn gather_matched<'t, T: Real>(ctx: Var<'t, T>, weights: Var<'t, T>) -> Result<Var<'t, T>> {
    let s = ctx.shape();
    let &[n, nc, p, c] = s.as_slice() else {
        return Err(shape_err(format!("context windows must be 4-D, got {s:?}")));
    };
    let nl = weights.shape()[1];
    weights
        .bmm(ctx.reshape(vec![n, nc, p * c])?, false, false)?
        .reshape(vec![n, nl, p, c])
}

pub fn init_cross_attention<T: Real>(
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

/// Local windows query their matched windows, `[N, n, P, C]` each.
///
/// Returns the output and the `[N*n, heads, P, P]` attention probabilities.
pub fn cross_attention<'t, T: Real>(
    p: &Bound<'t, '_, T>,
    prefix: &str,
    local: Var<'t, T>,
    matched: Var<'t, T>,
    heads: usize,
    residual: bool,
) -> Result<(Var<'t, T>, Var<'t, T>)> {
    let s = local.shape();
    if s.len() != 4 || matched.shape() != s {
        return Err(shape_err(format!(
            "cross attention windows {s:?} vs {:?}",
            matched.shape()
        )));
    }
    let (b, pos, c) = (s[0] * s[1], s[2], s[3]);
    if heads == 0 || c % heads != 0 {
        return Err(shape_err(format!("{c} channels do not split into {heads} heads")));
    }
    let x = local.reshape(vec![b, pos, c])?;
    let m = matched.reshape(vec![b, pos, c])?;
    let q = layers::linear(p, &format!("{prefix}.q"), x)?;
    let k = layers::linear(p, &format!("{prefix}.k"), m)?;
    let v = layers::linear(p, &format!("{prefix}.v"), m)?;
    let (att, probs) = attention(q, k, v, heads)?;
    let mut out = layers::linear(p, &format!("{prefix}.o"), att)?;
    if residual {
        out = out.add(x)?;
    }
    Ok((out.reshape(s)?, probs))
}

pub fn init_cspib<T: Real>(
    store: &mut ParamStore<T>,
    prefix: &str,
    c: usize,
    mlp_ratio: usize,
    rng: &mut impl Rng,
) -> Result<()> {
    layers::init_layer_norm(store, &format!("{prefix}.ln1"), c)?;
    layers::init_layer_norm(store, &format!("{prefix}.tok"), c)?;
    init_cross_attention(store, &format!("{prefix}.ca"), c, rng)?;
    layers::init_layer_norm(store, &format!("{prefix}.ln2"), c)?;
    layers::init_mlp(store, &format!("{prefix}.mlp"), c, mlp_ratio, rng)
}

/// The two partitions used on a `[N, H, W, C]` map: `G x G` tiles and the
/// strided sampling whose windows are also `G x G`.
pub fn partitions(shape: &[usize], g: usize) -> Result<(Partition, Partition)> {
    let &[n, h, w, c] = shape else {
        return Err(shape_err(format!("expected [N, H, W, C], got {shape:?}")));
    };
    let local = Partition::local(n, h, w, c, g)?;
    let ctx = Partition::contextual(n, h, w, c, h / g, w / g)?;
    Ok((local, ctx))
}

/// Full block on a `[N, H, W, C]` map; shape preserved.
pub fn cspib_forward<'t, T: Real>(
    p: &Bound<'t, '_, T>,
    prefix: &str,
    f: Var<'t, T>,
    cfg: CspibConfig,
    mode: MatchMode,
) -> Result<(Var<'t, T>, MatchAssignment<T>)> {
    let (local, ctx) = partitions(&f.shape(), cfg.window)?;
    let xn = layers::layer_norm(p, &format!("{prefix}.ln1"), f)?;
    let lw = local.partition_var(xn)?;
    let cw = ctx.partition_var(xn)?;
    let (tg, tb) = (p.p(&format!("{prefix}.tok.gamma"))?, p.p(&format!("{prefix}.tok.beta"))?);
    let tok_l = pool_tokens_var(lw, tg, tb)?;
    let tok_c = pool_tokens_var(cw, tg, tb)?;
    let scores = tok_l.bmm(tok_c, false, true)?;
    let (assign, weights) = match_scores(scores, mode)?;
    let matched = gather_matched(cw, weights)?;
    let (ca, _) = cross_attention(p, &format!("{prefix}.ca"), lw, matched, cfg.heads, false)?;
    let y = local.aggregate_var(ca)?.add(f)?;
    let hidden = layers::layer_norm(p, &format!("{prefix}.ln2"), y)?;
    let out = layers::mlp(p, &format!("{prefix}.mlp"), hidden)?.add(y)?;
    Ok((out, assign))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::engine::Tape;
    use crate::gradcheck::{self, Tolerance};
    use crate::oracle;
    use crate::windowing::{partition_context, partition_local};
    use proptest::prelude::*;
    use rand::Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn tokens(n: usize, k: usize, c: usize, r: &mut ChaCha8Rng) -> TokenSet<f64> {
        TokenSet {
            tokens: Tensor::uniform(vec![n, k, c], -1.0, 1.0, r),
            normalized: false,
        }
    }

    /// Store with every output layer randomised, so no branch is trivially zero.
    fn dense_store(c: usize, seed: u64) -> ParamStore<f64> {
        let mut r = rng(seed);
        let mut s = ParamStore::new();
        init_cspib(&mut s, "b", c, 2, &mut r).unwrap();
        for name in ["b.ca.o.w", "b.ca.o.b", "b.mlp.fc2.w", "b.mlp.fc2.b"] {
            let shape = s.get(name).unwrap().shape().to_vec();
            *s.get_mut(name).unwrap() = Tensor::uniform(shape, -0.5, 0.5, &mut r);
        }
        for name in ["b.ln1.gamma", "b.tok.gamma", "b.ln2.gamma"] {
            let shape = s.get(name).unwrap().shape().to_vec();
            *s.get_mut(name).unwrap() = Tensor::uniform(shape, 0.5, 1.5, &mut r);
        }
        s
    }

    #[test]
    fn token_of_identical_rows_is_the_row() {
        let v = [0.3f64, -1.2, 2.0];
        let f = Tensor::from_fn(vec![1, 2, 2, 3], |i| v[i % 3]);
        let ws = partition_local(&f, 2).unwrap();
        let tape = Tape::new();
        let mean = tape.constant(&ws.windows).mean_rows().unwrap().value();
        assert_eq!(mean.data(), &v);
    }

    #[test]
    fn constant_window_pools_to_zero_token() {
        let f = Tensor::<f64>::full(vec![1, 4, 4, 3], 5.0);
        let t = pool_tokens(&partition_local(&f, 2).unwrap()).unwrap();
        assert_eq!(t.len(), 4);
        assert!(t.tokens.data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn pooled_tokens_match_direct_mean_and_norm() {
        let mut r = rng(3);
        let f = Tensor::<f64>::uniform(vec![2, 8, 8, 5], -2.0, 2.0, &mut r);
        let ws = partition_local(&f, 4).unwrap();
        let t = pool_tokens(&ws).unwrap();
        for n in 0..2 {
            for k in 0..4 {
                let win = ws.window(n, k);
                let mut mean = [0.0f64; 5];
                for row in win.data().chunks(5) {
                    for (m, x) in mean.iter_mut().zip(row) {
                        *m += x / 16.0;
                    }
                }
                let mu = mean.iter().sum::<f64>() / 5.0;
                let var = mean.iter().map(|m| (m - mu).powi(2)).sum::<f64>() / 5.0;
                for (c, m) in mean.iter().enumerate() {
                    let expect = (m - mu) / (var + 1e-5).sqrt();
                    assert!((t.tokens.at(&[n, k, c]) - expect).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn self_similarity_wins() {
        let t = [1.0f64, 0.0, 0.0, 0.0];
        let u = [0.0f64, 2.0, 0.0, 0.0];
        let w = [0.0f64, 0.0, 0.0, -3.0];
        let local = TokenSet {
            tokens: Tensor::new(vec![1, 1, 4], t.to_vec()).unwrap(),
            normalized: false,
        };
        let ctx = TokenSet {
            tokens: Tensor::new(vec![1, 3, 4], [t, u, w].concat()).unwrap(),
            normalized: false,
        };
        let m = match_windows(&local, &ctx, MatchMode::Hard).unwrap();
        assert_eq!(m.hard_index, vec![0]);
    }

    #[test]
    fn ties_go_to_lowest_index() {
        assert_eq!(argmax(&[1.0, 3.0, 3.0, 2.0]), 1);
        assert_eq!(argmax(&[0.0; 4]), 0);
    }

    #[test]
    fn hard_match_equals_exhaustive_scan() {
        let mut r = rng(11);
        for _ in 0..100 {
            let (nl, nc, c) = (r.gen_range(1..9), r.gen_range(1..9), r.gen_range(1..7));
            let local = tokens(2, nl, c, &mut r);
            let ctx = tokens(2, nc, c, &mut r);
            let m = match_windows(&local, &ctx, MatchMode::Hard).unwrap();
            assert_eq!(m.hard_index, oracle::exhaustive_match(&local.tokens, &ctx.tokens));
        }
    }

    #[test]
    fn empty_context_is_an_error() {
        let local = TokenSet {
            tokens: Tensor::<f64>::zeros(vec![1, 2, 3]),
            normalized: false,
        };
        let tape = Tape::new();
        // a zero-sized tensor cannot exist, so test the shape-level guard
        assert!(check_tokens(local.tokens.shape(), &[1, 0, 3]).is_err());
        let s = tape.constant(&Tensor::<f64>::zeros(vec![1, 2, 3]));
        assert!(match_scores(s.reshape(vec![1, 6]).unwrap(), MatchMode::Hard).is_err());
    }

    #[test]
    fn gumbel_frequency_follows_softmax() {
        let logits = [1f64.ln(), 2f64.ln()];
        let mut r = rng(2024);
        let hits = (0..10_000).filter(|_| gumbel_pick(&logits, 1.0, &mut r) == 1).count();
        let freq = hits as f64 / 10_000.0;
        assert!((freq - 2.0 / 3.0).abs() < 0.05, "{freq}");
    }

    #[test]
    fn gumbel_assignment_frequency_follows_softmax() {
        let tape = Tape::new();
        let scores = tape.constant(&Tensor::new(vec![1, 1, 2], vec![1f64.ln(), 2f64.ln()]).unwrap());
        let hits = (0..10_000u64)
            .filter(|&s| {
                let mode = MatchMode::Gumbel { tau: 1.0, seed: s };
                match_scores(scores, mode).unwrap().0.hard_index[0] == 1
            })
            .count();
        assert!((hits as f64 / 1e4 - 2.0 / 3.0).abs() < 0.05, "{hits}");
    }

    #[test]
    fn gumbel_forward_one_hot_backward_finite_and_nonzero() {
        let mut r = rng(5);
        let raw = Tensor::<f64>::uniform(vec![2, 3, 4], -1.0, 1.0, &mut r);
        for tau in [0.1, 0.5, 1.0, 3.0, 10.0] {
            let tape = Tape::new();
            let scores = tape.param(&raw, "scores");
            let mode = MatchMode::Gumbel { tau, seed: 9 };
            let (assign, w) = match_scores(scores, mode).unwrap();
            let wv = w.value();
            for (row, &k) in wv.data().chunks(4).zip(&assign.hard_index) {
                for (j, &x) in row.iter().enumerate() {
                    assert_eq!(x, if j == k { 1.0 } else { 0.0 });
                }
            }
            let soft = assign.soft_weights.unwrap();
            for row in soft.data().chunks(4) {
                assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
            }
            let probe = gradcheck::probe_tensor::<f64>(&[2, 3, 4], 1);
            let loss = w.mul(tape.constant(&probe)).unwrap().sum();
            let g = tape.backward(loss).unwrap().wrt(scores);
            assert!(g.all_finite(), "tau {tau}");
            assert!(g.data().iter().any(|&x| x != 0.0), "tau {tau}");
        }
    }

    #[test]
    fn singleton_attention_returns_matched_pixel() {
        let c = 3;
        let mut s = ParamStore::<f64>::new();
        let eye = Tensor::from_fn(vec![c, c], |i| if i / c == i % c { 1.0 } else { 0.0 });
        for m in ["q", "k", "v", "o"] {
            s.insert(format!("ca.{m}.w"), eye.clone()).unwrap();
            s.insert(format!("ca.{m}.b"), Tensor::zeros(vec![c])).unwrap();
        }
        let mut r = rng(1);
        let lw = Tensor::<f64>::uniform(vec![1, 4, 1, c], -1.0, 1.0, &mut r);
        let mw = Tensor::<f64>::uniform(vec![1, 4, 1, c], -1.0, 1.0, &mut r);
        let tape = Tape::new();
        let p = Bound::frozen(&tape, &s);
        let (out, probs) =
            cross_attention(&p, "ca", tape.constant(&lw), tape.constant(&mw), 1, false).unwrap();
        assert!(out.value().max_abs_diff(&mw) < 1e-15);
        assert!(probs.value().data().iter().all(|&x| x == 1.0));
    }

    #[test]
    fn cross_attention_matches_direct_formula() {
        let (c, heads, pos) = (4, 2, 4);
        let mut r = rng(8);
        let mut s = ParamStore::<f64>::new();
        for m in ["q", "k", "v", "o"] {
            layers::init_linear(&mut s, &format!("ca.{m}"), c, c, false, &mut r).unwrap();
        }
        let lw = Tensor::<f64>::uniform(vec![1, 3, pos, c], -1.0, 1.0, &mut r);
        let mw = Tensor::<f64>::uniform(vec![1, 3, pos, c], -1.0, 1.0, &mut r);
        let tape = Tape::new();
        let p = Bound::frozen(&tape, &s);
        let (out, probs) =
            cross_attention(&p, "ca", tape.constant(&lw), tape.constant(&mw), heads, true).unwrap();
        let (out, probs) = (out.value(), probs.value());
        for row in probs.data().chunks(pos) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        }

        for win in 0..3 {
            let rows = |t: &Tensor<f64>| -> Vec<Vec<f64>> {
                (0..pos).map(|u| (0..c).map(|k| t.at(&[0, win, u, k])).collect()).collect()
            };
            let (xs, ms) = (rows(&lw), rows(&mw));
            let att = oracle::attention(&s, "ca", &xs, &ms, heads);
            for t in 0..pos {
                for j in 0..c {
                    let expect = att[t][j] + xs[t][j];
                    assert!((out.at(&[0, win, t, j]) - expect).abs() < 1e-5);
                }
            }
        }
    }

    #[test]
    fn cross_attention_rejects_bad_heads() {
        let mut s = ParamStore::<f64>::new();
        init_cross_attention(&mut s, "ca", 4, &mut rng(0)).unwrap();
        let x = Tensor::<f64>::zeros(vec![1, 1, 4, 4]);
        let tape = Tape::new();
        let p = Bound::frozen(&tape, &s);
        let v = tape.constant(&x);
        assert!(cross_attention(&p, "ca", v, v, 3, true).is_err());
    }

    #[test]
    fn cspib_preserves_shape() {
        let mut r = rng(2);
        let mut s = ParamStore::<f32>::new();
        init_cspib(&mut s, "b", 16, 2, &mut r).unwrap();
        let f = Tensor::<f32>::uniform(vec![1, 32, 32, 16], -1.0, 1.0, &mut r);
        let tape = Tape::new();
        let p = Bound::frozen(&tape, &s);
        let cfg = CspibConfig { window: 16, heads: 4 };
        let (out, assign) = cspib_forward(&p, "b", tape.constant(&f), cfg, MatchMode::Hard).unwrap();
        assert_eq!(out.shape(), vec![1, 32, 32, 16]);
        assert_eq!(assign.hard_index.len(), 4);
        assert!(assign.hard_index.iter().all(|&k| k < 4));
    }

    #[test]
    fn cspib_fresh_init_is_identity() {
        let mut r = rng(4);
        let mut s = ParamStore::<f32>::new();
        init_cspib(&mut s, "b", 8, 2, &mut r).unwrap();
        let f = Tensor::<f32>::uniform(vec![2, 8, 8, 8], -1.0, 1.0, &mut r);
        for mode in [MatchMode::Hard, MatchMode::Gumbel { tau: 1.0, seed: 3 }] {
            let tape = Tape::new();
            let p = Bound::frozen(&tape, &s);
            let cfg = CspibConfig { window: 4, heads: 2 };
            let (out, _) = cspib_forward(&p, "b", tape.constant(&f), cfg, mode).unwrap();
            assert_eq!(out.value(), f);
        }
    }

    #[test]
    fn cspib_gradient_matches_finite_differences() {
        let s = dense_store(4, 6);
        let mut r = rng(7);
        let f = Tensor::<f64>::uniform(vec![1, 8, 8, 4], -1.0, 1.0, &mut r);
        let names = ["b.ca.q.w", "b.ca.v.w", "b.ca.o.w", "b.mlp.fc1.w", "b.ln1.gamma"];
        let mut inputs = vec![f];
        inputs.extend(names.iter().map(|n| s.get(n).unwrap().clone()));
        let cfg = CspibConfig { window: 4, heads: 2 };
        let tol = Tolerance::for_real::<f64>();
        let rep = gradcheck::check(&inputs, tol.step, 1, |tape, vars| {
            let p = Bound::frozen(tape, &s);
            for (n, v) in names.iter().zip(&vars[1..]) {
                p.preset(n, *v);
            }
            Ok(cspib_forward(&p, "b", vars[0], cfg, MatchMode::Hard)?.0)
        })
        .unwrap();
        assert!(rep.max_rel_err < 1e-2, "{rep:?}");
    }

    #[test]
    fn cspib_gumbel_gradient_reaches_token_norm() {
        let s = dense_store(4, 12);
        let mut r = rng(13);
        let f = Tensor::<f64>::uniform(vec![1, 8, 8, 4], -1.0, 1.0, &mut r);
        let tape = Tape::new();
        let p = Bound::new(&tape, &s);
        let cfg = CspibConfig { window: 4, heads: 2 };
        let mode = MatchMode::Gumbel { tau: 1.0, seed: 1 };
        let (out, _) = cspib_forward(&p, "b", tape.constant(&f), cfg, mode).unwrap();
        let grads = tape.backward(out.sum()).unwrap();
        let g = grads.wrt(p.p("b.tok.gamma").unwrap());
        assert!(g.all_finite());
        assert!(g.data().iter().any(|&x| x != 0.0));
    }

    /// Adds a per-window channel offset so pooled means have O(1) spread and
    /// the norm epsilon stays negligible.
    fn spread(ws: &mut WindowSet<f64>, r: &mut ChaCha8Rng) {
        let p = ws.partition.clone();
        let per = p.win_h * p.win_w * p.c;
        for chunk in ws.windows.data_mut().chunks_mut(per) {
            let bias: Vec<f64> = (0..p.c).map(|_| r.gen_range(-2.0..2.0)).collect();
            for (i, x) in chunk.iter_mut().enumerate() {
                *x += bias[i % p.c];
            }
        }
    }

    proptest! {
        #[test]
        fn tokens_ignore_positive_affine_window_transforms(
            seed in any::<u64>(), scale in 0.5f64..4.0, shift in -3.0f64..3.0
        ) {
            let mut r = rng(seed);
            let f = Tensor::<f64>::uniform(vec![1, 8, 8, 6], -1.0, 1.0, &mut r);
            let mut ws = partition_context(&f, 2).unwrap();
            spread(&mut ws, &mut r);
            let base = pool_tokens(&ws).unwrap();
            let mut moved = ws.clone();
            // transform only the first window
            let per = 16 * 6;
            for x in &mut moved.windows.data_mut()[..per] {
                *x = *x * scale + shift;
            }
            let t = pool_tokens(&moved).unwrap();
            prop_assert!(t.tokens.max_abs_diff(&base.tokens) < 1e-3);
        }
    }

    #[test]
    fn hard_matching_ignores_positive_affine_window_transforms() {
        let mut r = rng(21);
        for _ in 0..20 {
            let f = Tensor::<f64>::uniform(vec![1, 8, 8, 6], -1.0, 1.0, &mut r);
            let mut lw = partition_local(&f, 4).unwrap();
            let mut cw = partition_context(&f, 2).unwrap();
            spread(&mut lw, &mut r);
            spread(&mut cw, &mut r);
            let before = match_windows(&pool_tokens(&lw).unwrap(), &pool_tokens(&cw).unwrap(), MatchMode::Hard).unwrap();
            let mut moved = cw.clone();
            let per = 16 * 6;
            for (k, chunk) in moved.windows.data_mut().chunks_mut(per).enumerate() {
                let (a, b) = (1.0 + k as f64, k as f64 - 1.5);
                chunk.iter_mut().for_each(|x| *x = *x * a + b);
            }
            let after = match_windows(&pool_tokens(&lw).unwrap(), &pool_tokens(&moved).unwrap(), MatchMode::Hard).unwrap();
            assert_eq!(before.hard_index, after.hard_index);
        }
    }
}
