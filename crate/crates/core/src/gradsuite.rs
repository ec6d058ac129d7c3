//! Finite-difference checks over every differentiable op and the composite
//! blocks, run on several random instances each.
//!
//! Straight-through is left out: its backward is a deliberate surrogate and
//! its forward is piecewise constant, so central differences see zero. The
//! soft Gumbel path it wraps is a softmax, which is covered.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::cspia::{self, CspibConfig, MatchMode};
use crate::csffb;
use crate::engine::{Tape, Var};
use crate::error::Result;
use crate::gradcheck::{check, check_against, Tolerance};
use crate::lsab;
use crate::model::{group_forward, is_zero_init, Mode, Model, ModelConfig};
use crate::params::{Bound, ParamStore};
use crate::real::Real;
use crate::tensor::Tensor;

pub const INSTANCES: usize = 3;

#[derive(Clone, Debug)]
pub struct SuiteEntry {
    pub name: &'static str,
    pub instances: usize,
    pub max_rel_err: f64,
    pub tolerance: f64,
}

impl SuiteEntry {
    pub fn passed(&self) -> bool {
        self.max_rel_err < self.tolerance
    }
}

fn uniform<T: Real>(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<T> {
    Tensor::uniform(shape.to_vec(), -1.0, 1.0, rng)
}

/// Values bounded away from zero, for ops with a kink there.
fn off_zero<T: Real>(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<T> {
    Tensor::from_fn(shape.to_vec(), |_| {
        let m: f64 = rng.gen_range(0.1..1.0);
        T::from_f64_lossy(if rng.gen() { m } else { -m })
    })
}

type Build<T> = for<'t> fn(&'t Tape<T>, &[Var<'t, T>]) -> Result<Var<'t, T>>;

struct OpCase<T: Real> {
    name: &'static str,
    shapes: [Vec<Vec<usize>>; INSTANCES],
    kinked: bool,
    build: Build<T>,
}

fn case<T: Real>(name: &'static str, shapes: [Vec<Vec<usize>>; INSTANCES], build: Build<T>) -> OpCase<T> {
    OpCase {
        name,
        shapes,
        kinked: false,
        build,
    }
}

fn same<const N: usize>(shapes: [&[usize]; INSTANCES]) -> [Vec<Vec<usize>>; INSTANCES] {
    shapes.map(|s| vec![s.to_vec(); N])
}

fn one(shapes: [&[usize]; INSTANCES]) -> [Vec<Vec<usize>>; INSTANCES] {
    same::<1>(shapes)
}

fn op_cases<T: Real>() -> Vec<OpCase<T>> {
    let unary = one([&[5], &[2, 3], &[2, 2, 3]]);
    let mut cases = vec![
        case("add", same::<2>([&[4], &[2, 3], &[2, 2, 2]]), |_, v| v[0].add(v[1])),
        case(
            "add_broadcast",
            [vec![vec![3, 4], vec![4]], vec![vec![2, 2, 3], vec![2, 3]], vec![vec![2, 5], vec![5]]],
            |_, v| v[0].add(v[1]),
        ),
        case("sub", same::<2>([&[4], &[2, 3], &[3, 2]]), |_, v| v[0].sub(v[1])),
        case(
            "mul",
            [vec![vec![3, 4], vec![3, 4]], vec![vec![2, 3], vec![3]], vec![vec![2, 2, 2], vec![2, 2]]],
            |_, v| v[0].mul(v[1]),
        ),
        case("scale", unary.clone(), |_, v| Ok(v[0].scale(T::from_f64_lossy(-1.7)))),
        case("add_scalar", unary.clone(), |_, v| Ok(v[0].add_scalar(T::from_f64_lossy(0.3)))),
        case("gelu", unary.clone(), |_, v| Ok(v[0].gelu())),
        case("exp", unary.clone(), |_, v| Ok(v[0].exp())),
        case("sum", unary.clone(), |_, v| Ok(v[0].sum())),
        case("mean", unary.clone(), |_, v| Ok(v[0].mean())),
        case("softmax", one([&[5], &[3, 4], &[2, 2, 3]]), |_, v| Ok(v[0].softmax())),
        case("l2_normalize", one([&[5], &[3, 4], &[2, 2, 3]]), |_, v| Ok(v[0].l2_normalize())),
        case(
            "layer_norm",
            [
                vec![vec![3, 4], vec![4], vec![4]],
                vec![vec![2, 2, 5], vec![5], vec![5]],
                vec![vec![1, 6], vec![6], vec![6]],
            ],
            |_, v| v[0].layer_norm(v[1], v[2]),
        ),
        case(
            "matmul",
            [
                vec![vec![3, 4], vec![4, 2]],
                vec![vec![2, 3, 2], vec![2, 5]],
                vec![vec![1, 5], vec![5, 3]],
            ],
            |_, v| v[0].matmul(v[1]),
        ),
        case(
            "bmm",
            [
                vec![vec![2, 3, 4], vec![2, 4, 2]],
                vec![vec![1, 2, 3], vec![1, 3, 3]],
                vec![vec![3, 2, 2], vec![3, 2, 4]],
            ],
            |_, v| v[0].bmm(v[1], false, false),
        ),
        case(
            "bmm_transposed",
            [
                vec![vec![2, 4, 3], vec![2, 2, 4]],
                vec![vec![1, 3, 2], vec![1, 3, 3]],
                vec![vec![3, 2, 2], vec![3, 4, 2]],
            ],
            |_, v| v[0].bmm(v[1], true, true),
        ),
        case(
            "bmm_mixed",
            [
                vec![vec![2, 4, 3], vec![2, 4, 2]],
                vec![vec![1, 3, 2], vec![1, 3, 3]],
                vec![vec![3, 2, 2], vec![3, 2, 4]],
            ],
            |_, v| v[0].bmm(v[1], true, false)?.bmm(v[1], false, true),
        ),
        case(
            "conv3x3",
            [
                vec![vec![1, 4, 5, 2], vec![3, 3, 2, 3], vec![3]],
                vec![vec![2, 3, 3, 1], vec![3, 3, 1, 2], vec![2]],
                vec![vec![1, 2, 4, 3], vec![3, 3, 3, 1], vec![1]],
            ],
            |_, v| v[0].conv3x3(v[1], v[2]),
        ),
        case(
            "depthwise3x3",
            [
                vec![vec![1, 4, 5, 2], vec![3, 3, 2], vec![2]],
                vec![vec![2, 3, 3, 3], vec![3, 3, 3], vec![3]],
                vec![vec![1, 5, 2, 1], vec![3, 3, 1], vec![1]],
            ],
            |_, v| v[0].depthwise3x3(v[1], v[2]),
        ),
        case("permute", one([&[2, 3, 4], &[3, 2, 2], &[1, 4, 3]]), |_, v| v[0].permute(&[2, 0, 1])),
        case("reshape", one([&[2, 3, 4], &[3, 2, 2], &[1, 4, 3]]), |_, v| {
            let s = v[0].shape();
            v[0].reshape(vec![s[0] * s[1], s[2]])?.softmax().reshape(s)
        }),
        case(
            "concat",
            [
                vec![vec![2, 3], vec![2, 2]],
                vec![vec![2, 2, 1], vec![2, 2, 3]],
                vec![vec![1, 4], vec![1, 4]],
            ],
            |_, v| v[0].concat(v[1]),
        ),
        case("mean_rows", one([&[2, 3, 4], &[1, 5, 2], &[3, 2, 3]]), |_, v| v[0].mean_rows()),
        case("gather", one([&[4, 3], &[5, 2], &[3, 4]]), |_, v| {
            let s = v[0].shape();
            // reversed rows with one repeat, so gradients accumulate
            let mut table: Vec<usize> = (0..s[0]).rev().collect();
            table.push(0);
            let rows = crate::engine::Rows::new(table, s[1]);
            v[0].gather(&rows, vec![s[0] + 1, s[1]])
        }),
    ];
    let mut kinked = vec![
        case("relu", unary.clone(), |_, v| Ok(v[0].relu())),
        case("abs", unary, |_, v| Ok(v[0].abs())),
    ];
    for k in &mut kinked {
        k.kinked = true;
    }
    cases.extend(kinked);
    cases
}

fn run_ops<T: Real>(seed: u64, tol: Tolerance, out: &mut Vec<SuiteEntry>) -> Result<()> {
    for (ci, c) in op_cases::<T>().into_iter().enumerate() {
        let mut worst = 0.0f64;
        for (k, shapes) in c.shapes.iter().enumerate() {
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ ((ci * 31 + k) as u64) << 8);
            let inputs: Vec<Tensor<T>> = shapes
                .iter()
                .map(|s| if c.kinked { off_zero(s, &mut rng) } else { uniform(s, &mut rng) })
                .collect();
            let rep = check(&inputs, tol.step, seed + k as u64, c.build)?;
            worst = worst.max(rep.max_rel_err);
        }
        out.push(SuiteEntry {
            name: c.name,
            instances: INSTANCES,
            max_rel_err: worst,
            tolerance: tol.max_rel_err,
        });
    }
    Ok(())
}

/// Small model whose zero-initialised output layers are randomised so every
/// branch carries gradient.
fn awake<T: Real>(cfg: ModelConfig, seed: u64) -> Result<Model<T>> {
    let mut m = Model::<T>::init(cfg, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let names: Vec<String> = m.params.names().filter(|n| is_zero_init(n)).map(String::from).collect();
    for n in names {
        let t = m.params.get_mut(&n)?;
        *t = Tensor::uniform(t.shape().to_vec(), -0.3, 0.3, &mut rng);
    }
    Ok(m)
}

fn block_cfg() -> ModelConfig {
    ModelConfig {
        groups: 1,
        channels: 4,
        window: 4,
        heads: 2,
        scale: 2,
        ..ModelConfig::default()
    }
}

#[derive(Clone, Copy, Debug)]
enum Block {
    Cspib,
    Lsab,
    Csffb,
    Group,
}

impl Block {
    fn name(self) -> &'static str {
        match self {
            Block::Cspib => "cspib",
            Block::Lsab => "lsab",
            Block::Csffb => "csffb",
            Block::Group => "group",
        }
    }

    /// Feature input first, then these parameters.
    fn params(self) -> &'static [&'static str] {
        match self {
            Block::Cspib => &[
                "g0.cspib.ln1.gamma",
                "g0.cspib.tok.beta",
                "g0.cspib.ca.k.w",
                "g0.cspib.ca.o.w",
                "g0.cspib.mlp.fc1.w",
            ],
            Block::Lsab => &["g0.lsab.ln1.beta", "g0.lsab.msa.q.w", "g0.lsab.msa.o.b", "g0.lsab.mlp.fc2.w"],
            Block::Csffb => &[
                "g0.csffb.csffa.q.dw.w",
                "g0.csffb.csffa.k.pw_pre.w",
                "g0.csffb.csffa.log_alpha",
                "g0.csffb.csffa.proj.w",
                "g0.csffb.ffn.dw2.w",
            ],
            Block::Group => &["g0.conv.w", "g0.csffb.csffa.v.pw_cur.w", "g0.lsab.msa.v.b"],
        }
    }

    fn forward<'t, U: Real>(
        self,
        store: &ParamStore<U>,
        pre: &Tensor<U>,
        tape: &'t Tape<U>,
        vars: &[Var<'t, U>],
    ) -> Result<Var<'t, U>> {
        let cfg = block_cfg();
        let p = Bound::frozen(tape, store);
        for (n, v) in self.params().iter().zip(&vars[1..]) {
            p.preset(n, *v);
        }
        let x = vars[0];
        match self {
            Block::Cspib => {
                let bc = CspibConfig {
                    window: cfg.window,
                    heads: cfg.heads,
                };
                Ok(cspia::cspib_forward(&p, "g0.cspib", x, bc, MatchMode::Hard)?.0)
            }
            Block::Lsab => lsab::lsab_forward(&p, "g0.lsab", x, cfg.window, cfg.heads),
            Block::Csffb => csffb::csffb_forward(&p, "g0.csffb", x, tape.constant(pre), cfg.heads, true),
            Block::Group => group_forward(&p, 0, x, &cfg, Mode::Eval),
        }
    }
}

/// L1 loss of the toy network against `hr`, with the named parameters as
/// inputs.
fn toy_loss<'t, U: Real>(
    m: &Model<U>,
    lr: &Tensor<U>,
    hr: &Tensor<U>,
    tape: &'t Tape<U>,
    vars: &[Var<'t, U>],
) -> Result<Var<'t, U>> {
    let p = Bound::frozen(tape, &m.params);
    for (n, v) in TOY_PARAMS.iter().zip(vars) {
        p.preset(n, *v);
    }
    let sr = m.forward(&p, lr, Mode::Eval)?;
    Ok(sr.sub(tape.constant(hr))?.abs().mean())
}

const TOY_PARAMS: [&str; 3] = ["shallow.w", "recon.out.b", "g1.csffb.csffa.log_alpha"];

/// Step for the double-precision reference used by the composite checks.
pub const ORACLE_STEP: f64 = 1e-5;

fn run_blocks<T: Real>(seed: u64, tol: Tolerance, out: &mut Vec<SuiteEntry>) -> Result<()> {
    let sizes = [(8, 8), (8, 12), (12, 8)];
    for block in [Block::Cspib, Block::Lsab, Block::Csffb, Block::Group] {
        let mut worst = 0.0f64;
        for (k, &(h, w)) in sizes.iter().enumerate() {
            let s = seed.wrapping_add(100 + k as u64);
            let cfg = block_cfg();
            let m = awake::<T>(cfg.clone(), s)?;
            let wide = m.params.cast::<f64>();
            let mut rng = ChaCha8Rng::seed_from_u64(s);
            let f = uniform::<T>(&[1, h, w, cfg.channels], &mut rng);
            let pre = uniform::<T>(&[1, h, w, cfg.channels], &mut rng);
            let pre_wide = pre.cast::<f64>();
            let mut inputs = vec![f];
            for n in block.params() {
                inputs.push(m.params.get(n)?.clone());
            }
            let rep = check_against(
                &inputs,
                ORACLE_STEP,
                s,
                |tape, vars| block.forward(&m.params, &pre, tape, vars),
                |tape, vars| block.forward(&wide, &pre_wide, tape, vars),
            )?;
            worst = worst.max(rep.max_rel_err);
        }
        out.push(SuiteEntry {
            name: block.name(),
            instances: INSTANCES,
            max_rel_err: worst,
            tolerance: tol.max_rel_err,
        });
    }

    let mut worst = 0.0f64;
    for (k, &(h, w)) in sizes.iter().enumerate() {
        let s = seed.wrapping_add(200 + k as u64);
        let m = awake::<T>(ModelConfig::toy(2), s)?;
        let m_wide = Model {
            config: m.config.clone(),
            params: m.params.cast::<f64>(),
        };
        let mut rng = ChaCha8Rng::seed_from_u64(s);
        let lr = Tensor::<T>::uniform(vec![1, h, w, 3], 0.0, 1.0, &mut rng);
        let hr = Tensor::<T>::uniform(vec![1, 2 * h, 2 * w, 3], 0.0, 1.0, &mut rng);
        let (lr_wide, hr_wide) = (lr.cast::<f64>(), hr.cast::<f64>());
        let inputs: Vec<Tensor<T>> = TOY_PARAMS.iter().map(|n| m.params.get(n).cloned()).collect::<Result<_>>()?;
        let rep = check_against(
            &inputs,
            ORACLE_STEP,
            s,
            |tape, vars| toy_loss(&m, &lr, &hr, tape, vars),
            |tape, vars| toy_loss(&m_wide, &lr_wide, &hr_wide, tape, vars),
        )?;
        worst = worst.max(rep.max_rel_err);
    }
    out.push(SuiteEntry {
        name: "toy_model",
        instances: INSTANCES,
        max_rel_err: worst,
        tolerance: tol.max_rel_err,
    });
    Ok(())
}

/// Runs the whole suite at precision `T`. Single ops use plain central
/// differences at `T`; composite blocks compare `T` gradients against
/// differences of the same function evaluated in f64.
pub fn run<T: Real>(seed: u64) -> Result<Vec<SuiteEntry>> {
    let tol = Tolerance::for_real::<T>();
    let mut out = Vec::new();
    run_ops::<T>(seed, tol, &mut out)?;
    run_blocks::<T>(seed, tol, &mut out)?;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn suite_passes_in_double_precision() {
        let rows = run::<f64>(1).unwrap();
        for r in &rows {
            assert!(r.passed(), "{r:?}");
        }
        assert!(rows.iter().any(|r| r.name == "toy_model"));
    }

    #[test]
    fn suite_passes_in_single_precision() {
        for r in run::<f32>(2).unwrap() {
            assert!(r.passed(), "{r:?}");
        }
    }
}
