//! Central finite-difference gradient checks.
//!
//! The analytic side runs one reverse sweep on `sum(out * probe)` for a fixed
//! random probe tensor; the numeric side only evaluates the forward closure,
//! reducing `out . probe` in f64, so it shares no code with backward.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::engine::{Tape, Var};
use crate::error::{Error, Result};
use crate::real::Real;
use crate::tensor::Tensor;

/// Step and tolerance for one precision.
#[derive(Clone, Copy, Debug)]
pub struct Tolerance {
    pub step: f64,
    pub max_rel_err: f64,
}

impl Tolerance {
    pub fn for_real<T: Real>() -> Self {
        if T::NAME == "f64" {
            Self {
                step: 1e-5,
                max_rel_err: 1e-5,
            }
        } else {
            Self {
                step: 1e-3,
                max_rel_err: 1e-2,
            }
        }
    }
}

#[derive(Clone, Debug)]
pub struct GradReport {
    /// Worst relative error over all inputs.
    pub max_rel_err: f64,
    /// Per input: (max abs error, max |numeric|).
    pub per_input: Vec<(f64, f64)>,
}

/// Relative error floor: keeps all-zero gradients from dividing by zero.
fn floor<T: Real>() -> f64 {
    T::epsilon().to_f64_lossy().sqrt()
}

pub fn probe_tensor<T: Real>(shape: &[usize], seed: u64) -> Tensor<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
    Tensor::from_fn(shape.to_vec(), |_| T::from_f64_lossy(rng.gen_range(-1.0..1.0)))
}

fn dot_f64<T: Real>(a: &[T], b: &[T]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| x.to_f64_lossy() * y.to_f64_lossy())
        .sum()
}

/// Compares backward against central differences for every element of every
/// input. `f` must build the same function on whatever tape it is given.
pub fn check<T, F>(inputs: &[Tensor<T>], step: f64, seed: u64, f: F) -> Result<GradReport>
where
    T: Real,
    F: for<'t> Fn(&'t Tape<T>, &[Var<'t, T>]) -> Result<Var<'t, T>>,
{
    let (analytic, probe) = analytic(inputs, seed, &f)?;
    let numeric = numeric(inputs, step, &probe, &f)?;
    Ok(compare::<T>(&analytic, &numeric))
}

/// Like [`check`], but the differences come from `oracle`, the same
/// function built in double precision on the inputs widened to f64. This
/// keeps single-precision rounding out of the reference.
pub fn check_against<T, F, G>(inputs: &[Tensor<T>], step: f64, seed: u64, f: F, oracle: G) -> Result<GradReport>
where
    T: Real,
    F: for<'t> Fn(&'t Tape<T>, &[Var<'t, T>]) -> Result<Var<'t, T>>,
    G: for<'t> Fn(&'t Tape<f64>, &[Var<'t, f64>]) -> Result<Var<'t, f64>>,
{
    let (analytic, probe) = analytic(inputs, seed, &f)?;
    let wide: Vec<Tensor<f64>> = inputs.iter().map(|t| t.cast()).collect();
    let numeric = numeric(&wide, step, &probe.cast(), &oracle)?;
    Ok(compare::<T>(&analytic, &numeric))
}

fn analytic<T, F>(inputs: &[Tensor<T>], seed: u64, f: &F) -> Result<(Vec<Tensor<f64>>, Tensor<T>)>
where
    T: Real,
    F: for<'t> Fn(&'t Tape<T>, &[Var<'t, T>]) -> Result<Var<'t, T>>,
{
    let tape = Tape::new();
    let vars: Vec<_> = inputs.iter().map(|t| tape.leaf_with(t, true)).collect();
    let out = f(&tape, &vars)?;
    let probe = probe_tensor::<T>(&out.shape(), seed);
    let loss = out.mul(tape.constant(&probe))?.sum();
    let grads = tape.backward(loss)?;
    Ok((vars.iter().map(|&v| grads.wrt(v).cast()).collect(), probe))
}

fn numeric<U, F>(inputs: &[Tensor<U>], step: f64, probe: &Tensor<U>, f: &F) -> Result<Vec<Tensor<f64>>>
where
    U: Real,
    F: for<'t> Fn(&'t Tape<U>, &[Var<'t, U>]) -> Result<Var<'t, U>>,
{
    let eval = |perturbed: &[Tensor<U>]| -> Result<f64> {
        let tape = Tape::new();
        let vars: Vec<_> = perturbed.iter().map(|t| tape.constant(t)).collect();
        let v = f(&tape, &vars)?.value();
        if v.shape() != probe.shape() {
            return Err(Error::Shape("output shape changed under perturbation".into()));
        }
        Ok(dot_f64(v.data(), probe.data()))
    };
    let mut work: Vec<Tensor<U>> = inputs.to_vec();
    let mut out = Vec::with_capacity(inputs.len());
    for (k, input) in inputs.iter().enumerate() {
        let mut g = Tensor::<f64>::zeros(input.shape());
        for i in 0..input.numel() {
            let x0 = input.data()[i];
            let hi = x0 + U::from_f64_lossy(step);
            let lo = x0 - U::from_f64_lossy(step);
            work[k].data_mut()[i] = hi;
            let fp = eval(&work)?;
            work[k].data_mut()[i] = lo;
            let fm = eval(&work)?;
            work[k].data_mut()[i] = x0;
            // divide by the step actually taken after rounding to U
            g.data_mut()[i] = (fp - fm) / (hi.to_f64_lossy() - lo.to_f64_lossy());
        }
        out.push(g);
    }
    Ok(out)
}

fn compare<T: Real>(analytic: &[Tensor<f64>], numeric: &[Tensor<f64>]) -> GradReport {
    let mut per_input = Vec::with_capacity(analytic.len());
    let mut worst = 0.0f64;
    for (a, n) in analytic.iter().zip(numeric) {
        let mut max_abs = 0.0f64;
        let mut max_num = 0.0f64;
        let mut max_ana = 0.0f64;
        for (&ana, &num) in a.data().iter().zip(n.data()) {
            max_abs = max_abs.max((num - ana).abs());
            max_num = max_num.max(num.abs());
            max_ana = max_ana.max(ana.abs());
        }
        let rel = max_abs / max_num.max(max_ana).max(floor::<T>());
        worst = worst.max(rel);
        per_input.push((max_abs, max_num));
    }
    GradReport {
        max_rel_err: worst,
        per_input,
    }
}
