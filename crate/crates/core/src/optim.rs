//! Adam with bias correction and the cosine-annealed learning rate.

use crate::error::{Error, Result};
use crate::real::Real;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.99,
            eps: 1e-8,
        }
    }
}

/// Moment estimates for one parameter list, in parameter order.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<T: Real = f32> {
    pub config: AdamConfig,
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
    pub t: u64,
}

impl<T: Real> AdamState<T> {
    pub fn new<'a>(params: impl IntoIterator<Item = &'a Tensor<T>>, config: AdamConfig) -> Self {
        let (m, v) = params
            .into_iter()
            .map(|p| (Tensor::zeros(p.shape()), Tensor::zeros(p.shape())))
            .unzip();
        Self { config, m, v, t: 0 }
    }

    /// One update over `params` using each parameter's `grad`.
    ///
    /// Parameters without a gradient are left untouched but still count
    /// towards the shared step counter.
    pub fn step<'a>(
        &mut self,
        params: impl IntoIterator<Item = &'a mut Tensor<T>>,
        lr: f64,
    ) -> Result<()> {
        self.t += 1;
        let AdamConfig { beta1, beta2, eps } = self.config;
        let bc1 = 1.0 - beta1.powi(self.t as i32);
        let bc2 = 1.0 - beta2.powi(self.t as i32);
        let (b1, b2) = (T::from_f64_lossy(beta1), T::from_f64_lossy(beta2));
        let (one_b1, one_b2) = (T::one() - b1, T::one() - b2);
        let (rc1, rc2) = (T::from_f64_lossy(1.0 / bc1), T::from_f64_lossy(1.0 / bc2));
        let (lr, eps) = (T::from_f64_lossy(lr), T::from_f64_lossy(eps));
        let mut count = 0;
        for (i, p) in params.into_iter().enumerate() {
            count += 1;
            let (m, v) = match (self.m.get_mut(i), self.v.get_mut(i)) {
                (Some(m), Some(v)) if m.shape() == p.shape() => (m, v),
                _ => {
                    return Err(Error::Shape(format!(
                        "adam state slot {i} does not match parameter {:?}",
                        p.shape()
                    )))
                }
            };
            let Some(g) = p.grad.clone() else { continue };
            let (md, vd) = (m.data_mut(), v.data_mut());
            for (j, w) in p.data_mut().iter_mut().enumerate() {
                let gj = g[j];
                md[j] = b1 * md[j] + one_b1 * gj;
                vd[j] = b2 * vd[j] + one_b2 * gj * gj;
                let mh = md[j] * rc1;
                let vh = vd[j] * rc2;
                *w -= lr * mh / (vh.sqrt() + eps);
            }
        }
        if count != self.m.len() {
            return Err(Error::Shape(format!(
                "adam state holds {} slots, got {count} parameters",
                self.m.len()
            )));
        }
        Ok(())
    }
}

/// `lr_min + (lr0 - lr_min) * (1 + cos(pi * epoch / total)) / 2`.
pub fn cosine_lr(epoch: usize, total_epochs: usize, lr0: f64, lr_min: f64) -> Result<f64> {
    if total_epochs == 0 || epoch > total_epochs {
        return Err(Error::InvalidArgument(format!(
            "epoch {epoch} outside 0..={total_epochs}"
        )));
    }
    let phase = std::f64::consts::PI * epoch as f64 / total_epochs as f64;
    Ok(lr_min + 0.5 * (lr0 - lr_min) * (1.0 + phase.cos()))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn param(v: f32) -> Tensor<f32> {
        Tensor::scalar(v)
    }

    #[test]
    fn first_step_moves_by_lr_times_sign() {
        for g in [0.5f32, -3.0, 1e-3] {
            let mut p = param(1.0);
            let mut st = AdamState::new([&p], AdamConfig::default());
            p.grad = Some(vec![g]);
            st.step([&mut p], 0.01).unwrap();
            let delta = 1.0 - p.data()[0];
            let expected = 0.01 * g / (g.abs() + 1e-8);
            assert!((delta - expected).abs() < 1e-6, "g={g}: {delta} vs {expected}");
            assert_eq!(st.t, 1);
        }
    }

    #[test]
    fn zero_grad_leaves_params_unchanged() {
        let mut p = param(0.25);
        let mut st = AdamState::new([&p], AdamConfig::default());
        for _ in 0..5 {
            p.grad = Some(vec![0.0]);
            st.step([&mut p], 0.1).unwrap();
        }
        assert_eq!(p.data()[0], 0.25);
        assert_eq!(st.t, 5);
    }

    #[test]
    fn quadratic_run_shrinks_after_warmup() {
        let mut p = Tensor::<f64>::scalar(1.0);
        let mut st = AdamState::new([&p], AdamConfig::default());
        let mut trace = vec![];
        for _ in 0..100 {
            let x = p.data()[0];
            p.grad = Some(vec![2.0 * x]);
            st.step([&mut p], 0.1).unwrap();
            trace.push(p.data()[0].abs());
        }
        // the first ten steps march straight down at ~lr per step
        for w in trace[..10].windows(2) {
            assert!(w[1] < w[0], "{trace:?}");
        }
        // afterwards |x| rings around the optimum; its successive peaks shrink
        let peaks: Vec<f64> = trace
            .windows(3)
            .filter(|w| w[1] > w[0] && w[1] >= w[2])
            .map(|w| w[1])
            .collect();
        assert!(peaks.len() >= 4, "{peaks:?}");
        for w in peaks.windows(2) {
            assert!(w[1] < w[0], "{peaks:?}");
        }
        assert!(trace[99] < 0.01, "{}", trace[99]);
    }

    #[test]
    fn state_shape_mismatch_is_an_error() {
        let p = param(0.0);
        let mut st = AdamState::new([&p], AdamConfig::default());
        let mut q = Tensor::<f32>::zeros(vec![2]);
        q.grad = Some(vec![1.0, 1.0]);
        assert!(st.step([&mut q], 0.1).is_err());
    }

    #[test]
    fn cosine_endpoints_and_midpoint() {
        assert_eq!(cosine_lr(0, 2000, 4e-4, 5e-7).unwrap(), 4e-4);
        assert!((cosine_lr(2000, 2000, 4e-4, 5e-7).unwrap() - 5e-7).abs() < 1e-20);
        let mid = cosine_lr(1000, 2000, 4e-4, 5e-7).unwrap();
        assert!((mid - (4e-4 + 5e-7) / 2.0).abs() < 1e-18);
        assert!(cosine_lr(2001, 2000, 4e-4, 5e-7).is_err());
    }
}
