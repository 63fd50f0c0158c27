//! Bias-corrected Adam.

use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

pub const DEFAULT_BETA1: f64 = 0.9;
pub const DEFAULT_BETA2: f64 = 0.999;
pub const DEFAULT_EPS: f64 = 1e-8;

/// Per-parameter optimizer state: step counter plus first/second moments.
#[derive(Debug, Clone)]
pub struct AdamState<T: Element> {
    pub step_count: u64,
    pub m: Tensor<T>,
    pub v: Tensor<T>,
}

impl<T: Element> AdamState<T> {
    pub fn new(dims: &[usize]) -> Self {
        AdamState {
            step_count: 0,
            m: Tensor::zeros(dims),
            v: Tensor::zeros(dims),
        }
    }
}

/// Optimizer hyperparameters shared across all parameters.
#[derive(Debug, Clone, Copy)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        AdamConfig {
            lr,
            beta1: DEFAULT_BETA1,
            beta2: DEFAULT_BETA2,
            eps: DEFAULT_EPS,
        }
    }
}

/// One in-place Adam update. `name` only labels diagnostics.
pub fn adam_step<T: Element>(
    param: &mut Tensor<T>,
    grad: &Tensor<T>,
    state: &mut AdamState<T>,
    cfg: &AdamConfig,
    name: &str,
) -> Result<()> {
    if param.dims() != grad.dims() {
        return Err(Error::Shape(format!(
            "adam {name}: param {:?}, grad {:?}",
            param.dims(),
            grad.dims()
        )));
    }
    adam_step_slice(param.data_mut(), grad.data(), state, cfg, name)?;
    param.check_finite(name)?;
    Ok(())
}

/// The update itself, on bare slices; `adam_step` and the trainer share it.
pub fn adam_step_slice<T: Element>(
    param: &mut [T],
    grad: &[T],
    state: &mut AdamState<T>,
    cfg: &AdamConfig,
    name: &str,
) -> Result<()> {
    if param.len() != grad.len() || param.len() != state.m.len() {
        return Err(Error::Shape(format!(
            "adam {name}: {} param entries, {} grad entries, {} state entries",
            param.len(),
            grad.len(),
            state.m.len()
        )));
    }
    if !grad.iter().all(|g| g.is_finite()) {
        return Err(Error::Numeric(format!(
            "non-finite gradient for parameter {name}"
        )));
    }
    state.step_count += 1;
    let t = state.step_count as i32;
    let b1 = T::lit(cfg.beta1);
    let b2 = T::lit(cfg.beta2);
    let one = T::one();
    let corr1 = one - T::lit(cfg.beta1.powi(t));
    let corr2 = one - T::lit(cfg.beta2.powi(t));
    let lr = T::lit(cfg.lr);
    let eps = T::lit(cfg.eps);
    let ms = state.m.data_mut();
    for (((p, &g), m), v) in param
        .iter_mut()
        .zip(grad)
        .zip(ms.iter_mut())
        .zip(state.v.data_mut())
    {
        *m = b1 * *m + (one - b1) * g;
        *v = b2 * *v + (one - b2) * g * g;
        let m_hat = *m / corr1;
        let v_hat = *v / corr2;
        *p -= lr * m_hat / (v_hat.sqrt() + eps);
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Plain two-line restatement of the update used to cross-check the
    /// implementation.
    fn oracle(param: f64, grads: &[f64], lr: f64) -> f64 {
        let (b1, b2, eps) = (DEFAULT_BETA1, DEFAULT_BETA2, DEFAULT_EPS);
        let (mut m, mut v, mut p) = (0.0, 0.0, param);
        for (i, &g) in grads.iter().enumerate() {
            let t = (i + 1) as i32;
            m = b1 * m + (1.0 - b1) * g;
            v = b2 * v + (1.0 - b2) * g * g;
            p -= lr * (m / (1.0 - b1.powi(t))) / ((v / (1.0 - b2.powi(t))).sqrt() + eps);
        }
        p
    }

    #[test]
    fn zero_gradient_is_identity() {
        let mut p = Tensor::<f64>::vector(&[1.5, -0.25]);
        let g = Tensor::zeros(&[2]);
        let mut s = AdamState::new(&[2]);
        adam_step(&mut p, &g, &mut s, &AdamConfig::with_lr(0.01), "p").unwrap();
        assert_eq!(p.data(), &[1.5, -0.25]);
        assert_eq!(s.step_count, 1);
        assert!(s.v.data().iter().all(|&v| v >= 0.0));
    }

    #[test]
    fn first_steps_match_oracle() {
        let cfg = AdamConfig::with_lr(0.0005);
        let mut p = Tensor::<f64>::vector(&[1.0]);
        let g = Tensor::vector(&[0.3]);
        let mut s = AdamState::new(&[1]);
        adam_step(&mut p, &g, &mut s, &cfg, "p").unwrap();
        assert!((p.data()[0] - oracle(1.0, &[0.3], 0.0005)).abs() < 1e-15);
        assert!((p.data()[0] - 0.9995).abs() < 1e-6);
        adam_step(&mut p, &g, &mut s, &cfg, "p").unwrap();
        assert!((p.data()[0] - oracle(1.0, &[0.3, 0.3], 0.0005)).abs() < 1e-15);
        assert!((p.data()[0] - 0.9990).abs() < 1e-6);
    }

    #[test]
    fn random_trajectories_match_oracle() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(31);
        for _ in 0..20 {
            let cfg = AdamConfig::with_lr(rng.gen_range(1e-4..1e-2));
            let start: f64 = rng.gen_range(-2.0..2.0);
            let grads: Vec<f64> = (0..10).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let mut p = Tensor::<f64>::vector(&[start]);
            let mut s = AdamState::new(&[1]);
            for &gv in &grads {
                let g = Tensor::vector(&[gv]);
                adam_step(&mut p, &g, &mut s, &cfg, "p").unwrap();
            }
            assert!((p.data()[0] - oracle(start, &grads, cfg.lr)).abs() < 1e-12);
            assert!(s.v.data().iter().all(|&v| v >= 0.0));
        }
    }

    #[test]
    fn non_finite_gradient_names_the_parameter() {
        let mut p = Tensor::<f64>::vector(&[1.0]);
        let g = Tensor::vector(&[f64::NAN]);
        let mut s = AdamState::new(&[1]);
        let err = adam_step(&mut p, &g, &mut s, &AdamConfig::with_lr(0.001), "embedding")
            .unwrap_err();
        assert!(err.to_string().contains("embedding"));
    }
}
