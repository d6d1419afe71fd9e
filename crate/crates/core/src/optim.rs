//! Nesterov SGD and the one-cycle triangular learning-rate schedule.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Triangular one-cycle schedule: `0 → peak` linearly over the first half
/// of training, `peak → 0` over the second. `iteration` may be fractional.
pub fn cyclic_lr(iteration: f64, total: f64, peak: f32) -> f32 {
    if total <= 0.0 {
        return 0.0;
    }
    let t = (iteration / total).clamp(0.0, 1.0);
    let frac = if t <= 0.5 { 2.0 * t } else { 2.0 * (1.0 - t) };
    (frac * f64::from(peak)) as f32
}

/// Rate for the `k`-th of `total` updates (0-based), sampled at the middle
/// of the update's interval so that neither endpoint wastes a step at zero.
pub fn step_rate(k: usize, total: usize, peak: f32) -> f32 {
    cyclic_lr(k as f64 + 0.5, total as f64, peak)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SgdConfig {
    pub momentum: f32,
    pub weight_decay: f32,
}

impl Default for SgdConfig {
    fn default() -> Self {
        Self {
            momentum: 0.9,
            weight_decay: 5e-4,
        }
    }
}

/// One Nesterov step on every parameter tensor:
///
/// ```text
/// g  = grad + wd·p
/// v' = μ·v + g
/// p' = p − rate·(g + μ·v')
/// ```
///
/// Weight decay applies to biases too.
pub fn sgd_nesterov_step(
    params: &[Tensor],
    grads: &[Tensor],
    velocity: &[Tensor],
    rate: f32,
    cfg: SgdConfig,
) -> Result<(Vec<Tensor>, Vec<Tensor>)> {
    if params.len() != grads.len() || params.len() != velocity.len() {
        return Err(Error::shape(
            "sgd_nesterov_step",
            format!(
                "{} params, {} grads, {} velocities",
                params.len(),
                grads.len(),
                velocity.len()
            ),
        ));
    }
    let mut new_params = Vec::with_capacity(params.len());
    let mut new_velocity = Vec::with_capacity(params.len());
    for ((p, g), v) in params.iter().zip(grads).zip(velocity) {
        p.expect_same_shape("sgd_nesterov_step", g)?;
        p.expect_same_shape("sgd_nesterov_step", v)?;
        let mut np = p.clone();
        let mut nv = v.clone();
        for ((pv, vv), &gv) in np.data_mut().iter_mut().zip(nv.data_mut()).zip(g.data()) {
            let g = gv + cfg.weight_decay * *pv;
            *vv = cfg.momentum * *vv + g;
            *pv -= rate * (g + cfg.momentum * *vv);
        }
        np.check_finite("sgd_nesterov_step")?;
        nv.check_finite("sgd_nesterov_step")?;
        new_params.push(np);
        new_velocity.push(nv);
    }
    Ok((new_params, new_velocity))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_points() {
        assert_eq!(cyclic_lr(0.0, 100.0, 0.1), 0.0);
        assert!((cyclic_lr(50.0, 100.0, 0.1) - 0.1).abs() < 1e-7);
        assert!((cyclic_lr(25.0, 100.0, 0.1) - 0.05).abs() < 1e-7);
        assert!((cyclic_lr(75.0, 100.0, 0.1) - 0.05).abs() < 1e-7);
        assert_eq!(cyclic_lr(100.0, 100.0, 0.1), 0.0);
    }

    #[test]
    fn nesterov_scalar_example() {
        let p = [Tensor::scalar(1.0)];
        let g = [Tensor::scalar(1.0)];
        let v = [Tensor::scalar(0.0)];
        let cfg = SgdConfig {
            momentum: 0.9,
            weight_decay: 0.0,
        };
        let (np, nv) = sgd_nesterov_step(&p, &g, &v, 0.1, cfg).unwrap();
        assert_eq!(nv[0].item(), 1.0);
        assert!((np[0].item() - 0.81).abs() < 1e-7);
    }

    #[test]
    fn zero_rate_keeps_params() {
        let p = [Tensor::from_rows(&[vec![1.0, -2.0]]).unwrap()];
        let g = [Tensor::from_rows(&[vec![0.5, 0.5]]).unwrap()];
        let v = [Tensor::zeros(&[1, 2])];
        let (np, nv) = sgd_nesterov_step(&p, &g, &v, 0.0, SgdConfig::default()).unwrap();
        assert!(np[0].bit_eq(&p[0]));
        assert!(!nv[0].bit_eq(&v[0]));
    }

    #[test]
    fn plain_sgd_reduction() {
        let p = [Tensor::scalar(2.0)];
        let g = [Tensor::scalar(0.5)];
        let v = [Tensor::scalar(3.0)];
        let cfg = SgdConfig {
            momentum: 0.0,
            weight_decay: 0.0,
        };
        let (np, _) = sgd_nesterov_step(&p, &g, &v, 0.1, cfg).unwrap();
        assert_eq!(np[0].item(), 2.0 - 0.1 * 0.5);
    }

    #[test]
    fn non_finite_update_fails() {
        let p = [Tensor::scalar(1.0)];
        let g = [Tensor::scalar(f32::MAX)];
        let v = [Tensor::scalar(f32::MAX)];
        assert!(sgd_nesterov_step(&p, &g, &v, 1.0, SgdConfig::default()).is_err());
    }
}
