//! SGD with momentum and the polynomial learning-rate schedule.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// `lr_initial * (1 - iter / total_iters) ^ power`.
pub fn poly_lr(iter: u64, total_iters: u64, lr_initial: f64, power: f64) -> Result<f64> {
    if total_iters == 0 {
        return Err(Error::Config("total_iters must be positive".into()));
    }
    if iter > total_iters {
        return Err(Error::InvalidInput(format!(
            "iteration {iter} beyond schedule length {total_iters}"
        )));
    }
    Ok(lr_initial * (1.0 - iter as f64 / total_iters as f64).powf(power))
}

/// Momentum SGD with L2 weight decay folded into the gradient.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sgd {
    pub momentum: f32,
    pub weight_decay: f32,
    pub velocity: Vec<f32>,
    /// Half-open parameter index ranges that skip weight decay.
    #[serde(default)]
    pub no_decay: Vec<(usize, usize)>,
}

impl Sgd {
    pub fn new(num_params: usize, momentum: f32, weight_decay: f32) -> Self {
        Self {
            momentum,
            weight_decay,
            velocity: vec![0.0; num_params],
            no_decay: Vec::new(),
        }
    }

    pub fn without_decay(mut self, ranges: impl IntoIterator<Item = std::ops::Range<usize>>) -> Self {
        self.no_decay = ranges.into_iter().map(|r| (r.start, r.end)).collect();
        self
    }

    pub fn step(&mut self, params: &mut [f32], grads: &[f32], lr: f32) {
        debug_assert_eq!(params.len(), grads.len());
        let mut decay = vec![self.weight_decay; params.len()];
        for &(a, b) in &self.no_decay {
            decay[a.min(params.len())..b.min(params.len())].fill(0.0);
        }
        for (((p, &g), v), wd) in params.iter_mut().zip(grads).zip(&mut self.velocity).zip(decay) {
            let g = g + wd * *p;
            *v = self.momentum * *v + g;
            *p -= lr * *v;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn poly_schedule_reference_points() {
        assert_eq!(poly_lr(0, 1000, 0.01, 0.9).unwrap(), 0.01);
        assert!((poly_lr(500, 1000, 0.01, 1.0).unwrap() - 0.005).abs() < 1e-15);
        assert_eq!(poly_lr(1000, 1000, 0.01, 0.9).unwrap(), 0.0);
        let v = poly_lr(100, 1000, 0.001, 0.9).unwrap();
        assert!((v - 0.001 * 0.9f64.powf(0.9)).abs() < 1e-18);
        assert!((v - 9.096e-4).abs() < 1e-7);
        assert!(poly_lr(0, 0, 0.01, 0.9).is_err());
        assert!(poly_lr(11, 10, 0.01, 0.9).is_err());
    }

    #[test]
    fn momentum_step_and_decay_exclusion() {
        let mut opt = Sgd::new(3, 0.5, 0.1).without_decay([2..3]);
        let mut p = vec![1.0f32, 2.0, 2.0];
        opt.step(&mut p, &[1.0, 0.0, 0.0], 0.1);
        // v = g + wd*p; p -= lr*v
        assert_eq!(opt.velocity, vec![1.1, 0.2, 0.0]);
        assert!((p[0] - 0.89).abs() < 1e-6 && (p[1] - 1.98).abs() < 1e-6 && p[2] == 2.0);
        opt.step(&mut p, &[0.0, 0.0, 1.0], 0.1);
        assert!((opt.velocity[2] - 1.0).abs() < 1e-7);
        assert!((opt.velocity[0] - (0.55 + 0.089)).abs() < 1e-6);
    }

    #[test]
    fn poly_schedule_is_monotone() {
        let lrs: Vec<f64> = (0..=50).map(|i| poly_lr(i, 50, 0.1, 0.9).unwrap()).collect();
        assert!(lrs.windows(2).all(|w| w[1] < w[0]));
    }

    #[test]
    fn zero_lr_leaves_params() {
        let mut sgd = Sgd::new(3, 0.9, 1e-4);
        let mut p = vec![1.0, -2.0, 0.5];
        sgd.step(&mut p, &[0.3, 0.1, -1.0], 0.0);
        assert_eq!(p, vec![1.0, -2.0, 0.5]);
    }

    #[test]
    fn momentum_accumulates() {
        let mut sgd = Sgd::new(1, 0.9, 0.0);
        let mut p = vec![0.0];
        sgd.step(&mut p, &[1.0], 0.1);
        assert!((p[0] + 0.1).abs() < 1e-7);
        sgd.step(&mut p, &[1.0], 0.1);
        assert!((p[0] + 0.1 + 0.19).abs() < 1e-6);
    }
}
