//! Learning-rate plateau rule, validation smoothing and the Adam update.

use serde::{Deserialize, Serialize};

/// Multiplies the learning rate by `factor` once the monitored loss has
/// failed to improve for `patience` consecutive epochs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlateauSchedule {
    pub lr: f64,
    pub factor: f64,
    pub patience: usize,
    pub best: f64,
    pub epochs_since_best: usize,
}

impl PlateauSchedule {
    pub fn new(lr: f64, factor: f64, patience: usize) -> Self {
        PlateauSchedule {
            lr,
            factor,
            patience,
            best: f64::INFINITY,
            epochs_since_best: 0,
        }
    }

    /// Records one epoch's loss and returns the learning rate for the next
    /// epoch. Only a strictly lower loss counts as an improvement.
    pub fn observe(&mut self, loss: f64) -> f64 {
        if loss < self.best {
            self.best = loss;
            self.epochs_since_best = 0;
        } else {
            self.epochs_since_best += 1;
            if self.epochs_since_best >= self.patience {
                self.lr *= self.factor;
                self.epochs_since_best = 0;
            }
        }
        self.lr
    }
}

/// Exponential moving average with `m_0 = v_0`; returns every `m_t`.
pub fn ema_series(values: &[f64], beta: f64) -> Vec<f64> {
    let mut out = Vec::with_capacity(values.len());
    for &v in values {
        let m = match out.last() {
            None => v,
            Some(&prev) => beta * prev + (1.0 - beta) * v,
        };
        out.push(m);
    }
    out
}

/// The smoothed validation loss after the last value (β = 0.9).
///
/// # Panics
/// If `values` is empty.
pub fn smoothed_validation(values: &[f64]) -> f64 {
    *ema_series(values, 0.9).last().expect("at least one validation value")
}

/// Adam with bias correction.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    pub m: Vec<f32>,
    pub v: Vec<f32>,
}

impl Adam {
    pub fn new(n: usize) -> Self {
        Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: vec![0.0; n],
            v: vec![0.0; n],
        }
    }

    pub fn update(&mut self, params: &mut [f32], grads: &[f32], lr: f64) {
        assert_eq!(params.len(), grads.len());
        assert_eq!(params.len(), self.m.len());
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        let (b1, b2) = (self.beta1 as f32, self.beta2 as f32);
        let step = (lr / c1) as f32;
        let c2_sqrt = c2.sqrt() as f32;
        let eps = self.eps as f32;
        for i in 0..params.len() {
            let g = grads[i];
            self.m[i] = b1 * self.m[i] + (1.0 - b1) * g;
            self.v[i] = b2 * self.v[i] + (1.0 - b2) * g * g;
            params[i] -= step * self.m[i] / (self.v[i].sqrt() / c2_sqrt + eps);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn drops_once_after_patience_non_improving_epochs() {
        let mut s = PlateauSchedule::new(3e-4, 0.2, 30);
        let mut lrs = vec![s.observe(1.0)];
        for _ in 0..31 {
            lrs.push(s.observe(1.0));
        }
        // lrs[e] is the rate used in epoch e + 1.
        assert!(lrs[..30].iter().all(|&lr| lr == 3e-4));
        assert_eq!(lrs[30], 3e-4 * 0.2);
        assert_eq!(lrs[31], 3e-4 * 0.2);
        assert!(lrs.windows(2).all(|w| w[1] <= w[0]));
    }

    #[test]
    fn improvement_resets_the_counter() {
        let mut s = PlateauSchedule::new(1.0, 0.5, 3);
        for loss in [5.0, 6.0, 6.0, 4.0, 6.0, 6.0] {
            s.observe(loss);
        }
        assert_eq!(s.lr, 1.0);
        assert_eq!(s.observe(4.0), 0.5);
    }

    #[test]
    fn ema_examples() {
        assert_eq!(ema_series(&[1.0, 0.0], 0.9), vec![1.0, 0.9]);
        assert_eq!(smoothed_validation(&[2.5; 7]), 2.5);
        let mut v = vec![0.0; 10];
        v.push(1.0);
        assert!((smoothed_validation(&v) - 0.1).abs() < 1e-15);
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let mut adam = Adam::new(3);
        let mut p = vec![1.0f32, -1.0, 0.0];
        adam.update(&mut p, &[0.5, -2.0, 0.0], 0.01);
        assert!((p[0] - 0.99).abs() < 1e-6);
        assert!((p[1] + 0.99).abs() < 1e-6);
        assert_eq!(p[2], 0.0);
    }
}
