//! Mini-batch SGD with momentum and weight decay, the learning-rate decay
//! schedule, the adversarial trade-off ramp, and early stopping.

use crate::error::{Error, Result};

/// SGD hyperparameters. Velocity buffers live next to the parameters they
/// update (one buffer per tensor); [`Sgd::step`] operates on raw slices so
/// weight matrices, bias vectors, and centers all share one code path.
#[derive(Debug, Clone, Copy)]
pub struct Sgd {
    pub momentum: f64,
    pub weight_decay: f64,
}

impl Default for Sgd {
    fn default() -> Self {
        Sgd {
            momentum: 0.9,
            weight_decay: 0.0005,
        }
    }
}

impl Sgd {
    /// `v <- momentum * v + (grad + weight_decay * param)`,
    /// `param <- param - lr * multiplier * v`.
    pub fn step(
        &self,
        param: &mut [f64],
        grad: &[f64],
        velocity: &mut [f64],
        lr: f64,
        multiplier: f64,
    ) -> Result<()> {
        if param.len() != grad.len() || param.len() != velocity.len() {
            return Err(Error::DimensionMismatch {
                op: "sgd_step",
                left: format!("{} params", param.len()),
                right: format!("{} grads / {} velocities", grad.len(), velocity.len()),
            });
        }
        if multiplier <= 0.0 {
            return Err(Error::InvalidParameter(format!(
                "lr multiplier must be > 0, got {multiplier}"
            )));
        }
        let step = lr * multiplier;
        for ((p, &g), v) in param.iter_mut().zip(grad).zip(velocity.iter_mut()) {
            *v = self.momentum * *v + (g + self.weight_decay * *p);
            *p -= step * *v;
        }
        Ok(())
    }
}

/// Polynomial learning-rate decay `eta = eta0 / (1 + omega * p)^rho` over
/// training progress `p` in `[0, 1]`.
#[derive(Debug, Clone, Copy)]
pub struct LrSchedule {
    pub eta0: f64,
    pub omega: f64,
    pub rho: f64,
}

impl LrSchedule {
    pub fn new(eta0: f64, omega: f64, rho: f64) -> Result<Self> {
        if !(eta0 > 0.0) {
            return Err(Error::InvalidParameter(format!(
                "base learning rate must be > 0, got {eta0}"
            )));
        }
        if omega < 0.0 || rho < 0.0 {
            return Err(Error::InvalidParameter(format!(
                "decay constants must be >= 0, got omega={omega} rho={rho}"
            )));
        }
        Ok(LrSchedule { eta0, omega, rho })
    }

    pub fn lr_at(&self, p: f64) -> Result<f64> {
        check_progress(p)?;
        Ok(self.eta0 / (1.0 + self.omega * p).powf(self.rho))
    }
}

/// Logistic ramp of the adversarial trade-off coefficient:
/// `lambda2(p) = 2u / (1 + exp(-gamma * p)) - u`, rising from 0 to u.
#[derive(Debug, Clone, Copy)]
pub struct AdvSchedule {
    pub upper: f64,
    pub gamma: f64,
}

impl AdvSchedule {
    pub fn new(upper: f64, gamma: f64) -> Result<Self> {
        if upper < 0.0 {
            return Err(Error::InvalidParameter(format!(
                "schedule upper bound must be >= 0, got {upper}"
            )));
        }
        if !(gamma > 0.0) {
            return Err(Error::InvalidParameter(format!(
                "schedule gamma must be > 0, got {gamma}"
            )));
        }
        Ok(AdvSchedule { upper, gamma })
    }

    pub fn lambda2_at(&self, p: f64) -> Result<f64> {
        check_progress(p)?;
        Ok(2.0 * self.upper / (1.0 + (-self.gamma * p).exp()) - self.upper)
    }
}

fn check_progress(p: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&p) || p.is_nan() {
        return Err(Error::InvalidParameter(format!(
            "training progress must lie in [0, 1], got {p}"
        )));
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StopDecision {
    Continue,
    Stop,
}

/// Terminates training when the tracked metric has not strictly improved
/// within `patience` updates. The first update records the baseline and
/// counts toward staleness, so a constant metric stops after exactly
/// `patience` updates.
#[derive(Debug, Clone)]
pub struct EarlyStopper {
    patience: usize,
    best: Option<f64>,
    stale: usize,
}

impl EarlyStopper {
    pub fn new(patience: usize) -> Result<Self> {
        if patience == 0 {
            return Err(Error::InvalidParameter("patience must be >= 1".into()));
        }
        Ok(EarlyStopper {
            patience,
            best: None,
            stale: 0,
        })
    }

    pub fn stale_count(&self) -> usize {
        self.stale
    }

    pub fn best(&self) -> Option<f64> {
        self.best
    }

    pub fn update(&mut self, metric: f64, higher_is_better: bool) -> Result<StopDecision> {
        if !metric.is_finite() {
            return Err(Error::NonFiniteMetric);
        }
        let improved = match self.best {
            None => false,
            Some(best) => {
                if higher_is_better {
                    metric > best
                } else {
                    metric < best
                }
            }
        };
        if improved {
            self.best = Some(metric);
            self.stale = 0;
            return Ok(StopDecision::Continue);
        }
        if self.best.is_none() {
            self.best = Some(metric);
        }
        self.stale = (self.stale + 1).min(self.patience);
        if self.stale >= self.patience {
            Ok(StopDecision::Stop)
        } else {
            Ok(StopDecision::Continue)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn vanilla_sgd_step() {
        let sgd = Sgd {
            momentum: 0.0,
            weight_decay: 0.0,
        };
        let mut w = [1.0];
        let mut v = [0.0];
        sgd.step(&mut w, &[2.0], &mut v, 0.1, 1.0).unwrap();
        assert!((w[0] - 0.8).abs() < 1e-15);
    }

    #[test]
    fn momentum_recursion_two_steps() {
        let sgd = Sgd {
            momentum: 0.9,
            weight_decay: 0.0,
        };
        let mut w = [0.0];
        let mut v = [0.0];
        sgd.step(&mut w, &[1.0], &mut v, 0.1, 1.0).unwrap();
        assert!((v[0] - 1.0).abs() < 1e-15);
        assert!((w[0] + 0.1).abs() < 1e-15);
        sgd.step(&mut w, &[1.0], &mut v, 0.1, 1.0).unwrap();
        assert!((v[0] - 1.9).abs() < 1e-15);
        assert!((w[0] + 0.29).abs() < 1e-15);
    }

    #[test]
    fn zero_gradient_is_a_fixed_point() {
        let sgd = Sgd {
            momentum: 0.9,
            weight_decay: 0.0,
        };
        let mut w = [3.0, -1.5];
        let mut v = [0.0, 0.0];
        sgd.step(&mut w, &[0.0, 0.0], &mut v, 0.5, 1.0).unwrap();
        assert_eq!(w, [3.0, -1.5]);
    }

    #[test]
    fn sgd_shape_mismatch_errors() {
        let sgd = Sgd::default();
        let mut w = [1.0, 2.0];
        let mut v = [0.0, 0.0];
        assert!(sgd.step(&mut w, &[1.0], &mut v, 0.1, 1.0).is_err());
    }

    #[test]
    fn lr_schedule_values() {
        let s = LrSchedule::new(0.001, 10.0, 0.75).unwrap();
        assert_eq!(s.lr_at(0.0).unwrap(), 0.001);
        let end = s.lr_at(1.0).unwrap();
        assert!((end - 1.655e-4).abs() < 1e-7);
        assert!((end - 0.001 / 11f64.powf(0.75)).abs() < 1e-18);

        let flat = LrSchedule::new(0.3, 10.0, 0.0).unwrap();
        for i in 0..=10 {
            assert_eq!(flat.lr_at(i as f64 / 10.0).unwrap(), 0.3);
        }

        assert!(s.lr_at(1.5).is_err());
        assert!(s.lr_at(-0.1).is_err());
    }

    #[test]
    fn lr_schedule_nonincreasing() {
        let s = LrSchedule::new(0.01, 10.0, 0.75).unwrap();
        let mut last = f64::INFINITY;
        for i in 0..=1000 {
            let lr = s.lr_at(i as f64 / 1000.0).unwrap();
            assert!(lr <= last);
            last = lr;
        }
    }

    #[test]
    fn adv_schedule_values() {
        let s = AdvSchedule::new(1.0, 10.0).unwrap();
        assert_eq!(s.lambda2_at(0.0).unwrap(), 0.0);
        assert!((s.lambda2_at(0.5).unwrap() - 0.9866).abs() < 1e-4);
        assert!(s.lambda2_at(1.0).unwrap() >= 0.98);

        let mut last = -1.0;
        for i in 0..=100 {
            let v = s.lambda2_at(i as f64 / 100.0).unwrap();
            assert!(v >= last);
            last = v;
        }
    }

    #[test]
    fn early_stopper_semantics() {
        // Constant metric with patience 3 stops on the third update.
        let mut s = EarlyStopper::new(3).unwrap();
        assert_eq!(s.update(0.5, true).unwrap(), StopDecision::Continue);
        assert_eq!(s.update(0.5, true).unwrap(), StopDecision::Continue);
        assert_eq!(s.update(0.5, true).unwrap(), StopDecision::Stop);

        // Strictly improving sequence never stops.
        let mut s = EarlyStopper::new(3).unwrap();
        for i in 0..50 {
            assert_eq!(s.update(i as f64, true).unwrap(), StopDecision::Continue);
        }

        // Improvement resets the counter.
        let mut s = EarlyStopper::new(3).unwrap();
        assert_eq!(s.update(0.5, true).unwrap(), StopDecision::Continue);
        assert_eq!(s.update(0.9, true).unwrap(), StopDecision::Continue);
        assert_eq!(s.update(0.9, true).unwrap(), StopDecision::Continue);
        assert_eq!(s.stale_count(), 1);

        // Lower-is-better flips the comparison.
        let mut s = EarlyStopper::new(2).unwrap();
        assert_eq!(s.update(1.0, false).unwrap(), StopDecision::Continue);
        assert_eq!(s.update(0.2, false).unwrap(), StopDecision::Continue);
        assert_eq!(s.update(0.2, false).unwrap(), StopDecision::Continue);
        assert_eq!(s.update(0.2, false).unwrap(), StopDecision::Stop);

        assert!(matches!(
            EarlyStopper::new(2).unwrap().update(f64::NAN, true),
            Err(Error::NonFiniteMetric)
        ));
    }
}
