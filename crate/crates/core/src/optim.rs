//! First-order optimizers over flat parameter vectors.

use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum OptimizerKind {
    Sgd,
    SgdMomentum { momentum: f64 },
    Adam { beta1: f64, beta2: f64, epsilon: f64 },
}

impl OptimizerKind {
    pub fn adam() -> Self {
        OptimizerKind::Adam { beta1: 0.9, beta2: 0.999, epsilon: 1e-8 }
    }
}

/// Optimizer hyperparameters plus per-parameter accumulators.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimizerState {
    pub kind: OptimizerKind,
    pub step_size: f64,
    first: Vec<f64>,
    second: Vec<f64>,
    steps: u64,
}

impl OptimizerState {
    pub fn new(kind: OptimizerKind, step_size: f64, n_params: usize) -> Result<Self> {
        if !(step_size >= 0.0 && step_size.is_finite()) {
            return Err(Error::Argument(format!("step size must be nonnegative, got {step_size}")));
        }
        let (first, second) = match kind {
            OptimizerKind::Sgd => (Vec::new(), Vec::new()),
            OptimizerKind::SgdMomentum { momentum } => {
                if !(0.0..1.0).contains(&momentum) {
                    return Err(Error::Argument(format!("momentum must lie in [0, 1), got {momentum}")));
                }
                (vec![0.0; n_params], Vec::new())
            }
            OptimizerKind::Adam { beta1, beta2, epsilon } => {
                if !(0.0..1.0).contains(&beta1) || !(0.0..1.0).contains(&beta2) || !(epsilon > 0.0) {
                    return Err(Error::Argument("adam needs β1, β2 in [0, 1) and ε > 0".into()));
                }
                (vec![0.0; n_params], vec![0.0; n_params])
            }
        };
        Ok(OptimizerState { kind, step_size, first, second, steps: 0 })
    }

    pub fn sgd(step_size: f64, n_params: usize) -> Result<Self> {
        Self::new(OptimizerKind::Sgd, step_size, n_params)
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    /// Whether the accumulators fit a parameter vector of length `n`.
    pub fn is_compatible(&self, n: usize) -> bool {
        match self.kind {
            OptimizerKind::Sgd => true,
            OptimizerKind::SgdMomentum { .. } => self.first.len() == n,
            OptimizerKind::Adam { .. } => self.first.len() == n && self.second.len() == n,
        }
    }

    /// One descent step `params ← params − update(grad)`.
    pub fn step(&mut self, params: &mut [f64], grad: &[f64]) -> Result<()> {
        check_len(params.len(), grad.len())?;
        if !self.is_compatible(params.len()) {
            return Err(Error::Capability(format!(
                "optimizer state sized for {} parameters cannot drive {}",
                self.first.len(),
                params.len()
            )));
        }
        self.steps += 1;
        let lr = self.step_size;
        match self.kind {
            OptimizerKind::Sgd => {
                for (p, g) in params.iter_mut().zip(grad) {
                    *p -= lr * g;
                }
            }
            OptimizerKind::SgdMomentum { momentum } => {
                for ((p, g), m) in params.iter_mut().zip(grad).zip(&mut self.first) {
                    *m = momentum * *m + g;
                    *p -= lr * *m;
                }
            }
            OptimizerKind::Adam { beta1, beta2, epsilon } => {
                let t = self.steps as i32;
                let (c1, c2) = (1.0 - beta1.powi(t), 1.0 - beta2.powi(t));
                for (i, (p, g)) in params.iter_mut().zip(grad).enumerate() {
                    let m = &mut self.first[i];
                    let v = &mut self.second[i];
                    *m = beta1 * *m + (1.0 - beta1) * g;
                    *v = beta2 * *v + (1.0 - beta2) * g * g;
                    *p -= lr * (*m / c1) / ((*v / c2).sqrt() + epsilon);
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sgd_moves_against_gradient() {
        let mut opt = OptimizerState::sgd(0.5, 2).unwrap();
        let mut p = vec![1.0, -1.0];
        opt.step(&mut p, &[2.0, -4.0]).unwrap();
        assert_eq!(p, vec![0.0, 1.0]);
    }

    #[test]
    fn momentum_accumulates() {
        let mut opt = OptimizerState::new(OptimizerKind::SgdMomentum { momentum: 0.5 }, 1.0, 1).unwrap();
        let mut p = vec![0.0];
        opt.step(&mut p, &[1.0]).unwrap();
        opt.step(&mut p, &[1.0]).unwrap();
        assert_eq!(p, vec![-2.5]);
    }

    #[test]
    fn adam_first_step_has_unit_magnitude() {
        let mut opt = OptimizerState::new(OptimizerKind::adam(), 0.1, 3).unwrap();
        let mut p = vec![0.0; 3];
        opt.step(&mut p, &[1e-3, -5.0, 0.0]).unwrap();
        assert!((p[0] + 0.1).abs() < 1e-5);
        assert!((p[1] - 0.1).abs() < 1e-9);
        assert_eq!(p[2], 0.0);
    }

    #[test]
    fn mismatched_state_is_a_capability_error() {
        let mut opt = OptimizerState::new(OptimizerKind::adam(), 0.1, 3).unwrap();
        let mut p = vec![0.0; 4];
        assert!(matches!(opt.step(&mut p, &[0.0; 4]), Err(Error::Capability(_))));
        assert!(matches!(opt.step(&mut p, &[0.0; 3]), Err(Error::Dimension { .. })));
    }

    #[test]
    fn round_trips_through_json() {
        let mut opt = OptimizerState::new(OptimizerKind::adam(), 0.01, 2).unwrap();
        opt.step(&mut [0.0, 0.0], &[1.0, 2.0]).unwrap();
        let back: OptimizerState = serde_json::from_str(&serde_json::to_string(&opt).unwrap()).unwrap();
        assert_eq!(opt, back);
    }
}
