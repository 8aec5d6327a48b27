//! AdamW, global-norm gradient clipping and learning-rate schedules.

use serde::{Deserialize, Serialize};

use crate::error::{contract, Error, Result};
use crate::numerics::{ParamStore, Tensor};

/// AdamW with decoupled weight decay.
#[derive(Clone, Debug)]
pub struct AdamW {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step_count: u64,
    first_moment: Vec<Tensor>,
    second_moment: Vec<Tensor>,
}

impl AdamW {
    pub fn new(learning_rate: f64, weight_decay: f64) -> Self {
        Self {
            learning_rate,
            weight_decay,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step_count: 0,
            first_moment: Vec::new(),
            second_moment: Vec::new(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step_count
    }

    /// Applies one update to `params` in place.
    pub fn update(&mut self, params: &mut [&mut Tensor], grads: &[Tensor]) -> Result<()> {
        if params.len() != grads.len() {
            return Err(contract(format!(
                "adamw: {} params but {} grads",
                params.len(),
                grads.len()
            )));
        }
        for (p, g) in params.iter().zip(grads) {
            if p.shape() != g.shape() {
                return Err(Error::Shape {
                    context: "adamw gradient".into(),
                    expected: p.shape().to_vec(),
                    actual: g.shape().to_vec(),
                });
            }
        }
        if self.first_moment.is_empty() {
            self.first_moment = grads.iter().map(|g| Tensor::zeros(g.shape())).collect();
            self.second_moment = self.first_moment.clone();
        } else if self.first_moment.len() != grads.len() {
            return Err(contract("adamw: parameter set changed between steps"));
        }
        self.step_count += 1;
        let t = self.step_count as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        let (lr, wd, b1, b2, eps) = (
            self.learning_rate,
            self.weight_decay,
            self.beta1,
            self.beta2,
            self.eps,
        );
        for ((p, g), (m, v)) in params.iter_mut().zip(grads).zip(
            self.first_moment
                .iter_mut()
                .zip(self.second_moment.iter_mut()),
        ) {
            let pd = p.data_mut();
            for (((w, &gr), mi), vi) in pd
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                *w -= lr * wd * *w;
                *mi = b1 * *mi + (1.0 - b1) * gr;
                *vi = b2 * *vi + (1.0 - b2) * gr * gr;
                let mhat = *mi / bc1;
                let vhat = *vi / bc2;
                *w -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
        Ok(())
    }

    /// Updates every entry of `store` with the aligned gradient list.
    pub fn step(&mut self, store: &mut ParamStore, grads: &[Tensor]) -> Result<()> {
        let mut params: Vec<&mut Tensor> = store
            .entries_mut()
            .iter_mut()
            .map(|e| &mut e.value)
            .collect();
        self.update(&mut params, grads)
    }
}

/// Scales `grads` so their joint L2 norm is at most `max_norm`. Returns the norm before clipping.
pub fn clip_global_norm(grads: &mut [Tensor], max_norm: f64) -> f64 {
    assert!(max_norm > 0.0, "max_norm must be positive");
    let norm = grads.iter().map(Tensor::sq_norm).sum::<f64>().sqrt();
    if norm > max_norm {
        let s = max_norm / norm;
        for g in grads.iter_mut() {
            for v in g.data_mut() {
                *v *= s;
            }
        }
    }
    norm
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LrScheduleKind {
    /// Multiply by `factor` after `patience` epochs without validation improvement.
    Plateau {
        factor: f64,
        patience: usize,
        min_lr: f64,
    },
    /// Cosine annealing from the base rate to `min_lr` over `total_epochs`.
    Cosine { total_epochs: usize, min_lr: f64 },
}

impl LrScheduleKind {
    pub fn plateau_default() -> Self {
        Self::Plateau {
            factor: 0.5,
            patience: 10,
            min_lr: 1e-6,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            Self::Plateau {
                factor,
                patience,
                min_lr,
            } => {
                if !(factor > 0.0 && factor < 1.0) || patience < 1 || min_lr < 0.0 {
                    return Err(contract(
                        "plateau schedule needs 0<factor<1, patience>=1, min_lr>=0",
                    ));
                }
            }
            Self::Cosine {
                total_epochs,
                min_lr,
            } => {
                if total_epochs == 0 || min_lr < 0.0 {
                    return Err(contract("cosine schedule needs total_epochs>0, min_lr>=0"));
                }
            }
        }
        Ok(())
    }
}

/// Stateful learning-rate schedule, stepped once per epoch.
#[derive(Clone, Debug)]
pub struct LrSchedule {
    kind: LrScheduleKind,
    base_lr: f64,
    best: f64,
    bad_epochs: usize,
}

impl LrSchedule {
    pub fn new(kind: LrScheduleKind, base_lr: f64) -> Result<Self> {
        kind.validate()?;
        Ok(Self {
            kind,
            base_lr,
            best: f64::INFINITY,
            bad_epochs: 0,
        })
    }

    pub fn kind(&self) -> LrScheduleKind {
        self.kind
    }

    /// Learning rate to use after finishing `epoch` with validation loss `val_loss`.
    pub fn step(&mut self, epoch: usize, val_loss: f64, current_lr: f64) -> f64 {
        match self.kind {
            LrScheduleKind::Cosine {
                total_epochs,
                min_lr,
            } => {
                let e = epoch.min(total_epochs) as f64;
                let c = (std::f64::consts::PI * e / total_epochs as f64).cos();
                min_lr + (self.base_lr - min_lr) * (1.0 + c) / 2.0
            }
            LrScheduleKind::Plateau {
                factor,
                patience,
                min_lr,
            } => {
                if val_loss < self.best * (1.0 - 1e-4)
                    || self.best.is_infinite() && val_loss.is_finite()
                {
                    self.best = val_loss;
                    self.bad_epochs = 0;
                    return current_lr;
                }
                self.bad_epochs += 1;
                if self.bad_epochs >= patience {
                    self.bad_epochs = 0;
                    (current_lr * factor).max(min_lr)
                } else {
                    current_lr
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one_step(param: f64, grad: f64, lr: f64, wd: f64) -> f64 {
        let mut p = Tensor::from_vec(vec![param]);
        let mut opt = AdamW::new(lr, wd);
        opt.update(&mut [&mut p], &[Tensor::from_vec(vec![grad])])
            .unwrap();
        assert_eq!(opt.step_count(), 1);
        p.item()
    }

    #[test]
    fn zero_grad_no_decay_is_noop() {
        assert_eq!(one_step(1.0, 0.0, 0.1, 0.0), 1.0);
    }

    #[test]
    fn decay_only_step() {
        assert!((one_step(1.0, 0.0, 0.1, 0.1) - 0.99).abs() < 1e-15);
    }

    #[test]
    fn single_adam_step_hand_evaluated() {
        // m̂ = 1, v̂ = 1 after bias correction, so the step is lr/(1+eps).
        let expected = 1.0 - 1e-3 / (1.0 + 1e-8);
        assert!((one_step(1.0, 1.0, 1e-3, 0.0) - expected).abs() < 1e-15);
        assert!((one_step(1.0, 1.0, 1e-3, 0.0) - 0.999).abs() < 1e-10);
    }

    #[test]
    fn adamw_shape_mismatch() {
        let mut p = Tensor::zeros(&[2]);
        let mut opt = AdamW::new(1e-3, 0.0);
        assert!(opt.update(&mut [&mut p], &[Tensor::zeros(&[3])]).is_err());
    }

    #[test]
    fn clipping() {
        let mut g = vec![Tensor::from_vec(vec![0.3, 0.4])];
        clip_global_norm(&mut g, 1.0);
        assert_eq!(g[0].data(), &[0.3, 0.4]);

        let mut g = vec![Tensor::from_vec(vec![3.0, 4.0])];
        let n = clip_global_norm(&mut g, 1.0);
        assert_eq!(n, 5.0);
        assert!((g[0].data()[0] - 0.6).abs() < 1e-15);
        assert!((g[0].data()[1] - 0.8).abs() < 1e-15);
    }

    #[test]
    fn cosine_endpoints() {
        let mut s = LrSchedule::new(
            LrScheduleKind::Cosine {
                total_epochs: 300,
                min_lr: 0.0,
            },
            1e-3,
        )
        .unwrap();
        assert_eq!(s.step(0, 0.0, 1e-3), 1e-3);
        assert!(s.step(300, 0.0, 1e-3).abs() < 1e-18);
        assert!((s.step(150, 0.0, 1e-3) - 5e-4).abs() < 1e-15);
    }

    #[test]
    fn plateau_halves_after_patience() {
        // Epoch loop simulation: one improving epoch, then ten flat ones.
        let mut s = LrSchedule::new(LrScheduleKind::plateau_default(), 1e-3).unwrap();
        let mut lr = 1e-3;
        lr = s.step(0, 1.0, lr);
        let mut history = vec![];
        for e in 1..=10 {
            lr = s.step(e, 1.0, lr);
            history.push(lr);
        }
        assert!(history[..9].iter().all(|&v| v == 1e-3));
        assert_eq!(lr, 5e-4);
    }

    #[test]
    fn invalid_schedules_rejected() {
        let bad = LrScheduleKind::Plateau {
            factor: 1.5,
            patience: 10,
            min_lr: 0.0,
        };
        assert!(LrSchedule::new(bad, 1e-3).is_err());
        let bad = LrScheduleKind::Plateau {
            factor: 0.5,
            patience: 0,
            min_lr: 0.0,
        };
        assert!(LrSchedule::new(bad, 1e-3).is_err());
    }
}
