use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use super::Tensor;
use crate::error::{Error, Result};

/// Cosine annealing from `base` at step 0 to `floor` at `horizon`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CosineSchedule {
    pub base: f64,
    pub floor: f64,
    pub horizon: u64,
}

impl CosineSchedule {
    pub fn new(base: f64, horizon: u64) -> Self {
        CosineSchedule {
            base,
            floor: 0.0,
            horizon,
        }
    }

    pub fn rate(&self, step: u64) -> f64 {
        if self.horizon == 0 {
            return self.base;
        }
        let t = (step.min(self.horizon)) as f64 / self.horizon as f64;
        self.floor + 0.5 * (self.base - self.floor) * (1.0 + (PI * t).cos())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam with bias correction, learning rate read from a cosine schedule.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Adam {
    pub config: AdamConfig,
    pub schedule: CosineSchedule,
    step: u64,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(schedule: CosineSchedule) -> Self {
        Adam {
            config: AdamConfig::default(),
            schedule,
            step: 0,
            first: Vec::new(),
            second: Vec::new(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    pub fn current_rate(&self) -> f64 {
        self.schedule.rate(self.step)
    }

    /// Applies one update. `grads[i]` is the gradient of `params[i]`; a `None`
    /// gradient is treated as zero.
    pub fn step(&mut self, params: &mut [&mut Tensor], grads: &[Option<&Tensor>]) -> Result<()> {
        if params.len() != grads.len() {
            return Err(Error::InvalidArgument(format!(
                "{} parameters but {} gradients",
                params.len(),
                grads.len()
            )));
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            if let Some(g) = g {
                if g.shape() != p.shape() {
                    return Err(Error::shape("adam_step", p.shape(), g.shape()));
                }
                if !g.all_finite() {
                    return Err(Error::NonFiniteGradient {
                        index: i,
                        name: format!("param{i}{:?}", p.shape()),
                    });
                }
            }
        }
        if self.first.is_empty() {
            self.first = params.iter().map(|p| vec![0.0; p.len()]).collect();
            self.second = self.first.clone();
        } else if self.first.len() != params.len()
            || self.first.iter().zip(params.iter()).any(|(m, p)| m.len() != p.len())
        {
            return Err(Error::InvalidArgument(
                "parameter set changed between optimizer steps".into(),
            ));
        }

        let lr = self.schedule.rate(self.step);
        self.step += 1;
        let AdamConfig { beta1, beta2, eps } = self.config;
        let bc1 = 1.0 - beta1.powi(self.step as i32);
        let bc2 = 1.0 - beta2.powi(self.step as i32);
        for ((p, g), (m, v)) in params
            .iter_mut()
            .zip(grads)
            .zip(self.first.iter_mut().zip(self.second.iter_mut()))
        {
            let Some(g) = g else {
                // moments still decay so that a later nonzero gradient is
                // treated as in standard Adam with zero gradient here
                for (mi, vi) in m.iter_mut().zip(v.iter_mut()) {
                    *mi *= beta1;
                    *vi *= beta2;
                }
                apply(p.data_mut(), m, v, lr, bc1, bc2, eps);
                continue;
            };
            for ((mi, vi), &gi) in m.iter_mut().zip(v.iter_mut()).zip(g.data()) {
                *mi = beta1 * *mi + (1.0 - beta1) * gi;
                *vi = beta2 * *vi + (1.0 - beta2) * gi * gi;
            }
            apply(p.data_mut(), m, v, lr, bc1, bc2, eps);
        }
        Ok(())
    }
}

fn apply(p: &mut [f64], m: &[f64], v: &[f64], lr: f64, bc1: f64, bc2: f64, eps: f64) {
    for ((pi, mi), vi) in p.iter_mut().zip(m).zip(v) {
        let mhat = mi / bc1;
        let vhat = vi / bc2;
        *pi -= lr * mhat / (vhat.sqrt() + eps);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_leaves_parameters() {
        let mut p = Tensor::row(vec![0.3, -1.2]);
        let g = Tensor::zeros(1, 2);
        let mut opt = Adam::new(CosineSchedule::new(0.001, 10));
        opt.step(&mut [&mut p], &[Some(&g)]).unwrap();
        assert_eq!(p.data(), &[0.3, -1.2]);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut p = Tensor::scalar(0.0);
        let g = Tensor::scalar(1.0);
        let mut opt = Adam::new(CosineSchedule::new(0.001, 100));
        opt.step(&mut [&mut p], &[Some(&g)]).unwrap();
        // mhat = 1, vhat = 1, update = 0.001 / (1 + 1e-8)
        let expected = -0.001 / (1.0 + 1e-8);
        assert!((p.item() - expected).abs() < 1e-15);
    }

    #[test]
    fn cosine_schedule_endpoints_and_midpoint() {
        let s = CosineSchedule::new(0.001, 200);
        assert_eq!(s.rate(0), 0.001);
        assert!((s.rate(100) - 0.0005).abs() < 1e-15);
        assert!(s.rate(200).abs() < 1e-18);
    }

    #[test]
    fn non_finite_gradient_names_parameter() {
        let mut a = Tensor::scalar(0.0);
        let mut b = Tensor::scalar(0.0);
        let ga = Tensor::scalar(1.0);
        let gb = Tensor::scalar(f64::NAN);
        let mut opt = Adam::new(CosineSchedule::new(0.001, 10));
        let err = opt
            .step(&mut [&mut a, &mut b], &[Some(&ga), Some(&gb)])
            .unwrap_err();
        assert!(matches!(err, Error::NonFiniteGradient { index: 1, .. }));
        assert_eq!(a.item(), 0.0);
    }
}
