use serde::{Deserialize, Serialize};

use super::tree::{fit_boost_tree, BoostTreeConfig, Tree};
use crate::error::{Error, Result};
use crate::tensor::{sigmoid, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GbdtConfig {
    pub n_estimators: usize,
    pub max_depth: usize,
    pub learning_rate: f64,
    pub lambda: f64,
    pub min_child_weight: f64,
}

impl Default for GbdtConfig {
    fn default() -> Self {
        GbdtConfig {
            n_estimators: 100,
            max_depth: 6,
            learning_rate: 0.1,
            lambda: 1.0,
            min_child_weight: 1.0,
        }
    }
}

/// Logistic-loss boosted regression trees.
///
/// `p1(x) = sigmoid(base_score + learning_rate * sum_t leaf_t(x))`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Gbdt {
    pub config: GbdtConfig,
    /// Log-odds of the positive-class training prior.
    pub base_score: f64,
    pub trees: Vec<Tree>,
    /// Mean training log-loss after each stage; entry 0 is the prior alone.
    #[serde(default)]
    pub loss_curve: Vec<f64>,
    /// Input width seen in training.
    #[serde(default)]
    pub n_features: Option<usize>,
}

fn log_loss(y: &[u8], margin: &[f64]) -> f64 {
    let n = y.len() as f64;
    y.iter()
        .zip(margin)
        .map(|(&yi, &m)| {
            // log(1 + e^m) - y m, computed stably
            let softplus = if m > 0.0 {
                m + (-m).exp().ln_1p()
            } else {
                m.exp().ln_1p()
            };
            softplus - f64::from(yi) * m
        })
        .sum::<f64>()
        / n
}

impl Gbdt {
    pub fn fit(x: &Tensor, y: &[u8], config: GbdtConfig) -> Result<Self> {
        let n = x.rows();
        if n == 0 {
            return Err(Error::Data("empty training split".into()));
        }
        let prior = (y.iter().filter(|&&v| v == 1).count() as f64 / n as f64).clamp(1e-6, 1.0 - 1e-6);
        let base_score = (prior / (1.0 - prior)).ln();
        let tree_cfg = BoostTreeConfig {
            max_depth: config.max_depth,
            lambda: config.lambda,
            min_child_weight: config.min_child_weight,
        };
        let mut margin = vec![base_score; n];
        let mut trees = Vec::with_capacity(config.n_estimators);
        let mut loss_curve = vec![log_loss(y, &margin)];
        let mut grad = vec![0.0; n];
        let mut hess = vec![0.0; n];
        for _ in 0..config.n_estimators {
            for i in 0..n {
                let p = sigmoid(margin[i]);
                grad[i] = p - f64::from(y[i]);
                hess[i] = p * (1.0 - p);
            }
            let tree = fit_boost_tree(x, &grad, &hess, &tree_cfg);
            for (i, m) in margin.iter_mut().enumerate() {
                *m += config.learning_rate * tree.leaf_value(x.row_slice(i))[0];
            }
            loss_curve.push(log_loss(y, &margin));
            trees.push(tree);
        }
        Ok(Gbdt {
            config,
            base_score,
            trees,
            loss_curve,
            n_features: Some(x.cols()),
        })
    }

    pub fn margin(&self, x: &[f64]) -> f64 {
        let s: f64 = self.trees.iter().map(|t| t.leaf_value(x)[0]).sum();
        self.base_score + self.config.learning_rate * s
    }

    pub fn predict_positive(&self, x: &[f64]) -> f64 {
        sigmoid(self.margin(x))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn data(seed: u64) -> (Tensor, Vec<u8>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = 300;
        let raw: Vec<f64> = (0..n * 3).map(|_| rng.random_range(-2.0..2.0)).collect();
        let x = Tensor::new(n, 3, raw).unwrap();
        let y = (0..n)
            .map(|i| {
                let noisy = x.get(i, 0) * x.get(i, 1) + rng.random_range(-0.3..0.3);
                u8::from(noisy > 0.0)
            })
            .collect();
        (x, y)
    }

    #[test]
    fn zero_estimators_predict_the_prior() {
        let (x, y) = data(1);
        let model = Gbdt::fit(
            &x,
            &y,
            GbdtConfig {
                n_estimators: 0,
                ..GbdtConfig::default()
            },
        )
        .unwrap();
        let prior = y.iter().filter(|&&v| v == 1).count() as f64 / y.len() as f64;
        for i in 0..10 {
            assert!((model.predict_positive(x.row_slice(i)) - prior).abs() < 1e-12);
        }
    }

    #[test]
    fn training_loss_is_monotone() {
        let (x, y) = data(2);
        let model = Gbdt::fit(&x, &y, GbdtConfig::default()).unwrap();
        assert_eq!(model.loss_curve.len(), 101);
        for w in model.loss_curve.windows(2) {
            assert!(w[1] <= w[0] + 1e-12, "loss rose: {} -> {}", w[0], w[1]);
        }
        assert!(model.trees.iter().all(|t| t.depth() <= 6));
    }
}
