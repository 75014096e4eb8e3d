use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::tree::{fit_class_tree, ClassTreeConfig, Tree};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ForestConfig {
    pub n_trees: usize,
    pub max_depth: usize,
    pub min_samples_split: usize,
}

impl Default for ForestConfig {
    fn default() -> Self {
        ForestConfig {
            n_trees: 100,
            max_depth: 10,
            min_samples_split: 5,
        }
    }
}

/// Bagged Gini trees; prediction is the mean of leaf distributions.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RandomForest {
    pub config: ForestConfig,
    pub trees: Vec<Tree>,
    /// Input width seen in training.
    #[serde(default)]
    pub n_features: Option<usize>,
}

impl RandomForest {
    pub fn fit(x: &Tensor, y: &[u8], config: ForestConfig, seed: u64) -> Result<Self> {
        let n = x.rows();
        if n == 0 {
            return Err(Error::Data("empty training split".into()));
        }
        let f = x.cols();
        let tree_cfg = ClassTreeConfig {
            max_depth: config.max_depth,
            min_samples_split: config.min_samples_split,
            max_features: Some(((f as f64).sqrt().floor() as usize).max(1)),
        };
        let trees = (0..config.n_trees)
            .into_par_iter()
            .map(|t| {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                rng.set_stream(t as u64 + 1);
                let boot: Vec<usize> = (0..n).map(|_| rng.random_range(0..n)).collect();
                fit_class_tree(x, y, &boot, &tree_cfg, &mut rng)
            })
            .collect();
        Ok(RandomForest { config, trees, n_features: Some(f) })
    }

    pub fn predict_positive(&self, x: &[f64]) -> f64 {
        let s: f64 = self.trees.iter().map(|t| t.leaf_value(x)[1]).sum();
        s / self.trees.len() as f64
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn prediction_is_mean_of_tree_predictions() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let n = 200;
        let data: Vec<f64> = (0..n * 4).map(|_| rng.random_range(-2.0..2.0)).collect();
        let x = Tensor::new(n, 4, data).unwrap();
        let y: Vec<u8> = (0..n)
            .map(|i| u8::from(x.get(i, 0) + 0.5 * x.get(i, 2) > 0.1))
            .collect();
        let forest = RandomForest::fit(
            &x,
            &y,
            ForestConfig {
                n_trees: 7,
                ..ForestConfig::default()
            },
            3,
        )
        .unwrap();
        for _ in 0..50 {
            let probe: Vec<f64> = (0..4).map(|_| rng.random_range(-3.0..3.0)).collect();
            let mut by_hand = 0.0;
            for t in &forest.trees {
                by_hand += t.leaf_value(&probe)[1];
            }
            by_hand /= 7.0;
            assert!((forest.predict_positive(&probe) - by_hand).abs() < 1e-15);
        }
    }

    #[test]
    fn empty_split_fails() {
        let x = Tensor::zeros(0, 3);
        assert!(RandomForest::fit(&x, &[], ForestConfig::default(), 0).is_err());
    }

    #[test]
    fn fit_is_deterministic_under_parallelism() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let data: Vec<f64> = (0..300).map(|_| rng.random_range(-1.0..1.0)).collect();
        let x = Tensor::new(100, 3, data).unwrap();
        let y: Vec<u8> = (0..100).map(|i| u8::from(x.get(i, 1) > 0.0)).collect();
        let cfg = ForestConfig {
            n_trees: 10,
            ..ForestConfig::default()
        };
        assert_eq!(
            RandomForest::fit(&x, &y, cfg, 4).unwrap(),
            RandomForest::fit(&x, &y, cfg, 4).unwrap()
        );
    }
}
