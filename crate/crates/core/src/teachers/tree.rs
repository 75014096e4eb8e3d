//! Axis-aligned binary trees stored as flat node tables.

use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::tensor::Tensor;

/// One row of a tree's node table. `feature < 0` marks a leaf.
///
/// Routing: `x[feature] <= threshold` goes left.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TreeNode {
    pub node_id: u32,
    pub feature: i32,
    pub threshold: f64,
    pub left: u32,
    pub right: u32,
    /// Class distribution for classification leaves, one weight for
    /// regression leaves, empty for internal nodes.
    pub value: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tree {
    pub nodes: Vec<TreeNode>,
}

impl Tree {
    pub fn leaf_value(&self, x: &[f64]) -> &[f64] {
        let mut i = 0usize;
        loop {
            let n = &self.nodes[i];
            if n.feature < 0 {
                return &n.value;
            }
            i = if x[n.feature as usize] <= n.threshold {
                n.left as usize
            } else {
                n.right as usize
            };
        }
    }

    /// Longest root-to-leaf path in edges.
    pub fn depth(&self) -> usize {
        fn go(t: &Tree, i: usize) -> usize {
            let n = &t.nodes[i];
            if n.feature < 0 {
                0
            } else {
                1 + go(t, n.left as usize).max(go(t, n.right as usize))
            }
        }
        go(self, 0)
    }

    pub fn n_leaves(&self) -> usize {
        self.nodes.iter().filter(|n| n.feature < 0).count()
    }

    fn push_leaf(&mut self, value: Vec<f64>) -> u32 {
        let id = self.nodes.len() as u32;
        self.nodes.push(TreeNode {
            node_id: id,
            feature: -1,
            threshold: 0.0,
            left: 0,
            right: 0,
            value,
        });
        id
    }

    fn push_split(&mut self, feature: usize, threshold: f64) -> u32 {
        let id = self.nodes.len() as u32;
        self.nodes.push(TreeNode {
            node_id: id,
            feature: feature as i32,
            threshold,
            left: 0,
            right: 0,
            value: Vec::new(),
        });
        id
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassTreeConfig {
    pub max_depth: usize,
    pub min_samples_split: usize,
    /// Candidate features per split; `None` uses all.
    pub max_features: Option<usize>,
}

/// Gini-split classification tree over the rows listed in `idx` (repeats
/// allowed, as produced by bootstrapping). Leaves hold `[p0, p1]`.
pub fn fit_class_tree<R: Rng + ?Sized>(
    x: &Tensor,
    y: &[u8],
    idx: &[usize],
    cfg: &ClassTreeConfig,
    rng: &mut R,
) -> Tree {
    let mut tree = Tree { nodes: Vec::new() };
    grow_class(&mut tree, x, y, idx.to_vec(), 0, cfg, rng);
    tree
}

fn class_counts(y: &[u8], idx: &[usize]) -> [f64; 2] {
    let pos = idx.iter().filter(|&&i| y[i] == 1).count() as f64;
    [idx.len() as f64 - pos, pos]
}

fn gini(c: [f64; 2]) -> f64 {
    let n = c[0] + c[1];
    if n == 0.0 {
        return 0.0;
    }
    let (a, b) = (c[0] / n, c[1] / n);
    1.0 - a * a - b * b
}

fn grow_class<R: Rng + ?Sized>(
    tree: &mut Tree,
    x: &Tensor,
    y: &[u8],
    idx: Vec<usize>,
    depth: usize,
    cfg: &ClassTreeConfig,
    rng: &mut R,
) -> u32 {
    let counts = class_counts(y, &idx);
    let n = idx.len() as f64;
    let dist = vec![counts[0] / n, counts[1] / n];
    if depth >= cfg.max_depth
        || idx.len() < cfg.min_samples_split.max(2)
        || counts[0] == 0.0
        || counts[1] == 0.0
    {
        return tree.push_leaf(dist);
    }

    let f = x.cols();
    let candidates: Vec<usize> = match cfg.max_features {
        Some(m) if m < f => {
            let mut v = sample(rng, f, m).into_vec();
            v.sort_unstable();
            v
        }
        _ => (0..f).collect(),
    };

    let parent = gini(counts) * n;
    let mut best: Option<(f64, usize, f64)> = None;
    let mut order = idx.clone();
    for &feat in &candidates {
        order.sort_by(|&a, &b| x.get(a, feat).total_cmp(&x.get(b, feat)));
        let mut left = [0.0, 0.0];
        for k in 0..order.len() - 1 {
            left[y[order[k]] as usize] += 1.0;
            let v = x.get(order[k], feat);
            let next = x.get(order[k + 1], feat);
            if v == next {
                continue;
            }
            let right = [counts[0] - left[0], counts[1] - left[1]];
            let nl = (k + 1) as f64;
            let impurity = gini(left) * nl + gini(right) * (n - nl);
            let gain = parent - impurity;
            if gain > 1e-12 && best.is_none_or(|(g, _, _)| gain > g) {
                best = Some((gain, feat, 0.5 * (v + next)));
            }
        }
    }

    let Some((_, feat, thr)) = best else {
        return tree.push_leaf(dist);
    };
    let (li, ri): (Vec<usize>, Vec<usize>) = idx.iter().partition(|&&i| x.get(i, feat) <= thr);
    let id = tree.push_split(feat, thr);
    let l = grow_class(tree, x, y, li, depth + 1, cfg, rng);
    let r = grow_class(tree, x, y, ri, depth + 1, cfg, rng);
    tree.nodes[id as usize].left = l;
    tree.nodes[id as usize].right = r;
    id
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoostTreeConfig {
    pub max_depth: usize,
    /// L2 penalty on leaf weights.
    pub lambda: f64,
    /// Minimum hessian sum in each child.
    pub min_child_weight: f64,
}

/// Second-order regression tree: gain `GL²/(HL+λ) + GR²/(HR+λ) − G²/(H+λ)`,
/// leaf weight `−G/(H+λ)`.
pub fn fit_boost_tree(x: &Tensor, grad: &[f64], hess: &[f64], cfg: &BoostTreeConfig) -> Tree {
    let mut tree = Tree { nodes: Vec::new() };
    let idx: Vec<usize> = (0..x.rows()).collect();
    grow_boost(&mut tree, x, grad, hess, idx, 0, cfg);
    tree
}

fn grow_boost(
    tree: &mut Tree,
    x: &Tensor,
    grad: &[f64],
    hess: &[f64],
    idx: Vec<usize>,
    depth: usize,
    cfg: &BoostTreeConfig,
) -> u32 {
    let g: f64 = idx.iter().map(|&i| grad[i]).sum();
    let h: f64 = idx.iter().map(|&i| hess[i]).sum();
    let weight = -g / (h + cfg.lambda);
    if depth >= cfg.max_depth || idx.len() < 2 {
        return tree.push_leaf(vec![weight]);
    }
    let score = |g: f64, h: f64| g * g / (h + cfg.lambda);
    let parent = score(g, h);
    let mut best: Option<(f64, usize, f64)> = None;
    let mut order = idx.clone();
    for feat in 0..x.cols() {
        order.sort_by(|&a, &b| x.get(a, feat).total_cmp(&x.get(b, feat)));
        let (mut gl, mut hl) = (0.0, 0.0);
        for k in 0..order.len() - 1 {
            gl += grad[order[k]];
            hl += hess[order[k]];
            let v = x.get(order[k], feat);
            let next = x.get(order[k + 1], feat);
            if v == next {
                continue;
            }
            let (gr, hr) = (g - gl, h - hl);
            if hl < cfg.min_child_weight || hr < cfg.min_child_weight {
                continue;
            }
            let gain = score(gl, hl) + score(gr, hr) - parent;
            if gain > 1e-12 && best.is_none_or(|(bg, _, _)| gain > bg) {
                best = Some((gain, feat, 0.5 * (v + next)));
            }
        }
    }
    let Some((_, feat, thr)) = best else {
        return tree.push_leaf(vec![weight]);
    };
    let (li, ri): (Vec<usize>, Vec<usize>) = idx.iter().partition(|&&i| x.get(i, feat) <= thr);
    let id = tree.push_split(feat, thr);
    let l = grow_boost(tree, x, grad, hess, li, depth + 1, cfg);
    let r = grow_boost(tree, x, grad, hess, ri, depth + 1, cfg);
    tree.nodes[id as usize].left = l;
    tree.nodes[id as usize].right = r;
    id
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn threshold_data(n: usize, seed: u64) -> (Tensor, Vec<u8>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut data = Vec::new();
        let mut y = Vec::new();
        for _ in 0..n {
            let a: f64 = rng.random_range(-3.0..3.0);
            let b: f64 = rng.random_range(-3.0..3.0);
            data.extend([a, b]);
            y.push(u8::from(b > 0.5));
        }
        (Tensor::new(n, 2, data).unwrap(), y)
    }

    #[test]
    fn depth_one_tree_recovers_threshold_rule() {
        let (x, y) = threshold_data(300, 1);
        let idx: Vec<usize> = (0..300).collect();
        let cfg = ClassTreeConfig {
            max_depth: 1,
            min_samples_split: 2,
            max_features: None,
        };
        let t = fit_class_tree(&x, &y, &idx, &cfg, &mut ChaCha8Rng::seed_from_u64(0));
        assert_eq!(t.depth(), 1);
        assert_eq!(t.nodes[0].feature, 1);
        for i in 0..300 {
            let p = t.leaf_value(x.row_slice(i));
            assert_eq!(u8::from(p[1] > 0.5), y[i]);
        }
    }

    #[test]
    fn depth_limit_is_respected() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let n = 400;
        let data: Vec<f64> = (0..n * 3).map(|_| rng.random_range(-1.0..1.0)).collect();
        let y: Vec<u8> = (0..n).map(|_| rng.random_range(0..2)).collect();
        let x = Tensor::new(n, 3, data).unwrap();
        let idx: Vec<usize> = (0..n).collect();
        for d in [0, 1, 3, 5] {
            let cfg = ClassTreeConfig {
                max_depth: d,
                min_samples_split: 2,
                max_features: Some(2),
            };
            let t = fit_class_tree(&x, &y, &idx, &cfg, &mut rng);
            assert!(t.depth() <= d);
            for node in &t.nodes {
                if node.feature >= 0 {
                    assert!((node.feature as usize) < 3 && node.threshold.is_finite());
                } else {
                    assert!((node.value.iter().sum::<f64>() - 1.0).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn min_samples_split_stops_growth() {
        let (x, y) = threshold_data(4, 3);
        let cfg = ClassTreeConfig {
            max_depth: 10,
            min_samples_split: 5,
            max_features: None,
        };
        let t = fit_class_tree(&x, &y, &[0, 1, 2, 3], &cfg, &mut ChaCha8Rng::seed_from_u64(0));
        assert_eq!(t.nodes.len(), 1);
    }
}
