//! Pairwise bin-interaction statistics: the soft joint used for the
//! diversity objective and the hard cumulative coverage metric.

use serde::{Deserialize, Serialize};

use crate::binning::BinSpec;
use crate::error::{Error, Result};
use crate::tensor::{CustomOp, Tape, Tensor, Var};

/// Unordered feature pairs `(i, j)`, `i < j`, in lexicographic order.
pub fn feature_pairs(f: usize) -> Vec<(usize, usize)> {
    let mut v = Vec::with_capacity(f * f.saturating_sub(1) / 2);
    for i in 0..f {
        for j in i + 1..f {
            v.push((i, j));
        }
    }
    v
}

fn split_width(m: &Tensor, k: usize) -> Result<usize> {
    if k == 0 || m.cols() % k != 0 {
        return Err(Error::shape("pair_joint", m.shape(), &[m.rows(), k]));
    }
    Ok(m.cols() / k)
}

/// `[P, K*K]` joint over bin pairs: row `p` for pair `(i, j)` holds
/// `(1/N) sum_x m_i(x)[a] * m_j(x)[b]` at column `a*K + b`.
pub fn pair_joint(m: &Tensor, k: usize) -> Result<Tensor> {
    let n = m.rows();
    if n == 0 {
        return Err(Error::InvalidArgument("pair joint needs a nonempty batch".into()));
    }
    let f = split_width(m, k)?;
    let pairs = feature_pairs(f);
    let mut out = Tensor::zeros(pairs.len(), k * k);
    let inv = 1.0 / n as f64;
    let kk = k * k;
    for r in 0..n {
        let row = m.row_slice(r);
        let data = out.data_mut();
        for (p, &(i, j)) in pairs.iter().enumerate() {
            let mi = &row[i * k..(i + 1) * k];
            let mj = &row[j * k..(j + 1) * k];
            let cell = &mut data[p * kk..(p + 1) * kk];
            for a in 0..k {
                let w = mi[a] * inv;
                for b in 0..k {
                    cell[a * k + b] += w * mj[b];
                }
            }
        }
    }
    Ok(out)
}

struct PairJoint {
    k: usize,
}

impl CustomOp for PairJoint {
    fn name(&self) -> &'static str {
        "pair_joint"
    }

    fn backward(&self, inputs: &[&Tensor], _output: &Tensor, grad: &Tensor) -> Vec<Tensor> {
        let m = inputs[0];
        let k = self.k;
        let (n, fk) = (m.rows(), m.cols());
        let pairs = feature_pairs(fk / k);
        let inv = 1.0 / n as f64;
        let mut gm = Tensor::zeros(n, fk);
        for r in 0..n {
            let row = m.row_slice(r);
            let mut acc = vec![0.0; fk];
            for (p, &(i, j)) in pairs.iter().enumerate() {
                let g = grad.row_slice(p);
                for a in 0..k {
                    for b in 0..k {
                        let gab = g[a * k + b] * inv;
                        acc[i * k + a] += gab * row[j * k + b];
                        acc[j * k + b] += gab * row[i * k + a];
                    }
                }
            }
            gm.data_mut()[r * fk..(r + 1) * fk].copy_from_slice(&acc);
        }
        vec![gm]
    }
}

/// Records [`pair_joint`] on the tape.
pub fn pair_joint_on_tape(tape: &mut Tape, m: Var, k: usize) -> Result<Var> {
    let out = pair_joint(tape.value(m), k)?;
    Ok(tape.custom(Box::new(PairJoint { k }), &[m], out))
}

/// Entries are clamped at this value before the logarithm.
pub const ENTROPY_FLOOR: f64 = 1e-12;

/// Negative mean natural-log entropy of the pair joints, in `[-2 ln K, 0]`.
pub fn diversity_loss_on_tape(tape: &mut Tape, joint: Var) -> Var {
    let pairs = tape.value(joint).rows();
    if pairs == 0 {
        return tape.constant(Tensor::scalar(0.0));
    }
    let c = tape.clamp_min(joint, ENTROPY_FLOOR);
    let l = tape.ln(c);
    let pl = tape.mul(joint, l).expect("same shape");
    let s = tape.sum(pl);
    tape.scale(s, 1.0 / pairs as f64)
}

/// Value-only counterpart of [`diversity_loss_on_tape`].
pub fn diversity_loss(joint: &Tensor) -> f64 {
    if joint.rows() == 0 {
        return 0.0;
    }
    let s: f64 = joint
        .data()
        .iter()
        .map(|&p| p * p.max(ENTROPY_FLOOR).ln())
        .sum();
    s / joint.rows() as f64
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CoveragePoint {
    pub step: u64,
    pub coverage: f64,
}

/// Set of visited `(pair, k1, k2)` cells under a frozen [`BinSpec`].
#[derive(Clone, Debug, PartialEq)]
pub struct CoverageTracker {
    k: usize,
    pairs: Vec<(usize, usize)>,
    bits: Vec<u64>,
    visited: usize,
    history: Vec<CoveragePoint>,
}

impl CoverageTracker {
    pub fn new(n_features: usize, k: usize) -> Self {
        let pairs = feature_pairs(n_features);
        let cells = pairs.len() * k * k;
        CoverageTracker {
            k,
            pairs,
            bits: vec![0; cells.div_ceil(64)],
            visited: 0,
            history: Vec::new(),
        }
    }

    pub fn for_spec(spec: &BinSpec) -> Self {
        Self::new(spec.n_features(), spec.k())
    }

    pub fn total_cells(&self) -> usize {
        self.pairs.len() * self.k * self.k
    }

    pub fn visited(&self) -> usize {
        self.visited
    }

    pub fn is_visited(&self, pair: usize, k1: usize, k2: usize) -> bool {
        let c = (pair * self.k + k1) * self.k + k2;
        self.bits[c / 64] >> (c % 64) & 1 == 1
    }

    /// `|visited| / total_cells`; zero when there are no cells.
    pub fn coverage_fraction(&self) -> f64 {
        match self.total_cells() {
            0 => 0.0,
            t => self.visited as f64 / t as f64,
        }
    }

    pub fn history(&self) -> &[CoveragePoint] {
        &self.history
    }

    /// Hard-assigns each row and marks its pair cells; appends the resulting
    /// coverage at `step` to the history.
    pub fn record_batch(&mut self, spec: &BinSpec, x: &Tensor, step: u64) -> Result<f64> {
        if !spec.is_frozen() {
            return Err(Error::NotFrozen);
        }
        if spec.k() != self.k || feature_pairs(spec.n_features()).len() != self.pairs.len() {
            return Err(Error::shape(
                "record_batch",
                &[spec.n_features(), spec.k()],
                &[self.pairs.len(), self.k],
            ));
        }
        for r in 0..x.rows() {
            let bins = spec.hard_assign(x.row_slice(r))?;
            for (p, &(i, j)) in self.pairs.iter().enumerate() {
                let c = (p * self.k + bins[i]) * self.k + bins[j];
                let (w, b) = (c / 64, 1u64 << (c % 64));
                if self.bits[w] & b == 0 {
                    self.bits[w] |= b;
                    self.visited += 1;
                }
            }
        }
        let coverage = self.coverage_fraction();
        self.history.push(CoveragePoint { step, coverage });
        Ok(coverage)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::binning::static_uniform_bins;
    use crate::data::FeatureBox;

    fn onehots(bins: &[&[usize]], k: usize) -> Tensor {
        let f = bins[0].len();
        let mut d = vec![0.0; bins.len() * f * k];
        for (r, row) in bins.iter().enumerate() {
            for (c, &b) in row.iter().enumerate() {
                d[r * f * k + c * k + b] = 1.0;
            }
        }
        Tensor::new(bins.len(), f * k, d).unwrap()
    }

    #[test]
    fn single_hard_sample_is_one_cell_per_pair() {
        let j = pair_joint(&onehots(&[&[1, 0, 2]], 3), 3).unwrap();
        assert_eq!(j.shape(), &[3, 9]);
        // pairs (0,1), (0,2), (1,2)
        let hot = [3, 5, 2];
        for p in 0..3 {
            for c in 0..9 {
                assert_eq!(j.get(p, c), f64::from(u8::from(c == hot[p])));
            }
        }
    }

    #[test]
    fn opposite_corners_split_mass() {
        let j = pair_joint(&onehots(&[&[0, 0], &[1, 1]], 2), 2).unwrap();
        assert_eq!(j.data(), &[0.5, 0.0, 0.0, 0.5]);
    }

    #[test]
    fn empty_batch_fails() {
        assert!(pair_joint(&Tensor::zeros(0, 4), 2).is_err());
    }

    #[test]
    fn diversity_bounds() {
        let uniform = Tensor::filled(3, 64, 1.0 / 64.0);
        assert!((diversity_loss(&uniform) + 64f64.ln()).abs() < 1e-12);
        let mut point = Tensor::zeros(2, 4);
        point.data_mut()[1] = 1.0;
        point.data_mut()[6] = 1.0;
        assert_eq!(diversity_loss(&point), 0.0);
    }

    #[test]
    fn three_features_one_sample() {
        let b = FeatureBox::symmetric(3, 3.0);
        let spec = static_uniform_bins(&b, 2).unwrap();
        let mut t = CoverageTracker::for_spec(&spec);
        let x = Tensor::row(vec![0.5, -1.0, 2.0]);
        assert_eq!(t.record_batch(&spec, &x, 0).unwrap(), 0.25);
        assert_eq!(t.visited(), 3);
        assert_eq!(t.record_batch(&spec, &x, 1).unwrap(), 0.25);
        assert_eq!(t.history().len(), 2);
    }

    #[test]
    fn four_corner_samples_cover_two_by_two() {
        // feature 0 split at 5.5 over [1, 10], feature 1 is OLD=0 / NEW=1
        let b = FeatureBox::new(vec![1.0, -0.5], vec![10.0, 1.5]).unwrap();
        let spec = static_uniform_bins(&b, 2).unwrap();
        let x = Tensor::new(4, 2, vec![2.0, 0.0, 3.0, 1.0, 6.0, 0.0, 7.0, 1.0]).unwrap();
        let mut t = CoverageTracker::for_spec(&spec);
        assert_eq!(t.record_batch(&spec, &x, 0).unwrap(), 1.0);
    }

    #[test]
    fn unfrozen_spec_is_rejected() {
        let b = FeatureBox::symmetric(2, 1.0);
        let spec = crate::binning::BinSpec::uniform(&b, 2, 1.0).unwrap();
        let mut t = CoverageTracker::for_spec(&spec);
        assert!(matches!(
            t.record_batch(&spec, &Tensor::zeros(1, 2), 0),
            Err(Error::NotFrozen)
        ));
        assert_eq!(t.coverage_fraction(), 0.0);
    }
}
