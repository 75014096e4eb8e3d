//! Learned per-feature bins with differentiable soft memberships.
//!
//! Each feature's box `[lo, hi]` is cut into `K` intervals. Gap widths are a
//! softmax of `K` free logits plus a small floor, so boundaries stay strictly
//! increasing and inside the box under any parameter update.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::FeatureBox;
use crate::error::{Error, Result};
use crate::teachers::{TeacherFamily, TeacherOracle};
use crate::tensor::{softmax_in_place, Adam, CosineSchedule, CustomOp, Tape, Tensor, Var};

pub const DEFAULT_BINS: usize = 8;

/// Stabilizer for empty bins and the reciprocal inter-bin term.
pub const BIN_EPS: f64 = 1e-6;

/// Each gap is at least `GAP_FLOOR * width`.
const GAP_FLOOR: f64 = 1e-4;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BinSpec {
    k: usize,
    lo: Vec<f64>,
    hi: Vec<f64>,
    /// `[F, K]` gap logits.
    raw: Tensor,
    /// `[F][K-1]`, derived from `raw`.
    boundaries: Vec<Vec<f64>>,
    temperature: f64,
    frozen: bool,
}

fn check_temperature(t: f64) -> Result<()> {
    if t > 0.0 && t.is_finite() {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!("temperature must be positive, got {t}")))
    }
}

fn gaps_from_raw(raw: &[f64]) -> Vec<f64> {
    let k = raw.len() as f64;
    let mut g = raw.to_vec();
    softmax_in_place(&mut g, 1.0);
    g.iter().map(|v| v * (1.0 - k * GAP_FLOOR) + GAP_FLOOR).collect()
}

impl BinSpec {
    /// Evenly spaced, trainable bins.
    pub fn uniform(bounds: &FeatureBox, k: usize, temperature: f64) -> Result<Self> {
        if k < 2 {
            return Err(Error::InvalidArgument(format!("need at least 2 bins, got {k}")));
        }
        check_temperature(temperature)?;
        let f = bounds.n_features();
        let mut spec = BinSpec {
            k,
            lo: bounds.lo.clone(),
            hi: bounds.hi.clone(),
            raw: Tensor::zeros(f, k),
            boundaries: Vec::new(),
            temperature,
            frozen: false,
        };
        spec.refresh();
        Ok(spec)
    }

    fn refresh(&mut self) {
        let k = self.k;
        self.boundaries = (0..self.n_features())
            .map(|f| {
                let gaps = gaps_from_raw(self.raw.row_slice(f));
                let w = self.hi[f] - self.lo[f];
                let mut acc = 0.0;
                gaps[..k - 1]
                    .iter()
                    .map(|g| {
                        acc += g;
                        self.lo[f] + w * acc
                    })
                    .collect()
            })
            .collect();
    }

    pub fn n_features(&self) -> usize {
        self.lo.len()
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn temperature(&self) -> f64 {
        self.temperature
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    pub fn boundaries(&self) -> &[Vec<f64>] {
        &self.boundaries
    }

    pub fn feature_box(&self) -> FeatureBox {
        FeatureBox {
            lo: self.lo.clone(),
            hi: self.hi.clone(),
        }
    }

    pub fn raw(&self) -> &Tensor {
        &self.raw
    }

    pub fn set_temperature(&mut self, t: f64) -> Result<()> {
        check_temperature(t)?;
        self.temperature = t;
        Ok(())
    }

    /// Replaces the gap logits. Fails once frozen.
    pub fn set_raw(&mut self, raw: Tensor) -> Result<()> {
        if self.frozen {
            return Err(Error::Frozen);
        }
        if raw.shape() != self.raw.shape() {
            return Err(Error::shape("set_raw", raw.shape(), self.raw.shape()));
        }
        self.raw = raw;
        self.refresh();
        Ok(())
    }

    pub fn freeze(&mut self, temperature: f64) -> Result<()> {
        check_temperature(temperature)?;
        self.temperature = temperature;
        self.frozen = true;
        Ok(())
    }

    /// Soft membership of a single value of feature `f`.
    pub fn soft_membership(&self, x: f64, f: usize) -> Vec<f64> {
        let mut o = cumulative_logits(x, &self.boundaries[f]);
        softmax_in_place(&mut o, self.temperature);
        o
    }

    /// `[N, F*K]` memberships, feature-major within each row.
    pub fn memberships(&self, x: &Tensor) -> Result<Tensor> {
        let b = self.boundary_tensor();
        membership_forward(x, &b, self.k, self.temperature)
    }

    pub fn boundary_tensor(&self) -> Tensor {
        let data = self.boundaries.iter().flatten().copied().collect();
        Tensor::new(self.n_features(), self.k - 1, data).expect("boundary table shape")
    }

    /// Records `raw -> boundaries` on the tape; returns `(raw, boundaries)`.
    pub fn boundaries_on_tape(&self, tape: &mut Tape) -> Result<(Var, Var)> {
        let f = self.n_features();
        let k = self.k;
        let raw = tape.param(self.raw.clone());
        let g = tape.softmax(raw, 1.0)?;
        let g = tape.scale(g, 1.0 - k as f64 * GAP_FLOOR);
        let g = tape.add_scalar(g, GAP_FLOOR);
        let mut upper = vec![0.0; k * (k - 1)];
        for j in 0..k {
            for c in j..k - 1 {
                upper[j * (k - 1) + c] = 1.0;
            }
        }
        let upper = tape.constant(Tensor::new(k, k - 1, upper)?);
        let cum = tape.matmul(g, upper)?;
        let width = tape.constant(Tensor::column((0..f).map(|i| self.hi[i] - self.lo[i]).collect()));
        let lo = tape.constant(Tensor::column(self.lo.clone()));
        let scaled = tape.mul(cum, width)?;
        let b = tape.add(scaled, lo)?;
        Ok((raw, b))
    }

    /// Interval index per feature with half-open `[b_{k-1}, b_k)` intervals.
    pub fn hard_assign(&self, row: &[f64]) -> Result<Vec<usize>> {
        if !self.frozen {
            return Err(Error::NotFrozen);
        }
        if row.len() != self.n_features() {
            return Err(Error::shape("hard_assign", &[row.len()], &[self.n_features()]));
        }
        Ok(row
            .iter()
            .zip(&self.boundaries)
            .map(|(&v, b)| b.partition_point(|&edge| edge <= v))
            .collect())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(&BinSpecFile::from(self))?;
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let file: BinSpecFile = serde_json::from_str(&text)?;
        file.into_spec()
    }
}

/// Serialized form; the boundary table is written for audit and checked on
/// load against the logits it was derived from.
#[derive(Serialize, Deserialize)]
struct BinSpecFile {
    n_features: usize,
    k: usize,
    temperature: f64,
    frozen: bool,
    lo: Vec<f64>,
    hi: Vec<f64>,
    boundaries: Vec<Vec<f64>>,
    raw: Vec<Vec<f64>>,
}

impl From<&BinSpec> for BinSpecFile {
    fn from(s: &BinSpec) -> Self {
        BinSpecFile {
            n_features: s.n_features(),
            k: s.k,
            temperature: s.temperature,
            frozen: s.frozen,
            lo: s.lo.clone(),
            hi: s.hi.clone(),
            boundaries: s.boundaries.clone(),
            raw: (0..s.n_features()).map(|f| s.raw.row_slice(f).to_vec()).collect(),
        }
    }
}

impl BinSpecFile {
    fn into_spec(self) -> Result<BinSpec> {
        let bounds = FeatureBox::new(self.lo, self.hi)?;
        if bounds.n_features() != self.n_features || self.raw.len() != self.n_features {
            return Err(Error::Format("bin spec: feature count mismatch".into()));
        }
        let mut spec = BinSpec::uniform(&bounds, self.k, self.temperature)?;
        spec.set_raw(Tensor::from_rows(&self.raw)?)?;
        for (a, b) in spec.boundaries.iter().flatten().zip(self.boundaries.iter().flatten()) {
            if (a - b).abs() > 1e-9 * (1.0 + b.abs()) {
                return Err(Error::Format("bin spec: boundary table disagrees with logits".into()));
            }
        }
        spec.frozen = self.frozen;
        Ok(spec)
    }
}

/// Frozen, evenly spaced bins.
pub fn static_uniform_bins(bounds: &FeatureBox, k: usize) -> Result<BinSpec> {
    let mut s = BinSpec::uniform(bounds, k, 1.0)?;
    s.frozen = true;
    Ok(s)
}

/// `o_k = k x - sum_{j<k} b_j`.
fn cumulative_logits(x: f64, b: &[f64]) -> Vec<f64> {
    let mut o = vec![0.0; b.len() + 1];
    cumulative_logits_into(x, b, &mut o);
    o
}

fn cumulative_logits_into(x: f64, b: &[f64], o: &mut [f64]) {
    let mut acc = 0.0;
    o[0] = 0.0;
    for (j, edge) in b.iter().enumerate() {
        acc += edge;
        o[j + 1] = (j + 1) as f64 * x - acc;
    }
}

fn membership_forward(x: &Tensor, b: &Tensor, k: usize, tau: f64) -> Result<Tensor> {
    check_temperature(tau)?;
    let f = x.cols();
    if b.rows() != f || b.cols() != k - 1 {
        return Err(Error::shape("soft_membership", b.shape(), &[f, k - 1]));
    }
    let mut out = vec![0.0; x.rows() * f * k];
    for (r, chunk) in out.chunks_mut(f * k).enumerate() {
        for ((v, o), c) in x.row_slice(r).iter().zip(chunk.chunks_mut(k)).zip(0..) {
            cumulative_logits_into(*v, b.row_slice(c), o);
            softmax_in_place(o, tau);
        }
    }
    Tensor::new(x.rows(), f * k, out)
}

struct SoftMembership {
    k: usize,
    tau: f64,
}

impl CustomOp for SoftMembership {
    fn name(&self) -> &'static str {
        "soft_membership"
    }

    fn backward(&self, inputs: &[&Tensor], m: &Tensor, grad: &Tensor) -> Vec<Tensor> {
        let x = inputs[0];
        let (n, f, k) = (x.rows(), x.cols(), self.k);
        let mut gx = Tensor::zeros(n, f);
        let mut gb = Tensor::zeros(f, k - 1);
        let mut dlogit = vec![0.0; k];
        for r in 0..n {
            for c in 0..f {
                let base = c * k;
                let mr = &m.row_slice(r)[base..base + k];
                let gr = &grad.row_slice(r)[base..base + k];
                let dot: f64 = mr.iter().zip(gr).map(|(a, b)| a * b).sum();
                for i in 0..k {
                    dlogit[i] = mr[i] * (gr[i] - dot) / self.tau;
                }
                let dx: f64 = (0..k).map(|i| i as f64 * dlogit[i]).sum();
                gx.data_mut()[r * f + c] += dx;
                // o_i depends on b_j for every j < i
                let mut tail = 0.0;
                for j in (0..k - 1).rev() {
                    tail += dlogit[j + 1];
                    gb.data_mut()[c * (k - 1) + j] -= tail;
                }
            }
        }
        vec![gx, gb]
    }
}

/// Records soft memberships of `x` (`[N, F]`) against boundaries `b`
/// (`[F, K-1]`), producing `[N, F*K]`.
pub fn soft_membership_on_tape(tape: &mut Tape, x: Var, b: Var, k: usize, tau: f64) -> Result<Var> {
    let out = membership_forward(tape.value(x), tape.value(b), k, tau)?;
    Ok(tape.custom(Box::new(SoftMembership { k, tau }), &[x, b], out))
}

/// How bins are averaged in the two variance terms.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BinWeighting {
    /// Every live bin counts equally. Thin bins at the box edge then carry
    /// as much weight as populated ones, which draws boundaries outward.
    Uniform,
    /// Bins count by their share of the membership mass, so the terms are
    /// the within-bin and between-bin parts of the total variance of `p`.
    #[default]
    Mass,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BinObjective {
    pub lambda_intra: f64,
    pub lambda_inter: f64,
    #[serde(default)]
    pub weighting: BinWeighting,
}

impl Default for BinObjective {
    fn default() -> Self {
        BinObjective {
            lambda_intra: 1.0,
            lambda_inter: 1.0,
            weighting: BinWeighting::Mass,
        }
    }
}

/// Values of the two variance terms alongside the combined loss.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BinLossParts {
    pub loss: Var,
    pub var_intra: f64,
    pub var_inter: f64,
}

/// `λ_intra · Var_intra + λ_inter / (Var_inter + ε)` over memberships `m`
/// (`[N, F*K]`) and teacher positive-class probabilities `p`.
///
/// Bins with mass `<= ε` are excluded from both variance terms.
pub fn bin_loss(tape: &mut Tape, m: Var, p: &[f64], k: usize, obj: BinObjective) -> Result<BinLossParts> {
    let (n, fk) = (tape.value(m).rows(), tape.value(m).cols());
    if n == 0 {
        return Err(Error::InvalidArgument("bin loss needs a nonempty batch".into()));
    }
    if p.len() != n {
        return Err(Error::shape("bin_loss", &[p.len()], &[n]));
    }
    if k == 0 || fk % k != 0 {
        return Err(Error::shape("bin_loss", &[fk], &[k]));
    }
    let f = fk / k;

    // per-bin sums of 1, p and p^2 weighted by membership
    let ones = tape.constant(Tensor::filled(1, n, 1.0));
    let p_row = tape.constant(Tensor::row(p.to_vec()));
    let p2_row = tape.constant(Tensor::row(p.iter().map(|v| v * v).collect()));
    let mass_v = tape.matmul(ones, m)?;
    let s1 = tape.matmul(p_row, m)?;
    let s2 = tape.matmul(p2_row, m)?;
    let mass = tape.value(mass_v).clone();
    let mask: Vec<f64> = mass.data().iter().map(|&v| if v > BIN_EPS { 1.0 } else { 0.0 }).collect();
    let live = mask.iter().filter(|&&v| v > 0.0).count();
    let shift = tape.constant(Tensor::new(1, fk, mask.iter().map(|v| 1.0 - v).collect())?);
    let mask_row = tape.constant(Tensor::new(1, fk, mask.clone())?);
    let denom = tape.add(mass_v, shift)?;

    let mu = tape.div(s1, denom)?;
    let second = tape.div(s2, denom)?;
    let mu2 = tape.square(mu)?;
    let var_bin = tape.sub(second, mu2)?;
    let var_bin = tape.mul(var_bin, mask_row)?;
    let (var_intra, var_inter) = match obj.weighting {
        BinWeighting::Uniform => uniform_terms(tape, var_bin, mu, &mask, live, f, k)?,
        BinWeighting::Mass => {
            let w = tape.scale(mass_v, 1.0 / n as f64);
            let wv = tape.mul(var_bin, w)?;
            let intra_sum = tape.sum(wv);
            let var_intra = tape.scale(intra_sum, 1.0 / f as f64);
            // the mass-weighted mean of bin means is the mean of p
            let p_bar = p.iter().sum::<f64>() / n as f64;
            let dev = tape.add_scalar(mu, -p_bar);
            let dev2 = tape.square(dev)?;
            let dev2 = tape.mul(dev2, mask_row)?;
            let wd = tape.mul(dev2, w)?;
            let inter_sum = tape.sum(wd);
            (var_intra, tape.scale(inter_sum, 1.0 / f as f64))
        }
    };

    let inter_eps = tape.add_scalar(var_inter, BIN_EPS);
    let one = tape.constant(Tensor::scalar(1.0));
    let recip = tape.div(one, inter_eps)?;
    let a = tape.scale(var_intra, obj.lambda_intra);
    let b = tape.scale(recip, obj.lambda_inter);
    let loss = tape.add(a, b)?;
    Ok(BinLossParts {
        loss,
        var_intra: tape.value(var_intra).item(),
        var_inter: tape.value(var_inter).item(),
    })
}

/// Mean variance over live bins, and per-feature unweighted variance of live
/// bin means averaged over features.
fn uniform_terms(tape: &mut Tape, var_bin: Var, mu: Var, mask: &[f64], live: usize, f: usize, k: usize) -> Result<(Var, Var)> {
    let intra_sum = tape.sum(var_bin);
    let var_intra = tape.scale(intra_sum, 1.0 / live.max(1) as f64);

    let mu_fk = tape.reshape(mu, f, k)?;
    let mask_fk = tape.constant(Tensor::new(f, k, mask.to_vec())?);
    let counts: Vec<f64> = mask.chunks(k).map(|c| c.iter().sum::<f64>().max(1.0)).collect();
    let inv_cnt = tape.constant(Tensor::column(counts.iter().map(|c| 1.0 / c).collect()));
    let live_mu = tape.mul(mu_fk, mask_fk)?;
    let mu_sum = tape.sum_rows(live_mu);
    let mean_f = tape.mul(mu_sum, inv_cnt)?;
    let centered = tape.sub(mu_fk, mean_f)?;
    let centered = tape.mul(centered, mask_fk)?;
    let c2 = tape.square(centered)?;
    let c2_sum = tape.sum_rows(c2);
    let var_f = tape.mul(c2_sum, inv_cnt)?;
    Ok((var_intra, tape.mean(var_f)))
}

/// Bin temperatures and label temperature for one teacher family.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TemperatureSchedule {
    pub tau_start: f64,
    pub tau_end: f64,
    /// Steps over which `tau` falls linearly from start to end.
    pub phase1_steps: usize,
    pub tau_phase2: f64,
    pub t_distill: f64,
}

impl TemperatureSchedule {
    pub fn for_family(family: TeacherFamily, phase1_steps: usize) -> Self {
        let (tau_start, tau_end, tau_phase2, t_distill) = match family {
            TeacherFamily::Mlp | TeacherFamily::Rule => (1.0, 0.05, 0.2, 1.0),
            TeacherFamily::RandomForest => (1.2, 0.08, 0.25, 1.5),
            TeacherFamily::Gbdt => (1.5, 0.10, 0.4, 2.0),
        };
        TemperatureSchedule {
            tau_start,
            tau_end,
            phase1_steps,
            tau_phase2,
            t_distill,
        }
    }

    pub fn tau(&self, step: usize) -> f64 {
        if self.phase1_steps == 0 {
            return self.tau_end;
        }
        let s = step.min(self.phase1_steps) as f64 / self.phase1_steps as f64;
        self.tau_start + (self.tau_end - self.tau_start) * s
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BinLearnConfig {
    pub steps: usize,
    pub batch_size: usize,
    /// Adam rate for the gap logits.
    pub learning_rate: f64,
    /// Most recent labeled rows the objective is evaluated on; each step's
    /// batch is appended first. `0` uses the batch alone.
    pub history: usize,
    pub objective: BinObjective,
}

impl Default for BinLearnConfig {
    fn default() -> Self {
        BinLearnConfig {
            steps: 200,
            batch_size: 128,
            learning_rate: 0.05,
            history: 16_384,
            objective: BinObjective::default(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BinStepLog {
    pub step: usize,
    pub tau: f64,
    pub loss: f64,
    pub var_intra: f64,
    pub var_inter: f64,
}

/// Boundary optimizer state for one phase-1 run.
pub struct BinLearner {
    spec: BinSpec,
    opt: Adam,
    schedule: TemperatureSchedule,
    objective: BinObjective,
    step: usize,
    history: usize,
    pool_x: Vec<f64>,
    pool_p: Vec<f64>,
}

impl BinLearner {
    pub fn new(spec: BinSpec, schedule: TemperatureSchedule, cfg: &BinLearnConfig) -> Result<Self> {
        if spec.is_frozen() {
            return Err(Error::Frozen);
        }
        Ok(BinLearner {
            spec,
            opt: Adam::new(CosineSchedule::new(cfg.learning_rate, cfg.steps as u64)),
            schedule,
            objective: cfg.objective,
            step: 0,
            history: cfg.history,
            pool_x: Vec::new(),
            pool_p: Vec::new(),
        })
    }

    pub fn spec(&self) -> &BinSpec {
        &self.spec
    }

    pub fn steps_taken(&self) -> usize {
        self.step
    }

    /// Appends labeled rows to the history without stepping.
    pub fn extend_history(&mut self, x: &Tensor, p_pos: &[f64]) -> Result<()> {
        let f = self.spec.n_features();
        if x.cols() != f && x.rows() > 0 {
            return Err(Error::shape("bin_history", x.shape(), &[x.rows(), f]));
        }
        if x.rows() != p_pos.len() {
            return Err(Error::shape("bin_history", &[p_pos.len()], &[x.rows()]));
        }
        self.pool_x.extend_from_slice(x.data());
        self.pool_p.extend_from_slice(p_pos);
        let keep = self.history.max(x.rows());
        if self.pool_p.len() > keep {
            let drop = self.pool_p.len() - keep;
            self.pool_p.drain(..drop);
            self.pool_x.drain(..drop * f);
        }
        Ok(())
    }

    pub fn history_len(&self) -> usize {
        self.pool_p.len()
    }

    /// Appends the labeled batch to the history, then takes one optimizer
    /// step on the bin variance objective over the history window.
    pub fn step(&mut self, x: &Tensor, p_pos: &[f64]) -> Result<BinStepLog> {
        self.extend_history(x, p_pos)?;
        let f = self.spec.n_features();
        let (window, p_pos) = if self.history == 0 {
            (x.clone(), p_pos.to_vec())
        } else {
            let rows = self.pool_p.len();
            (Tensor::new(rows, f, self.pool_x.clone())?, self.pool_p.clone())
        };
        let p_pos = &p_pos[..];
        let tau = self.schedule.tau(self.step);
        self.spec.set_temperature(tau)?;
        let mut tape = Tape::new();
        let xv = tape.constant(window);
        let (raw, b) = self.spec.boundaries_on_tape(&mut tape)?;
        let m = soft_membership_on_tape(&mut tape, xv, b, self.spec.k(), tau)?;
        let parts = bin_loss(&mut tape, m, p_pos, self.spec.k(), self.objective)?;
        let loss = tape.value(parts.loss).item();
        if !loss.is_finite() {
            return Err(Error::NonFiniteLoss(format!(
                "bin step {}: intra {} inter {}",
                self.step, parts.var_intra, parts.var_inter
            )));
        }
        tape.backward(parts.loss)?;
        let mut params = self.spec.raw.clone();
        self.opt.step(&mut [&mut params], &[tape.grad(raw)])?;
        self.spec.set_raw(params)?;
        debug_assert!(self
            .spec
            .boundaries
            .iter()
            .all(|b| b.windows(2).all(|w| w[0] < w[1])));
        let log = BinStepLog {
            step: self.step,
            tau,
            loss,
            var_intra: parts.var_intra,
            var_inter: parts.var_inter,
        };
        self.step += 1;
        Ok(log)
    }

    /// Freezes the bins at the phase-2 temperature.
    pub fn finish(mut self) -> Result<BinSpec> {
        self.spec.freeze(self.schedule.tau_phase2)?;
        Ok(self.spec)
    }
}

/// Learns boundaries from batches drawn by `sample(step)` and labeled by the
/// teacher, then freezes the spec. `seed_pool` rows (already labeled) start
/// the learner's history.
pub fn learn_bins<S>(
    spec: BinSpec,
    mut sample: S,
    teacher: &TeacherOracle,
    schedule: TemperatureSchedule,
    cfg: &BinLearnConfig,
    seed_pool: Option<(&Tensor, &[f64])>,
) -> Result<(BinSpec, Vec<BinStepLog>)>
where
    S: FnMut(usize) -> Result<Tensor>,
{
    let mut learner = BinLearner::new(spec, schedule, cfg)?;
    if let Some((x, p)) = seed_pool {
        learner.extend_history(x, p)?;
    }
    let mut logs = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let x = sample(step)?;
        let probs = teacher.predict_batch(&x)?;
        let p: Vec<f64> = (0..probs.rows()).map(|r| probs.get(r, 1)).collect();
        logs.push(learner.step(&x, &p)?);
    }
    Ok((learner.finish()?, logs))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec_1d(b: f64, tau: f64) -> BinSpec {
        let bounds = FeatureBox::symmetric(1, 3.0);
        let mut s = BinSpec::uniform(&bounds, 2, tau).unwrap();
        // drive the boundary to `b` by solving for the logit gap
        let frac = (b + 3.0) / 6.0;
        let g = (frac - GAP_FLOOR) / (1.0 - 2.0 * GAP_FLOOR);
        let logit = (g / (1.0 - g)).ln();
        s.set_raw(Tensor::new(1, 2, vec![logit, 0.0]).unwrap()).unwrap();
        s
    }

    #[test]
    fn symmetric_point_splits_evenly() {
        let s = spec_1d(0.0, 1.0);
        assert!(s.boundaries()[0][0].abs() < 1e-12);
        let m = s.soft_membership(0.0, 0);
        assert!((m[0] - 0.5).abs() < 1e-12 && (m[1] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn low_temperature_is_nearly_hard() {
        let s = spec_1d(0.0, 0.01);
        let m = s.soft_membership(1.0, 0);
        // closed form: sigmoid((1 - 0) / 0.01)
        let expected = 1.0 / (1.0 + (-100.0f64).exp());
        assert!((m[1] - expected).abs() < 1e-12);
        assert!(m[1] > 0.999);
    }

    #[test]
    fn leftmost_value_lands_in_first_bin() {
        let b = FeatureBox::symmetric(1, 3.0);
        let s = BinSpec::uniform(&b, 8, 1e-3).unwrap();
        let m = s.soft_membership(-3.0, 0);
        let arg = (0..8).max_by(|&a, &c| m[a].total_cmp(&m[c])).unwrap();
        assert_eq!(arg, 0);
    }

    #[test]
    fn static_bins_are_evenly_spaced() {
        let b = FeatureBox::symmetric(2, 3.0);
        let s = static_uniform_bins(&b, 8).unwrap();
        let want = [-2.25, -1.5, -0.75, 0.0, 0.75, 1.5, 2.25];
        for f in 0..2 {
            for (a, w) in s.boundaries()[f].iter().zip(want) {
                assert!((a - w).abs() < 1e-12, "{a} vs {w}");
            }
        }
        assert!(s.is_frozen());
        let s2 = static_uniform_bins(&b, 2).unwrap();
        assert!(s2.boundaries()[0][0].abs() < 1e-12);
    }

    #[test]
    fn hard_assign_is_half_open_and_clamped() {
        let b = FeatureBox::symmetric(1, 3.0);
        let s = static_uniform_bins(&b, 8).unwrap();
        let edge = s.boundaries()[0][3];
        assert_eq!(s.hard_assign(&[edge]).unwrap(), vec![4]);
        assert_eq!(s.hard_assign(&[-10.0]).unwrap(), vec![0]);
        assert_eq!(s.hard_assign(&[10.0]).unwrap(), vec![7]);
        let open = BinSpec::uniform(&b, 8, 1.0).unwrap();
        assert!(matches!(open.hard_assign(&[0.0]), Err(Error::NotFrozen)));
    }

    #[test]
    fn frozen_spec_rejects_updates() {
        let b = FeatureBox::symmetric(1, 3.0);
        let mut s = static_uniform_bins(&b, 4).unwrap();
        assert!(matches!(s.set_raw(Tensor::zeros(1, 4)), Err(Error::Frozen)));
    }

    #[test]
    fn zero_temperature_is_rejected() {
        let b = FeatureBox::symmetric(1, 3.0);
        assert!(BinSpec::uniform(&b, 4, 0.0).is_err());
        let s = BinSpec::uniform(&b, 4, 1.0).unwrap();
        assert!(s.memberships(&Tensor::zeros(1, 1)).is_ok());
        assert!(membership_forward(&Tensor::zeros(1, 1), &s.boundary_tensor(), 4, -1.0).is_err());
    }

    #[test]
    fn schedule_is_linear() {
        let s = TemperatureSchedule::for_family(TeacherFamily::Mlp, 200);
        assert_eq!(s.tau(0), 1.0);
        assert!((s.tau(100) - 0.525).abs() < 1e-12);
        assert!((s.tau(200) - 0.05).abs() < 1e-12);
        let rf = TemperatureSchedule::for_family(TeacherFamily::RandomForest, 200);
        assert_eq!((rf.tau_start, rf.tau_end, rf.tau_phase2, rf.t_distill), (1.2, 0.08, 0.25, 1.5));
        let gb = TemperatureSchedule::for_family(TeacherFamily::Gbdt, 200);
        assert_eq!((gb.tau_start, gb.tau_end, gb.tau_phase2, gb.t_distill), (1.5, 0.10, 0.4, 2.0));
    }

    fn hard_memberships(bins: &[usize], k: usize) -> Tensor {
        let mut d = vec![0.0; bins.len() * k];
        for (i, &b) in bins.iter().enumerate() {
            d[i * k + b] = 1.0;
        }
        Tensor::new(bins.len(), k, d).unwrap()
    }

    #[test]
    fn constant_teacher_hits_maximal_inter_penalty() {
        let mut tape = Tape::new();
        let m = tape.constant(hard_memberships(&[0, 0, 1, 1], 2));
        let parts = bin_loss(&mut tape, m, &[0.7; 4], 2, BinObjective::default()).unwrap();
        assert!(parts.var_intra.abs() < 1e-15);
        assert!(parts.var_inter.abs() < 1e-15);
        let loss = tape.value(parts.loss).item();
        assert!((loss - 1.0 / BIN_EPS).abs() < 1e-3);
    }

    #[test]
    fn separated_hard_bins() {
        let mut tape = Tape::new();
        let m = tape.constant(hard_memberships(&[0, 0, 1, 1], 2));
        let parts = bin_loss(&mut tape, m, &[0.0, 0.0, 1.0, 1.0], 2, BinObjective::default()).unwrap();
        assert_eq!(parts.var_intra, 0.0);
        assert!((parts.var_inter - 0.25).abs() < 1e-15);
        assert!((tape.value(parts.loss).item() - 1.0 / (0.25 + BIN_EPS)).abs() < 1e-9);
    }

    #[test]
    fn empty_bins_are_ignored() {
        let mut tape = Tape::new();
        let m = tape.constant(hard_memberships(&[0, 0, 2, 2], 4));
        let parts = bin_loss(&mut tape, m, &[0.0, 0.2, 1.0, 1.0], 4, BinObjective::default()).unwrap();
        assert!((parts.var_intra - 0.01 / 2.0).abs() < 1e-15);
        // live means 0.1 and 1.0
        assert!((parts.var_inter - 0.2025).abs() < 1e-12);
    }

    #[test]
    fn boundaries_on_tape_match_cached() {
        let b = FeatureBox::new(vec![-1.0, 0.0], vec![2.0, 5.0]).unwrap();
        let mut s = BinSpec::uniform(&b, 4, 1.0).unwrap();
        s.set_raw(Tensor::new(2, 4, vec![0.3, -1.0, 2.0, 0.1, 0.0, 0.5, -0.5, 1.0]).unwrap())
            .unwrap();
        let mut tape = Tape::new();
        let (_, bv) = s.boundaries_on_tape(&mut tape).unwrap();
        let t = tape.value(bv);
        for f in 0..2 {
            for j in 0..3 {
                assert!((t.get(f, j) - s.boundaries()[f][j]).abs() < 1e-12);
            }
            assert!(s.boundaries()[f].windows(2).all(|w| w[0] < w[1]));
            assert!(s.boundaries()[f][0] > b.lo[f] && s.boundaries()[f][2] < b.hi[f]);
        }
    }

    #[test]
    fn json_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let b = FeatureBox::symmetric(3, 2.5);
        let mut s = BinSpec::uniform(&b, 5, 0.7).unwrap();
        s.set_raw(Tensor::new(3, 5, (0..15).map(|i| (i as f64 * 0.37).sin()).collect()).unwrap())
            .unwrap();
        s.freeze(0.2).unwrap();
        let path = dir.path().join("bins.json");
        s.save(&path).unwrap();
        assert_eq!(BinSpec::load(&path).unwrap(), s);
    }
}
