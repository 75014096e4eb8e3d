//! Synthetic query generator and its two training objectives.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use flate2::write::GzEncoder;
use flate2::Compression;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::binning::{soft_membership_on_tape, BinSpec};
use crate::coverage::{diversity_loss_on_tape, pair_joint_on_tape};
use crate::data::FeatureBox;
use crate::error::{Error, Result};
use crate::nn::{BatchNorm, Forward, Linear, Params};
use crate::student::{StudentNet, LOG_FLOOR};
use crate::teachers::TeacherOracle;
use crate::tensor::{Adam, CosineSchedule, Tape, Tensor, Var};

pub const NOISE_DIM: usize = 64;
pub const GEN_HIDDEN: usize = 128;

/// `z ~ N(0, I)` through `64 -> 128 -> 128 -> F`, squashed into the box as
/// `center + half_width * tanh(.)`.
///
/// Every linear layer is followed by batch normalization (then a rectifier
/// on hidden layers), which keeps a batch from collapsing onto one point.
/// Samples therefore depend on the whole batch they are drawn with.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeneratorNet {
    pub layers: Vec<Linear>,
    pub norms: Vec<BatchNorm>,
    pub center: Vec<f64>,
    pub half_width: Vec<f64>,
}

impl GeneratorNet {
    pub fn new<R: Rng + ?Sized>(bounds: &FeatureBox, rng: &mut R) -> Self {
        let f = bounds.n_features();
        let sizes = [NOISE_DIM, GEN_HIDDEN, GEN_HIDDEN, f];
        GeneratorNet {
            layers: sizes.windows(2).map(|w| Linear::new(w[0], w[1], rng)).collect(),
            norms: sizes[1..].iter().map(|&w| BatchNorm::new(w)).collect(),
            center: (0..f).map(|i| bounds.center(i)).collect(),
            half_width: (0..f).map(|i| 0.5 * bounds.width(i)).collect(),
        }
    }

    pub fn n_features(&self) -> usize {
        self.center.len()
    }

    /// Per layer: weight, bias, gamma, beta.
    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        self.layers
            .iter_mut()
            .zip(self.norms.iter_mut())
            .flat_map(|(l, n)| [&mut l.weight, &mut l.bias, &mut n.gamma, &mut n.beta])
            .collect()
    }

    pub fn noise<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Tensor {
        let data = (0..n * NOISE_DIM).map(|_| rng.sample(StandardNormal)).collect();
        Tensor::new(n, NOISE_DIM, data).expect("noise shape")
    }

    fn squash(&self, raw: &Tensor) -> Tensor {
        let f = self.n_features();
        let mut out = raw.clone();
        for row in out.data_mut().chunks_mut(f) {
            for (c, v) in row.iter_mut().enumerate() {
                *v = self.center[c] + self.half_width[c] * v.tanh();
            }
        }
        out
    }

    fn raw_plain(&self, z: &Tensor) -> Result<Tensor> {
        if z.cols() != NOISE_DIM {
            return Err(Error::shape("generator", z.shape(), &[z.rows(), NOISE_DIM]));
        }
        let last = self.layers.len() - 1;
        let mut h = z.clone();
        for (i, (layer, norm)) in self.layers.iter().zip(&self.norms).enumerate() {
            h = h.matmul(&layer.weight)?;
            let cols = h.cols();
            for row in h.data_mut().chunks_mut(cols) {
                for (v, b) in row.iter_mut().zip(layer.bias.data()) {
                    *v += b;
                }
            }
            norm.forward_plain(&mut h);
            if i < last {
                h.data_mut().iter_mut().for_each(|v| *v = v.max(0.0));
            }
        }
        Ok(h)
    }

    /// A batch of `n` rows drawn without recording gradients.
    pub fn sample<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Result<Tensor> {
        let z = Self::noise(n, rng);
        Ok(self.squash(&self.raw_plain(&z)?))
    }

    /// Records the generator on the tape for noise `z`; returns the samples
    /// and the trainable parameter record.
    pub fn forward_on_tape(&self, tape: &mut Tape, z: &Tensor) -> Result<(Var, Forward)> {
        let mut h = tape.constant(z.clone());
        let mut vars = Vec::with_capacity(self.layers.len() * 4);
        let last = self.layers.len() - 1;
        for (i, (layer, norm)) in self.layers.iter().zip(&self.norms).enumerate() {
            let w = tape.param(layer.weight.clone());
            let b = tape.param(layer.bias.clone());
            h = tape.matmul(h, w)?;
            h = tape.add(h, b)?;
            let (normed, [g, beta]) = norm.forward_on_tape(tape, h, Params::Trainable)?;
            h = normed;
            vars.extend([w, b, g, beta]);
            if i < last {
                h = tape.relu(h);
            }
        }
        let t = tape.tanh(h);
        let half = tape.constant(Tensor::row(self.half_width.clone()));
        let center = tape.constant(Tensor::row(self.center.clone()));
        let scaled = tape.mul(t, half)?;
        let x = tape.add(scaled, center)?;
        Ok((x, Forward { output: h, params: vars }))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenPhase1Config {
    pub lambda_div: f64,
    pub lambda_boundary: f64,
}

impl Default for GenPhase1Config {
    fn default() -> Self {
        GenPhase1Config {
            lambda_div: 1.0,
            lambda_boundary: 1.0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenPhase2Config {
    pub lambda_cov: f64,
    pub lambda_hard: f64,
}

impl Default for GenPhase2Config {
    fn default() -> Self {
        GenPhase2Config {
            lambda_cov: 10.0,
            lambda_hard: 2.0,
        }
    }
}

/// Mean negative entropy `(1/N) sum_x sum_c p ln p` of recorded rows.
fn neg_entropy_rows(tape: &mut Tape, p: Var) -> Result<Var> {
    let n = tape.value(p).rows().max(1) as f64;
    let c = tape.clamp_min(p, LOG_FLOOR);
    let l = tape.ln(c);
    let pl = tape.mul(p, l)?;
    let s = tape.sum(pl);
    Ok(tape.scale(s, 1.0 / n))
}

fn neg_entropy_value(p: &Tensor) -> f64 {
    let n = p.rows().max(1) as f64;
    p.data().iter().map(|&v| v * v.max(LOG_FLOOR).ln()).sum::<f64>() / n
}

/// How the teacher enters the phase-1 objective.
pub enum TeacherSignal<'a> {
    /// Differentiable teacher recorded on the tape from the samples.
    Recorded(&'a TeacherOracle),
    /// Precomputed probabilities; the student's entropy stands in for the
    /// teacher's in the gradient.
    Values(&'a Tensor),
}

#[derive(Clone, Copy, Debug)]
pub struct Phase1Loss {
    pub loss: Var,
    pub class_div: f64,
    /// `-(1/N) sum H(teacher)`, whatever term carried the gradient.
    pub teacher_entropy: f64,
    /// Teacher probabilities recorded on the tape, if any.
    pub teacher_probs: Option<Var>,
}

/// `λ_div · (-H(mean student)) + λ_boundary · (-(1/N) sum H(teacher))`.
pub fn phase1_loss(
    tape: &mut Tape,
    x: Var,
    student: &StudentNet,
    teacher: TeacherSignal<'_>,
    cfg: GenPhase1Config,
) -> Result<Phase1Loss> {
    if tape.value(x).rows() == 0 {
        return Err(Error::InvalidArgument("phase-1 loss needs a nonempty batch".into()));
    }
    let (s, _) = student.forward_on_tape(tape, x, Params::Frozen)?;
    let mean_s = tape.mean_cols(s);
    let class_div = neg_entropy_rows(tape, mean_s)?;
    let (entropy, teacher_entropy, teacher_probs) = match teacher {
        TeacherSignal::Recorded(oracle) => {
            let pt = oracle.forward_on_tape(tape, x)?;
            let e = neg_entropy_rows(tape, pt)?;
            let v = tape.value(e).item();
            (e, v, Some(pt))
        }
        TeacherSignal::Values(pt) => (neg_entropy_rows(tape, s)?, neg_entropy_value(pt), None),
    };
    let a = tape.scale(class_div, cfg.lambda_div);
    let b = tape.scale(entropy, cfg.lambda_boundary);
    let loss = tape.add(a, b)?;
    Ok(Phase1Loss {
        loss,
        class_div: tape.value(class_div).item(),
        teacher_entropy,
        teacher_probs,
    })
}

#[derive(Clone, Copy, Debug)]
pub struct Phase2Loss {
    pub loss: Var,
    pub diversity: f64,
    pub hardness: f64,
}

/// `-(1/N) sum KL(T || S)` with `T` constant.
pub fn hardness_loss(tape: &mut Tape, student_probs: Var, teacher: &Tensor) -> Result<Var> {
    let n = teacher.rows().max(1) as f64;
    let log_t = teacher.map(|v| v.max(LOG_FLOOR).ln());
    let sc = tape.clamp_min(student_probs, LOG_FLOOR);
    let log_s = tape.ln(sc);
    let lt = tape.constant(log_t);
    let d = tape.sub(lt, log_s)?;
    let tv = tape.constant(teacher.clone());
    let kl = tape.mul(tv, d)?;
    let s = tape.sum(kl);
    Ok(tape.scale(s, -1.0 / n))
}

/// `λ_cov · L_diversity + λ_hard · L_hardness` over frozen bins.
pub fn phase2_loss(
    tape: &mut Tape,
    x: Var,
    spec: &BinSpec,
    student: &StudentNet,
    teacher: &Tensor,
    cfg: GenPhase2Config,
) -> Result<Phase2Loss> {
    if !spec.is_frozen() {
        return Err(Error::NotFrozen);
    }
    let b = tape.constant(spec.boundary_tensor());
    let m = soft_membership_on_tape(tape, x, b, spec.k(), spec.temperature())?;
    let joint = pair_joint_on_tape(tape, m, spec.k())?;
    let div = diversity_loss_on_tape(tape, joint);
    let (s, _) = student.forward_on_tape(tape, x, Params::Frozen)?;
    let hard = hardness_loss(tape, s, teacher)?;
    let a = tape.scale(div, cfg.lambda_cov);
    let h = tape.scale(hard, cfg.lambda_hard);
    let loss = tape.add(a, h)?;
    Ok(Phase2Loss {
        loss,
        diversity: tape.value(div).item(),
        hardness: tape.value(hard).item(),
    })
}

/// Generator weights with their optimizer.
pub struct GeneratorTrainer {
    pub net: GeneratorNet,
    opt: Adam,
}

impl GeneratorTrainer {
    pub fn new(net: GeneratorNet, schedule: CosineSchedule) -> Self {
        GeneratorTrainer {
            net,
            opt: Adam::new(schedule),
        }
    }

    /// Backpropagates `loss` and updates the generator parameters recorded
    /// in `fwd`. `parts` names the loss components for diagnostics.
    pub fn step(&mut self, tape: &mut Tape, loss: Var, fwd: &Forward, parts: &[(&str, f64)]) -> Result<f64> {
        let value = tape.value(loss).item();
        if !value.is_finite() {
            let detail: Vec<String> = parts.iter().map(|(k, v)| format!("{k}={v}")).collect();
            return Err(Error::NonFiniteLoss(format!("generator loss {value} ({})", detail.join(", "))));
        }
        tape.backward(loss)?;
        let grads: Vec<Option<&Tensor>> = fwd.params.iter().map(|&v| tape.grad(v)).collect();
        self.opt.step(&mut self.net.params_mut(), &grads)?;
        Ok(value)
    }
}

/// Training phase tags used in the sample log.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Warmup,
    Boundary,
    Adversarial,
    Baseline,
}

impl Phase {
    pub fn tag(self) -> &'static str {
        match self {
            Phase::Warmup => "warmup",
            Phase::Boundary => "boundary",
            Phase::Adversarial => "adversarial",
            Phase::Baseline => "baseline",
        }
    }
}

/// Gzipped CSV of every queried row: `step,phase,x0..x{F-1},p1`.
pub struct SampleLog {
    out: GzEncoder<BufWriter<File>>,
}

impl SampleLog {
    pub fn create(path: &Path, n_features: usize) -> Result<Self> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut out = GzEncoder::new(BufWriter::new(file), Compression::default());
        let mut header = String::from("step,phase");
        for i in 0..n_features {
            header.push_str(&format!(",x{i}"));
        }
        header.push_str(",p1\n");
        out.write_all(header.as_bytes()).map_err(|e| Error::io(path, e))?;
        Ok(SampleLog { out })
    }

    pub fn append(&mut self, step: u64, phase: Phase, x: &Tensor, probs: &Tensor) -> Result<()> {
        let mut buf = String::new();
        for r in 0..x.rows() {
            buf.push_str(&format!("{step},{}", phase.tag()));
            for v in x.row_slice(r) {
                buf.push_str(&format!(",{v:?}"));
            }
            buf.push_str(&format!(",{:?}\n", probs.get(r, 1)));
        }
        self.out
            .write_all(buf.as_bytes())
            .map_err(|e| Error::io("samples.csv.gz", e))
    }

    pub fn finish(self) -> Result<()> {
        let mut w = self.out.finish().map_err(|e| Error::io("samples.csv.gz", e))?;
        w.flush().map_err(|e| Error::io("samples.csv.gz", e))
    }
}
