//! The compact student, its distillation loss and the warmup replay buffer.

use std::collections::VecDeque;
use std::fs;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::FeatureBox;
use crate::error::{Error, Result};
use crate::nn::{Forward, Mlp, Params};
use crate::teachers::{temper, ModelFile, TeacherOracle, MODEL_FILE_VERSION};
use crate::tensor::{Adam, CosineSchedule, Tape, Tensor, Var};

pub const STUDENT_HIDDEN: usize = 32;

/// Probabilities are clamped here before logarithms.
pub const LOG_FLOOR: f64 = 1e-12;

/// `F -> 32 -> 2` rectifier network with softmax output.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StudentNet {
    pub network: Mlp,
}

#[derive(Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case")]
enum StudentTag {
    Student(StudentNet),
}

impl StudentNet {
    pub fn new<R: Rng + ?Sized>(n_features: usize, rng: &mut R) -> Self {
        StudentNet {
            network: Mlp::new(&[n_features, STUDENT_HIDDEN, 2], 0.0, rng),
        }
    }

    pub fn n_features(&self) -> usize {
        self.network.input_dim()
    }

    pub fn predict_proba(&self, x: &Tensor) -> Result<Tensor> {
        self.network.predict_proba(x)
    }

    pub fn predict_labels(&self, x: &Tensor) -> Result<Vec<u8>> {
        let p = self.predict_proba(x)?;
        Ok((0..p.rows()).map(|r| u8::from(p.get(r, 1) > p.get(r, 0))).collect())
    }

    /// Records `softmax(net(x))`; returns the probabilities and the forward
    /// record whose params carry gradients when `params` is trainable.
    pub fn forward_on_tape(&self, tape: &mut Tape, x: Var, params: Params) -> Result<(Var, Forward)> {
        let fwd = self
            .network
            .forward::<rand_chacha::ChaCha8Rng>(tape, x, params, None)?;
        let p = tape.softmax(fwd.output, 1.0)?;
        Ok((p, fwd))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = ModelFile {
            format: "tabdistill-student".into(),
            version: MODEL_FILE_VERSION,
            model: StudentTag::Student(self.clone()),
        };
        fs::write(path, serde_json::to_string(&file)?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let file: ModelFile<StudentTag> = serde_json::from_str(&text)?;
        if file.version != MODEL_FILE_VERSION {
            return Err(Error::Format(format!(
                "{}: unsupported model file version {}",
                path.display(),
                file.version
            )));
        }
        let StudentTag::Student(s) = file.model;
        Ok(s)
    }
}

/// Argument order of the divergence between student `S` and tempered
/// teacher `T̃`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KlDirection {
    /// `KL(S || T̃)`.
    #[default]
    StudentTeacher,
    /// `KL(T̃ || S)`, the classic distillation order.
    TeacherStudent,
}

fn ln_floor(t: &Tensor) -> Tensor {
    t.map(|v| v.max(LOG_FLOOR).ln())
}

/// Mean per-row KL between the recorded student probabilities and the
/// teacher probabilities tempered by `t_distill`.
pub fn distill_loss_on_tape(
    tape: &mut Tape,
    student: Var,
    teacher: &Tensor,
    t_distill: f64,
    direction: KlDirection,
) -> Result<Var> {
    if !(t_distill > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "distillation temperature must be positive, got {t_distill}"
        )));
    }
    let s_shape = tape.value(student).shape().to_vec();
    if s_shape != teacher.shape() {
        return Err(Error::shape("distill_loss", &s_shape, teacher.shape()));
    }
    let n = teacher.rows().max(1) as f64;
    let tt = temper(teacher, t_distill);
    let log_t = ln_floor(&tt);
    let sc = tape.clamp_min(student, LOG_FLOOR);
    let log_s = tape.ln(sc);
    let terms = match direction {
        KlDirection::StudentTeacher => {
            let lt = tape.constant(log_t);
            let d = tape.sub(log_s, lt)?;
            tape.mul(student, d)?
        }
        KlDirection::TeacherStudent => {
            let ent: f64 = tt.data().iter().zip(log_t.data()).map(|(p, l)| p * l).sum();
            let tv = tape.constant(tt);
            let cross = tape.mul(tv, log_s)?;
            let cross = tape.neg(cross);
            // adding the constant negative teacher entropy keeps the value a
            // true divergence
            let c = tape.sum(cross);
            let c = tape.add_scalar(c, ent);
            return Ok(tape.scale(c, 1.0 / n));
        }
    };
    let s = tape.sum(terms);
    Ok(tape.scale(s, 1.0 / n))
}

/// Value-only counterpart of [`distill_loss_on_tape`].
pub fn distill_loss(student: &Tensor, teacher: &Tensor, t_distill: f64, direction: KlDirection) -> Result<f64> {
    let mut tape = Tape::new();
    let s = tape.constant(student.clone());
    let l = distill_loss_on_tape(&mut tape, s, teacher, t_distill, direction)?;
    Ok(tape.value(l).item())
}

/// FIFO store of queried rows and their raw teacher probabilities.
#[derive(Clone, Debug, PartialEq)]
pub struct ReplayBuffer {
    capacity: usize,
    n_features: usize,
    rows: VecDeque<(Vec<f64>, [f64; 2])>,
}

impl ReplayBuffer {
    pub fn new(capacity: usize, n_features: usize) -> Self {
        ReplayBuffer {
            capacity,
            n_features,
            rows: VecDeque::with_capacity(capacity.min(1 << 16)),
        }
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    /// Appends rows, evicting the oldest beyond capacity.
    pub fn push_batch(&mut self, x: &Tensor, probs: &Tensor) -> Result<()> {
        if x.rows() != probs.rows() || probs.cols() != 2 || (x.rows() > 0 && x.cols() != self.n_features) {
            return Err(Error::shape("replay_push", x.shape(), probs.shape()));
        }
        for r in 0..x.rows() {
            if self.capacity == 0 {
                break;
            }
            if self.rows.len() == self.capacity {
                self.rows.pop_front();
            }
            self.rows
                .push_back((x.row_slice(r).to_vec(), [probs.get(r, 0), probs.get(r, 1)]));
        }
        Ok(())
    }

    /// `n` rows drawn uniformly with replacement.
    pub fn sample<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Result<(Tensor, Tensor)> {
        if self.rows.is_empty() {
            return Err(Error::EmptyReplayBuffer);
        }
        let mut xs = Vec::with_capacity(n * self.n_features);
        let mut ps = Vec::with_capacity(n * 2);
        for _ in 0..n {
            let (x, p) = &self.rows[rng.random_range(0..self.rows.len())];
            xs.extend_from_slice(x);
            ps.extend_from_slice(p);
        }
        Ok((Tensor::new(n, self.n_features, xs)?, Tensor::new(n, 2, ps)?))
    }

    /// All stored rows and probabilities, oldest first.
    pub fn contents(&self) -> (Tensor, Tensor) {
        let n = self.rows.len();
        let mut xs = Vec::with_capacity(n * self.n_features);
        let mut ps = Vec::with_capacity(n * 2);
        for (x, p) in &self.rows {
            xs.extend_from_slice(x);
            ps.extend_from_slice(p);
        }
        (
            Tensor::new(n, self.n_features, xs).expect("buffer shape"),
            Tensor::new(n, 2, ps).expect("buffer shape"),
        )
    }
}

/// Rows of a batch of `b` taken from the generator; the rest come from
/// replay.
pub fn adversarial_count(b: usize) -> usize {
    (0.9 * b as f64).round() as usize
}

/// Student weights together with the optimizer driving them.
pub struct StudentTrainer {
    pub net: StudentNet,
    opt: Adam,
    pub t_distill: f64,
    pub direction: KlDirection,
}

impl StudentTrainer {
    pub fn new(net: StudentNet, schedule: CosineSchedule, t_distill: f64, direction: KlDirection) -> Self {
        StudentTrainer {
            net,
            opt: Adam::new(schedule),
            t_distill,
            direction,
        }
    }

    /// Starts a new optimizer (and schedule) for the next phase.
    pub fn reset_optimizer(&mut self, schedule: CosineSchedule) {
        self.opt = Adam::new(schedule);
    }

    pub fn steps_taken(&self) -> u64 {
        self.opt.steps_taken()
    }

    /// One optimizer step on the distillation loss over `(x, teacher)`.
    pub fn fit_batch(&mut self, x: &Tensor, teacher: &Tensor, t_distill: f64) -> Result<f64> {
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let (p, fwd) = self.net.forward_on_tape(&mut tape, xv, Params::Trainable)?;
        let loss = distill_loss_on_tape(&mut tape, p, teacher, t_distill, self.direction)?;
        let value = tape.value(loss).item();
        if !value.is_finite() {
            return Err(Error::NonFiniteLoss(format!("student distillation loss {value}")));
        }
        tape.backward(loss)?;
        self.net.network.apply_gradients(&tape, &fwd, &mut self.opt)?;
        Ok(value)
    }

    /// One phase-2 step: the first `round(0.9 B)` generator rows plus
    /// `B - round(0.9 B)` replay rows, with `B = x_adv.rows()`.
    pub fn student_step<R: Rng + ?Sized>(
        &mut self,
        x_adv: &Tensor,
        t_adv: &Tensor,
        buffer: &ReplayBuffer,
        rng: &mut R,
    ) -> Result<f64> {
        if buffer.is_empty() {
            return Err(Error::EmptyReplayBuffer);
        }
        let b = x_adv.rows();
        let n_adv = adversarial_count(b);
        let (xr, tr) = buffer.sample(b - n_adv, rng)?;
        let f = x_adv.cols();
        let mut xs = x_adv.data()[..n_adv * f].to_vec();
        xs.extend_from_slice(xr.data());
        let mut ts = t_adv.data()[..n_adv * 2].to_vec();
        ts.extend_from_slice(tr.data());
        let x = Tensor::new(b, f, xs)?;
        let t = Tensor::new(b, 2, ts)?;
        self.fit_batch(&x, &t, self.t_distill)
    }
}

/// Trains on uniform box samples with untempered teacher labels and stores
/// every query in `buffer`. Returns the loss per step.
pub fn warmup<R: Rng + ?Sized>(
    trainer: &mut StudentTrainer,
    teacher: &TeacherOracle,
    bounds: &FeatureBox,
    steps: usize,
    batch: usize,
    buffer: &mut ReplayBuffer,
    rng: &mut R,
) -> Result<Vec<f64>> {
    let mut losses = Vec::with_capacity(steps);
    for _ in 0..steps {
        let x = bounds.sample_uniform(batch, rng);
        let t = teacher.predict_batch(&x)?;
        buffer.push_batch(&x, &t)?;
        losses.push(trainer.fit_batch(&x, &t, 1.0)?);
    }
    Ok(losses)
}
