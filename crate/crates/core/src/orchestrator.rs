//! End-to-end runs: warmup, boundary learning, adversarial distillation, and
//! the query-budgeted baselines they are compared against.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use log::{debug, info};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::binning::{static_uniform_bins, BinLearnConfig, BinLearner, BinObjective, BinSpec, BinStepLog, TemperatureSchedule};
use crate::coverage::CoverageTracker;
use crate::data::{Dataset, FeatureBox};
use crate::error::{Error, Result};
use crate::generator::{
    phase1_loss, phase2_loss, GenPhase1Config, GenPhase2Config, GeneratorNet, GeneratorTrainer, Phase, SampleLog,
    TeacherSignal,
};
use crate::metrics;
use crate::student::{adversarial_count, warmup, KlDirection, ReplayBuffer, StudentNet, StudentTrainer};
use crate::teachers::{TeacherFamily, TeacherModel, TeacherOracle};
use crate::tensor::{CosineSchedule, Tape, Tensor};

/// Query budget of the baselines.
pub const BASELINE_BUDGET: u64 = 9_600;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BinningMode {
    #[default]
    Dynamic,
    Static,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BaselineStrategy {
    Random,
    EntropyGuided,
}

impl BaselineStrategy {
    pub fn tag(self) -> &'static str {
        match self {
            BaselineStrategy::Random => "random",
            BaselineStrategy::EntropyGuided => "entropy_guided",
        }
    }
}

/// Every knob of a run. Fields missing from a config file take defaults.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub dataset: String,
    pub data_dir: PathBuf,
    pub teacher: Option<PathBuf>,
    pub seeds: Vec<u64>,
    pub batch_size: usize,
    pub warmup_steps: usize,
    pub phase1_steps: usize,
    pub phase2_steps: usize,
    pub bins: usize,
    pub binning: BinningMode,
    pub box_radius: f64,
    pub learning_rate: f64,
    pub bin_learning_rate: f64,
    /// Labeled rows the boundary objective is evaluated on.
    pub bin_history: usize,
    pub phase1: GenPhase1Config,
    pub phase2: GenPhase2Config,
    pub bin_objective: BinObjective,
    /// Overrides the per-family temperature row.
    pub schedule: Option<TemperatureSchedule>,
    pub kl_direction: KlDirection,
    pub generator_steps_per_iter: usize,
    /// Extra steps draw their generator share from all phase-2 queries so
    /// far.
    pub student_steps_per_iter: usize,
    pub replay_capacity: Option<usize>,
    /// Reuse the phase-1 generator in phase 2 instead of a fresh one.
    pub warm_start_generator: bool,
    /// Count warmup and phase-1 samples into coverage once bins freeze.
    pub coverage_includes_early: bool,
    /// Entropy-guided baseline: uniform proposals queried per kept row.
    pub entropy_pool_factor: usize,
    /// Add phase-1 queries to the replay buffer.
    pub replay_boundary_queries: bool,
    pub checkpoint_every: usize,
    /// Hard cap on teacher queries; the run stops early when reached.
    pub budget: Option<u64>,
    /// Optimizer steps of a baseline student; `None` matches the default
    /// protocol's student step count.
    pub baseline_student_steps: Option<usize>,
    pub write_samples: bool,
    pub out: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            dataset: String::new(),
            data_dir: PathBuf::from("data"),
            teacher: None,
            seeds: (0..5).collect(),
            batch_size: 128,
            warmup_steps: 30,
            phase1_steps: 200,
            phase2_steps: 400,
            bins: 8,
            binning: BinningMode::Dynamic,
            box_radius: 3.0,
            learning_rate: 0.001,
            bin_learning_rate: 0.05,
            bin_history: 16_384,
            phase1: GenPhase1Config::default(),
            phase2: GenPhase2Config::default(),
            bin_objective: BinObjective::default(),
            schedule: None,
            kl_direction: KlDirection::default(),
            generator_steps_per_iter: 1,
            student_steps_per_iter: 1,
            replay_capacity: None,
            warm_start_generator: false,
            coverage_includes_early: false,
            replay_boundary_queries: false,
            entropy_pool_factor: 2,
            checkpoint_every: 20,
            budget: None,
            baseline_student_steps: None,
            write_samples: true,
            out: PathBuf::from("runs"),
        }
    }
}

impl RunConfig {
    /// Malformed or unknown keys are usage errors, not data errors.
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::InvalidArgument(format!("run config: {e}")))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidArgument(m.into()));
        if self.batch_size == 0 || self.warmup_steps == 0 || self.phase2_steps == 0 {
            return bad("batch size, warmup steps and phase-2 steps must be positive");
        }
        if self.binning == BinningMode::Dynamic && self.phase1_steps == 0 {
            return bad("dynamic binning needs phase-1 steps");
        }
        if self.generator_steps_per_iter == 0
            || self.student_steps_per_iter == 0
            || self.checkpoint_every == 0
            || self.entropy_pool_factor == 0
        {
            return bad("per-iteration step counts and checkpoint interval must be positive");
        }
        if self.bins < 2 {
            return bad("need at least 2 bins");
        }
        if let Some(b) = self.budget {
            if b < self.warmup_queries() {
                return Err(Error::InvalidArgument(format!(
                    "budget {b} is below the {} warmup queries",
                    self.warmup_queries()
                )));
            }
        }
        let p = [
            self.phase1.lambda_div,
            self.phase1.lambda_boundary,
            self.phase2.lambda_cov,
            self.phase2.lambda_hard,
            self.bin_objective.lambda_intra,
            self.bin_objective.lambda_inter,
        ];
        if p.iter().any(|v| !(*v >= 0.0)) {
            return bad("loss weights must be nonnegative");
        }
        Ok(())
    }

    pub fn warmup_queries(&self) -> u64 {
        (self.warmup_steps * self.batch_size) as u64
    }

    /// Teacher queries of an uncapped run.
    pub fn planned_queries(&self) -> u64 {
        let p1 = match self.binning {
            BinningMode::Dynamic => self.phase1_steps,
            BinningMode::Static => 0,
        };
        ((self.warmup_steps + p1 + self.phase2_steps) * self.batch_size) as u64
    }

    pub fn student_steps(&self) -> usize {
        self.warmup_steps + self.phase2_steps * self.student_steps_per_iter
    }

    /// The override when set, else the family's row; annealing always spans
    /// `phase1_steps`.
    pub fn schedule_for(&self, family: TeacherFamily) -> TemperatureSchedule {
        TemperatureSchedule {
            phase1_steps: self.phase1_steps,
            ..self.schedule.unwrap_or_else(|| TemperatureSchedule::for_family(family, self.phase1_steps))
        }
    }

    /// Rescales the phase lengths so the whole protocol spends `budget`
    /// queries, keeping the warmup and the 1:2 phase-1 to phase-2 ratio,
    /// and keeps the student's total optimizer steps by taking extra steps
    /// per phase-2 iteration.
    pub fn budget_matched(&self, budget: u64) -> Result<Self> {
        let mut c = self.clone();
        let batches = (budget / self.batch_size as u64) as usize;
        if batches <= c.warmup_steps + 2 {
            return Err(Error::InvalidArgument(format!("budget {budget} leaves no room after warmup")));
        }
        let rest = batches - c.warmup_steps;
        let student_steps = self.student_steps();
        match c.binning {
            BinningMode::Dynamic => {
                c.phase1_steps = (rest / 3).max(1);
                c.phase2_steps = rest - c.phase1_steps;
            }
            BinningMode::Static => c.phase2_steps = rest,
        }
        c.student_steps_per_iter = (student_steps - c.warmup_steps).div_ceil(c.phase2_steps);
        c.checkpoint_every = (c.phase2_steps / 20).max(1);
        c.budget = Some(budget);
        c.replay_boundary_queries = true;
        Ok(c)
    }
}

/// Metrics of one evaluation on the held-out split.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalMetrics {
    pub accuracy: f64,
    pub f1: f64,
    /// `None` when the split has one class.
    pub auc: Option<f64>,
    pub agreement: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub step: usize,
    pub queries: u64,
    pub coverage: f64,
    pub metrics: EvalMetrics,
    /// Losses of the latest step; `None` where a method has no such term.
    pub generator_loss: Option<f64>,
    pub diversity: Option<f64>,
    pub hardness: Option<f64>,
    pub student_loss: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub dataset: String,
    pub family: TeacherFamily,
    pub method: String,
    pub seed: u64,
    pub config: RunConfig,
    pub checkpoints: Vec<Checkpoint>,
    pub final_metrics: EvalMetrics,
    pub coverage: f64,
    pub queries: u64,
    /// Stopped early on the query budget.
    pub partial: bool,
    pub boundary_steps: usize,
    pub warmup_losses: Vec<f64>,
    pub bin_log: Vec<BinStepLog>,
    pub boundaries: Vec<Vec<f64>>,
    pub input_hash: String,
}

impl RunRecord {
    pub fn correlation(&self) -> Result<Option<f64>> {
        let c: Vec<f64> = self.checkpoints.iter().map(|c| c.coverage).collect();
        let a: Vec<f64> = self.checkpoints.iter().map(|c| c.metrics.agreement).collect();
        metrics::coverage_agreement_correlation(&c, &a)
    }
}

/// What a run learns from: a teacher model and the dataset whose held-out
/// split is used for evaluation only.
#[derive(Clone, Copy)]
pub struct RunInputs<'a> {
    pub teacher: &'a TeacherModel,
    pub dataset: &'a Dataset,
}

impl RunInputs<'_> {
    /// SHA-256 over the teacher's serialized form and the dataset values.
    pub fn content_hash(&self) -> Result<String> {
        let mut h = Sha256::new();
        h.update(serde_json::to_vec(self.teacher)?);
        for v in self.dataset.x.data() {
            h.update(v.to_le_bytes());
        }
        h.update(&self.dataset.y);
        h.update(serde_json::to_vec(&self.dataset.meta.split)?);
        Ok(hex::encode(h.finalize()))
    }
}

/// Held-out split with the teacher's labels precomputed off the query count.
struct Evaluator {
    x: Tensor,
    y: Vec<u8>,
    teacher_labels: Vec<u8>,
}

impl Evaluator {
    fn new(inputs: RunInputs<'_>) -> Result<Self> {
        let x = inputs.dataset.test_x();
        let y = inputs.dataset.test_y();
        if y.is_empty() {
            return Err(Error::Data("dataset has an empty test split".into()));
        }
        let teacher_labels = TeacherOracle::new(inputs.teacher.clone()).predict_labels(&x)?;
        Ok(Evaluator { x, y, teacher_labels })
    }

    fn eval(&self, student: &StudentNet) -> Result<EvalMetrics> {
        let p = student.predict_proba(&self.x)?;
        let scores: Vec<f64> = (0..p.rows()).map(|r| p.get(r, 1)).collect();
        let preds: Vec<u8> = (0..p.rows()).map(|r| u8::from(p.get(r, 1) > p.get(r, 0))).collect();
        Ok(EvalMetrics {
            accuracy: metrics::accuracy(&preds, &self.y)?,
            f1: metrics::f1(&preds, &self.y)?,
            auc: metrics::auc(&scores, &self.y)?,
            agreement: metrics::agreement(&preds, &self.teacher_labels)?,
        })
    }
}

/// Test-split metrics of `student` against the dataset labels and the
/// teacher's labels. Does not count as teacher queries of any run.
pub fn evaluate_student(inputs: RunInputs<'_>, student: &StudentNet) -> Result<EvalMetrics> {
    Evaluator::new(inputs)?.eval(student)
}

/// Independent random streams of one run.
struct Streams {
    init: ChaCha8Rng,
    warmup: ChaCha8Rng,
    noise: ChaCha8Rng,
    replay: ChaCha8Rng,
}

impl Streams {
    fn new(seed: u64) -> Self {
        let s = |k: u64| {
            let mut r = ChaCha8Rng::seed_from_u64(seed);
            r.set_stream(k);
            r
        };
        Streams {
            init: s(1),
            warmup: s(2),
            noise: s(3),
            replay: s(4),
        }
    }
}

fn positive_column(p: &Tensor) -> Vec<f64> {
    (0..p.rows()).map(|r| p.get(r, 1)).collect()
}

fn clamp_probs(p: &Tensor) -> Tensor {
    let mut out = p.clone();
    for row in out.data_mut().chunks_mut(2) {
        let p1 = row[1].clamp(crate::teachers::PROB_FLOOR, 1.0 - crate::teachers::PROB_FLOOR);
        row[0] = 1.0 - p1;
        row[1] = p1;
    }
    out
}

fn has_budget(cfg: &RunConfig, oracle: &TeacherOracle, n: usize) -> bool {
    cfg.budget.is_none_or(|b| oracle.queries() + n as u64 <= b)
}

fn seed_dir(out: &Path, seed: u64) -> PathBuf {
    out.join(format!("seed-{seed}"))
}

/// One full three-phase run. Writes the run directory when `out` is given.
pub fn run_distillation(inputs: RunInputs<'_>, cfg: &RunConfig, seed: u64, out: Option<&Path>) -> Result<RunRecord> {
    cfg.validate()?;
    let ds = inputs.dataset;
    let f = ds.n_features();
    let family = inputs.teacher.family();
    let schedule = cfg.schedule_for(family);
    let bounds = FeatureBox::symmetric(f, cfg.box_radius);
    let oracle = TeacherOracle::new(inputs.teacher.clone());
    let evaluator = Evaluator::new(inputs)?;
    let mut rng = Streams::new(seed);
    let batch = cfg.batch_size;

    if let Some(dir) = out {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut samples = match (out, cfg.write_samples) {
        (Some(dir), true) => Some(SampleLog::create(&dir.join("samples.csv.gz"), f)?),
        _ => None,
    };

    // warmup
    let student = StudentNet::new(f, &mut rng.init);
    let mut trainer = StudentTrainer::new(
        student,
        CosineSchedule::new(cfg.learning_rate, cfg.warmup_steps as u64),
        schedule.t_distill,
        cfg.kl_direction,
    );
    let capacity = cfg.replay_capacity.unwrap_or_else(|| {
        let p1 = if cfg.replay_boundary_queries { cfg.phase1_steps } else { 0 };
        (cfg.warmup_steps + p1) * batch
    });
    let mut buffer = ReplayBuffer::new(capacity, f);
    let warmup_losses = warmup(
        &mut trainer,
        &oracle,
        &bounds,
        cfg.warmup_steps,
        batch,
        &mut buffer,
        &mut rng.warmup,
    )?;
    if let Some(log) = samples.as_mut() {
        let (x, p) = buffer.contents();
        log.append(0, Phase::Warmup, &x, &p)?;
    }
    debug!("seed {seed}: warmup loss {:?} -> {:?}", warmup_losses.first(), warmup_losses.last());

    // boundary learning
    let gen_init = GeneratorNet::new(&bounds, &mut rng.init);
    let mut early: Vec<Tensor> = Vec::new();
    if cfg.coverage_includes_early {
        early.push(buffer.contents().0);
    }
    let mut partial = false;
    let mut bin_log = Vec::new();
    let (spec, phase1_gen) = match cfg.binning {
        BinningMode::Static => {
            let mut s = static_uniform_bins(&bounds, cfg.bins)?;
            s.set_temperature(schedule.tau_phase2)?;
            (s, gen_init)
        }
        BinningMode::Dynamic => {
            let mut gen = GeneratorTrainer::new(gen_init, CosineSchedule::new(cfg.learning_rate, cfg.phase1_steps as u64));
            let bin_cfg = BinLearnConfig {
                steps: cfg.phase1_steps,
                batch_size: batch,
                learning_rate: cfg.bin_learning_rate,
                history: cfg.bin_history,
                objective: cfg.bin_objective,
            };
            let mut learner = BinLearner::new(BinSpec::uniform(&bounds, cfg.bins, schedule.tau_start)?, schedule, &bin_cfg)?;
            let (bx, bp) = buffer.contents();
            learner.extend_history(&bx, &positive_column(&bp))?;
            for step in 0..cfg.phase1_steps {
                if !has_budget(cfg, &oracle, batch) {
                    partial = true;
                    break;
                }
                let z = GeneratorNet::noise(batch, &mut rng.noise);
                let mut tape = Tape::new();
                let (x, fwd) = gen.net.forward_on_tape(&mut tape, &z)?;
                let xv = tape.value(x).clone();
                let (ph, probs) = if oracle.is_differentiable() {
                    let ph = phase1_loss(&mut tape, x, &trainer.net, TeacherSignal::Recorded(&oracle), cfg.phase1)?;
                    let pt = ph.teacher_probs.expect("recorded teacher");
                    let probs = clamp_probs(tape.value(pt));
                    (ph, probs)
                } else {
                    let probs = oracle.predict_batch(&xv)?;
                    let ph = phase1_loss(&mut tape, x, &trainer.net, TeacherSignal::Values(&probs), cfg.phase1)?;
                    (ph, probs)
                };
                gen.step(
                    &mut tape,
                    ph.loss,
                    &fwd,
                    &[("class_div", ph.class_div), ("teacher_entropy", ph.teacher_entropy)],
                )?;
                bin_log.push(learner.step(&xv, &positive_column(&probs))?);
                if let Some(log) = samples.as_mut() {
                    log.append(step as u64, Phase::Boundary, &xv, &probs)?;
                }
                if cfg.replay_boundary_queries {
                    buffer.push_batch(&xv, &probs)?;
                }
                if cfg.coverage_includes_early {
                    early.push(xv);
                }
            }
            (learner.finish()?, gen.net)
        }
    };
    let boundary_steps = bin_log.len();

    // adversarial distillation
    let mut tracker = CoverageTracker::for_spec(&spec);
    for x in &early {
        tracker.record_batch(&spec, x, 0)?;
    }
    let gen_net = if cfg.warm_start_generator {
        phase1_gen
    } else {
        GeneratorNet::new(&bounds, &mut rng.init)
    };
    let mut gen = GeneratorTrainer::new(
        gen_net,
        CosineSchedule::new(cfg.learning_rate, (cfg.phase2_steps * cfg.generator_steps_per_iter) as u64),
    );
    trainer.reset_optimizer(CosineSchedule::new(
        cfg.learning_rate,
        (cfg.phase2_steps * cfg.student_steps_per_iter) as u64,
    ));
    let mut adv_pool = ReplayBuffer::new(usize::MAX, f);
    let mut checkpoints = Vec::new();
    let (mut g_loss, mut div, mut hard, mut s_loss) = (None, None, None, None);
    for step in 1..=cfg.phase2_steps {
        if partial || !has_budget(cfg, &oracle, batch) {
            partial = true;
            break;
        }
        let mut batch_x = None;
        let mut batch_t = None;
        for g in 0..cfg.generator_steps_per_iter {
            let z = GeneratorNet::noise(batch, &mut rng.noise);
            let mut tape = Tape::new();
            let (x, fwd) = gen.net.forward_on_tape(&mut tape, &z)?;
            let xv = tape.value(x).clone();
            // extra generator steps reuse the first batch's labels only
            // through fresh queries
            if g > 0 && !has_budget(cfg, &oracle, batch) {
                break;
            }
            let t = oracle.predict_batch(&xv)?;
            let ph = phase2_loss(&mut tape, x, &spec, &trainer.net, &t, cfg.phase2)?;
            g_loss = Some(gen.step(
                &mut tape,
                ph.loss,
                &fwd,
                &[("diversity", ph.diversity), ("hardness", ph.hardness)],
            )?);
            div = Some(ph.diversity);
            hard = Some(ph.hardness);
            tracker.record_batch(&spec, &xv, step as u64)?;
            if let Some(log) = samples.as_mut() {
                log.append(step as u64, Phase::Adversarial, &xv, &t)?;
            }
            adv_pool.push_batch(&xv, &t)?;
            if batch_x.is_none() {
                batch_x = Some(xv);
                batch_t = Some(t);
            }
        }
        let (bx, bt) = (batch_x.expect("one batch"), batch_t.expect("one batch"));
        s_loss = Some(trainer.student_step(&bx, &bt, &buffer, &mut rng.replay)?);
        for _ in 1..cfg.student_steps_per_iter {
            let (px, pt) = adv_pool.sample(adversarial_count(batch), &mut rng.replay)?;
            s_loss = Some(trainer.student_step(&pad(&px, batch), &pad(&pt, batch), &buffer, &mut rng.replay)?);
        }
        if step % cfg.checkpoint_every == 0 || step == cfg.phase2_steps {
            checkpoints.push(Checkpoint {
                step,
                queries: oracle.queries(),
                coverage: tracker.coverage_fraction(),
                metrics: evaluator.eval(&trainer.net)?,
                generator_loss: g_loss,
                diversity: div,
                hardness: hard,
                student_loss: s_loss,
            });
        }
    }

    let final_metrics = evaluator.eval(&trainer.net)?;
    if checkpoints.last().is_none_or(|c: &Checkpoint| c.metrics != final_metrics) {
        let step = checkpoints.last().map_or(0, |c| c.step);
        if checkpoints.last().is_none_or(|c| c.step != step || step == 0) {
            checkpoints.push(Checkpoint {
                step,
                queries: oracle.queries(),
                coverage: tracker.coverage_fraction(),
                metrics: final_metrics,
                generator_loss: g_loss,
                diversity: div,
                hardness: hard,
                student_loss: s_loss,
            });
        }
    }
    let method = match cfg.binning {
        BinningMode::Dynamic => "distill",
        BinningMode::Static => "distill_static",
    };
    let method = match cfg.budget {
        Some(b) => format!("{method}-budget{b}"),
        None => method.to_string(),
    };
    let record = RunRecord {
        dataset: ds.meta.name.clone(),
        family,
        method,
        seed,
        config: cfg.clone(),
        checkpoints,
        final_metrics,
        coverage: tracker.coverage_fraction(),
        queries: oracle.queries(),
        partial,
        boundary_steps,
        warmup_losses,
        bin_log,
        boundaries: spec.boundaries().to_vec(),
        input_hash: inputs.content_hash()?,
    };
    info!(
        "{} {} seed {seed}: agreement {:.4} accuracy {:.4} coverage {:.4} queries {}",
        record.dataset, record.method, final_metrics.agreement, final_metrics.accuracy, record.coverage, record.queries
    );
    if let Some(dir) = out {
        if let Some(log) = samples {
            log.finish()?;
        }
        spec.save(&dir.join("binspec.json"))?;
        trainer.net.save(&dir.join("student.json"))?;
        write_run_files(dir, &record)?;
    }
    Ok(record)
}

/// Repeats the last row until `n` rows; used to fill a student minibatch
/// before the replay share is appended.
fn pad(t: &Tensor, n: usize) -> Tensor {
    if t.rows() >= n || t.rows() == 0 {
        return t.clone();
    }
    let mut data = t.data().to_vec();
    let last = t.row_slice(t.rows() - 1).to_vec();
    for _ in t.rows()..n {
        data.extend_from_slice(&last);
    }
    Tensor::new(n, t.cols(), data).expect("pad shape")
}

/// Uniform (or entropy-selected) queries under a fixed budget, with the
/// student trained on everything queried so far between query rounds.
pub fn run_baseline(
    inputs: RunInputs<'_>,
    cfg: &RunConfig,
    seed: u64,
    strategy: BaselineStrategy,
    out: Option<&Path>,
) -> Result<RunRecord> {
    cfg.validate()?;
    let ds = inputs.dataset;
    let f = ds.n_features();
    let family = inputs.teacher.family();
    let schedule = cfg.schedule_for(family);
    let bounds = FeatureBox::symmetric(f, cfg.box_radius);
    let oracle = TeacherOracle::new(inputs.teacher.clone());
    let evaluator = Evaluator::new(inputs)?;
    let mut rng = Streams::new(seed);
    let batch = cfg.batch_size;
    let budget = cfg.budget.unwrap_or(BASELINE_BUDGET);
    let per_round = match strategy {
        BaselineStrategy::Random => batch,
        BaselineStrategy::EntropyGuided => batch * cfg.entropy_pool_factor,
    } as u64;
    // the last round takes whatever budget is left
    let mut plan = vec![per_round; (budget / per_round) as usize];
    if budget % per_round > 0 {
        plan.push(budget % per_round);
    }
    let rounds = plan.len();
    if rounds == 0 {
        return Err(Error::InvalidArgument("baseline budget must be positive".into()));
    }
    let total_steps = cfg.baseline_student_steps.unwrap_or_else(|| cfg.student_steps());
    let checkpoint_every = (rounds / 20).max(1);

    if let Some(dir) = out {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut samples = match (out, cfg.write_samples) {
        (Some(dir), true) => Some(SampleLog::create(&dir.join("samples.csv.gz"), f)?),
        _ => None,
    };

    let student = StudentNet::new(f, &mut rng.init);
    let mut trainer = StudentTrainer::new(
        student,
        CosineSchedule::new(cfg.learning_rate, total_steps as u64),
        schedule.t_distill,
        cfg.kl_direction,
    );
    let spec = {
        let mut s = static_uniform_bins(&bounds, cfg.bins)?;
        s.set_temperature(schedule.tau_phase2)?;
        s
    };
    let mut tracker = CoverageTracker::for_spec(&spec);
    let mut pool = ReplayBuffer::new(usize::MAX, f);
    let mut checkpoints = Vec::new();
    let mut s_loss = None;
    for (round, &n) in plan.iter().enumerate() {
        let x = bounds.sample_uniform(n as usize, &mut rng.warmup);
        let t = oracle.predict_batch(&x)?;
        tracker.record_batch(&spec, &x, round as u64 + 1)?;
        if let Some(log) = samples.as_mut() {
            log.append(round as u64 + 1, Phase::Baseline, &x, &t)?;
        }
        match strategy {
            BaselineStrategy::Random => pool.push_batch(&x, &t)?,
            BaselineStrategy::EntropyGuided => {
                let keep = (n as usize).div_ceil(cfg.entropy_pool_factor);
                let (kx, kt) = select_top_entropy(&x, &t, keep)?;
                pool.push_batch(&kx, &kt)?;
            }
        }
        let steps = (round + 1) * total_steps / rounds - round * total_steps / rounds;
        for _ in 0..steps {
            let (px, pt) = pool.sample(batch, &mut rng.replay)?;
            s_loss = Some(trainer.fit_batch(&px, &pt, schedule.t_distill)?);
        }
        let step = round + 1;
        if step % checkpoint_every == 0 || step == rounds {
            checkpoints.push(Checkpoint {
                step,
                queries: oracle.queries(),
                coverage: tracker.coverage_fraction(),
                metrics: evaluator.eval(&trainer.net)?,
                generator_loss: None,
                diversity: None,
                hardness: None,
                student_loss: s_loss,
            });
        }
    }
    let final_metrics = evaluator.eval(&trainer.net)?;
    let record = RunRecord {
        dataset: ds.meta.name.clone(),
        family,
        method: strategy.tag().into(),
        seed,
        config: cfg.clone(),
        checkpoints,
        final_metrics,
        coverage: tracker.coverage_fraction(),
        queries: oracle.queries(),
        partial: false,
        boundary_steps: 0,
        warmup_losses: Vec::new(),
        bin_log: Vec::new(),
        boundaries: spec.boundaries().to_vec(),
        input_hash: inputs.content_hash()?,
    };
    info!(
        "{} {} seed {seed}: agreement {:.4} accuracy {:.4} queries {}",
        record.dataset,
        strategy.tag(),
        final_metrics.agreement,
        final_metrics.accuracy,
        record.queries
    );
    if let Some(dir) = out {
        if let Some(log) = samples {
            log.finish()?;
        }
        trainer.net.save(&dir.join("student.json"))?;
        write_run_files(dir, &record)?;
    }
    Ok(record)
}

/// Binary entropy in nats of each row of a `[N, 2]` probability table.
pub fn row_entropy(probs: &Tensor) -> Vec<f64> {
    (0..probs.rows())
        .map(|r| {
            -(0..2)
                .map(|c| {
                    let v = probs.get(r, c).max(crate::coverage::ENTROPY_FLOOR);
                    v * v.ln()
                })
                .sum::<f64>()
        })
        .collect()
}

/// The `n` rows with the highest teacher entropy, in their original order.
pub fn select_top_entropy(x: &Tensor, probs: &Tensor, n: usize) -> Result<(Tensor, Tensor)> {
    if x.rows() != probs.rows() {
        return Err(Error::shape("select_top_entropy", x.shape(), probs.shape()));
    }
    let ent = row_entropy(probs);
    let mut order: Vec<usize> = (0..x.rows()).collect();
    order.sort_by(|&a, &b| ent[b].total_cmp(&ent[a]).then(a.cmp(&b)));
    order.truncate(n);
    order.sort_unstable();
    let pick = |t: &Tensor| {
        let data = order.iter().flat_map(|&i| t.row_slice(i).iter().copied()).collect();
        Tensor::new(order.len(), t.cols(), data)
    };
    Ok((pick(x)?, pick(probs)?))
}

/// What to run for each seed.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Method {
    Distill,
    Baseline(BaselineStrategy),
}

/// Runs every seed of `cfg` in parallel and writes per-seed directories and
/// an aggregate under `out`.
pub fn run_seeds(inputs: RunInputs<'_>, cfg: &RunConfig, method: Method, out: Option<&Path>) -> Result<Vec<RunRecord>> {
    let records: Result<Vec<RunRecord>> = cfg
        .seeds
        .par_iter()
        .map(|&seed| {
            let dir = out.map(|o| seed_dir(o, seed));
            match method {
                Method::Distill => run_distillation(inputs, cfg, seed, dir.as_deref()),
                Method::Baseline(s) => run_baseline(inputs, cfg, seed, s, dir.as_deref()),
            }
        })
        .collect();
    let records = records?;
    if let Some(dir) = out {
        write_final_csv(&dir.join("final.csv"), &records)?;
        write_summary_csv(&dir.join("summary.csv"), &records)?;
    }
    Ok(records)
}

/// Dynamic and static binning on identical seeds and teacher.
pub fn run_ablation(inputs: RunInputs<'_>, cfg: &RunConfig, out: Option<&Path>) -> Result<(Vec<RunRecord>, Vec<RunRecord>)> {
    let mut dynamic = cfg.clone();
    dynamic.binning = BinningMode::Dynamic;
    let mut fixed = cfg.clone();
    fixed.binning = BinningMode::Static;
    let d = run_seeds(inputs, &dynamic, Method::Distill, out.map(|o| o.join("dynamic")).as_deref())?;
    let s = run_seeds(inputs, &fixed, Method::Distill, out.map(|o| o.join("static")).as_deref())?;
    if let Some(dir) = out {
        write_ablation_csv(&dir.join("ablation.csv"), &d, &s)?;
    }
    Ok((d, s))
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "NA".into(), fmt)
}

fn fmt(v: f64) -> String {
    if v.is_nan() {
        "NA".into()
    } else {
        format!("{v:.6}")
    }
}

fn create(path: &Path) -> Result<fs::File> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::File::create(path).map_err(|e| Error::io(path, e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    create(path)?.write_all(text.as_bytes()).map_err(|e| Error::io(path, e))
}

pub const METRICS_HEADER: &str =
    "step,queries,coverage,agreement,accuracy,f1,auc,generator_loss,diversity,hardness,student_loss";

/// Checkpoint stream of one run.
pub fn metrics_csv(record: &RunRecord) -> String {
    let mut s = String::from(METRICS_HEADER);
    s.push('\n');
    for c in &record.checkpoints {
        s.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{},{}\n",
            c.step,
            c.queries,
            fmt(c.coverage),
            fmt(c.metrics.agreement),
            fmt(c.metrics.accuracy),
            fmt(c.metrics.f1),
            fmt_opt(c.metrics.auc),
            fmt_opt(c.generator_loss),
            fmt_opt(c.diversity),
            fmt_opt(c.hardness),
            fmt_opt(c.student_loss),
        ));
    }
    s
}

pub const FINAL_HEADER: &str = "dataset,teacher,method,seed,accuracy,f1,auc,agreement,coverage,queries,partial";

fn final_row(r: &RunRecord) -> String {
    format!(
        "{},{},{},{},{},{},{},{},{},{},{}\n",
        r.dataset,
        r.family,
        r.method,
        r.seed,
        fmt(r.final_metrics.accuracy),
        fmt(r.final_metrics.f1),
        fmt_opt(r.final_metrics.auc),
        fmt(r.final_metrics.agreement),
        fmt(r.coverage),
        r.queries,
        r.partial
    )
}

pub fn write_final_csv(path: &Path, records: &[RunRecord]) -> Result<()> {
    let mut s = String::from(FINAL_HEADER);
    s.push('\n');
    for r in records {
        s.push_str(&final_row(r));
    }
    write_text(path, &s)
}

pub const SUMMARY_HEADER: &str = "dataset,teacher,method,metric,mean,std,runs";

/// Mean and population standard deviation over seeds, per metric.
pub fn summary_rows(records: &[RunRecord]) -> Vec<(String, String, String, &'static str, f64, f64, usize)> {
    let mut keys: Vec<(String, String, String)> = Vec::new();
    for r in records {
        let k = (r.dataset.clone(), r.family.to_string(), r.method.clone());
        if !keys.contains(&k) {
            keys.push(k);
        }
    }
    let mut rows = Vec::new();
    for (d, t, m) in keys {
        let group: Vec<&RunRecord> = records
            .iter()
            .filter(|r| r.dataset == d && r.family.to_string() == t && r.method == m)
            .collect();
        let cols: [(&'static str, fn(&RunRecord) -> Option<f64>); 5] = [
            ("accuracy", |r| Some(r.final_metrics.accuracy)),
            ("f1", |r| Some(r.final_metrics.f1)),
            ("auc", |r| r.final_metrics.auc),
            ("agreement", |r| Some(r.final_metrics.agreement)),
            ("coverage", |r| Some(r.coverage)),
        ];
        for (name, get) in cols {
            // undefined values are skipped; `runs` counts the rest
            let v: Vec<f64> = group.iter().filter_map(|r| get(r)).collect();
            let (mean, std) = metrics::mean_std(&v);
            rows.push((d.clone(), t.clone(), m.clone(), name, mean, std, v.len()));
        }
    }
    rows
}

pub fn write_summary_csv(path: &Path, records: &[RunRecord]) -> Result<()> {
    let mut s = String::from(SUMMARY_HEADER);
    s.push('\n');
    for (d, t, m, name, mean, std, n) in summary_rows(records) {
        s.push_str(&format!("{d},{t},{m},{name},{},{},{n}\n", fmt(mean), fmt(std)));
    }
    write_text(path, &s)
}

pub const ABLATION_HEADER: &str = "dataset,teacher,dynamic_accuracy,static_accuracy,dynamic_agreement,static_agreement";

fn write_ablation_csv(path: &Path, dynamic: &[RunRecord], fixed: &[RunRecord]) -> Result<()> {
    let mean = |rs: &[RunRecord], g: fn(&EvalMetrics) -> f64| {
        metrics::mean_std(&rs.iter().map(|r| g(&r.final_metrics)).collect::<Vec<_>>()).0
    };
    let (Some(first), true) = (dynamic.first(), !fixed.is_empty()) else {
        return Err(Error::InvalidArgument("ablation needs runs in both modes".into()));
    };
    let s = format!(
        "{ABLATION_HEADER}\n{},{},{},{},{},{}\n",
        first.dataset,
        first.family,
        fmt(mean(dynamic, |m| m.accuracy)),
        fmt(mean(fixed, |m| m.accuracy)),
        fmt(mean(dynamic, |m| m.agreement)),
        fmt(mean(fixed, |m| m.agreement)),
    );
    write_text(path, &s)
}

#[derive(Serialize)]
struct RunMeta<'a> {
    tool_version: &'static str,
    dataset: &'a str,
    teacher: TeacherFamily,
    method: &'a str,
    seed: u64,
    input_sha256: &'a str,
    queries: u64,
    partial: bool,
    boundary_steps: usize,
    boundaries: &'a [Vec<f64>],
    config: &'a RunConfig,
}

fn write_run_files(dir: &Path, r: &RunRecord) -> Result<()> {
    write_text(&dir.join("metrics.csv"), &metrics_csv(r))?;
    write_final_csv(&dir.join("final.csv"), std::slice::from_ref(r))?;
    let meta = RunMeta {
        tool_version: env!("CARGO_PKG_VERSION"),
        dataset: &r.dataset,
        teacher: r.family,
        method: &r.method,
        seed: r.seed,
        input_sha256: &r.input_hash,
        queries: r.queries,
        partial: r.partial,
        boundary_steps: r.boundary_steps,
        boundaries: &r.boundaries,
        config: &r.config,
    };
    write_text(&dir.join("run-meta.json"), &serde_json::to_string_pretty(&meta)?)?;
    write_text(&dir.join("record.json"), &serde_json::to_string(r)?)
}

pub fn load_record(path: &Path) -> Result<RunRecord> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_query_plan() {
        let c = RunConfig::default();
        assert_eq!(c.planned_queries(), 80_640);
        assert_eq!(c.warmup_queries(), 3_840);
        let s = RunConfig {
            binning: BinningMode::Static,
            ..RunConfig::default()
        };
        assert_eq!(s.planned_queries(), (30 + 400) * 128);
    }

    #[test]
    fn budget_matching_spends_the_budget() {
        let c = RunConfig::default().budget_matched(BASELINE_BUDGET).unwrap();
        assert_eq!(c.planned_queries(), BASELINE_BUDGET);
        assert!(c.student_steps() >= RunConfig::default().student_steps());
        assert!(c.schedule.is_none());
        for fam in [TeacherFamily::Mlp, TeacherFamily::RandomForest, TeacherFamily::Gbdt] {
            let s = c.schedule_for(fam);
            assert_eq!(s.phase1_steps, c.phase1_steps);
            assert_eq!(s.tau_start, TemperatureSchedule::for_family(fam, 1).tau_start);
        }
    }

    #[test]
    fn config_file_overrides_defaults() {
        let c = RunConfig::from_toml("dataset = \"mushroom\"\nbins = 4\n[phase2]\nlambda_cov = 1.0\nlambda_hard = 2.0\n").unwrap();
        assert_eq!(c.bins, 4);
        assert_eq!(c.phase2.lambda_cov, 1.0);
        assert_eq!(c.phase1_steps, 200);
        assert!(RunConfig::from_toml("bogus = 1").is_err());
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let mut c = RunConfig::default();
        c.budget = Some(100);
        assert!(c.validate().is_err());
        let mut c = RunConfig::default();
        c.phase2.lambda_hard = -1.0;
        assert!(c.validate().is_err());
    }
}
