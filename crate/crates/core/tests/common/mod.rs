//! Shared oracles: central finite differences for every differentiable
//! operation and a brute-force recount of pairwise bin coverage.
#![allow(dead_code)]

use std::collections::HashSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use tabdistill::binning::{bin_loss, soft_membership_on_tape, BinObjective, BinSpec, BinWeighting};
use tabdistill::coverage::{diversity_loss, diversity_loss_on_tape, pair_joint_on_tape, CoverageTracker};
use tabdistill::data::FeatureBox;
use tabdistill::generator::{hardness_loss, phase1_loss, phase2_loss, GenPhase1Config, GenPhase2Config, TeacherSignal};
use tabdistill::nn::{BatchNorm, Mlp, Params};
use tabdistill::student::{distill_loss_on_tape, KlDirection, StudentNet};
use tabdistill::teachers::{cross_entropy, TeacherModel, TeacherOracle};
use tabdistill::tensor::{Tape, Tensor, Var};

pub const INSTANCES: usize = 20;
pub const ELEMENTARY_TOL: f64 = 1e-4;
pub const COMPOSITE_TOL: f64 = 1e-3;

/// Worst relative gradient error of one operation over its instances.
#[derive(Debug)]
pub struct GradCheck {
    pub name: &'static str,
    pub worst: f64,
    pub tol: f64,
}

impl GradCheck {
    pub fn passed(&self) -> bool {
        self.worst < self.tol
    }
}

/// Records a scalar loss from `inputs`; returns the tape, the loss and the
/// vars whose gradients correspond to the leading `inputs`, in order.
/// Inputs past the returned vars are data and are not differentiated.
type Build<'a> = dyn Fn(&[Tensor]) -> (Tape, Var, Vec<Var>) + 'a;

/// `|g_tape - g_fd| / max(|g_tape|, |g_fd|)` in the Euclidean norm over all
/// input entries, with central differences of step `1e-6 * max(1, |x|)`.
pub fn relative_error(inputs: &[Tensor], build: &Build<'_>) -> f64 {
    let (mut tape, loss, vars) = build(inputs);
    tape.backward(loss).expect("backward");
    let mut analytic = Vec::new();
    for (v, x) in vars.iter().zip(inputs) {
        match tape.grad(*v) {
            Some(g) => analytic.extend_from_slice(g.data()),
            None => analytic.extend(std::iter::repeat_n(0.0, x.len())),
        }
    }
    let value = |xs: &[Tensor]| {
        let (t, l, _) = build(xs);
        t.value(l).item()
    };
    let mut numeric = Vec::with_capacity(analytic.len());
    let mut work = inputs.to_vec();
    for i in 0..vars.len() {
        for j in 0..inputs[i].len() {
            let x0 = inputs[i].data()[j];
            let h = 1e-6 * x0.abs().max(1.0);
            work[i].data_mut()[j] = x0 + h;
            let up = value(&work);
            work[i].data_mut()[j] = x0 - h;
            let down = value(&work);
            work[i].data_mut()[j] = x0;
            numeric.push((up - down) / (2.0 * h));
        }
    }
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: Vec<f64> = analytic.iter().zip(&numeric).map(|(a, n)| a - n).collect();
    norm(&diff) / norm(&analytic).max(norm(&numeric)).max(1e-10)
}

fn uniform(rng: &mut ChaCha8Rng, r: usize, c: usize, lo: f64, hi: f64) -> Tensor {
    Tensor::new(r, c, (0..r * c).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}

/// Entries uniform in `[lo, hi]` with magnitude at least `gap`, away from a
/// kink at zero.
fn away_from_zero(rng: &mut ChaCha8Rng, r: usize, c: usize, gap: f64) -> Tensor {
    Tensor::new(
        r,
        c,
        (0..r * c)
            .map(|_| {
                let v: f64 = rng.random_range(gap..2.0);
                if rng.random_bool(0.5) { v } else { -v }
            })
            .collect(),
    )
    .unwrap()
}

fn probs(rng: &mut ChaCha8Rng, n: usize) -> Tensor {
    let mut d = Vec::with_capacity(2 * n);
    for _ in 0..n {
        let p: f64 = rng.random_range(0.05..0.95);
        d.extend([1.0 - p, p]);
    }
    Tensor::new(n, 2, d).unwrap()
}

/// Fixed, non-constant weighting that turns any output into a scalar.
fn reduce(tape: &mut Tape, out: Var) -> Var {
    let (r, c) = (tape.value(out).rows(), tape.value(out).cols());
    let w = Tensor::new(
        r,
        c,
        (0..r * c).map(|i| 0.3 + 0.7 * (1.3 * i as f64 + 0.1).sin()).collect(),
    )
    .unwrap();
    let w = tape.constant(w);
    let m = tape.mul(out, w).unwrap();
    tape.sum(m)
}

fn params(inputs: &[Tensor]) -> (Tape, Vec<Var>) {
    let mut tape = Tape::new();
    let vars = inputs.iter().map(|x| tape.param(x.clone())).collect();
    (tape, vars)
}

/// Elementary op: every input is a parameter and the output is reduced by
/// [`reduce`].
fn op(f: impl Fn(&mut Tape, &[Var]) -> Var) -> impl Fn(&[Tensor]) -> (Tape, Var, Vec<Var>) {
    move |inputs| {
        let (mut tape, vars) = params(inputs);
        let out = f(&mut tape, &vars);
        let loss = reduce(&mut tape, out);
        (tape, loss, vars)
    }
}

fn run(
    name: &'static str,
    tol: f64,
    gen: impl Fn(&mut ChaCha8Rng) -> Vec<Tensor>,
    build: &Build<'_>,
) -> GradCheck {
    let mut worst: f64 = 0.0;
    for i in 0..INSTANCES {
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + i as u64);
        let inputs = gen(&mut rng);
        let e = relative_error(&inputs, build);
        worst = worst.max(if e.is_nan() { f64::INFINITY } else { e });
    }
    GradCheck { name, worst, tol }
}

pub fn elementary_checks() -> Vec<GradCheck> {
    let t = ELEMENTARY_TOL;
    let two = |r, c| move |g: &mut ChaCha8Rng| vec![uniform(g, r, c, -2.0, 2.0), uniform(g, r, c, -2.0, 2.0)];
    let one = |r, c| move |g: &mut ChaCha8Rng| vec![uniform(g, r, c, -2.0, 2.0)];
    vec![
        run("add", t, two(3, 4), &op(|t, v| t.add(v[0], v[1]).unwrap())),
        run(
            "add_broadcast_row",
            t,
            |g| vec![uniform(g, 3, 4, -2.0, 2.0), uniform(g, 1, 4, -2.0, 2.0)],
            &op(|t, v| t.add(v[0], v[1]).unwrap()),
        ),
        run("sub", t, two(3, 4), &op(|t, v| t.sub(v[0], v[1]).unwrap())),
        run(
            "sub_broadcast_col",
            t,
            |g| vec![uniform(g, 3, 4, -2.0, 2.0), uniform(g, 3, 1, -2.0, 2.0)],
            &op(|t, v| t.sub(v[0], v[1]).unwrap()),
        ),
        run("mul", t, two(3, 4), &op(|t, v| t.mul(v[0], v[1]).unwrap())),
        run(
            "div",
            t,
            |g| vec![uniform(g, 3, 4, -2.0, 2.0), uniform(g, 3, 4, 0.5, 2.0)],
            &op(|t, v| t.div(v[0], v[1]).unwrap()),
        ),
        run(
            "matmul",
            t,
            |g| vec![uniform(g, 3, 4, -2.0, 2.0), uniform(g, 4, 2, -2.0, 2.0)],
            &op(|t, v| t.matmul(v[0], v[1]).unwrap()),
        ),
        run("scale", t, one(3, 4), &op(|t, v| t.scale(v[0], -1.7))),
        run("neg", t, one(3, 4), &op(|t, v| t.neg(v[0]))),
        run("add_scalar", t, one(3, 4), &op(|t, v| t.add_scalar(v[0], 0.3))),
        run("relu", t, |g| vec![away_from_zero(g, 3, 4, 0.05)], &op(|t, v| t.relu(v[0]))),
        run("tanh", t, one(3, 4), &op(|t, v| t.tanh(v[0]))),
        run("sigmoid", t, one(3, 4), &op(|t, v| t.sigmoid(v[0]))),
        run("ln", t, |g| vec![uniform(g, 3, 4, 0.3, 3.0)], &op(|t, v| t.ln(v[0]))),
        run("exp", t, one(3, 4), &op(|t, v| t.exp(v[0]))),
        run("square", t, one(3, 4), &op(|t, v| t.square(v[0]).unwrap())),
        run(
            "clamp_min",
            t,
            |g| vec![away_from_zero(g, 3, 4, 0.05)],
            &op(|t, v| t.clamp_min(v[0], 0.0)),
        ),
        run("softmax", t, one(3, 4), &op(|t, v| t.softmax(v[0], 0.7).unwrap())),
        run(
            "dropout",
            t,
            one(3, 4),
            &op(|t, v| {
                let mut rng = ChaCha8Rng::seed_from_u64(5);
                t.dropout(v[0], 0.7, true, &mut rng)
            }),
        ),
        run("sum_rows", t, one(3, 4), &op(|t, v| t.sum_rows(v[0]))),
        run("sum_cols", t, one(3, 4), &op(|t, v| t.sum_cols(v[0]))),
        run("mean_rows", t, one(3, 4), &op(|t, v| t.mean_rows(v[0]))),
        run("mean_cols", t, one(3, 4), &op(|t, v| t.mean_cols(v[0]))),
        run("sum", t, one(3, 4), &op(|t, v| t.sum(v[0]))),
        run("mean", t, one(3, 4), &op(|t, v| t.mean(v[0]))),
        run("reshape", t, one(3, 4), &op(|t, v| t.reshape(v[0], 2, 6).unwrap())),
    ]
}

const F: usize = 3;
const K: usize = 3;

fn random_spec(rng: &mut ChaCha8Rng, frozen: bool) -> BinSpec {
    let bx = FeatureBox::symmetric(F, 2.0);
    let mut s = BinSpec::uniform(&bx, K, 0.5).unwrap();
    s.set_raw(uniform(rng, F, K, -0.8, 0.8)).unwrap();
    if frozen {
        s.freeze(0.5).unwrap();
    }
    s
}

fn mlp_teacher(seed: u64) -> TeacherOracle {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    TeacherOracle::new(TeacherModel::Mlp {
        network: Mlp::new(&[F, 8, 2], 0.0, &mut rng),
    })
}

fn student(seed: u64) -> StudentNet {
    StudentNet::new(F, &mut ChaCha8Rng::seed_from_u64(seed))
}

pub fn composite_checks() -> Vec<GradCheck> {
    let t = COMPOSITE_TOL;
    let spec = random_spec(&mut ChaCha8Rng::seed_from_u64(77), true);
    let student = student(3);
    let teacher = mlp_teacher(4);
    let fixed_probs = probs(&mut ChaCha8Rng::seed_from_u64(9), 6);
    let x_gen = |g: &mut ChaCha8Rng| vec![uniform(g, 6, F, -2.0, 2.0)];

    let mut out = vec![
        run(
            "soft_membership",
            t,
            |g| {
                let s = random_spec(g, false);
                vec![uniform(g, 5, F, -2.5, 2.5), s.boundary_tensor()]
            },
            &op(|t, v| soft_membership_on_tape(t, v[0], v[1], K, 0.4).unwrap()),
        ),
        run(
            "boundaries_from_gap_logits",
            t,
            |g| vec![uniform(g, F, K, -1.0, 1.0)],
            &|inputs: &[Tensor]| {
                let mut s = BinSpec::uniform(&FeatureBox::symmetric(F, 2.0), K, 0.5).unwrap();
                s.set_raw(inputs[0].clone()).unwrap();
                let mut tape = Tape::new();
                let (raw, b) = s.boundaries_on_tape(&mut tape).unwrap();
                let loss = reduce(&mut tape, b);
                (tape, loss, vec![raw])
            },
        ),
        run(
            "diversity_loss",
            t,
            x_gen,
            &|inputs: &[Tensor]| {
                let (mut tape, vars) = params(inputs);
                let b = tape.constant(spec.boundary_tensor());
                let m = soft_membership_on_tape(&mut tape, vars[0], b, K, 0.5).unwrap();
                let j = pair_joint_on_tape(&mut tape, m, K).unwrap();
                let loss = diversity_loss_on_tape(&mut tape, j);
                (tape, loss, vars)
            },
        ),
        run(
            "phase1_loss",
            t,
            x_gen,
            &|inputs: &[Tensor]| {
                let (mut tape, vars) = params(inputs);
                let cfg = GenPhase1Config { lambda_div: 1.3, lambda_boundary: 0.7 };
                let l = phase1_loss(&mut tape, vars[0], &student, TeacherSignal::Recorded(&teacher), cfg).unwrap();
                (tape, l.loss, vars)
            },
        ),
        run(
            "phase2_loss",
            t,
            x_gen,
            &|inputs: &[Tensor]| {
                let (mut tape, vars) = params(inputs);
                let cfg = GenPhase2Config { lambda_cov: 10.0, lambda_hard: 2.0 };
                let l = phase2_loss(&mut tape, vars[0], &spec, &student, &fixed_probs, cfg).unwrap();
                (tape, l.loss, vars)
            },
        ),
        run(
            "hardness_loss",
            t,
            |g| vec![uniform(g, 6, 2, -2.0, 2.0)],
            &|inputs: &[Tensor]| {
                let (mut tape, vars) = params(inputs);
                let s = tape.softmax(vars[0], 1.0).unwrap();
                let loss = hardness_loss(&mut tape, s, &fixed_probs).unwrap();
                (tape, loss, vars)
            },
        ),
        run(
            "batch_norm",
            t,
            |g| {
                vec![
                    uniform(g, 6, 4, -2.0, 2.0),
                    uniform(g, 1, 4, 0.5, 1.5),
                    uniform(g, 1, 4, -0.5, 0.5),
                ]
            },
            &|inputs: &[Tensor]| {
                let mut tape = Tape::new();
                let h = tape.param(inputs[0].clone());
                let bn = BatchNorm { gamma: inputs[1].clone(), beta: inputs[2].clone() };
                let (y, [g, b]) = bn.forward_on_tape(&mut tape, h, Params::Trainable).unwrap();
                let loss = reduce(&mut tape, y);
                (tape, loss, vec![h, g, b])
            },
        ),
        run(
            "cross_entropy",
            t,
            |g| vec![uniform(g, 6, 2, -2.0, 2.0)],
            &|inputs: &[Tensor]| {
                let (mut tape, vars) = params(inputs);
                let loss = cross_entropy(&mut tape, vars[0], &[0, 1, 1, 0, 1, 0]).unwrap();
                (tape, loss, vars)
            },
        ),
    ];
    for (name, w) in [("bin_loss_mass", BinWeighting::Mass), ("bin_loss_uniform", BinWeighting::Uniform)] {
        let obj = BinObjective { lambda_intra: 1.0, lambda_inter: 0.5, weighting: w };
        out.push(run(
            name,
            t,
            |g| {
                let x = uniform(g, 16, F, -2.0, 2.0);
                let p = Tensor::column((0..16).map(|_| g.random_range(0.0..1.0)).collect());
                vec![uniform(g, F, K, -0.8, 0.8), x, p]
            },
            &|inputs: &[Tensor]| {
                let mut s = BinSpec::uniform(&FeatureBox::symmetric(F, 2.0), K, 0.5).unwrap();
                s.set_raw(inputs[0].clone()).unwrap();
                let mut tape = Tape::new();
                let (raw, b) = s.boundaries_on_tape(&mut tape).unwrap();
                let x = tape.param(inputs[1].clone());
                let m = soft_membership_on_tape(&mut tape, x, b, K, 0.5).unwrap();
                let parts = bin_loss(&mut tape, m, inputs[2].data(), K, obj).unwrap();
                (tape, parts.loss, vec![raw, x])
            },
        ));
    }
    for (name, dir) in [
        ("distill_loss_student_teacher", KlDirection::StudentTeacher),
        ("distill_loss_teacher_student", KlDirection::TeacherStudent),
    ] {
        out.push(run(
            name,
            t,
            |g| vec![uniform(g, 6, 2, -2.0, 2.0)],
            &|inputs: &[Tensor]| {
                let (mut tape, vars) = params(inputs);
                let s = tape.softmax(vars[0], 1.0).unwrap();
                let loss = distill_loss_on_tape(&mut tape, s, &fixed_probs, 2.0, dir).unwrap();
                (tape, loss, vars)
            },
        ));
    }
    out
}

/// Bin index of `v` among sorted `edges`, counted directly.
fn bin_of(v: f64, edges: &[f64]) -> usize {
    edges.iter().filter(|&&e| e <= v).count()
}

/// Cells recounted from scratch after every batch.
fn brute_force(spec: &BinSpec, rows: &[Vec<f64>]) -> f64 {
    let f = spec.n_features();
    let k = spec.k();
    let mut cells = HashSet::new();
    for row in rows {
        for i in 0..f {
            for j in i + 1..f {
                let a = bin_of(row[i], &spec.boundaries()[i]);
                let b = bin_of(row[j], &spec.boundaries()[j]);
                cells.insert((i, j, a, b));
            }
        }
    }
    let total = f * (f - 1) / 2 * k * k;
    if total == 0 {
        0.0
    } else {
        cells.len() as f64 / total as f64
    }
}

/// Runs 50 random batches against [`CoverageTracker`]; returns the number
/// of batches whose coverage differs from the recount.
pub fn coverage_mismatches() -> usize {
    let mut bad = 0;
    for b in 0..50u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(b);
        let f = rng.random_range(2..=5);
        let k = rng.random_range(2..=4);
        let bx = FeatureBox::symmetric(f, 2.0);
        let mut spec = BinSpec::uniform(&bx, k, 1.0).unwrap();
        spec.set_raw(uniform(&mut rng, f, k, -1.5, 1.5)).unwrap();
        spec.freeze(0.1).unwrap();
        let mut tracker = CoverageTracker::for_spec(&spec);
        let mut seen = Vec::new();
        // a few sub-batches so cumulative counting is exercised
        for step in 0..3 {
            let n = rng.random_range(1..40);
            let x = uniform(&mut rng, n, f, -2.5, 2.5);
            for r in 0..n {
                seen.push(x.row_slice(r).to_vec());
            }
            let got = tracker.record_batch(&spec, &x, step).unwrap();
            if got != brute_force(&spec, &seen) {
                bad += 1;
            }
        }
    }
    bad
}

/// Largest `|diversity(uniform joint) + 2 ln K|` over `K` in 2..=8.
pub fn uniform_diversity_error() -> f64 {
    (2..=8usize)
        .map(|k| {
            let joint = Tensor::filled(3, k * k, 1.0 / (k * k) as f64);
            (diversity_loss(&joint) + 2.0 * (k as f64).ln()).abs()
        })
        .fold(0.0, f64::max)
}

pub const XOR_THRESHOLDS: [f64; 2] = [0.4, -0.7];
pub const RECOVERY_TOL: f64 = 0.15;

/// Two-bin boundaries learned against `(x0 > 0.4) XOR (x1 > -0.7)` from
/// uniform samples on `[-3, 3]^2`.
pub fn learned_xor_boundaries(seed: u64) -> [f64; 2] {
    use tabdistill::binning::{learn_bins, BinLearnConfig, TemperatureSchedule};
    use tabdistill::teachers::{RuleTeacher, TeacherFamily, Threshold};

    let rule = RuleTeacher::xor(
        2,
        Threshold { feature: 0, threshold: XOR_THRESHOLDS[0] },
        Threshold { feature: 1, threshold: XOR_THRESHOLDS[1] },
        30.0,
    );
    let bx = FeatureBox::symmetric(2, 3.0);
    let teacher = TeacherOracle::new(TeacherModel::Rule(rule));
    let cfg = BinLearnConfig::default();
    let sched = TemperatureSchedule::for_family(TeacherFamily::Rule, cfg.steps);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (spec, _) = learn_bins(
        BinSpec::uniform(&bx, 2, sched.tau_start).unwrap(),
        |_| Ok(bx.sample_uniform(cfg.batch_size, &mut rng)),
        &teacher,
        sched,
        &cfg,
        None,
    )
    .unwrap();
    [spec.boundaries()[0][0], spec.boundaries()[1][0]]
}
