//! Teacher models behind one counted, black-box probability oracle.

mod forest;
mod gbdt;
mod mlp;
pub mod tree;

use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;
use std::sync::atomic::{AtomicU64, Ordering};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

pub use forest::{ForestConfig, RandomForest};
pub use gbdt::{Gbdt, GbdtConfig};
pub use mlp::{cross_entropy, train_mlp, MlpTrainConfig, MlpTrainReport};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::nn::{Mlp, Params};
use crate::tensor::{sigmoid, Tape, Tensor, Var};

/// Teacher probabilities are kept inside `[PROB_FLOOR, 1 - PROB_FLOOR]`.
pub const PROB_FLOOR: f64 = 1e-6;

pub const MODEL_FILE_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TeacherFamily {
    Mlp,
    RandomForest,
    Gbdt,
    /// Closed-form threshold rules used for controlled experiments.
    Rule,
}

impl TeacherFamily {
    pub fn tag(self) -> &'static str {
        match self {
            TeacherFamily::Mlp => "mlp",
            TeacherFamily::RandomForest => "random_forest",
            TeacherFamily::Gbdt => "gbdt",
            TeacherFamily::Rule => "rule",
        }
    }
}

impl fmt::Display for TeacherFamily {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

impl FromStr for TeacherFamily {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mlp" | "nn" => Ok(TeacherFamily::Mlp),
            "rf" | "random_forest" => Ok(TeacherFamily::RandomForest),
            "gbdt" | "xgboost" => Ok(TeacherFamily::Gbdt),
            "rule" => Ok(TeacherFamily::Rule),
            other => Err(Error::InvalidArgument(format!("unknown teacher family `{other}`"))),
        }
    }
}

/// `x[feature] > threshold`, softened by a logistic of the given sharpness.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Threshold {
    pub feature: usize,
    pub threshold: f64,
}

/// How clause outcomes combine into the label.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClauseCombine {
    /// Positive iff any clause holds.
    #[default]
    Any,
    /// Positive iff every clause holds.
    All,
}

/// A clause holds when an odd number of its thresholds are satisfied.
///
/// A single clause `[(0, 0.4), (1, -0.7)]` is `(x0 > 0.4) XOR (x1 > -0.7)`.
/// Each threshold is evaluated as `sigmoid(sharpness * (x - t))` and clauses
/// combine as independent events, so the rule is smooth but nearly hard for
/// large sharpness.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RuleTeacher {
    pub n_features: usize,
    pub clauses: Vec<Vec<Threshold>>,
    pub sharpness: f64,
    #[serde(default)]
    pub combine: ClauseCombine,
}

impl RuleTeacher {
    pub fn xor(n_features: usize, a: Threshold, b: Threshold, sharpness: f64) -> Self {
        RuleTeacher {
            n_features,
            clauses: vec![vec![a, b]],
            sharpness,
            combine: ClauseCombine::Any,
        }
    }

    /// Two off-center XOR clauses that must both hold. The first is the
    /// 2-feature rule `(x0 > 0.4) XOR (x1 > -0.7)`; about a third of
    /// standard-normal inputs are positive.
    pub fn unequal_regions(sharpness: f64) -> Self {
        let t = |feature, threshold| Threshold { feature, threshold };
        RuleTeacher {
            n_features: 4,
            clauses: vec![vec![t(0, 0.4), t(1, -0.7)], vec![t(2, -0.3), t(3, 0.9)]],
            sharpness,
            combine: ClauseCombine::All,
        }
    }

    pub fn predict_positive(&self, x: &[f64]) -> f64 {
        let odd = self.clauses.iter().map(|clause| {
            let prod: f64 = clause
                .iter()
                .map(|t| 1.0 - 2.0 * sigmoid(self.sharpness * (x[t.feature] - t.threshold)))
                .product();
            0.5 * (1.0 - prod)
        });
        match self.combine {
            ClauseCombine::Any => 1.0 - odd.map(|o| 1.0 - o).product::<f64>(),
            ClauseCombine::All => odd.product(),
        }
    }

    /// Hard label with the thresholds taken literally.
    pub fn label(&self, x: &[f64]) -> u8 {
        let holds = |clause: &Vec<Threshold>| clause.iter().filter(|t| x[t.feature] > t.threshold).count() % 2 == 1;
        u8::from(match self.combine {
            ClauseCombine::Any => self.clauses.iter().any(holds),
            ClauseCombine::All => self.clauses.iter().all(holds),
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case")]
pub enum TeacherModel {
    Mlp { network: Mlp },
    RandomForest(RandomForest),
    Gbdt(Gbdt),
    Rule(RuleTeacher),
}

impl TeacherModel {
    pub fn family(&self) -> TeacherFamily {
        match self {
            TeacherModel::Mlp { .. } => TeacherFamily::Mlp,
            TeacherModel::RandomForest(_) => TeacherFamily::RandomForest,
            TeacherModel::Gbdt(_) => TeacherFamily::Gbdt,
            TeacherModel::Rule(_) => TeacherFamily::Rule,
        }
    }

    pub fn n_features(&self) -> Option<usize> {
        match self {
            TeacherModel::Mlp { network } => Some(network.input_dim()),
            TeacherModel::Rule(r) => Some(r.n_features),
            TeacherModel::RandomForest(m) => m.n_features,
            TeacherModel::Gbdt(m) => m.n_features,
        }
    }

    fn positive(&self, x: &Tensor) -> Result<Vec<f64>> {
        Ok(match self {
            TeacherModel::Mlp { network } => {
                let p = network.predict_proba(x)?;
                (0..p.rows()).map(|r| p.get(r, 1)).collect()
            }
            TeacherModel::RandomForest(m) => {
                (0..x.rows()).map(|r| m.predict_positive(x.row_slice(r))).collect()
            }
            TeacherModel::Gbdt(m) => (0..x.rows()).map(|r| m.predict_positive(x.row_slice(r))).collect(),
            TeacherModel::Rule(m) => (0..x.rows()).map(|r| m.predict_positive(x.row_slice(r))).collect(),
        })
    }
}

/// On-disk container shared by teachers and students.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelFile<M> {
    pub format: String,
    pub version: u32,
    #[serde(flatten)]
    pub model: M,
}

/// Frozen teacher with an exact, thread-safe query counter.
#[derive(Debug)]
pub struct TeacherOracle {
    model: TeacherModel,
    queries: AtomicU64,
}

impl Clone for TeacherOracle {
    fn clone(&self) -> Self {
        TeacherOracle {
            model: self.model.clone(),
            queries: AtomicU64::new(self.queries()),
        }
    }
}

fn check_finite(x: &Tensor) -> Result<()> {
    for r in 0..x.rows() {
        if let Some(c) = x.row_slice(r).iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFiniteInput { row: r, col: c });
        }
    }
    Ok(())
}

impl TeacherOracle {
    pub fn new(model: TeacherModel) -> Self {
        TeacherOracle {
            model,
            queries: AtomicU64::new(0),
        }
    }

    pub fn model(&self) -> &TeacherModel {
        &self.model
    }

    pub fn family(&self) -> TeacherFamily {
        self.model.family()
    }

    /// Only the MLP teacher exposes input gradients.
    pub fn is_differentiable(&self) -> bool {
        self.family() == TeacherFamily::Mlp
    }

    pub fn queries(&self) -> u64 {
        self.queries.load(Ordering::SeqCst)
    }

    /// `[N, 2]` probabilities `(p0, p1)` with `p1` clamped to
    /// `[PROB_FLOOR, 1 - PROB_FLOOR]`. Counts `N` queries.
    pub fn predict_batch(&self, x: &Tensor) -> Result<Tensor> {
        if let Some(f) = self.model.n_features() {
            if x.rows() > 0 && x.cols() != f {
                return Err(Error::shape("teacher_predict", x.shape(), &[x.rows(), f]));
            }
        }
        check_finite(x)?;
        let pos = self.model.positive(x)?;
        self.queries.fetch_add(x.rows() as u64, Ordering::SeqCst);
        let mut data = Vec::with_capacity(pos.len() * 2);
        for p in pos {
            let p = p.clamp(PROB_FLOOR, 1.0 - PROB_FLOOR);
            data.push(1.0 - p);
            data.push(p);
        }
        Tensor::new(x.rows(), 2, data)
    }

    /// Hard labels by argmax. Counts `N` queries.
    pub fn predict_labels(&self, x: &Tensor) -> Result<Vec<u8>> {
        let p = self.predict_batch(x)?;
        Ok((0..p.rows()).map(|r| u8::from(p.get(r, 1) > p.get(r, 0))).collect())
    }

    /// Records the teacher's probabilities as a differentiable function of
    /// `x`. Counts `N` queries. Fails for non-differentiable families.
    pub fn forward_on_tape(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let TeacherModel::Mlp { network } = &self.model else {
            return Err(Error::NotDifferentiable(self.family().to_string()));
        };
        check_finite(tape.value(x))?;
        let n = tape.value(x).rows() as u64;
        let fwd = network.forward::<rand_chacha::ChaCha8Rng>(tape, x, Params::Frozen, None)?;
        let p = tape.softmax(fwd.output, 1.0)?;
        self.queries.fetch_add(n, Ordering::SeqCst);
        Ok(p)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = ModelFile {
            format: "tabdistill-teacher".into(),
            version: MODEL_FILE_VERSION,
            model: self.model.clone(),
        };
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        fs::write(path, serde_json::to_string(&file)?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let file: ModelFile<TeacherModel> = serde_json::from_str(&text)?;
        if file.version != MODEL_FILE_VERSION {
            return Err(Error::Format(format!(
                "{}: unsupported model file version {}",
                path.display(),
                file.version
            )));
        }
        Ok(TeacherOracle::new(file.model))
    }
}

/// Sharpens or softens probability rows as `p^(1/T) / sum_c p_c^(1/T)`.
pub fn temper(probs: &Tensor, temperature: f64) -> Tensor {
    let mut out = probs.clone();
    let cols = out.cols();
    for row in out.data_mut().chunks_mut(cols) {
        // log-domain for stability at small T
        let logs: Vec<f64> = row.iter().map(|p| p.max(1e-300).ln() / temperature).collect();
        let max = logs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = logs.iter().map(|l| (l - max).exp()).sum();
        for (v, l) in row.iter_mut().zip(&logs) {
            *v = (l - max).exp() / z;
        }
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TeacherReport {
    pub family: TeacherFamily,
    pub train_accuracy: f64,
    pub test_accuracy: f64,
    pub epochs_run: Option<usize>,
}

fn accuracy_of(oracle: &TeacherOracle, x: &Tensor, y: &[u8]) -> Result<f64> {
    if y.is_empty() {
        return Ok(f64::NAN);
    }
    let labels = oracle.predict_labels(x)?;
    Ok(labels.iter().zip(y).filter(|(a, b)| a == b).count() as f64 / y.len() as f64)
}

fn finish(model: TeacherModel, ds: &Dataset, epochs: Option<usize>) -> Result<(TeacherOracle, TeacherReport)> {
    let probe = TeacherOracle::new(model);
    let report = TeacherReport {
        family: probe.family(),
        train_accuracy: accuracy_of(&probe, &ds.train_x(), &ds.train_y())?,
        test_accuracy: accuracy_of(&probe, &ds.test_x(), &ds.test_y())?,
        epochs_run: epochs,
    };
    Ok((TeacherOracle::new(probe.model), report))
}

pub fn train_mlp_teacher(ds: &Dataset, cfg: &MlpTrainConfig, seed: u64) -> Result<(TeacherOracle, TeacherReport)> {
    let (network, rep) = train_mlp(&ds.train_x(), &ds.train_y(), cfg, seed)?;
    finish(TeacherModel::Mlp { network }, ds, Some(rep.epochs_run))
}

pub fn train_random_forest(ds: &Dataset, cfg: ForestConfig, seed: u64) -> Result<(TeacherOracle, TeacherReport)> {
    let m = RandomForest::fit(&ds.train_x(), &ds.train_y(), cfg, seed)?;
    finish(TeacherModel::RandomForest(m), ds, None)
}

pub fn train_gbdt(ds: &Dataset, cfg: GbdtConfig) -> Result<(TeacherOracle, TeacherReport)> {
    let m = Gbdt::fit(&ds.train_x(), &ds.train_y(), cfg)?;
    finish(TeacherModel::Gbdt(m), ds, None)
}

/// Trains a teacher of `family` with its default configuration.
pub fn train_teacher(ds: &Dataset, family: TeacherFamily, seed: u64) -> Result<(TeacherOracle, TeacherReport)> {
    match family {
        TeacherFamily::Mlp => train_mlp_teacher(ds, &MlpTrainConfig::default(), seed),
        TeacherFamily::RandomForest => train_random_forest(ds, ForestConfig::default(), seed),
        TeacherFamily::Gbdt => train_gbdt(ds, GbdtConfig::default()),
        TeacherFamily::Rule => Err(Error::InvalidArgument(
            "rule teachers are constructed, not trained".into(),
        )),
    }
}

/// `n` standard-normal rows labeled by the rule's hard thresholds, split
/// 80/20 like the real datasets.
pub fn synthetic_dataset(name: &str, rule: &RuleTeacher, n: usize, seed: u64) -> Result<Dataset> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let f = rule.n_features;
    let data: Vec<f64> = (0..n * f).map(|_| rng.sample(StandardNormal)).collect();
    let x = Tensor::new(n, f, data)?;
    let y = (0..n).map(|r| rule.label(x.row_slice(r))).collect();
    Dataset::from_standardized(name, x, y, seed)
}
