//! CSV ingestion, ordinal encoding, standard scaling and stratified splits.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use log::warn;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Label given to missing categorical cells.
pub const MISSING_CATEGORY: &str = "<missing>";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ColumnKind {
    Numeric,
    Categorical,
}

/// Key-value description of one dataset file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Schema {
    pub name: String,
    pub target: String,
    /// Target value mapped to label 1.
    pub positive_label: String,
    #[serde(default = "default_kind")]
    pub default_kind: ColumnKind,
    /// Per-column overrides of `default_kind`.
    #[serde(default)]
    pub kinds: BTreeMap<String, ColumnKind>,
    /// Columns dropped before encoding (row ids and the like).
    #[serde(default)]
    pub ignore: Vec<String>,
    #[serde(default = "default_missing")]
    pub missing_tokens: Vec<String>,
    /// Target values that denote the same class, e.g. `">50K." = ">50K"`.
    #[serde(default)]
    pub target_aliases: BTreeMap<String, String>,
    /// Download location for `fetch`.
    #[serde(default)]
    pub source_url: Option<String>,
    #[serde(default)]
    pub content_length: Option<u64>,
    /// Header written in front of a fetched file that has none.
    #[serde(default)]
    pub header: Option<Vec<String>>,
}

fn default_kind() -> ColumnKind {
    ColumnKind::Numeric
}

fn default_missing() -> Vec<String> {
    vec![String::new(), "?".into(), "NA".into()]
}

impl Schema {
    pub fn from_toml(text: &str) -> Result<Self> {
        Ok(toml::from_str(text)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn kind_of(&self, column: &str) -> ColumnKind {
        self.kinds.get(column).copied().unwrap_or(self.default_kind)
    }

    fn is_missing(&self, cell: &str) -> bool {
        self.missing_tokens.iter().any(|t| t == cell)
    }
}

/// Feature columns as strings, with the target split off.
#[derive(Clone, Debug, PartialEq)]
pub struct RawTable {
    pub feature_names: Vec<String>,
    pub kinds: Vec<ColumnKind>,
    /// `None` marks a missing cell.
    pub rows: Vec<Vec<Option<String>>>,
    pub targets: Vec<String>,
    pub target_name: String,
    pub positive_label: String,
    /// Rows discarded because the target was missing.
    pub dropped_rows: usize,
}

impl RawTable {
    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }
}

pub fn load_csv(path: &Path, schema: &Schema) -> Result<RawTable> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_csv(file, path, schema)
}

/// Parses RFC-4180 CSV with a header row.
pub fn read_csv<R: std::io::Read>(reader: R, path: &Path, schema: &Schema) -> Result<RawTable> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(reader);
    let csv_err = |row: usize, message: String| Error::Csv {
        path: path.to_path_buf(),
        row,
        message,
    };
    let header: Vec<String> = rdr
        .headers()
        .map_err(|e| csv_err(1, e.to_string()))?
        .iter()
        .map(str::to_string)
        .collect();
    let target_idx = header
        .iter()
        .position(|h| h == &schema.target)
        .ok_or_else(|| csv_err(1, format!("target column `{}` not in header", schema.target)))?;
    let keep: Vec<usize> = (0..header.len())
        .filter(|&i| i != target_idx && !schema.ignore.contains(&header[i]))
        .collect();

    let mut rows = Vec::new();
    let mut targets = Vec::new();
    let mut dropped = 0;
    for (i, record) in rdr.records().enumerate() {
        // header is line 1
        let line = i + 2;
        let record = record.map_err(|e| csv_err(line, e.to_string()))?;
        if record.len() == 1 && record.get(0) == Some("") {
            continue;
        }
        if record.len() != header.len() {
            return Err(csv_err(
                line,
                format!("expected {} cells, found {}", header.len(), record.len()),
            ));
        }
        let target = &record[target_idx];
        if schema.is_missing(target) {
            dropped += 1;
            continue;
        }
        let target = schema
            .target_aliases
            .get(target)
            .cloned()
            .unwrap_or_else(|| target.to_string());
        targets.push(target);
        rows.push(
            keep.iter()
                .map(|&c| {
                    let cell = &record[c];
                    (!schema.is_missing(cell)).then(|| cell.to_string())
                })
                .collect(),
        );
    }

    let distinct: BTreeSet<&String> = targets.iter().collect();
    if distinct.len() != 2 {
        return Err(Error::Data(format!(
            "{}: target `{}` must have exactly 2 classes, found {:?}",
            path.display(),
            schema.target,
            distinct
        )));
    }
    if !distinct.contains(&schema.positive_label) {
        return Err(Error::Data(format!(
            "positive label `{}` not among target values {:?}",
            schema.positive_label, distinct
        )));
    }

    let feature_names: Vec<String> = keep.iter().map(|&c| header[c].clone()).collect();
    let kinds = feature_names.iter().map(|n| schema.kind_of(n)).collect();
    Ok(RawTable {
        feature_names,
        kinds,
        rows,
        targets,
        target_name: schema.target.clone(),
        positive_label: schema.positive_label.clone(),
        dropped_rows: dropped,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scaler {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Scaler {
    pub fn scale(&self, row: &[f64]) -> Vec<f64> {
        row.iter()
            .zip(self.mean.iter().zip(&self.std))
            .map(|(v, (m, s))| (v - m) / s)
            .collect()
    }

    pub fn unscale(&self, row: &[f64]) -> Vec<f64> {
        row.iter()
            .zip(self.mean.iter().zip(&self.std))
            .map(|(v, (m, s))| v * s + m)
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Split {
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub name: String,
    pub feature_names: Vec<String>,
    pub kinds: Vec<ColumnKind>,
    /// Sorted category names for categorical columns; code = index.
    pub categories: Vec<Option<Vec<String>>>,
    pub scaler: Scaler,
    /// Columns whose training variance was zero; they are scaled by 1.
    pub zero_variance: Vec<bool>,
    pub split: Split,
    pub positive_label: String,
    pub seed: u64,
}

/// Standardized features with binary labels and a fixed split.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    /// `[N, F]`, standardized with training-split statistics.
    pub x: Tensor,
    pub y: Vec<u8>,
    pub meta: DatasetMeta,
}

impl Dataset {
    pub fn n_features(&self) -> usize {
        self.x.cols()
    }

    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    pub fn feature_names(&self) -> &[String] {
        &self.meta.feature_names
    }

    pub fn split(&self) -> &Split {
        &self.meta.split
    }

    pub fn rows(&self, idx: &[usize]) -> Tensor {
        let f = self.n_features();
        let mut data = Vec::with_capacity(idx.len() * f);
        for &i in idx {
            data.extend_from_slice(self.x.row_slice(i));
        }
        Tensor::new(idx.len(), f, data).expect("shape")
    }

    pub fn labels(&self, idx: &[usize]) -> Vec<u8> {
        idx.iter().map(|&i| self.y[i]).collect()
    }

    pub fn train_x(&self) -> Tensor {
        self.rows(&self.meta.split.train)
    }

    pub fn train_y(&self) -> Vec<u8> {
        self.labels(&self.meta.split.train)
    }

    pub fn test_x(&self) -> Tensor {
        self.rows(&self.meta.split.test)
    }

    pub fn test_y(&self) -> Vec<u8> {
        self.labels(&self.meta.split.test)
    }

    /// Builds a dataset from already-standardized values, e.g. synthetic data.
    pub fn from_standardized(name: &str, x: Tensor, y: Vec<u8>, seed: u64) -> Result<Self> {
        if x.rows() != y.len() {
            return Err(Error::shape("from_standardized", x.shape(), &[y.len()]));
        }
        let f = x.cols();
        let split = stratified_split(&y, 0.8, seed);
        Ok(Dataset {
            meta: DatasetMeta {
                name: name.into(),
                feature_names: (0..f).map(|i| format!("x{i}")).collect(),
                kinds: vec![ColumnKind::Numeric; f],
                categories: vec![None; f],
                scaler: Scaler {
                    mean: vec![0.0; f],
                    std: vec![1.0; f],
                },
                zero_variance: vec![false; f],
                split,
                positive_label: "1".into(),
                seed,
            },
            x,
            y,
        })
    }

    /// Writes `X.csv`, `y.csv` and `meta.json` into `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let xp = dir.join("X.csv");
        let mut w = csv::Writer::from_path(&xp).map_err(|e| csv_write_err(&xp, e))?;
        w.write_record(&self.meta.feature_names)
            .map_err(|e| csv_write_err(&xp, e))?;
        for r in 0..self.x.rows() {
            w.write_record(self.x.row_slice(r).iter().map(|v| format!("{v:?}")))
                .map_err(|e| csv_write_err(&xp, e))?;
        }
        w.flush().map_err(|e| Error::io(&xp, e))?;

        let yp = dir.join("y.csv");
        let mut w = csv::Writer::from_path(&yp).map_err(|e| csv_write_err(&yp, e))?;
        w.write_record(["y"]).map_err(|e| csv_write_err(&yp, e))?;
        for v in &self.y {
            w.write_record([v.to_string()])
                .map_err(|e| csv_write_err(&yp, e))?;
        }
        w.flush().map_err(|e| Error::io(&yp, e))?;

        let mp = dir.join("meta.json");
        fs::write(&mp, serde_json::to_string_pretty(&self.meta)?).map_err(|e| Error::io(&mp, e))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let mp = dir.join("meta.json");
        let meta: DatasetMeta =
            serde_json::from_str(&fs::read_to_string(&mp).map_err(|e| Error::io(&mp, e))?)?;
        let f = meta.feature_names.len();

        let xp = dir.join("X.csv");
        let mut data = Vec::new();
        let mut rdr = csv::Reader::from_path(&xp).map_err(|e| csv_read_err(&xp, 1, e))?;
        for (i, rec) in rdr.records().enumerate() {
            let rec = rec.map_err(|e| csv_read_err(&xp, i + 2, e))?;
            if rec.len() != f {
                return Err(Error::Csv {
                    path: xp.clone(),
                    row: i + 2,
                    message: format!("expected {f} cells, found {}", rec.len()),
                });
            }
            for cell in rec.iter() {
                data.push(parse_f64(cell).ok_or_else(|| Error::Csv {
                    path: xp.clone(),
                    row: i + 2,
                    message: format!("not a number: `{cell}`"),
                })?);
            }
        }
        let yp = dir.join("y.csv");
        let mut y = Vec::new();
        let mut rdr = csv::Reader::from_path(&yp).map_err(|e| csv_read_err(&yp, 1, e))?;
        for (i, rec) in rdr.records().enumerate() {
            let rec = rec.map_err(|e| csv_read_err(&yp, i + 2, e))?;
            y.push(match rec.get(0) {
                Some("0") => 0,
                Some("1") => 1,
                other => {
                    return Err(Error::Csv {
                        path: yp.clone(),
                        row: i + 2,
                        message: format!("label must be 0 or 1, got {other:?}"),
                    })
                }
            });
        }
        let x = Tensor::new(y.len(), f, data)?;
        Ok(Dataset { x, y, meta })
    }
}

fn csv_write_err(path: &Path, e: csv::Error) -> Error {
    Error::Csv {
        path: path.to_path_buf(),
        row: 0,
        message: e.to_string(),
    }
}

fn csv_read_err(path: &Path, row: usize, e: csv::Error) -> Error {
    Error::Csv {
        path: path.to_path_buf(),
        row,
        message: e.to_string(),
    }
}

fn parse_f64(s: &str) -> Option<f64> {
    s.trim().parse::<f64>().ok().filter(|v| v.is_finite())
}

/// Per-class seeded shuffle; each class contributes `round(frac * n_c)` rows
/// to the training split. Index lists are returned sorted.
pub fn stratified_split(y: &[u8], train_frac: f64, seed: u64) -> Split {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut train = Vec::new();
    let mut test = Vec::new();
    for class in [0u8, 1] {
        let mut idx: Vec<usize> = (0..y.len()).filter(|&i| y[i] == class).collect();
        idx.shuffle(&mut rng);
        let n_train = (train_frac * idx.len() as f64).round() as usize;
        train.extend_from_slice(&idx[..n_train]);
        test.extend_from_slice(&idx[n_train..]);
    }
    train.sort_unstable();
    test.sort_unstable();
    Split { train, test }
}

fn median(values: &mut [f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    values.sort_by(f64::total_cmp);
    let n = values.len();
    Some(if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    })
}

/// Ordinal-encodes categoricals (sorted category names), imputes numeric
/// gaps with the training median, then standardizes with training statistics.
pub fn encode_and_scale(raw: &RawTable, name: &str, seed: u64) -> Result<Dataset> {
    let n = raw.len();
    let f = raw.feature_names.len();
    if n == 0 {
        return Err(Error::Data("table has no rows".into()));
    }
    let y: Vec<u8> = raw
        .targets
        .iter()
        .map(|t| u8::from(t == &raw.positive_label))
        .collect();
    let split = stratified_split(&y, 0.8, seed);

    let mut columns: Vec<Vec<f64>> = Vec::with_capacity(f);
    let mut categories = Vec::with_capacity(f);
    for c in 0..f {
        match raw.kinds[c] {
            ColumnKind::Categorical => {
                let names: BTreeSet<&str> = raw
                    .rows
                    .iter()
                    .map(|r| r[c].as_deref().unwrap_or(MISSING_CATEGORY))
                    .collect();
                let names: Vec<String> = names.into_iter().map(str::to_string).collect();
                let col = raw
                    .rows
                    .iter()
                    .map(|r| {
                        let v = r[c].as_deref().unwrap_or(MISSING_CATEGORY);
                        names.binary_search_by(|s| s.as_str().cmp(v)).expect("present") as f64
                    })
                    .collect();
                columns.push(col);
                categories.push(Some(names));
            }
            ColumnKind::Numeric => {
                let mut col = Vec::with_capacity(n);
                for (i, r) in raw.rows.iter().enumerate() {
                    col.push(match &r[c] {
                        None => f64::NAN,
                        Some(s) => parse_f64(s).ok_or_else(|| {
                            Error::Data(format!(
                                "row {} column `{}`: not a number: `{s}`",
                                i + 2,
                                raw.feature_names[c]
                            ))
                        })?,
                    });
                }
                let mut observed: Vec<f64> = split
                    .train
                    .iter()
                    .map(|&i| col[i])
                    .filter(|v| !v.is_nan())
                    .collect();
                let fill = median(&mut observed).unwrap_or(0.0);
                for v in &mut col {
                    if v.is_nan() {
                        *v = fill;
                    }
                }
                columns.push(col);
                categories.push(None);
            }
        }
    }

    let mut mean = vec![0.0; f];
    let mut std = vec![1.0; f];
    let mut zero_variance = vec![false; f];
    let nt = split.train.len() as f64;
    for c in 0..f {
        let m = split.train.iter().map(|&i| columns[c][i]).sum::<f64>() / nt;
        let var = split
            .train
            .iter()
            .map(|&i| (columns[c][i] - m).powi(2))
            .sum::<f64>()
            / nt;
        mean[c] = m;
        if var.sqrt() > 1e-12 {
            std[c] = var.sqrt();
        } else {
            warn!("column `{}` has zero variance; scaling by 1", raw.feature_names[c]);
            zero_variance[c] = true;
        }
    }

    let mut data = Vec::with_capacity(n * f);
    for i in 0..n {
        for c in 0..f {
            data.push((columns[c][i] - mean[c]) / std[c]);
        }
    }
    Ok(Dataset {
        x: Tensor::new(n, f, data)?,
        y,
        meta: DatasetMeta {
            name: name.into(),
            feature_names: raw.feature_names.clone(),
            kinds: raw.kinds.clone(),
            categories,
            scaler: Scaler { mean, std },
            zero_variance,
            split,
            positive_label: raw.positive_label.clone(),
            seed,
        },
    })
}

/// Per-feature sampling interval in standardized units.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureBox {
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
}

impl FeatureBox {
    pub fn symmetric(n_features: usize, radius: f64) -> Self {
        FeatureBox {
            lo: vec![-radius; n_features],
            hi: vec![radius; n_features],
        }
    }

    pub fn new(lo: Vec<f64>, hi: Vec<f64>) -> Result<Self> {
        if lo.len() != hi.len() {
            return Err(Error::shape("feature_box", &[lo.len()], &[hi.len()]));
        }
        if let Some(i) = (0..lo.len()).find(|&i| !(lo[i] < hi[i])) {
            return Err(Error::InvalidArgument(format!(
                "feature {i}: interval [{}, {}] is empty",
                lo[i], hi[i]
            )));
        }
        Ok(FeatureBox { lo, hi })
    }

    pub fn n_features(&self) -> usize {
        self.lo.len()
    }

    pub fn width(&self, f: usize) -> f64 {
        self.hi[f] - self.lo[f]
    }

    pub fn center(&self, f: usize) -> f64 {
        0.5 * (self.hi[f] + self.lo[f])
    }

    pub fn contains(&self, row: &[f64]) -> bool {
        row.iter()
            .enumerate()
            .all(|(f, &v)| v >= self.lo[f] && v <= self.hi[f])
    }

    /// `n` rows drawn uniformly from the box.
    pub fn sample_uniform<R: rand::Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Tensor {
        let f = self.n_features();
        let mut data = Vec::with_capacity(n * f);
        for _ in 0..n {
            for c in 0..f {
                data.push(rng.random_range(self.lo[c]..self.hi[c]));
            }
        }
        Tensor::new(n, f, data).expect("shape")
    }
}

/// `[-radius, radius]` for every feature of `ds`.
pub fn feature_box(ds: &Dataset, radius: f64) -> Result<FeatureBox> {
    if !(radius > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "box radius must be positive, got {radius}"
        )));
    }
    Ok(FeatureBox::symmetric(ds.n_features(), radius))
}

/// Reads a dataset from a CSV path plus schema.
pub fn prepare(csv_path: &Path, schema: &Schema, seed: u64) -> Result<Dataset> {
    let raw = load_csv(csv_path, schema)?;
    encode_and_scale(&raw, &schema.name, seed)
}

/// Resolves `<name>` to `<data_dir>/<name>.csv` and
/// `<data_dir>/schemas/<name>.toml`.
pub fn dataset_paths(data_dir: &Path, name: &str) -> (PathBuf, PathBuf) {
    (
        data_dir.join(format!("{name}.csv")),
        data_dir.join("schemas").join(format!("{name}.toml")),
    )
}

/// Downloads `schema.source_url` into `out`, checking the byte count when the
/// schema pins one, and prepends `schema.header` when given.
#[cfg(feature = "fetch")]
pub fn fetch(schema: &Schema, out: &Path) -> Result<u64> {
    use std::io::Read;

    let url = schema
        .source_url
        .as_deref()
        .ok_or_else(|| Error::Data(format!("schema `{}` has no source_url", schema.name)))?;
    let mut body = Vec::new();
    ureq::get(url)
        .call()
        .map_err(|e| Error::Network(format!("{url}: {e}")))?
        .into_body()
        .into_reader()
        .read_to_end(&mut body)
        .map_err(|e| Error::Network(format!("{url}: {e}")))?;
    if let Some(expected) = schema.content_length {
        if body.len() as u64 != expected {
            return Err(Error::Network(format!(
                "{url}: expected {expected} bytes, received {}",
                body.len()
            )));
        }
    }
    let mut content = Vec::with_capacity(body.len() + 256);
    if let Some(h) = &schema.header {
        content.extend_from_slice(h.join(",").as_bytes());
        content.push(b'\n');
    }
    content.extend_from_slice(&body);
    if let Some(dir) = out.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(out, &content).map_err(|e| Error::io(out, e))?;
    Ok(body.len() as u64)
}
