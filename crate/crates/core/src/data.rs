//! Datasets, the six simulation scenarios, splitting and CSV ingestion.

use std::collections::BTreeSet;
use std::f64::consts::PI;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::{Rng, RngExt};
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Result, XnnError};
use crate::model::LinkKind;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Regression,
    Classification,
}

impl Task {
    pub fn link(self) -> LinkKind {
        match self {
            Task::Regression => LinkKind::Identity,
            Task::Classification => LinkKind::Logit,
        }
    }
}

impl std::str::FromStr for Task {
    type Err = XnnError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "regression" => Ok(Task::Regression),
            "classification" => Ok(Task::Classification),
            other => Err(XnnError::Config(format!(
                "unknown task '{other}' (expected regression or classification)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitLabel {
    Train,
    Validation,
    Test,
}

/// How raw CSV columns map to model features. Stored with a trained model so
/// new files are encoded identically.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Encoding {
    pub numeric: Vec<String>,
    pub categorical: Vec<CategoricalColumn>,
    /// Per numeric column `(min, max)` mapped to `[-1, 1]`.
    pub scaling: Option<Vec<(f64, f64)>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CategoricalColumn {
    pub name: String,
    pub levels: Vec<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub x: DMatrix<f64>,
    pub y: DVector<f64>,
    pub task: Task,
    pub feature_names: Vec<String>,
    pub split: Vec<SplitLabel>,
    pub encoding: Option<Encoding>,
}

impl Dataset {
    pub fn new(x: DMatrix<f64>, y: DVector<f64>, task: Task) -> Result<Self> {
        let names = (1..=x.ncols()).map(|j| format!("x{j}")).collect();
        let ds = Self { split: vec![SplitLabel::Train; x.nrows()], x, y, task, feature_names: names, encoding: None };
        ds.validate()?;
        Ok(ds)
    }

    pub fn validate(&self) -> Result<()> {
        if self.x.nrows() != self.y.len() || self.split.len() != self.y.len() {
            return Err(XnnError::Shape(format!(
                "{} feature rows, {} responses, {} split labels",
                self.x.nrows(),
                self.y.len(),
                self.split.len()
            )));
        }
        if self.feature_names.len() != self.x.ncols() {
            return Err(XnnError::Shape("feature name count does not match columns".into()));
        }
        if self.task == Task::Classification && self.y.iter().any(|v| *v != 0.0 && *v != 1.0) {
            return Err(XnnError::Data("classification response must be 0 or 1".into()));
        }
        Ok(())
    }

    pub fn n(&self) -> usize {
        self.x.nrows()
    }

    pub fn p(&self) -> usize {
        self.x.ncols()
    }

    pub fn indices(&self, label: SplitLabel) -> Vec<usize> {
        self.split.iter().enumerate().filter(|(_, s)| **s == label).map(|(i, _)| i).collect()
    }

    /// Features and responses of one split.
    pub fn part(&self, label: SplitLabel) -> (DMatrix<f64>, DVector<f64>) {
        let idx = self.indices(label);
        (self.x.select_rows(idx.iter()), self.y.select_rows(idx.iter()))
    }

    pub fn with_label(mut self, label: SplitLabel) -> Self {
        self.split.iter_mut().for_each(|s| *s = label);
        self
    }

    /// Writes a header of feature names plus `y`, one row per sample.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        let mut header = self.feature_names.clone();
        header.push("y".into());
        w.write_record(&header)?;
        let mut row = Vec::with_capacity(self.p() + 1);
        for i in 0..self.n() {
            row.clear();
            row.extend(self.x.row(i).iter().map(|v| v.to_string()));
            row.push(self.y[i].to_string());
            w.write_record(&row)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// `x_j = (d_j + t s) / (1 + t)` with `d_j, s ~ Unif(-1, 1)`; pairwise
/// correlation `t^2 / (1 + t^2)`. Per row, the `p` values `d_j` are drawn
/// first, then `s`.
pub fn gen_features<R: Rng + ?Sized>(n: usize, p: usize, t: f64, rng: &mut R) -> DMatrix<f64> {
    let mut x = DMatrix::zeros(n, p);
    let mut d = vec![0.0; p];
    for i in 0..n {
        for dj in d.iter_mut() {
            *dj = rng.random_range(-1.0..1.0);
        }
        let s: f64 = rng.random_range(-1.0..1.0);
        for j in 0..p {
            x[(i, j)] = (d[j] + t * s) / (1.0 + t);
        }
    }
    x
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ScenarioId {
    S1,
    S2,
    S3,
    S4,
    S5,
    S6,
}

impl ScenarioId {
    pub const ALL: [ScenarioId; 6] = [Self::S1, Self::S2, Self::S3, Self::S4, Self::S5, Self::S6];

    pub fn index(self) -> u64 {
        self as u64 + 1
    }
}

impl std::fmt::Display for ScenarioId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "S{}", self.index())
    }
}

impl std::str::FromStr for ScenarioId {
    type Err = XnnError;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .iter()
            .copied()
            .find(|id| id.to_string().eq_ignore_ascii_case(s))
            .ok_or_else(|| XnnError::Config(format!("unknown scenario '{s}' (valid: S1, S2, S3, S4, S5, S6)")))
    }
}

pub const SCENARIO_P: usize = 10;

/// Ground truth of a simulation scenario.
#[derive(Debug, Clone, PartialEq)]
pub struct ScenarioSpec {
    pub id: ScenarioId,
    /// Projection indexes as printed, one column per additive component
    /// (S1 and S2 only). Not all columns are unit-norm.
    pub true_w: Option<DMatrix<f64>>,
    pub noise_sd: f64,
}

impl ScenarioSpec {
    pub fn new(id: ScenarioId) -> Self {
        let rows: Option<&[[f64; SCENARIO_P]]> = match id {
            ScenarioId::S1 => Some(&[
                [1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0],
                [0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0],
                [0.0, 0.0, 0.5, 0.5, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0],
                [0.0, 0.0, 0.0, 0.0, 0.2, 0.3, 0.5, 0.0, 0.0, 0.0],
            ]),
            ScenarioId::S2 => Some(&[
                [0.1, 0.9, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0],
                [0.0, 0.1, 0.9, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0],
                [0.0, 0.0, 0.1, 0.9, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0],
            ]),
            _ => None,
        };
        let true_w = rows.map(|r| DMatrix::from_fn(SCENARIO_P, r.len(), |i, j| r[j][i]));
        Self { id, true_w, noise_sd: 1.0 }
    }

    /// Unit-norm true projection directions (columns).
    pub fn true_directions(&self) -> Option<DMatrix<f64>> {
        self.true_w.as_ref().map(|w| {
            let mut d = w.clone();
            for mut c in d.column_iter_mut() {
                let n = c.norm();
                c /= n;
            }
            d
        })
    }

    /// Ridge function `h_j` of the additive scenarios.
    pub fn ridge(&self, j: usize, z: f64) -> f64 {
        match (self.id, j) {
            (ScenarioId::S1, 0) => 2.0 * z,
            (ScenarioId::S1, 1) => 0.2 * (-4.0 * z).exp(),
            (ScenarioId::S1, 2) => 3.0 * z * z,
            (ScenarioId::S1, 3) => 2.5 * (PI * z).sin(),
            (ScenarioId::S2, 0) => 0.5 * z,
            (ScenarioId::S2, 1) => {
                let s = (PI * z).sin();
                4.0 * s / (2.0 - s)
            }
            (ScenarioId::S2, 2) => -4.0 * (-z * z).exp(),
            _ => panic!("scenario {} has no ridge function {j}", self.id),
        }
    }

    /// Noiseless response at one feature vector.
    pub fn signal(&self, x: &[f64]) -> f64 {
        match self.id {
            ScenarioId::S1 | ScenarioId::S2 => {
                let w = self.true_w.as_ref().expect("additive scenario");
                let intercept = if self.id == ScenarioId::S2 { 3.0 } else { 0.0 };
                intercept
                    + (0..w.ncols())
                        .map(|j| {
                            let z: f64 = w.column(j).iter().zip(x).map(|(a, b)| a * b).sum();
                            self.ridge(j, z)
                        })
                        .sum::<f64>()
            }
            ScenarioId::S3 => (2.0 * (x[0] * x[1] + 2.0 * x[2] * x[3]).tanh()).exp(),
            ScenarioId::S4 => 3.0 * PI.powf(x[0] * x[1]) * (2.0 * (x[2] + 1.0)).sqrt(),
            ScenarioId::S5 => {
                let num = 2.0 * (x[2] + x[3] + x[4] + x[5]);
                let den = 0.5 + (1.5 + x[2] + x[4] - x[3] - x[5]).powi(2);
                x[0] - x[1] + num / den
            }
            ScenarioId::S6 => (0.5 * PI * (-x[0] + 2.0 * x[2] + x[3])).sin() * (0.5 * (x[1] + x[2] - x[3])).exp(),
        }
    }
}

/// Draws `n` samples of a scenario: correlated features (`t = 1`), then one
/// Gaussian noise draw per row.
pub fn scenario<R: Rng + ?Sized>(spec: &ScenarioSpec, n: usize, rng: &mut R) -> Result<Dataset> {
    if n == 0 {
        return Err(XnnError::Config("scenario size must be at least 1".into()));
    }
    let x = gen_features(n, SCENARIO_P, 1.0, rng);
    let y = DVector::from_fn(n, |i, _| {
        let row: Vec<f64> = x.row(i).iter().copied().collect();
        let eps: f64 = StandardNormal.sample(rng);
        spec.signal(&row) + spec.noise_sd * eps
    });
    Dataset::new(x, y, Task::Regression)
}

/// Uniformly permutes the rows and labels the first `floor(train_frac n)`
/// train, the next `floor(val_frac n)` validation and the rest test.
pub fn split<R: Rng + ?Sized>(mut ds: Dataset, train_frac: f64, val_frac: f64, rng: &mut R) -> Result<Dataset> {
    if !(train_frac > 0.0) || !(val_frac > 0.0) || train_frac + val_frac > 1.0 + 1e-12 {
        return Err(XnnError::Config(format!(
            "split fractions must be positive with sum <= 1, got {train_frac} and {val_frac}"
        )));
    }
    let n = ds.n();
    let n_train = (train_frac * n as f64).floor() as usize;
    let n_val = ((val_frac * n as f64).floor() as usize).min(n - n_train);
    if n_train == 0 || n_val == 0 {
        return Err(XnnError::Config(format!(
            "split of {n} rows leaves {n_train} training and {n_val} validation rows"
        )));
    }
    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(rng);
    for (rank, &row) in perm.iter().enumerate() {
        ds.split[row] = if rank < n_train {
            SplitLabel::Train
        } else if rank < n_train + n_val {
            SplitLabel::Validation
        } else {
            SplitLabel::Test
        };
    }
    Ok(ds)
}

/// Column roles for CSV ingestion. Columns not named as response or
/// categorical are numeric.
#[derive(Debug, Clone, PartialEq)]
pub struct CsvSchema {
    pub response: String,
    pub task: Task,
    pub categorical: Vec<String>,
    pub scale: bool,
}

impl CsvSchema {
    pub fn regression(response: &str) -> Self {
        Self { response: response.into(), task: Task::Regression, categorical: vec![], scale: false }
    }
}

struct RawTable {
    header: Vec<String>,
    rows: Vec<(usize, csv::StringRecord)>,
}

fn read_table(path: &Path) -> Result<RawTable> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_path(path)?;
    let header: Vec<String> = rdr.headers()?.iter().map(|h| h.trim().to_string()).collect();
    let mut rows = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        // Line numbers are 1-based and the header is line 1.
        rows.push((i + 2, rec?));
    }
    if rows.is_empty() {
        return Err(XnnError::Data(format!("{} has no data rows", path.display())));
    }
    Ok(RawTable { header, rows })
}

fn column(header: &[String], name: &str) -> Result<usize> {
    header
        .iter()
        .position(|h| h == name)
        .ok_or_else(|| XnnError::Data(format!("missing column '{name}'")))
}

/// Loads a CSV file, learning the encoding (one-hot levels and optional
/// min-max scaling) from the file itself.
pub fn load_csv(path: &Path, schema: &CsvSchema) -> Result<Dataset> {
    let table = read_table(path)?;
    let resp = column(&table.header, &schema.response)?;
    for c in &schema.categorical {
        column(&table.header, c)?;
    }
    let numeric: Vec<String> = table
        .header
        .iter()
        .filter(|h| **h != schema.response && !schema.categorical.contains(h))
        .cloned()
        .collect();
    let categorical = schema
        .categorical
        .iter()
        .map(|name| {
            let idx = column(&table.header, name).expect("checked");
            let levels: BTreeSet<String> = table.rows.iter().map(|(_, r)| r.get(idx).unwrap_or("").trim().to_string()).collect();
            CategoricalColumn { name: name.clone(), levels: levels.into_iter().collect() }
        })
        .collect();
    let mut encoding = Encoding { numeric, categorical, scaling: None };
    let mut ds = encode(&table, resp, schema.task, &encoding)?;
    if schema.scale {
        let n_num = encoding.numeric.len();
        let ranges: Vec<(f64, f64)> = (0..n_num)
            .map(|j| {
                let col = ds.x.column(j);
                (col.min(), col.max())
            })
            .collect();
        apply_scaling(&mut ds.x, &ranges);
        encoding.scaling = Some(ranges);
    }
    ds.encoding = Some(encoding);
    Ok(ds)
}

/// Loads a CSV file with a previously learned encoding.
pub fn load_csv_with(path: &Path, response: &str, task: Task, encoding: &Encoding) -> Result<Dataset> {
    let table = read_table(path)?;
    let resp = column(&table.header, response)?;
    let mut ds = encode(&table, resp, task, encoding)?;
    if let Some(ranges) = &encoding.scaling {
        apply_scaling(&mut ds.x, ranges);
    }
    ds.encoding = Some(encoding.clone());
    Ok(ds)
}

fn apply_scaling(x: &mut DMatrix<f64>, ranges: &[(f64, f64)]) {
    for (j, &(lo, hi)) in ranges.iter().enumerate() {
        let span = hi - lo;
        for v in x.column_mut(j).iter_mut() {
            *v = if span > 0.0 { 2.0 * (*v - lo) / span - 1.0 } else { 0.0 };
        }
    }
}

fn encode(table: &RawTable, resp: usize, task: Task, enc: &Encoding) -> Result<Dataset> {
    let num_idx: Vec<usize> = enc.numeric.iter().map(|n| column(&table.header, n)).collect::<Result<_>>()?;
    let cat_idx: Vec<usize> = enc.categorical.iter().map(|c| column(&table.header, &c.name)).collect::<Result<_>>()?;
    let mut names = enc.numeric.clone();
    for c in &enc.categorical {
        names.extend(c.levels.iter().map(|l| format!("{}={}", c.name, l)));
    }
    let p = names.len();
    let n = table.rows.len();
    let mut x = DMatrix::zeros(n, p);
    let mut y = DVector::zeros(n);
    let mut bad_lines = Vec::new();
    let mut bad_response = Vec::new();
    for (i, (line, rec)) in table.rows.iter().enumerate() {
        let mut ok = true;
        for (j, &c) in num_idx.iter().enumerate() {
            match rec.get(c).and_then(|s| s.trim().parse::<f64>().ok()) {
                Some(v) if v.is_finite() => x[(i, j)] = v,
                _ => ok = false,
            }
        }
        let mut offset = num_idx.len();
        for (cc, &c) in enc.categorical.iter().zip(&cat_idx) {
            let level = rec.get(c).unwrap_or("").trim();
            match cc.levels.iter().position(|l| l == level) {
                Some(pos) => x[(i, offset + pos)] = 1.0,
                None => ok = false,
            }
            offset += cc.levels.len();
        }
        match rec.get(resp).and_then(|s| s.trim().parse::<f64>().ok()) {
            Some(v) if v.is_finite() => {
                y[i] = v;
                if task == Task::Classification && v != 0.0 && v != 1.0 {
                    bad_response.push(*line);
                }
            }
            _ => ok = false,
        }
        if !ok {
            bad_lines.push(*line);
        }
    }
    if !bad_lines.is_empty() {
        return Err(XnnError::Data(format!("unparseable cells on lines {bad_lines:?}")));
    }
    if !bad_response.is_empty() {
        return Err(XnnError::Data(format!("non-binary classification response on lines {bad_response:?}")));
    }
    let ds = Dataset { x, y, task, feature_names: names, split: vec![SplitLabel::Train; n], encoding: None };
    ds.validate()?;
    Ok(ds)
}

/// Sidecar written next to generated scenario data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub scenario: ScenarioId,
    pub n: usize,
    pub seed: u64,
    pub train_frac: f64,
    pub val_frac: f64,
    pub noise_sd: f64,
    pub columns: Vec<String>,
}
