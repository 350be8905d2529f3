//! Labelled feature matrices: ingestion, persistence, scaling, splitting and
//! synthetic generation.

use std::collections::BTreeSet;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::io::write_atomic;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("label column {0} not found in header")]
    MissingLabelColumn(String),
    /// Row is 0-based over data rows (header excluded); column is 0-based in the file.
    #[error("non-numeric or non-finite cell at row {row}, column {col}")]
    NonNumericCell { row: usize, col: usize },
    #[error("label at row {0} is not 0 or 1")]
    NonBinaryLabel(usize),
    #[error("row {0} has a different number of cells than the header")]
    RaggedRow(usize),
    #[error("bad magic bytes in binary dataset")]
    BadMagic,
    #[error("unsupported binary dataset version {0}")]
    UnsupportedVersion(u32),
    #[error("dataset dimensions {n}x{m} overflow")]
    DimensionOverflow { n: u64, m: u64 },
    #[error("binary dataset is truncated: expected {expected} bytes, found {found}")]
    TruncatedFile { expected: u64, found: u64 },
    #[error("dimension mismatch: expected {expected} columns, found {found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("class {class} has {count} samples; at least 2 are needed for a stratified split")]
    ClassTooSmall { class: u8, count: usize },
    #[error("invalid dataset: {0}")]
    Invalid(String),
    #[error("invalid specification: {0}")]
    InvalidSpec(String),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, DatasetError>;

/// Dense row-major matrix of `f64`.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if rows.checked_mul(cols) != Some(data.len()) {
            return Err(DatasetError::Invalid(format!(
                "{} values cannot fill a {rows}x{cols} matrix",
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for (i, r) in rows.iter().enumerate() {
            if r.len() != cols {
                return Err(DatasetError::RaggedRow(i));
            }
            data.extend_from_slice(r);
        }
        Self::new(rows.len(), cols, data)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn iter_rows(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks_exact(self.cols.max(1)).take(self.rows)
    }

    pub fn column(&self, j: usize) -> Vec<f64> {
        (0..self.rows).map(|i| self.get(i, j)).collect()
    }

    pub fn select_rows(&self, idx: &[usize]) -> Matrix {
        let mut data = Vec::with_capacity(idx.len() * self.cols);
        for &i in idx {
            data.extend_from_slice(self.row(i));
        }
        Matrix { rows: idx.len(), cols: self.cols, data }
    }

    pub fn select_columns(&self, cols: &[usize]) -> Matrix {
        let mut data = Vec::with_capacity(self.rows * cols.len());
        for r in self.iter_rows() {
            data.extend(cols.iter().map(|&j| r[j]));
        }
        Matrix { rows: self.rows, cols: cols.len(), data }
    }
}

/// Feature matrix plus binary labels.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledDataset {
    features: Matrix,
    labels: Vec<u8>,
    feature_names: Option<Vec<String>>,
}

impl LabeledDataset {
    pub fn new(features: Matrix, labels: Vec<u8>, feature_names: Option<Vec<String>>) -> Result<Self> {
        if features.rows() != labels.len() {
            return Err(DatasetError::Invalid(format!(
                "{} feature rows but {} labels",
                features.rows(),
                labels.len()
            )));
        }
        if features.rows() == 0 || features.cols() == 0 {
            return Err(DatasetError::Invalid("dataset needs at least one row and one column".into()));
        }
        if let Some(i) = labels.iter().position(|&l| l > 1) {
            return Err(DatasetError::NonBinaryLabel(i));
        }
        if let Some(pos) = features.as_slice().iter().position(|v| !v.is_finite()) {
            return Err(DatasetError::NonNumericCell { row: pos / features.cols(), col: pos % features.cols() });
        }
        if let Some(names) = &feature_names {
            if names.len() != features.cols() {
                return Err(DatasetError::DimensionMismatch { expected: features.cols(), found: names.len() });
            }
        }
        Ok(Self { features, labels, feature_names })
    }

    pub fn n_samples(&self) -> usize {
        self.labels.len()
    }

    pub fn n_features(&self) -> usize {
        self.features.cols()
    }

    pub fn features(&self) -> &Matrix {
        &self.features
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn feature_names(&self) -> Option<&[String]> {
        self.feature_names.as_deref()
    }

    /// `(negatives, positives)`.
    pub fn class_counts(&self) -> (usize, usize) {
        let pos = self.labels.iter().filter(|&&l| l == 1).count();
        (self.labels.len() - pos, pos)
    }

    pub fn select_rows(&self, idx: &[usize]) -> Result<Self> {
        let labels = idx.iter().map(|&i| self.labels[i]).collect();
        Self::new(self.features.select_rows(idx), labels, self.feature_names.clone())
    }

    pub fn select_row_range(&self, start: usize, end: usize) -> Result<Self> {
        let idx: Vec<usize> = (start..end).collect();
        self.select_rows(&idx)
    }

    pub fn select_columns(&self, cols: &[usize]) -> Result<Self> {
        if let Some(&bad) = cols.iter().find(|&&j| j >= self.n_features()) {
            return Err(DatasetError::DimensionMismatch { expected: self.n_features(), found: bad + 1 });
        }
        let names = self
            .feature_names
            .as_ref()
            .map(|n| cols.iter().map(|&j| n[j].clone()).collect());
        Self::new(self.features.select_columns(cols), self.labels.clone(), names)
    }
}

/// How the label column of a CSV file is identified.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum LabelColumn {
    Name(String),
    Index(usize),
}

impl Default for LabelColumn {
    fn default() -> Self {
        LabelColumn::Name("label".to_string())
    }
}

impl std::fmt::Display for LabelColumn {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            LabelColumn::Name(n) => write!(f, "{n:?}"),
            LabelColumn::Index(i) => write!(f, "#{i}"),
        }
    }
}

pub fn load_csv(path: &Path, label: &LabelColumn) -> Result<LabeledDataset> {
    let file = fs::File::open(path)?;
    read_csv(file, label)
}

pub fn read_csv<R: std::io::Read>(reader: R, label: &LabelColumn) -> Result<LabeledDataset> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).flexible(true).from_reader(reader);
    let header: Vec<String> = rdr.headers()?.iter().map(|s| s.trim().to_string()).collect();
    let label_idx = match label {
        LabelColumn::Name(name) => header.iter().position(|h| h == name),
        LabelColumn::Index(i) => (*i < header.len()).then_some(*i),
    }
    .ok_or_else(|| DatasetError::MissingLabelColumn(label.to_string()))?;

    let names: Vec<String> = header
        .iter()
        .enumerate()
        .filter(|(j, _)| *j != label_idx)
        .map(|(_, h)| h.clone())
        .collect();
    let mut data = Vec::new();
    let mut labels = Vec::new();
    for (row, rec) in rdr.records().enumerate() {
        let rec = rec?;
        if rec.len() != header.len() {
            return Err(DatasetError::RaggedRow(row));
        }
        for (col, cell) in rec.iter().enumerate() {
            let cell = cell.trim();
            if col == label_idx {
                let l = match cell.parse::<f64>() {
                    Ok(0.0) => 0,
                    Ok(1.0) => 1,
                    _ => return Err(DatasetError::NonBinaryLabel(row)),
                };
                labels.push(l);
            } else {
                match cell.parse::<f64>() {
                    Ok(v) if v.is_finite() => data.push(v),
                    _ => return Err(DatasetError::NonNumericCell { row, col }),
                }
            }
        }
    }
    let features = Matrix::new(labels.len(), names.len(), data)?;
    LabeledDataset::new(features, labels, Some(names))
}

/// Writes features followed by a trailing `label` column. Unnamed features
/// are written as `f0, f1, ...`.
pub fn save_csv(ds: &LabeledDataset, path: &Path) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(Vec::new());
    let mut header: Vec<String> = match ds.feature_names() {
        Some(n) => n.to_vec(),
        None => (0..ds.n_features()).map(|j| format!("f{j}")).collect(),
    };
    header.push("label".into());
    wtr.write_record(&header)?;
    for (row, &l) in ds.features().iter_rows().zip(ds.labels()) {
        let mut rec: Vec<String> = row.iter().map(|v| v.to_string()).collect();
        rec.push(l.to_string());
        wtr.write_record(&rec)?;
    }
    let bytes = wtr.into_inner().map_err(|e| DatasetError::Io(e.into_error()))?;
    write_atomic(path, &bytes)?;
    Ok(())
}

pub const BINARY_MAGIC: [u8; 4] = *b"MLMD";
pub const BINARY_VERSION: u32 = 1;
const HEADER_LEN: u64 = 16;

/// Serialises to the fixed binary layout: 16-byte header (magic, version,
/// n, m as little-endian u32), n*m little-endian f32 row-major, n label bytes.
pub fn encode_binary(ds: &LabeledDataset) -> Result<Vec<u8>> {
    let (n, m) = (ds.n_samples(), ds.n_features());
    let (n32, m32) = match (u32::try_from(n), u32::try_from(m)) {
        (Ok(a), Ok(b)) => (a, b),
        _ => return Err(DatasetError::DimensionOverflow { n: n as u64, m: m as u64 }),
    };
    let mut out = Vec::with_capacity(16 + n * m * 4 + n);
    out.extend_from_slice(&BINARY_MAGIC);
    out.extend_from_slice(&BINARY_VERSION.to_le_bytes());
    out.extend_from_slice(&n32.to_le_bytes());
    out.extend_from_slice(&m32.to_le_bytes());
    for v in ds.features().as_slice() {
        out.extend_from_slice(&(*v as f32).to_le_bytes());
    }
    out.extend_from_slice(ds.labels());
    Ok(out)
}

pub fn decode_binary(bytes: &[u8]) -> Result<LabeledDataset> {
    if bytes.len() < 4 || bytes[..4] != BINARY_MAGIC {
        return Err(DatasetError::BadMagic);
    }
    if (bytes.len() as u64) < HEADER_LEN {
        return Err(DatasetError::TruncatedFile { expected: HEADER_LEN, found: bytes.len() as u64 });
    }
    let word = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().expect("4-byte slice"));
    let version = word(4);
    if version != BINARY_VERSION {
        return Err(DatasetError::UnsupportedVersion(version));
    }
    let (n, m) = (u64::from(word(8)), u64::from(word(12)));
    let expected = n
        .checked_mul(m)
        .and_then(|c| c.checked_mul(4))
        .and_then(|c| c.checked_add(n))
        .and_then(|c| c.checked_add(HEADER_LEN))
        .filter(|&c| usize::try_from(c).is_ok())
        .ok_or(DatasetError::DimensionOverflow { n, m })?;
    if (bytes.len() as u64) < expected {
        return Err(DatasetError::TruncatedFile { expected, found: bytes.len() as u64 });
    }
    let (n, m) = (n as usize, m as usize);
    let payload = &bytes[HEADER_LEN as usize..];
    let data = payload[..n * m * 4]
        .chunks_exact(4)
        .map(|c| f64::from(f32::from_le_bytes(c.try_into().expect("4-byte chunk"))))
        .collect();
    let labels = payload[n * m * 4..n * m * 4 + n].to_vec();
    LabeledDataset::new(Matrix::new(n, m, data)?, labels, None)
}

pub fn save_binary(ds: &LabeledDataset, path: &Path) -> Result<()> {
    write_atomic(path, &encode_binary(ds)?)?;
    Ok(())
}

pub fn load_binary(path: &Path) -> Result<LabeledDataset> {
    decode_binary(&fs::read(path)?)
}

/// Loads `.bin` files with [`load_binary`] and anything else as CSV.
pub fn load_any(path: &Path, label: &LabelColumn) -> Result<LabeledDataset> {
    match path.extension().and_then(|e| e.to_str()) {
        Some("bin") => load_binary(path),
        _ => load_csv(path, label),
    }
}

/// Per-column min/max for min-max scaling to `[0, 1]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScalerParams {
    #[serde(rename = "min")]
    pub per_column_min: Vec<f64>,
    #[serde(rename = "max")]
    pub per_column_max: Vec<f64>,
}

impl ScalerParams {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let sp: ScalerParams = serde_json::from_str(s)?;
        if sp.per_column_min.len() != sp.per_column_max.len() {
            return Err(DatasetError::DimensionMismatch {
                expected: sp.per_column_min.len(),
                found: sp.per_column_max.len(),
            });
        }
        Ok(sp)
    }
}

pub fn fit_scaler(ds: &LabeledDataset) -> ScalerParams {
    let m = ds.n_features();
    let mut min = vec![f64::INFINITY; m];
    let mut max = vec![f64::NEG_INFINITY; m];
    for row in ds.features().iter_rows() {
        for (j, &v) in row.iter().enumerate() {
            min[j] = min[j].min(v);
            max[j] = max[j].max(v);
        }
    }
    ScalerParams { per_column_min: min, per_column_max: max }
}

/// Maps each cell to `(v - min) / (max - min)` clipped to `[0, 1]`; constant
/// columns map to 0.
pub fn apply_scaler(ds: &LabeledDataset, sp: &ScalerParams) -> Result<LabeledDataset> {
    let m = ds.n_features();
    if sp.per_column_min.len() != m || sp.per_column_max.len() != m {
        return Err(DatasetError::DimensionMismatch { expected: m, found: sp.per_column_min.len() });
    }
    let mut data = Vec::with_capacity(ds.n_samples() * m);
    for row in ds.features().iter_rows() {
        for (j, &v) in row.iter().enumerate() {
            let (lo, hi) = (sp.per_column_min[j], sp.per_column_max[j]);
            let scaled = if hi > lo { ((v - lo) / (hi - lo)).clamp(0.0, 1.0) } else { 0.0 };
            data.push(scaled);
        }
    }
    LabeledDataset::new(
        Matrix::new(ds.n_samples(), m, data)?,
        ds.labels.clone(),
        ds.feature_names.clone(),
    )
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub train_fraction: f64,
    pub stratified: bool,
    pub seed: u64,
}

impl SplitSpec {
    pub fn new(train_fraction: f64, seed: u64) -> Self {
        Self { train_fraction, stratified: true, seed }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.train_fraction > 0.0 && self.train_fraction < 1.0) {
            return Err(DatasetError::InvalidSpec(format!(
                "train_fraction {} must lie strictly between 0 and 1",
                self.train_fraction
            )));
        }
        Ok(())
    }
}

/// Row indices of a train/test partition, each sorted ascending.
pub fn split_indices(ds: &LabeledDataset, spec: &SplitSpec) -> Result<(Vec<usize>, Vec<usize>)> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let groups: Vec<Vec<usize>> = if spec.stratified {
        (0u8..=1)
            .map(|c| (0..ds.n_samples()).filter(|&i| ds.labels[i] == c).collect::<Vec<_>>())
            .collect()
    } else {
        vec![(0..ds.n_samples()).collect()]
    };
    let mut train = Vec::new();
    let mut test = Vec::new();
    for (c, mut group) in groups.into_iter().enumerate() {
        if group.len() < 2 {
            return Err(DatasetError::ClassTooSmall { class: c as u8, count: group.len() });
        }
        group.shuffle(&mut rng);
        let k = ((spec.train_fraction * group.len() as f64).round() as usize).clamp(1, group.len() - 1);
        train.extend_from_slice(&group[..k]);
        test.extend_from_slice(&group[k..]);
    }
    train.sort_unstable();
    test.sort_unstable();
    Ok((train, test))
}

/// Train/test partition. Per class, the train share is `round(fraction * count)`.
pub fn stratified_split(ds: &LabeledDataset, spec: &SplitSpec) -> Result<(LabeledDataset, LabeledDataset)> {
    let (train, test) = split_indices(ds, spec)?;
    Ok((ds.select_rows(&train)?, ds.select_rows(&test)?))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub n: usize,
    pub m: usize,
    pub informative: usize,
    pub noise_sigma: f64,
    pub class_balance: f64,
    pub seed: u64,
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(DatasetError::InvalidSpec(msg));
        if self.n < 2 || self.m < 1 {
            return fail(format!("need n >= 2 and m >= 1, got n={} m={}", self.n, self.m));
        }
        if self.informative > self.m {
            return fail(format!("informative ({}) exceeds m ({})", self.informative, self.m));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return fail(format!("noise_sigma {} must be finite and >= 0", self.noise_sigma));
        }
        if !(self.class_balance > 0.0 && self.class_balance < 1.0) {
            return fail(format!("class_balance {} must lie in (0, 1)", self.class_balance));
        }
        Ok(())
    }
}

/// Generates a dataset whose labels depend linearly on a random subset of
/// columns. Returns the dataset and the sorted informative column indices.
///
/// Each column is `offset + scale * z` with standard-normal `z`. The score
/// of a row is `sum(w_j * z_j)` over informative columns plus
/// `N(0, noise_sigma^2)`, with `|w_j|` in `[1, 2]`. The top
/// `round(class_balance * n)` scores are labelled 1, which places the
/// logit's intercept at the matching quantile.
pub fn synthesize(spec: &SyntheticSpec) -> Result<(LabeledDataset, Vec<usize>)> {
    spec.validate()?;
    let SyntheticSpec { n, m, informative, noise_sigma, class_balance, seed } = *spec;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let mut informative_idx = rand::seq::index::sample(&mut rng, m, informative).into_vec();
    informative_idx.sort_unstable();
    let weights: Vec<f64> = informative_idx
        .iter()
        .map(|_| {
            let mag = rng.random_range(1.0..2.0);
            if rng.random::<bool>() { mag } else { -mag }
        })
        .collect();
    let offsets: Vec<f64> = (0..m).map(|_| rng.random_range(-5.0..5.0)).collect();
    let scales: Vec<f64> = (0..m).map(|_| rng.random_range(0.5..3.0)).collect();

    let mut data = Vec::with_capacity(n * m);
    let mut scores = Vec::with_capacity(n);
    for _ in 0..n {
        let z: Vec<f64> = (0..m).map(|_| rng.sample(StandardNormal)).collect();
        let noise: f64 = rng.sample(StandardNormal);
        let s = informative_idx.iter().zip(&weights).map(|(&j, w)| w * z[j]).sum::<f64>() + noise_sigma * noise;
        scores.push(s);
        data.extend(z.iter().enumerate().map(|(j, v)| offsets[j] + scales[j] * v));
    }
    let tiebreak: Vec<u64> = (0..n).map(|_| rng.random()).collect();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(tiebreak[a].cmp(&tiebreak[b])));
    let n_pos = ((class_balance * n as f64).round() as usize).clamp(1, n - 1);
    let mut labels = vec![0u8; n];
    for &i in &order[..n_pos] {
        labels[i] = 1;
    }
    let names = (0..m).map(|j| format!("f{j}")).collect();
    let ds = LabeledDataset::new(Matrix::new(n, m, data)?, labels, Some(names))?;
    Ok((ds, informative_idx))
}

/// Indices as a set, for tests and reporting.
pub fn index_set(idx: &[usize]) -> BTreeSet<usize> {
    idx.iter().copied().collect()
}
