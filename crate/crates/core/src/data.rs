//! Datasets: object features, ground-truth dissimilarities or orderings,
//! triplet sampling, splits, and a synthetic generator with a known metric.
//!
//! File formats (UTF-8, LF):
//! - `features.csv`: header `id,f0,…,f{d-1}`, one row per object.
//! - `dissim.csv`: `n × n` matrix, no header.
//! - `triplets.jsonl`: one `{"i":…,"j":…,"k":…}` per line, `j` closer than `k`.

use std::collections::HashSet;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg::{squared_distance, Matrix};
use crate::model::Triplet;
use crate::rng;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("io error on {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("object ids are not contiguous 0..{n}: {detail}")]
    NonContiguousIds { n: usize, detail: String },
    #[error("non-finite value at line {line}, column {column}")]
    NonFinite { line: usize, column: usize },
    #[error("invalid dissimilarity matrix: {0}")]
    InvalidMatrix(String),
    #[error("invalid triplet on line {line}: {message}")]
    InvalidTriplet { line: usize, message: String },
    #[error("could only sample {produced} of {requested} triplets in {attempts} attempts")]
    ExhaustedSampling { produced: usize, requested: usize, attempts: usize },
    #[error("invalid synthetic spec: {0}")]
    InvalidSpec(String),
    #[error("dataset directory {0} has neither dissim.csv nor triplets.jsonl")]
    MissingGroundTruth(PathBuf),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DataError + '_ {
    move |source| DataError::Io { path: path.to_path_buf(), source }
}

/// `n` objects with `d` features each; row `o` belongs to object id `o`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureTable {
    rows: Matrix,
}

impl FeatureTable {
    pub fn new(rows: Matrix) -> Result<Self, DataError> {
        if rows.cols() == 0 {
            return Err(DataError::Parse { line: 1, message: "feature dimension must be at least 1".into() });
        }
        Ok(Self { rows })
    }

    pub fn n(&self) -> usize {
        self.rows.rows()
    }

    pub fn dim(&self) -> usize {
        self.rows.cols()
    }

    pub fn row(&self, id: usize) -> &[f64] {
        self.rows.row(id)
    }

    pub fn matrix(&self) -> &Matrix {
        &self.rows
    }

    pub fn load_csv(path: &Path) -> Result<Self, DataError> {
        Self::from_reader(File::open(path).map_err(io_err(path))?)
    }

    pub fn from_reader<R: Read>(reader: R) -> Result<Self, DataError> {
        let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
        let headers = rdr.headers().map_err(|e| DataError::Parse { line: 1, message: e.to_string() })?.clone();
        if headers.get(0) != Some("id") || headers.len() < 2 {
            return Err(DataError::Parse { line: 1, message: "header must be id,f0,f1,…".into() });
        }
        for (c, h) in headers.iter().enumerate().skip(1) {
            if h != format!("f{}", c - 1) {
                return Err(DataError::Parse { line: 1, message: format!("column {c} should be named f{}", c - 1) });
            }
        }
        let d = headers.len() - 1;
        let mut rows: Vec<(usize, Vec<f64>)> = Vec::new();
        for (r, record) in rdr.records().enumerate() {
            let line = r + 2;
            let record = record.map_err(|e| DataError::Parse { line, message: e.to_string() })?;
            if record.len() != d + 1 {
                return Err(DataError::Parse { line, message: format!("expected {} fields, got {}", d + 1, record.len()) });
            }
            let id: usize = record[0]
                .trim()
                .parse()
                .map_err(|_| DataError::Parse { line, message: format!("bad id {:?}", &record[0]) })?;
            let mut values = Vec::with_capacity(d);
            for (c, cell) in record.iter().enumerate().skip(1) {
                let v: f64 = cell
                    .trim()
                    .parse()
                    .map_err(|_| DataError::Parse { line, message: format!("bad number {cell:?}") })?;
                if !v.is_finite() {
                    return Err(DataError::NonFinite { line, column: c });
                }
                values.push(v);
            }
            rows.push((id, values));
        }
        let n = rows.len();
        rows.sort_by_key(|(id, _)| *id);
        for (expect, (id, _)) in rows.iter().enumerate() {
            if *id != expect {
                let detail = if *id < expect { format!("duplicate id {id}") } else { format!("missing id {expect}") };
                return Err(DataError::NonContiguousIds { n, detail });
            }
        }
        let data = rows.into_iter().flat_map(|(_, v)| v).collect();
        Self::new(Matrix::from_vec(n, d, data).expect("validated finite"))
    }

    pub fn write_csv(&self, path: &Path) -> Result<(), DataError> {
        let file = File::create(path).map_err(io_err(path))?;
        self.to_writer(BufWriter::new(file)).map_err(io_err(path))
    }

    pub fn to_writer<W: Write>(&self, writer: W) -> std::io::Result<()> {
        let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(writer);
        let mut header = vec!["id".to_string()];
        header.extend((0..self.dim()).map(|c| format!("f{c}")));
        w.write_record(&header)?;
        for id in 0..self.n() {
            let mut rec = vec![id.to_string()];
            rec.extend(self.row(id).iter().map(|v| v.to_string()));
            w.write_record(&rec)?;
        }
        w.flush()
    }
}

/// Symmetric, nonnegative, zero-diagonal object dissimilarities.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Matrix", into = "Matrix")]
pub struct DissimMatrix {
    m: Matrix,
}

impl From<DissimMatrix> for Matrix {
    fn from(d: DissimMatrix) -> Self {
        d.m
    }
}

impl TryFrom<Matrix> for DissimMatrix {
    type Error = DataError;

    fn try_from(m: Matrix) -> Result<Self, Self::Error> {
        Self::new(m)
    }
}

impl DissimMatrix {
    pub fn new(m: Matrix) -> Result<Self, DataError> {
        let n = m.rows();
        if m.cols() != n {
            return Err(DataError::InvalidMatrix(format!("not square: {}x{}", n, m.cols())));
        }
        for i in 0..n {
            if m.get(i, i) != 0.0 {
                return Err(DataError::InvalidMatrix(format!("nonzero diagonal at {i}")));
            }
            for j in 0..n {
                let v = m.get(i, j);
                if v < 0.0 {
                    return Err(DataError::InvalidMatrix(format!("negative entry at ({i}, {j})")));
                }
                if (v - m.get(j, i)).abs() > 1e-9 * v.abs().max(1.0) {
                    return Err(DataError::InvalidMatrix(format!("asymmetric at ({i}, {j})")));
                }
            }
        }
        Ok(Self { m })
    }

    /// Pairwise Euclidean distances between rows.
    pub fn euclidean(points: &Matrix) -> Self {
        let n = points.rows();
        let mut m = Matrix::zeros(n, n);
        for i in 0..n {
            for j in (i + 1)..n {
                let d = squared_distance(points.row(i), points.row(j)).sqrt();
                m.set(i, j, d);
                m.set(j, i, d);
            }
        }
        Self { m }
    }

    pub fn n(&self) -> usize {
        self.m.rows()
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.m.get(i, j)
    }

    pub fn matrix(&self) -> &Matrix {
        &self.m
    }

    /// Median off-diagonal entry.
    pub fn median_entry(&self) -> f64 {
        let n = self.n();
        let mut vals: Vec<f64> = (0..n).flat_map(|i| ((i + 1)..n).map(move |j| (i, j))).map(|(i, j)| self.get(i, j)).collect();
        if vals.is_empty() {
            return 0.0;
        }
        vals.sort_by(f64::total_cmp);
        let mid = vals.len() / 2;
        if vals.len() % 2 == 1 {
            vals[mid]
        } else {
            0.5 * (vals[mid - 1] + vals[mid])
        }
    }

    /// `1e-6 ×` the median entry.
    pub fn default_min_gap(&self) -> f64 {
        1e-6 * self.median_entry()
    }

    pub fn load_csv(path: &Path) -> Result<Self, DataError> {
        Self::from_reader(File::open(path).map_err(io_err(path))?)
    }

    pub fn from_reader<R: Read>(reader: R) -> Result<Self, DataError> {
        let mut rdr = csv::ReaderBuilder::new().has_headers(false).from_reader(reader);
        let mut rows: Vec<Vec<f64>> = Vec::new();
        for (r, record) in rdr.records().enumerate() {
            let line = r + 1;
            let record = record.map_err(|e| DataError::Parse { line, message: e.to_string() })?;
            let mut row = Vec::with_capacity(record.len());
            for (c, cell) in record.iter().enumerate() {
                let v: f64 =
                    cell.trim().parse().map_err(|_| DataError::Parse { line, message: format!("bad number {cell:?}") })?;
                if !v.is_finite() {
                    return Err(DataError::NonFinite { line, column: c });
                }
                row.push(v);
            }
            rows.push(row);
        }
        let m = Matrix::from_rows(&rows).map_err(|e| DataError::InvalidMatrix(e.to_string()))?;
        Self::new(m)
    }

    pub fn write_csv(&self, path: &Path) -> Result<(), DataError> {
        let file = File::create(path).map_err(io_err(path))?;
        self.to_writer(BufWriter::new(file)).map_err(io_err(path))
    }

    pub fn to_writer<W: Write>(&self, writer: W) -> std::io::Result<()> {
        let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(writer);
        for row in self.m.row_iter() {
            w.write_record(row.iter().map(|v| v.to_string()))?;
        }
        w.flush()
    }

    /// Ordering of a query by this matrix; `None` on an exact tie.
    pub fn order(&self, query: Triplet) -> Option<Triplet> {
        let (dj, dk) = (self.get(query.i, query.j), self.get(query.i, query.k));
        if dj < dk {
            Some(query)
        } else if dk < dj {
            Some(query.swapped())
        } else {
            None
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum GroundTruth {
    TripletList(Vec<Triplet>),
    DissimMatrix(DissimMatrix),
}

/// Reads triplets, one JSON object per line. Blank lines are skipped.
pub fn read_triplets<R: Read>(reader: R) -> Result<Vec<Triplet>, DataError> {
    let mut out = Vec::new();
    for (r, line) in BufReader::new(reader).lines().enumerate() {
        let line_no = r + 1;
        let line = line.map_err(|e| DataError::Parse { line: line_no, message: e.to_string() })?;
        if line.trim().is_empty() {
            continue;
        }
        let t: Triplet =
            serde_json::from_str(&line).map_err(|e| DataError::Parse { line: line_no, message: e.to_string() })?;
        Triplet::new(t.i, t.j, t.k).map_err(|e| DataError::InvalidTriplet { line: line_no, message: e.to_string() })?;
        out.push(t);
    }
    Ok(out)
}

pub fn load_triplets(path: &Path) -> Result<Vec<Triplet>, DataError> {
    read_triplets(File::open(path).map_err(io_err(path))?)
}

pub fn write_triplets<W: Write>(mut writer: W, triplets: &[Triplet]) -> std::io::Result<()> {
    for t in triplets {
        writeln!(writer, "{}", serde_json::to_string(t).expect("plain struct serializes"))?;
    }
    writer.flush()
}

pub fn save_triplets(path: &Path, triplets: &[Triplet]) -> Result<(), DataError> {
    let file = File::create(path).map_err(io_err(path))?;
    write_triplets(BufWriter::new(file), triplets).map_err(io_err(path))
}

/// Rejection-samples `count` distinct queries uniformly, ordered by the
/// matrix and with `|d(i,j) − d(i,k)| ≥ min_gap`.
pub fn triplets_from_matrix(m: &DissimMatrix, count: usize, seed: u64, min_gap: f64) -> Result<Vec<Triplet>, DataError> {
    let n = m.n();
    let max_attempts = 100 * count;
    let mut out = Vec::with_capacity(count);
    if n < 3 {
        return Err(DataError::ExhaustedSampling { produced: 0, requested: count, attempts: 0 });
    }
    let mut seen: HashSet<Triplet> = HashSet::with_capacity(count);
    let mut rng = rng::rng_from(seed);
    let mut attempts = 0;
    while out.len() < count {
        if attempts >= max_attempts {
            return Err(DataError::ExhaustedSampling { produced: out.len(), requested: count, attempts });
        }
        attempts += 1;
        let i = rng.random_range(0..n);
        let j = rng.random_range(0..n);
        let k = rng.random_range(0..n);
        if i == j || i == k || j == k {
            continue;
        }
        let query = Triplet { i, j, k };
        if (m.get(i, j) - m.get(i, k)).abs() < min_gap {
            continue;
        }
        let Some(ordered) = m.order(query) else {
            continue;
        };
        if seen.insert(query.canonical()) {
            out.push(ordered);
        }
    }
    Ok(out)
}

/// Uniform random partition; `round(fraction · len)` triplets go to the
/// first (training) half.
pub fn split_triplets(triplets: &[Triplet], train_fraction: f64, seed: u64) -> (Vec<Triplet>, Vec<Triplet>) {
    let mut order: Vec<usize> = (0..triplets.len()).collect();
    order.shuffle(&mut rng::rng_from(seed));
    let cut = ((train_fraction * triplets.len() as f64).round() as usize).min(triplets.len());
    let train = order[..cut].iter().map(|&o| triplets[o]).collect();
    let test = order[cut..].iter().map(|&o| triplets[o]).collect();
    (train, test)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Nonlinearity {
    #[default]
    Tanh,
    Identity,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mixing {
    #[default]
    Random,
    /// `A = W = I`; requires `latent_dim == d`.
    Identity,
}

/// Latent points `z ~ N(0, I_L)`, features `x = A·σ(W z) + noise`, and
/// ground truth the Euclidean distance between latent points.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSpec {
    pub n: usize,
    pub d: usize,
    pub latent_dim: usize,
    #[serde(default)]
    pub nonlinearity: Nonlinearity,
    #[serde(default)]
    pub mixing: Mixing,
    #[serde(default)]
    pub noise: f64,
    #[serde(default)]
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self { n: 150, d: 10, latent_dim: 3, nonlinearity: Nonlinearity::Tanh, mixing: Mixing::Random, noise: 0.0, seed: 0 }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<(), DataError> {
        if self.n < 3 {
            return Err(DataError::InvalidSpec(format!("need at least 3 objects, got {}", self.n)));
        }
        if self.d == 0 || self.latent_dim == 0 {
            return Err(DataError::InvalidSpec("dimensions must be positive".into()));
        }
        if self.latent_dim > self.d {
            return Err(DataError::InvalidSpec(format!("latent_dim {} exceeds d {}", self.latent_dim, self.d)));
        }
        if !(self.noise >= 0.0) || !self.noise.is_finite() {
            return Err(DataError::InvalidSpec(format!("noise must be a finite value >= 0, got {}", self.noise)));
        }
        if self.mixing == Mixing::Identity && self.latent_dim != self.d {
            return Err(DataError::InvalidSpec("identity mixing needs latent_dim == d".into()));
        }
        Ok(())
    }
}

pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<(FeatureTable, DissimMatrix), DataError> {
    spec.validate()?;
    let (n, d, l) = (spec.n, spec.d, spec.latent_dim);
    let mut rng = rng::rng_from(spec.seed);
    let mut latent = Matrix::zeros(n, l);
    latent.as_mut_slice().iter_mut().for_each(|v| *v = rng.sample::<f64, _>(StandardNormal));

    let (w, a) = match spec.mixing {
        Mixing::Identity => (Matrix::identity(d), Matrix::identity(d)),
        Mixing::Random => {
            let mut w = Matrix::zeros(d, l);
            let sw = 1.0 / (l as f64).sqrt();
            w.as_mut_slice().iter_mut().for_each(|v| *v = sw * rng.sample::<f64, _>(StandardNormal));
            let mut a = Matrix::zeros(d, d);
            let sa = 1.0 / (d as f64).sqrt();
            a.as_mut_slice().iter_mut().for_each(|v| *v = sa * rng.sample::<f64, _>(StandardNormal));
            (w, a)
        }
    };

    let mut features = Matrix::zeros(n, d);
    for o in 0..n {
        let h: Vec<f64> = w
            .mul_vec(latent.row(o))
            .expect("shapes fixed above")
            .into_iter()
            .map(|v| match spec.nonlinearity {
                Nonlinearity::Tanh => v.tanh(),
                Nonlinearity::Identity => v,
            })
            .collect();
        let x = a.mul_vec(&h).expect("shapes fixed above");
        for (c, v) in x.into_iter().enumerate() {
            let noise = if spec.noise > 0.0 { spec.noise * rng.sample::<f64, _>(StandardNormal) } else { 0.0 };
            features.set(o, c, v + noise);
        }
    }
    Ok((FeatureTable::new(features)?, DissimMatrix::euclidean(&latent)))
}

/// Features plus ground truth plus the universe of ordered triplets that
/// active learning draws from.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub features: FeatureTable,
    pub truth: GroundTruth,
    pub triplets: Vec<Triplet>,
}

impl Dataset {
    /// Builds a dataset from a matrix, sampling `count` triplets.
    pub fn from_matrix(
        features: FeatureTable,
        matrix: DissimMatrix,
        count: usize,
        seed: u64,
        min_gap: Option<f64>,
    ) -> Result<Self, DataError> {
        if matrix.n() != features.n() {
            return Err(DataError::InvalidMatrix(format!("{} objects in matrix, {} in features", matrix.n(), features.n())));
        }
        let gap = min_gap.unwrap_or_else(|| matrix.default_min_gap());
        let triplets = triplets_from_matrix(&matrix, count, seed, gap)?;
        Ok(Self { features, truth: GroundTruth::DissimMatrix(matrix), triplets })
    }

    pub fn from_triplets(features: FeatureTable, triplets: Vec<Triplet>) -> Result<Self, DataError> {
        for (line, t) in triplets.iter().enumerate() {
            t.check_bounds(features.n())
                .map_err(|e| DataError::InvalidTriplet { line: line + 1, message: e.to_string() })?;
        }
        Ok(Self { features, truth: GroundTruth::TripletList(triplets.clone()), triplets })
    }

    pub fn synthetic(spec: &SyntheticSpec, count: usize, min_gap: Option<f64>) -> Result<Self, DataError> {
        let (features, matrix) = generate_synthetic(spec)?;
        Self::from_matrix(features, matrix, count, rng::derive_seed(spec.seed, &[0x7472]), min_gap)
    }

    /// Loads `features.csv` with `triplets.jsonl` (used as-is) or, failing
    /// that, `dissim.csv` (sampled with `count`).
    pub fn load_dir(dir: &Path, count: usize, seed: u64) -> Result<Self, DataError> {
        let features = FeatureTable::load_csv(&dir.join("features.csv"))?;
        let triplets_path = dir.join("triplets.jsonl");
        let dissim_path = dir.join("dissim.csv");
        if dissim_path.exists() {
            let matrix = DissimMatrix::load_csv(&dissim_path)?;
            if triplets_path.exists() {
                let triplets = load_triplets(&triplets_path)?;
                for (line, t) in triplets.iter().enumerate() {
                    t.check_bounds(features.n())
                        .map_err(|e| DataError::InvalidTriplet { line: line + 1, message: e.to_string() })?;
                }
                return Ok(Self { features, truth: GroundTruth::DissimMatrix(matrix), triplets });
            }
            return Self::from_matrix(features, matrix, count, seed, None);
        }
        if triplets_path.exists() {
            return Self::from_triplets(features, load_triplets(&triplets_path)?);
        }
        Err(DataError::MissingGroundTruth(dir.to_path_buf()))
    }
}
