//! Datasets, CSV input/output, standardization and synthetic generators.

use std::io::{Read, Write};
use std::path::Path;

use nalgebra::DMatrix;
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::kernels::InputMatrix;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("parse error at line {line}, column {column}: {message}")]
    ParseError { line: usize, column: String, message: String },
    #[error("non-numeric value {value:?} at line {line}, column {column}")]
    NonNumericValue { line: usize, column: String, value: String },
    #[error("invalid count: {0}")]
    InvalidCount(String),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

/// Inputs, targets and column names.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub x: InputMatrix,
    pub y: Vec<f64>,
    pub names: Vec<String>,
    pub target: String,
}

impl Dataset {
    pub fn new(x: InputMatrix, y: Vec<f64>) -> Self {
        let names = (1..=x.ncols()).map(|k| format!("x{k}")).collect();
        Dataset {
            x,
            y,
            names,
            target: "y".to_string(),
        }
    }

    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.x.ncols()
    }

    /// Rows in the given order.
    pub fn select(&self, rows: &[usize]) -> Dataset {
        let x = DMatrix::from_fn(rows.len(), self.dim(), |i, j| self.x[(rows[i], j)]);
        Dataset {
            x,
            y: rows.iter().map(|&i| self.y[i]).collect(),
            names: self.names.clone(),
            target: self.target.clone(),
        }
    }
}

/// Reads a numeric CSV with a header row; `target` names the output column.
pub fn load_csv(path: impl AsRef<Path>, target: &str) -> Result<Dataset, DataError> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| DataError::Io {
        path: path.display().to_string(),
        source: e,
    })?;
    read_csv(file, target)
}

/// Header and numeric rows of a CSV table.
pub fn read_table<R: Read>(reader: R) -> Result<(Vec<String>, Vec<Vec<f64>>), DataError> {
    let mut rd = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let header: Vec<String> = rd.headers()?.iter().map(str::to_string).collect();
    let mut rows = Vec::new();
    for (r, rec) in rd.records().enumerate() {
        let line = r + 2;
        let rec = rec.map_err(|e| DataError::ParseError {
            line,
            column: String::new(),
            message: e.to_string(),
        })?;
        if rec.len() != header.len() {
            return Err(DataError::ParseError {
                line,
                column: String::new(),
                message: format!("expected {} fields, found {}", header.len(), rec.len()),
            });
        }
        let mut row = Vec::with_capacity(rec.len());
        for (c, field) in rec.iter().enumerate() {
            match field.parse::<f64>() {
                Ok(v) if v.is_finite() => row.push(v),
                _ => {
                    return Err(DataError::NonNumericValue {
                        line,
                        column: header[c].clone(),
                        value: field.to_string(),
                    })
                }
            }
        }
        rows.push(row);
    }
    Ok((header, rows))
}

pub fn read_csv<R: Read>(reader: R, target: &str) -> Result<Dataset, DataError> {
    let (header, rows) = read_table(reader)?;
    let tcol = header.iter().position(|h| h == target).ok_or_else(|| DataError::ParseError {
        line: 1,
        column: target.to_string(),
        message: format!("no column named {target:?}"),
    })?;
    let d = header.len() - 1;
    let x = DMatrix::from_fn(rows.len(), d, |i, j| rows[i][if j < tcol { j } else { j + 1 }]);
    let y = rows.iter().map(|r| r[tcol]).collect();
    let names = header
        .iter()
        .enumerate()
        .filter(|(c, _)| *c != tcol)
        .map(|(_, h)| h.clone())
        .collect();
    Ok(Dataset {
        x,
        y,
        names,
        target: target.to_string(),
    })
}

/// Every column as an input.
pub fn load_inputs(path: impl AsRef<Path>) -> Result<(Vec<String>, InputMatrix), DataError> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| DataError::Io {
        path: path.display().to_string(),
        source: e,
    })?;
    let (header, rows) = read_table(file)?;
    let x = DMatrix::from_fn(rows.len(), header.len(), |i, j| rows[i][j]);
    Ok((header, x))
}

/// Writes inputs then target, with shortest round-trip float formatting.
pub fn write_csv<W: Write>(ds: &Dataset, w: W) -> Result<(), DataError> {
    let mut wr = csv::Writer::from_writer(w);
    let mut header = ds.names.clone();
    header.push(ds.target.clone());
    wr.write_record(&header)?;
    for i in 0..ds.len() {
        let mut row: Vec<String> = (0..ds.dim()).map(|j| ds.x[(i, j)].to_string()).collect();
        row.push(ds.y[i].to_string());
        wr.write_record(&row)?;
    }
    wr.flush().map_err(|e| DataError::Io {
        path: "<writer>".to_string(),
        source: e,
    })?;
    Ok(())
}

pub fn save_csv(ds: &Dataset, path: impl AsRef<Path>) -> Result<(), DataError> {
    let path = path.as_ref();
    let file = std::fs::File::create(path).map_err(|e| DataError::Io {
        path: path.display().to_string(),
        source: e,
    })?;
    write_csv(ds, file)
}

/// Per-column location and scale; constant columns get scale 1.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardization {
    pub x_mean: Vec<f64>,
    pub x_scale: Vec<f64>,
    pub y_mean: f64,
    pub y_scale: f64,
}

fn mean_sd(v: impl Iterator<Item = f64> + Clone) -> (f64, f64) {
    let n = v.clone().count() as f64;
    let mean = v.clone().sum::<f64>() / n;
    if n < 2.0 {
        return (mean, 1.0);
    }
    let var = v.map(|a| (a - mean).powi(2)).sum::<f64>() / (n - 1.0);
    let sd = var.sqrt();
    (mean, if sd > 0.0 && sd.is_finite() { sd } else { 1.0 })
}

impl Standardization {
    pub fn fit(ds: &Dataset) -> Self {
        let mut x_mean = Vec::with_capacity(ds.dim());
        let mut x_scale = Vec::with_capacity(ds.dim());
        for j in 0..ds.dim() {
            let (m, s) = mean_sd(ds.x.column(j).iter().copied());
            x_mean.push(m);
            x_scale.push(s);
        }
        let (y_mean, y_scale) = mean_sd(ds.y.iter().copied());
        Standardization {
            x_mean,
            x_scale,
            y_mean,
            y_scale,
        }
    }

    /// No-op transform for `d` inputs.
    pub fn identity(d: usize) -> Self {
        Standardization {
            x_mean: vec![0.0; d],
            x_scale: vec![1.0; d],
            y_mean: 0.0,
            y_scale: 1.0,
        }
    }

    pub fn apply_x(&self, x: &InputMatrix) -> InputMatrix {
        DMatrix::from_fn(x.nrows(), x.ncols(), |i, j| (x[(i, j)] - self.x_mean[j]) / self.x_scale[j])
    }

    pub fn apply_y(&self, y: &[f64]) -> Vec<f64> {
        y.iter().map(|v| (v - self.y_mean) / self.y_scale).collect()
    }

    pub fn invert_y(&self, y: &[f64]) -> Vec<f64> {
        y.iter().map(|v| v * self.y_scale + self.y_mean).collect()
    }

    pub fn invert_x(&self, x: &InputMatrix) -> InputMatrix {
        DMatrix::from_fn(x.nrows(), x.ncols(), |i, j| x[(i, j)] * self.x_scale[j] + self.x_mean[j])
    }

    pub fn apply(&self, ds: &Dataset) -> Dataset {
        Dataset {
            x: self.apply_x(&ds.x),
            y: self.apply_y(&ds.y),
            names: ds.names.clone(),
            target: ds.target.clone(),
        }
    }
}

/// `10 sin(π x₁ x₂) + 20 (x₃ − ½)² + 10 x₄ + 5 x₅`.
pub fn friedman_function(x: &[f64]) -> f64 {
    10.0 * (std::f64::consts::PI * x[0] * x[1]).sin() + 20.0 * (x[2] - 0.5).powi(2) + 10.0 * x[3] + 5.0 * x[4]
}

pub const FRIEDMAN_DIM: usize = 10;

fn friedman_draw(rng: &mut ChaCha8Rng, n: usize, noise: bool) -> Dataset {
    let x = DMatrix::from_fn(n, FRIEDMAN_DIM, |_, _| 0.0);
    let mut x = x;
    let mut y = Vec::with_capacity(n);
    for i in 0..n {
        let row: Vec<f64> = (0..FRIEDMAN_DIM).map(|_| rng.random::<f64>()).collect();
        for (j, v) in row.iter().enumerate() {
            x[(i, j)] = *v;
        }
        let e: f64 = if noise { rng.sample(StandardNormal) } else { 0.0 };
        y.push(friedman_function(&row) + e);
    }
    Dataset::new(x, y)
}

/// Training data: ten uniform inputs, five of them relevant, unit Gaussian noise and
/// `n_outliers` targets replaced by draws uniform on `[min − 3 sd, max + 3 sd]`.
pub fn friedman(seed: u64, n_train: usize, n_outliers: usize) -> Result<Dataset, DataError> {
    if n_outliers > n_train {
        return Err(DataError::InvalidCount(format!("{n_outliers} outliers for {n_train} points")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut ds = friedman_draw(&mut rng, n_train, true);
    if n_outliers > 0 {
        let (_, sd) = mean_sd(ds.y.iter().copied());
        let lo = ds.y.iter().copied().fold(f64::INFINITY, f64::min) - 3.0 * sd;
        let hi = ds.y.iter().copied().fold(f64::NEG_INFINITY, f64::max) + 3.0 * sd;
        for i in sample(&mut rng, n_train, n_outliers).into_iter() {
            ds.y[i] = rng.random_range(lo..hi);
        }
    }
    Ok(ds)
}

/// Outlier-free test points from an independent stream of the same seed.
pub fn friedman_test(seed: u64, n: usize, noise: bool) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1);
    friedman_draw(&mut rng, n, noise)
}

/// Layout of a one-dimensional data set with two conflicting observations
/// in a gap between groups of regular observations.
#[derive(Debug, Clone, PartialEq)]
pub struct ExampleLayout {
    /// Regular inputs on `[-5, gap.0]` and `[gap.1, 5]`.
    pub n_left: usize,
    pub n_right: usize,
    pub gap: (f64, f64),
    /// Inputs and targets of the two conflicting observations.
    pub outliers: [(f64, f64); 2],
    /// Amplitude of the extra oscillation on `x < 0`.
    pub wiggle: f64,
    pub wiggle_freq: f64,
    pub noise_sd: f64,
}

impl ExampleLayout {
    pub fn truth(&self, x: f64) -> f64 {
        let base = 0.8 * (0.7 * x).sin() + 0.1 * x;
        if x < 0.0 {
            base + self.wiggle * (self.wiggle_freq * x).sin() * (1.0 - (0.6 * x).exp())
        } else {
            base
        }
    }

    /// Rows are ordered: the two conflicting observations, the regular points
    /// nearest the gap on each side, then the rest from left to right.
    pub fn generate(&self, seed: u64) -> Dataset {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut xs = Vec::new();
        let spacing_left = (self.gap.0 + 5.0) / (self.n_left.max(2) - 1) as f64;
        for k in 0..self.n_left {
            xs.push(-5.0 + spacing_left * k as f64);
        }
        let spacing_right = (5.0 - self.gap.1) / (self.n_right.max(2) - 1) as f64;
        for k in 0..self.n_right {
            xs.push(self.gap.1 + spacing_right * k as f64);
        }
        let ys: Vec<f64> = xs
            .iter()
            .map(|&x| {
                let e: f64 = rng.sample(StandardNormal);
                self.truth(x) + self.noise_sd * e
            })
            .collect();
        let left_edge = self.n_left - 1;
        let right_edge = self.n_left;
        let mut order = vec![left_edge, right_edge];
        order.extend((0..xs.len()).filter(|&i| i != left_edge && i != right_edge));
        let n = xs.len() + 2;
        let mut x = DMatrix::zeros(n, 1);
        let mut y = Vec::with_capacity(n);
        for (r, (ox, oy)) in self.outliers.iter().enumerate() {
            x[(r, 0)] = *ox;
            y.push(*oy);
        }
        for (r, &i) in order.iter().enumerate() {
            x[(r + 2, 0)] = xs[i];
            y.push(ys[i]);
        }
        Dataset::new(x, y)
    }
}

pub const FIXTURE_SEED: u64 = 2010;

pub const EXAMPLE1: ExampleLayout = ExampleLayout {
    n_left: 16,
    n_right: 6,
    gap: (1.0, 3.0),
    outliers: [(1.7, 1.9), (2.3, -1.2)],
    wiggle: 0.0,
    wiggle_freq: 0.0,
    noise_sd: 0.1,
};

pub const EXAMPLE2: ExampleLayout = ExampleLayout {
    n_left: 24,
    n_right: 6,
    gap: (1.0, 3.0),
    outliers: [(1.8, 1.8), (2.2, -1.8)],
    wiggle: 0.5,
    wiggle_freq: 2.5,
    noise_sd: 0.1,
};

const EXAMPLE1_CSV: &str = include_str!("../data/example1.csv");
const EXAMPLE2_CSV: &str = include_str!("../data/example2.csv");

/// Sites recorded in convergence traces of the one-dimensional examples.
pub const WATCHED_SITES: [usize; 4] = [0, 1, 2, 3];

#[derive(Debug, Clone, PartialEq)]
pub enum Fixture {
    Example1,
    Example2,
    /// Twenty regular points and one observation displaced by `D`.
    OutlierDistance(f64),
    Friedman { n_train: usize, n_outliers: usize },
}

#[derive(Debug, Clone, PartialEq)]
pub struct FixtureSpec {
    pub which: Fixture,
    pub seed: u64,
}

impl FixtureSpec {
    pub fn new(which: Fixture) -> Self {
        FixtureSpec {
            which,
            seed: FIXTURE_SEED,
        }
    }
}

/// Inputs of the outlier-distance fixture are a regular grid on `[0, 10]`; the
/// displaced observation sits at index 0, at `x = 5.25`.
pub const OUTLIER_X: f64 = 5.25;

fn outlier_distance(d: f64, seed: u64) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let truth = |x: f64| (0.6 * x).sin();
    let mut x = DMatrix::zeros(21, 1);
    let mut y = Vec::with_capacity(21);
    x[(0, 0)] = OUTLIER_X;
    y.push(truth(OUTLIER_X) + d);
    for k in 0..20 {
        let xv = 10.0 * k as f64 / 19.0;
        let e: f64 = rng.sample(StandardNormal);
        x[(k + 1, 0)] = xv;
        y.push(truth(xv) + 0.1 * e);
    }
    Dataset::new(x, y)
}

/// Builds a fixture. The two one-dimensional examples at the default seed
/// come from the committed snapshots; other seeds regenerate the noise.
pub fn make_fixture(spec: &FixtureSpec) -> Result<Dataset, DataError> {
    match &spec.which {
        Fixture::Example1 if spec.seed == FIXTURE_SEED => read_csv(EXAMPLE1_CSV.as_bytes(), "y"),
        Fixture::Example2 if spec.seed == FIXTURE_SEED => read_csv(EXAMPLE2_CSV.as_bytes(), "y"),
        Fixture::Example1 => Ok(EXAMPLE1.generate(spec.seed)),
        Fixture::Example2 => Ok(EXAMPLE2.generate(spec.seed)),
        Fixture::OutlierDistance(d) => Ok(outlier_distance(*d, spec.seed)),
        Fixture::Friedman { n_train, n_outliers } => friedman(spec.seed, *n_train, *n_outliers),
    }
}
