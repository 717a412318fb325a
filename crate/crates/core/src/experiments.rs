//! Offline data collection and the data matrices built from it.
//!
//! Two collection modes are supported: one long trajectory of `N + T`
//! samples whose overlapping windows form the `T` columns, or `T`
//! independent experiments of `N + 1` samples each, one column per
//! experiment.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dictionary::{Dictionary, GroundTruthExpansion};
use crate::error::{Error, Result};
use crate::linalg::{hstack, last_unit, max_abs, numerical_rank, row_major, shift_matrix, vstack};
use crate::plant::{invert_phi, InversionSettings, Interval, ObservabilityWindow, Plant};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CollectionMode {
    SingleTrajectory,
    MultiExperiment,
}

/// Input excitation.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum InputLaw {
    Uniform { lo: f64, hi: f64 },
}

impl InputLaw {
    fn sample<R: Rng>(&self, rng: &mut R) -> f64 {
        match *self {
            InputLaw::Uniform { lo, hi } => sample_interval(rng, lo, hi),
        }
    }
}

fn sample_interval<R: Rng>(rng: &mut R, lo: f64, hi: f64) -> f64 {
    if lo == hi {
        lo
    } else {
        rng.gen_range(lo..=hi)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    #[serde(rename = "N")]
    pub horizon: usize,
    /// Number of data columns `T`.
    #[serde(rename = "T")]
    pub columns: usize,
    pub input_law: InputLaw,
    pub init_box: Vec<Interval>,
    pub seed: u64,
    pub mode: CollectionMode,
    /// Experiments abort once `|x|_inf` exceeds this bound.
    #[serde(default = "default_safety_bound")]
    pub safety_bound: f64,
}

fn default_safety_bound() -> f64 {
    1e6
}

impl ExperimentConfig {
    pub fn validate(&self, state_dim: usize) -> Result<()> {
        if self.horizon == 0 {
            return Err(Error::Validation("N must be at least 1".into()));
        }
        if self.columns == 0 {
            return Err(Error::Validation("T must be at least 1".into()));
        }
        let InputLaw::Uniform { lo, hi } = self.input_law;
        if !(lo.is_finite() && hi.is_finite() && lo <= hi) {
            return Err(Error::Validation(format!("input interval [{lo}, {hi}] must be finite and ordered")));
        }
        if self.init_box.len() != state_dim {
            return Err(Error::Validation(format!(
                "init box has {} intervals, plant state has dimension {state_dim}",
                self.init_box.len()
            )));
        }
        if self.init_box.iter().any(|b| !b.is_finite() || b.lo > b.hi) {
            return Err(Error::Validation("init box bounds must be finite and ordered".into()));
        }
        if !(self.safety_bound > 0.0) {
            return Err(Error::Validation("safety bound must be positive".into()));
        }
        Ok(())
    }

    /// Pendulum setup: `T = 7` experiments of horizon `N = 2`, inputs and
    /// initial states uniform on `[-0.5, 0.5]`.
    pub fn pendulum_default(seed: u64) -> Self {
        Self {
            horizon: 2,
            columns: 7,
            input_law: InputLaw::Uniform { lo: -0.5, hi: 0.5 },
            init_box: vec![Interval::symmetric(0.5); 2],
            seed,
            mode: CollectionMode::MultiExperiment,
            safety_bound: default_safety_bound(),
        }
    }

    /// Samples per record: `N + 1` per experiment, or `N + T` for one trajectory.
    pub fn record_len(&self) -> usize {
        match self.mode {
            CollectionMode::MultiExperiment => self.horizon + 1,
            CollectionMode::SingleTrajectory => self.horizon + self.columns,
        }
    }

    pub fn record_count(&self) -> usize {
        match self.mode {
            CollectionMode::MultiExperiment => self.columns,
            CollectionMode::SingleTrajectory => 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentRecord {
    pub u: Vec<f64>,
    pub y: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RawDataset {
    pub model: String,
    pub config: ExperimentConfig,
    pub records: Vec<ExperimentRecord>,
}

/// RNG for experiment `index`: ChaCha8 seeded from the configured seed, on
/// stream `index`. Within an experiment the initial state is drawn first,
/// coordinate by coordinate, then the inputs in time order.
pub fn experiment_rng(seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    rng
}

fn run_one(plant: &dyn Plant, cfg: &ExperimentConfig, index: usize) -> Result<ExperimentRecord> {
    let mut rng = experiment_rng(cfg.seed, index);
    let mut x: Vec<f64> = cfg
        .init_box
        .iter()
        .map(|b| sample_interval(&mut rng, b.lo, b.hi))
        .collect();
    let len = cfg.record_len();
    let u: Vec<f64> = (0..len).map(|_| cfg.input_law.sample(&mut rng)).collect();
    let mut y = Vec::with_capacity(len);
    for (step, &uk) in u.iter().enumerate() {
        if x.iter().any(|c| !c.is_finite() || c.abs() > cfg.safety_bound) {
            return Err(Error::ExperimentDivergence { experiment: index, step });
        }
        y.push(plant.output(&x));
        if step + 1 < len {
            x = plant.step(&x, uk);
        }
    }
    Ok(ExperimentRecord { u, y })
}

/// Runs the configured experiments; deterministic for a fixed seed.
pub fn run_experiments(plant: &dyn Plant, cfg: &ExperimentConfig) -> Result<RawDataset> {
    cfg.validate(plant.state_dim())?;
    let records = (0..cfg.record_count())
        .into_par_iter()
        .map(|j| run_one(plant, cfg, j))
        .collect::<Result<Vec<_>>>()?;
    Ok(RawDataset {
        model: plant.name().to_string(),
        config: cfg.clone(),
        records,
    })
}

/// One data column: current windows, next windows and the applied input.
#[derive(Clone, Debug, PartialEq)]
pub struct DataColumn {
    pub y_now: Vec<f64>,
    pub u_now: Vec<f64>,
    pub y_next: Vec<f64>,
    pub u_next: Vec<f64>,
    /// Input applied right after the current window, `u(i + N)`.
    pub u_applied: f64,
}

impl RawDataset {
    pub fn horizon(&self) -> usize {
        self.config.horizon
    }

    pub fn columns(&self) -> usize {
        self.config.columns
    }

    fn check_lengths(&self) -> Result<()> {
        let want = self.config.record_len();
        if self.records.len() != self.config.record_count() {
            return Err(Error::Shape(format!(
                "{} records for {} expected",
                self.records.len(),
                self.config.record_count()
            )));
        }
        for (j, r) in self.records.iter().enumerate() {
            if r.u.len() != want || r.y.len() != want {
                return Err(Error::Shape(format!(
                    "record {j} has {} inputs and {} outputs, expected {want}",
                    r.u.len(),
                    r.y.len()
                )));
            }
        }
        Ok(())
    }

    /// The `T` data columns in order.
    pub fn data_columns(&self) -> Result<Vec<DataColumn>> {
        self.check_lengths()?;
        let n = self.horizon();
        let column = |r: &ExperimentRecord, i: usize| DataColumn {
            y_now: r.y[i..i + n].to_vec(),
            u_now: r.u[i..i + n].to_vec(),
            y_next: r.y[i + 1..i + n + 1].to_vec(),
            u_next: r.u[i + 1..i + n + 1].to_vec(),
            u_applied: r.u[i + n],
        };
        Ok(match self.config.mode {
            CollectionMode::MultiExperiment => self.records.iter().map(|r| column(r, 0)).collect(),
            CollectionMode::SingleTrajectory => (0..self.columns()).map(|i| column(&self.records[0], i)).collect(),
        })
    }

    /// Slices one long trajectory into `T` independent `N + 1`-sample records.
    pub fn as_multi_experiment(&self) -> Result<RawDataset> {
        let cols = self.data_columns()?;
        let records = cols
            .into_iter()
            .map(|c| {
                let mut u = c.u_now.clone();
                u.push(c.u_applied);
                let mut y = c.y_now.clone();
                y.push(*c.y_next.last().expect("N >= 1"));
                ExperimentRecord { u, y }
            })
            .collect();
        Ok(RawDataset {
            model: self.model.clone(),
            config: ExperimentConfig {
                mode: CollectionMode::MultiExperiment,
                ..self.config.clone()
            },
            records,
        })
    }
}

/// `Y0, V0, Y1, V1` (N x T), `Q0` ((S - 2N) x T) and `U0` (1 x T).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DataMatrices {
    #[serde(rename = "N")]
    pub horizon: usize,
    #[serde(rename = "T")]
    pub columns: usize,
    #[serde(rename = "S")]
    pub size: usize,
    #[serde(with = "row_major")]
    pub y0: DMatrix<f64>,
    #[serde(with = "row_major")]
    pub v0: DMatrix<f64>,
    #[serde(with = "row_major")]
    pub y1: DMatrix<f64>,
    #[serde(with = "row_major")]
    pub v1: DMatrix<f64>,
    #[serde(with = "row_major")]
    pub q0: DMatrix<f64>,
    #[serde(with = "row_major")]
    pub u0: DMatrix<f64>,
}

impl DataMatrices {
    /// `[Y0; V0; Q0]`, the data evaluated regressor (S x T).
    pub fn regressor_data(&self) -> DMatrix<f64> {
        vstack(&[&self.y0, &self.v0, &self.q0])
    }

    /// `[Y1; V1]` (2N x T).
    pub fn successor_data(&self) -> DMatrix<f64> {
        vstack(&[&self.y1, &self.v1])
    }

    /// Numerical rank of `[U0; Y0; V0; Q0]`.
    pub fn stacked_rank(&self) -> usize {
        numerical_rank(&vstack(&[&self.u0, &self.y0, &self.v0, &self.q0]))
    }

    pub fn validate(&self) -> Result<()> {
        let (n, t, s) = (self.horizon, self.columns, self.size);
        let checks = [
            ("Y0", &self.y0, n),
            ("V0", &self.v0, n),
            ("Y1", &self.y1, n),
            ("V1", &self.v1, n),
            ("Q0", &self.q0, s.saturating_sub(2 * n)),
            ("U0", &self.u0, 1),
        ];
        if s < 2 * n {
            return Err(Error::Shape(format!("S = {s} is smaller than 2N = {}", 2 * n)));
        }
        for (name, m, rows) in checks {
            if m.shape() != (rows, t) {
                return Err(Error::Shape(format!(
                    "{name} is {}x{}, expected {rows}x{t}",
                    m.nrows(),
                    m.ncols()
                )));
            }
        }
        Ok(())
    }
}

/// Builds the data matrices column by column from the dataset windows.
pub fn assemble_matrices(raw: &RawDataset, dict: &Dictionary) -> Result<DataMatrices> {
    let n = raw.horizon();
    if dict.horizon() != n {
        return Err(Error::Shape(format!(
            "dictionary horizon {} differs from dataset horizon {n}",
            dict.horizon()
        )));
    }
    let cols = raw.data_columns()?;
    let t = cols.len();
    let s = dict.size();
    let mut dm = DataMatrices {
        horizon: n,
        columns: t,
        size: s,
        y0: DMatrix::zeros(n, t),
        v0: DMatrix::zeros(n, t),
        y1: DMatrix::zeros(n, t),
        v1: DMatrix::zeros(n, t),
        q0: DMatrix::zeros(s - 2 * n, t),
        u0: DMatrix::zeros(1, t),
    };
    for (i, c) in cols.iter().enumerate() {
        for r in 0..n {
            dm.y0[(r, i)] = c.y_now[r];
            dm.v0[(r, i)] = c.u_now[r];
            dm.y1[(r, i)] = c.y_next[r];
            dm.v1[(r, i)] = c.u_next[r];
        }
        let q = dict.eval_q(&c.y_now, &c.u_now).map_err(|e| match e {
            Error::Evaluation { label, .. } => Error::Evaluation { label, column: Some(i) },
            other => other,
        })?;
        dm.q0.set_column(i, &q);
        dm.u0[(0, i)] = c.u_applied;
    }
    if t < s {
        log::warn!("T = {t} < S = {s}: the data cannot satisfy the rank condition needed by the SDP");
    }
    Ok(dm)
}

/// `A = blkdiag(A_c, A_c)`, `B1 = [0; B_c]`, `B2 = [B_c; 0]`.
#[derive(Clone, Debug, PartialEq)]
pub struct BrunovskyBlocks {
    pub ac: DMatrix<f64>,
    pub bc: DMatrix<f64>,
    pub a: DMatrix<f64>,
    pub b1: DMatrix<f64>,
    pub b2: DMatrix<f64>,
}

impl BrunovskyBlocks {
    pub fn new(horizon: usize) -> Self {
        let n = horizon;
        let ac = shift_matrix(n);
        let bc = DMatrix::from_column_slice(n, 1, last_unit(n).as_slice());
        let mut a = DMatrix::zeros(2 * n, 2 * n);
        a.view_mut((0, 0), (n, n)).copy_from(&ac);
        a.view_mut((n, n), (n, n)).copy_from(&ac);
        let zero = DMatrix::zeros(n, 1);
        let b1 = vstack(&[&zero, &bc]);
        let b2 = vstack(&[&bc, &zero]);
        Self { ac, bc, a, b1, b2 }
    }
}

/// `max |[Y1; V1] - A [Y0; V0] - B1 U0 - B2 alpha [Y0; V0; Q0]|`.
pub fn verify_data_identity(truth: &GroundTruthExpansion, dm: &DataMatrices) -> Result<f64> {
    dm.validate()?;
    if truth.alpha.len() != dm.size {
        return Err(Error::Shape(format!(
            "alpha has {} entries, dictionary size is {}",
            truth.alpha.len(),
            dm.size
        )));
    }
    let blocks = BrunovskyBlocks::new(dm.horizon);
    let alpha = DMatrix::from_row_slice(1, dm.size, &truth.alpha);
    let lin = vstack(&[&dm.y0, &dm.v0]);
    let residual = dm.successor_data()
        - &blocks.a * lin
        - &blocks.b1 * &dm.u0
        - &blocks.b2 * (alpha * dm.regressor_data());
    Ok(max_abs(&residual))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum WindowViolation {
    InputOutOfRange { column: usize, index: usize, value: f64 },
    OutputNotInImage { column: usize, reason: String },
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RangeReport {
    pub windows_checked: usize,
    pub violations: Vec<WindowViolation>,
}

impl RangeReport {
    pub fn passed(&self) -> bool {
        self.violations.is_empty()
    }
}

/// Flags data windows whose inputs leave `U` or whose outputs are not the
/// image of a state in `X`. Diagnostic only; the dataset is not touched.
pub fn check_window_ranges(
    plant: &dyn Plant,
    raw: &RawDataset,
    win: &ObservabilityWindow,
    settings: &InversionSettings,
) -> RangeReport {
    let mut report = RangeReport::default();
    if raw.records.is_empty() {
        return report;
    }
    let cols = match raw.data_columns() {
        Ok(c) => c,
        Err(e) => {
            report.violations.push(WindowViolation::OutputNotInImage {
                column: 0,
                reason: e.to_string(),
            });
            return report;
        }
    };
    let n = win.horizon;
    let seed = vec![0.0; plant.state_dim()];
    for (column, c) in cols.iter().enumerate() {
        report.windows_checked += 1;
        for (index, &value) in c.u_now.iter().enumerate() {
            if !win.input_box.contains(value) {
                report.violations.push(WindowViolation::InputOutOfRange { column, index, value });
            }
        }
        match invert_phi(plant, win, &c.y_now, &c.u_now[..n - 1], &seed, settings) {
            Ok(x) if win.contains_state(&x) => {}
            Ok(x) => report.violations.push(WindowViolation::OutputNotInImage {
                column,
                reason: format!("preimage {x:?} lies outside the state box"),
            }),
            Err(e) => report.violations.push(WindowViolation::OutputNotInImage {
                column,
                reason: e.to_string(),
            }),
        }
    }
    report
}

/// Manifest written next to the per-experiment CSV files.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub model: String,
    #[serde(rename = "N")]
    pub horizon: usize,
    #[serde(rename = "T")]
    pub columns: usize,
    pub seed: u64,
    pub input_law: InputLaw,
    pub init_box: Vec<Interval>,
    pub mode: CollectionMode,
    pub safety_bound: f64,
    pub config_hash: String,
    pub files: Vec<String>,
}

pub const MANIFEST_FILE: &str = "manifest.json";

fn experiment_file(j: usize) -> String {
    format!("experiment_{j:03}.csv")
}

/// Writes `experiment_XXX.csv` (columns `k,u,y`) plus `manifest.json`.
pub fn write_dataset(dir: &Path, raw: &RawDataset, config_hash: &str) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir)?;
    let mut written = Vec::new();
    let mut files = Vec::new();
    for (j, rec) in raw.records.iter().enumerate() {
        let name = experiment_file(j);
        let path = dir.join(&name);
        let mut file = fs::File::create(&path)?;
        writeln!(file, "# config_hash={config_hash}")?;
        let mut w = csv::Writer::from_writer(file);
        w.write_record(["k", "u", "y"])?;
        for (k, (u, y)) in rec.u.iter().zip(&rec.y).enumerate() {
            w.serialize((k, u, y))?;
        }
        w.flush()?;
        files.push(name);
        written.push(path);
    }
    let cfg = &raw.config;
    let manifest = DatasetManifest {
        model: raw.model.clone(),
        horizon: cfg.horizon,
        columns: cfg.columns,
        seed: cfg.seed,
        input_law: cfg.input_law,
        init_box: cfg.init_box.clone(),
        mode: cfg.mode,
        safety_bound: cfg.safety_bound,
        config_hash: config_hash.to_string(),
        files,
    };
    let path = dir.join(MANIFEST_FILE);
    fs::write(&path, serde_json::to_string_pretty(&manifest)? + "\n")?;
    written.push(path);
    Ok(written)
}

pub fn read_dataset(dir: &Path) -> Result<(RawDataset, DatasetManifest)> {
    let manifest: DatasetManifest = serde_json::from_str(&fs::read_to_string(dir.join(MANIFEST_FILE))?)?;
    let mut records = Vec::with_capacity(manifest.files.len());
    for name in &manifest.files {
        let mut rdr = csv::ReaderBuilder::new()
            .comment(Some(b'#'))
            .from_path(dir.join(name))?;
        let mut rec = ExperimentRecord { u: Vec::new(), y: Vec::new() };
        for row in rdr.deserialize::<(usize, f64, f64)>() {
            let (k, u, y) = row?;
            if k != rec.u.len() {
                return Err(Error::Shape(format!("{name}: sample index {k} out of order")));
            }
            rec.u.push(u);
            rec.y.push(y);
        }
        records.push(rec);
    }
    let raw = RawDataset {
        model: manifest.model.clone(),
        config: ExperimentConfig {
            horizon: manifest.horizon,
            columns: manifest.columns,
            input_law: manifest.input_law,
            init_box: manifest.init_box.clone(),
            seed: manifest.seed,
            mode: manifest.mode,
            safety_bound: manifest.safety_bound,
        },
        records,
    };
    raw.check_lengths()?;
    Ok((raw, manifest))
}

/// Exported data matrices with their shapes.
pub fn write_matrices(path: &Path, dm: &DataMatrices, config_hash: &str) -> Result<()> {
    #[derive(Serialize)]
    struct Export<'a> {
        config_hash: &'a str,
        #[serde(flatten)]
        matrices: &'a DataMatrices,
    }
    fs::write(
        path,
        serde_json::to_string_pretty(&Export { config_hash, matrices: dm })? + "\n",
    )?;
    Ok(())
}

/// Horizontal concatenation of two data sets' matrices (same N and S).
pub fn concat_matrices(a: &DataMatrices, b: &DataMatrices) -> Result<DataMatrices> {
    if a.horizon != b.horizon || a.size != b.size {
        return Err(Error::Shape("cannot concatenate data with different N or S".into()));
    }
    Ok(DataMatrices {
        horizon: a.horizon,
        columns: a.columns + b.columns,
        size: a.size,
        y0: hstack(&[&a.y0, &b.y0]),
        v0: hstack(&[&a.v0, &b.v0]),
        y1: hstack(&[&a.y1, &b.y1]),
        v1: hstack(&[&a.v1, &b.v1]),
        q0: hstack(&[&a.q0, &b.q0]),
        u0: hstack(&[&a.u0, &b.u0]),
    })
}
