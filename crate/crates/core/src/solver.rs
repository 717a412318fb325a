//! Narrow conic-program interface: scalar variables, linear equalities,
//! affine PSD blocks and a linear objective, solved by an interior-point
//! backend.
//!
//! Symmetric matrix variables are stored in scaled upper-triangular
//! vectorisation (column-wise, off-diagonals times `sqrt(2)`), so a
//! 2x2 identity is the scalar triple `(1, 0, 1)`.

use std::collections::BTreeMap;
use std::sync::atomic::{AtomicU64, Ordering};
use std::time::Instant;

use clarabel::algebra::CscMatrix;
use clarabel::solver::{
    DefaultSettingsBuilder, DefaultSolver, IPSolver, SolverStatus, SupportedConeT,
};
use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::min_symmetric_eigenvalue;

const STATIC_REGULARIZATION: [f64; 2] = [1e-8, 1e-6];

static NEXT_PROGRAM_ID: AtomicU64 = AtomicU64::new(1);

/// Environment variable selecting the conic backend.
pub const BACKEND_ENV: &str = "IOFEEDBACK_SOLVER";

/// Affine expression `constant + sum coef * x[index]`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LinExpr {
    pub terms: BTreeMap<usize, f64>,
    pub constant: f64,
}

impl LinExpr {
    pub fn constant(c: f64) -> Self {
        Self {
            terms: BTreeMap::new(),
            constant: c,
        }
    }

    pub fn term(index: usize, coef: f64) -> Self {
        let mut terms = BTreeMap::new();
        terms.insert(index, coef);
        Self { terms, constant: 0.0 }
    }

    pub fn add_scaled(&mut self, other: &LinExpr, scale: f64) {
        if scale == 0.0 {
            return;
        }
        for (&k, &v) in &other.terms {
            *self.terms.entry(k).or_insert(0.0) += scale * v;
        }
        self.constant += scale * other.constant;
    }

    pub fn scaled(&self, scale: f64) -> Self {
        let mut out = LinExpr::default();
        out.add_scaled(self, scale);
        out
    }

    pub fn eval(&self, x: &[f64]) -> f64 {
        self.constant + self.terms.iter().map(|(&k, &v)| v * x[k]).sum::<f64>()
    }
}

/// Dense matrix of affine expressions, used to assemble block constraints.
#[derive(Clone, Debug)]
pub struct ExprMatrix {
    rows: usize,
    cols: usize,
    data: Vec<LinExpr>,
}

impl ExprMatrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![LinExpr::default(); rows * cols],
        }
    }

    pub fn from_constant(m: &DMatrix<f64>) -> Self {
        let mut out = Self::zeros(m.nrows(), m.ncols());
        for i in 0..m.nrows() {
            for j in 0..m.ncols() {
                out.get_mut(i, j).constant = m[(i, j)];
            }
        }
        out
    }

    pub fn nrows(&self) -> usize {
        self.rows
    }

    pub fn ncols(&self) -> usize {
        self.cols
    }

    pub fn get(&self, i: usize, j: usize) -> &LinExpr {
        &self.data[i * self.cols + j]
    }

    pub fn get_mut(&mut self, i: usize, j: usize) -> &mut LinExpr {
        &mut self.data[i * self.cols + j]
    }

    /// `C * self` for a constant matrix `C`.
    pub fn left_mul(&self, c: &DMatrix<f64>) -> Self {
        assert_eq!(c.ncols(), self.rows, "left_mul shape mismatch");
        let mut out = Self::zeros(c.nrows(), self.cols);
        for i in 0..c.nrows() {
            for j in 0..self.cols {
                let acc = out.get_mut(i, j);
                for k in 0..self.rows {
                    acc.add_scaled(&self.data[k * self.cols + j], c[(i, k)]);
                }
            }
        }
        out
    }

    pub fn transpose(&self) -> Self {
        let mut out = Self::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                *out.get_mut(j, i) = self.get(i, j).clone();
            }
        }
        out
    }

    pub fn sub(&self, other: &ExprMatrix) -> Self {
        assert_eq!((self.rows, self.cols), (other.rows, other.cols), "sub shape mismatch");
        let mut out = self.clone();
        for (a, b) in out.data.iter_mut().zip(&other.data) {
            a.add_scaled(b, -1.0);
        }
        out
    }

    /// Assemble from a grid of blocks; `None` blocks are zero with the shape
    /// implied by their row and column.
    pub fn block(grid: &[Vec<Option<&ExprMatrix>>]) -> Result<Self> {
        let row_heights: Vec<usize> = grid
            .iter()
            .map(|row| row.iter().flatten().map(|b| b.rows).next().unwrap_or(0))
            .collect();
        let ncols = grid.first().map_or(0, |r| r.len());
        let col_widths: Vec<usize> = (0..ncols)
            .map(|c| grid.iter().filter_map(|row| row[c]).map(|b| b.cols).next().unwrap_or(0))
            .collect();
        let mut out = Self::zeros(row_heights.iter().sum(), col_widths.iter().sum());
        let mut r0 = 0;
        for (bi, row) in grid.iter().enumerate() {
            let mut c0 = 0;
            for (bj, blk) in row.iter().enumerate() {
                if let Some(b) = blk {
                    if b.rows != row_heights[bi] || b.cols != col_widths[bj] {
                        return Err(Error::Shape(format!("block ({bi}, {bj}) has inconsistent shape")));
                    }
                    for i in 0..b.rows {
                        for j in 0..b.cols {
                            *out.get_mut(r0 + i, c0 + j) = b.get(i, j).clone();
                        }
                    }
                }
                c0 += col_widths[bj];
            }
            r0 += row_heights[bi];
        }
        Ok(out)
    }

    pub fn eval(&self, x: &[f64]) -> DMatrix<f64> {
        DMatrix::from_fn(self.rows, self.cols, |i, j| self.get(i, j).eval(x))
    }
}

/// Location of a matrix variable inside a program's flat scalar vector.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct VarDescriptor {
    pub program: u64,
    pub name: String,
    pub offset: usize,
    pub rows: usize,
    pub cols: usize,
    pub symmetric: bool,
}

impl VarDescriptor {
    pub fn len(&self) -> usize {
        if self.symmetric {
            self.rows * (self.rows + 1) / 2
        } else {
            self.rows * self.cols
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Index of `(i, j)`, `i <= j`, in column-wise upper-triangular order.
fn svec_index(i: usize, j: usize) -> usize {
    debug_assert!(i <= j);
    j * (j + 1) / 2 + i
}

/// Scaled upper-triangular vectorisation of a symmetric matrix.
pub fn svec(m: &DMatrix<f64>) -> Vec<f64> {
    let n = m.nrows();
    let mut out = vec![0.0; n * (n + 1) / 2];
    for j in 0..n {
        for i in 0..=j {
            out[svec_index(i, j)] = if i == j {
                m[(i, i)]
            } else {
                std::f64::consts::SQRT_2 * 0.5 * (m[(i, j)] + m[(j, i)])
            };
        }
    }
    out
}

/// Inverse of [`svec`]; the result is exactly symmetric.
pub fn smat(v: &[f64], n: usize) -> DMatrix<f64> {
    let mut m = DMatrix::zeros(n, n);
    for j in 0..n {
        for i in 0..=j {
            let s = v[svec_index(i, j)];
            if i == j {
                m[(i, i)] = s;
            } else {
                let e = s * std::f64::consts::FRAC_1_SQRT_2;
                m[(i, j)] = e;
                m[(j, i)] = e;
            }
        }
    }
    m
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EqualityRow {
    pub coeffs: BTreeMap<usize, f64>,
    pub rhs: f64,
}

/// Affine symmetric matrix expression constrained to be PSD. Only the upper
/// triangle is stored.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PsdBlock {
    pub dim: usize,
    /// Entries `(i, j, expr)` with `i <= j`, column-wise.
    pub entries: Vec<(usize, usize, LinExpr)>,
}

impl PsdBlock {
    pub fn eval(&self, x: &[f64]) -> DMatrix<f64> {
        let mut m = DMatrix::zeros(self.dim, self.dim);
        for (i, j, e) in &self.entries {
            let v = e.eval(x);
            m[(*i, *j)] = v;
            m[(*j, *i)] = v;
        }
        m
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ConicProgram {
    id: u64,
    num_vars: usize,
    variables: Vec<VarDescriptor>,
    equalities: Vec<EqualityRow>,
    psd_blocks: Vec<PsdBlock>,
    objective: LinExpr,
}

impl Default for ConicProgram {
    fn default() -> Self {
        Self::new()
    }
}

impl ConicProgram {
    pub fn new() -> Self {
        Self {
            id: NEXT_PROGRAM_ID.fetch_add(1, Ordering::Relaxed),
            num_vars: 0,
            variables: Vec::new(),
            equalities: Vec::new(),
            psd_blocks: Vec::new(),
            objective: LinExpr::default(),
        }
    }

    pub fn id(&self) -> u64 {
        self.id
    }

    pub fn num_vars(&self) -> usize {
        self.num_vars
    }

    pub fn equalities(&self) -> &[EqualityRow] {
        &self.equalities
    }

    pub fn psd_blocks(&self) -> &[PsdBlock] {
        &self.psd_blocks
    }

    pub fn variables(&self) -> &[VarDescriptor] {
        &self.variables
    }

    pub fn objective(&self) -> &LinExpr {
        &self.objective
    }

    fn register(&mut self, name: &str, rows: usize, cols: usize, symmetric: bool) -> VarDescriptor {
        let desc = VarDescriptor {
            program: self.id,
            name: name.to_string(),
            offset: self.num_vars,
            rows,
            cols,
            symmetric,
        };
        self.num_vars += desc.len();
        self.variables.push(desc.clone());
        desc
    }

    pub fn add_matrix_var(&mut self, name: &str, rows: usize, cols: usize) -> VarDescriptor {
        self.register(name, rows, cols, false)
    }

    pub fn add_symmetric_var(&mut self, name: &str, n: usize) -> VarDescriptor {
        self.register(name, n, n, true)
    }

    pub fn add_scalar_var(&mut self, name: &str) -> VarDescriptor {
        self.register(name, 1, 1, false)
    }

    fn check_owned(&self, desc: &VarDescriptor) -> Result<()> {
        if desc.program != self.id || !self.variables.contains(desc) {
            return Err(Error::UnknownDescriptor {
                program: desc.program,
                offset: desc.offset,
            });
        }
        Ok(())
    }

    /// Entry `(i, j)` of a matrix variable as an expression.
    pub fn entry(&self, desc: &VarDescriptor, i: usize, j: usize) -> LinExpr {
        if desc.symmetric {
            let (a, b) = if i <= j { (i, j) } else { (j, i) };
            let coef = if a == b { 1.0 } else { std::f64::consts::FRAC_1_SQRT_2 };
            LinExpr::term(desc.offset + svec_index(a, b), coef)
        } else {
            LinExpr::term(desc.offset + i * desc.cols + j, 1.0)
        }
    }

    pub fn var_matrix(&self, desc: &VarDescriptor) -> ExprMatrix {
        let mut out = ExprMatrix::zeros(desc.rows, desc.cols);
        for i in 0..desc.rows {
            for j in 0..desc.cols {
                *out.get_mut(i, j) = self.entry(desc, i, j);
            }
        }
        out
    }

    /// `expr == rhs`.
    pub fn add_equality(&mut self, expr: &LinExpr, rhs: f64) {
        self.equalities.push(EqualityRow {
            coeffs: expr.terms.clone(),
            rhs: rhs - expr.constant,
        });
    }

    /// Entrywise `lhs == rhs` for a constant right-hand side.
    pub fn add_matrix_equality(&mut self, lhs: &ExprMatrix, rhs: &DMatrix<f64>) -> Result<()> {
        if (lhs.nrows(), lhs.ncols()) != rhs.shape() {
            return Err(Error::Shape(format!(
                "equality {}x{} vs {}x{}",
                lhs.nrows(),
                lhs.ncols(),
                rhs.nrows(),
                rhs.ncols()
            )));
        }
        for i in 0..rhs.nrows() {
            for j in 0..rhs.ncols() {
                self.add_equality(lhs.get(i, j), rhs[(i, j)]);
            }
        }
        Ok(())
    }

    /// `m ⪰ 0`, reading only the upper triangle of `m`.
    pub fn add_psd(&mut self, m: &ExprMatrix) -> Result<()> {
        if m.nrows() != m.ncols() {
            return Err(Error::Shape("PSD block must be square".into()));
        }
        let dim = m.nrows();
        let mut entries = Vec::with_capacity(dim * (dim + 1) / 2);
        for j in 0..dim {
            for i in 0..=j {
                entries.push((i, j, m.get(i, j).clone()));
            }
        }
        self.psd_blocks.push(PsdBlock { dim, entries });
        Ok(())
    }

    pub fn minimize(&mut self, objective: LinExpr) {
        self.objective = objective;
    }

    /// Reshape the flat primal vector into the matrix for `desc`.
    pub fn extract_matrix(&self, primal: &[f64], desc: &VarDescriptor) -> Result<DMatrix<f64>> {
        self.check_owned(desc)?;
        if primal.len() != self.num_vars {
            return Err(Error::Shape(format!(
                "primal has {} entries, program has {}",
                primal.len(),
                self.num_vars
            )));
        }
        let slice = &primal[desc.offset..desc.offset + desc.len()];
        Ok(if desc.symmetric {
            smat(slice, desc.rows)
        } else {
            DMatrix::from_row_slice(desc.rows, desc.cols, slice)
        })
    }

    /// Self-describing JSON form for cross-checking with another solver.
    pub fn to_json(&self) -> Result<String> {
        #[derive(Serialize)]
        struct Dump<'a> {
            format: &'static str,
            #[serde(flatten)]
            program: &'a ConicProgram,
        }
        Ok(serde_json::to_string_pretty(&Dump {
            format: "iofeedback-conic-v1: minimize objective s.t. equalities, psd_blocks >= 0; symmetric vars in sqrt2-scaled column-wise upper-triangular order",
            program: self,
        })?)
    }

    pub fn solve(&self, handle: &SolverHandle) -> Result<Solution> {
        handle.validate()?;
        match handle.backend {
            Backend::Clarabel => solve_clarabel(self, handle),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Backend {
    Clarabel,
}

impl std::str::FromStr for Backend {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "clarabel" => Ok(Backend::Clarabel),
            other => Err(Error::Unknown {
                kind: "solver backend",
                name: other.to_string(),
            }),
        }
    }
}

/// Backend choice and its tolerances.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SolverHandle {
    pub backend: Backend,
    pub feasibility_tol: f64,
    pub gap_tol: f64,
    pub max_iterations: u32,
    /// Seconds.
    pub time_limit: f64,
}

impl Default for SolverHandle {
    fn default() -> Self {
        Self {
            backend: Backend::Clarabel,
            feasibility_tol: 1e-9,
            gap_tol: 1e-9,
            max_iterations: 200,
            time_limit: 60.0,
        }
    }
}

impl SolverHandle {
    /// Default handle with the backend taken from [`BACKEND_ENV`] when set.
    pub fn from_env() -> Result<Self> {
        let mut handle = Self::default();
        if let Ok(name) = std::env::var(BACKEND_ENV) {
            handle.backend = name.parse()?;
        }
        Ok(handle)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.feasibility_tol > 0.0 && self.gap_tol > 0.0 && self.time_limit > 0.0) || self.max_iterations == 0 {
            return Err(Error::Validation("solver tolerances and limits must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SolveStatus {
    Optimal,
    /// Solved to the backend's reduced accuracy.
    NearOptimal,
    Infeasible,
    Unbounded,
    NumericalFailure,
    Limit,
}

impl SolveStatus {
    pub fn is_solved(self) -> bool {
        matches!(self, SolveStatus::Optimal | SolveStatus::NearOptimal)
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SolveStats {
    pub iterations: u32,
    pub solve_time_s: f64,
    /// Largest `|a x - b|` over equality rows.
    pub equality_residual: f64,
    /// Smallest eigenvalue over all PSD blocks (`+inf` without blocks).
    pub min_psd_eigenvalue: f64,
    pub backend_primal_residual: f64,
    pub backend_dual_residual: f64,
    pub backend_gap: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Solution {
    pub status: SolveStatus,
    pub primal: Vec<f64>,
    pub objective: f64,
    pub stats: SolveStats,
}

fn map_status(s: SolverStatus) -> SolveStatus {
    match s {
        SolverStatus::Solved => SolveStatus::Optimal,
        SolverStatus::AlmostSolved => SolveStatus::NearOptimal,
        SolverStatus::PrimalInfeasible | SolverStatus::AlmostPrimalInfeasible => SolveStatus::Infeasible,
        SolverStatus::DualInfeasible | SolverStatus::AlmostDualInfeasible => SolveStatus::Unbounded,
        SolverStatus::MaxIterations | SolverStatus::MaxTime => SolveStatus::Limit,
        _ => SolveStatus::NumericalFailure,
    }
}

fn solve_clarabel(prog: &ConicProgram, handle: &SolverHandle) -> Result<Solution> {
    let n = prog.num_vars;
    let mut rows = Vec::new();
    let mut cols = Vec::new();
    let mut vals = Vec::new();
    let mut b = Vec::new();
    let mut cones = Vec::new();

    let mut row = 0;
    for eq in &prog.equalities {
        for (&k, &v) in &eq.coeffs {
            rows.push(row);
            cols.push(k);
            vals.push(v);
        }
        b.push(eq.rhs);
        row += 1;
    }
    if !prog.equalities.is_empty() {
        cones.push(SupportedConeT::ZeroConeT(prog.equalities.len()));
    }
    // s = b - A x must equal svec(block(x)).
    for blk in &prog.psd_blocks {
        for (i, j, e) in &blk.entries {
            let scale = if i == j { 1.0 } else { std::f64::consts::SQRT_2 };
            for (&k, &v) in &e.terms {
                rows.push(row);
                cols.push(k);
                vals.push(-scale * v);
            }
            b.push(scale * e.constant);
            row += 1;
        }
        cones.push(SupportedConeT::PSDTriangleConeT(blk.dim));
    }

    let a = CscMatrix::new_from_triplets(row, n, rows, cols, vals);
    let p = CscMatrix::<f64>::zeros((n, n));
    let mut q = vec![0.0; n];
    for (&k, &v) in &prog.objective.terms {
        q[k] = v;
    }

    // A failed KKT factorisation is retried once with stronger static
    // regularisation before the failure is reported.
    let started = Instant::now();
    let mut solver = None;
    for reg in STATIC_REGULARIZATION {
        let settings = DefaultSettingsBuilder::default()
            .verbose(false)
            .tol_feas(handle.feasibility_tol)
            .tol_gap_abs(handle.gap_tol)
            .tol_gap_rel(handle.gap_tol)
            .max_iter(handle.max_iterations)
            .time_limit(handle.time_limit)
            .presolve_enable(false)
            .static_regularization_constant(reg)
            .build()
            .map_err(|e| Error::Solver(format!("settings: {e:?}")))?;
        let mut attempt = DefaultSolver::new(&p, &q, &a, &b, &cones, settings)
            .map_err(|e| Error::Solver(format!("{e:?}")))?;
        attempt.solve();
        let failed = attempt.solution.status == SolverStatus::NumericalError;
        solver = Some(attempt);
        if !failed {
            break;
        }
        log::debug!("clarabel factorisation failed with static regularisation {reg:e}");
    }
    let solver = solver.expect("at least one regularisation level");
    let elapsed = started.elapsed().as_secs_f64();

    let status = map_status(solver.solution.status);
    let primal = solver.solution.x.clone();
    let objective = prog.objective.eval(&primal);
    let info = &solver.info;
    let stats = SolveStats {
        iterations: info.iterations,
        solve_time_s: elapsed,
        equality_residual: prog
            .equalities
            .iter()
            .map(|eq| {
                let lhs: f64 = eq.coeffs.iter().map(|(&k, &v)| v * primal[k]).sum();
                (lhs - eq.rhs).abs()
            })
            .fold(0.0, f64::max),
        min_psd_eigenvalue: prog
            .psd_blocks
            .iter()
            .map(|blk| min_symmetric_eigenvalue(&blk.eval(&primal)))
            .fold(f64::INFINITY, f64::min),
        backend_primal_residual: info.res_primal,
        backend_dual_residual: info.res_dual,
        backend_gap: info.gap_abs,
    };
    Ok(Solution {
        status,
        primal,
        objective,
        stats,
    })
}
