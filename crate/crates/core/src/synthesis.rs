//! Data-driven SDP for the gain `kappa`, the data-dependent closed-loop
//! matrices `M = X1 G1`, `N = X1 G2`, and the quadratic Lyapunov certificate.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::dictionary::Dictionary;
use crate::error::{Error, Result};
use crate::experiments::{BrunovskyBlocks, DataMatrices};
use crate::linalg::{
    hstack, max_abs, max_symmetric_eigenvalue, min_symmetric_eigenvalue, row_major, spectral_norm,
    spectral_radius, symmetrize, vstack,
};
use crate::solver::{ConicProgram, ExprMatrix, LinExpr, SolveStatus, SolverHandle, VarDescriptor};

/// Margin realising the strict LMI as `⪰ eps I`.
pub const DEFAULT_EPSILON: f64 = 1e-6;
/// Tolerance on post-solve linear identities.
pub const TOL_LIN: f64 = 1e-6;
/// Largest accepted condition number of `P1`.
pub const MAX_P1_CONDITION: f64 = 1e12;

/// The assembled SDP together with the data it was built from.
#[derive(Clone, Debug)]
pub struct SdpProblem {
    pub data: DataMatrices,
    pub blocks: BrunovskyBlocks,
    /// `[Y1; V1]`.
    pub x1: DMatrix<f64>,
    /// `[Y0; V0; Q0]`.
    pub w0: DMatrix<f64>,
    pub epsilon: f64,
    program: ConicProgram,
    p1: VarDescriptor,
    y1: VarDescriptor,
    g2: Option<VarDescriptor>,
}

impl SdpProblem {
    pub fn program(&self) -> &ConicProgram {
        &self.program
    }

    /// Side lengths of the PSD blocks, in insertion order.
    pub fn lmi_dims(&self) -> Vec<usize> {
        self.program.psd_blocks().iter().map(|b| b.dim).collect()
    }

    pub fn equality_count(&self) -> usize {
        self.program.equalities().len()
    }
}

fn scaled_identity(dim: usize, e: &LinExpr) -> ExprMatrix {
    let mut m = ExprMatrix::zeros(dim, dim);
    for i in 0..dim {
        *m.get_mut(i, i) = e.clone();
    }
    m
}

/// Variables `P1` (symmetric 2N x 2N), `Y1` (T x 2N), `G2` (T x (S - 2N)) and
/// the epigraph scalar `t`.
///
/// * `[Y0; V0; Q0] Y1 = [P1; 0]`
/// * `[P1, (X1 Y1)^T; X1 Y1, P1] ⪰ eps I`
/// * `[Y0; V0; Q0] G2 = [0; I]`
/// * minimise `t` subject to `[t I, X1 G2; (X1 G2)^T, t I] ⪰ 0`, i.e. the
///   spectral norm of `X1 G2`.
///
/// Without nonlinear regressors the `G2` block and the objective vanish.
pub fn build_sdp(dm: &DataMatrices, epsilon: f64) -> Result<SdpProblem> {
    dm.validate()?;
    if !(epsilon > 0.0 && epsilon.is_finite()) {
        return Err(Error::Validation(format!("LMI margin eps must be positive, got {epsilon}")));
    }
    let n2 = 2 * dm.horizon;
    let t_cols = dm.columns;
    let nq = dm.size - n2;
    let x1 = dm.successor_data();
    let w0 = dm.regressor_data();

    let mut prog = ConicProgram::new();
    let p1 = prog.add_symmetric_var("P1", n2);
    let y1 = prog.add_matrix_var("Y1", t_cols, n2);
    let p1_expr = prog.var_matrix(&p1);
    let y1_expr = prog.var_matrix(&y1);

    let lhs = y1_expr.left_mul(&w0);
    let zeros_q = ExprMatrix::zeros(nq, n2);
    let rhs = if nq > 0 {
        ExprMatrix::block(&[vec![Some(&p1_expr)], vec![Some(&zeros_q)]])?
    } else {
        p1_expr.clone()
    };
    for i in 0..dm.size {
        for j in 0..n2 {
            let mut e = lhs.get(i, j).clone();
            e.add_scaled(rhs.get(i, j), -1.0);
            prog.add_equality(&e, 0.0);
        }
    }

    let xy = y1_expr.left_mul(&x1);
    let xyt = xy.transpose();
    let mut lmi = ExprMatrix::block(&[vec![Some(&p1_expr), Some(&xyt)], vec![Some(&xy), Some(&p1_expr)]])?;
    for i in 0..2 * n2 {
        lmi.get_mut(i, i).constant -= epsilon;
    }
    prog.add_psd(&lmi)?;

    let g2 = if nq > 0 {
        let g2 = prog.add_matrix_var("G2", t_cols, nq);
        let g2_expr = prog.var_matrix(&g2);
        let mut target = DMatrix::zeros(dm.size, nq);
        target.view_mut((n2, 0), (nq, nq)).fill_with_identity();
        prog.add_matrix_equality(&g2_expr.left_mul(&w0), &target)?;

        let t = prog.add_scalar_var("t");
        let te = prog.entry(&t, 0, 0);
        let xg = g2_expr.left_mul(&x1);
        let xgt = xg.transpose();
        let top = scaled_identity(n2, &te);
        let bottom = scaled_identity(nq, &te);
        let epi = ExprMatrix::block(&[vec![Some(&top), Some(&xg)], vec![Some(&xgt), Some(&bottom)]])?;
        prog.add_psd(&epi)?;
        prog.minimize(te);
        Some(g2)
    } else {
        None
    };

    Ok(SdpProblem {
        data: dm.clone(),
        blocks: BrunovskyBlocks::new(dm.horizon),
        x1,
        w0,
        epsilon,
        program: prog,
        p1,
        y1,
        g2,
    })
}

/// Post-solve residuals and spectral quantities.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthesisDiagnostics {
    pub iterations: u32,
    pub solve_time_s: f64,
    /// Largest violation of the SDP equality rows.
    pub equality_residual: f64,
    /// Smallest eigenvalue over the PSD blocks at the returned point.
    pub min_psd_eigenvalue: f64,
    /// `max |[Y0; V0; Q0] [G1 G2] - I|`.
    pub identity_residual: f64,
    pub p1_min_eigenvalue: f64,
    pub p1_condition: f64,
    pub spectral_radius_m: f64,
    /// Spectral norm of `X1 G2` recomputed from the solution.
    pub norm_n: f64,
    /// Numerical rank of `[U0; Y0; V0; Q0]`.
    pub data_rank: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SynthesisResult {
    #[serde(rename = "N")]
    pub horizon: usize,
    #[serde(rename = "S")]
    pub size: usize,
    #[serde(with = "row_major")]
    pub p1: DMatrix<f64>,
    #[serde(with = "row_major")]
    pub y1_var: DMatrix<f64>,
    #[serde(with = "row_major")]
    pub g1: DMatrix<f64>,
    #[serde(with = "row_major")]
    pub g2: DMatrix<f64>,
    pub kappa: Vec<f64>,
    #[serde(with = "row_major")]
    pub m: DMatrix<f64>,
    #[serde(with = "row_major")]
    pub n_mat: DMatrix<f64>,
    pub solver_status: SolveStatus,
    pub objective_value: f64,
    pub epsilon: f64,
    pub diagnostics: SynthesisDiagnostics,
}

impl SynthesisResult {
    /// `M z + N Q(z)` with `z = (w, xi)`: one step of the closed loop in
    /// lifted coordinates, computed from data only.
    pub fn lifted_step(&self, dict: &Dictionary, w: &[f64], xi: &[f64]) -> Result<DVector<f64>> {
        let q = dict.eval_q(w, xi)?;
        if q.len() != self.n_mat.ncols() || w.len() != self.horizon {
            return Err(Error::Shape(format!(
                "dictionary ({} windows, {} nonlinear terms) does not match the synthesis result",
                w.len(),
                q.len()
            )));
        }
        let z = DVector::from_iterator(2 * self.horizon, w.iter().chain(xi).copied());
        Ok(&self.m * z + &self.n_mat * q)
    }

    /// `kappa Z(w, xi)`.
    pub fn control(&self, dict: &Dictionary, w: &[f64], xi: &[f64]) -> Result<f64> {
        let z = dict.eval_z(w, xi)?;
        if z.len() != self.kappa.len() {
            return Err(Error::Shape(format!(
                "regressor has {} entries, kappa has {}",
                z.len(),
                self.kappa.len()
            )));
        }
        Ok(self.kappa.iter().zip(z.iter()).map(|(k, v)| k * v).sum())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }
}

/// Solves the SDP and extracts `kappa = U0 [Y1 P1^-1, G2]`, `M` and `N`.
pub fn solve_sdp(problem: &SdpProblem, handle: &SolverHandle) -> Result<SynthesisResult> {
    let dm = &problem.data;
    let prog = &problem.program;
    let n2 = 2 * dm.horizon;
    let nq = dm.size - n2;
    let data_rank = dm.stacked_rank();

    let sol = prog.solve(handle)?;
    if !sol.status.is_solved() {
        return Err(Error::Infeasible {
            status: sol.status,
            rank: data_rank,
            rows: dm.size + 1,
        });
    }

    let p1 = symmetrize(&prog.extract_matrix(&sol.primal, &problem.p1)?);
    let y1_var = prog.extract_matrix(&sol.primal, &problem.y1)?;
    let g2 = match &problem.g2 {
        Some(d) => prog.extract_matrix(&sol.primal, d)?,
        None => DMatrix::zeros(dm.columns, 0),
    };

    let p1_min = min_symmetric_eigenvalue(&p1);
    let p1_max = max_symmetric_eigenvalue(&p1);
    let condition = if p1_min > 0.0 { p1_max / p1_min } else { f64::INFINITY };
    if !(condition <= MAX_P1_CONDITION) {
        return Err(Error::SingularP1 { condition });
    }
    let p1_inv = symmetrize(
        &p1.clone()
            .try_inverse()
            .ok_or(Error::SingularP1 { condition: f64::INFINITY })?,
    );

    let g1 = &y1_var * &p1_inv;
    let u_g = &dm.u0 * hstack(&[&g1, &g2]);
    let kappa: Vec<f64> = u_g.iter().copied().collect();
    let m = &problem.x1 * &g1;
    let n_mat = &problem.x1 * &g2;

    let identity = &problem.w0 * hstack(&[&g1, &g2]) - DMatrix::<f64>::identity(dm.size, dm.size);
    let identity_residual = max_abs(&identity);
    let rho = spectral_radius(&m);
    let diagnostics = SynthesisDiagnostics {
        iterations: sol.stats.iterations,
        solve_time_s: sol.stats.solve_time_s,
        equality_residual: sol.stats.equality_residual,
        min_psd_eigenvalue: sol.stats.min_psd_eigenvalue,
        identity_residual,
        p1_min_eigenvalue: p1_min,
        p1_condition: condition,
        spectral_radius_m: rho,
        norm_n: spectral_norm(&n_mat),
        data_rank,
    };
    log::debug!("synthesis diagnostics: {diagnostics:?}");

    if !(identity_residual <= TOL_LIN) {
        return Err(Error::PostValidation {
            what: "[Y0; V0; Q0] [G1 G2] = I",
            residual: identity_residual,
            tol: TOL_LIN,
        });
    }
    if !(rho < 1.0) {
        return Err(Error::PostValidation {
            what: "spectral radius of M below one",
            residual: rho,
            tol: 1.0,
        });
    }

    Ok(SynthesisResult {
        horizon: dm.horizon,
        size: dm.size,
        p1,
        y1_var,
        g1,
        g2,
        kappa,
        m,
        n_mat,
        solver_status: sol.status,
        objective_value: if nq > 0 { sol.objective.max(0.0) } else { 0.0 },
        epsilon: problem.epsilon,
        diagnostics,
    })
}

/// Quadratic Lyapunov function `V(z) = z^T P1^-1 z` and the margin of its
/// linear decrease.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct LyapunovCertificate {
    #[serde(with = "row_major")]
    pub p1_inv: DMatrix<f64>,
    /// Smallest eigenvalue of `P1^-1 - M^T P1^-1 M`.
    pub min_eigenvalue: f64,
}

impl LyapunovCertificate {
    pub fn value(&self, z: &DVector<f64>) -> f64 {
        z.dot(&(&self.p1_inv * z))
    }
}

/// Checks `P1^-1 - M^T P1^-1 M ≻ 0` for given `P1` and `M`.
pub fn decrease_certificate(p1: &DMatrix<f64>, m: &DMatrix<f64>) -> Result<LyapunovCertificate> {
    if !p1.is_square() || m.shape() != p1.shape() {
        return Err(Error::Shape(format!(
            "P1 is {}x{}, M is {}x{}",
            p1.nrows(),
            p1.ncols(),
            m.nrows(),
            m.ncols()
        )));
    }
    let p1_inv = symmetrize(
        &symmetrize(p1)
            .try_inverse()
            .ok_or(Error::SingularP1 { condition: f64::INFINITY })?,
    );
    let decrease = &p1_inv - m.transpose() * &p1_inv * m;
    let min_eigenvalue = min_symmetric_eigenvalue(&decrease);
    if !(min_eigenvalue > 0.0) {
        return Err(Error::Certificate { min_eigenvalue });
    }
    Ok(LyapunovCertificate { p1_inv, min_eigenvalue })
}

pub fn lyapunov_certificate(res: &SynthesisResult) -> Result<LyapunovCertificate> {
    decrease_certificate(&res.p1, &res.m)
}

/// Smallest eigenvalues of the block LMI `[P1, (X1 Y1)^T; X1 Y1, P1]` and of
/// its Schur complement `P1 - (X1 Y1)^T P1^-1 (X1 Y1)`.
pub fn schur_forms(p1: &DMatrix<f64>, x1y1: &DMatrix<f64>) -> Result<(f64, f64)> {
    let block = vstack(&[&hstack(&[p1, &x1y1.transpose()]), &hstack(&[x1y1, p1])]);
    let inv = p1
        .clone()
        .try_inverse()
        .ok_or(Error::SingularP1 { condition: f64::INFINITY })?;
    let schur = p1 - x1y1.transpose() * inv * x1y1;
    Ok((min_symmetric_eigenvalue(&block), min_symmetric_eigenvalue(&schur)))
}
