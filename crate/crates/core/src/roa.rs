//! Region-of-attraction estimates: sampled certification of Lyapunov
//! sublevel sets `R_gamma = {z : z^T P1^-1 z <= gamma}` and a simulated grid
//! of initial plant states.

use std::io::Write;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::controller::{simulate_closed_loop, ConvergenceTest, Controller, Verdict};
use crate::dictionary::Dictionary;
use crate::error::{Error, Result};
use crate::linalg::{max_symmetric_eigenvalue, min_symmetric_eigenvalue, symmetrize, unit_sphere};
use crate::plant::{axis_points, Interval, Plant};
use crate::synthesis::SynthesisResult;

/// Recorded with every certified level: the check is sampling based, and
/// the sampled box in lifted coordinates stands in for the domain of `V`.
pub const DOMAIN_CAVEAT: &str = "sampled certificate: W < 0 verified on finitely many points of R_gamma; \
the sampled lifted box is taken as the domain of V";

/// One grid axis: `count` equally spaced points on `[min, max]`, or the
/// midpoint when `count` is 1.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AxisSpec {
    pub min: f64,
    pub max: f64,
    pub count: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub axes: Vec<AxisSpec>,
}

impl GridSpec {
    /// `count x count` points on `[-r, r]^dim`.
    pub fn square(dim: usize, r: f64, count: usize) -> Self {
        Self {
            axes: vec![AxisSpec { min: -r, max: r, count }; dim],
        }
    }

    pub fn validate(&self, dim: usize) -> Result<()> {
        if self.axes.len() != dim {
            return Err(Error::Validation(format!(
                "grid has {} axes, plant state has dimension {dim}",
                self.axes.len()
            )));
        }
        for (i, a) in self.axes.iter().enumerate() {
            if a.count == 0 {
                return Err(Error::Validation(format!("grid axis {i} has count 0")));
            }
            if !(a.min.is_finite() && a.max.is_finite() && a.min <= a.max) {
                return Err(Error::Validation(format!("grid axis {i} bounds [{}, {}] invalid", a.min, a.max)));
            }
        }
        Ok(())
    }

    /// Grid points, first axis slowest.
    pub fn points(&self) -> Vec<Vec<f64>> {
        let mut out: Vec<Vec<f64>> = vec![Vec::new()];
        for a in &self.axes {
            let axis = axis_points(Interval { lo: a.min, hi: a.max }, a.count);
            out = out
                .into_iter()
                .flat_map(|prefix| {
                    axis.iter().map(move |&c| {
                        let mut p = prefix.clone();
                        p.push(c);
                        p
                    })
                })
                .collect();
        }
        out
    }
}

/// Data needed to evaluate `V` and `W` in lifted coordinates.
#[derive(Clone, Debug)]
pub struct RoaAnalysis {
    pub p1_inv: DMatrix<f64>,
    pub m: DMatrix<f64>,
    pub n_mat: DMatrix<f64>,
    pub dict: Dictionary,
    pub gamma: Option<f64>,
    /// Cholesky factor `L` with `P1^-1 = L L^T`.
    chol: DMatrix<f64>,
}

impl RoaAnalysis {
    pub fn new(p1_inv: DMatrix<f64>, m: DMatrix<f64>, n_mat: DMatrix<f64>, dict: Dictionary) -> Result<Self> {
        let n2 = 2 * dict.horizon();
        if p1_inv.shape() != (n2, n2) || m.shape() != (n2, n2) || n_mat.shape() != (n2, dict.nonlinear_len()) {
            return Err(Error::Shape(format!(
                "P1^-1 {:?}, M {:?}, N {:?} do not match a dictionary with N = {} and {} nonlinear terms",
                p1_inv.shape(),
                m.shape(),
                n_mat.shape(),
                dict.horizon(),
                dict.nonlinear_len()
            )));
        }
        let p1_inv = symmetrize(&p1_inv);
        let chol = p1_inv
            .clone()
            .cholesky()
            .ok_or_else(|| Error::Validation("P1^-1 is not positive definite".into()))?
            .l();
        Ok(Self {
            p1_inv,
            m,
            n_mat,
            dict,
            gamma: None,
            chol,
        })
    }

    pub fn from_synthesis(res: &SynthesisResult, dict: Dictionary) -> Result<Self> {
        let p1_inv = res
            .p1
            .clone()
            .try_inverse()
            .ok_or(Error::SingularP1 { condition: f64::INFINITY })?;
        Self::new(p1_inv, res.m.clone(), res.n_mat.clone(), dict)
    }

    pub fn dim(&self) -> usize {
        self.p1_inv.nrows()
    }

    fn split<'a>(&self, z: &'a [f64]) -> (&'a [f64], &'a [f64]) {
        z.split_at(self.dict.horizon())
    }

    /// `V(z) = z^T P1^-1 z`.
    pub fn value(&self, z: &[f64]) -> f64 {
        let z = DVector::from_column_slice(z);
        z.dot(&(&self.p1_inv * &z))
    }

    /// `M z + N Q(z)`.
    pub fn step(&self, z: &[f64]) -> Result<Vec<f64>> {
        let (w, xi) = self.split(z);
        let q = self.dict.eval_q(w, xi)?;
        let next = &self.m * DVector::from_column_slice(z) + &self.n_mat * q;
        Ok(next.as_slice().to_vec())
    }

    /// Whether `z` lies in the certified set `R_gamma`.
    pub fn certifies(&self, z: &[f64]) -> bool {
        self.gamma.is_some_and(|g| self.value(z) <= g)
    }

    /// Point `z` with `V(z) = gamma * |s|^2` for a direction `s`.
    fn ellipsoid_point(&self, s: &[f64], gamma: f64) -> Vec<f64> {
        let s = DVector::from_column_slice(s) * gamma.sqrt();
        let z = self
            .chol
            .transpose()
            .solve_upper_triangular(&s)
            .expect("Cholesky factor has a positive diagonal");
        z.as_slice().to_vec()
    }
}

/// `W(w, xi) = V(M z + N Q(z)) - V(z)` with `z = (w, xi)`.
pub fn lyapunov_difference(analysis: &RoaAnalysis, w: &[f64], xi: &[f64]) -> Result<f64> {
    let n = analysis.dict.horizon();
    if w.len() != n || xi.len() != n {
        return Err(Error::Shape(format!("windows must have length {n}")));
    }
    let z: Vec<f64> = w.iter().chain(xi).copied().collect();
    let next = analysis.step(&z)?;
    Ok(analysis.value(&next) - analysis.value(&z))
}

/// Sampling density and bracket for [`find_gamma`].
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GammaSearch {
    pub gamma_lo: f64,
    pub gamma_hi: f64,
    /// Points sampled on the level set `V = gamma`.
    pub level_samples: usize,
    /// Points sampled uniformly inside `R_gamma`.
    pub interior_samples: usize,
    /// Stop once the bracket is narrower than this fraction of its lower end.
    pub rel_resolution: f64,
    /// Samples closer than this to the origin are skipped.
    pub origin_exclusion: f64,
    pub seed: u64,
}

impl GammaSearch {
    /// Bracket spanning the sublevel sets whose inner radius lies between
    /// `1e-4` and `10`.
    pub fn for_analysis(analysis: &RoaAnalysis) -> Self {
        let lmin = min_symmetric_eigenvalue(&analysis.p1_inv);
        let lmax = max_symmetric_eigenvalue(&analysis.p1_inv);
        Self {
            gamma_lo: lmin * 1e-8,
            gamma_hi: lmax * 1e2,
            level_samples: 2_000,
            interior_samples: 10_000,
            rel_resolution: 1e-3,
            origin_exclusion: 1e-9,
            seed: 0x00C0_FFEE,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.gamma_lo > 0.0 && self.gamma_lo < self.gamma_hi && self.gamma_hi.is_finite()) {
            return Err(Error::Validation(format!(
                "gamma bracket [{}, {}] must satisfy 0 < lo < hi",
                self.gamma_lo, self.gamma_hi
            )));
        }
        if self.level_samples + self.interior_samples == 0 {
            return Err(Error::Validation("gamma search needs samples".into()));
        }
        if !(self.rel_resolution > 0.0) {
            return Err(Error::Validation("relative resolution must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GammaStatus {
    /// Largest sampled-certified level found by bisection.
    Certified,
    /// Every level up to the bracket's upper end passed.
    Capped,
    /// Not even the bracket's lower end passed.
    Degenerate,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GammaResult {
    pub gamma: f64,
    pub status: GammaStatus,
    /// Smallest level found to fail, if any.
    pub failed_at: Option<f64>,
    pub samples_per_level: usize,
    pub caveat: String,
}

/// Largest `gamma` in the bracket for which every sampled point of the level
/// set and of the interior of `R_gamma` has `W < 0`.
///
/// The same normalised sample cloud is rescaled for every level, so the
/// outcome is deterministic for a fixed seed.
pub fn find_gamma(analysis: &RoaAnalysis, spec: &GammaSearch) -> Result<GammaResult> {
    spec.validate()?;
    let dim = analysis.dim();
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut cloud: Vec<Vec<f64>> = (0..spec.level_samples).map(|_| unit_sphere(&mut rng, dim)).collect();
    for _ in 0..spec.interior_samples {
        let r = rng.gen::<f64>().powf(1.0 / dim as f64);
        cloud.push(unit_sphere(&mut rng, dim).into_iter().map(|c| c * r).collect());
    }
    let n = analysis.dict.horizon();
    let passes = |gamma: f64| -> Result<bool> {
        let verdicts = cloud
            .par_iter()
            .map(|s| {
                let z = analysis.ellipsoid_point(s, gamma);
                if z.iter().map(|c| c * c).sum::<f64>().sqrt() <= spec.origin_exclusion {
                    return Ok(true);
                }
                Ok(lyapunov_difference(analysis, &z[..n], &z[n..])? < 0.0)
            })
            .collect::<Result<Vec<bool>>>()?;
        Ok(verdicts.into_iter().all(|ok| ok))
    };
    let result = |gamma, status, failed_at| GammaResult {
        gamma,
        status,
        failed_at,
        samples_per_level: cloud.len(),
        caveat: DOMAIN_CAVEAT.to_string(),
    };

    if passes(spec.gamma_hi)? {
        return Ok(result(spec.gamma_hi, GammaStatus::Capped, None));
    }
    let mut bad = spec.gamma_hi;
    let mut good = None;
    let mut probe = spec.gamma_hi;
    while probe > spec.gamma_lo {
        probe = (probe / 10.0).max(spec.gamma_lo);
        if passes(probe)? {
            good = Some(probe);
            break;
        }
        bad = probe;
    }
    let Some(mut good) = good else {
        log::warn!("no positive sublevel set certified down to gamma = {:e}", spec.gamma_lo);
        return Ok(result(0.0, GammaStatus::Degenerate, Some(bad)));
    };
    while (bad - good) > spec.rel_resolution * good {
        let mid = 0.5 * (good + bad);
        if passes(mid)? {
            good = mid;
        } else {
            bad = mid;
        }
    }
    Ok(result(good, GammaStatus::Certified, Some(bad)))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridPoint {
    pub x0: Vec<f64>,
    pub verdict: Verdict,
    /// Whether the lifted state after the warm-up lies in `R_gamma`; absent
    /// without a certified level or when the warm-up did not complete.
    pub certified_start: Option<bool>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoaGridResult {
    pub grid: GridSpec,
    pub test: ConvergenceTest,
    pub points: Vec<GridPoint>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoaSummary {
    pub points: usize,
    pub converged: usize,
    pub diverged: usize,
    pub budget_exhausted: usize,
    pub certified_starts: usize,
    /// Per-axis `[min, max]` of the converged starts.
    pub converged_bounding_box: Option<Vec<[f64; 2]>>,
    pub gamma: Option<GammaResult>,
    pub config_hash: String,
}

impl RoaGridResult {
    pub fn count(&self, v: Verdict) -> usize {
        self.points.iter().filter(|p| p.verdict == v).count()
    }

    pub fn verdict_at(&self, x0: &[f64]) -> Option<Verdict> {
        self.points.iter().find(|p| p.x0 == x0).map(|p| p.verdict)
    }

    pub fn summary(&self, gamma: Option<GammaResult>, config_hash: &str) -> RoaSummary {
        let converged: Vec<&GridPoint> = self.points.iter().filter(|p| p.verdict == Verdict::Converged).collect();
        let bbox = converged.first().map(|first| {
            (0..first.x0.len())
                .map(|i| {
                    converged.iter().fold([f64::INFINITY, f64::NEG_INFINITY], |acc, p| {
                        [acc[0].min(p.x0[i]), acc[1].max(p.x0[i])]
                    })
                })
                .collect()
        });
        RoaSummary {
            points: self.points.len(),
            converged: converged.len(),
            diverged: self.count(Verdict::Diverged),
            budget_exhausted: self.count(Verdict::BudgetExhausted),
            certified_starts: self.points.iter().filter(|p| p.certified_start == Some(true)).count(),
            converged_bounding_box: bbox,
            gamma,
            config_hash: config_hash.to_string(),
        }
    }

    /// CSV with one row per grid point: `x0_1.., verdict, certified_start`.
    pub fn write_csv(&self, path: &Path, config_hash: &str) -> Result<()> {
        let mut file = std::fs::File::create(path)?;
        writeln!(file, "# config_hash={config_hash}")?;
        let mut w = csv::Writer::from_writer(file);
        let dim = self.grid.axes.len();
        let mut header: Vec<String> = (1..=dim).map(|i| format!("x0_{i}")).collect();
        header.push("verdict".into());
        header.push("certified_start".into());
        w.write_record(&header)?;
        for p in &self.points {
            let mut rec: Vec<String> = p.x0.iter().map(|v| v.to_string()).collect();
            rec.push(p.verdict.as_str().into());
            rec.push(p.certified_start.map_or(String::new(), |c| c.to_string()));
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Simulates the closed loop from every grid point with the controller
/// windows initialised at zero. Points run in parallel; results keep grid
/// order.
pub fn empirical_roa_grid(
    plant: &dyn Plant,
    ctrl: &Controller,
    grid: &GridSpec,
    test: &ConvergenceTest,
    certificate: Option<&RoaAnalysis>,
) -> Result<RoaGridResult> {
    grid.validate(plant.state_dim())?;
    test.validate()?;
    let n = ctrl.horizon();
    let init = ctrl.zero_state();
    let points = grid
        .points()
        .into_par_iter()
        .map(|x0| {
            let trace = simulate_closed_loop(plant, ctrl, &init, &x0, test.horizon, test.overflow)?;
            let certified_start = match (certificate, trace.rows.get(n)) {
                (Some(a), Some(row)) if a.gamma.is_some() => {
                    let z: Vec<f64> = row.eta.iter().chain(&row.xi).copied().collect();
                    Some(a.certifies(&z))
                }
                _ => None,
            };
            Ok(GridPoint {
                verdict: trace.verdict(test),
                x0,
                certified_start,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(RoaGridResult {
        grid: grid.clone(),
        test: *test,
        points,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::plant::{Pendulum, PendulumParams};

    fn stable_linear() -> RoaAnalysis {
        let dict = Dictionary::linear(1).unwrap();
        let m = DMatrix::from_row_slice(2, 2, &[0.5, 0.1, 0.0, 0.3]);
        RoaAnalysis::new(DMatrix::identity(2, 2), m, DMatrix::zeros(2, 0), dict).unwrap()
    }

    #[test]
    fn difference_vanishes_at_origin() {
        let a = stable_linear();
        assert_eq!(lyapunov_difference(&a, &[0.0], &[0.0]).unwrap(), 0.0);
    }

    #[test]
    fn linear_case_is_quadratic_form() {
        let a = stable_linear();
        let z = DVector::from_vec(vec![0.7, -0.4]);
        let expected = z.dot(&((a.m.transpose() * &a.p1_inv * &a.m - &a.p1_inv) * &z));
        let got = lyapunov_difference(&a, &[0.7], &[-0.4]).unwrap();
        assert!((got - expected).abs() < 1e-14);
        assert!(got < 0.0);
    }

    #[test]
    fn linear_gamma_hits_cap() {
        let a = stable_linear();
        let spec = GammaSearch {
            interior_samples: 500,
            level_samples: 200,
            ..GammaSearch::for_analysis(&a)
        };
        let res = find_gamma(&a, &spec).unwrap();
        assert_eq!(res.status, GammaStatus::Capped);
        assert_eq!(res.gamma, spec.gamma_hi);
    }

    #[test]
    fn expanding_map_is_degenerate() {
        let dict = Dictionary::linear(1).unwrap();
        let m = DMatrix::from_row_slice(2, 2, &[1.2, 0.0, 0.0, 0.3]);
        let a = RoaAnalysis::new(DMatrix::identity(2, 2), m, DMatrix::zeros(2, 0), dict).unwrap();
        let spec = GammaSearch {
            interior_samples: 500,
            level_samples: 200,
            ..GammaSearch::for_analysis(&a)
        };
        let res = find_gamma(&a, &spec).unwrap();
        assert_eq!(res.status, GammaStatus::Degenerate);
        assert_eq!(res.gamma, 0.0);
    }

    #[test]
    fn ellipsoid_points_hit_the_level() {
        let dict = Dictionary::linear(1).unwrap();
        let p = DMatrix::from_row_slice(2, 2, &[3.0, 1.0, 1.0, 2.0]);
        let a = RoaAnalysis::new(p, DMatrix::zeros(2, 2), DMatrix::zeros(2, 0), dict).unwrap();
        let z = a.ellipsoid_point(&[0.6, 0.8], 2.5);
        assert!((a.value(&z) - 2.5).abs() < 1e-12);
    }

    #[test]
    fn grid_spec_checks() {
        assert!(GridSpec::square(2, 1.0, 0).validate(2).is_err());
        assert!(GridSpec::square(2, 1.0, 3).validate(3).is_err());
        let g = GridSpec::square(2, 1.0, 3);
        let pts = g.points();
        assert_eq!(pts.len(), 9);
        assert_eq!(pts[0], vec![-1.0, -1.0]);
        assert_eq!(pts[1], vec![-1.0, 0.0]);
        assert_eq!(GridSpec::square(2, 0.0, 1).points(), vec![vec![0.0, 0.0]]);
    }

    #[test]
    fn single_point_grid_at_origin_converges() {
        let plant = Pendulum::new(PendulumParams::default()).unwrap();
        let ctrl = Controller::with_zero_warmup(vec![0.0; 6], Dictionary::pendulum(2).unwrap()).unwrap();
        let res = empirical_roa_grid(
            &plant,
            &ctrl,
            &GridSpec::square(2, 0.0, 1),
            &ConvergenceTest::default(),
            None,
        )
        .unwrap();
        assert_eq!(res.points.len(), 1);
        assert_eq!(res.points[0].verdict, Verdict::Converged);
    }

    #[test]
    fn far_start_diverges() {
        let plant = Pendulum::new(PendulumParams::default()).unwrap();
        let ctrl = Controller::with_zero_warmup(
            vec![59.677, -86.915, -0.678, -0.549, 0.0, 0.0],
            Dictionary::pendulum(2).unwrap(),
        )
        .unwrap();
        let grid = GridSpec {
            axes: vec![AxisSpec { min: 1e6, max: 1e6, count: 1 }; 2],
        };
        let res = empirical_roa_grid(&plant, &ctrl, &grid, &ConvergenceTest::default(), None).unwrap();
        assert_eq!(res.points[0].verdict, Verdict::Diverged);
    }
}
