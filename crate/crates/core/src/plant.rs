//! Simulable plants, lifted output windows and the auxiliary system.
//!
//! A plant is a discrete-time SISO system `x+ = f(x, u)`, `y = h(x)` with an
//! equilibrium at the origin. Given a horizon `N`, the map
//! `phi_N(x, v) = (h(F^0(x)), h(F^1(x, v_0)), ..., h(F^{N-1}(x, v_[0,N-2])))`
//! stacks the next `N` outputs. When it is injective in `x` the last `N`
//! outputs and inputs act as a surrogate state, and the auxiliary system
//! `w+ = A_c w + B_c h~(w, v)` reproduces the plant's input-output behaviour.

use std::collections::BTreeMap;
use std::fmt;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{inf_norm, shift_in};

/// Black-box discrete-time plant with an equilibrium at `(x, u) = (0, 0)`.
pub trait Plant: Send + Sync {
    fn name(&self) -> &str;

    fn state_dim(&self) -> usize;

    /// One step of the dynamics `f(x, u)`.
    fn step(&self, x: &[f64], u: f64) -> Vec<f64>;

    /// Measured output `h(x)`.
    fn output(&self, x: &[f64]) -> f64;

    /// Closed-form left inverse of the output window map, if the model knows one.
    ///
    /// `w` has length `N`, `v` has length `N - 1`.
    fn analytic_inverse(&self, _w: &[f64], _v: &[f64]) -> Option<Vec<f64>> {
        None
    }
}

type StepFn = dyn Fn(&[f64], f64) -> Vec<f64> + Send + Sync;
type OutputFn = dyn Fn(&[f64]) -> f64 + Send + Sync;

/// Plant assembled from closures, for models supplied through the library API.
#[derive(Clone)]
pub struct FnPlant {
    name: String,
    state_dim: usize,
    step: Arc<StepFn>,
    output: Arc<OutputFn>,
}

impl FnPlant {
    pub fn new(
        name: impl Into<String>,
        state_dim: usize,
        step: impl Fn(&[f64], f64) -> Vec<f64> + Send + Sync + 'static,
        output: impl Fn(&[f64]) -> f64 + Send + Sync + 'static,
    ) -> Self {
        Self {
            name: name.into(),
            state_dim,
            step: Arc::new(step),
            output: Arc::new(output),
        }
    }
}

impl fmt::Debug for FnPlant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("FnPlant")
            .field("name", &self.name)
            .field("state_dim", &self.state_dim)
            .finish()
    }
}

impl Plant for FnPlant {
    fn name(&self) -> &str {
        &self.name
    }

    fn state_dim(&self) -> usize {
        self.state_dim
    }

    fn step(&self, x: &[f64], u: f64) -> Vec<f64> {
        (self.step)(x, u)
    }

    fn output(&self, x: &[f64]) -> f64 {
        (self.output)(x)
    }
}

/// Closed real interval; either bound may be infinite.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Interval {
    pub lo: f64,
    pub hi: f64,
}

impl Interval {
    pub fn new(lo: f64, hi: f64) -> Result<Self> {
        if lo.is_nan() || hi.is_nan() || lo > hi {
            return Err(Error::Validation(format!("invalid interval [{lo}, {hi}]")));
        }
        Ok(Self { lo, hi })
    }

    pub fn symmetric(r: f64) -> Self {
        Self { lo: -r, hi: r }
    }

    pub fn real_line() -> Self {
        Self {
            lo: f64::NEG_INFINITY,
            hi: f64::INFINITY,
        }
    }

    pub fn contains(&self, v: f64) -> bool {
        self.lo <= v && v <= self.hi
    }

    pub fn is_finite(&self) -> bool {
        self.lo.is_finite() && self.hi.is_finite()
    }

    pub fn width(&self) -> f64 {
        self.hi - self.lo
    }
}

fn check_box(what: &'static str, point: &[f64], bounds: &[Interval]) -> Result<()> {
    for (index, (&value, b)) in point.iter().zip(bounds).enumerate() {
        if !b.contains(value) {
            return Err(Error::Range {
                what,
                index,
                value,
                lo: b.lo,
                hi: b.hi,
            });
        }
    }
    Ok(())
}

/// Lifting horizon `N` together with the state box `X` and input interval `U`
/// on which the output window map is assumed injective.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObservabilityWindow {
    pub horizon: usize,
    pub state_box: Vec<Interval>,
    pub input_box: Interval,
}

impl ObservabilityWindow {
    pub fn new(horizon: usize, state_box: Vec<Interval>, input_box: Interval) -> Result<Self> {
        if horizon == 0 {
            return Err(Error::Validation("horizon N must be at least 1".into()));
        }
        if !state_box.iter().all(|b| b.contains(0.0)) || !input_box.contains(0.0) {
            return Err(Error::Validation(
                "state box and input interval must contain the origin".into(),
            ));
        }
        Ok(Self {
            horizon,
            state_box,
            input_box,
        })
    }

    /// `X = R^n`, `U = R`.
    pub fn unbounded(horizon: usize, state_dim: usize) -> Result<Self> {
        Self::new(
            horizon,
            vec![Interval::real_line(); state_dim],
            Interval::real_line(),
        )
    }

    pub fn contains_state(&self, x: &[f64]) -> bool {
        check_box("x", x, &self.state_box).is_ok()
    }

    fn check_inputs(&self, v: &[f64]) -> Result<()> {
        for (index, &value) in v.iter().enumerate() {
            if !self.input_box.contains(value) {
                return Err(Error::Range {
                    what: "v",
                    index,
                    value,
                    lo: self.input_box.lo,
                    hi: self.input_box.hi,
                });
            }
        }
        Ok(())
    }
}

/// Physical parameters of the damped pendulum.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PendulumParams {
    /// Sampling time.
    pub ts: f64,
    pub m: f64,
    pub ell: f64,
    pub g: f64,
    /// Viscous friction coefficient.
    pub mu: f64,
}

impl Default for PendulumParams {
    fn default() -> Self {
        Self {
            ts: 0.1,
            m: 1.0,
            ell: 1.0,
            g: 9.8,
            mu: 0.01,
        }
    }
}

impl PendulumParams {
    pub fn validate(&self) -> Result<()> {
        let positive = [("ts", self.ts), ("m", self.m), ("ell", self.ell), ("g", self.g)];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Validation(format!(
                    "pendulum parameter {name} must be positive, got {v}"
                )));
            }
        }
        if !(self.mu >= 0.0 && self.mu.is_finite()) {
            return Err(Error::Validation(format!(
                "pendulum friction mu must be non-negative, got {}",
                self.mu
            )));
        }
        Ok(())
    }
}

/// Forward-Euler discretised pendulum, measured through its angle:
///
/// ```text
/// x1+ = x1 + Ts x2
/// x2+ = (Ts g / l) sin x1 + (1 - Ts mu / (m l^2)) x2 + (Ts / (m l)) cos(x1) u
/// y   = x1
/// ```
#[derive(Clone, Debug, PartialEq)]
pub struct Pendulum {
    pub params: PendulumParams,
}

impl Pendulum {
    pub fn new(params: PendulumParams) -> Result<Self> {
        params.validate()?;
        Ok(Self { params })
    }
}

impl Plant for Pendulum {
    fn name(&self) -> &str {
        "pendulum"
    }

    fn state_dim(&self) -> usize {
        2
    }

    fn step(&self, x: &[f64], u: f64) -> Vec<f64> {
        let p = &self.params;
        let damping = 1.0 - p.ts * p.mu / (p.m * p.ell * p.ell);
        vec![
            x[0] + p.ts * x[1],
            p.ts * p.g / p.ell * x[0].sin() + damping * x[1] + p.ts / (p.m * p.ell) * x[0].cos() * u,
        ]
    }

    fn output(&self, x: &[f64]) -> f64 {
        x[0]
    }

    fn analytic_inverse(&self, w: &[f64], _v: &[f64]) -> Option<Vec<f64>> {
        // The first two outputs are x1 and x1 + Ts x2 whatever the inputs.
        if w.len() < 2 {
            return None;
        }
        Some(vec![w[0], (w[1] - w[0]) / self.params.ts])
    }
}

/// Name-keyed collection of plants; `pendulum` is built in.
#[derive(Clone)]
pub struct PlantRegistry {
    plants: BTreeMap<String, Arc<dyn Plant>>,
}

impl PlantRegistry {
    pub fn with_builtins(pendulum: PendulumParams) -> Result<Self> {
        let mut reg = Self {
            plants: BTreeMap::new(),
        };
        reg.register(Arc::new(Pendulum::new(pendulum)?));
        Ok(reg)
    }

    pub fn register(&mut self, plant: Arc<dyn Plant>) {
        self.plants.insert(plant.name().to_string(), plant);
    }

    pub fn get(&self, name: &str) -> Result<Arc<dyn Plant>> {
        self.plants.get(name).cloned().ok_or_else(|| Error::Unknown {
            kind: "plant",
            name: name.to_string(),
        })
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.plants.keys().map(String::as_str)
    }
}

/// `F^k(x0, inputs)`: apply the dynamics once per input.
pub fn iterate_dynamics(plant: &dyn Plant, x0: &[f64], inputs: &[f64]) -> Vec<f64> {
    inputs
        .iter()
        .fold(x0.to_vec(), |x, &u| plant.step(&x, u))
}

fn phi_unchecked(plant: &dyn Plant, horizon: usize, x: &[f64], v: &[f64]) -> Vec<f64> {
    let mut out = Vec::with_capacity(horizon);
    let mut state = x.to_vec();
    for i in 0..horizon {
        out.push(plant.output(&state));
        if i + 1 < horizon {
            state = plant.step(&state, v[i]);
        }
    }
    out
}

fn check_window_shapes(plant: &dyn Plant, win: &ObservabilityWindow, x_len: usize, v_len: usize) -> Result<()> {
    if x_len != plant.state_dim() {
        return Err(Error::Shape(format!(
            "state has length {x_len}, plant `{}` has dimension {}",
            plant.name(),
            plant.state_dim()
        )));
    }
    if v_len != win.horizon - 1 {
        return Err(Error::Shape(format!(
            "input window has length {v_len}, expected N - 1 = {}",
            win.horizon - 1
        )));
    }
    Ok(())
}

/// Output window `phi_N(x, v)`; entry `i` is `h(F^i(x, v_[0,i-1]))`.
pub fn lift_phi(plant: &dyn Plant, win: &ObservabilityWindow, x: &[f64], v: &[f64]) -> Result<Vec<f64>> {
    check_window_shapes(plant, win, x.len(), v.len())?;
    check_box("x", x, &win.state_box)?;
    win.check_inputs(v)?;
    Ok(phi_unchecked(plant, win.horizon, x, v))
}

/// Tuning of the numeric left inverse.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct InversionSettings {
    /// Finite-difference step for the Jacobian (scaled by `max(1, |x_j|)`).
    pub fd_step: f64,
    pub max_iterations: usize,
    /// Target for `||phi_N(x) - w||_inf`.
    pub tolerance: f64,
}

impl Default for InversionSettings {
    fn default() -> Self {
        Self {
            fd_step: 1e-6,
            max_iterations: 100,
            tolerance: 1e-9,
        }
    }
}

/// Damped Gauss-Newton on `phi_N(x, v) - w` with a forward-difference Jacobian.
pub fn gauss_newton_inverse(
    plant: &dyn Plant,
    win: &ObservabilityWindow,
    w: &[f64],
    v: &[f64],
    seed_x: &[f64],
    settings: &InversionSettings,
) -> Result<Vec<f64>> {
    let n = plant.state_dim();
    let horizon = win.horizon;
    let residual = |x: &[f64]| -> Vec<f64> {
        phi_unchecked(plant, horizon, x, v)
            .iter()
            .zip(w)
            .map(|(a, b)| a - b)
            .collect()
    };
    let sq = |r: &[f64]| r.iter().map(|e| e * e).sum::<f64>();

    let mut x = seed_x.to_vec();
    let mut r = residual(&x);
    let mut polish = 0;
    for _ in 0..settings.max_iterations {
        if inf_norm(&r) <= settings.tolerance {
            // A couple of extra steps tighten the state estimate well below tolerance.
            polish += 1;
            if polish > 2 {
                break;
            }
        }
        let mut jac = DMatrix::zeros(horizon, n);
        for j in 0..n {
            let h = settings.fd_step * x[j].abs().max(1.0);
            let mut xp = x.clone();
            xp[j] += h;
            let rp = residual(&xp);
            for i in 0..horizon {
                jac[(i, j)] = (rp[i] - r[i]) / h;
            }
        }
        let rhs = -DVector::from_column_slice(&r);
        let delta = jac
            .svd(true, true)
            .solve(&rhs, 1e-14)
            .map_err(|e| Error::Solver(format!("Gauss-Newton step: {e}")))?;

        let current = sq(&r);
        let mut alpha = 1.0;
        let mut accepted = false;
        while alpha >= 1e-6 {
            let trial: Vec<f64> = x.iter().zip(delta.iter()).map(|(a, d)| a + alpha * d).collect();
            let rt = residual(&trial);
            if sq(&rt) < current {
                x = trial;
                r = rt;
                accepted = true;
                break;
            }
            alpha *= 0.5;
        }
        if !accepted {
            break;
        }
    }
    let res = inf_norm(&r);
    if res <= settings.tolerance && x.iter().all(|e| e.is_finite()) {
        Ok(x)
    } else {
        Err(Error::NonConvergence {
            residual: res,
            iterations: settings.max_iterations,
        })
    }
}

/// Left inverse `psi_N(w, v)`: closed form when the plant provides one,
/// Gauss-Newton from `seed_x` otherwise.
pub fn invert_phi(
    plant: &dyn Plant,
    win: &ObservabilityWindow,
    w: &[f64],
    v: &[f64],
    seed_x: &[f64],
    settings: &InversionSettings,
) -> Result<Vec<f64>> {
    if w.len() != win.horizon {
        return Err(Error::Shape(format!(
            "output window has length {}, expected N = {}",
            w.len(),
            win.horizon
        )));
    }
    check_window_shapes(plant, win, seed_x.len(), v.len())?;
    if let Some(x) = plant.analytic_inverse(w, v) {
        return Ok(x);
    }
    gauss_newton_inverse(plant, win, w, v, seed_x, settings)
}

/// `psi(w, v) = F^N(psi_N(w, v_[0,N-2]), v)`: the current plant state
/// reconstructed from the last `N` outputs `w` and inputs `v`.
pub fn recover_state(
    plant: &dyn Plant,
    win: &ObservabilityWindow,
    w: &[f64],
    v: &[f64],
    settings: &InversionSettings,
) -> Result<Vec<f64>> {
    if v.len() != win.horizon {
        return Err(Error::Shape(format!(
            "input window has length {}, expected N = {}",
            v.len(),
            win.horizon
        )));
    }
    let seed = vec![0.0; plant.state_dim()];
    let past = invert_phi(plant, win, w, &v[..win.horizon - 1], &seed, settings)?;
    Ok(iterate_dynamics(plant, &past, v))
}

/// One step of the auxiliary system: returns `(A_c w + B_c y_w, y_w)` with
/// `y_w = h~(w, v) = h(psi(w, v))`.
pub fn auxiliary_step(
    plant: &dyn Plant,
    win: &ObservabilityWindow,
    w: &[f64],
    v: &[f64],
    settings: &InversionSettings,
) -> Result<(Vec<f64>, f64)> {
    let x = recover_state(plant, win, w, v, settings)?;
    let y_w = plant.output(&x);
    Ok((shift_in(w, y_w), y_w))
}

/// Outcome of the sampled injectivity check.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct InjectivityReport {
    pub pairs_checked: usize,
    /// `(x_a, x_b, |x_a - x_b|_inf, |phi(x_a) - phi(x_b)|_inf)` for offending pairs.
    pub violations: Vec<(Vec<f64>, Vec<f64>, f64, f64)>,
}

impl InjectivityReport {
    pub fn passed(&self) -> bool {
        self.violations.is_empty()
    }
}

/// Samples a regular grid of `probe_box` and flags pairs of states further
/// than `10 * tol` apart whose output windows are closer than `tol`.
///
/// This is a diagnostic only: passing it does not prove injectivity.
pub fn injectivity_probe(
    plant: &dyn Plant,
    win: &ObservabilityWindow,
    probe_box: &[Interval],
    per_axis: usize,
    v: &[f64],
    tol: f64,
) -> Result<InjectivityReport> {
    if probe_box.len() != plant.state_dim() || probe_box.iter().any(|b| !b.is_finite()) {
        return Err(Error::Validation(
            "injectivity probe needs a finite box matching the state dimension".into(),
        ));
    }
    check_window_shapes(plant, win, probe_box.len(), v.len())?;
    let points = grid_points(probe_box, per_axis);
    let images: Vec<Vec<f64>> = points
        .iter()
        .map(|x| phi_unchecked(plant, win.horizon, x, v))
        .collect();
    let mut report = InjectivityReport::default();
    let dist = |a: &[f64], b: &[f64]| a.iter().zip(b).fold(0.0f64, |m, (p, q)| m.max((p - q).abs()));
    for i in 0..points.len() {
        for j in (i + 1)..points.len() {
            report.pairs_checked += 1;
            let dx = dist(&points[i], &points[j]);
            let dy = dist(&images[i], &images[j]);
            if dx > 10.0 * tol && dy < tol {
                report
                    .violations
                    .push((points[i].clone(), points[j].clone(), dx, dy));
            }
        }
    }
    Ok(report)
}

/// Tensor grid with `per_axis` points per coordinate (midpoint when 1).
pub(crate) fn grid_points(bounds: &[Interval], per_axis: usize) -> Vec<Vec<f64>> {
    let axes: Vec<Vec<f64>> = bounds.iter().map(|b| axis_points(*b, per_axis)).collect();
    let mut out: Vec<Vec<f64>> = vec![Vec::new()];
    for axis in &axes {
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

/// `count` equally spaced points on `b`; the midpoint when `count` is 1.
pub fn axis_points(b: Interval, count: usize) -> Vec<f64> {
    match count {
        0 => Vec::new(),
        1 => vec![0.5 * (b.lo + b.hi)],
        _ => (0..count)
            .map(|i| b.lo + b.width() * i as f64 / (count - 1) as f64)
            .collect(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn pendulum() -> Pendulum {
        Pendulum::new(PendulumParams::default()).unwrap()
    }

    /// Same dynamics as the built-in pendulum, but without the closed-form inverse.
    fn opaque_pendulum() -> FnPlant {
        let p = pendulum();
        let q = p.clone();
        FnPlant::new("opaque", 2, move |x, u| p.step(x, u), move |x| q.output(x))
    }

    fn window(n: usize) -> ObservabilityWindow {
        ObservabilityWindow::unbounded(n, 2).unwrap()
    }

    #[test]
    fn iterate_zero_inputs_keeps_equilibrium() {
        assert_eq!(iterate_dynamics(&pendulum(), &[0.0, 0.0], &[0.0, 0.0]), vec![0.0, 0.0]);
    }

    #[test]
    fn iterate_without_inputs_is_identity() {
        assert_eq!(iterate_dynamics(&pendulum(), &[0.2, 0.3], &[]), vec![0.2, 0.3]);
    }

    #[test]
    fn iterate_one_step_matches_hand_evaluation() {
        let x = iterate_dynamics(&pendulum(), &[0.2, 0.3], &[0.1]);
        let x2 = 0.98 * 0.2f64.sin() + 0.999 * 0.3 + 0.1 * 0.2f64.cos() * 0.1;
        assert!((x[0] - 0.23).abs() < 1e-15);
        assert!((x[1] - x2).abs() < 1e-15);
        assert!((x[1] - 0.504_196_609_957_572_4).abs() < 1e-12);
    }

    #[test]
    fn lift_phi_matches_closed_form() {
        let w = lift_phi(&pendulum(), &window(2), &[0.2, 0.3], &[0.7]).unwrap();
        assert!((w[0] - 0.2).abs() < 1e-15 && (w[1] - 0.23).abs() < 1e-15);
        assert_eq!(lift_phi(&pendulum(), &window(2), &[0.0, 0.0], &[0.0]).unwrap(), vec![0.0, 0.0]);
        assert_eq!(lift_phi(&pendulum(), &window(1), &[0.4, -1.0], &[]).unwrap(), vec![0.4]);
    }

    #[test]
    fn lift_phi_rejects_out_of_box_coordinate() {
        let win = ObservabilityWindow::new(
            2,
            vec![Interval::symmetric(1.0), Interval::symmetric(0.5)],
            Interval::symmetric(0.1),
        )
        .unwrap();
        match lift_phi(&pendulum(), &win, &[0.2, 0.9], &[0.0]) {
            Err(Error::Range { what: "x", index: 1, .. }) => {}
            other => panic!("unexpected {other:?}"),
        }
        match lift_phi(&pendulum(), &win, &[0.2, 0.1], &[0.5]) {
            Err(Error::Range { what: "v", index: 0, .. }) => {}
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn window_must_contain_origin() {
        assert!(ObservabilityWindow::new(2, vec![Interval::new(0.1, 1.0).unwrap(); 2], Interval::real_line()).is_err());
        assert!(ObservabilityWindow::unbounded(0, 2).is_err());
    }

    #[test]
    fn pendulum_inverse_closed_form() {
        let s = InversionSettings::default();
        let x = invert_phi(&pendulum(), &window(2), &[0.2, 0.23], &[0.4], &[0.0, 0.0], &s).unwrap();
        assert!((x[0] - 0.2).abs() < 1e-15 && (x[1] - 0.3).abs() < 1e-12);
        let z = invert_phi(&pendulum(), &window(2), &[0.0, 0.0], &[0.0], &[0.0, 0.0], &s).unwrap();
        assert_eq!(z, vec![0.0, 0.0]);
    }

    #[test]
    fn round_trip_closed_form_and_numeric() {
        let s = InversionSettings::default();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let exact = pendulum();
        let opaque = opaque_pendulum();
        for n in [2usize, 3] {
            let win = window(n);
            for _ in 0..100 {
                let x = [rng.gen_range(-0.5..=0.5), rng.gen_range(-0.5..=0.5)];
                let v: Vec<f64> = (0..n - 1).map(|_| rng.gen_range(-0.5..=0.5)).collect();
                let w = lift_phi(&exact, &win, &x, &v).unwrap();
                let xe = invert_phi(&exact, &win, &w, &v, &[0.0, 0.0], &s).unwrap();
                assert!(inf_norm(&[xe[0] - x[0], xe[1] - x[1]]) <= 1e-9);
                let xn = invert_phi(&opaque, &win, &w, &v, &[0.0, 0.0], &s).unwrap();
                let resid: Vec<f64> = lift_phi(&opaque, &win, &xn, &v)
                    .unwrap()
                    .iter()
                    .zip(&w)
                    .map(|(a, b)| a - b)
                    .collect();
                assert!(inf_norm(&resid) <= s.tolerance);
                assert!(inf_norm(&[xn[0] - x[0], xn[1] - x[1]]) <= 1e-9);
            }
        }
    }

    #[test]
    fn numeric_inverse_reports_non_convergence() {
        // tanh never reaches 2.
        let plant = FnPlant::new("saturated", 1, |x, _| vec![0.5 * x[0]], |x| x[0].tanh());
        let win = ObservabilityWindow::unbounded(1, 1).unwrap();
        match invert_phi(&plant, &win, &[2.0], &[], &[0.0], &InversionSettings::default()) {
            Err(Error::NonConvergence { residual, .. }) => assert!(residual > 0.5),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn auxiliary_step_at_origin() {
        let (w, y) = auxiliary_step(&pendulum(), &window(2), &[0.0, 0.0], &[0.0, 0.0], &InversionSettings::default()).unwrap();
        assert_eq!((w, y), (vec![0.0, 0.0], 0.0));
    }

    #[test]
    fn auxiliary_system_reproduces_plant_output() {
        let s = InversionSettings::default();
        let plant = pendulum();
        let n = 2;
        let win = window(n);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..20 {
            let steps = 50;
            let mut x = vec![rng.gen_range(-0.3..=0.3), rng.gen_range(-0.3..=0.3)];
            let u: Vec<f64> = (0..steps + n).map(|_| rng.gen_range(-0.5..=0.5)).collect();
            let mut xs = Vec::new();
            let mut ys = Vec::new();
            for &uk in &u {
                xs.push(x.clone());
                ys.push(plant.output(&x));
                x = plant.step(&x, uk);
            }
            let mut w = ys[..n].to_vec();
            for k in n..steps + n {
                let v = &u[k - n..k];
                let xr = recover_state(&plant, &win, &w, v, &s).unwrap();
                assert!(inf_norm(&[xr[0] - xs[k][0], xr[1] - xs[k][1]]) <= 1e-8);
                let (next, y_w) = auxiliary_step(&plant, &win, &w, v, &s).unwrap();
                assert!((y_w - ys[k]).abs() <= 1e-8);
                w = next;
            }
        }
    }

    #[test]
    fn window_shift_recursion() {
        let plant = pendulum();
        let win = window(3);
        let x0 = [0.1, -0.2];
        let u = [0.3, -0.1, 0.2, 0.05];
        let w0 = lift_phi(&plant, &win, &x0, &u[..2]).unwrap();
        let x1 = plant.step(&x0, u[0]);
        let w1 = lift_phi(&plant, &win, &x1, &u[1..3]).unwrap();
        let y3 = plant.output(&iterate_dynamics(&plant, &x0, &u[..3]));
        let shifted = shift_in(&w0, y3);
        for (a, b) in shifted.iter().zip(&w1) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn injectivity_probe_flags_non_injective_window() {
        let plant = pendulum();
        let probe = [Interval::symmetric(0.5), Interval::symmetric(0.5)];
        let good = injectivity_probe(&plant, &window(2), &probe, 7, &[0.0], 1e-9).unwrap();
        assert!(good.passed());
        assert_eq!(good.pairs_checked, 49 * 48 / 2);
        let bad = injectivity_probe(&plant, &window(1), &probe, 7, &[], 1e-9).unwrap();
        assert!(!bad.passed());
    }

    #[test]
    fn registry_knows_pendulum() {
        let reg = PlantRegistry::with_builtins(PendulumParams::default()).unwrap();
        assert_eq!(reg.get("pendulum").unwrap().state_dim(), 2);
        assert!(reg.get("cartpole").is_err());
        assert!(PendulumParams { ts: 0.0, ..Default::default() }.validate().is_err());
    }

    proptest::proptest! {
        #[test]
        fn f_recursion_consistency(
            x in proptest::array::uniform2(-1.0f64..1.0),
            u in proptest::collection::vec(-1.0f64..1.0, 1..8),
        ) {
            let p = pendulum();
            let k = u.len();
            let lhs = iterate_dynamics(&p, &x, &u);
            let rhs = p.step(&iterate_dynamics(&p, &x, &u[..k - 1]), u[k - 1]);
            proptest::prop_assert_eq!(lhs, rhs);
        }

        #[test]
        fn left_inverse_on_box(
            x in proptest::array::uniform2(-1.0f64..1.0),
            v in -1.0f64..1.0,
        ) {
            let p = pendulum();
            let win = window(2);
            let w = lift_phi(&p, &win, &x, &[v]).unwrap();
            let xr = invert_phi(&p, &win, &w, &[v], &[0.0, 0.0], &InversionSettings::default()).unwrap();
            proptest::prop_assert!((xr[0] - x[0]).abs() <= 1e-9 && (xr[1] - x[1]).abs() <= 1e-9);
        }
    }
}
