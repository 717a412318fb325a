//! Dynamic output feedback: an input delay chain, a dead-beat output
//! observer and a switch from an open-loop warm-up to the static law
//! `u = kappa Z(eta, xi)`.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dictionary::Dictionary;
use crate::error::{Error, Result};
use crate::linalg::{inf_norm, shift_in};
use crate::plant::Plant;

#[derive(Clone, Debug)]
pub struct Controller {
    kappa: Vec<f64>,
    dict: Dictionary,
    warmup: Vec<f64>,
}

/// Controller memory; stepping returns a new value.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ControllerState {
    /// Estimate of the last `N` outputs.
    pub eta: Vec<f64>,
    /// Last `N` applied inputs.
    pub xi: Vec<f64>,
    /// Steps taken since start.
    pub phase_counter: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Phase {
    Warmup,
    Feedback,
}

impl Phase {
    pub fn as_str(self) -> &'static str {
        match self {
            Phase::Warmup => "warmup",
            Phase::Feedback => "feedback",
        }
    }
}

impl Controller {
    pub fn new(kappa: Vec<f64>, dict: Dictionary, warmup: Vec<f64>) -> Result<Self> {
        if kappa.len() != dict.size() {
            return Err(Error::Shape(format!(
                "kappa has {} entries, dictionary size is {}",
                kappa.len(),
                dict.size()
            )));
        }
        if warmup.len() != dict.horizon() {
            return Err(Error::Shape(format!(
                "warm-up has {} inputs, expected N = {}",
                warmup.len(),
                dict.horizon()
            )));
        }
        if kappa.iter().chain(&warmup).any(|v| !v.is_finite()) {
            return Err(Error::Validation("controller gains and warm-up must be finite".into()));
        }
        Ok(Self { kappa, dict, warmup })
    }

    /// All-zero warm-up.
    pub fn with_zero_warmup(kappa: Vec<f64>, dict: Dictionary) -> Result<Self> {
        let n = dict.horizon();
        Self::new(kappa, dict, vec![0.0; n])
    }

    pub fn horizon(&self) -> usize {
        self.dict.horizon()
    }

    pub fn kappa(&self) -> &[f64] {
        &self.kappa
    }

    pub fn dictionary(&self) -> &Dictionary {
        &self.dict
    }

    pub fn warmup(&self) -> &[f64] {
        &self.warmup
    }

    /// `kappa Z(eta, xi)`.
    pub fn feedback(&self, eta: &[f64], xi: &[f64]) -> Result<f64> {
        let z = self.dict.eval_z(eta, xi)?;
        Ok(self.kappa.iter().zip(z.iter()).map(|(k, v)| k * v).sum())
    }

    /// State with `eta = xi = 0`.
    pub fn zero_state(&self) -> ControllerState {
        let n = self.horizon();
        ControllerState {
            eta: vec![0.0; n],
            xi: vec![0.0; n],
            phase_counter: 0,
        }
    }

    pub fn state(&self, eta: Vec<f64>, xi: Vec<f64>) -> Result<ControllerState> {
        let n = self.horizon();
        if eta.len() != n || xi.len() != n {
            return Err(Error::Shape(format!(
                "controller windows must have length {n}, got {} and {}",
                eta.len(),
                xi.len()
            )));
        }
        Ok(ControllerState {
            eta,
            xi,
            phase_counter: 0,
        })
    }

    pub fn phase(&self, state: &ControllerState) -> Phase {
        if state.phase_counter < self.horizon() {
            Phase::Warmup
        } else {
            Phase::Feedback
        }
    }
}

/// Computes `u` from the current windows, then shifts `y` into `eta` and
/// `u` into `xi`.
pub fn controller_step(ctrl: &Controller, state: &ControllerState, y: f64) -> Result<(f64, ControllerState)> {
    let u = match ctrl.phase(state) {
        Phase::Warmup => ctrl.warmup[state.phase_counter],
        Phase::Feedback => ctrl.feedback(&state.eta, &state.xi)?,
    };
    let next = ControllerState {
        eta: shift_in(&state.eta, y),
        xi: shift_in(&state.xi, u),
        phase_counter: state.phase_counter + 1,
    };
    Ok((u, next))
}

/// One recorded time step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub k: usize,
    pub x: Vec<f64>,
    pub y: f64,
    pub u: f64,
    pub eta: Vec<f64>,
    pub xi: Vec<f64>,
    pub phase: Phase,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClosedLoopTrace {
    pub horizon: usize,
    pub rows: Vec<TraceRow>,
    /// Set when the plant state left the overflow bound; the trace then
    /// stops at the last finite step.
    pub diverged: bool,
}

/// Sup-norm test on a tail window of the trace.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceTest {
    pub horizon: usize,
    pub tail_start: usize,
    pub tail_end: usize,
    pub threshold: f64,
    /// `|x|_inf` beyond which a simulation counts as diverged.
    pub overflow: f64,
}

impl Default for ConvergenceTest {
    fn default() -> Self {
        Self {
            horizon: 200,
            tail_start: 195,
            tail_end: 200,
            threshold: 1e-6,
            overflow: 1e9,
        }
    }
}

impl ConvergenceTest {
    pub fn validate(&self) -> Result<()> {
        if !(self.tail_start <= self.tail_end && self.tail_end <= self.horizon) {
            return Err(Error::Validation(format!(
                "tail window [{}, {}] must lie inside the horizon {}",
                self.tail_start, self.tail_end, self.horizon
            )));
        }
        if !(self.threshold > 0.0 && self.overflow > self.threshold) {
            return Err(Error::Validation("need 0 < threshold < overflow".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Verdict {
    Converged,
    Diverged,
    BudgetExhausted,
}

impl Verdict {
    pub fn as_str(self) -> &'static str {
        match self {
            Verdict::Converged => "converged",
            Verdict::Diverged => "diverged",
            Verdict::BudgetExhausted => "budget-exhausted",
        }
    }
}

impl ClosedLoopTrace {
    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    /// `max |(x, eta, xi)|_inf` over `k` in `[from, to]`.
    pub fn tail_norm(&self, from: usize, to: usize) -> f64 {
        self.rows
            .iter()
            .filter(|r| r.k >= from && r.k <= to)
            .map(|r| inf_norm(&r.x).max(inf_norm(&r.eta)).max(inf_norm(&r.xi)))
            .fold(0.0, f64::max)
    }

    pub fn verdict(&self, test: &ConvergenceTest) -> Verdict {
        if self.diverged {
            return Verdict::Diverged;
        }
        if self.rows.last().map_or(true, |r| r.k < test.tail_end) {
            return Verdict::BudgetExhausted;
        }
        if self.tail_norm(test.tail_start, test.tail_end) < test.threshold {
            Verdict::Converged
        } else {
            Verdict::BudgetExhausted
        }
    }

    /// CSV with columns `k, u, y, x1.., eta1.., xi1.., phase`, preceded by a
    /// `# config_hash=` comment line.
    pub fn write_csv(&self, path: &Path, config_hash: &str) -> Result<()> {
        let mut file = std::fs::File::create(path)?;
        writeln!(file, "# config_hash={config_hash}")?;
        let mut w = csv::Writer::from_writer(file);
        let (nx, n) = self.rows.first().map_or((0, 0), |r| (r.x.len(), r.eta.len()));
        let mut header = vec!["k".to_string(), "u".into(), "y".into()];
        header.extend((1..=nx).map(|i| format!("x{i}")));
        header.extend((1..=n).map(|i| format!("eta{i}")));
        header.extend((1..=n).map(|i| format!("xi{i}")));
        header.push("phase".into());
        w.write_record(&header)?;
        for r in &self.rows {
            let mut rec = vec![r.k.to_string(), r.u.to_string(), r.y.to_string()];
            rec.extend(r.x.iter().chain(&r.eta).chain(&r.xi).map(|v| v.to_string()));
            rec.push(r.phase.as_str().to_string());
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Runs plant and controller together for `horizon` steps, recording
/// `horizon + 1` rows. Stops early once `|x|_inf` exceeds `overflow`.
pub fn simulate_closed_loop(
    plant: &dyn Plant,
    ctrl: &Controller,
    init: &ControllerState,
    x0: &[f64],
    horizon: usize,
    overflow: f64,
) -> Result<ClosedLoopTrace> {
    if horizon < ctrl.horizon() {
        return Err(Error::Validation(format!(
            "simulation horizon {horizon} is shorter than N = {}",
            ctrl.horizon()
        )));
    }
    if x0.len() != plant.state_dim() {
        return Err(Error::Shape(format!(
            "x0 has {} entries, plant state has {}",
            x0.len(),
            plant.state_dim()
        )));
    }
    let mut rows = Vec::with_capacity(horizon + 1);
    let mut x = x0.to_vec();
    let mut state = init.clone();
    let mut diverged = false;
    for k in 0..=horizon {
        if x.iter().any(|v| !v.is_finite() || v.abs() > overflow) {
            diverged = true;
            break;
        }
        let y = plant.output(&x);
        let phase = ctrl.phase(&state);
        let (u, next) = controller_step(ctrl, &state, y)?;
        rows.push(TraceRow {
            k,
            x: x.clone(),
            y,
            u,
            eta: state.eta,
            xi: state.xi,
            phase,
        });
        x = plant.step(&x, u);
        state = next;
    }
    Ok(ClosedLoopTrace {
        horizon,
        rows,
        diverged,
    })
}

/// Largest deviation of `eta(k)`, `xi(k)` from the true output and input
/// windows over `k >= N`.
pub fn check_window_consistency(trace: &ClosedLoopTrace, n: usize) -> Result<f64> {
    if trace.len() <= n {
        return Err(Error::Validation(format!(
            "trace has {} rows, need more than N = {n}",
            trace.len()
        )));
    }
    let mut worst = 0.0f64;
    for k in n..trace.len() {
        let row = &trace.rows[k];
        if row.eta.len() != n || row.xi.len() != n {
            return Err(Error::Shape(format!("row {k} windows do not have length {n}")));
        }
        for i in 0..n {
            let past = &trace.rows[k - n + i];
            worst = worst.max((row.eta[i] - past.y).abs());
            worst = worst.max((row.xi[i] - past.u).abs());
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::plant::{auxiliary_step, recover_state, InversionSettings, ObservabilityWindow, Pendulum, PendulumParams};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// A stabilising gain for the pendulum found by the SDP on seed 1.
    const KAPPA: [f64; 6] = [59.677, -86.915, -0.678, -0.549, 0.0, 0.0];

    fn pendulum() -> Pendulum {
        Pendulum::new(PendulumParams::default()).unwrap()
    }

    fn controller() -> Controller {
        Controller::with_zero_warmup(KAPPA.to_vec(), Dictionary::pendulum(2).unwrap()).unwrap()
    }

    #[test]
    fn warmup_then_feedback() {
        let c = controller();
        let s0 = c.state(vec![0.3, -0.2], vec![0.1, 0.4]).unwrap();
        let (u0, s1) = controller_step(&c, &s0, 1.5).unwrap();
        let (u1, s2) = controller_step(&c, &s1, -2.5).unwrap();
        assert_eq!((u0, u1), (0.0, 0.0));
        assert_eq!(s2.eta, vec![1.5, -2.5]);
        assert_eq!(s2.xi, vec![0.0, 0.0]);
        assert_eq!(c.phase(&s2), Phase::Feedback);
        let (u2, _) = controller_step(&c, &s2, 0.0).unwrap();
        assert_eq!(u2, c.feedback(&s2.eta, &s2.xi).unwrap());
        assert_ne!(u2, 0.0);
    }

    #[test]
    fn equilibrium_gives_zero_input() {
        let c = controller();
        let s = ControllerState {
            phase_counter: 5,
            ..c.zero_state()
        };
        assert_eq!(controller_step(&c, &s, 0.0).unwrap().0, 0.0);
    }

    #[test]
    fn custom_warmup_is_applied() {
        let c = Controller::new(KAPPA.to_vec(), Dictionary::pendulum(2).unwrap(), vec![0.25, -0.5]).unwrap();
        let trace = simulate_closed_loop(&pendulum(), &c, &c.zero_state(), &[0.0, 0.0], 10, 1e9).unwrap();
        assert_eq!(trace.rows[0].u, 0.25);
        assert_eq!(trace.rows[1].u, -0.5);
        assert_eq!(trace.rows.iter().filter(|r| r.phase == Phase::Warmup).count(), 2);
    }

    #[test]
    fn origin_stays_at_origin() {
        let c = controller();
        let trace = simulate_closed_loop(&pendulum(), &c, &c.zero_state(), &[0.0, 0.0], 200, 1e9).unwrap();
        assert_eq!(trace.len(), 201);
        assert!(trace.rows.iter().all(|r| r.u == 0.0 && r.y == 0.0 && r.x == vec![0.0, 0.0]));
        assert_eq!(trace.verdict(&ConvergenceTest::default()), Verdict::Converged);
    }

    #[test]
    fn small_start_converges() {
        let c = controller();
        let trace = simulate_closed_loop(&pendulum(), &c, &c.zero_state(), &[0.1, 0.0], 200, 1e9).unwrap();
        assert_eq!(trace.verdict(&ConvergenceTest::default()), Verdict::Converged);
        assert_eq!(check_window_consistency(&trace, 2).unwrap(), 0.0);
    }

    #[test]
    fn zero_gain_lets_pendulum_fall() {
        let c = Controller::with_zero_warmup(vec![0.0; 6], Dictionary::pendulum(2).unwrap()).unwrap();
        let trace = simulate_closed_loop(&pendulum(), &c, &c.zero_state(), &[0.1, 0.0], 200, 1e9).unwrap();
        assert_ne!(trace.verdict(&ConvergenceTest::default()), Verdict::Converged);
    }

    #[test]
    fn huge_start_diverges() {
        let c = controller();
        let trace = simulate_closed_loop(&pendulum(), &c, &c.zero_state(), &[1e6, 1e6], 200, 1e9).unwrap();
        assert!(trace.diverged);
        assert!(trace.len() < 201);
        assert_eq!(trace.verdict(&ConvergenceTest::default()), Verdict::Diverged);
    }

    #[test]
    fn windows_exact_after_n_steps_for_any_initialisation() {
        let c = controller();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..20 {
            let eta: Vec<f64> = (0..2).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let xi: Vec<f64> = (0..2).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let x0 = [rng.gen_range(-0.3..0.3), rng.gen_range(-0.3..0.3)];
            let s0 = c.state(eta, xi).unwrap();
            let trace = simulate_closed_loop(&pendulum(), &c, &s0, &x0, 50, 1e9).unwrap();
            assert_eq!(check_window_consistency(&trace, 2).unwrap(), 0.0);
            assert_ne!(trace.rows[0].eta[1], trace.rows[0].y);
        }
    }

    #[test]
    fn short_trace_rejected() {
        let c = controller();
        let trace = simulate_closed_loop(&pendulum(), &c, &c.zero_state(), &[0.1, 0.0], 2, 1e9).unwrap();
        let short = ClosedLoopTrace {
            rows: trace.rows[..2].to_vec(),
            ..trace
        };
        assert!(check_window_consistency(&short, 2).is_err());
    }

    #[test]
    fn observer_follows_auxiliary_closed_loop_and_recovers_state() {
        let plant = pendulum();
        let c = controller();
        let win = ObservabilityWindow::unbounded(2, 2).unwrap();
        let settings = InversionSettings::default();
        let trace = simulate_closed_loop(&plant, &c, &c.zero_state(), &[0.2, -0.1], 60, 1e9).unwrap();
        let (mut w, mut xi) = (trace.rows[2].eta.clone(), trace.rows[2].xi.clone());
        for row in &trace.rows[2..] {
            assert!(inf_norm(&w.iter().zip(&row.eta).map(|(a, b)| a - b).collect::<Vec<_>>()) <= 1e-8);
            assert!(inf_norm(&xi.iter().zip(&row.xi).map(|(a, b)| a - b).collect::<Vec<_>>()) <= 1e-8);
            let x = recover_state(&plant, &win, &row.eta, &row.xi, &settings).unwrap();
            assert!((x[0] - row.x[0]).abs() <= 1e-6 && (x[1] - row.x[1]).abs() <= 1e-6);
            let u = c.feedback(&w, &xi).unwrap();
            let (w_next, _) = auxiliary_step(&plant, &win, &w, &xi, &settings).unwrap();
            xi = shift_in(&xi, u);
            w = w_next;
        }
    }

    #[test]
    fn trace_csv_layout() {
        let c = controller();
        let trace = simulate_closed_loop(&pendulum(), &c, &c.zero_state(), &[0.1, 0.0], 5, 1e9).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("trace.csv");
        trace.write_csv(&path, "abc").unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next(), Some("# config_hash=abc"));
        assert_eq!(lines.next(), Some("k,u,y,x1,x2,eta1,eta2,xi1,xi2,phase"));
        assert_eq!(lines.count(), 6);
    }
}
