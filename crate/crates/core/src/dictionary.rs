//! Regressor `Z(w, xi) = [w; xi; Q(w, xi)]` in which the lifted output map is
//! assumed linear with unknown coefficients.

use std::fmt;
use std::sync::Arc;

use nalgebra::DVector;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::unit_sphere;
use crate::plant::PendulumParams;

type QFn = dyn Fn(&[f64], &[f64]) -> f64 + Send + Sync;

/// One nonlinear entry of `Q`.
#[derive(Clone)]
pub struct QFunction {
    pub label: String,
    f: Arc<QFn>,
}

impl QFunction {
    pub fn new(label: impl Into<String>, f: impl Fn(&[f64], &[f64]) -> f64 + Send + Sync + 'static) -> Self {
        Self {
            label: label.into(),
            f: Arc::new(f),
        }
    }

    pub fn eval(&self, w: &[f64], xi: &[f64]) -> f64 {
        (self.f)(w, xi)
    }
}

impl fmt::Debug for QFunction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.label)
    }
}

#[derive(Clone, Debug)]
pub struct Dictionary {
    id: String,
    horizon: usize,
    q: Vec<QFunction>,
}

/// Reproducibility record of a dictionary: the functions themselves are code.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DictionaryManifest {
    pub id: String,
    #[serde(rename = "N")]
    pub horizon: usize,
    #[serde(rename = "S")]
    pub size: usize,
    pub labels: Vec<String>,
}

impl Dictionary {
    /// Fails if some `Q` entry does not vanish at the origin.
    pub fn new(id: impl Into<String>, horizon: usize, q: Vec<QFunction>) -> Result<Self> {
        if horizon == 0 {
            return Err(Error::Validation("dictionary horizon N must be at least 1".into()));
        }
        let zero = vec![0.0; horizon];
        for qf in &q {
            let at_origin = qf.eval(&zero, &zero);
            if at_origin != 0.0 {
                return Err(Error::Validation(format!(
                    "dictionary entry `{}` is {at_origin} at the origin",
                    qf.label
                )));
            }
        }
        Ok(Self {
            id: id.into(),
            horizon,
            q,
        })
    }

    /// `Z = [w; xi]`.
    pub fn linear(horizon: usize) -> Result<Self> {
        Self::new("linear", horizon, Vec::new())
    }

    /// `Z = [w; xi; sin(w1) - w1; xi1 cos(w1) - xi1]`.
    pub fn pendulum(horizon: usize) -> Result<Self> {
        Self::new(
            "pendulum",
            horizon,
            vec![
                QFunction::new("sin(w1)-w1", |w, _| w[0].sin() - w[0]),
                QFunction::new("xi1*cos(w1)-xi1", |w, xi| xi[0] * w[0].cos() - xi[0]),
            ],
        )
    }

    /// Registry of built-in dictionaries.
    pub fn builtin(id: &str, horizon: usize) -> Result<Self> {
        match id {
            "pendulum" => Self::pendulum(horizon),
            "linear" => Self::linear(horizon),
            other => Err(Error::Unknown {
                kind: "dictionary",
                name: other.to_string(),
            }),
        }
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    /// `S = 2N + len(Q)`.
    pub fn size(&self) -> usize {
        2 * self.horizon + self.q.len()
    }

    pub fn nonlinear_len(&self) -> usize {
        self.q.len()
    }

    pub fn labels(&self) -> Vec<String> {
        let n = self.horizon;
        (1..=n)
            .map(|i| format!("w{i}"))
            .chain((1..=n).map(|i| format!("xi{i}")))
            .chain(self.q.iter().map(|q| q.label.clone()))
            .collect()
    }

    pub fn manifest(&self) -> DictionaryManifest {
        DictionaryManifest {
            id: self.id.clone(),
            horizon: self.horizon,
            size: self.size(),
            labels: self.labels(),
        }
    }

    fn check_lengths(&self, w: &[f64], xi: &[f64]) -> Result<()> {
        if w.len() != self.horizon || xi.len() != self.horizon {
            return Err(Error::Shape(format!(
                "dictionary expects windows of length {}, got {} and {}",
                self.horizon,
                w.len(),
                xi.len()
            )));
        }
        Ok(())
    }

    /// Nonlinear block `Q(w, xi)`.
    pub fn eval_q(&self, w: &[f64], xi: &[f64]) -> Result<DVector<f64>> {
        self.check_lengths(w, xi)?;
        let mut out = DVector::zeros(self.q.len());
        for (i, qf) in self.q.iter().enumerate() {
            let v = qf.eval(w, xi);
            if !v.is_finite() {
                return Err(Error::Evaluation {
                    label: qf.label.clone(),
                    column: None,
                });
            }
            out[i] = v;
        }
        Ok(out)
    }

    /// `Z(w, xi)` in the order `w`, `xi`, `Q`.
    pub fn eval_z(&self, w: &[f64], xi: &[f64]) -> Result<DVector<f64>> {
        let q = self.eval_q(w, xi)?;
        let n = self.horizon;
        let mut z = DVector::zeros(self.size());
        for i in 0..n {
            if !w[i].is_finite() {
                return Err(Error::Evaluation {
                    label: format!("w{}", i + 1),
                    column: None,
                });
            }
            if !xi[i].is_finite() {
                return Err(Error::Evaluation {
                    label: format!("xi{}", i + 1),
                    column: None,
                });
            }
            z[i] = w[i];
            z[n + i] = xi[i];
        }
        z.rows_mut(2 * n, q.len()).copy_from(&q);
        Ok(z)
    }
}

/// Result of the sampled vanishing-slope check.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SlopeReport {
    pub radii: Vec<f64>,
    /// `max |Q(z)| / |z|` over samples on the sphere of each radius.
    pub ratios: Vec<f64>,
    pub passed: bool,
}

const SLOPE_SEED: u64 = 0x5EED_0F15;

/// Samples spheres of decreasing radius in `(w, xi)` space and checks that
/// `max |Q| / |(w, xi)|` shrinks by at least a factor 2 per decade of radius.
pub fn check_vanishing_slope(dict: &Dictionary, radii: &[f64], samples_per_radius: usize) -> Result<SlopeReport> {
    if radii.is_empty() || radii.iter().any(|&r| !(r >= 1e-8 && r.is_finite())) {
        return Err(Error::Validation("radii must be finite and at least 1e-8".into()));
    }
    if radii.windows(2).any(|p| p[1] >= p[0]) {
        return Err(Error::Validation("radii must be strictly decreasing".into()));
    }
    if samples_per_radius == 0 {
        return Err(Error::Validation("need at least one sample per radius".into()));
    }
    let n = dict.horizon();
    let mut rng = ChaCha8Rng::seed_from_u64(SLOPE_SEED);
    let mut ratios = Vec::with_capacity(radii.len());
    for &r in radii {
        let mut worst = 0.0f64;
        for _ in 0..samples_per_radius {
            let z: Vec<f64> = unit_sphere(&mut rng, 2 * n).iter().map(|c| c * r).collect();
            let q = dict.eval_q(&z[..n], &z[n..])?;
            worst = worst.max(q.norm() / r);
        }
        ratios.push(worst);
    }
    let passed = radii.windows(2).zip(ratios.windows(2)).all(|(r, q)| {
        let decades = (r[0] / r[1]).log10();
        q[1] <= q[0] * 0.5f64.powf(decades)
    });
    Ok(SlopeReport {
        radii: radii.to_vec(),
        ratios,
        passed,
    })
}

/// Coefficients `alpha` with `h~(w, xi) = alpha Z(w, xi)`. Unknown to the
/// designer; used only to check the data-based constructions.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroundTruthExpansion {
    pub alpha: Vec<f64>,
}

/// Regroups the pendulum's lifted output map
/// `h~ = (-1 + Ts mu/(m l^2)) w1 + (2 - Ts mu/(m l^2)) w2 + (Ts^2 g/l) sin w1 + (Ts^2/(m l)) cos(w1) xi1`
/// onto the basis of [`Dictionary::pendulum`] with `N = 2`.
///
/// No parameter validation, so degenerate values can be probed.
pub fn pendulum_ground_truth(p: &PendulumParams) -> GroundTruthExpansion {
    let friction = p.ts * p.mu / (p.m * p.ell * p.ell);
    let gravity = p.ts * p.ts * p.g / p.ell;
    let actuation = p.ts * p.ts / (p.m * p.ell);
    GroundTruthExpansion {
        alpha: vec![
            -1.0 + friction + gravity,
            2.0 - friction,
            actuation,
            0.0,
            gravity,
            actuation,
        ],
    }
}

impl GroundTruthExpansion {
    pub fn apply(&self, z: &DVector<f64>) -> f64 {
        self.alpha.iter().zip(z.iter()).map(|(a, b)| a * b).sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::plant::{recover_state, InversionSettings, ObservabilityWindow, Pendulum, Plant};
    use rand::Rng;

    #[test]
    fn z_at_origin_is_zero() {
        let d = Dictionary::pendulum(2).unwrap();
        assert_eq!(d.eval_z(&[0.0, 0.0], &[0.0, 0.0]).unwrap(), DVector::zeros(6));
    }

    #[test]
    fn z_matches_regressor_definition() {
        let d = Dictionary::pendulum(2).unwrap();
        let z = d.eval_z(&[0.1, 0.2], &[0.3, 0.4]).unwrap();
        let expected = [0.1, 0.2, 0.3, 0.4, 0.1f64.sin() - 0.1, 0.3 * 0.1f64.cos() - 0.3];
        assert_eq!(z.as_slice(), &expected);
        assert_eq!(d.size(), 6);
        assert_eq!(d.labels()[4], "sin(w1)-w1");
    }

    #[test]
    fn linear_dictionary_is_identity_stack() {
        let d = Dictionary::linear(2).unwrap();
        let z = d.eval_z(&[1.0, 2.0], &[3.0, 4.0]).unwrap();
        assert_eq!(z.as_slice(), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn non_finite_entry_names_label() {
        let d = Dictionary::new("bad", 1, vec![QFunction::new("recip", |w, _| if w[0] == 0.0 { 0.0 } else { 1.0 / (w[0] - 1.0) })]).unwrap();
        match d.eval_z(&[1.0], &[0.0]) {
            Err(Error::Evaluation { label, .. }) => assert_eq!(label, "recip"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn q_must_vanish_at_origin() {
        assert!(Dictionary::new("offset", 1, vec![QFunction::new("cos", |w, _| w[0].cos())]).is_err());
    }

    #[test]
    fn vanishing_slope_verdicts() {
        let radii = [1e-1, 1e-2, 1e-3];
        let pend = check_vanishing_slope(&Dictionary::pendulum(2).unwrap(), &radii, 500).unwrap();
        assert!(pend.passed, "{pend:?}");
        // Taylor bound: |sin w1 - w1| <= r^3/6 and |xi1 (cos w1 - 1)| <= r^3/2.
        for (r, q) in pend.radii.iter().zip(&pend.ratios) {
            assert!(*q <= r * r * (1.0 / 6.0f64.powi(2) + 0.25).sqrt() + 1e-15);
        }

        let lin = Dictionary::new("ident", 1, vec![QFunction::new("w1", |w, _| w[0])]).unwrap();
        let bad = check_vanishing_slope(&lin, &radii, 500).unwrap();
        assert!(!bad.passed);
        assert!(bad.ratios.iter().all(|q| (0.9..=1.0 + 1e-12).contains(q)));

        let empty = check_vanishing_slope(&Dictionary::linear(2).unwrap(), &radii, 10).unwrap();
        assert!(empty.passed);
        assert!(empty.ratios.iter().all(|&q| q == 0.0));
    }

    #[test]
    fn slope_check_validates_radii() {
        let d = Dictionary::pendulum(2).unwrap();
        assert!(check_vanishing_slope(&d, &[1e-2, 1e-1], 10).is_err());
        assert!(check_vanishing_slope(&d, &[1e-9], 10).is_err());
    }

    #[test]
    fn ground_truth_values() {
        let a = pendulum_ground_truth(&PendulumParams::default()).alpha;
        let expected = [-0.901, 1.999, 0.01, 0.0, 0.098, 0.01];
        for (x, e) in a.iter().zip(expected) {
            assert!((x - e).abs() < 1e-12, "{a:?}");
        }
        let degenerate = PendulumParams {
            ts: 0.0,
            mu: 0.0,
            ..Default::default()
        };
        assert_eq!(pendulum_ground_truth(&degenerate).alpha, vec![-1.0, 2.0, 0.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn ground_truth_reproduces_lifted_output() {
        let params = PendulumParams::default();
        let plant = Pendulum::new(params).unwrap();
        let win = ObservabilityWindow::unbounded(2, 2).unwrap();
        let d = Dictionary::pendulum(2).unwrap();
        let gt = pendulum_ground_truth(&params);
        let s = InversionSettings::default();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..1000 {
            let w: Vec<f64> = (0..2).map(|_| rng.gen_range(-0.5..=0.5)).collect();
            let xi: Vec<f64> = (0..2).map(|_| rng.gen_range(-0.5..=0.5)).collect();
            let h = plant.output(&recover_state(&plant, &win, &w, &xi, &s).unwrap());
            let z = d.eval_z(&w, &xi).unwrap();
            assert!((h - gt.apply(&z)).abs() <= 1e-12);
        }
        assert_eq!(gt.apply(&d.eval_z(&[0.0, 0.0], &[0.0, 0.0]).unwrap()), 0.0);
    }

    proptest::proptest! {
        #[test]
        fn linear_block_is_homogeneous(
            w in proptest::array::uniform2(-1.0f64..1.0),
            xi in proptest::array::uniform2(-1.0f64..1.0),
            a in -3.0f64..3.0,
        ) {
            let d = Dictionary::pendulum(2).unwrap();
            let z = d.eval_z(&w, &xi).unwrap();
            let sw: Vec<f64> = w.iter().map(|c| a * c).collect();
            let sx: Vec<f64> = xi.iter().map(|c| a * c).collect();
            let zs = d.eval_z(&sw, &sx).unwrap();
            for i in 0..4 {
                proptest::prop_assert!((zs[i] - a * z[i]).abs() <= 1e-15);
            }
        }
    }
}
