//! End-to-end orchestration behind the command line: collect, assemble,
//! synthesise, certify, simulate and grid the region of attraction.

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::controller::{simulate_closed_loop, ClosedLoopTrace, ConvergenceTest, Controller, Verdict};
use crate::dictionary::{Dictionary, DictionaryManifest};
use crate::error::{Error, Result};
use crate::experiments::{assemble_matrices, run_experiments, write_dataset, write_matrices, ExperimentConfig, RawDataset};
use crate::plant::{PendulumParams, Plant, PlantRegistry};
use crate::roa::{empirical_roa_grid, find_gamma, GammaResult, GammaSearch, GridSpec, RoaAnalysis, RoaGridResult, RoaSummary};
use crate::solver::{Backend, SolverHandle, BACKEND_ENV};
use crate::synthesis::{build_sdp, lyapunov_certificate, solve_sdp, SynthesisResult, DEFAULT_EPSILON};

pub const DATA_DIR: &str = "data";
pub const MATRICES_FILE: &str = "matrices.json";
pub const SYNTHESIS_FILE: &str = "synthesis.json";
pub const TRACE_FILE: &str = "trace.csv";
pub const ROA_GRID_FILE: &str = "roa_grid.csv";
pub const ROA_SUMMARY_FILE: &str = "roa_summary.json";
pub const REPORT_FILE: &str = "report.json";

/// Sampling settings for the sublevel-set search; the bracket is derived
/// from the synthesised `P1`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GammaSettings {
    pub level_samples: usize,
    pub interior_samples: usize,
    pub rel_resolution: f64,
    pub seed: u64,
}

impl Default for GammaSettings {
    fn default() -> Self {
        Self {
            level_samples: 2_000,
            interior_samples: 10_000,
            rel_resolution: 1e-3,
            seed: 0x00C0_FFEE,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub plant: String,
    pub pendulum: PendulumParams,
    pub experiment: ExperimentConfig,
    pub dictionary: String,
    /// Margin of the strict LMI.
    pub epsilon: f64,
    pub solver: SolverHandle,
    /// Data realisations tried before synthesis is declared failed; attempt
    /// `i` uses seed `experiment.seed + i`.
    pub max_attempts: usize,
    /// Start of the reference closed-loop simulation.
    pub x0: Vec<f64>,
    /// Open-loop inputs applied during the first `N` steps; zeros if absent.
    pub warmup: Option<Vec<f64>>,
    pub convergence: ConvergenceTest,
    pub roa_grid: GridSpec,
    pub gamma: GammaSettings,
    pub output_dir: PathBuf,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            plant: "pendulum".into(),
            pendulum: PendulumParams::default(),
            experiment: ExperimentConfig::pendulum_default(1),
            dictionary: "pendulum".into(),
            epsilon: DEFAULT_EPSILON,
            solver: SolverHandle::default(),
            max_attempts: 5,
            x0: vec![0.1, 0.0],
            warmup: None,
            convergence: ConvergenceTest::default(),
            roa_grid: GridSpec::square(2, 1.0, 41),
            gamma: GammaSettings::default(),
            output_dir: PathBuf::from("out"),
        }
    }
}

impl PipelineConfig {
    /// Reads JSON, or TOML when the extension is `.toml`.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        if path.extension().is_some_and(|e| e == "toml") {
            Ok(toml::from_str(&text)?)
        } else {
            Ok(serde_json::from_str(&text)?)
        }
    }

    /// Applies the backend named in the environment, if any.
    pub fn apply_env(&mut self) -> Result<()> {
        if let Ok(name) = std::env::var(BACKEND_ENV) {
            self.solver.backend = name.parse::<Backend>()?;
        }
        Ok(())
    }

    pub fn plant(&self) -> Result<Arc<dyn Plant>> {
        PlantRegistry::with_builtins(self.pendulum)?.get(&self.plant)
    }

    pub fn dict(&self) -> Result<Dictionary> {
        Dictionary::builtin(&self.dictionary, self.experiment.horizon)
    }

    pub fn warmup(&self) -> Vec<f64> {
        self.warmup
            .clone()
            .unwrap_or_else(|| vec![0.0; self.experiment.horizon])
    }

    /// Checks every module precondition before any work is done.
    pub fn validate(&self) -> Result<()> {
        let plant = self.plant()?;
        let n = plant.state_dim();
        self.experiment.validate(n)?;
        self.dict()?;
        if !(self.epsilon > 0.0 && self.epsilon.is_finite()) {
            return Err(Error::Validation(format!("epsilon must be positive, got {}", self.epsilon)));
        }
        self.solver.validate()?;
        if self.max_attempts == 0 {
            return Err(Error::Validation("max_attempts must be at least 1".into()));
        }
        if self.x0.len() != n {
            return Err(Error::Validation(format!("x0 has {} entries, plant state has {n}", self.x0.len())));
        }
        if self.warmup().len() != self.experiment.horizon || self.warmup().iter().any(|v| !v.is_finite()) {
            return Err(Error::Validation(format!(
                "warm-up must hold N = {} finite inputs",
                self.experiment.horizon
            )));
        }
        self.convergence.validate()?;
        if self.convergence.horizon < self.experiment.horizon {
            return Err(Error::Validation("simulation horizon shorter than N".into()));
        }
        self.roa_grid.validate(n)?;
        if self.gamma.level_samples + self.gamma.interior_samples == 0 || !(self.gamma.rel_resolution > 0.0) {
            return Err(Error::Validation("gamma search needs samples and a positive resolution".into()));
        }
        Ok(())
    }

    /// First 16 hex digits of the SHA-256 of the canonical JSON form, with
    /// the output directory left out.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.output_dir = PathBuf::new();
        let bytes = serde_json::to_vec(&c).expect("config serialises");
        let digest = Sha256::digest(&bytes);
        digest.iter().take(8).map(|b| format!("{b:02x}")).collect()
    }

    fn with_seed(&self, seed: u64) -> ExperimentConfig {
        ExperimentConfig {
            seed,
            ..self.experiment.clone()
        }
    }
}

/// Runs the configured experiments.
pub fn collect(cfg: &PipelineConfig) -> Result<RawDataset> {
    let plant = cfg.plant()?;
    run_experiments(plant.as_ref(), &cfg.experiment)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttemptLog {
    pub seed: u64,
    pub outcome: String,
}

/// Everything `synthesize` writes; `simulate` and `roa` read it back.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SynthesisArtifact {
    pub config_hash: String,
    pub seed: u64,
    pub attempts: Vec<AttemptLog>,
    pub dictionary: DictionaryManifest,
    pub certificate_min_eigenvalue: f64,
    pub result: SynthesisResult,
}

impl SynthesisArtifact {
    pub fn read(path: &Path) -> Result<Self> {
        Ok(serde_json::from_str(&fs::read_to_string(path)?)?)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, serde_json::to_string_pretty(self)? + "\n")?;
        Ok(())
    }
}

pub struct Synthesized {
    pub artifact: SynthesisArtifact,
    pub dataset: RawDataset,
}

/// Extra acceptance test run on each candidate controller.
pub type Acceptance<'a> = &'a (dyn Fn(&SynthesisResult) -> Result<()> + Sync);

/// Synthesises from `first` (or freshly collected data) and, on failure,
/// re-collects with seeds `seed + 1, seed + 2, ...` up to `max_attempts`
/// data realisations. Experiment divergence is not retried.
pub fn synthesize_with_reseed(
    cfg: &PipelineConfig,
    first: Option<RawDataset>,
    accept: Acceptance<'_>,
    dump_program: Option<&Path>,
) -> Result<Synthesized> {
    let plant = cfg.plant()?;
    let dict = cfg.dict()?;
    let hash = cfg.hash();
    let mut attempts = Vec::new();
    let mut first = first;
    let mut last_err = None;
    for i in 0..cfg.max_attempts {
        let seed = cfg.experiment.seed.wrapping_add(i as u64);
        let raw = match first.take() {
            Some(raw) => raw,
            None => run_experiments(plant.as_ref(), &cfg.with_seed(seed))?,
        };
        let seed = raw.config.seed;
        let outcome = (|| {
            let dm = assemble_matrices(&raw, &dict)?;
            let problem = build_sdp(&dm, cfg.epsilon)?;
            if let Some(path) = dump_program {
                fs::write(path, problem.program().to_json()? + "\n")?;
            }
            let res = solve_sdp(&problem, &cfg.solver)?;
            let cert = lyapunov_certificate(&res)?;
            accept(&res)?;
            Ok::<_, Error>((res, cert))
        })();
        match outcome {
            Ok((result, cert)) => {
                log::info!("attempt {} (seed {seed}): controller accepted", i + 1);
                attempts.push(AttemptLog {
                    seed,
                    outcome: "accepted".into(),
                });
                return Ok(Synthesized {
                    artifact: SynthesisArtifact {
                        config_hash: hash,
                        seed,
                        attempts,
                        dictionary: dict.manifest(),
                        certificate_min_eigenvalue: cert.min_eigenvalue,
                        result,
                    },
                    dataset: raw,
                });
            }
            Err(e) if e.exit_code() == 3 => {
                log::warn!("attempt {} (seed {seed}) failed: {e}", i + 1);
                attempts.push(AttemptLog {
                    seed,
                    outcome: e.to_string(),
                });
                last_err = Some(e);
            }
            Err(e) => return Err(e),
        }
    }
    Err(last_err.unwrap_or_else(|| Error::Validation("no synthesis attempt was made".into())))
}

pub fn controller(cfg: &PipelineConfig, art: &SynthesisArtifact) -> Result<Controller> {
    let dict = cfg.dict()?;
    if dict.manifest() != art.dictionary {
        return Err(Error::Validation(format!(
            "synthesis result was built for dictionary `{}` with N = {}",
            art.dictionary.id, art.dictionary.horizon
        )));
    }
    Controller::new(art.result.kappa.clone(), dict, cfg.warmup())
}

/// Closed-loop run from `x0` with zero controller windows.
pub fn simulate(cfg: &PipelineConfig, art: &SynthesisArtifact, x0: &[f64]) -> Result<(ClosedLoopTrace, Verdict)> {
    let plant = cfg.plant()?;
    let ctrl = controller(cfg, art)?;
    let trace = simulate_closed_loop(
        plant.as_ref(),
        &ctrl,
        &ctrl.zero_state(),
        x0,
        cfg.convergence.horizon,
        cfg.convergence.overflow,
    )?;
    let verdict = trace.verdict(&cfg.convergence);
    Ok((trace, verdict))
}

/// Certified sublevel set plus the simulated grid.
pub fn roa(cfg: &PipelineConfig, art: &SynthesisArtifact) -> Result<(GammaResult, RoaGridResult)> {
    let plant = cfg.plant()?;
    let ctrl = controller(cfg, art)?;
    let mut analysis = RoaAnalysis::from_synthesis(&art.result, cfg.dict()?)?;
    let spec = GammaSearch {
        level_samples: cfg.gamma.level_samples,
        interior_samples: cfg.gamma.interior_samples,
        rel_resolution: cfg.gamma.rel_resolution,
        seed: cfg.gamma.seed,
        ..GammaSearch::for_analysis(&analysis)
    };
    let gamma = find_gamma(&analysis, &spec)?;
    if gamma.gamma > 0.0 {
        analysis.gamma = Some(gamma.gamma);
    }
    let grid = empirical_roa_grid(plant.as_ref(), &ctrl, &cfg.roa_grid, &cfg.convergence, Some(&analysis))?;
    Ok((gamma, grid))
}

/// Summary written next to the pipeline artifacts.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PipelineReport {
    pub config_hash: String,
    pub seed: u64,
    pub attempts: Vec<AttemptLog>,
    pub kappa: Vec<f64>,
    pub objective_value: f64,
    pub spectral_radius_m: f64,
    pub certificate_min_eigenvalue: f64,
    pub x0: Vec<f64>,
    pub verdict: Verdict,
    pub roa: RoaSummary,
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(value)? + "\n")?;
    Ok(())
}

/// Runs every stage and writes all artifacts under `cfg.output_dir`. A
/// candidate controller is accepted only if the reference simulation from
/// `cfg.x0` converges.
pub fn run_pipeline(cfg: &PipelineConfig) -> Result<PipelineReport> {
    cfg.validate()?;
    let out = &cfg.output_dir;
    fs::create_dir_all(out)?;
    let hash = cfg.hash();
    let dict = cfg.dict()?;

    let accept = |res: &SynthesisResult| -> Result<()> {
        let ctrl = Controller::new(res.kappa.clone(), dict.clone(), cfg.warmup())?;
        let plant = cfg.plant()?;
        let trace = simulate_closed_loop(
            plant.as_ref(),
            &ctrl,
            &ctrl.zero_state(),
            &cfg.x0,
            cfg.convergence.horizon,
            cfg.convergence.overflow,
        )?;
        match trace.verdict(&cfg.convergence) {
            Verdict::Converged => Ok(()),
            v => Err(Error::ControllerRejected(format!(
                "closed loop from x0 = {:?} is {}",
                cfg.x0,
                v.as_str()
            ))),
        }
    };
    let synth = synthesize_with_reseed(cfg, None, &accept, None)?;
    let art = synth.artifact;

    write_dataset(&out.join(DATA_DIR), &synth.dataset, &hash)?;
    let dm = assemble_matrices(&synth.dataset, &dict)?;
    write_matrices(&out.join(MATRICES_FILE), &dm, &hash)?;
    art.write(&out.join(SYNTHESIS_FILE))?;

    let (trace, verdict) = simulate(cfg, &art, &cfg.x0)?;
    trace.write_csv(&out.join(TRACE_FILE), &hash)?;

    let (gamma, grid) = roa(cfg, &art)?;
    grid.write_csv(&out.join(ROA_GRID_FILE), &hash)?;
    let summary = grid.summary(Some(gamma), &hash);
    write_json(&out.join(ROA_SUMMARY_FILE), &summary)?;

    let report = PipelineReport {
        config_hash: hash,
        seed: art.seed,
        attempts: art.attempts.clone(),
        kappa: art.result.kappa.clone(),
        objective_value: art.result.objective_value,
        spectral_radius_m: art.result.diagnostics.spectral_radius_m,
        certificate_min_eigenvalue: art.certificate_min_eigenvalue,
        x0: cfg.x0.clone(),
        verdict,
        roa: summary,
    };
    write_json(&out.join(REPORT_FILE), &report)?;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_config_is_valid_and_hash_is_stable() {
        let cfg = PipelineConfig::default();
        cfg.validate().unwrap();
        assert_eq!(cfg.hash(), PipelineConfig::default().hash());
        assert_eq!(cfg.hash().len(), 16);
        let moved = PipelineConfig {
            output_dir: "elsewhere".into(),
            ..cfg.clone()
        };
        assert_eq!(moved.hash(), cfg.hash());
        let reseeded = PipelineConfig {
            experiment: ExperimentConfig::pendulum_default(2),
            ..cfg.clone()
        };
        assert_ne!(reseeded.hash(), cfg.hash());
    }

    #[test]
    fn partial_configs_fill_defaults() {
        let cfg: PipelineConfig = serde_json::from_str(r#"{"epsilon": 1e-5}"#).unwrap();
        assert_eq!(cfg.epsilon, 1e-5);
        assert_eq!(cfg.experiment.columns, 7);
        let cfg: PipelineConfig = toml::from_str("max_attempts = 2\nx0 = [0.2, 0.0]\n").unwrap();
        assert_eq!(cfg.max_attempts, 2);
        assert_eq!(cfg.x0, vec![0.2, 0.0]);
        assert!(serde_json::from_str::<PipelineConfig>(r#"{"bogus": 1}"#).is_err());
    }

    #[test]
    fn invalid_configs_rejected() {
        let bad_n = PipelineConfig {
            experiment: ExperimentConfig {
                horizon: 0,
                ..ExperimentConfig::pendulum_default(1)
            },
            ..PipelineConfig::default()
        };
        assert_eq!(bad_n.validate().unwrap_err().exit_code(), 1);
        let bad_grid = PipelineConfig {
            roa_grid: GridSpec::square(2, 1.0, 0),
            ..PipelineConfig::default()
        };
        assert!(bad_grid.validate().is_err());
        let bad_warmup = PipelineConfig {
            warmup: Some(vec![0.0]),
            ..PipelineConfig::default()
        };
        assert!(bad_warmup.validate().is_err());
    }

    #[test]
    fn reseed_skips_failing_realisations() {
        let cfg = PipelineConfig::default();
        let calls = std::sync::atomic::AtomicUsize::new(0);
        let accept = |_: &SynthesisResult| {
            if calls.fetch_add(1, std::sync::atomic::Ordering::SeqCst) < 2 {
                Err(Error::ControllerRejected("forced".into()))
            } else {
                Ok(())
            }
        };
        let s = synthesize_with_reseed(&cfg, None, &accept, None).unwrap();
        assert_eq!(s.artifact.attempts.len(), 3);
        assert_eq!(s.artifact.seed, cfg.experiment.seed + 2);
        assert_eq!(s.dataset.config.seed, s.artifact.seed);
    }

    #[test]
    fn exhausted_attempts_report_synthesis_failure() {
        let cfg = PipelineConfig {
            max_attempts: 2,
            experiment: ExperimentConfig {
                columns: 2,
                ..ExperimentConfig::pendulum_default(1)
            },
            ..PipelineConfig::default()
        };
        let err = synthesize_with_reseed(&cfg, None, &|_| Ok(()), None).err().unwrap();
        assert_eq!(err.exit_code(), 3);
        assert!(matches!(err, Error::Infeasible { rank: 2, .. }));
    }
}
