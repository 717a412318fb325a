use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use iofeedback::experiments::{read_dataset, write_dataset};
use iofeedback::pipeline::{
    self, collect, run_pipeline, synthesize_with_reseed, write_json, PipelineConfig, SynthesisArtifact, DATA_DIR,
    ROA_GRID_FILE, ROA_SUMMARY_FILE, SYNTHESIS_FILE, TRACE_FILE,
};
use iofeedback::roa::{AxisSpec, GridSpec};
use iofeedback::{Error, Result};

#[derive(Parser)]
#[command(version, about = "Data-driven dynamic output feedback for nonlinear SISO plants")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// JSON or TOML pipeline configuration; defaults apply to missing keys.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Window length N.
    #[arg(long = "horizon", short = 'N', global = true)]
    horizon: Option<usize>,
    /// Number of data columns T.
    #[arg(long = "columns", short = 'T', global = true)]
    columns: Option<usize>,
    /// Data realisations tried by synthesis.
    #[arg(long, global = true)]
    max_attempts: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Run the experiments and write CSV files plus a manifest.
    Collect,
    /// Solve the SDP; re-collects with fresh seeds on failure.
    Synthesize {
        /// Dataset directory from `collect`; collected afresh if absent.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Write the conic program as JSON to this path.
        #[arg(long)]
        dump_program: Option<PathBuf>,
    },
    /// Simulate the closed loop from one initial state.
    Simulate {
        #[arg(long)]
        result: Option<PathBuf>,
        /// Initial plant state, comma separated.
        #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
        x0: Option<Vec<f64>>,
    },
    /// Certify a sublevel set and simulate the initial-state grid.
    Roa {
        #[arg(long)]
        result: Option<PathBuf>,
        /// Points per axis.
        #[arg(long)]
        count: Option<usize>,
        /// Half-width of the square grid around the origin.
        #[arg(long)]
        radius: Option<f64>,
    },
    /// All stages in sequence.
    Pipeline,
}

fn load_config(c: &Common) -> Result<PipelineConfig> {
    let mut cfg = match &c.config {
        Some(path) => PipelineConfig::load(path)?,
        None => PipelineConfig::default(),
    };
    if let Some(out) = &c.out {
        cfg.output_dir = out.clone();
    }
    if let Some(seed) = c.seed {
        cfg.experiment.seed = seed;
    }
    if let Some(n) = c.horizon {
        cfg.experiment.horizon = n;
    }
    if let Some(t) = c.columns {
        cfg.experiment.columns = t;
    }
    if let Some(a) = c.max_attempts {
        cfg.max_attempts = a;
    }
    cfg.apply_env()?;
    Ok(cfg)
}

fn result_path(cfg: &PipelineConfig, given: &Option<PathBuf>) -> PathBuf {
    given.clone().unwrap_or_else(|| cfg.output_dir.join(SYNTHESIS_FILE))
}

fn run(cli: Cli) -> Result<()> {
    let mut cfg = load_config(&cli.common)?;
    match cli.command {
        Command::Collect => {
            cfg.validate()?;
            let raw = collect(&cfg)?;
            let dir = cfg.output_dir.join(DATA_DIR);
            let files = write_dataset(&dir, &raw, &cfg.hash())?;
            println!("wrote {} files to {}", files.len(), dir.display());
        }
        Command::Synthesize { data, dump_program } => {
            cfg.validate()?;
            fs::create_dir_all(&cfg.output_dir)?;
            let first = match data {
                Some(dir) => {
                    let (raw, _) = read_dataset(&dir)?;
                    cfg.experiment = raw.config.clone();
                    cfg.validate()?;
                    Some(raw)
                }
                None => None,
            };
            let synth = synthesize_with_reseed(&cfg, first, &|_| Ok(()), dump_program.as_deref())?;
            let art = synth.artifact;
            let path = cfg.output_dir.join(SYNTHESIS_FILE);
            art.write(&path)?;
            let r = &art.result;
            println!("seed {} after {} attempt(s)", art.seed, art.attempts.len());
            println!("kappa = {:?}", r.kappa);
            println!(
                "objective = {:.6e}, spectral radius of M = {:.6}, certificate margin = {:.3e}",
                r.objective_value, r.diagnostics.spectral_radius_m, art.certificate_min_eigenvalue
            );
            println!("wrote {}", path.display());
        }
        Command::Simulate { result, x0 } => {
            if let Some(x0) = x0 {
                cfg.x0 = x0;
            }
            cfg.validate()?;
            let art = SynthesisArtifact::read(&result_path(&cfg, &result))?;
            let (trace, verdict) = pipeline::simulate(&cfg, &art, &cfg.x0)?;
            fs::create_dir_all(&cfg.output_dir)?;
            let path = cfg.output_dir.join(TRACE_FILE);
            trace.write_csv(&path, &cfg.hash())?;
            let c = &cfg.convergence;
            println!(
                "verdict: {} (max |(x, eta, xi)|_inf on [{}, {}] = {:.3e})",
                verdict.as_str(),
                c.tail_start,
                c.tail_end,
                trace.tail_norm(c.tail_start, c.tail_end)
            );
            println!("wrote {}", path.display());
        }
        Command::Roa { result, count, radius } => {
            if count.is_some() || radius.is_some() {
                let count = count.unwrap_or(41);
                let r = radius.unwrap_or(1.0);
                cfg.roa_grid = GridSpec {
                    axes: vec![AxisSpec { min: -r, max: r, count }; cfg.x0.len()],
                };
            }
            cfg.validate()?;
            let art = SynthesisArtifact::read(&result_path(&cfg, &result))?;
            let (gamma, grid) = pipeline::roa(&cfg, &art)?;
            fs::create_dir_all(&cfg.output_dir)?;
            let hash = cfg.hash();
            grid.write_csv(&cfg.output_dir.join(ROA_GRID_FILE), &hash)?;
            let summary = grid.summary(Some(gamma), &hash);
            write_json(&cfg.output_dir.join(ROA_SUMMARY_FILE), &summary)?;
            println!("{}", serde_json::to_string_pretty(&summary)?);
        }
        Command::Pipeline => {
            let report = run_pipeline(&cfg)?;
            println!("{}", serde_json::to_string_pretty(&report)?);
        }
    }
    Ok(())
}

fn report(e: Error) -> ExitCode {
    eprintln!("error: {e}");
    ExitCode::from(e.exit_code() as u8)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => report(e),
    }
}
