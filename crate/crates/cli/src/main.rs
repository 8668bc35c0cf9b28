use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use log::info;
use regiohydro::adjoint::{cost, fd_gradient_with, grad_theta, CheckpointPlan, HydroProblem};
use regiohydro::cost::CostSpec;
use regiohydro::hydro::{ParameterFields, PARAM_NAMES};
use regiohydro::io::{GaugeRole, IoError, RunConfig};
use regiohydro::optimize::{
    load_dataset, run_calibration, run_validation, twin_generate, write_twin,
    CalibrationOutcome, RunError, TwinSpec,
};
use regiohydro::regio::parse_control;

#[derive(Parser)]
#[command(name = "regiohydro", version, about = "Distributed rainfall-runoff calibration and regionalization")]
struct Cli {
    /// Log progress to stderr (repeat for more detail).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Calibrate the configured mapping and write all outputs.
    Calibrate { config: PathBuf },
    /// Score a stored control over every window without optimizing.
    Validate { config: PathBuf, control: PathBuf },
    /// Generate a synthetic twin problem from the config's [twin] section.
    Twin { config: PathBuf },
    /// Compare adjoint and finite-difference gradients at a random point.
    Gradcheck {
        config: PathBuf,
        /// Number of cells checked, spread evenly over the domain.
        #[arg(long, default_value_t = 16)]
        cells: usize,
        /// Relative step as a fraction of each bound interval.
        #[arg(long, default_value_t = 1e-4)]
        step: f64,
        /// Largest accepted relative error.
        #[arg(long, default_value_t = 1e-4)]
        tolerance: f64,
    },
}

enum Failure {
    Input(String),
    Numerical(String),
}

impl From<RunError> for Failure {
    fn from(e: RunError) -> Self {
        match e.exit_code() {
            2 => Failure::Numerical(e.to_string()),
            _ => Failure::Input(e.to_string()),
        }
    }
}

impl From<IoError> for Failure {
    fn from(e: IoError) -> Self {
        Failure::Input(e.to_string())
    }
}

fn summary(outcome: &CalibrationOutcome) -> String {
    let mut s = String::new();
    writeln!(s, "kind {}", outcome.control.kind().as_str()).unwrap();
    if let Some(t) = outcome.termination {
        writeln!(s, "iterations {} ({t:?})", outcome.trace.len()).unwrap();
    }
    writeln!(s, "cost {:.10}", outcome.cost).unwrap();
    for m in &outcome.metrics {
        let f = |v: Option<f64>| v.map_or_else(|| "n/a".to_string(), |v| format!("{v:.6}"));
        writeln!(s, "{:<8} {:<12} nse {} kge {}", m.window, m.gauge, f(m.nse), f(m.kge)).unwrap();
    }
    s
}

fn calibrate(config: &Path) -> Result<String, Failure> {
    let cfg = RunConfig::load(config)?;
    let outcome = run_calibration(&cfg)?;
    Ok(summary(&outcome))
}

fn validate(config: &Path, control: &Path) -> Result<String, Failure> {
    let cfg = RunConfig::load(config)?;
    let text = fs::read_to_string(control)
        .map_err(|e| Failure::Input(format!("{}: {e}", control.display())))?;
    let control = parse_control(&text).map_err(|e| Failure::Input(e.to_string()))?;
    let outcome = run_validation(&cfg, control)?;
    Ok(summary(&outcome))
}

fn twin(config: &Path) -> Result<String, Failure> {
    let cfg = RunConfig::load(config)?;
    let spec = TwinSpec::from_config(&cfg)?;
    let problem = twin_generate(&spec)?;
    let path = write_twin(&problem, &cfg, &cfg.output.dir)?;
    let mut s = String::new();
    for g in &problem.dataset.gauges {
        writeln!(s, "gauge {} at {} ({:?})", g.name, g.cell, g.role).unwrap();
    }
    writeln!(s, "config {}", path.display()).unwrap();
    Ok(s)
}

fn gradcheck(config: &Path, cells: usize, step: f64, tolerance: f64) -> Result<String, Failure> {
    let cfg = RunConfig::load(config)?;
    let data = load_dataset(&cfg)?;
    let bounds = cfg.bounds.to_bounds()?;
    if cfg.time.warmup >= cfg.time.split {
        return Err(Failure::Input("time.warmup must precede time.split".into()));
    }
    let end = cfg.time.split;
    if end > data.forcing.nt() {
        return Err(Failure::Input(format!("time.split exceeds {} steps", data.forcing.nt())));
    }
    let gauges = data.gauge_set(GaugeRole::Calibration, end)?;
    let forcing = data.forcing.window(0, end);
    let spec = CostSpec::equal_weights(gauges.len(), cfg.time.warmup, end);
    let problem = HydroProblem {
        mesh: &data.mesh,
        forcing: &forcing,
        gauges: &gauges,
        spec: &spec,
    };

    // reproducible interior point: a fixed fraction pattern per cell
    let n = data.mesh.n_cells();
    let mut state = cfg.seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) | 1;
    let mut next = || {
        state ^= state << 13;
        state ^= state >> 7;
        state ^= state << 17;
        0.1 + 0.8 * ((state >> 11) as f64 / (1u64 << 53) as f64)
    };
    let params = ParameterFields::new(std::array::from_fn(|k| {
        let (l, u) = bounds.get(k);
        (0..n).map(|_| l + (u - l) * next()).collect()
    }));

    let g = grad_theta(&problem, &params, CheckpointPlan::sqrt(end))
        .map_err(|e| Failure::Numerical(e.to_string()))?;
    let picked: Vec<usize> = (0..cells.min(n)).map(|i| i * n / cells.min(n).max(1)).collect();
    let steps = std::array::from_fn(|k| {
        let (l, u) = bounds.get(k);
        step * (u - l)
    });
    let mut s = String::from("param,cell,adjoint,finite_difference,relative_error\n");
    let mut worst = 0.0f64;
    for &c in &picked {
        // restrict central differences to one cell at a time
        let mut single = params.clone();
        let fd = fd_gradient_with(
            |th| {
                for k in 0..4 {
                    single.fields[k][c] = th.fields[k][0];
                }
                cost(&problem, &single)
            },
            &ParameterFields::new(std::array::from_fn(|k| vec![params.fields[k][c]])),
            steps,
            &bounds,
        )
        .map_err(|e| Failure::Numerical(e.to_string()))?;
        for k in 0..4 {
            let (a, f) = (g.gradient.fields[k][c], fd.fields[k][0]);
            let rel = if f.abs() > 1e-12 {
                (a - f).abs() / a.abs().max(f.abs())
            } else {
                0.0
            };
            worst = worst.max(rel);
            writeln!(s, "{},{},{a:e},{f:e},{rel:e}", PARAM_NAMES[k], c).unwrap();
        }
    }
    fs::create_dir_all(&cfg.output.dir).map_err(|e| Failure::Input(e.to_string()))?;
    let report = cfg.output.dir.join("gradcheck.csv");
    fs::write(&report, &s).map_err(|e| Failure::Input(format!("{}: {e}", report.display())))?;
    info!("wrote {}", report.display());
    let line = format!(
        "checked {} cells, max relative error {worst:.3e} (tolerance {tolerance:e})\n",
        picked.len()
    );
    if worst < tolerance {
        Ok(line)
    } else {
        Err(Failure::Numerical(line.trim_end().to_string()))
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    let result = match &cli.command {
        Command::Calibrate { config } => calibrate(config),
        Command::Validate { config, control } => validate(config, control),
        Command::Twin { config } => twin(config),
        Command::Gradcheck {
            config,
            cells,
            step,
            tolerance,
        } => gradcheck(config, *cells, *step, *tolerance),
    };
    match result {
        Ok(text) => {
            print!("{text}");
            ExitCode::SUCCESS
        }
        Err(Failure::Input(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Numerical(msg)) => {
            eprintln!("numerical failure: {msg}");
            ExitCode::from(2)
        }
    }
}
