//! Command-line front end.
//!
//! Exit status: 0 success, 1 configuration error, 2 numerical failure, 3 invariant failure.

use std::ffi::OsString;
use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::error::ErrorKind;
use clap::{Parser, Subcommand};
use serde::Serialize;

use crate::config::RunConfig;
use crate::dynamics::{omd_eta_limit, MethodKind};
use crate::error::{Error, Result};
use crate::game::SpectralSummary;
use crate::harness::{run_resolved, sweep, write_sweep_csv, SweepParam};
use crate::theory::{self, IterationQuery, TheoryPrediction};
use crate::verify::verify_suite_with;

pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 1;
pub const EXIT_NUMERICAL: i32 = 2;
pub const EXIT_INVARIANT: i32 = 3;

const CONFIG_HELP: &str = "\
CONFIG (JSON, unknown keys rejected):
  game      {\"kind\": \"identity\", \"dim\": n}
            {\"kind\": \"diagonal\", \"values\": [..]}
            {\"kind\": \"gaussian\", \"d_theta\": n, \"d_omega\": m, \"scale\": 1.0, \"seed\": 0}
            {\"kind\": \"spectrum\", \"dim\": n, \"s_min\": a, \"s_max\": b, \"seed\": 0}
            {\"kind\": \"csv\", \"path\": \"C.csv\"}
  method    {\"kind\": \"SGA|IU|PM|CO|OMD\", \"eta\": .., \"gamma\": ..}
            eta defaults to the prescribed step size for IU and PM; gamma is required by PM and CO
  steps     number of iterations
  init      {\"kind\": \"random_sphere\", \"radius\": 1.0, \"seed\": 0}   (default)
            {\"kind\": \"explicit\", \"theta\": [..], \"omega\": [..]}
  oracle    {\"kind\": \"none|fixed_direction|adversarial_outward|uniform_random\",
             \"alpha\": .., \"seed\": 0}                           (default kind none)
            alpha defaults to the ntk formula when an ntk block is present, else 0
  ntk       {\"b\": .., \"m\": .., \"h\": .., \"c\": 1.0}              (optional)
  epsilon   target slack of iteration bounds                 (default 1e-6)
  record_average_iterate                                     (default false)
  output    {\"path\": .., \"format\": \"csv|jsonl\"}               (default csv to stdout)

EXIT STATUS: 0 ok, 1 config error, 2 numerical failure, 3 invariant failure";

#[derive(Debug, Parser)]
#[command(
    name = "lastiter",
    version,
    about = "Last-iterate dynamics of perturbed bilinear games",
    after_long_help = CONFIG_HELP
)]
pub struct Cli {
    /// Run configuration (JSON).
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,

    /// Machine-readable output.
    #[arg(long, global = true)]
    pub json: bool,

    /// Overrides the init and oracle seeds; for `verify`, seeds the instance generator (default 0).
    #[arg(long, global = true)]
    pub seed: Option<u64>,

    /// Concurrent sweep rows (default: available cores).
    #[arg(long, global = true)]
    pub jobs: Option<usize>,

    /// Output file for traces and sweep tables.
    #[arg(long, global = true, value_name = "PATH")]
    pub out: Option<PathBuf>,

    /// Print the effective configuration and exit.
    #[arg(long, global = true)]
    pub dump_config: bool,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Closed-form step size, contraction, radius and iteration bound.
    Predict,
    /// Simulate a trajectory and write its trace.
    Run,
    /// Run one trajectory per parameter value and tabulate absorption.
    Sweep {
        /// alpha, gamma, eta or width_m.
        #[arg(long)]
        param: String,
        /// Comma-separated values.
        #[arg(long, value_delimiter = ',', num_args = 1..)]
        values: Vec<f64>,
    },
    /// Randomized invariant suite.
    Verify {
        #[arg(long, hide = true)]
        inject_failure: bool,
    },
}

/// Parses `args` and runs the command, returning the process exit status.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => EXIT_OK,
                _ => EXIT_CONFIG,
            };
        }
    };
    match dispatch(&cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn dispatch(cli: &Cli) -> Result<i32> {
    if let Command::Verify { inject_failure } = cli.command {
        if cli.dump_config {
            return Err(Error::Config("--dump-config needs a run configuration".into()));
        }
        return cmd_verify(cli.seed.unwrap_or(0), inject_failure, cli.json);
    }
    let cfg = load_config(cli)?;
    if cli.dump_config {
        println!("{}", cfg.to_json_pretty());
        return Ok(EXIT_OK);
    }
    match &cli.command {
        Command::Predict => cmd_predict(&cfg, cli.json),
        Command::Run => cmd_run(&cfg, cli.out.as_deref(), cli.json),
        Command::Sweep { param, values } => {
            let param: SweepParam = param.parse()?;
            let jobs = cli.jobs.unwrap_or_else(|| {
                std::thread::available_parallelism().map_or(1, |n| n.get())
            });
            cmd_sweep(&cfg, param, values, jobs, cli.out.as_deref())
        }
        Command::Verify { .. } => unreachable!("handled above"),
    }
}

fn load_config(cli: &Cli) -> Result<RunConfig> {
    let path = cli
        .config
        .as_deref()
        .ok_or_else(|| Error::Config("--config is required".into()))?;
    let mut cfg = RunConfig::load(path).map_err(|e| match e {
        Error::Io { path, source } => Error::Config(format!("cannot read {path}: {source}")),
        other => other,
    })?;
    if let Some(seed) = cli.seed {
        cfg.reseed(seed);
    }
    Ok(cfg)
}

#[derive(Debug, Serialize)]
struct PredictReport {
    method: MethodKind,
    eta: f64,
    gamma: Option<f64>,
    spectrum: SpectralSummary,
    alpha: f64,
    r0: f64,
    epsilon: f64,
    prediction: Option<TheoryPrediction>,
    omd_eta_limit: Option<f64>,
}

fn cmd_predict(cfg: &RunConfig, json: bool) -> Result<i32> {
    let r = cfg.resolve()?;
    let kind = r.method.kind;
    let r0 = r.z0.norm();
    let prediction = match kind {
        MethodKind::Iu | MethodKind::Pm => {
            if r.game.d_omega() > r.game.d_theta() {
                return Err(Error::DegenerateSpectrum(format!(
                    "CᵀC is singular for a {}x{} payoff matrix",
                    r.game.d_theta(),
                    r.game.d_omega()
                )));
            }
            let q = IterationQuery::new(r0, cfg.epsilon)?;
            theory::predict(kind, &r.spectrum, r.method.gamma, r.alpha, &q)?
        }
        _ => None,
    };
    let report = PredictReport {
        method: kind,
        eta: r.method.eta,
        gamma: kind.needs_gamma().then_some(r.method.gamma),
        spectrum: r.spectrum,
        alpha: r.alpha,
        r0,
        epsilon: cfg.epsilon,
        prediction,
        omd_eta_limit: (kind == MethodKind::Omd).then(|| omd_eta_limit(&r.game)).transpose()?,
    };
    if json {
        println!("{}", serde_json::to_string_pretty(&report).expect("report serializes"));
        return Ok(EXIT_OK);
    }
    println!("method                   {}", report.method);
    println!("lambda_min               {}", report.spectrum.lambda_min);
    println!("lambda_max               {}", report.spectrum.lambda_max);
    println!("kappa                    {}", report.spectrum.kappa);
    println!("eta                      {}", report.eta);
    if let Some(g) = report.gamma {
        println!("gamma                    {g}");
    }
    println!("alpha                    {}", report.alpha);
    match &report.prediction {
        Some(p) => {
            println!("contraction (linearized) {}", p.contraction_linearized);
            println!("contraction (exact)      {}", p.contraction_exact);
            println!("radius R                 {}", p.radius);
            println!("iteration bound T        {}  (r0 = {}, epsilon = {})", p.iteration_bound, r0, cfg.epsilon);
            if let Some(t) = p.iteration_bound_stated {
                println!("iteration bound (stated) {t}");
            }
        }
        None => println!("no closed-form guarantee for {kind}"),
    }
    if let Some(l) = report.omd_eta_limit {
        println!("eta limit (R1/R2 real)   {l}");
    }
    Ok(EXIT_OK)
}

#[derive(Debug, Serialize)]
struct RunSummary {
    steps: usize,
    final_norm: f64,
    predicted_r: Option<f64>,
    predicted_t: Option<u64>,
    entry_time: Option<usize>,
    never_left: Option<bool>,
}

fn open_out(path: &Path) -> Result<BufWriter<File>> {
    File::create(path)
        .map(BufWriter::new)
        .map_err(|e| Error::Config(format!("cannot create {}: {e}", path.display())))
}

fn cmd_run(cfg: &RunConfig, out: Option<&Path>, json: bool) -> Result<i32> {
    let r = cfg.resolve()?;
    let trace = run_resolved(&r, cfg.steps, cfg.record_average_iterate)?;
    let path = out.map(Path::to_path_buf).or_else(|| cfg.output.path.as_ref().map(PathBuf::from));
    let to_stdout = path.is_none();
    match &path {
        Some(p) => {
            let mut w = open_out(p)?;
            trace
                .write(&mut w, cfg.output.format)
                .and_then(|_| w.flush())
                .map_err(|e| Error::io(p.display().to_string(), e))?;
        }
        None => {
            let stdout = io::stdout();
            let mut w = BufWriter::new(stdout.lock());
            trace
                .write(&mut w, cfg.output.format)
                .and_then(|_| w.flush())
                .map_err(|e| Error::io("<stdout>", e))?;
        }
    }
    let absorption = trace.absorption();
    let summary = RunSummary {
        steps: cfg.steps,
        final_norm: trace.final_norm(),
        predicted_r: trace.radius,
        predicted_t: trace.predicted_t,
        entry_time: absorption.as_ref().and_then(|a| a.entry_time),
        never_left: absorption.map(|a| a.never_left),
    };
    let line = if json {
        serde_json::to_string(&summary).expect("summary serializes")
    } else {
        let opt = |v: Option<String>| v.unwrap_or_else(|| "-".into());
        format!(
            "final_norm={} predicted_R={} entry_time={} never_left={}",
            summary.final_norm,
            opt(summary.predicted_r.map(|x| x.to_string())),
            opt(summary.entry_time.map(|x| x.to_string())),
            opt(summary.never_left.map(|x| x.to_string())),
        )
    };
    // keep stdout clean when it carries the trace
    if to_stdout {
        eprintln!("{line}");
    } else {
        println!("{line}");
    }
    Ok(EXIT_OK)
}

fn cmd_sweep(cfg: &RunConfig, param: SweepParam, values: &[f64], jobs: usize, out: Option<&Path>) -> Result<i32> {
    let rows = sweep(cfg, param, values, jobs)?;
    match out {
        Some(p) => {
            let mut w = open_out(p)?;
            write_sweep_csv(&rows, &mut w)
                .and_then(|_| w.flush())
                .map_err(|e| Error::io(p.display().to_string(), e))?;
            let failed = rows.iter().filter(|r| r.error.is_some()).count();
            println!("{} rows written to {} ({failed} failed)", rows.len(), p.display());
        }
        None => {
            let stdout = io::stdout();
            let mut w = BufWriter::new(stdout.lock());
            write_sweep_csv(&rows, &mut w)
                .and_then(|_| w.flush())
                .map_err(|e| Error::io("<stdout>", e))?;
        }
    }
    Ok(EXIT_OK)
}

fn cmd_verify(seed: u64, inject_failure: bool, json: bool) -> Result<i32> {
    let report = verify_suite_with(seed, inject_failure);
    if json {
        println!("{}", serde_json::to_string_pretty(&report).expect("report serializes"));
    } else {
        println!("{report}");
    }
    Ok(if report.all_passed() { EXIT_OK } else { EXIT_INVARIANT })
}

#[cfg(test)]
mod tests {
    use super::*;
    use clap::CommandFactory;

    #[test]
    fn clap_definition_is_consistent() {
        Cli::command().debug_assert();
    }

    #[test]
    fn help_exits_zero_and_bad_flags_exit_one() {
        assert_eq!(main_with_args(["lastiter", "--help"]), EXIT_OK);
        assert_eq!(main_with_args(["lastiter", "frobnicate"]), EXIT_CONFIG);
        assert_eq!(main_with_args(["lastiter", "predict"]), EXIT_CONFIG);
    }

    #[test]
    fn sweep_values_parse_as_list() {
        let cli = Cli::try_parse_from(["lastiter", "sweep", "--param", "alpha", "--values", "0.1,0.01"]).unwrap();
        match cli.command {
            Command::Sweep { values, .. } => assert_eq!(values, vec![0.1, 0.01]),
            _ => panic!("wrong subcommand"),
        }
        assert!(Cli::try_parse_from(["lastiter", "sweep", "--param", "alpha", "--values", ""]).is_err());
    }
}
