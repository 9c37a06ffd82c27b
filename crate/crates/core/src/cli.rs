//! Command-line front end.
//!
//! ```text
//! tdid simulate|identify|lmi-check|pe-check|reproduce-example
//!      [--config PATH] [--out DIR] [--plots] [--seed N]
//! ```
//!
//! Exit codes: 0 success, 1 infeasible certificate or other failure,
//! 2 invalid command line or configuration, 3 simulation blow-up,
//! 4 excitation window longer than the available trajectory.
//! `TDID_THREADS` caps the worker threads used by the certificate search
//! and the excitation check.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::benchmark::{self, benchmark_config};
use crate::config::{Experiment, ExperimentConfig};
use crate::dde::simulate_plant;
use crate::error::{Error, Result};
use crate::identifier::run_identification;
use crate::lmi::{find_feasible, Verdict};
use crate::signals::{build_regressor, pe_check};

pub const EXIT_OK: i32 = 0;
pub const EXIT_FAILURE: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_BLOW_UP: i32 = 3;
pub const EXIT_WINDOW: i32 = 4;

#[derive(Debug, Parser)]
#[command(name = "tdid", version, about = "Adaptive identification of nonlinear time-delay systems")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Simulate the plant and write trajectory.csv.
    Simulate(CommonArgs),
    /// Run the identifier alongside the plant and write diagnostics.csv.
    Identify(CommonArgs),
    /// Search for a stability certificate and write certificate.toml.
    LmiCheck(CommonArgs),
    /// Check persistent excitation along a simulated trajectory.
    PeCheck(CommonArgs),
    /// Run the full benchmark pipeline (embedded config unless --config is given).
    ReproduceExample(CommonArgs),
}

#[derive(Debug, Args, Clone)]
pub struct CommonArgs {
    #[arg(long, value_name = "PATH")]
    pub config: Option<PathBuf>,
    #[arg(long, value_name = "DIR")]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub plots: bool,
    /// Seed for the certificate search restarts.
    #[arg(long, value_name = "N")]
    pub seed: Option<u64>,
}

/// Maps an error to its exit code.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::BlowUp { .. } => EXIT_BLOW_UP,
        Error::WindowTooLong { .. } | Error::TrajectoryTooShort { .. } => EXIT_WINDOW,
        Error::Config(_)
        | Error::Dimension { .. }
        | Error::InvalidModel(_)
        | Error::NotMatching { .. }
        | Error::DegenerateDirection
        | Error::DelayNotInGrid { .. }
        | Error::UnknownNonlinearity(_)
        | Error::InvalidSim(_)
        | Error::InvalidInput(_)
        | Error::InvalidIdentifier(_) => EXIT_CONFIG,
        _ => EXIT_FAILURE,
    }
}

/// Applies `TDID_THREADS` to the global rayon pool; a no-op when unset or
/// when the pool already exists.
pub fn init_threads_from_env() -> Result<()> {
    let Ok(raw) = std::env::var("TDID_THREADS") else { return Ok(()) };
    let n: usize = raw
        .trim()
        .parse()
        .ok()
        .filter(|n| *n > 0)
        .ok_or_else(|| Error::Config(format!("TDID_THREADS must be a positive integer, got {raw:?}")))?;
    let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    Ok(())
}

/// Parses `args` (including the program name), runs the command and returns
/// the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
        }
    };
    if let Err(e) = init_threads_from_env() {
        eprintln!("error: {e}");
        return EXIT_CONFIG;
    }
    match dispatch(&cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

fn dispatch(cmd: &Command) -> Result<i32> {
    match cmd {
        Command::Simulate(a) => simulate(a),
        Command::Identify(a) => identify(a),
        Command::LmiCheck(a) => lmi_check(a),
        Command::PeCheck(a) => pe(a),
        Command::ReproduceExample(a) => reproduce(a),
    }
}

fn load(args: &CommonArgs) -> Result<Experiment> {
    let path = args
        .config
        .as_ref()
        .ok_or_else(|| Error::Config("this command needs --config PATH".into()))?;
    ExperimentConfig::from_path(path)?.build()
}

fn out_dir(args: &CommonArgs, exp: &Experiment) -> PathBuf {
    args.out
        .clone()
        .or_else(|| exp.output.dir.as_ref().map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("."))
}

fn report_files(files: &[PathBuf]) {
    for f in files {
        eprintln!("wrote {}", f.display());
    }
}

fn simulate(args: &CommonArgs) -> Result<i32> {
    let exp = load(args)?;
    let input = |t: f64| exp.input.eval(t);
    let traj = simulate_plant(&exp.plant, &input, &exp.init, &exp.sim)?;
    let path = out_dir(args, &exp).join("trajectory.csv");
    traj.write_csv(&path, None)?;
    report_files(&[path]);
    Ok(EXIT_OK)
}

fn identify(args: &CommonArgs) -> Result<i32> {
    let exp = load(args)?;
    let out = out_dir(args, &exp);
    let mut search = exp.lmi.search.clone();
    if let Some(s) = args.seed {
        search.seed = s;
    }
    let cert = find_feasible(&exp.psi_problem()?, &search)?;
    let input = |t: f64| exp.input.eval(t);
    let run = run_identification(&exp.model, &input, exp.identifier()?, &exp.sim, &exp.init, cert.is_feasible().then_some(&cert))?;
    let mut files = vec![out.join("diagnostics.csv"), out.join("param_errors.csv")];
    run.write_diagnostics(&files[0])?;
    crate::io::write_atomic(&files[1], run.param_errors_csv().as_bytes())?;
    if args.plots || exp.output.plots {
        for (name, chart) in benchmark::figures(&run) {
            let p = out.join(name);
            chart.write(&p)?;
            files.push(p);
        }
    }
    report_files(&files);
    print!("{}", benchmark::summary_table(&benchmark::summary(&run, benchmark::TAIL_FRACTION)));
    Ok(EXIT_OK)
}

fn lmi_check(args: &CommonArgs) -> Result<i32> {
    let exp = load(args)?;
    let mut search = exp.lmi.search.clone();
    if let Some(s) = args.seed {
        search.seed = s;
    }
    let cert = find_feasible(&exp.psi_problem()?, &search)?;
    let path = out_dir(args, &exp).join("certificate.toml");
    cert.write(&path)?;
    report_files(&[path]);
    print_verdict(&cert);
    Ok(if cert.verdict == Verdict::Feasible { EXIT_OK } else { EXIT_FAILURE })
}

fn print_verdict(cert: &crate::lmi::LmiCertificate) {
    println!("verdict={}", verdict_name(cert.verdict));
    println!("max_eig_psi={:.6e}", cert.max_eig_psi);
    println!("min_eig_p={:.6e}", cert.min_eig_p);
    if let Some(f) = cert.objective {
        println!("best_objective={f:.6e}");
    }
}

fn verdict_name(v: Verdict) -> &'static str {
    match v {
        Verdict::Feasible => "feasible",
        Verdict::Infeasible => "infeasible",
        Verdict::Undetermined => "undetermined",
    }
}

fn pe(args: &CommonArgs) -> Result<i32> {
    let exp = load(args)?;
    let pe_cfg = exp.pe.clone().ok_or_else(|| Error::Config("missing [pe] section".into()))?;
    let input = |t: f64| exp.input.eval(t);
    let traj = simulate_plant(&exp.model, &input, &exp.init, &exp.sim)?;
    let series = build_regressor(&exp.model, &traj, &input, exp.model.delays())?;
    let quad = pe_cfg.quad_step.unwrap_or(series.dt);
    let report = pe_check(&series, pe_cfg.window, quad, pe_cfg.window_stride)?;
    let path = out_dir(args, &exp).join("pe_report.csv");
    report.write_csv(&path)?;
    report_files(&[path]);
    println!("{}", report.summary_line());
    Ok(EXIT_OK)
}

fn reproduce(args: &CommonArgs) -> Result<i32> {
    let cfg = match &args.config {
        Some(p) => ExperimentConfig::from_path(p)?,
        None => benchmark_config(),
    };
    let exp = cfg.build()?;
    let out = out_dir(args, &exp);
    let plots = args.plots || exp.output.plots;
    let report = match benchmark::reproduce(&exp, &out, plots, args.seed) {
        Ok(r) => r,
        Err(e) => {
            if matches!(e, Error::BlowUp { .. }) {
                eprintln!("certificate written to {}", out.join("certificate.toml").display());
            }
            return Err(e);
        }
    };
    report_files(&report.files);
    println!("certificate: {}", verdict_name(report.certificate.verdict));
    if let Some(pe) = &report.pe {
        println!("{}", pe.summary_line());
    }
    print!("{}", benchmark::summary_table(&report.summary));
    println!("elapsed: {:.1} s", report.elapsed.as_secs_f64());
    Ok(EXIT_OK)
}

/// Path-only helper for callers that want to run a config file directly.
pub fn run_config_command(command: &str, config: &Path, out: &Path) -> i32 {
    run(["tdid", command, "--config", &config.to_string_lossy(), "--out", &out.to_string_lossy()])
}
