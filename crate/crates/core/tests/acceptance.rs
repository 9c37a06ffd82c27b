//! Acceptance suite. Prints one PASS/FAIL line per criterion, plus `info`
//! lines for the tanh variant of the benchmark, and exits nonzero when any
//! criterion fails.
//!
//! cargo test --release --test acceptance

use std::f64::consts::PI;
use std::process::ExitCode;
use std::time::Instant;

use nalgebra::{dmatrix, DVector, RowDVector};
use tdid::benchmark::{benchmark_config, benchmark_tanh_config, reproduce, ReproduceReport};
use tdid::config::Experiment;
use tdid::dde::{integrate, simulate_plant, InitialHistory, Interpolation, SimConfig, Trajectory};
use tdid::identifier::run_identification;
use tdid::lmi::{assemble_psi, find_feasible, verify_certificate, AssemblyMode, PsiProblem, SearchOptions, Verdict};
use tdid::model::{decompose_matching, extend_to_grid, DelayGrid};
use tdid::signals::{pe_check, RegressorSeries};
use tdid::Error;

const TARGET_ERR: f64 = 0.10;
const FICTITIOUS_FACTOR: f64 = 0.1;
const EPS_RATIO: f64 = 0.01;
const TAIL: f64 = 0.05;
const PE_WINDOW: f64 = 1000.0;
const PE_ALPHA: f64 = 1e-4;

struct Outcome {
    pass: bool,
    detail: String,
}

fn pass(detail: String) -> Outcome {
    Outcome { pass: true, detail }
}

fn fail(detail: String) -> Outcome {
    Outcome { pass: false, detail }
}

fn run_pipeline(exp: &Experiment) -> tdid::Result<ReproduceReport> {
    let dir = tempfile::tempdir().expect("temp dir");
    reproduce(exp, dir.path(), false, None)
}

/// Relative errors of the nonzero rows and the largest fictitious row
/// magnitude, averaged over the tail of the run.
fn convergence(report: &ReproduceReport) -> (f64, String, f64, String) {
    let mut worst_rel = (0.0, String::new());
    let mut worst_zero = (0.0, String::new());
    for r in &report.summary {
        match r.rel_error() {
            Some(e) if e > worst_rel.0 => worst_rel = (e, r.name.clone()),
            None if r.estimate.abs() > worst_zero.0 => worst_zero = (r.estimate.abs(), r.name.clone()),
            _ => {}
        }
    }
    (worst_rel.0, worst_rel.1, worst_zero.0, worst_zero.1)
}

fn min_nonzero_target(report: &ReproduceReport) -> f64 {
    report
        .summary
        .iter()
        .filter(|r| r.target != 0.0)
        .map(|r| r.target.abs())
        .fold(f64::INFINITY, f64::min)
}

fn eps_ratio(report: &ReproduceReport) -> f64 {
    let d = &report.run.diagnostics;
    let peak = d.iter().map(|r| r.eps_norm).fold(0.0, f64::max);
    let t_end = d.last().map(|r| r.t).unwrap_or(0.0);
    let tail_start = t_end * (1.0 - TAIL);
    let tail = d.iter().filter(|r| r.t >= tail_start).map(|r| r.eps_norm).fold(0.0, f64::max);
    tail / peak
}

fn blow_up(e: &Error) -> String {
    match e {
        Error::BlowUp { t, .. } => format!("the benchmark plant escapes in finite time at t = {t}"),
        other => format!("error: {other}"),
    }
}

fn criterion_1(literal: &tdid::Result<ReproduceReport>) -> Outcome {
    match literal {
        Ok(r) => {
            let (rel, rel_name, zero, zero_name) = convergence(r);
            let limit = FICTITIOUS_FACTOR * min_nonzero_target(r);
            let detail = format!("worst relative error {rel:.3e} ({rel_name}), largest fictitious |{zero_name}| = {zero:.3e} (limit {limit:.3e})");
            if rel <= TARGET_ERR && zero <= limit {
                pass(detail)
            } else {
                fail(detail)
            }
        }
        Err(e) => fail(blow_up(e)),
    }
}

fn criterion_2(literal: &tdid::Result<ReproduceReport>) -> Outcome {
    match literal {
        Ok(r) => {
            let ratio = eps_ratio(r);
            let detail = format!("tail max |ε| / peak = {ratio:.3e}");
            if ratio <= EPS_RATIO {
                pass(detail)
            } else {
                fail(detail)
            }
        }
        Err(e) => fail(blow_up(e)),
    }
}

/// Benchmark structure with `φ = ψ = tanh`, globally Lipschitz with L = 1, so
/// the certificate bounds the derivative of V everywhere.
fn lipschitz_variant() -> tdid::Result<Experiment> {
    let mut cfg = benchmark_tanh_config();
    cfg.plant.phi = "tanh".into();
    cfg.plant.lipschitz_local_only = false;
    cfg.sim.t_end = 300.0;
    cfg.sim.record_stride = 10;
    cfg.build()
}

fn criterion_3() -> tdid::Result<Outcome> {
    let exp = lipschitz_variant()?;
    let cert = find_feasible(&exp.psi_problem()?, &exp.lmi.search)?;
    if !cert.is_feasible() {
        return Ok(fail(format!("no certificate found, λmax(Ψ) = {:.3e}", cert.max_eig_psi)));
    }
    let u = |t: f64| exp.input.eval(t);
    let run = run_identification(&exp.model, &u, exp.identifier()?, &exp.sim, &exp.init, Some(&cert))?;
    let v: Vec<f64> = run.diagnostics.iter().map(|d| d.v.expect("V recorded")).collect();
    let tol = 1e-6 * v[0] + 1e-9;
    let worst = v.windows(2).map(|w| w[1] - w[0]).fold(f64::NEG_INFINITY, f64::max);
    let detail = format!(
        "φ = ψ = tanh, {} steps, largest increase {worst:.3e} (tol {tol:.3e}), V {:.4e} -> {:.4e}",
        v.len(),
        v[0],
        v[v.len() - 1]
    );
    Ok(if worst <= tol { pass(detail) } else { fail(detail) })
}

fn scalar(a0: f64) -> tdid::Result<PsiProblem> {
    PsiProblem::new(
        vec![dmatrix![a0]],
        vec![dmatrix![0.0]],
        vec![dmatrix![0.0]],
        1.0,
        DVector::from_element(1, 1.0),
        RowDVector::from_element(1, 1.0),
        AssemblyMode::default(),
    )
}

fn criterion_4() -> tdid::Result<Outcome> {
    let ok = verify_certificate(&scalar(-2.0)?, &dmatrix![1.0], &[dmatrix![1.0]])?;
    let exact = ok.is_feasible() && (ok.max_eig_psi + 1.0).abs() <= 1e-12 && ok.equality_residual == 0.0;

    let bad = scalar(5.0)?;
    let mut certified = 0;
    for seed in 0..10 {
        let opts = SearchOptions {
            seed,
            max_iters: 2000,
            ..SearchOptions::default()
        };
        if find_feasible(&bad, &opts)?.verdict == Verdict::Feasible {
            certified += 1;
        }
    }

    // Brute force over (P, S0) in (0, 10]²: no point may satisfy all conditions.
    let mut grid_hits = 0;
    for i in 1..=100 {
        for j in 1..=100 {
            let p = dmatrix![0.1 * i as f64];
            let s = [dmatrix![0.1 * j as f64]];
            let psi = assemble_psi(&bad, &p, &s)?;
            let lmax = psi.symmetric_eigenvalues().max();
            let equality = (p[(0, 0)] - 1.0).abs() < 1e-12;
            if lmax < 0.0 && equality {
                grid_hits += 1;
            }
        }
    }
    let detail = format!(
        "feasible instance λmax = {:.15}, residual {}; unstable instance certified by {certified}/10 seeds, {grid_hits} grid points feasible",
        ok.max_eig_psi, ok.equality_residual
    );
    Ok(if exact && certified == 0 && grid_hits == 0 { pass(detail) } else { fail(detail) })
}

/// ẋ = −x(t−1) with unit history, solved piecewise.
fn unit_delay_exact(t: f64) -> f64 {
    if t <= 0.0 {
        1.0
    } else if t <= 1.0 {
        1.0 - t
    } else if t <= 2.0 {
        let s = t - 1.0;
        -(s - s * s / 2.0)
    } else {
        let s = t - 2.0;
        -0.5 + s * s / 2.0 - s * s * s / 6.0
    }
}

fn unit_delay(interp: Interpolation) -> tdid::Result<(Trajectory, f64)> {
    let cfg = SimConfig::new(1e-3, 3.0).with_interpolation(interp);
    let start = Instant::now();
    let traj = integrate(
        |s, out| {
            let mut d = [0.0];
            s.lagged_into(1.0, 0..1, &mut d)?;
            out[0] = -d[0];
            Ok(())
        },
        &InitialHistory::constant(vec![1.0]),
        &|_| 0.0,
        &cfg,
        1.0,
    )?;
    Ok((traj, start.elapsed().as_secs_f64()))
}

fn criterion_5() -> tdid::Result<Outcome> {
    let err = |traj: &Trajectory| {
        (0..traj.len())
            .map(|i| (traj.state(i)[0] - unit_delay_exact(traj.time(i))).abs())
            .fold(0.0, f64::max)
    };
    let (lin, t_lin) = unit_delay(Interpolation::Linear)?;
    let (herm, t_herm) = unit_delay(Interpolation::CubicHermite)?;
    let (e_lin, e_herm) = (err(&lin), err(&herm));
    let detail = format!("linear {e_lin:.3e} in {t_lin:.3} s, cubic Hermite {e_herm:.3e} in {t_herm:.3} s");
    Ok(if e_lin <= 1e-6 && e_herm <= 1e-8 && t_lin < 1.0 && t_herm < 1.0 {
        pass(detail)
    } else {
        fail(detail)
    })
}

fn sin_cos_alpha() -> tdid::Result<f64> {
    let dt = 2.0 * PI / 10_000.0;
    let series = RegressorSeries::from_fn(0.0, dt, 20_001, 2, |t, out| {
        out[0] = t.sin();
        out[1] = t.cos();
    });
    Ok(pe_check(&series, 2.0 * PI, dt, None)?.alpha)
}

fn with_pe_window(mut exp: Experiment) -> Experiment {
    if let Some(pe) = exp.pe.as_mut() {
        pe.window = PE_WINDOW;
    }
    exp
}

fn criterion_6(literal: &tdid::Result<ReproduceReport>) -> tdid::Result<Outcome> {
    let alpha = sin_cos_alpha()?;
    let closed_form = (alpha - PI).abs() <= 1e-6;
    let closed = format!("sin/cos Gramian {alpha:.9}");
    Ok(match literal {
        Ok(r) => match &r.pe {
            Some(pe) if pe.alpha >= PE_ALPHA && closed_form => pass(format!("alpha = {:.3e}, {closed}", pe.alpha)),
            Some(pe) => fail(format!("alpha = {:.3e}, {closed}", pe.alpha)),
            None => fail(format!("run shorter than the window, {closed}")),
        },
        Err(e) => fail(format!("{}; {closed} ({})", blow_up(e), if closed_form { "ok" } else { "off" })),
    })
}

fn criterion_7() -> tdid::Result<Outcome> {
    let mut cfg = benchmark_tanh_config();
    cfg.sim.t_end = 100.0;
    cfg.sim.record_stride = 10;
    let exp = cfg.build()?;
    let mut id = exp.identifier()?.clone();
    let truth = decompose_matching(&exp.model, &id.known, &id.t0)?.kappa;
    id.initial_kappa = Some(truth);
    id.xhat_init = Some(exp.init.eval(0.0));
    let u = |t: f64| exp.input.eval(t);
    let run = run_identification(&exp.model, &u, &id, &exp.sim, &exp.init, None)?;
    let eps = run.diagnostics.iter().map(|d| d.eps_norm).fold(0.0, f64::max);
    let par = run.diagnostics.iter().map(|d| d.max_param_error()).fold(0.0, f64::max);
    let detail = format!("ψ = tanh variant, max |ε| = {eps:.3e}, max parameter error = {par:.3e}");
    Ok(if eps < 1e-9 && par < 1e-9 { pass(detail) } else { fail(detail) })
}

fn grid_difference(exp: &Experiment, t_end: f64) -> tdid::Result<f64> {
    let grid = DelayGrid::new(vec![0.0, 0.5, 1.0, 1.2, 1.7, 2.0, 2.3, 3.0])?;
    let extended = extend_to_grid(&exp.plant, &grid)?;
    let sim = SimConfig { t_end, ..exp.sim.clone() };
    let u = |t: f64| exp.input.eval(t);
    let a = simulate_plant(&exp.plant, &u, &exp.init, &sim)?;
    let b = simulate_plant(&extended, &u, &exp.init, &sim)?;
    let mut worst: f64 = 0.0;
    for i in 0..a.len() {
        let (ya, yb) = (exp.plant.output(a.state(i)), exp.plant.output(b.state(i)));
        worst = worst.max((ya - yb).abs());
    }
    Ok(worst)
}

fn criterion_8() -> tdid::Result<Outcome> {
    let exp = benchmark_config().build()?;
    Ok(match grid_difference(&exp, 50.0) {
        Ok(d) if d <= 1e-8 => pass(format!("max |Δy| = {d:.3e} over 50 s")),
        Ok(d) => fail(format!("max |Δy| = {d:.3e} over 50 s")),
        Err(e) => {
            let before = grid_difference(&exp, 1.9)?;
            fail(format!("{}; max |Δy| = {before:.3e} over [0, 1.9]", blow_up(&e)))
        }
    })
}

fn info_tanh() -> tdid::Result<Vec<String>> {
    let exp = with_pe_window(benchmark_tanh_config().build()?);
    let r = run_pipeline(&exp)?;
    let (rel, rel_name, zero, zero_name) = convergence(&r);
    let within: usize = r.summary.iter().filter(|s| s.rel_error().is_some_and(|e| e <= TARGET_ERR)).count();
    let nonzero = r.summary.iter().filter(|s| s.target != 0.0).count();
    let mut lines = vec![
        format!("ψ = tanh variant, certificate {:?}, runtime {:.1} s", r.certificate.verdict, r.elapsed.as_secs_f64()),
        format!("{within}/{nonzero} nonzero rows within 10 %, worst {rel_name} at {rel:.3e}"),
        format!("largest fictitious |{zero_name}| = {zero:.3e}"),
        format!("tail max |ε| / peak = {:.3e}", eps_ratio(&r)),
    ];
    if let Some(pe) = &r.pe {
        lines.push(format!("alpha = {:.3e} with a {PE_WINDOW} s window", pe.alpha));
    }
    lines.push(format!("grid extension max |Δy| = {:.3e} over 50 s", grid_difference(&exp, 50.0)?));
    Ok(lines)
}

fn main() -> ExitCode {
    // Allow `cargo test -- --list` and filters without running the suite.
    if std::env::args().any(|a| a == "--list") {
        return ExitCode::SUCCESS;
    }
    let literal = benchmark_config().build().map(with_pe_window).and_then(|exp| run_pipeline(&exp));

    let results: Vec<(u8, tdid::Result<Outcome>)> = vec![
        (1, Ok(criterion_1(&literal))),
        (2, Ok(criterion_2(&literal))),
        (3, criterion_3()),
        (4, criterion_4()),
        (5, criterion_5()),
        (6, criterion_6(&literal)),
        (7, criterion_7()),
        (8, criterion_8()),
    ];
    let mut failures = 0;
    for (k, r) in results {
        let o = r.unwrap_or_else(|e| fail(format!("error: {e}")));
        if !o.pass {
            failures += 1;
        }
        println!("criterion {k}: {} ({})", if o.pass { "PASS" } else { "FAIL" }, o.detail);
    }
    match info_tanh() {
        Ok(lines) => lines.iter().for_each(|l| println!("info: {l}")),
        Err(e) => println!("info: tanh variant failed: {e}"),
    }
    println!("{} of 8 criteria passed", 8 - failures);
    if failures == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
