//! Persistent excitation: the smallest eigenvalue of the regressor Gramian
//! over sliding windows. First a signal with a known answer, then the
//! benchmark (tanh variant) regressor along a simulated trajectory.
//!
//! cargo run --release --example persistent_excitation

use std::f64::consts::PI;

use tdid::benchmark::benchmark_tanh_config;
use tdid::dde::simulate_plant;
use tdid::signals::{build_regressor, pe_check, RegressorSeries};

fn main() -> tdid::Result<()> {
    // [sin t, cos t] over a window of 2π has Gramian π·I. The step divides
    // the period so each window spans it exactly.
    let dt = 2.0 * PI / 10_000.0;
    let count = 20_001;
    let series = RegressorSeries::from_fn(0.0, dt, count, 2, |t, out| {
        out[0] = t.sin();
        out[1] = t.cos();
    });
    let report = pe_check(&series, 2.0 * PI, dt, None)?;
    println!("sin/cos: alpha = {:.8} (π = {:.8})", report.alpha, PI);

    let mut cfg = benchmark_tanh_config();
    cfg.sim.t_end = 300.0;
    let exp = cfg.build()?;
    let u = |t: f64| exp.input.eval(t);
    let traj = simulate_plant(&exp.model, &u, &exp.init, &exp.sim)?;
    let series = build_regressor(&exp.model, &traj, &u, exp.model.delays())?;
    let window = 100.0;
    let report = pe_check(&series, window, series.dt, None)?;
    println!(
        "benchmark (ψ = tanh): {}-dimensional regressor, alpha = {:.4e} over {window} s windows",
        report.gramian_dim, report.alpha
    );
    let (t_worst, _) = report
        .per_window
        .iter()
        .copied()
        .min_by(|a, b| a.1.total_cmp(&b.1))
        .expect("at least one window");
    println!("weakest window starts at t = {t_worst}");
    Ok(())
}
