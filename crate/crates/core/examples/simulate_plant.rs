//! Simulates the benchmark plant (tanh variant) for 50 s and writes the
//! trajectory and a plot of both states.
//!
//! cargo run --release --example simulate_plant -- [OUT_DIR]

use std::path::PathBuf;

use tdid::benchmark::benchmark_tanh_config;
use tdid::dde::simulate_plant;
use tdid::plot::{LineChart, Series};

fn main() -> tdid::Result<()> {
    let out = PathBuf::from(std::env::args().nth(1).unwrap_or_else(|| "simulate_out".into()));
    let mut cfg = benchmark_tanh_config();
    cfg.sim.t_end = 50.0;
    cfg.sim.record_stride = 10;
    let exp = cfg.build()?;

    let u = |t: f64| exp.input.eval(t);
    let traj = simulate_plant(&exp.plant, &u, &exp.init, &exp.sim)?;
    traj.write_csv(&out.join("trajectory.csv"), None)?;

    let mut chart = LineChart::new("Benchmark plant, ψ = tanh", "t (s)", "x");
    for c in 0..traj.dim() {
        chart.series.push(Series::new(format!("x{}", c + 1), traj.times().to_vec(), traj.component(c)));
    }
    chart.write(&out.join("states.svg"))?;

    let (t, x) = traj.last().expect("non-empty");
    println!("x({t}) = {x:?}, max |x| = {:.4}", traj.max_abs());
    println!("wrote {}", out.display());
    Ok(())
}
