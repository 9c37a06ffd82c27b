//! The benchmark plant written out by hand and integrated with explicit Euler
//! on its own history array, as an independent check on the RK4 simulator.

use tdid::benchmark::{benchmark_config, benchmark_tanh_config};
use tdid::dde::simulate_plant;
use tdid::Error;

const OMEGAS: [f64; 5] = [2.3, 10.0, 20.2, 35.7, 51.9];

fn input(t: f64) -> f64 {
    let pulse = if t.rem_euclid(1.0) < 0.5 { 1.0 } else { 0.0 };
    OMEGAS.iter().map(|w| (w * t).sin()).sum::<f64>() + pulse
}

/// Euler with step `h`; delays are multiples of `h`, so lags are exact
/// indices. Returns the states at `t = 0, h, 2h, …` up to `t_end` or the
/// first non-finite value.
fn euler(psi: fn(f64) -> f64, h: f64, t_end: f64) -> (Vec<[f64; 2]>, Option<f64>) {
    let steps = (t_end / h).round() as usize;
    let lag = |tau: f64| (tau / h).round() as usize;
    let (l1, l17) = (lag(1.0), lag(1.7));
    let mut xs: Vec<[f64; 2]> = vec![[0.0, 0.0]];
    let at = |xs: &Vec<[f64; 2]>, k: usize, back: usize| if k >= back { xs[k - back] } else { [0.0, 0.0] };
    for k in 0..steps {
        let t = k as f64 * h;
        let x = xs[k];
        let x1 = at(&xs, k, l1);
        let x17 = at(&xs, k, l17);
        let y = x[0] + 3.0 * x[1];
        let u3 = if t >= 2.3 { input(t - 2.3) } else { 0.0 };
        let dx0 = x[1];
        let dx1 = -2.0 * x[0] - 4.0 * x[1] - 0.1 * x1[0] + 0.2 * x1[1] - 0.5 * x17[0].cbrt() - 0.8 * x17[1].cbrt()
            - 2.0 * psi(y)
            + input(t)
            - u3;
        let next = [x[0] + h * dx0, x[1] + h * dx1];
        if !(next[0].is_finite() && next[1].is_finite()) || next[0].abs().max(next[1].abs()) > 1e12 {
            return (xs, Some(t + h));
        }
        xs.push(next);
    }
    (xs, None)
}

#[test]
fn tanh_variant_matches_euler() {
    let mut cfg = benchmark_tanh_config();
    cfg.sim.t_end = 20.0;
    // The pulse edges make RK4 first order (about 2e-4 at h = 1e-3).
    cfg.sim.h = 2.5e-4;
    cfg.sim.record_stride = 400;
    let exp = cfg.build().unwrap();
    let u = |t: f64| exp.input.eval(t);
    let traj = simulate_plant(&exp.plant, &u, &exp.init, &exp.sim).unwrap();

    let h = 1e-5;
    let (xs, escape) = euler(f64::tanh, h, 20.0);
    assert!(escape.is_none());
    let mut worst: f64 = 0.0;
    for i in 0..traj.len() {
        let k = (traj.time(i) / h).round() as usize;
        for (a, b) in traj.state(i).iter().zip(&xs[k]) {
            worst = worst.max((a - b).abs());
        }
    }
    // Euler is first order; at h = 1e-5 it agrees to a few 1e-5.
    assert!(worst < 1e-4, "max difference {worst}");
}

#[test]
fn literal_benchmark_escapes_near_two_seconds() {
    let (_, escape) = euler(|y| y * y, 1e-4, 5.0);
    let t_euler = escape.expect("Euler trajectory escapes");

    let mut cfg = benchmark_config();
    cfg.sim.t_end = 5.0;
    let exp = cfg.build().unwrap();
    let u = |t: f64| exp.input.eval(t);
    match simulate_plant(&exp.plant, &u, &exp.init, &exp.sim) {
        Err(Error::BlowUp { t, .. }) => assert!((t - t_euler).abs() < 0.05, "RK4 {t}, Euler {t_euler}"),
        other => panic!("expected a blow-up, got {other:?}"),
    }
}
