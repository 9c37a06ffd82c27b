//! Excitation signals and the persistent-excitation test on the regressor
//! `Φ(t) = col{x(t−τᵢ), φ(x(t−τᵢ)), ψ(y(t−τᵢ)), u(t−τᵢ)}`.

use std::path::Path;

use nalgebra::{DMatrix, SymmetricEigen};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dde::Trajectory;
use crate::error::{Error, Result};
use crate::io::{fmt_f64, write_atomic};
use crate::model::PlantModel;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Sine {
    pub amplitude: f64,
    /// rad/s
    pub omega: f64,
    #[serde(default)]
    pub phase: f64,
}

/// Rectangular pulse train, high during the first `duty·period` of each period.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Pulse {
    pub amplitude: f64,
    pub period: f64,
    pub duty: f64,
}

/// Sum of sines, an optional pulse train and a constant offset.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InputSignal {
    #[serde(default)]
    pub sines: Vec<Sine>,
    #[serde(default)]
    pub pulse: Option<Pulse>,
    #[serde(default)]
    pub offset: f64,
}

impl InputSignal {
    pub fn validate(&self) -> Result<()> {
        let finite = self.offset.is_finite()
            && self.sines.iter().all(|s| s.amplitude.is_finite() && s.omega.is_finite() && s.phase.is_finite());
        if !finite {
            return Err(Error::InvalidInput("non-finite sine parameter or offset".into()));
        }
        if let Some(p) = &self.pulse {
            if !(p.period > 0.0 && p.period.is_finite()) {
                return Err(Error::InvalidInput(format!("pulse period {} must be positive", p.period)));
            }
            if !(p.duty > 0.0 && p.duty < 1.0) {
                return Err(Error::InvalidInput(format!("pulse duty {} must lie in (0, 1)", p.duty)));
            }
            if !p.amplitude.is_finite() {
                return Err(Error::InvalidInput("non-finite pulse amplitude".into()));
            }
        }
        Ok(())
    }

    pub fn eval(&self, t: f64) -> f64 {
        let mut u = self.offset;
        for s in &self.sines {
            u += s.amplitude * (s.omega * t + s.phase).sin();
        }
        if let Some(p) = &self.pulse {
            if t.rem_euclid(p.period) < p.duty * p.period {
                u += p.amplitude;
            }
        }
        u
    }
}

/// Regressor samples on a uniform time grid.
#[derive(Debug, Clone, PartialEq)]
pub struct RegressorSeries {
    pub t0: f64,
    pub dt: f64,
    pub dim: usize,
    data: Vec<f64>,
}

impl RegressorSeries {
    pub fn new(t0: f64, dt: f64, dim: usize) -> Self {
        Self { t0, dt, dim, data: Vec::new() }
    }

    /// Samples `f(t0 + j·dt)` for `j = 0..count`.
    pub fn from_fn(t0: f64, dt: f64, count: usize, dim: usize, mut f: impl FnMut(f64, &mut [f64])) -> Self {
        let mut s = Self::new(t0, dt, dim);
        let mut row = vec![0.0; dim];
        for j in 0..count {
            f(t0 + j as f64 * dt, &mut row);
            s.push(&row);
        }
        s
    }

    pub fn push(&mut self, row: &[f64]) {
        debug_assert_eq!(row.len(), self.dim);
        self.data.extend_from_slice(row);
    }

    pub fn len(&self) -> usize {
        self.data.len().checked_div(self.dim).unwrap_or(0)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn row(&self, j: usize) -> &[f64] {
        &self.data[j * self.dim..(j + 1) * self.dim]
    }

    pub fn time(&self, j: usize) -> f64 {
        self.t0 + j as f64 * self.dt
    }

    /// Time covered between first and last sample.
    pub fn span(&self) -> f64 {
        self.len().saturating_sub(1) as f64 * self.dt
    }
}

/// Stacks `x(t−τᵢ)`, `φ(x(t−τᵢ))`, `ψ(y(t−τᵢ))`, `u(t−τᵢ)` for every delay
/// along a recorded plant trajectory.
///
/// The trajectory must be uniformly sampled; the series starts at the first
/// sample whose largest lookback still lies inside the trajectory.
/// Delayed states between samples are linearly interpolated.
pub fn build_regressor(plant: &PlantModel, traj: &Trajectory, input: &dyn Fn(f64) -> f64, delays: &[f64]) -> Result<RegressorSeries> {
    let (n, l, m) = (plant.n(), plant.l(), plant.m());
    if traj.dim() < n {
        return Err(crate::error::dim_err("trajectory state", n, traj.dim()));
    }
    let slots = delays.len();
    let dim = slots * (n + l + m + 1);
    let times = traj.times();
    if times.len() < 2 {
        return Err(Error::TrajectoryTooShort {
            start: times.first().copied().unwrap_or(0.0),
            needed: f64::INFINITY,
        });
    }
    let dt = times[1] - times[0];
    let max_delay = delays.iter().copied().fold(0.0, f64::max);
    let start = times[0];
    let skip = times.partition_point(|t| *t - max_delay < start - 1e-9 * dt);
    if skip >= times.len() {
        return Err(Error::TrajectoryTooShort {
            start,
            needed: times[times.len() - 1] - max_delay,
        });
    }

    let mut series = RegressorSeries::new(times[skip], dt, dim);
    let mut row = vec![0.0; dim];
    let mut full = vec![0.0; traj.dim()];
    let mut phi = vec![0.0; l];
    let mut psi = vec![0.0; m];
    for &t in &times[skip..] {
        for (i, tau) in delays.iter().enumerate() {
            let s = t - tau;
            traj.interpolate_into(s, &mut full).ok_or(Error::TrajectoryTooShort { start, needed: s })?;
            let x = &full[..n];
            plant.phi().eval_into(x, &mut phi)?;
            plant.psi().eval_into(&[plant.output(x)], &mut psi)?;
            row[i * n..(i + 1) * n].copy_from_slice(x);
            let off = slots * n + i * l;
            row[off..off + l].copy_from_slice(&phi);
            let off = slots * (n + l) + i * m;
            row[off..off + m].copy_from_slice(&psi);
            row[slots * (n + l + m) + i] = if s < start - 1e-9 * dt { 0.0 } else { input(s) };
        }
        series.push(&row);
    }
    Ok(series)
}

/// Result of the sliding-window excitation test.
#[derive(Debug, Clone, PartialEq)]
pub struct PEReport {
    pub window: f64,
    /// Smallest Gramian eigenvalue over all windows.
    pub alpha: f64,
    pub gramian_dim: usize,
    /// `(window start, min eigenvalue)`.
    pub per_window: Vec<(f64, f64)>,
}

impl PEReport {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("window_start,min_eig\n");
        for (t, e) in &self.per_window {
            s.push_str(&format!("{},{}\n", fmt_f64(*t), fmt_f64(*e)));
        }
        s
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        write_atomic(path, self.to_csv().as_bytes())
    }

    pub fn summary_line(&self) -> String {
        format!("alpha={}", fmt_f64(self.alpha))
    }
}

/// Gramian of the regressor over `[t_start(j), t_start(j) + window]`, one window
/// every `window_stride` (default `window / 10`), integrated with the
/// trapezoidal rule at `quad_step` (a multiple of the series spacing).
pub fn pe_check(series: &RegressorSeries, window: f64, quad_step: f64, window_stride: Option<f64>) -> Result<PEReport> {
    let ratio = quad_step / series.dt;
    let sub = ratio.round() as usize;
    if sub == 0 || (ratio - sub as f64).abs() > 1e-6 * ratio {
        return Err(Error::InvalidInput(format!(
            "quadrature step {quad_step} is not a multiple of the sample spacing {}",
            series.dt
        )));
    }
    if !(window > 0.0) {
        return Err(Error::InvalidInput(format!("window {window} must be positive")));
    }
    let count = series.len().div_ceil(sub);
    let last = count.saturating_sub(1);
    let w = (window / quad_step).round() as usize;
    if w == 0 || w > last {
        return Err(Error::WindowTooLong {
            window,
            available: last as f64 * quad_step,
        });
    }
    let stride = ((window_stride.unwrap_or(window / 10.0) / quad_step).round() as usize).max(1);
    let starts: Vec<usize> = (0..=last - w).step_by(stride).collect();

    // Prefix sums of Φ Φᵀ (upper triangle), snapshotted where windows begin or end.
    let d = series.dim;
    let tri = d * (d + 1) / 2;
    let mut marks: Vec<usize> = starts.iter().flat_map(|s| [*s, *s + w]).collect();
    marks.sort_unstable();
    marks.dedup();
    let mut snapshots = vec![vec![0.0; tri]; marks.len()];
    let mut acc = vec![0.0; tri];
    let mut next_mark = 0;
    for j in 0..=last {
        let row = series.row(j * sub);
        let mut p = 0;
        for a in 0..d {
            let ra = row[a];
            for b in a..d {
                acc[p] += ra * row[b];
                p += 1;
            }
        }
        while next_mark < marks.len() && marks[next_mark] == j {
            snapshots[next_mark].copy_from_slice(&acc);
            next_mark += 1;
        }
    }
    let snapshot_at = |j: usize| &snapshots[marks.binary_search(&j).expect("marked index")];

    let per_window: Vec<(f64, f64)> = starts
        .par_iter()
        .map(|&s| {
            let (lo, hi) = (snapshot_at(s), snapshot_at(s + w));
            let (ra, rb) = (series.row(s * sub), series.row((s + w) * sub));
            let mut g = DMatrix::<f64>::zeros(d, d);
            let mut p = 0;
            for a in 0..d {
                for b in a..d {
                    // Σ_{s..=s+w} minus half the endpoint terms = trapezoid
                    let v = hi[p] - lo[p] + ra[a] * ra[b] - 0.5 * (ra[a] * ra[b] + rb[a] * rb[b]);
                    g[(a, b)] = v * quad_step;
                    g[(b, a)] = v * quad_step;
                    p += 1;
                }
            }
            (series.time(s * sub), min_eigenvalue(g))
        })
        .collect();
    let alpha = per_window.iter().map(|(_, e)| *e).fold(f64::INFINITY, f64::min);
    Ok(PEReport {
        window: w as f64 * quad_step,
        alpha,
        gramian_dim: d,
        per_window,
    })
}

pub(crate) fn min_eigenvalue(m: DMatrix<f64>) -> f64 {
    SymmetricEigen::new(m).eigenvalues.iter().copied().fold(f64::INFINITY, f64::min)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    #[test]
    fn single_sine_at_zero() {
        let sig = InputSignal {
            sines: vec![Sine { amplitude: 1.0, omega: 2.3, phase: 0.0 }],
            ..Default::default()
        };
        assert_eq!(sig.eval(0.0), 0.0);
    }

    #[test]
    fn pulse_duty_window() {
        let sig = InputSignal {
            pulse: Some(Pulse { amplitude: 1.0, period: 1.0, duty: 0.5 }),
            ..Default::default()
        };
        assert_eq!(sig.eval(0.0), 1.0);
        assert_eq!(sig.eval(0.25), 1.0);
        assert_eq!(sig.eval(0.75), 0.0);
        assert_eq!(sig.eval(1.1), 1.0);
    }

    #[test]
    fn invalid_pulse_rejected() {
        let mut sig = InputSignal {
            pulse: Some(Pulse { amplitude: 1.0, period: 0.0, duty: 0.5 }),
            ..Default::default()
        };
        assert!(sig.validate().is_err());
        sig.pulse = Some(Pulse { amplitude: 1.0, period: 1.0, duty: 1.0 });
        assert!(sig.validate().is_err());
    }

    #[test]
    fn constant_regressor_gramian_equals_window() {
        let s = RegressorSeries::from_fn(0.0, 0.01, 2001, 1, |_, r| r[0] = 1.0);
        let rep = pe_check(&s, 5.0, 0.01, None).unwrap();
        for (_, e) in &rep.per_window {
            assert!((e - 5.0).abs() < 1e-9, "{e}");
        }
        assert!((rep.alpha - 5.0).abs() < 1e-9);
    }

    #[test]
    fn sine_cosine_gramian_is_pi_identity() {
        let n = 4000;
        let dt = 2.0 * PI / n as f64;
        let s = RegressorSeries::from_fn(0.0, dt, n + 1, 2, |t, r| {
            r[0] = t.sin();
            r[1] = t.cos();
        });
        let rep = pe_check(&s, 2.0 * PI, dt, None).unwrap();
        assert!((rep.alpha - PI).abs() < 1e-6, "{}", rep.alpha);
    }

    #[test]
    fn window_longer_than_series() {
        let s = RegressorSeries::from_fn(0.0, 0.1, 11, 1, |_, r| r[0] = 1.0);
        assert!(matches!(pe_check(&s, 2.0, 0.1, None), Err(Error::WindowTooLong { .. })));
    }

    #[test]
    fn zero_component_forces_zero_alpha() {
        let s = RegressorSeries::from_fn(0.0, 0.01, 3001, 2, |t, r| {
            r[0] = t.sin() + 2.0;
            r[1] = 0.0;
        });
        let rep = pe_check(&s, 10.0, 0.01, None).unwrap();
        assert!(rep.alpha.abs() < 1e-9);
    }

    #[test]
    fn subsampled_quadrature() {
        let s = RegressorSeries::from_fn(0.0, 0.01, 1001, 1, |_, r| r[0] = 2.0);
        let rep = pe_check(&s, 5.0, 0.05, Some(1.0)).unwrap();
        assert!((rep.alpha - 20.0).abs() < 1e-9);
        assert!(pe_check(&s, 5.0, 0.015, None).is_err());
    }
}
