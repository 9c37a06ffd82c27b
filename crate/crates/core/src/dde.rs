//! Fixed-step RK4 integration of systems with discrete delays.
//!
//! Delayed arguments are read from a [`HistoryBuffer`] that stores the state
//! at every step and interpolates between samples. Stage times never reach
//! past the last stored sample as long as every nonzero delay is at least one
//! step long.

use std::collections::VecDeque;
use std::fmt;
use std::ops::Range;
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{dim_err, Error, Result};
use crate::io::{fmt_f64, write_atomic};
use crate::model::PlantModel;

/// How delayed values between two stored samples are reconstructed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Interpolation {
    #[default]
    Linear,
    /// Cubic Hermite using the right-hand side evaluated at each sample.
    CubicHermite,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimConfig {
    /// Step size (s).
    pub h: f64,
    /// Horizon (s).
    pub t_end: f64,
    /// Record every Nth step.
    #[serde(default = "one")]
    pub record_stride: usize,
    #[serde(default)]
    pub interpolation: Interpolation,
}

fn one() -> usize {
    1
}

impl SimConfig {
    pub fn new(h: f64, t_end: f64) -> Self {
        Self {
            h,
            t_end,
            record_stride: 1,
            interpolation: Interpolation::Linear,
        }
    }

    pub fn with_stride(mut self, stride: usize) -> Self {
        self.record_stride = stride;
        self
    }

    pub fn with_interpolation(mut self, interpolation: Interpolation) -> Self {
        self.interpolation = interpolation;
        self
    }

    /// Number of RK4 steps covering `[0, t_end]`.
    pub fn steps(&self) -> usize {
        ((self.t_end / self.h).round() as usize).max(1)
    }

    /// Checks `h > 0`, `t_end > 0`, a positive stride, and that every delay
    /// is either zero or at least one step.
    pub fn validate(&self, delays: &[f64]) -> Result<()> {
        if !(self.h > 0.0 && self.h.is_finite()) {
            return Err(Error::InvalidSim(format!("step size must be positive, got {}", self.h)));
        }
        if !(self.t_end > 0.0 && self.t_end.is_finite()) {
            return Err(Error::InvalidSim(format!("horizon must be positive, got {}", self.t_end)));
        }
        if self.record_stride == 0 {
            return Err(Error::InvalidSim("record_stride must be at least 1".into()));
        }
        for d in delays {
            if *d < 0.0 || (*d > 0.0 && *d < self.h * (1.0 - 1e-12)) {
                return Err(Error::InvalidSim(format!(
                    "delay {d} is nonzero but shorter than the step {}",
                    self.h
                )));
            }
        }
        Ok(())
    }
}

type HistoryFn = dyn Fn(f64, &mut [f64]) + Send + Sync;

/// State values prescribed for times before the start of integration.
#[derive(Clone)]
pub struct InitialHistory {
    dim: usize,
    f: Arc<HistoryFn>,
}

impl fmt::Debug for InitialHistory {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("InitialHistory").field("dim", &self.dim).finish_non_exhaustive()
    }
}

impl InitialHistory {
    pub fn zero(dim: usize) -> Self {
        Self::constant(vec![0.0; dim])
    }

    pub fn constant(value: Vec<f64>) -> Self {
        let dim = value.len();
        Self {
            dim,
            f: Arc::new(move |_t, out: &mut [f64]| out.copy_from_slice(&value)),
        }
    }

    /// Piecewise-linear through `(times[j], values[j])`, held constant outside.
    pub fn tabulated(times: Vec<f64>, values: Vec<Vec<f64>>) -> Result<Self> {
        if times.is_empty() || times.len() != values.len() {
            return Err(dim_err("tabulated history", times.len(), values.len()));
        }
        if times.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(Error::InvalidSim("tabulated history times must increase".into()));
        }
        let dim = values[0].len();
        if values.iter().any(|v| v.len() != dim) {
            return Err(Error::InvalidSim("tabulated history rows differ in length".into()));
        }
        Ok(Self {
            dim,
            f: Arc::new(move |t, out: &mut [f64]| {
                let j = times.partition_point(|s| *s <= t);
                if j == 0 {
                    out.copy_from_slice(&values[0]);
                } else if j == times.len() {
                    out.copy_from_slice(&values[j - 1]);
                } else {
                    let w = (t - times[j - 1]) / (times[j] - times[j - 1]);
                    for (o, (a, b)) in out.iter_mut().zip(values[j - 1].iter().zip(&values[j])) {
                        *o = a + w * (b - a);
                    }
                }
            }),
        })
    }

    pub fn from_fn<F>(dim: usize, f: F) -> Self
    where
        F: Fn(f64, &mut [f64]) + Send + Sync + 'static,
    {
        Self { dim, f: Arc::new(f) }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn eval_into(&self, t: f64, out: &mut [f64]) {
        (self.f)(t, out)
    }

    pub fn eval(&self, t: f64) -> Vec<f64> {
        let mut out = vec![0.0; self.dim];
        self.eval_into(t, &mut out);
        out
    }
}

/// Evenly spaced past states with interpolated lookups.
///
/// Samples older than the retention window are dropped; looking them up is a
/// [`Error::HistoryUnderrun`].
pub struct HistoryBuffer {
    t0: f64,
    h: f64,
    dim: usize,
    interpolation: Interpolation,
    init: InitialHistory,
    /// Absolute index of the first retained sample.
    first: usize,
    states: VecDeque<f64>,
    derivs: VecDeque<f64>,
    retain: Option<usize>,
}

impl HistoryBuffer {
    /// `retain_span`: how far back (s) lookups may reach; `None` keeps all.
    pub fn new(t0: f64, h: f64, init: InitialHistory, interpolation: Interpolation, retain_span: Option<f64>) -> Self {
        let dim = init.dim();
        Self {
            t0,
            h,
            dim,
            interpolation,
            init,
            first: 0,
            states: VecDeque::new(),
            derivs: VecDeque::new(),
            retain: retain_span.map(|s| (s / h).ceil() as usize + 3),
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn t0(&self) -> f64 {
        self.t0
    }

    pub fn step(&self) -> f64 {
        self.h
    }

    /// Number of samples ever pushed.
    pub fn len(&self) -> usize {
        self.first + self.states.len() / self.dim.max(1)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn last_time(&self) -> Option<f64> {
        (!self.is_empty()).then(|| self.t0 + (self.len() - 1) as f64 * self.h)
    }

    /// Appends the next sample. Its derivative, needed for cubic Hermite
    /// lookups, is attached later with [`HistoryBuffer::set_last_derivative`].
    pub fn push(&mut self, state: &[f64]) {
        debug_assert_eq!(state.len(), self.dim);
        self.states.extend(state.iter().copied());
        if self.interpolation == Interpolation::CubicHermite {
            self.derivs.extend(std::iter::repeat_n(f64::NAN, self.dim));
        }
        if let Some(keep) = self.retain {
            let held = self.states.len() / self.dim;
            if held > 2 * keep {
                let drop = held - keep;
                self.states.drain(..drop * self.dim);
                if !self.derivs.is_empty() {
                    self.derivs.drain(..drop * self.dim);
                }
                self.first += drop;
            }
        }
    }

    pub fn set_last_derivative(&mut self, deriv: &[f64]) {
        if self.interpolation != Interpolation::CubicHermite {
            return;
        }
        let start = self.derivs.len() - self.dim;
        for (j, d) in deriv.iter().enumerate() {
            self.derivs[start + j] = *d;
        }
    }

    pub fn lookup(&self, t: f64) -> Result<Vec<f64>> {
        let mut out = vec![0.0; self.dim];
        self.lookup_into(t, 0..self.dim, &mut out)?;
        Ok(out)
    }

    /// Writes components `range` of the state at time `t` into `out`.
    pub fn lookup_into(&self, t: f64, range: Range<usize>, out: &mut [f64]) -> Result<()> {
        let len = self.len();
        let snap = 1e-12_f64.max(8.0 * f64::EPSILON * (t.abs() + self.t0.abs()) / self.h);
        let s = (t - self.t0) / self.h;
        if s < -snap || len == 0 {
            if len == 0 && s >= -snap {
                return Err(Error::BeyondHistory { t, last: f64::NEG_INFINITY });
            }
            if range.len() == self.dim {
                self.init.eval_into(t, out);
            } else {
                let mut full = vec![0.0; self.dim];
                self.init.eval_into(t, &mut full);
                out.copy_from_slice(&full[range]);
            }
            return Ok(());
        }
        let mut j = s.floor();
        let mut frac = s - j;
        if frac > 1.0 - snap {
            j += 1.0;
            frac = 0.0;
        } else if frac < snap {
            frac = 0.0;
        }
        let j = j.max(0.0) as usize;
        let last = len - 1;
        if j > last || (j == last && frac > 0.0) {
            return Err(Error::BeyondHistory {
                t,
                last: self.t0 + last as f64 * self.h,
            });
        }
        if j < self.first {
            return Err(Error::HistoryUnderrun {
                t,
                first: self.t0 + self.first as f64 * self.h,
            });
        }
        let base = (j - self.first) * self.dim;
        if frac == 0.0 {
            for (o, c) in out.iter_mut().zip(range) {
                *o = self.states[base + c];
            }
            return Ok(());
        }
        let next = base + self.dim;
        match self.interpolation {
            Interpolation::Linear => {
                for (o, c) in out.iter_mut().zip(range) {
                    let a = self.states[base + c];
                    *o = a + frac * (self.states[next + c] - a);
                }
            }
            Interpolation::CubicHermite => {
                let f2 = frac * frac;
                let f3 = f2 * frac;
                let h00 = 2.0 * f3 - 3.0 * f2 + 1.0;
                let h10 = f3 - 2.0 * f2 + frac;
                let h01 = -2.0 * f3 + 3.0 * f2;
                let h11 = f3 - f2;
                for (o, c) in out.iter_mut().zip(range) {
                    *o = h00 * self.states[base + c]
                        + h10 * self.h * self.derivs[base + c]
                        + h01 * self.states[next + c]
                        + h11 * self.h * self.derivs[next + c];
                }
            }
        }
        Ok(())
    }
}

/// Everything the right-hand side may read at one RK stage.
pub struct Stage<'a> {
    pub t: f64,
    pub state: &'a [f64],
    pub past: &'a HistoryBuffer,
    input: &'a dyn Fn(f64) -> f64,
}

impl Stage<'_> {
    /// Components `range` of the state at `t − tau`; `tau == 0` reads the
    /// stage state itself.
    pub fn lagged_into(&self, tau: f64, range: Range<usize>, out: &mut [f64]) -> Result<()> {
        if tau == 0.0 {
            out.copy_from_slice(&self.state[range]);
            Ok(())
        } else {
            self.past.lookup_into(self.t - tau, range, out)
        }
    }

    /// Input at `t − tau`, zero before the start of integration.
    pub fn input_lagged(&self, tau: f64) -> f64 {
        let s = self.t - tau;
        if s < self.past.t0() - 1e-12 * self.past.step() {
            0.0
        } else {
            (self.input)(s)
        }
    }
}

/// Recorded time series of state vectors, stored row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    dim: usize,
    times: Vec<f64>,
    data: Vec<f64>,
}

impl Trajectory {
    pub fn new(dim: usize) -> Self {
        Self {
            dim,
            times: Vec::new(),
            data: Vec::new(),
        }
    }

    pub fn push(&mut self, t: f64, state: &[f64]) {
        debug_assert_eq!(state.len(), self.dim);
        self.times.push(t);
        self.data.extend_from_slice(state);
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn time(&self, i: usize) -> f64 {
        self.times[i]
    }

    pub fn state(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn last(&self) -> Option<(f64, &[f64])> {
        (!self.is_empty()).then(|| (self.times[self.len() - 1], self.state(self.len() - 1)))
    }

    /// Component `c` as a series.
    pub fn component(&self, c: usize) -> Vec<f64> {
        (0..self.len()).map(|i| self.data[i * self.dim + c]).collect()
    }

    /// Keeps components `range` only.
    pub fn project(&self, range: Range<usize>) -> Trajectory {
        let mut out = Trajectory::new(range.len());
        for i in 0..self.len() {
            out.push(self.times[i], &self.state(i)[range.clone()]);
        }
        out
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    /// Linear interpolation between recorded samples.
    pub fn interpolate_into(&self, t: f64, out: &mut [f64]) -> Option<()> {
        let n = self.len();
        if n == 0 || t < self.times[0] - 1e-9 || t > self.times[n - 1] + 1e-9 {
            return None;
        }
        let j = self.times.partition_point(|s| *s <= t);
        if j == 0 {
            out.copy_from_slice(self.state(0));
        } else if j == n {
            out.copy_from_slice(self.state(n - 1));
        } else {
            let (t0, t1) = (self.times[j - 1], self.times[j]);
            let w = (t - t0) / (t1 - t0);
            let (a, b) = (self.state(j - 1), self.state(j));
            for (o, (a, b)) in out.iter_mut().zip(a.iter().zip(b)) {
                *o = a + w * (b - a);
            }
        }
        Some(())
    }

    /// CSV with header `t,<names…>`; defaults to `x1,…,xn`.
    pub fn to_csv(&self, names: Option<&[String]>) -> String {
        let default: Vec<String>;
        let names = match names {
            Some(n) => n,
            None => {
                default = (1..=self.dim).map(|i| format!("x{i}")).collect();
                &default
            }
        };
        let mut s = String::with_capacity(self.len() * (self.dim + 1) * 24 + 64);
        s.push('t');
        for n in names {
            s.push(',');
            s.push_str(n);
        }
        s.push('\n');
        for i in 0..self.len() {
            s.push_str(&fmt_f64(self.times[i]));
            for v in self.state(i) {
                s.push(',');
                s.push_str(&fmt_f64(*v));
            }
            s.push('\n');
        }
        s
    }

    pub fn write_csv(&self, path: &Path, names: Option<&[String]>) -> Result<()> {
        write_atomic(path, self.to_csv(names).as_bytes())
    }
}

/// Integrates `ż(t) = rhs(t, z(t), z(t−·), u(t−·))` over `[0, cfg.t_end]`.
///
/// `lookback` is the largest delay the right-hand side will request.
pub fn integrate<F>(rhs: F, init: &InitialHistory, input: &dyn Fn(f64) -> f64, cfg: &SimConfig, lookback: f64) -> Result<Trajectory>
where
    F: FnMut(&Stage<'_>, &mut [f64]) -> Result<()>,
{
    integrate_observed(rhs, init, input, cfg, lookback, |_, _, _| Ok(()))
}

/// As [`integrate`], additionally calling `observer(t, z, history)` at
/// every recorded step. The observer sees the buffer including the sample
/// at `t`.
pub fn integrate_observed<F, O>(
    mut rhs: F,
    init: &InitialHistory,
    input: &dyn Fn(f64) -> f64,
    cfg: &SimConfig,
    lookback: f64,
    mut observer: O,
) -> Result<Trajectory>
where
    F: FnMut(&Stage<'_>, &mut [f64]) -> Result<()>,
    O: FnMut(f64, &[f64], &HistoryBuffer) -> Result<()>,
{
    cfg.validate(&[lookback])?;
    let dim = init.dim();
    let h = cfg.h;
    let t0 = 0.0;
    let steps = cfg.steps();
    let mut past = HistoryBuffer::new(t0, h, init.clone(), cfg.interpolation, Some(lookback + 2.0 * h));
    let mut traj = Trajectory::new(dim);

    let mut z = init.eval(t0);
    if z.iter().any(|v| !v.is_finite()) {
        return Err(Error::BlowUp { t: t0, stage: 0 });
    }
    let mut k1 = vec![0.0; dim];
    let mut k2 = vec![0.0; dim];
    let mut k3 = vec![0.0; dim];
    let mut k4 = vec![0.0; dim];
    let mut tmp = vec![0.0; dim];

    past.push(&z);
    traj.push(t0, &z);
    observer(t0, &z, &past)?;

    for step in 0..steps {
        let t = t0 + step as f64 * h;
        let t_half = t + 0.5 * h;
        let t_next = t0 + (step + 1) as f64 * h;

        let blow = |stage: u8, t: f64| Error::BlowUp { t, stage };
        rhs(&Stage { t, state: &z, past: &past, input }, &mut k1).map_err(|e| escalate(e, blow(1, t)))?;
        check_finite(&k1, blow(1, t))?;
        past.set_last_derivative(&k1);

        for j in 0..dim {
            tmp[j] = z[j] + 0.5 * h * k1[j];
        }
        check_finite(&tmp, blow(2, t_half))?;
        rhs(&Stage { t: t_half, state: &tmp, past: &past, input }, &mut k2).map_err(|e| escalate(e, blow(2, t_half)))?;
        for j in 0..dim {
            tmp[j] = z[j] + 0.5 * h * k2[j];
        }
        check_finite(&tmp, blow(3, t_half))?;
        rhs(&Stage { t: t_half, state: &tmp, past: &past, input }, &mut k3).map_err(|e| escalate(e, blow(3, t_half)))?;
        for j in 0..dim {
            tmp[j] = z[j] + h * k3[j];
        }
        check_finite(&tmp, blow(4, t_next))?;
        rhs(&Stage { t: t_next, state: &tmp, past: &past, input }, &mut k4).map_err(|e| escalate(e, blow(4, t_next)))?;

        for j in 0..dim {
            z[j] += h / 6.0 * (k1[j] + 2.0 * k2[j] + 2.0 * k3[j] + k4[j]);
        }
        check_finite(&z, blow(4, t_next))?;
        past.push(&z);
        if (step + 1) % cfg.record_stride == 0 || step + 1 == steps {
            traj.push(t_next, &z);
            observer(t_next, &z, &past)?;
        }
    }
    Ok(traj)
}

fn check_finite(v: &[f64], err: Error) -> Result<()> {
    if v.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(err)
    }
}

/// Non-finite values met inside the right-hand side mean the solution has
/// already escaped; report them as a blow-up.
fn escalate(e: Error, blow: Error) -> Error {
    match e {
        Error::NonFiniteInput(_) => blow,
        other => other,
    }
}

/// Simulates a plant alone; the returned trajectory holds `x`.
pub fn simulate_plant(plant: &PlantModel, input: &dyn Fn(f64) -> f64, init: &InitialHistory, cfg: &SimConfig) -> Result<Trajectory> {
    let (n, l, m) = (plant.n(), plant.l(), plant.m());
    if init.dim() != n {
        return Err(dim_err("initial history", n, init.dim()));
    }
    cfg.validate(plant.delays())?;
    let mut x = vec![0.0; n];
    let mut phi = vec![0.0; l];
    let mut psi = vec![0.0; m];
    let rhs = |st: &Stage<'_>, out: &mut [f64]| -> Result<()> {
        out.fill(0.0);
        for (i, tau) in plant.delays().iter().enumerate() {
            st.lagged_into(*tau, 0..n, &mut x)?;
            plant.phi().eval_into(&x, &mut phi)?;
            plant.psi().eval_into(&[plant.output(&x)], &mut psi)?;
            plant.accumulate_slot(i, &x, &phi, &psi, st.input_lagged(*tau), out);
        }
        Ok(())
    };
    integrate(rhs, init, input, cfg, plant.max_delay())
}
