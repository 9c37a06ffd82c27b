//! Adaptive identifier for plants satisfying the matching condition.
//!
//! The identifier copies the plant structure with the known parts and the
//! current row estimates,
//!
//! ```text
//! dx̂/dt = Σᵢ [Aᵢ⁰x̂ᵢ + Dᵢ⁰φ(x̂ᵢ) + Gᵢ⁰ψ(yᵢ) + Bᵢ⁰uᵢ + injᵢ]
//!        + T0 · Σᵢ [κ̂ᵢᴬx̂ᵢ + κ̂ᵢᴰφ(x̂ᵢ) + κ̂ᵢᴳψ(yᵢ) + κ̂ᵢᴮuᵢ]
//! ```
//!
//! where a subscript `i` denotes evaluation at `t − τᵢ`, and adapts every
//! row along its regressor times the output error `e = y − Cx̂`:
//! `dκ̂ᵢᵀ/dt = Γᵢ · regressorᵢ · e`.
//!
//! The injection term enters the error dynamics as `−Yᵢ ε(t−τᵢ)`. In the
//! default [`Injection::Output`] form `Yᵢ = Kᵢ C`, so the identifier adds
//! `Kᵢ e(t−τᵢ)` and reads nothing but `y` and `u`.

use std::ops::Range;
use std::path::Path;

use nalgebra::{DMatrix, DVector};

use crate::dde::{integrate_observed, HistoryBuffer, InitialHistory, SimConfig, Stage, Trajectory};
use crate::error::{dim_err, Error, Result};
use crate::io::{fmt_f64, write_atomic};
use crate::lmi::LmiCertificate;
use crate::model::{decompose_matching, gemv_acc, PlantModel, SlotKappa, SlotMatrices, Term};

/// Position of every estimated row inside the flat parameter vector.
///
/// Rows are ordered term-major (`A`, `D`, `G`, `B`), then by slot. A term
/// may be restricted to its first few slots (reduced model); the remaining
/// rows are not estimated and stay at zero.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamLayout {
    n: usize,
    l: usize,
    m: usize,
    slots: usize,
    counts: [usize; 4],
    offsets: [usize; 4],
    len: usize,
}

impl ParamLayout {
    pub fn new(n: usize, l: usize, m: usize, slots: usize, counts: Option<[usize; 4]>) -> Result<Self> {
        let counts = counts.unwrap_or([slots; 4]);
        if counts.iter().any(|c| *c > slots) {
            return Err(Error::InvalidIdentifier(format!("term counts {counts:?} exceed {slots} slots")));
        }
        let mut offsets = [0; 4];
        let mut off = 0;
        for term in Term::ALL {
            offsets[term.index()] = off;
            off += counts[term.index()] * width(n, l, m, term);
        }
        Ok(Self {
            n,
            l,
            m,
            slots,
            counts,
            offsets,
            len: off,
        })
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn slots(&self) -> usize {
        self.slots
    }

    pub fn counts(&self) -> [usize; 4] {
        self.counts
    }

    pub fn width(&self, term: Term) -> usize {
        width(self.n, self.l, self.m, term)
    }

    pub fn is_active(&self, term: Term, slot: usize) -> bool {
        slot < self.counts[term.index()]
    }

    pub fn range(&self, term: Term, slot: usize) -> Option<Range<usize>> {
        self.is_active(term, slot).then(|| {
            let w = self.width(term);
            let start = self.offsets[term.index()] + slot * w;
            start..start + w
        })
    }

    /// `<term><slot>_<component>` with 1-based components, e.g. `A1_2`.
    pub fn names(&self) -> Vec<String> {
        let mut names = Vec::with_capacity(self.len);
        for term in Term::ALL {
            for slot in 0..self.counts[term.index()] {
                for j in 1..=self.width(term) {
                    names.push(format!("{}{}_{}", term.letter(), slot, j));
                }
            }
        }
        names
    }

    pub fn flatten(&self, kappa: &[SlotKappa]) -> Vec<f64> {
        let mut out = vec![0.0; self.len];
        for term in Term::ALL {
            for (slot, k) in kappa.iter().enumerate() {
                if let Some(r) = self.range(term, slot) {
                    out[r].copy_from_slice(k.term(term));
                }
            }
        }
        out
    }

    pub fn unflatten(&self, theta: &[f64]) -> Vec<SlotKappa> {
        (0..self.slots)
            .map(|slot| {
                let mut k = SlotKappa::zeros(self.n, self.l, self.m);
                for term in Term::ALL {
                    if let Some(r) = self.range(term, slot) {
                        k.term_mut(term).copy_from_slice(&theta[r]);
                    }
                }
                k
            })
            .collect()
    }
}

fn width(n: usize, l: usize, m: usize, term: Term) -> usize {
    match term {
        Term::A => n,
        Term::D => l,
        Term::G => m,
        Term::B => 1,
    }
}

/// Adaptation gains of one slot.
#[derive(Debug, Clone, PartialEq)]
pub struct SlotGains {
    pub a: DMatrix<f64>,
    pub d: DMatrix<f64>,
    pub g: DMatrix<f64>,
    pub b: f64,
}

impl SlotGains {
    /// `γ·I` for every term.
    pub fn uniform(n: usize, l: usize, m: usize, gamma: f64) -> Self {
        Self {
            a: DMatrix::identity(n, n) * gamma,
            d: DMatrix::identity(l, l) * gamma,
            g: DMatrix::identity(m, m) * gamma,
            b: gamma,
        }
    }

    fn matrix(&self, term: Term) -> DMatrix<f64> {
        match term {
            Term::A => self.a.clone(),
            Term::D => self.d.clone(),
            Term::G => self.g.clone(),
            Term::B => DMatrix::from_element(1, 1, self.b),
        }
    }
}

/// How the identifier corrects itself with the estimation error.
#[derive(Debug, Clone, PartialEq)]
pub enum Injection {
    /// Column gains `Kᵢ`; the identifier adds `Kᵢ·e(t−τᵢ)`.
    Output(Vec<DVector<f64>>),
    /// General `Yᵢ` acting on the full state error `ε(t−τᵢ)`. This reads
    /// the true state and is meant for diagnostics only.
    FullState(Vec<DMatrix<f64>>),
}

impl Injection {
    pub fn none(n: usize, slots: usize) -> Self {
        Injection::Output(vec![DVector::zeros(n); slots])
    }

    /// The matrices `Yᵢ` entering the error dynamics as `−Yᵢ ε(t−τᵢ)`.
    pub fn y_matrices(&self, c: &nalgebra::RowDVector<f64>) -> Vec<DMatrix<f64>> {
        match self {
            Injection::Output(k) => k.iter().map(|k| k * c).collect(),
            Injection::FullState(y) => y.clone(),
        }
    }

    fn slots(&self) -> usize {
        match self {
            Injection::Output(k) => k.len(),
            Injection::FullState(y) => y.len(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct IdentifierConfig {
    /// Known parts `Aᵢ⁰, Dᵢ⁰, Gᵢ⁰, Bᵢ⁰` per slot.
    pub known: Vec<SlotMatrices>,
    pub t0: DVector<f64>,
    pub gains: Vec<SlotGains>,
    pub injection: Injection,
    /// Initial row estimates; zero when absent.
    pub initial_kappa: Option<Vec<SlotKappa>>,
    /// Constant history of `x̂` for `t ≤ 0`; zero when absent.
    pub xhat_init: Option<Vec<f64>>,
    /// Active slots per term for a reduced model.
    pub term_counts: Option<[usize; 4]>,
}

/// Delayed signals of one slot as seen at the current time.
#[derive(Debug, Clone, PartialEq)]
pub struct SlotSignals {
    pub xhat: Vec<f64>,
    pub y: f64,
    pub u: f64,
    /// True state, needed only by full-state injection and the residual.
    pub x: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct IdentifierState {
    pub t: f64,
    pub xhat: DVector<f64>,
    pub kappa_hat: Vec<SlotKappa>,
}

/// Scratch values for one evaluation of the identifier right-hand side.
struct Workspace {
    xhat: Vec<f64>,
    phi_hat: Vec<f64>,
    psi: Vec<f64>,
    u: Vec<f64>,
    inj: Vec<f64>,
}

impl Workspace {
    fn new(n: usize, l: usize, m: usize, slots: usize) -> Self {
        Self {
            xhat: vec![0.0; slots * n],
            phi_hat: vec![0.0; slots * l],
            psi: vec![0.0; slots * m],
            u: vec![0.0; slots],
            inj: vec![0.0; slots * n],
        }
    }
}

/// Validated identifier bound to a plant structure (delays, `C`, φ, ψ).
#[derive(Debug, Clone)]
pub struct Identifier {
    structure: PlantModel,
    cfg: IdentifierConfig,
    layout: ParamLayout,
    /// Γ per (term, slot), `None` for inactive rows.
    gains: Vec<[Option<DMatrix<f64>>; 4]>,
    gains_inv: Vec<[Option<DMatrix<f64>>; 4]>,
}

impl Identifier {
    pub fn new(structure: &PlantModel, cfg: IdentifierConfig) -> Result<Self> {
        let (n, l, m) = (structure.n(), structure.l(), structure.m());
        let slots = structure.delays().len();
        if cfg.known.len() != slots {
            return Err(dim_err("known parts", slots, cfg.known.len()));
        }
        for (i, k) in cfg.known.iter().enumerate() {
            if k.a.shape() != (n, n) || k.d.shape() != (n, l) || k.g.shape() != (n, m) || k.b.len() != n {
                return Err(dim_err(&format!("known parts of slot {i}"), format!("n={n}, l={l}, m={m}"), "other shapes"));
            }
        }
        if cfg.t0.len() != n {
            return Err(dim_err("T0", n, cfg.t0.len()));
        }
        if cfg.gains.len() != slots {
            return Err(dim_err("gains", slots, cfg.gains.len()));
        }
        if cfg.injection.slots() != slots {
            return Err(dim_err("injection gains", slots, cfg.injection.slots()));
        }
        match &cfg.injection {
            Injection::Output(k) if k.iter().any(|k| k.len() != n) => return Err(dim_err("injection K", n, "other length")),
            Injection::FullState(y) if y.iter().any(|y| y.shape() != (n, n)) => {
                return Err(dim_err("injection Y", format!("{n}×{n}"), "other shape"))
            }
            _ => {}
        }
        if let Some(x) = &cfg.xhat_init {
            if x.len() != n {
                return Err(dim_err("x̂ initial history", n, x.len()));
            }
        }
        let layout = ParamLayout::new(n, l, m, slots, cfg.term_counts)?;
        if let Some(k) = &cfg.initial_kappa {
            if k.len() != slots || k.iter().any(|k| k.a.len() != n || k.d.len() != l || k.g.len() != m) {
                return Err(dim_err("initial estimates", format!("{slots} slots"), k.len()));
            }
        }

        let mut gains = Vec::with_capacity(slots);
        let mut gains_inv = Vec::with_capacity(slots);
        for (slot, g) in cfg.gains.iter().enumerate() {
            let mut row: [Option<DMatrix<f64>>; 4] = Default::default();
            let mut row_inv: [Option<DMatrix<f64>>; 4] = Default::default();
            for term in Term::ALL {
                if !layout.is_active(term, slot) {
                    continue;
                }
                let mat = g.matrix(term);
                let w = layout.width(term);
                if mat.shape() != (w, w) {
                    return Err(dim_err(&format!("Γ{}{slot}", term.letter()), format!("{w}×{w}"), format!("{:?}", mat.shape())));
                }
                let inv = spd_inverse(&mat).ok_or_else(|| {
                    Error::InvalidIdentifier(format!("Γ{}{slot} is not symmetric positive definite", term.letter()))
                })?;
                row[term.index()] = Some(mat);
                row_inv[term.index()] = Some(inv);
            }
            gains.push(row);
            gains_inv.push(row_inv);
        }
        Ok(Self {
            structure: structure.clone(),
            cfg,
            layout,
            gains,
            gains_inv,
        })
    }

    pub fn layout(&self) -> &ParamLayout {
        &self.layout
    }

    pub fn config(&self) -> &IdentifierConfig {
        &self.cfg
    }

    pub fn initial_theta(&self) -> Vec<f64> {
        match &self.cfg.initial_kappa {
            Some(k) => self.layout.flatten(k),
            None => vec![0.0; self.layout.len()],
        }
    }

    pub fn xhat_init(&self) -> Vec<f64> {
        self.cfg.xhat_init.clone().unwrap_or_else(|| vec![0.0; self.structure.n()])
    }

    fn load_signals(&self, signals: &[SlotSignals], ws: &mut Workspace) -> Result<()> {
        let (n, l, m) = (self.structure.n(), self.structure.l(), self.structure.m());
        if signals.len() != self.layout.slots() {
            return Err(dim_err("slot signals", self.layout.slots(), signals.len()));
        }
        for (i, s) in signals.iter().enumerate() {
            if s.xhat.len() != n {
                return Err(dim_err("x̂ signal", n, s.xhat.len()));
            }
            ws.xhat[i * n..(i + 1) * n].copy_from_slice(&s.xhat);
            ws.u[i] = s.u;
            self.structure.phi().eval_into(&s.xhat, &mut ws.phi_hat[i * l..(i + 1) * l])?;
            self.structure.psi().eval_into(&[s.y], &mut ws.psi[i * m..(i + 1) * m])?;
            let inj = &mut ws.inj[i * n..(i + 1) * n];
            inj.fill(0.0);
            match &self.cfg.injection {
                Injection::Output(k) => {
                    let e = s.y - self.structure.output(&s.xhat);
                    for (o, kk) in inj.iter_mut().zip(k[i].iter()) {
                        *o = kk * e;
                    }
                }
                Injection::FullState(y) => {
                    let x = s.x.as_ref().ok_or_else(|| {
                        Error::InvalidIdentifier("full-state injection needs the true state".into())
                    })?;
                    let eps: Vec<f64> = x.iter().zip(&s.xhat).map(|(a, b)| a - b).collect();
                    gemv_acc(&y[i], &eps, inj);
                }
            }
        }
        Ok(())
    }

    fn xhat_derivative(&self, theta: &[f64], ws: &Workspace, out: &mut [f64]) {
        let (n, l, m) = (self.structure.n(), self.structure.l(), self.structure.m());
        out.fill(0.0);
        let mut along_t0 = 0.0;
        for (i, k0) in self.cfg.known.iter().enumerate() {
            let xh = &ws.xhat[i * n..(i + 1) * n];
            let ph = &ws.phi_hat[i * l..(i + 1) * l];
            let ps = &ws.psi[i * m..(i + 1) * m];
            let u = ws.u[i];
            gemv_acc(&k0.a, xh, out);
            gemv_acc(&k0.d, ph, out);
            gemv_acc(&k0.g, ps, out);
            for r in 0..n {
                out[r] += k0.b[r] * u + ws.inj[i * n + r];
            }
            for (term, reg) in [(Term::A, xh), (Term::D, ph), (Term::G, ps), (Term::B, std::slice::from_ref(&ws.u[i]))] {
                if let Some(range) = self.layout.range(term, i) {
                    along_t0 += dot(&theta[range], reg);
                }
            }
        }
        for (o, t) in out.iter_mut().zip(self.cfg.t0.iter()) {
            *o += t * along_t0;
        }
    }

    fn theta_derivative(&self, e: f64, ws: &Workspace, out: &mut [f64]) {
        let (n, l, m) = (self.structure.n(), self.structure.l(), self.structure.m());
        for i in 0..self.layout.slots() {
            let regs: [&[f64]; 4] = [
                &ws.xhat[i * n..(i + 1) * n],
                &ws.phi_hat[i * l..(i + 1) * l],
                &ws.psi[i * m..(i + 1) * m],
                std::slice::from_ref(&ws.u[i]),
            ];
            for term in Term::ALL {
                if let (Some(range), Some(gamma)) = (self.layout.range(term, i), &self.gains[i][term.index()]) {
                    let dst = &mut out[range];
                    dst.fill(0.0);
                    gemv_acc(gamma, regs[term.index()], dst);
                    for v in dst.iter_mut() {
                        *v *= e;
                    }
                }
            }
        }
    }

    /// Time derivative of the state estimate for the given delayed signals.
    pub fn identifier_rhs(&self, state: &IdentifierState, signals: &[SlotSignals]) -> Result<DVector<f64>> {
        let (n, l, m) = (self.structure.n(), self.structure.l(), self.structure.m());
        if state.xhat.len() != n {
            return Err(dim_err("x̂", n, state.xhat.len()));
        }
        let mut ws = Workspace::new(n, l, m, self.layout.slots());
        self.load_signals(signals, &mut ws)?;
        let theta = self.layout.flatten(&state.kappa_hat);
        let mut out = vec![0.0; n];
        self.xhat_derivative(&theta, &ws, &mut out);
        Ok(DVector::from_vec(out))
    }

    /// Time derivatives of all row estimates for output error `e`.
    pub fn adaptation_rhs(&self, e: f64, signals: &[SlotSignals]) -> Result<Vec<SlotKappa>> {
        let (n, l, m) = (self.structure.n(), self.structure.l(), self.structure.m());
        let mut ws = Workspace::new(n, l, m, self.layout.slots());
        self.load_signals(signals, &mut ws)?;
        let mut out = vec![0.0; self.layout.len()];
        self.theta_derivative(e, &ws, &mut out);
        Ok(self.layout.unflatten(&out))
    }

    /// `C·T0 · Σᵢ [Δκᵢᴬx(t−τᵢ) + Δκᵢᴰφ(x(t−τᵢ)) + Δκᵢᴳψ(y(t−τᵢ)) + Δκᵢᴮu(t−τᵢ)]`
    /// with `Δκ = truth − estimate`; needs the true delayed states.
    pub fn identifiability_residual(&self, truth: &[SlotKappa], estimate: &[SlotKappa], signals: &[SlotSignals]) -> Result<f64> {
        let p = &self.structure;
        if truth.len() != signals.len() || estimate.len() != signals.len() {
            return Err(dim_err("residual slots", signals.len(), truth.len().min(estimate.len())));
        }
        let mut sum = 0.0;
        for ((tr, es), s) in truth.iter().zip(estimate).zip(signals) {
            let x = s.x.as_ref().ok_or_else(|| Error::InvalidIdentifier("residual needs the true state".into()))?;
            let phi = p.eval_phi(x)?;
            let psi = p.eval_psi(p.output(x))?;
            let diff = |term: Term| -> Vec<f64> { tr.term(term).iter().zip(es.term(term)).map(|(a, b)| a - b).collect() };
            sum += dot(&diff(Term::A), x) + dot(&diff(Term::D), &phi) + dot(&diff(Term::G), &psi) + (tr.b - es.b) * s.u;
        }
        Ok(p.output(self.cfg.t0.as_slice()) * sum)
    }
}

fn quad(m: &DMatrix<f64>, v: &DVector<f64>) -> f64 {
    v.dot(&(m * v))
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn spd_inverse(m: &DMatrix<f64>) -> Option<DMatrix<f64>> {
    let asym = (m - m.transpose()).norm();
    if asym > 1e-12 * m.norm() {
        return None;
    }
    m.clone().cholesky().map(|c| c.inverse())
}

/// Per-record diagnostics of an identification run.
#[derive(Debug, Clone, PartialEq)]
pub struct DiagnosticsRecord {
    pub t: f64,
    pub eps_norm: f64,
    pub e: f64,
    /// Per slot: `‖Δκᴬ‖, ‖Δκᴰ‖, ‖Δκᴳ‖, |Δκᴮ|`.
    pub param_errors: Vec<[f64; 4]>,
    /// Lyapunov–Krasovskii functional; present when a certificate was supplied.
    pub v: Option<f64>,
    pub identif_residual: f64,
}

impl DiagnosticsRecord {
    pub fn max_param_error(&self) -> f64 {
        self.param_errors.iter().flatten().fold(0.0, |m, v| m.max(*v))
    }
}

/// Everything recorded by [`run_identification`].
#[derive(Debug, Clone)]
pub struct IdentificationRun {
    n: usize,
    layout: ParamLayout,
    /// Augmented state `[x | x̂ | θ | …]` at every recorded step.
    pub trajectory: Trajectory,
    pub diagnostics: Vec<DiagnosticsRecord>,
    /// True rows, flattened with the same layout as the estimates.
    pub truth: Vec<f64>,
}

impl IdentificationRun {
    pub fn layout(&self) -> &ParamLayout {
        &self.layout
    }

    pub fn len(&self) -> usize {
        self.trajectory.len()
    }

    pub fn is_empty(&self) -> bool {
        self.trajectory.is_empty()
    }

    pub fn time(&self, i: usize) -> f64 {
        self.trajectory.time(i)
    }

    pub fn plant_state(&self, i: usize) -> &[f64] {
        &self.trajectory.state(i)[..self.n]
    }

    pub fn xhat(&self, i: usize) -> &[f64] {
        &self.trajectory.state(i)[self.n..2 * self.n]
    }

    pub fn theta(&self, i: usize) -> &[f64] {
        &self.trajectory.state(i)[2 * self.n..2 * self.n + self.layout.len()]
    }

    pub fn eps(&self, i: usize) -> Vec<f64> {
        self.plant_state(i).iter().zip(self.xhat(i)).map(|(a, b)| a - b).collect()
    }

    pub fn kappa_hat(&self, i: usize) -> Vec<SlotKappa> {
        self.layout.unflatten(self.theta(i))
    }

    /// Mean estimate over records with `t ≥ (1 − fraction)·t_last`.
    pub fn tail_mean(&self, fraction: f64) -> Vec<f64> {
        let t_last = self.trajectory.last().map_or(0.0, |(t, _)| t);
        let from = (1.0 - fraction) * t_last;
        let mut acc = vec![0.0; self.layout.len()];
        let mut count = 0usize;
        for i in 0..self.len() {
            if self.time(i) >= from {
                for (a, v) in acc.iter_mut().zip(self.theta(i)) {
                    *a += v;
                }
                count += 1;
            }
        }
        acc.iter().map(|a| a / count.max(1) as f64).collect()
    }

    pub fn diagnostics_header(&self) -> Vec<String> {
        let mut h: Vec<String> = ["t", "eps_norm", "e", "V", "residual"].iter().map(|s| s.to_string()).collect();
        h.extend(self.layout.names().into_iter().map(|n| format!("{n}_hat")));
        h
    }

    /// `t,eps_norm,e,V,residual,<κ̂ columns>`; `V` is empty without a certificate.
    pub fn diagnostics_csv(&self) -> String {
        let mut s = self.diagnostics_header().join(",");
        s.push('\n');
        for (i, d) in self.diagnostics.iter().enumerate() {
            let mut row = vec![
                fmt_f64(d.t),
                fmt_f64(d.eps_norm),
                fmt_f64(d.e),
                d.v.map(fmt_f64).unwrap_or_default(),
                fmt_f64(d.identif_residual),
            ];
            row.extend(self.theta(i).iter().map(|v| fmt_f64(*v)));
            s.push_str(&row.join(","));
            s.push('\n');
        }
        s
    }

    /// `t,dA0,dD0,dG0,dB0,dA1,…`: per-slot norms of the parameter errors.
    pub fn param_errors_csv(&self) -> String {
        let mut s = String::from("t");
        for slot in 0..self.layout.slots() {
            for term in Term::ALL {
                s.push_str(&format!(",d{}{slot}", term.letter()));
            }
        }
        s.push('\n');
        for d in &self.diagnostics {
            let mut row = vec![fmt_f64(d.t)];
            row.extend(d.param_errors.iter().flatten().map(|v| fmt_f64(*v)));
            s.push_str(&row.join(","));
            s.push('\n');
        }
        s
    }

    pub fn write_diagnostics(&self, path: &Path) -> Result<()> {
        write_atomic(path, self.diagnostics_csv().as_bytes())
    }

    /// Plant state, estimate and ε as CSV (`t,x1..,xhat1..,eps1..`).
    pub fn states_csv(&self) -> String {
        let n = self.n;
        let mut s = String::from("t");
        for prefix in ["x", "xhat", "eps"] {
            for j in 1..=n {
                s.push_str(&format!(",{prefix}{j}"));
            }
        }
        s.push('\n');
        for i in 0..self.len() {
            let mut row = vec![fmt_f64(self.time(i))];
            row.extend(self.plant_state(i).iter().map(|v| fmt_f64(*v)));
            row.extend(self.xhat(i).iter().map(|v| fmt_f64(*v)));
            row.extend(self.eps(i).iter().map(|v| fmt_f64(*v)));
            s.push_str(&row.join(","));
            s.push('\n');
        }
        s
    }
}

/// Co-integrates the plant (truth generator), the identifier and the row
/// estimates as one delayed system and records diagnostics.
///
/// With a certificate the Lyapunov–Krasovskii functional
/// `V = εᵀPε + Σ ΔκΓ⁻¹Δκᵀ + Σᵢ ∫_{t−τᵢ}^{t} εᵀSᵢε ds` is recorded; the integrals
/// are carried as extra states `qᵢ' = εᵀSᵢε`, so `Vᵢ₂ = qᵢ(t) − qᵢ(t−τᵢ)`.
pub fn run_identification(
    plant: &PlantModel,
    input: &(dyn Fn(f64) -> f64 + Sync),
    cfg: &IdentifierConfig,
    sim: &SimConfig,
    plant_init: &InitialHistory,
    certificate: Option<&LmiCertificate>,
) -> Result<IdentificationRun> {
    let (n, l, m) = (plant.n(), plant.l(), plant.m());
    let delays = plant.delays().to_vec();
    let slots = delays.len();
    sim.validate(&delays)?;
    if plant_init.dim() != n {
        return Err(dim_err("plant initial history", n, plant_init.dim()));
    }
    let ident = Identifier::new(plant, cfg.clone())?;
    let layout = ident.layout().clone();
    let p = layout.len();

    let decomposition = decompose_matching(plant, &cfg.known, &cfg.t0)?;
    for term in Term::ALL {
        for (slot, k) in decomposition.kappa.iter().enumerate() {
            if !layout.is_active(term, slot) && k.term(term).iter().any(|v| *v != 0.0) {
                return Err(Error::InvalidIdentifier(format!(
                    "row {}{slot} is nonzero in the plant but not estimated",
                    term.letter()
                )));
            }
        }
    }
    let truth = layout.flatten(&decomposition.kappa);
    let truth_kappa = decomposition.kappa.clone();

    let s_mats: Option<Vec<DMatrix<f64>>> = match certificate {
        Some(c) if c.s.len() != slots || c.p.shape() != (n, n) => {
            return Err(dim_err("certificate", format!("{slots} S matrices of {n}×{n}"), c.s.len()));
        }
        Some(c) => Some(c.s.clone()),
        None => None,
    };
    let q_dim = if s_mats.is_some() { slots } else { 0 };
    let dim = 2 * n + p + q_dim;
    let (x_r, xh_r, th_r, q_r) = (0..n, n..2 * n, 2 * n..2 * n + p, 2 * n + p..dim);

    let xhat0 = ident.xhat_init();
    let theta0 = ident.initial_theta();
    let init = {
        let plant_init = plant_init.clone();
        let xhat0 = xhat0.clone();
        let theta0 = theta0.clone();
        let s_mats = s_mats.clone();
        InitialHistory::from_fn(dim, move |t, out: &mut [f64]| {
            plant_init.eval_into(t, &mut out[..n]);
            out[n..2 * n].copy_from_slice(&xhat0);
            out[2 * n..2 * n + p].copy_from_slice(&theta0);
            if let Some(s) = &s_mats {
                let eps_at = |tt: f64| -> DVector<f64> {
                    let x = plant_init.eval(tt);
                    DVector::from_iterator(n, x.iter().zip(&xhat0).map(|(a, b)| a - b))
                };
                for (i, si) in s.iter().enumerate() {
                    out[2 * n + p + i] = if t >= 0.0 { 0.0 } else { -simpson(|tt| quad(si, &eps_at(tt)), t, 0.0) };
                }
            }
        })
    };

    let mut ws = Workspace::new(n, l, m, slots);
    let mut lag = vec![0.0; 2 * n];
    let mut x_lags = vec![0.0; slots * n];
    let mut phi_x = vec![0.0; l];
    let mut psi_y = vec![0.0; m];
    let c = plant.c().clone();
    let t0_dir = cfg.t0.clone();

    let rhs = |st: &Stage<'_>, out: &mut [f64]| -> Result<()> {
        for (i, tau) in delays.iter().enumerate() {
            st.lagged_into(*tau, 0..2 * n, &mut lag)?;
            x_lags[i * n..(i + 1) * n].copy_from_slice(&lag[..n]);
            ws.xhat[i * n..(i + 1) * n].copy_from_slice(&lag[n..]);
            ws.u[i] = st.input_lagged(*tau);
        }
        // plant
        let dx = &mut out[x_r.clone()];
        dx.fill(0.0);
        for i in 0..slots {
            let x = &x_lags[i * n..(i + 1) * n];
            let y = plant.output(x);
            plant.phi().eval_into(x, &mut phi_x)?;
            plant.psi().eval_into(&[y], &mut psi_y)?;
            plant.accumulate_slot(i, x, &phi_x, &psi_y, ws.u[i], dx);
            ws.psi[i * m..(i + 1) * m].copy_from_slice(&psi_y);

            let xh = &ws.xhat[i * n..(i + 1) * n];
            plant.phi().eval_into(xh, &mut ws.phi_hat[i * l..(i + 1) * l])?;
            let inj = &mut ws.inj[i * n..(i + 1) * n];
            inj.fill(0.0);
            match &cfg.injection {
                Injection::Output(k) => {
                    let e_i = y - plant.output(xh);
                    for (o, kk) in inj.iter_mut().zip(k[i].iter()) {
                        *o = kk * e_i;
                    }
                }
                Injection::FullState(ymat) => {
                    let eps: Vec<f64> = x.iter().zip(xh).map(|(a, b)| a - b).collect();
                    gemv_acc(&ymat[i], &eps, inj);
                }
            }
        }
        let theta = &st.state[th_r.clone()];
        ident.xhat_derivative(theta, &ws, &mut out[xh_r.clone()]);
        let x_now = &st.state[x_r.clone()];
        let xh_now = &st.state[xh_r.clone()];
        let e: f64 = c.iter().zip(x_now.iter().zip(xh_now)).map(|(c, (a, b))| c * (a - b)).sum();
        ident.theta_derivative(e, &ws, &mut out[th_r.clone()]);
        if let Some(s) = &s_mats {
            let eps = DVector::from_iterator(n, x_now.iter().zip(xh_now).map(|(a, b)| a - b));
            for (i, si) in s.iter().enumerate() {
                out[q_r.start + i] = quad(si, &eps);
            }
        }
        Ok(())
    };

    let mut diagnostics = Vec::new();
    let ct0 = plant.output(t0_dir.as_slice());
    let mut full = vec![0.0; dim];
    let observer = |t: f64, z: &[f64], past: &HistoryBuffer| -> Result<()> {
        let x = &z[x_r.clone()];
        let xh = &z[xh_r.clone()];
        let theta = &z[th_r.clone()];
        let eps: Vec<f64> = x.iter().zip(xh).map(|(a, b)| a - b).collect();
        let eps_norm = eps.iter().map(|v| v * v).sum::<f64>().sqrt();
        let e = plant.output(&eps);
        let delta: Vec<f64> = truth.iter().zip(theta).map(|(a, b)| a - b).collect();
        let est = layout.unflatten(theta);

        let mut param_errors = Vec::with_capacity(slots);
        for slot in 0..slots {
            let mut row = [0.0; 4];
            for term in Term::ALL {
                let d: Vec<f64> = truth_kappa[slot].term(term).iter().zip(est[slot].term(term)).map(|(a, b)| a - b).collect();
                row[term.index()] = d.iter().map(|v| v * v).sum::<f64>().sqrt();
            }
            param_errors.push(row);
        }

        let v = match (certificate, &s_mats) {
            (Some(cert), Some(_)) => {
                let ev = DVector::from_column_slice(&eps);
                let mut v = quad(&cert.p, &ev);
                for slot in 0..slots {
                    for term in Term::ALL {
                        if let (Some(r), Some(ginv)) = (layout.range(term, slot), &ident.gains_inv[slot][term.index()]) {
                            v += quad(ginv, &DVector::from_column_slice(&delta[r]));
                        }
                    }
                }
                for (i, tau) in delays.iter().enumerate() {
                    if *tau > 0.0 {
                        past.lookup_into(t - tau, 0..dim, &mut full)?;
                        v += z[q_r.start + i] - full[q_r.start + i];
                    }
                }
                Some(v)
            }
            _ => None,
        };

        let mut sum = 0.0;
        for (slot, tau) in delays.iter().enumerate() {
            let xs: Vec<f64> = if *tau == 0.0 {
                x.to_vec()
            } else {
                past.lookup_into(t - tau, 0..dim, &mut full)?;
                full[..n].to_vec()
            };
            let u = if t - tau < 0.0 { 0.0 } else { input(t - tau) };
            let phi = plant.eval_phi(&xs)?;
            let psi = plant.eval_psi(plant.output(&xs))?;
            let d = |term: Term| -> Vec<f64> {
                truth_kappa[slot].term(term).iter().zip(est[slot].term(term)).map(|(a, b)| a - b).collect()
            };
            sum += dot(&d(Term::A), &xs) + dot(&d(Term::D), &phi) + dot(&d(Term::G), &psi) + d(Term::B)[0] * u;
        }

        diagnostics.push(DiagnosticsRecord {
            t,
            eps_norm,
            e,
            param_errors,
            v,
            identif_residual: ct0 * sum,
        });
        Ok(())
    };

    let trajectory = integrate_observed(rhs, &init, input, sim, plant.max_delay(), observer)?;
    Ok(IdentificationRun {
        n,
        layout,
        trajectory,
        diagnostics,
        truth,
    })
}

/// Composite Simpson rule on `[a, b]` with about 0.01 s panels.
fn simpson(f: impl Fn(f64) -> f64, a: f64, b: f64) -> f64 {
    let panels = (((b - a) / 0.01).ceil() as usize).max(8);
    let panels = panels + panels % 2;
    let h = (b - a) / panels as f64;
    let mut s = f(a) + f(b);
    for j in 1..panels {
        s += if j % 2 == 1 { 4.0 } else { 2.0 } * f(a + j as f64 * h);
    }
    s * h / 3.0
}
