//! Plant class with multiple state and input delays, the matching-condition
//! decomposition of its uncertain parts, and the reshaping of a plant onto a
//! fictitious delay grid.
//!
//! The plant is
//!
//! ```text
//! ẋ(t) = Σᵢ [ Aᵢ x(t−τᵢ) + Dᵢ φ(x(t−τᵢ)) + Gᵢ ψ(y(t−τᵢ)) + Bᵢ u(t−τᵢ) ],   y = C x
//! ```
//!
//! with `τ₀ = 0`. Slot 0 is always the undelayed term.

use std::fmt;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector, RowDVector};

use crate::error::{dim_err, Error, Result};

/// Absolute tolerance used when matching plant delays against grid nodes.
pub const DELAY_MATCH_TOL: f64 = 1e-12;

/// Relative tolerance for rejecting a residual that does not lie in span(T0).
pub const MATCHING_REL_TOL: f64 = 1e-9;

type MapFn = dyn Fn(&[f64], &mut [f64]) + Send + Sync;

/// A named static nonlinearity `ℝ^in → ℝ^out`.
#[derive(Clone)]
pub struct Nonlinearity {
    name: String,
    in_dim: usize,
    out_dim: usize,
    f: Arc<MapFn>,
}

impl fmt::Debug for Nonlinearity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Nonlinearity")
            .field("name", &self.name)
            .field("in_dim", &self.in_dim)
            .field("out_dim", &self.out_dim)
            .finish()
    }
}

/// Real cube root with the sign of the argument.
pub fn signed_cbrt(v: f64) -> f64 {
    v.cbrt()
}

impl Nonlinearity {
    /// Names accepted by [`Nonlinearity::builtin`].
    pub const BUILTIN_NAMES: [&'static str; 6] = ["cbrt", "square", "tanh", "sin", "identity", "zero"];

    /// Builds one of the componentwise built-in maps.
    ///
    /// `zero` accepts any output dimension; every other map is componentwise
    /// and requires `in_dim == out_dim`.
    pub fn builtin(name: &str, in_dim: usize, out_dim: usize) -> Result<Self> {
        let f: Arc<MapFn> = match name {
            "zero" => Arc::new(|_x: &[f64], out: &mut [f64]| out.fill(0.0)),
            "cbrt" => componentwise(signed_cbrt),
            "square" => componentwise(|v| v * v),
            "tanh" => componentwise(f64::tanh),
            "sin" => componentwise(f64::sin),
            "identity" => componentwise(|v| v),
            other => return Err(Error::UnknownNonlinearity(other.to_string())),
        };
        if name != "zero" && in_dim != out_dim {
            return Err(dim_err(
                &format!("componentwise nonlinearity `{name}`"),
                format!("output dimension {in_dim}"),
                out_dim,
            ));
        }
        Ok(Self {
            name: name.to_string(),
            in_dim,
            out_dim,
            f,
        })
    }

    /// Registers a user-supplied map.
    pub fn custom<F>(name: &str, in_dim: usize, out_dim: usize, f: F) -> Self
    where
        F: Fn(&[f64], &mut [f64]) + Send + Sync + 'static,
    {
        Self {
            name: name.to_string(),
            in_dim,
            out_dim,
            f: Arc::new(f),
        }
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn in_dim(&self) -> usize {
        self.in_dim
    }

    pub fn out_dim(&self) -> usize {
        self.out_dim
    }

    /// Evaluates into `out`, rejecting non-finite arguments.
    pub fn eval_into(&self, x: &[f64], out: &mut [f64]) -> Result<()> {
        if x.len() != self.in_dim {
            return Err(dim_err(&format!("argument of `{}`", self.name), self.in_dim, x.len()));
        }
        if out.len() != self.out_dim {
            return Err(dim_err(&format!("value of `{}`", self.name), self.out_dim, out.len()));
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteInput(self.name.clone()));
        }
        (self.f)(x, out);
        Ok(())
    }

    pub fn eval(&self, x: &[f64]) -> Result<Vec<f64>> {
        let mut out = vec![0.0; self.out_dim];
        self.eval_into(x, &mut out)?;
        Ok(out)
    }
}

fn componentwise(g: fn(f64) -> f64) -> Arc<MapFn> {
    Arc::new(move |x: &[f64], out: &mut [f64]| {
        for (o, v) in out.iter_mut().zip(x) {
            *o = g(*v);
        }
    })
}

/// The four coefficient blocks attached to one delay slot.
#[derive(Debug, Clone, PartialEq)]
pub struct SlotMatrices {
    /// n×n state matrix.
    pub a: DMatrix<f64>,
    /// n×l gain on φ.
    pub d: DMatrix<f64>,
    /// n×m gain on ψ.
    pub g: DMatrix<f64>,
    /// Input vector.
    pub b: DVector<f64>,
}

impl SlotMatrices {
    pub fn zeros(n: usize, l: usize, m: usize) -> Self {
        Self {
            a: DMatrix::zeros(n, n),
            d: DMatrix::zeros(n, l),
            g: DMatrix::zeros(n, m),
            b: DVector::zeros(n),
        }
    }

    pub fn is_zero(&self) -> bool {
        self.a.iter().chain(self.d.iter()).chain(self.g.iter()).chain(self.b.iter()).all(|v| *v == 0.0)
    }

    /// True when the block of `term` is identically zero.
    pub fn term_is_zero(&self, term: Term) -> bool {
        match term {
            Term::A => self.a.iter().all(|v| *v == 0.0),
            Term::D => self.d.iter().all(|v| *v == 0.0),
            Term::G => self.g.iter().all(|v| *v == 0.0),
            Term::B => self.b.iter().all(|v| *v == 0.0),
        }
    }

    fn check_dims(&self, n: usize, l: usize, m: usize, ctx: &str) -> Result<()> {
        let shape = |mat: &DMatrix<f64>| format!("{}×{}", mat.nrows(), mat.ncols());
        if self.a.shape() != (n, n) {
            return Err(dim_err(&format!("{ctx} A"), format!("{n}×{n}"), shape(&self.a)));
        }
        if self.d.shape() != (n, l) {
            return Err(dim_err(&format!("{ctx} D"), format!("{n}×{l}"), shape(&self.d)));
        }
        if self.g.shape() != (n, m) {
            return Err(dim_err(&format!("{ctx} G"), format!("{n}×{m}"), shape(&self.g)));
        }
        if self.b.len() != n {
            return Err(dim_err(&format!("{ctx} B"), n, self.b.len()));
        }
        Ok(())
    }
}

/// The four kinds of terms in the plant sum.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Term {
    A,
    D,
    G,
    B,
}

impl Term {
    pub const ALL: [Term; 4] = [Term::A, Term::D, Term::G, Term::B];

    pub fn letter(self) -> char {
        match self {
            Term::A => 'A',
            Term::D => 'D',
            Term::G => 'G',
            Term::B => 'B',
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }
}

/// Uncertain nonlinear multi-delay plant with a scalar output.
#[derive(Debug, Clone)]
pub struct PlantModel {
    n: usize,
    l: usize,
    m: usize,
    delays: Vec<f64>,
    slots: Vec<SlotMatrices>,
    c: RowDVector<f64>,
    phi: Nonlinearity,
    psi: Nonlinearity,
    lipschitz: f64,
    lipschitz_local_only: bool,
}

impl PlantModel {
    /// Validates and assembles a plant. `delays[0]` must be exactly 0 and the
    /// delays strictly increasing; one [`SlotMatrices`] per delay.
    pub fn new(
        delays: Vec<f64>,
        slots: Vec<SlotMatrices>,
        c: RowDVector<f64>,
        phi: Nonlinearity,
        psi: Nonlinearity,
        lipschitz: f64,
    ) -> Result<Self> {
        let n = c.len();
        if n == 0 {
            return Err(Error::InvalidModel("state dimension must be positive".into()));
        }
        check_delays(&delays)?;
        if slots.len() != delays.len() {
            return Err(dim_err("slot count", delays.len(), slots.len()));
        }
        if phi.in_dim() != n {
            return Err(dim_err("φ argument", n, phi.in_dim()));
        }
        if psi.in_dim() != 1 {
            return Err(dim_err("ψ argument", 1, psi.in_dim()));
        }
        let (l, m) = (phi.out_dim(), psi.out_dim());
        for (i, s) in slots.iter().enumerate() {
            s.check_dims(n, l, m, &format!("slot {i}"))?;
        }
        if !(lipschitz >= 0.0 && lipschitz.is_finite()) {
            return Err(Error::InvalidModel(format!("Lipschitz constant {lipschitz} must be finite and ≥ 0")));
        }
        Ok(Self {
            n,
            l,
            m,
            delays,
            slots,
            c,
            phi,
            psi,
            lipschitz,
            lipschitz_local_only: false,
        })
    }

    /// Marks the Lipschitz constant as valid only locally (e.g. the cube root).
    pub fn with_local_lipschitz(mut self, local_only: bool) -> Self {
        self.lipschitz_local_only = local_only;
        self
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn l(&self) -> usize {
        self.l
    }

    pub fn m(&self) -> usize {
        self.m
    }

    /// Number of delayed slots beyond τ₀ = 0.
    pub fn k(&self) -> usize {
        self.delays.len() - 1
    }

    pub fn delays(&self) -> &[f64] {
        &self.delays
    }

    pub fn max_delay(&self) -> f64 {
        *self.delays.last().expect("at least one slot")
    }

    pub fn slots(&self) -> &[SlotMatrices] {
        &self.slots
    }

    pub fn slot(&self, i: usize) -> &SlotMatrices {
        &self.slots[i]
    }

    pub fn c(&self) -> &RowDVector<f64> {
        &self.c
    }

    pub fn phi(&self) -> &Nonlinearity {
        &self.phi
    }

    pub fn psi(&self) -> &Nonlinearity {
        &self.psi
    }

    pub fn lipschitz(&self) -> f64 {
        self.lipschitz
    }

    pub fn lipschitz_local_only(&self) -> bool {
        self.lipschitz_local_only
    }

    pub fn output(&self, x: &[f64]) -> f64 {
        self.c.iter().zip(x).map(|(c, x)| c * x).sum()
    }

    pub fn eval_phi(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.phi.eval(x)
    }

    pub fn eval_psi(&self, y: f64) -> Result<Vec<f64>> {
        self.psi.eval(&[y])
    }

    /// Adds slot `i`'s contribution `Aᵢx + Dᵢφ + Gᵢψ + Bᵢu` to `out`.
    pub(crate) fn accumulate_slot(&self, i: usize, x: &[f64], phi: &[f64], psi: &[f64], u: f64, out: &mut [f64]) {
        let s = &self.slots[i];
        gemv_acc(&s.a, x, out);
        gemv_acc(&s.d, phi, out);
        gemv_acc(&s.g, psi, out);
        for (o, b) in out.iter_mut().zip(s.b.iter()) {
            *o += b * u;
        }
    }
}

fn check_delays(delays: &[f64]) -> Result<()> {
    match delays.first() {
        None => return Err(Error::InvalidModel("at least the undelayed slot is required".into())),
        Some(d) if *d != 0.0 => {
            return Err(Error::InvalidModel(format!("first delay must be 0, got {d}")));
        }
        _ => {}
    }
    for w in delays.windows(2) {
        if !(w[1] > w[0]) || !w[1].is_finite() {
            return Err(Error::InvalidModel(format!("delays must be strictly increasing: {delays:?}")));
        }
    }
    Ok(())
}

/// `out += M·v` for a dense matrix and slices.
pub(crate) fn gemv_acc(mat: &DMatrix<f64>, v: &[f64], out: &mut [f64]) {
    let (rows, cols) = mat.shape();
    debug_assert_eq!(cols, v.len());
    debug_assert_eq!(rows, out.len());
    for (c, vc) in v.iter().enumerate() {
        if *vc == 0.0 {
            continue;
        }
        let col = mat.column(c);
        for r in 0..rows {
            out[r] += col[r] * vc;
        }
    }
}

/// Unknown row parameters of one slot.
#[derive(Debug, Clone, PartialEq)]
pub struct SlotKappa {
    pub a: RowDVector<f64>,
    pub d: RowDVector<f64>,
    pub g: RowDVector<f64>,
    pub b: f64,
}

impl SlotKappa {
    pub fn zeros(n: usize, l: usize, m: usize) -> Self {
        Self {
            a: RowDVector::zeros(n),
            d: RowDVector::zeros(l),
            g: RowDVector::zeros(m),
            b: 0.0,
        }
    }

    pub fn term(&self, term: Term) -> &[f64] {
        match term {
            Term::A => self.a.as_slice(),
            Term::D => self.d.as_slice(),
            Term::G => self.g.as_slice(),
            Term::B => std::slice::from_ref(&self.b),
        }
    }

    pub fn term_mut(&mut self, term: Term) -> &mut [f64] {
        match term {
            Term::A => self.a.as_mut_slice(),
            Term::D => self.d.as_mut_slice(),
            Term::G => self.g.as_mut_slice(),
            Term::B => std::slice::from_mut(&mut self.b),
        }
    }
}

/// Known parts, direction vector and unknown rows such that
/// `Aᵢ = Aᵢ⁰ + T0·κᵢᴬ` (and likewise for D, G, B).
#[derive(Debug, Clone, PartialEq)]
pub struct MatchingDecomposition {
    pub known: Vec<SlotMatrices>,
    pub t0: DVector<f64>,
    pub kappa: Vec<SlotKappa>,
}

impl MatchingDecomposition {
    /// Reassembles the full slot matrices.
    pub fn recompose(&self) -> Vec<SlotMatrices> {
        self.known
            .iter()
            .zip(&self.kappa)
            .map(|(k0, kap)| SlotMatrices {
                a: &k0.a + &self.t0 * &kap.a,
                d: &k0.d + &self.t0 * &kap.d,
                g: &k0.g + &self.t0 * &kap.g,
                b: &k0.b + &self.t0 * kap.b,
            })
            .collect()
    }
}

/// Splits every plant matrix into a known part and a rank-one update along
/// `t0`, projecting each residual column onto span(t0).
pub fn decompose_matching(
    plant: &PlantModel,
    known: &[SlotMatrices],
    t0: &DVector<f64>,
) -> Result<MatchingDecomposition> {
    let (n, l, m) = (plant.n, plant.l, plant.m);
    if t0.len() != n {
        return Err(dim_err("T0", n, t0.len()));
    }
    if known.len() != plant.slots.len() {
        return Err(dim_err("known slot count", plant.slots.len(), known.len()));
    }
    for (i, k) in known.iter().enumerate() {
        k.check_dims(n, l, m, &format!("known slot {i}"))?;
    }
    let ct0 = plant.output(t0.as_slice());
    let t0_sq = t0.norm_squared();
    if t0_sq == 0.0 || ct0.abs() <= 1e-14 * plant.c.norm() * t0.norm() {
        return Err(Error::DegenerateDirection);
    }

    let project = |full: &DMatrix<f64>, part: &DMatrix<f64>, term: char, slot: usize| -> Result<RowDVector<f64>> {
        let resid = full - part;
        let row = (t0.transpose() * &resid) / t0_sq;
        let leftover = (&resid - t0 * &row).norm();
        let scale = full.norm().max(part.norm());
        if leftover > MATCHING_REL_TOL * scale {
            return Err(Error::NotMatching {
                term,
                slot,
                residual: leftover,
            });
        }
        Ok(row)
    };

    let mut kappa = Vec::with_capacity(known.len());
    for (i, (s, k)) in plant.slots.iter().zip(known).enumerate() {
        let b_full = DMatrix::from_column_slice(n, 1, s.b.as_slice());
        let b_known = DMatrix::from_column_slice(n, 1, k.b.as_slice());
        kappa.push(SlotKappa {
            a: project(&s.a, &k.a, 'A', i)?,
            d: project(&s.d, &k.d, 'D', i)?,
            g: project(&s.g, &k.g, 'G', i)?,
            b: project(&b_full, &b_known, 'B', i)?[0],
        });
    }
    Ok(MatchingDecomposition {
        known: known.to_vec(),
        t0: t0.clone(),
        kappa,
    })
}

/// Candidate delay values `0 = τ̂₀ < τ̂₁ < … < τ̂_k̄`, optionally with a
/// per-term number of active slots (reduced model).
#[derive(Debug, Clone, PartialEq)]
pub struct DelayGrid {
    grid: Vec<f64>,
    term_counts: Option<[usize; 4]>,
}

impl DelayGrid {
    pub fn new(grid: Vec<f64>) -> Result<Self> {
        check_delays(&grid)?;
        Ok(Self { grid, term_counts: None })
    }

    /// Restricts term `A, D, G, B` to its first `counts[j]` slots.
    pub fn with_term_counts(mut self, counts: [usize; 4]) -> Result<Self> {
        if counts.iter().any(|c| *c == 0 || *c > self.grid.len()) {
            return Err(Error::InvalidModel(format!(
                "term counts {counts:?} must lie in 1..={}",
                self.grid.len()
            )));
        }
        self.term_counts = Some(counts);
        Ok(self)
    }

    pub fn delays(&self) -> &[f64] {
        &self.grid
    }

    /// Extended delay count k̄.
    pub fn kbar(&self) -> usize {
        self.grid.len() - 1
    }

    pub fn term_counts(&self) -> Option<[usize; 4]> {
        self.term_counts
    }

    fn position(&self, delay: f64) -> Option<usize> {
        self.grid.iter().position(|g| (g - delay).abs() <= DELAY_MATCH_TOL)
    }
}

/// Re-expresses `plant` on the slots of `grid`: a grid node that coincides
/// with a plant delay carries that delay's matrices, every other node gets
/// zero matrices.
pub fn extend_to_grid(plant: &PlantModel, grid: &DelayGrid) -> Result<PlantModel> {
    let mut slots = vec![SlotMatrices::zeros(plant.n, plant.l, plant.m); grid.grid.len()];
    for (delay, s) in plant.delays.iter().zip(&plant.slots) {
        let pos = grid.position(*delay).ok_or(Error::DelayNotInGrid { delay: *delay })?;
        slots[pos] = s.clone();
    }
    if let Some(counts) = grid.term_counts {
        for term in Term::ALL {
            for (i, s) in slots.iter().enumerate().skip(counts[term.index()]) {
                if !s.term_is_zero(term) {
                    return Err(Error::InvalidModel(format!(
                        "reduced model keeps {} slots for term {} but slot {i} is nonzero",
                        counts[term.index()],
                        term.letter()
                    )));
                }
            }
        }
    }
    Ok(PlantModel {
        delays: grid.grid.clone(),
        slots,
        ..plant.clone()
    })
}
