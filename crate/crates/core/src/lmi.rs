//! Stability certificate for the identification error system.
//!
//! The certificate is a pair `(P, {Sᵢ})` with `P = Pᵀ ≻ 0`, `Sᵢ ≻ 0`,
//! `P·T0 = Cᵀ` and a negative definite block matrix `Ψ` built from the
//! plant matrices, the injection matrices `Yᵢ` and the Lipschitz constant of
//! φ. `Ψ` acts on `col{ε(t), ε(t−τ₁), …, ε(t−τ_k), Δφ₀, …, Δφ_k}`.
//!
//! Two assemblies are offered. [`AssemblyMode::Verbatim`] follows the block
//! layout as usually printed: an unweighted `−Y₀` in the leading block and
//! `−Sᵢ−Yᵢ` on the delayed diagonal. [`AssemblyMode::Derived`] uses the
//! blocks obtained by differentiating the Lyapunov–Krasovskii functional
//! along the error dynamics: `(A₀−Y₀)ᵀP + P(A₀−Y₀)` and `−Sᵢ`.

use std::path::Path;

use nalgebra::{DMatrix, DVector, RowDVector, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{dim_err, Error, Result};
use crate::io::write_atomic;
use crate::model::PlantModel;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AssemblyMode {
    Verbatim,
    #[default]
    Derived,
}

/// Data defining `Ψ`.
#[derive(Debug, Clone, PartialEq)]
pub struct PsiProblem {
    pub n: usize,
    pub l: usize,
    pub a: Vec<DMatrix<f64>>,
    pub d: Vec<DMatrix<f64>>,
    pub y: Vec<DMatrix<f64>>,
    pub lipschitz: f64,
    pub t0: DVector<f64>,
    pub c: RowDVector<f64>,
    pub mode: AssemblyMode,
}

impl PsiProblem {
    pub fn new(
        a: Vec<DMatrix<f64>>,
        d: Vec<DMatrix<f64>>,
        y: Vec<DMatrix<f64>>,
        lipschitz: f64,
        t0: DVector<f64>,
        c: RowDVector<f64>,
        mode: AssemblyMode,
    ) -> Result<Self> {
        let n = c.len();
        let slots = a.len();
        if slots == 0 || d.len() != slots || y.len() != slots {
            return Err(dim_err("Ψ slot count", slots, format!("{} D / {} Y", d.len(), y.len())));
        }
        let l = d[0].ncols();
        for i in 0..slots {
            if a[i].shape() != (n, n) || y[i].shape() != (n, n) || d[i].shape() != (n, l) {
                return Err(dim_err(&format!("Ψ data of slot {i}"), format!("{n}×{n}, {n}×{l}"), "inconsistent shapes"));
            }
        }
        if t0.len() != n {
            return Err(dim_err("T0", n, t0.len()));
        }
        if !(lipschitz >= 0.0 && lipschitz.is_finite()) {
            return Err(Error::InvalidModel(format!("Lipschitz constant {lipschitz} must be ≥ 0")));
        }
        Ok(Self { n, l, a, d, y, lipschitz, t0, c, mode })
    }

    /// Takes `A`, `D`, `C` and `L` from the plant.
    pub fn from_plant(plant: &PlantModel, y: Vec<DMatrix<f64>>, t0: DVector<f64>, mode: AssemblyMode) -> Result<Self> {
        Self::new(
            plant.slots().iter().map(|s| s.a.clone()).collect(),
            plant.slots().iter().map(|s| s.d.clone()).collect(),
            y,
            plant.lipschitz(),
            t0,
            plant.c().clone(),
            mode,
        )
    }

    pub fn slots(&self) -> usize {
        self.a.len()
    }

    /// Side length of `Ψ`: `(k+1)·n + (k+1)·l`.
    pub fn dim(&self) -> usize {
        self.slots() * (self.n + self.l)
    }
}

fn check_symmetric(m: &DMatrix<f64>, what: &str) -> Result<()> {
    let asym = (m - m.transpose()).norm();
    if asym > 1e-12 * m.norm().max(f64::MIN_POSITIVE) {
        return Err(Error::Asymmetric(what.to_string()));
    }
    Ok(())
}

/// Builds the symmetric matrix `Ψ` for a candidate `(P, {Sᵢ})`.
pub fn assemble_psi(prob: &PsiProblem, p: &DMatrix<f64>, s: &[DMatrix<f64>]) -> Result<DMatrix<f64>> {
    let (n, slots) = (prob.n, prob.slots());
    if p.shape() != (n, n) {
        return Err(dim_err("P", format!("{n}×{n}"), format!("{}×{}", p.nrows(), p.ncols())));
    }
    if s.len() != slots || s.iter().any(|si| si.shape() != (n, n)) {
        return Err(dim_err("S", format!("{slots} matrices {n}×{n}"), s.len()));
    }
    check_symmetric(p, "P")?;
    for (i, si) in s.iter().enumerate() {
        check_symmetric(si, &format!("S{i}"))?;
    }
    Ok(assemble_unchecked(prob, p, s))
}

fn assemble_unchecked(prob: &PsiProblem, p: &DMatrix<f64>, s: &[DMatrix<f64>]) -> DMatrix<f64> {
    let (n, l, slots) = (prob.n, prob.l, prob.slots());
    let n1 = slots * n;
    let dim = n1 + slots * l;
    let mut psi = DMatrix::<f64>::zeros(dim, dim);

    let s_sum = s.iter().fold(DMatrix::zeros(n, n), |acc, si| acc + si);
    let lead = match prob.mode {
        AssemblyMode::Verbatim => prob.a[0].transpose() * p + p * &prob.a[0] - &prob.y[0] + &s_sum,
        AssemblyMode::Derived => {
            let m = &prob.a[0] - &prob.y[0];
            m.transpose() * p + p * &m + &s_sum
        }
    };
    psi.view_mut((0, 0), (n, n)).copy_from(&lead);
    for i in 1..slots {
        let off = p * (&prob.a[i] - &prob.y[i]);
        psi.view_mut((0, i * n), (n, n)).copy_from(&off);
        psi.view_mut((i * n, 0), (n, n)).copy_from(&off.transpose());
        let diag = match prob.mode {
            AssemblyMode::Verbatim => -&s[i] - &prob.y[i],
            AssemblyMode::Derived => -&s[i],
        };
        psi.view_mut((i * n, i * n), (n, n)).copy_from(&diag);
    }
    // S-procedure term on the whole state-error block
    let l2 = prob.lipschitz * prob.lipschitz;
    for j in 0..n1 {
        psi[(j, j)] += l2;
    }
    for i in 0..slots {
        let pd = p * &prob.d[i];
        psi.view_mut((0, n1 + i * l), (n, l)).copy_from(&pd);
        psi.view_mut((n1 + i * l, 0), (l, n)).copy_from(&pd.transpose());
    }
    for j in n1..dim {
        psi[(j, j)] = -1.0;
    }
    (&psi + psi.transpose()) * 0.5
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Verdict {
    Feasible,
    Infeasible,
    Undetermined,
}

/// The individual conditions of the certificate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Check {
    /// `P ≻ 0`
    PositiveP,
    /// every `Sᵢ ≻ 0`
    PositiveS,
    /// `Ψ ≺ 0`
    NegativePsi,
    /// `P·T0 = Cᵀ`
    Equality,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LmiCertificate {
    pub mode: AssemblyMode,
    #[serde(with = "matrix_serde")]
    pub p: DMatrix<f64>,
    #[serde(with = "matrices_serde")]
    pub s: Vec<DMatrix<f64>>,
    pub max_eig_psi: f64,
    pub min_eig_p: f64,
    pub min_eig_s: Vec<f64>,
    pub equality_residual: f64,
    pub verdict: Verdict,
    #[serde(default)]
    pub failed: Vec<Check>,
    /// Search margin, when the certificate came from [`find_feasible`].
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub margin: Option<f64>,
    /// Best search objective; negative means the margins were met.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub objective: Option<f64>,
}

impl LmiCertificate {
    pub fn is_feasible(&self) -> bool {
        self.verdict == Verdict::Feasible
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        write_atomic(path, self.to_toml()?.as_bytes())
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }
}

fn eig_extremes(m: &DMatrix<f64>) -> (f64, f64) {
    let e = SymmetricEigen::new(m.clone()).eigenvalues;
    let lo = e.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = e.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    (lo, hi)
}

/// Exact check of `P ≻ 0`, `Sᵢ ≻ 0`, `Ψ ≺ 0` and `P·T0 = Cᵀ`.
pub fn verify_certificate(prob: &PsiProblem, p: &DMatrix<f64>, s: &[DMatrix<f64>]) -> Result<LmiCertificate> {
    let psi = assemble_psi(prob, p, s)?;
    let (_, max_eig_psi) = eig_extremes(&psi);
    let (min_eig_p, _) = eig_extremes(p);
    let min_eig_s: Vec<f64> = s.iter().map(|si| eig_extremes(si).0).collect();
    let equality_residual = (p * &prob.t0 - prob.c.transpose()).norm();

    let mut failed = Vec::new();
    if !(min_eig_p > 0.0) {
        failed.push(Check::PositiveP);
    }
    if min_eig_s.iter().any(|e| !(*e > 0.0)) {
        failed.push(Check::PositiveS);
    }
    if !(max_eig_psi < 0.0) {
        failed.push(Check::NegativePsi);
    }
    if !(equality_residual <= 1e-10 * prob.c.norm().max(1.0)) {
        failed.push(Check::Equality);
    }
    Ok(LmiCertificate {
        mode: prob.mode,
        p: p.clone(),
        s: s.to_vec(),
        max_eig_psi,
        min_eig_p,
        min_eig_s,
        equality_residual,
        verdict: if failed.is_empty() { Verdict::Feasible } else { Verdict::Infeasible },
        failed,
        margin: None,
        objective: None,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SearchOptions {
    #[serde(default = "default_iters")]
    pub max_iters: usize,
    /// Initial step length; step `k` uses `step / sqrt(k + 1)`.
    #[serde(default = "default_step")]
    pub step: f64,
    #[serde(default = "default_restarts")]
    pub restarts: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_margin")]
    pub margin: f64,
}

fn default_iters() -> usize {
    20_000
}
fn default_step() -> f64 {
    1.0
}
fn default_restarts() -> usize {
    4
}
fn default_margin() -> f64 {
    1e-6
}

impl Default for SearchOptions {
    fn default() -> Self {
        Self {
            max_iters: default_iters(),
            step: default_step(),
            restarts: default_restarts(),
            seed: 0,
            margin: default_margin(),
        }
    }
}

/// `P = P_part + Σ cⱼ Bⱼ` over symmetric matrices with `P·T0 = Cᵀ`, and free
/// symmetric `Sᵢ`; `Ψ` is affine in the stacked coordinates.
struct Parameterization {
    n: usize,
    slots: usize,
    p_part: DMatrix<f64>,
    p_basis: Vec<DMatrix<f64>>,
    s_basis: Vec<DMatrix<f64>>,
    psi_const: DMatrix<f64>,
    psi_dirs: Vec<DMatrix<f64>>,
}

fn sym_unit(u: &DVector<f64>, v: &DVector<f64>, same: bool) -> DMatrix<f64> {
    if same {
        u * u.transpose()
    } else {
        (u * v.transpose() + v * u.transpose()) / std::f64::consts::SQRT_2
    }
}

impl Parameterization {
    fn new(prob: &PsiProblem) -> Result<Self> {
        let n = prob.n;
        let tt = prob.t0.norm_squared();
        if tt == 0.0 {
            return Err(Error::EmptyAffineSet);
        }
        let t0 = &prob.t0;
        let ct = prob.c.transpose();
        let ct0 = (&prob.c * t0)[0];
        let p_part = (&ct * t0.transpose() + t0 * ct.transpose()) / tt - (t0 * t0.transpose()) * (ct0 / (tt * tt));

        // orthonormal basis of T0⊥ from the projector I − uuᵀ
        let u = t0 / tt.sqrt();
        let proj = DMatrix::identity(n, n) - &u * u.transpose();
        let eig = SymmetricEigen::new(proj);
        let perp: Vec<DVector<f64>> = (0..n)
            .filter(|j| eig.eigenvalues[*j] > 0.5)
            .map(|j| eig.eigenvectors.column(j).into_owned())
            .collect();
        let mut p_basis = Vec::new();
        for a in 0..perp.len() {
            for b in a..perp.len() {
                p_basis.push(sym_unit(&perp[a], &perp[b], a == b));
            }
        }
        let unit = |j: usize| {
            let mut e = DVector::zeros(n);
            e[j] = 1.0;
            e
        };
        let mut s_basis = Vec::new();
        for a in 0..n {
            for b in a..n {
                s_basis.push(sym_unit(&unit(a), &unit(b), a == b));
            }
        }

        let slots = prob.slots();
        let zero_s = vec![DMatrix::zeros(n, n); slots];
        let zero_p = DMatrix::zeros(n, n);
        let base = assemble_unchecked(prob, &zero_p, &zero_s);
        let psi_const = assemble_unchecked(prob, &p_part, &zero_s);
        let mut psi_dirs = Vec::new();
        for b in &p_basis {
            psi_dirs.push(assemble_unchecked(prob, b, &zero_s) - &base);
        }
        for i in 0..slots {
            for e in &s_basis {
                let mut s = zero_s.clone();
                s[i] = e.clone();
                psi_dirs.push(assemble_unchecked(prob, &zero_p, &s) - &base);
            }
        }
        Ok(Self {
            n,
            slots,
            p_part,
            p_basis,
            s_basis,
            psi_const,
            psi_dirs,
        })
    }

    fn dim(&self) -> usize {
        self.p_basis.len() + self.slots * self.s_basis.len()
    }

    fn p(&self, theta: &[f64]) -> DMatrix<f64> {
        let mut p = self.p_part.clone();
        for (c, b) in theta.iter().zip(&self.p_basis) {
            p += b * *c;
        }
        p
    }

    fn s(&self, theta: &[f64], i: usize) -> DMatrix<f64> {
        let off = self.p_basis.len() + i * self.s_basis.len();
        let mut s = DMatrix::zeros(self.n, self.n);
        for (c, e) in theta[off..off + self.s_basis.len()].iter().zip(&self.s_basis) {
            s += e * *c;
        }
        s
    }

    fn psi(&self, theta: &[f64]) -> DMatrix<f64> {
        let mut psi = self.psi_const.clone();
        for (c, m) in theta.iter().zip(&self.psi_dirs) {
            psi += m * *c;
        }
        psi
    }

    fn initial(&self) -> Vec<f64> {
        // PSD part of the particular solution plus 0.1·I, pulled back onto the affine set
        let eig = SymmetricEigen::new(self.p_part.clone());
        let clipped = DMatrix::from_diagonal(&eig.eigenvalues.map(|v| v.max(0.0)));
        let target = &eig.eigenvectors * clipped * eig.eigenvectors.transpose() + DMatrix::identity(self.n, self.n) * 0.1;
        let delta = target - &self.p_part;
        let mut theta: Vec<f64> = self.p_basis.iter().map(|b| b.dot(&delta)).collect();
        let s0 = DMatrix::identity(self.n, self.n) * 0.1;
        for _ in 0..self.slots {
            theta.extend(self.s_basis.iter().map(|e| e.dot(&s0)));
        }
        theta
    }

    /// Objective value and one subgradient.
    fn objective(&self, theta: &[f64], margin: f64) -> (f64, Vec<f64>) {
        let mut grad = vec![0.0; theta.len()];
        let psi = self.psi(theta);
        let (lam, v) = extreme_pair(&psi, true);
        let mut best = lam + margin;
        let mut active = Active::Psi(v);

        let p = self.p(theta);
        let (lam_p, w) = extreme_pair(&p, false);
        if -lam_p + margin > best {
            best = -lam_p + margin;
            active = Active::P(w);
        }
        for i in 0..self.slots {
            let (lam_s, w) = extreme_pair(&self.s(theta, i), false);
            if -lam_s + margin > best {
                best = -lam_s + margin;
                active = Active::S(i, w);
            }
        }
        match active {
            Active::Psi(v) => {
                for (g, m) in grad.iter_mut().zip(&self.psi_dirs) {
                    *g = quad(m, &v);
                }
            }
            Active::P(w) => {
                for (g, b) in grad.iter_mut().zip(&self.p_basis) {
                    *g = -quad(b, &w);
                }
            }
            Active::S(i, w) => {
                let off = self.p_basis.len() + i * self.s_basis.len();
                for (g, e) in grad[off..].iter_mut().zip(&self.s_basis) {
                    *g = -quad(e, &w);
                }
            }
        }
        (best, grad)
    }
}

enum Active {
    Psi(DVector<f64>),
    P(DVector<f64>),
    S(usize, DVector<f64>),
}

fn quad(m: &DMatrix<f64>, v: &DVector<f64>) -> f64 {
    (v.transpose() * m * v)[0]
}

/// Largest (`max = true`) or smallest eigenvalue with a unit eigenvector.
fn extreme_pair(m: &DMatrix<f64>, max: bool) -> (f64, DVector<f64>) {
    let eig = SymmetricEigen::new(m.clone());
    let mut j = 0;
    for i in 1..eig.eigenvalues.len() {
        let better = if max {
            eig.eigenvalues[i] > eig.eigenvalues[j]
        } else {
            eig.eigenvalues[i] < eig.eigenvalues[j]
        };
        if better {
            j = i;
        }
    }
    (eig.eigenvalues[j], eig.eigenvectors.column(j).into_owned())
}

/// Searches for `(P, {Sᵢ})` by projected-free subgradient descent on
///
/// `f = max(λ_max(Ψ) + μ, −λ_min(P) + μ, maxᵢ −λ_min(Sᵢ) + μ)`
///
/// over the affine set `P·T0 = Cᵀ`, with `options.restarts` seeded restarts.
/// The best point found is verified exactly; the verdict is
/// [`Verdict::Undetermined`] when no restart reached `f < 0`.
pub fn find_feasible(prob: &PsiProblem, options: &SearchOptions) -> Result<LmiCertificate> {
    let par = Parameterization::new(prob)?;
    let theta0 = par.initial();
    let scale = 1.0 + theta0.iter().map(|v| v * v).sum::<f64>().sqrt() / (par.dim().max(1) as f64).sqrt();

    let runs: Vec<Result<(f64, Vec<f64>)>> = (0..options.restarts.max(1))
        .into_par_iter()
        .map(|r| {
            let mut theta = theta0.clone();
            if r > 0 {
                let mut rng = ChaCha8Rng::seed_from_u64(options.seed.wrapping_add(r as u64));
                for t in theta.iter_mut() {
                    *t += 0.5 * scale * rng.random_range(-1.0..1.0);
                }
            }
            descend(&par, theta, options, scale)
        })
        .collect();

    let mut best: Option<(f64, Vec<f64>)> = None;
    for run in runs {
        let (f, theta) = run?;
        if best.as_ref().is_none_or(|(bf, _)| f < *bf) {
            best = Some((f, theta));
        }
    }
    let (f, theta) = best.expect("at least one restart");
    let p = par.p(&theta);
    let s: Vec<DMatrix<f64>> = (0..par.slots).map(|i| par.s(&theta, i)).collect();
    let mut cert = verify_certificate(prob, &p, &s)?;
    cert.margin = Some(options.margin);
    cert.objective = Some(f);
    if f >= 0.0 && cert.verdict != Verdict::Feasible {
        cert.verdict = Verdict::Undetermined;
    }
    Ok(cert)
}

fn descend(par: &Parameterization, mut theta: Vec<f64>, options: &SearchOptions, scale: f64) -> Result<(f64, Vec<f64>)> {
    let mut best_f = f64::INFINITY;
    let mut best_theta = theta.clone();
    for k in 0..options.max_iters.max(1) {
        let (f, g) = par.objective(&theta, options.margin);
        if !f.is_finite() || g.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteObjective);
        }
        if f < best_f {
            best_f = f;
            best_theta.copy_from_slice(&theta);
        }
        if f < 0.0 {
            break;
        }
        let gn = g.iter().map(|v| v * v).sum::<f64>().sqrt();
        if gn == 0.0 {
            break;
        }
        let alpha = options.step * scale / ((k + 1) as f64).sqrt();
        for (t, gi) in theta.iter_mut().zip(&g) {
            *t -= alpha * gi / gn;
        }
    }
    Ok((best_f, best_theta))
}

mod matrix_serde {
    use nalgebra::DMatrix;
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub(super) fn rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
        m.row_iter().map(|r| r.iter().copied().collect()).collect()
    }

    pub(super) fn from_rows<E: serde::de::Error>(rows: Vec<Vec<f64>>) -> Result<DMatrix<f64>, E> {
        let nr = rows.len();
        let nc = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != nc) {
            return Err(E::custom("ragged matrix rows"));
        }
        Ok(DMatrix::from_row_iterator(nr, nc, rows.into_iter().flatten()))
    }

    pub fn serialize<S: Serializer>(m: &DMatrix<f64>, s: S) -> Result<S::Ok, S::Error> {
        rows(m).serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<DMatrix<f64>, D::Error> {
        from_rows(Vec::<Vec<f64>>::deserialize(d)?)
    }
}

mod matrices_serde {
    use nalgebra::DMatrix;
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(ms: &[DMatrix<f64>], s: S) -> Result<S::Ok, S::Error> {
        ms.iter().map(super::matrix_serde::rows).collect::<Vec<_>>().serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<DMatrix<f64>>, D::Error> {
        Vec::<Vec<Vec<f64>>>::deserialize(d)?
            .into_iter()
            .map(super::matrix_serde::from_rows)
            .collect()
    }
}
