//! The two-state benchmark and the end-to-end reproduction pipeline.
//!
//! The benchmark plant has delays `{0, 1, 1.7, 2.3}`, `φ = ∛·`, `ψ = y²`,
//! output row `[1 3]` and nine nonzero rows to recover along `T0 = [0 1]ᵀ`:
//! `a01 = −2, a02 = −4, a11 = −0.1, a12 = 0.2, d21 = −0.5, d22 = −0.8,
//! g0 = −2, b0 = 1, b3 = −1`. The remaining 15 rows are zero.

use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use crate::config::{Experiment, ExperimentConfig};
use crate::error::{Error, Result};
use crate::identifier::{run_identification, IdentificationRun};
use crate::io::{fmt_f64, write_atomic};
use crate::lmi::{find_feasible, LmiCertificate};
use crate::model::Term;
use crate::plot::{LineChart, Series};
use crate::signals::{build_regressor, pe_check, PEReport};

/// The benchmark exactly as stated.
pub const BENCHMARK_TOML: &str = include_str!("../configs/benchmark.toml");

/// The benchmark with `ψ = tanh(y)`; identical rows to estimate.
pub const BENCHMARK_TANH_TOML: &str = include_str!("../configs/benchmark_tanh.toml");

pub fn benchmark_config() -> ExperimentConfig {
    ExperimentConfig::from_toml_str(BENCHMARK_TOML).expect("embedded benchmark config parses")
}

pub fn benchmark_tanh_config() -> ExperimentConfig {
    ExperimentConfig::from_toml_str(BENCHMARK_TANH_TOML).expect("embedded benchmark config parses")
}

/// Final estimate of one row component against its true value.
#[derive(Debug, Clone, PartialEq)]
pub struct SummaryRow {
    pub name: String,
    pub estimate: f64,
    pub target: f64,
}

impl SummaryRow {
    pub fn abs_error(&self) -> f64 {
        (self.estimate - self.target).abs()
    }

    /// `None` for rows whose true value is zero.
    pub fn rel_error(&self) -> Option<f64> {
        (self.target != 0.0).then(|| self.abs_error() / self.target.abs())
    }
}

/// Mean estimates over the final `fraction` of the run next to the truth.
pub fn summary(run: &IdentificationRun, fraction: f64) -> Vec<SummaryRow> {
    let mean = run.tail_mean(fraction);
    run.layout()
        .names()
        .into_iter()
        .zip(mean)
        .zip(&run.truth)
        .map(|((name, estimate), target)| SummaryRow {
            name,
            estimate,
            target: *target,
        })
        .collect()
}

pub fn summary_csv(rows: &[SummaryRow]) -> String {
    let mut s = String::from("name,estimate,target,abs_error,rel_error\n");
    for r in rows {
        s.push_str(&format!(
            "{},{},{},{},{}\n",
            r.name,
            fmt_f64(r.estimate),
            fmt_f64(r.target),
            fmt_f64(r.abs_error()),
            r.rel_error().map(fmt_f64).unwrap_or_default()
        ));
    }
    s
}

pub fn summary_table(rows: &[SummaryRow]) -> String {
    let mut s = format!("{:<8} {:>12} {:>10} {:>12}\n", "row", "estimate", "target", "error");
    for r in rows {
        let err = match r.rel_error() {
            Some(e) => format!("{:.2}%", 100.0 * e),
            None => format!("{:.2e}", r.abs_error()),
        };
        s.push_str(&format!("{:<8} {:>12.5} {:>10.4} {:>12}\n", r.name, r.estimate, r.target, err));
    }
    s
}

/// One SVG per family: ε components, then the A, D, G and B row estimates.
pub fn figures(run: &IdentificationRun) -> Vec<(&'static str, LineChart)> {
    let ts: Vec<f64> = (0..run.len()).map(|i| run.time(i)).collect();
    let n = run.plant_state(0).len();
    let mut eps = LineChart::new("Estimation error", "t (s)", "ε");
    for j in 0..n {
        eps.series.push(Series::new(format!("ε{}", j + 1), ts.clone(), (0..run.len()).map(|i| run.eps(i)[j]).collect()));
    }
    let mut out = vec![("eps.svg", eps)];
    let names = run.layout().names();
    let (t_first, t_last) = (ts[0], ts[ts.len() - 1]);
    for (term, file, title) in [
        (Term::A, "a_hat.svg", "State rows"),
        (Term::D, "d_hat.svg", "φ rows"),
        (Term::G, "g_hat.svg", "ψ rows"),
        (Term::B, "b_hat.svg", "Input rows"),
    ] {
        let mut chart = LineChart::new(title, "t (s)", "estimate");
        for slot in 0..run.layout().slots() {
            let Some(range) = run.layout().range(term, slot) else { continue };
            for c in range {
                let ys = (0..run.len()).map(|i| run.theta(i)[c]).collect();
                chart.series.push(Series::new(names[c].clone(), ts.clone(), ys));
            }
        }
        let mut targets: Vec<(String, f64)> = Vec::new();
        for slot in 0..run.layout().slots() {
            if let Some(range) = run.layout().range(term, slot) {
                for c in range {
                    if run.truth[c] != 0.0 {
                        targets.push((format!("{} true", names[c]), run.truth[c]));
                    }
                }
            }
        }
        for (name, v) in targets {
            chart.series.push(Series::level(name, t_first, t_last, v));
        }
        out.push((file, chart));
    }
    out
}

/// Everything [`reproduce`] produced.
#[derive(Debug, Clone)]
pub struct ReproduceReport {
    pub certificate: LmiCertificate,
    pub run: IdentificationRun,
    pub pe: Option<PEReport>,
    pub summary: Vec<SummaryRow>,
    pub files: Vec<PathBuf>,
    pub elapsed: Duration,
}

/// Fraction of the horizon over which final estimates are averaged.
pub const TAIL_FRACTION: f64 = 0.05;

/// Runs the whole pipeline: certificate search, identification with the
/// Lyapunov functional recorded when the certificate is feasible, excitation
/// check, CSV and SVG output.
///
/// The certificate is written before the simulation starts, so it survives
/// a blow-up.
pub fn reproduce(exp: &Experiment, out: &Path, plots: bool, seed: Option<u64>) -> Result<ReproduceReport> {
    let started = Instant::now();
    let mut files = Vec::new();
    let mut search = exp.lmi.search.clone();
    if let Some(s) = seed {
        search.seed = s;
    }
    let certificate = find_feasible(&exp.psi_problem()?, &search)?;
    let cert_path = out.join("certificate.toml");
    certificate.write(&cert_path)?;
    files.push(cert_path);

    let id_cfg = exp.identifier()?;
    let input = |t: f64| exp.input.eval(t);
    let cert = certificate.is_feasible().then_some(&certificate);
    let run = run_identification(&exp.model, &input, id_cfg, &exp.sim, &exp.init, cert)?;

    let mut emit = |name: &str, body: String| -> Result<()> {
        let p = out.join(name);
        write_atomic(&p, body.as_bytes())?;
        files.push(p);
        Ok(())
    };
    emit("trajectory.csv", run.states_csv())?;
    emit("diagnostics.csv", run.diagnostics_csv())?;
    emit("param_errors.csv", run.param_errors_csv())?;

    let pe = match &exp.pe {
        Some(pe_cfg) => {
            let n = exp.model.n();
            let traj = run.trajectory.project(0..n);
            let series = build_regressor(&exp.model, &traj, &input, exp.model.delays())?;
            let quad = pe_cfg.quad_step.unwrap_or(series.dt);
            match pe_check(&series, pe_cfg.window, quad, pe_cfg.window_stride) {
                Ok(r) => {
                    emit("pe_report.csv", r.to_csv())?;
                    Some(r)
                }
                Err(Error::WindowTooLong { .. }) => None,
                Err(e) => return Err(e),
            }
        }
        None => None,
    };

    let rows = summary(&run, TAIL_FRACTION);
    emit("summary.csv", summary_csv(&rows))?;
    emit("summary.txt", summary_table(&rows))?;

    if plots {
        for (name, chart) in figures(&run) {
            emit(name, chart.to_svg())?;
        }
    }

    Ok(ReproduceReport {
        certificate,
        run,
        pe,
        summary: rows,
        files,
        elapsed: started.elapsed(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn embedded_configs_build() {
        let exp = benchmark_config().build().unwrap();
        assert_eq!(exp.model.delays(), &[0.0, 1.0, 1.7, 2.3]);
        let id = exp.identifier().unwrap();
        assert_eq!(id.gains.len(), 4);
        let tanh = benchmark_tanh_config().build().unwrap();
        assert_eq!(tanh.model.psi().name(), "tanh");
    }

    #[test]
    fn benchmark_truth_rows() {
        let exp = benchmark_config().build().unwrap();
        let id = exp.identifier().unwrap();
        let dec = crate::model::decompose_matching(&exp.model, &id.known, &id.t0).unwrap();
        let k = &dec.kappa;
        assert_eq!(k[0].a.as_slice(), &[-2.0, -4.0]);
        assert_eq!(k[1].a.as_slice(), &[-0.1, 0.2]);
        assert_eq!(k[2].d.as_slice(), &[-0.5, -0.8]);
        assert_eq!(k[0].g[0], -2.0);
        assert_eq!((k[0].b, k[3].b), (1.0, -1.0));
        let nonzero: usize = k
            .iter()
            .map(|s| Term::ALL.iter().map(|t| s.term(*t).iter().filter(|v| **v != 0.0).count()).sum::<usize>())
            .sum();
        assert_eq!(nonzero, 9);
    }

    #[test]
    fn summary_errors() {
        let r = SummaryRow {
            name: "A0_1".into(),
            estimate: -1.9,
            target: -2.0,
        };
        assert!((r.rel_error().unwrap() - 0.05).abs() < 1e-12);
        let z = SummaryRow {
            name: "A2_1".into(),
            estimate: 0.003,
            target: 0.0,
        };
        assert_eq!(z.rel_error(), None);
    }
}
