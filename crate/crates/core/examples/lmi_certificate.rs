//! Searches for stability certificates: a scalar plant where the search must
//! succeed, one where no certificate exists, and the benchmark.
//!
//! cargo run --release --example lmi_certificate

use nalgebra::{dmatrix, dvector, DMatrix, RowDVector};
use tdid::benchmark::benchmark_config;
use tdid::lmi::{find_feasible, verify_certificate, AssemblyMode, LmiCertificate, PsiProblem, SearchOptions};

fn scalar(a0: f64, a1: f64) -> tdid::Result<PsiProblem> {
    PsiProblem::new(
        vec![dmatrix![a0], dmatrix![a1]],
        vec![DMatrix::zeros(1, 1); 2],
        vec![DMatrix::zeros(1, 1); 2],
        0.0,
        dvector![1.0],
        RowDVector::from_row_slice(&[1.0]),
        AssemblyMode::Derived,
    )
}

fn show(name: &str, c: &LmiCertificate) {
    println!(
        "{name:<28} {:?}: λmax(Ψ) = {:+.4e}, λmin(P) = {:.4e}",
        c.verdict, c.max_eig_psi, c.min_eig_p
    );
}

fn main() -> tdid::Result<()> {
    let opts = SearchOptions::default();

    // ẋ = -3x(t) + 0.5x(t - τ): stable for every delay.
    show("scalar, a0 = -3, a1 = 0.5", &find_feasible(&scalar(-3.0, 0.5)?, &opts)?);
    // No certificate exists when the instantaneous part is unstable; the
    // search can only report that it found none.
    show("scalar, a0 = +5, a1 = 0", &find_feasible(&scalar(5.0, 0.0)?, &opts)?);

    // Checking a given candidate instead of searching: P = 1, S0 = S1 = 1.
    let p = dmatrix![1.0];
    let s = vec![dmatrix![1.0], dmatrix![1.0]];
    show("scalar, fixed (P, S)", &verify_certificate(&scalar(-3.0, 0.0)?, &p, &s)?);

    let exp = benchmark_config().build()?;
    let cert = find_feasible(&exp.psi_problem()?, &opts)?;
    show("benchmark", &cert);
    println!("P = {:.4}", cert.p);
    Ok(())
}
