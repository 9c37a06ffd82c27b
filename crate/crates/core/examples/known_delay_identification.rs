//! Identifies the unknown rows of a two-state plant with known delays
//! {0, 1.5} from its output, with a certificate so the Lyapunov functional
//! is recorded.
//!
//! cargo run --release --example known_delay_identification

use nalgebra::{dmatrix, dvector, DVector, RowDVector};
use tdid::benchmark::{summary, summary_table};
use tdid::dde::{InitialHistory, SimConfig};
use tdid::identifier::{run_identification, IdentifierConfig, Injection, SlotGains};
use tdid::lmi::{find_feasible, AssemblyMode, PsiProblem, SearchOptions};
use tdid::model::{Nonlinearity, PlantModel, SlotMatrices};
use tdid::signals::{InputSignal, Sine};

fn main() -> tdid::Result<()> {
    let mut s0 = SlotMatrices::zeros(2, 2, 1);
    s0.a = dmatrix![0.0, 1.0; -2.0, -3.0];
    s0.g = dmatrix![0.0; 0.8];
    s0.b = dvector![0.0, 1.0];
    let mut s1 = SlotMatrices::zeros(2, 2, 1);
    s1.a = dmatrix![0.0, 0.0; -0.5, 0.3];
    s1.b = dvector![0.0, 0.5];
    // A 0.5 s delay leaves x(t) and x(t - τ) nearly collinear under this
    // input and the A rows then drift along that direction for a long time.
    let plant = PlantModel::new(
        vec![0.0, 1.5],
        vec![s0, s1],
        RowDVector::from_row_slice(&[1.0, 0.5]),
        Nonlinearity::builtin("zero", 2, 2)?,
        Nonlinearity::builtin("sin", 1, 1)?,
        1.0,
    )?;

    // Only the first row of A0 is known; everything along T0 is estimated.
    let mut known = vec![SlotMatrices::zeros(2, 2, 1); 2];
    known[0].a = dmatrix![0.0, 1.0; 0.0, 0.0];
    let cfg = IdentifierConfig {
        known,
        t0: dvector![0.0, 1.0],
        gains: vec![SlotGains::uniform(2, 2, 1, 100.0); 2],
        injection: Injection::Output(vec![dvector![0.0, 5.0], DVector::zeros(2)]),
        initial_kappa: None,
        xhat_init: None,
        term_counts: None,
    };

    let prob = PsiProblem::from_plant(&plant, cfg.injection.y_matrices(plant.c()), cfg.t0.clone(), AssemblyMode::Derived)?;
    let cert = find_feasible(&prob, &SearchOptions::default())?;
    println!("certificate: {:?}, λmax(Ψ) = {:.3e}", cert.verdict, cert.max_eig_psi);

    let input = InputSignal {
        sines: [(2.0, 0.23), (2.0, 0.61), (1.5, 1.3), (1.5, 2.1), (1.0, 3.7), (1.0, 5.3)]
            .iter()
            .map(|&(amplitude, omega)| Sine { amplitude, omega, phase: 0.0 })
            .collect(),
        pulse: None,
        offset: 0.0,
    };
    let u = |t: f64| input.eval(t);
    let sim = SimConfig::new(1e-3, 1500.0).with_stride(100);
    let run = run_identification(&plant, &u, &cfg, &sim, &InitialHistory::constant(vec![0.5, 0.0]), cert.is_feasible().then_some(&cert))?;

    let last = run.diagnostics.last().expect("recorded");
    let first = &run.diagnostics[0];
    println!("V: {:.4e} -> {:.4e}", first.v.unwrap_or(f64::NAN), last.v.unwrap_or(f64::NAN));
    println!("|ε| at t = {}: {:.3e}", last.t, last.eps_norm);
    print!("{}", summary_table(&summary(&run, 0.05)));
    Ok(())
}
