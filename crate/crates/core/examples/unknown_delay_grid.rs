//! Identification when the delays are not known exactly: the plant acts
//! through delays {0, 1.5}, the identifier uses every node of the grid
//! {0, 1.5, 3}. Rows on the fictitious node 3 should settle at zero.
//!
//! Finer grids work the same way but converge much more slowly: the state at
//! neighbouring nodes is strongly correlated under a band-limited input.
//!
//! cargo run --release --example unknown_delay_grid

use nalgebra::{dmatrix, dvector, DVector, RowDVector};
use tdid::benchmark::{summary, summary_table};
use tdid::dde::{InitialHistory, SimConfig};
use tdid::identifier::{run_identification, IdentifierConfig, Injection, SlotGains};
use tdid::model::{extend_to_grid, DelayGrid, Nonlinearity, PlantModel, SlotMatrices};
use tdid::signals::{InputSignal, Sine};

fn main() -> tdid::Result<()> {
    let mut s0 = SlotMatrices::zeros(2, 2, 1);
    s0.a = dmatrix![0.0, 1.0; -2.0, -3.0];
    s0.g = dmatrix![0.0; 0.8];
    s0.b = dvector![0.0, 1.0];
    let mut s1 = SlotMatrices::zeros(2, 2, 1);
    s1.a = dmatrix![0.0, 0.0; -0.5, 0.3];
    s1.b = dvector![0.0, 0.5];
    let plant = PlantModel::new(
        vec![0.0, 1.5],
        vec![s0, s1],
        RowDVector::from_row_slice(&[1.0, 0.5]),
        Nonlinearity::builtin("zero", 2, 2)?,
        Nonlinearity::builtin("sin", 1, 1)?,
        1.0,
    )?;
    let grid = DelayGrid::new(vec![0.0, 1.5, 3.0])?;
    let model = extend_to_grid(&plant, &grid)?;

    let mut known = vec![SlotMatrices::zeros(2, 2, 1); 3];
    known[0].a = dmatrix![0.0, 1.0; 0.0, 0.0];
    let mut k = vec![DVector::zeros(2); 3];
    k[0] = dvector![0.0, 5.0];
    let cfg = IdentifierConfig {
        known,
        t0: dvector![0.0, 1.0],
        gains: vec![SlotGains::uniform(2, 2, 1, 100.0); 3],
        injection: Injection::Output(k),
        initial_kappa: None,
        xhat_init: None,
        term_counts: None,
    };

    let input = InputSignal {
        sines: [(2.0, 0.23), (2.0, 0.61), (1.5, 1.3), (1.5, 2.1), (1.0, 3.7), (1.0, 5.3)]
            .iter()
            .map(|&(amplitude, omega)| Sine { amplitude, omega, phase: 0.0 })
            .collect(),
        pulse: None,
        offset: 0.0,
    };
    let u = |t: f64| input.eval(t);
    let sim = SimConfig::new(1e-3, 3000.0).with_stride(100);
    let run = run_identification(&model, &u, &cfg, &sim, &InitialHistory::constant(vec![0.5, 0.0]), None)?;

    let rows = summary(&run, 0.05);
    print!("{}", summary_table(&rows));
    let fictitious = rows
        .iter()
        .filter(|r| r.name.as_bytes()[1] == b'2')
        .map(|r| r.abs_error())
        .fold(0.0, f64::max);
    println!("largest row on the fictitious node: {fictitious:.3e}");
    Ok(())
}
