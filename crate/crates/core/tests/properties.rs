//! Property tests over randomly generated inputs.

use nalgebra::{DMatrix, DVector, RowDVector};
use proptest::prelude::*;
use tdid::benchmark::benchmark_config;
use tdid::config::ExperimentConfig;
use tdid::dde::{simulate_plant, InitialHistory, SimConfig};
use tdid::io::fmt_f64;
use tdid::lmi::{assemble_psi, AssemblyMode, PsiProblem};
use tdid::model::{decompose_matching, extend_to_grid, signed_cbrt, DelayGrid, Nonlinearity, PlantModel, SlotKappa, SlotMatrices};
use tdid::signals::{pe_check, RegressorSeries};

fn vec_of(len: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-3.0..3.0f64, len)
}

fn mat(r: usize, c: usize) -> impl Strategy<Value = DMatrix<f64>> {
    vec_of(r * c).prop_map(move |v| DMatrix::from_vec(r, c, v))
}

fn sym(n: usize) -> impl Strategy<Value = DMatrix<f64>> {
    mat(n, n).prop_map(|m| (&m + m.transpose()) * 0.5)
}

fn close(a: &DMatrix<f64>, b: &DMatrix<f64>, tol: f64) -> bool {
    (a - b).norm() <= tol * (1.0 + a.norm().max(b.norm()))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn cbrt_is_odd_and_inverts_cube(x in -1e6..1e6f64) {
        prop_assert_eq!(signed_cbrt(-x), -signed_cbrt(x));
        let r = signed_cbrt(x);
        prop_assert!((r * r * r - x).abs() <= 1e-12 * x.abs().max(1e-300));
    }

    #[test]
    fn fmt_f64_round_trips(x in any::<f64>().prop_filter("finite", |v| v.is_finite())) {
        let back: f64 = fmt_f64(x).parse().unwrap();
        prop_assert_eq!(back, x);
    }

    #[test]
    fn matching_decomposition_recomposes(
        known_a in mat(3, 3), known_b in vec_of(3),
        ka in vec_of(3), kb in -3.0..3.0f64,
        t0 in vec_of(3), c in vec_of(3),
    ) {
        let t0 = DVector::from_vec(t0);
        let c = RowDVector::from_vec(c);
        prop_assume!(t0.norm() > 0.1 && (&c * &t0)[0].abs() > 0.1);
        let known = SlotMatrices {
            a: known_a,
            b: DVector::from_vec(known_b),
            ..SlotMatrices::zeros(3, 1, 1)
        };
        let kappa = SlotKappa { a: RowDVector::from_vec(ka), b: kb, ..SlotKappa::zeros(3, 1, 1) };
        let full = SlotMatrices {
            a: &known.a + &t0 * &kappa.a,
            b: &known.b + &t0 * kappa.b,
            ..SlotMatrices::zeros(3, 1, 1)
        };
        let plant = PlantModel::new(
            vec![0.0],
            vec![full.clone()],
            c,
            Nonlinearity::builtin("zero", 3, 1).unwrap(),
            Nonlinearity::builtin("zero", 1, 1).unwrap(),
            0.0,
        ).unwrap();
        let dec = decompose_matching(&plant, &[known], &t0).unwrap();
        prop_assert!((&dec.kappa[0].a - &kappa.a).norm() <= 1e-9 * (1.0 + kappa.a.norm()));
        prop_assert!((dec.kappa[0].b - kb).abs() <= 1e-9 * (1.0 + kb.abs()));
        let back = dec.recompose();
        prop_assert!(close(&back[0].a, &full.a, 1e-12));
    }

    #[test]
    fn psi_is_symmetric_and_affine(
        a0 in mat(2, 2), a1 in mat(2, 2), d0 in mat(2, 1), y0 in mat(2, 2),
        p1 in sym(2), p2 in sym(2), s1 in sym(2), s2 in sym(2),
        lambda in 0.0..1.0f64, derived in any::<bool>(),
    ) {
        let mode = if derived { AssemblyMode::Derived } else { AssemblyMode::Verbatim };
        let prob = PsiProblem::new(
            vec![a0, a1],
            vec![d0, DMatrix::zeros(2, 1)],
            vec![y0, DMatrix::zeros(2, 2)],
            0.7,
            DVector::from_row_slice(&[0.0, 1.0]),
            RowDVector::from_row_slice(&[1.0, 3.0]),
            mode,
        ).unwrap();
        let s_a = [s1.clone(), s2.clone()];
        let s_b = [s2.clone(), s1.clone()];
        let psi_a = assemble_psi(&prob, &p1, &s_a).unwrap();
        let psi_b = assemble_psi(&prob, &p2, &s_b).unwrap();
        prop_assert!(close(&psi_a, &psi_a.transpose(), 1e-14));
        let p_mix = &p1 * lambda + &p2 * (1.0 - lambda);
        let s_mix: Vec<_> = s_a.iter().zip(&s_b).map(|(x, y)| x * lambda + y * (1.0 - lambda)).collect();
        let psi_mix = assemble_psi(&prob, &p_mix, &s_mix).unwrap();
        prop_assert!(close(&psi_mix, &(psi_a * lambda + psi_b * (1.0 - lambda)), 1e-12));
    }

    #[test]
    fn pe_alpha_scales_quadratically(scale in 0.1..10.0f64, w1 in 0.5..3.0f64, w2 in 3.5..6.0f64) {
        let dt = 0.01;
        let make = |k: f64| RegressorSeries::from_fn(0.0, dt, 2001, 2, |t, out| {
            out[0] = k * (w1 * t).sin();
            out[1] = k * (w2 * t).cos();
        });
        let base = pe_check(&make(1.0), 5.0, dt, None).unwrap().alpha;
        let scaled = pe_check(&make(scale), 5.0, dt, None).unwrap().alpha;
        prop_assert!((scaled - scale * scale * base).abs() <= 1e-10 * scaled.abs().max(1e-12));
    }

    #[test]
    fn config_round_trips(h in 1e-4..1e-2f64, t_end in 1.0..100.0f64, gamma in 0.1..1000.0f64, k in -5.0..5.0f64) {
        let mut cfg = benchmark_config();
        cfg.sim.h = h;
        cfg.sim.t_end = t_end;
        let id = cfg.identifier.as_mut().unwrap();
        id.gamma = Some(gamma);
        id.injection[0].k = Some(vec![0.0, k]);
        let text = cfg.to_toml_string().unwrap();
        prop_assert_eq!(ExperimentConfig::from_toml_str(&text).unwrap(), cfg);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn grid_extension_preserves_output(
        a in vec_of(3), b in -2.0..2.0f64, extra in prop::collection::vec(0.05..2.0f64, 1..4),
    ) {
        let delays = vec![0.0, 0.4, 0.9];
        let slots: Vec<SlotMatrices> = a.iter().enumerate().map(|(i, v)| SlotMatrices {
            // Keep the instantaneous part stable so the run stays bounded.
            a: DMatrix::from_element(1, 1, if i == 0 { -2.0 - v.abs() } else { 0.3 * v }),
            g: DMatrix::from_element(1, 1, 0.5 * v),
            b: DVector::from_element(1, if i == 0 { 1.0 } else { b }),
            ..SlotMatrices::zeros(1, 1, 1)
        }).collect();
        let plant = PlantModel::new(
            delays.clone(),
            slots,
            RowDVector::from_element(1, 1.0),
            Nonlinearity::builtin("zero", 1, 1).unwrap(),
            Nonlinearity::builtin("tanh", 1, 1).unwrap(),
            1.0,
        ).unwrap();
        let mut grid: Vec<f64> = delays.iter().copied().chain(extra.iter().map(|e| (e * 100.0).round() / 100.0)).collect();
        grid.sort_by(f64::total_cmp);
        grid.dedup_by(|x, y| (*x - *y).abs() < 1e-9);
        let extended = extend_to_grid(&plant, &DelayGrid::new(grid).unwrap()).unwrap();
        let u = |t: f64| (1.7 * t).sin() + 0.5 * (4.1 * t).cos();
        let init = InitialHistory::constant(vec![0.2]);
        let sim = SimConfig::new(1e-3, 5.0).with_stride(10);
        let x = simulate_plant(&plant, &u, &init, &sim).unwrap();
        let z = simulate_plant(&extended, &u, &init, &sim).unwrap();
        for i in 0..x.len() {
            prop_assert!((x.state(i)[0] - z.state(i)[0]).abs() <= 1e-12);
        }
    }
}
