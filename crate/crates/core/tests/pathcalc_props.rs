use jumpdrift::pathcalc::{
    covariation, covariation_direct, grid_epsilon_ladder, qv_ladder, qv_regularization, GridPath,
};
use jumpdrift::LabError;
use proptest::prelude::*;

const N: usize = 64;
const DT: f64 = 1.0 / N as f64;

fn path_values() -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-3.0f64..3.0, N + 1)
}

fn path(values: Vec<f64>) -> GridPath {
    GridPath::new(DT, values).unwrap()
}

fn close(a: f64, b: f64) -> bool {
    (a - b).abs() <= 1e-9 * (1.0 + a.abs().max(b.abs()))
}

proptest! {
    #[test]
    fn qv_ignores_constant_shift(v in path_values(), shift in -10.0f64..10.0, m in 1usize..N) {
        let eps = m as f64 * DT;
        let shifted: Vec<f64> = v.iter().map(|x| x + shift).collect();
        let a = qv_regularization(&path(v), eps, 1.0).unwrap();
        let b = qv_regularization(&path(shifted), eps, 1.0).unwrap();
        prop_assert!(close(a, b), "{a} vs {b}");
    }

    #[test]
    fn qv_scales_quadratically(v in path_values(), c in -5.0f64..5.0, m in 1usize..N) {
        let eps = m as f64 * DT;
        let scaled: Vec<f64> = v.iter().map(|x| c * x).collect();
        let a = qv_regularization(&path(v), eps, 1.0).unwrap();
        let b = qv_regularization(&path(scaled), eps, 1.0).unwrap();
        prop_assert!(close(c * c * a, b), "{} vs {b}", c * c * a);
        prop_assert!(a >= 0.0);
    }

    #[test]
    fn polarization_matches_cross_sum(a in path_values(), b in path_values(), m in 1usize..N) {
        let eps = m as f64 * DT;
        let (pa, pb) = (path(a), path(b));
        let polar = covariation(&pa, &pb, eps, 1.0).unwrap();
        let direct = covariation_direct(&pa, &pb, eps, 1.0).unwrap();
        prop_assert!(close(polar, direct), "{polar} vs {direct}");
        let diag = covariation_direct(&pa, &pa, eps, 1.0).unwrap();
        prop_assert!(close(diag, qv_regularization(&pa, eps, 1.0).unwrap()));
    }

    #[test]
    fn grid_ladder_is_on_grid_and_decreasing(n in 2usize..5000, horizon in 0.1f64..10.0) {
        let eps = grid_epsilon_ladder(horizon, n);
        let dt = horizon / n as f64;
        prop_assert!(eps.windows(2).all(|w| w[1] <= w[0]));
        for e in eps {
            let steps = e / dt;
            prop_assert!(steps >= 1.0 - 1e-9);
            prop_assert!((steps - steps.round()).abs() < 1e-9);
        }
    }
}

#[test]
fn epsilon_at_or_beyond_horizon_is_rejected() {
    let p = path(vec![0.0; N + 1]);
    assert!(matches!(
        qv_regularization(&p, 1.0, 1.0),
        Err(LabError::Validation(_))
    ));
    assert!(matches!(
        qv_regularization(&p, 0.5, 2.0),
        Err(LabError::RangeError { .. })
    ));
}

#[test]
fn mismatched_grids_are_rejected() {
    let a = path(vec![0.0; N + 1]);
    let b = GridPath::new(DT / 2.0, vec![0.0; 2 * N + 1]).unwrap();
    assert!(matches!(
        covariation_direct(&a, &b, 0.25, 1.0),
        Err(LabError::GridMismatch { .. })
    ));
}

#[test]
fn linear_path_qv_vanishes_like_epsilon() {
    // X_t = t: n - m + 1 full windows of m² dt², then clamped windows of
    // k² dt² for k < m, all divided by m.
    let values: Vec<f64> = (0..=N).map(|i| i as f64 * DT).collect();
    let p = path(values);
    let est = qv_ladder(&p, &[0.25, 0.125, 0.0625], 1.0).unwrap();
    for (e, v) in est.epsilons.iter().zip(&est.values) {
        let m = (e / DT).round();
        let n = N as f64;
        let exact = ((n - m + 1.0) * m * m + (m - 1.0) * m * (2.0 * m - 1.0) / 6.0) * DT * DT / m;
        assert!(close(*v, exact), "{e}: {v} vs {exact}");
        assert!(*v <= *e);
    }
}
