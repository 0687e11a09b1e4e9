mod common;

use approx::assert_abs_diff_eq;
use elcic::el_core::{dual_gradient, dual_objective, el_weights, log_star, solve_lagrange_default, ScoreMatrix};
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use common::{hull_instance, primal_log_el, primal_optimum};

#[test]
fn dual_matches_primal_on_random_small_instances() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for case in 0..300 {
        let inst = hull_instance(&mut rng);
        let g = ScoreMatrix::new(inst.rows.clone()).unwrap();
        let sol = solve_lagrange_default(&g).unwrap();
        assert!(!sol.hull_flag, "case {case}: interior instance flagged");
        let p_star = primal_optimum(&inst.rows, &inst.interior);
        assert_abs_diff_eq!(sol.log_el, primal_log_el(&p_star), epsilon = 1e-5);
        let p = el_weights(&g, &sol).unwrap();
        assert_abs_diff_eq!(p.sum(), 1.0, epsilon = 1e-8);
        let moment = inst.rows.transpose() * &p;
        assert!(moment.amax() < 1e-6, "case {case}: sum p g = {moment}");
        for i in 0..p.len() {
            assert_abs_diff_eq!(p[i], p_star[i], epsilon = 1e-5);
        }
    }
}

#[test]
fn three_point_example_against_grid_search() {
    let rows = DMatrix::from_column_slice(3, 1, &[0.5, -0.2, -0.1]);
    let g = ScoreMatrix::new(rows).unwrap();
    let sol = solve_lagrange_default(&g).unwrap();
    // The two constraints leave p2 = 6 p1 - 1 and p3 = 2 - 7 p1.
    let value = |p1: f64| {
        let p2 = 6.0 * p1 - 1.0;
        let p3 = 1.0 - p1 - p2;
        if p1 <= 0.0 || p2 <= 0.0 || p3 <= 0.0 {
            f64::NEG_INFINITY
        } else {
            (3.0 * p1).ln() + (3.0 * p2).ln() + (3.0 * p3).ln()
        }
    };
    let (mut lo, mut hi) = (1.0 / 6.0, 2.0 / 7.0);
    let mut best = (lo, f64::NEG_INFINITY);
    for _ in 0..6 {
        let steps = 2000;
        for k in 0..=steps {
            let p1 = lo + (hi - lo) * k as f64 / steps as f64;
            let v = value(p1);
            if v > best.1 {
                best = (p1, v);
            }
        }
        let width = (hi - lo) / steps as f64 * 2.0;
        lo = best.0 - width;
        hi = best.0 + width;
    }
    assert_abs_diff_eq!(sol.log_el, -best.1, epsilon = 1e-6);
    let p = el_weights(&g, &sol).unwrap();
    assert_abs_diff_eq!(p[0], best.0, epsilon = 1e-5);
}

#[test]
fn log_star_hand_values() {
    assert_abs_diff_eq!(log_star(1.0, 0.01), 0.0, epsilon = 1e-15);
    assert_abs_diff_eq!(log_star(0.01, 0.01), 0.01f64.ln(), epsilon = 1e-15);
    assert_abs_diff_eq!(log_star(0.0, 0.01), 0.01f64.ln() - 1.5, epsilon = 1e-12);
}

fn matrix_strategy() -> impl Strategy<Value = DMatrix<f64>> {
    (3usize..12, 1usize..4).prop_flat_map(|(n, l)| {
        prop::collection::vec(-3.0f64..3.0, n * l).prop_map(move |v| DMatrix::from_vec(n, l, v))
    })
}

fn centered(m: &DMatrix<f64>) -> DMatrix<f64> {
    let mut c = m.clone();
    for j in 0..m.ncols() {
        let mean = m.column(j).mean();
        c.column_mut(j).add_scalar_mut(-mean);
    }
    c
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn dual_is_concave(m in matrix_strategy(), a in prop::collection::vec(-0.3f64..0.3, 3), b in prop::collection::vec(-0.3f64..0.3, 3), t in 0.01f64..0.99) {
        let l = m.ncols();
        let g = ScoreMatrix::new(m).unwrap();
        let l1 = DVector::from_iterator(l, a.into_iter().take(l));
        let l2 = DVector::from_iterator(l, b.into_iter().take(l));
        let mid = t * &l1 + (1.0 - t) * &l2;
        let lhs = dual_objective(&g, &mid);
        let rhs = t * dual_objective(&g, &l1) + (1.0 - t) * dual_objective(&g, &l2);
        prop_assert!(lhs >= rhs - 1e-10);
    }

    #[test]
    fn gradient_matches_finite_differences(m in matrix_strategy(), a in prop::collection::vec(-0.2f64..0.2, 3)) {
        let l = m.ncols();
        let g = ScoreMatrix::new(m).unwrap();
        let lambda = DVector::from_iterator(l, a.into_iter().take(l));
        let grad = dual_gradient(&g, &lambda);
        let h = 1e-6;
        for j in 0..l {
            let mut up = lambda.clone();
            let mut down = lambda.clone();
            up[j] += h;
            down[j] -= h;
            let fd = (dual_objective(&g, &up) - dual_objective(&g, &down)) / (2.0 * h);
            let scale = grad[j].abs().max(1e-3);
            prop_assert!((fd - grad[j]).abs() / scale < 1e-4, "coordinate {j}: {fd} vs {}", grad[j]);
        }
    }

    #[test]
    fn zero_column_means_give_zero(m in matrix_strategy()) {
        let c = centered(&m);
        let sol = solve_lagrange_default(&ScoreMatrix::new(c).unwrap()).unwrap();
        prop_assert!(sol.log_el.abs() < 1e-12);
        prop_assert!(sol.lambda.amax() < 1e-8);
    }

    #[test]
    fn nonzero_means_give_positive_value(m in matrix_strategy(), shift in 0.05f64..1.0) {
        let mut c = centered(&m);
        c.column_mut(0).add_scalar_mut(shift);
        let sol = solve_lagrange_default(&ScoreMatrix::new(c).unwrap()).unwrap();
        prop_assert!(sol.log_el > 0.0);
    }

    #[test]
    fn value_grows_with_offset(m in matrix_strategy(), c1 in 0.0f64..1.5, extra in 0.05f64..1.5) {
        let base = centered(&m);
        let at = |c: f64| {
            let mut s = base.clone();
            s.column_mut(0).add_scalar_mut(c);
            solve_lagrange_default(&ScoreMatrix::new(s).unwrap()).unwrap().log_el
        };
        prop_assert!(at(c1 + extra) >= at(c1) - 1e-9);
        prop_assert!(at(-(c1 + extra)) >= at(-c1) - 1e-9);
    }

    #[test]
    fn solution_is_nonnegative_and_weights_normalized(m in matrix_strategy()) {
        let g = ScoreMatrix::new(m).unwrap();
        let sol = solve_lagrange_default(&g).unwrap();
        prop_assert!(sol.log_el >= 0.0);
        if !sol.hull_flag {
            let p = el_weights(&g, &sol).unwrap();
            prop_assert!((p.sum() - 1.0).abs() < 1e-8);
            prop_assert!(p.iter().all(|v| *v > 0.0));
        }
    }

    #[test]
    fn log_star_is_monotone_and_smooth(eps in 1e-3f64..1.0, x in -5.0f64..5.0, dx in 1e-6f64..1.0) {
        prop_assert!(log_star(x + dx, eps) >= log_star(x, eps));
        let h = 1e-7 * eps;
        let left = (log_star(eps, eps) - log_star(eps - h, eps)) / h;
        let right = (log_star(eps + h, eps) - log_star(eps, eps)) / h;
        prop_assert!((left - right).abs() / right < 1e-4);
    }
}
