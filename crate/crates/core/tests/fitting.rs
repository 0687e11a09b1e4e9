use approx::assert_abs_diff_eq;
use elcic::criteria::{aic_bic_gic, qic_family};
use elcic::estimating_equations::{CandidateModel, CorrStructure, Family, PanelDataset};
use elcic::model_fitting::{fit_aipw, fit_candidate, fit_gee, fit_glm, fit_pgee, Framework, NuisanceSpec};
use elcic::sim_engine::{default_tuning_grid, OutcomeDist, SimDesign};
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

fn names(k: usize) -> Vec<String> {
    std::iter::once("intercept".to_string())
        .chain((1..k).map(|j| format!("x{j}")))
        .collect()
}

#[test]
fn poisson_fit_matches_grid_search() {
    let x = [-1.0, -0.5, 0.0, 0.5, 1.0, 1.5];
    let y = [0.0, 1.0, 1.0, 2.0, 4.0, 3.0];
    let design = DMatrix::from_fn(6, 2, |i, c| if c == 0 { 1.0 } else { x[i] });
    let data = PanelDataset::cross_sectional(DVector::from_row_slice(&y), design, names(2)).unwrap();
    let cand = CandidateModel::glm(Family::PoissonLog, 2, &[1]).unwrap();
    let fit = fit_glm(&data, &cand).unwrap();

    let loglik = |b0: f64, b1: f64| -> f64 {
        x.iter().zip(&y).map(|(xi, yi)| yi * (b0 + b1 * xi) - (b0 + b1 * xi).exp()).sum()
    };
    let (mut c0, mut c1, mut width) = (0.0, 0.0, 2.0);
    for _ in 0..8 {
        let mut best = (f64::NEG_INFINITY, c0, c1);
        for a in 0..=100 {
            for b in 0..=100 {
                let b0 = c0 - width + 2.0 * width * a as f64 / 100.0;
                let b1 = c1 - width + 2.0 * width * b as f64 / 100.0;
                let v = loglik(b0, b1);
                if v > best.0 {
                    best = (v, b0, b1);
                }
            }
        }
        (c0, c1) = (best.1, best.2);
        width /= 10.0;
    }
    assert_abs_diff_eq!(fit.beta()[0], c0, epsilon = 1e-3);
    assert_abs_diff_eq!(fit.beta()[1], c1, epsilon = 1e-3);
}

#[test]
fn exchangeable_correlation_is_recovered_on_count_panel() {
    let data = SimDesign::case2(1000, 3).generate(0).unwrap();
    let cand = CandidateModel::new(vec![true, true, true, false], CorrStructure::Exchangeable, Family::PoissonLog, 3).unwrap();
    let fit = fit_gee(&data, &cand).unwrap();
    assert!((fit.params.rho[0] - 0.5).abs() < 0.05, "alpha {}", fit.params.rho[0]);
}

#[test]
fn moment_estimates_on_two_occasion_toy() {
    let y = DMatrix::from_row_slice(3, 2, &[1.0, 3.0, 2.0, 2.0, 4.0, 7.0]);
    let xs = vec![DMatrix::from_element(2, 1, 1.0); 3];
    let data = PanelDataset::new(y.clone(), xs, vec![true; 6], None, names(1)).unwrap();
    let cand = CandidateModel::new(vec![true], CorrStructure::Exchangeable, Family::GaussianIdentity, 2).unwrap();
    let fit = fit_gee(&data, &cand).unwrap();

    let mean = y.sum() / 6.0;
    let e = y.map(|v| v - mean);
    let phi = e.norm_squared() / (6.0 - 1.0);
    let alpha = (0..3).map(|i| e[(i, 0)] * e[(i, 1)]).sum::<f64>() / ((3.0 - 1.0) * phi);
    assert_abs_diff_eq!(fit.beta()[0], mean, epsilon = 1e-9);
    assert_abs_diff_eq!(fit.params.phi, phi, epsilon = 1e-9);
    assert_abs_diff_eq!(fit.params.rho[0], alpha, epsilon = 1e-9);
}

#[test]
fn gee_error_shrinks_at_root_n_rate() {
    let cand = CandidateModel::new(vec![true, true, true, false], CorrStructure::Exchangeable, Family::PoissonLog, 3).unwrap();
    let rmse = |n: usize| {
        let design = SimDesign::case2(n, 3);
        let truth = DVector::from_row_slice(&design.truth.beta);
        let total: f64 = (0..200)
            .map(|rep| {
                let fit = fit_gee(&design.generate(rep).unwrap(), &cand).unwrap();
                (fit.beta() - &truth).norm_squared()
            })
            .sum();
        (total / 200.0).sqrt()
    };
    let ratio = rmse(200) / rmse(100);
    let target = 0.5f64.sqrt();
    assert!((ratio - target).abs() <= 0.2 * target, "ratio {ratio}");
}

#[test]
fn penalized_fit_recovers_support_at_oracle_tuning() {
    let design = SimDesign::case3(200);
    let base = design.candidates().unwrap()[0].clone();
    let truth = design.truth_mask();
    let grid = default_tuning_grid();
    let reps = 100;
    let hits = (0..reps)
        .filter(|&rep| {
            let data = design.generate(rep).unwrap();
            grid.iter()
                .any(|&lambda| fit_pgee(&data, &base, lambda).is_ok_and(|f| f.support == truth))
        })
        .count();
    assert!(hits as f64 >= 0.9 * reps as f64, "{hits} of {reps}");
}

#[test]
fn penalized_path_is_continuous() {
    let design = SimDesign::case3(100);
    let base = design.candidates().unwrap()[0].clone();
    let grid = default_tuning_grid();
    for rep in 0..5 {
        let data = design.generate(rep).unwrap();
        let path: Vec<DVector<f64>> = grid
            .iter()
            .map(|&lambda| fit_pgee(&data, &base, lambda).unwrap().beta().clone())
            .collect();
        for (k, w) in path.windows(2).enumerate() {
            let jump = (&w[1] - &w[0]).norm();
            assert!(jump < 0.5, "rep {rep}: jump {jump} between grid points {k} and {}", k + 1);
        }
    }
}

#[test]
fn aipw_is_consistent_when_either_nuisance_is_right() {
    let design = SimDesign::aipw(2000);
    let cand = CandidateModel::glm(Family::GaussianIdentity, 7, &[1, 2, 3, 4]).unwrap();
    let reps = 100;
    let data: Vec<PanelDataset> = (0..reps).map(|rep| design.generate(rep).unwrap()).collect();
    for (pi, a) in [
        (NuisanceSpec::Correct, NuisanceSpec::Correct),
        (NuisanceSpec::Misspecified, NuisanceSpec::Correct),
    ] {
        let mut mean = DVector::zeros(7);
        for d in &data {
            mean += fit_aipw(d, &cand, &pi.missingness(), &a.imputation()).unwrap().beta() / reps as f64;
        }
        for (j, target) in [1.0, 1.0, 2.0, 1.0, 1.0].iter().enumerate() {
            assert!((mean[j] - target).abs() < 0.05, "{pi:?}/{a:?} mean beta[{j}] = {}", mean[j]);
        }
    }
}

#[test]
fn converged_fits_solve_their_defining_equations() {
    let designs = [
        SimDesign::case1(100, OutcomeDist::NegBin { k: 2.0 }),
        SimDesign::case2(100, 3),
        SimDesign::case3(100),
    ];
    for design in designs {
        let framework = if design.case.longitudinal() { Framework::Gee } else { Framework::Glm };
        let cands = design.candidates().unwrap();
        for rep in 0..5 {
            let data = design.generate(rep).unwrap();
            for cand in &cands {
                let fit = fit_candidate(&data, cand, &framework).unwrap();
                assert!(fit.converged);
                assert!(fit.score_norm <= 1e-6, "{:?} {}", cand.mask(), fit.score_norm);
            }
        }
    }
    let design = SimDesign::aipw(250);
    let data = design.generate(0).unwrap();
    let cand = CandidateModel::glm(Family::GaussianIdentity, 7, &[1, 2, 3, 4]).unwrap();
    let fit = fit_aipw(&data, &cand, &NuisanceSpec::Correct.missingness(), &NuisanceSpec::Correct.imputation()).unwrap();
    assert!(fit.score_norm <= 1e-6);
}

#[test]
fn information_trace_approaches_parameter_count_under_correct_model() {
    let data = SimDesign::case1(2000, OutcomeDist::Poisson).generate(0).unwrap();
    let cand = CandidateModel::glm(Family::PoissonLog, 4, &[1, 2]).unwrap();
    let crit = aic_bic_gic(&data, &cand).unwrap();
    assert!((crit.gic_trace - 3.0).abs() <= 0.2 * 3.0, "trace {}", crit.gic_trace);
}

#[test]
fn independence_sandwich_trace_approaches_parameter_count() {
    let (n, t) = (2000, 3);
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut y = DMatrix::zeros(n, t);
    let xs: Vec<DMatrix<f64>> = (0..n)
        .map(|i| {
            let x = DMatrix::from_fn(t, 3, |_, c| if c == 0 { 1.0 } else { rng.sample(StandardNormal) });
            for j in 0..t {
                y[(i, j)] = 1.0 + 0.5 * x[(j, 1)] - 0.5 * x[(j, 2)] + rng.sample::<f64, _>(StandardNormal);
            }
            x
        })
        .collect();
    let data = PanelDataset::new(y, xs, vec![true; n * t], None, names(3)).unwrap();
    let cand = CandidateModel::new(vec![true; 3], CorrStructure::Independence, Family::GaussianIdentity, t).unwrap();
    let crit = qic_family(&data, &cand).unwrap();
    assert!((crit.cic - 3.0).abs() <= 0.2 * 3.0, "trace {}", crit.cic);
}
