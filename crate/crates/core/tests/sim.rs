use elcic::estimating_equations::{CandidateModel, CorrStructure, Family, PanelDataset};
use elcic::model_fitting::{fit_gee, fit_glm};
use elcic::sim_engine::copula::{calibrate_matrix, norm_cdf, poisson_quantile};
use elcic::sim_engine::{draw_count, run_mc, Experiment, OutcomeDist, SimDesign};
use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use statrs::distribution::{DiscreteCDF, Poisson};

fn mean_var(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    (m, v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0))
}

fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let (ma, va) = mean_var(a);
    let (mb, vb) = mean_var(b);
    let cov = a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum::<f64>() / (a.len() as f64 - 1.0);
    cov / (va * vb).sqrt()
}

fn draws(outcome: OutcomeDist, mu: f64, n: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| draw_count(&mut rng, mu, outcome).unwrap()).collect()
}

#[test]
fn huge_dispersion_parameter_behaves_like_poisson() {
    let v = draws(OutcomeDist::NegBin { k: 1e6 }, 2.0, 100_000, 1);
    let (m, var) = mean_var(&v);
    assert!((var / m - 1.0).abs() < 0.02, "ratio {}", var / m);
}

#[test]
fn negative_binomial_variance() {
    let v = draws(OutcomeDist::NegBin { k: 2.0 }, 2.0, 100_000, 2);
    let (m, var) = mean_var(&v);
    let m4 = v.iter().map(|x| (x - m).powi(4)).sum::<f64>() / v.len() as f64;
    let se = ((m4 - var * var) / v.len() as f64).sqrt();
    assert!((var - 4.0).abs() < 3.0 * se, "variance {var}, se {se}");
}

#[test]
fn null_count_design_has_unit_mean() {
    let mut design = SimDesign::case1(100_000, OutcomeDist::Poisson);
    design.truth.beta = vec![0.0; 4];
    let data = design.generate(0).unwrap();
    let y: Vec<f64> = (0..data.n()).map(|i| data.y(i, 0)).collect();
    let (m, var) = mean_var(&y);
    assert!((m - 1.0).abs() < 3.0 * (var / y.len() as f64).sqrt(), "mean {m}");
}

#[test]
fn copula_margins_are_poisson_and_pairs_hit_target() {
    let mus = [(-0.5f64).exp(), 1.0, 0.5f64.exp()];
    let latent = calibrate_matrix(&mus, 0.5).unwrap();
    let chol = latent.cholesky().unwrap().l();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let n = 100_000;
    let mut cols: Vec<Vec<f64>> = (0..3).map(|_| Vec::with_capacity(n)).collect();
    for _ in 0..n {
        let z = &chol * DVector::from_fn(3, |_, _| StandardNormal.sample(&mut rng));
        for j in 0..3 {
            cols[j].push(poisson_quantile(norm_cdf(z[j]), mus[j]));
        }
    }
    for (j, col) in cols.iter().enumerate() {
        let dist = Poisson::new(mus[j]).unwrap();
        let max = col.iter().cloned().fold(0.0, f64::max) as u64;
        let ks = (0..=max)
            .map(|k| {
                let empirical = col.iter().filter(|&&y| y <= k as f64).count() as f64 / n as f64;
                (empirical - dist.cdf(k)).abs()
            })
            .fold(0.0, f64::max);
        assert!(ks < 0.01, "margin {j}: KS {ks}");
    }
    for a in 0..3 {
        for b in (a + 1)..3 {
            let r = pearson(&cols[a], &cols[b]);
            assert!((r - 0.5).abs() < 0.02, "pair ({a},{b}): {r}");
        }
    }
}

fn case2_means(design: &SimDesign, data: &PanelDataset, i: usize) -> Vec<f64> {
    let x = data.unit_design(i);
    let b = DVector::from_row_slice(&design.truth.beta);
    (0..data.n_times()).map(|j| (x.row(j) * &b)[0].exp()).collect()
}

#[test]
fn count_panel_residual_correlation_and_margins() {
    let design = SimDesign::case2(20_000, 3);
    let data = design.generate(0).unwrap();
    let mut lead = Vec::new();
    let mut lag = Vec::new();
    let mut resid = vec![Vec::new(); 3];
    for i in 0..data.n() {
        let mu = case2_means(&design, &data, i);
        let e: Vec<f64> = (0..3).map(|j| (data.y(i, j) - mu[j]) / mu[j].sqrt()).collect();
        for j in 0..2 {
            lead.push(e[j]);
            lag.push(e[j + 1]);
        }
        for j in 0..3 {
            resid[j].push(data.y(i, j) - mu[j]);
        }
    }
    let pooled = lead.iter().zip(&lag).map(|(a, b)| a * b).sum::<f64>()
        / (lead.iter().map(|a| a * a).sum::<f64>() * lag.iter().map(|b| b * b).sum::<f64>()).sqrt();
    assert!((0.45..=0.55).contains(&pooled), "lag-1 correlation {pooled}");
    for (j, r) in resid.iter().enumerate() {
        let (m, var) = mean_var(r);
        assert!(m.abs() < 3.0 * (var / r.len() as f64).sqrt(), "occasion {j}: mean residual {m}");
    }
}

#[test]
fn gaussian_panel_null_variant() {
    let mut design = SimDesign::case3(20_000);
    design.truth.beta = vec![0.0; 8];
    let data = design.generate(0).unwrap();
    let all: Vec<f64> = data.responses().iter().copied().collect();
    let (m, var) = mean_var(&all);
    assert!(m.abs() < 3.0 * (var / all.len() as f64).sqrt(), "mean {m}");
    let col = |j: usize| -> Vec<f64> { (0..data.n()).map(|i| data.y(i, j)).collect() };
    for (a, b) in [(0, 1), (0, 2), (1, 2)] {
        let r = pearson(&col(a), &col(b));
        assert!((r - 0.5).abs() < 0.02, "occasions ({a},{b}): {r}");
    }
}

#[test]
fn gaussian_panel_regression_recovers_coefficients() {
    let design = SimDesign::case3(5000);
    let data = design.generate(0).unwrap();
    let cand = CandidateModel::new(vec![true; 8], CorrStructure::Independence, Family::GaussianIdentity, 3).unwrap();
    let fit = fit_gee(&data, &cand).unwrap();
    for (j, b) in design.truth.beta.iter().enumerate() {
        assert!((fit.beta()[j] - b).abs() < 0.05, "beta[{j}] = {}", fit.beta()[j]);
    }
}

fn expit(v: f64) -> f64 {
    1.0 / (1.0 + (-v).exp())
}

/// `E[pi]` by quadrature: given `x2`, `s1 ~ N(6 + 2 x2, 2)` and
/// `P(s2 = 1 | s1) = Phi((s1 - 5.8) / 0.3)`.
fn observing_probability() -> f64 {
    let sd = 2f64.sqrt();
    let steps = 20_000;
    let mut total = 0.0;
    for x2 in [0.0, 1.0] {
        let centre = 6.0 + 2.0 * x2;
        let (lo, hi) = (centre - 10.0 * sd, centre + 10.0 * sd);
        let h = (hi - lo) / steps as f64;
        for k in 0..=steps {
            let s1 = lo + h * k as f64;
            let z = (s1 - centre) / sd;
            let density = (-0.5 * z * z).exp() / (sd * (2.0 * std::f64::consts::PI).sqrt());
            let p2 = norm_cdf((s1 - 5.8) / 0.3);
            let pi = p2 * expit(8.0 - s1) + (1.0 - p2) * expit(5.0 - s1);
            let w = if k == 0 || k == steps { 0.5 } else { 1.0 };
            total += 0.5 * w * h * density * pi;
        }
    }
    total
}

#[test]
fn missing_outcome_design_properties() {
    let data = SimDesign::aipw(100_000).generate(0).unwrap();
    let n = data.n();
    let frac = data.n_observed() as f64 / n as f64;
    let expected = observing_probability();
    assert!((frac - expected).abs() < 0.01, "observed fraction {frac}, quadrature {expected}");

    let aux = data.aux().unwrap();
    let beta = [1.0, 1.0, 2.0, 1.0, 1.0];
    let complete: Vec<usize> = (0..n).filter(|&i| data.observed(i, 0)).collect();
    let (mut e1, mut e2) = (Vec::new(), Vec::new());
    for &i in &complete {
        let x = data.unit_design(i);
        let mean: f64 = (0..5).map(|c| beta[c] * x[(0, c)]).sum();
        e1.push(data.y(i, 0) - mean);
        e2.push(aux[(i, 0)] - 1.0 - x[(0, 1)] - 2.0 * x[(0, 2)]);
    }
    let (m2, v2) = mean_var(&e2);
    let (m1, _) = mean_var(&e1);
    let slope = e1.iter().zip(&e2).map(|(a, b)| (a - m1) * (b - m2)).sum::<f64>() / (v2 * (e2.len() as f64 - 1.0));
    assert!((slope - 0.5).abs() < 0.02, "slope of eps1 on eps2 {slope}");

    let cc = data.subset(&complete).unwrap();
    let cand = CandidateModel::glm(Family::GaussianIdentity, 7, &[1, 2, 3, 4]).unwrap();
    let fit = fit_glm(&cc, &cand).unwrap();
    let x = DMatrix::from_fn(cc.n(), 5, |i, c| cc.unit_design(i)[(0, c)]);
    let y = DVector::from_fn(cc.n(), |i, _| cc.y(i, 0));
    let b = fit.beta().rows(0, 5).into_owned();
    let resid = &y - &x * &b;
    let sigma2 = resid.norm_squared() / (cc.n() - 5) as f64;
    let cov = x.tr_mul(&x).try_inverse().unwrap() * sigma2;
    let worst = (0..5)
        .map(|c| (b[c] - beta[c]).abs() / cov[(c, c)].sqrt())
        .fold(0.0, f64::max);
    assert!(worst > 3.0, "largest complete-case bias is {worst} standard errors");
}

#[test]
fn rates_are_coherent() {
    for design in [
        SimDesign::case1(60, OutcomeDist::Poisson).with_reps(12),
        SimDesign::case2(40, 3).with_reps(6),
        SimDesign::aipw(250).with_reps(10),
    ] {
        let table = run_mc(&design, &Experiment::default_for(&design).unwrap()).unwrap();
        for proc in &table.procedures {
            let total: f64 = table.rates.iter().filter(|r| &r.procedure == proc).map(|r| r.rate).sum();
            assert!((total - 1.0).abs() < 1e-9, "{proc}: {total}");
            assert!(table.rates.iter().all(|r| (0.0..=1.0).contains(&r.rate)));
        }
    }
}

#[test]
fn single_replicate_rates_are_indicators() {
    let design = SimDesign::case1(80, OutcomeDist::Poisson).with_reps(1);
    let table = run_mc(&design, &Experiment::default_for(&design).unwrap()).unwrap();
    assert!(table.rates.iter().all(|r| r.rate == 0.0 || r.rate == 1.0));
}

#[test]
fn tables_do_not_depend_on_pool_size() {
    let design = SimDesign::case2(40, 3).with_reps(8).with_seed(5);
    let exp = Experiment::default_for(&design).unwrap();
    let run_on = |threads: usize| {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .unwrap()
            .install(|| run_mc(&design, &exp).unwrap())
    };
    assert_eq!(run_on(1), run_on(3));
}
