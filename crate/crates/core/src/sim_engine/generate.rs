use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Bernoulli, Distribution, Gamma, Poisson, StandardNormal};

use super::copula::{calibrate_matrix, case2_table, norm_cdf, poisson_quantile};
use super::{OutcomeDist, SimCase, SimDesign};
use crate::error::{ElcicError, Result};
use crate::estimating_equations::PanelDataset;

/// Unit-variance AR(1) correlation matrix.
pub fn ar1_matrix(dim: usize, rho: f64) -> DMatrix<f64> {
    DMatrix::from_fn(dim, dim, |a, b| rho.powi(a.abs_diff(b) as i32))
}

/// Exchangeable covariance with variance `sigma2`.
pub fn exchangeable_matrix(dim: usize, sigma2: f64, rho: f64) -> DMatrix<f64> {
    DMatrix::from_fn(dim, dim, |a, b| if a == b { sigma2 } else { sigma2 * rho })
}

fn cholesky_factor(m: DMatrix<f64>) -> Result<DMatrix<f64>> {
    m.cholesky()
        .map(|c| c.l())
        .ok_or_else(|| ElcicError::InvalidInput("covariance matrix is not positive definite".into()))
}

fn normals(rng: &mut ChaCha8Rng, dim: usize) -> DVector<f64> {
    DVector::from_fn(dim, |_, _| rng.sample(StandardNormal))
}

fn expect_case(design: &SimDesign, case: SimCase) -> Result<()> {
    if design.case != case {
        return Err(ElcicError::InvalidInput(format!(
            "design is {} but a {} generator was called",
            design.case.label(),
            case.label()
        )));
    }
    design.validate()
}

/// Count draw with mean `mu` from the design's outcome distribution.
pub fn draw_count(rng: &mut ChaCha8Rng, mu: f64, outcome: OutcomeDist) -> Result<f64> {
    let lambda = match outcome {
        OutcomeDist::Poisson => mu,
        OutcomeDist::NegBin { k } => {
            let gamma = Gamma::new(k, mu / k).map_err(|e| ElcicError::InvalidInput(e.to_string()))?;
            gamma.sample(rng)
        }
        OutcomeDist::Gaussian => return Err(ElcicError::InvalidInput("count draw from a Gaussian outcome".into())),
    };
    if lambda <= 0.0 {
        return Ok(0.0);
    }
    let pois = Poisson::new(lambda).map_err(|e| ElcicError::InvalidInput(e.to_string()))?;
    Ok(pois.sample(rng))
}

/// Cross-sectional counts with `log mu = beta0 + x'beta`, `x ~ MVN(0, AR1(0.5))`.
pub fn gen_case1(design: &SimDesign, rep: u64) -> Result<PanelDataset> {
    expect_case(design, SimCase::GlmCount)?;
    let mut rng = design.rng(rep);
    let beta = &design.truth.beta;
    let p = beta.len() - 1;
    let chol = cholesky_factor(ar1_matrix(p, 0.5))?;
    let n = design.n;
    let mut x = DMatrix::zeros(n, p + 1);
    let mut y = DVector::zeros(n);
    for i in 0..n {
        let z = &chol * normals(&mut rng, p);
        x[(i, 0)] = 1.0;
        x.view_mut((i, 1), (1, p)).copy_from(&z.transpose());
        let eta: f64 = beta[0] + (0..p).map(|c| beta[c + 1] * z[c]).sum::<f64>();
        y[i] = draw_count(&mut rng, eta.exp(), design.truth.outcome)?;
    }
    PanelDataset::cross_sectional(y, x, design.covariate_names())
}

/// Longitudinal counts with exchangeable Pearson correlation via a Gaussian
/// copula. Covariates: subject-level `x1 ~ U[0,1]`, time `x2 = j - 1`, noise
/// `x3 ~ N(0,1)`.
pub fn gen_case2(design: &SimDesign, rep: u64) -> Result<PanelDataset> {
    expect_case(design, SimCase::GeeCount)?;
    let mut rng = design.rng(rep);
    let (n, t) = (design.n, design.t);
    let b = &design.truth.beta;
    let table = if b[3] == 0.0 {
        Some(case2_table(t, [b[0], b[1], b[2]], design.truth.rho)?)
    } else {
        None
    };
    let mut y = DMatrix::zeros(n, t);
    let mut xs = Vec::with_capacity(n);
    for i in 0..n {
        let x1: f64 = rng.random();
        let x = DMatrix::from_fn(t, 4, |j, c| match c {
            0 => 1.0,
            1 => x1,
            2 => j as f64,
            _ => rng.sample(StandardNormal),
        });
        let mus: Vec<f64> = (0..t).map(|j| (0..4).map(|c| b[c] * x[(j, c)]).sum::<f64>().exp()).collect();
        let latent = match &table {
            Some(tab) => tab.latent(x1),
            None => calibrate_matrix(&mus, design.truth.rho)?,
        };
        let chol = latent
            .cholesky()
            .ok_or_else(|| ElcicError::CalibrationFailed("latent correlation is not positive definite".into()))?
            .l();
        let z = chol * normals(&mut rng, t);
        for j in 0..t {
            y[(i, j)] = poisson_quantile(norm_cdf(z[j]), mus[j]);
        }
        xs.push(x);
    }
    PanelDataset::new(y, xs, vec![true; n * t], None, design.covariate_names())
}

/// Gaussian panel `Y = X beta + eps` with covariate rows `MVN(0, AR1(0.5))`
/// and exchangeable errors.
pub fn gen_case3(design: &SimDesign, rep: u64) -> Result<PanelDataset> {
    expect_case(design, SimCase::PgeeGauss)?;
    let mut rng = design.rng(rep);
    let (n, t) = (design.n, design.t);
    let beta = &design.truth.beta;
    let p = beta.len() - 1;
    let x_chol = cholesky_factor(ar1_matrix(p, 0.5))?;
    let e_chol = cholesky_factor(exchangeable_matrix(t, design.truth.phi, design.truth.rho))?;
    let mut y = DMatrix::zeros(n, t);
    let mut xs = Vec::with_capacity(n);
    for i in 0..n {
        let mut x = DMatrix::zeros(t, p + 1);
        for j in 0..t {
            let row = &x_chol * normals(&mut rng, p);
            x[(j, 0)] = 1.0;
            x.view_mut((j, 1), (1, p)).copy_from(&row.transpose());
        }
        let eps = &e_chol * normals(&mut rng, t);
        for j in 0..t {
            y[(i, j)] = (0..=p).map(|c| x[(j, c)] * beta[c]).sum::<f64>() + eps[j];
        }
        xs.push(x);
    }
    PanelDataset::new(y, xs, vec![true; n * t], None, design.covariate_names())
}

/// Linear outcome missing at random given surrogates. The design matrix is
/// `(1, x1, x2, x3, x4, s3, s4)`, the auxiliary block holds `s1..s4`, and
/// unobserved outcomes are stored as NaN.
pub fn gen_aipw(design: &SimDesign, rep: u64) -> Result<PanelDataset> {
    expect_case(design, SimCase::AipwLinear)?;
    let mut rng = design.rng(rep);
    let n = design.n;
    let beta = &design.truth.beta;
    let coin = Bernoulli::new(0.5).map_err(|e| ElcicError::InvalidInput(e.to_string()))?;
    let corr12 = 0.5_f64;
    let mut design_rows = DMatrix::zeros(n, 7);
    let mut aux = DMatrix::zeros(n, 4);
    let mut y = DMatrix::zeros(n, 1);
    let mut observed = Vec::with_capacity(n);
    for i in 0..n {
        let x1 = 5.0 + rng.sample::<f64, _>(StandardNormal);
        let x2 = if coin.sample(&mut rng) { 1.0 } else { 0.0 };
        let x3: f64 = rng.sample(StandardNormal);
        let x4: f64 = rng.sample(StandardNormal);
        let e = normals(&mut rng, 5);
        let eps1 = e[0];
        let eps2 = corr12 * e[0] + (1.0 - corr12 * corr12).sqrt() * e[1];
        let s1 = 1.0 + x1 + 2.0 * x2 + eps2;
        let s2 = if s1 + 0.3 * e[2] > 5.8 { 1.0 } else { 0.0 };
        let s3 = e[3];
        let s4 = x2 + e[4];
        let row = [1.0, x1, x2, x3, x4, s3, s4];
        let mean: f64 = row.iter().zip(beta.iter()).map(|(a, b)| a * b).sum();
        let pi = 1.0 / (1.0 + (-(5.0 - s1 + 3.0 * s2)).exp());
        let seen = rng.random::<f64>() < pi;
        design_rows.row_mut(i).copy_from_slice(&row);
        aux.row_mut(i).copy_from_slice(&[s1, s2, s3, s4]);
        y[(i, 0)] = if seen { mean + eps1 } else { f64::NAN };
        observed.push(seen);
    }
    let xs = (0..n).map(|i| design_rows.rows(i, 1).into_owned()).collect();
    PanelDataset::new(y, xs, observed, Some(aux), design.covariate_names())?
        .with_aux_names(["s1", "s2", "s3", "s4"].iter().map(|s| s.to_string()).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::SymmetricEigen;

    #[test]
    fn exchangeable_eigenvalues() {
        let mut ev: Vec<f64> = SymmetricEigen::new(exchangeable_matrix(3, 1.0, 0.5)).eigenvalues.iter().copied().collect();
        ev.sort_by(f64::total_cmp);
        for (a, b) in ev.iter().zip([0.5, 0.5, 2.0]) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn generators_are_deterministic_per_rep() {
        let d = SimDesign::case1(50, OutcomeDist::Poisson);
        assert_eq!(gen_case1(&d, 3).unwrap(), gen_case1(&d, 3).unwrap());
        assert_ne!(gen_case1(&d, 3).unwrap(), gen_case1(&d, 4).unwrap());
        let d = SimDesign::aipw(40);
        let a = gen_aipw(&d, 1).unwrap();
        let b = gen_aipw(&d, 1).unwrap();
        assert_eq!(a.obs_mask(), b.obs_mask());
    }

    #[test]
    fn wrong_case_is_rejected() {
        let d = SimDesign::case3(20);
        assert!(gen_case1(&d, 0).is_err());
    }
}
