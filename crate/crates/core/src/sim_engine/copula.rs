//! Gaussian copula with Poisson margins and pairwise calibrated latent
//! correlation.

use std::collections::HashMap;
use std::f64::consts::PI;
use std::sync::{Arc, Mutex, OnceLock};

use nalgebra::DMatrix;
use rayon::prelude::*;
use statrs::distribution::{ContinuousCDF, Normal};
use statrs::function::erf::erfc;

use crate::error::{ElcicError, Result};

/// Standard normal CDF.
pub fn norm_cdf(x: f64) -> f64 {
    0.5 * erfc(-x / std::f64::consts::SQRT_2)
}

fn norm_quantile(p: f64) -> f64 {
    Normal::standard().inverse_cdf(p)
}

// Gauss-Legendre half-nodes (negative abscissae) and weights for 6, 12 and
// 20 points.
const GL_W: [&[f64]; 3] = [
    &[0.1713244923791705, 0.3607615730481384, 0.4679139345726904],
    &[
        0.04717533638651177,
        0.1069393259953183,
        0.1600783285433464,
        0.2031674267230659,
        0.2334925365383547,
        0.2491470458134029,
    ],
    &[
        0.01761400713915212,
        0.04060142980038694,
        0.06267204833410906,
        0.08327674157670475,
        0.1019301198172404,
        0.1181945319615184,
        0.1316886384491766,
        0.1420961093183821,
        0.1491729864726037,
        0.1527533871307259,
    ],
];
const GL_X: [&[f64]; 3] = [
    &[-0.9324695142031522, -0.6612093864662647, -0.2386191860831970],
    &[
        -0.9815606342467191,
        -0.9041172563704750,
        -0.7699026741943050,
        -0.5873179542866171,
        -0.3678314989981802,
        -0.1252334085114692,
    ],
    &[
        -0.9931285991850949,
        -0.9639719272779138,
        -0.9122344282513259,
        -0.8391169718222188,
        -0.7463319064601508,
        -0.6360536807265150,
        -0.5108670019508271,
        -0.3737060887154196,
        -0.2277858511416451,
        -0.07652652113349733,
    ],
];

/// Upper bivariate normal probability `P(X > h, Y > k)` for standard margins
/// with correlation `r` (Drezner-Wesolowsky / Genz).
pub fn bvn_upper(h: f64, k: f64, r: f64) -> f64 {
    if h == f64::INFINITY || k == f64::INFINITY {
        return 0.0;
    }
    if h == f64::NEG_INFINITY {
        return if k == f64::NEG_INFINITY { 1.0 } else { norm_cdf(-k) };
    }
    if k == f64::NEG_INFINITY {
        return norm_cdf(-h);
    }
    if r == 0.0 {
        return norm_cdf(-h) * norm_cdf(-k);
    }
    let two_pi = 2.0 * PI;
    let ng = if r.abs() < 0.3 {
        0
    } else if r.abs() < 0.75 {
        1
    } else {
        2
    };
    let (w, x) = (GL_W[ng], GL_X[ng]);
    let mut hk = h * k;
    let mut bvn = 0.0;
    if r.abs() < 0.925 {
        let hs = (h * h + k * k) / 2.0;
        let asr = r.asin();
        for (wi, xi) in w.iter().zip(x) {
            for s in [xi + 1.0, 1.0 - xi] {
                let sn = (asr * s / 2.0).sin();
                bvn += wi * ((sn * hk - hs) / (1.0 - sn * sn)).exp();
            }
        }
        bvn = bvn * asr / (2.0 * two_pi) + norm_cdf(-h) * norm_cdf(-k);
    } else {
        let mut k = k;
        if r < 0.0 {
            k = -k;
            hk = -hk;
        }
        if r.abs() < 1.0 {
            let a_s = (1.0 - r) * (1.0 + r);
            let mut a = a_s.sqrt();
            let bs = (h - k).powi(2);
            let c = (4.0 - hk) / 8.0;
            let d = (12.0 - hk) / 16.0;
            bvn = a
                * (-(bs / a_s + hk) / 2.0).exp()
                * (1.0 - c * (bs - a_s) * (1.0 - d * bs / 5.0) / 3.0 + c * d * a_s * a_s / 5.0);
            if hk > -160.0 {
                let b = bs.sqrt();
                bvn -= (-hk / 2.0).exp()
                    * two_pi.sqrt()
                    * norm_cdf(-b / a)
                    * b
                    * (1.0 - c * bs * (1.0 - d * bs / 5.0) / 3.0);
            }
            a /= 2.0;
            for (wi, xi) in w.iter().zip(x) {
                let xs = (a * (xi + 1.0)).powi(2);
                let rs = (1.0 - xs).sqrt();
                bvn += a
                    * wi
                    * ((-bs / (2.0 * xs) - hk / (1.0 + rs)).exp() / rs
                        - (-(bs / xs + hk) / 2.0).exp() * (1.0 + c * xs * (1.0 + d * xs)));
                let xs = a_s * (1.0 - xi).powi(2) / 4.0;
                let rs = (1.0 - xs).sqrt();
                bvn += a
                    * wi
                    * (-(bs / xs + hk) / 2.0).exp()
                    * ((-hk * xs / (2.0 * (1.0 + rs).powi(2))).exp() / rs - (1.0 + c * xs * (1.0 + d * xs)));
            }
            bvn = -bvn / two_pi;
        }
        if r > 0.0 {
            bvn += norm_cdf(-h.max(k));
        } else {
            bvn = -bvn + (norm_cdf(-h) - norm_cdf(-k)).max(0.0);
        }
    }
    bvn.clamp(0.0, 1.0)
}

const TAIL: f64 = 1e-13;

/// Latent thresholds `z_k` with `P(Y >= k) = P(Z > z_k)`, `k = 1, 2, ...`,
/// truncated where the Poisson tail becomes negligible.
fn thresholds(mu: f64) -> Vec<f64> {
    let mut out = Vec::new();
    let mut pmf = (-mu).exp();
    let mut cdf = pmf;
    let mut k = 0.0;
    loop {
        let tail = 1.0 - cdf;
        if tail < TAIL {
            break;
        }
        out.push(-norm_quantile(tail));
        k += 1.0;
        pmf *= mu / k;
        cdf += pmf;
    }
    out
}

/// Pearson correlation of two Poisson counts coupled by a latent normal
/// pair with correlation `r`, from `E[Y_a Y_b] = sum_k sum_l P(Y_a >= k, Y_b >= l)`.
pub fn count_correlation(mu_a: f64, mu_b: f64, r: f64) -> f64 {
    pair_correlation(&thresholds(mu_a), &thresholds(mu_b), mu_a, mu_b, r)
}

fn pair_correlation(za: &[f64], zb: &[f64], mu_a: f64, mu_b: f64, r: f64) -> f64 {
    let mut cross = 0.0;
    for &a in za {
        for &b in zb {
            cross += bvn_upper(a, b, r);
        }
    }
    (cross - mu_a * mu_b) / (mu_a * mu_b).sqrt()
}

/// Latent correlation giving Pearson correlation `target` between
/// Poisson(`mu_a`) and Poisson(`mu_b`) counts, by bisection.
pub fn calibrate_pair(mu_a: f64, mu_b: f64, target: f64) -> Result<f64> {
    if target == 0.0 {
        return Ok(0.0);
    }
    let za = thresholds(mu_a);
    let zb = thresholds(mu_b);
    let f = |r: f64| pair_correlation(&za, &zb, mu_a, mu_b, r) - target;
    let (mut lo, mut hi) = if target > 0.0 { (0.0, 0.9999) } else { (-0.9999, 0.0) };
    let (f_lo, f_hi) = (f(lo), f(hi));
    if f_lo > 0.0 || f_hi < 0.0 {
        return Err(ElcicError::CalibrationFailed(format!(
            "correlation {target} unattainable for Poisson means {mu_a:.4} and {mu_b:.4}"
        )));
    }
    for _ in 0..40 {
        let mid = 0.5 * (lo + hi);
        let v = f(mid);
        if v.abs() < 1e-9 {
            return Ok(mid);
        }
        if v < 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let mid = 0.5 * (lo + hi);
    if f(mid).abs() < 1e-6 {
        Ok(mid)
    } else {
        Err(ElcicError::CalibrationFailed(format!(
            "bisection for means {mu_a:.4}, {mu_b:.4} did not reach tolerance"
        )))
    }
}

/// Latent correlation matrix whose Poisson(`mus`) margins have pairwise
/// Pearson correlation `target`.
pub fn calibrate_matrix(mus: &[f64], target: f64) -> Result<DMatrix<f64>> {
    let t = mus.len();
    let mut m = DMatrix::identity(t, t);
    for a in 0..t {
        for b in (a + 1)..t {
            let r = calibrate_pair(mus[a], mus[b], target)?;
            m[(a, b)] = r;
            m[(b, a)] = r;
        }
    }
    Ok(m)
}

/// Pairwise latent correlations tabulated on a grid of a scalar index that
/// determines the whole mean pattern.
#[derive(Debug)]
pub struct CopulaTable {
    lo: f64,
    hi: f64,
    nodes: Vec<DMatrix<f64>>,
}

impl CopulaTable {
    /// Tabulates `calibrate_matrix(means(s), target)` at `size` equispaced
    /// nodes on `[lo, hi]`.
    pub fn build(lo: f64, hi: f64, size: usize, target: f64, means: impl Fn(f64) -> Vec<f64> + Sync) -> Result<Self> {
        let nodes = (0..size)
            .into_par_iter()
            .map(|k| {
                let s = lo + (hi - lo) * k as f64 / (size - 1) as f64;
                calibrate_matrix(&means(s), target)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { lo, hi, nodes })
    }

    /// Linear interpolation between the two nearest nodes.
    pub fn latent(&self, s: f64) -> DMatrix<f64> {
        let size = self.nodes.len();
        let pos = ((s - self.lo) / (self.hi - self.lo)).clamp(0.0, 1.0) * (size - 1) as f64;
        let k = (pos.floor() as usize).min(size - 2);
        let frac = pos - k as f64;
        &self.nodes[k] * (1.0 - frac) + &self.nodes[k + 1] * frac
    }
}

type TableKey = (usize, [u64; 4]);

/// Cached table for the longitudinal count design, keyed by the panel
/// length and the mean coefficients.
pub(crate) fn case2_table(t: usize, beta: [f64; 3], target: f64) -> Result<Arc<CopulaTable>> {
    static CACHE: OnceLock<Mutex<HashMap<TableKey, Arc<CopulaTable>>>> = OnceLock::new();
    let key = (t, [beta[0].to_bits(), beta[1].to_bits(), beta[2].to_bits(), target.to_bits()]);
    let cache = CACHE.get_or_init(|| Mutex::new(HashMap::new()));
    if let Some(table) = cache.lock().map_err(|_| poisoned())?.get(&key) {
        return Ok(table.clone());
    }
    let means = |x1: f64| -> Vec<f64> { (0..t).map(|j| (beta[0] + beta[1] * x1 + beta[2] * j as f64).exp()).collect() };
    let table = Arc::new(CopulaTable::build(0.0, 1.0, 101, target, means)?);
    let mut guard = cache.lock().map_err(|_| poisoned())?;
    Ok(guard.entry(key).or_insert(table).clone())
}

fn poisoned() -> ElcicError {
    ElcicError::CalibrationFailed("copula cache lock poisoned".into())
}

/// Smallest `y` with `P(Y <= y) >= u` for `Y ~ Poisson(mu)`.
pub fn poisson_quantile(u: f64, mu: f64) -> f64 {
    let mut k = 0.0;
    let mut pmf = (-mu).exp();
    let mut cdf = pmf;
    let cap = mu + 40.0 * mu.sqrt() + 40.0;
    while cdf < u && k < cap {
        k += 1.0;
        pmf *= mu / k;
        cdf += pmf;
    }
    k
}
