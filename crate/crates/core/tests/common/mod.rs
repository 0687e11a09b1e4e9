#![allow(dead_code)]

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

/// Random score matrix with `0` strictly inside the convex hull of its rows,
/// built around known positive weights `w` with `sum_i w_i g_i = 0`.
pub struct HullInstance {
    pub rows: DMatrix<f64>,
    pub interior: DVector<f64>,
}

pub fn hull_instance(rng: &mut ChaCha8Rng) -> HullInstance {
    let l: usize = rng.random_range(1..=2);
    let n: usize = rng.random_range(l + 1..=6);
    let raw: Vec<f64> = (0..n).map(|_| rng.random_range(0.05..1.0)).collect();
    let total: f64 = raw.iter().sum();
    let w = DVector::from_iterator(n, raw.iter().map(|v| v / total));
    let scale: f64 = rng.random_range(0.2..3.0);
    let mut rows = DMatrix::from_fn(n, l, |_, _| scale * rng.sample::<f64, _>(StandardNormal));
    for c in 0..l {
        let partial: f64 = (0..n - 1).map(|i| w[i] * rows[(i, c)]).sum();
        rows[(n - 1, c)] = -partial / w[n - 1];
    }
    HullInstance { rows, interior: w }
}

/// Maximizer of `sum_i log p_i` subject to `sum p = 1`, `sum p_i g_i = 0`,
/// by equality-constrained Newton steps on the weights, started from a
/// strictly feasible point.
pub fn primal_optimum(rows: &DMatrix<f64>, start: &DVector<f64>) -> DVector<f64> {
    let n = rows.nrows();
    let l = rows.ncols();
    let m = 1 + l;
    let mut p = start.clone();
    let objective = |p: &DVector<f64>| -> f64 { p.iter().map(|v| -v.ln()).sum() };
    for _ in 0..200 {
        let mut kkt = DMatrix::zeros(n + m, n + m);
        let mut rhs = DVector::zeros(n + m);
        for i in 0..n {
            kkt[(i, i)] = 1.0 / (p[i] * p[i]);
            rhs[i] = 1.0 / p[i];
            kkt[(i, n)] = 1.0;
            kkt[(n, i)] = 1.0;
            for c in 0..l {
                kkt[(i, n + 1 + c)] = rows[(i, c)];
                kkt[(n + 1 + c, i)] = rows[(i, c)];
            }
        }
        let sol = kkt.lu().solve(&rhs).expect("KKT system is nonsingular");
        let step = sol.rows(0, n).into_owned();
        let decrement: f64 = (0..n).map(|i| step[i] * step[i] / (p[i] * p[i])).sum();
        if decrement < 1e-24 {
            break;
        }
        let mut t = 1.0;
        let f0 = objective(&p);
        loop {
            let cand = &p + t * &step;
            if cand.iter().all(|v| *v > 0.0) && objective(&cand) <= f0 - 0.25 * t * decrement {
                p = cand;
                break;
            }
            t *= 0.5;
            if t < 1e-20 {
                return p;
            }
        }
    }
    p
}

/// `-sum_i log(n p_i)`.
pub fn primal_log_el(p: &DVector<f64>) -> f64 {
    let n = p.len() as f64;
    -p.iter().map(|v| (n * v).ln()).sum::<f64>()
}
