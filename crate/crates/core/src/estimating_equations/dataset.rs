use nalgebra::{DMatrix, DVector};

use crate::error::{ElcicError, Result};

/// Balanced panel of `n` independent units observed at `T` occasions.
///
/// Covariates are stored per unit as a `T x L` block whose first column is the
/// intercept. `obs_mask` marks observed responses; unobserved responses may
/// hold any value (generators store NaN) and are never read by the fitting
/// code.
#[derive(Debug, Clone, PartialEq)]
pub struct PanelDataset {
    y: DMatrix<f64>,
    x: Vec<DMatrix<f64>>,
    obs_mask: Vec<bool>,
    aux: Option<DMatrix<f64>>,
    covariate_names: Vec<String>,
    aux_names: Vec<String>,
}

impl PanelDataset {
    /// Validates and assembles a panel. `covariate_names[0]` names the
    /// intercept column.
    pub fn new(
        y: DMatrix<f64>,
        x: Vec<DMatrix<f64>>,
        obs_mask: Vec<bool>,
        aux: Option<DMatrix<f64>>,
        covariate_names: Vec<String>,
    ) -> Result<Self> {
        let n = y.nrows();
        let t = y.ncols();
        let invalid = |msg: String| Err(ElcicError::InvalidInput(msg));
        if n == 0 || t == 0 {
            return invalid("panel must have at least one unit and one occasion".into());
        }
        if x.len() != n {
            return invalid(format!("design has {} units but response has {n}", x.len()));
        }
        if obs_mask.len() != n * t {
            return invalid(format!("observation mask has {} cells, expected {}", obs_mask.len(), n * t));
        }
        let l = covariate_names.len();
        if l == 0 {
            return invalid("at least the intercept column is required".into());
        }
        for (i, xi) in x.iter().enumerate() {
            if xi.nrows() != t || xi.ncols() != l {
                return invalid(format!(
                    "unit {i} design is {}x{}, expected {t}x{l}",
                    xi.nrows(),
                    xi.ncols()
                ));
            }
            for j in 0..t {
                if !obs_mask[i * t + j] {
                    continue;
                }
                if xi[(j, 0)] != 1.0 {
                    return invalid(format!("intercept column is not 1 at unit {i}, occasion {j}"));
                }
                if !y[(i, j)].is_finite() {
                    return invalid(format!("observed response at unit {i}, occasion {j} is not finite"));
                }
                if xi.row(j).iter().any(|v| !v.is_finite()) {
                    return invalid(format!("observed covariates at unit {i}, occasion {j} are not finite"));
                }
            }
        }
        let aux_names = match &aux {
            Some(a) => {
                if a.nrows() != n {
                    return invalid(format!("auxiliary block has {} rows, expected {n}", a.nrows()));
                }
                (1..=a.ncols()).map(|k| format!("s{k}")).collect()
            }
            None => Vec::new(),
        };
        Ok(Self {
            y,
            x,
            obs_mask,
            aux,
            covariate_names,
            aux_names,
        })
    }

    /// Fully observed cross-sectional data (`T = 1`) from an `n x L` design.
    pub fn cross_sectional(y: DVector<f64>, design: DMatrix<f64>, covariate_names: Vec<String>) -> Result<Self> {
        let n = y.len();
        if design.nrows() != n {
            return Err(ElcicError::InvalidInput(format!(
                "design has {} rows, response has {n}",
                design.nrows()
            )));
        }
        let x = (0..n).map(|i| design.rows(i, 1).into_owned()).collect();
        Self::new(
            DMatrix::from_column_slice(n, 1, y.as_slice()),
            x,
            vec![true; n],
            None,
            covariate_names,
        )
    }

    pub fn with_aux_names(mut self, names: Vec<String>) -> Result<Self> {
        let cols = self.aux.as_ref().map_or(0, |a| a.ncols());
        if names.len() != cols {
            return Err(ElcicError::InvalidInput(format!(
                "{} auxiliary names for {cols} auxiliary columns",
                names.len()
            )));
        }
        self.aux_names = names;
        Ok(self)
    }

    pub fn n(&self) -> usize {
        self.y.nrows()
    }

    pub fn n_times(&self) -> usize {
        self.y.ncols()
    }

    /// Number of columns in the full design, including the intercept.
    pub fn n_covariates(&self) -> usize {
        self.covariate_names.len()
    }

    pub fn covariate_names(&self) -> &[String] {
        &self.covariate_names
    }

    pub fn aux_names(&self) -> &[String] {
        &self.aux_names
    }

    pub fn y(&self, i: usize, j: usize) -> f64 {
        self.y[(i, j)]
    }

    pub fn responses(&self) -> &DMatrix<f64> {
        &self.y
    }

    pub fn unit_design(&self, i: usize) -> &DMatrix<f64> {
        &self.x[i]
    }

    pub fn observed(&self, i: usize, j: usize) -> bool {
        self.obs_mask[i * self.n_times() + j]
    }

    pub fn observed_times(&self, i: usize) -> Vec<usize> {
        (0..self.n_times()).filter(|&j| self.observed(i, j)).collect()
    }

    pub fn obs_mask(&self) -> &[bool] {
        &self.obs_mask
    }

    pub fn n_observed(&self) -> usize {
        self.obs_mask.iter().filter(|&&o| o).count()
    }

    pub fn aux(&self) -> Option<&DMatrix<f64>> {
        self.aux.as_ref()
    }

    /// Panel restricted to the listed units, in the given order.
    pub fn subset(&self, units: &[usize]) -> Result<Self> {
        let t = self.n_times();
        let y = DMatrix::from_fn(units.len(), t, |r, j| self.y[(units[r], j)]);
        let x = units.iter().map(|&i| self.x[i].clone()).collect();
        let obs = units
            .iter()
            .flat_map(|&i| (0..t).map(move |j| (i, j)))
            .map(|(i, j)| self.observed(i, j))
            .collect();
        let aux = self
            .aux
            .as_ref()
            .map(|a| DMatrix::from_fn(units.len(), a.ncols(), |r, c| a[(units[r], c)]));
        let mut out = Self::new(y, x, obs, aux, self.covariate_names.clone())?;
        out.aux_names = self.aux_names.clone();
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn names(k: usize) -> Vec<String> {
        std::iter::once("intercept".to_string())
            .chain((1..k).map(|j| format!("x{j}")))
            .collect()
    }

    #[test]
    fn rejects_non_unit_intercept() {
        let design = DMatrix::from_row_slice(2, 2, &[1.0, 0.5, 2.0, 0.1]);
        let err = PanelDataset::cross_sectional(DVector::from_vec(vec![1.0, 2.0]), design, names(2));
        assert!(err.is_err());
    }

    #[test]
    fn rejects_nan_in_observed_cell_only() {
        let y = DMatrix::from_row_slice(1, 2, &[1.0, f64::NAN]);
        let x = vec![DMatrix::from_row_slice(2, 1, &[1.0, 1.0])];
        assert!(PanelDataset::new(y.clone(), x.clone(), vec![true, true], None, names(1)).is_err());
        assert!(PanelDataset::new(y, x, vec![true, false], None, names(1)).is_ok());
    }

    #[test]
    fn subset_keeps_order() {
        let design = DMatrix::from_row_slice(3, 2, &[1.0, 0.0, 1.0, 1.0, 1.0, 2.0]);
        let d = PanelDataset::cross_sectional(DVector::from_vec(vec![5.0, 6.0, 7.0]), design, names(2)).unwrap();
        let s = d.subset(&[2, 0]).unwrap();
        assert_eq!(s.n(), 2);
        assert_eq!(s.y(0, 0), 7.0);
        assert_eq!(s.unit_design(1)[(0, 1)], 0.0);
    }
}
