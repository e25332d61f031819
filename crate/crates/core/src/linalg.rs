//! Weighted least squares over joint features, solved through the normal
//! equations with a small ridge term.

use nalgebra::{DMatrix, DVector};

use crate::error::{config, Result};
use crate::model::{Context, FeatureMap, FeatureMode};

/// Ridge damping added to the normal equations.
pub const RIDGE: f64 = 1e-8;

/// Accumulates `XᵀWX` and `XᵀWy` for rows `f(x, a)`.
#[derive(Debug, Clone)]
pub struct NormalEquations {
    dim: usize,
    xtx: Vec<f64>,
    xty: Vec<f64>,
}

impl NormalEquations {
    pub fn new(dim: usize) -> Self {
        Self {
            dim,
            xtx: vec![0.0; dim * dim],
            xty: vec![0.0; dim],
        }
    }

    pub fn add(&mut self, fm: &FeatureMap, ctx: &Context, action: usize, target: f64, weight: f64) {
        let d = self.dim;
        match (fm.mode, ctx) {
            (FeatureMode::TabularIndicator { .. }, Context::Id(id)) => {
                let i = id * fm.actions + action;
                self.xtx[i * d + i] += weight;
                self.xty[i] += weight * target;
            }
            (FeatureMode::Dense { dim }, Context::Dense(x)) => {
                let off = action * dim;
                for (i, xi) in x.iter().enumerate() {
                    self.xty[off + i] += weight * target * xi;
                    for (j, xj) in x.iter().enumerate() {
                        self.xtx[(off + i) * d + off + j] += weight * xi * xj;
                    }
                }
            }
            _ => {}
        }
    }

    pub fn solve(&self, ridge: f64) -> Result<Vec<f64>> {
        let d = self.dim;
        let mut a = DMatrix::from_row_slice(d, d, &self.xtx);
        for i in 0..d {
            a[(i, i)] += ridge;
        }
        let b = DVector::from_column_slice(&self.xty);
        let sol = match a.clone().cholesky() {
            Some(ch) => ch.solve(&b),
            None => a
                .lu()
                .solve(&b)
                .ok_or_else(|| config("singular least-squares system"))?,
        };
        Ok(sol.iter().copied().collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tabular_least_squares_is_per_cell_mean() {
        let fm = FeatureMap::context_free(2).unwrap();
        let mut ne = NormalEquations::new(fm.dim());
        for (a, r) in [(0, 1.0), (0, 3.0), (1, 5.0)] {
            ne.add(&fm, &Context::Id(0), a, r, 1.0);
        }
        let beta = ne.solve(RIDGE).unwrap();
        assert!((beta[0] - 2.0).abs() < 1e-7);
        assert!((beta[1] - 5.0).abs() < 1e-7);
    }

    #[test]
    fn dense_regression_recovers_weights() {
        let fm = FeatureMap::dense(2, 2).unwrap();
        let truth = [1.0, -2.0, 0.5, 3.0];
        let mut ne = NormalEquations::new(fm.dim());
        for i in 0..20 {
            let x = Context::Dense(vec![(i as f64).sin(), (i as f64 * 0.7).cos()]);
            for a in 0..2 {
                let y = fm.dot(&truth, &x, a);
                ne.add(&fm, &x, a, y, 1.0);
            }
        }
        let beta = ne.solve(RIDGE).unwrap();
        for (b, t) in beta.iter().zip(truth) {
            assert!((b - t).abs() < 1e-6);
        }
    }
}
