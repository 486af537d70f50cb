//! Fixed Gaussian skip term of the base field.
//!
//! For data `x ~ N(mu, U diag(lambda) U^T)` the flow-matching optimum is linear:
//! in the eigenbasis, `E[eps - x | x_t]_i = c_i(t) y_i - mu` with
//! `y = U^T (x_t - (1 - t) mu)` and
//! `c_i(t) = (t - (1 - t) lambda_i) / (t^2 + (1 - t)^2 lambda_i)`.
//! The network learns the residual on top of this field. Directions with small
//! variance get gain close to `1 / t`, which a plain MLP struggles to learn.

use nalgebra::{DMatrix, SymmetricEigen};
use ndarray::{Array2, Axis};

use crate::error::{check_len, Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct GaussianPrior {
    pub mean: Vec<f64>,
    /// Eigenvectors as columns, ordered by decreasing variance.
    pub basis: Array2<f64>,
    pub variances: Vec<f64>,
}

impl GaussianPrior {
    /// Zero mean, identity covariance.
    pub fn standard(dim: usize) -> Self {
        Self {
            mean: vec![0.0; dim],
            basis: Array2::eye(dim),
            variances: vec![1.0; dim],
        }
    }

    /// Empirical mean and covariance of `corpus`; eigenvalues are floored at
    /// `floor` so every coefficient stays finite at `t = 0`.
    pub fn fit(corpus: &[Vec<f64>], floor: f64) -> Result<Self> {
        let first = corpus
            .first()
            .ok_or_else(|| Error::Config("empty corpus for Gaussian prior".into()))?;
        if !(floor > 0.0) {
            return Err(Error::Config(format!(
                "variance floor must be > 0, got {floor}"
            )));
        }
        let d = first.len();
        let n = corpus.len() as f64;
        let mut mean = vec![0.0; d];
        for x in corpus {
            check_len(d, x.len())?;
            for (m, v) in mean.iter_mut().zip(x) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n);
        let mut cov = DMatrix::<f64>::zeros(d, d);
        for x in corpus {
            let c = nalgebra::DVector::from_iterator(d, x.iter().zip(&mean).map(|(a, m)| a - m));
            cov.syger(1.0 / n, &c, &c, 1.0);
        }
        cov.fill_upper_triangle_with_lower_triangle();
        let eig = SymmetricEigen::new(cov);
        let mut order: Vec<usize> = (0..d).collect();
        order.sort_by(|&a, &b| {
            eig.eigenvalues[b]
                .total_cmp(&eig.eigenvalues[a])
                .then(a.cmp(&b))
        });
        let mut basis = Array2::zeros((d, d));
        let mut variances = Vec::with_capacity(d);
        for (col, &i) in order.iter().enumerate() {
            let v = eig.eigenvectors.column(i);
            // Fix the sign so the largest-magnitude entry is positive.
            let pivot = v
                .iter()
                .copied()
                .fold(0.0f64, |acc, e| if e.abs() > acc.abs() { e } else { acc });
            let sign = if pivot < 0.0 { -1.0 } else { 1.0 };
            for r in 0..d {
                basis[[r, col]] = sign * v[r];
            }
            variances.push(eig.eigenvalues[i].max(floor));
        }
        Ok(Self {
            mean,
            basis,
            variances,
        })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn coefficient(t: f64, variance: f64) -> f64 {
        (t - (1.0 - t) * variance) / (t * t + (1.0 - t) * (1.0 - t) * variance)
    }

    /// The Gaussian-optimal field for every row of `xs` at its time in `ts`.
    pub fn field_batch(&self, xs: &Array2<f64>, ts: &[f64]) -> Array2<f64> {
        let mut centred = xs.clone();
        for (mut row, &t) in centred.axis_iter_mut(Axis(0)).zip(ts) {
            row.iter_mut()
                .zip(&self.mean)
                .for_each(|(v, m)| *v -= (1.0 - t) * m);
        }
        let mut y = centred.dot(&self.basis);
        for (mut row, &t) in y.axis_iter_mut(Axis(0)).zip(ts) {
            row.iter_mut()
                .zip(&self.variances)
                .for_each(|(v, &lam)| *v *= Self::coefficient(t, lam));
        }
        let mut out = y.dot(&self.basis.t());
        for mut row in out.axis_iter_mut(Axis(0)) {
            row.iter_mut().zip(&self.mean).for_each(|(v, m)| *v -= m);
        }
        out
    }

    pub fn rounded_to_f32(&self) -> Self {
        Self {
            mean: self.mean.iter().map(|&v| v as f32 as f64).collect(),
            basis: self.basis.mapv(|v| v as f32 as f64),
            variances: self.variances.iter().map(|&v| v as f32 as f64).collect(),
        }
    }
}
