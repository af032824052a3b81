use log::warn;
use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Tensor;

/// Columns whose standard deviation falls below this are only centred.
const MIN_SCALE: f64 = 1e-12;

/// Per-column mean and population standard deviation fitted on training rows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub scale: Vec<f64>,
}

impl Standardizer {
    /// Fits on the rows of `x`; NaN cells are ignored.
    pub fn fit(x: &Tensor<f64>) -> Result<Self> {
        if x.ndim() != 2 {
            return Err(Error::dimension("standardize_fit", x.shape(), &[2]));
        }
        let (n, d) = (x.rows(), x.cols());
        let mut mean = vec![0.0; d];
        let mut scale = vec![0.0; d];
        for j in 0..d {
            let col: Vec<f64> = (0..n).map(|i| x.at(i, j)).filter(|v| !v.is_nan()).collect();
            if col.is_empty() {
                scale[j] = 1.0;
                continue;
            }
            let m = col.iter().sum::<f64>() / col.len() as f64;
            let var = col.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / col.len() as f64;
            mean[j] = m;
            let sd = var.sqrt();
            scale[j] = if sd < MIN_SCALE { 1.0 } else { sd };
        }
        Ok(Standardizer { mean, scale })
    }

    /// `(x − mean) / scale` per column with the fitted statistics. NaN stays NaN.
    pub fn apply(&self, x: &Tensor<f64>) -> Result<Tensor<f64>> {
        if x.ndim() != 2 || x.cols() != self.mean.len() {
            return Err(Error::dimension("standardize_apply", x.shape(), &[self.mean.len()]));
        }
        let d = self.mean.len();
        let data = x
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| (v - self.mean[i % d]) / self.scale[i % d])
            .collect();
        Tensor::new(x.shape(), data)
    }
}

/// Principal components of a training matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PcaModel {
    pub mean: Vec<f64>,
    /// `[d, k]`, orthonormal columns ordered by decreasing explained variance.
    pub components: Tensor<f64>,
    pub explained_variance: Vec<f64>,
}

impl PcaModel {
    /// Top-`k` right singular vectors of the centred matrix. `k` above
    /// `min(n, d)` is clamped with a warning. Each component is signed so that
    /// its largest-magnitude entry is positive.
    pub fn fit(x: &Tensor<f64>, k: usize) -> Result<Self> {
        if x.ndim() != 2 || x.rows() == 0 || x.cols() == 0 {
            return Err(Error::dimension("pca_fit", x.shape(), &[2]));
        }
        if !x.is_finite() {
            return Err(Error::Numeric("PCA input contains non-finite values".into()));
        }
        let (n, d) = (x.rows(), x.cols());
        let k_max = n.min(d);
        let k = if k > k_max {
            warn!("PCA: requested {k} components but only {k_max} are available; clamping");
            k_max
        } else {
            k
        };
        let mean: Vec<f64> = (0..d)
            .map(|j| (0..n).map(|i| x.at(i, j)).sum::<f64>() / n as f64)
            .collect();
        let centred = DMatrix::from_fn(n, d, |i, j| x.at(i, j) - mean[j]);
        let frob = centred.norm();
        let svd = nalgebra::linalg::SVD::try_new(centred, false, true, 1e-14, 10_000).ok_or_else(|| {
            Error::Numeric(format!(
                "SVD did not converge on a {n}x{d} matrix (Frobenius norm {frob:.3e})"
            ))
        })?;
        let v_t = svd.v_t.expect("requested V");
        let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
        order.sort_by(|&a, &b| svd.singular_values[b].total_cmp(&svd.singular_values[a]));
        let mut comp = vec![0.0; d * k];
        let mut explained_variance = Vec::with_capacity(k);
        for (col, &r) in order.iter().take(k).enumerate() {
            let row: Vec<f64> = (0..d).map(|j| v_t[(r, j)]).collect();
            let pivot = row.iter().copied().fold(0.0f64, |a, v| if v.abs() > a.abs() { v } else { a });
            let sign = if pivot < 0.0 { -1.0 } else { 1.0 };
            for j in 0..d {
                comp[j * k + col] = sign * row[j];
            }
            let s = svd.singular_values[r];
            explained_variance.push(s * s / n as f64);
        }
        Ok(PcaModel {
            mean,
            components: Tensor::new(&[d, k], comp)?,
            explained_variance,
        })
    }

    pub fn n_components(&self) -> usize {
        self.components.cols()
    }

    /// Scores `(x − mean) · components`.
    pub fn transform(&self, x: &Tensor<f64>) -> Result<Tensor<f64>> {
        let d = self.mean.len();
        if x.ndim() != 2 || x.cols() != d {
            return Err(Error::dimension("pca_transform", x.shape(), &[d]));
        }
        let centred = Tensor::new(
            x.shape(),
            x.data().iter().enumerate().map(|(i, &v)| v - self.mean[i % d]).collect(),
        )?;
        centred.matmul(&self.components)
    }

    /// Maps scores back to the input space.
    pub fn inverse_transform(&self, scores: &Tensor<f64>) -> Result<Tensor<f64>> {
        let back = scores.matmul(&self.components.transpose()?)?;
        let d = self.mean.len();
        Tensor::new(
            back.shape(),
            back.data().iter().enumerate().map(|(i, &v)| v + self.mean[i % d]).collect(),
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn standardize_closed_form() {
        let x = Tensor::from_rows(&[vec![1.0, 5.0], vec![2.0, 5.0], vec![3.0, 5.0]]).unwrap();
        let s = Standardizer::fit(&x).unwrap();
        assert_eq!(s.mean, vec![2.0, 5.0]);
        let out = s.apply(&x).unwrap();
        let expect = [-1.2247, 0.0, 1.2247];
        for i in 0..3 {
            assert!((out.at(i, 0) - expect[i]).abs() < 1e-4);
            assert_eq!(out.at(i, 1), 0.0);
        }
    }

    #[test]
    fn pca_on_a_line() {
        let x = Tensor::from_rows(&[vec![-2.0, -2.0], vec![-1.0, -1.0], vec![0.5, 0.5], vec![2.5, 2.5]]).unwrap();
        let p = PcaModel::fit(&x, 2).unwrap();
        let h = 0.5f64.sqrt();
        assert!((p.components.at(0, 0) - h).abs() < 1e-12);
        assert!((p.components.at(1, 0) - h).abs() < 1e-12);
        assert!(p.explained_variance[1].abs() < 1e-12);
    }

    #[test]
    fn k_is_clamped() {
        let x = Tensor::from_fn(&[3, 5], |i| ((i * 7) % 5) as f64 + (i as f64).sin());
        let p = PcaModel::fit(&x, 10).unwrap();
        assert_eq!(p.n_components(), 3);
    }
}
