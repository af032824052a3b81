use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Rng, Tensor};

/// Two-stage missingness: a row is incomplete with probability `p_incomplete`,
/// and each feature of an incomplete row is missing with probability `p_missing`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MissingnessConfig {
    pub p_incomplete: f64,
    pub p_missing: f64,
}

impl MissingnessConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, p) in [("p_incomplete", self.p_incomplete), ("p_missing", self.p_missing)] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Config(format!("{name} must be in [0, 1], got {p}")));
            }
        }
        Ok(())
    }
}

/// Output of [`synthesize_missing`].
#[derive(Debug, Clone)]
pub struct SyntheticMissing {
    /// Input with masked cells set to NaN.
    pub x: Tensor<f64>,
    /// Row-major, `true` = missing.
    pub mask: Vec<bool>,
    /// Untouched input, kept for auditing.
    pub original: Tensor<f64>,
}

/// Draws a missingness mask from the `mask` stream of `seed`.
pub fn synthesize_missing(x: &Tensor<f64>, cfg: &MissingnessConfig, seed: u64) -> Result<SyntheticMissing> {
    cfg.validate()?;
    if x.ndim() != 2 {
        return Err(Error::dimension("synthesize_missing", x.shape(), &[2]));
    }
    let (n, m) = (x.rows(), x.cols());
    let mut rng = Rng::new(seed, "mask");
    let mut mask = vec![false; n * m];
    for i in 0..n {
        if rng.bernoulli(cfg.p_incomplete) {
            for j in 0..m {
                mask[i * m + j] = rng.bernoulli(cfg.p_missing);
            }
        }
    }
    let mut out = x.clone();
    for (v, &missing) in out.data_mut().iter_mut().zip(&mask) {
        if missing {
            *v = f64::NAN;
        }
    }
    Ok(SyntheticMissing {
        x: out,
        mask,
        original: x.clone(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ImputeStrategy {
    /// Training mean of the feature.
    Mean,
    /// Training minimum of the feature.
    Minimum,
    /// Leave the cell for the model, which substitutes its learned mask token.
    MaskTokenPassthrough,
}

impl std::str::FromStr for ImputeStrategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mean" => Ok(ImputeStrategy::Mean),
            "minimum" => Ok(ImputeStrategy::Minimum),
            "mask_token_passthrough" => Ok(ImputeStrategy::MaskTokenPassthrough),
            other => Err(Error::Config(format!("unknown imputation strategy {other:?}"))),
        }
    }
}

/// Per-feature statistics of the training rows used for imputation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainStats {
    pub mean: Vec<f64>,
    pub min: Vec<f64>,
}

impl TrainStats {
    pub fn fit(x_train: &Tensor<f64>) -> Self {
        let (n, d) = (x_train.rows(), x_train.cols());
        let mut mean = vec![0.0; d];
        let mut min = vec![0.0; d];
        for j in 0..d {
            let col: Vec<f64> = (0..n).map(|i| x_train.at(i, j)).filter(|v| !v.is_nan()).collect();
            if !col.is_empty() {
                mean[j] = col.iter().sum::<f64>() / col.len() as f64;
                min[j] = col.iter().copied().fold(f64::INFINITY, f64::min);
            }
        }
        TrainStats { mean, min }
    }
}

/// Fills masked cells. With [`ImputeStrategy::MaskTokenPassthrough`] masked
/// cells become 0 so arithmetic stays finite; the model replaces their tokens.
pub fn impute(x: &Tensor<f64>, mask: &[bool], strategy: ImputeStrategy, stats: &TrainStats) -> Result<Tensor<f64>> {
    if mask.len() != x.numel() || x.ndim() != 2 || stats.mean.len() != x.cols() {
        return Err(Error::dimension("impute", x.shape(), &[mask.len()]));
    }
    let d = x.cols();
    let mut out = x.clone();
    for (i, (v, &missing)) in out.data_mut().iter_mut().zip(mask).enumerate() {
        if missing {
            *v = match strategy {
                ImputeStrategy::Mean => stats.mean[i % d],
                ImputeStrategy::Minimum => stats.min[i % d],
                ImputeStrategy::MaskTokenPassthrough => 0.0,
            };
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn extremes() {
        let x = Tensor::from_fn(&[20, 5], |i| i as f64);
        let none = synthesize_missing(&x, &MissingnessConfig { p_incomplete: 0.0, p_missing: 1.0 }, 1).unwrap();
        assert!(none.mask.iter().all(|&m| !m));
        let all = synthesize_missing(&x, &MissingnessConfig { p_incomplete: 1.0, p_missing: 1.0 }, 1).unwrap();
        assert!(all.mask.iter().all(|&m| m));
        assert_eq!(all.original, x);
    }

    #[test]
    fn reproducible() {
        let x = Tensor::zeros(&[50, 8]);
        let cfg = MissingnessConfig { p_incomplete: 0.5, p_missing: 0.5 };
        let a = synthesize_missing(&x, &cfg, 3).unwrap();
        let b = synthesize_missing(&x, &cfg, 3).unwrap();
        assert_eq!(a.mask, b.mask);
    }

    #[test]
    fn imputation_values() {
        let train = Tensor::from_rows(&[vec![1.0], vec![2.0], vec![3.0]]).unwrap();
        let stats = TrainStats::fit(&train);
        let x = Tensor::from_rows(&[vec![f64::NAN], vec![7.0]]).unwrap();
        let mask = [true, false];
        assert_eq!(impute(&x, &mask, ImputeStrategy::Mean, &stats).unwrap().data(), &[2.0, 7.0]);
        assert_eq!(impute(&x, &mask, ImputeStrategy::Minimum, &stats).unwrap().data(), &[1.0, 7.0]);
        let clean = Tensor::from_rows(&[vec![4.0], vec![5.0]]).unwrap();
        for s in [ImputeStrategy::Mean, ImputeStrategy::Minimum, ImputeStrategy::MaskTokenPassthrough] {
            assert_eq!(impute(&clean, &[false, false], s, &stats).unwrap(), clean);
        }
        assert!("median".parse::<ImputeStrategy>().is_err());
    }
}
