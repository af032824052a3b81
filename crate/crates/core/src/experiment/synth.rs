use serde::{Deserialize, Serialize};

use crate::data::TabularDataset;
use crate::error::{Error, Result};
use crate::numerics::{Rng, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SynthKind {
    Blobs,
    BimodalBlobs,
}

impl std::str::FromStr for SynthKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "blobs" => Ok(SynthKind::Blobs),
            "bimodal_blobs" | "bimodal-blobs" => Ok(SynthKind::BimodalBlobs),
            other => Err(Error::Config(format!("unknown synthetic kind {other:?}"))),
        }
    }
}

/// Class-conditional Gaussian data.
///
/// Each class has a mean drawn once per view from `N(0, separation²)` in the
/// first `informative` features (all features when 0). Every sample also
/// carries a latent vector of `latent_dim` standard normals mapped into each
/// view by a fixed random matrix, so views of the same sample are correlated
/// beyond their class. Independent `N(0, noise²)` noise is added per cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub kind: SynthKind,
    pub n_samples: usize,
    pub n_features: usize,
    pub n_classes: usize,
    pub noise: f64,
    pub separation: f64,
    pub informative: usize,
    pub latent_dim: usize,
    pub latent_scale: f64,
    /// Size ratio between the largest and the smallest class; 1 is balanced.
    pub imbalance: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            kind: SynthKind::Blobs,
            n_samples: 2000,
            n_features: 200,
            n_classes: 10,
            noise: 1.0,
            separation: 1.0,
            informative: 0,
            latent_dim: 0,
            latent_scale: 1.0,
            imbalance: 1.0,
            seed: 0,
        }
    }
}

/// Class sizes: geometric in the class index between 1 and `1/imbalance`,
/// rounded by largest remainder so they sum to `n`.
pub fn class_sizes(n: usize, c: usize, imbalance: f64) -> Vec<usize> {
    let w: Vec<f64> = (0..c)
        .map(|k| {
            if c == 1 {
                1.0
            } else {
                imbalance.powf(-(k as f64) / (c - 1) as f64)
            }
        })
        .collect();
    let total: f64 = w.iter().sum();
    let exact: Vec<f64> = w.iter().map(|v| v / total * n as f64).collect();
    let mut sizes: Vec<usize> = exact.iter().map(|v| v.floor() as usize).collect();
    let mut rest = n - sizes.iter().sum::<usize>();
    let mut order: Vec<usize> = (0..c).collect();
    order.sort_by(|&a, &b| (exact[b] - exact[b].floor()).total_cmp(&(exact[a] - exact[a].floor())).then(a.cmp(&b)));
    for &k in order.iter().cycle() {
        if rest == 0 {
            break;
        }
        sizes[k] += 1;
        rest -= 1;
    }
    sizes
}

fn view(cfg: &SynthConfig, y: &[usize], latent: &Tensor<f64>, rng: &mut Rng) -> Tensor<f64> {
    let (n, d, c) = (y.len(), cfg.n_features, cfg.n_classes);
    let informative = if cfg.informative == 0 { d } else { cfg.informative.min(d) };
    let means = Tensor::from_fn(&[c, d], |i| {
        if i % d < informative {
            cfg.separation * rng.normal()
        } else {
            0.0
        }
    });
    let k = latent.cols();
    let mixing = Tensor::from_fn(&[k, d], |_| cfg.latent_scale * rng.normal() / (k.max(1) as f64).sqrt());
    let mixed = if k > 0 { latent.matmul(&mixing).unwrap() } else { Tensor::zeros(&[n, d]) };
    Tensor::from_fn(&[n, d], |idx| {
        let (i, j) = (idx / d, idx % d);
        means.at(y[i], j) + mixed.at(i, j) + cfg.noise * rng.normal()
    })
}

/// One dataset for `blobs`, two (sharing sample ids and labels) for
/// `bimodal_blobs`.
pub fn make_synthetic(cfg: &SynthConfig) -> Result<Vec<TabularDataset>> {
    let (n, c) = (cfg.n_samples, cfg.n_classes);
    if c < 2 {
        return Err(Error::Config("synthetic data needs at least 2 classes".into()));
    }
    if n < 10 * c {
        return Err(Error::Config(format!("synthetic data needs n >= 10·C = {}, got {n}", 10 * c)));
    }
    if cfg.n_features == 0 || !(cfg.noise >= 0.0) || !(cfg.imbalance >= 1.0) {
        return Err(Error::Config("need n_features >= 1, noise >= 0 and imbalance >= 1".into()));
    }
    let sizes = class_sizes(n, c, cfg.imbalance);
    let mut y: Vec<usize> = sizes.iter().enumerate().flat_map(|(k, &s)| std::iter::repeat_n(k, s)).collect();
    Rng::new(cfg.seed, "synth/order").shuffle(&mut y);
    let mut latent_rng = Rng::new(cfg.seed, "synth/latent");
    let latent = Tensor::from_fn(&[n, cfg.latent_dim], |_| latent_rng.normal());
    let ids: Vec<String> = (0..n).map(|i| format!("s{i:05}")).collect();
    let class_names: Vec<String> = (0..c).map(|k| format!("class_{k}")).collect();
    let n_views = match cfg.kind {
        SynthKind::Blobs => 1,
        SynthKind::BimodalBlobs => 2,
    };
    (0..n_views)
        .map(|v| {
            let prefix = ["a", "b"][v];
            let x = view(cfg, &y, &latent, &mut Rng::new(cfg.seed, &format!("synth/view_{prefix}")));
            let names = (0..cfg.n_features).map(|j| format!("{prefix}{j}")).collect();
            TabularDataset::new(ids.clone(), x, y.clone(), names, class_names.clone())
        })
        .collect()
}
