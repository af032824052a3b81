use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{FttConfig, MlpConfig};
use crate::numerics::Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum HpoModel {
    #[default]
    Ftt,
    Mlp,
}

/// Closed interval `[lo, hi]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Range {
    pub lo: f64,
    pub hi: f64,
}

impl Range {
    pub const fn new(lo: f64, hi: f64) -> Self {
        Range { lo, hi }
    }

    /// Log-uniform when the interval spans at least two orders of magnitude.
    pub fn is_log(&self) -> bool {
        self.lo > 0.0 && self.hi / self.lo >= 100.0
    }

    pub fn sample(&self, rng: &mut Rng) -> f64 {
        if self.is_log() {
            (self.lo.ln() + rng.uniform() * (self.hi.ln() - self.lo.ln())).exp().clamp(self.lo, self.hi)
        } else {
            self.lo + rng.uniform() * (self.hi - self.lo)
        }
    }

    pub fn sample_int(&self, rng: &mut Rng) -> usize {
        let (lo, hi) = (self.lo.ceil() as usize, self.hi.floor() as usize);
        lo + rng.below(hi - lo + 1)
    }

    fn within(&self, outer: &Range) -> bool {
        self.lo >= outer.lo && self.hi <= outer.hi
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FttRanges {
    pub n_layers: Range,
    pub token_dim: Range,
    pub residual_dropout: Range,
    pub attention_dropout: Range,
    pub ffn_dropout: Range,
    pub ffn_factor: Range,
    pub learning_rate: Range,
    pub weight_decay: Range,
}

impl Default for FttRanges {
    fn default() -> Self {
        FttRanges {
            n_layers: Range::new(1.0, 4.0),
            token_dim: Range::new(64.0, 512.0),
            residual_dropout: Range::new(0.0, 0.2),
            attention_dropout: Range::new(0.0, 0.5),
            ffn_dropout: Range::new(0.0, 0.5),
            ffn_factor: Range::new(2.0 / 3.0, 8.0 / 3.0),
            learning_rate: Range::new(1e-5, 1e-3),
            weight_decay: Range::new(1e-6, 1e-3),
        }
    }
}

impl FttRanges {
    fn all(&self) -> [(&'static str, Range); 8] {
        [
            ("n_layers", self.n_layers),
            ("token_dim", self.token_dim),
            ("residual_dropout", self.residual_dropout),
            ("attention_dropout", self.attention_dropout),
            ("ffn_dropout", self.ffn_dropout),
            ("ffn_factor", self.ffn_factor),
            ("learning_rate", self.learning_rate),
            ("weight_decay", self.weight_decay),
        ]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MlpRanges {
    pub n_layers: Range,
    pub layer_size_factor: Range,
    pub epochs: Range,
    pub batch_size: Range,
    pub learning_rate: Range,
}

impl Default for MlpRanges {
    fn default() -> Self {
        MlpRanges {
            n_layers: Range::new(3.0, 6.0),
            layer_size_factor: Range::new(0.5, 1.0),
            epochs: Range::new(15.0, 200.0),
            batch_size: Range::new(32.0, 128.0),
            learning_rate: Range::new(1e-4, 0.5),
        }
    }
}

impl MlpRanges {
    fn all(&self) -> [(&'static str, Range); 5] {
        [
            ("n_layers", self.n_layers),
            ("layer_size_factor", self.layer_size_factor),
            ("epochs", self.epochs),
            ("batch_size", self.batch_size),
            ("learning_rate", self.learning_rate),
        ]
    }
}

/// Random search over the published per-model distributions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HpoSpec {
    pub model: HpoModel,
    pub n_trials: usize,
    pub ftt: FttRanges,
    pub mlp: MlpRanges,
}

impl Default for HpoSpec {
    fn default() -> Self {
        HpoSpec {
            model: HpoModel::Ftt,
            n_trials: 100,
            ftt: FttRanges::default(),
            mlp: MlpRanges::default(),
        }
    }
}

/// Hyperparameters drawn for one trial.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "model", rename_all = "lowercase")]
pub enum TrialParams {
    Ftt {
        config: FttConfig,
        learning_rate: f64,
        weight_decay: f64,
    },
    Mlp {
        config: MlpConfig,
    },
}

impl HpoSpec {
    /// Errors on malformed ranges; warns on ranges wider than the defaults.
    pub fn validate(&self) -> Result<()> {
        if self.n_trials == 0 {
            return Err(Error::Config("n_trials must be at least 1".into()));
        }
        let ftt_def = FttRanges::default();
        let mlp_def = MlpRanges::default();
        let pairs = self
            .ftt
            .all()
            .into_iter()
            .zip(ftt_def.all())
            .map(|(a, b)| ("ftt", a, b.1))
            .chain(self.mlp.all().into_iter().zip(mlp_def.all()).map(|(a, b)| ("mlp", a, b.1)));
        for (model, (name, r), default) in pairs {
            if !(r.lo.is_finite() && r.hi.is_finite() && r.lo <= r.hi) {
                return Err(Error::Config(format!("{model}.{name}: bad range [{}, {}]", r.lo, r.hi)));
            }
            if !r.within(&default) {
                log::warn!(
                    "{model}.{name} range [{}, {}] leaves the standard bounds [{}, {}]",
                    r.lo,
                    r.hi,
                    default.lo,
                    default.hi
                );
            }
        }
        Ok(())
    }

    /// Draws one trial. Token width is rounded to a multiple of the head count.
    pub fn sample(&self, base: &FttConfig, rng: &mut Rng) -> TrialParams {
        match self.model {
            HpoModel::Ftt => {
                let r = &self.ftt;
                let mut config = base.clone();
                config.n_layers = r.n_layers.sample_int(rng);
                let heads = config.n_heads.max(1);
                let d = r.token_dim.sample_int(rng);
                config.token_dim = (((d as f64) / heads as f64).round() as usize).max(1) * heads;
                config.residual_dropout = r.residual_dropout.sample(rng);
                config.attention_dropout = r.attention_dropout.sample(rng);
                config.ffn_dropout = r.ffn_dropout.sample(rng);
                config.ffn_factor = r.ffn_factor.sample(rng);
                let learning_rate = r.learning_rate.sample(rng);
                let weight_decay = r.weight_decay.sample(rng);
                TrialParams::Ftt {
                    config,
                    learning_rate,
                    weight_decay,
                }
            }
            HpoModel::Mlp => {
                let r = &self.mlp;
                let config = MlpConfig {
                    n_layers: r.n_layers.sample_int(rng),
                    layer_size_factor: r.layer_size_factor.sample(rng),
                    epochs: r.epochs.sample_int(rng),
                    batch_size: r.batch_size.sample_int(rng),
                    learning_rate: r.learning_rate.sample(rng),
                };
                TrialParams::Mlp { config }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn learning_rates_stay_in_range() {
        let spec = HpoSpec::default();
        let base = FttConfig {
            n_features: 5,
            n_classes: 3,
            ..Default::default()
        };
        let mut rng = Rng::new(3, "hpo");
        for _ in 0..500 {
            match spec.sample(&base, &mut rng) {
                TrialParams::Ftt {
                    config,
                    learning_rate,
                    weight_decay,
                } => {
                    assert!((1e-5..=1e-3).contains(&learning_rate));
                    assert!((1e-6..=1e-3).contains(&weight_decay));
                    assert!((1..=4).contains(&config.n_layers));
                    assert_eq!(config.token_dim % config.n_heads, 0);
                    config.validate().unwrap();
                }
                TrialParams::Mlp { .. } => unreachable!(),
            }
        }
    }

    #[test]
    fn log_scale_only_for_wide_ranges() {
        assert!(Range::new(1e-5, 1e-3).is_log());
        assert!(!Range::new(0.5, 1.0).is_log());
        assert!(!Range::new(0.0, 0.5).is_log());
    }

    #[test]
    fn zero_trials_rejected() {
        let spec = HpoSpec {
            n_trials: 0,
            ..Default::default()
        };
        assert!(matches!(spec.validate(), Err(Error::Config(_))));
    }
}
