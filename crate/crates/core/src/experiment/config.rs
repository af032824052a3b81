use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::MissingnessConfig;
use crate::error::{Error, Result};
use crate::model::{FttConfig, MlpConfig};
use crate::numerics::Precision;
use crate::training::TrainConfig;

use super::hpo::HpoSpec;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExperimentKind {
    Unimodal,
    MaskRateSweep,
    LabelFractionSweep,
    Missingness,
    DuoJoint,
    DuoClip,
    DuoUnmatched,
    CrossOmics,
    DuoVsWide,
    Hpo,
}

impl ExperimentKind {
    pub fn is_duo(self) -> bool {
        matches!(
            self,
            ExperimentKind::DuoJoint
                | ExperimentKind::DuoClip
                | ExperimentKind::DuoUnmatched
                | ExperimentKind::CrossOmics
                | ExperimentKind::DuoVsWide
        )
    }

    pub fn name(self) -> &'static str {
        match self {
            ExperimentKind::Unimodal => "unimodal",
            ExperimentKind::MaskRateSweep => "mask_rate_sweep",
            ExperimentKind::LabelFractionSweep => "label_fraction_sweep",
            ExperimentKind::Missingness => "missingness",
            ExperimentKind::DuoJoint => "duo_joint",
            ExperimentKind::DuoClip => "duo_clip",
            ExperimentKind::DuoUnmatched => "duo_unmatched",
            ExperimentKind::CrossOmics => "cross_omics",
            ExperimentKind::DuoVsWide => "duo_vs_wide",
            ExperimentKind::Hpo => "hpo",
        }
    }
}

fn default_label() -> String {
    "label".into()
}

fn default_seeds() -> Vec<u64> {
    vec![0, 1, 2]
}

fn default_out() -> PathBuf {
    PathBuf::from("results")
}

fn default_fraction() -> f64 {
    1.0
}

fn default_mask_rates() -> Vec<f64> {
    vec![0.0, 0.15, 0.3, 0.45, 0.6, 0.75, 0.9]
}

fn default_label_fractions() -> Vec<f64> {
    vec![0.01, 0.05, 0.1, 0.25, 0.5, 1.0]
}

fn default_missing_probs() -> Vec<f64> {
    vec![0.0, 0.25, 0.5, 0.75]
}

fn default_train_mask_rates() -> Vec<f64> {
    vec![0.0, 0.25, 0.5]
}

fn default_missingness() -> MissingnessConfig {
    MissingnessConfig {
        p_incomplete: 0.5,
        p_missing: 0.5,
    }
}

/// One experiment, read from a TOML document. Unknown keys are rejected.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub kind: ExperimentKind,
    /// Label written to the `experiment` column; defaults to the kind.
    #[serde(default)]
    pub name: Option<String>,
    /// One table, or two for the two-arm experiments. Relative paths are
    /// resolved against the config file's directory.
    #[serde(default)]
    pub data: Vec<PathBuf>,
    #[serde(default = "default_label")]
    pub label_column: String,
    /// Principal components kept after standardisation; 0 disables PCA.
    #[serde(default)]
    pub pca_components: usize,
    #[serde(default = "default_fraction")]
    pub label_fraction: f64,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    #[serde(default = "default_out")]
    pub out_dir: PathBuf,
    #[serde(default)]
    pub precision: Precision,
    /// Also train the MLP baseline in the unimodal experiment.
    #[serde(default)]
    pub include_mlp: bool,
    #[serde(default = "default_mask_rates")]
    pub mask_rates: Vec<f64>,
    #[serde(default = "default_label_fractions")]
    pub label_fractions: Vec<f64>,
    /// Test-time `p_missing` grid of the missingness experiment.
    #[serde(default = "default_missing_probs")]
    pub missing_probs: Vec<f64>,
    /// Finetuning mask rates tried for the mask-token model, at the fixed
    /// `missingness` setting.
    #[serde(default = "default_train_mask_rates")]
    pub train_mask_rates: Vec<f64>,
    /// Finetuning mask rate of the mask-token models in the `p_missing` grid.
    #[serde(default = "default_augment")]
    pub augment_mask_rate: f64,
    #[serde(default = "default_missingness")]
    pub missingness: MissingnessConfig,
    #[serde(default)]
    pub model: FttConfig,
    #[serde(default)]
    pub mlp: MlpConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub hpo: HpoSpec,
}

fn default_augment() -> f64 {
    0.45
}

impl ExperimentConfig {
    pub fn new(kind: ExperimentKind) -> Self {
        ExperimentConfig {
            kind,
            name: None,
            data: Vec::new(),
            label_column: default_label(),
            pca_components: 0,
            label_fraction: default_fraction(),
            seeds: default_seeds(),
            out_dir: default_out(),
            precision: Precision::F32,
            include_mlp: false,
            mask_rates: default_mask_rates(),
            label_fractions: default_label_fractions(),
            missing_probs: default_missing_probs(),
            train_mask_rates: default_train_mask_rates(),
            augment_mask_rate: default_augment(),
            missingness: default_missingness(),
            model: FttConfig::default(),
            mlp: MlpConfig::default(),
            train: TrainConfig::default(),
            hpo: HpoSpec::default(),
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    /// Reads a config file and resolves relative data paths against its directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let mut cfg = Self::from_toml(&text)?;
        let base = path.parent().unwrap_or(Path::new("."));
        for p in &mut cfg.data {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        Ok(cfg)
    }

    pub fn experiment_name(&self) -> String {
        self.name.clone().unwrap_or_else(|| self.kind.name().to_string())
    }

    /// Checks that do not need the data files.
    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(Error::Config("seeds must not be empty".into()));
        }
        let need = if self.kind.is_duo() { 2 } else { 1 };
        if self.data.len() != need {
            return Err(Error::Config(format!(
                "{} needs {need} data path(s), got {}",
                self.kind.name(),
                self.data.len()
            )));
        }
        if !(self.label_fraction > 0.0 && self.label_fraction <= 1.0) {
            return Err(Error::Config(format!("label_fraction must be in (0, 1], got {}", self.label_fraction)));
        }
        let unit = |name: &str, v: &[f64]| -> Result<()> {
            if let Some(bad) = v.iter().find(|r| !(0.0..=1.0).contains(*r)) {
                return Err(Error::Config(format!("{name} entries must be in [0, 1], got {bad}")));
            }
            Ok(())
        };
        unit("mask_rates", &self.mask_rates)?;
        unit("missing_probs", &self.missing_probs)?;
        unit("train_mask_rates", &self.train_mask_rates)?;
        unit("augment_mask_rate", &[self.augment_mask_rate])?;
        if let Some(bad) = self.label_fractions.iter().find(|f| !(**f > 0.0 && **f <= 1.0)) {
            return Err(Error::Config(format!("label_fractions entries must be in (0, 1], got {bad}")));
        }
        if self.kind == ExperimentKind::Missingness && self.pca_components != 0 {
            return Err(Error::Config("the missingness experiment runs without PCA".into()));
        }
        self.missingness.validate()?;
        FttConfig {
            n_features: self.model.n_features.max(1),
            n_classes: self.model.n_classes.max(2),
            ..self.model.clone()
        }
        .validate()?;
        self.mlp.validate()?;
        self.train.validate()?;
        self.hpo.validate()?;
        Ok(())
    }

    /// Checks that the data files exist.
    pub fn check_paths(&self) -> Result<()> {
        for p in &self.data {
            if !p.is_file() {
                return Err(Error::Config(format!("data file {} does not exist", p.display())));
            }
        }
        Ok(())
    }
}
