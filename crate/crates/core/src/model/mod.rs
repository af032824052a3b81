//! FT-Transformer with a learned mask token, the two-arm fused model, the MLP
//! baseline, and checkpoint files.

mod checkpoint;
mod config;
mod duo;
mod ftt;
mod layers;
mod mlp;

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, Checkpoint, CHECKPOINT_VERSION};
pub use config::{FttConfig, MlpConfig};
pub use duo::{Arm, DuoFtt};
pub use ftt::{EncoderLayer, EncoderOutput, FtTransformer, Masking, Streams};
pub use layers::{LayerNormParams, Linear, LAYER_NORM_EPS};
pub use mlp::Mlp;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Param, ParamKey, Real, Rng, Tape, Tensor, Var};

/// Any trainable classifier in the crate.
#[derive(Debug, Clone)]
pub enum Model<T> {
    Ftt(FtTransformer<T>),
    Duo(DuoFtt<T>),
    Mlp(Mlp<T>),
}

/// Structure of a model, enough to rebuild it before loading weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ModelSpec {
    Ftt {
        config: FttConfig,
        projection: bool,
        head: bool,
    },
    Duo {
        arm_a: FttConfig,
        arm_b: FttConfig,
        projection: bool,
        head: bool,
    },
    Mlp {
        config: MlpConfig,
        n_features: usize,
        n_classes: usize,
    },
}

impl<T: Real> Model<T> {
    pub fn n_views(&self) -> usize {
        match self {
            Model::Duo(_) => 2,
            _ => 1,
        }
    }

    pub fn n_classes(&self) -> usize {
        match self {
            Model::Ftt(m) => m.config().n_classes,
            Model::Duo(d) => d.arm_a.config().n_classes,
            Model::Mlp(m) => m.n_classes,
        }
    }

    fn check_views(&self, views: &[&Tensor<T>], masks: &[Masking<'_>]) -> Result<()> {
        if views.len() != self.n_views() || masks.len() != self.n_views() {
            return Err(Error::Config(format!(
                "model takes {} input view(s), got {} views and {} maskings",
                self.n_views(),
                views.len(),
                masks.len()
            )));
        }
        Ok(())
    }

    /// Class logits `[batch, C]`.
    pub fn forward_logits(
        &self,
        tape: &mut Tape<T>,
        views: &[&Tensor<T>],
        masks: &[Masking<'_>],
        streams: &mut Streams,
        training: bool,
    ) -> Result<Var> {
        self.check_views(views, masks)?;
        match self {
            Model::Ftt(m) => m.forward_logits(tape, views[0], &masks[0], streams, training),
            Model::Duo(d) => d.forward_logits(tape, views[0], views[1], &masks[0], &masks[1], streams, training),
            Model::Mlp(m) => {
                if masks[0].forced.is_some_and(|f| f.iter().any(|&x| x)) || masks[0].rate > 0.0 {
                    return Err(Error::Config("the MLP has no mask token; impute missing values first".into()));
                }
                m.forward_logits(tape, views[0])
            }
        }
    }

    /// Fused projection `[batch, p]` with the given masking per view.
    pub fn forward_projection(
        &self,
        tape: &mut Tape<T>,
        views: &[&Tensor<T>],
        masks: &[Masking<'_>],
        streams: &mut Streams,
        training: bool,
    ) -> Result<Var> {
        self.check_views(views, masks)?;
        match self {
            Model::Ftt(m) => m.forward_projection(tape, views[0], &masks[0], streams, training),
            Model::Duo(d) => d.forward_projection(tape, views[0], views[1], &masks[0], &masks[1], streams, training),
            Model::Mlp(_) => Err(Error::Config("the MLP baseline has no projection head".into())),
        }
    }

    /// Attaches the classification head, removing the projection head.
    pub fn start_finetune(&mut self, rng: &mut Rng) {
        match self {
            Model::Ftt(m) => {
                if !m.has_head() {
                    m.start_finetune(rng)
                }
            }
            Model::Duo(d) => {
                if !(d.arm_a.has_head() && d.arm_b.has_head()) {
                    d.start_finetune(rng)
                }
            }
            Model::Mlp(_) => {}
        }
    }

    pub fn named_params(&self) -> Vec<(String, &Param<T>)> {
        match self {
            Model::Ftt(m) => m.named_params(),
            Model::Duo(d) => d.named_params(),
            Model::Mlp(m) => m.named_params(),
        }
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        match self {
            Model::Ftt(m) => m.params_mut(),
            Model::Duo(d) => d.params_mut(),
            Model::Mlp(m) => m.params_mut(),
        }
    }

    pub fn param_keys(&self) -> Vec<ParamKey> {
        self.named_params().into_iter().map(|(_, p)| p.key()).collect()
    }

    /// Copies of all parameter values, in `named_params` order.
    pub fn snapshot(&self) -> Vec<Tensor<T>> {
        self.named_params().into_iter().map(|(_, p)| p.value.clone()).collect()
    }

    pub fn restore(&mut self, snapshot: &[Tensor<T>]) -> Result<()> {
        let mut params = self.params_mut();
        if params.len() != snapshot.len() {
            return Err(Error::State(format!(
                "snapshot has {} tensors, model has {}",
                snapshot.len(),
                params.len()
            )));
        }
        for (p, v) in params.iter_mut().zip(snapshot) {
            if p.value.shape() != v.shape() {
                return Err(Error::dimension("restore", p.value.shape(), v.shape()));
            }
            p.value = v.clone();
        }
        Ok(())
    }

    pub fn spec(&self) -> ModelSpec {
        match self {
            Model::Ftt(m) => ModelSpec::Ftt {
                config: m.config().clone(),
                projection: m.has_projection(),
                head: m.has_head(),
            },
            Model::Duo(d) => ModelSpec::Duo {
                arm_a: d.arm_a.config().clone(),
                arm_b: d.arm_b.config().clone(),
                projection: d.arm_a.has_projection(),
                head: d.arm_a.has_head(),
            },
            Model::Mlp(m) => ModelSpec::Mlp {
                config: m.config.clone(),
                n_features: m.n_features,
                n_classes: m.n_classes,
            },
        }
    }

    /// Builds an untrained model with the given structure.
    pub fn from_spec(spec: &ModelSpec, rng: &mut Rng) -> Result<Self> {
        let ftt = |cfg: &FttConfig, projection: bool, head: bool, rng: &mut Rng| -> Result<FtTransformer<T>> {
            let mut m = FtTransformer::new(cfg.clone(), rng)?;
            if head {
                m.start_finetune(rng);
            }
            if !projection {
                m.projection = None;
            }
            Ok(m)
        };
        Ok(match spec {
            ModelSpec::Ftt { config, projection, head } => Model::Ftt(ftt(config, *projection, *head, rng)?),
            ModelSpec::Duo {
                arm_a,
                arm_b,
                projection,
                head,
            } => {
                let a = ftt(arm_a, *projection, *head, &mut rng.fork("arm_a"))?;
                let b = ftt(arm_b, *projection, *head, &mut rng.fork("arm_b"))?;
                Model::Duo(DuoFtt::new(a, b)?)
            }
            ModelSpec::Mlp {
                config,
                n_features,
                n_classes,
            } => Model::Mlp(Mlp::new(config.clone(), *n_features, *n_classes, rng)?),
        })
    }
}
