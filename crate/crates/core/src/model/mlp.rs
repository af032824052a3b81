use super::config::MlpConfig;
use super::layers::{linear_stack, mlp_forward, Linear};
use crate::error::{Error, Result};
use crate::numerics::{Param, Real, Rng, Tape, Tensor, Var};

/// ReLU multi-layer perceptron classifier.
#[derive(Debug, Clone)]
pub struct Mlp<T> {
    pub config: MlpConfig,
    pub n_features: usize,
    pub n_classes: usize,
    pub layers: Vec<Linear<T>>,
}

impl<T: Real> Mlp<T> {
    pub fn new(config: MlpConfig, n_features: usize, n_classes: usize, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        if n_features == 0 || n_classes < 2 {
            return Err(Error::Config(format!(
                "MLP needs >= 1 feature and >= 2 classes, got {n_features} and {n_classes}"
            )));
        }
        let mut widths = vec![n_features];
        widths.extend(config.hidden_widths(n_features));
        widths.push(n_classes);
        Ok(Mlp {
            layers: linear_stack(&widths, rng),
            config,
            n_features,
            n_classes,
        })
    }

    pub fn forward_logits(&self, tape: &mut Tape<T>, x: &Tensor<T>) -> Result<Var> {
        if x.ndim() != 2 || x.cols() != self.n_features {
            return Err(Error::dimension("mlp_forward", x.shape(), &[self.n_features]));
        }
        let xv = tape.constant(x.clone());
        mlp_forward(&self.layers, tape, xv)
    }

    pub fn named_params(&self) -> Vec<(String, &Param<T>)> {
        let mut out = Vec::new();
        for (i, l) in self.layers.iter().enumerate() {
            l.named(&format!("layers.{i}"), &mut out);
        }
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        let mut out = Vec::new();
        for l in &mut self.layers {
            l.collect_mut(&mut out);
        }
        out
    }
}
