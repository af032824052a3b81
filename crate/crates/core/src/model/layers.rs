use crate::error::Result;
use crate::numerics::{Param, Real, Rng, Tape, Tensor, Var};

/// Tensor of i.i.d. draws from U(−bound, bound).
pub(crate) fn uniform<T: Real>(shape: &[usize], bound: f64, rng: &mut Rng) -> Tensor<T> {
    Tensor::from_fn(shape, |_| T::lit(rng.uniform_range(-bound, bound)))
}

/// Fully connected layer `x · w + b` with `w: [in, out]`.
#[derive(Debug, Clone)]
pub struct Linear<T> {
    pub w: Param<T>,
    pub b: Param<T>,
}

impl<T: Real> Linear<T> {
    /// Weights and bias uniform on ±1/√in.
    pub fn new(inp: usize, out: usize, rng: &mut Rng) -> Self {
        let bound = 1.0 / (inp.max(1) as f64).sqrt();
        Linear {
            w: Param::new(uniform(&[inp, out], bound, rng)),
            b: Param::new(uniform(&[out], bound, rng)),
        }
    }

    pub fn in_dim(&self) -> usize {
        self.w.value.shape()[0]
    }

    pub fn out_dim(&self) -> usize {
        self.w.value.shape()[1]
    }

    pub fn forward(&self, tape: &mut Tape<T>, x: Var) -> Result<Var> {
        let w = tape.param(&self.w);
        let b = tape.param(&self.b);
        let y = tape.matmul(x, w)?;
        tape.add(y, b)
    }

    pub(crate) fn named<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Param<T>)>) {
        out.push((format!("{prefix}.w"), &self.w));
        out.push((format!("{prefix}.b"), &self.b));
    }

    pub(crate) fn collect_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Param<T>>) {
        out.push(&mut self.w);
        out.push(&mut self.b);
    }
}

/// Stack of linear layers with ReLU between consecutive layers (none after the last).
pub(crate) fn mlp_forward<T: Real>(layers: &[Linear<T>], tape: &mut Tape<T>, x: Var) -> Result<Var> {
    let mut h = x;
    for (i, layer) in layers.iter().enumerate() {
        h = layer.forward(tape, h)?;
        if i + 1 < layers.len() {
            h = tape.relu(h);
        }
    }
    Ok(h)
}

/// Chain of layers through the given widths.
pub(crate) fn linear_stack<T: Real>(widths: &[usize], rng: &mut Rng) -> Vec<Linear<T>> {
    widths.windows(2).map(|w| Linear::new(w[0], w[1], rng)).collect()
}

#[derive(Debug, Clone)]
pub struct LayerNormParams<T> {
    pub gain: Param<T>,
    pub bias: Param<T>,
}

pub const LAYER_NORM_EPS: f64 = 1e-5;

impl<T: Real> LayerNormParams<T> {
    pub fn new(d: usize) -> Self {
        LayerNormParams {
            gain: Param::new(Tensor::ones(&[d])),
            bias: Param::new(Tensor::zeros(&[d])),
        }
    }

    pub fn forward(&self, tape: &mut Tape<T>, x: Var) -> Result<Var> {
        let g = tape.param(&self.gain);
        let b = tape.param(&self.bias);
        tape.layer_norm(x, g, b, LAYER_NORM_EPS)
    }

    pub(crate) fn named<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Param<T>)>) {
        out.push((format!("{prefix}.gain"), &self.gain));
        out.push((format!("{prefix}.bias"), &self.bias));
    }

    pub(crate) fn collect_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Param<T>>) {
        out.push(&mut self.gain);
        out.push(&mut self.bias);
    }
}
