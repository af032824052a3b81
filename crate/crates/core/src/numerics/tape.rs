//! Reverse-mode automatic differentiation over a Wengert list.
//!
//! Every operation appends a node holding its forward value and whatever it
//! needs for the backward pass. `backward` consumes the tape, walks it in
//! reverse and returns the gradients of every node that requires them.

use std::collections::HashMap;

use super::{Param, ParamKey, Precision, Real, Rng, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum BinaryKind {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum UnaryKind {
    Relu,
    Gelu,
    Exp,
    Log,
    Sqrt,
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Gemm {
        a: usize,
        b: usize,
        batch: usize,
        m: usize,
        k: usize,
        n: usize,
        ta: bool,
        tb: bool,
    },
    Binary {
        a: usize,
        b: usize,
        kind: BinaryKind,
    },
    Scale {
        x: usize,
        c: T,
    },
    Unary {
        x: usize,
        kind: UnaryKind,
    },
    SumAll {
        x: usize,
    },
    MeanAll {
        x: usize,
    },
    SumLast {
        x: usize,
    },
    Softmax {
        x: usize,
    },
    LogSumExp {
        x: usize,
    },
    LayerNorm {
        x: usize,
        gain: usize,
        bias: usize,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    MulConst {
        x: usize,
        factor: Vec<T>,
    },
    Reshape {
        x: usize,
    },
    Permute {
        x: usize,
        perm: Vec<usize>,
    },
    Tokenize {
        x: usize,
        w: usize,
        b: usize,
    },
    Prepend {
        x: usize,
        token: usize,
    },
    MaskReplace {
        x: usize,
        token: usize,
        mask: Vec<bool>,
    },
    SelectToken {
        x: usize,
        index: usize,
    },
    ConcatLast {
        a: usize,
        b: usize,
    },
    Gather {
        x: usize,
        idx: Vec<usize>,
    },
    NormalizeRows {
        x: usize,
        norms: Vec<T>,
        eps: T,
    },
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Operation recorder for one forward/backward pass.
#[derive(Debug)]
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    params: HashMap<ParamKey, Var>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

fn gelu<T: Real>(x: T) -> T {
    let c = T::lit(GELU_C);
    let a = T::lit(GELU_A);
    let half = T::lit(0.5);
    half * x * (T::one() + (c * (x + a * x * x * x)).tanh())
}

fn gelu_grad<T: Real>(x: T) -> T {
    let c = T::lit(GELU_C);
    let a = T::lit(GELU_A);
    let half = T::lit(0.5);
    let t = (c * (x + a * x * x * x)).tanh();
    half * (T::one() + t) + half * x * (T::one() - t * t) * c * (T::one() + T::lit(3.0) * a * x * x)
}

/// Whether `small` is a trailing suffix of `big`.
fn is_suffix(small: &[usize], big: &[usize]) -> bool {
    small.len() <= big.len() && big[big.len() - small.len()..] == *small
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            params: HashMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: usize) -> bool {
        self.nodes[v].requires_grad
    }

    /// Leaf node; gradients are reported for it when `requires_grad`.
    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    /// Registers a parameter once per tape; later calls return the same node.
    pub fn param(&mut self, p: &Param<T>) -> Var {
        if let Some(&v) = self.params.get(&p.key()) {
            return v;
        }
        let v = self.leaf(p.value.clone(), true);
        self.params.insert(p.key(), v);
        v
    }

    /// Makes later `param(p)` calls for `key` resolve to `v`. Used to drive a
    /// model's forward pass from substituted values (finite-difference checks).
    pub fn bind_param(&mut self, key: ParamKey, v: Var) {
        self.params.insert(key, v);
    }

    // ---------------------------------------------------------------- linear algebra

    /// `x[..., k] · w[k, n] -> [..., n]`; leading axes of `x` are flattened into rows.
    pub fn matmul(&mut self, x: Var, w: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        if xs.is_empty() || ws.len() != 2 || xs[xs.len() - 1] != ws[0] {
            return Err(Error::dimension("matmul", &xs, &ws));
        }
        let k = ws[0];
        let n = ws[1];
        let m = self.value(x).numel() / k.max(1);
        let mut out = vec![T::zero(); m * n];
        T::gemm(
            m,
            k,
            n,
            self.value(x).data(),
            false,
            self.value(w).data(),
            false,
            &mut out,
            false,
        );
        let mut shape = xs.clone();
        *shape.last_mut().unwrap() = n;
        let rg = self.rg(x.0) || self.rg(w.0);
        let value = Tensor::new(&shape, out)?;
        Ok(self.push(
            value,
            Op::Gemm {
                a: x.0,
                b: w.0,
                batch: 1,
                m,
                k,
                n,
                ta: false,
                tb: false,
            },
            rg,
        ))
    }

    /// `a · bᵀ` for two matrices `a[m, k]`, `b[n, k]`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let a_shape = self.shape(a).to_vec();
        let b_shape = self.shape(b).to_vec();
        if a_shape.len() != 2 || b_shape.len() != 2 || a_shape[1] != b_shape[1] {
            return Err(Error::dimension("matmul_nt", &a_shape, &b_shape));
        }
        let (m, k, n) = (a_shape[0], a_shape[1], b_shape[0]);
        self.gemm_batched(a, b, 1, m, k, n, false, true, vec![m, n])
    }

    /// Batched `op(a) · op(b)` over the leading axis of two rank-3 tensors.
    pub fn bmm(&mut self, a: Var, b: Var, trans_a: bool, trans_b: bool) -> Result<Var> {
        let a_shape = self.shape(a).to_vec();
        let b_shape = self.shape(b).to_vec();
        if a_shape.len() != 3 || b_shape.len() != 3 || a_shape[0] != b_shape[0] {
            return Err(Error::dimension("bmm", &a_shape, &b_shape));
        }
        let (m, k) = if trans_a {
            (a_shape[2], a_shape[1])
        } else {
            (a_shape[1], a_shape[2])
        };
        let (kb, n) = if trans_b {
            (b_shape[2], b_shape[1])
        } else {
            (b_shape[1], b_shape[2])
        };
        if k != kb {
            return Err(Error::dimension("bmm", &a_shape, &b_shape));
        }
        let batch = a_shape[0];
        self.gemm_batched(a, b, batch, m, k, n, trans_a, trans_b, vec![batch, m, n])
    }

    #[allow(clippy::too_many_arguments)]
    fn gemm_batched(
        &mut self,
        a: Var,
        b: Var,
        batch: usize,
        m: usize,
        k: usize,
        n: usize,
        ta: bool,
        tb: bool,
        shape: Vec<usize>,
    ) -> Result<Var> {
        let mut out = vec![T::zero(); batch * m * n];
        {
            let ad = self.value(a).data();
            let bd = self.value(b).data();
            for i in 0..batch {
                T::gemm(
                    m,
                    k,
                    n,
                    &ad[i * m * k..(i + 1) * m * k],
                    ta,
                    &bd[i * k * n..(i + 1) * k * n],
                    tb,
                    &mut out[i * m * n..(i + 1) * m * n],
                    false,
                );
            }
        }
        let rg = self.rg(a.0) || self.rg(b.0);
        let value = Tensor::new(&shape, out)?;
        Ok(self.push(
            value,
            Op::Gemm {
                a: a.0,
                b: b.0,
                batch,
                m,
                k,
                n,
                ta,
                tb,
            },
            rg,
        ))
    }

    // ---------------------------------------------------------------- elementwise

    fn binary(&mut self, a: Var, b: Var, kind: BinaryKind, name: &'static str) -> Result<Var> {
        let a_shape = self.shape(a).to_vec();
        let b_shape = self.shape(b).to_vec();
        let (big, a_big) = if is_suffix(&b_shape, &a_shape) {
            (a_shape.clone(), true)
        } else if is_suffix(&a_shape, &b_shape) {
            (b_shape.clone(), false)
        } else {
            return Err(Error::dimension(name, &a_shape, &b_shape));
        };
        let ad = self.value(a).data();
        let bd = self.value(b).data();
        if kind == BinaryKind::Div && T::PRECISION == Precision::F64 && bd.iter().any(|v| v.is_zero())
        {
            return Err(Error::Arithmetic("division by exact zero".into()));
        }
        let numel: usize = big.iter().product();
        let (la, lb) = (ad.len().max(1), bd.len().max(1));
        let f = |x: T, y: T| match kind {
            BinaryKind::Add => x + y,
            BinaryKind::Sub => x - y,
            BinaryKind::Mul => x * y,
            BinaryKind::Div => x / y,
        };
        let mut out: Vec<T> = Vec::with_capacity(numel);
        if a_big {
            for chunk in ad.chunks(lb) {
                out.extend(chunk.iter().zip(bd).map(|(&x, &y)| f(x, y)));
            }
        } else {
            for chunk in bd.chunks(la) {
                out.extend(ad.iter().zip(chunk).map(|(&x, &y)| f(x, y)));
            }
        }
        let rg = self.rg(a.0) || self.rg(b.0);
        let value = Tensor::new(&big, out)?;
        Ok(self.push(value, Op::Binary { a: a.0, b: b.0, kind }, rg))
    }

    /// Elementwise sum; the smaller operand's shape must be a trailing suffix of the larger.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, BinaryKind::Add, "add")
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, BinaryKind::Sub, "sub")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, BinaryKind::Mul, "mul")
    }

    /// Elementwise quotient. In 64-bit mode a zero divisor is an error.
    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, BinaryKind::Div, "div")
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let c = T::lit(c);
        let value = self.value(x).map(|v| v * c);
        let rg = self.rg(x.0);
        self.push(value, Op::Scale { x: x.0, c }, rg)
    }

    fn unary(&mut self, x: Var, kind: UnaryKind) -> Var {
        let value = self.value(x).map(|v| match kind {
            UnaryKind::Relu => v.max(T::zero()),
            UnaryKind::Gelu => gelu(v),
            UnaryKind::Exp => v.exp(),
            UnaryKind::Log => v.ln(),
            UnaryKind::Sqrt => v.sqrt(),
        });
        let rg = self.rg(x.0);
        self.push(value, Op::Unary { x: x.0, kind }, rg)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, UnaryKind::Relu)
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Var {
        self.unary(x, UnaryKind::Gelu)
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(x, UnaryKind::Exp)
    }

    pub fn log(&mut self, x: Var) -> Var {
        self.unary(x, UnaryKind::Log)
    }

    pub fn sqrt(&mut self, x: Var) -> Var {
        self.unary(x, UnaryKind::Sqrt)
    }

    // ---------------------------------------------------------------- reductions

    pub fn sum(&mut self, x: Var) -> Var {
        let value = Tensor::scalar(self.value(x).sum());
        let rg = self.rg(x.0);
        self.push(value, Op::SumAll { x: x.0 }, rg)
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        if t.numel() == 0 {
            return Err(Error::dimension("mean", t.shape(), &[]));
        }
        let value = Tensor::scalar(t.sum() / T::from_usize(t.numel()).unwrap());
        let rg = self.rg(x.0);
        Ok(self.push(value, Op::MeanAll { x: x.0 }, rg))
    }

    /// Sum over the last axis, dropping it.
    pub fn sum_last(&mut self, x: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let Some((&n, lead)) = shape.split_last() else {
            return Err(Error::dimension("sum_last", &shape, &[]));
        };
        let data: Vec<T> = if n == 0 {
            vec![T::zero(); lead.iter().product()]
        } else {
            self.value(x)
                .data()
                .chunks(n)
                .map(|row| row.iter().copied().sum())
                .collect()
        };
        let value = Tensor::new(lead, data)?;
        let rg = self.rg(x.0);
        Ok(self.push(value, Op::SumLast { x: x.0 }, rg))
    }

    /// Softmax over the last axis, max-shifted.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let n = shape.last().copied().unwrap_or(0);
        if n == 0 {
            return Err(Error::dimension("softmax", &shape, &[]));
        }
        let mut data = self.value(x).data().to_vec();
        for row in data.chunks_mut(n) {
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let mut total = T::zero();
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                total = total + *v;
            }
            for v in row.iter_mut() {
                *v = *v / total;
            }
        }
        let value = Tensor::new(&shape, data)?;
        let rg = self.rg(x.0);
        Ok(self.push(value, Op::Softmax { x: x.0 }, rg))
    }

    /// `log Σ exp(x)` over the last axis, dropping it.
    pub fn logsumexp(&mut self, x: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let Some((&n, lead)) = shape.split_last() else {
            return Err(Error::dimension("logsumexp", &shape, &[]));
        };
        if n == 0 {
            return Err(Error::dimension("logsumexp", &shape, &[]));
        }
        let data: Vec<T> = self
            .value(x)
            .data()
            .chunks(n)
            .map(|row| {
                let max = row.iter().copied().fold(T::neg_infinity(), T::max);
                let total: T = row.iter().map(|&v| (v - max).exp()).sum();
                max + total.ln()
            })
            .collect();
        let value = Tensor::new(lead, data)?;
        let rg = self.rg(x.0);
        Ok(self.push(value, Op::LogSumExp { x: x.0 }, rg))
    }

    // ---------------------------------------------------------------- normalisation

    /// Per-row standardisation over the last axis followed by `gain ⊙ · + bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let d = shape.last().copied().unwrap_or(0);
        if d == 0 || self.shape(gain) != [d] || self.shape(bias) != [d] {
            return Err(Error::dimension("layer_norm", &shape, self.shape(gain)));
        }
        if eps <= 0.0 {
            return Err(Error::Config(format!("layer_norm eps must be > 0, got {eps}")));
        }
        let eps = T::lit(eps);
        let inv_d = T::one() / T::from_usize(d).unwrap();
        let xd = self.value(x).data();
        let g = self.value(gain).data();
        let bb = self.value(bias).data();
        let rows = xd.len() / d;
        let mut xhat = vec![T::zero(); xd.len()];
        let mut rstd = vec![T::zero(); rows];
        let mut out = vec![T::zero(); xd.len()];
        for r in 0..rows {
            let row = &xd[r * d..(r + 1) * d];
            let mean = row.iter().copied().sum::<T>() * inv_d;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_d;
            let rs = T::one() / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..d {
                let h = (row[j] - mean) * rs;
                xhat[r * d + j] = h;
                out[r * d + j] = h * g[j] + bb[j];
            }
        }
        let value = Tensor::new(&shape, out)?;
        let rg = self.rg(x.0) || self.rg(gain.0) || self.rg(bias.0);
        Ok(self.push(
            value,
            Op::LayerNorm {
                x: x.0,
                gain: gain.0,
                bias: bias.0,
                xhat,
                rstd,
            },
            rg,
        ))
    }

    /// Row-wise `x / max(‖x‖, eps)` over the last axis.
    pub fn normalize_rows(&mut self, x: Var, eps: f64) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let d = shape.last().copied().unwrap_or(0);
        if d == 0 {
            return Err(Error::dimension("normalize_rows", &shape, &[]));
        }
        let eps = T::lit(eps);
        let xd = self.value(x).data();
        let mut norms = Vec::with_capacity(xd.len() / d);
        let mut out = Vec::with_capacity(xd.len());
        for row in xd.chunks(d) {
            let norm = row.iter().map(|&v| v * v).sum::<T>().sqrt();
            let denom = norm.max(eps);
            norms.push(norm);
            out.extend(row.iter().map(|&v| v / denom));
        }
        let value = Tensor::new(&shape, out)?;
        let rg = self.rg(x.0);
        Ok(self.push(value, Op::NormalizeRows { x: x.0, norms, eps }, rg))
    }

    /// Inverted dropout: zero each element with probability `rate` and scale
    /// survivors by `1 / (1 - rate)`. Identity when not training or `rate == 0`.
    pub fn dropout(&mut self, x: Var, rate: f64, rng: &mut Rng, training: bool) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::Config(format!("dropout rate must be in [0, 1), got {rate}")));
        }
        if !training || rate == 0.0 {
            return Ok(x);
        }
        let keep = T::lit(1.0 / (1.0 - rate));
        let factor: Vec<T> = (0..self.value(x).numel())
            .map(|_| if rng.bernoulli(rate) { T::zero() } else { keep })
            .collect();
        self.mul_const(x, factor)
    }

    /// Multiplies by a fixed elementwise factor (a frozen dropout mask, for example).
    pub fn mul_const(&mut self, x: Var, factor: Vec<T>) -> Result<Var> {
        let t = self.value(x);
        if factor.len() != t.numel() {
            return Err(Error::dimension("mul_const", t.shape(), &[factor.len()]));
        }
        let data = t.data().iter().zip(&factor).map(|(&v, &f)| v * f).collect();
        let value = Tensor::new(t.shape(), data)?;
        let rg = self.rg(x.0);
        Ok(self.push(value, Op::MulConst { x: x.0, factor }, rg))
    }

    // ---------------------------------------------------------------- layout

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).clone().reshape(shape)?;
        let rg = self.rg(x.0);
        Ok(self.push(value, Op::Reshape { x: x.0 }, rg))
    }

    /// Reorders axes: output axis `i` is input axis `perm[i]`.
    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let mut seen = vec![false; shape.len()];
        if perm.len() != shape.len() || perm.iter().any(|&p| p >= shape.len() || std::mem::replace(&mut seen[p], true)) {
            return Err(Error::dimension("permute", &shape, perm));
        }
        let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
        let offsets = permute_offsets(&shape, perm);
        let src = self.value(x).data();
        let data = offsets.iter().map(|&o| src[o]).collect();
        let value = Tensor::new(&out_shape, data)?;
        let rg = self.rg(x.0);
        Ok(self.push(
            value,
            Op::Permute {
                x: x.0,
                perm: perm.to_vec(),
            },
            rg,
        ))
    }

    /// Concatenates two matrices along the last axis.
    pub fn concat_last(&mut self, a: Var, b: Var) -> Result<Var> {
        let a_shape = self.shape(a).to_vec();
        let b_shape = self.shape(b).to_vec();
        if a_shape.len() != 2 || b_shape.len() != 2 || a_shape[0] != b_shape[0] {
            return Err(Error::dimension("concat_last", &a_shape, &b_shape));
        }
        let value = self.value(a).hconcat(self.value(b))?;
        let rg = self.rg(a.0) || self.rg(b.0);
        Ok(self.push(value, Op::ConcatLast { a: a.0, b: b.0 }, rg))
    }

    /// Picks `x[i, idx[i]]` from a matrix.
    pub fn gather(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.len() != 2 || shape[0] != idx.len() {
            return Err(Error::dimension("gather", &shape, &[idx.len()]));
        }
        if let Some(&bad) = idx.iter().find(|&&i| i >= shape[1]) {
            return Err(Error::Index(format!("gather index {bad} out of range for {} columns", shape[1])));
        }
        let t = self.value(x);
        let data = idx.iter().enumerate().map(|(r, &c)| t.at(r, c)).collect();
        let value = Tensor::new(&[idx.len()], data)?;
        let rg = self.rg(x.0);
        Ok(self.push(
            value,
            Op::Gather {
                x: x.0,
                idx: idx.to_vec(),
            },
            rg,
        ))
    }

    // ---------------------------------------------------------------- tabular-transformer ops

    /// Per-feature linear tokenizer: `x[b, f] -> x[b, f] · w[f, :] + bias[f, :]`,
    /// giving `[batch, features, dim]`.
    pub fn tokenize(&mut self, x: Var, w: Var, bias: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        if xs.len() != 2 || ws.len() != 2 || xs[1] != ws[0] || self.shape(bias) != ws.as_slice() {
            return Err(Error::dimension("tokenize", &xs, &ws));
        }
        let (batch, m, d) = (xs[0], ws[0], ws[1]);
        let xd = self.value(x).data();
        let wd = self.value(w).data();
        let bd = self.value(bias).data();
        let mut out = Vec::with_capacity(batch * m * d);
        for b in 0..batch {
            for f in 0..m {
                let v = xd[b * m + f];
                let wr = &wd[f * d..(f + 1) * d];
                let br = &bd[f * d..(f + 1) * d];
                out.extend(wr.iter().zip(br).map(|(&wv, &bv)| v * wv + bv));
            }
        }
        let value = Tensor::new(&[batch, m, d], out)?;
        let rg = self.rg(x.0) || self.rg(w.0) || self.rg(bias.0);
        Ok(self.push(
            value,
            Op::Tokenize {
                x: x.0,
                w: w.0,
                b: bias.0,
            },
            rg,
        ))
    }

    /// Puts `token[d]` in front of every stack: `[b, m, d] -> [b, m + 1, d]`.
    pub fn prepend_token(&mut self, x: Var, token: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 3 || self.shape(token) != [xs[2]] {
            return Err(Error::dimension("prepend_token", &xs, self.shape(token)));
        }
        let (batch, m, d) = (xs[0], xs[1], xs[2]);
        let xd = self.value(x).data();
        let td = self.value(token).data();
        let mut out = Vec::with_capacity(batch * (m + 1) * d);
        for b in 0..batch {
            out.extend_from_slice(td);
            out.extend_from_slice(&xd[b * m * d..(b + 1) * m * d]);
        }
        let value = Tensor::new(&[batch, m + 1, d], out)?;
        let rg = self.rg(x.0) || self.rg(token.0);
        Ok(self.push(
            value,
            Op::Prepend {
                x: x.0,
                token: token.0,
            },
            rg,
        ))
    }

    /// Replaces token rows whose mask bit is set with `token`.
    /// `mask` has one entry per `(sample, feature)` pair.
    pub fn mask_replace(&mut self, x: Var, token: Var, mask: Vec<bool>) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 3 || self.shape(token) != [xs[2]] || mask.len() != xs[0] * xs[1] {
            return Err(Error::dimension("mask_replace", &xs, &[mask.len()]));
        }
        let d = xs[2];
        let td = self.value(token).data();
        let mut out = self.value(x).data().to_vec();
        for (row, &masked) in out.chunks_mut(d).zip(&mask) {
            if masked {
                row.copy_from_slice(td);
            }
        }
        let value = Tensor::new(&xs, out)?;
        let rg = self.rg(x.0) || self.rg(token.0);
        Ok(self.push(
            value,
            Op::MaskReplace {
                x: x.0,
                token: token.0,
                mask,
            },
            rg,
        ))
    }

    /// `x[b, index, :]` for every `b`: `[b, t, d] -> [b, d]`.
    pub fn select_token(&mut self, x: Var, index: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 3 || index >= xs[1] {
            return Err(Error::dimension("select_token", &xs, &[index]));
        }
        let (batch, t, d) = (xs[0], xs[1], xs[2]);
        let xd = self.value(x).data();
        let mut out = Vec::with_capacity(batch * d);
        for b in 0..batch {
            let start = (b * t + index) * d;
            out.extend_from_slice(&xd[start..start + d]);
        }
        let value = Tensor::new(&[batch, d], out)?;
        let rg = self.rg(x.0);
        Ok(self.push(value, Op::SelectToken { x: x.0, index }, rg))
    }

    // ---------------------------------------------------------------- backward

    /// Reverse pass from a scalar `loss`. Consumes the tape.
    pub fn backward(self, loss: Var) -> Result<Gradients<T>> {
        let loss_value = self.value(loss);
        if loss_value.numel() != 1 {
            return Err(Error::Usage(format!(
                "backward needs a scalar loss, got shape {:?}",
                loss_value.shape()
            )));
        }
        let l = loss_value.data()[0];
        if !l.is_finite() {
            return Err(Error::NonFiniteLoss(l.as_f64()));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        if self.nodes[loss.0].requires_grad {
            grads[loss.0] = Some(vec![T::one()]);
        }
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            self.backprop_node(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Gradients {
            shapes: self.nodes.iter().map(|n| n.value.shape().to_vec()).collect(),
            grads,
            params: self.params,
        })
    }

    fn backprop_node(&self, i: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[i];
        let val = |j: usize| self.nodes[j].value.data();
        match &node.op {
            Op::Leaf => {}
            Op::Gemm {
                a,
                b,
                batch,
                m,
                k,
                n,
                ta,
                tb,
            } => {
                let (a, b, m, k, n, ta, tb) = (*a, *b, *m, *k, *n, *ta, *tb);
                let (ad, bd) = (val(a), val(b));
                if self.rg(a) {
                    let ga = acc(grads, a, self.nodes[a].value.numel());
                    for s in 0..*batch {
                        let gc = &g[s * m * n..(s + 1) * m * n];
                        let bs = &bd[s * k * n..(s + 1) * k * n];
                        let out = &mut ga[s * m * k..(s + 1) * m * k];
                        if ta {
                            T::gemm(k, n, m, bs, tb, gc, true, out, true);
                        } else {
                            T::gemm(m, n, k, gc, false, bs, !tb, out, true);
                        }
                    }
                }
                if self.rg(b) {
                    let gb = acc(grads, b, self.nodes[b].value.numel());
                    for s in 0..*batch {
                        let gc = &g[s * m * n..(s + 1) * m * n];
                        let as_ = &ad[s * m * k..(s + 1) * m * k];
                        let out = &mut gb[s * k * n..(s + 1) * k * n];
                        if tb {
                            T::gemm(n, m, k, gc, true, as_, ta, out, true);
                        } else {
                            T::gemm(k, m, n, as_, !ta, gc, false, out, true);
                        }
                    }
                }
            }
            Op::Binary { a, b, kind } => {
                let (a, b) = (*a, *b);
                let (ad, bd) = (val(a), val(b));
                let (la, lb) = (ad.len(), bd.len());
                let small = la.min(lb).max(1);
                let a_full = la == g.len();
                let b_full = lb == g.len();
                if self.rg(a) {
                    let ga = acc(grads, a, la);
                    for (c, gc) in g.chunks(small).enumerate() {
                        let off = c * small;
                        for (j, &gv) in gc.iter().enumerate() {
                            let ia = if a_full { off + j } else { j };
                            let ib = if b_full { off + j } else { j };
                            let d = match kind {
                                BinaryKind::Add | BinaryKind::Sub => gv,
                                BinaryKind::Mul => gv * bd[ib],
                                BinaryKind::Div => gv / bd[ib],
                            };
                            ga[ia] = ga[ia] + d;
                        }
                    }
                }
                if self.rg(b) {
                    let gb = acc(grads, b, lb);
                    for (c, gc) in g.chunks(small).enumerate() {
                        let off = c * small;
                        for (j, &gv) in gc.iter().enumerate() {
                            let ia = if a_full { off + j } else { j };
                            let ib = if b_full { off + j } else { j };
                            let bv = bd[ib];
                            let d = match kind {
                                BinaryKind::Add => gv,
                                BinaryKind::Sub => -gv,
                                BinaryKind::Mul => gv * ad[ia],
                                BinaryKind::Div => -gv * ad[ia] / (bv * bv),
                            };
                            gb[ib] = gb[ib] + d;
                        }
                    }
                }
            }
            Op::Scale { x, c } => {
                let gx = acc(grads, *x, g.len());
                for (o, &gv) in gx.iter_mut().zip(g) {
                    *o = *o + gv * *c;
                }
            }
            Op::Unary { x, kind } => {
                let xd = val(*x);
                let yd = node.value.data();
                let gx = acc(grads, *x, xd.len());
                for idx in 0..g.len() {
                    let d = match kind {
                        UnaryKind::Relu => {
                            if xd[idx] > T::zero() {
                                g[idx]
                            } else {
                                T::zero()
                            }
                        }
                        UnaryKind::Gelu => g[idx] * gelu_grad(xd[idx]),
                        UnaryKind::Exp => g[idx] * yd[idx],
                        UnaryKind::Log => g[idx] / xd[idx],
                        UnaryKind::Sqrt => g[idx] / (T::lit(2.0) * yd[idx]),
                    };
                    gx[idx] = gx[idx] + d;
                }
            }
            Op::SumAll { x } => {
                let gx = acc(grads, *x, self.nodes[*x].value.numel());
                for o in gx.iter_mut() {
                    *o = *o + g[0];
                }
            }
            Op::MeanAll { x } => {
                let numel = self.nodes[*x].value.numel();
                let share = g[0] / T::from_usize(numel).unwrap();
                let gx = acc(grads, *x, numel);
                for o in gx.iter_mut() {
                    *o = *o + share;
                }
            }
            Op::SumLast { x } => {
                let numel = self.nodes[*x].value.numel();
                let n = self.nodes[*x].value.cols();
                let gx = acc(grads, *x, numel);
                for (r, row) in gx.chunks_mut(n.max(1)).enumerate() {
                    for o in row.iter_mut() {
                        *o = *o + g[r];
                    }
                }
            }
            Op::Softmax { x } => {
                let y = node.value.data();
                let n = node.value.cols();
                let gx = acc(grads, *x, y.len());
                for ((gr, yr), or) in g.chunks(n).zip(y.chunks(n)).zip(gx.chunks_mut(n)) {
                    let dot: T = gr.iter().zip(yr).map(|(&a, &b)| a * b).sum();
                    for j in 0..n {
                        or[j] = or[j] + yr[j] * (gr[j] - dot);
                    }
                }
            }
            Op::LogSumExp { x } => {
                let xd = val(*x);
                let n = self.nodes[*x].value.cols();
                let lse = node.value.data();
                let gx = acc(grads, *x, xd.len());
                for (r, (xr, or)) in xd.chunks(n).zip(gx.chunks_mut(n)).enumerate() {
                    for j in 0..n {
                        or[j] = or[j] + g[r] * (xr[j] - lse[r]).exp();
                    }
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let d = node.value.cols();
                let gd = val(*gain);
                if self.rg(*gain) {
                    let gg = acc(grads, *gain, d);
                    for (gr, hr) in g.chunks(d).zip(xhat.chunks(d)) {
                        for j in 0..d {
                            gg[j] = gg[j] + gr[j] * hr[j];
                        }
                    }
                }
                if self.rg(*bias) {
                    let gb = acc(grads, *bias, d);
                    for gr in g.chunks(d) {
                        for j in 0..d {
                            gb[j] = gb[j] + gr[j];
                        }
                    }
                }
                if self.rg(*x) {
                    let inv_d = T::one() / T::from_usize(d).unwrap();
                    let gx = acc(grads, *x, g.len());
                    let mut dh = vec![T::zero(); d];
                    for (r, ((gr, hr), or)) in g
                        .chunks(d)
                        .zip(xhat.chunks(d))
                        .zip(gx.chunks_mut(d))
                        .enumerate()
                    {
                        let mut mean_dh = T::zero();
                        let mut mean_dh_h = T::zero();
                        for j in 0..d {
                            dh[j] = gr[j] * gd[j];
                            mean_dh = mean_dh + dh[j];
                            mean_dh_h = mean_dh_h + dh[j] * hr[j];
                        }
                        mean_dh = mean_dh * inv_d;
                        mean_dh_h = mean_dh_h * inv_d;
                        for j in 0..d {
                            or[j] = or[j] + rstd[r] * (dh[j] - mean_dh - hr[j] * mean_dh_h);
                        }
                    }
                }
            }
            Op::MulConst { x, factor } => {
                let gx = acc(grads, *x, g.len());
                for ((o, &gv), &f) in gx.iter_mut().zip(g).zip(factor) {
                    *o = *o + gv * f;
                }
            }
            Op::Reshape { x } => {
                let gx = acc(grads, *x, g.len());
                for (o, &gv) in gx.iter_mut().zip(g) {
                    *o = *o + gv;
                }
            }
            Op::Permute { x, perm } => {
                let offsets = permute_offsets(self.nodes[*x].value.shape(), perm);
                let gx = acc(grads, *x, g.len());
                for (&o, &gv) in offsets.iter().zip(g) {
                    gx[o] = gx[o] + gv;
                }
            }
            Op::ConcatLast { a, b } => {
                let (ca, cb) = (self.nodes[*a].value.cols(), self.nodes[*b].value.cols());
                let rows = node.value.rows();
                if self.rg(*a) {
                    let ga = acc(grads, *a, rows * ca);
                    for r in 0..rows {
                        for j in 0..ca {
                            ga[r * ca + j] = ga[r * ca + j] + g[r * (ca + cb) + j];
                        }
                    }
                }
                if self.rg(*b) {
                    let gb = acc(grads, *b, rows * cb);
                    for r in 0..rows {
                        for j in 0..cb {
                            gb[r * cb + j] = gb[r * cb + j] + g[r * (ca + cb) + ca + j];
                        }
                    }
                }
            }
            Op::Gather { x, idx } => {
                let cols = self.nodes[*x].value.cols();
                let gx = acc(grads, *x, self.nodes[*x].value.numel());
                for (r, &c) in idx.iter().enumerate() {
                    gx[r * cols + c] = gx[r * cols + c] + g[r];
                }
            }
            Op::NormalizeRows { x, norms, eps } => {
                let d = node.value.cols();
                let y = node.value.data();
                let gx = acc(grads, *x, y.len());
                for (r, ((gr, yr), or)) in g.chunks(d).zip(y.chunks(d)).zip(gx.chunks_mut(d)).enumerate() {
                    if norms[r] > *eps {
                        let dot: T = gr.iter().zip(yr).map(|(&a, &b)| a * b).sum();
                        for j in 0..d {
                            or[j] = or[j] + (gr[j] - yr[j] * dot) / norms[r];
                        }
                    } else {
                        for j in 0..d {
                            or[j] = or[j] + gr[j] / *eps;
                        }
                    }
                }
            }
            Op::Tokenize { x, w, b } => {
                let xs = self.nodes[*x].value.shape();
                let (batch, m) = (xs[0], xs[1]);
                let d = self.nodes[*w].value.cols();
                let xd = val(*x);
                if self.rg(*w) {
                    let gw = acc(grads, *w, m * d);
                    for bi in 0..batch {
                        for f in 0..m {
                            let v = xd[bi * m + f];
                            let gr = &g[(bi * m + f) * d..(bi * m + f + 1) * d];
                            for j in 0..d {
                                gw[f * d + j] = gw[f * d + j] + gr[j] * v;
                            }
                        }
                    }
                }
                if self.rg(*b) {
                    let gb = acc(grads, *b, m * d);
                    for (row, gr) in g.chunks(d).enumerate() {
                        let f = row % m;
                        for j in 0..d {
                            gb[f * d + j] = gb[f * d + j] + gr[j];
                        }
                    }
                }
                if self.rg(*x) {
                    let wd = val(*w);
                    let gx = acc(grads, *x, batch * m);
                    for (row, gr) in g.chunks(d).enumerate() {
                        let f = row % m;
                        let dot: T = gr.iter().zip(&wd[f * d..(f + 1) * d]).map(|(&a, &b)| a * b).sum();
                        gx[row] = gx[row] + dot;
                    }
                }
            }
            Op::Prepend { x, token } => {
                let xs = self.nodes[*x].value.shape();
                let (batch, m, d) = (xs[0], xs[1], xs[2]);
                if self.rg(*token) {
                    let gt = acc(grads, *token, d);
                    for bi in 0..batch {
                        let gr = &g[bi * (m + 1) * d..bi * (m + 1) * d + d];
                        for j in 0..d {
                            gt[j] = gt[j] + gr[j];
                        }
                    }
                }
                if self.rg(*x) {
                    let gx = acc(grads, *x, batch * m * d);
                    for bi in 0..batch {
                        let src = &g[bi * (m + 1) * d + d..(bi + 1) * (m + 1) * d];
                        let dst = &mut gx[bi * m * d..(bi + 1) * m * d];
                        for (o, &gv) in dst.iter_mut().zip(src) {
                            *o = *o + gv;
                        }
                    }
                }
            }
            Op::MaskReplace { x, token, mask } => {
                let d = node.value.cols();
                if self.rg(*token) {
                    let gt = acc(grads, *token, d);
                    for (gr, &masked) in g.chunks(d).zip(mask) {
                        if masked {
                            for j in 0..d {
                                gt[j] = gt[j] + gr[j];
                            }
                        }
                    }
                }
                if self.rg(*x) {
                    let gx = acc(grads, *x, g.len());
                    for ((or, gr), &masked) in gx.chunks_mut(d).zip(g.chunks(d)).zip(mask) {
                        if !masked {
                            for j in 0..d {
                                or[j] = or[j] + gr[j];
                            }
                        }
                    }
                }
            }
            Op::SelectToken { x, index } => {
                let xs = self.nodes[*x].value.shape();
                let (batch, t, d) = (xs[0], xs[1], xs[2]);
                let gx = acc(grads, *x, batch * t * d);
                for bi in 0..batch {
                    let start = (bi * t + index) * d;
                    for j in 0..d {
                        gx[start + j] = gx[start + j] + g[bi * d + j];
                    }
                }
            }
        }
    }
}

fn acc<T: Real>(grads: &mut [Option<Vec<T>>], j: usize, len: usize) -> &mut Vec<T> {
    grads[j].get_or_insert_with(|| vec![T::zero(); len])
}

/// For each output element of `permute(shape, perm)`, the flat input offset.
fn permute_offsets(shape: &[usize], perm: &[usize]) -> Vec<usize> {
    let nd = shape.len();
    let numel: usize = shape.iter().product();
    if nd == 0 {
        return vec![0; numel];
    }
    let mut in_strides = vec![1usize; nd];
    for i in (0..nd - 1).rev() {
        in_strides[i] = in_strides[i + 1] * shape[i + 1];
    }
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let mut offsets = Vec::with_capacity(numel);
    if numel == 0 {
        return offsets;
    }
    let last = nd - 1;
    let (len, step) = (out_shape[last], strides[last]);
    let mut index = vec![0usize; nd];
    let mut base = 0usize;
    for _ in 0..numel / len {
        offsets.extend((0..len).map(|j| base + j * step));
        for ax in (0..last).rev() {
            index[ax] += 1;
            base += strides[ax];
            if index[ax] < out_shape[ax] {
                break;
            }
            base -= strides[ax] * out_shape[ax];
            index[ax] = 0;
        }
    }
    offsets
}

/// Result of [`Tape::backward`].
#[derive(Debug)]
pub struct Gradients<T> {
    shapes: Vec<Vec<usize>>,
    grads: Vec<Option<Vec<T>>>,
    params: HashMap<ParamKey, Var>,
}

impl<T: Real> Gradients<T> {
    /// Gradient with respect to `v`; zeros when the loss does not depend on it.
    pub fn wrt(&self, v: Var) -> Tensor<T> {
        let shape = &self.shapes[v.0];
        match &self.grads[v.0] {
            Some(g) => Tensor::new(shape, g.clone()).expect("gradient shape"),
            None => Tensor::zeros(shape),
        }
    }

    /// Gradient for a parameter registered with [`Tape::param`].
    pub fn param(&self, p: &Param<T>) -> Option<Tensor<T>> {
        self.params.get(&p.key()).map(|&v| self.wrt(v))
    }

    /// Borrowed flat gradient buffer for a parameter, if it received one.
    pub fn param_slice(&self, key: ParamKey) -> Option<&[T]> {
        let v = self.params.get(&key)?;
        self.grads[v.0].as_deref()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::new(shape, data.to_vec()).unwrap()
    }

    #[test]
    fn matmul_identity_and_values() {
        let mut tape = Tape::<f64>::new();
        let a = tape.constant(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let eye = tape.constant(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
        let b = tape.constant(t(&[2, 1], &[5.0, 6.0]));
        let ai = tape.matmul(a, eye).unwrap();
        assert_eq!(tape.value(ai).data(), &[1.0, 2.0, 3.0, 4.0]);
        let ab = tape.matmul(a, b).unwrap();
        assert_eq!(tape.value(ab).data(), &[17.0, 39.0]);
    }

    #[test]
    fn matmul_shape_error_names_shapes() {
        let mut tape = Tape::<f64>::new();
        let a = tape.constant(Tensor::zeros(&[2, 3]));
        let b = tape.constant(Tensor::zeros(&[2, 3]));
        let err = tape.matmul(a, b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]"), "{msg}");
    }

    #[test]
    fn softmax_cases() {
        let mut tape = Tape::<f64>::new();
        let c = tape.constant(t(&[3], &[0.7, 0.7, 0.7]));
        let s = tape.softmax(c).unwrap();
        for &v in tape.value(s).data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-12);
        }
        let x = tape.constant(t(&[2], &[0.0, 2f64.ln()]));
        let s = tape.softmax(x).unwrap();
        let d = tape.value(s).data();
        assert!((d[0] - 1.0 / 3.0).abs() < 1e-12 && (d[1] - 2.0 / 3.0).abs() < 1e-12);
        let base = tape.constant(t(&[4], &[0.1, -2.0, 3.0, 0.5]));
        let shifted = tape.constant(t(&[4], &[100.1, 98.0, 103.0, 100.5]));
        let a = tape.softmax(base).unwrap();
        let b = tape.softmax(shifted).unwrap();
        for (x, y) in tape.value(a).data().iter().zip(tape.value(b).data()) {
            assert!((x - y).abs() < 1e-12);
        }
        let empty = tape.constant(Tensor::zeros(&[2, 0]));
        assert!(tape.softmax(empty).is_err());
    }

    #[test]
    fn layer_norm_constant_and_standard_rows() {
        let mut tape = Tape::<f64>::new();
        let g = tape.constant(Tensor::ones(&[3]));
        let b = tape.constant(Tensor::zeros(&[3]));
        let x = tape.constant(t(&[2, 3], &[5.0, 5.0, 5.0, 1.0, 2.0, 3.0]));
        let y = tape.layer_norm(x, g, b, 1e-5).unwrap();
        let out = tape.value(y);
        assert!(out.row(0).iter().all(|v| v.abs() < 1e-12));
        let row = out.row(1);
        let mean: f64 = row.iter().sum::<f64>() / 3.0;
        let var: f64 = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 3.0;
        assert!(mean.abs() < 1e-6);
        assert!((var - 1.0).abs() < 1e-4, "var {var}");
    }

    #[test]
    fn elementwise_values() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(t(&[3], &[-1.0, 0.0, 2.0]));
        let r = tape.relu(x);
        assert_eq!(tape.value(r).data(), &[0.0, 0.0, 2.0]);
        let y = tape.constant(t(&[3], &[2.0, 4.0, 6.0]));
        let m = tape.mean(y).unwrap();
        assert_eq!(tape.value(m).item().unwrap(), 4.0);
    }

    #[test]
    fn broadcast_add_trailing_only() {
        let mut tape = Tape::<f64>::new();
        let a = tape.leaf(t(&[2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]), true);
        let b = tape.leaf(t(&[3], &[10.0, 20.0, 30.0]), true);
        let c = tape.add(a, b).unwrap();
        assert_eq!(tape.value(c).data(), &[11.0, 22.0, 33.0, 14.0, 25.0, 36.0]);
        let bad = tape.constant(Tensor::zeros(&[2]));
        assert!(tape.add(a, bad).is_err());
        let s = tape.sum(c);
        let grads = tape.backward(s).unwrap();
        assert_eq!(grads.wrt(b).data(), &[2.0, 2.0, 2.0]);
        assert_eq!(grads.wrt(a).data(), &[1.0; 6]);
    }

    #[test]
    fn division_by_zero_in_verification_precision() {
        let mut tape = Tape::<f64>::new();
        let a = tape.constant(t(&[2], &[1.0, 1.0]));
        let b = tape.constant(t(&[2], &[1.0, 0.0]));
        assert!(matches!(tape.div(a, b), Err(Error::Arithmetic(_))));

        let mut tape = Tape::<f32>::new();
        let a = tape.constant(Tensor::new(&[1], vec![1.0f32]).unwrap());
        let b = tape.constant(Tensor::new(&[1], vec![0.0f32]).unwrap());
        let q = tape.div(a, b).unwrap();
        assert!(tape.value(q).data()[0].is_infinite());
    }

    #[test]
    fn backward_closed_forms() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(t(&[3], &[1.0, 2.0, 3.0]), true);
        let sq = tape.mul(x, x).unwrap();
        let loss = tape.sum(sq);
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.wrt(x).data(), &[2.0, 4.0, 6.0]);

        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(t(&[3], &[1.0, 2.0, 3.0]), true);
        let c = tape.constant(t(&[1], &[5.0]));
        let loss = tape.sum(c);
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.wrt(x).data(), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn backward_rejects_non_scalar_and_non_finite() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(t(&[2], &[1.0, 2.0]), true);
        let y = tape.scale(x, 2.0);
        assert!(matches!(tape.backward(y), Err(Error::Usage(_))));

        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(t(&[1], &[0.0]), true);
        let l = tape.log(x);
        let s = tape.sum(l);
        assert!(matches!(tape.backward(s), Err(Error::NonFiniteLoss(_))));
    }

    #[test]
    fn dropout_modes() {
        let mut tape = Tape::<f64>::new();
        let mut rng = Rng::new(1, "dropout");
        let x = tape.constant(Tensor::ones(&[100]));
        assert_eq!(tape.dropout(x, 0.0, &mut rng, true).unwrap(), x);
        assert_eq!(tape.dropout(x, 0.7, &mut rng, false).unwrap(), x);
        assert!(matches!(tape.dropout(x, 1.0, &mut rng, true), Err(Error::Config(_))));

        let n = 100_000;
        let big = tape.constant(Tensor::ones(&[n]));
        let y = tape.dropout(big, 0.5, &mut rng, true).unwrap();
        let zeros = tape.value(y).data().iter().filter(|v| **v == 0.0).count();
        let frac = zeros as f64 / n as f64;
        assert!((frac - 0.5).abs() < 0.01, "zero fraction {frac}");
        assert!(tape.value(y).data().iter().all(|&v| v == 0.0 || v == 2.0));
    }

    #[test]
    fn permute_round_trip() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::from_fn(&[2, 3, 4], |i| i as f64));
        let p = tape.permute(x, &[1, 2, 0]).unwrap();
        assert_eq!(tape.shape(p), &[3, 4, 2]);
        // out[j, k, i] = x[i, j, k]
        assert_eq!(tape.value(p).data()[(1 * 4 + 2) * 2 + 1], (1 * 12 + 1 * 4 + 2) as f64);
        let back = tape.permute(p, &[2, 0, 1]).unwrap();
        assert_eq!(tape.value(back).data(), tape.value(x).data());
    }

    #[test]
    fn tokenize_prepend_mask_select() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(t(&[1, 2], &[2.0, -1.0]));
        let w = tape.constant(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let b = tape.constant(t(&[2, 2], &[0.5, 0.5, 1.0, 1.0]));
        let tok = tape.tokenize(x, w, b).unwrap();
        assert_eq!(tape.value(tok).data(), &[2.5, 4.5, -2.0, -3.0]);
        let cls = tape.constant(t(&[2], &[9.0, 9.0]));
        let stack = tape.prepend_token(tok, cls).unwrap();
        assert_eq!(tape.shape(stack), &[1, 3, 2]);
        let m = tape.constant(t(&[2], &[7.0, 7.0]));
        let masked = tape.mask_replace(tok, m, vec![false, true]).unwrap();
        assert_eq!(tape.value(masked).data(), &[2.5, 4.5, 7.0, 7.0]);
        let first = tape.select_token(stack, 0).unwrap();
        assert_eq!(tape.value(first).data(), &[9.0, 9.0]);
    }
}
