use super::config::FttConfig;
use super::layers::{linear_stack, mlp_forward, uniform, LayerNormParams, Linear};
use crate::error::{Error, Result};
use crate::numerics::{Param, Real, Rng, Tape, Tensor, Var};

/// Token masking for one forward pass.
#[derive(Debug, Clone, Copy, Default)]
pub struct Masking<'a> {
    /// Probability of replacing each feature token by the mask token.
    pub rate: f64,
    /// Cells (row-major, `[batch, features]`) that are always replaced.
    pub forced: Option<&'a [bool]>,
}

impl<'a> Masking<'a> {
    pub const NONE: Masking<'static> = Masking { rate: 0.0, forced: None };

    pub fn rate(rate: f64) -> Self {
        Masking { rate, forced: None }
    }

    pub fn forced(mask: &'a [bool]) -> Self {
        Masking { rate: 0.0, forced: Some(mask) }
    }
}

/// Random streams consumed by a forward pass.
#[derive(Debug, Clone)]
pub struct Streams {
    pub mask: Rng,
    pub dropout: Rng,
}

impl Streams {
    pub fn new(seed: u64) -> Self {
        Streams {
            mask: Rng::new(seed, "mask"),
            dropout: Rng::new(seed, "dropout"),
        }
    }

    pub fn fork(&self, sub: &str) -> Self {
        Streams {
            mask: self.mask.fork(sub),
            dropout: self.dropout.fork(sub),
        }
    }
}

#[derive(Debug, Clone)]
pub struct EncoderLayer<T> {
    pub ln_attn: LayerNormParams<T>,
    pub q: Linear<T>,
    pub k: Linear<T>,
    pub v: Linear<T>,
    pub out: Linear<T>,
    pub ln_ffn: LayerNormParams<T>,
    pub ffn_in: Linear<T>,
    pub ffn_out: Linear<T>,
}

impl<T: Real> EncoderLayer<T> {
    fn new(cfg: &FttConfig, rng: &mut Rng) -> Self {
        let d = cfg.token_dim;
        let h = cfg.ffn_hidden();
        EncoderLayer {
            ln_attn: LayerNormParams::new(d),
            q: Linear::new(d, d, rng),
            k: Linear::new(d, d, rng),
            v: Linear::new(d, d, rng),
            out: Linear::new(d, d, rng),
            ln_ffn: LayerNormParams::new(d),
            ffn_in: Linear::new(d, h, rng),
            ffn_out: Linear::new(h, d, rng),
        }
    }

    fn split_heads(tape: &mut Tape<T>, x: Var, b: usize, t: usize, heads: usize, dh: usize) -> Result<Var> {
        if heads == 1 {
            return Ok(x);
        }
        let x = tape.reshape(x, &[b, t, heads, dh])?;
        let x = tape.permute(x, &[0, 2, 1, 3])?;
        tape.reshape(x, &[b * heads, t, dh])
    }

    /// One pre-norm block. Returns the new stack and the attention weights.
    #[allow(clippy::too_many_arguments)]
    fn forward(
        &self,
        tape: &mut Tape<T>,
        x: Var,
        cfg: &FttConfig,
        rng: &mut Rng,
        training: bool,
    ) -> Result<(Var, Var)> {
        let shape = tape.shape(x).to_vec();
        let (b, t, d) = (shape[0], shape[1], shape[2]);
        let heads = cfg.n_heads;
        let dh = d / heads;

        let h = self.ln_attn.forward(tape, x)?;
        let q = self.q.forward(tape, h)?;
        let k = self.k.forward(tape, h)?;
        let v = self.v.forward(tape, h)?;
        let (q, k, v) = if heads == 1 {
            (
                tape.reshape(q, &[b, t, dh])?,
                tape.reshape(k, &[b, t, dh])?,
                tape.reshape(v, &[b, t, dh])?,
            )
        } else {
            (
                Self::split_heads(tape, q, b, t, heads, dh)?,
                Self::split_heads(tape, k, b, t, heads, dh)?,
                Self::split_heads(tape, v, b, t, heads, dh)?,
            )
        };
        let scores = tape.bmm(q, k, false, true)?;
        let scores = tape.scale(scores, 1.0 / (dh as f64).sqrt());
        let attn = tape.softmax(scores)?;
        let attn_d = tape.dropout(attn, cfg.attention_dropout, rng, training)?;
        let ctx = tape.bmm(attn_d, v, false, false)?;
        let ctx = if heads == 1 {
            tape.reshape(ctx, &[b, t, d])?
        } else {
            let c = tape.reshape(ctx, &[b, heads, t, dh])?;
            let c = tape.permute(c, &[0, 2, 1, 3])?;
            tape.reshape(c, &[b, t, d])?
        };
        let a = self.out.forward(tape, ctx)?;
        let a = tape.dropout(a, cfg.residual_dropout, rng, training)?;
        let x = tape.add(x, a)?;

        let h = self.ln_ffn.forward(tape, x)?;
        let f = self.ffn_in.forward(tape, h)?;
        let f = tape.gelu(f);
        let f = tape.dropout(f, cfg.ffn_dropout, rng, training)?;
        let f = self.ffn_out.forward(tape, f)?;
        let f = tape.dropout(f, cfg.residual_dropout, rng, training)?;
        let x = tape.add(x, f)?;
        Ok((x, attn))
    }

    fn named<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Param<T>)>) {
        self.ln_attn.named(&format!("{prefix}.ln_attn"), out);
        self.q.named(&format!("{prefix}.q"), out);
        self.k.named(&format!("{prefix}.k"), out);
        self.v.named(&format!("{prefix}.v"), out);
        self.out.named(&format!("{prefix}.out"), out);
        self.ln_ffn.named(&format!("{prefix}.ln_ffn"), out);
        self.ffn_in.named(&format!("{prefix}.ffn_in"), out);
        self.ffn_out.named(&format!("{prefix}.ffn_out"), out);
    }

    fn collect_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Param<T>>) {
        self.ln_attn.collect_mut(out);
        self.q.collect_mut(out);
        self.k.collect_mut(out);
        self.v.collect_mut(out);
        self.out.collect_mut(out);
        self.ln_ffn.collect_mut(out);
        self.ffn_in.collect_mut(out);
        self.ffn_out.collect_mut(out);
    }
}

/// Everything an encoder pass produces.
#[derive(Debug, Clone)]
pub struct EncoderOutput {
    /// `[batch, d]`, final layer norm applied.
    pub class_latent: Var,
    /// `[batch, M + 1, d]`, class token at index 0, before the final norm.
    pub tokens: Var,
    /// One `[batch·heads, M + 1, M + 1]` weight tensor per layer.
    pub attention: Vec<Var>,
    /// Feature tokens replaced by the mask token, `[batch, M]` row-major.
    pub applied_mask: Vec<bool>,
}

/// FT-Transformer: per-feature tokenizer, class token, learned mask token,
/// pre-norm encoder stack, and either a projection head (pretraining) or a
/// classification head (finetuning).
#[derive(Debug, Clone)]
pub struct FtTransformer<T> {
    config: FttConfig,
    pub tok_w: Param<T>,
    pub tok_b: Param<T>,
    pub cls_token: Param<T>,
    pub mask_token: Param<T>,
    pub layers: Vec<EncoderLayer<T>>,
    pub final_ln: LayerNormParams<T>,
    pub projection: Option<Vec<Linear<T>>>,
    pub head: Option<Vec<Linear<T>>>,
}

impl<T: Real> FtTransformer<T> {
    /// Fresh model with a projection head and no classification head.
    pub fn new(config: FttConfig, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        let (m, d) = (config.n_features, config.token_dim);
        let bound = 1.0 / (d as f64).sqrt();
        let tok_w = Param::new(uniform(&[m, d], bound, rng));
        let tok_b = Param::new(uniform(&[m, d], bound, rng));
        let cls_token = Param::new(uniform(&[d], bound, rng));
        let mask_token = Param::new(uniform(&[d], bound, rng));
        let layers = (0..config.n_layers).map(|_| EncoderLayer::new(&config, rng)).collect();
        let mut widths = vec![d];
        widths.extend_from_slice(&config.projection_dims);
        let projection = Some(linear_stack(&widths, rng));
        Ok(FtTransformer {
            final_ln: LayerNormParams::new(d),
            config,
            tok_w,
            tok_b,
            cls_token,
            mask_token,
            layers,
            projection,
            head: None,
        })
    }

    pub fn config(&self) -> &FttConfig {
        &self.config
    }

    pub fn n_features(&self) -> usize {
        self.config.n_features
    }

    /// `x[b, f] · W_f + b_f` for every feature: `[batch, M] -> [batch, M, d]`.
    pub fn tokenize(&self, tape: &mut Tape<T>, x: Var) -> Result<Var> {
        let shape = tape.shape(x);
        if shape.len() != 2 || shape[1] != self.config.n_features {
            return Err(Error::dimension("tokenize", shape, &[self.config.n_features]));
        }
        let w = tape.param(&self.tok_w);
        let b = tape.param(&self.tok_b);
        tape.tokenize(x, w, b)
    }

    /// Replaces each feature token with the mask token with probability
    /// `masking.rate`, and always where `masking.forced` is set. Draws come
    /// from `rng` on every call.
    pub fn apply_mtr_mask(
        &self,
        tape: &mut Tape<T>,
        tokens: Var,
        masking: &Masking<'_>,
        rng: &mut Rng,
    ) -> Result<(Var, Vec<bool>)> {
        let shape = tape.shape(tokens).to_vec();
        let cells = shape[0] * shape[1];
        if !(0.0..=1.0).contains(&masking.rate) {
            return Err(Error::Config(format!("mask rate must be in [0, 1], got {}", masking.rate)));
        }
        if let Some(f) = masking.forced {
            if f.len() != cells {
                return Err(Error::dimension("apply_mtr_mask", &shape[..2], &[f.len()]));
            }
        }
        let mut mask = vec![false; cells];
        if masking.rate > 0.0 {
            for m in mask.iter_mut() {
                *m = rng.bernoulli(masking.rate);
            }
        }
        if let Some(f) = masking.forced {
            for (m, &f) in mask.iter_mut().zip(f) {
                *m |= f;
            }
        }
        if !mask.iter().any(|&m| m) {
            return Ok((tokens, mask));
        }
        let token = tape.param(&self.mask_token);
        let out = tape.mask_replace(tokens, token, mask.clone())?;
        Ok((out, mask))
    }

    /// Runs the encoder over an already tokenised (and possibly masked) stack.
    pub fn encode_tokens(
        &self,
        tape: &mut Tape<T>,
        tokens: Var,
        rng: &mut Rng,
        training: bool,
    ) -> Result<(Var, Var, Vec<Var>)> {
        let cls = tape.param(&self.cls_token);
        let mut x = tape.prepend_token(tokens, cls)?;
        let mut attention = Vec::with_capacity(self.layers.len());
        for (i, layer) in self.layers.iter().enumerate() {
            let (next, attn) = layer.forward(tape, x, &self.config, rng, training)?;
            if !tape.value(next).is_finite() {
                return Err(Error::Numeric(format!("non-finite activation after encoder layer {i}")));
            }
            x = next;
            attention.push(attn);
        }
        let first = tape.select_token(x, 0)?;
        let latent = self.final_ln.forward(tape, first)?;
        Ok((latent, x, attention))
    }

    /// Tokenise, mask, prepend the class token and encode.
    pub fn encode(
        &self,
        tape: &mut Tape<T>,
        x: &Tensor<T>,
        masking: &Masking<'_>,
        streams: &mut Streams,
        training: bool,
    ) -> Result<EncoderOutput> {
        let xv = tape.constant(x.clone());
        let tokens = self.tokenize(tape, xv)?;
        let (tokens, applied_mask) = self.apply_mtr_mask(tape, tokens, masking, &mut streams.mask)?;
        let (class_latent, tokens, attention) = self.encode_tokens(tape, tokens, &mut streams.dropout, training)?;
        Ok(EncoderOutput {
            class_latent,
            tokens,
            attention,
            applied_mask,
        })
    }

    pub fn project(&self, tape: &mut Tape<T>, latent: Var) -> Result<Var> {
        let head = self
            .projection
            .as_ref()
            .ok_or_else(|| Error::State("projection head removed; model is set up for finetuning".into()))?;
        mlp_forward(head, tape, latent)
    }

    pub fn classify(&self, tape: &mut Tape<T>, latent: Var) -> Result<Var> {
        let head = self
            .head
            .as_ref()
            .ok_or_else(|| Error::State("finetune not initialized: no classification head".into()))?;
        mlp_forward(head, tape, latent)
    }

    /// Projection of the class latent for a batch.
    pub fn forward_projection(
        &self,
        tape: &mut Tape<T>,
        x: &Tensor<T>,
        masking: &Masking<'_>,
        streams: &mut Streams,
        training: bool,
    ) -> Result<Var> {
        let enc = self.encode(tape, x, masking, streams, training)?;
        self.project(tape, enc.class_latent)
    }

    pub fn forward_logits(
        &self,
        tape: &mut Tape<T>,
        x: &Tensor<T>,
        masking: &Masking<'_>,
        streams: &mut Streams,
        training: bool,
    ) -> Result<Var> {
        let enc = self.encode(tape, x, masking, streams, training)?;
        self.classify(tape, enc.class_latent)
    }

    /// Drops the projection head and attaches a new classification head
    /// `d → d → C`. Backbone parameters are kept as they are.
    pub fn start_finetune(&mut self, rng: &mut Rng) {
        let d = self.config.token_dim;
        self.projection = None;
        self.head = Some(linear_stack(&[d, d, self.config.n_classes], rng));
    }

    pub fn has_head(&self) -> bool {
        self.head.is_some()
    }

    pub fn has_projection(&self) -> bool {
        self.projection.is_some()
    }

    /// Parameters with stable dotted names.
    pub fn named_params(&self) -> Vec<(String, &Param<T>)> {
        let mut out = vec![
            ("tokenizer.w".to_string(), &self.tok_w),
            ("tokenizer.b".to_string(), &self.tok_b),
            ("cls_token".to_string(), &self.cls_token),
            ("mask_token".to_string(), &self.mask_token),
        ];
        for (i, layer) in self.layers.iter().enumerate() {
            layer.named(&format!("layers.{i}"), &mut out);
        }
        self.final_ln.named("final_ln", &mut out);
        if let Some(p) = &self.projection {
            for (i, l) in p.iter().enumerate() {
                l.named(&format!("projection.{i}"), &mut out);
            }
        }
        if let Some(h) = &self.head {
            for (i, l) in h.iter().enumerate() {
                l.named(&format!("head.{i}"), &mut out);
            }
        }
        out
    }

    /// Same order as [`named_params`](Self::named_params).
    pub fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        let mut out = vec![&mut self.tok_w, &mut self.tok_b, &mut self.cls_token, &mut self.mask_token];
        for layer in &mut self.layers {
            layer.collect_mut(&mut out);
        }
        self.final_ln.collect_mut(&mut out);
        if let Some(p) = &mut self.projection {
            for l in p {
                l.collect_mut(&mut out);
            }
        }
        if let Some(h) = &mut self.head {
            for l in h {
                l.collect_mut(&mut out);
            }
        }
        out
    }
}
