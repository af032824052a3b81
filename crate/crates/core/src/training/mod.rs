//! Optimisation loops: contrastive pretraining, supervised finetuning with
//! early stopping, and batched inference.

mod optim;

pub use optim::AdamW;

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{DuoFtt, Masking, Model, Streams};
use crate::numerics::{Real, Rng, Tape, Tensor};
use crate::objectives::{clip_tape, cross_entropy_tape, ntxent_tape};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    /// Overrides `learning_rate` during finetuning.
    pub finetune_learning_rate: Option<f64>,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub pretrain_epochs: usize,
    pub finetune_max_epochs: usize,
    pub patience: usize,
    /// Random mask-token replacement applied to training batches while finetuning.
    pub finetune_mask_rate: f64,
    /// Print one line per epoch and split to stdout.
    pub progress: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-4,
            finetune_learning_rate: None,
            weight_decay: 1e-5,
            batch_size: 128,
            pretrain_epochs: 200,
            finetune_max_epochs: 200,
            patience: 10,
            finetune_mask_rate: 0.0,
            progress: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let lr_ok = |v: f64| v.is_finite() && v > 0.0;
        if !lr_ok(self.learning_rate) || !self.finetune_learning_rate.is_none_or(lr_ok) {
            return Err(Error::Config("learning rate must be positive".into()));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::Config("weight decay must be non-negative".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be at least 1".into()));
        }
        if !(0.0..=1.0).contains(&self.finetune_mask_rate) {
            return Err(Error::Config("finetune mask rate must be in [0, 1]".into()));
        }
        if self.patience == 0 {
            return Err(Error::Config("patience must be at least 1".into()));
        }
        Ok(())
    }

    fn finetune_lr(&self) -> f64 {
        self.finetune_learning_rate.unwrap_or(self.learning_rate)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PretrainObjective {
    /// NTXent between clean and mask-token-corrupted views.
    Mtr,
    /// CLIP between the two arms of a fused model.
    Clip,
}

/// Per-epoch losses of one training phase.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    /// Mean per-sample loss on the training data.
    pub train_loss: Vec<f64>,
    /// Mean cross-entropy on validation data (finetuning only).
    pub val_loss: Vec<f64>,
    /// 1-based epoch whose weights were kept.
    pub best_epoch: Option<usize>,
    pub epochs_run: usize,
    pub wall_time_s: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StopSignal {
    Improved,
    Continue,
    Stop,
}

/// Stops after `patience` consecutive epochs without strict improvement.
#[derive(Debug, Clone)]
pub struct EarlyStopping {
    patience: usize,
    best: f64,
    best_epoch: Option<usize>,
    stale: usize,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        EarlyStopping {
            patience,
            best: f64::INFINITY,
            best_epoch: None,
            stale: 0,
        }
    }

    pub fn observe(&mut self, epoch: usize, loss: f64) -> StopSignal {
        if loss < self.best {
            self.best = loss;
            self.best_epoch = Some(epoch);
            self.stale = 0;
            return StopSignal::Improved;
        }
        self.stale += 1;
        if self.stale >= self.patience {
            StopSignal::Stop
        } else {
            StopSignal::Continue
        }
    }

    pub fn best(&self) -> Option<(usize, f64)> {
        self.best_epoch.map(|e| (e, self.best))
    }
}

/// Shuffled mini-batches. A trailing batch smaller than `min_last` is merged
/// into the one before it.
pub fn make_batches(n: usize, batch_size: usize, min_last: usize, rng: &mut Rng) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    rng.shuffle(&mut order);
    let mut out: Vec<Vec<usize>> = order.chunks(batch_size.max(1)).map(|c| c.to_vec()).collect();
    if out.len() > 1 && out.last().is_some_and(|b| b.len() < min_last) {
        let tail = out.pop().unwrap();
        out.last_mut().unwrap().extend(tail);
    }
    out
}

fn check_views<T: Real>(model: &Model<T>, views: &[Tensor<T>]) -> Result<usize> {
    if views.len() != model.n_views() {
        return Err(Error::Config(format!(
            "model takes {} view(s), got {}",
            model.n_views(),
            views.len()
        )));
    }
    let n = views[0].rows();
    if views.iter().any(|v| v.ndim() != 2 || v.rows() != n) {
        return Err(Error::dimension("views", views[0].shape(), views.last().unwrap().shape()));
    }
    Ok(n)
}

fn divergence(epoch: usize, step: usize, e: Error) -> Error {
    match e {
        Error::NonFiniteLoss(loss) => Error::Divergence { epoch, step, loss },
        Error::Numeric(_) => Error::Divergence {
            epoch,
            step,
            loss: f64::NAN,
        },
        other => other,
    }
}

fn progress(enabled: bool, epoch: usize, phase: &str, split: &str, loss: f64) {
    if enabled {
        println!("epoch={epoch} phase={phase} split={split} loss={loss:.6}");
    }
}

fn pretrain_loss<T: Real>(
    model: &Model<T>,
    tape: &mut Tape<T>,
    batch: &[&Tensor<T>],
    objective: PretrainObjective,
    streams: &mut Streams,
) -> Result<crate::numerics::Var> {
    match (objective, model) {
        (PretrainObjective::Mtr, Model::Ftt(m)) => {
            let cfg = m.config();
            let z = m.forward_projection(tape, batch[0], &Masking::NONE, streams, true)?;
            let zt = m.forward_projection(tape, batch[0], &Masking::rate(cfg.mask_rate), streams, true)?;
            ntxent_tape(tape, z, zt, cfg.temperature, cfg.symmetric_ntxent)
        }
        (PretrainObjective::Mtr, Model::Duo(d)) => {
            let cfg = d.arm_a.config();
            let (z, zt) = d.forward_pretrain(tape, batch[0], batch[1], cfg.mask_rate, streams, true)?;
            ntxent_tape(tape, z, zt, cfg.temperature, cfg.symmetric_ntxent)
        }
        (PretrainObjective::Clip, Model::Duo(d)) => {
            let (u, v) = d.clip_projections(tape, batch[0], batch[1], streams, true)?;
            clip_tape(tape, u, v, d.arm_a.config().temperature)
        }
        (PretrainObjective::Clip, _) => Err(Error::Config("CLIP pretraining needs a two-arm model".into())),
        (_, Model::Mlp(_)) => Err(Error::Config("the MLP baseline cannot be pretrained".into())),
    }
}

/// Self-supervised pretraining for a fixed number of epochs.
pub fn pretrain<T: Real>(
    model: &mut Model<T>,
    views: &[Tensor<T>],
    objective: PretrainObjective,
    cfg: &TrainConfig,
    seed: u64,
) -> Result<TrainReport> {
    cfg.validate()?;
    let n = check_views(model, views)?;
    if n < 2 {
        return Err(Error::Batch(format!("contrastive pretraining needs at least 2 samples, got {n}")));
    }
    if let Model::Ftt(m) = model {
        if objective == PretrainObjective::Mtr && m.config().mask_rate == 0.0 {
            log::warn!("mask rate is 0: clean and corrupted views differ only by dropout");
        }
    }
    let start = Instant::now();
    let mut opt = AdamW::<T>::new(cfg.learning_rate, cfg.weight_decay);
    let mut batch_rng = Rng::new(seed, "batch/pretrain");
    let mut streams = Streams::new(seed).fork("pretrain");
    let mut report = TrainReport::default();
    for epoch in 1..=cfg.pretrain_epochs {
        let mut total = 0.0;
        for (step, idx) in make_batches(n, cfg.batch_size, 2, &mut batch_rng).into_iter().enumerate() {
            let batch: Vec<Tensor<T>> = views.iter().map(|v| v.select_rows(&idx)).collect();
            let refs: Vec<&Tensor<T>> = batch.iter().collect();
            let mut tape = Tape::new();
            let loss = pretrain_loss(model, &mut tape, &refs, objective, &mut streams)
                .map_err(|e| divergence(epoch, step, e))?;
            let value = tape.value(loss).item()?.as_f64();
            let grads = tape.backward(loss).map_err(|e| divergence(epoch, step, e))?;
            opt.step(model.params_mut(), &grads).map_err(|e| divergence(epoch, step, e))?;
            total += value;
        }
        let mean = total / n as f64;
        progress(cfg.progress, epoch, "pretrain", "train", mean);
        report.train_loss.push(mean);
        report.epochs_run = epoch;
    }
    report.wall_time_s = start.elapsed().as_secs_f64();
    Ok(report)
}

/// Pretrains each arm on its own data, as a standalone single-arm model would
/// be pretrained with the same seed.
pub fn pretrain_unmatched<T: Real>(
    duo: &mut DuoFtt<T>,
    data_a: &Tensor<T>,
    data_b: &Tensor<T>,
    cfg: &TrainConfig,
    seed: u64,
) -> Result<(TrainReport, TrainReport)> {
    if data_a.rows() == 0 || data_b.rows() == 0 {
        return Err(Error::Config("unmatched pretraining needs samples for both arms".into()));
    }
    let mut a = Model::Ftt(duo.arm_a.clone());
    let ra = pretrain(&mut a, std::slice::from_ref(data_a), PretrainObjective::Mtr, cfg, seed)?;
    let mut b = Model::Ftt(duo.arm_b.clone());
    let rb = pretrain(&mut b, std::slice::from_ref(data_b), PretrainObjective::Mtr, cfg, seed)?;
    match (a, b) {
        (Model::Ftt(a), Model::Ftt(b)) => {
            duo.arm_a = a;
            duo.arm_b = b;
        }
        _ => unreachable!(),
    }
    Ok((ra, rb))
}

fn check_labels(y: &[usize], n: usize, n_classes: usize, what: &'static str) -> Result<()> {
    if y.len() != n {
        return Err(Error::dimension(what, &[n], &[y.len()]));
    }
    if let Some(&bad) = y.iter().find(|&&c| c >= n_classes) {
        return Err(Error::Index(format!("{what} label {bad} out of range for {n_classes} classes")));
    }
    Ok(())
}

/// Mean cross-entropy of the model on a labelled set, in eval mode.
pub fn evaluate_loss<T: Real>(model: &Model<T>, views: &[Tensor<T>], y: &[usize], batch_size: usize) -> Result<f64> {
    let n = check_views(model, views)?;
    let mut total = 0.0;
    let mut streams = Streams::new(0);
    let masks = vec![Masking::NONE; views.len()];
    for start in (0..n).step_by(batch_size.max(1)) {
        let idx: Vec<usize> = (start..(start + batch_size).min(n)).collect();
        let batch: Vec<Tensor<T>> = views.iter().map(|v| v.select_rows(&idx)).collect();
        let refs: Vec<&Tensor<T>> = batch.iter().collect();
        let mut tape = Tape::new();
        let logits = model.forward_logits(&mut tape, &refs, &masks, &mut streams, false)?;
        let loss = cross_entropy_tape(&mut tape, logits, &y[start..start + idx.len()])?;
        total += tape.value(loss).item()?.as_f64() * idx.len() as f64;
    }
    Ok(total / n as f64)
}

/// Supervised finetuning with early stopping on validation cross-entropy.
/// The weights of the best validation epoch are restored at the end.
#[allow(clippy::too_many_arguments)]
pub fn finetune<T: Real>(
    model: &mut Model<T>,
    train_views: &[Tensor<T>],
    train_y: &[usize],
    val_views: &[Tensor<T>],
    val_y: &[usize],
    cfg: &TrainConfig,
    seed: u64,
) -> Result<TrainReport> {
    cfg.validate()?;
    let n = check_views(model, train_views)?;
    let n_val = check_views(model, val_views)?;
    let c = model.n_classes();
    if n == 0 {
        return Err(Error::Config("no labelled training samples".into()));
    }
    if n_val == 0 {
        return Err(Error::Config("no validation samples".into()));
    }
    check_labels(train_y, n, c, "train")?;
    check_labels(val_y, n_val, c, "validation")?;
    let missing: Vec<usize> = (0..c).filter(|k| !val_y.contains(k)).collect();
    if !missing.is_empty() {
        log::warn!("validation set has no samples of classes {missing:?}");
    }
    model.start_finetune(&mut Rng::new(seed, "head"));
    let start = Instant::now();
    let mut opt = AdamW::<T>::new(cfg.finetune_lr(), cfg.weight_decay);
    let mut batch_rng = Rng::new(seed, "batch/finetune");
    let mut streams = Streams::new(seed).fork("finetune");
    let masks = vec![Masking::rate(cfg.finetune_mask_rate); train_views.len()];
    let mut stopper = EarlyStopping::new(cfg.patience);
    let mut best = model.snapshot();
    let mut report = TrainReport::default();
    for epoch in 1..=cfg.finetune_max_epochs {
        let mut total = 0.0;
        for (step, idx) in make_batches(n, cfg.batch_size, 1, &mut batch_rng).into_iter().enumerate() {
            let batch: Vec<Tensor<T>> = train_views.iter().map(|v| v.select_rows(&idx)).collect();
            let refs: Vec<&Tensor<T>> = batch.iter().collect();
            let targets: Vec<usize> = idx.iter().map(|&i| train_y[i]).collect();
            let mut tape = Tape::new();
            let logits = model
                .forward_logits(&mut tape, &refs, &masks, &mut streams, true)
                .map_err(|e| divergence(epoch, step, e))?;
            let loss = cross_entropy_tape(&mut tape, logits, &targets)?;
            let value = tape.value(loss).item()?.as_f64();
            let grads = tape.backward(loss).map_err(|e| divergence(epoch, step, e))?;
            opt.step(model.params_mut(), &grads).map_err(|e| divergence(epoch, step, e))?;
            total += value * idx.len() as f64;
        }
        let train_mean = total / n as f64;
        let val = evaluate_loss(model, val_views, val_y, cfg.batch_size.max(256))?;
        if !val.is_finite() {
            return Err(Error::Divergence { epoch, step: 0, loss: val });
        }
        progress(cfg.progress, epoch, "finetune", "train", train_mean);
        progress(cfg.progress, epoch, "finetune", "val", val);
        report.train_loss.push(train_mean);
        report.val_loss.push(val);
        report.epochs_run = epoch;
        match stopper.observe(epoch, val) {
            StopSignal::Improved => best = model.snapshot(),
            StopSignal::Continue => {}
            StopSignal::Stop => break,
        }
    }
    model.restore(&best)?;
    report.best_epoch = stopper.best().map(|(e, _)| e);
    report.wall_time_s = start.elapsed().as_secs_f64();
    Ok(report)
}

/// Class probabilities `[n, C]` in eval mode. `forced` holds, per view, an
/// optional row-major missingness mask whose cells get the mask token.
pub fn predict_proba<T: Real>(
    model: &Model<T>,
    views: &[Tensor<T>],
    forced: &[Option<&[bool]>],
    batch_size: usize,
) -> Result<Tensor<f64>> {
    let n = check_views(model, views)?;
    if forced.len() != views.len() {
        return Err(Error::Config("one (optional) mask per view is required".into()));
    }
    for (v, f) in views.iter().zip(forced) {
        if let Some(f) = f {
            if f.len() != v.numel() {
                return Err(Error::dimension("predict mask", v.shape(), &[f.len()]));
            }
        }
    }
    let c = model.n_classes();
    let mut out = Vec::with_capacity(n * c);
    let mut streams = Streams::new(0);
    let bs = batch_size.max(1);
    for start in (0..n).step_by(bs) {
        let end = (start + bs).min(n);
        let idx: Vec<usize> = (start..end).collect();
        let batch: Vec<Tensor<T>> = views.iter().map(|v| v.select_rows(&idx)).collect();
        let refs: Vec<&Tensor<T>> = batch.iter().collect();
        let masks: Vec<Masking<'_>> = views
            .iter()
            .zip(forced)
            .map(|(v, f)| match f {
                Some(f) => Masking::forced(&f[start * v.cols()..end * v.cols()]),
                None => Masking::NONE,
            })
            .collect();
        let mut tape = Tape::new();
        let logits = model.forward_logits(&mut tape, &refs, &masks, &mut streams, false)?;
        let probs = tape.softmax(logits)?;
        out.extend(tape.value(probs).data().iter().map(|v| v.as_f64()));
    }
    Tensor::new(&[n, c], out)
}

/// Arg-max class per row; ties go to the lowest index.
pub fn argmax_rows(probs: &Tensor<f64>) -> Vec<usize> {
    (0..probs.rows())
        .map(|i| {
            let row = probs.row(i);
            let mut best = 0;
            for (k, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = k;
                }
            }
            best
        })
        .collect()
}
