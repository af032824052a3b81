//! Contrastive and supervised losses.
//!
//! The `*_tape` functions record onto a [`Tape`] and are what training uses.
//! The plain functions evaluate the same losses on fixed 64-bit inputs, and
//! [`ntxent_bruteforce`] is an unvectorised double loop kept as a reference.

use log::warn;

use crate::error::{Error, Result};
use crate::numerics::{Real, Tape, Tensor, Var};

/// Norm below which a vector is treated as degenerate by [`cosine_sim`].
const DEGENERATE_NORM: f64 = 1e-12;

/// Added to self-similarity logits so they drop out of a log-sum-exp.
const EXCLUDED_LOGIT: f64 = -1e9;

/// Cosine similarity `uᵀv / (‖u‖‖v‖)`. A vector with norm below 1e-12 gives 0.
pub fn cosine_sim(u: &[f64], v: &[f64]) -> Result<f64> {
    if u.len() != v.len() {
        return Err(Error::dimension("cosine_sim", &[u.len()], &[v.len()]));
    }
    if u.iter().chain(v).any(|x| x.is_nan()) {
        return Err(Error::Numeric("NaN in cosine similarity input".into()));
    }
    let nu = u.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nv = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if nu <= DEGENERATE_NORM || nv <= DEGENERATE_NORM {
        warn!("degenerate vector in cosine similarity; similarity set to 0");
        return Ok(0.0);
    }
    let dot: f64 = u.iter().zip(v).map(|(a, b)| a * b).sum();
    Ok(dot / (nu * nv))
}

/// A pair of projection matrices for one contrastive step.
///
/// For NTXent `z` holds clean projections and `z_tilde` the masked ones; for
/// CLIP they hold the two modalities' projections of the same samples.
#[derive(Debug, Clone)]
pub struct ContrastiveBatch {
    pub z: Tensor<f64>,
    pub z_tilde: Tensor<f64>,
    pub tau: f64,
}

impl ContrastiveBatch {
    pub fn new(z: Tensor<f64>, z_tilde: Tensor<f64>, tau: f64) -> Result<Self> {
        let b = ContrastiveBatch { z, z_tilde, tau };
        b.validate()?;
        Ok(b)
    }

    pub fn n(&self) -> usize {
        self.z.rows()
    }

    fn validate(&self) -> Result<()> {
        validate_pair(self.z.shape(), self.z_tilde.shape(), self.tau)?;
        if !self.z.is_finite() || !self.z_tilde.is_finite() {
            return Err(Error::Numeric("non-finite projection in contrastive batch".into()));
        }
        Ok(())
    }
}

fn validate_pair(a: &[usize], b: &[usize], tau: f64) -> Result<()> {
    if a.len() != 2 || a != b {
        return Err(Error::dimension("contrastive batch", a, b));
    }
    if a[0] < 2 {
        return Err(Error::Batch(format!(
            "contrastive loss needs at least 2 samples, got {}",
            a[0]
        )));
    }
    if !(tau > 0.0) {
        return Err(Error::Config(format!("temperature must be > 0, got {tau}")));
    }
    Ok(())
}

fn diagonal_exclusion<T: Real>(n: usize) -> Tensor<T> {
    Tensor::from_fn(&[n, n], |i| {
        if i / n == i % n {
            T::lit(EXCLUDED_LOGIT)
        } else {
            T::zero()
        }
    })
}

/// `Σ_i [logsumexp_k(pos_logits[i, k] ++ other_logits[i, k≠i]) − pos_logits[i, i]]`
fn anchored_term<T: Real>(tape: &mut Tape<T>, pos: Var, same: Var, n: usize) -> Result<Var> {
    let mask = tape.constant(diagonal_exclusion(n));
    let same = tape.add(same, mask)?;
    let all = tape.concat_last(pos, same)?;
    let lse = tape.logsumexp(all)?;
    let diag: Vec<usize> = (0..n).collect();
    let positives = tape.gather(pos, &diag)?;
    let per_anchor = tape.sub(lse, positives)?;
    Ok(tape.sum(per_anchor))
}

/// NTXent over clean projections `z` and masked projections `z_tilde`, summed over anchors.
///
/// Anchor `z_i` is contrasted against `z̃_i` (positive), every other `z̃_k` and
/// every other `z_k`. With `symmetric` the same term anchored at `z̃_i` is added.
pub fn ntxent_tape<T: Real>(
    tape: &mut Tape<T>,
    z: Var,
    z_tilde: Var,
    tau: f64,
    symmetric: bool,
) -> Result<Var> {
    validate_pair(tape.shape(z), tape.shape(z_tilde), tau)?;
    let n = tape.shape(z)[0];
    let zn = tape.normalize_rows(z, DEGENERATE_NORM)?;
    let tn = tape.normalize_rows(z_tilde, DEGENERATE_NORM)?;
    let s_zt = tape.matmul_nt(zn, tn)?;
    let s_zt = tape.scale(s_zt, 1.0 / tau);
    let s_zz = tape.matmul_nt(zn, zn)?;
    let s_zz = tape.scale(s_zz, 1.0 / tau);
    let loss = anchored_term(tape, s_zt, s_zz, n)?;
    if !symmetric {
        return Ok(loss);
    }
    let s_tz = tape.matmul_nt(tn, zn)?;
    let s_tz = tape.scale(s_tz, 1.0 / tau);
    let s_tt = tape.matmul_nt(tn, tn)?;
    let s_tt = tape.scale(s_tt, 1.0 / tau);
    let other = anchored_term(tape, s_tz, s_tt, n)?;
    tape.add(loss, other)
}

/// Two-direction CLIP loss between modality projections `u` and `v`, summed.
/// The positive pair is part of each softmax denominator.
pub fn clip_tape<T: Real>(tape: &mut Tape<T>, u: Var, v: Var, tau: f64) -> Result<Var> {
    validate_pair(tape.shape(u), tape.shape(v), tau)?;
    let n = tape.shape(u)[0];
    let un = tape.normalize_rows(u, DEGENERATE_NORM)?;
    let vn = tape.normalize_rows(v, DEGENERATE_NORM)?;
    let diag: Vec<usize> = (0..n).collect();
    let mut total = None;
    for (a, b) in [(un, vn), (vn, un)] {
        let s = tape.matmul_nt(a, b)?;
        let s = tape.scale(s, 1.0 / tau);
        let lse = tape.logsumexp(s)?;
        let pos = tape.gather(s, &diag)?;
        let per = tape.sub(lse, pos)?;
        let term = tape.sum(per);
        total = Some(match total {
            None => term,
            Some(t) => tape.add(t, term)?,
        });
    }
    Ok(total.expect("two terms"))
}

/// Mean cross-entropy of `logits[N, C]` against integer targets.
pub fn cross_entropy_tape<T: Real>(tape: &mut Tape<T>, logits: Var, targets: &[usize]) -> Result<Var> {
    let shape = tape.shape(logits).to_vec();
    if shape.len() != 2 || shape[0] != targets.len() || targets.is_empty() {
        return Err(Error::dimension("cross_entropy", &shape, &[targets.len()]));
    }
    if let Some(&bad) = targets.iter().find(|&&t| t >= shape[1]) {
        return Err(Error::Index(format!(
            "target {bad} out of range for {} classes",
            shape[1]
        )));
    }
    let lse = tape.logsumexp(logits)?;
    let picked = tape.gather(logits, targets)?;
    let per = tape.sub(lse, picked)?;
    tape.mean(per)
}

fn eval<F>(f: F) -> Result<f64>
where
    F: FnOnce(&mut Tape<f64>) -> Result<Var>,
{
    let mut tape = Tape::new();
    let out = f(&mut tape)?;
    tape.value(out).item()
}

/// Single-direction NTXent on a fixed batch.
pub fn ntxent(batch: &ContrastiveBatch) -> Result<f64> {
    batch.validate()?;
    eval(|tape| {
        let z = tape.constant(batch.z.clone());
        let t = tape.constant(batch.z_tilde.clone());
        ntxent_tape(tape, z, t, batch.tau, false)
    })
}

/// Reference NTXent: explicit loops over anchors and candidates.
pub fn ntxent_bruteforce(batch: &ContrastiveBatch) -> Result<f64> {
    batch.validate()?;
    let n = batch.n();
    if n > 64 {
        return Err(Error::Batch(format!("brute-force NTXent limited to 64 samples, got {n}")));
    }
    let tau = batch.tau;
    let mut total = 0.0;
    for i in 0..n {
        let zi = batch.z.row(i);
        let positive = cosine_sim(zi, batch.z_tilde.row(i))? / tau;
        let mut denom = positive.exp();
        for k in 0..n {
            if k == i {
                continue;
            }
            denom += (cosine_sim(zi, batch.z.row(k))? / tau).exp();
            denom += (cosine_sim(zi, batch.z_tilde.row(k))? / tau).exp();
        }
        total -= (positive.exp() / denom).ln();
    }
    Ok(total)
}

/// CLIP loss on a fixed batch; `z` rows are the first modality, `z_tilde` the second.
pub fn clip_loss(batch: &ContrastiveBatch) -> Result<f64> {
    batch.validate()?;
    eval(|tape| {
        let u = tape.constant(batch.z.clone());
        let v = tape.constant(batch.z_tilde.clone());
        clip_tape(tape, u, v, batch.tau)
    })
}

pub fn cross_entropy(logits: &Tensor<f64>, targets: &[usize]) -> Result<f64> {
    eval(|tape| {
        let l = tape.constant(logits.clone());
        cross_entropy_tape(tape, l, targets)
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn batch(z: &[[f64; 2]], t: &[[f64; 2]], tau: f64) -> ContrastiveBatch {
        let rows = |r: &[[f64; 2]]| Tensor::from_rows(&r.iter().map(|x| x.to_vec()).collect::<Vec<_>>()).unwrap();
        ContrastiveBatch::new(rows(z), rows(t), tau).unwrap()
    }

    #[test]
    fn cosine_cases() {
        assert_eq!(cosine_sim(&[1.0, 0.0], &[1.0, 0.0]).unwrap(), 1.0);
        assert_eq!(cosine_sim(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 0.0);
        assert!((cosine_sim(&[1.0, 1.0], &[1.0, 0.0]).unwrap() - 0.5f64.sqrt()).abs() < 1e-12);
        assert_eq!(cosine_sim(&[0.0, 0.0], &[1.0, 0.0]).unwrap(), 0.0);
        assert!(matches!(cosine_sim(&[f64::NAN], &[1.0]), Err(Error::Numeric(_))));
    }

    #[test]
    fn ntxent_closed_forms() {
        let b = batch(&[[1.0, 0.0], [0.0, 1.0]], &[[1.0, 0.0], [0.0, 1.0]], 1.0);
        let e = std::f64::consts::E;
        let expected = -2.0 * (e / (e + 2.0)).ln();
        assert!((ntxent(&b).unwrap() - 1.1031).abs() < 1e-3);
        assert!((ntxent(&b).unwrap() - expected).abs() < 1e-12);
        assert!((ntxent_bruteforce(&b).unwrap() - 1.1031).abs() < 1e-3);

        let same = batch(&[[0.3, 0.4], [0.3, 0.4]], &[[0.3, 0.4], [0.3, 0.4]], 1.0);
        assert!((ntxent(&same).unwrap() - 2.0 * 3f64.ln()).abs() < 1e-12);
        assert!((ntxent(&same).unwrap() - 2.1972).abs() < 1e-3);
    }

    #[test]
    fn clip_closed_forms_and_symmetry() {
        let b = batch(&[[1.0, 0.0], [0.0, 1.0]], &[[1.0, 0.0], [0.0, 1.0]], 1.0);
        let per_term = (1.0 + (-1f64).exp()).ln();
        assert!((clip_loss(&b).unwrap() - 4.0 * per_term).abs() < 1e-12);
        assert!((clip_loss(&b).unwrap() - 1.2530).abs() < 1e-3);

        let same = batch(&[[2.0, 1.0], [2.0, 1.0]], &[[2.0, 1.0], [2.0, 1.0]], 1.0);
        assert!((clip_loss(&same).unwrap() - 4.0 * 2f64.ln()).abs() < 1e-12);

        let a = batch(&[[1.0, 0.2], [0.3, -1.0]], &[[0.1, 0.9], [1.0, 1.0]], 1.0);
        let swapped = ContrastiveBatch::new(a.z_tilde.clone(), a.z.clone(), 1.0).unwrap();
        assert!((clip_loss(&a).unwrap() - clip_loss(&swapped).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn batch_of_one_is_rejected() {
        let z = Tensor::from_rows(&[vec![1.0, 0.0]]).unwrap();
        let err = ContrastiveBatch::new(z.clone(), z, 1.0).unwrap_err();
        assert!(matches!(err, Error::Batch(_)));
    }

    #[test]
    fn cross_entropy_cases() {
        let uniform = Tensor::zeros(&[2, 4]);
        assert!((cross_entropy(&uniform, &[0, 3]).unwrap() - 4f64.ln()).abs() < 1e-12);
        let sharp = Tensor::from_rows(&[vec![100.0, 0.0, 0.0]]).unwrap();
        assert!(cross_entropy(&sharp, &[0]).unwrap() < 1e-6);
        assert!(matches!(cross_entropy(&sharp, &[3]), Err(Error::Index(_))));
    }
}
