use super::ftt::{FtTransformer, Masking, Streams};
use crate::error::{Error, Result};
use crate::numerics::{Param, Real, Rng, Tape, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Arm {
    A,
    B,
}

/// Two independent FT-Transformers fused by averaging: projections during
/// pretraining, logits during finetuning. Fusion has no parameters.
#[derive(Debug, Clone)]
pub struct DuoFtt<T> {
    pub arm_a: FtTransformer<T>,
    pub arm_b: FtTransformer<T>,
}

fn mean_of<T: Real>(tape: &mut Tape<T>, a: Var, b: Var) -> Result<Var> {
    let s = tape.add(a, b)?;
    Ok(tape.scale(s, 0.5))
}

impl<T: Real> DuoFtt<T> {
    pub fn new(arm_a: FtTransformer<T>, arm_b: FtTransformer<T>) -> Result<Self> {
        if arm_a.config().n_classes != arm_b.config().n_classes {
            return Err(Error::Config(format!(
                "arms disagree on the number of classes: {} vs {}",
                arm_a.config().n_classes,
                arm_b.config().n_classes
            )));
        }
        Ok(DuoFtt { arm_a, arm_b })
    }

    pub fn arm(&self, which: Arm) -> &FtTransformer<T> {
        match which {
            Arm::A => &self.arm_a,
            Arm::B => &self.arm_b,
        }
    }

    fn check_views(&self, xa: &Tensor<T>, xb: &Tensor<T>) -> Result<()> {
        if xa.rows() != xb.rows() {
            return Err(Error::dimension("duo views", xa.shape(), xb.shape()));
        }
        Ok(())
    }

    /// Fused projection `½(proj_a + proj_b)` with independent masking per arm.
    #[allow(clippy::too_many_arguments)]
    pub fn forward_projection(
        &self,
        tape: &mut Tape<T>,
        xa: &Tensor<T>,
        xb: &Tensor<T>,
        mask_a: &Masking<'_>,
        mask_b: &Masking<'_>,
        streams: &mut Streams,
        training: bool,
    ) -> Result<Var> {
        self.check_views(xa, xb)?;
        let za = self.arm_a.forward_projection(tape, xa, mask_a, streams, training)?;
        let zb = self.arm_b.forward_projection(tape, xb, mask_b, streams, training)?;
        mean_of(tape, za, zb)
    }

    /// Clean and masked fused projections for MTR pretraining.
    pub fn forward_pretrain(
        &self,
        tape: &mut Tape<T>,
        xa: &Tensor<T>,
        xb: &Tensor<T>,
        p_m: f64,
        streams: &mut Streams,
        training: bool,
    ) -> Result<(Var, Var)> {
        let none = Masking::NONE;
        let masked = Masking::rate(p_m);
        let clean = self.forward_projection(tape, xa, xb, &none, &none, streams, training)?;
        let noisy = self.forward_projection(tape, xa, xb, &masked, &masked, streams, training)?;
        Ok((clean, noisy))
    }

    /// Per-arm projections, unfused, for the CLIP objective.
    pub fn clip_projections(
        &self,
        tape: &mut Tape<T>,
        xa: &Tensor<T>,
        xb: &Tensor<T>,
        streams: &mut Streams,
        training: bool,
    ) -> Result<(Var, Var)> {
        self.check_views(xa, xb)?;
        let u = self.arm_a.forward_projection(tape, xa, &Masking::NONE, streams, training)?;
        let v = self.arm_b.forward_projection(tape, xb, &Masking::NONE, streams, training)?;
        Ok((u, v))
    }

    /// Fused logits `½(logits_a + logits_b)`.
    #[allow(clippy::too_many_arguments)]
    pub fn forward_logits(
        &self,
        tape: &mut Tape<T>,
        xa: &Tensor<T>,
        xb: &Tensor<T>,
        mask_a: &Masking<'_>,
        mask_b: &Masking<'_>,
        streams: &mut Streams,
        training: bool,
    ) -> Result<Var> {
        self.check_views(xa, xb)?;
        let la = self.arm_a.forward_logits(tape, xa, mask_a, streams, training)?;
        let lb = self.arm_b.forward_logits(tape, xb, mask_b, streams, training)?;
        if tape.shape(la) != tape.shape(lb) {
            return Err(Error::Config("arms produce different numbers of classes".into()));
        }
        mean_of(tape, la, lb)
    }

    pub fn start_finetune(&mut self, rng: &mut Rng) {
        self.arm_a.start_finetune(&mut rng.fork("arm_a"));
        self.arm_b.start_finetune(&mut rng.fork("arm_b"));
    }

    /// A copy of one arm, backbone intact (same parameter identities), with a
    /// fresh classification head attached.
    pub fn extract_arm(&self, which: Arm, rng: &mut Rng) -> FtTransformer<T> {
        let mut arm = self.arm(which).clone();
        arm.start_finetune(rng);
        arm
    }

    pub fn named_params(&self) -> Vec<(String, &Param<T>)> {
        let mut out: Vec<(String, &Param<T>)> = self
            .arm_a
            .named_params()
            .into_iter()
            .map(|(n, p)| (format!("arm_a.{n}"), p))
            .collect();
        out.extend(self.arm_b.named_params().into_iter().map(|(n, p)| (format!("arm_b.{n}"), p)));
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        let mut out = self.arm_a.params_mut();
        out.extend(self.arm_b.params_mut());
        out
    }
}
