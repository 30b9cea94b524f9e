use super::CorrespondenceKind;
use crate::error::{Error, Result};
use crate::substrate::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct LossConfig {
    /// Weight of the content term.
    pub lambda: f32,
    pub correspondence: CorrespondenceKind,
    pub w_ent_a: f32,
    pub w_tv_a: f32,
    pub w_norm_alpha: f32,
    pub w_tv_alpha: f32,
    /// Steps over which the entropy weight ramps linearly from 0; 0 keeps
    /// it constant.
    pub ent_ramp_steps: u64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            lambda: 3.0,
            correspondence: CorrespondenceKind::GaussianGrey { sigma: 2.0 },
            w_ent_a: 0.0,
            w_tv_a: 0.0,
            w_norm_alpha: 0.0,
            w_tv_alpha: 0.0,
            ent_ramp_steps: 0,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, w) in [
            ("lambda", self.lambda),
            ("w_ent_a", self.w_ent_a),
            ("w_tv_a", self.w_tv_a),
            ("w_norm_alpha", self.w_norm_alpha),
            ("w_tv_alpha", self.w_tv_alpha),
        ] {
            if !(w >= 0.0 && w.is_finite()) {
                return Err(Error::Config(format!("loss.{name} must be finite and non-negative, got {w}")));
            }
        }
        Ok(())
    }

    /// Entropy weight in effect at `step`.
    pub fn ent_weight(&self, step: u64) -> f32 {
        if self.ent_ramp_steps == 0 || step >= self.ent_ramp_steps {
            self.w_ent_a
        } else {
            self.w_ent_a * step as f32 / self.ent_ramp_steps as f32
        }
    }
}

/// Discriminator loss `-mean ln D(real) - mean ln(1 - D(fake))`.
pub fn dcgan_d_loss(tape: &mut Tape, real: Var, fake: Var) -> Result<Var> {
    let r = tape.neg_log_mean(real, false);
    let f = tape.neg_log_mean(fake, true);
    tape.add(r, f)
}

/// Non-saturating generator loss `-mean ln D(fake)`.
pub fn dcgan_g_loss(tape: &mut Tape, fake: Var) -> Var {
    tape.neg_log_mean(fake, false)
}

pub fn adv_losses_dcgan(tape: &mut Tape, real: Var, fake: Var) -> Result<(Var, Var)> {
    Ok((dcgan_d_loss(tape, real, fake)?, dcgan_g_loss(tape, fake)))
}

/// Critic loss `mean(fake) - mean(real)` plus an optional gradient penalty.
pub fn wgan_d_loss(tape: &mut Tape, real: Var, fake: Var, penalty: Option<Var>) -> Result<Var> {
    let r = tape.mean(real);
    let f = tape.mean(fake);
    let d = tape.sub(f, r)?;
    match penalty {
        Some(p) => tape.add(d, p),
        None => Ok(d),
    }
}

pub fn wgan_g_loss(tape: &mut Tape, fake: Var) -> Var {
    let f = tape.mean(fake);
    tape.scale(f, -1.0)
}

pub fn adv_losses_wgan_gp(tape: &mut Tape, real: Var, fake: Var, penalty: Option<Var>) -> Result<(Var, Var)> {
    Ok((wgan_d_loss(tape, real, fake, penalty)?, wgan_g_loss(tape, fake)))
}

#[derive(Clone, Copy, Debug)]
pub struct Regularizers {
    pub ent_a: Var,
    pub tv_a: Var,
    pub norm_alpha: Var,
    pub tv_alpha: Var,
}

/// Entropy and total variation of the mixture, squared norm and total
/// variation of the blend mask. Mixture terms are zero without memory.
pub fn regularizers(tape: &mut Tape, mixture: Option<Var>, alpha: Var) -> Regularizers {
    let (ent_a, tv_a) = match mixture {
        Some(m) => (tape.entropy_channels(m), tape.total_variation(m)),
        None => (tape.constant(Tensor::scalar(0.0)), tape.constant(Tensor::scalar(0.0))),
    };
    Regularizers {
        ent_a,
        tv_a,
        norm_alpha: tape.mean_square(alpha),
        tv_alpha: tape.total_variation(alpha),
    }
}

#[derive(Clone, Copy, Debug)]
pub struct LossParts {
    pub adv: Var,
    pub content: Var,
    pub reg: Regularizers,
}

impl LossParts {
    pub fn named(&self) -> [(&'static str, Var); 6] {
        [
            ("loss_G_adv", self.adv),
            ("content", self.content),
            ("ent_A", self.reg.ent_a),
            ("tv_A", self.reg.tv_a),
            ("norm_alpha", self.reg.norm_alpha),
            ("tv_alpha", self.reg.tv_alpha),
        ]
    }
}

/// `adv + λ content + Σ w_k reg_k`, with the entropy weight taken at
/// `step`.
pub fn total_generator_loss(tape: &mut Tape, parts: &LossParts, cfg: &LossConfig, step: u64) -> Result<Var> {
    for (name, v) in parts.named() {
        let x = tape.value(v).item();
        if !x.is_finite() {
            return Err(Error::NonFinite(format!("{name} is {x}")));
        }
    }
    let terms = [
        (parts.content, cfg.lambda),
        (parts.reg.ent_a, cfg.ent_weight(step)),
        (parts.reg.tv_a, cfg.w_tv_a),
        (parts.reg.norm_alpha, cfg.w_norm_alpha),
        (parts.reg.tv_alpha, cfg.w_tv_alpha),
    ];
    let mut total = parts.adv;
    for (v, w) in terms {
        if w != 0.0 {
            let t = tape.scale(v, w);
            total = tape.add(total, t)?;
        }
    }
    Ok(total)
}
