//! Patch discriminator and the loss suite.

mod correspondence;
mod discriminator;
mod losses;

pub use correspondence::{CorrespondenceKind, CorrespondenceMap};
pub use discriminator::{DiscConfig, Discriminator};
pub use losses::{
    adv_losses_dcgan, adv_losses_wgan_gp, dcgan_d_loss, dcgan_g_loss, regularizers, total_generator_loss,
    wgan_d_loss, wgan_g_loss, LossConfig, LossParts, Regularizers,
};

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};

/// Adversarial loss family.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AdvKind {
    Dcgan,
    WganGp,
}

impl AdvKind {
    /// Discriminator updates per generator update.
    pub fn default_d_steps(self) -> usize {
        match self {
            AdvKind::Dcgan => 1,
            AdvKind::WganGp => 5,
        }
    }
}

impl fmt::Display for AdvKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            AdvKind::Dcgan => "dcgan",
            AdvKind::WganGp => "wgan_gp",
        })
    }
}

impl FromStr for AdvKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "dcgan" => Ok(AdvKind::Dcgan),
            "wgan_gp" => Ok(AdvKind::WganGp),
            other => Err(Error::Config(format!("unknown loss kind {other:?} (dcgan|wgan_gp)"))),
        }
    }
}
