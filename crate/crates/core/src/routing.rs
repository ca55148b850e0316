//! Region-aware gradient routing: reconstruction updates only Unmasked
//! particles, guidance losses only Masked ones, and the adversarial loss only
//! the color coefficients of Masked ones.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::grad::ParticleGrads;
use crate::scene::Label;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum LossSource {
    Reconstruction,
    Sds,
    Depth,
    Adversarial,
}

impl LossSource {
    pub fn as_str(self) -> &'static str {
        match self {
            LossSource::Reconstruction => "reconstruction",
            LossSource::Sds => "sds",
            LossSource::Depth => "depth",
            LossSource::Adversarial => "adversarial",
        }
    }

    /// Label whose particles this source may update.
    pub fn target(self) -> Label {
        match self {
            LossSource::Reconstruction => Label::Unmasked,
            _ => Label::Masked,
        }
    }
}

impl fmt::Display for LossSource {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for LossSource {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "reconstruction" | "rec" => Ok(LossSource::Reconstruction),
            "sds" => Ok(LossSource::Sds),
            "depth" => Ok(LossSource::Depth),
            "adversarial" | "adv" => Ok(LossSource::Adversarial),
            other => Err(Error::InvalidInput(format!("unknown loss source tag {other:?}"))),
        }
    }
}

/// Zeroes, in place, every gradient the source is not allowed to touch.
pub fn route_gradients(grads: &mut ParticleGrads, labels: &[Label], source: LossSource) -> Result<()> {
    if labels.len() != grads.len() {
        return Err(Error::shape(grads.len(), labels.len()));
    }
    let target = source.target();
    for (i, &label) in labels.iter().enumerate() {
        if label != target {
            grads.zero_particle(i);
        } else if source == LossSource::Adversarial {
            grads.particles[i].keep_sh_only();
            grads.screen[i] = [0.0; 2];
        }
    }
    Ok(())
}
