//! Depth and adversarial regularizers, and the autodiff tape behind the
//! discriminator's gradient penalty.

pub mod adversarial;
pub mod depth;
pub mod tape;

pub use adversarial::{adv_gradients, adv_step, sample_patches, AdvConfig, AdvOutcome, Discriminator, PatchSet, PenaltyTarget};
pub use depth::{depth_loss, depth_loss_against, depth_target, DepthConfig, DepthLoss, GtDepthOracle};
pub use tape::{Tape, Var};
