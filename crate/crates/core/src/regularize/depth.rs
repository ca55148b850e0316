//! Depth regularization of the masked region against an inpainted view's
//! monocular depth, aligned to the render on the unmasked pixels.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grad::ParticleGrads;
use crate::image::{resize_bilinear, Image, Mask, PixelRect};
use crate::prior::{add_noise, Condition, DenoisePrior, DepthOracle, PromptTag, SampleOrigin};
use crate::raster::{render, render_backward, RenderChannels, RenderGrad};
use crate::reference::{align_depth, bilateral_refine, BilateralConfig};
use crate::routing::{route_gradients, LossSource};
use crate::scene::{Camera, GaussianScene};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DepthConfig {
    /// Deterministic denoising steps from `t_depth` to 0.
    pub steps: usize,
    pub guidance: f64,
    /// Unmasked pixels need at least this coverage to anchor the alignment.
    pub support_alpha: f64,
    pub bilateral: BilateralConfig,
}

impl Default for DepthConfig {
    fn default() -> Self {
        Self {
            steps: 10,
            guidance: 7.5,
            support_alpha: 0.5,
            bilateral: BilateralConfig::default(),
        }
    }
}

/// `mean over masked p of (d̂(p) − target(p))²` and its routed gradient.
pub fn depth_loss_against(scene: &GaussianScene, camera: &Camera, mask: &Mask, target: &Image) -> Result<(f64, ParticleGrads)> {
    let (w, h) = (camera.width, camera.height);
    if (mask.width, mask.height) != (w, h) || target.shape() != (w, h, 1) {
        return Err(Error::shape(format!("{w}x{h} mask and depth"), format!("{:?}", target.shape())));
    }
    let n = mask.count();
    if n == 0 {
        return Ok((0.0, ParticleGrads::zeros(scene.len())));
    }
    let out = render(scene, camera, RenderChannels::ALL);
    let mut g = Image::new(w, h, 1);
    let mut loss = 0.0;
    for i in 0..w * h {
        if mask.data[i] {
            let r = out.depth.data[i] - target.data[i];
            loss += r * r;
            g.data[i] = 2.0 * r / n as f64;
        }
    }
    let mut grads = render_backward(scene, camera, &RenderGrad::from_depth(g));
    route_gradients(&mut grads, &scene.labels(), LossSource::Depth)?;
    Ok((loss / n as f64, grads))
}

/// Target depth `d̄` for one view: partially noise the render's latent,
/// denoise it with the mask condition, estimate its depth, align that to the
/// render on covered unmasked pixels and refine inside the mask. `None` when
/// the oracle fails.
#[allow(clippy::too_many_arguments)]
pub fn depth_target<P: DenoisePrior + ?Sized, O: DepthOracle + ?Sized>(
    rng: &mut impl Rng,
    scene: &GaussianScene,
    view: usize,
    camera: &Camera,
    mask: &Mask,
    prior: &P,
    oracle: &O,
    config: &DepthConfig,
) -> Result<Option<Image>> {
    let (w, h) = (camera.width, camera.height);
    let out = render(scene, camera, RenderChannels::ALL);
    let (nw, nh) = prior.native_resolution();
    let x = resize_bilinear(&out.rgb, nw, nh);
    let z = prior.encode(&x)?;
    let (lw, lh, lc) = prior.latent_shape();
    let eps = Image {
        width: lw,
        height: lh,
        channels: lc,
        data: (0..lw * lh * lc).map(|_| rng.sample(StandardNormal)).collect(),
    };
    let t = prior.schedule().sample_t(rng);
    let z_t = add_noise(prior.schedule(), &z, t, &eps)?;
    let m_native = crate::image::downsample_mask(mask, nw, nh);
    let mut observed = x.clone();
    for (px, &m) in observed.data.chunks_mut(3).zip(&m_native.data) {
        if m {
            px.fill(0.0);
        }
    }
    let cond = Condition {
        masked_latent: prior.encode(&observed)?,
        mask: crate::image::downsample_mask(&m_native, lw, lh),
        prompt: PromptTag::Global,
        guidance: config.guidance,
        origin: Some(SampleOrigin {
            view,
            crop: PixelRect::full(w, h),
        }),
    };
    let inpainted = resize_bilinear(&prior.inpaint(&z_t, t, config.steps, &cond)?, w, h);
    let relative = match oracle.estimate(&inpainted, view) {
        Ok(d) if d.shape() == (w, h, 1) && d.is_finite() => d,
        Ok(d) => {
            log::warn!("depth oracle returned {:?} for a {w}x{h} view; depth loss skipped", d.shape());
            return Ok(None);
        }
        Err(e) => {
            log::warn!("depth oracle failed: {e}; depth loss skipped");
            return Ok(None);
        }
    };
    let support = Mask::from_fn(w, h, |x, y| !mask.get(x, y) && out.alpha.get(x, y, 0) > config.support_alpha);
    if support.is_empty() {
        log::warn!("no covered unmasked pixels to align depth; depth loss skipped");
        return Ok(None);
    }
    let aligned = align_depth(&relative, &out.depth, &support)?;
    let refined = bilateral_refine(&aligned.aligned, &inpainted, mask, &config.bilateral)?;
    Ok(Some(refined))
}

#[derive(Clone, Debug, PartialEq)]
pub struct DepthLoss {
    pub loss: f64,
    pub grads: ParticleGrads,
    /// The oracle failed; loss and gradients are zero.
    pub skipped: bool,
}

#[allow(clippy::too_many_arguments)]
pub fn depth_loss<P: DenoisePrior + ?Sized, O: DepthOracle + ?Sized>(
    rng: &mut impl Rng,
    scene: &GaussianScene,
    view: usize,
    camera: &Camera,
    mask: &Mask,
    prior: &P,
    oracle: &O,
    config: &DepthConfig,
) -> Result<DepthLoss> {
    match depth_target(rng, scene, view, camera, mask, prior, oracle, config)? {
        Some(target) => {
            let (loss, grads) = depth_loss_against(scene, camera, mask, &target)?;
            Ok(DepthLoss { loss, grads, skipped: false })
        }
        None => Ok(DepthLoss {
            loss: 0.0,
            grads: ParticleGrads::zeros(scene.len()),
            skipped: true,
        }),
    }
}

/// Depth of a hidden complete scene, seen through an affine map so the
/// alignment step has something to undo.
#[derive(Clone, Debug)]
pub struct GtDepthOracle {
    pub scene: GaussianScene,
    pub cameras: Vec<Camera>,
    pub scale: f64,
    pub offset: f64,
}

impl DepthOracle for GtDepthOracle {
    fn estimate(&self, image: &Image, view: usize) -> Result<Image> {
        let cam = self
            .cameras
            .get(view)
            .ok_or_else(|| Error::DepthOracle(format!("no camera for view {view}")))?;
        if (image.width, image.height) != (cam.width, cam.height) {
            return Err(Error::DepthOracle(format!(
                "{}x{} image for a {}x{} view",
                image.width, image.height, cam.width, cam.height
            )));
        }
        let d = render(&self.scene, cam, RenderChannels::ALL).depth;
        Ok(d.map(|v| self.scale * v + self.offset))
    }
}
