//! Two-scale score distillation: one sample on the whole (downsampled) view
//! plus the average over local patches around the mask.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{sds_grad, Condition, DenoisePrior, PromptTag, SampleOrigin};
use crate::error::Result;
use crate::grad::ParticleGrads;
use crate::image::{downsample_mask, resize_bilinear, resize_bilinear_adjoint, sample_patch, Image, Mask, PixelRect};
use crate::raster::{render, render_backward, RenderChannels, RenderGrad};
use crate::routing::{route_gradients, LossSource};
use crate::scene::{Camera, GaussianScene};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SdsConfig {
    pub guidance: f64,
    pub n_local: usize,
    /// Side of the square local crop in render pixels; clamped to the view.
    pub local_patch_size: usize,
    pub global: bool,
    pub local: bool,
}

impl Default for SdsConfig {
    fn default() -> Self {
        Self {
            guidance: 7.5,
            n_local: 2,
            local_patch_size: 128,
            global: true,
            local: true,
        }
    }
}

/// Random quantities of one branch sample.
#[derive(Clone, Debug, PartialEq)]
pub struct BranchDraw {
    pub t: f64,
    /// Latent-shaped standard normal noise.
    pub eps: Image,
    /// Render-space region fed to the prior.
    pub crop: PixelRect,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SdsDraws {
    pub global: BranchDraw,
    pub locals: Vec<BranchDraw>,
}

fn draw_branch<P: DenoisePrior + ?Sized>(rng: &mut impl Rng, prior: &P, crop: PixelRect) -> BranchDraw {
    let (lw, lh, lc) = prior.latent_shape();
    let t = prior.schedule().sample_t(rng);
    let eps = Image {
        width: lw,
        height: lh,
        channels: lc,
        data: (0..lw * lh * lc).map(|_| rng.sample(StandardNormal)).collect(),
    };
    BranchDraw { t, eps, crop }
}

/// Draws every random quantity of one distillation step up front, so that
/// branch subsets evaluated with the same draws are directly comparable.
/// Local crops are skipped when the mask is empty.
pub fn draw_sds<P: DenoisePrior + ?Sized>(
    rng: &mut impl Rng,
    prior: &P,
    width: usize,
    height: usize,
    mask: &Mask,
    config: &SdsConfig,
) -> Result<SdsDraws> {
    let global = draw_branch(rng, prior, PixelRect::full(width, height));
    let mut locals = Vec::new();
    match mask.bounding_box() {
        Some(bbox) => {
            let size = config.local_patch_size.min(width).min(height);
            for _ in 0..config.n_local {
                let crop = sample_patch(rng, bbox, size, width, height)?;
                locals.push(draw_branch(rng, prior, crop));
            }
        }
        None => log::debug!("empty mask: local distillation branch skipped"),
    }
    Ok(SdsDraws { global, locals })
}

#[derive(Clone, Debug, PartialEq)]
pub struct SdsOutput {
    /// Routed particle gradients.
    pub grads: ParticleGrads,
    /// Gradient with respect to the rendered image.
    pub image_grad: Image,
    pub loss_global: f64,
    pub loss_local: f64,
}

fn resize_mask_nearest(mask: &Mask, width: usize, height: usize) -> Mask {
    Mask::from_fn(width, height, |x, y| {
        let sx = ((x as f64 + 0.5) * mask.width as f64 / width as f64) as usize;
        let sy = ((y as f64 + 0.5) * mask.height as f64 / height as f64) as usize;
        mask.get(sx.min(mask.width - 1), sy.min(mask.height - 1))
    })
}

/// Gradient of one branch with respect to the full render, and its loss.
#[allow(clippy::too_many_arguments)]
fn branch_image_grad<P: DenoisePrior + ?Sized>(
    prior: &P,
    rgb: &Image,
    mask: &Mask,
    view: usize,
    draw: &BranchDraw,
    prompt: PromptTag,
    guidance: f64,
) -> Result<(Image, f64)> {
    let (nw, nh) = prior.native_resolution();
    let crop = rgb.crop(draw.crop)?;
    let x = resize_bilinear(&crop, nw, nh);
    let z = prior.encode(&x)?;
    let m_native = resize_mask_nearest(&mask.crop(draw.crop), nw, nh);
    let mut observed = x.clone();
    for (px, &m) in observed.data.chunks_mut(3).zip(&m_native.data) {
        if m {
            px.fill(0.0);
        }
    }
    let cond = Condition {
        masked_latent: prior.encode(&observed)?,
        mask: downsample_mask(&m_native, z.data.width, z.data.height),
        prompt,
        guidance,
        origin: Some(SampleOrigin { view, crop: draw.crop }),
    };
    let sample = sds_grad(prior, &z, &cond, draw.t, &draw.eps)?;
    let gx = prior.encode_adjoint(&x, &sample.grad)?;
    let gcrop = resize_bilinear_adjoint(&gx, draw.crop.width, draw.crop.height);
    let mut full = Image::new(rgb.width, rgb.height, rgb.channels);
    full.add_patch(draw.crop, &gcrop);
    Ok((full, sample.loss))
}

/// Distillation gradient of one training view for the Masked particles.
#[allow(clippy::too_many_arguments)]
pub fn multiscale_sds<P: DenoisePrior + ?Sized>(
    scene: &GaussianScene,
    view: usize,
    camera: &Camera,
    mask: &Mask,
    prior: &P,
    config: &SdsConfig,
    draws: &SdsDraws,
) -> Result<SdsOutput> {
    let rgb = render(scene, camera, RenderChannels::COLOR).rgb;
    let mut image_grad = Image::new(rgb.width, rgb.height, 3);
    let mut loss_global = 0.0;
    let mut loss_local = 0.0;
    if config.global {
        let (g, l) = branch_image_grad(prior, &rgb, mask, view, &draws.global, PromptTag::Global, config.guidance)?;
        image_grad.add_assign(&g);
        loss_global = l;
    }
    if config.local && !draws.locals.is_empty() {
        let inv = 1.0 / draws.locals.len() as f64;
        for draw in &draws.locals {
            let (mut g, l) = branch_image_grad(prior, &rgb, mask, view, draw, PromptTag::Local, config.guidance)?;
            g.scale(inv);
            image_grad.add_assign(&g);
            loss_local += inv * l;
        }
    }
    let mut grads = render_backward(scene, camera, &RenderGrad::from_rgb(image_grad.clone()));
    route_gradients(&mut grads, &scene.labels(), LossSource::Sds)?;
    Ok(SdsOutput {
        grads,
        image_grad,
        loss_global,
        loss_local,
    })
}
