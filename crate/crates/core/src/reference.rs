//! Reference-guided initialization of the masked region: affine alignment of
//! a relative depth map, edge-aware refinement, and unprojection of the
//! reference pixels into new particles.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{Image, Mask};
use crate::raster::{render, RenderChannels};
use crate::scene::{logit, Camera, GaussianParticle, GaussianScene, Label};
use crate::sh::rgb_to_dc;

/// Single reference image with its camera, inpainting mask and relative depth.
#[derive(Clone, Debug, PartialEq)]
pub struct ReferenceView {
    pub camera: Camera,
    pub image: Image,
    pub mask: Mask,
    pub relative_depth: Image,
}

impl ReferenceView {
    pub fn new(camera: Camera, image: Image, mask: Mask, relative_depth: Image) -> Result<Self> {
        let (w, h) = (camera.width, camera.height);
        if image.shape() != (w, h, 3) {
            return Err(Error::shape(format!("{w}x{h}x3 reference image"), format!("{:?}", image.shape())));
        }
        if (mask.width, mask.height) != (w, h) {
            return Err(Error::shape(format!("{w}x{h} mask"), format!("{}x{}", mask.width, mask.height)));
        }
        if relative_depth.shape() != (w, h, 1) {
            return Err(Error::shape(format!("{w}x{h}x1 depth"), format!("{:?}", relative_depth.shape())));
        }
        Ok(Self {
            camera,
            image,
            mask,
            relative_depth,
        })
    }
}

/// `aligned = scale · relative + offset` on every pixel.
#[derive(Clone, Debug, PartialEq)]
pub struct DepthAlignment {
    pub scale: f64,
    pub offset: f64,
    pub aligned: Image,
    /// The relative depth was constant over the support, so the fallback
    /// `scale = 1` was used.
    pub degenerate: bool,
}

/// Least-squares `(s, o)` minimizing `Σ (s·relative + o − rendered)²` over the
/// pixels set in `support`.
pub fn align_depth(relative: &Image, rendered: &Image, support: &Mask) -> Result<DepthAlignment> {
    relative.ensure_shape(rendered)?;
    if relative.channels != 1 || (support.width, support.height) != (relative.width, relative.height) {
        return Err(Error::shape("single-channel depth matching the support mask", format!("{:?}", relative.shape())));
    }
    let pairs: Vec<(f64, f64)> = support
        .data
        .iter()
        .zip(relative.data.iter().zip(&rendered.data))
        .filter(|(&s, _)| s)
        .map(|(_, (&x, &y))| (x, y))
        .collect();
    if pairs.is_empty() {
        return Err(Error::InvalidInput("depth alignment needs at least one supporting pixel".into()));
    }
    let n = pairs.len() as f64;
    let mx = pairs.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pairs.iter().map(|p| p.1).sum::<f64>() / n;
    let sxx: f64 = pairs.iter().map(|p| (p.0 - mx) * (p.0 - mx)).sum();
    let sxy: f64 = pairs.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let scale_sq: f64 = pairs.iter().map(|p| p.0 * p.0).sum::<f64>().max(f64::MIN_POSITIVE);
    let degenerate = pairs.len() < 2 || sxx <= 1e-14 * scale_sq;
    let (scale, offset) = if degenerate {
        log::warn!("relative depth is constant over the alignment support; using scale 1");
        (1.0, my - mx)
    } else {
        let s = sxy / sxx;
        (s, my - s * mx)
    };
    Ok(DepthAlignment {
        scale,
        offset,
        aligned: relative.map(|d| scale * d + offset),
        degenerate,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BilateralConfig {
    pub sigma_color: f64,
    /// Pixels.
    pub sigma_space: f64,
    pub iterations: usize,
    /// Window half-width; 2 gives 5×5.
    pub radius: usize,
}

impl Default for BilateralConfig {
    fn default() -> Self {
        Self {
            sigma_color: 0.1,
            sigma_space: 2.0,
            iterations: 10,
            radius: 2,
        }
    }
}

/// Jacobi iterations of joint-bilateral averaging guided by `guide`. Only
/// pixels set in `mask` change; the rest act as boundary values.
pub fn bilateral_refine(depth: &Image, guide: &Image, mask: &Mask, config: &BilateralConfig) -> Result<Image> {
    let (w, h) = (depth.width, depth.height);
    if depth.channels != 1 || (guide.width, guide.height) != (w, h) || (mask.width, mask.height) != (w, h) {
        return Err(Error::shape(format!("{w}x{h} depth, guide and mask"), format!("guide {:?}", guide.shape())));
    }
    let r = config.radius as isize;
    let inv_c = 1.0 / (2.0 * config.sigma_color * config.sigma_color);
    let inv_s = 1.0 / (2.0 * config.sigma_space * config.sigma_space);
    let mut cur = depth.clone();
    for _ in 0..config.iterations {
        let mut next = cur.clone();
        for y in 0..h {
            for x in 0..w {
                if !mask.get(x, y) {
                    continue;
                }
                let gp = guide.pixel(x, y);
                let (mut num, mut den) = (0.0, 0.0);
                for dy in -r..=r {
                    for dx in -r..=r {
                        let (qx, qy) = (x as isize + dx, y as isize + dy);
                        if qx < 0 || qy < 0 || qx >= w as isize || qy >= h as isize {
                            continue;
                        }
                        let (qx, qy) = (qx as usize, qy as usize);
                        let gq = guide.pixel(qx, qy);
                        let dc: f64 = gp.iter().zip(gq).map(|(a, b)| (a - b) * (a - b)).sum();
                        let ds = (dx * dx + dy * dy) as f64;
                        let wgt = (-dc * inv_c).exp() * (-ds * inv_s).exp();
                        num += wgt * cur.get(qx, qy, 0);
                        den += wgt;
                    }
                }
                next.set(x, y, 0, num / den);
            }
        }
        cur = next;
    }
    Ok(cur)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct UnprojectConfig {
    pub stride: usize,
    pub opacity: f64,
    /// Particle scale in units of the pixel footprint `depth · stride / fx`.
    pub footprint_scale: f64,
}

impl Default for UnprojectConfig {
    fn default() -> Self {
        Self {
            stride: 1,
            opacity: 0.8,
            footprint_scale: 1.0,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Unprojection {
    pub particles: Vec<GaussianParticle>,
    /// Masked pixels skipped because their depth was not positive.
    pub skipped_nonpositive: usize,
}

/// One Masked particle per (strided) masked reference pixel, placed at
/// `depth` along the pixel's ray and colored by the pixel.
pub fn unproject_reference(reference: &ReferenceView, depth: &Image, config: &UnprojectConfig) -> Result<Unprojection> {
    let cam = &reference.camera;
    if depth.shape() != (cam.width, cam.height, 1) {
        return Err(Error::shape(format!("{}x{}x1 depth", cam.width, cam.height), format!("{:?}", depth.shape())));
    }
    if config.stride == 0 {
        return Err(Error::InvalidConfig("unprojection stride must be at least 1".into()));
    }
    if !(config.opacity > 0.0 && config.opacity < 1.0) {
        return Err(Error::InvalidConfig(format!("unprojection opacity must lie in (0, 1), got {}", config.opacity)));
    }
    let mut out = Unprojection::default();
    for y in (0..cam.height).step_by(config.stride) {
        for x in (0..cam.width).step_by(config.stride) {
            if !reference.mask.get(x, y) {
                continue;
            }
            let d = depth.get(x, y, 0);
            if !(d > 0.0) {
                out.skipped_nonpositive += 1;
                continue;
            }
            let px = reference.image.pixel(x, y);
            let mut sh = [[0.0; 3]; 16];
            sh[0] = rgb_to_dc([px[0], px[1], px[2]]);
            let scale = config.footprint_scale * d * config.stride as f64 / cam.fx;
            out.particles.push(GaussianParticle {
                position: cam.unproject(x as f64, y as f64, d),
                log_scale: nalgebra::Vector3::repeat(scale.ln()),
                rotation: [1.0, 0.0, 0.0, 0.0],
                opacity_logit: logit(config.opacity),
                sh,
                label: Label::Masked,
            });
        }
    }
    Ok(out)
}

/// Aligns the reference's relative depth against the current scene rendered
/// from the reference camera (using unmasked, covered pixels), then refines it
/// inside the mask.
pub fn reference_depth(scene: &GaussianScene, reference: &ReferenceView, bilateral: &BilateralConfig) -> Result<(DepthAlignment, Image)> {
    let out = render(scene, &reference.camera, RenderChannels::ALL);
    let support = Mask::from_fn(reference.camera.width, reference.camera.height, |x, y| {
        !reference.mask.get(x, y) && out.alpha.get(x, y, 0) > 0.5
    });
    let alignment = align_depth(&reference.relative_depth, &out.depth, &support)?;
    let refined = bilateral_refine(&alignment.aligned, &reference.image, &reference.mask, bilateral)?;
    Ok((alignment, refined))
}

/// Deletes every Masked particle and appends the unprojected reference
/// particles. Unmasked particles keep their order and values.
pub fn init_masked_region(scene: &GaussianScene, reference: &ReferenceView, depth: &Image, config: &UnprojectConfig) -> Result<(GaussianScene, Unprojection)> {
    let unproj = unproject_reference(reference, depth, config)?;
    let mut particles: Vec<GaussianParticle> = scene.particles.iter().filter(|p| !p.label.is_masked()).cloned().collect();
    particles.extend(unproj.particles.iter().cloned());
    let out = GaussianScene {
        particles,
        background: scene.background,
    };
    Ok((out, unproj))
}
