//! Procedural desk-scale inpainting benchmark: a textured cylindrical room,
//! a floating object in front of its back wall, and a narrow arc of inward
//! cameras. Room particles that no training view sees past the object are
//! missing from the input scene, as they would be from a real capture.

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{Image, Mask};
use crate::raster::{accumulate_contributions, render, RenderChannels, DEFAULT_CONTRIBUTION_THRESHOLD};
use crate::reference::ReferenceView;
use crate::scene::{logit, Camera, CameraView, GaussianParticle, GaussianScene, Label};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ToyConfig {
    pub width: usize,
    pub height: usize,
    pub focal: f64,
    pub n_cameras: usize,
    /// Total angular span of the camera arc, degrees.
    pub arc_degrees: f64,
    pub camera_radius: f64,
    pub room_radius: f64,
    pub wall_columns: usize,
    pub wall_rows: usize,
    pub floor_spacing: f64,
    pub object_particles: usize,
    pub object_radius: f64,
    /// Every `holdout_every`-th camera (1-based) is held out for evaluation.
    pub holdout_every: usize,
    /// Semantic threshold defining the masks.
    pub mask_threshold: f64,
    /// Blur, in pixels, applied inside the mask of the reference image to
    /// stand in for an imperfect 2D inpainting.
    pub reference_blur: f64,
    /// Affine map from true depth to the reference's relative depth.
    pub depth_scale: f64,
    pub depth_offset: f64,
}

impl Default for ToyConfig {
    fn default() -> Self {
        Self {
            width: 64,
            height: 64,
            focal: 50.0,
            n_cameras: 20,
            arc_degrees: 20.0,
            camera_radius: 3.0,
            room_radius: 4.0,
            wall_columns: 48,
            wall_rows: 7,
            floor_spacing: 0.6,
            object_particles: 50,
            object_radius: 0.45,
            holdout_every: 5,
            mask_threshold: 0.3,
            reference_blur: 1.5,
            depth_scale: 0.5,
            depth_offset: 0.3,
        }
    }
}

#[derive(Clone, Debug)]
pub struct ToyScene {
    /// Object-free room with every particle.
    pub complete: GaussianScene,
    /// Complete room plus the object.
    pub augmented: GaussianScene,
    /// Observed room plus the object, all labeled Unmasked; the starting
    /// point of the pipeline.
    pub input: GaussianScene,
    /// Object particle indices in `input`.
    pub object_indices: Vec<usize>,
    pub cameras: Vec<Camera>,
    /// Object footprint per view.
    pub masks: Vec<Mask>,
    /// Renders of `input`: what the capture saw.
    pub images: Vec<Image>,
    /// Renders of `complete`.
    pub ground_truth: Vec<Image>,
    pub ground_truth_depth: Vec<Image>,
    pub train_views: Vec<usize>,
    pub holdout_views: Vec<usize>,
    /// Index into `cameras` of the reference view.
    pub reference_view: usize,
    pub reference: ReferenceView,
}

impl ToyScene {
    pub fn training_views(&self) -> Result<Vec<CameraView>> {
        self.train_views
            .iter()
            .map(|&i| CameraView::new(self.cameras[i].clone(), self.images[i].clone(), self.masks[i].clone()))
            .collect()
    }
}

fn particle(position: Vector3<f64>, scale: Vector3<f64>, rotation: [f64; 4], opacity: f64, rgb: [f64; 3]) -> GaussianParticle {
    let mut p = GaussianParticle::isotropic(position, 1.0, opacity, rgb.map(|c| c.clamp(0.02, 0.98)));
    p.log_scale = scale.map(f64::ln);
    p.rotation = rotation;
    p.opacity_logit = logit(opacity);
    p
}

fn room(rng: &mut ChaCha8Rng, c: &ToyConfig) -> Vec<GaussianParticle> {
    let mut out = Vec::new();
    let r = c.room_radius;
    let dtheta = std::f64::consts::TAU / c.wall_columns as f64;
    let row_h = 0.4;
    let tangent = 0.6 * r * dtheta;
    for col in 0..c.wall_columns {
        for row in 0..c.wall_rows {
            let theta = (col as f64 + 0.5) * dtheta + rng.gen_range(-0.05..0.05) * dtheta;
            let y = row_h * (row as f64 + 0.5) + rng.gen_range(-0.02..0.02);
            let stripe = if (col + row) % 2 == 0 { 0.12 } else { -0.12 };
            let rgb = [
                0.55 + 0.25 * (2.0 * theta).sin() + stripe,
                0.5 + 0.2 * (3.0 * theta).cos() + stripe,
                0.45 + 0.2 * (theta + 1.0).sin() + stripe,
            ]
            .map(|v| v + rng.gen_range(-0.02..0.02));
            let half = 0.5 * theta;
            out.push(particle(
                Vector3::new(r * theta.sin(), y, r * theta.cos()),
                Vector3::new(tangent, 0.6 * row_h, 0.05),
                [half.cos(), 0.0, half.sin(), 0.0],
                0.95,
                rgb,
            ));
        }
    }
    let s = c.floor_spacing;
    let n = (r / s).ceil() as i64;
    for ix in -n..=n {
        for iz in -n..=n {
            let (x, z) = (ix as f64 * s, iz as f64 * s);
            if x.hypot(z) > r - 0.1 {
                continue;
            }
            let base = if (ix + iz).rem_euclid(2) == 0 { 0.6 } else { 0.35 };
            let rgb = [base * 0.9 + 0.05, base * 0.85, base * 0.75].map(|v| v + rng.gen_range(-0.02..0.02));
            out.push(particle(
                Vector3::new(x + rng.gen_range(-0.02..0.02), 0.0, z + rng.gen_range(-0.02..0.02)),
                Vector3::new(0.6 * s, 0.04, 0.6 * s),
                [1.0, 0.0, 0.0, 0.0],
                0.95,
                rgb,
            ));
        }
    }
    out
}

const OBJECT_CENTER: [f64; 3] = [0.0, 0.8, 0.0];

fn object(rng: &mut ChaCha8Rng, c: &ToyConfig) -> Vec<GaussianParticle> {
    let center = Vector3::from(OBJECT_CENTER);
    let mut out = Vec::with_capacity(c.object_particles);
    while out.len() < c.object_particles {
        let v = Vector3::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0));
        if v.norm() > 1.0 {
            continue;
        }
        let rgb = [0.85, 0.2, 0.15].map(|x: f64| x + rng.gen_range(-0.05..0.05));
        out.push(particle(center + v * c.object_radius, Vector3::repeat(0.1), [1.0, 0.0, 0.0, 0.0], 0.95, rgb));
    }
    out
}

fn cameras(c: &ToyConfig) -> Result<Vec<Camera>> {
    let target = Vector3::from(OBJECT_CENTER);
    (0..c.n_cameras)
        .map(|i| {
            let f = if c.n_cameras > 1 { i as f64 / (c.n_cameras - 1) as f64 } else { 0.5 };
            let phi = (f - 0.5) * c.arc_degrees.to_radians();
            let y = 1.1 + if i % 2 == 0 { 0.1 } else { -0.1 };
            let eye = Vector3::new(c.camera_radius * phi.sin(), y, c.camera_radius * phi.cos());
            Camera::look_at(c.width, c.height, c.focal, eye, target, Vector3::y())
        })
        .collect()
}

/// Separable Gaussian blur with renormalized borders.
pub fn gaussian_blur(img: &Image, sigma: f64) -> Image {
    if sigma <= 0.0 {
        return img.clone();
    }
    let r = (3.0 * sigma).ceil() as isize;
    let k: Vec<f64> = (-r..=r).map(|d| (-(d * d) as f64 / (2.0 * sigma * sigma)).exp()).collect();
    let pass = |src: &Image, horizontal: bool| {
        let mut out = Image::new(src.width, src.height, src.channels);
        for y in 0..src.height {
            for x in 0..src.width {
                for ch in 0..src.channels {
                    let (mut num, mut den) = (0.0, 0.0);
                    for (i, kv) in k.iter().enumerate() {
                        let d = i as isize - r;
                        let (sx, sy) = if horizontal { (x as isize + d, y as isize) } else { (x as isize, y as isize + d) };
                        if sx >= 0 && sy >= 0 && (sx as usize) < src.width && (sy as usize) < src.height {
                            num += kv * src.get(sx as usize, sy as usize, ch);
                            den += kv;
                        }
                    }
                    out.set(x, y, ch, num / den);
                }
            }
        }
        out
    };
    pass(&pass(img, true), false)
}

/// Builds the benchmark. Identical seeds give bitwise-identical output.
pub fn make_toy_scene(seed: u64, config: &ToyConfig) -> Result<ToyScene> {
    if config.n_cameras < 2 || config.holdout_every < 2 {
        return Err(Error::InvalidConfig("the toy needs at least two cameras and holdout_every ≥ 2".into()));
    }
    if !(config.room_radius > config.camera_radius && config.camera_radius > config.object_radius + 0.5) {
        return Err(Error::InvalidConfig("toy cameras must sit between the object and the walls".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let room = room(&mut rng, config);
    let mut obj = object(&mut rng, config);
    for p in &mut obj {
        p.label = Label::Masked;
    }
    let cameras = cameras(config)?;
    let train_views: Vec<usize> = (0..config.n_cameras).filter(|i| (i + 1) % config.holdout_every != 0).collect();
    let holdout_views: Vec<usize> = (0..config.n_cameras).filter(|i| (i + 1) % config.holdout_every == 0).collect();

    let complete = GaussianScene::new(room.clone());
    let mut augmented = complete.clone();
    augmented.particles.extend(obj.iter().cloned());

    let nothing = Mask::empty(config.width, config.height);
    let tally = accumulate_contributions(
        &augmented,
        train_views.iter().map(|&i| (&cameras[i], &nothing)),
        DEFAULT_CONTRIBUTION_THRESHOLD,
    );
    let mut input = GaussianScene::new(
        room.iter()
            .enumerate()
            .filter(|(i, _)| tally.unmasked[*i] > 0)
            .map(|(_, p)| p.clone())
            .collect(),
    );
    let first_object = input.len();
    input.particles.extend(obj.iter().cloned());
    let object_indices: Vec<usize> = (first_object..input.len()).collect();

    let labeled = input.clone();
    for p in &mut input.particles {
        p.label = Label::Unmasked;
    }
    let mut masks = Vec::with_capacity(cameras.len());
    let mut images = Vec::with_capacity(cameras.len());
    let mut ground_truth = Vec::with_capacity(cameras.len());
    let mut ground_truth_depth = Vec::with_capacity(cameras.len());
    for cam in &cameras {
        let seen = render(&labeled, cam, RenderChannels::ALL);
        masks.push(Mask::from_fn(cam.width, cam.height, |x, y| seen.semantic.get(x, y, 0) >= config.mask_threshold));
        images.push(seen.rgb);
        let gt = render(&complete, cam, RenderChannels::ALL);
        ground_truth.push(gt.rgb);
        ground_truth_depth.push(gt.depth);
    }

    let reference_view = train_views[0];
    let mask = masks[reference_view].clone();
    let blurred = gaussian_blur(&ground_truth[reference_view], config.reference_blur);
    let mut ref_image = ground_truth[reference_view].clone();
    for (i, &m) in mask.data.iter().enumerate() {
        if m {
            ref_image.data[3 * i..3 * i + 3].copy_from_slice(&blurred.data[3 * i..3 * i + 3]);
        }
    }
    let relative = ground_truth_depth[reference_view].map(|d| config.depth_scale * d + config.depth_offset);
    let reference = ReferenceView::new(cameras[reference_view].clone(), ref_image, mask, relative)?;

    Ok(ToyScene {
        complete,
        augmented,
        input,
        object_indices,
        cameras,
        masks,
        images,
        ground_truth,
        ground_truth_depth,
        train_views,
        holdout_views,
        reference_view,
        reference,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_per_seed() {
        let c = ToyConfig::default();
        let a = make_toy_scene(3, &c).unwrap();
        let b = make_toy_scene(3, &c).unwrap();
        assert_eq!(a.input, b.input);
        assert_eq!(a.images, b.images);
        assert_eq!(a.masks, b.masks);
        assert_eq!(a.ground_truth, b.ground_truth);
        let d = make_toy_scene(4, &c).unwrap();
        assert_ne!(a.input, d.input);
    }

    #[test]
    fn layout() {
        let t = make_toy_scene(0, &ToyConfig::default()).unwrap();
        println!(
            "room {} input {} object {} mask px {:?}",
            t.complete.len(),
            t.input.len(),
            t.object_indices.len(),
            t.masks.iter().map(Mask::count).collect::<Vec<_>>()
        );
        assert_eq!(t.train_views.len(), 16);
        assert_eq!(t.holdout_views, vec![4, 9, 14, 19]);
        assert!(t.input.len() < t.augmented.len(), "some room particles are never observed");
        assert!(t.masks.iter().all(|m| m.count() > 50));
    }
}
