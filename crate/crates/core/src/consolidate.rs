//! Lifting per-view 2D masks to per-particle labels, re-rendering
//! view-consistent masks, and outpainting masks.

use nalgebra::Vector3;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::Mask;
use crate::raster::{accumulate_contributions, render, ContributionTally, RenderChannels, DEFAULT_CONTRIBUTION_THRESHOLD};
use crate::scene::{Camera, GaussianScene, Label};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ConsolidationConfig {
    /// Masked iff masked ≥ tau·unmasked.
    pub tau_mask: f64,
    /// Semantic threshold for re-rendered masks.
    pub tau_prime: f64,
    /// `false` makes the label comparison strict.
    pub inclusive: bool,
    pub contribution_threshold: f64,
}

impl Default for ConsolidationConfig {
    fn default() -> Self {
        Self {
            tau_mask: 1.0,
            tau_prime: 0.3,
            inclusive: true,
            contribution_threshold: DEFAULT_CONTRIBUTION_THRESHOLD,
        }
    }
}

/// Labels with the inclusive comparison `masked ≥ tau·unmasked`. A particle
/// seen only in masked pixels is Masked; one never seen is Unmasked.
pub fn label_gaussians(tally: &ContributionTally, tau: f64) -> Result<Vec<Label>> {
    label_gaussians_with(tally, tau, true)
}

pub fn label_gaussians_with(tally: &ContributionTally, tau: f64, inclusive: bool) -> Result<Vec<Label>> {
    if !(tau >= 0.0) {
        return Err(Error::InvalidConfig(format!("tau_mask must be nonnegative, got {tau}")));
    }
    Ok(tally
        .masked
        .iter()
        .zip(&tally.unmasked)
        .map(|(&m, &u)| {
            let masked = if u == 0 {
                m > 0
            } else {
                let (m, rhs) = (m as f64, tau * u as f64);
                if inclusive {
                    m >= rhs
                } else {
                    m > rhs
                }
            };
            if masked {
                Label::Masked
            } else {
                Label::Unmasked
            }
        })
        .collect())
}

/// Per view, pixels whose rendered semantic value reaches `tau_prime`.
pub fn render_consistent_masks(scene: &GaussianScene, cameras: &[Camera], tau_prime: f64) -> Result<Vec<Mask>> {
    if !(0.0..=1.0).contains(&tau_prime) {
        return Err(Error::InvalidConfig(format!("tau_prime must lie in [0, 1], got {tau_prime}")));
    }
    let channels = RenderChannels {
        color: false,
        depth: false,
        semantic: true,
    };
    Ok(cameras
        .iter()
        .map(|cam| {
            let out = render(scene, cam, channels);
            Mask::from_fn(cam.width, cam.height, |x, y| out.semantic.get(x, y, 0) >= tau_prime)
        })
        .collect())
}

/// Labels the scene from the given per-view masks and returns the re-rendered
/// consistent masks.
pub fn consolidate(scene: &mut GaussianScene, views: &[(Camera, Mask)], config: &ConsolidationConfig) -> Result<Vec<Mask>> {
    let tally = accumulate_contributions(scene, views.iter().map(|(c, m)| (c, m)), config.contribution_threshold);
    let labels = label_gaussians_with(&tally, config.tau_mask, config.inclusive)?;
    scene.set_labels(&labels)?;
    let cameras: Vec<Camera> = views.iter().map(|(c, _)| c.clone()).collect();
    render_consistent_masks(scene, &cameras, config.tau_prime)
}

/// Whether the camera-space ray `dir` from the origin meets the sphere of
/// `radius` centered at `(0, 0, distance)`.
pub fn ray_hits_sphere(dir: &Vector3<f64>, distance: f64, radius: f64) -> bool {
    let center = Vector3::new(0.0, 0.0, distance);
    let t = dir.dot(&center) / dir.norm_squared();
    if t < 0.0 {
        return false;
    }
    (dir * t - center).norm_squared() <= radius * radius
}

/// Per view, marks the pixels whose rays miss a sphere placed on the optical
/// axis; those are the regions to synthesize.
pub fn generate_outpaint_masks(cameras: &[Camera], distance: f64, radius: f64) -> Result<Vec<Mask>> {
    if !(radius > 0.0 && distance > radius) {
        return Err(Error::InvalidInput(format!(
            "outpainting sphere needs distance > radius > 0, got distance {distance}, radius {radius}"
        )));
    }
    Ok(cameras
        .par_iter()
        .map(|cam| {
            Mask::from_fn(cam.width, cam.height, |x, y| {
                !ray_hits_sphere(&cam.pixel_ray(x as f64, y as f64), distance, radius)
            })
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::raster::render_untiled;
    use crate::scene::GaussianParticle;
    use nalgebra::Matrix4;
    use proptest::prelude::*;

    fn tally(pairs: &[(u64, u64)]) -> ContributionTally {
        ContributionTally {
            masked: pairs.iter().map(|p| p.0).collect(),
            unmasked: pairs.iter().map(|p| p.1).collect(),
        }
    }

    #[test]
    fn label_rule_examples() {
        let t = tally(&[(3, 2), (0, 5), (2, 2), (1, 0), (0, 0)]);
        let labels = label_gaussians(&t, 1.0).unwrap();
        assert_eq!(
            labels,
            vec![Label::Masked, Label::Unmasked, Label::Masked, Label::Masked, Label::Unmasked]
        );
        let strict = label_gaussians_with(&t, 1.0, false).unwrap();
        assert_eq!(strict[2], Label::Unmasked);
    }

    #[test]
    fn negative_tau_is_rejected() {
        assert!(matches!(label_gaussians(&tally(&[(1, 1)]), -0.5), Err(Error::InvalidConfig(_))));
    }

    #[test]
    fn tau_prime_outside_unit_interval_is_rejected() {
        let cam = Camera::new(4, 4, 4.0, 4.0, 2.0, 2.0, Matrix4::identity()).unwrap();
        assert!(render_consistent_masks(&GaussianScene::default(), &[cam.clone()], 1.5).is_err());
        assert!(render_consistent_masks(&GaussianScene::default(), &[cam], -0.1).is_err());
    }

    fn wall_scene(label: Label) -> (GaussianScene, Camera) {
        let cam = Camera::new(16, 16, 16.0, 16.0, 7.5, 7.5, Matrix4::identity()).unwrap();
        let mut p = GaussianParticle::isotropic(Vector3::new(0.0, 0.0, 2.0), 10.0, 0.5, [0.5; 3]);
        p.opacity_logit = 30.0;
        p.label = label;
        (GaussianScene::new(vec![p]), cam)
    }

    #[test]
    fn all_masked_opaque_scene_gives_full_masks() {
        let (scene, cam) = wall_scene(Label::Masked);
        let masks = render_consistent_masks(&scene, &[cam], 0.3).unwrap();
        assert_eq!(masks[0].count(), 256);
    }

    #[test]
    fn all_unmasked_scene_gives_empty_masks() {
        let (scene, cam) = wall_scene(Label::Unmasked);
        let masks = render_consistent_masks(&scene, &[cam], 0.3).unwrap();
        assert!(masks[0].is_empty());
    }

    #[test]
    fn mixed_scene_matches_untiled_semantic_oracle() {
        let cam = Camera::new(40, 40, 40.0, 40.0, 19.5, 19.5, Matrix4::identity()).unwrap();
        let mut a = GaussianParticle::isotropic(Vector3::new(-0.3, 0.0, 4.0), 0.4, 0.8, [0.5; 3]);
        a.label = Label::Masked;
        let b = GaussianParticle::isotropic(Vector3::new(0.3, 0.1, 3.0), 0.5, 0.6, [0.5; 3]);
        let mut c = GaussianParticle::isotropic(Vector3::new(0.1, -0.4, 5.0), 0.7, 0.9, [0.5; 3]);
        c.label = Label::Masked;
        let scene = GaussianScene::new(vec![a, b, c]);
        let masks = render_consistent_masks(&scene, &[cam.clone()], 0.3).unwrap();
        let oracle = render_untiled(&scene, &cam, RenderChannels::ALL);
        let expect = Mask::from_fn(40, 40, |x, y| oracle.semantic.get(x, y, 0) >= 0.3);
        assert_eq!(masks[0], expect);
        assert!(expect.count() > 0 && expect.count() < 1600);
    }

    fn outpaint_camera() -> Camera {
        Camera::new(640, 480, 500.0, 500.0, 320.0, 240.0, Matrix4::identity()).unwrap()
    }

    #[test]
    fn principal_point_ray_always_hits() {
        let masks = generate_outpaint_masks(&[outpaint_camera()], 4.0, 1.0).unwrap();
        assert!(!masks[0].get(320, 240));
    }

    #[test]
    fn huge_sphere_leaves_nothing_to_outpaint() {
        // Widest ray is ~38.7° off axis: closest approach 4·sin(38.7°) ≈ 2.5.
        let masks = generate_outpaint_masks(&[outpaint_camera()], 4.0, 3.9).unwrap();
        assert!(masks[0].is_empty());
    }

    #[test]
    fn outpaint_boundary_matches_discriminant_oracle() {
        let cam = outpaint_camera();
        let (d, r) = (4.0, 1.0);
        let masks = generate_outpaint_masks(&[cam.clone()], d, r).unwrap();
        let mut masked = 0;
        for y in 0..480 {
            for x in 0..640 {
                let dir = cam.pixel_ray(x as f64, y as f64);
                let qa = dir.dot(&dir);
                let qb = -2.0 * dir.z * d;
                let qc = d * d - r * r;
                let hit = qb * qb - 4.0 * qa * qc >= 0.0;
                assert_eq!(masks[0].get(x, y), !hit, "pixel ({x}, {y})");
                masked += usize::from(!hit);
            }
        }
        assert!(masked > 0 && masked < 640 * 480);
    }

    #[test]
    fn invalid_sphere_is_rejected() {
        assert!(generate_outpaint_masks(&[outpaint_camera()], 1.0, 2.0).is_err());
        assert!(generate_outpaint_masks(&[outpaint_camera()], 1.0, 0.0).is_err());
    }

    proptest! {
        #[test]
        fn raising_tau_never_creates_masked(m in 0u64..50, u in 0u64..50, t1 in 0.0f64..5.0, dt in 0.0f64..5.0) {
            let t = tally(&[(m, u)]);
            let lo = label_gaussians(&t, t1).unwrap()[0];
            let hi = label_gaussians(&t, t1 + dt).unwrap()[0];
            prop_assert!(!(lo == Label::Unmasked && hi == Label::Masked));
        }
    }
}
