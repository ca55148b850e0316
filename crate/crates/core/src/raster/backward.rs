//! Analytic gradients of [`super::render`] with respect to every particle
//! parameter.

use nalgebra::{Matrix2, Matrix3, Vector3};
use rayon::prelude::*;

use super::{composite_pixel, prepare_splats, Contribution, Splat, TileGrid, DEPTH_ALPHA_MIN};
use crate::grad::{ParticleGrad, ParticleGrads};
use crate::image::Image;
use crate::scene::{Camera, GaussianScene};
use crate::sh::sh_basis_jacobian;

/// Upstream gradient with the shape of a [`super::RenderOutput`]. Absent
/// channels contribute nothing.
#[derive(Clone, Debug, PartialEq)]
pub struct RenderGrad {
    pub rgb: Image,
    pub depth: Option<Image>,
    pub alpha: Option<Image>,
    pub semantic: Option<Image>,
}

impl RenderGrad {
    pub fn zeros(width: usize, height: usize) -> Self {
        Self::from_rgb(Image::new(width, height, 3))
    }

    pub fn from_rgb(rgb: Image) -> Self {
        Self {
            rgb,
            depth: None,
            alpha: None,
            semantic: None,
        }
    }

    pub fn from_depth(depth: Image) -> Self {
        Self {
            rgb: Image::new(depth.width, depth.height, 3),
            depth: Some(depth),
            alpha: None,
            semantic: None,
        }
    }
}

/// Gradient with respect to the 2D quantities of one splat.
#[derive(Clone, Copy, Debug, Default)]
struct ScreenGrad {
    mean: [f64; 2],
    /// d/d conic entries `(q00, q01, q11)`, q01 counted once for both
    /// off-diagonal slots.
    conic: [f64; 3],
    opacity_logit: f64,
    color: [f64; 3],
    depth: f64,
}

impl ScreenGrad {
    fn add(&mut self, o: &ScreenGrad) {
        for i in 0..2 {
            self.mean[i] += o.mean[i];
        }
        for i in 0..3 {
            self.conic[i] += o.conic[i];
            self.color[i] += o.color[i];
        }
        self.opacity_logit += o.opacity_logit;
        self.depth += o.depth;
    }
}

/// Per-pixel reverse sweep over the blended terms.
#[allow(clippy::too_many_arguments)]
fn backprop_pixel(
    splats: &[Splat],
    contribs: &[Contribution],
    t_final: f64,
    px: f64,
    py: f64,
    g_rgb: [f64; 3],
    g_depth: f64,
    g_alpha: f64,
    g_sem: f64,
    bg: &[f64; 3],
    mut sink: impl FnMut(u32, &ScreenGrad),
) {
    let alpha_out = 1.0 - t_final;
    let (g_dnum, g_cover) = if alpha_out > DEPTH_ALPHA_MIN && g_depth != 0.0 {
        let dnum: f64 = contribs
            .iter()
            .map(|c| c.alpha * c.transmittance * splats[c.splat as usize].geo.p_cam.z)
            .sum();
        (g_depth / alpha_out, g_alpha - g_depth * dnum / (alpha_out * alpha_out))
    } else {
        (0.0, g_alpha)
    };
    let g_bg = g_rgb[0] * bg[0] + g_rgb[1] * bg[1] + g_rgb[2] * bg[2];
    let mut behind = t_final * g_bg;
    for c in contribs.iter().rev() {
        let s = &splats[c.splat as usize];
        let w = c.alpha * c.transmittance;
        let gf = g_rgb[0] * s.color[0]
            + g_rgb[1] * s.color[1]
            + g_rgb[2] * s.color[2]
            + g_dnum * s.geo.p_cam.z
            + g_cover
            + g_sem * s.label;
        let d_alpha = c.transmittance * gf - behind / (1.0 - c.alpha);
        behind += w * gf;

        let mut g = ScreenGrad {
            color: [w * g_rgb[0], w * g_rgb[1], w * g_rgb[2]],
            depth: w * g_dnum,
            ..Default::default()
        };
        if !c.clamped {
            g.opacity_logit = d_alpha * c.gaussian * s.opacity * (1.0 - s.opacity);
            let g_power = -0.5 * c.alpha * d_alpha;
            let (_, dx, dy) = s.power(px, py);
            let q = &s.conic;
            g.mean = [
                -2.0 * g_power * (q[(0, 0)] * dx + q[(0, 1)] * dy),
                -2.0 * g_power * (q[(0, 1)] * dx + q[(1, 1)] * dy),
            ];
            g.conic = [g_power * dx * dx, g_power * 2.0 * dx * dy, g_power * dy * dy];
        }
        sink(c.splat, &g);
    }
}

/// Quaternion gradient from dL/dR for the normalized quaternion, then through
/// the normalization.
fn quat_grad(q: [f64; 4], g: &Matrix3<f64>) -> [f64; 4] {
    let n = crate::scene::quat_norm(q);
    let [w, x, y, z] = q.map(|v| v / n);
    let gw = 2.0 * (-z * g[(0, 1)] + y * g[(0, 2)] + z * g[(1, 0)] - x * g[(1, 2)] - y * g[(2, 0)] + x * g[(2, 1)]);
    let gx = 2.0
        * (y * g[(0, 1)] + z * g[(0, 2)] + y * g[(1, 0)] - 2.0 * x * g[(1, 1)] - w * g[(1, 2)] + z * g[(2, 0)]
            + w * g[(2, 1)]
            - 2.0 * x * g[(2, 2)]);
    let gy = 2.0
        * (-2.0 * y * g[(0, 0)] + x * g[(0, 1)] + w * g[(0, 2)] + x * g[(1, 0)] + z * g[(1, 2)] - w * g[(2, 0)]
            + z * g[(2, 1)]
            - 2.0 * y * g[(2, 2)]);
    let gz = 2.0
        * (-2.0 * z * g[(0, 0)] - w * g[(0, 1)] + x * g[(0, 2)] + w * g[(1, 0)] - 2.0 * z * g[(1, 1)]
            + y * g[(1, 2)]
            + x * g[(2, 0)]
            + y * g[(2, 1)]);
    let gh = [gw, gx, gy, gz];
    let qh = [w, x, y, z];
    let dot: f64 = gh.iter().zip(&qh).map(|(a, b)| a * b).sum();
    [0, 1, 2, 3].map(|i| (gh[i] - qh[i] * dot) / n)
}

fn chain_to_particle(s: &Splat, g: &ScreenGrad, camera: &Camera, scene: &GaussianScene) -> ParticleGrad {
    let particle = &scene.particles[s.index];
    let geo = &s.geo;
    let mut out = ParticleGrad::default();

    // Color: SH coefficients and view direction.
    let mut g_dir = Vector3::zeros();
    let jac_basis = sh_basis_jacobian(&s.view_dir);
    for ch in 0..3 {
        if !s.color_active[ch] || g.color[ch] == 0.0 {
            continue;
        }
        for k in 0..16 {
            out.sh[k][ch] = g.color[ch] * s.basis[k];
            let coef = g.color[ch] * particle.sh[k][ch];
            for a in 0..3 {
                g_dir[a] += coef * jac_basis[k][a];
            }
        }
    }
    if s.view_dist > 0.0 {
        out.position += (g_dir - s.view_dir * s.view_dir.dot(&g_dir)) / s.view_dist;
    }

    // Conic -> 2D covariance.
    let q = &s.conic;
    let g_q = Matrix2::new(g.conic[0], 0.5 * g.conic[1], 0.5 * g.conic[1], g.conic[2]);
    let g_cov2d = -(q.transpose() * g_q * q.transpose());

    // 2D covariance -> camera covariance and projection Jacobian.
    let j = &geo.jac;
    let g_cov_cam = j.transpose() * g_cov2d * j;
    let g_jac = (g_cov2d + g_cov2d.transpose()) * j * geo.cov_cam;

    // Camera-space position from mean, Jacobian and depth.
    let (fx, fy) = (camera.fx, camera.fy);
    let (x, y, z) = (geo.p_cam.x, geo.p_cam.y, geo.p_cam.z);
    let z2 = z * z;
    let z3 = z2 * z;
    let mut g_pc = Vector3::new(
        g.mean[0] * fx / z,
        g.mean[1] * fy / z,
        -g.mean[0] * fx * x / z2 - g.mean[1] * fy * y / z2 + g.depth,
    );
    // J02 = −fx·u/z with u = clamp(x/z); a clamped ratio is constant.
    let [u, v] = geo.ratio;
    g_pc.z += g_jac[(0, 0)] * (-fx / z2) + g_jac[(1, 1)] * (-fy / z2);
    if geo.clamped[0] {
        g_pc.z += g_jac[(0, 2)] * (fx * u / z2);
    } else {
        g_pc.x += g_jac[(0, 2)] * (-fx / z2);
        g_pc.z += g_jac[(0, 2)] * (2.0 * fx * x / z3);
    }
    if geo.clamped[1] {
        g_pc.z += g_jac[(1, 2)] * (fy * v / z2);
    } else {
        g_pc.y += g_jac[(1, 2)] * (-fy / z2);
        g_pc.z += g_jac[(1, 2)] * (2.0 * fy * y / z3);
    }
    let w = camera.rotation();
    out.position += w.transpose() * g_pc;

    // World covariance -> scale and rotation.
    let g_sigma = w.transpose() * g_cov_cam * w;
    let m = geo.rot * Matrix3::from_diagonal(&geo.scale);
    let g_m = (g_sigma + g_sigma.transpose()) * m;
    let mut g_rot = g_m;
    for col in 0..3 {
        let mut gs = 0.0;
        for row in 0..3 {
            gs += g_m[(row, col)] * geo.rot[(row, col)];
            g_rot[(row, col)] *= geo.scale[col];
        }
        out.log_scale[col] = gs * geo.scale[col];
    }
    out.rotation = quat_grad(particle.rotation, &g_rot);
    out.opacity_logit = g.opacity_logit;
    out
}

/// Backpropagates `upstream` through the renderer of `scene` seen from
/// `camera`. Culled particles and particles that blend into no pixel receive
/// exactly zero gradient.
pub fn render_backward(scene: &GaussianScene, camera: &Camera, upstream: &RenderGrad) -> ParticleGrads {
    let splats = prepare_splats(scene, camera);
    let grid = TileGrid::build(&splats, camera.width, camera.height);
    let (w, h) = (camera.width, camera.height);
    let bg = scene.background;

    let per_tile: Vec<Vec<ScreenGrad>> = (0..grid.lists.len())
        .into_par_iter()
        .map(|tile| {
            let list = &grid.lists[tile];
            let mut local = vec![ScreenGrad::default(); list.len()];
            let mut contribs = Vec::new();
            for (x, y) in grid.tile_pixels(tile, w, h) {
                let g_rgb = [upstream.rgb.get(x, y, 0), upstream.rgb.get(x, y, 1), upstream.rgb.get(x, y, 2)];
                let g_depth = upstream.depth.as_ref().map_or(0.0, |d| d.get(x, y, 0));
                let g_alpha = upstream.alpha.as_ref().map_or(0.0, |d| d.get(x, y, 0));
                let g_sem = upstream.semantic.as_ref().map_or(0.0, |d| d.get(x, y, 0));
                if g_rgb == [0.0; 3] && g_depth == 0.0 && g_alpha == 0.0 && g_sem == 0.0 {
                    continue;
                }
                contribs.clear();
                let (px, py) = (x as f64, y as f64);
                let t_final = composite_pixel(&splats, list.iter().copied(), px, py, |c| contribs.push(c));
                backprop_pixel(&splats, &contribs, t_final, px, py, g_rgb, g_depth, g_alpha, g_sem, &bg, |k, g| {
                    let slot = list.binary_search(&k).expect("contributing splat is in tile list");
                    local[slot].add(g);
                });
            }
            local
        })
        .collect();

    let mut screen = vec![ScreenGrad::default(); splats.len()];
    for (tile, local) in per_tile.iter().enumerate() {
        for (&k, g) in grid.lists[tile].iter().zip(local) {
            screen[k as usize].add(g);
        }
    }

    let chained: Vec<(usize, ParticleGrad, [f64; 2])> = splats
        .par_iter()
        .zip(&screen)
        .map(|(s, g)| (s.index, chain_to_particle(s, g, camera, scene), g.mean))
        .collect();

    let mut out = ParticleGrads::zeros(scene.len());
    for (idx, g, mean) in chained {
        out.particles[idx] = g;
        out.screen[idx] = mean;
    }
    out
}
