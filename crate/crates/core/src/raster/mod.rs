//! Tile-based differentiable splatting.
//!
//! Particles are projected with the local affine approximation of the
//! perspective map, sorted globally by `(camera depth, particle index)` and
//! alpha-composited front to back per pixel. Every pixel only ever sees the
//! sorted list filtered by its tile, so the tiled renderer and the untiled
//! per-pixel reference ([`render_untiled`]) perform identical arithmetic.

mod backward;

use nalgebra::{Matrix2, Matrix2x3, Matrix3, Vector2, Vector3};
use rayon::prelude::*;

use crate::image::{Image, Mask};
use crate::scene::{quat_to_rotmat, sigmoid, Camera, GaussianParticle, GaussianScene};
use crate::sh::{sh_basis, sh_reconstruct, SH_BASIS_LEN};

pub use backward::{render_backward, RenderGrad};

pub const TILE_SIZE: usize = 16;
/// Added to the diagonal of every projected covariance, px².
pub const COV2D_FLOOR: f64 = 0.3;
pub const MAX_ALPHA: f64 = 0.999;
/// Compositing stops once transmittance falls below this.
pub const MIN_TRANSMITTANCE: f64 = 1e-4;
pub const NEAR_PLANE: f64 = 0.2;
/// The projection Jacobian is evaluated with `x/z` and `y/z` clamped to this
/// multiple of the half-field-of-view tangent, which keeps particles grazing
/// the image plane from exploding across the view.
pub const JACOBIAN_FOV_MARGIN: f64 = 1.3;
/// Mahalanobis power beyond which a particle does not touch a pixel
/// (Gaussian falloff below 1e-8).
pub const SUPPORT_POWER: f64 = 36.841_361_487_904_734;
/// Depth is normalized by alpha only above this coverage; below, depth = 0.
pub const DEPTH_ALPHA_MIN: f64 = 1e-4;
/// Default compositing-weight threshold for contribution counting.
pub const DEFAULT_CONTRIBUTION_THRESHOLD: f64 = 1e-3;

/// Screen-space footprint of one particle.
#[derive(Clone, Debug, PartialEq)]
pub struct Projection {
    pub mean: Vector2<f64>,
    pub cov: Matrix2<f64>,
    pub depth: f64,
}

/// Projects one particle; `None` when it is culled (behind the near plane or
/// with an invalid rotation).
pub fn project(particle: &GaussianParticle, camera: &Camera) -> Option<Projection> {
    let geo = project_geometry(particle, camera)?;
    Some(Projection {
        mean: geo.mean,
        cov: geo.cov2d,
        depth: geo.p_cam.z,
    })
}

#[derive(Clone, Debug)]
pub(crate) struct Geometry {
    pub p_cam: Vector3<f64>,
    pub rot: Matrix3<f64>,
    pub scale: Vector3<f64>,
    pub cov_cam: Matrix3<f64>,
    pub jac: Matrix2x3<f64>,
    /// `x/z` and `y/z` after clamping, and whether each was clamped.
    pub ratio: [f64; 2],
    pub clamped: [bool; 2],
    pub cov2d: Matrix2<f64>,
    pub mean: Vector2<f64>,
}

pub(crate) fn project_geometry(p: &GaussianParticle, camera: &Camera) -> Option<Geometry> {
    let w = camera.rotation();
    let p_cam = w * p.position + camera.translation();
    if !(p_cam.z > NEAR_PLANE) {
        return None;
    }
    let rot = quat_to_rotmat(p.rotation).ok()?;
    let scale = p.log_scale.map(f64::exp);
    let m = rot * Matrix3::from_diagonal(&scale);
    let sigma = m * m.transpose();
    let cov_cam = w * sigma * w.transpose();
    let (x, y, z) = (p_cam.x, p_cam.y, p_cam.z);
    let lim_x = JACOBIAN_FOV_MARGIN * 0.5 * camera.width as f64 / camera.fx;
    let lim_y = JACOBIAN_FOV_MARGIN * 0.5 * camera.height as f64 / camera.fy;
    let (u, v) = (x / z, y / z);
    let ratio = [u.clamp(-lim_x, lim_x), v.clamp(-lim_y, lim_y)];
    let clamped = [ratio[0] != u, ratio[1] != v];
    let jac = Matrix2x3::new(
        camera.fx / z,
        0.0,
        -camera.fx * ratio[0] / z,
        0.0,
        camera.fy / z,
        -camera.fy * ratio[1] / z,
    );
    let cov2d = jac * cov_cam * jac.transpose() + Matrix2::identity() * COV2D_FLOOR;
    let mean = Vector2::new(camera.fx * x / z + camera.cx, camera.fy * y / z + camera.cy);
    Some(Geometry {
        p_cam,
        rot,
        scale,
        cov_cam,
        jac,
        ratio,
        clamped,
        cov2d,
        mean,
    })
}

/// A projected particle with everything the compositing and backward passes
/// need.
#[derive(Clone, Debug)]
pub(crate) struct Splat {
    pub index: usize,
    pub geo: Geometry,
    pub conic: Matrix2<f64>,
    pub opacity: f64,
    pub color: [f64; 3],
    pub color_active: [bool; 3],
    pub label: f64,
    /// Inclusive pixel bounds `(x0, x1, y0, y1)`.
    pub bbox: (usize, usize, usize, usize),
    pub basis: [f64; SH_BASIS_LEN],
    pub view_dir: Vector3<f64>,
    pub view_dist: f64,
}

impl Splat {
    #[inline]
    pub fn power(&self, px: f64, py: f64) -> (f64, f64, f64) {
        let dx = px - self.geo.mean.x;
        let dy = py - self.geo.mean.y;
        let c = &self.conic;
        let power = c[(0, 0)] * dx * dx + 2.0 * c[(0, 1)] * dx * dy + c[(1, 1)] * dy * dy;
        (power, dx, dy)
    }
}

fn make_splat(index: usize, p: &GaussianParticle, camera: &Camera, center: &Vector3<f64>) -> Option<Splat> {
    let geo = project_geometry(p, camera)?;
    let c = &geo.cov2d;
    let det = c[(0, 0)] * c[(1, 1)] - c[(0, 1)] * c[(1, 0)];
    if !(det > 0.0) || !det.is_finite() {
        return None;
    }
    let conic = Matrix2::new(c[(1, 1)] / det, -c[(0, 1)] / det, -c[(1, 0)] / det, c[(0, 0)] / det);
    let ex = (SUPPORT_POWER * c[(0, 0)]).sqrt();
    let ey = (SUPPORT_POWER * c[(1, 1)]).sqrt();
    let (w, h) = (camera.width as f64, camera.height as f64);
    let (lo_x, hi_x) = ((geo.mean.x - ex).floor(), (geo.mean.x + ex).ceil());
    let (lo_y, hi_y) = ((geo.mean.y - ey).floor(), (geo.mean.y + ey).ceil());
    if hi_x < 0.0 || hi_y < 0.0 || lo_x > w - 1.0 || lo_y > h - 1.0 || !lo_x.is_finite() || !lo_y.is_finite() {
        return None;
    }
    let bbox = (
        lo_x.max(0.0) as usize,
        hi_x.min(w - 1.0) as usize,
        lo_y.max(0.0) as usize,
        hi_y.min(h - 1.0) as usize,
    );
    let offset = p.position - center;
    let view_dist = offset.norm();
    let view_dir = if view_dist > 0.0 { offset / view_dist } else { Vector3::z() };
    let basis = sh_basis(&view_dir);
    let raw = sh_reconstruct(&p.sh, &basis);
    Some(Splat {
        index,
        geo,
        conic,
        opacity: sigmoid(p.opacity_logit),
        color: raw.map(|v| v.max(0.0)),
        color_active: raw.map(|v| v > 0.0),
        label: p.label.value(),
        bbox,
        basis,
        view_dir,
        view_dist,
    })
}

/// Projects, culls and depth-sorts the scene for one camera. Ties in depth
/// are broken by particle index.
pub(crate) fn prepare_splats(scene: &GaussianScene, camera: &Camera) -> Vec<Splat> {
    let center = camera.center();
    let mut splats: Vec<Splat> = scene
        .particles
        .par_iter()
        .enumerate()
        .filter_map(|(i, p)| make_splat(i, p, camera, &center))
        .collect();
    splats.sort_by(|a, b| a.geo.p_cam.z.total_cmp(&b.geo.p_cam.z).then(a.index.cmp(&b.index)));
    splats
}

pub(crate) struct TileGrid {
    pub tiles_x: usize,
    /// Per tile, positions into the sorted splat list.
    pub lists: Vec<Vec<u32>>,
}

impl TileGrid {
    pub fn build(splats: &[Splat], width: usize, height: usize) -> Self {
        let tiles_x = width.div_ceil(TILE_SIZE);
        let tiles_y = height.div_ceil(TILE_SIZE);
        let mut lists = vec![Vec::new(); tiles_x * tiles_y];
        for (k, s) in splats.iter().enumerate() {
            let (x0, x1, y0, y1) = s.bbox;
            for ty in y0 / TILE_SIZE..=y1 / TILE_SIZE {
                for tx in x0 / TILE_SIZE..=x1 / TILE_SIZE {
                    lists[ty * tiles_x + tx].push(k as u32);
                }
            }
        }
        Self { tiles_x, lists }
    }

    pub fn tile_pixels(&self, tile: usize, width: usize, height: usize) -> impl Iterator<Item = (usize, usize)> {
        let tx = tile % self.tiles_x;
        let ty = tile / self.tiles_x;
        let (x0, y0) = (tx * TILE_SIZE, ty * TILE_SIZE);
        let (x1, y1) = ((x0 + TILE_SIZE).min(width), (y0 + TILE_SIZE).min(height));
        (y0..y1).flat_map(move |y| (x0..x1).map(move |x| (x, y)))
    }
}

/// One composited term: position in the sorted list, clamped alpha and the
/// transmittance in front of it.
#[derive(Clone, Copy, Debug)]
pub(crate) struct Contribution {
    pub splat: u32,
    pub alpha: f64,
    pub transmittance: f64,
    pub gaussian: f64,
    pub clamped: bool,
}

/// Front-to-back compositing of one pixel over `order` (positions into
/// `splats`). Calls `visit` for every term that was blended and returns the
/// final transmittance.
#[inline]
pub(crate) fn composite_pixel(
    splats: &[Splat],
    order: impl Iterator<Item = u32>,
    px: f64,
    py: f64,
    mut visit: impl FnMut(Contribution),
) -> f64 {
    let mut t = 1.0;
    for k in order {
        let s = &splats[k as usize];
        let (power, _, _) = s.power(px, py);
        if power > SUPPORT_POWER {
            continue;
        }
        let gaussian = (-0.5 * power).exp();
        let raw = s.opacity * gaussian;
        let clamped = raw > MAX_ALPHA;
        let alpha = if clamped { MAX_ALPHA } else { raw };
        visit(Contribution {
            splat: k,
            alpha,
            transmittance: t,
            gaussian,
            clamped,
        });
        t *= 1.0 - alpha;
        if t < MIN_TRANSMITTANCE {
            break;
        }
    }
    t
}

/// Which channels to fill. Alpha is always produced.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RenderChannels {
    pub color: bool,
    pub depth: bool,
    pub semantic: bool,
}

impl RenderChannels {
    pub const ALL: RenderChannels = RenderChannels {
        color: true,
        depth: true,
        semantic: true,
    };
    pub const COLOR: RenderChannels = RenderChannels {
        color: true,
        depth: false,
        semantic: false,
    };
}

#[derive(Clone, Debug, PartialEq)]
pub struct RenderOutput {
    pub rgb: Image,
    pub depth: Image,
    pub alpha: Image,
    pub semantic: Image,
    /// Number of blended terms per pixel.
    pub contributor_counts: Option<Vec<u32>>,
}

#[derive(Clone, Copy, Default)]
struct PixelValue {
    rgb: [f64; 3],
    depth: f64,
    alpha: f64,
    semantic: f64,
    count: u32,
}

fn shade_pixel(splats: &[Splat], order: impl Iterator<Item = u32>, x: usize, y: usize, bg: &[f64; 3]) -> PixelValue {
    let mut v = PixelValue::default();
    let mut depth_num = 0.0;
    let t_final = composite_pixel(splats, order, x as f64, y as f64, |c| {
        let s = &splats[c.splat as usize];
        let w = c.alpha * c.transmittance;
        for ch in 0..3 {
            v.rgb[ch] += w * s.color[ch];
        }
        depth_num += w * s.geo.p_cam.z;
        v.semantic += w * s.label;
        v.count += 1;
    });
    for ch in 0..3 {
        v.rgb[ch] += t_final * bg[ch];
    }
    v.alpha = 1.0 - t_final;
    v.depth = if v.alpha > DEPTH_ALPHA_MIN { depth_num / v.alpha } else { 0.0 };
    v
}

fn assemble(camera: &Camera, channels: RenderChannels, bg: [f64; 3], values: impl Iterator<Item = ((usize, usize), PixelValue)>) -> RenderOutput {
    let (w, h) = (camera.width, camera.height);
    let mut out = RenderOutput {
        rgb: Image::new(w, h, 3),
        depth: Image::new(w, h, 1),
        alpha: Image::new(w, h, 1),
        semantic: Image::new(w, h, 1),
        contributor_counts: Some(vec![0; w * h]),
    };
    for ((x, y), v) in values {
        let rgb = if channels.color { v.rgb } else { bg };
        out.rgb.pixel_mut(x, y).copy_from_slice(&rgb);
        out.alpha.set(x, y, 0, v.alpha);
        if channels.depth {
            out.depth.set(x, y, 0, v.depth);
        }
        if channels.semantic {
            out.semantic.set(x, y, 0, v.semantic);
        }
        if let Some(c) = out.contributor_counts.as_mut() {
            c[y * w + x] = v.count;
        }
    }
    out
}

/// Renders color, expected depth, coverage and the semantic (mask-label)
/// channel. Tiles are shaded in parallel; each pixel's arithmetic is
/// independent of the thread count.
pub fn render(scene: &GaussianScene, camera: &Camera, channels: RenderChannels) -> RenderOutput {
    let splats = prepare_splats(scene, camera);
    let grid = TileGrid::build(&splats, camera.width, camera.height);
    let (w, h) = (camera.width, camera.height);
    let bg = scene.background;
    let tiles: Vec<Vec<((usize, usize), PixelValue)>> = (0..grid.lists.len())
        .into_par_iter()
        .map(|tile| {
            let list = &grid.lists[tile];
            grid.tile_pixels(tile, w, h)
                .map(|(x, y)| ((x, y), shade_pixel(&splats, list.iter().copied(), x, y, &bg)))
                .collect()
        })
        .collect();
    assemble(camera, channels, bg, tiles.into_iter().flatten())
}

/// Single-threaded reference renderer: every pixel composites the full sorted
/// particle list with no tiling.
pub fn render_untiled(scene: &GaussianScene, camera: &Camera, channels: RenderChannels) -> RenderOutput {
    let splats = prepare_splats(scene, camera);
    let bg = scene.background;
    let all = 0..splats.len() as u32;
    let values = (0..camera.height).flat_map(|y| (0..camera.width).map(move |x| (x, y)));
    let vals: Vec<_> = values
        .map(|(x, y)| ((x, y), shade_pixel(&splats, all.clone(), x, y, &bg)))
        .collect();
    assemble(camera, channels, bg, vals.into_iter())
}

/// Compositing weights `(particle index, αᵢ·Tᵢ)` of one pixel in blend order,
/// and the final transmittance.
pub fn pixel_weights(scene: &GaussianScene, camera: &Camera, x: usize, y: usize) -> (Vec<(usize, f64)>, f64) {
    let splats = prepare_splats(scene, camera);
    let mut weights = Vec::new();
    let t = composite_pixel(&splats, 0..splats.len() as u32, x as f64, y as f64, |c| {
        weights.push((splats[c.splat as usize].index, c.alpha * c.transmittance));
    });
    (weights, t)
}

/// Per-particle counts of masked and unmasked pixels the particle visibly
/// contributes to.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct ContributionTally {
    pub masked: Vec<u64>,
    pub unmasked: Vec<u64>,
}

impl ContributionTally {
    pub fn zeros(n: usize) -> Self {
        Self {
            masked: vec![0; n],
            unmasked: vec![0; n],
        }
    }

    pub fn len(&self) -> usize {
        self.masked.len()
    }

    pub fn is_empty(&self) -> bool {
        self.masked.is_empty()
    }
}

/// For every pixel of every view, each particle whose compositing weight
/// exceeds `threshold` is counted toward the mask value of that pixel.
pub fn accumulate_contributions<'a>(
    scene: &GaussianScene,
    views: impl IntoIterator<Item = (&'a Camera, &'a Mask)>,
    threshold: f64,
) -> ContributionTally {
    let mut tally = ContributionTally::zeros(scene.len());
    for (camera, mask) in views {
        let splats = prepare_splats(scene, camera);
        let grid = TileGrid::build(&splats, camera.width, camera.height);
        let (w, h) = (camera.width, camera.height);
        let per_tile: Vec<Vec<(u32, u64, u64)>> = (0..grid.lists.len())
            .into_par_iter()
            .map(|tile| {
                let list = &grid.lists[tile];
                let mut local = vec![(0u64, 0u64); list.len()];
                let slot: std::collections::HashMap<u32, usize> =
                    list.iter().enumerate().map(|(i, &k)| (k, i)).collect();
                for (x, y) in grid.tile_pixels(tile, w, h) {
                    let masked = mask.get(x, y);
                    composite_pixel(&splats, list.iter().copied(), x as f64, y as f64, |c| {
                        if c.alpha * c.transmittance > threshold {
                            let e = &mut local[slot[&c.splat]];
                            if masked {
                                e.0 += 1;
                            } else {
                                e.1 += 1;
                            }
                        }
                    });
                }
                list.iter()
                    .zip(local)
                    .filter(|(_, (m, u))| m + u > 0)
                    .map(|(&k, (m, u))| (k, m, u))
                    .collect()
            })
            .collect();
        for tile in per_tile {
            for (k, m, u) in tile {
                let idx = splats[k as usize].index;
                tally.masked[idx] += m;
                tally.unmasked[idx] += u;
            }
        }
    }
    tally
}
