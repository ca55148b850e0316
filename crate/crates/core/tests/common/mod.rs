#![allow(dead_code)]

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use refsplat::grad::PARAMS_PER_PARTICLE;
use refsplat::image::Image;
use refsplat::raster::{render, render_backward, RenderChannels, RenderGrad, RenderOutput};
use refsplat::scene::{logit, Camera, GaussianParticle, GaussianScene, Label};

/// Eight particles at well-separated depths with moderate opacities, so no
/// finite-difference step reorders, clamps or terminates a pixel.
pub fn random_fd_scene(seed: u64) -> (GaussianScene, Camera) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut depths: Vec<f64> = (0..8).map(|i| 3.0 + 0.45 * i as f64 + rng.gen_range(-0.1..0.1)).collect();
    for i in (1..depths.len()).rev() {
        let j = rng.gen_range(0..=i);
        depths.swap(i, j);
    }
    let camera = Camera::look_at(
        32,
        32,
        34.0,
        Vector3::new(rng.gen_range(-0.3..0.3), rng.gen_range(-0.3..0.3), -4.0),
        Vector3::new(0.0, 0.0, 0.0),
        Vector3::new(0.0, -1.0, 0.0),
    )
    .unwrap();
    let particles = depths
        .iter()
        .map(|&d| {
            let cam_p = Vector3::new(rng.gen_range(-0.35..0.35) * d, rng.gen_range(-0.35..0.35) * d, d);
            let position = camera.rotation().transpose() * (cam_p - camera.translation());
            let mut sh = [[0.0; 3]; 16];
            sh[0] = refsplat::sh::rgb_to_dc([rng.gen_range(0.3..0.8), rng.gen_range(0.3..0.8), rng.gen_range(0.3..0.8)]);
            for row in sh.iter_mut().skip(1) {
                for v in row.iter_mut() {
                    *v = rng.gen_range(-0.05..0.05);
                }
            }
            let n = rng.gen_range(0.6..1.4);
            let mut q = [0.0; 4];
            for v in q.iter_mut() {
                *v = rng.gen_range(-1.0..1.0);
            }
            let qn = q.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-3);
            GaussianParticle {
                position,
                log_scale: Vector3::new(
                    rng.gen_range(0.08f64..0.3).ln(),
                    rng.gen_range(0.08f64..0.3).ln(),
                    rng.gen_range(0.08f64..0.3).ln(),
                ),
                rotation: q.map(|v| v / qn * n),
                opacity_logit: logit(rng.gen_range(0.15..0.6)),
                sh,
                label: if rng.gen_bool(0.5) { Label::Masked } else { Label::Unmasked },
            }
        })
        .collect();
    let mut scene = GaussianScene::new(particles);
    scene.background = [rng.gen_range(0.0..1.0), rng.gen_range(0.0..1.0), rng.gen_range(0.0..1.0)];
    (scene, camera)
}

/// Random upstream weights for every channel. Depth weights are restricted
/// to pixels with coverage well above the depth-normalization cutoff.
pub fn random_upstream(out: &RenderOutput, seed: u64) -> RenderGrad {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let (w, h) = (out.rgb.width, out.rgb.height);
    let mut g = RenderGrad::zeros(w, h);
    let mut depth = Image::new(w, h, 1);
    let mut alpha = Image::new(w, h, 1);
    let mut sem = Image::new(w, h, 1);
    for v in g.rgb.data.iter_mut() {
        *v = rng.gen_range(-1.0..1.0);
    }
    for y in 0..h {
        for x in 0..w {
            if out.alpha.get(x, y, 0) > 0.05 {
                depth.set(x, y, 0, rng.gen_range(-0.2..0.2));
            }
            alpha.set(x, y, 0, rng.gen_range(-1.0..1.0));
            sem.set(x, y, 0, rng.gen_range(-1.0..1.0));
        }
    }
    g.depth = Some(depth);
    g.alpha = Some(alpha);
    g.semantic = Some(sem);
    g
}

pub fn linear_loss(scene: &GaussianScene, camera: &Camera, g: &RenderGrad) -> f64 {
    let out = render(scene, camera, RenderChannels::ALL);
    let mut l = out.rgb.dot(&g.rgb);
    if let Some(d) = &g.depth {
        l += out.depth.dot(d);
    }
    if let Some(a) = &g.alpha {
        l += out.alpha.dot(a);
    }
    if let Some(s) = &g.semantic {
        l += out.semantic.dot(s);
    }
    l
}

pub struct FdReport {
    pub checked: usize,
    pub failures: Vec<String>,
    pub worst_rel: f64,
}

/// Central differences with step `h` on every parameter of every particle,
/// compared with [`render_backward`].
pub fn fd_check_scene(seed: u64, h: f64, rel_tol: f64, abs_floor: f64) -> FdReport {
    let (scene, camera) = random_fd_scene(seed);
    fd_check(&scene, &camera, seed, h, rel_tol, abs_floor)
}

pub fn fd_check(scene: &GaussianScene, camera: &Camera, seed: u64, h: f64, rel_tol: f64, abs_floor: f64) -> FdReport {
    let (scene, camera) = (scene.clone(), camera.clone());
    let out = render(&scene, &camera, RenderChannels::ALL);
    let g = random_upstream(&out, seed);
    let analytic = render_backward(&scene, &camera, &g);
    let mut report = FdReport {
        checked: 0,
        failures: Vec::new(),
        worst_rel: 0.0,
    };
    for i in 0..scene.len() {
        let flat = analytic.particles[i].to_flat();
        for k in 0..PARAMS_PER_PARTICLE {
            let mut plus = scene.clone();
            *plus.particles[i].param_mut(k) += h;
            let mut minus = scene.clone();
            *minus.particles[i].param_mut(k) -= h;
            let fd = (linear_loss(&plus, &camera, &g) - linear_loss(&minus, &camera, &g)) / (2.0 * h);
            let a = flat[k];
            let err = (a - fd).abs();
            let allowed = (rel_tol * a.abs().max(fd.abs())).max(abs_floor);
            report.checked += 1;
            if err > abs_floor {
                report.worst_rel = report.worst_rel.max(err / a.abs().max(fd.abs()));
            }
            if err > allowed {
                report.failures.push(format!("seed {seed} particle {i} param {k}: analytic {a:.9e} fd {fd:.9e}"));
            }
        }
    }
    report
}
