//! Masked photometric loss: weighted L1 plus D-SSIM, with analytic gradients.

use crate::error::{Error, Result};
use crate::image::{Image, Mask};

const SSIM_C1: f64 = 0.01 * 0.01;
const SSIM_C2: f64 = 0.03 * 0.03;
const SSIM_SIGMA: f64 = 1.5;

fn gaussian_kernel(window: usize) -> Vec<f64> {
    let r = (window / 2) as f64;
    let k: Vec<f64> = (0..window)
        .map(|i| (-(i as f64 - r).powi(2) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp())
        .collect();
    let s: f64 = k.iter().sum();
    k.into_iter().map(|v| v / s).collect()
}

/// Separable "same" filtering with zero padding. The kernel is symmetric, so
/// this operator is its own adjoint.
fn blur(plane: &[f64], w: usize, h: usize, kernel: &[f64]) -> Vec<f64> {
    let r = kernel.len() / 2;
    let mut tmp = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (k, kv) in kernel.iter().enumerate() {
                let sx = x as isize + k as isize - r as isize;
                if sx >= 0 && (sx as usize) < w {
                    acc += kv * plane[y * w + sx as usize];
                }
            }
            tmp[y * w + x] = acc;
        }
    }
    let mut out = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (k, kv) in kernel.iter().enumerate() {
                let sy = y as isize + k as isize - r as isize;
                if sy >= 0 && (sy as usize) < h {
                    acc += kv * tmp[sy as usize * w + x];
                }
            }
            out[y * w + x] = acc;
        }
    }
    out
}

fn plane(img: &Image, c: usize) -> Vec<f64> {
    img.data.iter().skip(c).step_by(img.channels).copied().collect()
}

/// Per-pixel SSIM of one channel and the coefficient maps of its derivative
/// with respect to `μx`, `σx²` and `σxy`.
struct SsimMaps {
    s: Vec<f64>,
    mu_x: Vec<f64>,
    mu_y: Vec<f64>,
    d_mu: Vec<f64>,
    d_var: Vec<f64>,
    d_cov: Vec<f64>,
}

fn ssim_maps(x: &[f64], y: &[f64], w: usize, h: usize, kernel: &[f64]) -> SsimMaps {
    let sq = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(u, v)| u * v).collect::<Vec<_>>();
    let mu_x = blur(x, w, h, kernel);
    let mu_y = blur(y, w, h, kernel);
    let exx = blur(&sq(x, x), w, h, kernel);
    let eyy = blur(&sq(y, y), w, h, kernel);
    let exy = blur(&sq(x, y), w, h, kernel);
    let n = w * h;
    let mut m = SsimMaps {
        s: vec![0.0; n],
        mu_x,
        mu_y,
        d_mu: vec![0.0; n],
        d_var: vec![0.0; n],
        d_cov: vec![0.0; n],
    };
    for i in 0..n {
        let (mx, my) = (m.mu_x[i], m.mu_y[i]);
        let vx = exx[i] - mx * mx;
        let vy = eyy[i] - my * my;
        let cxy = exy[i] - mx * my;
        let n1 = 2.0 * mx * my + SSIM_C1;
        let n2 = 2.0 * cxy + SSIM_C2;
        let d1 = mx * mx + my * my + SSIM_C1;
        let d2 = vx + vy + SSIM_C2;
        let s = n1 * n2 / (d1 * d2);
        m.s[i] = s;
        m.d_mu[i] = 2.0 * my * n2 / (d1 * d2) - s * 2.0 * mx / d1;
        m.d_var[i] = -s / d2;
        m.d_cov[i] = 2.0 * n1 / (d1 * d2);
    }
    m
}

fn check_window(window: usize) -> Result<Vec<f64>> {
    if window == 0 || window % 2 == 0 {
        return Err(Error::InvalidConfig(format!("SSIM window must be odd and positive, got {window}")));
    }
    Ok(gaussian_kernel(window))
}

/// Mean SSIM over all pixels and channels with a Gaussian window.
pub fn ssim(a: &Image, b: &Image, window: usize) -> Result<f64> {
    a.ensure_shape(b)?;
    let kernel = check_window(window)?;
    let mut total = 0.0;
    for c in 0..a.channels {
        total += ssim_maps(&plane(a, c), &plane(b, c), a.width, a.height, &kernel).s.iter().sum::<f64>();
    }
    Ok(total / a.data.len() as f64)
}

#[derive(Clone, Debug, PartialEq)]
pub struct PhotometricLoss {
    pub loss: f64,
    pub l1: f64,
    pub dssim: f64,
    /// Gradient of `loss` with respect to the render.
    pub grad: Image,
}

/// `(1 − w)·L1 + w·(1 − SSIM)`, both averaged over the pixels in `region`
/// and all channels. Pixels outside `region` are blanked in both images before
/// the SSIM statistics, so they neither influence the loss nor receive
/// gradient. An empty region gives zero.
pub fn photometric_loss(render: &Image, target: &Image, region: &Mask, ssim_weight: f64, window: usize) -> Result<PhotometricLoss> {
    render.ensure_shape(target)?;
    let (w, h, ch) = render.shape();
    if (region.width, region.height) != (w, h) {
        return Err(Error::shape(format!("{w}x{h} region"), format!("{}x{}", region.width, region.height)));
    }
    if !(0.0..=1.0).contains(&ssim_weight) {
        return Err(Error::InvalidConfig(format!("SSIM weight must lie in [0, 1], got {ssim_weight}")));
    }
    let kernel = check_window(window)?;
    let mut grad = Image::new(w, h, ch);
    let n = region.count();
    if n == 0 {
        return Ok(PhotometricLoss {
            loss: 0.0,
            l1: 0.0,
            dssim: 0.0,
            grad,
        });
    }
    let norm = 1.0 / (n * ch) as f64;
    let mut l1 = 0.0;
    for i in 0..w * h {
        if !region.data[i] {
            continue;
        }
        for c in 0..ch {
            let r = render.data[i * ch + c] - target.data[i * ch + c];
            l1 += r.abs();
            grad.data[i * ch + c] += (1.0 - ssim_weight) * norm * if r > 0.0 { 1.0 } else if r < 0.0 { -1.0 } else { 0.0 };
        }
    }
    l1 *= norm;
    let mut ssim_sum = 0.0;
    if ssim_weight > 0.0 {
        let wgt: Vec<f64> = region.data.iter().map(|&m| if m { 1.0 } else { 0.0 }).collect();
        for c in 0..ch {
            let blank = |img: &Image| plane(img, c).iter().zip(&wgt).map(|(v, k)| v * k).collect::<Vec<_>>();
            let (x, y) = (blank(render), blank(target));
            let m = ssim_maps(&x, &y, w, h, &kernel);
            ssim_sum += m.s.iter().zip(&wgt).map(|(s, k)| s * k).sum::<f64>();
            // d Σ_p k_p S_p / d x_q = G*(kA) + 2x·G*(kB) + y·G*(kC), with
            // A = ∂μx − 2μx·∂σx² − μy·∂σxy, B = ∂σx², C = ∂σxy.
            let a: Vec<f64> = (0..w * h)
                .map(|i| wgt[i] * (m.d_mu[i] - 2.0 * m.mu_x[i] * m.d_var[i] - m.mu_y[i] * m.d_cov[i]))
                .collect();
            let b: Vec<f64> = (0..w * h).map(|i| wgt[i] * m.d_var[i]).collect();
            let cc: Vec<f64> = (0..w * h).map(|i| wgt[i] * m.d_cov[i]).collect();
            let (ga, gb, gc) = (blur(&a, w, h, &kernel), blur(&b, w, h, &kernel), blur(&cc, w, h, &kernel));
            for i in 0..w * h {
                let ds = ga[i] + 2.0 * x[i] * gb[i] + y[i] * gc[i];
                grad.data[i * ch + c] -= ssim_weight * norm * wgt[i] * ds;
            }
        }
    }
    let dssim = if ssim_weight > 0.0 { 1.0 - ssim_sum * norm } else { 0.0 };
    Ok(PhotometricLoss {
        loss: (1.0 - ssim_weight) * l1 + ssim_weight * dssim,
        l1,
        dssim,
        grad,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rng: &mut ChaCha8Rng, w: usize, h: usize) -> Image {
        Image::from_vec(w, h, 3, (0..w * h * 3).map(|_| rng.gen::<f64>()).collect()).unwrap()
    }

    #[test]
    fn identical_images_cost_nothing() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = random(&mut rng, 12, 9);
        let l = photometric_loss(&a, &a, &Mask::full(12, 9), 0.2, 11).unwrap();
        assert!(l.loss.abs() < 1e-12 && l.l1 == 0.0);
        assert!((ssim(&a, &a, 11).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn constant_offset_l1() {
        let a = Image::filled(6, 6, 3, 0.5);
        let b = Image::filled(6, 6, 3, 0.4);
        let l = photometric_loss(&a, &b, &Mask::full(6, 6), 0.0, 11).unwrap();
        assert!((l.l1 - 0.1).abs() < 1e-12 && (l.loss - 0.1).abs() < 1e-12);
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let (w, h) = (10, 8);
        let a = random(&mut rng, w, h);
        let b = random(&mut rng, w, h);
        let region = Mask::from_fn(w, h, |x, y| (x + 2 * y) % 3 != 0);
        let l = photometric_loss(&a, &b, &region, 0.2, 5).unwrap();
        let eps = 1e-6;
        for i in (0..a.data.len()).step_by(7) {
            let mut p = a.clone();
            p.data[i] += eps;
            let mut m = a.clone();
            m.data[i] -= eps;
            let fd = (photometric_loss(&p, &b, &region, 0.2, 5).unwrap().loss
                - photometric_loss(&m, &b, &region, 0.2, 5).unwrap().loss)
                / (2.0 * eps);
            assert!((fd - l.grad.data[i]).abs() < 1e-6 + 1e-4 * fd.abs(), "entry {i}: fd {fd} vs {}", l.grad.data[i]);
        }
    }

    #[test]
    fn pixels_outside_the_region_are_ignored() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (a, b) = (random(&mut rng, 9, 9), random(&mut rng, 9, 9));
        let region = Mask::from_fn(9, 9, |x, _| x < 5);
        let l = photometric_loss(&a, &b, &region, 0.2, 5).unwrap();
        let mut a2 = a.clone();
        let mut b2 = b.clone();
        for y in 0..9 {
            for x in 5..9 {
                a2.pixel_mut(x, y).fill(rng.gen());
                b2.pixel_mut(x, y).fill(rng.gen());
            }
        }
        let l2 = photometric_loss(&a2, &b2, &region, 0.2, 5).unwrap();
        assert_eq!(l.loss, l2.loss);
        assert_eq!(l.grad, l2.grad);
        for y in 0..9 {
            for x in 5..9 {
                assert!(l.grad.pixel(x, y).iter().all(|&g| g == 0.0));
            }
        }
    }

    #[test]
    fn empty_region_and_bad_window() {
        let a = Image::filled(4, 4, 3, 0.2);
        let l = photometric_loss(&a, &a.map(|v| v + 1.0), &Mask::empty(4, 4), 0.2, 11).unwrap();
        assert_eq!(l.loss, 0.0);
        assert!(photometric_loss(&a, &a, &Mask::full(4, 4), 0.2, 4).is_err());
        assert!(photometric_loss(&a, &a, &Mask::full(4, 4), 1.5, 11).is_err());
    }
}
