//! Dense float images, binary masks and the handful of linear resampling
//! operators (crop, bilinear resize) whose adjoints the gradient paths need.

use crate::error::{Error, Result};

/// Row-major `height × width × channels` float image.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub data: Vec<f64>,
}

impl Image {
    pub fn new(width: usize, height: usize, channels: usize) -> Self {
        Self::filled(width, height, channels, 0.0)
    }

    pub fn filled(width: usize, height: usize, channels: usize, value: f64) -> Self {
        Self {
            width,
            height,
            channels,
            data: vec![value; width * height * channels],
        }
    }

    pub fn from_vec(width: usize, height: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != width * height * channels {
            return Err(Error::shape(
                format!("{width}x{height}x{channels} = {}", width * height * channels),
                data.len(),
            ));
        }
        Ok(Self {
            width,
            height,
            channels,
            data,
        })
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.width, self.height, self.channels)
    }

    pub fn same_shape(&self, other: &Image) -> bool {
        self.shape() == other.shape()
    }

    pub fn ensure_shape(&self, other: &Image) -> Result<()> {
        if self.same_shape(other) {
            Ok(())
        } else {
            Err(Error::shape(
                format!("{:?}", self.shape()),
                format!("{:?}", other.shape()),
            ))
        }
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize, c: usize) -> usize {
        (y * self.width + x) * self.channels + c
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, c: usize) -> f64 {
        self.data[self.index(x, y, c)]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, c: usize, v: f64) {
        let i = self.index(x, y, c);
        self.data[i] = v;
    }

    pub fn pixel(&self, x: usize, y: usize) -> &[f64] {
        let i = self.index(x, y, 0);
        &self.data[i..i + self.channels]
    }

    pub fn pixel_mut(&mut self, x: usize, y: usize) -> &mut [f64] {
        let i = self.index(x, y, 0);
        let c = self.channels;
        &mut self.data[i..i + c]
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Image {
        Image {
            data: self.data.iter().map(|&v| f(v)).collect(),
            ..*self
        }
    }

    pub fn add_assign(&mut self, other: &Image) {
        debug_assert!(self.same_shape(other));
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn scale(&mut self, s: f64) {
        for v in &mut self.data {
            *v *= s;
        }
    }

    pub fn dot(&self, other: &Image) -> f64 {
        self.data.iter().zip(&other.data).map(|(a, b)| a * b).sum()
    }

    pub fn norm_sq(&self) -> f64 {
        self.dot(self)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Copy of the pixels inside `rect` (which must lie inside the image).
    pub fn crop(&self, rect: PixelRect) -> Result<Image> {
        if rect.x0 + rect.width > self.width || rect.y0 + rect.height > self.height {
            return Err(Error::InvalidInput(format!(
                "crop {rect:?} exceeds {}x{} image",
                self.width, self.height
            )));
        }
        let mut out = Image::new(rect.width, rect.height, self.channels);
        for y in 0..rect.height {
            let src = self.index(rect.x0, rect.y0 + y, 0);
            let dst = out.index(0, y, 0);
            let n = rect.width * self.channels;
            out.data[dst..dst + n].copy_from_slice(&self.data[src..src + n]);
        }
        Ok(out)
    }

    /// Adjoint of [`Image::crop`]: adds `patch` into `self` at `rect`.
    pub fn add_patch(&mut self, rect: PixelRect, patch: &Image) {
        debug_assert_eq!(patch.width, rect.width);
        debug_assert_eq!(patch.height, rect.height);
        for y in 0..rect.height {
            for x in 0..rect.width {
                for c in 0..self.channels {
                    let i = self.index(rect.x0 + x, rect.y0 + y, c);
                    self.data[i] += patch.get(x, y, c);
                }
            }
        }
    }

    pub fn channel(&self, c: usize) -> Image {
        let mut out = Image::new(self.width, self.height, 1);
        for (i, px) in self.data.chunks(self.channels).enumerate() {
            out.data[i] = px[c];
        }
        out
    }
}

/// Binary per-pixel mask; `true` marks pixels to be inpainted.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Mask {
    pub width: usize,
    pub height: usize,
    pub data: Vec<bool>,
}

impl Mask {
    pub fn empty(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            data: vec![false; width * height],
        }
    }

    pub fn full(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            data: vec![true; width * height],
        }
    }

    pub fn from_fn(width: usize, height: usize, f: impl Fn(usize, usize) -> bool) -> Self {
        let mut data = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                data.push(f(x, y));
            }
        }
        Self {
            width,
            height,
            data,
        }
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> bool {
        self.data[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, v: bool) {
        self.data[y * self.width + x] = v;
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&m| m).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.data.iter().any(|&m| m)
    }

    pub fn inverted(&self) -> Mask {
        Mask {
            data: self.data.iter().map(|m| !m).collect(),
            ..*self
        }
    }

    /// Grows the mask by `radius` pixels in every direction (square window).
    pub fn dilated(&self, radius: usize) -> Mask {
        let r = radius as isize;
        Mask::from_fn(self.width, self.height, |x, y| {
            (-r..=r).any(|dy| {
                (-r..=r).any(|dx| {
                    let (qx, qy) = (x as isize + dx, y as isize + dy);
                    qx >= 0 && qy >= 0 && (qx as usize) < self.width && (qy as usize) < self.height && self.get(qx as usize, qy as usize)
                })
            })
        })
    }

    /// Tight bounding box of the set pixels, `None` for an empty mask.
    pub fn bounding_box(&self) -> Option<PixelRect> {
        let (mut x0, mut y0, mut x1, mut y1) = (usize::MAX, usize::MAX, 0, 0);
        let mut any = false;
        for y in 0..self.height {
            for x in 0..self.width {
                if self.get(x, y) {
                    any = true;
                    x0 = x0.min(x);
                    y0 = y0.min(y);
                    x1 = x1.max(x);
                    y1 = y1.max(y);
                }
            }
        }
        any.then(|| PixelRect {
            x0,
            y0,
            width: x1 - x0 + 1,
            height: y1 - y0 + 1,
        })
    }

    pub fn crop(&self, rect: PixelRect) -> Mask {
        Mask::from_fn(rect.width, rect.height, |x, y| {
            self.get(rect.x0 + x, rect.y0 + y)
        })
    }

    /// Mask as a single-channel 0/1 image.
    pub fn to_image(&self) -> Image {
        Image {
            width: self.width,
            height: self.height,
            channels: 1,
            data: self.data.iter().map(|&m| if m { 1.0 } else { 0.0 }).collect(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct PixelRect {
    pub x0: usize,
    pub y0: usize,
    pub width: usize,
    pub height: usize,
}

impl PixelRect {
    pub fn full(width: usize, height: usize) -> Self {
        Self {
            x0: 0,
            y0: 0,
            width,
            height,
        }
    }

    pub fn x1(&self) -> usize {
        self.x0 + self.width
    }

    pub fn y1(&self) -> usize {
        self.y0 + self.height
    }

    pub fn contains_rect(&self, other: &PixelRect) -> bool {
        other.x0 >= self.x0 && other.y0 >= self.y0 && other.x1() <= self.x1() && other.y1() <= self.y1()
    }

    /// Grows each side by `round(fraction · extent)` of that axis, clamped to
    /// a `width × height` image.
    pub fn dilate(&self, fraction: f64, width: usize, height: usize) -> PixelRect {
        let mx = (fraction * self.width as f64).round() as usize;
        let my = (fraction * self.height as f64).round() as usize;
        let x0 = self.x0.saturating_sub(mx);
        let y0 = self.y0.saturating_sub(my);
        let x1 = (self.x1() + mx).min(width);
        let y1 = (self.y1() + my).min(height);
        PixelRect {
            x0,
            y0,
            width: x1 - x0,
            height: y1 - y0,
        }
    }
}

/// Top-left coordinate of a `size`-long window on an axis of length `len`
/// for the box span `[b0, b1)`. A box no longer than the window always ends
/// up inside it; otherwise the window center is uniform over the box.
fn sample_window(rng: &mut impl rand::Rng, b0: usize, b1: usize, size: usize, len: usize) -> usize {
    let max0 = len - size;
    if b1 - b0 <= size {
        let lo = b1.saturating_sub(size);
        let hi = b0.min(max0);
        rng.gen_range(lo..=hi)
    } else {
        let c = rng.gen_range(b0..b1);
        c.saturating_sub(size / 2).min(max0)
    }
}

/// Square `size × size` patch placed around `bbox` inside a `width × height`
/// image.
pub fn sample_patch(rng: &mut impl rand::Rng, bbox: PixelRect, size: usize, width: usize, height: usize) -> Result<PixelRect> {
    if size == 0 || size > width || size > height {
        return Err(Error::InvalidInput(format!("patch size {size} does not fit a {width}x{height} image")));
    }
    if bbox.width == 0 || bbox.height == 0 || bbox.x1() > width || bbox.y1() > height {
        return Err(Error::InvalidInput(format!("box {bbox:?} is empty or outside the image")));
    }
    let x0 = sample_window(rng, bbox.x0, bbox.x1(), size, width);
    let y0 = sample_window(rng, bbox.y0, bbox.y1(), size, height);
    Ok(PixelRect {
        x0,
        y0,
        width: size,
        height: size,
    })
}

/// Source taps of one output coordinate under half-pixel-center bilinear
/// resampling: `(i0, i1, frac)`.
fn bilinear_taps(dst: usize, src_len: usize, dst_len: usize) -> (usize, usize, f64) {
    let s = (dst as f64 + 0.5) * src_len as f64 / dst_len as f64 - 0.5;
    let s = s.clamp(0.0, (src_len - 1) as f64);
    let i0 = s.floor() as usize;
    let i1 = (i0 + 1).min(src_len - 1);
    (i0, i1, s - i0 as f64)
}

/// Bilinear resize with half-pixel centers. Resizing to the same size is the
/// identity.
pub fn resize_bilinear(img: &Image, width: usize, height: usize) -> Image {
    let mut out = Image::new(width, height, img.channels);
    for y in 0..height {
        let (y0, y1, fy) = bilinear_taps(y, img.height, height);
        for x in 0..width {
            let (x0, x1, fx) = bilinear_taps(x, img.width, width);
            for c in 0..img.channels {
                let top = img.get(x0, y0, c) * (1.0 - fx) + img.get(x1, y0, c) * fx;
                let bot = img.get(x0, y1, c) * (1.0 - fx) + img.get(x1, y1, c) * fx;
                out.set(x, y, c, top * (1.0 - fy) + bot * fy);
            }
        }
    }
    out
}

/// Adjoint of [`resize_bilinear`] from a `src_width × src_height` source.
pub fn resize_bilinear_adjoint(grad: &Image, src_width: usize, src_height: usize) -> Image {
    let mut out = Image::new(src_width, src_height, grad.channels);
    for y in 0..grad.height {
        let (y0, y1, fy) = bilinear_taps(y, src_height, grad.height);
        for x in 0..grad.width {
            let (x0, x1, fx) = bilinear_taps(x, src_width, grad.width);
            for c in 0..grad.channels {
                let g = grad.get(x, y, c);
                let taps = [
                    (x0, y0, (1.0 - fx) * (1.0 - fy)),
                    (x1, y0, fx * (1.0 - fy)),
                    (x0, y1, (1.0 - fx) * fy),
                    (x1, y1, fx * fy),
                ];
                for (sx, sy, w) in taps {
                    let i = out.index(sx, sy, c);
                    out.data[i] += g * w;
                }
            }
        }
    }
    out
}

/// Nearest-style mask resize used to bring a mask down to latent resolution:
/// a target cell is set when any covered source pixel is set.
pub fn downsample_mask(mask: &Mask, width: usize, height: usize) -> Mask {
    Mask::from_fn(width, height, |x, y| {
        let sx0 = x * mask.width / width;
        let sx1 = ((x + 1) * mask.width).div_ceil(width).max(sx0 + 1);
        let sy0 = y * mask.height / height;
        let sy1 = ((y + 1) * mask.height).div_ceil(height).max(sy0 + 1);
        (sy0..sy1.min(mask.height)).any(|sy| (sx0..sx1.min(mask.width)).any(|sx| mask.get(sx, sy)))
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_image(rng: &mut ChaCha8Rng, w: usize, h: usize, c: usize) -> Image {
        let data = (0..w * h * c).map(|_| rng.gen_range(-1.0..1.0)).collect();
        Image::from_vec(w, h, c, data).unwrap()
    }

    #[test]
    fn dilation_grows_by_chebyshev_radius() {
        let m = Mask::from_fn(7, 6, |x, y| (x, y) == (1, 4));
        assert_eq!(m.dilated(0), m);
        let d = m.dilated(2);
        for y in 0..6 {
            for x in 0..7 {
                let cheb = (x as isize - 1).abs().max((y as isize - 4).abs());
                assert_eq!(d.get(x, y), cheb <= 2, "({x}, {y})");
            }
        }
    }

    #[test]
    fn resize_to_same_size_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let img = random_image(&mut rng, 7, 5, 3);
        assert_eq!(resize_bilinear(&img, 7, 5), img);
    }

    #[test]
    fn resize_adjoint_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for &(sw, sh, dw, dh) in &[(16, 12, 5, 7), (4, 4, 9, 11), (32, 32, 8, 8)] {
            let x = random_image(&mut rng, sw, sh, 2);
            let y = random_image(&mut rng, dw, dh, 2);
            let lhs = resize_bilinear(&x, dw, dh).dot(&y);
            let rhs = x.dot(&resize_bilinear_adjoint(&y, sw, sh));
            assert!((lhs - rhs).abs() < 1e-10, "{lhs} vs {rhs}");
        }
    }

    #[test]
    fn crop_and_patch_are_adjoint() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = random_image(&mut rng, 10, 8, 3);
        let rect = PixelRect { x0: 2, y0: 3, width: 5, height: 4 };
        let p = random_image(&mut rng, 5, 4, 3);
        let mut canvas = Image::new(10, 8, 3);
        canvas.add_patch(rect, &p);
        assert!((x.crop(rect).unwrap().dot(&p) - x.dot(&canvas)).abs() < 1e-12);
    }

    #[test]
    fn bounding_box_of_empty_mask_is_none() {
        assert_eq!(Mask::empty(4, 4).bounding_box(), None);
        let mut m = Mask::empty(8, 6);
        m.set(2, 1, true);
        m.set(5, 4, true);
        assert_eq!(
            m.bounding_box(),
            Some(PixelRect { x0: 2, y0: 1, width: 4, height: 4 })
        );
    }

    #[test]
    fn mask_downsample_keeps_any_pixel() {
        let mut m = Mask::empty(8, 8);
        m.set(5, 6, true);
        let d = downsample_mask(&m, 2, 2);
        assert_eq!(d.data, vec![false, false, false, true]);
    }

    #[test]
    fn crop_out_of_bounds_errors() {
        let img = Image::new(4, 4, 1);
        assert!(img.crop(PixelRect { x0: 2, y0: 0, width: 3, height: 1 }).is_err());
    }

    #[test]
    fn small_box_is_always_inside_patch() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let bbox = PixelRect { x0: 3, y0: 20, width: 6, height: 9 };
        for _ in 0..500 {
            let p = sample_patch(&mut rng, bbox, 12, 32, 30).unwrap();
            assert!(p.contains_rect(&bbox));
            assert!(PixelRect::full(32, 30).contains_rect(&p));
        }
    }

    #[test]
    fn large_box_patch_centers_fall_in_box() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let bbox = PixelRect { x0: 10, y0: 10, width: 30, height: 30 };
        for _ in 0..500 {
            let p = sample_patch(&mut rng, bbox, 8, 64, 64).unwrap();
            let (cx, cy) = (p.x0 + 4, p.y0 + 4);
            assert!((10..40).contains(&cx) && (10..40).contains(&cy));
        }
    }

    #[test]
    fn patch_sampling_is_deterministic_and_validated() {
        let bbox = PixelRect { x0: 1, y0: 1, width: 4, height: 4 };
        let a = sample_patch(&mut ChaCha8Rng::seed_from_u64(1), bbox, 6, 10, 10).unwrap();
        let b = sample_patch(&mut ChaCha8Rng::seed_from_u64(1), bbox, 6, 10, 10).unwrap();
        assert_eq!(a, b);
        assert!(sample_patch(&mut ChaCha8Rng::seed_from_u64(1), bbox, 11, 10, 10).is_err());
    }

    #[test]
    fn dilation_matches_box_arithmetic() {
        let r = PixelRect { x0: 2, y0: 5, width: 20, height: 10 };
        assert_eq!(r.dilate(0.1, 100, 100), PixelRect { x0: 0, y0: 4, width: 24, height: 12 });
        assert_eq!(r.dilate(0.1, 23, 16), PixelRect { x0: 0, y0: 4, width: 23, height: 12 });
    }
}
