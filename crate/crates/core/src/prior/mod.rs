//! Denoising priors: noise schedule, latent codec, classifier-free guidance,
//! the score-distillation gradient and closed-form analytic denoisers.

pub mod multiscale;
pub mod remote;
pub mod wire;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{resize_bilinear, Image, Mask, PixelRect};

pub use multiscale::{draw_sds, multiscale_sds, SdsConfig, SdsDraws, SdsOutput};

/// Per-sample weighting `w(t)` of the distillation gradient.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Weighting {
    #[default]
    SigmaSquared,
    Unit,
}

/// Variance-preserving cosine schedule: `alpha = cos(πt/2)`,
/// `sigma = sin(πt/2)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NoiseSchedule {
    pub t_min: f64,
    pub t_max: f64,
    pub weighting: Weighting,
}

impl Default for NoiseSchedule {
    fn default() -> Self {
        Self {
            t_min: 0.02,
            t_max: 0.98,
            weighting: Weighting::SigmaSquared,
        }
    }
}

impl NoiseSchedule {
    pub fn alpha(&self, t: f64) -> f64 {
        (std::f64::consts::FRAC_PI_2 * t).cos()
    }

    pub fn sigma(&self, t: f64) -> f64 {
        (std::f64::consts::FRAC_PI_2 * t).sin()
    }

    pub fn weight(&self, t: f64) -> f64 {
        match self.weighting {
            Weighting::SigmaSquared => self.sigma(t).powi(2),
            Weighting::Unit => 1.0,
        }
    }

    pub fn contains(&self, t: f64) -> bool {
        (self.t_min..=self.t_max).contains(&t)
    }

    pub fn sample_t(&self, rng: &mut impl Rng) -> f64 {
        rng.gen_range(self.t_min..=self.t_max)
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0 < self.t_min && self.t_min < self.t_max && self.t_max < 1.0) {
            return Err(Error::InvalidConfig(format!(
                "t range must satisfy 0 < t_min < t_max < 1, got [{}, {}]",
                self.t_min, self.t_max
            )));
        }
        Ok(())
    }

    fn check(&self, t: f64) -> Result<()> {
        if !self.contains(t) {
            return Err(Error::InvalidInput(format!("t = {t} outside [{}, {}]", self.t_min, self.t_max)));
        }
        Ok(())
    }
}

/// Tensor in a prior's latent space, stored HWC, tagged with its codec.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentImage {
    pub data: Image,
    pub codec_id: String,
}

impl LatentImage {
    pub fn new(data: Image, codec_id: impl Into<String>) -> Self {
        Self {
            data,
            codec_id: codec_id.into(),
        }
    }
}

/// `k×k` average pooling. Its adjoint spreads each latent value uniformly
/// over its block with weight `1/k²`; decoding replicates without the weight,
/// so `encode(decode(z)) = z` exactly.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LinearCodec {
    pub factor: usize,
}

impl LinearCodec {
    pub fn new(factor: usize) -> Result<Self> {
        if factor == 0 {
            return Err(Error::InvalidConfig("codec factor must be at least 1".into()));
        }
        Ok(Self { factor })
    }

    pub fn id(&self) -> String {
        format!("avgpool{}", self.factor)
    }

    pub fn latent_shape(&self, width: usize, height: usize) -> Result<(usize, usize)> {
        let k = self.factor;
        if width % k != 0 || height % k != 0 {
            return Err(Error::shape(format!("dimensions divisible by {k}"), format!("{width}x{height}")));
        }
        Ok((width / k, height / k))
    }

    pub fn encode(&self, img: &Image) -> Result<LatentImage> {
        let k = self.factor;
        let (lw, lh) = self.latent_shape(img.width, img.height)?;
        let mut out = Image::new(lw, lh, img.channels);
        let inv = 1.0 / (k * k) as f64;
        // Mean as first value plus mean offset, so constant blocks are exact.
        for by in 0..lh {
            for bx in 0..lw {
                for c in 0..img.channels {
                    let first = img.get(bx * k, by * k, c);
                    let mut acc = 0.0;
                    for y in by * k..(by + 1) * k {
                        for x in bx * k..(bx + 1) * k {
                            acc += img.get(x, y, c) - first;
                        }
                    }
                    out.set(bx, by, c, first + acc * inv);
                }
            }
        }
        Ok(LatentImage::new(out, self.id()))
    }

    fn upsample(&self, z: &Image, weight: f64) -> Image {
        let k = self.factor;
        let mut out = Image::new(z.width * k, z.height * k, z.channels);
        for y in 0..out.height {
            for x in 0..out.width {
                for c in 0..z.channels {
                    out.set(x, y, c, weight * z.get(x / k, y / k, c));
                }
            }
        }
        out
    }

    pub fn decode(&self, z: &LatentImage) -> Result<Image> {
        self.check_id(z)?;
        Ok(self.upsample(&z.data, 1.0))
    }

    pub fn encode_adjoint(&self, grad: &Image) -> Image {
        self.upsample(grad, 1.0 / (self.factor * self.factor) as f64)
    }

    fn check_id(&self, z: &LatentImage) -> Result<()> {
        if z.codec_id != self.id() {
            return Err(Error::InvalidInput(format!("latent from codec {} given to {}", z.codec_id, self.id())));
        }
        Ok(())
    }
}

/// Text condition of the personalized prior.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PromptTag {
    Global,
    Local,
}

impl PromptTag {
    pub fn prompt(self) -> &'static str {
        match self {
            PromptTag::Global => "A photo of sks",
            PromptTag::Local => "A photo of sks, cropped",
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            PromptTag::Global => "global",
            PromptTag::Local => "local",
        }
    }
}

/// Which training view and which render-space rectangle a prior sample was
/// taken from. Priors that know per-view targets use it; others ignore it.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SampleOrigin {
    pub view: usize,
    pub crop: PixelRect,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Condition {
    /// Latent of the observed (unmasked) part of the input.
    pub masked_latent: LatentImage,
    /// Mask at latent resolution, set where content is synthesized.
    pub mask: Mask,
    pub prompt: PromptTag,
    pub guidance: f64,
    pub origin: Option<SampleOrigin>,
}

/// A denoising diffusion prior with its codec.
pub trait DenoisePrior: Send + Sync {
    fn schedule(&self) -> &NoiseSchedule;

    /// Image-space resolution the prior operates at.
    fn native_resolution(&self) -> (usize, usize);

    /// Latent `(width, height, channels)` at native resolution.
    fn latent_shape(&self) -> (usize, usize, usize);

    fn encode(&self, img: &Image) -> Result<LatentImage>;

    fn decode(&self, z: &LatentImage) -> Result<Image>;

    /// Vector-Jacobian product of the encoder at `image`: latent gradient to
    /// image gradient.
    fn encode_adjoint(&self, image: &Image, grad: &Image) -> Result<Image>;

    /// Guided noise prediction `ε̂(z_t, t, c)`.
    fn denoise(&self, z_t: &LatentImage, t: f64, cond: &Condition) -> Result<Image>;

    /// Deterministic DDIM from `t_start` to 0 in `steps` steps, decoded.
    fn inpaint(&self, z_t: &LatentImage, t_start: f64, steps: usize, cond: &Condition) -> Result<Image> {
        let z = ddim(self, z_t, t_start, steps, cond)?;
        self.decode(&z)
    }
}

/// Deterministic DDIM sampling on an evenly spaced grid from `t_start` to 0.
pub fn ddim<P: DenoisePrior + ?Sized>(prior: &P, z_t: &LatentImage, t_start: f64, steps: usize, cond: &Condition) -> Result<LatentImage> {
    if steps == 0 {
        return Err(Error::InvalidConfig("DDIM needs at least one step".into()));
    }
    let s = prior.schedule();
    let mut z = z_t.clone();
    for k in 0..steps {
        let t = t_start * (steps - k) as f64 / steps as f64;
        let t_next = t_start * (steps - k - 1) as f64 / steps as f64;
        let eps = prior.denoise(&z, t, cond)?;
        let (a, sg) = (s.alpha(t), s.sigma(t));
        let (an, sn) = (s.alpha(t_next), s.sigma(t_next));
        let mut next = z.data.clone();
        for (v, e) in next.data.iter_mut().zip(&eps.data) {
            let x0 = (*v - sg * e) / a;
            *v = an * x0 + sn * e;
        }
        z.data = next;
    }
    Ok(z)
}

/// `z_t = alpha(t)·z + sigma(t)·ε`.
pub fn add_noise(schedule: &NoiseSchedule, z: &LatentImage, t: f64, eps: &Image) -> Result<LatentImage> {
    schedule.check(t)?;
    z.data.ensure_shape(eps)?;
    let (a, s) = (schedule.alpha(t), schedule.sigma(t));
    let mut out = z.clone();
    for (v, e) in out.data.data.iter_mut().zip(&eps.data) {
        *v = a * *v + s * e;
    }
    Ok(out)
}

/// `(1 + α)·ε_c − α·ε_u`, evaluated as `ε_c + α·(ε_c − ε_u)` so that equal
/// branches and zero guidance return `ε_c` exactly.
pub fn cfg_combine(eps_cond: &Image, eps_uncond: &Image, guidance: f64) -> Result<Image> {
    eps_cond.ensure_shape(eps_uncond)?;
    let mut out = eps_cond.clone();
    for (v, u) in out.data.iter_mut().zip(&eps_uncond.data) {
        *v += guidance * (*v - u);
    }
    Ok(out)
}

/// Distillation gradient of one sample with respect to the clean latent.
#[derive(Clone, Debug, PartialEq)]
pub struct SdsSample {
    pub grad: Image,
    /// `w(t)·mean((ε̂ − ε)²)`, reported as the loss value.
    pub loss: f64,
}

/// `w(t)·alpha(t)·(ε̂(z_t) − ε)` with `z_t = add_noise(z, t, ε)`.
pub fn sds_grad<P: DenoisePrior + ?Sized>(prior: &P, z: &LatentImage, cond: &Condition, t: f64, eps: &Image) -> Result<SdsSample> {
    let s = prior.schedule();
    let z_t = add_noise(s, z, t, eps)?;
    let eps_hat = prior.denoise(&z_t, t, cond)?;
    eps_hat.ensure_shape(eps)?;
    let coef = s.weight(t) * s.alpha(t);
    let mut grad = eps_hat.clone();
    let mut sq = 0.0;
    for (g, e) in grad.data.iter_mut().zip(&eps.data) {
        let r = *g - e;
        sq += r * r;
        *g = coef * r;
    }
    Ok(SdsSample {
        grad,
        loss: s.weight(t) * sq / eps.data.len().max(1) as f64,
    })
}

/// Posterior-mean noise prediction for data distributed as weighted point
/// masses at `targets`.
pub fn analytic_denoiser(schedule: &NoiseSchedule, z_t: &Image, t: f64, targets: &[(&Image, f64)]) -> Result<Image> {
    if targets.is_empty() {
        return Err(Error::InvalidInput("analytic denoiser needs at least one target".into()));
    }
    let (a, s) = (schedule.alpha(t), schedule.sigma(t));
    if !(s > 0.0) {
        return Err(Error::InvalidInput(format!("analytic denoiser undefined at t = {t}")));
    }
    let mut logits = Vec::with_capacity(targets.len());
    for (img, w) in targets {
        z_t.ensure_shape(img)?;
        if !(*w > 0.0) {
            return Err(Error::InvalidInput("target weights must be positive".into()));
        }
        let d2: f64 = z_t.data.iter().zip(&img.data).map(|(z, x)| (z - a * x).powi(2)).sum();
        logits.push(w.ln() - d2 / (2.0 * s * s));
    }
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let ws: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
    let total: f64 = ws.iter().sum();
    let mut mean = Image::new(z_t.width, z_t.height, z_t.channels);
    if targets.len() == 1 {
        mean = targets[0].0.clone();
    } else {
        for ((img, _), w) in targets.iter().zip(&ws) {
            let p = w / total;
            for (m, x) in mean.data.iter_mut().zip(&img.data) {
                *m += p * x;
            }
        }
    }
    let mut eps = z_t.clone();
    for (e, m) in eps.data.iter_mut().zip(&mean.data) {
        *e = (*e - a * m) / s;
    }
    Ok(eps)
}

/// One image-space target of an [`AnalyticPrior`] component.
#[derive(Clone, Debug, PartialEq)]
pub struct AnalyticTarget {
    pub image: Image,
    pub weight: f64,
}

/// Closed-form prior whose data distribution, per training view, is a
/// weighted set of full-resolution target images. Each query crops the
/// targets to the sample's origin and resizes them to native resolution
/// before encoding, so it sees exactly what the render went through. The
/// text and mask condition are accepted and ignored.
#[derive(Clone, Debug)]
pub struct AnalyticPrior {
    schedule: NoiseSchedule,
    codec: LinearCodec,
    native: (usize, usize),
    views: Vec<Vec<AnalyticTarget>>,
}

impl AnalyticPrior {
    pub fn new(schedule: NoiseSchedule, codec: LinearCodec, native: (usize, usize), views: Vec<Vec<AnalyticTarget>>) -> Result<Self> {
        schedule.validate()?;
        codec.latent_shape(native.0, native.1)?;
        if views.iter().any(|v| v.is_empty()) {
            return Err(Error::InvalidInput("every view needs at least one analytic target".into()));
        }
        Ok(Self {
            schedule,
            codec,
            native,
            views,
        })
    }

    /// Point mass at one image per view.
    pub fn dirac(schedule: NoiseSchedule, codec: LinearCodec, native: (usize, usize), targets: Vec<Image>) -> Result<Self> {
        let views = targets.into_iter().map(|image| vec![AnalyticTarget { image, weight: 1.0 }]).collect();
        Self::new(schedule, codec, native, views)
    }

    pub fn codec(&self) -> &LinearCodec {
        &self.codec
    }

    /// Latent targets for the given origin.
    pub fn latent_targets(&self, origin: &SampleOrigin) -> Result<Vec<(Image, f64)>> {
        let targets = self
            .views
            .get(origin.view)
            .ok_or_else(|| Error::InvalidInput(format!("analytic prior has no targets for view {}", origin.view)))?;
        targets
            .iter()
            .map(|t| {
                let crop = t.image.crop(origin.crop)?;
                let native = resize_bilinear(&crop, self.native.0, self.native.1);
                Ok((self.codec.encode(&native)?.data, t.weight))
            })
            .collect()
    }
}

impl DenoisePrior for AnalyticPrior {
    fn schedule(&self) -> &NoiseSchedule {
        &self.schedule
    }

    fn native_resolution(&self) -> (usize, usize) {
        self.native
    }

    fn latent_shape(&self) -> (usize, usize, usize) {
        let (w, h) = self.codec.latent_shape(self.native.0, self.native.1).expect("validated at construction");
        (w, h, 3)
    }

    fn encode(&self, img: &Image) -> Result<LatentImage> {
        self.codec.encode(img)
    }

    fn decode(&self, z: &LatentImage) -> Result<Image> {
        self.codec.decode(z)
    }

    fn encode_adjoint(&self, _image: &Image, grad: &Image) -> Result<Image> {
        Ok(self.codec.encode_adjoint(grad))
    }

    fn denoise(&self, z_t: &LatentImage, t: f64, cond: &Condition) -> Result<Image> {
        let origin = cond
            .origin
            .as_ref()
            .ok_or_else(|| Error::Prior("analytic prior needs the sample origin in the condition".into()))?;
        let targets = self.latent_targets(origin)?;
        let refs: Vec<(&Image, f64)> = targets.iter().map(|(i, w)| (i, *w)).collect();
        // Conditional and unconditional branches coincide.
        let eps = analytic_denoiser(&self.schedule, &z_t.data, t, &refs)?;
        cfg_combine(&eps, &eps, cond.guidance)
    }
}

/// Relative (affine-ambiguous) monocular depth estimation.
pub trait DepthOracle: Send + Sync {
    /// Depth for `image` as seen from training view `view`.
    fn estimate(&self, image: &Image, view: usize) -> Result<Image>;
}
