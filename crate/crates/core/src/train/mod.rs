//! The optimization loop: photometric reconstruction on unmasked pixels,
//! two-scale distillation, periodic depth regularization and the adversarial
//! color loss, each routed to its own particles.

mod densify;
mod loss;

pub use densify::{densify_and_prune, ActiveLabels, Audit, DensifyConfig, DensifyReport, GradStats, StatSource};
pub use loss::{photometric_loss, ssim, PhotometricLoss};

use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::consolidate::{generate_outpaint_masks, ConsolidationConfig};
use crate::error::{Error, Result};
use crate::grad::{ParticleGrads, PARAMS_PER_PARTICLE};
use crate::image::{Image, Mask};
use crate::optim::{Adam, AdamConfig};
use crate::prior::{draw_sds, multiscale_sds, DenoisePrior, DepthOracle, NoiseSchedule, SdsConfig};
use crate::raster::{render, render_backward, RenderChannels, RenderGrad};
use crate::reference::ReferenceView;
use crate::regularize::{adv_step, depth_loss, sample_patches, AdvConfig, DepthConfig, Discriminator};
use crate::routing::{route_gradients, LossSource};
use crate::scene::{Camera, CameraView, GaussianParticle, GaussianScene};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    #[default]
    Inpaint,
    /// Inpainting with a reference that contains a new object.
    Insert,
    /// Masks come from the rays that miss a sphere around the content.
    Outpaint,
    /// Designated views also supervise the masked region photometrically.
    SparseRecon,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LearningRates {
    pub position: f64,
    pub position_final: f64,
    pub position_decay_steps: usize,
    /// Multiply the position rates by the camera extent.
    pub position_by_extent: bool,
    pub sh_dc: f64,
    pub sh_rest: f64,
    pub opacity: f64,
    pub scale: f64,
    pub rotation: f64,
}

impl Default for LearningRates {
    fn default() -> Self {
        Self {
            position: 1.6e-4,
            position_final: 1.6e-6,
            position_decay_steps: 30_000,
            position_by_extent: true,
            sh_dc: 2.5e-3,
            sh_rest: 2.5e-3 / 20.0,
            opacity: 5e-2,
            scale: 5e-3,
            rotation: 1e-3,
        }
    }
}

impl LearningRates {
    /// Log-linear interpolation from `position` to `position_final`.
    pub fn position_at(&self, iteration: usize) -> f64 {
        let t = (iteration as f64 / self.position_decay_steps.max(1) as f64).min(1.0);
        (self.position.ln() * (1.0 - t) + self.position_final.ln() * t).exp()
    }

    /// Rate of flat parameter slot `k` (see [`crate::grad::ParticleGrad::to_flat`]).
    pub fn for_slot(&self, k: usize, position: f64) -> f64 {
        match k {
            0..=2 => position,
            3..=5 => self.scale,
            6..=9 => self.rotation,
            10 => self.opacity,
            11..=13 => self.sh_dc,
            _ => self.sh_rest,
        }
    }

    fn validate(&self) -> Result<()> {
        let all = [self.position, self.position_final, self.sh_dc, self.sh_rest, self.opacity, self.scale, self.rotation];
        if all.iter().any(|v| !(*v >= 0.0 && v.is_finite())) || !(self.position > 0.0 && self.position_final > 0.0) {
            return Err(Error::InvalidConfig("learning rates must be finite and nonnegative, position rates positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutpaintConfig {
    /// Distance of the kept sphere along each optical axis.
    pub distance: f64,
    pub radius: f64,
}

impl Default for OutpaintConfig {
    fn default() -> Self {
        Self { distance: 4.0, radius: 1.0 }
    }
}

/// Settings for building the prior from the command line.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PriorConfig {
    /// `[width, height]` the prior works at.
    pub native: [usize; 2],
    /// Pooling factor of the analytic prior's codec.
    pub codec_factor: usize,
    pub url: String,
    pub timeout_secs: u64,
}

impl Default for PriorConfig {
    fn default() -> Self {
        Self {
            native: [256, 256],
            codec_factor: 8,
            url: String::new(),
            timeout_secs: 120,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub mode: Mode,
    pub iterations: usize,
    pub seed: u64,
    pub lambda_rec: f64,
    pub lambda_sds: f64,
    pub lambda_depth: f64,
    pub lambda_adv: f64,
    /// Depth loss on every `depth_every`-th iteration.
    pub depth_every: usize,
    pub ssim_weight: f64,
    pub ssim_window: usize,
    /// Consecutive rolled-back iterations tolerated before aborting.
    pub max_rollbacks: usize,
    /// Pixels by which the loss masks grow beyond the view masks, so that
    /// faint edges of removed content are not reconstructed. Label audits use
    /// the undilated masks.
    pub mask_dilation: usize,
    /// Views that also supervise the masked region (sparse reconstruction).
    pub gt_views: Vec<usize>,
    pub schedule: NoiseSchedule,
    pub sds: SdsConfig,
    pub depth: DepthConfig,
    pub adv: AdvConfig,
    pub consolidation: ConsolidationConfig,
    pub lr: LearningRates,
    pub densify: DensifyConfig,
    pub outpaint: OutpaintConfig,
    pub prior: PriorConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            mode: Mode::Inpaint,
            iterations: 3000,
            seed: 0,
            lambda_rec: 1.0,
            lambda_sds: 0.001,
            lambda_depth: 0.0625,
            lambda_adv: 0.03,
            depth_every: 8,
            ssim_weight: 0.2,
            ssim_window: 11,
            max_rollbacks: 10,
            mask_dilation: 0,
            gt_views: Vec::new(),
            schedule: NoiseSchedule::default(),
            sds: SdsConfig::default(),
            depth: DepthConfig::default(),
            adv: AdvConfig::default(),
            consolidation: ConsolidationConfig::default(),
            lr: LearningRates::default(),
            densify: DensifyConfig::default(),
            outpaint: OutpaintConfig::default(),
            prior: PriorConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("lambda_rec", self.lambda_rec),
            ("lambda_sds", self.lambda_sds),
            ("lambda_depth", self.lambda_depth),
            ("lambda_adv", self.lambda_adv),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::InvalidConfig(format!("{name} must be finite and nonnegative, got {v}")));
            }
        }
        if self.depth_every == 0 {
            return Err(Error::InvalidConfig("depth_every must be at least 1".into()));
        }
        if self.max_rollbacks == 0 {
            return Err(Error::InvalidConfig("max_rollbacks must be at least 1".into()));
        }
        self.schedule.validate()?;
        self.densify.validate()?;
        self.lr.validate()?;
        Ok(())
    }

    /// Parses TOML text; unknown keys are errors.
    pub fn from_toml(text: &str) -> Result<Self> {
        let config: Self = toml::from_str(text).map_err(|e| Error::InvalidConfig(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::InvalidConfig(e.to_string()))
    }

    fn active_labels(&self) -> ActiveLabels {
        let guided = self.lambda_sds > 0.0 || self.lambda_depth > 0.0 || self.lambda_adv > 0.0;
        let gt = self.mode == Mode::SparseRecon && !self.gt_views.is_empty() && self.lambda_rec > 0.0;
        ActiveLabels {
            unmasked: self.lambda_rec > 0.0,
            masked: guided || gt,
        }
    }
}

/// One CSV row. Terms not evaluated in an iteration are logged as zero.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize)]
pub struct LogRow {
    pub iteration: usize,
    pub l_rec: f64,
    pub l_sds_global: f64,
    pub l_sds_local: f64,
    pub l_depth: f64,
    pub l_adv_g: f64,
    pub l_adv_d: f64,
    pub particle_count: usize,
}

impl LogRow {
    pub const HEADER: &'static str = "iteration,L_rec,L_SDS_global,L_SDS_local,L_depth,L_adv_G,L_adv_D,particle_count";

    pub fn is_finite(&self) -> bool {
        [self.l_rec, self.l_sds_global, self.l_sds_local, self.l_depth, self.l_adv_g, self.l_adv_d]
            .iter()
            .all(|v| v.is_finite())
    }
}

pub fn write_log_csv(rows: &[LogRow], mut out: impl Write) -> std::io::Result<()> {
    writeln!(out, "{}", LogRow::HEADER)?;
    for r in rows {
        writeln!(
            out,
            "{},{},{},{},{},{},{},{}",
            r.iteration, r.l_rec, r.l_sds_global, r.l_sds_local, r.l_depth, r.l_adv_g, r.l_adv_d, r.particle_count
        )?;
    }
    Ok(())
}

/// Everything the loop reads besides the scene.
#[derive(Clone, Copy)]
pub struct TrainInputs<'a> {
    /// Training views with their consolidated masks.
    pub views: &'a [CameraView],
    pub reference: Option<&'a ReferenceView>,
    pub prior: Option<&'a dyn DenoisePrior>,
    pub depth_oracle: Option<&'a dyn DepthOracle>,
}

#[derive(Clone, Debug)]
pub struct TrainOutput {
    pub scene: GaussianScene,
    pub log: Vec<LogRow>,
    /// Iterations discarded because a loss or update was not finite.
    pub rollbacks: usize,
    pub densify_events: Vec<DensifyReport>,
}

/// Radius of the camera centers around their mean, padded by 10%.
pub fn camera_extent(cameras: &[Camera]) -> f64 {
    if cameras.is_empty() {
        return 1.0;
    }
    let centers: Vec<_> = cameras.iter().map(Camera::center).collect();
    let mean = centers.iter().fold(nalgebra::Vector3::zeros(), |a, c| a + c) / centers.len() as f64;
    let r = centers.iter().map(|c| (c - mean).norm()).fold(0.0, f64::max);
    if r > 0.0 {
        1.1 * r
    } else {
        1.0
    }
}

fn particle_flat(p: &GaussianParticle, out: &mut [f64]) {
    out[0..3].copy_from_slice(p.position.as_slice());
    out[3..6].copy_from_slice(p.log_scale.as_slice());
    out[6..10].copy_from_slice(&p.rotation);
    out[10] = p.opacity_logit;
    for (k, row) in p.sh.iter().enumerate() {
        out[11 + 3 * k..14 + 3 * k].copy_from_slice(row);
    }
}

fn set_particle_flat(p: &mut GaussianParticle, v: &[f64]) {
    p.position.as_mut_slice().copy_from_slice(&v[0..3]);
    p.log_scale.as_mut_slice().copy_from_slice(&v[3..6]);
    p.rotation.copy_from_slice(&v[6..10]);
    p.opacity_logit = v[10];
    for (k, row) in p.sh.iter_mut().enumerate() {
        row.copy_from_slice(&v[11 + 3 * k..14 + 3 * k]);
    }
}

fn add_grads(total: &mut ParticleGrads, part: &ParticleGrads, weight: f64) {
    for (a, b) in total.particles.iter_mut().zip(&part.particles) {
        let mut b = b.clone();
        b.scale(weight);
        a.add_assign(&b);
    }
}

fn scaled(grads: &ParticleGrads, weight: f64) -> ParticleGrads {
    let mut g = grads.clone();
    for s in &mut g.screen {
        *s = s.map(|v| v * weight);
    }
    g
}

fn grads_finite(g: &ParticleGrads) -> bool {
    g.particles.iter().all(|p| p.is_finite())
}

/// Per-iteration view of the run handed to an observer.
pub struct Progress<'a> {
    pub iteration: usize,
    pub scene: &'a GaussianScene,
    pub row: &'a LogRow,
}

pub fn train(config: &TrainConfig, scene: GaussianScene, inputs: TrainInputs<'_>) -> Result<TrainOutput> {
    train_observed(config, scene, inputs, |_| {})
}

/// [`train`] calling `observe` after every successful iteration.
pub fn train_observed(
    config: &TrainConfig,
    mut scene: GaussianScene,
    inputs: TrainInputs<'_>,
    mut observe: impl FnMut(&Progress<'_>),
) -> Result<TrainOutput> {
    config.validate()?;
    let mut output = TrainOutput {
        scene: GaussianScene::default(),
        log: Vec::new(),
        rollbacks: 0,
        densify_events: Vec::new(),
    };
    if config.iterations == 0 {
        output.scene = scene;
        return Ok(output);
    }
    if inputs.views.is_empty() {
        return Err(Error::InvalidInput("training needs at least one view".into()));
    }
    let prior = match inputs.prior {
        Some(p) => Some(p),
        None if config.lambda_sds > 0.0 || config.lambda_depth > 0.0 => {
            return Err(Error::InvalidInput("distillation and depth losses need a prior".into()))
        }
        None => None,
    };
    if config.lambda_depth > 0.0 && inputs.depth_oracle.is_none() {
        return Err(Error::InvalidInput("the depth loss needs a depth oracle".into()));
    }
    if config.lambda_adv > 0.0 && inputs.reference.is_none() {
        return Err(Error::InvalidInput("the adversarial loss needs a reference view".into()));
    }
    if let Some(&bad) = config.gt_views.iter().find(|&&v| v >= inputs.views.len()) {
        return Err(Error::InvalidInput(format!("ground-truth view {bad} out of range")));
    }

    let cameras: Vec<Camera> = inputs.views.iter().map(|v| v.camera.clone()).collect();
    let masks: Vec<Mask> = match config.mode {
        Mode::Outpaint => generate_outpaint_masks(&cameras, config.outpaint.distance, config.outpaint.radius)?,
        _ => inputs.views.iter().map(|v| v.mask.clone()).collect(),
    };
    let audit_views: Vec<(Camera, Mask)> = cameras.iter().cloned().zip(masks.iter().cloned()).collect();
    let masks: Vec<Mask> = masks.iter().map(|m| m.dilated(config.mask_dilation)).collect();
    let extent = camera_extent(&cameras);
    let active = config.active_labels();
    let is_gt_view = |k: usize| config.mode == Mode::SparseRecon && config.gt_views.contains(&k);

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut opt = Adam::new(AdamConfig::new(1.0, 0.9, 0.999), scene.len() * PARAMS_PER_PARTICLE);
    let mut stats = GradStats::zeros(scene.len());
    let mut disc = None;
    if config.lambda_adv > 0.0 {
        let p = config.adv.patch_size;
        let d = Discriminator::new(3 * p * p, &config.adv.hidden, &mut rng)?;
        let o = config.adv.optimizer(&d);
        disc = Some((d, o));
    }

    let mut consecutive = 0;
    let mut iteration = 1;
    while iteration <= config.iterations {
        let k = rng.gen_range(0..inputs.views.len());
        let view = &inputs.views[k];
        let cam = &view.camera;
        let mask = &masks[k];
        let labels = scene.labels();
        let n = scene.len();
        let mut row = LogRow {
            iteration,
            ..Default::default()
        };
        let mut total = ParticleGrads::zeros(n);
        let mut rec_grads = None;
        let mut sds_grads = None;
        let saved_disc = disc.clone();

        let rgb = render(&scene, cam, RenderChannels::COLOR).rgb;
        if config.lambda_rec > 0.0 {
            let gt = is_gt_view(k);
            let region = if gt { Mask::full(cam.width, cam.height) } else { mask.inverted() };
            let l = photometric_loss(&rgb, &view.image, &region, config.ssim_weight, config.ssim_window)?;
            let mut g = render_backward(&scene, cam, &RenderGrad::from_rgb(l.grad));
            if !gt {
                route_gradients(&mut g, &labels, LossSource::Reconstruction)?;
            }
            row.l_rec = l.loss;
            add_grads(&mut total, &g, config.lambda_rec);
            rec_grads = Some(scaled(&g, config.lambda_rec));
        }
        if let (true, Some(prior)) = (config.lambda_sds > 0.0, prior) {
            let draws = draw_sds(&mut rng, prior, cam.width, cam.height, mask, &config.sds)?;
            let out = multiscale_sds(&scene, k, cam, mask, prior, &config.sds, &draws)?;
            row.l_sds_global = out.loss_global;
            row.l_sds_local = out.loss_local;
            add_grads(&mut total, &out.grads, config.lambda_sds);
            sds_grads = Some(scaled(&out.grads, config.lambda_sds));
        }
        if let (true, Some(prior), Some(oracle)) = (
            config.lambda_depth > 0.0 && iteration % config.depth_every == 0 && !mask.is_empty(),
            prior,
            inputs.depth_oracle,
        ) {
            let d = depth_loss(&mut rng, &scene, k, cam, mask, prior, oracle, &config.depth)?;
            row.l_depth = d.loss;
            add_grads(&mut total, &d.grads, config.lambda_depth);
        }
        if let (Some((d, o)), Some(reference)) = (disc.as_mut(), inputs.reference) {
            if !mask.is_empty() {
                let a = &config.adv;
                let real = sample_patches(&mut rng, &reference.image, &reference.mask, a.n_real, a.patch_size, a.dilate)?;
                let fake = sample_patches(&mut rng, &rgb, mask, a.n_fake, a.patch_size, a.dilate)?;
                let out = adv_step(d, o, &real.patches, &fake.patches, a)?;
                if out.skipped {
                    row.l_adv_g = f64::NAN;
                } else {
                    row.l_adv_g = out.g_loss;
                    row.l_adv_d = out.d_objective;
                    let mut img = Image::new(cam.width, cam.height, 3);
                    for (rect, g) in fake.rects.iter().zip(&out.fake_grads) {
                        img.add_patch(*rect, g);
                    }
                    let mut g = render_backward(&scene, cam, &RenderGrad::from_rgb(img));
                    route_gradients(&mut g, &labels, LossSource::Adversarial)?;
                    add_grads(&mut total, &g, config.lambda_adv);
                }
            }
        }

        let mut params = vec![0.0; n * PARAMS_PER_PARTICLE];
        for (p, chunk) in scene.particles.iter().zip(params.chunks_mut(PARAMS_PER_PARTICLE)) {
            particle_flat(p, chunk);
        }
        let mut ok = row.is_finite() && grads_finite(&total);
        let saved_opt = opt.clone();
        if ok {
            let mut flat = vec![0.0; n * PARAMS_PER_PARTICLE];
            for (g, chunk) in total.particles.iter().zip(flat.chunks_mut(PARAMS_PER_PARTICLE)) {
                chunk.copy_from_slice(&g.to_flat());
            }
            let mut pos_lr = config.lr.position_at(iteration);
            if config.lr.position_by_extent {
                pos_lr *= extent;
            }
            let lr = &config.lr;
            opt.step_with_lr(&mut params, &flat, |i| lr.for_slot(i % PARAMS_PER_PARTICLE, pos_lr));
            ok = params.iter().all(|v| v.is_finite());
        }
        if !ok {
            opt = saved_opt;
            disc = saved_disc;
            output.rollbacks += 1;
            consecutive += 1;
            log::warn!("iteration {iteration}: non-finite loss or update, rolled back ({consecutive} in a row)");
            if consecutive >= config.max_rollbacks {
                return Err(Error::TrainingAborted(format!(
                    "{consecutive} consecutive iterations rolled back at iteration {iteration}"
                )));
            }
            continue;
        }
        consecutive = 0;
        for (p, chunk) in scene.particles.iter_mut().zip(params.chunks(PARAMS_PER_PARTICLE)) {
            set_particle_flat(p, chunk);
        }
        if let Some(g) = &rec_grads {
            stats.record(StatSource::Reconstruction, g, cam.width, cam.height);
        }
        if let Some(g) = &sds_grads {
            stats.record(StatSource::Sds, g, cam.width, cam.height);
        }
        if config.densify.due(iteration) {
            let audit = config.densify.audit.then_some(Audit {
                views: &audit_views,
                consolidation: &config.consolidation,
            });
            let report = densify_and_prune(&mut scene, &mut stats, &config.densify, extent, active, audit, &mut rng)?;
            opt.remap_blocks(&report.sources, PARAMS_PER_PARTICLE);
            output.densify_events.push(report);
        }
        row.particle_count = scene.len();
        observe(&Progress {
            iteration,
            scene: &scene,
            row: &row,
        });
        output.log.push(row);
        iteration += 1;
    }
    output.scene = scene;
    Ok(output)
}
