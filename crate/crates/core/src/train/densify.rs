//! Label-aware densification and pruning.
//!
//! Screen-space gradient averages are tracked separately for the
//! reconstruction loss and the distillation loss, and the latter is held to a
//! higher threshold because its gradients run much larger. Children inherit
//! their parent's label; after each event the labels are recomputed from the
//! current scene and any particle whose label flipped is deleted.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::consolidate::{label_gaussians_with, ConsolidationConfig};
use crate::error::{Error, Result};
use crate::grad::ParticleGrads;
use crate::image::Mask;
use crate::raster::accumulate_contributions;
use crate::scene::{quat_to_rotmat, Camera, GaussianParticle, GaussianScene, Label};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DensifyConfig {
    pub interval: usize,
    pub start: usize,
    pub stop: usize,
    /// Average screen-gradient norm (NDC units) that triggers densification
    /// for reconstruction-sourced gradients.
    pub grad_threshold: f64,
    /// Multiplier on `grad_threshold` for distillation-sourced gradients.
    pub sds_threshold_factor: f64,
    /// Particles larger than this fraction of the scene extent are split,
    /// smaller ones cloned.
    pub percent_dense: f64,
    pub split_shrink: f64,
    pub min_opacity: f64,
    pub audit: bool,
}

impl Default for DensifyConfig {
    fn default() -> Self {
        Self {
            interval: 100,
            start: 500,
            stop: 15_000,
            grad_threshold: 2e-4,
            sds_threshold_factor: 10.0,
            percent_dense: 0.01,
            split_shrink: 1.6,
            min_opacity: 0.005,
            audit: true,
        }
    }
}

impl DensifyConfig {
    pub fn validate(&self) -> Result<()> {
        if self.interval == 0 {
            return Err(Error::InvalidConfig("densification interval must be at least 1".into()));
        }
        if !(self.grad_threshold >= 0.0 && self.sds_threshold_factor >= 0.0 && self.percent_dense >= 0.0) {
            return Err(Error::InvalidConfig("densification thresholds must be nonnegative".into()));
        }
        if !(self.split_shrink > 1.0) {
            return Err(Error::InvalidConfig(format!("split shrink must exceed 1, got {}", self.split_shrink)));
        }
        if !(0.0..1.0).contains(&self.min_opacity) {
            return Err(Error::InvalidConfig(format!("min_opacity must lie in [0, 1), got {}", self.min_opacity)));
        }
        Ok(())
    }

    pub fn due(&self, iteration: usize) -> bool {
        iteration >= self.start && iteration <= self.stop && iteration % self.interval == 0
    }
}

/// Which loss produced a screen-space gradient.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StatSource {
    Reconstruction,
    Sds,
}

/// Running sums of screen-gradient norms and the number of contributing
/// steps, per particle and per source.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct GradStats {
    pub rec_sum: Vec<f64>,
    pub rec_count: Vec<u32>,
    pub sds_sum: Vec<f64>,
    pub sds_count: Vec<u32>,
}

impl GradStats {
    pub fn zeros(n: usize) -> Self {
        Self {
            rec_sum: vec![0.0; n],
            rec_count: vec![0; n],
            sds_sum: vec![0.0; n],
            sds_count: vec![0; n],
        }
    }

    pub fn len(&self) -> usize {
        self.rec_sum.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rec_sum.is_empty()
    }

    /// Adds the norm of each nonzero screen gradient, converted from pixels to
    /// normalized device coordinates of a `width`×`height` view.
    pub fn record(&mut self, source: StatSource, grads: &ParticleGrads, width: usize, height: usize) {
        let (sum, count) = match source {
            StatSource::Reconstruction => (&mut self.rec_sum, &mut self.rec_count),
            StatSource::Sds => (&mut self.sds_sum, &mut self.sds_count),
        };
        let (sx, sy) = (0.5 * width as f64, 0.5 * height as f64);
        for (i, g) in grads.screen.iter().enumerate() {
            if g[0] != 0.0 || g[1] != 0.0 {
                sum[i] += (g[0] * sx).hypot(g[1] * sy);
                count[i] += 1;
            }
        }
    }

    fn average(sum: f64, count: u32) -> f64 {
        if count == 0 {
            0.0
        } else {
            sum / count as f64
        }
    }

    fn wants_densify(&self, i: usize, config: &DensifyConfig) -> bool {
        Self::average(self.rec_sum[i], self.rec_count[i]) >= config.grad_threshold && self.rec_count[i] > 0
            || Self::average(self.sds_sum[i], self.sds_count[i]) >= config.grad_threshold * config.sds_threshold_factor
                && self.sds_count[i] > 0
    }
}

/// Labels whose particles the current objective optimizes. Densification,
/// pruning and the audit leave the other label's particles alone.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ActiveLabels {
    pub unmasked: bool,
    pub masked: bool,
}

impl ActiveLabels {
    pub fn contains(self, label: Label) -> bool {
        match label {
            Label::Unmasked => self.unmasked,
            Label::Masked => self.masked,
        }
    }
}

/// Views and thresholds used to re-audit labels.
pub struct Audit<'a> {
    pub views: &'a [(Camera, Mask)],
    pub consolidation: &'a ConsolidationConfig,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct DensifyReport {
    pub cloned: usize,
    pub split: usize,
    pub pruned: usize,
    pub relabeled: usize,
    /// For each particle of the new scene, the index it was copied from in
    /// the old scene, or `None` for a newly created one.
    pub sources: Vec<Option<usize>>,
    /// New particle `i` was created from old particle `parents[i]`.
    pub parents: Vec<Option<usize>>,
}

fn split_child(p: &GaussianParticle, rng: &mut impl Rng, shrink: f64) -> Result<GaussianParticle> {
    let rot = quat_to_rotmat(p.rotation)?;
    let s = p.scale();
    let n = nalgebra::Vector3::new(
        rng.sample::<f64, _>(StandardNormal) * s.x,
        rng.sample::<f64, _>(StandardNormal) * s.y,
        rng.sample::<f64, _>(StandardNormal) * s.z,
    );
    let mut child = p.clone();
    child.position += rot * n;
    child.log_scale = p.log_scale.map(|v| v - shrink.ln());
    Ok(child)
}

/// One densification event: clone small and split large particles whose
/// average screen gradient crosses its source's threshold, prune transparent
/// ones, then delete particles whose recomputed label differs from their own.
/// Only particles with an active label are touched. Statistics are reset.
pub fn densify_and_prune(
    scene: &mut GaussianScene,
    stats: &mut GradStats,
    config: &DensifyConfig,
    extent: f64,
    active: ActiveLabels,
    audit: Option<Audit<'_>>,
    rng: &mut impl Rng,
) -> Result<DensifyReport> {
    if stats.len() != scene.len() {
        return Err(Error::shape(scene.len(), stats.len()));
    }
    let n = scene.len();
    let mut report = DensifyReport::default();
    let mut keep = vec![true; n];
    let mut fresh: Vec<(usize, GaussianParticle)> = Vec::new();
    for i in 0..n {
        let p = &scene.particles[i];
        if !active.contains(p.label) || !stats.wants_densify(i, config) {
            continue;
        }
        if p.scale().max() <= config.percent_dense * extent {
            fresh.push((i, p.clone()));
            report.cloned += 1;
        } else {
            fresh.push((i, split_child(p, rng, config.split_shrink)?));
            fresh.push((i, split_child(p, rng, config.split_shrink)?));
            keep[i] = false;
            report.split += 1;
        }
    }
    for (i, p) in scene.particles.iter().enumerate() {
        if keep[i] && active.contains(p.label) && p.opacity() < config.min_opacity {
            keep[i] = false;
            report.pruned += 1;
        }
    }
    let old = std::mem::take(&mut scene.particles);
    for (i, p) in old.into_iter().enumerate() {
        if keep[i] {
            scene.particles.push(p);
            report.sources.push(Some(i));
            report.parents.push(None);
        }
    }
    for (parent, p) in fresh {
        scene.particles.push(p);
        report.sources.push(None);
        report.parents.push(Some(parent));
    }
    if let Some(audit) = audit {
        let c = audit.consolidation;
        let tally = accumulate_contributions(scene, audit.views.iter().map(|(cam, m)| (cam, m)), c.contribution_threshold);
        let labels = label_gaussians_with(&tally, c.tau_mask, c.inclusive)?;
        // Particles no view sees carry no evidence either way and are kept.
        let flipped: Vec<bool> = scene
            .particles
            .iter()
            .enumerate()
            .map(|(j, p)| tally.masked[j] + tally.unmasked[j] > 0 && active.contains(p.label) && labels[j] != p.label)
            .collect();
        report.relabeled = flipped.iter().filter(|&&f| f).count();
        let mut j = 0;
        scene.particles.retain(|_| {
            j += 1;
            !flipped[j - 1]
        });
        let filter = |xs: &mut Vec<Option<usize>>| {
            let mut j = 0;
            xs.retain(|_| {
                j += 1;
                !flipped[j - 1]
            });
        };
        filter(&mut report.sources);
        filter(&mut report.parents);
    }
    *stats = GradStats::zeros(scene.len());
    Ok(report)
}
