//! End-to-end protocol on the procedural toy: consolidate the object masks,
//! initialize the masked region from the reference, train one variant and
//! score the held-out views.

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::consolidate::consolidate;
use crate::error::Result;
use crate::eval::{eval_masked, ViewMetrics};
use crate::image::{Image, Mask};
use crate::prior::{AnalyticPrior, LinearCodec};
use crate::raster::{render, RenderChannels};
use crate::reference::{init_masked_region, reference_depth, BilateralConfig, ReferenceView, UnprojectConfig};
use crate::regularize::GtDepthOracle;
use crate::scene::{Camera, CameraView, GaussianParticle, GaussianScene};
use crate::sh::rgb_to_dc;
use crate::toy::ToyScene;
use crate::train::{train, TrainConfig, TrainInputs, TrainOutput};

/// Pipeline variants compared on the toy.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Variant {
    /// Masked particles removed, reconstruction loss only.
    Baseline,
    Full,
    NoPrior,
    NoDepth,
    NoAdversarial,
    /// Global distillation branch only.
    NoLocalSds,
    /// The reference particles are replaced by as many random ones.
    NoReferenceInit,
}

impl Variant {
    pub const ABLATIONS: [Variant; 5] = [
        Variant::NoPrior,
        Variant::NoLocalSds,
        Variant::NoReferenceInit,
        Variant::NoAdversarial,
        Variant::NoDepth,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Baseline => "masked reconstruction",
            Variant::Full => "full",
            Variant::NoPrior => "w/o prior",
            Variant::NoDepth => "w/o depth",
            Variant::NoAdversarial => "w/o adversarial",
            Variant::NoLocalSds => "w/o local SDS",
            Variant::NoReferenceInit => "w/o reference init",
        }
    }
}

/// Labeled input plus everything training needs, shared by all variants.
pub struct Prepared {
    pub labeled: GaussianScene,
    pub initialized: GaussianScene,
    /// `initialized` with every Masked particle replaced by one at a uniform
    /// position in their bounding box, with a uniform color.
    pub random_init: GaussianScene,
    /// Training views carrying the consolidated masks.
    pub views: Vec<CameraView>,
    pub reference: ReferenceView,
    pub prior: AnalyticPrior,
    pub oracle: GtDepthOracle,
}

/// Training settings used on the 64×64 toy.
pub fn toy_train_config(iterations: usize, seed: u64) -> TrainConfig {
    let mut c = TrainConfig {
        iterations,
        seed,
        ..TrainConfig::default()
    };
    c.sds.local_patch_size = 32;
    c.adv.patch_size = 16;
    c.adv.hidden = vec![64, 64];
    c.lr.position_by_extent = false;
    // The toy is exactly realizable, so optimizer noise is the main error
    // source; rates are a tenth of the usual splatting defaults.
    c.lr.position = 1e-4;
    c.lr.position_final = 1e-5;
    c.lr.sh_dc = 2.5e-4;
    c.lr.sh_rest = 1.25e-5;
    c.lr.opacity = 5e-3;
    c.lr.scale = 5e-4;
    c.lr.rotation = 1e-4;
    c.lr.position_decay_steps = iterations.max(1);
    c.mask_dilation = 2;
    // Screen gradients of 64×64 renders run far above those of full-size
    // images, so the usual 2e-4 threshold would clone most particles.
    c.densify.grad_threshold = 1e-2;
    c.densify.start = 100;
    c.densify.interval = 100;
    c.densify.stop = iterations.saturating_sub(100);
    c.prior.native = [64, 64];
    c.prior.codec_factor = 1;
    c
}

pub fn prepare(toy: &ToyScene, config: &TrainConfig) -> Result<Prepared> {
    let cams: Vec<Camera> = toy.train_views.iter().map(|&i| toy.cameras[i].clone()).collect();
    let pairs: Vec<(Camera, Mask)> = toy.train_views.iter().map(|&i| (toy.cameras[i].clone(), toy.masks[i].clone())).collect();
    let mut labeled = toy.input.clone();
    let consistent = consolidate(&mut labeled, &pairs, &config.consolidation)?;
    let views = toy
        .train_views
        .iter()
        .zip(&consistent)
        .map(|(&i, m)| CameraView::new(toy.cameras[i].clone(), toy.images[i].clone(), m.clone()))
        .collect::<Result<Vec<_>>>()?;
    let (_, depth) = reference_depth(&labeled, &toy.reference, &BilateralConfig::default())?;
    let (initialized, _) = init_masked_region(&labeled, &toy.reference, &depth, &UnprojectConfig::default())?;
    let random_init = randomize_masked(&initialized, config.seed);
    let targets: Vec<Image> = toy.train_views.iter().map(|&i| toy.ground_truth[i].clone()).collect();
    let [nw, nh] = config.prior.native;
    let prior = AnalyticPrior::dirac(
        config.schedule.clone(),
        LinearCodec::new(config.prior.codec_factor)?,
        (nw, nh),
        targets,
    )?;
    let oracle = GtDepthOracle {
        scene: toy.complete.clone(),
        cameras: cams,
        scale: 0.5,
        offset: 0.3,
    };
    Ok(Prepared {
        labeled,
        initialized,
        random_init,
        views,
        reference: toy.reference.clone(),
        prior,
        oracle,
    })
}

fn randomize_masked(scene: &GaussianScene, seed: u64) -> GaussianScene {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let masked: Vec<&GaussianParticle> = scene.particles.iter().filter(|p| p.label.is_masked()).collect();
    let (mut lo, mut hi) = (Vector3::repeat(f64::INFINITY), Vector3::repeat(f64::NEG_INFINITY));
    for p in &masked {
        lo = lo.inf(&p.position);
        hi = hi.sup(&p.position);
    }
    let mut out = scene.clone();
    for p in out.particles.iter_mut().filter(|p| p.label.is_masked()) {
        p.position = Vector3::from_fn(|i, _| if hi[i] > lo[i] { rng.gen_range(lo[i]..hi[i]) } else { lo[i] });
        p.sh = [[0.0; 3]; 16];
        p.sh[0] = rgb_to_dc([rng.gen(), rng.gen(), rng.gen()]);
    }
    out
}

pub fn run_variant(prep: &Prepared, base: &TrainConfig, variant: Variant) -> Result<TrainOutput> {
    let mut config = base.clone();
    let mut scene = prep.initialized.clone();
    match variant {
        Variant::Baseline => {
            config.lambda_sds = 0.0;
            config.lambda_depth = 0.0;
            config.lambda_adv = 0.0;
            scene.particles.retain(|p| !p.label.is_masked());
        }
        Variant::Full => {}
        Variant::NoPrior => config.lambda_sds = 0.0,
        Variant::NoDepth => config.lambda_depth = 0.0,
        Variant::NoAdversarial => config.lambda_adv = 0.0,
        Variant::NoLocalSds => config.sds.local = false,
        Variant::NoReferenceInit => scene = prep.random_init.clone(),
    }
    let inputs = TrainInputs {
        views: &prep.views,
        reference: Some(&prep.reference),
        prior: Some(&prep.prior),
        depth_oracle: Some(&prep.oracle),
    };
    train(&config, scene, inputs)
}

/// Mean masked-region metrics of `scene` on the held-out views.
pub fn score_holdout(toy: &ToyScene, scene: &GaussianScene) -> Result<ViewMetrics> {
    let preds: Vec<Image> = toy.holdout_views.iter().map(|&i| render(scene, &toy.cameras[i], RenderChannels::COLOR).rgb).collect();
    let gts: Vec<Image> = toy.holdout_views.iter().map(|&i| toy.ground_truth[i].clone()).collect();
    let masks: Vec<Mask> = toy.holdout_views.iter().map(|&i| toy.masks[i].clone()).collect();
    let report = eval_masked(&preds, &gts, &masks, 0.1)?;
    report
        .mean
        .ok_or_else(|| crate::Error::InvalidInput("no held-out view has a mask".into()))
}

/// Masked-pixel MSE of `scene` against ground truth over the given views.
pub fn masked_mse(toy: &ToyScene, scene: &GaussianScene, views: &[usize]) -> f64 {
    let (mut se, mut n) = (0.0, 0usize);
    for &i in views {
        let img = render(scene, &toy.cameras[i], RenderChannels::COLOR).rgb;
        for (p, &m) in toy.masks[i].data.iter().enumerate() {
            if m {
                for c in 0..3 {
                    let d = img.data[3 * p + c] - toy.ground_truth[i].data[3 * p + c];
                    se += d * d;
                }
                n += 3;
            }
        }
    }
    if n == 0 {
        0.0
    } else {
        se / n as f64
    }
}
