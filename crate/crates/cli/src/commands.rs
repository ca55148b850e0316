use std::fs;
use std::path::{Path, PathBuf};
use std::time::Duration;

use anyhow::{bail, ensure, Context, Result};
use serde_json::json;

use refsplat::bench::toy_train_config;
use refsplat::consolidate::{consolidate, generate_outpaint_masks, ConsolidationConfig};
use refsplat::eval::eval_masked;
use refsplat::image::{Image, Mask};
use refsplat::io::{
    ensure_dir, load_cameras, load_mask, load_pfm, load_png, load_scene, load_views, read_camera_records, save_mask, save_pfm, save_png,
    save_scene, write_camera_records, CameraRecord,
};
use refsplat::prior::remote::{resolve_url, RemoteDepth, RemotePrior};
use refsplat::prior::{AnalyticPrior, AnalyticTarget, DenoisePrior, DepthOracle, LinearCodec};
use refsplat::raster::{render as render_scene, RenderChannels};
use refsplat::reference::{init_masked_region, reference_depth, BilateralConfig, ReferenceView, UnprojectConfig};
use refsplat::regularize::GtDepthOracle;
use refsplat::scene::{Camera, Label};
use refsplat::toy::{make_toy_scene, ToyConfig};
use refsplat::train::{train as run_training, write_log_csv, TrainConfig, TrainInputs};

use crate::config::{DataConfig, PriorChoice, RunFile, TargetRecord};
use crate::DepthOracleChoice;

fn parent(path: &Path) -> &Path {
    path.parent().unwrap_or(Path::new("."))
}

fn absolute(path: &Path) -> Result<PathBuf> {
    fs::canonicalize(path).with_context(|| format!("resolving {}", path.display()))
}

pub fn read_labels(path: &Path) -> Result<Vec<Label>> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| match l.trim() {
            "0" => Ok(Label::Unmasked),
            "1" => Ok(Label::Masked),
            other => bail!("{}: line {}: expected 0 or 1, got {other:?}", path.display(), i + 1),
        })
        .collect()
}

fn write_labels(path: &Path, labels: &[Label]) -> Result<()> {
    let text: String = labels.iter().map(|l| if l.is_masked() { "1\n" } else { "0\n" }).collect();
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

pub fn label(scene: &Path, cameras: &Path, masks: &Path, tau: f64, tau_prime: f64, out: &Path) -> Result<()> {
    let mut scene = load_scene(scene)?;
    let records = read_camera_records(cameras)?;
    let views = load_views(cameras, parent(cameras), masks)?;
    let pairs: Vec<(Camera, Mask)> = views.into_iter().map(|v| (v.camera, v.mask)).collect();
    let config = ConsolidationConfig {
        tau_mask: tau,
        tau_prime,
        ..Default::default()
    };
    let consistent = consolidate(&mut scene, &pairs, &config)?;
    let out = ensure_dir(out)?;
    let mask_dir = ensure_dir(&out.join("masks"))?;
    let mut written = Vec::with_capacity(records.len());
    for (r, m) in records.iter().zip(&consistent) {
        let name = format!("{}.png", r.id);
        save_mask(m, &mask_dir.join(&name))?;
        let image = absolute(&parent(cameras).join(&r.image))?;
        written.push(CameraRecord {
            image: image.to_string_lossy().into_owned(),
            mask: Some(format!("masks/{name}")),
            ..r.clone()
        });
    }
    write_camera_records(&out.join("cameras.json"), &written)?;
    write_labels(&out.join("labels.txt"), &scene.labels())?;
    save_scene(&scene, &out.join("labeled.ply"))?;
    let masked = scene.masked_indices().len();
    log::info!("{masked} of {} particles labeled masked; outputs in {}", scene.len(), out.display());
    Ok(())
}

/// The record `id` of a camera file, with its image and mask resolved
/// against the file's directory.
fn load_record_view(path: &Path, id: usize) -> Result<(Camera, Image, Mask)> {
    let records = read_camera_records(path)?;
    let Some(r) = records.iter().find(|r| r.id == id) else {
        bail!("{} has no camera with id {id}", path.display());
    };
    let camera = r.camera()?;
    let image = load_png(&parent(path).join(&r.image))?;
    let mask = match &r.mask {
        Some(m) => load_mask(&parent(path).join(m))?,
        None => bail!("reference camera {id} has no mask"),
    };
    Ok((camera, image, mask))
}

pub fn init(scene: &Path, labels: &Path, reference: &Path, ref_depth: &Path, camera_id: usize, out: &Path) -> Result<()> {
    let mut scene = load_scene(scene)?;
    scene.set_labels(&read_labels(labels)?)?;
    let (camera, image, mask) = load_record_view(reference, camera_id)?;
    let reference = ReferenceView::new(camera, image, mask, load_pfm(ref_depth)?)?;
    let (alignment, depth) = reference_depth(&scene, &reference, &BilateralConfig::default())?;
    log::info!("reference depth aligned with scale {:.6} and offset {:.6}", alignment.scale, alignment.offset);
    let (initialized, unproj) = init_masked_region(&scene, &reference, &depth, &UnprojectConfig::default())?;
    if unproj.skipped_nonpositive > 0 {
        log::warn!("{} reference pixels skipped for nonpositive depth", unproj.skipped_nonpositive);
    }
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        ensure_dir(dir)?;
    }
    save_scene(&initialized, out)?;
    log::info!("{} particles unprojected from camera {camera_id}", unproj.particles.len());
    Ok(())
}

fn load_targets(data: &DataConfig, records: &[CameraRecord], single: bool) -> Result<Vec<Vec<AnalyticTarget>>> {
    let Some(path) = &data.targets else {
        bail!("the analytic prior needs data.targets");
    };
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let targets: Vec<TargetRecord> = serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
    let mut per_view: Vec<Vec<AnalyticTarget>> = vec![Vec::new(); records.len()];
    for t in targets {
        let Some(k) = records.iter().position(|r| r.id == t.view) else {
            bail!("{}: target for unknown camera {}", path.display(), t.view);
        };
        per_view[k].push(AnalyticTarget {
            image: load_png(&parent(path).join(&t.image))?,
            weight: t.weight,
        });
    }
    for (r, v) in records.iter().zip(&per_view) {
        ensure!(!v.is_empty(), "camera {} has no prior target", r.id);
        ensure!(!single || v.len() == 1, "the analytic prior takes one target per camera; camera {} has {} (use --prior mixture)", r.id, v.len());
    }
    Ok(per_view)
}

fn remote_url(choice: &PriorChoice, config: &TrainConfig) -> Result<String> {
    let configured = match choice {
        PriorChoice::Remote(Some(url)) => Some(url.as_str()),
        _ => Some(config.prior.url.as_str()).filter(|u| !u.is_empty()),
    };
    resolve_url(configured).context("no prior service address: pass remote=<url>, set prior.url or REFSPLAT_PRIOR_URL")
}

pub fn train(config: &Path, prior: &PriorChoice, depth_oracle: DepthOracleChoice, out: &Path) -> Result<()> {
    let run = RunFile::load(config)?;
    let (data, cfg) = (&run.data, &run.train);
    let records = read_camera_records(&data.cameras)?;
    let views = load_views(&data.cameras, parent(&data.cameras), parent(&data.cameras))?;
    let scene = load_scene(&data.scene)?;
    let timeout = Duration::from_secs(cfg.prior.timeout_secs);
    let [nw, nh] = cfg.prior.native;

    let denoiser: Box<dyn DenoisePrior> = match prior {
        PriorChoice::Analytic | PriorChoice::Mixture => {
            let targets = load_targets(data, &records, *prior == PriorChoice::Analytic)?;
            Box::new(AnalyticPrior::new(cfg.schedule.clone(), LinearCodec::new(cfg.prior.codec_factor)?, (nw, nh), targets)?)
        }
        PriorChoice::Remote(_) => {
            let url = remote_url(prior, cfg)?;
            log::info!("using the prior service at {url}");
            Box::new(RemotePrior::connect(&url, cfg.schedule.clone(), (nw, nh), timeout)?)
        }
    };
    let oracle: Option<Box<dyn DepthOracle>> = match depth_oracle {
        _ if cfg.lambda_depth == 0.0 => None,
        DepthOracleChoice::Gt => {
            let Some(path) = &data.depth_scene else {
                bail!("the ground-truth depth oracle needs data.depth_scene");
            };
            Some(Box::new(GtDepthOracle {
                scene: load_scene(path)?,
                cameras: views.iter().map(|v| v.camera.clone()).collect(),
                scale: data.depth_scale,
                offset: data.depth_offset,
            }))
        }
        DepthOracleChoice::Remote => Some(Box::new(RemoteDepth::new(&remote_url(prior, cfg)?, timeout)?)),
    };
    let reference = match &data.reference {
        Some(path) => {
            let id = match data.reference_id {
                Some(id) => id,
                None => read_camera_records(path)?.first().map(|r| r.id).context("empty reference file")?,
            };
            let (camera, image, mask) = load_record_view(path, id)?;
            let depth = Image::new(camera.width, camera.height, 1);
            Some(ReferenceView::new(camera, image, mask, depth)?)
        }
        None => None,
    };

    let inputs = TrainInputs {
        views: &views,
        reference: reference.as_ref(),
        prior: Some(denoiser.as_ref()),
        depth_oracle: oracle.as_deref(),
    };
    let output = run_training(cfg, scene, inputs)?;
    let out = ensure_dir(out)?;
    save_scene(&output.scene, &out.join("scene.ply"))?;
    let log_path = out.join("log.csv");
    let file = fs::File::create(&log_path).with_context(|| format!("creating {}", log_path.display()))?;
    write_log_csv(&output.log, std::io::BufWriter::new(file))?;
    log::info!(
        "{} iterations, {} rolled back; {} particles written to {}",
        output.log.len(),
        output.rollbacks,
        output.scene.len(),
        out.display()
    );
    Ok(())
}

pub fn render(scene: &Path, cameras: &Path, out_dir: &Path) -> Result<()> {
    let scene = load_scene(scene)?;
    let records = read_camera_records(cameras)?;
    let out = ensure_dir(out_dir)?;
    for r in &records {
        let o = render_scene(&scene, &r.camera()?, RenderChannels::ALL);
        save_png(&o.rgb, &out.join(format!("{}.png", r.id)))?;
        save_pfm(&o.depth, &out.join(format!("{}_depth.pfm", r.id)))?;
    }
    log::info!("rendered {} views into {}", records.len(), out.display());
    Ok(())
}

pub fn eval(pred: &Path, gt: &Path, masks: &Path, dilate: f64) -> Result<()> {
    let mut names: Vec<String> = fs::read_dir(pred)
        .with_context(|| format!("listing {}", pred.display()))?
        .filter_map(|e| e.ok())
        .map(|e| e.file_name().to_string_lossy().into_owned())
        .filter(|n| n.ends_with(".png"))
        .collect();
    names.sort();
    ensure!(!names.is_empty(), "no PNG images in {}", pred.display());
    let (mut preds, mut gts, mut ms) = (Vec::new(), Vec::new(), Vec::new());
    for n in &names {
        preds.push(load_png(&pred.join(n))?);
        gts.push(load_png(&gt.join(n))?);
        ms.push(load_mask(&masks.join(n))?);
    }
    let report = eval_masked(&preds, &gts, &ms, dilate)?;
    let views: Vec<_> = names
        .iter()
        .zip(&report.per_view)
        .map(|(n, m)| json!({ "name": n, "metrics": m }))
        .collect();
    println!("{}", serde_json::to_string_pretty(&json!({ "views": views, "mean": report.mean }))?);
    Ok(())
}

pub fn outpaint_mask(cameras: &Path, distance: f64, radius: f64, out: &Path) -> Result<()> {
    let records = read_camera_records(cameras)?;
    let masks = generate_outpaint_masks(&load_cameras(cameras)?, distance, radius)?;
    let out = ensure_dir(out)?;
    for (r, m) in records.iter().zip(&masks) {
        save_mask(m, &out.join(format!("{}.png", r.id)))?;
    }
    Ok(())
}

pub fn toy(seed: u64, out: &Path) -> Result<()> {
    let toy_config = ToyConfig::default();
    let toy = make_toy_scene(seed, &toy_config)?;
    let out = ensure_dir(out)?;
    for sub in ["images", "masks", "gt"] {
        ensure_dir(&out.join(sub))?;
    }
    for i in 0..toy.cameras.len() {
        save_mask(&toy.masks[i], &out.join(format!("masks/{i}.png")))?;
        save_png(&toy.ground_truth[i], &out.join(format!("gt/{i}.png")))?;
    }
    let mut train_records = Vec::new();
    let mut targets = Vec::new();
    for &i in &toy.train_views {
        save_png(&toy.images[i], &out.join(format!("images/{i}.png")))?;
        train_records.push(CameraRecord::from_camera(i, &toy.cameras[i], format!("images/{i}.png"), Some(format!("{i}.png"))));
        targets.push(TargetRecord {
            view: i,
            image: format!("gt/{i}.png"),
            weight: 1.0,
        });
    }
    let holdout: Vec<CameraRecord> = toy
        .holdout_views
        .iter()
        .map(|&i| CameraRecord::from_camera(i, &toy.cameras[i], format!("gt/{i}.png"), Some(format!("{i}.png"))))
        .collect();
    write_camera_records(&out.join("cameras.json"), &train_records)?;
    write_camera_records(&out.join("holdout.json"), &holdout)?;
    fs::write(out.join("targets.json"), serde_json::to_string_pretty(&targets)?)?;

    let r = toy.reference_view;
    save_png(&toy.reference.image, &out.join("reference.png"))?;
    save_pfm(&toy.reference.relative_depth, &out.join("reference_depth.pfm"))?;
    let reference = CameraRecord::from_camera(r, &toy.cameras[r], "reference.png", Some(format!("masks/{r}.png")));
    write_camera_records(&out.join("reference.json"), &[reference])?;

    save_scene(&toy.input, &out.join("input.ply"))?;
    save_scene(&toy.complete, &out.join("complete.ply"))?;
    let run = RunFile {
        data: DataConfig {
            scene: "init.ply".into(),
            cameras: "labeled/cameras.json".into(),
            reference: Some("reference.json".into()),
            reference_id: Some(r),
            targets: Some("targets.json".into()),
            depth_scene: Some("complete.ply".into()),
            depth_scale: toy_config.depth_scale,
            depth_offset: toy_config.depth_offset,
        },
        train: toy_train_config(300, seed),
    };
    fs::write(out.join("train.toml"), run.to_toml()?)?;
    log::info!(
        "toy dataset in {}: training views {:?}, held-out views {:?}, reference {r}",
        out.display(),
        toy.train_views,
        toy.holdout_views
    );
    Ok(())
}
