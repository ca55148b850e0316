//! Image metrics restricted to the (dilated) bounding box of each mask.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::image::{Image, Mask, PixelRect};
use crate::train::ssim;

/// PSNR reported for identical images.
pub const PSNR_CAP: f64 = 100.0;
pub const SSIM_WINDOW: usize = 11;

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct ViewMetrics {
    pub l1: f64,
    pub psnr: f64,
    pub ssim: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EvalReport {
    /// `None` for views with an empty mask.
    pub per_view: Vec<Option<ViewMetrics>>,
    /// Mean over the views with metrics.
    pub mean: Option<ViewMetrics>,
}

/// Mask bounding box grown by `dilation` of its size on every side.
pub fn eval_region(mask: &Mask, dilation: f64) -> Option<PixelRect> {
    mask.bounding_box().map(|b| b.dilate(dilation, mask.width, mask.height))
}

pub fn psnr(mse: f64) -> f64 {
    if mse <= 0.0 {
        PSNR_CAP
    } else {
        (10.0 * (1.0 / mse).log10()).min(PSNR_CAP)
    }
}

pub fn view_metrics(pred: &Image, gt: &Image, region: PixelRect) -> Result<ViewMetrics> {
    pred.ensure_shape(gt)?;
    let (a, b) = (pred.crop(region)?, gt.crop(region)?);
    let n = a.data.len() as f64;
    let (mut l1, mut se) = (0.0, 0.0);
    for (x, y) in a.data.iter().zip(&b.data) {
        l1 += (x - y).abs();
        se += (x - y) * (x - y);
    }
    Ok(ViewMetrics {
        l1: l1 / n,
        psnr: psnr(se / n),
        ssim: ssim(&a, &b, SSIM_WINDOW)?,
    })
}

pub fn eval_masked(preds: &[Image], gts: &[Image], masks: &[Mask], dilation: f64) -> Result<EvalReport> {
    if preds.len() != gts.len() || preds.len() != masks.len() {
        return Err(Error::shape(
            format!("{} predictions, ground truths and masks", preds.len()),
            format!("{} and {}", gts.len(), masks.len()),
        ));
    }
    if !(dilation >= 0.0) {
        return Err(Error::InvalidInput(format!("dilation must be nonnegative, got {dilation}")));
    }
    let mut per_view = Vec::with_capacity(preds.len());
    for ((p, g), m) in preds.iter().zip(gts).zip(masks) {
        if (m.width, m.height) != (p.width, p.height) {
            return Err(Error::shape(format!("{}x{} mask", p.width, p.height), format!("{}x{}", m.width, m.height)));
        }
        per_view.push(match eval_region(m, dilation) {
            Some(r) => Some(view_metrics(p, g, r)?),
            None => None,
        });
    }
    let got: Vec<&ViewMetrics> = per_view.iter().flatten().collect();
    let mean = (!got.is_empty()).then(|| {
        let k = got.len() as f64;
        ViewMetrics {
            l1: got.iter().map(|m| m.l1).sum::<f64>() / k,
            psnr: got.iter().map(|m| m.psnr).sum::<f64>() / k,
            ssim: got.iter().map(|m| m.ssim).sum::<f64>() / k,
        }
    });
    Ok(EvalReport { per_view, mean })
}
