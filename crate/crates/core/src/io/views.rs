//! Cameras JSON, PNG images and masks, PFM depth maps.

use std::path::{Path, PathBuf};

use nalgebra::Matrix4;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{Image, Mask};
use crate::scene::{Camera, CameraView};

/// Rotation orthonormality tolerance for loaded cameras.
pub const LOAD_ROTATION_TOLERANCE: f64 = 1e-4;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CameraRecord {
    pub id: usize,
    pub width: usize,
    pub height: usize,
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    /// Row-major 4×4.
    pub world_to_camera: Vec<f64>,
    pub image: String,
    pub mask: Option<String>,
}

impl CameraRecord {
    pub fn from_camera(id: usize, camera: &Camera, image: impl Into<String>, mask: Option<String>) -> Self {
        let m = &camera.world_to_camera;
        Self {
            id,
            width: camera.width,
            height: camera.height,
            fx: camera.fx,
            fy: camera.fy,
            cx: camera.cx,
            cy: camera.cy,
            world_to_camera: (0..16).map(|i| m[(i / 4, i % 4)]).collect(),
            image: image.into(),
            mask,
        }
    }

    pub fn camera(&self) -> Result<Camera> {
        if self.world_to_camera.len() != 16 {
            return Err(Error::InvalidInput(format!(
                "camera {}: world_to_camera needs 16 values, got {}",
                self.id,
                self.world_to_camera.len()
            )));
        }
        let cam = Camera {
            width: self.width,
            height: self.height,
            fx: self.fx,
            fy: self.fy,
            cx: self.cx,
            cy: self.cy,
            world_to_camera: Matrix4::from_row_slice(&self.world_to_camera),
        };
        cam.validate(LOAD_ROTATION_TOLERANCE)
            .map_err(|e| Error::InvalidInput(format!("camera {}: {e}", self.id)))?;
        Ok(cam)
    }
}

pub fn read_camera_records(path: &Path) -> Result<Vec<CameraRecord>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    let records: Vec<CameraRecord> = serde_json::from_str(&text)?;
    Ok(records)
}

pub fn write_camera_records(path: &Path, records: &[CameraRecord]) -> Result<()> {
    let text = serde_json::to_string_pretty(records)?;
    std::fs::write(path, text).map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

pub fn load_cameras(path: &Path) -> Result<Vec<Camera>> {
    read_camera_records(path)?.iter().map(CameraRecord::camera).collect()
}

/// Views in file order. A null mask gives an all-zero mask.
pub fn load_views(cameras_file: &Path, image_dir: &Path, mask_dir: &Path) -> Result<Vec<CameraView>> {
    read_camera_records(cameras_file)?
        .iter()
        .map(|r| {
            let camera = r.camera()?;
            let image = load_png(&image_dir.join(&r.image))?;
            let mask = match &r.mask {
                Some(m) => load_mask(&mask_dir.join(m))?,
                None => Mask::empty(r.width, r.height),
            };
            CameraView::new(camera, image, mask).map_err(|e| Error::InvalidInput(format!("camera {}: {e}", r.id)))
        })
        .collect()
}

/// 8-bit PNG to RGB in `[0, 1]`; alpha is dropped, gray is replicated.
pub fn load_png(path: &Path) -> Result<Image> {
    let img = image::open(path)?.to_rgb8();
    let (w, h) = img.dimensions();
    Image::from_vec(w as usize, h as usize, 3, img.into_raw().into_iter().map(|v| v as f64 / 255.0).collect())
}

fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// RGB (or single-channel, written as gray) image to an 8-bit PNG.
pub fn save_png(img: &Image, path: &Path) -> Result<()> {
    let (w, h) = (img.width as u32, img.height as u32);
    match img.channels {
        3 => image::RgbImage::from_raw(w, h, img.data.iter().map(|&v| quantize(v)).collect())
            .expect("buffer matches dimensions")
            .save(path)?,
        1 => image::GrayImage::from_raw(w, h, img.data.iter().map(|&v| quantize(v)).collect())
            .expect("buffer matches dimensions")
            .save(path)?,
        c => return Err(Error::InvalidInput(format!("cannot write a {c}-channel image as PNG"))),
    }
    Ok(())
}

/// Grayscale mask: values ≥ 128 are masked.
pub fn load_mask(path: &Path) -> Result<Mask> {
    let img = image::open(path)?.to_luma8();
    let (w, h) = img.dimensions();
    Ok(Mask {
        width: w as usize,
        height: h as usize,
        data: img.into_raw().into_iter().map(|v| v >= 128).collect(),
    })
}

pub fn save_mask(mask: &Mask, path: &Path) -> Result<()> {
    image::GrayImage::from_raw(
        mask.width as u32,
        mask.height as u32,
        mask.data.iter().map(|&m| if m { 255 } else { 0 }).collect(),
    )
    .expect("buffer matches dimensions")
    .save(path)?;
    Ok(())
}

/// Single-channel little-endian PFM (`Pf`, negative scale), rows stored
/// bottom to top.
pub fn pfm_bytes(depth: &Image) -> Result<Vec<u8>> {
    if depth.channels != 1 {
        return Err(Error::InvalidInput(format!("PFM depth needs one channel, got {}", depth.channels)));
    }
    let mut out = format!("Pf\n{} {}\n-1.0\n", depth.width, depth.height).into_bytes();
    for y in (0..depth.height).rev() {
        for x in 0..depth.width {
            out.extend_from_slice(&(depth.get(x, y, 0) as f32).to_le_bytes());
        }
    }
    Ok(out)
}

pub fn save_pfm(depth: &Image, path: &Path) -> Result<()> {
    std::fs::write(path, pfm_bytes(depth)?).map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

pub fn parse_pfm(bytes: &[u8], path: &Path) -> Result<Image> {
    let err = |line, message: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        message,
    };
    let mut pos = 0;
    let mut lines = Vec::new();
    while lines.len() < 3 {
        let end = bytes[pos..]
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| err(lines.len() + 1, "truncated header".into()))?;
        lines.push(String::from_utf8_lossy(&bytes[pos..pos + end]).trim().to_string());
        pos += end + 1;
    }
    if lines[0] != "Pf" {
        return Err(err(1, format!("expected single-channel 'Pf', found {:?}", lines[0])));
    }
    let dims: Vec<usize> = lines[1].split_whitespace().map(|t| t.parse().map_err(|_| err(2, format!("bad size {t:?}")))).collect::<Result<_>>()?;
    let [w, h] = dims[..] else {
        return Err(err(2, format!("expected 'width height', found {:?}", lines[1])));
    };
    let scale: f64 = lines[2].parse().map_err(|_| err(3, format!("bad scale {:?}", lines[2])))?;
    if scale == 0.0 {
        return Err(err(3, "scale must be nonzero".into()));
    }
    let little = scale < 0.0;
    let body = &bytes[pos..];
    if body.len() != w * h * 4 {
        return Err(err(3, format!("expected {} data bytes, found {}", w * h * 4, body.len())));
    }
    let mut img = Image::new(w, h, 1);
    for (i, c) in body.chunks_exact(4).enumerate() {
        let raw = [c[0], c[1], c[2], c[3]];
        let v = if little { f32::from_le_bytes(raw) } else { f32::from_be_bytes(raw) };
        let (x, row) = (i % w, i / w);
        img.set(x, h - 1 - row, 0, v as f64);
    }
    Ok(img)
}

pub fn load_pfm(path: &Path) -> Result<Image> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    parse_pfm(&bytes, path)
}

/// `dir/name`, creating `dir` if needed.
pub fn ensure_dir(dir: &Path) -> Result<PathBuf> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(format!("creating {}", dir.display()), e))?;
    Ok(dir.to_path_buf())
}
