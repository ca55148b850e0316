//! File formats.

mod ply;
mod views;

pub use ply::{load_scene, property_names, save_scene, scene_from_ply, scene_to_ply};
pub use views::{
    ensure_dir, load_cameras, load_mask, load_pfm, load_png, load_views, parse_pfm, pfm_bytes, read_camera_records, save_mask,
    save_pfm, save_png, write_camera_records, CameraRecord, LOAD_ROTATION_TOLERANCE,
};
