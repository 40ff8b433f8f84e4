//! Loading and validation of every external asset, and all file outputs.
//!
//! Formats (all documented in the README):
//! - body-model archive: a directory with `manifest.txt` naming flat
//!   little-endian binary arrays;
//! - motion: one whitespace/comma-separated row of 72 reals per frame;
//! - cameras: one 18-value record per line;
//! - config: flat `key = value` text, unknown keys rejected;
//! - frames: zero-padded 16-bit PNGs; a raw f64 image container
//!   (`.avimg`) covers lossless round-trips.

mod archive;
mod camera_files;
mod config;
mod images;
mod motion;

pub use archive::{load_body_model_archive, write_body_model_archive};
pub use camera_files::{load_cameras, save_cameras};
pub use config::{config_schema, ConfigKeyDoc, TrainConfig};
pub use images::{
    list_image_files, load_image, load_image_with_mask, load_mask, load_image_raw,
    save_image_png16, save_image_png8, save_image_raw, save_mask_png8, write_frame_sequence,
};
pub use motion::{
    load_motion_sequence, load_pose_row, load_shape_row, save_motion_sequence, save_row,
    MotionSequence,
};

use crate::error::{Error, Result};
use sha2::{Digest, Sha256};
use std::path::Path;

/// Hex SHA-256 of a file, for run manifests.
pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut hasher = Sha256::new();
    hasher.update(&bytes);
    Ok(hex_string(&hasher.finalize()))
}

fn hex_string(bytes: &[u8]) -> String {
    let mut s = String::with_capacity(bytes.len() * 2);
    for b in bytes {
        s.push_str(&format!("{b:02x}"));
    }
    s
}
