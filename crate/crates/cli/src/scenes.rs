//! Load preprocessed scene directories back into in-memory scenes.
//!
//! `preprocess` writes one directory per scene: `lidar_bev.png`,
//! `camera_bev.png`, `valid.png` and (when labels exist) `gt_bev.png`.

use std::path::Path;

use bevroad_core::bev::{BevImage, LIDAR_CHANNEL_ROLES};
use bevroad_core::kitti::{decode_gt_perspective, Category, GtMaskPair};
use bevroad_core::synth::Scene;

use crate::CliError;

pub const LIDAR_FILE: &str = "lidar_bev.png";
pub const CAMERA_FILE: &str = "camera_bev.png";
pub const GT_FILE: &str = "gt_bev.png";
pub const VALID_FILE: &str = "valid.png";

fn read_rgb(path: &Path) -> Result<image::RgbImage, CliError> {
    let img = image::open(path)
        .map_err(|e| CliError::data(format!("cannot read {}: {e}", path.display())))?;
    match img {
        image::DynamicImage::ImageRgb8(rgb) => Ok(rgb),
        other => Err(CliError::data(format!(
            "{}: expected 8-bit RGB, got {:?}",
            path.display(),
            other.color()
        ))),
    }
}

/// Load every scene directory under `dir`, sorted by id.
///
/// Scenes without ground truth are skipped when `require_gt` is set
/// (training and evaluation need labels); otherwise they carry an
/// all-background placeholder that prediction never reads.
pub fn load_preprocessed(dir: &Path, require_gt: bool) -> Result<Vec<Scene>, CliError> {
    if !dir.is_dir() {
        return Err(CliError::data(format!(
            "{} is not a directory",
            dir.display()
        )));
    }
    let mut ids: Vec<String> = Vec::new();
    for entry in std::fs::read_dir(dir)
        .map_err(|e| CliError::data(format!("cannot list {}: {e}", dir.display())))?
    {
        let entry = entry.map_err(|e| CliError::data(e.to_string()))?;
        let path = entry.path();
        if path.is_dir() && path.join(LIDAR_FILE).is_file() && path.join(CAMERA_FILE).is_file() {
            if let Some(name) = path.file_name().and_then(|n| n.to_str()) {
                ids.push(name.to_string());
            }
        }
    }
    ids.sort();

    let mut scenes = Vec::new();
    for id in ids {
        let scene_dir = dir.join(&id);
        let Some(category) = Category::from_scene_id(&id) else {
            eprintln!("skipping '{id}': unknown category prefix");
            continue;
        };
        let lidar = read_rgb(&scene_dir.join(LIDAR_FILE))?;
        let camera = read_rgb(&scene_dir.join(CAMERA_FILE))?;
        let gt_path = scene_dir.join(GT_FILE);
        let gt = if gt_path.is_file() {
            let img = image::open(&gt_path)
                .map_err(|e| CliError::data(format!("cannot read {}: {e}", gt_path.display())))?;
            decode_gt_perspective(&img).map_err(|e| CliError::data(e.to_string()))?
        } else if require_gt {
            eprintln!("skipping '{id}': no ground truth");
            continue;
        } else {
            let (h, w) = (lidar.height() as usize, lidar.width() as usize);
            GtMaskPair::new(h, w, vec![false; h * w], vec![true; h * w])
                .map_err(|e| CliError::data(e.to_string()))?
        };
        scenes.push(Scene {
            id,
            category,
            camera_bev: BevImage::from_rgb_image(&camera, ["red", "green", "blue"]),
            lidar_bev: BevImage::from_rgb_image(&lidar, LIDAR_CHANNEL_ROLES),
            gt,
            cloud: None,
        });
    }
    if scenes.is_empty() {
        return Err(CliError::data(format!(
            "no usable scenes under {}",
            dir.display()
        )));
    }
    Ok(scenes)
}
