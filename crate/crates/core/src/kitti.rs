//! KITTI-Road on-disk formats and output image encoders.
//!
//! Velodyne scans are packed little-endian f32 quadruples (x, y, z,
//! intensity) with no header. Calibration files are plain text `KEY: v1 v2
//! ...` lines, row-major. Ground-truth PNGs encode validity in the red
//! channel and road membership in the blue channel (magenta = road).

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use image::{DynamicImage, GrayImage, Rgb, RgbImage};

use crate::error::{Error, Result};

/// One LiDAR return in the sensor frame, coordinates in meters.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LidarPoint {
    pub x: f64,
    pub y: f64,
    pub z: f64,
    pub intensity: f64,
}

/// Ordered sequence of LiDAR returns; order is preserved exactly as read.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct PointCloud {
    pub points: Vec<LidarPoint>,
}

impl PointCloud {
    pub fn new(points: Vec<LidarPoint>) -> Self {
        Self { points }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

/// Decode a Velodyne binary: consecutive little-endian IEEE-754 f32
/// quadruples, widened to f64.
pub fn parse_point_cloud(bytes: &[u8]) -> Result<PointCloud> {
    if !bytes.len().is_multiple_of(16) {
        return Err(Error::MalformedFile(format!(
            "velodyne binary length {} is not a multiple of 16",
            bytes.len()
        )));
    }
    let mut points = Vec::with_capacity(bytes.len() / 16);
    for (index, chunk) in bytes.chunks_exact(16).enumerate() {
        let mut fields = [0.0f64; 4];
        for (f, word) in fields.iter_mut().zip(chunk.chunks_exact(4)) {
            *f = f64::from(f32::from_le_bytes(word.try_into().unwrap()));
        }
        if fields.iter().any(|v| !v.is_finite()) {
            return Err(Error::MalformedFile(format!(
                "velodyne point {index} contains a non-finite value"
            )));
        }
        points.push(LidarPoint {
            x: fields[0],
            y: fields[1],
            z: fields[2],
            intensity: fields[3],
        });
    }
    Ok(PointCloud::new(points))
}

/// Inverse of [`parse_point_cloud`]; values are narrowed to f32.
pub fn encode_point_cloud(cloud: &PointCloud) -> Vec<u8> {
    let mut bytes = Vec::with_capacity(cloud.len() * 16);
    for p in &cloud.points {
        for v in [p.x, p.y, p.z, p.intensity] {
            bytes.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    bytes
}

/// Rigid-plus-projective calibration between the LiDAR and the left color
/// camera, as stored in KITTI calibration files.
#[derive(Clone, Debug, PartialEq)]
pub struct Calibration {
    /// 3x4 camera projection matrix (`P2`).
    pub p_cam: [[f64; 4]; 3],
    /// 3x3 rectification rotation (`R0_rect`).
    pub r_rect: [[f64; 3]; 3],
    /// 3x4 rigid transform LiDAR -> camera (`Tr_velo_to_cam`).
    pub tr_velo_to_cam: [[f64; 4]; 3],
}

const ORTHONORMALITY_TOL: f64 = 1e-6;

fn check_orthonormal(name: &str, r: &[[f64; 3]; 3]) -> Result<()> {
    for i in 0..3 {
        for j in 0..3 {
            let dot: f64 = (0..3).map(|k| r[k][i] * r[k][j]).sum();
            let expected = if i == j { 1.0 } else { 0.0 };
            if (dot - expected).abs() > ORTHONORMALITY_TOL {
                return Err(Error::Parse(format!(
                    "{name} is not orthonormal: column dot ({i},{j}) = {dot}"
                )));
            }
        }
    }
    Ok(())
}

fn parse_floats(key: &str, rest: &str, expected: usize) -> Result<Vec<f64>> {
    let values: Vec<f64> = rest
        .split_whitespace()
        .map(|tok| {
            tok.parse::<f64>()
                .map_err(|_| Error::Parse(format!("{key}: cannot parse '{tok}' as a float")))
        })
        .collect::<Result<_>>()?;
    if values.len() != expected {
        return Err(Error::Parse(format!(
            "{key}: expected {expected} floats, found {}",
            values.len()
        )));
    }
    Ok(values)
}

/// Parse a KITTI calibration file. Requires `P2`, `R0_rect` and
/// `Tr_velo_to_cam`; other keys are ignored.
pub fn load_calibration(text: &str) -> Result<Calibration> {
    let mut entries: BTreeMap<&str, &str> = BTreeMap::new();
    for line in text.lines() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        if let Some((key, rest)) = line.split_once(':') {
            entries.insert(key.trim(), rest);
        }
    }

    let get = |key: &str, n: usize| -> Result<Vec<f64>> {
        let rest = entries
            .get(key)
            .ok_or_else(|| Error::Parse(format!("calibration is missing required key {key}")))?;
        parse_floats(key, rest, n)
    };

    let p2 = get("P2", 12)?;
    let r0 = get("R0_rect", 9)?;
    let tr = get("Tr_velo_to_cam", 12)?;

    let mut calib = Calibration {
        p_cam: [[0.0; 4]; 3],
        r_rect: [[0.0; 3]; 3],
        tr_velo_to_cam: [[0.0; 4]; 3],
    };
    for row in 0..3 {
        for col in 0..4 {
            calib.p_cam[row][col] = p2[row * 4 + col];
            calib.tr_velo_to_cam[row][col] = tr[row * 4 + col];
        }
        for col in 0..3 {
            calib.r_rect[row][col] = r0[row * 3 + col];
        }
    }

    check_orthonormal("R0_rect", &calib.r_rect)?;
    let rot = [
        [
            calib.tr_velo_to_cam[0][0],
            calib.tr_velo_to_cam[0][1],
            calib.tr_velo_to_cam[0][2],
        ],
        [
            calib.tr_velo_to_cam[1][0],
            calib.tr_velo_to_cam[1][1],
            calib.tr_velo_to_cam[1][2],
        ],
        [
            calib.tr_velo_to_cam[2][0],
            calib.tr_velo_to_cam[2][1],
            calib.tr_velo_to_cam[2][2],
        ],
    ];
    check_orthonormal("Tr_velo_to_cam rotation", &rot)?;
    Ok(calib)
}

impl Calibration {
    /// Render back to KITTI calibration text (used by the synthetic writer).
    pub fn to_text(&self) -> String {
        let join = |values: &[f64]| {
            values
                .iter()
                .map(|v| format!("{v:e}"))
                .collect::<Vec<_>>()
                .join(" ")
        };
        let p2: Vec<f64> = self.p_cam.iter().flatten().copied().collect();
        let r0: Vec<f64> = self.r_rect.iter().flatten().copied().collect();
        let tr: Vec<f64> = self.tr_velo_to_cam.iter().flatten().copied().collect();
        format!(
            "P2: {}\nR0_rect: {}\nTr_velo_to_cam: {}\n",
            join(&p2),
            join(&r0),
            join(&tr)
        )
    }
}

/// KITTI-Road scene categories, taken from the filename prefix.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Category {
    /// Urban Unmarked.
    UU,
    /// Urban Marked.
    UM,
    /// Urban Multiple Marked.
    UMM,
}

impl Category {
    pub fn from_prefix(prefix: &str) -> Option<Self> {
        match prefix {
            "uu" => Some(Self::UU),
            "um" => Some(Self::UM),
            "umm" => Some(Self::UMM),
            _ => None,
        }
    }

    pub fn prefix(&self) -> &'static str {
        match self {
            Self::UU => "uu",
            Self::UM => "um",
            Self::UMM => "umm",
        }
    }

    /// Category of a scene id such as `um_000042`.
    pub fn from_scene_id(id: &str) -> Option<Self> {
        Self::from_prefix(id.split('_').next()?)
    }
}

impl std::fmt::Display for Category {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::UU => "UU",
            Self::UM => "UM",
            Self::UMM => "UMM",
        })
    }
}

/// Paths of one dataset scene.
#[derive(Clone, Debug)]
pub struct SceneRef {
    pub id: String,
    pub category: Category,
    pub camera: PathBuf,
    pub velodyne: PathBuf,
    pub calib: PathBuf,
    pub gt: Option<PathBuf>,
}

/// Result of scanning a dataset root: scenes sorted by id, plus a report of
/// camera images that were skipped for missing companion files.
#[derive(Debug, Default)]
pub struct Discovery {
    pub scenes: Vec<SceneRef>,
    pub skipped: Vec<(String, String)>,
}

/// Scan a KITTI-Road layout (`image_2/`, `velodyne/`, `calib/`, optional
/// `gt_image_2/`). Output order is sorted by id, independent of filesystem
/// enumeration order.
pub fn discover_dataset(root: &Path) -> Result<Discovery> {
    let image_dir = root.join("image_2");
    let velodyne_dir = root.join("velodyne");
    let calib_dir = root.join("calib");
    let gt_dir = root.join("gt_image_2");
    for dir in [&image_dir, &velodyne_dir, &calib_dir] {
        if !dir.is_dir() {
            return Err(Error::DatasetLayout(format!(
                "required directory {} is missing",
                dir.display()
            )));
        }
    }

    let mut ids: Vec<String> = Vec::new();
    for entry in fs::read_dir(&image_dir)? {
        let path = entry?.path();
        if path.extension().and_then(|e| e.to_str()) == Some("png") {
            if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
                ids.push(stem.to_string());
            }
        }
    }
    ids.sort();

    let mut discovery = Discovery::default();
    for id in ids {
        let Some(category) = Category::from_scene_id(&id) else {
            discovery
                .skipped
                .push((id.clone(), "unknown category prefix".into()));
            continue;
        };
        let velodyne = velodyne_dir.join(format!("{id}.bin"));
        if !velodyne.is_file() {
            discovery
                .skipped
                .push((id.clone(), "missing velodyne binary".into()));
            continue;
        }
        let calib = calib_dir.join(format!("{id}.txt"));
        if !calib.is_file() {
            discovery
                .skipped
                .push((id.clone(), "missing calibration file".into()));
            continue;
        }
        // uu_000007 -> gt_image_2/uu_road_000007.png
        let gt = id.split_once('_').and_then(|(prefix, num)| {
            let path = gt_dir.join(format!("{prefix}_road_{num}.png"));
            path.is_file().then_some(path)
        });
        discovery.scenes.push(SceneRef {
            camera: image_dir.join(format!("{id}.png")),
            id,
            category,
            velodyne,
            calib,
            gt,
        });
    }
    Ok(discovery)
}

/// Road / validity masks of one scene. `road` implies `valid` everywhere.
#[derive(Clone, Debug, PartialEq)]
pub struct GtMaskPair {
    height: usize,
    width: usize,
    road: Vec<bool>,
    valid: Vec<bool>,
}

impl GtMaskPair {
    pub fn new(height: usize, width: usize, road: Vec<bool>, valid: Vec<bool>) -> Result<Self> {
        if road.len() != height * width || valid.len() != height * width {
            return Err(Error::ShapeMismatch(format!(
                "mask buffers do not match {height}x{width}"
            )));
        }
        if road.iter().zip(&valid).any(|(&r, &v)| r && !v) {
            return Err(Error::Contract(
                "ground-truth invariant violated: road pixel marked invalid".into(),
            ));
        }
        Ok(Self {
            height,
            width,
            road,
            valid,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn road(&self) -> &[bool] {
        &self.road
    }

    pub fn valid(&self) -> &[bool] {
        &self.valid
    }

    pub fn road_at(&self, row: usize, col: usize) -> bool {
        self.road[row * self.width + col]
    }

    pub fn valid_at(&self, row: usize, col: usize) -> bool {
        self.valid[row * self.width + col]
    }

    /// Mirror both masks along the width axis.
    pub fn fliplr(&self) -> Self {
        let mut road = vec![false; self.road.len()];
        let mut valid = vec![false; self.valid.len()];
        for r in 0..self.height {
            for c in 0..self.width {
                let src = r * self.width + (self.width - 1 - c);
                road[r * self.width + c] = self.road[src];
                valid[r * self.width + c] = self.valid[src];
            }
        }
        Self {
            height: self.height,
            width: self.width,
            road,
            valid,
        }
    }
}

/// Decode a ground-truth image: valid where red == 255, road where
/// additionally blue == 255.
pub fn decode_gt_perspective(image: &DynamicImage) -> Result<GtMaskPair> {
    let rgb = match image {
        DynamicImage::ImageRgb8(rgb) => rgb,
        other => {
            return Err(Error::MalformedFile(format!(
                "ground-truth image must be 8-bit RGB, got {:?}",
                other.color()
            )))
        }
    };
    let (width, height) = (rgb.width() as usize, rgb.height() as usize);
    let mut road = vec![false; width * height];
    let mut valid = vec![false; width * height];
    for (i, pixel) in rgb.pixels().enumerate() {
        let [r, _, b] = pixel.0;
        valid[i] = r == 255;
        road[i] = r == 255 && b == 255;
    }
    GtMaskPair::new(height, width, road, valid)
}

/// Inverse of [`decode_gt_perspective`]: road is magenta (255,0,255), valid
/// non-road red (255,0,0), invalid black.
pub fn encode_gt_png(gt: &GtMaskPair) -> RgbImage {
    let mut img = RgbImage::new(gt.width() as u32, gt.height() as u32);
    for (i, pixel) in img.pixels_mut().enumerate() {
        *pixel = if gt.road[i] {
            Rgb([255, 0, 255])
        } else if gt.valid[i] {
            Rgb([255, 0, 0])
        } else {
            Rgb([0, 0, 0])
        };
    }
    img
}

/// Per-pixel road confidence in [0, 1].
#[derive(Clone, Debug, PartialEq)]
pub struct ConfidenceMap {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl ConfidenceMap {
    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::ShapeMismatch(format!(
                "confidence buffer does not match {height}x{width}"
            )));
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }
}

/// Round half away from zero, the quantization used for all 8-bit outputs.
pub fn quantize_unit(v: f64) -> u8 {
    (255.0 * v).round().clamp(0.0, 255.0) as u8
}

/// Encode a confidence map as an 8-bit grayscale image, pixel =
/// round(255 * v) with half away from zero.
pub fn encode_confidence_png(map: &ConfidenceMap) -> Result<GrayImage> {
    if let Some(v) = map.data.iter().find(|v| !(0.0..=1.0).contains(*v)) {
        return Err(Error::Range(format!(
            "confidence value {v} outside [0, 1]"
        )));
    }
    let mut img = GrayImage::new(map.width as u32, map.height as u32);
    for (pixel, &v) in img.pixels_mut().zip(&map.data) {
        pixel.0 = [quantize_unit(v)];
    }
    Ok(img)
}

/// Read a confidence map back from an 8-bit grayscale image.
pub fn decode_confidence_png(image: &DynamicImage) -> Result<ConfidenceMap> {
    let gray = match image {
        DynamicImage::ImageLuma8(g) => g,
        other => {
            return Err(Error::MalformedFile(format!(
                "confidence image must be 8-bit grayscale, got {:?}",
                other.color()
            )))
        }
    };
    let data = gray.pixels().map(|p| f64::from(p.0[0]) / 255.0).collect();
    ConfidenceMap::new(gray.height() as usize, gray.width() as usize, data)
}

/// Render an evaluation overlay: within the valid mask TP pixels are green,
/// FP red, FN blue and TN black; pixels outside the valid mask are gray.
pub fn encode_overlay_png(
    conf: &ConfidenceMap,
    gt: &GtMaskPair,
    threshold: f64,
) -> Result<RgbImage> {
    if conf.height != gt.height() || conf.width != gt.width() {
        return Err(Error::ShapeMismatch(format!(
            "overlay: confidence {}x{} vs ground truth {}x{}",
            conf.height,
            conf.width,
            gt.height(),
            gt.width()
        )));
    }
    let mut img = RgbImage::new(conf.width as u32, conf.height as u32);
    for (i, pixel) in img.pixels_mut().enumerate() {
        *pixel = if !gt.valid()[i] {
            Rgb([128, 128, 128])
        } else {
            let positive = conf.data[i] >= threshold;
            match (positive, gt.road()[i]) {
                (true, true) => Rgb([0, 255, 0]),
                (true, false) => Rgb([255, 0, 0]),
                (false, true) => Rgb([0, 0, 255]),
                (false, false) => Rgb([0, 0, 0]),
            }
        };
    }
    Ok(img)
}
