//! Deterministic synthetic scenes: a road corridor (straight or
//! constant-curvature arc) on flat ground, LiDAR returns with road/off-road
//! intensity separation, a painted camera raster and an exact analytic
//! ground-truth mask. The whole pipeline can run on these without the real
//! dataset; the on-disk writer also renders perspective views through a
//! wide-FOV synthetic calibration so preprocessing is format-identical.

use image::{Rgb, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::bev::{rasterize, BevImage, RasterConfig};
use crate::error::{Error, Result};
use crate::kitti::{Calibration, Category, GtMaskPair, LidarPoint, PointCloud};

/// Ground height in the LiDAR frame, inside the raster's height truncation
/// band and matching the default flat-plane warp height.
pub const GROUND_Z: f64 = -1.73;

/// Corridor centerline shape.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RoadShape {
    Straight,
    Arc,
}

/// Generation knobs of one synthetic scene.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SynthParams {
    pub road_shape: RoadShape,
    /// Corridor width, meters; must lie in (2, 12).
    pub road_width: f64,
    /// Centerline curvature for arcs, 1/meters (signed).
    pub curvature: f64,
    /// Ground sampling density, points per square meter.
    pub point_density: f64,
    pub road_intensity_mean: f64,
    pub offroad_intensity_mean: f64,
    /// Standard deviation of the ground height noise, meters.
    pub noise_std: f64,
    pub seed: u64,
}

impl Default for SynthParams {
    fn default() -> Self {
        Self {
            road_shape: RoadShape::Straight,
            road_width: 8.0,
            curvature: 0.008,
            point_density: 60.0,
            road_intensity_mean: 0.75,
            offroad_intensity_mean: 0.25,
            noise_std: 0.03,
            seed: 7,
        }
    }
}

impl SynthParams {
    pub fn validate(&self) -> Result<()> {
        if self.road_width.is_nan() || self.road_width <= 2.0 || self.road_width >= 12.0 {
            return Err(Error::InvalidParameter(format!(
                "road width {} must lie in (2, 12) meters",
                self.road_width
            )));
        }
        if self.point_density.is_nan() || self.point_density <= 0.0 {
            return Err(Error::InvalidParameter(
                "point density must be positive".into(),
            ));
        }
        if self.road_shape == RoadShape::Arc && self.curvature == 0.0 {
            return Err(Error::InvalidParameter(
                "arc corridors need a non-zero curvature".into(),
            ));
        }
        for (name, v) in [
            ("road intensity", self.road_intensity_mean),
            ("off-road intensity", self.offroad_intensity_mean),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::InvalidParameter(format!(
                    "{name} mean {v} must lie in [0, 1]"
                )));
            }
        }
        if self.noise_std < 0.0 {
            return Err(Error::InvalidParameter(
                "height noise must be non-negative".into(),
            ));
        }
        Ok(())
    }

    /// The analytic corridor predicate at a metric ground point.
    pub fn on_road(&self, x: f64, y: f64) -> bool {
        match self.road_shape {
            RoadShape::Straight => y.abs() < self.road_width / 2.0,
            RoadShape::Arc => {
                let radius = 1.0 / self.curvature;
                let center_y = radius;
                let dist = (x * x + (y - center_y) * (y - center_y)).sqrt();
                (dist - radius.abs()).abs() < self.road_width / 2.0
            }
        }
    }
}

/// One scene as the models consume it: BEV rasters plus ground truth. The
/// raw point cloud is kept when the scene was generated rather than loaded
/// from preprocessed files.
#[derive(Clone, Debug)]
pub struct Scene {
    pub id: String,
    pub category: Category,
    pub camera_bev: BevImage,
    pub lidar_bev: BevImage,
    pub gt: GtMaskPair,
    pub cloud: Option<PointCloud>,
}

impl Scene {
    /// Mirror the whole scene along the width axis (the lateral y axis).
    pub fn fliplr(&self) -> Self {
        Self {
            id: self.id.clone(),
            category: self.category,
            camera_bev: self.camera_bev.fliplr(),
            lidar_bev: self.lidar_bev.fliplr(),
            gt: self.gt.fliplr(),
            cloud: self.cloud.as_ref().map(|cloud| {
                PointCloud::new(
                    cloud
                        .points
                        .iter()
                        .map(|p| LidarPoint { y: -p.y, ..*p })
                        .collect(),
                )
            }),
        }
    }
}

const CAMERA_ROLES: [&str; 3] = ["red", "green", "blue"];
const ROAD_COLOR: [i32; 3] = [128, 128, 128];
const OFFROAD_COLOR: [i32; 3] = [40, 160, 40];
const COLOR_JITTER: i32 = 12;

fn jittered(base: [i32; 3], rng: &mut ChaCha8Rng) -> [u8; 3] {
    let mut out = [0u8; 3];
    for (o, b) in out.iter_mut().zip(base) {
        *o = (b + rng.random_range(-COLOR_JITTER..=COLOR_JITTER)).clamp(0, 255) as u8;
    }
    out
}

/// Sample the ground point cloud of a scene. Coordinates and intensities
/// are rounded through f32 so in-memory scenes match the on-disk binaries.
pub fn sample_cloud(params: &SynthParams, cfg: &RasterConfig, rng: &mut ChaCha8Rng) -> PointCloud {
    let area = (cfg.x_max - cfg.x_min) * (cfg.y_max - cfg.y_min);
    let n = (params.point_density * area).round() as usize;
    let z_noise = Normal::new(0.0, params.noise_std.max(f64::MIN_POSITIVE)).unwrap();
    let intensity_noise = 0.05;
    let mut points = Vec::with_capacity(n);
    for _ in 0..n {
        let x = rng.random_range(cfg.x_min..cfg.x_max);
        let y = rng.random_range(cfg.y_min..cfg.y_max);
        let z = if params.noise_std > 0.0 {
            GROUND_Z + z_noise.sample(rng)
        } else {
            GROUND_Z
        };
        let mean = if params.on_road(x, y) {
            params.road_intensity_mean
        } else {
            params.offroad_intensity_mean
        };
        let intensity = (Normal::new(mean, intensity_noise).unwrap().sample(rng)).clamp(0.0, 1.0);
        points.push(LidarPoint {
            x: f64::from(x as f32),
            y: f64::from(y as f32),
            z: f64::from(z as f32),
            intensity: f64::from(intensity as f32),
        });
    }
    PointCloud::new(points)
}

/// Generate one scene: sampled LiDAR raster, painted camera raster, exact
/// analytic ground truth at cell centers (all cells valid). Pure function
/// of parameters and raster config.
pub fn generate_scene(
    params: &SynthParams,
    cfg: &RasterConfig,
    id: &str,
    category: Category,
) -> Result<Scene> {
    params.validate()?;
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let cloud = sample_cloud(params, cfg, &mut rng);
    let lidar_bev = rasterize(&cloud, cfg)?;

    let h = cfg.grid_height();
    let w = cfg.grid_width();
    let mut camera = vec![0u8; h * w * 3];
    let mut road = vec![false; h * w];
    for row in 0..h {
        for col in 0..w {
            let (x, y) = cfg.cell_center(row, col);
            let on_road = params.on_road(x, y);
            road[row * w + col] = on_road;
            let base = if on_road { ROAD_COLOR } else { OFFROAD_COLOR };
            let px = jittered(base, &mut rng);
            camera[(row * w + col) * 3..(row * w + col) * 3 + 3].copy_from_slice(&px);
        }
    }
    let camera_bev = BevImage::new(
        h,
        w,
        3,
        camera,
        CAMERA_ROLES.iter().map(|s| s.to_string()).collect(),
    )?;
    let gt = GtMaskPair::new(h, w, road, vec![true; h * w])?;
    Ok(Scene {
        id: id.to_string(),
        category,
        camera_bev,
        lidar_bev,
        gt,
        cloud: Some(cloud),
    })
}

/// Parameters, id and category of one planned scene.
#[derive(Clone, Debug)]
pub struct ScenePlan {
    pub params: SynthParams,
    pub id: String,
    pub category: Category,
}

/// The per-scene plan of a dataset: seeds `base.seed + i`, alternating
/// straight/arc corridors, cycling categories.
pub fn dataset_plan(n: usize, base: &SynthParams) -> Result<Vec<ScenePlan>> {
    if n == 0 {
        return Err(Error::InvalidParameter(
            "dataset size must be at least 1".into(),
        ));
    }
    let categories = [Category::UM, Category::UMM, Category::UU];
    Ok((0..n)
        .map(|i| {
            let category = categories[i % 3];
            ScenePlan {
                params: SynthParams {
                    seed: base.seed + i as u64,
                    road_shape: if i % 2 == 0 {
                        RoadShape::Straight
                    } else {
                        RoadShape::Arc
                    },
                    ..*base
                },
                id: format!("{}_{i:06}", category.prefix()),
                category,
            }
        })
        .collect())
}

/// Generate `n` scenes following [`dataset_plan`].
pub fn generate_dataset(n: usize, base: &SynthParams, cfg: &RasterConfig) -> Result<Vec<Scene>> {
    dataset_plan(n, base)?
        .iter()
        .map(|plan| generate_scene(&plan.params, cfg, &plan.id, plan.category))
        .collect()
}

// ---------------------------------------------------------------------------
// perspective rendering for the on-disk writer
// ---------------------------------------------------------------------------

/// Synthetic perspective image size.
pub const SYNTH_IMAGE_W: usize = 800;
pub const SYNTH_IMAGE_H: usize = 900;
const SYNTH_FU: f64 = 150.0;
const SYNTH_FV: f64 = 3000.0;
const SYNTH_CX: f64 = (SYNTH_IMAGE_W as f64 - 1.0) / 2.0;
const SYNTH_CY: f64 = 0.0;
/// Ground beyond this range renders as invalid sky.
const SYNTH_FAR_M: f64 = 200.0;

/// Forward-looking pinhole whose frustum covers the default RoI: the LiDAR
/// +x axis is the optical axis, and the small vertical focal ratio keeps
/// the whole ground band inside the image.
pub fn synthetic_calibration() -> Calibration {
    Calibration {
        p_cam: [
            [SYNTH_FU, 0.0, SYNTH_CX, 0.0],
            [0.0, SYNTH_FV, SYNTH_CY, 0.0],
            [0.0, 0.0, 1.0, 0.0],
        ],
        r_rect: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
        tr_velo_to_cam: [
            [0.0, -1.0, 0.0, 0.0],
            [0.0, 0.0, -1.0, 0.0],
            [1.0, 0.0, 0.0, 0.0],
        ],
    }
}

/// Invert the synthetic projection: the metric ground point whose image is
/// pixel (u, v), or `None` above the horizon band.
fn ground_of_pixel(u: f64, v: f64) -> Option<(f64, f64)> {
    if v <= SYNTH_CY {
        return None;
    }
    let x = SYNTH_FV * (-GROUND_Z) / (v - SYNTH_CY);
    if x <= 0.0 || x > SYNTH_FAR_M {
        return None;
    }
    let y = -(u - SYNTH_CX) / SYNTH_FU * x;
    Some((x, y))
}

/// Render the perspective camera image and ground-truth labels of a scene,
/// pixel-for-pixel consistent with [`synthetic_calibration`]. Sky pixels
/// are black in the camera image and invalid in the labels.
pub fn render_perspective(params: &SynthParams) -> Result<(RgbImage, RgbImage)> {
    params.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed ^ 0x7065_7273_7065_6374);
    let mut camera = RgbImage::new(SYNTH_IMAGE_W as u32, SYNTH_IMAGE_H as u32);
    let mut gt = RgbImage::new(SYNTH_IMAGE_W as u32, SYNTH_IMAGE_H as u32);
    for v in 0..SYNTH_IMAGE_H {
        for u in 0..SYNTH_IMAGE_W {
            match ground_of_pixel(u as f64, v as f64) {
                Some((x, y)) => {
                    let on_road = params.on_road(x, y);
                    let base = if on_road { ROAD_COLOR } else { OFFROAD_COLOR };
                    camera.put_pixel(u as u32, v as u32, Rgb(jittered(base, &mut rng)));
                    let label = if on_road { [255, 0, 255] } else { [255, 0, 0] };
                    gt.put_pixel(u as u32, v as u32, Rgb(label));
                }
                None => {
                    camera.put_pixel(u as u32, v as u32, Rgb([0, 0, 0]));
                    gt.put_pixel(u as u32, v as u32, Rgb([0, 0, 0]));
                }
            }
        }
    }
    Ok((camera, gt))
}
