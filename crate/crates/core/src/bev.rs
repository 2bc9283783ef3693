//! LiDAR point cloud to bird's-eye-view raster.
//!
//! The metric region of interest is clipped half-open in x and y, points are
//! binned on a regular grid (row 0 = far edge, column 0 = vehicle's left, so
//! the raster renders "forward up"), and cells encode occupancy, mean
//! intensity and truncated mean height as 8-bit RGB.

use image::RgbImage;

use crate::error::{Error, Result};
use crate::kitti::{quantize_unit, PointCloud};

/// Metric extent and quantization of the BEV grid.
///
/// Defaults follow the KITTI-Road benchmark space: x in [6, 46] m, y in
/// [-10, 10] m at 0.05 m/px (an 800x400 grid), height truncation band
/// [-1.8, -1.2] m.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RasterConfig {
    /// Longitudinal extent, meters.
    pub x_min: f64,
    pub x_max: f64,
    /// Lateral extent, meters.
    pub y_min: f64,
    pub y_max: f64,
    /// Cell edge, meters per pixel.
    pub resolution: f64,
    /// Blue-channel truncation band, meters.
    pub z_low: f64,
    pub z_high: f64,
}

impl Default for RasterConfig {
    fn default() -> Self {
        Self {
            x_min: 6.0,
            x_max: 46.0,
            y_min: -10.0,
            y_max: 10.0,
            resolution: 0.05,
            z_low: -1.8,
            z_high: -1.2,
        }
    }
}

impl RasterConfig {
    pub fn validate(&self) -> Result<()> {
        let span_x = self.x_max - self.x_min;
        let span_y = self.y_max - self.y_min;
        if span_x.is_nan() || span_x <= 0.0 || span_y.is_nan() || span_y <= 0.0 {
            return Err(Error::InvalidParameter(
                "raster RoI must have positive extent".into(),
            ));
        }
        if self.resolution.is_nan() || self.resolution <= 0.0 {
            return Err(Error::InvalidParameter(
                "raster resolution must be positive".into(),
            ));
        }
        let band = self.z_high - self.z_low;
        if band.is_nan() || band <= 0.0 {
            return Err(Error::InvalidParameter(
                "raster z band must have positive extent".into(),
            ));
        }
        for (axis, span) in [("x", self.x_max - self.x_min), ("y", self.y_max - self.y_min)] {
            let cells = span / self.resolution;
            if (cells - cells.round()).abs() > 1e-6 || cells.round() < 1.0 {
                return Err(Error::InvalidParameter(format!(
                    "{axis} extent {span} m is not an integer number of {} m cells",
                    self.resolution
                )));
            }
        }
        Ok(())
    }

    /// Rows of the grid: (x_max - x_min) / resolution.
    pub fn grid_height(&self) -> usize {
        ((self.x_max - self.x_min) / self.resolution).round() as usize
    }

    /// Columns of the grid: (y_max - y_min) / resolution.
    pub fn grid_width(&self) -> usize {
        ((self.y_max - self.y_min) / self.resolution).round() as usize
    }

    /// Metric coordinates of a cell center.
    pub fn cell_center(&self, row: usize, col: usize) -> (f64, f64) {
        (
            self.x_max - (row as f64 + 0.5) * self.resolution,
            self.y_max - (col as f64 + 0.5) * self.resolution,
        )
    }

    fn cell_of(&self, x: f64, y: f64) -> (usize, usize) {
        let h = self.grid_height();
        let w = self.grid_width();
        let row = ((self.x_max - x) / self.resolution).floor();
        let col = ((self.y_max - y) / self.resolution).floor();
        (
            (row.max(0.0) as usize).min(h - 1),
            (col.max(0.0) as usize).min(w - 1),
        )
    }
}

/// Per-cell accumulators; sums are zero while the cell is empty.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct CellStats {
    pub count: u32,
    pub intensity_sum: f64,
    pub z_sum: f64,
}

/// Dense grid of [`CellStats`], row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct CellGrid {
    pub height: usize,
    pub width: usize,
    pub cells: Vec<CellStats>,
}

impl CellGrid {
    pub fn at(&self, row: usize, col: usize) -> &CellStats {
        &self.cells[row * self.width + col]
    }
}

/// 8-bit multi-channel raster over the BEV grid, H x W x C row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct BevImage {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<u8>,
    channel_roles: Vec<String>,
}

impl BevImage {
    pub fn new(
        height: usize,
        width: usize,
        channels: usize,
        data: Vec<u8>,
        channel_roles: Vec<String>,
    ) -> Result<Self> {
        if data.len() != height * width * channels {
            return Err(Error::ShapeMismatch(format!(
                "BEV buffer does not match {height}x{width}x{channels}"
            )));
        }
        if channel_roles.len() != channels {
            return Err(Error::ShapeMismatch(format!(
                "{} channel roles for {channels} channels",
                channel_roles.len()
            )));
        }
        Ok(Self {
            height,
            width,
            channels,
            data,
            channel_roles,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn channel_roles(&self) -> &[String] {
        &self.channel_roles
    }

    pub fn at(&self, row: usize, col: usize, channel: usize) -> u8 {
        self.data[(row * self.width + col) * self.channels + channel]
    }

    /// Mirror along the width axis.
    pub fn fliplr(&self) -> Self {
        let mut data = vec![0u8; self.data.len()];
        for r in 0..self.height {
            for c in 0..self.width {
                let dst = (r * self.width + c) * self.channels;
                let src = (r * self.width + (self.width - 1 - c)) * self.channels;
                data[dst..dst + self.channels]
                    .copy_from_slice(&self.data[src..src + self.channels]);
            }
        }
        Self {
            data,
            channel_roles: self.channel_roles.clone(),
            ..*self
        }
    }

    /// View a 3-channel raster as an RGB image for writing to disk.
    pub fn to_rgb_image(&self) -> Result<RgbImage> {
        if self.channels != 3 {
            return Err(Error::ShapeMismatch(format!(
                "only 3-channel rasters can be written as RGB, got {} channels",
                self.channels
            )));
        }
        Ok(RgbImage::from_raw(self.width as u32, self.height as u32, self.data.clone())
            .expect("buffer length checked at construction"))
    }

    /// Wrap an RGB image read from disk.
    pub fn from_rgb_image(image: &RgbImage, channel_roles: [&str; 3]) -> Self {
        Self {
            height: image.height() as usize,
            width: image.width() as usize,
            channels: 3,
            data: image.as_raw().clone(),
            channel_roles: channel_roles.iter().map(|s| s.to_string()).collect(),
        }
    }
}

/// Retain points with x_min <= x < x_max and y_min <= y < y_max (half-open;
/// z unrestricted). Order is preserved.
pub fn clip_to_roi(cloud: &PointCloud, cfg: &RasterConfig) -> PointCloud {
    PointCloud::new(
        cloud
            .points
            .iter()
            .filter(|p| {
                p.x >= cfg.x_min && p.x < cfg.x_max && p.y >= cfg.y_min && p.y < cfg.y_max
            })
            .copied()
            .collect(),
    )
}

/// Accumulate count, intensity and height sums per grid cell, in input
/// order. The cloud must already be clipped to the RoI.
pub fn bin_points(cloud: &PointCloud, cfg: &RasterConfig) -> Result<CellGrid> {
    let height = cfg.grid_height();
    let width = cfg.grid_width();
    let mut cells = vec![CellStats::default(); height * width];
    for (i, p) in cloud.points.iter().enumerate() {
        if !(p.x >= cfg.x_min && p.x < cfg.x_max && p.y >= cfg.y_min && p.y < cfg.y_max) {
            return Err(Error::Contract(format!(
                "bin_points: point {i} at ({}, {}) lies outside the RoI",
                p.x, p.y
            )));
        }
        let (row, col) = cfg.cell_of(p.x, p.y);
        let cell = &mut cells[row * width + col];
        cell.count += 1;
        cell.intensity_sum += p.intensity;
        cell.z_sum += p.z;
    }
    Ok(CellGrid {
        height,
        width,
        cells,
    })
}

/// Channel roles of a LiDAR raster.
pub const LIDAR_CHANNEL_ROLES: [&str; 3] = ["occupancy", "mean_intensity", "mean_height"];

/// Encode cell statistics as 8-bit RGB: red 255 where the cell holds at
/// least one point, green the clamped mean intensity, blue the mean height
/// normalized over the truncation band. Empty cells are zero everywhere.
pub fn encode_bev_image(grid: &CellGrid, cfg: &RasterConfig) -> Result<BevImage> {
    if grid.height != cfg.grid_height() || grid.width != cfg.grid_width() {
        return Err(Error::ShapeMismatch(format!(
            "cell grid {}x{} does not match config grid {}x{}",
            grid.height,
            grid.width,
            cfg.grid_height(),
            cfg.grid_width()
        )));
    }
    let mut data = vec![0u8; grid.height * grid.width * 3];
    for (cell, px) in grid.cells.iter().zip(data.chunks_exact_mut(3)) {
        if cell.count == 0 {
            continue;
        }
        let n = f64::from(cell.count);
        px[0] = 255;
        px[1] = quantize_unit((cell.intensity_sum / n).clamp(0.0, 1.0));
        let z_norm = (cell.z_sum / n - cfg.z_low) / (cfg.z_high - cfg.z_low);
        px[2] = quantize_unit(z_norm.clamp(0.0, 1.0));
    }
    BevImage::new(
        grid.height,
        grid.width,
        3,
        data,
        LIDAR_CHANNEL_ROLES.iter().map(|s| s.to_string()).collect(),
    )
}

/// Full pipeline: clip, bin, encode.
pub fn rasterize(cloud: &PointCloud, cfg: &RasterConfig) -> Result<BevImage> {
    cfg.validate()?;
    let clipped = clip_to_roi(cloud, cfg);
    let grid = bin_points(&clipped, cfg)?;
    encode_bev_image(&grid, cfg)
}

/// Stack a camera raster and a LiDAR raster into one 6-channel image,
/// camera channels first.
pub fn combine_inputs(camera: &BevImage, lidar: &BevImage) -> Result<BevImage> {
    if camera.height() != lidar.height() || camera.width() != lidar.width() {
        return Err(Error::ShapeMismatch(format!(
            "combine_inputs: camera {}x{} vs lidar {}x{}",
            camera.height(),
            camera.width(),
            lidar.height(),
            lidar.width()
        )));
    }
    if camera.channels() != 3 || lidar.channels() != 3 {
        return Err(Error::ShapeMismatch(
            "combine_inputs expects two 3-channel rasters".into(),
        ));
    }
    let positions = camera.height() * camera.width();
    let mut data = vec![0u8; positions * 6];
    for p in 0..positions {
        data[p * 6..p * 6 + 3].copy_from_slice(&camera.data()[p * 3..p * 3 + 3]);
        data[p * 6 + 3..p * 6 + 6].copy_from_slice(&lidar.data()[p * 3..p * 3 + 3]);
    }
    let roles = camera
        .channel_roles()
        .iter()
        .map(|r| format!("camera_{r}"))
        .chain(lidar.channel_roles().iter().map(|r| format!("lidar_{r}")))
        .collect();
    BevImage::new(camera.height(), camera.width(), 6, data, roles)
}
