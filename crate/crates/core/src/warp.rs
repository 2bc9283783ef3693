//! Project perspective camera images and labels onto the BEV grid.
//!
//! Each BEV cell center is placed on an assumed flat road plane, pushed
//! through the LiDAR-to-camera rigid transform, the rectification rotation
//! and the camera projection, and sampled back from the source image:
//! bilinear for appearance, nearest-neighbor for labels. Cells that project
//! behind the camera or outside the source bounds are carried as invalid.

use image::RgbImage;

use crate::bev::{BevImage, RasterConfig};
use crate::error::{Error, Result};
use crate::kitti::{Calibration, GtMaskPair};

/// Height of the assumed flat road in the LiDAR frame, meters.
///
/// The default places the sensor 1.73 m above the road, the mounting height
/// of the recording platform.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GroundPlaneModel {
    pub z_plane: f64,
}

impl Default for GroundPlaneModel {
    fn default() -> Self {
        Self { z_plane: -1.73 }
    }
}

impl GroundPlaneModel {
    pub fn validate(&self) -> Result<()> {
        if !self.z_plane.is_finite() {
            return Err(Error::InvalidParameter(
                "ground plane height must be finite".into(),
            ));
        }
        Ok(())
    }
}

/// Per-BEV-pixel source coordinates, plus a validity mask.
#[derive(Clone, Debug)]
pub struct WarpMap {
    pub height: usize,
    pub width: usize,
    pub src_width: usize,
    pub src_height: usize,
    u: Vec<f64>,
    v: Vec<f64>,
    valid: Vec<bool>,
}

impl WarpMap {
    pub fn valid(&self) -> &[bool] {
        &self.valid
    }

    /// Source coordinates of a BEV pixel, `None` when invalid.
    pub fn source_at(&self, row: usize, col: usize) -> Option<(f64, f64)> {
        let i = row * self.width + col;
        self.valid[i].then(|| (self.u[i], self.v[i]))
    }
}

/// Result of warping an image into BEV space. Content is defined only where
/// `valid` is true; invalid pixels are zero.
#[derive(Clone, Debug)]
pub struct BevWarpResult {
    pub image: BevImage,
    pub valid: Vec<bool>,
}

/// Project a homogeneous LiDAR point through the full calibration chain.
/// Returns (u, v, rectified depth) before any bounds check, or `None` when
/// the homogeneous scale vanishes.
fn project(calib: &Calibration, p_velo: [f64; 3]) -> Option<(f64, f64, f64)> {
    let hom = [p_velo[0], p_velo[1], p_velo[2], 1.0];
    let mut cam = [0.0; 3];
    for (row, c) in cam.iter_mut().enumerate() {
        *c = (0..4).map(|k| calib.tr_velo_to_cam[row][k] * hom[k]).sum();
    }
    let mut rect = [0.0; 3];
    for (row, r) in rect.iter_mut().enumerate() {
        *r = (0..3).map(|k| calib.r_rect[row][k] * cam[k]).sum();
    }
    let rect_hom = [rect[0], rect[1], rect[2], 1.0];
    let mut proj = [0.0; 3];
    for (row, p) in proj.iter_mut().enumerate() {
        *p = (0..4).map(|k| calib.p_cam[row][k] * rect_hom[k]).sum();
    }
    if proj[2] == 0.0 {
        return None;
    }
    Some((proj[0] / proj[2], proj[1] / proj[2], rect[2]))
}

/// Build the per-pixel source coordinates for a BEV grid over a flat road
/// plane. BEV cells are sampled at their centers; a cell is invalid when its
/// rectified depth is non-positive or it projects outside the source image.
pub fn bev_to_image_map(
    calib: &Calibration,
    plane: &GroundPlaneModel,
    cfg: &RasterConfig,
    src_width: usize,
    src_height: usize,
) -> Result<WarpMap> {
    cfg.validate()?;
    plane.validate()?;
    if src_width < 2 || src_height < 2 {
        return Err(Error::InvalidParameter(format!(
            "source image {src_width}x{src_height} is too small to sample"
        )));
    }
    let height = cfg.grid_height();
    let width = cfg.grid_width();
    let mut u = vec![0.0; height * width];
    let mut v = vec![0.0; height * width];
    let mut valid = vec![false; height * width];
    let (u_max, v_max) = ((src_width - 1) as f64, (src_height - 1) as f64);
    for row in 0..height {
        for col in 0..width {
            let (x, y) = cfg.cell_center(row, col);
            let i = row * width + col;
            if let Some((pu, pv, depth)) = project(calib, [x, y, plane.z_plane]) {
                if depth > 0.0 && (0.0..=u_max).contains(&pu) && (0.0..=v_max).contains(&pv) {
                    u[i] = pu;
                    v[i] = pv;
                    valid[i] = true;
                }
            }
        }
    }
    Ok(WarpMap {
        height,
        width,
        src_width,
        src_height,
        u,
        v,
        valid,
    })
}

fn bilinear(image: &RgbImage, u: f64, v: f64) -> [f64; 3] {
    let (w, h) = (image.width() as usize, image.height() as usize);
    let u0 = (u.floor() as usize).min(w - 2);
    let v0 = (v.floor() as usize).min(h - 2);
    let fu = u - u0 as f64;
    let fv = v - v0 as f64;
    let mut out = [0.0; 3];
    for (dv, dv_w) in [(0, 1.0 - fv), (1, fv)] {
        for (du, du_w) in [(0, 1.0 - fu), (1, fu)] {
            let weight = dv_w * du_w;
            let px = image.get_pixel((u0 + du) as u32, (v0 + dv) as u32).0;
            for c in 0..3 {
                out[c] += weight * f64::from(px[c]);
            }
        }
    }
    out
}

/// Warp a perspective camera image into BEV space with bilinear sampling.
pub fn warp_camera(image: &RgbImage, map: &WarpMap) -> Result<BevWarpResult> {
    if image.width() as usize != map.src_width || image.height() as usize != map.src_height {
        return Err(Error::ShapeMismatch(format!(
            "camera image {}x{} does not match warp map source {}x{}",
            image.width(),
            image.height(),
            map.src_width,
            map.src_height
        )));
    }
    let mut data = vec![0u8; map.height * map.width * 3];
    for row in 0..map.height {
        for col in 0..map.width {
            if let Some((u, v)) = map.source_at(row, col) {
                let rgb = bilinear(image, u, v);
                let base = (row * map.width + col) * 3;
                for c in 0..3 {
                    data[base + c] = rgb[c].round().clamp(0.0, 255.0) as u8;
                }
            }
        }
    }
    let image = BevImage::new(
        map.height,
        map.width,
        3,
        data,
        vec!["red".into(), "green".into(), "blue".into()],
    )?;
    Ok(BevWarpResult {
        image,
        valid: map.valid.to_vec(),
    })
}

/// Warp ground-truth masks into BEV space with nearest-neighbor sampling.
/// The BEV valid mask is the conjunction of the map validity and the
/// sampled source validity.
pub fn warp_gt(gt: &GtMaskPair, map: &WarpMap) -> Result<GtMaskPair> {
    if gt.width() != map.src_width || gt.height() != map.src_height {
        return Err(Error::ShapeMismatch(format!(
            "ground truth {}x{} does not match warp map source {}x{}",
            gt.width(),
            gt.height(),
            map.src_width,
            map.src_height
        )));
    }
    let mut road = vec![false; map.height * map.width];
    let mut valid = vec![false; map.height * map.width];
    for row in 0..map.height {
        for col in 0..map.width {
            if let Some((u, v)) = map.source_at(row, col) {
                let su = (u.round() as usize).min(map.src_width - 1);
                let sv = (v.round() as usize).min(map.src_height - 1);
                let i = row * map.width + col;
                valid[i] = gt.valid_at(sv, su);
                road[i] = gt.road_at(sv, su);
            }
        }
    }
    GtMaskPair::new(map.height, map.width, road, valid)
}

#[cfg(test)]
mod tests {
    use crate::kitti::load_calibration;

    use super::*;

    /// Forward-looking pinhole camera: LiDAR +x becomes the optical axis.
    /// X_cam = -y, Y_cam = -z, Z_cam = x; u = cx + fu*X/Z, v = cy + fv*Y/Z.
    fn axis_aligned_calib(fu: f64, fv: f64, cx: f64, cy: f64) -> Calibration {
        load_calibration(&format!(
            "P2: {fu} 0 {cx} 0 0 {fv} {cy} 0 0 0 1 0\n\
             R0_rect: 1 0 0 0 1 0 0 0 1\n\
             Tr_velo_to_cam: 0 -1 0 0 0 0 -1 0 1 0 0 0\n"
        ))
        .unwrap()
    }

    /// Wide-FOV setup whose frustum covers the whole default RoI. The
    /// non-dyadic focal length keeps cell centers off exact half-pixel
    /// sampling ties, where round-half-away breaks mirror symmetry.
    fn wide_fov() -> (Calibration, usize, usize) {
        (axis_aligned_calib(151.37, 3000.0, 399.5, 0.0), 800, 900)
    }

    fn small_cfg() -> RasterConfig {
        RasterConfig {
            resolution: 0.5,
            ..RasterConfig::default()
        }
    }

    #[test]
    fn projection_matches_hand_pinhole_on_one_pixel() {
        let calib = axis_aligned_calib(150.0, 3000.0, 399.5, 0.0);
        let cfg = small_cfg();
        let plane = GroundPlaneModel::default();
        let map = bev_to_image_map(&calib, &plane, &cfg, 800, 900).unwrap();
        // Cell (10, 4): center x = 46 - 10.5*0.5 = 40.75, y = 10 - 4.5*0.5 = 7.75.
        let (u, v) = map.source_at(10, 4).unwrap();
        let expected_u = 399.5 + 150.0 * (-7.75) / 40.75;
        let expected_v = 3000.0 * 1.73 / 40.75;
        assert!((u - expected_u).abs() < 1e-9, "u {u} vs {expected_u}");
        assert!((v - expected_v).abs() < 1e-9, "v {v} vs {expected_v}");
    }

    #[test]
    fn wide_fov_map_is_valid_everywhere() {
        let (calib, w, h) = wide_fov();
        let map =
            bev_to_image_map(&calib, &GroundPlaneModel::default(), &small_cfg(), w, h).unwrap();
        assert!(map.valid().iter().all(|&v| v));
    }

    #[test]
    fn pixels_behind_the_camera_are_invalid() {
        // Optical axis along -x: every RoI cell (x > 0) has negative depth.
        let calib = load_calibration(
            "P2: 150 0 399.5 0 0 3000 0 0 0 0 1 0\n\
             R0_rect: 1 0 0 0 1 0 0 0 1\n\
             Tr_velo_to_cam: 0 1 0 0 0 0 -1 0 -1 0 0 0\n",
        )
        .unwrap();
        let map =
            bev_to_image_map(&calib, &GroundPlaneModel::default(), &small_cfg(), 800, 900)
                .unwrap();
        assert!(map.valid().iter().all(|&v| !v));
    }

    #[test]
    fn narrow_image_marks_out_of_bounds_invalid() {
        let (calib, _, h) = wide_fov();
        let map =
            bev_to_image_map(&calib, &GroundPlaneModel::default(), &small_cfg(), 420, h).unwrap();
        assert!(map.valid().iter().any(|&v| v));
        assert!(map.valid().iter().any(|&v| !v));
    }

    #[test]
    fn warp_camera_constant_source_gives_constant_valid_pixels() {
        let (calib, w, h) = wide_fov();
        let cfg = small_cfg();
        let map = bev_to_image_map(&calib, &GroundPlaneModel::default(), &cfg, w, h).unwrap();
        let src = RgbImage::from_pixel(w as u32, h as u32, image::Rgb([7, 77, 177]));
        let out = warp_camera(&src, &map).unwrap();
        for row in 0..out.image.height() {
            for col in 0..out.image.width() {
                assert_eq!(
                    [out.image.at(row, col, 0), out.image.at(row, col, 1), out.image.at(row, col, 2)],
                    [7, 77, 177]
                );
            }
        }
    }

    #[test]
    fn warp_camera_all_invalid_is_black() {
        let calib = load_calibration(
            "P2: 150 0 399.5 0 0 3000 0 0 0 0 1 0\n\
             R0_rect: 1 0 0 0 1 0 0 0 1\n\
             Tr_velo_to_cam: 0 1 0 0 0 0 -1 0 -1 0 0 0\n",
        )
        .unwrap();
        let cfg = small_cfg();
        let map = bev_to_image_map(&calib, &GroundPlaneModel::default(), &cfg, 800, 900).unwrap();
        let src = RgbImage::from_pixel(800, 900, image::Rgb([200, 200, 200]));
        let out = warp_camera(&src, &map).unwrap();
        assert!(out.image.data().iter().all(|&v| v == 0));
        assert!(out.valid.iter().all(|&v| !v));
    }

    #[test]
    fn warp_camera_matches_direct_bilinear_oracle() {
        let (calib, w, h) = wide_fov();
        let cfg = small_cfg();
        let map = bev_to_image_map(&calib, &GroundPlaneModel::default(), &cfg, w, h).unwrap();
        // Horizontal gradient source.
        let src = RgbImage::from_fn(w as u32, h as u32, |x, _| {
            image::Rgb([(x % 256) as u8, 0, ((x / 2) % 256) as u8])
        });
        let out = warp_camera(&src, &map).unwrap();
        for (row, col) in [(0, 0), (5, 7), (11, 3), (40, 20), (79, 39), (63, 1), (17, 38), (29, 29), (50, 10), (70, 33)] {
            let (u, v) = map.source_at(row, col).unwrap();
            let u0 = u.floor() as u32;
            let v0 = v.floor() as u32;
            let (fu, fv) = (u - f64::from(u0), v - f64::from(v0));
            let sample = |du: u32, dv: u32, c: usize| f64::from(src.get_pixel(u0 + du, v0 + dv).0[c]);
            for c in 0..3 {
                let expected = (1.0 - fv) * ((1.0 - fu) * sample(0, 0, c) + fu * sample(1, 0, c))
                    + fv * ((1.0 - fu) * sample(0, 1, c) + fu * sample(1, 1, c));
                let got = f64::from(out.image.at(row, col, c));
                assert!(
                    (got - expected.round()).abs() < 1.0 + 1e-9,
                    "pixel ({row},{col}) channel {c}: {got} vs {expected}"
                );
            }
        }
    }

    #[test]
    fn warp_gt_preserves_road_implies_valid() {
        let (calib, w, h) = wide_fov();
        let cfg = small_cfg();
        let map = bev_to_image_map(&calib, &GroundPlaneModel::default(), &cfg, w, h).unwrap();
        // Left half road, everything valid.
        let road: Vec<bool> = (0..w * h).map(|i| i % w < w / 2).collect();
        let gt = GtMaskPair::new(h, w, road, vec![true; w * h]).unwrap();
        let bev = warp_gt(&gt, &map).unwrap();
        assert!(bev.road().iter().zip(bev.valid()).all(|(&r, &v)| !r || v));
        assert!(bev.road().iter().any(|&r| r));
        assert!(bev.road().iter().any(|&r| !r));

        // Spot-check against a direct nearest-neighbor oracle.
        for (row, col) in [(3, 3), (20, 11), (55, 39), (79, 0)] {
            let (u, v) = map.source_at(row, col).unwrap();
            let expected = gt.road_at(v.round() as usize, u.round() as usize);
            assert_eq!(bev.road_at(row, col), expected, "pixel ({row},{col})");
        }
    }

    #[test]
    fn warp_gt_all_road_all_valid() {
        let (calib, w, h) = wide_fov();
        let cfg = small_cfg();
        let map = bev_to_image_map(&calib, &GroundPlaneModel::default(), &cfg, w, h).unwrap();
        let gt = GtMaskPair::new(h, w, vec![true; w * h], vec![true; w * h]).unwrap();
        let bev = warp_gt(&gt, &map).unwrap();
        assert!(bev.road().iter().all(|&r| r));
        assert!(bev.valid().iter().all(|&v| v));
    }

    #[test]
    fn warp_gt_invalid_map_gives_all_invalid() {
        let calib = load_calibration(
            "P2: 150 0 399.5 0 0 3000 0 0 0 0 1 0\n\
             R0_rect: 1 0 0 0 1 0 0 0 1\n\
             Tr_velo_to_cam: 0 1 0 0 0 0 -1 0 -1 0 0 0\n",
        )
        .unwrap();
        let cfg = small_cfg();
        let map = bev_to_image_map(&calib, &GroundPlaneModel::default(), &cfg, 800, 900).unwrap();
        let gt = GtMaskPair::new(900, 800, vec![true; 800 * 900], vec![true; 800 * 900]).unwrap();
        let bev = warp_gt(&gt, &map).unwrap();
        assert!(bev.valid().iter().all(|&v| !v));
        assert!(bev.road().iter().all(|&r| !r));
    }

    #[test]
    fn mirrored_source_gives_column_mirrored_bev() {
        // cx = (W-1)/2 makes the setup exactly symmetric in f64.
        let (calib, w, h) = wide_fov();
        let cfg = small_cfg();
        let map = bev_to_image_map(&calib, &GroundPlaneModel::default(), &cfg, w, h).unwrap();

        let src = RgbImage::from_fn(w as u32, h as u32, |x, y| {
            image::Rgb([((x * 7 + y * 3) % 256) as u8, (x % 256) as u8, (y % 256) as u8])
        });
        let mut mirrored = src.clone();
        for y in 0..h as u32 {
            for x in 0..w as u32 {
                mirrored.put_pixel(x, y, *src.get_pixel(w as u32 - 1 - x, y));
            }
        }

        // Nearest-neighbor route must mirror exactly.
        let road: Vec<bool> = (0..w * h).map(|i| (i * 31 % 7) < 3).collect();
        let gt = GtMaskPair::new(h, w, road.clone(), vec![true; w * h]).unwrap();
        let mut road_m = vec![false; w * h];
        for y in 0..h {
            for x in 0..w {
                road_m[y * w + x] = road[y * w + (w - 1 - x)];
            }
        }
        let gt_m = GtMaskPair::new(h, w, road_m, vec![true; w * h]).unwrap();
        let bev = warp_gt(&gt, &map).unwrap();
        let bev_m = warp_gt(&gt_m, &map).unwrap();
        for row in 0..bev.height() {
            for col in 0..bev.width() {
                assert_eq!(
                    bev_m.road_at(row, col),
                    bev.road_at(row, bev.width() - 1 - col),
                    "nn mirror mismatch at ({row},{col})"
                );
            }
        }

        // Bilinear route may differ by one quantization level.
        let out = warp_camera(&src, &map).unwrap();
        let out_m = warp_camera(&mirrored, &map).unwrap();
        for row in 0..out.image.height() {
            for col in 0..out.image.width() {
                for c in 0..3 {
                    let a = i16::from(out_m.image.at(row, col, c));
                    let b = i16::from(out.image.at(row, out.image.width() - 1 - col, c));
                    assert!((a - b).abs() <= 1, "bilinear mirror off by {} at ({row},{col})", a - b);
                }
            }
        }
    }

    #[test]
    fn warp_is_deterministic() {
        let (calib, w, h) = wide_fov();
        let cfg = small_cfg();
        let plane = GroundPlaneModel::default();
        let src = RgbImage::from_fn(w as u32, h as u32, |x, y| {
            image::Rgb([(x % 256) as u8, (y % 256) as u8, ((x + y) % 256) as u8])
        });
        let run = || {
            let map = bev_to_image_map(&calib, &plane, &cfg, w, h).unwrap();
            warp_camera(&src, &map).unwrap().image
        };
        assert_eq!(run(), run());
    }
}
