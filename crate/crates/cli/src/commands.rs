//! Subcommand implementations.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;

use bevroad_core::bev::rasterize;
use bevroad_core::checkpoint::{load_checkpoint, save_checkpoint};
use bevroad_core::kitti::{
    decode_confidence_png, decode_gt_perspective, discover_dataset, encode_confidence_png,
    encode_gt_png, encode_overlay_png, load_calibration, parse_point_cloud, ConfidenceMap,
};
use bevroad_core::metrics::{aggregate, Grouping, PixelHistogram};
use bevroad_core::model::Model;
use bevroad_core::synth::{
    dataset_plan, generate_scene, render_perspective, synthetic_calibration,
};
use bevroad_core::train::{
    cross_validate, grid_search, predict_confidence, train, CrossValReport,
};
use bevroad_core::warp::{bev_to_image_map, warp_camera, warp_gt};

use crate::config::Config;
use crate::scenes::{load_preprocessed, CAMERA_FILE, GT_FILE, LIDAR_FILE, VALID_FILE};
use crate::CliError;

fn create_dir(path: &Path) -> Result<(), CliError> {
    std::fs::create_dir_all(path)
        .map_err(|e| CliError::data(format!("cannot create {}: {e}", path.display())))
}

fn write_text(path: &Path, text: &str) -> Result<(), CliError> {
    std::fs::write(path, text)
        .map_err(|e| CliError::data(format!("cannot write {}: {e}", path.display())))
}

fn save_png(path: &Path, img: &impl GenericPng) -> Result<(), CliError> {
    img.save_png(path)
        .map_err(|e| CliError::data(format!("cannot write {}: {e}", path.display())))
}

/// Narrow save interface so gray and RGB images share helpers.
trait GenericPng {
    fn save_png(&self, path: &Path) -> image::ImageResult<()>;
}

impl GenericPng for image::RgbImage {
    fn save_png(&self, path: &Path) -> image::ImageResult<()> {
        self.save(path)
    }
}

impl GenericPng for image::GrayImage {
    fn save_png(&self, path: &Path) -> image::ImageResult<()> {
        self.save(path)
    }
}

fn write_effective_config(out: &Path, cfg: &Config) -> Result<(), CliError> {
    write_text(&out.join("effective_config.txt"), &cfg.to_text())
}

// ---------------------------------------------------------------------------
// synth
// ---------------------------------------------------------------------------

/// Write a synthetic dataset in the on-disk layout `preprocess` consumes:
/// velodyne binaries, calibration text, perspective camera images and
/// perspective ground-truth labels.
pub fn cmd_synth(cfg: &Config, out: &Path) -> Result<(), CliError> {
    let plans = dataset_plan(cfg.synth.scenes, &cfg.synth.base)
        .map_err(|e| CliError::config(e.to_string()))?;
    for sub in ["image_2", "velodyne", "calib", "gt_image_2"] {
        create_dir(&out.join(sub))?;
    }
    write_effective_config(out, cfg)?;

    let calib_text = synthetic_calibration().to_text();
    let results: Vec<Result<(), CliError>> = plans
        .par_iter()
        .map(|plan| {
            let scene = generate_scene(&plan.params, &cfg.raster, &plan.id, plan.category)
                .map_err(|e| CliError::data(e.to_string()))?;
            let cloud = scene.cloud.as_ref().expect("generated scenes carry clouds");
            std::fs::write(
                out.join(format!("velodyne/{}.bin", plan.id)),
                bevroad_core::kitti::encode_point_cloud(cloud),
            )
            .map_err(|e| CliError::data(e.to_string()))?;
            write_text(&out.join(format!("calib/{}.txt", plan.id)), &calib_text)?;
            let (camera, gt) = render_perspective(&plan.params)
                .map_err(|e| CliError::data(e.to_string()))?;
            save_png(&out.join(format!("image_2/{}.png", plan.id)), &camera)?;
            let (prefix, num) = plan.id.split_once('_').expect("planned ids have a prefix");
            save_png(
                &out.join(format!("gt_image_2/{prefix}_road_{num}.png")),
                &gt,
            )?;
            Ok(())
        })
        .collect();
    for result in results {
        result?;
    }
    println!("wrote {} synthetic scenes to {}", plans.len(), out.display());
    Ok(())
}

// ---------------------------------------------------------------------------
// preprocess
// ---------------------------------------------------------------------------

/// Rasterize LiDAR, warp camera and labels onto the BEV grid, one output
/// directory per scene. Per-scene failures are logged and skipped.
pub fn cmd_preprocess(cfg: &Config, data: &Path, out: &Path) -> Result<(), CliError> {
    let discovery = discover_dataset(data).map_err(|e| CliError::data(e.to_string()))?;
    for (id, reason) in &discovery.skipped {
        eprintln!("skipping '{id}': {reason}");
    }
    if discovery.scenes.is_empty() {
        return Err(CliError::data(format!(
            "no complete scenes under {}",
            data.display()
        )));
    }
    create_dir(out)?;
    write_effective_config(out, cfg)?;

    let outcomes: Vec<(String, Result<(), String>)> = discovery
        .scenes
        .par_iter()
        .map(|scene| (scene.id.clone(), preprocess_scene(cfg, scene, out)))
        .collect();

    let mut done = 0usize;
    for (id, outcome) in outcomes {
        match outcome {
            Ok(()) => done += 1,
            Err(reason) => eprintln!("scene '{id}' failed: {reason}"),
        }
    }
    println!(
        "preprocessed {done}/{} scenes into {}",
        discovery.scenes.len(),
        out.display()
    );
    Ok(())
}

fn preprocess_scene(
    cfg: &Config,
    scene: &bevroad_core::kitti::SceneRef,
    out: &Path,
) -> Result<(), String> {
    let err = |e: &dyn std::fmt::Display| e.to_string();

    let bytes = std::fs::read(&scene.velodyne).map_err(|e| err(&e))?;
    let cloud = parse_point_cloud(&bytes).map_err(|e| err(&e))?;
    let lidar_bev = rasterize(&cloud, &cfg.raster).map_err(|e| err(&e))?;

    let calib_text = std::fs::read_to_string(&scene.calib).map_err(|e| err(&e))?;
    let calib = load_calibration(&calib_text).map_err(|e| err(&e))?;
    let camera_img = image::open(&scene.camera).map_err(|e| err(&e))?.to_rgb8();
    let map = bev_to_image_map(
        &calib,
        &cfg.plane,
        &cfg.raster,
        camera_img.width() as usize,
        camera_img.height() as usize,
    )
    .map_err(|e| err(&e))?;
    let warped = warp_camera(&camera_img, &map).map_err(|e| err(&e))?;

    let scene_dir = out.join(&scene.id);
    std::fs::create_dir_all(&scene_dir).map_err(|e| err(&e))?;
    lidar_bev
        .to_rgb_image()
        .map_err(|e| err(&e))?
        .save(scene_dir.join(LIDAR_FILE))
        .map_err(|e| err(&e))?;
    warped
        .image
        .to_rgb_image()
        .map_err(|e| err(&e))?
        .save(scene_dir.join(CAMERA_FILE))
        .map_err(|e| err(&e))?;

    let mut valid_img = image::GrayImage::new(
        lidar_bev.width() as u32,
        lidar_bev.height() as u32,
    );
    for (px, &v) in valid_img.pixels_mut().zip(&warped.valid) {
        px.0 = [if v { 255 } else { 0 }];
    }
    valid_img
        .save(scene_dir.join(VALID_FILE))
        .map_err(|e| err(&e))?;

    if let Some(gt_path) = &scene.gt {
        let gt_img = image::open(gt_path).map_err(|e| err(&e))?;
        let gt = decode_gt_perspective(&gt_img).map_err(|e| err(&e))?;
        let gt_bev = warp_gt(&gt, &map).map_err(|e| err(&e))?;
        encode_gt_png(&gt_bev)
            .save(scene_dir.join(GT_FILE))
            .map_err(|e| err(&e))?;
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// train
// ---------------------------------------------------------------------------

pub fn cmd_train(cfg: &Config, data: &Path, out: &Path) -> Result<(), CliError> {
    let variant = cfg.variant.single()?;
    let scenes = load_preprocessed(data, true)?;
    let outcome = train(variant, &cfg.profile, &scenes, &cfg.hp).map_err(CliError::from)?;

    create_dir(out)?;
    write_effective_config(out, cfg)?;
    save_checkpoint(&out.join("checkpoint.bin"), &outcome.model)
        .map_err(|e| CliError::data(e.to_string()))?;

    let mut history = String::from("epoch,train_loss,val_loss,val_biou\n");
    for (epoch, stats) in outcome.history.epochs.iter().enumerate() {
        let _ = writeln!(
            history,
            "{},{},{},{}",
            epoch + 1,
            stats.train_loss,
            stats.val_loss,
            stats.val_biou
        );
    }
    write_text(&out.join("history.csv"), &history)?;

    let best = outcome.history.epochs[outcome.best_epoch];
    println!(
        "variant {variant}: kept epoch {} of {}, validation BinaryIoU {:.4}",
        outcome.best_epoch + 1,
        outcome.history.epochs.len(),
        best.val_biou
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// crossval
// ---------------------------------------------------------------------------

const CROSSVAL_HEADER: &str =
    "Model | Camera | LiDAR | Combined input | Skip connections | BinaryIoU";

fn yes_no(flag: bool) -> &'static str {
    if flag {
        "yes"
    } else {
        "no"
    }
}

/// Render the comparison table plus per-fold detail.
pub fn format_crossval_report(reports: &[CrossValReport], k: usize, seed: u64) -> String {
    let mut text = String::from(CROSSVAL_HEADER);
    text.push('\n');
    for report in reports {
        let v = report.variant;
        let _ = writeln!(
            text,
            "{}     | {:<6} | {:<5} | {:<14} | {:<16} | {:.4}",
            v,
            yes_no(v.uses_camera()),
            yes_no(v.uses_lidar()),
            yes_no(v.combined_input()),
            yes_no(v.skip_connections()),
            report.mean_biou
        );
    }
    let _ = writeln!(text, "\nFolds (k = {k}, seed = {seed}):");
    for report in reports {
        let folds = report
            .fold_bious
            .iter()
            .map(|b| format!("{b:.4}"))
            .collect::<Vec<_>>()
            .join(" ");
        let _ = writeln!(text, "{}: {folds}", report.variant);
    }
    text
}

pub fn cmd_crossval(cfg: &Config, data: &Path, out: &Path) -> Result<(), CliError> {
    let scenes = load_preprocessed(data, true)?;
    let mut reports = Vec::new();
    for variant in cfg.variant.variants() {
        eprintln!("cross-validating variant {variant} (k = {})", cfg.cv_k);
        let report = cross_validate(variant, &cfg.profile, &scenes, &cfg.hp, cfg.cv_k)
            .map_err(CliError::from)?;
        reports.push(report);
    }

    create_dir(out)?;
    write_effective_config(out, cfg)?;
    let text = format_crossval_report(&reports, cfg.cv_k, cfg.hp.seed);
    write_text(&out.join("report.txt"), &text)?;

    let mut csv = String::from("variant,mean_biou");
    for fold in 1..=cfg.cv_k {
        let _ = write!(csv, ",fold_{fold}");
    }
    csv.push('\n');
    for report in &reports {
        let _ = write!(csv, "{},{:.6}", report.variant, report.mean_biou);
        for b in &report.fold_bious {
            let _ = write!(csv, ",{b:.6}");
        }
        csv.push('\n');
    }
    write_text(&out.join("report.csv"), &csv)?;
    print!("{text}");
    Ok(())
}

// ---------------------------------------------------------------------------
// gridsearch
// ---------------------------------------------------------------------------

pub fn cmd_gridsearch(cfg: &Config, data: &Path, out: &Path) -> Result<(), CliError> {
    let variant = cfg.variant.single()?;
    let scenes = load_preprocessed(data, true)?;
    let results = grid_search(&cfg.grid, variant, &cfg.profile, &scenes, &cfg.hp)
        .map_err(CliError::from)?;

    create_dir(out)?;
    write_effective_config(out, cfg)?;
    let mut text = String::from(
        "rank | optimizer | lr       | loss | dropout | val_split | aug_rate | val_biou | val_loss\n",
    );
    for (rank, result) in results.iter().enumerate() {
        let _ = writeln!(
            text,
            "{:>4} | {:<9} | {:<8} | {:<4} | {:<7} | {:<9} | {:<8} | {:.4}   | {:.6}",
            rank + 1,
            result.hp.optimizer,
            result.hp.learning_rate,
            result.hp.loss,
            result.hp.dropout_rate,
            result.hp.val_split,
            result.hp.aug_rate,
            result.val_biou,
            result.val_loss
        );
    }
    write_text(&out.join("gridsearch.txt"), &text)?;
    print!("{text}");
    println!("({} configurations ranked)", results.len());
    Ok(())
}

// ---------------------------------------------------------------------------
// predict
// ---------------------------------------------------------------------------

fn check_compatible(model: &Model, scenes: &[bevroad_core::synth::Scene]) -> Result<(), CliError> {
    let profile = model.profile();
    for scene in scenes {
        if scene.lidar_bev.height() != profile.input_h
            || scene.lidar_bev.width() != profile.input_w
        {
            return Err(CliError::config(format!(
                "checkpoint expects {}x{} inputs but scene '{}' is {}x{}",
                profile.input_h,
                profile.input_w,
                scene.id,
                scene.lidar_bev.height(),
                scene.lidar_bev.width()
            )));
        }
    }
    Ok(())
}

pub fn cmd_predict(
    cfg: &Config,
    checkpoint: &Path,
    data: &Path,
    out: &Path,
) -> Result<(), CliError> {
    let model = load_checkpoint(checkpoint).map_err(CliError::from)?;
    let scenes = load_preprocessed(data, false)?;
    check_compatible(&model, &scenes)?;

    create_dir(out)?;
    write_effective_config(out, cfg)?;
    let results: Vec<Result<f64, CliError>> = scenes
        .par_iter()
        .map(|scene| {
            let start = Instant::now();
            let conf = predict_confidence(&model, scene).map_err(CliError::from)?;
            let seconds = start.elapsed().as_secs_f64();
            let png = encode_confidence_png(&conf).map_err(CliError::from)?;
            save_png(&out.join(format!("{}.png", scene.id)), &png)?;
            Ok(seconds)
        })
        .collect();

    let mut total = 0.0;
    for result in &results {
        match result {
            Ok(seconds) => total += seconds,
            Err(e) => return Err(CliError::data(e.to_string())),
        }
    }
    let mean = total / scenes.len() as f64;
    write_text(
        &out.join("timing.txt"),
        &format!(
            "images = {}\nmean_seconds_per_image = {mean:.6}\n",
            scenes.len()
        ),
    )?;
    println!(
        "predicted {} scenes, {mean:.6} s/image (compute only)",
        scenes.len()
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// evaluate
// ---------------------------------------------------------------------------

pub fn cmd_evaluate(
    _cfg: &Config,
    pred: &Path,
    gt_dir: &Path,
    out: &Path,
    grouping: Grouping,
) -> Result<(), CliError> {
    let scenes = load_preprocessed(gt_dir, true)?;

    // Prediction ids must match ground-truth ids exactly.
    let mut pred_ids: Vec<String> = Vec::new();
    for entry in std::fs::read_dir(pred)
        .map_err(|e| CliError::data(format!("cannot list {}: {e}", pred.display())))?
    {
        let path = entry.map_err(|e| CliError::data(e.to_string()))?.path();
        if path.extension().and_then(|e| e.to_str()) == Some("png") {
            if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
                pred_ids.push(stem.to_string());
            }
        }
    }
    pred_ids.sort();
    let gt_ids: Vec<&str> = scenes.iter().map(|s| s.id.as_str()).collect();
    let missing_pred: Vec<&str> = gt_ids
        .iter()
        .filter(|id| !pred_ids.iter().any(|p| p == *id))
        .copied()
        .collect();
    let missing_gt: Vec<String> = pred_ids
        .iter()
        .filter(|id| !gt_ids.contains(&id.as_str()))
        .cloned()
        .collect();
    if !missing_pred.is_empty() || !missing_gt.is_empty() {
        return Err(CliError::config(format!(
            "scene ids do not match: missing predictions for [{}], missing ground truth for [{}]",
            missing_pred.join(", "),
            missing_gt.join(", ")
        )));
    }

    create_dir(&out.join("overlays"))?;
    let per_scene: Vec<Result<(bevroad_core::kitti::Category, PixelHistogram), CliError>> =
        scenes
            .par_iter()
            .map(|scene| {
                let conf = load_confidence(&pred.join(format!("{}.png", scene.id)))?;
                let overlay = encode_overlay_png(&conf, &scene.gt, 0.5)
                    .map_err(CliError::from)?;
                save_png(&out.join(format!("overlays/{}.png", scene.id)), &overlay)?;
                let hist = PixelHistogram::from_confidence(&conf, &scene.gt)
                    .map_err(CliError::from)?;
                Ok((scene.category, hist))
            })
            .collect();
    let histograms: Vec<(bevroad_core::kitti::Category, PixelHistogram)> =
        per_scene.into_iter().collect::<Result<_, _>>()?;

    let groups = aggregate(&histograms, grouping).map_err(CliError::from)?;
    let mut table = String::from(
        "Group      | Scenes | MaxF    | AP      | PRE     | REC     | FPR     | FNR     | BinaryIoU\n",
    );
    for group in &groups {
        let r = &group.report;
        let _ = writeln!(
            table,
            "{:<10} | {:>6} | {:>6.2}% | {:>6.2}% | {:>6.2}% | {:>6.2}% | {:>6.2}% | {:>6.2}% | {:.4}",
            group.name,
            group.scene_count,
            100.0 * r.max_f1,
            100.0 * r.ap,
            100.0 * r.precision,
            100.0 * r.recall,
            100.0 * r.fpr,
            100.0 * r.fnr,
            r.binary_iou_mean
        );
        write_text(&out.join(format!("{}.txt", group.name)), &r.to_key_values())?;
    }
    write_text(&out.join("report.txt"), &table)?;
    print!("{table}");
    Ok(())
}

fn load_confidence(path: &Path) -> Result<ConfidenceMap, CliError> {
    let img = image::open(path)
        .map_err(|e| CliError::data(format!("cannot read {}: {e}", path.display())))?;
    decode_confidence_png(&img).map_err(CliError::from)
}

/// Resolve the default evaluation output directory.
pub fn default_eval_out(pred: &Path) -> PathBuf {
    let mut name = pred
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| "predictions".into());
    name.push_str("_eval");
    pred.with_file_name(name)
}
