//! Flat `key = value` configuration with full validation up front.
//!
//! Precedence: built-in defaults, then the config file, then `--set`
//! overrides in order, then dedicated CLI flags. Unknown keys are rejected
//! so typos cannot silently fall back to defaults. The effective
//! configuration is echoed next to every command's outputs.

use std::fmt::Write as _;
use std::path::Path;

use bevroad_core::bev::RasterConfig;
use bevroad_core::model::{ModelVariant, ScaleProfile};
use bevroad_core::synth::SynthParams;
use bevroad_core::train::{GridSpec, HyperParams, LossKind, Optimizer};
use bevroad_core::warp::GroundPlaneModel;

use crate::CliError;

/// Which variants a command operates on.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum VariantSelection {
    One(ModelVariant),
    All,
}

impl VariantSelection {
    pub fn parse(s: &str) -> Result<Self, CliError> {
        if s.trim().eq_ignore_ascii_case("all") {
            Ok(Self::All)
        } else {
            ModelVariant::parse(s)
                .map(Self::One)
                .map_err(|e| CliError::config(e.to_string()))
        }
    }

    pub fn variants(&self) -> Vec<ModelVariant> {
        match self {
            Self::One(v) => vec![*v],
            Self::All => ModelVariant::ALL.to_vec(),
        }
    }

    pub fn single(&self) -> Result<ModelVariant, CliError> {
        match self {
            Self::One(v) => Ok(*v),
            Self::All => Err(CliError::config(
                "this command needs a single model variant, not 'all'".into(),
            )),
        }
    }
}

impl std::fmt::Display for VariantSelection {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Self::One(v) => write!(f, "{v}"),
            Self::All => f.write_str("all"),
        }
    }
}

/// Synthetic dataset knobs exposed through the config file.
#[derive(Clone, Copy, Debug)]
pub struct SynthConfig {
    pub scenes: usize,
    pub base: SynthParams,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            scenes: 8,
            base: SynthParams::default(),
        }
    }
}

/// Effective configuration of one CLI invocation.
#[derive(Clone, Debug)]
pub struct Config {
    pub raster: RasterConfig,
    pub plane: GroundPlaneModel,
    pub hp: HyperParams,
    pub grid: GridSpec,
    pub variant: VariantSelection,
    pub profile: ScaleProfile,
    pub cv_k: usize,
    pub synth: SynthConfig,
}

impl Default for Config {
    fn default() -> Self {
        Self {
            raster: RasterConfig::default(),
            plane: GroundPlaneModel::default(),
            hp: HyperParams::default(),
            grid: GridSpec::default(),
            variant: VariantSelection::One(ModelVariant::A),
            profile: ScaleProfile::desk(),
            cv_k: 10,
            synth: SynthConfig::default(),
        }
    }
}

fn parse_num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T, CliError> {
    value
        .trim()
        .parse()
        .map_err(|_| CliError::config(format!("{key}: cannot parse '{value}'")))
}

fn parse_list<T>(
    key: &str,
    value: &str,
    item: impl Fn(&str) -> Result<T, CliError>,
) -> Result<Vec<T>, CliError> {
    let items: Vec<T> = value
        .split(',')
        .filter(|s| !s.trim().is_empty())
        .map(|s| item(s.trim()))
        .collect::<Result<_, _>>()?;
    if items.is_empty() {
        return Err(CliError::config(format!("{key}: empty list")));
    }
    Ok(items)
}

impl Config {
    /// Apply one `key = value` assignment.
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), CliError> {
        let core = |e: bevroad_core::Error| CliError::config(e.to_string());
        match key {
            "roi.x_min" => self.raster.x_min = parse_num(key, value)?,
            "roi.x_max" => self.raster.x_max = parse_num(key, value)?,
            "roi.y_min" => self.raster.y_min = parse_num(key, value)?,
            "roi.y_max" => self.raster.y_max = parse_num(key, value)?,
            "raster.resolution" => self.raster.resolution = parse_num(key, value)?,
            "raster.z_low" => self.raster.z_low = parse_num(key, value)?,
            "raster.z_high" => self.raster.z_high = parse_num(key, value)?,
            "warp.z_plane" => self.plane.z_plane = parse_num(key, value)?,
            "train.optimizer" => self.hp.optimizer = Optimizer::parse(value).map_err(core)?,
            "train.lr" => self.hp.learning_rate = parse_num(key, value)?,
            "train.loss" => self.hp.loss = LossKind::parse(value).map_err(core)?,
            "train.dropout" => self.hp.dropout_rate = parse_num(key, value)?,
            "train.val_split" => self.hp.val_split = parse_num(key, value)?,
            "train.aug_rate" => self.hp.aug_rate = parse_num(key, value)?,
            "train.batch" => self.hp.batch_size = parse_num(key, value)?,
            "train.epochs" => self.hp.max_epochs = parse_num(key, value)?,
            "train.seed" => self.hp.seed = parse_num(key, value)?,
            "grid.optimizer" => {
                self.grid.optimizers =
                    parse_list(key, value, |s| Optimizer::parse(s).map_err(core))?
            }
            "grid.lr" => self.grid.learning_rates = parse_list(key, value, |s| parse_num(key, s))?,
            "grid.loss" => {
                self.grid.losses = parse_list(key, value, |s| LossKind::parse(s).map_err(core))?
            }
            "grid.dropout" => {
                self.grid.dropout_rates = parse_list(key, value, |s| parse_num(key, s))?
            }
            "grid.val_split" => {
                self.grid.val_splits = parse_list(key, value, |s| parse_num(key, s))?
            }
            "grid.aug_rate" => self.grid.aug_rates = parse_list(key, value, |s| parse_num(key, s))?,
            "model.variant" => self.variant = VariantSelection::parse(value)?,
            "model.profile" => self.profile = ScaleProfile::parse(value).map_err(core)?,
            "cv.k" => self.cv_k = parse_num(key, value)?,
            "synth.scenes" => self.synth.scenes = parse_num(key, value)?,
            "synth.seed" => self.synth.base.seed = parse_num(key, value)?,
            "synth.road_width" => self.synth.base.road_width = parse_num(key, value)?,
            "synth.density" => self.synth.base.point_density = parse_num(key, value)?,
            "synth.noise_std" => self.synth.base.noise_std = parse_num(key, value)?,
            "synth.road_intensity" => {
                self.synth.base.road_intensity_mean = parse_num(key, value)?
            }
            "synth.offroad_intensity" => {
                self.synth.base.offroad_intensity_mean = parse_num(key, value)?
            }
            "synth.curvature" => self.synth.base.curvature = parse_num(key, value)?,
            other => {
                return Err(CliError::config(format!(
                    "unknown configuration key '{other}'"
                )))
            }
        }
        Ok(())
    }

    /// Parse a config file: `key = value` lines, `#` comments, blank lines.
    pub fn apply_file(&mut self, path: &Path) -> Result<(), CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::config(format!("cannot read {}: {e}", path.display())))?;
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(CliError::config(format!(
                    "{}:{}: expected 'key = value', got '{raw}'",
                    path.display(),
                    lineno + 1
                )));
            };
            self.set(key.trim(), value.trim())?;
        }
        Ok(())
    }

    /// Apply `--set KEY=VALUE` overrides in order.
    pub fn apply_overrides(&mut self, overrides: &[String]) -> Result<(), CliError> {
        for assignment in overrides {
            let Some((key, value)) = assignment.split_once('=') else {
                return Err(CliError::config(format!(
                    "--set expects KEY=VALUE, got '{assignment}'"
                )));
            };
            self.set(key.trim(), value.trim())?;
        }
        Ok(())
    }

    /// Validate everything before any work starts.
    pub fn validate(&self) -> Result<(), CliError> {
        let core = |e: bevroad_core::Error| CliError::config(e.to_string());
        self.raster.validate().map_err(core)?;
        self.plane.validate().map_err(core)?;
        self.hp.validate().map_err(core)?;
        self.profile.validate().map_err(core)?;
        self.synth.base.validate().map_err(core)?;
        if self.cv_k < 2 {
            return Err(CliError::config(format!(
                "cv.k = {} but cross-validation needs at least 2 folds",
                self.cv_k
            )));
        }
        if self.synth.scenes == 0 {
            return Err(CliError::config("synth.scenes must be at least 1".into()));
        }
        Ok(())
    }

    /// Render every effective key for provenance, sorted, with the tool
    /// version up top.
    pub fn to_text(&self) -> String {
        let fmt_list_f64 = |values: &[f64]| {
            values
                .iter()
                .map(|v| v.to_string())
                .collect::<Vec<_>>()
                .join(",")
        };
        let mut entries: Vec<(String, String)> = vec![
            ("roi.x_min".into(), self.raster.x_min.to_string()),
            ("roi.x_max".into(), self.raster.x_max.to_string()),
            ("roi.y_min".into(), self.raster.y_min.to_string()),
            ("roi.y_max".into(), self.raster.y_max.to_string()),
            ("raster.resolution".into(), self.raster.resolution.to_string()),
            ("raster.z_low".into(), self.raster.z_low.to_string()),
            ("raster.z_high".into(), self.raster.z_high.to_string()),
            ("warp.z_plane".into(), self.plane.z_plane.to_string()),
            ("train.optimizer".into(), self.hp.optimizer.to_string()),
            ("train.lr".into(), self.hp.learning_rate.to_string()),
            ("train.loss".into(), self.hp.loss.to_string()),
            ("train.dropout".into(), self.hp.dropout_rate.to_string()),
            ("train.val_split".into(), self.hp.val_split.to_string()),
            ("train.aug_rate".into(), self.hp.aug_rate.to_string()),
            ("train.batch".into(), self.hp.batch_size.to_string()),
            ("train.epochs".into(), self.hp.max_epochs.to_string()),
            ("train.seed".into(), self.hp.seed.to_string()),
            (
                "grid.optimizer".into(),
                self.grid
                    .optimizers
                    .iter()
                    .map(|o| o.to_string())
                    .collect::<Vec<_>>()
                    .join(","),
            ),
            ("grid.lr".into(), fmt_list_f64(&self.grid.learning_rates)),
            (
                "grid.loss".into(),
                self.grid
                    .losses
                    .iter()
                    .map(|l| l.to_string())
                    .collect::<Vec<_>>()
                    .join(","),
            ),
            ("grid.dropout".into(), fmt_list_f64(&self.grid.dropout_rates)),
            ("grid.val_split".into(), fmt_list_f64(&self.grid.val_splits)),
            ("grid.aug_rate".into(), fmt_list_f64(&self.grid.aug_rates)),
            ("model.variant".into(), self.variant.to_string()),
            ("model.profile".into(), self.profile.name().into()),
            ("cv.k".into(), self.cv_k.to_string()),
            ("synth.scenes".into(), self.synth.scenes.to_string()),
            ("synth.seed".into(), self.synth.base.seed.to_string()),
            ("synth.road_width".into(), self.synth.base.road_width.to_string()),
            ("synth.density".into(), self.synth.base.point_density.to_string()),
            ("synth.noise_std".into(), self.synth.base.noise_std.to_string()),
            (
                "synth.road_intensity".into(),
                self.synth.base.road_intensity_mean.to_string(),
            ),
            (
                "synth.offroad_intensity".into(),
                self.synth.base.offroad_intensity_mean.to_string(),
            ),
            ("synth.curvature".into(), self.synth.base.curvature.to_string()),
        ];
        entries.sort();
        let mut out = format!("# bevroad {}\n", env!("CARGO_PKG_VERSION"));
        for (key, value) in entries {
            let _ = writeln!(out, "{key} = {value}");
        }
        out
    }
}
