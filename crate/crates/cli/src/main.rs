//! `bevroad` - BEV road-segmentation pipeline driver.
//!
//! Subcommands cover the whole flow: `synth` writes a synthetic dataset in
//! the raw on-disk layout, `preprocess` turns raw scenes into BEV rasters,
//! `train`/`crossval`/`gridsearch` fit the architecture variants,
//! `predict` emits confidence maps and `evaluate` scores them.
//!
//! Exit codes: 0 ok, 2 data error, 3 training divergence, 4 config or
//! compatibility error.

mod commands;
mod config;
mod scenes;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use bevroad_core::metrics::Grouping;

use config::Config;

/// Errors classified by exit code.
#[derive(Debug)]
pub enum CliError {
    /// Exit 2: broken inputs or I/O.
    Data(String),
    /// Exit 3: training produced a non-finite loss.
    Diverged(String),
    /// Exit 4: configuration or compatibility problem.
    Config(String),
}

impl CliError {
    pub fn data(msg: String) -> Self {
        Self::Data(msg)
    }

    pub fn config(msg: String) -> Self {
        Self::Config(msg)
    }

    pub fn exit_code(&self) -> u8 {
        match self {
            Self::Data(_) => 2,
            Self::Diverged(_) => 3,
            Self::Config(_) => 4,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Self::Data(msg) | Self::Diverged(msg) | Self::Config(msg) => f.write_str(msg),
        }
    }
}

impl From<bevroad_core::Error> for CliError {
    fn from(e: bevroad_core::Error) -> Self {
        use bevroad_core::Error as E;
        let msg = e.to_string();
        match e {
            E::Diverged(_) => Self::Diverged(msg),
            E::InvalidParameter(_) | E::ShapeMismatch(_) | E::Incompatible(_) => Self::Config(msg),
            _ => Self::Data(msg),
        }
    }
}

#[derive(Parser)]
#[command(name = "bevroad", version, about = "Road segmentation on bird's-eye-view camera and LiDAR rasters")]
struct Cli {
    /// Flat `key = value` configuration file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Override one configuration key (repeatable), e.g. --set train.lr=0.01.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,

    /// Worker threads for scene-level stages; 1 is the bit-reproducible
    /// reference.
    #[arg(long, global = true, default_value_t = 1)]
    jobs: usize,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic dataset in the raw on-disk layout.
    Synth {
        #[arg(long)]
        out: PathBuf,
        /// Number of scenes (overrides synth.scenes).
        #[arg(long)]
        scenes: Option<usize>,
        /// Generator seed (overrides synth.seed).
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Rasterize LiDAR and warp camera/labels into BEV space.
    Preprocess {
        /// Dataset root (image_2/, velodyne/, calib/, optional gt_image_2/).
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train one variant on preprocessed scenes.
    Train {
        /// Preprocessed scene directory.
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Model variant A-F (overrides model.variant).
        #[arg(long)]
        variant: Option<String>,
        /// Epoch count (overrides train.epochs).
        #[arg(long)]
        epochs: Option<usize>,
        /// Run seed (overrides train.seed).
        #[arg(long)]
        seed: Option<u64>,
    },
    /// k-fold cross-validation; --variant all compares every architecture.
    Crossval {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Model variant A-F or 'all' (overrides model.variant).
        #[arg(long)]
        variant: Option<String>,
        /// Fold count (overrides cv.k).
        #[arg(long)]
        k: Option<usize>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Rank every hyper-parameter combination of the grid.
    Gridsearch {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        variant: Option<String>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Emit confidence maps from a checkpoint.
    Predict {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score confidence maps against preprocessed ground truth.
    Evaluate {
        /// Directory of `<scene_id>.png` confidence maps.
        #[arg(long)]
        pred: PathBuf,
        /// Preprocessed scene directory holding ground truth.
        #[arg(long)]
        gt: PathBuf,
        /// Report directory (default: `<pred>_eval`).
        #[arg(long)]
        out: Option<PathBuf>,
        /// `category` (default) or `overall`.
        #[arg(long)]
        group: Option<String>,
    },
}

fn build_config(cli: &Cli) -> Result<Config, CliError> {
    let mut cfg = Config::default();
    if let Some(path) = &cli.config {
        cfg.apply_file(path)?;
    }
    cfg.apply_overrides(&cli.overrides)?;

    // Dedicated flags win over file and --set values.
    match &cli.command {
        Command::Synth { scenes, seed, .. } => {
            if let Some(n) = scenes {
                cfg.set("synth.scenes", &n.to_string())?;
            }
            if let Some(s) = seed {
                cfg.set("synth.seed", &s.to_string())?;
            }
        }
        Command::Train {
            variant,
            epochs,
            seed,
            ..
        } => {
            if let Some(v) = variant {
                cfg.set("model.variant", v)?;
            }
            if let Some(e) = epochs {
                cfg.set("train.epochs", &e.to_string())?;
            }
            if let Some(s) = seed {
                cfg.set("train.seed", &s.to_string())?;
            }
        }
        Command::Crossval {
            variant,
            k,
            epochs,
            seed,
            ..
        } => {
            if let Some(v) = variant {
                cfg.set("model.variant", v)?;
            }
            if let Some(k) = k {
                cfg.set("cv.k", &k.to_string())?;
            }
            if let Some(e) = epochs {
                cfg.set("train.epochs", &e.to_string())?;
            }
            if let Some(s) = seed {
                cfg.set("train.seed", &s.to_string())?;
            }
        }
        Command::Gridsearch { variant, seed, .. } => {
            if let Some(v) = variant {
                cfg.set("model.variant", v)?;
            }
            if let Some(s) = seed {
                cfg.set("train.seed", &s.to_string())?;
            }
        }
        Command::Preprocess { .. } | Command::Predict { .. } | Command::Evaluate { .. } => {}
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: &Cli) -> Result<(), CliError> {
    if cli.jobs == 0 {
        return Err(CliError::config("--jobs must be at least 1".into()));
    }
    rayon::ThreadPoolBuilder::new()
        .num_threads(cli.jobs)
        .build_global()
        .map_err(|e| CliError::config(format!("cannot configure {} jobs: {e}", cli.jobs)))?;

    let cfg = build_config(cli)?;
    match &cli.command {
        Command::Synth { out, .. } => commands::cmd_synth(&cfg, out),
        Command::Preprocess { data, out } => commands::cmd_preprocess(&cfg, data, out),
        Command::Train { data, out, .. } => commands::cmd_train(&cfg, data, out),
        Command::Crossval { data, out, .. } => commands::cmd_crossval(&cfg, data, out),
        Command::Gridsearch { data, out, .. } => commands::cmd_gridsearch(&cfg, data, out),
        Command::Predict {
            checkpoint,
            data,
            out,
        } => commands::cmd_predict(&cfg, checkpoint, data, out),
        Command::Evaluate {
            pred,
            gt,
            out,
            group,
        } => {
            let grouping = match group.as_deref() {
                None | Some("category") => Grouping::Category,
                Some("overall") => Grouping::Overall,
                Some(other) => {
                    return Err(CliError::config(format!(
                        "--group must be 'category' or 'overall', got '{other}'"
                    )))
                }
            };
            let out = out.clone().unwrap_or_else(|| commands::default_eval_out(pred));
            commands::cmd_evaluate(&cfg, pred, gt, &out, grouping)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
