//! Command-line entry point: `fixture`, `init`, `train`, `render`, and
//! `evaluate` pipeline stages over config files.
//!
//! Exit codes: 0 success, 2 bad config/usage, 3 asset error, 4 adapter
//! error, 5 numeric failure.

use avatar_core::error::Error as CoreError;
use avatar_core::io_formats::config_schema;
use avatar_core::pipeline::{run_evaluate, run_fixture, run_render, run_training, TrainPaths};
use avatar_core::trainer::Ablation;
use clap::{Args, Parser, Subcommand};
use std::path::PathBuf;

fn config_keys_help() -> String {
    let mut out =
        String::from("Config file keys (flat `key = value` text; unknown keys rejected):\n");
    for entry in config_schema() {
        out.push_str(&format!(
            "  {:<30} default: {:<24} {}\n",
            entry.key,
            if entry.default.is_empty() {
                "(empty)"
            } else {
                entry.default
            },
            entry.doc
        ));
    }
    out
}

#[derive(Parser)]
#[command(
    name = "avatar",
    version,
    about = "One-shot animatable avatar reconstruction and free-viewpoint rendering",
    after_long_help = config_keys_help()
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct AssetArgs {
    /// Training config file.
    #[arg(long)]
    config: PathBuf,
    /// Body-model archive directory.
    #[arg(long)]
    model: PathBuf,
    /// Input image (PNG).
    #[arg(long)]
    image: PathBuf,
    /// Input segmentation mask (PNG).
    #[arg(long)]
    mask: PathBuf,
    /// Camera file; the first record is the input camera.
    #[arg(long)]
    camera: PathBuf,
    /// Shape coefficients (one row of 10 reals).
    #[arg(long)]
    shape: PathBuf,
    /// Input pose (one row of 72 reals).
    #[arg(long)]
    input_pose: PathBuf,
    /// Motion sequence (72 reals per frame).
    #[arg(long)]
    motion: PathBuf,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
}

impl AssetArgs {
    fn paths(&self) -> TrainPaths {
        TrainPaths {
            config: self.config.clone(),
            model: self.model.clone(),
            image: self.image.clone(),
            mask: self.mask.clone(),
            camera: self.camera.clone(),
            shape: self.shape.clone(),
            input_pose: self.input_pose.clone(),
            motion: self.motion.clone(),
            out: self.out.clone(),
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Write the capsule end-to-end fixture (archive, motion, cameras,
    /// pseudo-ground-truth input, desk config).
    Fixture {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 42)]
        seed: u64,
    },
    /// Run only the mesh-render initialization stage and write a checkpoint.
    Init {
        #[command(flatten)]
        assets: AssetArgs,
    },
    /// Run the full two-stage optimization (init + one-shot).
    Train {
        #[command(flatten)]
        assets: AssetArgs,
        /// Ablation switches (repeatable or comma-separated): no_init,
        /// no_semantic, no_geometry, hard_geometry, no_hybrid_sampling,
        /// input_pose_only.
        #[arg(long, value_delimiter = ',')]
        ablation: Vec<String>,
        /// Resume from an existing checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Render one frame per (pose, camera) pair from a checkpoint.
    Render {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Body-model archive; defaults to the path recorded in the
        /// checkpoint.
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long)]
        motion: PathBuf,
        #[arg(long)]
        cameras: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 128)]
        samples: usize,
        /// Ray-bound dilation around the posed mesh, meters.
        #[arg(long, default_value_t = 0.15)]
        margin: f64,
    },
    /// Compute PSNR / SSIM / perceptual tables over rendered frames.
    Evaluate {
        #[arg(long)]
        rendered: PathBuf,
        #[arg(long)]
        truth: PathBuf,
        #[arg(long)]
        masks: PathBuf,
        /// Report output directory (CSV + JSON).
        #[arg(long)]
        out: PathBuf,
        /// Subject bbox margin in pixels.
        #[arg(long, default_value_t = 4)]
        margin: i64,
        /// Perceptual metric: builtin | zero | adapter:<locator>.
        #[arg(long, default_value = "builtin")]
        perceptual: String,
    },
}

fn run() -> Result<(), CoreError> {
    let cli = Cli::parse();
    match cli.command {
        Command::Fixture { out, seed } => {
            run_fixture(&out, seed)?;
            println!("fixture written to {}", out.display());
        }
        Command::Init { assets } => {
            let summary = run_training(&assets.paths(), vec![], None, true)?;
            println!(
                "init finished at iteration {} (input-view PSNR {:.2} dB)",
                summary.iterations, summary.psnr_input_view_final
            );
        }
        Command::Train {
            assets,
            ablation,
            resume,
        } => {
            let ablations = ablation
                .iter()
                .map(|a| a.parse::<Ablation>())
                .collect::<Result<Vec<_>, _>>()?;
            let summary = run_training(&assets.paths(), ablations, resume.as_deref(), false)?;
            println!(
                "train finished at iteration {} (input-view PSNR {:.2} dB, IoU {:.3})",
                summary.iterations, summary.psnr_input_view_final, summary.silhouette_iou_final
            );
        }
        Command::Render {
            checkpoint,
            model,
            motion,
            cameras,
            out,
            samples,
            margin,
        } => {
            let count = run_render(
                &checkpoint,
                model.as_deref(),
                &motion,
                &cameras,
                &out,
                samples,
                margin,
            )?;
            println!("rendered {count} frames to {}", out.display());
        }
        Command::Evaluate {
            rendered,
            truth,
            masks,
            out,
            margin,
            perceptual,
        } => {
            let report = run_evaluate(&rendered, &truth, &masks, &out, margin, &perceptual)?;
            println!(
                "evaluated {} frames: PSNR {:.2} dB, SSIM {:.4}, perceptual {:.4} ({})",
                report.frames.len(),
                report.mean_psnr,
                report.mean_ssim,
                report.mean_perceptual,
                report.perceptual_metric
            );
        }
    }
    Ok(())
}

fn main() {
    if let Err(err) = run() {
        eprintln!("error: {err}");
        std::process::exit(err.exit_code());
    }
}
