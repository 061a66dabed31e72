use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use image::Rgb;
use serde::Serialize;

use posexfer::checkpoint::Checkpoint;
use posexfer::config::TrainConfig;
use posexfer::data::{decode_image, image_dimensions, load_manifest, KeypointSet, JOINT_NAMES};
use posexfer::descriptors::build_descriptors;
use posexfer::heatmap::{render_at, DEFAULT_SIGMA};
use posexfer::losses::{ExtractorConfig, FeatureExtractor};
use posexfer::metrics::MetricsReport;
use posexfer::synthetic::{write_dataset, SyntheticConfig};
use posexfer::train::{evaluate, infer, infer_sequence, train_with, EvalOptions, PairMetrics, TrainOptions};

#[derive(Parser)]
#[command(name = "posexfer", version, about = "Pose-guided appearance transfer")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train progressively over the configured ladder.
    Train(TrainArgs),
    /// Score a checkpoint on every pair of a manifest; prints JSON.
    Eval(EvalArgs),
    /// Render a reference image in a target pose.
    Infer(InferArgs),
    /// Render a reference image in each pose of a sequence.
    InferSequence(InferSequenceArgs),
    /// Write one greyscale PNG per pose heatmap channel.
    MakeHeatmaps(HeatmapArgs),
    /// Draw the descriptor windows over an image.
    DescriptorsPreview(PreviewArgs),
    /// Generate a procedural stick-figure dataset.
    MakeSynthetic(SyntheticArgs),
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Stop after this many global steps.
    #[arg(long)]
    stop_after: Option<u64>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    level: usize,
    /// Also write the JSON report here.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Per-pair scores as CSV.
    #[arg(long)]
    csv: Option<PathBuf>,
    #[arg(long)]
    max_pairs: Option<usize>,
    /// Score the ground truth against itself.
    #[arg(long)]
    self_check: bool,
    #[arg(long, env = "POSEXFER_EXTRACTOR_WEIGHTS")]
    extractor_weights: Option<PathBuf>,
}

#[derive(Args)]
struct InferArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    image: PathBuf,
    /// Target pose, in the reference image's pixel coordinates.
    #[arg(long)]
    keypoints: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct InferSequenceArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    image: PathBuf,
    /// One keypoint file per frame, in order.
    #[arg(long, num_args = 1.., required = true)]
    keypoints: Vec<PathBuf>,
    #[arg(long)]
    out_dir: PathBuf,
}

#[derive(Args)]
struct HeatmapArgs {
    #[arg(long)]
    keypoints: PathBuf,
    /// Image the keypoints refer to (for its resolution).
    #[arg(long, conflicts_with = "source_side")]
    image: Option<PathBuf>,
    /// Side of the square frame the keypoints refer to.
    #[arg(long)]
    source_side: Option<usize>,
    #[arg(long, default_value_t = 32)]
    grid: usize,
    #[arg(long, default_value_t = DEFAULT_SIGMA)]
    sigma: f32,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct PreviewArgs {
    #[arg(long)]
    image: PathBuf,
    #[arg(long)]
    keypoints: PathBuf,
    #[arg(long)]
    level: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct SyntheticArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 8)]
    subjects: usize,
    #[arg(long, default_value_t = 2)]
    frames: usize,
    #[arg(long, default_value_t = 128)]
    side: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Serialize)]
struct EvalOutput<'a> {
    checkpoint: &'a Path,
    checkpoint_level: usize,
    level: usize,
    report: &'a MetricsReport,
    pairs: &'a [PairMetrics],
}

fn load_keypoints_for(image: &Path, keypoints: &Path) -> Result<KeypointSet> {
    let res = image_dimensions(image)?;
    Ok(KeypointSet::load(keypoints, res)?)
}

fn eval_extractor(ckpt: &Checkpoint, weights: Option<PathBuf>) -> Result<FeatureExtractor<f32>> {
    let mut cfg = match ckpt.extra.get("train_config") {
        Some(t) => TrainConfig::from_toml(t).context("checkpoint carries an unreadable training config")?.extractor,
        None => ExtractorConfig::default(),
    };
    if weights.is_some() {
        cfg.weights = weights;
    }
    Ok(FeatureExtractor::build(&cfg)?)
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train(a) => {
            let cfg = TrainConfig::from_file(&a.config)?;
            let report = train_with(
                cfg,
                &TrainOptions {
                    resume: a.resume,
                    stop_after: a.stop_after,
                },
            )?;
            println!("{}", report.final_checkpoint.display());
        }
        Command::Eval(a) => {
            let ckpt = Checkpoint::load(&a.checkpoint)?;
            let manifest = load_manifest(&a.manifest)?;
            let fx = eval_extractor(&ckpt, a.extractor_weights)?;
            let mut opts = EvalOptions::at_level(a.level);
            opts.max_pairs = a.max_pairs;
            opts.self_check = a.self_check;
            let (report, rows) = evaluate(&ckpt, &manifest, &fx, &opts)?;
            let out = EvalOutput {
                checkpoint: &a.checkpoint,
                checkpoint_level: ckpt.level,
                level: a.level,
                report: &report,
                pairs: &rows,
            };
            let json = serde_json::to_string_pretty(&out)?;
            if let Some(p) = &a.out {
                fs::write(p, &json).with_context(|| format!("writing {}", p.display()))?;
            }
            if let Some(p) = &a.csv {
                let mut w = csv::Writer::from_path(p).with_context(|| format!("writing {}", p.display()))?;
                for r in &rows {
                    w.serialize(r)?;
                }
                w.flush()?;
            }
            println!("{json}");
        }
        Command::Infer(a) => {
            let ckpt = Checkpoint::load(&a.checkpoint)?;
            let reference = decode_image(&a.image, ckpt.level)?;
            let kp = load_keypoints_for(&a.image, &a.keypoints)?;
            infer(&ckpt, &reference, &kp)?.save_png(&a.out)?;
        }
        Command::InferSequence(a) => {
            let ckpt = Checkpoint::load(&a.checkpoint)?;
            let reference = decode_image(&a.image, ckpt.level)?;
            let frames = a
                .keypoints
                .iter()
                .map(|k| load_keypoints_for(&a.image, k))
                .collect::<Result<Vec<_>>>()?;
            fs::create_dir_all(&a.out_dir).with_context(|| format!("creating {}", a.out_dir.display()))?;
            for (i, img) in infer_sequence(&ckpt, &reference, &frames)?.iter().enumerate() {
                img.save_png(&a.out_dir.join(format!("frame_{i:04}.png")))?;
            }
        }
        Command::MakeHeatmaps(a) => {
            let res = match (&a.image, a.source_side) {
                (Some(img), _) => image_dimensions(img)?,
                (None, Some(s)) => (s, s),
                (None, None) => bail!("give --image or --source-side so the keypoint coordinates can be interpreted"),
            };
            if a.grid == 0 {
                bail!("--grid must be positive");
            }
            let kp = KeypointSet::load(&a.keypoints, res)?;
            let stack = render_at(&kp, (a.grid, a.grid), a.sigma)?;
            fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
            for (k, name) in JOINT_NAMES.iter().enumerate() {
                let ch = stack.channel(k);
                let img = image::GrayImage::from_fn(a.grid as u32, a.grid as u32, |x, y| {
                    let v = ch[y as usize * a.grid + x as usize];
                    image::Luma([(v.clamp(0.0, 1.0) * 255.0).round() as u8])
                });
                let p = a.out.join(format!("heatmap_{k:02}_{name}.png"));
                img.save(&p).with_context(|| format!("writing {}", p.display()))?;
            }
        }
        Command::DescriptorsPreview(a) => {
            let img = decode_image(&a.image, a.level)?;
            let kp = load_keypoints_for(&a.image, &a.keypoints)?.scale((a.level, a.level))?;
            let ds = build_descriptors(&kp, a.level)?;
            let mut rgb = img.to_rgb8();
            for r in ds.windows() {
                let last = r.side - 1;
                for i in 0..r.side {
                    for (x, y) in [(i, 0), (i, last), (0, i), (last, i)] {
                        rgb.put_pixel((r.x0 + x) as u32, (r.y0 + y) as u32, Rgb([255, 32, 32]));
                    }
                }
            }
            rgb.save(&a.out).with_context(|| format!("writing {}", a.out.display()))?;
            println!("{} descriptors, window side {}", ds.len(), ds.window_side);
        }
        Command::MakeSynthetic(a) => {
            let cfg = SyntheticConfig {
                subjects: a.subjects,
                frames: a.frames,
                side: a.side,
                seed: a.seed,
            };
            println!("{}", write_dataset(&a.out, &cfg)?.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
