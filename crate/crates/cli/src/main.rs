use std::fs::{self, File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use log::{info, LevelFilter};
use pmmseg_core::ablate::{run_ablation, Axis};
use pmmseg_core::data::manifest::{generate_dataset, GenerateOptions};
use pmmseg_core::data::pnm::{self, Encoding};
use pmmseg_core::data::{sample_episode, Phase, ShapeGenerator, SplitSpec};
use pmmseg_core::eval::{evaluate, EvalConfig};
use pmmseg_core::image::{GrayImage, RgbImage};
use pmmseg_core::net::{Checkpoint, EpisodeInput, PmmNet};
use pmmseg_core::seed;
use pmmseg_core::train::{RunConfig, Trainer};
use pmmseg_core::{Error, Result};

#[derive(Parser)]
#[command(name = "pmmseg", version, about = "Few-shot segmentation with prototype mixture models")]
struct Cli {
    /// Log progress to stderr (repeat for more detail).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write the dataset manifest and preview images.
    GenData {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 4)]
        folds: usize,
        /// Preview samples rendered per category.
        #[arg(long, default_value_t = 2)]
        previews: usize,
    },
    /// Train a model and write its checkpoint.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        fold: Option<usize>,
        #[arg(long)]
        shots: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
        /// Continue from this checkpoint at its saved step.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// NDJSON metrics log; defaults to `<out>.metrics.ndjson`.
        /// Periodic checkpoints go to `<out>.step<N>`.
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on test episodes.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long, default_value_t = 0)]
        fold: usize,
        #[arg(long, default_value_t = 1)]
        shots: usize,
        #[arg(long, default_value_t = 1000)]
        episodes: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        report: PathBuf,
    },
    /// Write probability maps, prediction and overlay for one test episode.
    Inspect {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        episode_seed: u64,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        fold: usize,
        #[arg(long, default_value_t = 1)]
        shots: usize,
        /// Branch whose maps are written.
        #[arg(long, default_value_t = 0)]
        branch: usize,
    },
    /// Train and evaluate every arm of an ablation axis.
    Ablate {
        #[arg(long)]
        axis: Axis,
        #[arg(long)]
        config: PathBuf,
        /// Paired replicate seeds shared by all arms.
        #[arg(long, value_delimiter = ',', default_value = "0,1,2,3,4")]
        seeds: Vec<u64>,
        /// Directory for the markdown and JSON tables.
        #[arg(long)]
        out: PathBuf,
    },
}

fn read_config(path: &Path) -> Result<RunConfig> {
    let bytes = fs::read(path).map_err(|e| io_error(path, e))?;
    let cfg: RunConfig = serde_json::from_slice(&bytes)?;
    cfg.validate()?;
    Ok(cfg)
}

fn io_error(path: &Path, e: std::io::Error) -> Error {
    Error::io(path, e)
}

fn with_suffix(path: &Path, suffix: &str) -> PathBuf {
    let mut p = path.as_os_str().to_owned();
    p.push(suffix);
    PathBuf::from(p)
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| io_error(dir, e))?;
    }
    fs::write(path, bytes).map_err(|e| io_error(path, e))
}

fn gen_data(out: &Path, seed: u64, folds: usize, previews: usize) -> Result<()> {
    let manifest = generate_dataset(
        out,
        &GenerateOptions {
            seed,
            folds,
            previews_per_category: previews,
            ..GenerateOptions::default()
        },
    )?;
    println!("wrote {} previews and manifest to {}", manifest.previews.len(), out.display());
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn train(
    config: &Path,
    fold: Option<usize>,
    shots: Option<usize>,
    seed: Option<u64>,
    out: &Path,
    resume: Option<&Path>,
    log: Option<&Path>,
) -> Result<()> {
    let mut run = read_config(config)?;
    if let Some(f) = fold {
        run.train.fold = f;
        run.eval.fold = f;
    }
    if let Some(s) = shots {
        run.train.shots = s;
        run.eval.shots = s;
    }
    if let Some(s) = seed {
        run.train.seed = s;
    }
    run.validate()?;
    let mut trainer = match resume {
        Some(path) => {
            let ck = Checkpoint::read(path)?;
            if ck.model != run.model {
                return Err(Error::InvalidArgument(format!(
                    "model section of {} differs from the checkpoint's",
                    config.display()
                )));
            }
            info!("resuming from {} at step {}", path.display(), ck.step);
            Trainer::resume(ck, run.train.clone())?
        }
        None => Trainer::new(PmmNet::new(run.model.clone())?, run.train.clone())?,
    };
    let log_path = log
        .map(Path::to_path_buf)
        .unwrap_or_else(|| with_suffix(out, ".metrics.ndjson"));
    let file = OpenOptions::new()
        .create(true)
        .write(true)
        .append(resume.is_some())
        .truncate(resume.is_none())
        .open(&log_path)
        .map_err(|e| io_error(&log_path, e))?;
    let mut writer = BufWriter::new(file);
    let echo = serde_json::to_value(&run)?;
    let records = trainer.run(&mut writer, |t| {
        let path = with_suffix(out, &format!(".step{}", t.step()));
        info!("checkpoint {}", path.display());
        t.checkpoint(echo.clone()).write(&path)
    })?;
    writer.flush().map_err(|e| io_error(&log_path, e))?;
    trainer.checkpoint(echo).write(out)?;
    match (records.first(), records.last()) {
        (Some(first), Some(last)) => println!(
            "trained steps {}..={}: loss {:.4} -> {:.4}; checkpoint {}",
            first.step,
            last.step,
            first.loss,
            last.loss,
            out.display()
        ),
        _ => println!("nothing to train; checkpoint {}", out.display()),
    }
    Ok(())
}

fn eval(ckpt: &Path, cfg: EvalConfig, report: &Path) -> Result<()> {
    let ck = Checkpoint::read(ckpt)?;
    let net = PmmNet::from_params(ck.model, ck.params)?;
    let mut result = evaluate(&net, &cfg)?;
    result.config["checkpoint"] = serde_json::json!({ "step": ck.step, "run": ck.run });
    write_json(report, &result)?;
    println!(
        "mIoU {:.4} over {} episodes ({} skipped); report {}",
        result.mean_iou,
        result.episodes,
        result.skipped,
        report.display()
    );
    Ok(())
}

fn overlay(image: &RgbImage, mask: &pmmseg_core::image::Mask) -> RgbImage {
    let mut out = image.clone();
    for y in 0..image.height() {
        for x in 0..image.width() {
            if mask.get(x, y) == 1 {
                let [r, g, b] = image.get(x, y);
                out.set(x, y, [((r as u16 + 255) / 2) as u8, g / 2, b / 2]);
            }
        }
    }
    out
}

fn channel(t: &pmmseg_core::tensor::Tensor, c: usize) -> Result<GrayImage> {
    let (h, w, n) = t.dims3()?;
    let probs: Vec<f64> = t.data().iter().skip(c).step_by(n).copied().collect();
    GrayImage::from_probabilities(w, h, &probs)
}

fn inspect(ckpt: &Path, episode_seed: u64, out: &Path, fold: usize, shots: usize, branch: usize) -> Result<()> {
    let ck = Checkpoint::read(ckpt)?;
    let net = PmmNet::from_params(ck.model.clone(), ck.params)?;
    let cfg = net.config();
    if branch >= cfg.branches {
        return Err(Error::InvalidArgument(format!(
            "branch {branch} out of range for {} branches",
            cfg.branches
        )));
    }
    let generator = ShapeGenerator::new(cfg.image_size, cfg.feature_size())?;
    let split = SplitSpec::for_fold(fold)?;
    let episode = sample_episode(&generator, &split, Phase::Test, shots, &mut seed::rng(episode_seed))?;
    let pred = net.predict(&EpisodeInput::from_episode(&episode, cfg)?)?;
    fs::create_dir_all(out).map_err(|e| io_error(out, e))?;
    let maps = &pred.per_prototype[branch];
    let mut written = Vec::new();
    for k in 0..cfg.k {
        for (sign, offset) in [("pos", 0), ("neg", cfg.k)] {
            let name = format!("proto_{sign}_{k}.pgm");
            pnm::write_pgm(out.join(&name), &channel(maps, offset + k)?, Encoding::Plain)?;
            written.push(name);
        }
    }
    let extra = [
        ("fused_pos.pgm", None),
        ("prediction.pgm", Some(false)),
        ("overlay.ppm", Some(true)),
    ];
    for (name, kind) in extra {
        let path = out.join(name);
        match kind {
            None => pnm::write_pgm(&path, &channel(&pred.fused[branch], 0)?, Encoding::Plain)?,
            Some(false) => pnm::write_mask(&path, &pred.mask, Encoding::Plain)?,
            Some(true) => pnm::write_ppm(&path, &overlay(&episode.query.image, &pred.mask), Encoding::Raw)?,
        }
        written.push(name.to_string());
    }
    let info = serde_json::json!({
        "checkpoint": ckpt,
        "episode_seed": episode_seed,
        "category_id": episode.category_id,
        "fold": fold,
        "shots": shots,
        "branch": branch,
        "images": written,
        "model": cfg,
        "run": ck.run,
    });
    write_json(&out.join("inspect.json"), &info)?;
    println!("wrote {} images to {}", written.len(), out.display());
    Ok(())
}

fn ablate(axis: Axis, config: &Path, seeds: &[u64], out: &Path) -> Result<()> {
    let base = read_config(config)?;
    let table = run_ablation(axis, &base, seeds)?;
    let name = serde_json::to_value(axis)?.as_str().unwrap_or("axis").to_string();
    write_json(&out.join(format!("ablation_{name}.json")), &table)?;
    let md = table.to_markdown();
    let md_path = out.join(format!("ablation_{name}.md"));
    let mut f = File::create(&md_path).map_err(|e| io_error(&md_path, e))?;
    f.write_all(md.as_bytes()).map_err(|e| io_error(&md_path, e))?;
    print!("{md}");
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData {
            out,
            seed,
            folds,
            previews,
        } => gen_data(&out, seed, folds, previews),
        Command::Train {
            config,
            fold,
            shots,
            seed,
            out,
            resume,
            log,
        } => train(&config, fold, shots, seed, &out, resume.as_deref(), log.as_deref()),
        Command::Eval {
            ckpt,
            fold,
            shots,
            episodes,
            seed,
            report,
        } => eval(
            &ckpt,
            EvalConfig {
                episodes,
                shots,
                fold,
                seed,
            },
            &report,
        ),
        Command::Inspect {
            ckpt,
            episode_seed,
            out,
            fold,
            shots,
            branch,
        } => inspect(&ckpt, episode_seed, &out, fold, shots, branch),
        Command::Ablate {
            axis,
            config,
            seeds,
            out,
        } => ablate(axis, &config, &seeds, &out),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => LevelFilter::Warn,
        1 => LevelFilter::Info,
        _ => LevelFilter::Debug,
    };
    env_logger::Builder::new().filter_level(level).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
