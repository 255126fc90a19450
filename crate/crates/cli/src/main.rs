use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use intensim::evaluation::{
    ablation_csv, ablation_matrix, ablation_table, error_heatmap, error_histogram, frame_mse,
    mse_csv, render_intensity, save_gray, AblationEntry, DEFAULT_BINS,
};
use intensim::formats::write_file;
use intensim::ingest::{colorize, read_camera, read_labels, read_point_cloud_scaled, write_labels, write_point_cloud};
use intensim::pipeline::{build_frames_with, frame_seed, prepare_frame, test_frames, DataSource, TrainConfig};
use intensim::synth::synth_scene;
use intensim::{incidence_channel, ArchKind, Checkpoint, Error, ErrorKind, Result, SphericalImage};

#[derive(Parser)]
#[command(name = "intensim", version, about = "LiDAR intensity simulation from projected point clouds")]
struct Cli {
    /// Flat `key = value` configuration file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Sequential preprocessing; results are bitwise reproducible.
    #[arg(long, global = true)]
    deterministic: bool,
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Overrides one configuration key, e.g. `--set epochs=5`.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate synthetic scans with labels and exact incidence angles.
    Synth {
        #[arg(long)]
        out: PathBuf,
        /// Number of scans (default: the configured frame count).
        #[arg(long)]
        frames: Option<usize>,
    },
    /// Project one scan onto the range-image grid.
    Project {
        #[command(flatten)]
        scan: ScanArgs,
        /// Estimate incidence angles and include them.
        #[arg(long)]
        incidence: bool,
        /// Packed float planes output.
        #[arg(long)]
        out: PathBuf,
        /// Optional 16-bit PGM of the depth plane.
        #[arg(long)]
        depth_pgm: Option<PathBuf>,
    },
    /// Estimate per-point incidence angles of one scan.
    Angles {
        #[command(flatten)]
        scan: ScanArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model; writes metrics.csv, best.ckpt and final.ckpt.
    Train {
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Masked MSE of a checkpoint on the test split.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Evaluate several checkpoints and emit the combo ablation table.
    Ablation {
        #[arg(long = "checkpoint", required = false)]
        checkpoints: Vec<PathBuf>,
        /// Dataset name used in the table.
        #[arg(long, default_value = "synthetic")]
        dataset: String,
        /// One column per combo instead of one row per combo.
        #[arg(long)]
        wide: bool,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Histogram of the signed error over masked test pixels.
    Histogram {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value_t = DEFAULT_BINS)]
        bins: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Per-pixel mean squared error over the test split.
    Heatmap {
        #[arg(long)]
        checkpoint: PathBuf,
        /// 16-bit PGM output.
        #[arg(long)]
        out: PathBuf,
        /// Raw float sidecar (default: `<out>.lsi`).
        #[arg(long)]
        sidecar: Option<PathBuf>,
    },
    /// Reference and predicted intensity images of one test frame.
    Render {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Index into the test split.
        #[arg(long, default_value_t = 0)]
        frame: usize,
        #[arg(long)]
        reference: PathBuf,
        #[arg(long)]
        predicted: PathBuf,
    },
}

#[derive(Args)]
struct ScanArgs {
    /// Velodyne `.bin` scan.
    #[arg(long)]
    scan: PathBuf,
    /// SemanticKITTI `.label` file.
    #[arg(long)]
    labels: Option<PathBuf>,
    /// Camera image and projection matrix file.
    #[arg(long, num_args = 2, value_names = ["IMAGE", "CALIB"])]
    camera: Vec<PathBuf>,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(match e.kind() {
                ErrorKind::Config => 2,
                ErrorKind::Data => 3,
                ErrorKind::TrainingFault => 4,
            })
        }
    }
}

fn config(cli: &Cli) -> Result<TrainConfig> {
    let mut cfg = match &cli.config {
        Some(path) => TrainConfig::load(path)?,
        None => TrainConfig::new(ArchKind::UNet),
    };
    let arch_override = cli.overrides.iter().find_map(|o| o.strip_prefix("arch="));
    if let Some(arch) = arch_override {
        if cli.config.is_none() {
            cfg = TrainConfig::new(arch.trim().parse()?);
        }
    }
    for o in &cli.overrides {
        let (k, v) = o
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("`--set {o}` is not KEY=VALUE")))?;
        cfg.set(k.trim(), v.trim())?;
    }
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if cli.deterministic {
        cfg.deterministic = true;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn load_scan(args: &ScanArgs, cfg: &TrainConfig) -> Result<intensim::PointCloud32> {
    let (mut cloud, report) = read_point_cloud_scaled::<f32>(&args.scan, cfg.intensity_max)?;
    log::info!(
        "{}: {} records, {} kept, {} dropped",
        args.scan.display(),
        report.records,
        report.kept,
        report.dropped()
    );
    if let Some(path) = &args.labels {
        let raw = read_labels(path, report.records)?;
        cloud = cloud.with_labels(report.kept_indices.iter().map(|&i| raw[i]).collect())?;
    }
    if let [image, calib] = args.camera.as_slice() {
        cloud = colorize(cloud, &read_camera(image, calib)?)?;
    }
    Ok(cloud)
}

/// Test-split frames carrying the modalities `ck` needs.
fn eval_frames(cfg: &TrainConfig, ck: &Checkpoint<f32>) -> Result<Vec<SphericalImage<f32>>> {
    let frames = build_frames_with::<f32>(cfg, ck.combo.incidence)?;
    let test = test_frames(cfg, frames)?;
    if test.is_empty() {
        return Err(Error::Config("the test split is empty".into()));
    }
    Ok(test)
}

fn emit(out: Option<&Path>, text: &str) -> Result<()> {
    match out {
        Some(path) => write_file(path, text.as_bytes()),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    if let Some(n) = cli.threads.or(cli.deterministic.then_some(1)) {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n.max(1))
            .build_global()
            .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    }
    let cfg = config(&cli)?;
    match &cli.command {
        Command::Synth { out, frames } => {
            let (n, scene) = match &cfg.data {
                DataSource::Synthetic { frames: n, scene } => (frames.unwrap_or(*n), scene),
                DataSource::FrameList(_) => {
                    return Err(Error::Config("synth needs a synthetic data source".into()))
                }
            };
            let mut list = String::new();
            for i in 0..n {
                let f = synth_scene::<f32>(frame_seed(cfg.seed, i), scene, &cfg.projection)?;
                let stem = format!("{i:06}");
                write_point_cloud(&f.cloud, &out.join(format!("{stem}.bin")))?;
                write_labels(f.cloud.label.as_deref().unwrap_or(&[]), &out.join(format!("{stem}.label")))?;
                let mut csv = String::from("index,angle_rad\n");
                for (k, a) in f.analytic_angles.iter().enumerate() {
                    csv.push_str(&format!("{k},{a}\n"));
                }
                write_file(&out.join(format!("{stem}.angles.csv")), csv.as_bytes())?;
                list.push_str(&format!("{stem}.bin {stem}.label\n"));
                log::info!("frame {stem}: {} points, {} rays without a hit", f.cloud.len(), f.no_hit);
            }
            write_file(&out.join("frames.txt"), list.as_bytes())
        }
        Command::Project { scan, incidence, out, depth_pgm } => {
            let cloud = load_scan(scan, &cfg)?;
            let img = prepare_frame(cloud, &cfg.projection, incidence.then_some(cfg.neighbors))?;
            log::info!("{} of {} pixels hit", img.hits(), cfg.projection.pixels());
            img.to_packed().save(out)?;
            if let Some(path) = depth_pgm {
                let depth = img.plane(intensim::Channel::Depth).unwrap_or(&[]);
                let px: Vec<u16> = depth
                    .iter()
                    .map(|&d| intensim::formats::quantize16(d as f64, 1.0))
                    .collect();
                write_file(path, &intensim::formats::encode_pgm16(img.width(), img.height(), &px))?;
            }
            Ok(())
        }
        Command::Angles { scan, out } => {
            let cloud = load_scan(scan, &cfg)?;
            let inc = incidence_channel(&cloud, cfg.neighbors)?;
            log::info!("{} of {} points degenerate", inc.degenerate_count(), cloud.len());
            inc.save_csv(out)
        }
        Command::Train { out } => {
            let mut cfg = cfg.clone();
            if out.is_some() {
                cfg.out_dir = out.clone();
            }
            if cfg.out_dir.is_none() {
                cfg.out_dir = Some(PathBuf::from("run"));
            }
            let report = intensim::pipeline::train::<f32>(&cfg)?;
            let dir = cfg.out_dir.as_deref().unwrap_or(Path::new("."));
            write_file(&dir.join("config.txt"), cfg.to_kv().as_bytes())?;
            println!(
                "best epoch {} val masked_mse {:.6}; final {:.6}; test {}",
                report.best_epoch,
                report.best_val_mse,
                report.final_val_mse,
                report.test_mse.map_or("-".into(), |v| format!("{v:.6}"))
            );
            Ok(())
        }
        Command::Eval { checkpoint, out } => {
            let ck = Checkpoint::<f32>::load(checkpoint, None)?;
            let frames = eval_frames(&cfg, &ck)?;
            emit(out.as_deref(), &mse_csv(&frame_mse(&ck, &frames)?))
        }
        Command::Ablation { checkpoints, dataset, wide, out } => {
            let mut entries = Vec::new();
            for path in checkpoints {
                let ck = Checkpoint::<f32>::load(path, None)?;
                let mse = match eval_frames(&cfg, &ck) {
                    Ok(frames) if frames.iter().all(|f| f.supports(&ck.combo)) => {
                        Some(intensim::evaluation::eval_mse(&ck, &frames)?)
                    }
                    Ok(_) | Err(Error::ModalityUnavailable(_)) => None,
                    Err(e) => return Err(e),
                };
                entries.push(AblationEntry {
                    arch: ck.kind,
                    dataset: dataset.clone(),
                    combo: ck.combo,
                    mse,
                });
            }
            let rows = ablation_matrix(&entries);
            let text = if *wide { ablation_table(&rows) } else { ablation_csv(&rows) };
            emit(out.as_deref(), &text)
        }
        Command::Histogram { checkpoint, bins, out } => {
            let ck = Checkpoint::<f32>::load(checkpoint, None)?;
            let frames = eval_frames(&cfg, &ck)?;
            write_file(out, error_histogram(&ck, &frames, *bins)?.to_csv().as_bytes())
        }
        Command::Heatmap { checkpoint, out, sidecar } => {
            let ck = Checkpoint::<f32>::load(checkpoint, None)?;
            let frames = eval_frames(&cfg, &ck)?;
            let side = sidecar.clone().unwrap_or_else(|| out.with_extension("lsi"));
            error_heatmap(&ck, &frames)?.save(out, &side)
        }
        Command::Render { checkpoint, frame, reference, predicted } => {
            let ck = Checkpoint::<f32>::load(checkpoint, None)?;
            let frames = eval_frames(&cfg, &ck)?;
            let f = frames.get(*frame).ok_or_else(|| {
                Error::Config(format!("frame {frame} outside the {}-frame test split", frames.len()))
            })?;
            let (a, b) = render_intensity(&ck, f)?;
            save_gray(reference, f.width(), f.height(), &a)?;
            save_gray(predicted, f.width(), f.height(), &b)
        }
    }
}
