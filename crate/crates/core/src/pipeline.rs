//! Dataset assembly, splitting, and the training loop for both
//! architectures.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use intensim_tensor::{Adam, AdamConfig, Array, Scalar};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::evaluation::eval_mse;
use crate::geometry::incidence_channel;
use crate::ingest::{colorize, read_camera, read_labels, read_point_cloud_scaled, PointCloud};
use crate::models::{
    build_unet, pix2pix_step, unet_step, ArchKind, Checkpoint, Normalization, OutputHead,
    PatchGan, StepLogs, TrainObjective,
};
use crate::projection::{select_channels, spherical_project, ModalityCombo, ProjectionConfig, SphericalImage};
use crate::synth::{synth_scene, SynthSceneConfig};

/// Where frames come from.
#[derive(Clone, Debug, PartialEq)]
pub enum DataSource {
    Synthetic { frames: usize, scene: SynthSceneConfig },
    /// Text file with one frame per line:
    /// `scan.bin [labels.label] [image.png calib.txt]`, relative to the file.
    FrameList(PathBuf),
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub arch: ArchKind,
    pub combo: ModalityCombo,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub lambda: f64,
    pub gp_coeff: f64,
    pub seed: u64,
    pub base_width: usize,
    pub depth: usize,
    pub disc_width: usize,
    pub projection: ProjectionConfig,
    /// Neighbors used for normal estimation.
    pub neighbors: usize,
    pub data: DataSource,
    pub split: [usize; 3],
    /// Raw intensity that maps to 1.0 when reading scans.
    pub intensity_max: f64,
    pub out_dir: Option<PathBuf>,
    pub deterministic: bool,
}

impl TrainConfig {
    /// Desk-scale defaults for `arch`.
    pub fn new(arch: ArchKind) -> Self {
        let (lr, weight_decay, beta1, lambda, gp_coeff) = match arch {
            ArchKind::UNet => (0.003, 0.001, 0.9, 0.0, 0.0),
            ArchKind::Pix2Pix => (0.0002, 0.0, 0.5, 100.0, 10.0),
        };
        Self {
            arch,
            combo: "D+L+I".parse().expect("valid combo"),
            epochs: 30,
            batch_size: 4,
            lr,
            weight_decay,
            beta1,
            beta2: 0.999,
            lambda,
            gp_coeff,
            seed: 1,
            base_width: 32,
            depth: 5,
            disc_width: 32,
            projection: ProjectionConfig::with_size(64, 256),
            neighbors: 16,
            data: DataSource::Synthetic {
                frames: 300,
                scene: SynthSceneConfig::default(),
            },
            split: [200, 50, 50],
            intensity_max: 1.0,
            out_dir: None,
            deterministic: false,
        }
    }

    /// Parses `key = value` lines; `#` starts a comment. `arch` is read
    /// first so that its defaults apply to unset keys.
    pub fn from_kv(text: &str) -> Result<Self> {
        let pairs = parse_kv(text)?;
        let arch = pairs
            .iter()
            .rev()
            .find(|(k, _)| k == "arch")
            .map(|(_, v)| v.parse())
            .transpose()?
            .unwrap_or(ArchKind::UNet);
        let mut cfg = Self::new(arch);
        for (k, v) in &pairs {
            cfg.set(k, v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::from_kv(&text)?;
        // Relative data paths resolve against the config file.
        if let DataSource::FrameList(p) = &mut cfg.data {
            if p.is_relative() {
                if let Some(dir) = path.parent() {
                    *p = dir.join(&*p);
                }
            }
        }
        Ok(cfg)
    }

    /// Sets one documented key.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn num<V: std::str::FromStr>(key: &str, v: &str) -> Result<V> {
            v.trim()
                .parse()
                .map_err(|_| Error::Config(format!("`{key}`: cannot parse `{v}`")))
        }
        fn scene<'a>(d: &'a mut DataSource, key: &str) -> Result<&'a mut SynthSceneConfig> {
            match d {
                DataSource::Synthetic { scene, .. } => Ok(scene),
                DataSource::FrameList(_) => Err(Error::Config(format!(
                    "`{key}` only applies to synthetic data"
                ))),
            }
        }
        match key {
            "arch" => self.arch = value.parse()?,
            "combo" => self.combo = value.parse()?,
            "epochs" => self.epochs = num(key, value)?,
            "batch_size" => self.batch_size = num(key, value)?,
            "lr" => self.lr = num(key, value)?,
            "weight_decay" => self.weight_decay = num(key, value)?,
            "beta1" => self.beta1 = num(key, value)?,
            "beta2" => self.beta2 = num(key, value)?,
            "lambda" => self.lambda = num(key, value)?,
            "gp_coeff" => self.gp_coeff = num(key, value)?,
            "seed" => self.seed = num(key, value)?,
            "base_width" => self.base_width = num(key, value)?,
            "depth" => self.depth = num(key, value)?,
            "disc_width" => self.disc_width = num(key, value)?,
            "height" => self.projection.height = num(key, value)?,
            "width" => self.projection.width = num(key, value)?,
            "fov_up_deg" => self.projection.fov_up = num::<f64>(key, value)?.to_radians(),
            "fov_down_deg" => self.projection.fov_down = num::<f64>(key, value)?.to_radians(),
            "r_max" => self.projection.r_max = num(key, value)?,
            "neighbors" => self.neighbors = num(key, value)?,
            "intensity_max" => self.intensity_max = num(key, value)?,
            "deterministic" => self.deterministic = num(key, value)?,
            "out_dir" => self.out_dir = Some(PathBuf::from(value.trim())),
            "split" => {
                let parts: Vec<usize> = value
                    .split(',')
                    .map(|p| num(key, p))
                    .collect::<Result<_>>()?;
                self.split = parts
                    .try_into()
                    .map_err(|_| Error::Config("`split` needs three sizes: train,val,test".into()))?;
            }
            "frames" => match &mut self.data {
                DataSource::Synthetic { frames, .. } => *frames = num(key, value)?,
                DataSource::FrameList(_) => {
                    return Err(Error::Config("`frames` conflicts with `frame_list`".into()))
                }
            },
            "frame_list" => self.data = DataSource::FrameList(PathBuf::from(value.trim())),
            "n_planes" => scene(&mut self.data, key)?.n_planes = num(key, value)?,
            "n_boxes" => scene(&mut self.data, key)?.n_boxes = num(key, value)?,
            "n_cylinders" => scene(&mut self.data, key)?.n_cylinders = num(key, value)?,
            "attenuation" => scene(&mut self.data, key)?.attenuation = num(key, value)?,
            "noise_sigma" => scene(&mut self.data, key)?.noise_sigma = num(key, value)?,
            other => return Err(Error::Config(format!("unknown config key `{other}`"))),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.projection.validate()?;
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("epochs and batch_size must be positive".into()));
        }
        if self.neighbors < 3 {
            return Err(Error::Config("neighbors must be at least 3".into()));
        }
        if !(self.intensity_max > 0.0) {
            return Err(Error::Config("intensity_max must be positive".into()));
        }
        self.adam(self.arch == ArchKind::Pix2Pix).validate()?;
        self.objective().validate()?;
        if self.split[0] == 0 || self.split[1] == 0 {
            return Err(Error::Config("train and validation splits must be non-empty".into()));
        }
        if let DataSource::Synthetic { frames, scene } = &self.data {
            scene.validate()?;
            check_split(*frames, self.split)?;
        }
        let f = 1usize << self.depth;
        if self.projection.height % f != 0 || self.projection.width % f != 0 {
            return Err(Error::Config(format!(
                "grid {}×{} is not divisible by 2^{}",
                self.projection.height, self.projection.width, self.depth
            )));
        }
        if self.arch == ArchKind::Pix2Pix {
            PatchGan::<f32>::logit_size(self.projection.height, self.projection.width)?;
        }
        Ok(())
    }

    pub fn objective(&self) -> TrainObjective {
        match self.arch {
            ArchKind::UNet => TrainObjective::masked_l2(),
            ArchKind::Pix2Pix => TrainObjective::pix2pix(self.lambda, self.gp_coeff),
        }
    }

    fn adam(&self, decay: bool) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: 1e-8,
            weight_decay: if decay || self.arch == ArchKind::UNet { self.weight_decay } else { 0.0 },
        }
    }

    /// The configuration as `key = value` text accepted by [`Self::from_kv`].
    pub fn to_kv(&self) -> String {
        let mut s = String::new();
        let p = &self.projection;
        let _ = writeln!(s, "arch = {}", self.arch);
        let _ = writeln!(s, "combo = {}", self.combo);
        for (k, v) in [
            ("epochs", self.epochs.to_string()),
            ("batch_size", self.batch_size.to_string()),
            ("lr", self.lr.to_string()),
            ("weight_decay", self.weight_decay.to_string()),
            ("beta1", self.beta1.to_string()),
            ("beta2", self.beta2.to_string()),
            ("lambda", self.lambda.to_string()),
            ("gp_coeff", self.gp_coeff.to_string()),
            ("seed", self.seed.to_string()),
            ("base_width", self.base_width.to_string()),
            ("depth", self.depth.to_string()),
            ("disc_width", self.disc_width.to_string()),
            ("height", p.height.to_string()),
            ("width", p.width.to_string()),
            ("fov_up_deg", p.fov_up.to_degrees().to_string()),
            ("fov_down_deg", p.fov_down.to_degrees().to_string()),
            ("r_max", p.r_max.to_string()),
            ("neighbors", self.neighbors.to_string()),
            ("intensity_max", self.intensity_max.to_string()),
            ("deterministic", self.deterministic.to_string()),
            ("split", format!("{},{},{}", self.split[0], self.split[1], self.split[2])),
        ] {
            let _ = writeln!(s, "{k} = {v}");
        }
        match &self.data {
            DataSource::Synthetic { frames, scene } => {
                let _ = writeln!(s, "frames = {frames}");
                let _ = writeln!(s, "n_planes = {}", scene.n_planes);
                let _ = writeln!(s, "n_boxes = {}", scene.n_boxes);
                let _ = writeln!(s, "n_cylinders = {}", scene.n_cylinders);
                let _ = writeln!(s, "attenuation = {}", scene.attenuation);
                let _ = writeln!(s, "noise_sigma = {}", scene.noise_sigma);
            }
            DataSource::FrameList(path) => {
                let _ = writeln!(s, "frame_list = {}", path.display());
            }
        }
        if let Some(dir) = &self.out_dir {
            let _ = writeln!(s, "out_dir = {}", dir.display());
        }
        s
    }
}

/// `(key, value)` pairs of a flat config file.
pub fn parse_kv(text: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`", n + 1)))?;
        out.push((k.trim().to_string(), v.trim().to_string()));
    }
    Ok(out)
}

/// Independent 64-bit seed for item `index` of stream `stream`.
pub fn derive_seed(seed: u64, stream: u64, index: u64) -> u64 {
    let mut z = seed
        .wrapping_add(stream.wrapping_mul(0xD1B5_4A32_D192_ED03))
        .wrapping_add(index.wrapping_mul(0x9E37_79B9_7F4A_7C15));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

const STREAM_FRAMES: u64 = 1;

/// Seed of synthetic frame `index`.
pub fn frame_seed(seed: u64, index: usize) -> u64 {
    derive_seed(seed, STREAM_FRAMES, index as u64)
}
const STREAM_SPLIT: u64 = 2;
const STREAM_INIT: u64 = 3;
const STREAM_SHUFFLE: u64 = 4;

fn check_split(n: usize, sizes: [usize; 3]) -> Result<()> {
    let total: usize = sizes.iter().sum();
    if total > n {
        return Err(Error::Config(format!(
            "split {}/{}/{} needs {total} frames, only {n} available",
            sizes[0], sizes[1], sizes[2]
        )));
    }
    Ok(())
}

/// Disjoint train/val/test index sets drawn from a seeded shuffle.
pub fn split_dataset(n: usize, sizes: [usize; 3], seed: u64) -> Result<[Vec<usize>; 3]> {
    check_split(n, sizes)?;
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(seed, STREAM_SPLIT, 0)));
    let (a, rest) = idx.split_at(sizes[0]);
    let (b, rest) = rest.split_at(sizes[1]);
    let c = &rest[..sizes[2]];
    Ok([a.to_vec(), b.to_vec(), c.to_vec()])
}

/// Estimates incidence angles when requested, then projects.
pub fn prepare_frame<T: Scalar>(
    mut cloud: PointCloud<T>,
    proj: &ProjectionConfig,
    neighbors: Option<usize>,
) -> Result<SphericalImage<T>> {
    if let Some(k) = neighbors {
        cloud.incidence = Some(incidence_channel(&cloud, k)?.angles);
    }
    spherical_project(&cloud, proj)
}

/// `n` synthetic frames; frame `i` depends only on `(seed, i)`.
pub fn synth_frames<T: Scalar>(
    n: usize,
    seed: u64,
    scene: &SynthSceneConfig,
    proj: &ProjectionConfig,
    neighbors: Option<usize>,
    sequential: bool,
) -> Result<Vec<SphericalImage<T>>> {
    let make = |i: usize| -> Result<SphericalImage<T>> {
        let frame = synth_scene::<T>(frame_seed(seed, i), scene, proj)?;
        prepare_frame(frame.cloud, proj, neighbors)
    };
    if sequential {
        (0..n).map(make).collect()
    } else {
        (0..n).into_par_iter().map(make).collect()
    }
}

/// One line of a frame list.
#[derive(Clone, Debug, PartialEq)]
pub struct FrameEntry {
    pub scan: PathBuf,
    pub labels: Option<PathBuf>,
    pub camera: Option<(PathBuf, PathBuf)>,
}

pub fn parse_frame_list(text: &str, base: &Path) -> Result<Vec<FrameEntry>> {
    let mut out = Vec::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let f: Vec<PathBuf> = line.split_whitespace().map(|p| base.join(p)).collect();
        let entry = match f.len() {
            1 => FrameEntry { scan: f[0].clone(), labels: None, camera: None },
            2 => FrameEntry { scan: f[0].clone(), labels: Some(f[1].clone()), camera: None },
            3 => FrameEntry {
                scan: f[0].clone(),
                labels: None,
                camera: Some((f[1].clone(), f[2].clone())),
            },
            4 => FrameEntry {
                scan: f[0].clone(),
                labels: Some(f[1].clone()),
                camera: Some((f[2].clone(), f[3].clone())),
            },
            _ => {
                return Err(Error::Config(format!(
                    "frame list line {}: expected 1 to 4 paths",
                    n + 1
                )))
            }
        };
        out.push(entry);
    }
    Ok(out)
}

pub fn load_frame<T: Scalar>(
    entry: &FrameEntry,
    proj: &ProjectionConfig,
    neighbors: Option<usize>,
    intensity_max: f64,
) -> Result<SphericalImage<T>> {
    let (mut cloud, report) = read_point_cloud_scaled::<T>(&entry.scan, intensity_max)?;
    if report.dropped() > 0 {
        log::debug!(
            "{}: dropped {} of {} records",
            entry.scan.display(),
            report.dropped(),
            report.records
        );
    }
    if let Some(labels) = &entry.labels {
        let raw = read_labels(labels, report.records)?;
        cloud = cloud.with_labels(report.kept_indices.iter().map(|&i| raw[i]).collect())?;
    }
    if let Some((image, calib)) = &entry.camera {
        cloud = colorize(cloud, &read_camera(image, calib)?)?;
    }
    prepare_frame(cloud, proj, neighbors)
}

/// Frames described by `cfg.data`. Incidence is estimated only when the
/// combo uses it.
pub fn build_frames<T: Scalar>(cfg: &TrainConfig) -> Result<Vec<SphericalImage<T>>> {
    build_frames_with(cfg, cfg.combo.incidence)
}

pub fn build_frames_with<T: Scalar>(cfg: &TrainConfig, incidence: bool) -> Result<Vec<SphericalImage<T>>> {
    let neighbors = incidence.then_some(cfg.neighbors);
    match &cfg.data {
        DataSource::Synthetic { frames, scene } => synth_frames(
            *frames,
            cfg.seed,
            scene,
            &cfg.projection,
            neighbors,
            cfg.deterministic,
        ),
        DataSource::FrameList(path) => {
            let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            let base = path.parent().unwrap_or(Path::new("."));
            let entries = parse_frame_list(&text, base)?;
            check_split(entries.len(), cfg.split)?;
            let load = |e: &FrameEntry| load_frame(e, &cfg.projection, neighbors, cfg.intensity_max);
            if cfg.deterministic {
                entries.iter().map(load).collect()
            } else {
                entries.par_iter().map(load).collect()
            }
        }
    }
}

/// Input stacks, targets and masks of one batch.
fn batch<T: Scalar>(
    stacks: &[Array<T>],
    frames: &[&SphericalImage<T>],
    idx: &[usize],
) -> Result<(Array<T>, Array<T>, Array<T>)> {
    let s: Vec<&Array<T>> = idx.iter().map(|&i| &stacks[i]).collect();
    let mut targets = Vec::with_capacity(idx.len());
    let mut masks = Vec::with_capacity(idx.len());
    for &i in idx {
        let (t, m) = frames[i].target_arrays();
        targets.push(t);
        masks.push(m);
    }
    Ok((
        Array::stack(&s)?,
        Array::stack(&targets.iter().collect::<Vec<_>>())?,
        Array::stack(&masks.iter().collect::<Vec<_>>())?,
    ))
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Epoch means of the training loss terms.
    pub train: Vec<(String, f64)>,
    pub val_mse: f64,
}

impl EpochRecord {
    pub fn train_value(&self, name: &str) -> Option<f64> {
        self.train.iter().find(|(n, _)| n == name).map(|(_, v)| *v)
    }
}

#[derive(Clone, Debug)]
pub struct TrainReport<T> {
    pub history: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_val_mse: f64,
    pub final_val_mse: f64,
    pub test_mse: Option<f64>,
    pub best: Checkpoint<T>,
    pub last: Checkpoint<T>,
    pub param_count: usize,
}

impl<T> TrainReport<T> {
    /// `epoch,split,loss_name,value` rows.
    pub fn metrics_csv(&self) -> String {
        let mut s = String::from("epoch,split,loss_name,value\n");
        for r in &self.history {
            for (name, v) in &r.train {
                let _ = writeln!(s, "{},train,{name},{v}", r.epoch);
            }
            let _ = writeln!(s, "{},val,masked_mse,{}", r.epoch, r.val_mse);
        }
        if let Some(t) = self.test_mse {
            let _ = writeln!(s, "{},test,masked_mse,{t}", self.best_epoch);
        }
        s
    }
}

/// Builds the dataset described by `cfg` and trains on it.
pub fn train<T: Scalar>(cfg: &TrainConfig) -> Result<TrainReport<T>> {
    cfg.validate()?;
    let frames = build_frames::<T>(cfg)?;
    train_on(cfg, &frames)
}

/// Trains on already prepared frames, split by `cfg.split` and `cfg.seed`.
/// Writes `metrics.csv`, `best.ckpt` and `final.ckpt` when `cfg.out_dir` is
/// set.
pub fn train_on<T: Scalar>(cfg: &TrainConfig, frames: &[SphericalImage<T>]) -> Result<TrainReport<T>> {
    cfg.validate()?;
    let [train_idx, val_idx, test_idx] = split_dataset(frames.len(), cfg.split, cfg.seed)?;
    if let Some(f) = frames.iter().find(|f| !f.supports(&cfg.combo)) {
        let missing: Vec<&str> = cfg.combo.channels().iter().filter(|c| !f.has(**c)).map(|c| c.name()).collect();
        return Err(Error::ModalityUnavailable(format!(
            "combo {} needs {}",
            cfg.combo,
            missing.join(", ")
        )));
    }
    let pick = |idx: &[usize]| -> Vec<SphericalImage<T>> { idx.iter().map(|&i| frames[i].clone()).collect() };
    let train_frames = pick(&train_idx);
    let val_frames = pick(&val_idx);
    let test_frames = pick(&test_idx);

    let raw: Vec<Array<T>> = train_frames
        .iter()
        .map(|f| select_channels(f, &cfg.combo))
        .collect::<Result<_>>()?;
    let norm = Normalization::fit(&raw)?;
    let stacks: Vec<Array<T>> = raw.iter().map(|s| norm.apply(s)).collect::<Result<_>>()?;
    let frame_refs: Vec<&SphericalImage<T>> = train_frames.iter().collect();

    let c = cfg.combo.channel_count();
    let init_seed = derive_seed(cfg.seed, STREAM_INIT, 0);
    let head = match cfg.arch {
        ArchKind::UNet => OutputHead::Linear,
        ArchKind::Pix2Pix => OutputHead::Sigmoid,
    };
    let mut gen = build_unet::<T>(c, cfg.base_width, cfg.depth, head, init_seed)?;
    if head == OutputHead::Sigmoid {
        // Start the generator at the mean training intensity instead of 0.5.
        let m = mean_target(&train_frames).clamp(0.01, 0.99);
        if let Some(b) = gen.params.get_mut("head.bias") {
            b.data_mut()[0] = T::lit((m / (1.0 - m)).ln());
        }
    }
    let mut disc = match cfg.arch {
        ArchKind::Pix2Pix => Some(PatchGan::<T>::new(c + 1, cfg.disc_width, derive_seed(cfg.seed, STREAM_INIT, 1))?),
        ArchKind::UNet => None,
    };
    let mut gen_opt = Adam::<T>::new(cfg.adam(false))?;
    let mut disc_opt = Adam::<T>::new(cfg.adam(false))?;
    let objective = cfg.objective();
    let param_count = gen.param_count() + disc.as_ref().map_or(0, |d| d.params.count());
    log::info!(
        "training {} on {} with {} parameters, {} train / {} val / {} test frames",
        cfg.arch,
        cfg.combo,
        param_count,
        train_frames.len(),
        val_frames.len(),
        test_frames.len()
    );

    let snapshot = |gen: &crate::models::UNet<T>, disc: &Option<PatchGan<T>>| Checkpoint {
        kind: cfg.arch,
        combo: cfg.combo,
        normalization: norm.clone(),
        generator: gen.clone(),
        discriminator: disc.clone(),
    };

    if let Some(dir) = &cfg.out_dir {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut history = Vec::new();
    let mut best: Option<(usize, f64, Checkpoint<T>)> = None;
    for epoch in 1..=cfg.epochs {
        let mut order: Vec<usize> = (0..train_frames.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, STREAM_SHUFFLE, epoch as u64)));
        let mut sums: Vec<(String, f64)> = Vec::new();
        let mut batches = 0usize;
        for (bi, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let (x, t, m) = batch(&stacks, &frame_refs, chunk)?;
            let step: Result<Vec<(&str, f64)>> = match disc.as_mut() {
                None => unet_step(&mut gen, &mut gen_opt, &x, &t, &m).map(|l| vec![("masked_mse", l)]),
                Some(d) => pix2pix_step(&mut gen, d, &mut gen_opt, &mut disc_opt, &x, &t, &m, &objective)
                    .map(|l| gan_terms(&l)),
            };
            let terms = match step {
                Ok(terms) => terms,
                Err(Error::TrainingFault(msg)) => {
                    let detail = format!("epoch {epoch}, batch {bi}, frames {chunk:?}: {msg}");
                    if let Some(dir) = &cfg.out_dir {
                        dump_fault(dir, &detail, &snapshot(&gen, &disc), &sums, batches);
                    }
                    return Err(Error::TrainingFault(detail));
                }
                Err(e) => return Err(e),
            };
            if sums.is_empty() {
                sums = terms.iter().map(|(n, _)| (n.to_string(), 0.0)).collect();
            }
            for ((_, acc), (_, v)) in sums.iter_mut().zip(&terms) {
                *acc += v;
            }
            batches += 1;
        }
        let train: Vec<(String, f64)> = sums.into_iter().map(|(n, s)| (n, s / batches as f64)).collect();
        let ck = snapshot(&gen, &disc);
        let val_mse = eval_mse(&ck, &val_frames)?;
        log::info!("epoch {epoch}: train {train:?}, val masked_mse {val_mse:.6}");
        history.push(EpochRecord { epoch, train, val_mse });
        if best.as_ref().map_or(true, |(_, b, _)| val_mse < *b) {
            if let Some(dir) = &cfg.out_dir {
                ck.save(&dir.join("best.ckpt"))?;
            }
            best = Some((epoch, val_mse, ck));
        }
    }
    let (best_epoch, best_val_mse, best) = best.expect("at least one epoch");
    let last = snapshot(&gen, &disc);
    let final_val_mse = history.last().map(|r| r.val_mse).unwrap_or(f64::NAN);
    let test_mse = if test_frames.is_empty() {
        None
    } else {
        Some(eval_mse(&best, &test_frames)?)
    };
    let report = TrainReport {
        history,
        best_epoch,
        best_val_mse,
        final_val_mse,
        test_mse,
        best,
        last,
        param_count,
    };
    if let Some(dir) = &cfg.out_dir {
        report.last.save(&dir.join("final.ckpt"))?;
        crate::formats::write_file(&dir.join("metrics.csv"), report.metrics_csv().as_bytes())?;
    }
    Ok(report)
}

/// Mean intensity over the masked pixels of `frames`.
fn mean_target<T: Scalar>(frames: &[SphericalImage<T>]) -> f64 {
    let (mut sum, mut n) = (0.0, 0usize);
    for f in frames {
        for (v, m) in f.intensity.iter().zip(f.mask()) {
            if m.as_f64() == 1.0 {
                sum += v.as_f64();
                n += 1;
            }
        }
    }
    if n == 0 {
        0.5
    } else {
        sum / n as f64
    }
}

fn gan_terms(l: &StepLogs) -> Vec<(&'static str, f64)> {
    vec![
        ("d_real_bce", l.d_real_bce),
        ("d_fake_bce", l.d_fake_bce),
        ("r1", l.r1),
        ("d_loss", l.d_loss),
        ("g_adv_bce", l.g_adv_bce),
        ("g_l1", l.g_l1),
        ("g_loss", l.g_loss),
    ]
}

fn dump_fault<T: Scalar>(dir: &Path, detail: &str, ck: &Checkpoint<T>, sums: &[(String, f64)], batches: usize) {
    let mut text = format!("training fault: {detail}\nbatches completed this epoch: {batches}\n");
    for (n, s) in sums {
        let _ = writeln!(text, "running mean {n}: {}", s / batches.max(1) as f64);
    }
    if let Err(e) = crate::formats::write_file(&dir.join("fault.txt"), text.as_bytes()) {
        log::error!("could not write fault report: {e}");
    }
    if let Err(e) = ck.save(&dir.join("fault.ckpt")) {
        log::error!("could not write fault checkpoint: {e}");
    }
}

/// The test split of the frames described by `cfg`.
pub fn test_frames<T: Scalar>(cfg: &TrainConfig, frames: Vec<SphericalImage<T>>) -> Result<Vec<SphericalImage<T>>> {
    let [_, _, test] = split_dataset(frames.len(), cfg.split, cfg.seed)?;
    let mut slots: Vec<Option<SphericalImage<T>>> = frames.into_iter().map(Some).collect();
    Ok(test.iter().map(|&i| slots[i].take().expect("disjoint split")).collect())
}
