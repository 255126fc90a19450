//! Masked-MSE evaluation, the modality ablation table, signed-error
//! histograms, per-pixel error heatmaps and intensity renderings.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use intensim_tensor::Scalar;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::formats::{encode_pgm16, encode_pgm8, quantize16, quantize8, write_file, PackedPlanes};
use crate::models::{ArchKind, Checkpoint};
use crate::projection::{select_channels, ModalityCombo, SphericalImage};

pub const DEFAULT_BINS: usize = 201;

/// Anything that maps a projected frame to a predicted intensity plane.
pub trait IntensityPredictor<T: Scalar>: Sync {
    fn predict(&self, frame: &SphericalImage<T>) -> Result<Vec<T>>;
}

impl<T: Scalar> IntensityPredictor<T> for Checkpoint<T> {
    fn predict(&self, frame: &SphericalImage<T>) -> Result<Vec<T>> {
        let stack = select_channels(frame, &self.combo)?;
        Ok(Checkpoint::predict(self, &stack)?.into_vec())
    }
}

/// Returns the reference intensity.
#[derive(Clone, Copy, Debug, Default)]
pub struct GroundTruth;

impl<T: Scalar> IntensityPredictor<T> for GroundTruth {
    fn predict(&self, frame: &SphericalImage<T>) -> Result<Vec<T>> {
        Ok(frame.intensity.clone())
    }
}

/// Predicts one value everywhere.
#[derive(Clone, Copy, Debug)]
pub struct Constant(pub f64);

impl<T: Scalar> IntensityPredictor<T> for Constant {
    fn predict(&self, frame: &SphericalImage<T>) -> Result<Vec<T>> {
        Ok(vec![T::lit(self.0); frame.intensity.len()])
    }
}

/// Reference intensity plus a fixed offset.
#[derive(Clone, Copy, Debug)]
pub struct Shifted(pub f64);

impl<T: Scalar> IntensityPredictor<T> for Shifted {
    fn predict(&self, frame: &SphericalImage<T>) -> Result<Vec<T>> {
        Ok(frame.intensity.iter().map(|&v| T::lit(v.as_f64() + self.0)).collect())
    }
}

fn checked_prediction<T: Scalar, P: IntensityPredictor<T> + ?Sized>(
    p: &P,
    frame: &SphericalImage<T>,
) -> Result<Vec<T>> {
    let pred = p.predict(frame)?;
    if pred.len() != frame.intensity.len() {
        return Err(Error::Shape(format!(
            "prediction has {} pixels, frame has {}",
            pred.len(),
            frame.intensity.len()
        )));
    }
    Ok(pred)
}

/// Masked MSE of one plane, `None` when the mask is empty.
pub fn masked_mse<T: Scalar>(pred: &[T], target: &[T], mask: &[T]) -> Option<f64> {
    let mut sum = 0.0;
    let mut count = 0.0;
    for ((p, t), m) in pred.iter().zip(target).zip(mask) {
        let m = m.as_f64();
        if m != 0.0 {
            let d = p.as_f64() - t.as_f64();
            sum += d * d * m;
            count += m;
        }
    }
    (count > 0.0).then(|| sum / count)
}

/// Per-frame masked MSE, `None` for frames without hits.
pub fn frame_mse<T: Scalar, P: IntensityPredictor<T> + ?Sized>(
    p: &P,
    frames: &[SphericalImage<T>],
) -> Result<Vec<Option<f64>>> {
    frames
        .par_iter()
        .map(|f| {
            let pred = checked_prediction(p, f)?;
            Ok(masked_mse(&pred, &f.intensity, f.mask()))
        })
        .collect()
}

/// Mean over frames with at least one hit of the masked MSE.
pub fn eval_mse<T: Scalar, P: IntensityPredictor<T> + ?Sized>(
    p: &P,
    frames: &[SphericalImage<T>],
) -> Result<f64> {
    let per = frame_mse(p, frames)?;
    let hit: Vec<f64> = per.into_iter().flatten().collect();
    if hit.is_empty() {
        return Err(Error::EmptyInput("no frame has a hit pixel"));
    }
    Ok(hit.iter().sum::<f64>() / hit.len() as f64)
}

/// `frame,masked_mse` lines followed by a `mean` line.
pub fn mse_csv(per_frame: &[Option<f64>]) -> String {
    let mut out = String::from("frame,masked_mse\n");
    let mut sum = 0.0;
    let mut n = 0usize;
    for (i, v) in per_frame.iter().enumerate() {
        match v {
            Some(v) => {
                sum += v;
                n += 1;
                let _ = writeln!(out, "{i},{v}");
            }
            None => {
                let _ = writeln!(out, "{i},-");
            }
        }
    }
    if n > 0 {
        let _ = writeln!(out, "mean,{}", sum / n as f64);
    }
    out
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationEntry {
    pub arch: ArchKind,
    pub dataset: String,
    pub combo: ModalityCombo,
    /// `None` when the combo cannot be evaluated on the dataset.
    pub mse: Option<f64>,
}

/// Every `(architecture, dataset)` pair that appears in `entries`, expanded
/// to all eight combos in column order; missing cells stay `None`.
pub fn ablation_matrix(entries: &[AblationEntry]) -> Vec<AblationEntry> {
    let mut groups: BTreeMap<(String, String), [Option<f64>; 8]> = BTreeMap::new();
    let mut arch_of = BTreeMap::new();
    for e in entries {
        let key = (e.arch.to_string(), e.dataset.clone());
        arch_of.insert(key.clone(), e.arch);
        let cells = groups.entry(key).or_insert([None; 8]);
        if e.mse.is_some() {
            cells[e.combo.column_index()] = e.mse;
        }
    }
    let columns = ModalityCombo::ablation_columns();
    let mut rows = Vec::new();
    for (key, cells) in groups {
        for (combo, mse) in columns.iter().zip(cells) {
            rows.push(AblationEntry {
                arch: arch_of[&key],
                dataset: key.1.clone(),
                combo: *combo,
                mse,
            });
        }
    }
    rows
}

fn cell(v: Option<f64>) -> String {
    v.map_or_else(|| "-".to_string(), |v| format!("{v:.6}"))
}

/// Long form: `architecture,dataset,combo,masked_mse`.
pub fn ablation_csv(rows: &[AblationEntry]) -> String {
    let mut out = String::from("architecture,dataset,combo,masked_mse\n");
    for r in rows {
        let _ = writeln!(out, "{},{},{},{}", r.arch, r.dataset, r.combo, cell(r.mse));
    }
    out
}

/// Wide form with one column per combo.
pub fn ablation_table(rows: &[AblationEntry]) -> String {
    let columns = ModalityCombo::ablation_columns();
    let mut out = String::from("architecture,dataset");
    for c in &columns {
        let _ = write!(out, ",{c}");
    }
    out.push('\n');
    let mut groups: BTreeMap<(String, String), [Option<f64>; 8]> = BTreeMap::new();
    for r in rows {
        groups.entry((r.arch.to_string(), r.dataset.clone())).or_insert([None; 8])[r.combo.column_index()] = r.mse;
    }
    for ((arch, dataset), cells) in groups {
        let _ = write!(out, "{arch},{dataset}");
        for v in cells {
            let _ = write!(out, ",{}", cell(v));
        }
        out.push('\n');
    }
    out
}

/// Fixed-width bins over `[lo, hi]`; values outside land in the end bins.
#[derive(Clone, Debug, PartialEq)]
pub struct Histogram {
    pub lo: f64,
    pub hi: f64,
    pub counts: Vec<u64>,
}

impl Histogram {
    pub fn new(bins: usize) -> Result<Self> {
        if bins < 2 {
            return Err(Error::Config(format!("histogram needs at least 2 bins, got {bins}")));
        }
        Ok(Self {
            lo: -1.0,
            hi: 1.0,
            counts: vec![0; bins],
        })
    }

    pub fn bins(&self) -> usize {
        self.counts.len()
    }

    pub fn bin_of(&self, e: f64) -> usize {
        let n = self.bins();
        let t = ((e - self.lo) / (self.hi - self.lo) * n as f64).floor();
        if t.is_nan() || t < 0.0 {
            0
        } else {
            (t as usize).min(n - 1)
        }
    }

    pub fn edges(&self, i: usize) -> (f64, f64) {
        let w = (self.hi - self.lo) / self.bins() as f64;
        (self.lo + w * i as f64, self.lo + w * (i + 1) as f64)
    }

    pub fn add(&mut self, e: f64) {
        let b = self.bin_of(e);
        self.counts[b] += 1;
    }

    pub fn merge(&mut self, other: &Self) {
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("bin_low,bin_high,count\n");
        for (i, c) in self.counts.iter().enumerate() {
            let (lo, hi) = self.edges(i);
            let _ = writeln!(out, "{lo:.6},{hi:.6},{c}");
        }
        out
    }
}

/// Signed error `I − Î` of every masked pixel.
pub fn error_histogram<T: Scalar, P: IntensityPredictor<T> + ?Sized>(
    p: &P,
    frames: &[SphericalImage<T>],
    bins: usize,
) -> Result<Histogram> {
    let empty = Histogram::new(bins)?;
    let parts: Vec<Histogram> = frames
        .par_iter()
        .map(|f| {
            let pred = checked_prediction(p, f)?;
            let mut h = empty.clone();
            for ((t, q), m) in f.intensity.iter().zip(&pred).zip(f.mask()) {
                if m.as_f64() != 0.0 {
                    h.add(t.as_f64() - q.as_f64());
                }
            }
            Ok(h)
        })
        .collect::<Result<_>>()?;
    let mut total = empty;
    for h in &parts {
        total.merge(h);
    }
    Ok(total)
}

/// Per-pixel squared-error sums and hit counts.
#[derive(Clone, Debug, PartialEq)]
pub struct Heatmap {
    pub height: usize,
    pub width: usize,
    pub sum_sq: Vec<f64>,
    pub count: Vec<u64>,
}

impl Heatmap {
    pub fn new(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            sum_sq: vec![0.0; height * width],
            count: vec![0; height * width],
        }
    }

    pub fn add_frame<T: Scalar>(&mut self, pred: &[T], target: &[T], mask: &[T]) -> Result<()> {
        let n = self.height * self.width;
        if pred.len() != n || target.len() != n || mask.len() != n {
            return Err(Error::Shape(format!(
                "frame does not match the {}×{} heatmap grid",
                self.height, self.width
            )));
        }
        for k in 0..n {
            if mask[k].as_f64() != 0.0 {
                let d = target[k].as_f64() - pred[k].as_f64();
                self.sum_sq[k] += d * d;
                self.count[k] += 1;
            }
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &Self) -> Result<()> {
        if (self.height, self.width) != (other.height, other.width) {
            return Err(Error::Shape("heatmap grids differ".into()));
        }
        for k in 0..self.sum_sq.len() {
            self.sum_sq[k] += other.sum_sq[k];
            self.count[k] += other.count[k];
        }
        Ok(())
    }

    /// Mean squared error per pixel; pixels never hit are 0.
    pub fn mean(&self) -> Vec<f64> {
        self.sum_sq
            .iter()
            .zip(&self.count)
            .map(|(s, &c)| if c == 0 { 0.0 } else { s / c as f64 })
            .collect()
    }

    /// 16-bit PGM scaled so the largest mean maps to 65535.
    pub fn to_pgm16(&self) -> Vec<u8> {
        let mean = self.mean();
        let max = mean.iter().cloned().fold(0.0, f64::max);
        let px: Vec<u16> = mean.iter().map(|&v| quantize16(v, max)).collect();
        encode_pgm16(self.width, self.height, &px)
    }

    /// Raw float sidecar with `mse` and `count` planes.
    pub fn to_packed(&self) -> PackedPlanes {
        let mut data: Vec<f32> = self.mean().iter().map(|&v| v as f32).collect();
        data.extend(self.count.iter().map(|&c| c as f32));
        PackedPlanes::new(self.height, self.width, vec!["mse".into(), "count".into()], data)
            .expect("consistent heatmap planes")
    }

    pub fn save(&self, pgm: &Path, sidecar: &Path) -> Result<()> {
        write_file(pgm, &self.to_pgm16())?;
        self.to_packed().save(sidecar)
    }
}

pub fn error_heatmap<T: Scalar, P: IntensityPredictor<T> + ?Sized>(
    p: &P,
    frames: &[SphericalImage<T>],
) -> Result<Heatmap> {
    let first = frames
        .first()
        .ok_or(Error::EmptyInput("heatmap needs at least one frame"))?;
    let (h, w) = (first.height(), first.width());
    if let Some(f) = frames.iter().find(|f| (f.height(), f.width()) != (h, w)) {
        return Err(Error::Shape(format!(
            "frame grid {}×{} differs from {h}×{w}",
            f.height(),
            f.width()
        )));
    }
    let parts: Vec<Heatmap> = frames
        .par_iter()
        .map(|f| {
            let pred = checked_prediction(p, f)?;
            let mut hm = Heatmap::new(h, w);
            hm.add_frame(&pred, &f.intensity, f.mask())?;
            Ok(hm)
        })
        .collect::<Result<_>>()?;
    let mut total = Heatmap::new(h, w);
    for part in &parts {
        total.merge(part)?;
    }
    Ok(total)
}

/// 8-bit gray levels of a `[0, 1]` plane with masked-out pixels black.
pub fn gray_levels<T: Scalar>(values: &[T], mask: &[T]) -> Vec<u8> {
    values
        .iter()
        .zip(mask)
        .map(|(v, m)| {
            if m.as_f64() == 0.0 {
                0
            } else {
                quantize8(v.as_f64().clamp(0.0, 1.0))
            }
        })
        .collect()
}

/// Reference and predicted intensity images of one frame.
pub fn render_intensity<T: Scalar, P: IntensityPredictor<T> + ?Sized>(
    p: &P,
    frame: &SphericalImage<T>,
) -> Result<(Vec<u8>, Vec<u8>)> {
    let pred = checked_prediction(p, frame)?;
    Ok((gray_levels(&frame.intensity, frame.mask()), gray_levels(&pred, frame.mask())))
}

/// Writes an 8-bit gray image; `.pgm` paths get a binary PGM, anything else
/// goes through the image encoder chosen by the extension.
pub fn save_gray(path: &Path, width: usize, height: usize, pixels: &[u8]) -> Result<()> {
    let is_pgm = path
        .extension()
        .and_then(|e| e.to_str())
        .is_some_and(|e| e.eq_ignore_ascii_case("pgm"));
    if is_pgm {
        return write_file(path, &encode_pgm8(width, height, pixels));
    }
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    image::save_buffer(path, pixels, width as u32, height as u32, image::ExtendedColorType::L8)
        .map_err(|e| Error::malformed(path, e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ingest::PointCloud;
    use crate::projection::{spherical_project, ProjectionConfig};

    fn frame() -> SphericalImage<f64> {
        let cfg = ProjectionConfig::with_size(4, 16);
        let mut pts = Vec::new();
        let mut ints = Vec::new();
        for k in 0..40 {
            let az = k as f64 * 0.157;
            pts.push([10.0 * az.cos(), 10.0 * az.sin(), -2.0]);
            ints.push((k as f64 * 0.37) % 1.0);
        }
        spherical_project(&PointCloud::new(pts, ints).unwrap(), &cfg).unwrap()
    }

    #[test]
    fn oracle_scores_zero() {
        let f = vec![frame()];
        assert_eq!(eval_mse(&GroundTruth, &f).unwrap(), 0.0);
        let h = error_histogram(&GroundTruth, &f, DEFAULT_BINS).unwrap();
        assert_eq!(h.counts[h.bin_of(0.0)], h.total());
        assert_eq!(h.bin_of(0.0), 100);
        let hm = error_heatmap(&GroundTruth, &f).unwrap();
        assert!(hm.mean().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn shifted_prediction_lands_in_one_bin() {
        let f = vec![frame()];
        let h = error_histogram(&Shifted(0.1), &f, DEFAULT_BINS).unwrap();
        let b = h.bin_of(-0.1);
        assert_eq!(h.counts[b], h.total());
        let (lo, hi) = h.edges(b);
        assert!(lo <= -0.1 && -0.1 < hi);
        assert_eq!(h.total() as usize, f[0].hits());
    }

    #[test]
    fn histogram_needs_two_bins() {
        assert!(Histogram::new(1).is_err());
        let mut h = Histogram::new(2).unwrap();
        h.add(-5.0);
        h.add(5.0);
        h.add(0.0);
        assert_eq!(h.counts, vec![1, 2]);
    }

    #[test]
    fn single_frame_heatmap_is_its_squared_error() {
        let f = vec![frame()];
        let hm = error_heatmap(&Constant(0.5), &f).unwrap();
        let mean = hm.mean();
        for k in 0..mean.len() {
            let expected = if f[0].mask()[k] == 1.0 {
                (f[0].intensity[k] - 0.5).powi(2)
            } else {
                0.0
            };
            assert!((mean[k] - expected).abs() < 1e-15);
        }
    }

    #[test]
    fn ablation_marks_missing_combos() {
        assert!(ablation_matrix(&[]).is_empty());
        assert_eq!(ablation_csv(&[]), "architecture,dataset,combo,masked_mse\n");
        let entries: Vec<AblationEntry> = ModalityCombo::ablation_columns()
            .iter()
            .filter(|c| !c.rgb)
            .enumerate()
            .map(|(i, c)| AblationEntry {
                arch: ArchKind::UNet,
                dataset: "synthetic".into(),
                combo: *c,
                mse: Some(0.1 * (i + 1) as f64),
            })
            .collect();
        let rows = ablation_matrix(&entries);
        assert_eq!(rows.len(), 8);
        assert_eq!(rows.iter().filter(|r| r.mse.is_none()).count(), 4);
        let mut reversed = entries.clone();
        reversed.reverse();
        assert_eq!(ablation_matrix(&reversed), rows);
        let table = ablation_table(&rows);
        assert!(table.starts_with("architecture,dataset,D,D+I,D+L,D+L+I,D+RGB,D+RGB+I,D+RGB+L,D+RGB+L+I\n"));
        assert!(table.contains("unet,synthetic,0.100000,0.200000,0.300000,0.400000,-,-,-,-"));
    }

    #[test]
    fn rendering_rounds_half_up_and_blacks_out_misses() {
        assert_eq!(gray_levels(&[0.5f64, 1.0, 0.3], &[1.0, 1.0, 0.0]), vec![128, 255, 0]);
        let f = frame();
        let (a, b) = render_intensity(&GroundTruth, &f).unwrap();
        assert_eq!(a, b);
    }
}
