//! Point clouds, semantic labels and camera frames from disk.
//!
//! Point clouds use the KITTI velodyne layout: consecutive little-endian
//! `f32` quadruples `(x, y, z, intensity)`. Label files hold one
//! little-endian `u32` per point whose low 16 bits are the semantic class.

use std::path::Path;

use intensim_tensor::Scalar;

use crate::error::{Error, Result};

const RECORD: usize = 16;

/// Per-point LiDAR returns in the sensor frame (meters).
#[derive(Clone, Debug, PartialEq)]
pub struct PointCloud<T> {
    pub points: Vec<[T; 3]>,
    /// Unitless reflectance in `[0, 1]`.
    pub intensity: Vec<T>,
    pub label: Option<Vec<u32>>,
    /// Camera color in `[0, 1]`, paired with `color_mask`.
    pub rgb: Option<Vec<[T; 3]>>,
    pub color_mask: Option<Vec<bool>>,
    pub normal: Option<Vec<[T; 3]>>,
    /// Incidence angle in radians, `[0, π/2]`.
    pub incidence: Option<Vec<T>>,
}

/// Counts from [`parse_point_cloud`].
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct ParseReport {
    pub records: usize,
    pub kept: usize,
    /// Record index of every kept point, for aligning per-record labels.
    pub kept_indices: Vec<usize>,
    pub dropped_zero_range: usize,
    pub dropped_non_finite: usize,
}

impl ParseReport {
    pub fn dropped(&self) -> usize {
        self.dropped_zero_range + self.dropped_non_finite
    }
}

pub fn norm3<T: Scalar>(p: &[T; 3]) -> f64 {
    let [x, y, z] = p.map(|v| v.as_f64());
    (x * x + y * y + z * z).sqrt()
}

impl<T: Scalar> PointCloud<T> {
    pub fn new(points: Vec<[T; 3]>, intensity: Vec<T>) -> Result<Self> {
        if points.len() != intensity.len() {
            return Err(Error::Shape(format!(
                "{} points but {} intensities",
                points.len(),
                intensity.len()
            )));
        }
        Ok(Self {
            points,
            intensity,
            label: None,
            rgb: None,
            color_mask: None,
            normal: None,
            incidence: None,
        })
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn range(&self, i: usize) -> f64 {
        norm3(&self.points[i])
    }

    pub fn with_labels(mut self, labels: Vec<u32>) -> Result<Self> {
        if labels.len() != self.len() {
            return Err(Error::LabelMismatch {
                expected: self.len(),
                found: labels.len(),
            });
        }
        self.label = Some(labels);
        Ok(self)
    }

    /// Checks every structural invariant of the cloud.
    pub fn validate(&self) -> Result<()> {
        let n = self.len();
        let lens = [
            ("intensity", Some(self.intensity.len())),
            ("label", self.label.as_ref().map(Vec::len)),
            ("rgb", self.rgb.as_ref().map(Vec::len)),
            ("color_mask", self.color_mask.as_ref().map(Vec::len)),
            ("normal", self.normal.as_ref().map(Vec::len)),
            ("incidence", self.incidence.as_ref().map(Vec::len)),
        ];
        for (name, len) in lens {
            if let Some(len) = len {
                if len != n {
                    return Err(Error::Shape(format!("{name} has {len} entries for {n} points")));
                }
            }
        }
        for (i, p) in self.points.iter().enumerate() {
            let r = norm3(p);
            if !p.iter().all(|v| v.is_finite()) || !(r > 0.0) {
                return Err(Error::InvalidPoint(format!("point {i} = {p:?}")));
            }
        }
        if let Some(i) = self
            .intensity
            .iter()
            .position(|v| !(*v >= T::zero() && *v <= T::one()))
        {
            return Err(Error::InvalidPoint(format!("intensity of point {i} outside [0, 1]")));
        }
        if let Some(normals) = &self.normal {
            if let Some(i) = normals.iter().position(|n| (norm3(n) - 1.0).abs() > 1e-6) {
                return Err(Error::InvalidPoint(format!("normal of point {i} is not unit")));
            }
        }
        Ok(())
    }
}

/// Decodes velodyne records, dividing intensities by `intensity_max` and
/// clamping to `[0, 1]`. Zero-range and non-finite records are dropped and
/// counted.
pub fn parse_point_cloud<T: Scalar>(
    bytes: &[u8],
    intensity_max: f64,
) -> std::result::Result<(PointCloud<T>, ParseReport), String> {
    if bytes.len() % RECORD != 0 {
        return Err(format!(
            "size {} is not a multiple of {RECORD} bytes",
            bytes.len()
        ));
    }
    if !(intensity_max > 0.0) {
        return Err(format!("intensity scale {intensity_max} must be positive"));
    }
    let mut report = ParseReport {
        records: bytes.len() / RECORD,
        ..Default::default()
    };
    let mut points = Vec::with_capacity(report.records);
    let mut intensity = Vec::with_capacity(report.records);
    for (k, rec) in bytes.chunks_exact(RECORD).enumerate() {
        let f = |i: usize| f32::from_le_bytes([rec[i], rec[i + 1], rec[i + 2], rec[i + 3]]);
        let (x, y, z, w) = (f(0), f(4), f(8), f(12));
        if ![x, y, z, w].iter().all(|v| v.is_finite()) {
            report.dropped_non_finite += 1;
            continue;
        }
        if x == 0.0 && y == 0.0 && z == 0.0 {
            report.dropped_zero_range += 1;
            continue;
        }
        let p = [x, y, z].map(|v| T::lit(v as f64));
        points.push(p);
        report.kept_indices.push(k);
        let i = if intensity_max == 1.0 {
            w as f64
        } else {
            w as f64 / intensity_max
        };
        intensity.push(T::lit(i.clamp(0.0, 1.0)));
    }
    report.kept = points.len();
    let cloud = PointCloud::new(points, intensity).map_err(|e| e.to_string())?;
    Ok((cloud, report))
}

/// Reads a KITTI velodyne `.bin` file whose intensities are already in `[0, 1]`.
pub fn read_point_cloud<T: Scalar>(path: &Path) -> Result<(PointCloud<T>, ParseReport)> {
    read_point_cloud_scaled(path, 1.0)
}

pub fn read_point_cloud_scaled<T: Scalar>(
    path: &Path,
    intensity_max: f64,
) -> Result<(PointCloud<T>, ParseReport)> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_point_cloud(&bytes, intensity_max).map_err(|r| Error::malformed(path, r))
}

/// Velodyne encoding of the cloud's geometry and intensity.
pub fn encode_point_cloud<T: Scalar>(cloud: &PointCloud<T>) -> Vec<u8> {
    let mut out = Vec::with_capacity(cloud.len() * RECORD);
    for (p, i) in cloud.points.iter().zip(&cloud.intensity) {
        for v in [p[0], p[1], p[2], *i] {
            out.extend_from_slice(&(v.as_f64() as f32).to_le_bytes());
        }
    }
    out
}

pub fn write_point_cloud<T: Scalar>(cloud: &PointCloud<T>, path: &Path) -> Result<()> {
    crate::formats::write_file(path, &encode_point_cloud(cloud))
}

/// Semantic class ids: the low 16 bits of each record.
pub fn parse_labels(bytes: &[u8], n: usize) -> Result<Vec<u32>> {
    if bytes.len() % 4 != 0 || bytes.len() / 4 != n {
        return Err(Error::LabelMismatch {
            expected: n,
            found: bytes.len() / 4,
        });
    }
    Ok(bytes
        .chunks_exact(4)
        .map(|c| u32::from_le_bytes([c[0], c[1], c[2], c[3]]) & 0xFFFF)
        .collect())
}

pub fn read_labels(path: &Path, n: usize) -> Result<Vec<u32>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_labels(&bytes, n)
}

pub fn write_labels(labels: &[u32], path: &Path) -> Result<()> {
    let bytes: Vec<u8> = labels.iter().flat_map(|l| l.to_le_bytes()).collect();
    crate::formats::write_file(path, &bytes)
}

/// A camera image and the `3×4` matrix taking homogeneous sensor-frame
/// points to homogeneous pixel coordinates `(u·w, v·w, w)`.
#[derive(Clone, Debug, PartialEq)]
pub struct CameraFrame<T> {
    pub width: usize,
    pub height: usize,
    /// Row-major `height × width` RGB in `[0, 1]`.
    pub pixels: Vec<[T; 3]>,
    pub proj: [[f64; 4]; 3],
}

impl<T: Scalar> CameraFrame<T> {
    pub fn new(width: usize, height: usize, pixels: Vec<[T; 3]>, proj: [[f64; 4]; 3]) -> Result<Self> {
        if pixels.len() != width * height {
            return Err(Error::Shape(format!(
                "{} pixels for a {width}×{height} image",
                pixels.len()
            )));
        }
        if pixels
            .iter()
            .flatten()
            .any(|v| !(*v >= T::zero() && *v <= T::one()))
        {
            return Err(Error::Config("camera pixel values must lie in [0, 1]".into()));
        }
        if !full_row_rank(&proj) {
            return Err(Error::Config("projection matrix is rank deficient".into()));
        }
        Ok(Self {
            width,
            height,
            pixels,
            proj,
        })
    }

    /// Pixel nearest to the projection of `p`, if it lands in front of the
    /// camera and inside the image.
    pub fn pixel_of(&self, p: &[T; 3]) -> Option<(usize, usize)> {
        let [x, y, z] = p.map(|v| v.as_f64());
        let row = |r: &[f64; 4]| r[0] * x + r[1] * y + r[2] * z + r[3];
        let (u, v, w) = (row(&self.proj[0]), row(&self.proj[1]), row(&self.proj[2]));
        if !(w > 0.0) {
            return None;
        }
        let col = (u / w + 0.5).floor();
        let line = (v / w + 0.5).floor();
        if col < 0.0 || line < 0.0 || col >= self.width as f64 || line >= self.height as f64 {
            return None;
        }
        Some((line as usize, col as usize))
    }
}

fn full_row_rank(p: &[[f64; 4]; 3]) -> bool {
    let scale = p.iter().flatten().fold(0.0f64, |m, v| m.max(v.abs()));
    if !(scale > 0.0) || !p.iter().flatten().all(|v| v.is_finite()) {
        return false;
    }
    (0..4).any(|skip| {
        let cols: Vec<usize> = (0..4).filter(|&c| c != skip).collect();
        let m = nalgebra::Matrix3::from_fn(|r, c| p[r][cols[c]] / scale);
        m.determinant().abs() > 1e-12
    })
}

/// Parses twelve whitespace-separated numbers (row-major `3×4`). A leading
/// `P2:`-style tag is ignored.
pub fn parse_projection(text: &str) -> std::result::Result<[[f64; 4]; 3], String> {
    let values: Vec<f64> = text
        .split_whitespace()
        .filter(|tok| !tok.ends_with(':'))
        .map(|tok| tok.parse::<f64>().map_err(|e| format!("{tok:?}: {e}")))
        .collect::<std::result::Result<_, _>>()?;
    if values.len() != 12 {
        return Err(format!("expected 12 values, found {}", values.len()));
    }
    let mut m = [[0.0; 4]; 3];
    for (i, v) in values.into_iter().enumerate() {
        m[i / 4][i % 4] = v;
    }
    Ok(m)
}

/// Loads a PNG or PPM image and a projection matrix file.
pub fn read_camera<T: Scalar>(image_path: &Path, proj_path: &Path) -> Result<CameraFrame<T>> {
    let img = image::open(image_path)
        .map_err(|e| Error::malformed(image_path, e.to_string()))?
        .to_rgb8();
    let (w, h) = img.dimensions();
    let pixels = img
        .pixels()
        .map(|p| p.0.map(|c| T::lit(c as f64 / 255.0)))
        .collect();
    let text = std::fs::read_to_string(proj_path).map_err(|e| Error::io(proj_path, e))?;
    let proj = parse_projection(&text).map_err(|r| Error::malformed(proj_path, r))?;
    CameraFrame::new(w as usize, h as usize, pixels, proj)
}

/// Attaches camera color to every point that projects into the image in
/// front of the camera; the rest get black and a cleared color mask.
pub fn colorize<T: Scalar>(mut cloud: PointCloud<T>, cam: &CameraFrame<T>) -> Result<PointCloud<T>> {
    if cloud.is_empty() {
        return Err(Error::EmptyInput("colorize needs a non-empty cloud"));
    }
    let mut rgb = Vec::with_capacity(cloud.len());
    let mut mask = Vec::with_capacity(cloud.len());
    for p in &cloud.points {
        match cam.pixel_of(p) {
            Some((r, c)) => {
                rgb.push(cam.pixels[r * cam.width + c]);
                mask.push(true);
            }
            None => {
                rgb.push([T::zero(); 3]);
                mask.push(false);
            }
        }
    }
    cloud.rgb = Some(rgb);
    cloud.color_mask = Some(mask);
    Ok(cloud)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record(v: [f32; 4]) -> Vec<u8> {
        v.iter().flat_map(|x| x.to_le_bytes()).collect()
    }

    #[test]
    fn decodes_a_single_record() {
        let (c, r) = parse_point_cloud::<f32>(&record([1.0, 0.0, 0.0, 0.5]), 1.0).unwrap();
        assert_eq!(c.points, vec![[1.0, 0.0, 0.0]]);
        assert_eq!(c.intensity, vec![0.5]);
        assert_eq!(r.kept, 1);
    }

    #[test]
    fn empty_file_is_an_empty_cloud() {
        let (c, r) = parse_point_cloud::<f64>(&[], 1.0).unwrap();
        assert!(c.is_empty());
        assert_eq!(r.records, 0);
    }

    #[test]
    fn zero_range_records_are_dropped_and_counted() {
        let mut bytes = record([1.0, 0.0, 0.0, 0.5]);
        bytes.extend(record([0.0, 0.0, 0.0, 0.1]));
        let (c, r) = parse_point_cloud::<f32>(&bytes, 1.0).unwrap();
        assert_eq!(c.len(), 1);
        assert_eq!(r.dropped_zero_range, 1);
        assert_eq!(r.dropped(), 1);
    }

    #[test]
    fn non_finite_records_are_dropped() {
        let mut bytes = record([f32::NAN, 0.0, 0.0, 0.5]);
        bytes.extend(record([1.0, f32::INFINITY, 0.0, 0.5]));
        let (c, r) = parse_point_cloud::<f32>(&bytes, 1.0).unwrap();
        assert!(c.is_empty());
        assert_eq!(r.dropped_non_finite, 2);
    }

    #[test]
    fn size_must_be_a_record_multiple() {
        assert!(parse_point_cloud::<f32>(&[0u8; 17], 1.0).is_err());
    }

    #[test]
    fn intensities_are_scaled_to_unit_range() {
        let (c, _) = parse_point_cloud::<f32>(&record([1.0, 2.0, 3.0, 128.0]), 255.0).unwrap();
        assert!((c.intensity[0] - 128.0 / 255.0).abs() < 1e-7);
    }

    #[test]
    fn labels_keep_the_low_sixteen_bits() {
        let bytes: Vec<u8> = [0x28u32, 0x0003_0028]
            .iter()
            .flat_map(|v| v.to_le_bytes())
            .collect();
        assert_eq!(parse_labels(&bytes, 2).unwrap(), vec![40, 40]);
        let three = vec![0u8; 12];
        assert!(matches!(
            parse_labels(&three, 4),
            Err(Error::LabelMismatch { expected: 4, found: 3 })
        ));
    }

    fn camera() -> CameraFrame<f32> {
        // Looks down +x: u = 50 + 10·(−y/x), v = 50 + 10·(−z/x).
        let proj = [
            [50.0, -10.0, 0.0, 0.0],
            [50.0, 0.0, -10.0, 0.0],
            [1.0, 0.0, 0.0, 0.0],
        ];
        let pixels = (0..101 * 101)
            .map(|i| [(i % 101) as f32 / 100.0, (i / 101) as f32 / 100.0, 0.25])
            .collect();
        CameraFrame::new(101, 101, pixels, proj).unwrap()
    }

    #[test]
    fn colorize_uses_the_nearest_pixel_in_front_of_the_camera() {
        let cloud = PointCloud::new(
            vec![[5.0, 0.0, 0.0], [-5.0, 0.0, 0.0], [1.0, 5.5, -1.0]],
            vec![0.1, 0.2, 0.3],
        )
        .unwrap();
        let out = colorize(cloud.clone(), &camera()).unwrap();
        assert_eq!(out.points, cloud.points);
        let rgb = out.rgb.unwrap();
        let mask = out.color_mask.unwrap();
        assert_eq!(mask, vec![true, false, false]);
        assert_eq!(rgb[0], [0.5, 0.5, 0.25]);
        assert_eq!(rgb[1], [0.0, 0.0, 0.0]);
        assert_eq!(camera().pixel_of(&[1.0, 5.5, -1.0]), None);
    }

    #[test]
    fn rank_deficient_projection_is_rejected() {
        let proj = [[1.0, 0.0, 0.0, 0.0], [2.0, 0.0, 0.0, 0.0], [0.0, 0.0, 0.0, 1.0]];
        assert!(CameraFrame::<f32>::new(1, 1, vec![[0.0; 3]], proj).is_err());
    }

    #[test]
    fn projection_text_accepts_kitti_tags() {
        let m = parse_projection("P2: 1 0 0 0\n0 1 0 0\n0 0 1 0").unwrap();
        assert_eq!(m[2][2], 1.0);
        assert!(parse_projection("1 2 3").is_err());
    }

    #[test]
    fn validate_catches_bad_attributes() {
        let mut c = PointCloud::<f64>::new(vec![[1.0, 0.0, 0.0]], vec![0.5]).unwrap();
        c.validate().unwrap();
        c.normal = Some(vec![[0.5, 0.0, 0.0]]);
        assert!(c.validate().is_err());
        c.normal = None;
        c.intensity[0] = 1.5;
        assert!(c.validate().is_err());
        assert!(c.with_labels(vec![1, 2]).is_err());
    }
}
