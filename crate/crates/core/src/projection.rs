//! Spherical (range-image) projection and input channel assembly.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use intensim_tensor::{Array, Scalar};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::formats::PackedPlanes;
use crate::ingest::{norm3, PointCloud};

/// Sentinel written for points without a pixel.
pub const UNPROJECTED: f64 = -1.0;

/// Range-image grid. Angles are in radians.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProjectionConfig {
    pub height: usize,
    pub width: usize,
    pub fov_up: f64,
    pub fov_down: f64,
    pub r_max: f64,
}

impl Default for ProjectionConfig {
    /// HDL-64 geometry: 64 beams over +2.0°..−24.8°, 1024 azimuth bins.
    fn default() -> Self {
        Self {
            height: 64,
            width: 1024,
            fov_up: 2.0f64.to_radians(),
            fov_down: (-24.8f64).to_radians(),
            r_max: 80.0,
        }
    }
}

impl ProjectionConfig {
    pub fn with_size(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.height < 1 || self.width < 2 {
            return Err(Error::Config(format!(
                "grid {}×{} too small (need H ≥ 1, W ≥ 2)",
                self.height, self.width
            )));
        }
        if !(self.fov_up > self.fov_down) || !self.fov_up.is_finite() || !self.fov_down.is_finite() {
            return Err(Error::Config("fov_up must exceed fov_down".into()));
        }
        if !(self.r_max > 0.0 && self.r_max.is_finite()) {
            return Err(Error::Config("r_max must be positive".into()));
        }
        Ok(())
    }

    pub fn pixels(&self) -> usize {
        self.height * self.width
    }

    /// `(row, col)` of a point, or `None` when its elevation lies outside
    /// the field of view.
    pub fn pixel_of(&self, p: [f64; 3]) -> Option<(usize, usize)> {
        let r = (p[0] * p[0] + p[1] * p[1] + p[2] * p[2]).sqrt();
        if !(r > 0.0) {
            return None;
        }
        let azimuth = p[1].atan2(p[0]);
        let elevation = (p[2] / r).clamp(-1.0, 1.0).asin();
        if elevation < self.fov_down || elevation > self.fov_up {
            return None;
        }
        let span = self.fov_up - self.fov_down;
        let u = (0.5 * (1.0 - azimuth / std::f64::consts::PI) * self.width as f64).floor();
        let v = ((1.0 - (elevation - self.fov_down) / span) * self.height as f64).floor();
        let col = (u.max(0.0) as usize).min(self.width - 1);
        let row = (v.max(0.0) as usize).min(self.height - 1);
        Some((row, col))
    }

    /// Unit ray through the center of pixel `(row, col)`.
    pub fn ray_direction(&self, row: usize, col: usize) -> [f64; 3] {
        let span = self.fov_up - self.fov_down;
        let elevation = self.fov_up - (row as f64 + 0.5) / self.height as f64 * span;
        let azimuth = std::f64::consts::PI * (1.0 - 2.0 * (col as f64 + 0.5) / self.width as f64);
        let (se, ce) = elevation.sin_cos();
        let (sa, ca) = azimuth.sin_cos();
        [ce * ca, ce * sa, se]
    }
}

/// Per-pixel image planes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Channel {
    Depth,
    Mask,
    Incidence,
    Label,
    Red,
    Green,
    Blue,
    ColorMask,
}

impl Channel {
    /// Fixed network input order.
    pub const ORDER: [Channel; 8] = [
        Channel::Depth,
        Channel::Mask,
        Channel::Incidence,
        Channel::Label,
        Channel::Red,
        Channel::Green,
        Channel::Blue,
        Channel::ColorMask,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Channel::Depth => "depth",
            Channel::Mask => "mask",
            Channel::Incidence => "incidence",
            Channel::Label => "label",
            Channel::Red => "r",
            Channel::Green => "g",
            Channel::Blue => "b",
            Channel::ColorMask => "color_mask",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        Self::ORDER.into_iter().find(|c| c.name() == name)
    }

    /// Upper end of the channel's value range, for 16-bit export.
    pub fn max_value(self) -> f64 {
        match self {
            Channel::Incidence => std::f64::consts::FRAC_PI_2,
            _ => 1.0,
        }
    }
}

/// Input modalities: depth is always present; the rest are optional.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ModalityCombo {
    pub rgb: bool,
    pub label: bool,
    pub incidence: bool,
}

impl ModalityCombo {
    pub const DEPTH: Self = Self {
        rgb: false,
        label: false,
        incidence: false,
    };

    /// The eight ablation columns: D, D+I, D+L, D+L+I, D+RGB, D+RGB+I,
    /// D+RGB+L, D+RGB+L+I.
    pub fn ablation_columns() -> [Self; 8] {
        let mut out = [Self::DEPTH; 8];
        for (i, slot) in out.iter_mut().enumerate() {
            *slot = Self {
                rgb: i & 4 != 0,
                label: i & 2 != 0,
                incidence: i & 1 != 0,
            };
        }
        out
    }

    /// Position among [`ModalityCombo::ablation_columns`].
    pub fn column_index(&self) -> usize {
        (self.rgb as usize) << 2 | (self.label as usize) << 1 | self.incidence as usize
    }

    pub fn channels(&self) -> Vec<Channel> {
        Channel::ORDER
            .into_iter()
            .filter(|c| match c {
                Channel::Depth | Channel::Mask => true,
                Channel::Incidence => self.incidence,
                Channel::Label => self.label,
                _ => self.rgb,
            })
            .collect()
    }

    pub fn channel_count(&self) -> usize {
        self.channels().len()
    }
}

impl fmt::Display for ModalityCombo {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("D")?;
        if self.rgb {
            f.write_str("+RGB")?;
        }
        if self.label {
            f.write_str("+L")?;
        }
        if self.incidence {
            f.write_str("+I")?;
        }
        Ok(())
    }
}

impl FromStr for ModalityCombo {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let mut combo = Self::DEPTH;
        let mut depth = false;
        for tok in s.split('+').map(str::trim) {
            match tok.to_ascii_uppercase().as_str() {
                "D" => depth = true,
                "I" => combo.incidence = true,
                "L" => combo.label = true,
                "RGB" => combo.rgb = true,
                _ => return Err(Error::Config(format!("unknown modality {tok:?} in {s:?}"))),
            }
        }
        if !depth {
            return Err(Error::Config(format!("modality combo {s:?} must include D")));
        }
        Ok(combo)
    }
}

/// A projected frame: channel planes, the ground-truth intensity plane and
/// the index of the point that won each pixel.
#[derive(Clone, Debug, PartialEq)]
pub struct SphericalImage<T> {
    pub config: ProjectionConfig,
    pub planes: BTreeMap<Channel, Vec<T>>,
    pub intensity: Vec<T>,
    /// Winning point per pixel, `-1` where no point landed.
    pub point_index: Vec<i64>,
    /// Size of the source cloud.
    pub source_points: usize,
}

impl<T: Scalar> SphericalImage<T> {
    pub fn height(&self) -> usize {
        self.config.height
    }

    pub fn width(&self) -> usize {
        self.config.width
    }

    pub fn plane(&self, c: Channel) -> Option<&[T]> {
        self.planes.get(&c).map(Vec::as_slice)
    }

    pub fn mask(&self) -> &[T] {
        &self.planes[&Channel::Mask]
    }

    pub fn has(&self, c: Channel) -> bool {
        self.planes.contains_key(&c)
    }

    /// Number of pixels holding a return.
    pub fn hits(&self) -> usize {
        self.point_index.iter().filter(|&&i| i >= 0).count()
    }

    /// Whether every channel of the combo is present.
    pub fn supports(&self, combo: &ModalityCombo) -> bool {
        combo.channels().iter().all(|c| self.has(*c))
    }

    /// `1×1×H×W` arrays for the ground-truth intensity and the mask.
    pub fn target_arrays(&self) -> (Array<T>, Array<T>) {
        let shape = [1, 1, self.height(), self.width()];
        (
            Array::from_vec(shape, self.intensity.clone()).expect("intensity plane"),
            Array::from_vec(shape, self.mask().to_vec()).expect("mask plane"),
        )
    }

    pub fn to_packed(&self) -> PackedPlanes {
        let mut names = Vec::new();
        let mut data = Vec::with_capacity((self.planes.len() + 1) * self.config.pixels());
        for (c, plane) in &self.planes {
            names.push(c.name().to_string());
            data.extend(plane.iter().map(|v| v.as_f64() as f32));
        }
        names.push("intensity".into());
        data.extend(self.intensity.iter().map(|v| v.as_f64() as f32));
        PackedPlanes::new(self.height(), self.width(), names, data).expect("consistent planes")
    }
}

/// Projects every point onto the grid. Collisions keep the nearest range,
/// with the lower point index winning exact ties.
pub fn spherical_project<T: Scalar>(
    cloud: &PointCloud<T>,
    cfg: &ProjectionConfig,
) -> Result<SphericalImage<T>> {
    cfg.validate()?;
    if cloud.is_empty() {
        return Err(Error::EmptyInput("cannot project an empty cloud"));
    }
    let n_pix = cfg.pixels();
    let mut winner: Vec<i64> = vec![-1; n_pix];
    let mut best = vec![f64::INFINITY; n_pix];
    for (i, p) in cloud.points.iter().enumerate() {
        let pf = p.map(|v| v.as_f64());
        let r = norm3(p);
        if !(r > 0.0) || !pf.iter().all(|v| v.is_finite()) {
            return Err(Error::InvalidPoint(format!("point {i} has zero or non-finite range")));
        }
        let Some((row, col)) = cfg.pixel_of(pf) else {
            continue;
        };
        let k = row * cfg.width + col;
        if r < best[k] {
            best[k] = r;
            winner[k] = i as i64;
        }
    }

    let zero = T::zero();
    let mut planes = BTreeMap::new();
    let mut fill = |c: Channel, f: &dyn Fn(usize) -> T| {
        let plane: Vec<T> = winner
            .iter()
            .map(|&w| if w < 0 { zero } else { f(w as usize) })
            .collect();
        planes.insert(c, plane);
    };
    fill(Channel::Depth, &|i| T::lit((cloud.range(i) / cfg.r_max).min(1.0)));
    fill(Channel::Mask, &|_| T::one());
    if let Some(angles) = &cloud.incidence {
        let half_pi = T::lit(std::f64::consts::FRAC_PI_2);
        fill(Channel::Incidence, &|i| angles[i].max(zero).min(half_pi));
    }
    if let Some(labels) = &cloud.label {
        fill(Channel::Label, &|i| T::lit(labels[i].min(255) as f64 / 255.0));
    }
    if let Some(rgb) = &cloud.rgb {
        fill(Channel::Red, &|i| rgb[i][0]);
        fill(Channel::Green, &|i| rgb[i][1]);
        fill(Channel::Blue, &|i| rgb[i][2]);
        let mask = cloud.color_mask.as_ref();
        fill(Channel::ColorMask, &|i| match mask {
            Some(m) if !m[i] => zero,
            _ => T::one(),
        });
    }
    let intensity = winner
        .iter()
        .map(|&w| if w < 0 { zero } else { cloud.intensity[w as usize] })
        .collect();
    Ok(SphericalImage {
        config: *cfg,
        planes,
        intensity,
        point_index: winner,
        source_points: cloud.len(),
    })
}

/// Stacks the combo's channels in [`Channel::ORDER`] as a `1×C×H×W` array.
pub fn select_channels<T: Scalar>(img: &SphericalImage<T>, combo: &ModalityCombo) -> Result<Array<T>> {
    let channels = combo.channels();
    let mut data = Vec::with_capacity(channels.len() * img.config.pixels());
    for c in &channels {
        let plane = img
            .plane(*c)
            .ok_or_else(|| Error::ModalityUnavailable(format!("{} (channel {})", combo, c.name())))?;
        data.extend_from_slice(plane);
    }
    Ok(Array::from_vec(
        [1, channels.len(), img.height(), img.width()],
        data,
    )?)
}

/// Writes a per-pixel prediction back onto the source points. Points that
/// lost their pixel or fell outside the field of view get `-1`.
pub fn unproject<T: Scalar>(img: &SphericalImage<T>, pred: &[T]) -> Result<Vec<T>> {
    if pred.len() != img.config.pixels() {
        return Err(Error::Shape(format!(
            "prediction has {} values for a {}×{} image",
            pred.len(),
            img.height(),
            img.width()
        )));
    }
    let mut out = vec![T::lit(UNPROJECTED); img.source_points];
    for (k, &w) in img.point_index.iter().enumerate() {
        if w >= 0 {
            out[w as usize] = pred[k];
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cloud(points: Vec<[f64; 3]>) -> PointCloud<f64> {
        let n = points.len();
        PointCloud::new(points, (0..n).map(|i| 0.1 * i as f64 % 1.0).collect()).unwrap()
    }

    #[test]
    fn forward_axis_maps_to_center_column_and_row_four() {
        let cfg = ProjectionConfig::default();
        assert_eq!(cfg.pixel_of([1.0, 0.0, 0.0]), Some((4, 512)));
        // floor((1 − 24.8/26.8)·64) = floor(4.776…) = 4
        assert_eq!(((1.0 - 24.8 / 26.8) * 64.0f64).floor(), 4.0);
    }

    #[test]
    fn nearest_point_wins_a_pixel() {
        let img = spherical_project(&cloud(vec![[5.0, 0.0, 0.0], [2.0, 0.0, 0.0]]), &ProjectionConfig::default()).unwrap();
        let k = 4 * 1024 + 512;
        assert_eq!(img.point_index[k], 1);
        assert!((img.plane(Channel::Depth).unwrap()[k] * 80.0 - 2.0).abs() < 1e-12);
        assert_eq!(img.hits(), 1);
    }

    #[test]
    fn ties_go_to_the_lower_index() {
        let img = spherical_project(&cloud(vec![[3.0, 0.0, 0.0], [3.0, 0.0, 0.0]]), &ProjectionConfig::default()).unwrap();
        assert_eq!(img.point_index[4 * 1024 + 512], 0);
    }

    #[test]
    fn out_of_fov_points_are_discarded() {
        let cfg = ProjectionConfig::default();
        assert_eq!(cfg.pixel_of([1.0, 0.0, 1.0]), None);
        assert_eq!(cfg.pixel_of([1.0, 0.0, -1.0]), None);
        let img = spherical_project(&cloud(vec![[1.0, 0.0, 1.0], [1.0, 0.0, 0.0]]), &cfg).unwrap();
        assert_eq!(img.hits(), 1);
        assert_eq!(unproject(&img, &vec![0.0; cfg.pixels()]).unwrap(), vec![-1.0, 0.0]);
    }

    #[test]
    fn empty_cloud_is_rejected() {
        assert!(matches!(
            spherical_project(&cloud(vec![]), &ProjectionConfig::default()),
            Err(Error::EmptyInput(_))
        ));
    }

    #[test]
    fn channel_selection_follows_the_fixed_order() {
        let mut c = cloud(vec![[1.0, 0.0, 0.0], [0.0, 4.0, -1.0]]);
        c.label = Some(vec![40, 255]);
        c.incidence = Some(vec![0.1, 0.2]);
        c.rgb = Some(vec![[0.1, 0.2, 0.3]; 2]);
        c.color_mask = Some(vec![true, false]);
        let img = spherical_project(&c, &ProjectionConfig::with_size(16, 64)).unwrap();
        let d: ModalityCombo = "D".parse().unwrap();
        assert_eq!(select_channels(&img, &d).unwrap().shape()[1], 2);
        let full: ModalityCombo = "D+RGB+L+I".parse().unwrap();
        let stack = select_channels(&img, &full).unwrap();
        assert_eq!(stack.shape(), [1, 8, 16, 64]);
        let names: Vec<_> = full.channels().iter().map(|c| c.name()).collect();
        assert_eq!(names, ["depth", "mask", "incidence", "label", "r", "g", "b", "color_mask"]);
        let k = img.point_index.iter().position(|&w| w == 0).unwrap();
        assert_eq!(stack.plane(0, 3)[k], 40.0 / 255.0);
        assert_eq!(stack.plane(0, 2)[k], 0.1);
    }

    #[test]
    fn rgb_on_a_colorless_frame_is_unavailable() {
        let img = spherical_project(&cloud(vec![[1.0, 0.0, 0.0]]), &ProjectionConfig::with_size(8, 8)).unwrap();
        let combo: ModalityCombo = "D+RGB".parse().unwrap();
        assert!(matches!(select_channels(&img, &combo), Err(Error::ModalityUnavailable(_))));
        assert!(!img.supports(&combo));
    }

    #[test]
    fn combo_parsing_and_display() {
        for (i, c) in ModalityCombo::ablation_columns().iter().enumerate() {
            assert_eq!(c.column_index(), i);
            assert_eq!(c.to_string().parse::<ModalityCombo>().unwrap(), *c);
        }
        let names: Vec<String> = ModalityCombo::ablation_columns().iter().map(|c| c.to_string()).collect();
        assert_eq!(names, ["D", "D+I", "D+L", "D+L+I", "D+RGB", "D+RGB+I", "D+RGB+L", "D+RGB+L+I"]);
        assert_eq!("I+D+l".parse::<ModalityCombo>().unwrap().to_string(), "D+L+I");
        assert!("L+I".parse::<ModalityCombo>().is_err());
        assert!("D+X".parse::<ModalityCombo>().is_err());
    }

    #[test]
    fn unproject_round_trips_intensity() {
        let c = cloud(vec![[1.0, 0.0, 0.0], [2.0, 0.0, 0.0], [0.0, 3.0, -0.2]]);
        let img = spherical_project(&c, &ProjectionConfig::default()).unwrap();
        let back = unproject(&img, &img.intensity).unwrap();
        assert_eq!(back, vec![c.intensity[0], -1.0, c.intensity[2]]);
        assert!(unproject(&img, &[0.0; 3]).is_err());
    }

    #[test]
    fn ray_directions_land_in_their_own_pixel() {
        let cfg = ProjectionConfig::with_size(64, 256);
        for row in (0..64).step_by(7) {
            for col in (0..256).step_by(13) {
                let d = cfg.ray_direction(row, col);
                assert_eq!(cfg.pixel_of(d.map(|v| v * 7.5)), Some((row, col)));
            }
        }
    }
}
