//! Surface normals and laser incidence angles.
//!
//! For each point: estimate the local surface normal from its neighborhood
//! covariance, turn it toward the sensor, and take the angle between the
//! unit ray `u = p/‖p‖` and that normal as `θ = arccos |u·n|`.

mod kdtree;

use std::io::Write;
use std::path::Path;

use intensim_tensor::Scalar;
use nalgebra::{Matrix3, SymmetricEigen, Vector3};
use rayon::prelude::*;

pub use kdtree::{dist2, KdTree};

use crate::error::{Error, Result};
use crate::ingest::PointCloud;

pub const DEFAULT_NEIGHBORS: usize = 16;

/// Relative gap below which the two smallest covariance eigenvalues are
/// considered equal.
const EIGEN_TIE: f64 = 1e-9;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NormalEstimate {
    pub normal: [f64; 3],
    /// `λ₀ / (λ₀ + λ₁ + λ₂)`, in `[0, 1/3]`.
    pub planarity: f64,
    /// Set when the neighborhood has no well-defined normal; the normal is
    /// then `−u`, facing the sensor.
    pub degenerate: bool,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct IncidenceResult {
    pub angle: f64,
    pub cos_angle: f64,
    pub direction: [f64; 3],
}

fn dot(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

fn unit(p: &[f64; 3]) -> Option<[f64; 3]> {
    let r = dot(p, p).sqrt();
    if r > 0.0 && r.is_finite() {
        Some(p.map(|v| v / r))
    } else {
        None
    }
}

fn to_f64<T: Scalar>(p: &[T; 3]) -> [f64; 3] {
    p.map(|v| v.as_f64())
}

/// Cloud positions with a spatial index for neighborhood queries.
pub struct NeighborIndex {
    tree: KdTree,
}

impl NeighborIndex {
    pub fn new<T: Scalar>(cloud: &PointCloud<T>) -> Self {
        Self {
            tree: KdTree::new(cloud.points.iter().map(to_f64).collect()),
        }
    }

    pub fn len(&self) -> usize {
        self.tree.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tree.is_empty()
    }

    fn check(&self, k: usize) -> Result<()> {
        if k < 3 {
            return Err(Error::Config(format!("neighbor count {k} must be at least 3")));
        }
        if self.len() < k + 1 {
            return Err(Error::InsufficientPoints {
                needed: k + 1,
                available: self.len(),
            });
        }
        Ok(())
    }

    /// The `k` nearest neighbors of point `q`, excluding `q`; ties go to the
    /// lower index.
    pub fn knn(&self, q: usize, k: usize) -> Result<Vec<usize>> {
        self.check(k)?;
        if q >= self.len() {
            return Err(Error::InvalidPoint(format!("query index {q} out of range")));
        }
        Ok(self.tree.nearest(self.tree.point(q), k, Some(q)))
    }

    pub fn estimate_normal(&self, q: usize, k: usize) -> Result<NormalEstimate> {
        let neighbors = self.knn(q, k)?;
        let p = *self.tree.point(q);
        let sample: Vec<[f64; 3]> = std::iter::once(p)
            .chain(neighbors.iter().map(|&i| *self.tree.point(i)))
            .collect();
        let fallback = unit(&p)
            .map(|u| u.map(|v| -v))
            .ok_or_else(|| Error::InvalidPoint(format!("point {q} has zero range")))?;
        Ok(pca_normal(&sample, fallback))
    }
}

/// Smallest-eigenvalue direction of the sample covariance about the
/// centroid, or `fallback` when the neighborhood is rank deficient or the
/// two smallest eigenvalues tie.
pub fn pca_normal(sample: &[[f64; 3]], fallback: [f64; 3]) -> NormalEstimate {
    let n = sample.len() as f64;
    let mut centroid = [0.0; 3];
    for p in sample {
        for a in 0..3 {
            centroid[a] += p[a];
        }
    }
    let centroid = centroid.map(|c| c / n);
    let mut cov = Matrix3::<f64>::zeros();
    for p in sample {
        let d = Vector3::new(p[0] - centroid[0], p[1] - centroid[1], p[2] - centroid[2]);
        cov += d * d.transpose();
    }
    cov /= n;
    let eig = SymmetricEigen::new(cov);
    let mut idx = [0usize, 1, 2];
    idx.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]));
    let lam = idx.map(|i| eig.eigenvalues[i].max(0.0));
    let trace = lam[0] + lam[1] + lam[2];
    let degenerate_result = NormalEstimate {
        normal: fallback,
        planarity: if trace > 0.0 { lam[0] / trace } else { 0.0 },
        degenerate: true,
    };
    if !(trace > 0.0) || lam[1] <= 1e-12 * trace || (lam[1] - lam[0]) < EIGEN_TIE * trace {
        return degenerate_result;
    }
    let v = eig.eigenvectors.column(idx[0]);
    match unit(&[v[0], v[1], v[2]]) {
        Some(normal) => NormalEstimate {
            normal,
            planarity: lam[0] / trace,
            degenerate: false,
        },
        None => degenerate_result,
    }
}

/// Flips `n` when it points away from the sensor. A normal orthogonal to
/// the ray keeps its sign.
pub fn orient_toward_sensor(p: &[f64; 3], n: &[f64; 3]) -> [f64; 3] {
    if dot(p, n) <= 0.0 {
        *n
    } else {
        n.map(|v| -v)
    }
}

/// Angle between the ray to `p` and the normal `n`, in `[0, π/2]`.
pub fn incidence_angle(p: &[f64; 3], n: &[f64; 3]) -> Result<IncidenceResult> {
    let u = unit(p).ok_or_else(|| Error::InvalidPoint(format!("zero-range point {p:?}")))?;
    let cos_angle = dot(&u, n).abs().clamp(0.0, 1.0);
    Ok(IncidenceResult {
        angle: cos_angle.acos(),
        cos_angle,
        direction: u,
    })
}

/// Per-point incidence angles for a whole cloud.
#[derive(Clone, Debug, PartialEq)]
pub struct IncidenceChannel<T> {
    pub angles: Vec<T>,
    pub normals: Vec<[T; 3]>,
    pub degenerate: Vec<bool>,
}

impl<T: Scalar> IncidenceChannel<T> {
    pub fn degenerate_count(&self) -> usize {
        self.degenerate.iter().filter(|&&d| d).count()
    }

    /// CSV with columns `index,angle_rad,degenerate_flag`.
    pub fn write_csv<W: Write>(&self, out: &mut W) -> std::io::Result<()> {
        writeln!(out, "index,angle_rad,degenerate_flag")?;
        for (i, (a, d)) in self.angles.iter().zip(&self.degenerate).enumerate() {
            writeln!(out, "{i},{},{}", a.as_f64(), *d as u8)?;
        }
        Ok(())
    }

    pub fn save_csv(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::new();
        self.write_csv(&mut buf).map_err(|e| Error::io(path, e))?;
        crate::formats::write_file(path, &buf)
    }
}

/// Normal estimation, orientation and incidence for every point. Degenerate
/// neighborhoods get angle 0.
pub fn incidence_channel<T: Scalar>(cloud: &PointCloud<T>, k: usize) -> Result<IncidenceChannel<T>> {
    let index = NeighborIndex::new(cloud);
    index.check(k)?;
    let per_point: Vec<(f64, [f64; 3], bool)> = (0..cloud.len())
        .into_par_iter()
        .map(|i| {
            let est = index.estimate_normal(i, k)?;
            let p = to_f64(&cloud.points[i]);
            let n = orient_toward_sensor(&p, &est.normal);
            let angle = if est.degenerate {
                0.0
            } else {
                incidence_angle(&p, &n)?.angle
            };
            Ok((angle, n, est.degenerate))
        })
        .collect::<Result<_>>()?;
    let mut out = IncidenceChannel {
        angles: Vec::with_capacity(cloud.len()),
        normals: Vec::with_capacity(cloud.len()),
        degenerate: Vec::with_capacity(cloud.len()),
    };
    for (a, n, d) in per_point {
        out.angles.push(T::lit(a));
        out.normals.push(n.map(T::lit));
        out.degenerate.push(d);
    }
    Ok(out)
}

/// Computes the incidence channel and stores angles and oriented normals on
/// the cloud.
pub fn attach_incidence<T: Scalar>(mut cloud: PointCloud<T>, k: usize) -> Result<PointCloud<T>> {
    let ch = incidence_channel(&cloud, k)?;
    cloud.incidence = Some(ch.angles);
    cloud.normal = Some(ch.normals);
    Ok(cloud)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::{FRAC_PI_4, SQRT_2};

    fn cloud(points: Vec<[f64; 3]>) -> PointCloud<f64> {
        let n = points.len();
        PointCloud::new(points, vec![0.5; n]).unwrap()
    }

    fn close(a: [f64; 3], b: [f64; 3], tol: f64) -> bool {
        (0..3).all(|i| (a[i] - b[i]).abs() < tol)
    }

    #[test]
    fn knn_on_a_line() {
        let idx = NeighborIndex::new(&cloud((1..=4).map(|x| [x as f64, 0.0, 0.0]).collect()));
        // q = the point at x = 2
        assert_eq!(idx.knn(1, 3).unwrap(), vec![0, 2, 3]);
        let mut two = idx.tree.nearest(idx.tree.point(1), 2, Some(1));
        two.sort();
        assert_eq!(two, vec![0, 2]);
    }

    #[test]
    fn knn_needs_enough_points() {
        let idx = NeighborIndex::new(&cloud(vec![[1.0, 0.0, 0.0]; 4]));
        assert!(matches!(idx.knn(0, 4), Err(Error::InsufficientPoints { needed: 5, available: 4 })));
        assert!(idx.knn(0, 2).is_err());
        assert_eq!(idx.knn(0, 3).unwrap(), vec![1, 2, 3]);
    }

    fn plane_points(f: impl Fn(f64, f64) -> [f64; 3]) -> Vec<[f64; 3]> {
        let mut v = Vec::new();
        for i in 0..7 {
            for j in 0..7 {
                let a = i as f64 * 0.31 + (j as f64 * 0.17).sin() * 0.05;
                let b = j as f64 * 0.29 + (i as f64 * 0.23).cos() * 0.05;
                v.push(f(a, b));
            }
        }
        v
    }

    #[test]
    fn normal_of_a_horizontal_plane() {
        let c = cloud(plane_points(|a, b| [a + 2.0, b - 1.0, 3.0]));
        let est = NeighborIndex::new(&c).estimate_normal(24, 16).unwrap();
        assert!(!est.degenerate);
        let n = est.normal;
        assert!(close(n, [0.0, 0.0, 1.0], 1e-6) || close(n, [0.0, 0.0, -1.0], 1e-6));
        assert!(est.planarity < 1e-12);
    }

    #[test]
    fn normal_of_a_tilted_plane() {
        // x + z = 5
        let c = cloud(plane_points(|a, b| [5.0 - a, b, a]));
        let n = NeighborIndex::new(&c).estimate_normal(10, 16).unwrap().normal;
        let want = [1.0 / SQRT_2, 0.0, 1.0 / SQRT_2];
        assert!(close(n, want, 1e-6) || close(n, want.map(|v| -v), 1e-6), "{n:?}");
    }

    #[test]
    fn collinear_neighborhood_is_degenerate() {
        let pts: Vec<[f64; 3]> = (1..=4).map(|x| [x as f64, 1.0, 0.0]).collect();
        let c = cloud(pts.clone());
        let est = NeighborIndex::new(&c).estimate_normal(1, 3).unwrap();
        assert!(est.degenerate);
        let u = unit(&pts[1]).unwrap();
        assert!(close(est.normal, u.map(|v| -v), 1e-15));
    }

    #[test]
    fn orientation_faces_the_sensor() {
        assert_eq!(orient_toward_sensor(&[5.0, 0.0, 0.0], &[1.0, 0.0, 0.0]), [-1.0, 0.0, 0.0]);
        assert_eq!(orient_toward_sensor(&[5.0, 0.0, 0.0], &[-1.0, 0.0, 0.0]), [-1.0, 0.0, 0.0]);
        assert_eq!(orient_toward_sensor(&[3.0, 4.0, 0.0], &[0.0, 0.0, 1.0]), [0.0, 0.0, 1.0]);
    }

    #[test]
    fn incidence_examples() {
        let r = incidence_angle(&[5.0, 0.0, 0.0], &[-1.0, 0.0, 0.0]).unwrap();
        assert_eq!(r.angle, 0.0);
        assert_eq!(r.cos_angle, 1.0);
        let n = [-1.0 / SQRT_2, 0.0, -1.0 / SQRT_2];
        let r = incidence_angle(&[5.0, 0.0, 0.0], &n).unwrap();
        assert!((r.angle - FRAC_PI_4).abs() < 1e-12);
        assert!(matches!(incidence_angle(&[0.0; 3], &n), Err(Error::InvalidPoint(_))));
    }

    #[test]
    fn incidence_channel_rejects_tiny_clouds() {
        let c = cloud((0..16).map(|i| [1.0 + i as f64, 0.5, 0.0]).collect());
        assert!(matches!(incidence_channel(&c, 16), Err(Error::InsufficientPoints { .. })));
    }

    #[test]
    fn angle_csv_has_one_row_per_point() {
        let c = cloud(plane_points(|a, b| [10.0, a, b]));
        let ch = incidence_channel(&c, 8).unwrap();
        let mut buf = Vec::new();
        ch.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().count(), c.len() + 1);
        assert!(text.starts_with("index,angle_rad,degenerate_flag\n0,"));
    }
}
