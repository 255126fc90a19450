//! Ray-cast synthetic scenes with a Lambertian ground-truth intensity
//! `I = ρ_c · cos θ · exp(−r / a₀) + N(0, σ²)`, clamped to `[0, 1]`.

use intensim_tensor::Scalar;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ingest::PointCloud;
use crate::projection::ProjectionConfig;

/// SemanticKITTI class ids used for the synthetic surfaces.
pub mod class {
    pub const CAR: u32 = 10;
    pub const ROAD: u32 = 40;
    pub const SIDEWALK: u32 = 48;
    pub const BUILDING: u32 = 50;
    pub const FENCE: u32 = 51;
    pub const TRUNK: u32 = 71;
    pub const POLE: u32 = 80;
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthSceneConfig {
    pub n_planes: usize,
    pub n_boxes: usize,
    pub n_cylinders: usize,
    /// `(class id, albedo)` pairs.
    pub albedo: Vec<(u32, f64)>,
    /// Attenuation length in meters.
    pub attenuation: f64,
    pub noise_sigma: f64,
    /// Sensor height above the ground plane in meters.
    pub sensor_height: f64,
}

impl Default for SynthSceneConfig {
    fn default() -> Self {
        Self {
            n_planes: 4,
            n_boxes: 6,
            n_cylinders: 8,
            albedo: vec![
                (class::CAR, 0.85),
                (class::ROAD, 0.30),
                (class::SIDEWALK, 0.55),
                (class::BUILDING, 0.65),
                (class::FENCE, 0.40),
                (class::TRUNK, 0.25),
                (class::POLE, 0.75),
            ],
            attenuation: 60.0,
            noise_sigma: 0.01,
            sensor_height: 1.73,
        }
    }
}

impl SynthSceneConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.attenuation > 0.0) {
            return Err(Error::Config("attenuation length must be positive".into()));
        }
        if !(self.noise_sigma >= 0.0) {
            return Err(Error::Config("noise sigma must be non-negative".into()));
        }
        if let Some((c, a)) = self.albedo.iter().find(|(_, a)| !(*a > 0.0 && *a <= 1.0)) {
            return Err(Error::Config(format!("albedo {a} of class {c} outside (0, 1]")));
        }
        for c in [class::ROAD, class::CAR, class::BUILDING, class::POLE] {
            self.albedo_of(c)?;
        }
        Ok(())
    }

    pub fn albedo_of(&self, class_id: u32) -> Result<f64> {
        self.albedo
            .iter()
            .find(|(c, _)| *c == class_id)
            .map(|(_, a)| *a)
            .ok_or_else(|| Error::Config(format!("no albedo for class {class_id}")))
    }
}

/// Noise-free intensity for a surface of albedo `rho` hit at range `r`.
pub fn lambertian_intensity(rho: f64, cos_theta: f64, range: f64, attenuation: f64) -> f64 {
    rho * cos_theta * (-range / attenuation).exp()
}

#[derive(Clone, Debug, PartialEq)]
pub enum Shape {
    /// Infinite plane through `point` with unit `normal`.
    Plane { point: [f64; 3], normal: [f64; 3] },
    /// Vertical rectangle: base center, unit horizontal normal, half width,
    /// bottom and top heights.
    Wall {
        center: [f64; 2],
        normal: [f64; 2],
        half_width: f64,
        z_min: f64,
        z_max: f64,
    },
    /// Box rotated by `yaw` about the vertical axis.
    Box {
        center: [f64; 3],
        half: [f64; 3],
        yaw: f64,
    },
    /// Vertical cylinder.
    Cylinder {
        center: [f64; 2],
        radius: f64,
        z_min: f64,
        z_max: f64,
    },
}

#[derive(Clone, Debug, PartialEq)]
pub struct Surface {
    pub shape: Shape,
    pub class_id: u32,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Hit {
    pub range: f64,
    pub normal: [f64; 3],
    pub class_id: u32,
}

fn dot(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

const EPS: f64 = 1e-9;

impl Shape {
    /// Nearest positive ray parameter and the outward normal there.
    fn intersect(&self, d: &[f64; 3]) -> Option<(f64, [f64; 3])> {
        match *self {
            Shape::Plane { point, normal } => {
                let denom = dot(d, &normal);
                if denom.abs() < EPS {
                    return None;
                }
                let t = dot(&point, &normal) / denom;
                (t > EPS).then_some((t, normal))
            }
            Shape::Wall {
                center,
                normal,
                half_width,
                z_min,
                z_max,
            } => {
                let n3 = [normal[0], normal[1], 0.0];
                let denom = dot(d, &n3);
                if denom.abs() < EPS {
                    return None;
                }
                let t = (center[0] * normal[0] + center[1] * normal[1]) / denom;
                if t <= EPS {
                    return None;
                }
                let (x, y, z) = (t * d[0], t * d[1], t * d[2]);
                let along = -(x - center[0]) * normal[1] + (y - center[1]) * normal[0];
                (along.abs() <= half_width && z >= z_min && z <= z_max).then_some((t, n3))
            }
            Shape::Box { center, half, yaw } => {
                let (s, c) = yaw.sin_cos();
                // Ray origin and direction in the box frame.
                let o = [-center[0], -center[1], -center[2]];
                let o = [c * o[0] + s * o[1], -s * o[0] + c * o[1], o[2]];
                let dl = [c * d[0] + s * d[1], -s * d[0] + c * d[1], d[2]];
                let mut t_near = f64::NEG_INFINITY;
                let mut t_far = f64::INFINITY;
                let mut axis = 0;
                let mut sign = 1.0;
                for a in 0..3 {
                    if dl[a].abs() < EPS {
                        if o[a].abs() > half[a] {
                            return None;
                        }
                        continue;
                    }
                    let t1 = (-half[a] - o[a]) / dl[a];
                    let t2 = (half[a] - o[a]) / dl[a];
                    let (lo, hi) = if t1 < t2 { (t1, t2) } else { (t2, t1) };
                    if lo > t_near {
                        t_near = lo;
                        axis = a;
                        sign = if dl[a] > 0.0 { -1.0 } else { 1.0 };
                    }
                    t_far = t_far.min(hi);
                }
                if t_near > t_far || t_near <= EPS {
                    return None;
                }
                let mut nl = [0.0; 3];
                nl[axis] = sign;
                let n = [c * nl[0] - s * nl[1], s * nl[0] + c * nl[1], nl[2]];
                Some((t_near, n))
            }
            Shape::Cylinder {
                center,
                radius,
                z_min,
                z_max,
            } => {
                let a = d[0] * d[0] + d[1] * d[1];
                if a < EPS {
                    return None;
                }
                let b = -2.0 * (d[0] * center[0] + d[1] * center[1]);
                let cc = center[0] * center[0] + center[1] * center[1] - radius * radius;
                let disc = b * b - 4.0 * a * cc;
                if disc < 0.0 {
                    return None;
                }
                let t = (-b - disc.sqrt()) / (2.0 * a);
                if t <= EPS {
                    return None;
                }
                let z = t * d[2];
                if z < z_min || z > z_max {
                    return None;
                }
                let n = [(t * d[0] - center[0]) / radius, (t * d[1] - center[1]) / radius, 0.0];
                Some((t, n))
            }
        }
    }
}

/// A set of surfaces around a sensor at the origin.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Scene {
    pub surfaces: Vec<Surface>,
}

impl Scene {
    /// First surface hit along unit direction `d`, if any.
    pub fn cast(&self, d: &[f64; 3]) -> Option<Hit> {
        let mut best: Option<Hit> = None;
        for s in &self.surfaces {
            if let Some((t, n)) = s.shape.intersect(d) {
                if best.map_or(true, |b| t < b.range) {
                    best = Some(Hit {
                        range: t,
                        normal: n,
                        class_id: s.class_id,
                    });
                }
            }
        }
        best
    }

    /// Ground plus randomly placed walls, boxes and poles.
    pub fn random<R: Rng>(rng: &mut R, cfg: &SynthSceneConfig) -> Self {
        use std::f64::consts::PI;
        let h = cfg.sensor_height;
        let mut surfaces = vec![Surface {
            shape: Shape::Plane {
                point: [0.0, 0.0, -h],
                normal: [0.0, 0.0, 1.0],
            },
            class_id: class::ROAD,
        }];
        let has = |c: u32| cfg.albedo.iter().any(|(k, _)| *k == c);
        for _ in 0..cfg.n_planes {
            let az = rng.gen_range(-PI..PI);
            let dist = rng.gen_range(8.0..35.0);
            let tilt = rng.gen_range(-1.0..1.0);
            let facing = az + PI + tilt;
            let class_id = if has(class::FENCE) && rng.gen_bool(0.3) {
                class::FENCE
            } else {
                class::BUILDING
            };
            surfaces.push(Surface {
                shape: Shape::Wall {
                    center: [dist * az.cos(), dist * az.sin()],
                    normal: [facing.cos(), facing.sin()],
                    half_width: rng.gen_range(3.0..12.0),
                    z_min: -h,
                    z_max: rng.gen_range(1.0..8.0),
                },
                class_id,
            });
        }
        if has(class::SIDEWALK) {
            // Raised curb slab along one side of the road.
            let side = if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
            let offset = rng.gen_range(4.0..7.0);
            surfaces.push(Surface {
                shape: Shape::Box {
                    center: [0.0, side * (offset + 2.0), -h],
                    half: [40.0, 2.0, 0.15],
                    yaw: rng.gen_range(-0.1..0.1),
                },
                class_id: class::SIDEWALK,
            });
        }
        for _ in 0..cfg.n_boxes {
            let az = rng.gen_range(-PI..PI);
            let dist = rng.gen_range(5.0..30.0);
            let size = [rng.gen_range(1.8..2.4), rng.gen_range(0.8..1.0), rng.gen_range(0.7..0.9)];
            surfaces.push(Surface {
                shape: Shape::Box {
                    center: [dist * az.cos(), dist * az.sin(), -h + size[2]],
                    half: size,
                    yaw: rng.gen_range(-PI..PI),
                },
                class_id: class::CAR,
            });
        }
        for _ in 0..cfg.n_cylinders {
            let az = rng.gen_range(-PI..PI);
            let dist = rng.gen_range(4.0..30.0);
            let trunk = has(class::TRUNK) && rng.gen_bool(0.5);
            surfaces.push(Surface {
                shape: Shape::Cylinder {
                    center: [dist * az.cos(), dist * az.sin()],
                    radius: if trunk {
                        rng.gen_range(0.2..0.5)
                    } else {
                        rng.gen_range(0.08..0.2)
                    },
                    z_min: -h,
                    z_max: rng.gen_range(2.0..8.0),
                },
                class_id: if trunk { class::TRUNK } else { class::POLE },
            });
        }
        Self { surfaces }
    }
}

/// One synthetic scan and its exact incidence angles.
#[derive(Clone, Debug, PartialEq)]
pub struct SynthFrame<T> {
    pub cloud: PointCloud<T>,
    pub analytic_angles: Vec<f64>,
    pub analytic_normals: Vec<[f64; 3]>,
    pub no_hit: usize,
}

/// Casts one ray per grid pixel through `scene`. Hits at or beyond
/// `proj.r_max` count as no-hit.
pub fn scan<T: Scalar, R: Rng>(
    scene: &Scene,
    cfg: &SynthSceneConfig,
    proj: &ProjectionConfig,
    rng: &mut R,
) -> Result<SynthFrame<T>> {
    cfg.validate()?;
    proj.validate()?;
    let noise = Normal::new(0.0, cfg.noise_sigma.max(0.0))
        .map_err(|e| Error::Config(e.to_string()))?;
    let mut points = Vec::new();
    let mut intensity = Vec::new();
    let mut labels = Vec::new();
    let mut angles = Vec::new();
    let mut normals = Vec::new();
    let mut no_hit = 0;
    for row in 0..proj.height {
        for col in 0..proj.width {
            let d = proj.ray_direction(row, col);
            let Some(hit) = scene.cast(&d).filter(|h| h.range < proj.r_max) else {
                no_hit += 1;
                continue;
            };
            let n = if dot(&d, &hit.normal) > 0.0 {
                hit.normal.map(|v| -v)
            } else {
                hit.normal
            };
            let cos = dot(&d, &n).abs().min(1.0);
            let rho = cfg.albedo_of(hit.class_id)?;
            let mut value = lambertian_intensity(rho, cos, hit.range, cfg.attenuation);
            if cfg.noise_sigma > 0.0 {
                value += noise.sample(rng);
            }
            points.push(d.map(|v| T::lit(v * hit.range)));
            intensity.push(T::lit(value.clamp(0.0, 1.0)));
            labels.push(hit.class_id);
            angles.push(cos.acos());
            normals.push(n);
        }
    }
    let cloud = PointCloud::new(points, intensity)?.with_labels(labels)?;
    Ok(SynthFrame {
        cloud,
        analytic_angles: angles,
        analytic_normals: normals,
        no_hit,
    })
}

/// A random scene scanned on the projection grid; identical seeds give
/// bitwise-identical frames.
pub fn synth_scene<T: Scalar>(
    seed: u64,
    cfg: &SynthSceneConfig,
    proj: &ProjectionConfig,
) -> Result<SynthFrame<T>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let scene = Scene::random(&mut rng, cfg);
    scan(&scene, cfg, proj, &mut rng)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn frontal_plane_intensity() {
        let scene = Scene {
            surfaces: vec![Surface {
                shape: Shape::Plane {
                    point: [10.0, 0.0, 0.0],
                    normal: [-1.0, 0.0, 0.0],
                },
                class_id: class::BUILDING,
            }],
        };
        let hit = scene.cast(&[1.0, 0.0, 0.0]).unwrap();
        assert!((hit.range - 10.0).abs() < 1e-12);
        let i = lambertian_intensity(0.8, 1.0, hit.range, 60.0);
        assert!((i - 0.8 * (-10.0f64 / 60.0).exp()).abs() < 1e-15);
        assert!((i - 0.6774).abs() < 5e-4);
    }

    #[test]
    fn grazing_incidence_gives_no_signal() {
        let cos = std::f64::consts::FRAC_PI_2.cos();
        assert!(lambertian_intensity(0.9, cos, 5.0, 60.0).abs() < 1e-15);
    }

    #[test]
    fn same_seed_same_scene() {
        let proj = ProjectionConfig::with_size(16, 64);
        let cfg = SynthSceneConfig::default();
        let a = synth_scene::<f32>(9, &cfg, &proj).unwrap();
        let b = synth_scene::<f32>(9, &cfg, &proj).unwrap();
        assert_eq!(a, b);
        let c = synth_scene::<f32>(10, &cfg, &proj).unwrap();
        assert_ne!(a.cloud.points, c.cloud.points);
    }

    #[test]
    fn box_and_cylinder_hits_have_outward_normals() {
        let bx = Shape::Box {
            center: [10.0, 0.0, 0.0],
            half: [1.0, 1.0, 1.0],
            yaw: 0.3,
        };
        let (t, n) = bx.intersect(&[1.0, 0.0, 0.0]).unwrap();
        assert!(t > 8.5 && t < 9.0);
        assert!(n[0] < 0.0);
        assert!((n[0] * n[0] + n[1] * n[1] + n[2] * n[2] - 1.0).abs() < 1e-12);
        let cyl = Shape::Cylinder {
            center: [0.0, 5.0],
            radius: 0.5,
            z_min: -2.0,
            z_max: 2.0,
        };
        let (t, n) = cyl.intersect(&[0.0, 1.0, 0.0]).unwrap();
        assert!((t - 4.5).abs() < 1e-12);
        assert!((n[1] + 1.0).abs() < 1e-12);
        assert!(cyl.intersect(&[0.0, -1.0, 0.0]).is_none());
    }

    #[test]
    fn scan_labels_and_ranges_are_consistent() {
        let proj = ProjectionConfig::with_size(32, 128);
        let f = synth_scene::<f64>(4, &SynthSceneConfig::default(), &proj).unwrap();
        f.cloud.validate().unwrap();
        assert_eq!(f.cloud.len() + f.no_hit, 32 * 128);
        assert_eq!(f.analytic_angles.len(), f.cloud.len());
        assert!(f.analytic_angles.iter().all(|a| (0.0..=std::f64::consts::FRAC_PI_2).contains(a)));
        assert!((0..f.cloud.len()).all(|i| f.cloud.range(i) < proj.r_max));
    }
}
