//! Library behavior checked against independent brute-force and closed-form
//! computations.

use intensim::evaluation::{error_heatmap, error_histogram, eval_mse, Constant, IntensityPredictor};
use intensim::geometry::{incidence_angle, orient_toward_sensor, NeighborIndex};
use intensim::projection::{select_channels, unproject, UNPROJECTED};
use intensim::tensor::{Array, Graph};
use intensim::*;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn brute_knn(points: &[[f64; 3]], q: usize, k: usize) -> Vec<usize> {
    let mut d: Vec<(f64, usize)> = points
        .iter()
        .enumerate()
        .filter(|(i, _)| *i != q)
        .map(|(i, p)| {
            let dx = p[0] - points[q][0];
            let dy = p[1] - points[q][1];
            let dz = p[2] - points[q][2];
            (dx * dx + dy * dy + dz * dz, i)
        })
        .collect();
    d.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    d.into_iter().take(k).map(|(_, i)| i).collect()
}

fn cloud_of(points: Vec<[f64; 3]>) -> PointCloud64 {
    let n = points.len();
    PointCloud::new(points, vec![0.5; n]).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn knn_matches_brute_force(seed in any::<u64>(), n in 20usize..300, k in 3usize..12) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        // Coarse integer lattice forces distance ties.
        let points: Vec<[f64; 3]> = (0..n)
            .map(|_| [0, 1, 2].map(|_| rng.gen_range(-4i32..4) as f64 * 0.5 + 0.01))
            .collect();
        let cloud = cloud_of(points.clone());
        let index = NeighborIndex::new(&cloud);
        for q in (0..n).step_by(7) {
            prop_assert_eq!(index.knn(q, k).unwrap(), brute_knn(&points, q, k));
        }
    }

    #[test]
    fn masked_mse_ignores_unmasked_predictions(
        seed in any::<u64>(),
        junk in prop::collection::vec(-1e3f64..1e3, 16),
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let target = Array::from_fn([1, 1, 4, 4], |_| rng.gen::<f64>());
        let pred = Array::from_fn([1, 1, 4, 4], |_| rng.gen::<f64>());
        let mask = Array::from_fn([1, 1, 4, 4], |_| if rng.gen_bool(0.5) { 1.0 } else { 0.0 });
        let mut changed = pred.clone();
        for (i, v) in changed.data_mut().iter_mut().enumerate() {
            if mask.data()[i] == 0.0 {
                *v = junk[i];
            }
        }
        let eval = |p: &Array<f64>| {
            let mut g = Graph::new();
            let (a, b, c) = (g.constant(p.clone()), g.constant(target.clone()), g.constant(mask.clone()));
            let l = g.masked_mse(a, b, c).unwrap();
            let l1 = g.masked_l1(a, b, c).unwrap();
            (g.value(l).item(), g.value(l1).item())
        };
        prop_assert_eq!(eval(&pred), eval(&changed));
    }
}

#[test]
fn masked_mse_worked_example() {
    let mut g = Graph::<f64>::new();
    let i = g.constant(Array::from_vec([1, 1, 2, 2], vec![0.5, 0.2, 0.0, 0.0]).unwrap());
    let p = g.constant(Array::from_vec([1, 1, 2, 2], vec![0.7, 0.2, 9.0, 9.0]).unwrap());
    let b = g.constant(Array::from_vec([1, 1, 2, 2], vec![1.0, 1.0, 0.0, 0.0]).unwrap());
    let l = g.masked_mse(p, i, b).unwrap();
    assert!((g.value(l).item() - 0.02).abs() < 1e-12);
}

/// Normal of the plane through three points, computed without the library.
fn plane_normal(a: [f64; 3], b: [f64; 3], c: [f64; 3]) -> [f64; 3] {
    let u = [b[0] - a[0], b[1] - a[1], b[2] - a[2]];
    let v = [c[0] - a[0], c[1] - a[1], c[2] - a[2]];
    let n = [u[1] * v[2] - u[2] * v[1], u[2] * v[0] - u[0] * v[2], u[0] * v[1] - u[1] * v[0]];
    let len = (n[0] * n[0] + n[1] * n[1] + n[2] * n[2]).sqrt();
    n.map(|x| x / len)
}

#[test]
fn tilted_plane_angles_match_the_analytic_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let origin = [12.0, -3.0, -1.0];
    let e1 = [0.3, 0.9, 0.1];
    let e2 = [-0.2, 0.1, 0.95];
    let mut pts = Vec::new();
    let mut interior = Vec::new();
    for _ in 0..2000 {
        let (s, t) = (rng.gen_range(-7.0..7.0), rng.gen_range(-7.0..7.0));
        pts.push([0, 1, 2].map(|i| origin[i] + s * e1[i] + t * e2[i]));
        interior.push(f64::max(f64::abs(s), f64::abs(t)) < 6.0);
    }
    let n = plane_normal(origin, [0, 1, 2].map(|i| origin[i] + e1[i]), [0, 1, 2].map(|i| origin[i] + e2[i]));
    let cloud = cloud_of(pts.clone());
    let inc = incidence_channel(&cloud, 16).unwrap();
    let mut good = 0;
    let mut total = 0;
    for (i, p) in pts.iter().enumerate() {
        if !interior[i] {
            continue;
        }
        let r = (p[0] * p[0] + p[1] * p[1] + p[2] * p[2]).sqrt();
        let cos = ((p[0] * n[0] + p[1] * n[1] + p[2] * n[2]) / r).abs();
        let analytic = cos.min(1.0).acos();
        total += 1;
        if (inc.angles[i] - analytic).abs() < 0.05 {
            good += 1;
        }
    }
    assert!(good as f64 >= 0.99 * total as f64, "{good}/{total}");
}

#[test]
fn oriented_normals_face_the_sensor() {
    let p = [5.0, 1.0, 0.0];
    let n = orient_toward_sensor(&p, &[1.0, 0.0, 0.0]);
    assert!(p[0] * n[0] + p[1] * n[1] + p[2] * n[2] <= 0.0);
    let r = incidence_angle(&[10.0, 0.0, 0.0], &[-1.0, 0.0, 0.0]).unwrap();
    assert!(r.angle.abs() < 1e-12);
}

/// Pixel of a point, derived independently from the projection formula.
fn oracle_pixel(p: [f64; 3], cfg: &ProjectionConfig) -> Option<usize> {
    let r = (p[0] * p[0] + p[1] * p[1] + p[2] * p[2]).sqrt();
    let pitch = (p[2] / r).asin();
    if pitch < cfg.fov_down || pitch > cfg.fov_up {
        return None;
    }
    let yaw = p[1].atan2(p[0]);
    let u = (0.5 * (1.0 - yaw / std::f64::consts::PI) * cfg.width as f64).floor() as i64;
    let v = ((cfg.fov_up - pitch) / (cfg.fov_up - cfg.fov_down) * cfg.height as f64).floor() as i64;
    Some(v.clamp(0, cfg.height as i64 - 1) as usize * cfg.width + u.clamp(0, cfg.width as i64 - 1) as usize)
}

#[test]
fn dense_projection_keeps_the_nearest_point() {
    // Scan at twice the resolution so several points compete for a pixel.
    let fine = ProjectionConfig::with_size(128, 512);
    let coarse = ProjectionConfig::with_size(64, 256);
    let f = synth_scene::<f64>(11, &SynthSceneConfig::default(), &fine).unwrap();
    let img = spherical_project(&f.cloud, &coarse).unwrap();
    let mut nearest = vec![f64::INFINITY; coarse.pixels()];
    let mut collisions = 0;
    for (i, p) in f.cloud.points.iter().enumerate() {
        if let Some(k) = oracle_pixel(*p, &coarse) {
            let r = f.cloud.range(i);
            if nearest[k].is_finite() {
                collisions += 1;
            }
            nearest[k] = nearest[k].min(r);
        }
    }
    assert!(collisions > 1000);
    let depth = img.plane(Channel::Depth).unwrap();
    for k in 0..coarse.pixels() {
        if img.mask()[k] == 1.0 {
            let w = img.point_index[k] as usize;
            assert!((depth[k] * coarse.r_max - f.cloud.range(w)).abs() < 1e-9);
            assert_eq!(f.cloud.range(w), nearest[k]);
        } else {
            assert!(nearest[k].is_infinite());
        }
    }
}

#[test]
fn unproject_returns_predictions_to_their_points() {
    let cfg = ProjectionConfig::with_size(32, 128);
    let f = synth_scene::<f64>(3, &SynthSceneConfig::default(), &cfg).unwrap();
    let img = spherical_project(&f.cloud, &cfg).unwrap();
    let back = unproject(&img, &img.intensity).unwrap();
    for (i, v) in back.iter().enumerate() {
        if *v != UNPROJECTED {
            assert_eq!(*v, f.cloud.intensity[i]);
        }
    }
    assert_eq!(back.iter().filter(|v| **v != UNPROJECTED).count(), img.hits());
}

fn uniform_frames(n: usize, seed: u64) -> Vec<SphericalImage64> {
    let cfg = ProjectionConfig::with_size(32, 128);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| {
            let mut f = synth_scene::<f64>(i as u64, &SynthSceneConfig::default(), &cfg).unwrap();
            f.cloud.intensity.iter_mut().for_each(|v| *v = rng.gen());
            spherical_project(&f.cloud, &cfg).unwrap()
        })
        .collect()
}

#[test]
fn constant_half_on_uniform_targets_approaches_one_twelfth() {
    let frames = uniform_frames(40, 1);
    let mse = eval_mse(&Constant(0.5), &frames).unwrap();
    assert!((mse - 1.0 / 12.0).abs() < 2e-3, "{mse}");
}

/// Deterministic pseudo-random predictor.
struct Scrambled;

impl IntensityPredictor<f64> for Scrambled {
    fn predict(&self, frame: &SphericalImage64) -> Result<Vec<f64>> {
        Ok(frame
            .intensity
            .iter()
            .enumerate()
            .map(|(k, v)| v + ((k as f64 * 0.618).fract() - 0.5) * 1.5)
            .collect())
    }
}

#[test]
fn histogram_and_heatmap_match_brute_force_recounts() {
    let frames = uniform_frames(6, 2);
    let bins = 37;
    let h = error_histogram(&Scrambled, &frames, bins).unwrap();
    let mut counts = vec![0u64; bins];
    let mut masked = 0u64;
    let width = 2.0 / bins as f64;
    for f in &frames {
        let pred = Scrambled.predict(f).unwrap();
        for k in 0..pred.len() {
            if f.mask()[k] == 1.0 {
                masked += 1;
                let e = f.intensity[k] - pred[k];
                let mut b = 0;
                while b + 1 < bins && e >= -1.0 + width * (b + 1) as f64 {
                    b += 1;
                }
                counts[b] += 1;
            }
        }
    }
    assert_eq!(h.counts, counts);
    assert_eq!(h.total(), masked);

    let hm = error_heatmap(&Scrambled, &frames).unwrap();
    let mean = hm.mean();
    let n = frames[0].intensity.len();
    for k in 0..n {
        let mut hits = 0.0;
        for f in &frames {
            hits += f.mask()[k];
        }
        let mut sq = 0.0;
        for f in &frames {
            if f.mask()[k] == 1.0 {
                let e = f.intensity[k] - Scrambled.predict(f).unwrap()[k];
                sq += e * e;
            }
        }
        let expected = if hits == 0.0 { 0.0 } else { sq / hits };
        assert!((mean[k] - expected).abs() < 1e-12);
        assert!(hm.count[k] as f64 <= frames.len() as f64);
    }
}

#[test]
fn channel_stack_follows_the_fixed_order() {
    let cfg = ProjectionConfig::with_size(16, 64);
    let f = synth_scene::<f32>(1, &SynthSceneConfig::default(), &cfg).unwrap();
    let cloud = intensim::geometry::attach_incidence(f.cloud, 16).unwrap();
    let img = spherical_project(&cloud, &cfg).unwrap();
    let combo: ModalityCombo = "D+L+I".parse().unwrap();
    let stack = select_channels(&img, &combo).unwrap();
    assert_eq!(stack.shape(), [1, 4, 16, 64]);
    let order = [Channel::Depth, Channel::Mask, Channel::Incidence, Channel::Label];
    for (c, ch) in order.iter().enumerate() {
        assert_eq!(stack.plane(0, c), img.plane(*ch).unwrap());
    }
    let rgb: ModalityCombo = "D+RGB".parse().unwrap();
    assert!(matches!(select_channels(&img, &rgb), Err(Error::ModalityUnavailable(_))));
}
