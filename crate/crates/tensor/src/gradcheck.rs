//! Central finite-difference gradient checking in `f64`.

use crate::error::Result;
use crate::{Array, Graph, Var};

/// Outcome of [`check_gradients`].
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    /// Largest `|analytic − numeric| / max(|analytic|, |numeric|, floor)`.
    pub max_rel_error: f64,
    /// `(input, element)` where the largest error occurred.
    pub worst: (usize, usize),
    pub elements: usize,
}

/// Errors are measured relative to `max(|a|, |n|, REL_FLOOR)` so that
/// gradients which are zero up to rounding do not dominate.
pub const REL_FLOOR: f64 = 1e-2;

/// Compares the analytic gradient of the scalar built by `f` against
/// central differences with step `h`, perturbing every element of every
/// input.
pub fn check_gradients<F>(inputs: &[Array<f64>], h: f64, f: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|a| g.param(a.clone())).collect();
    let out = f(&mut g, &vars)?;
    let grads = g.gradients(out, &vars)?;
    let analytic: Vec<Array<f64>> = grads.iter().map(|&v| g.value(v).clone()).collect();

    let eval = |xs: &[Array<f64>]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = xs.iter().map(|a| g.param(a.clone())).collect();
        let out = f(&mut g, &vars)?;
        Ok(g.value(out).item())
    };

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: (0, 0),
        elements: 0,
    };
    let mut work = inputs.to_vec();
    for (i, grad) in analytic.iter().enumerate() {
        for j in 0..inputs[i].numel() {
            let x0 = inputs[i].data()[j];
            work[i].data_mut()[j] = x0 + h;
            let up = eval(&work)?;
            work[i].data_mut()[j] = x0 - h;
            let down = eval(&work)?;
            work[i].data_mut()[j] = x0;
            let numeric = (up - down) / (2.0 * h);
            let a = grad.data()[j];
            let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(REL_FLOOR);
            if err > report.max_rel_error {
                report.max_rel_error = err;
                report.worst = (i, j);
            }
            report.elements += 1;
        }
    }
    Ok(report)
}

/// One differentiable operation exercised by [`run_op_suite`].
pub struct OpCase {
    pub name: &'static str,
    pub inputs: Vec<crate::Shape>,
    /// Sampling range for input elements.
    pub range: (f64, f64),
    /// Rejects samples that sit too close to a kink of the operation.
    pub admissible: fn(&[Array<f64>]) -> bool,
    pub build: fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
}

fn away_from_zero(xs: &[Array<f64>]) -> bool {
    xs.iter().all(|a| a.data().iter().all(|v| v.abs() > 0.05))
}

fn distinct_pair(xs: &[Array<f64>]) -> bool {
    xs[0]
        .data()
        .iter()
        .zip(xs[1].data())
        .all(|(a, b)| (a - b).abs() > 0.05)
}

fn any(_: &[Array<f64>]) -> bool {
    true
}

/// Reduces an arbitrary output to a scalar with fixed pseudo-random weights
/// so every output element contributes a distinct coefficient.
pub fn project_to_scalar(g: &mut Graph<f64>, y: Var) -> Result<Var> {
    let shape = g.shape(y);
    let w = Array::from_fn(shape, |i| (i as f64 * 1.618_033_988_7 + 0.3).sin());
    let wv = g.constant(w);
    let p = g.mul(y, wv)?;
    g.sum(p)
}

fn unit_mask(shape: crate::Shape) -> Array<f64> {
    Array::from_fn(shape, |i| if i % 3 == 1 { 0.0 } else { 1.0 })
}

/// The differentiable operations of the engine, each paired with input
/// shapes small enough for exhaustive finite differences.
pub fn op_cases() -> Vec<OpCase> {
    use rand::SeedableRng;
    vec![
        OpCase {
            name: "add",
            inputs: vec![[2, 2, 2, 3]; 2],
            range: (-1.0, 1.0),
            admissible: any,
            build: |g, v| {
                let y = g.add(v[0], v[1])?;
                project_to_scalar(g, y)
            },
        },
        OpCase {
            name: "sub",
            inputs: vec![[2, 2, 2, 3]; 2],
            range: (-1.0, 1.0),
            admissible: any,
            build: |g, v| {
                let y = g.sub(v[0], v[1])?;
                project_to_scalar(g, y)
            },
        },
        OpCase {
            name: "mul",
            inputs: vec![[2, 2, 2, 3]; 2],
            range: (-1.0, 1.0),
            admissible: any,
            build: |g, v| {
                let y = g.mul(v[0], v[1])?;
                project_to_scalar(g, y)
            },
        },
        OpCase {
            name: "scale",
            inputs: vec![[1, 3, 2, 2]],
            range: (-1.0, 1.0),
            admissible: any,
            build: |g, v| {
                let y = g.scale(v[0], -2.5)?;
                project_to_scalar(g, y)
            },
        },
        OpCase {
            name: "add_scalar",
            inputs: vec![[1, 3, 2, 2]],
            range: (-1.0, 1.0),
            admissible: any,
            build: |g, v| {
                let y = g.add_scalar(v[0], 0.75)?;
                let y = g.square(y)?;
                project_to_scalar(g, y)
            },
        },
        OpCase {
            name: "broadcast",
            inputs: vec![[1, 3, 1, 1]],
            range: (-1.0, 1.0),
            admissible: any,
            build: |g, v| {
                let y = g.broadcast(v[0], [2, 3, 2, 2])?;
                project_to_scalar(g, y)
            },
        },
        OpCase {
            name: "sum_to",
            inputs: vec![[2, 3, 2, 2]],
            range: (-1.0, 1.0),
            admissible: any,
            build: |g, v| {
                let y = g.sum_to(v[0], [1, 3, 1, 2])?;
                project_to_scalar(g, y)
            },
        },
        OpCase {
            name: "mean",
            inputs: vec![[2, 3, 2, 2]],
            range: (-1.0, 1.0),
            admissible: any,
            build: |g, v| {
                let y = g.square(v[0])?;
                g.mean(y)
            },
        },
        OpCase {
            name: "relu",
            inputs: vec![[2, 2, 3, 3]],
            range: (-1.0, 1.0),
            admissible: away_from_zero,
            build: |g, v| {
                let y = g.relu(v[0])?;
                project_to_scalar(g, y)
            },
        },
        OpCase {
            name: "leaky_relu",
            inputs: vec![[2, 2, 3, 3]],
            range: (-1.0, 1.0),
            admissible: away_from_zero,
            build: |g, v| {
                let y = g.leaky_relu(v[0], 0.2)?;
                project_to_scalar(g, y)
            },
        },
        OpCase {
            name: "abs",
            inputs: vec![[2, 2, 3, 3]],
            range: (-1.0, 1.0),
            admissible: away_from_zero,
            build: |g, v| {
                let y = g.abs(v[0])?;
                project_to_scalar(g, y)
            },
        },
        OpCase {
            name: "tanh",
            inputs: vec![[2, 2, 3, 3]],
            range: (-2.0, 2.0),
            admissible: any,
            build: |g, v| {
                let y = g.tanh(v[0])?;
                project_to_scalar(g, y)
            },
        },
        OpCase {
            name: "sigmoid",
            inputs: vec![[2, 2, 3, 3]],
            range: (-3.0, 3.0),
            admissible: any,
            build: |g, v| {
                let y = g.sigmoid(v[0])?;
                project_to_scalar(g, y)
            },
        },
        OpCase {
            name: "powf",
            inputs: vec![[1, 2, 3, 3]],
            range: (0.5, 2.0),
            admissible: any,
            build: |g, v| {
                let y = g.powf(v[0], -0.5)?;
                project_to_scalar(g, y)
            },
        },
        OpCase {
            name: "bce_with_logits",
            inputs: vec![[2, 1, 3, 3], [2, 1, 3, 3]],
            range: (0.0, 1.0),
            admissible: any,
            build: |g, v| {
                let logits = g.scale(v[0], 6.0)?;
                let logits = g.add_scalar(logits, -3.0)?;
                g.bce_with_logits(logits, v[1])
            },
        },
        OpCase {
            name: "conv2d",
            inputs: vec![[2, 2, 5, 5], [3, 2, 3, 3], [1, 3, 1, 1]],
            range: (-1.0, 1.0),
            admissible: any,
            build: |g, v| {
                let y = g.conv2d(v[0], v[1], Some(v[2]), 1, 0)?;
                project_to_scalar(g, y)
            },
        },
        OpCase {
            name: "conv2d_stride2_pad1",
            inputs: vec![[2, 2, 6, 8], [3, 2, 4, 4], [1, 3, 1, 1]],
            range: (-1.0, 1.0),
            admissible: any,
            build: |g, v| {
                let y = g.conv2d(v[0], v[1], Some(v[2]), 2, 1)?;
                project_to_scalar(g, y)
            },
        },
        OpCase {
            name: "conv_transpose2d_stride2_pad1",
            inputs: vec![[2, 3, 3, 4], [3, 2, 4, 4], [1, 2, 1, 1]],
            range: (-1.0, 1.0),
            admissible: any,
            build: |g, v| {
                let y = g.conv_transpose2d(v[0], v[1], Some(v[2]), 2, 1)?;
                project_to_scalar(g, y)
            },
        },
        OpCase {
            name: "concat_channels",
            inputs: vec![[2, 1, 2, 3], [2, 2, 2, 3]],
            range: (-1.0, 1.0),
            admissible: any,
            build: |g, v| {
                let y = g.concat_channels(v[0], v[1])?;
                project_to_scalar(g, y)
            },
        },
        OpCase {
            name: "slice_channels",
            inputs: vec![[2, 4, 2, 2]],
            range: (-1.0, 1.0),
            admissible: any,
            build: |g, v| {
                let y = g.slice_channels(v[0], 1, 2)?;
                project_to_scalar(g, y)
            },
        },
        OpCase {
            name: "embed_channels",
            inputs: vec![[2, 2, 2, 2]],
            range: (-1.0, 1.0),
            admissible: any,
            build: |g, v| {
                let y = g.embed_channels(v[0], 1, 4)?;
                project_to_scalar(g, y)
            },
        },
        OpCase {
            name: "instance_norm",
            inputs: vec![[2, 2, 3, 3], [1, 2, 1, 1], [1, 2, 1, 1]],
            range: (-1.0, 1.0),
            admissible: any,
            build: |g, v| {
                let y = g.instance_norm(v[0], v[1], v[2], 1e-5)?;
                project_to_scalar(g, y)
            },
        },
        OpCase {
            name: "dropout",
            inputs: vec![[2, 2, 3, 3]],
            range: (-1.0, 1.0),
            admissible: any,
            build: |g, v| {
                let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
                let y = g.dropout(v[0], 0.3, true, &mut rng)?;
                project_to_scalar(g, y)
            },
        },
        OpCase {
            name: "masked_mse",
            inputs: vec![[2, 1, 3, 3], [2, 1, 3, 3]],
            range: (0.0, 1.0),
            admissible: any,
            build: |g, v| {
                let m = g.constant(unit_mask([2, 1, 3, 3]));
                g.masked_mse(v[0], v[1], m)
            },
        },
        OpCase {
            name: "l1",
            inputs: vec![[2, 1, 3, 3], [2, 1, 3, 3]],
            range: (0.0, 1.0),
            admissible: distinct_pair,
            build: |g, v| g.l1(v[0], v[1]),
        },
        OpCase {
            name: "masked_l1",
            inputs: vec![[2, 1, 3, 3], [2, 1, 3, 3]],
            range: (0.0, 1.0),
            admissible: distinct_pair,
            build: |g, v| {
                let m = g.constant(unit_mask([2, 1, 3, 3]));
                g.masked_l1(v[0], v[1], m)
            },
        },
        OpCase {
            name: "gradient_penalty",
            inputs: vec![[1, 2, 6, 6], [3, 2, 4, 4], [1, 3, 1, 1], [1, 3, 1, 1]],
            range: (-1.0, 1.0),
            admissible: any,
            build: |g, v| {
                // Mean squared input-gradient of a conv → norm → tanh → sum
                // critic, differentiated once more with respect to everything.
                let y = g.conv2d(v[0], v[1], None, 2, 1)?;
                let y = g.instance_norm(y, v[2], v[3], 1e-5)?;
                let y = g.tanh(y)?;
                let s = project_to_scalar(g, y)?;
                let gx = g.gradients(s, &[v[0]])?[0];
                let sq = g.square(gx)?;
                g.mean(sq)
            },
        },
    ]
}

/// Per-case result of [`run_op_suite`].
#[derive(Clone, Debug)]
pub struct SuiteEntry {
    pub name: &'static str,
    pub trials: usize,
    pub max_rel_error: f64,
}

/// Runs every case in [`op_cases`] on `trials` random inputs each.
pub fn run_op_suite(trials: usize, seed: u64, h: f64) -> Result<Vec<SuiteEntry>> {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    for case in op_cases() {
        let mut worst = 0.0f64;
        for _ in 0..trials {
            let inputs = loop {
                let xs: Vec<Array<f64>> = case
                    .inputs
                    .iter()
                    .map(|&s| Array::from_fn(s, |_| rng.gen_range(case.range.0..case.range.1)))
                    .collect();
                if (case.admissible)(&xs) {
                    break xs;
                }
            };
            let report = check_gradients(&inputs, h, case.build)?;
            worst = worst.max(report.max_rel_error);
        }
        out.push(SuiteEntry {
            name: case.name,
            trials,
            max_rel_error: worst,
        });
    }
    Ok(out)
}
