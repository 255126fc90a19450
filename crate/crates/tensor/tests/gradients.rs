use intensim_tensor::conv::{conv2d, conv_transpose2d, ConvGeometry};
use intensim_tensor::gradcheck::run_op_suite;
use intensim_tensor::{Array, Array64, Graph};
use proptest::prelude::*;

#[test]
fn every_op_matches_central_differences() {
    let suite = run_op_suite(20, 7, 1e-3).unwrap();
    for e in &suite {
        assert!(
            e.max_rel_error < 1e-4,
            "{}: relative error {:.3e}",
            e.name,
            e.max_rel_error
        );
    }
}

#[test]
fn f32_gradients_track_the_f64_shadow() {
    let x64 = Array64::from_fn([2, 3, 6, 6], |i| ((i * 7919) % 97) as f64 / 97.0 - 0.5);
    let w64 = Array64::from_fn([4, 3, 4, 4], |i| ((i * 104_729) % 89) as f64 / 89.0 - 0.5);
    fn run<T: intensim_tensor::Scalar>(x: &Array<T>, w: &Array<T>) -> Vec<f64> {
        let mut g = Graph::<T>::new();
        let xv = g.constant(x.clone());
        let wv = g.param(w.clone());
        let y = g.conv2d(xv, wv, None, 2, 1).unwrap();
        let y = g.tanh(y).unwrap();
        let s = g.mean(y).unwrap();
        g.backward(s).unwrap();
        g.grad(wv).unwrap().data().iter().map(|v| v.as_f64()).collect()
    }
    let a = run(&x64, &w64);
    let b = run(&x64.cast::<f32>(), &w64.cast::<f32>());
    for (p, q) in a.iter().zip(&b) {
        assert!((p - q).abs() < 1e-5 * p.abs().max(1e-2), "{p} vs {q}");
    }
}

fn inner(a: &Array64, b: &Array64) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn conv_transpose_is_adjoint_of_conv(
        n in 1usize..3,
        c_in in 1usize..4,
        c_out in 1usize..4,
        k in 1usize..5,
        stride in 1usize..3,
        pad in 0usize..2,
        out_h in 1usize..5,
        out_w in 1usize..5,
        seed in any::<u64>(),
    ) {
        prop_assume!(2 * pad < k + (out_h.min(out_w) - 1) * stride);
        let g = ConvGeometry::new(stride, pad);
        let h = (out_h - 1) * stride + k - 2 * pad;
        let w = (out_w - 1) * stride + k - 2 * pad;
        let mut s = seed;
        let mut next = move || {
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            ((s >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
        };
        let x = Array64::from_fn([n, c_in, h, w], |_| next());
        let wt = Array64::from_fn([c_out, c_in, k, k], |_| next());
        let y = Array64::from_fn([n, c_out, out_h, out_w], |_| next());
        let lhs = inner(&conv2d(&x, &wt, g).unwrap(), &y);
        let rhs = inner(&x, &conv_transpose2d(&y, &wt, g).unwrap());
        prop_assert!((lhs - rhs).abs() < 1e-4 * lhs.abs().max(1.0));
    }
}

