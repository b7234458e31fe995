mod common;

use common::{max_abs_diff, rng, uniform, Conv};
use proptest::prelude::*;
use semfuse::numerics::{Tape, Tensor};
use semfuse::semantics::labels_from_boxes;

const EXACT: f64 = 1e-12;

fn tensor(shape: &[usize], data: Vec<f64>) -> Tensor {
    Tensor::new(shape, data).unwrap()
}

fn conv_strategy() -> impl Strategy<Value = Conv> {
    (
        1..3usize,
        1..4usize,
        1..4usize,
        1..4usize,
        1..3usize,
        0..2usize,
        0..3usize,
        0..3usize,
    )
        .prop_map(|(batch, cin, cout, k, stride, pad, eh, ew)| Conv {
            batch,
            cin,
            cout,
            h: k + eh + 1,
            w: k + ew,
            k,
            stride,
            pad: pad.min(k - 1),
        })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn matmul_matches_triple_loop(seed in any::<u64>(), n in 1..7usize, k in 1..7usize, m in 1..7usize) {
        let mut r = rng(seed);
        let (a, b) = (uniform(&mut r, n * k), uniform(&mut r, k * m));
        let mut tape = Tape::new();
        let av = tape.constant(tensor(&[n, k], a.clone()));
        let bv = tape.constant(tensor(&[k, m], b.clone()));
        let out = tape.matmul(av, bv).unwrap();
        prop_assert!(max_abs_diff(tape.value(out).data(), &common::matmul(&a, &b, n, k, m)) <= EXACT);
    }

    #[test]
    fn conv2d_matches_direct_loops(seed in any::<u64>(), c in conv_strategy()) {
        let mut r = rng(seed);
        let x = uniform(&mut r, c.batch * c.cin * c.h * c.w);
        let w = uniform(&mut r, c.cout * c.cin * c.k * c.k);
        let (oh, ow) = c.out_hw();
        let probe = uniform(&mut r, c.batch * c.cout * oh * ow);
        let mut tape = Tape::new();
        let xv = tape.param(&tensor(&[c.batch, c.cin, c.h, c.w], x.clone()).trainable());
        let wv = tape.constant(tensor(&[c.cout, c.cin, c.k, c.k], w.clone()));
        let out = tape.conv2d(xv, wv, c.stride, c.pad).unwrap();
        prop_assert_eq!(tape.shape(out), &[c.batch, c.cout, oh, ow]);
        prop_assert!(max_abs_diff(tape.value(out).data(), &common::conv2d(&x, &w, &c)) <= EXACT);

        let p = tape.constant(tensor(&[c.batch, c.cout, oh, ow], probe.clone()));
        let prod = tape.mul(out, p).unwrap();
        let loss = tape.sum(prod);
        let grads = tape.backward(loss).unwrap();
        let gx = grads.wrt(xv).unwrap();
        prop_assert!(max_abs_diff(gx, &common::conv2d_input_grad(&probe, &w, &c)) <= EXACT);
    }

    #[test]
    fn deconv2d_matches_scatter_loops(seed in any::<u64>(), c in conv_strategy()) {
        let mut r = rng(seed);
        let x = uniform(&mut r, c.batch * c.cin * c.h * c.w);
        let w = uniform(&mut r, c.cin * c.cout * c.k * c.k);
        let mut tape = Tape::new();
        let xv = tape.constant(tensor(&[c.batch, c.cin, c.h, c.w], x.clone()));
        let wv = tape.constant(tensor(&[c.cin, c.cout, c.k, c.k], w.clone()));
        let out = tape.deconv2d(xv, wv, c.stride).unwrap();
        let (oh, ow) = c.deconv_hw();
        prop_assert_eq!(tape.shape(out), &[c.batch, c.cout, oh, ow]);
        prop_assert!(max_abs_diff(tape.value(out).data(), &common::deconv2d(&x, &w, &c)) <= EXACT);
    }

    #[test]
    fn maxpool_matches_scan_and_ignores_order(seed in any::<u64>(), dims in prop::collection::vec(1..5usize, 1..4), axis_pick in 0..3usize) {
        let axis = axis_pick % dims.len();
        let mut r = rng(seed);
        let n: usize = dims.iter().product();
        // Coarse values so ties occur.
        let x: Vec<f64> = uniform(&mut r, n).into_iter().map(|v| (v * 3.0).round()).collect();
        let mut tape = Tape::new();
        let xv = tape.constant(tensor(&dims, x.clone()));
        let (vals, arg) = tape.max_axis(xv, axis).unwrap();
        let (want, want_arg) = common::maxpool(&x, &dims, axis);
        prop_assert_eq!(tape.value(vals).data(), &want[..]);
        prop_assert_eq!(arg, want_arg);

        // Reverse the pooled axis.
        let outer: usize = dims[..axis].iter().product();
        let len = dims[axis];
        let inner: usize = dims[axis + 1..].iter().product();
        let mut flipped = x.clone();
        for o in 0..outer {
            for l in 0..len {
                for i in 0..inner {
                    flipped[(o * len + l) * inner + i] = x[(o * len + len - 1 - l) * inner + i];
                }
            }
        }
        let fv = tape.constant(tensor(&dims, flipped));
        let (fvals, _) = tape.max_axis(fv, axis).unwrap();
        prop_assert_eq!(tape.value(fvals).data(), &want[..]);
    }

    #[test]
    fn box_labels_match_brute_force(seed in any::<u64>(), n in 0..2000usize) {
        let mut r = rng(seed);
        let (cloud, boxes) = common::random_box_scene(&mut r, n, 20, 5);
        let got = labels_from_boxes(&cloud, &boxes, 5).unwrap();
        prop_assert_eq!(got.labels(), common::brute_force_labels(&cloud.points, &boxes));
        for i in 0..got.len() {
            prop_assert_eq!(got.row(i).iter().sum::<f64>(), 1.0);
        }
    }
}
