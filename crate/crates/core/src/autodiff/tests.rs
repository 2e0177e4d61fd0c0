use super::*;
use crate::tensor::Tensor;
use approx::assert_abs_diff_eq;

fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
    Tensor::from_f64(shape, v).unwrap()
}

#[test]
fn matmul_identity_cases() {
    let mut tape = Tape::<f64>::new();
    let a = tape.constant(t(&[2, 2], &[1., 2., 3., 4.]));
    let i = tape.constant(t(&[2, 2], &[1., 0., 0., 1.]));
    let c = tape.matmul(a, i).unwrap();
    assert_eq!(tape.data(c), &[1., 2., 3., 4.]);

    let col = tape.constant(t(&[2, 1], &[5., 7.]));
    let c = tape.matmul(i, col).unwrap();
    assert_eq!(tape.shape(c), &[2, 1]);
    assert_eq!(tape.data(c), &[5., 7.]);
}

#[test]
fn matmul_shape_mismatch_names_both_shapes() {
    let mut tape = Tape::<f32>::new();
    let a = tape.constant(Tensor::zeros(&[2, 3]));
    let b = tape.constant(Tensor::zeros(&[2, 3]));
    let err = tape.matmul(a, b).unwrap_err();
    let msg = err.to_string();
    assert!(msg.contains("[2, 3]"), "{msg}");
    assert!(matches!(err, crate::Error::Dimension { .. }));
    // transposed form is fine
    assert!(tape.matmul_t(a, b).is_ok());
}

#[test]
fn softmax_reference_values() {
    let mut tape = Tape::<f64>::new();
    let x = tape.constant(t(&[4], &[0., 0., 0., 0.]));
    let y = tape.softmax_lastdim(x);
    for &p in tape.data(y) {
        assert_abs_diff_eq!(p, 0.25, epsilon = 1e-12);
    }

    let x = tape.constant(t(&[2], &[1000., 0.]));
    let y = tape.softmax_lastdim(x);
    assert!(tape.data(y).iter().all(|v| v.is_finite()));
    assert_abs_diff_eq!(tape.data(y)[0], 1.0, epsilon = 1e-12);
    assert_abs_diff_eq!(tape.data(y)[1], 0.0, epsilon = 1e-12);

    let x = tape.constant(t(&[3], &[1., 2., 3.]));
    let y = tape.softmax_lastdim(x);
    let z: f64 = [1f64, 2., 3.].iter().map(|v| v.exp()).sum();
    for (k, &p) in tape.data(y).iter().enumerate() {
        assert_abs_diff_eq!(p, ((k + 1) as f64).exp() / z, epsilon = 1e-12);
    }
    assert_abs_diff_eq!(tape.data(y)[0], 0.09003, epsilon = 1e-5);
    assert_abs_diff_eq!(tape.data(y)[1], 0.24473, epsilon = 1e-5);
    assert_abs_diff_eq!(tape.data(y)[2], 0.66524, epsilon = 1e-5);
}

#[test]
fn masked_softmax_zeroes_masked_keys() {
    let mut tape = Tape::<f64>::new();
    let x = tape.constant(t(&[2, 3], &[1., 2., 3., 4., 5., 6.]));
    let y = tape.masked_softmax(x, &[true, true, false], 2).unwrap();
    let d = tape.data(y);
    assert_eq!(d[2], 0.0);
    assert_eq!(d[5], 0.0);
    assert_abs_diff_eq!(d[0] + d[1], 1.0, epsilon = 1e-12);
    assert_abs_diff_eq!(d[3] + d[4], 1.0, epsilon = 1e-12);
}

#[test]
fn layer_norm_cases() {
    let mut tape = Tape::<f64>::new();
    let g = tape.constant(t(&[3], &[1., 1., 1.]));
    let b = tape.constant(t(&[3], &[0., 0., 0.]));
    let x = tape.constant(t(&[3], &[5., 5., 5.]));
    let y = tape.layer_norm(x, g, b, 1e-5).unwrap();
    assert!(tape.data(y).iter().all(|&v| v == 0.0));

    let g = tape.constant(t(&[2], &[1., 1.]));
    let b = tape.constant(t(&[2], &[0., 0.]));
    let x = tape.constant(t(&[2], &[1., 3.]));
    let y = tape.layer_norm(x, g, b, 1e-12).unwrap();
    assert_abs_diff_eq!(tape.data(y)[0], -1.0, epsilon = 1e-9);
    assert_abs_diff_eq!(tape.data(y)[1], 1.0, epsilon = 1e-9);
}

#[test]
fn cross_entropy_cases() {
    let mut tape = Tape::<f64>::new();
    let x = tape.constant(t(&[2, 3], &[0.; 6]));
    let l = tape.cross_entropy(x, &[0, 2], &[true, true]).unwrap();
    assert_abs_diff_eq!(tape.value(l).item(), 3f64.ln(), epsilon = 1e-12);

    let x = tape.constant(t(&[1, 3], &[30., 0., 0.]));
    let l = tape.cross_entropy(x, &[0], &[true]).unwrap();
    assert!(tape.value(l).item() < 1e-9);

    let x = tape.constant(t(&[1, 3], &[1., 2., 3.]));
    let l = tape.cross_entropy(x, &[2], &[true]).unwrap();
    let oracle = -(3f64.exp() / (1f64.exp() + 2f64.exp() + 3f64.exp())).ln();
    assert_abs_diff_eq!(tape.value(l).item(), oracle, epsilon = 1e-12);
    assert_abs_diff_eq!(tape.value(l).item(), 0.40761, epsilon = 1e-5);

    let err = tape.cross_entropy(x, &[2], &[false]).unwrap_err();
    assert!(matches!(err, crate::Error::EmptySupervision(_)));
}

#[test]
fn cross_entropy_ignores_unmasked_rows() {
    let mut tape = Tape::<f64>::new();
    let x = tape.param(t(&[2, 3], &[1., 2., 3., 9., -4., 0.5]));
    let l = tape.cross_entropy(x, &[2, 1], &[true, false]).unwrap();
    tape.backward(l).unwrap();
    let g = tape.grad(x).unwrap();
    assert!(g[3..].iter().all(|&v| v == 0.0));
    assert!(g[..3].iter().any(|&v| v != 0.0));
}

#[test]
fn backward_linear_and_quadratic() {
    let mut tape = Tape::<f64>::new();
    let x = tape.param(t(&[3], &[1., -2., 0.5]));
    let s = tape.sum(x);
    tape.backward(s).unwrap();
    assert_eq!(tape.grad(x).unwrap(), &[1., 1., 1.]);

    let mut tape = Tape::<f64>::new();
    let x = tape.param(t(&[3], &[1., -2., 0.5]));
    let sq = tape.mul(x, x).unwrap();
    let s = tape.sum(sq);
    tape.backward(s).unwrap();
    assert_eq!(tape.grad(x).unwrap(), &[2., -4., 1.]);
}

#[test]
fn backward_rejects_non_scalar() {
    let mut tape = Tape::<f32>::new();
    let x = tape.param(Tensor::zeros(&[2]));
    assert!(matches!(tape.backward(x), Err(crate::Error::Rank(_))));
}

#[test]
fn repeated_backward_accumulates() {
    let mut tape = Tape::<f64>::new();
    let x = tape.param(t(&[2], &[3., 4.]));
    let s = tape.sum(x);
    tape.backward(s).unwrap();
    tape.backward(s).unwrap();
    assert_eq!(tape.grad(x).unwrap(), &[2., 2.]);
    tape.zero_grad();
    assert!(tape.grad(x).is_none());
}

#[test]
fn intermediate_nodes_receive_grads() {
    let mut tape = Tape::<f64>::new();
    let x = tape.param(t(&[2], &[3., 4.]));
    let c = tape.constant(t(&[2], &[1., 1.]));
    let y = tape.mul(x, c).unwrap();
    let s = tape.sum(y);
    tape.backward(s).unwrap();
    assert!(tape.grad(y).is_some());
    assert!(tape.grad(c).is_none());
}

#[test]
fn split_merge_heads_roundtrip() {
    let mut tape = Tape::<f64>::new();
    let vals: Vec<f64> = (0..24).map(f64::from).collect();
    let x = tape.constant(t(&[6, 4], &vals));
    let s = tape.split_heads(x, 2, 3, 2).unwrap();
    assert_eq!(tape.shape(s), &[4, 3, 2]);
    // sequence 0, head 1, position 0 -> flat row 0, cols 2..4
    assert_eq!(&tape.data(s)[6..8], &[2., 3.]);
    let m = tape.merge_heads(s, 2, 3, 2).unwrap();
    assert_eq!(tape.data(m), &vals[..]);
}

#[test]
fn rel_scores_matches_direct_sum() {
    let mut tape = Tape::<f64>::new();
    let q: Vec<f64> = (0..2 * 3 * 2).map(|v| (v as f64 * 0.37).sin()).collect();
    let r: Vec<f64> = (0..2 * 4 * 2).map(|v| (v as f64 * 0.91).cos()).collect();
    let qv = tape.constant(t(&[2, 3, 2], &q));
    let rv = tape.constant(t(&[2, 4, 2], &r));
    let buckets: Vec<usize> = (0..9).map(|k| k % 4).collect();
    let s = tape.rel_scores(qv, rv, buckets.clone(), 2).unwrap();
    for b in 0..2 {
        for i in 0..3 {
            for j in 0..3 {
                let bk = buckets[i * 3 + j];
                let want: f64 = (0..2).map(|e| q[(b * 3 + i) * 2 + e] * r[(b * 4 + bk) * 2 + e]).sum();
                assert_abs_diff_eq!(tape.data(s)[(b * 3 + i) * 3 + j], want, epsilon = 1e-12);
            }
        }
    }
}
