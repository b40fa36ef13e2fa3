use super::*;

fn t(shape: &[usize], data: &[f64]) -> Tensor {
    Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
}

#[test]
fn matmul_identity() {
    let mut g = Graph::new();
    let a = g.constant(t(&[2, 2], &[1., 0., 0., 1.]));
    let b = g.constant(t(&[2, 1], &[3., 4.]));
    let c = g.matmul(a, b).unwrap();
    assert_eq!(g.value(c).data(), &[3., 4.]);
}

#[test]
fn matmul_by_hand() {
    let mut g = Graph::new();
    let a = g.constant(t(&[2, 2], &[1., 2., 3., 4.]));
    let b = g.constant(t(&[2, 1], &[5., 6.]));
    let c = g.matmul(a, b).unwrap();
    // 1*5 + 2*6 = 17, 3*5 + 4*6 = 39
    assert_eq!(g.value(c).data(), &[17., 39.]);
    assert_eq!(g.shape(c), &[2, 1]);
}

#[test]
fn scalar_matmul_gradient() {
    let mut g = Graph::new();
    let a = g.variable(t(&[1, 1], &[3.0]));
    let b = g.variable(t(&[1, 1], &[-2.5]));
    let c = g.matmul(a, b).unwrap();
    let loss = g.sum(c).unwrap();
    assert_eq!(g.value(c).data(), &[-7.5]);
    let grads = g.backward(loss).unwrap();
    assert_eq!(grads.get(a).unwrap().data(), &[-2.5]);
    assert_eq!(grads.get(b).unwrap().data(), &[3.0]);
}

#[test]
fn matmul_shape_error_names_both_shapes() {
    let mut g = Graph::new();
    let a = g.constant(Tensor::zeros([2, 3]).unwrap());
    let b = g.constant(Tensor::zeros([2, 3]).unwrap());
    let err = g.matmul(a, b).unwrap_err();
    assert_eq!(
        err,
        TensorError::ShapeMismatch {
            op: "matmul",
            lhs: vec![2, 3],
            rhs: vec![2, 3]
        }
    );
    assert!(err.to_string().contains("[2, 3] and [2, 3]"));
}

#[test]
fn batched_matmul_broadcasts_batch_axes() {
    let mut g = Graph::new();
    let a = g.constant(Tensor::from_fn([2, 3, 2, 4], |i| i as f64 * 0.1).unwrap());
    let b = g.constant(Tensor::from_fn([3, 4, 5], |i| (i % 7) as f64).unwrap());
    let c = g.matmul(a, b).unwrap();
    assert_eq!(g.shape(c), &[2, 3, 2, 5]);
    let (av, bv, cv) = (g.value(a), g.value(b), g.value(c));
    for n in 0..2 {
        for h in 0..3 {
            for i in 0..2 {
                for j in 0..5 {
                    let want: f64 = (0..4).map(|k| av.at(&[n, h, i, k]) * bv.at(&[h, k, j])).sum();
                    assert!((cv.at(&[n, h, i, j]) - want).abs() < 1e-12);
                }
            }
        }
    }
}

#[test]
fn softmax_uniform_row() {
    let mut g = Graph::new();
    let x = g.constant(t(&[1, 4], &[0.; 4]));
    let y = g.softmax_rows(x).unwrap();
    assert_eq!(g.value(y).data(), &[0.25; 4]);
}

#[test]
fn softmax_shift_by_ln3() {
    for c in [-50.0, 0.0, 3.7, 400.0] {
        let mut g = Graph::new();
        let x = g.constant(t(&[2], &[c, c + 3f64.ln()]));
        let y = g.softmax_rows(x).unwrap();
        let v = g.value(y).data();
        assert!((v[0] - 0.25).abs() < 1e-12 && (v[1] - 0.75).abs() < 1e-12, "{v:?}");
    }
}

#[test]
fn softmax_matches_direct_formula() {
    // Direct exp-normalize, no max subtraction: e^k / (e + e^2 + e^3).
    let e: Vec<f64> = [1.0f64, 2.0, 3.0].iter().map(|v| v.exp()).collect();
    let z: f64 = e.iter().sum();
    let mut g = Graph::new();
    let x = g.constant(t(&[3], &[1., 2., 3.]));
    let y = g.softmax_rows(x).unwrap();
    for (got, want) in g.value(y).data().iter().zip(e.iter().map(|v| v / z)) {
        assert!((got - want).abs() < 1e-12);
    }
}

#[test]
fn softmax_rejects_non_finite_input() {
    let mut g = Graph::new();
    let x = g.constant(t(&[2], &[1.0, f64::NAN]));
    assert!(matches!(g.softmax_rows(x), Err(TensorError::NonFinite { .. })));
}

#[test]
fn quadratic_gradient() {
    let mut g = Graph::new();
    let w = g.variable(t(&[3], &[1., 2., 3.]));
    let sq = g.mul(w, w).unwrap();
    let loss = g.sum(sq).unwrap();
    let grads = g.backward(loss).unwrap();
    assert_eq!(grads.get(w).unwrap().data(), &[2., 4., 6.]);
}

#[test]
fn constant_loss_gives_zero_gradient() {
    let mut g = Graph::new();
    let w = g.variable(t(&[3], &[1., 2., 3.]));
    let c = g.constant(t(&[2], &[4., 5.]));
    let loss = g.sum(c).unwrap();
    let grads = g.backward(loss).unwrap();
    assert_eq!(grads.get(w).unwrap().data(), &[0.; 3]);
}

#[test]
fn backward_requires_scalar() {
    let mut g = Graph::new();
    let w = g.variable(t(&[3], &[1., 2., 3.]));
    let y = g.scale(w, 2.0).unwrap();
    assert!(matches!(g.backward(y), Err(TensorError::NotScalar { .. })));
}

#[test]
fn concat_rows_puts_token_first() {
    let mut g = Graph::new();
    let token = g.constant(t(&[1, 2], &[9., 9.]));
    let patches = g.constant(Tensor::from_fn([4, 2], |i| i as f64).unwrap());
    let z = g.concat_rows(&[token, patches]).unwrap();
    assert_eq!(g.shape(z), &[5, 2]);
    assert_eq!(&g.value(z).data()[..2], &[9., 9.]);
    let first = g.slice_row(z, 0).unwrap();
    assert_eq!(g.value(first).data(), &[9., 9.]);
}

#[test]
fn transpose_twice_is_identity() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::from_fn([3, 4, 5], |i| (i as f64).sin()).unwrap());
    let y = g.transpose_last2(x).unwrap();
    let z = g.transpose_last2(y).unwrap();
    assert_eq!(g.value(z), g.value(x));
}

#[test]
fn relu_derivative_at_zero_is_zero() {
    let mut g = Graph::new();
    let x = g.variable(t(&[3], &[-1., 0., 2.]));
    let y = g.relu(x).unwrap();
    let loss = g.sum(y).unwrap();
    let grads = g.backward(loss).unwrap();
    assert_eq!(grads.get(x).unwrap().data(), &[0., 0., 1.]);
}

#[test]
fn gradients_accumulate_across_reuse() {
    // x used twice: d/dx (x*x + 3x) = 2x + 3
    let mut g = Graph::new();
    let x = g.variable(t(&[1], &[2.0]));
    let sq = g.mul(x, x).unwrap();
    let tx = g.scale(x, 3.0).unwrap();
    let s = g.add(sq, tx).unwrap();
    let loss = g.sum(s).unwrap();
    let grads = g.backward(loss).unwrap();
    assert_eq!(grads.get(x).unwrap().data(), &[7.0]);
}

#[test]
fn inference_graph_has_no_gradients() {
    let mut g = Graph::inference();
    let x = g.variable(t(&[2], &[1., 2.]));
    assert!(!g.requires_grad(x));
}
