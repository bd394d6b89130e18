use super::*;

fn t(shape: &[usize], data: &[Real]) -> Tensor {
    Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
}

fn close(a: &[Real], b: &[Real], tol: Real) {
    assert_eq!(a.len(), b.len());
    for (x, y) in a.iter().zip(b) {
        assert!((x - y).abs() <= tol, "{a:?} vs {b:?}");
    }
}

#[test]
fn matmul_examples() {
    let mut g = Graph::new();
    let a = g.constant(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
    let eye = g.constant(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
    let id = g.matmul(a, eye).unwrap();
    assert_eq!(g.value(id), g.value(a));

    let col = g.constant(t(&[2, 1], &[5.0, 6.0]));
    let p = g.matmul(a, col).unwrap();
    assert_eq!(g.value(p), &t(&[2, 1], &[17.0, 39.0]));

    let z = g.constant(Tensor::zeros([3, 4]));
    let any = g.constant(t(&[4, 2], &[1.0, -2.0, 3.0, 0.5, 7.0, 1.0, -1.0, 2.0]));
    let zz = g.matmul(z, any).unwrap();
    assert_eq!(g.value(zz), &Tensor::zeros([3, 2]));

    let err = g.matmul(a, z).unwrap_err();
    assert!(matches!(err, TensorError::ShapeMismatch { ref left, ref right, .. } if left == &[2, 2] && right == &[3, 4]));
}

#[test]
fn softmax_examples() {
    let mut g = Graph::new();
    let x = g.constant(t(&[3], &[0.0, 0.0, 0.0]));
    let s = g.softmax(x, 0).unwrap();
    close(g.value(s).data(), &[1.0 / 3.0; 3], 1e-15);

    let big = g.constant(t(&[2], &[1000.0, 0.0]));
    let s = g.softmax(big, 0).unwrap();
    assert!(g.value(s).is_finite());
    close(g.value(s).data(), &[1.0, 0.0], 1e-15);

    let x = g.constant(t(&[2], &[1.0, 2.0]));
    let s = g.softmax(x, 0).unwrap();
    close(g.value(s).data(), &[0.268_941_421_369_995, 0.731_058_578_630_005], 1e-12);

    assert!(matches!(g.softmax(x, 1), Err(TensorError::InvalidAxis { axis: 1, rank: 1, .. })));
}

#[test]
fn softmax_non_last_axis() {
    let mut g = Graph::new();
    let x = g.constant(t(&[2, 2], &[1.0, 5.0, 2.0, 5.0]));
    let s = g.softmax(x, 0).unwrap();
    let v = g.value(s).data();
    close(&[v[0] + v[2], v[1] + v[3]], &[1.0, 1.0], 1e-12);
    close(&[v[1]], &[0.5], 1e-15);
}

#[test]
fn layer_norm_examples() {
    let mut g = Graph::new();
    let ones = g.constant(Tensor::ones([2]));
    let zeros = g.constant(Tensor::zeros([2]));

    let c = g.constant(t(&[1, 2], &[3.0, 3.0]));
    let y = g.layer_norm(c, ones, zeros, 1e-5).unwrap();
    close(g.value(y).data(), &[0.0, 0.0], 0.0);

    let x = g.constant(t(&[1, 2], &[1.0, 3.0]));
    let y = g.layer_norm(x, ones, zeros, 1e-12).unwrap();
    close(g.value(y).data(), &[-1.0, 1.0], 1e-9);

    let beta = g.constant(t(&[2], &[0.3, -0.7]));
    let y = g.layer_norm(x, zeros, beta, 1e-5).unwrap();
    close(g.value(y).data(), &[0.3, -0.7], 0.0);

    let three = g.constant(Tensor::ones([3]));
    assert!(matches!(g.layer_norm(x, three, zeros, 1e-5), Err(TensorError::ShapeMismatch { .. })));
}

#[test]
fn gelu_examples() {
    let mut g = Graph::new();
    let x = g.constant(t(&[3], &[0.0, 10.0, 1.0]));
    let y = g.gelu(x);
    let v = g.value(y).data();
    assert_eq!(v[0], 0.0);
    assert!((v[1] - 10.0).abs() < 1e-6);
    assert!((v[2] - 0.841_344_746).abs() < 1e-6);
}

#[test]
fn conv2d_examples() {
    let mut g = Graph::new();
    let x = g.constant(t(&[1, 1, 2, 2], &[1.0, 2.0, 3.0, 4.0]));
    let one = g.constant(t(&[1, 1, 1, 1], &[1.0]));
    let y = g.conv2d(x, one, 1, 0).unwrap();
    assert_eq!(g.value(y).data(), g.value(x).data());

    let ones = g.constant(Tensor::ones([1, 1, 2, 2]));
    let y = g.conv2d(x, ones, 1, 0).unwrap();
    assert_eq!(g.value(y), &t(&[1, 1, 1, 1], &[10.0]));

    let zero = g.constant(Tensor::zeros([3, 1, 2, 2]));
    let y = g.conv2d(x, zero, 1, 1).unwrap();
    assert_eq!(g.shape(y), &[1, 3, 3, 3]);
    assert!(g.value(y).data().iter().all(|&v| v == 0.0));

    let big = g.constant(Tensor::ones([1, 1, 3, 3]));
    assert!(matches!(g.conv2d(x, big, 1, 0), Err(TensorError::Dimension { .. })));
    assert!(g.conv2d(x, big, 1, 1).is_ok());
}

#[test]
fn conv2d_output_size_formula() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::ones([2, 3, 7, 6]));
    let w = g.constant(Tensor::ones([4, 3, 3, 2]));
    let y = g.conv2d(x, w, 2, 1).unwrap();
    // floor((7 + 2 - 3) / 2) + 1 = 4, floor((6 + 2 - 2) / 2) + 1 = 4
    assert_eq!(g.shape(y), &[2, 4, 4, 4]);
}

#[test]
fn cross_entropy_examples() {
    let mut g = Graph::new();
    let u = g.constant(Tensor::zeros([2, 4]));
    let l = g.cross_entropy(u, &[0, 3]).unwrap();
    assert!((g.value(l).item() - 4.0_f64.ln() as Real).abs() < 1e-12);

    let confident = g.constant(t(&[1, 2], &[1000.0, 0.0]));
    let l = g.cross_entropy(confident, &[0]).unwrap();
    assert!(g.value(l).item().abs() < 1e-12);

    let x = g.constant(t(&[1, 2], &[1.0, 2.0]));
    let l = g.cross_entropy(x, &[0]).unwrap();
    assert!((g.value(l).item() - 1.313_261_687_518_223).abs() < 1e-12);

    assert!(matches!(g.cross_entropy(x, &[2]), Err(TensorError::Validation(_))));
}

#[test]
fn cross_entropy_gradient_is_softmax_minus_onehot() {
    let mut g = Graph::new();
    let x = g.param(t(&[2, 2], &[1.0, 2.0, 0.0, 0.0]));
    let l = g.cross_entropy(x, &[0, 1]).unwrap();
    g.backward(l).unwrap();
    let p = 0.268_941_421_369_995;
    close(g.grad(x).unwrap().data(), &[(p - 1.0) / 2.0, (1.0 - p) / 2.0, 0.25, -0.25], 1e-12);
}

#[test]
fn backward_sum_of_squares() {
    let mut g = Graph::new();
    let x = g.param(t(&[3], &[1.0, -2.0, 0.5]));
    let sq = g.mul(x, x).unwrap();
    let l = g.sum(sq);
    g.backward(l).unwrap();
    assert_eq!(g.grad(x).unwrap().data(), &[2.0, -4.0, 1.0]);
}

#[test]
fn backward_accumulates_and_resets() {
    let mut g = Graph::new();
    let x = g.param(t(&[2], &[1.0, 2.0]));
    let l = g.sum(x);
    g.backward(l).unwrap();
    g.backward(l).unwrap();
    assert_eq!(g.grad(x).unwrap().data(), &[2.0, 2.0]);
    g.zero_grad();
    assert!(g.grad(x).is_none());
}

#[test]
fn detached_tensor_gets_no_grad() {
    let mut g = Graph::new();
    let x = g.param(t(&[2], &[1.0, 2.0]));
    let d = g.detach(x);
    let y = g.mul(x, d).unwrap();
    let l = g.sum(y);
    g.backward(l).unwrap();
    assert!(g.grad(d).is_none());
    assert_eq!(g.grad(x).unwrap().data(), &[1.0, 2.0]);
}

#[test]
fn backward_rejects_non_scalar() {
    let mut g = Graph::new();
    let x = g.param(Tensor::ones([2]));
    let y = g.scale(x, 2.0);
    assert!(matches!(g.backward(y), Err(TensorError::Contract(_))));
}

#[test]
fn backward_visits_every_reachable_leaf() {
    let mut g = Graph::new();
    let a = g.param(Tensor::ones([2, 3]));
    let b = g.param(Tensor::ones([3, 2]));
    let unused = g.param(Tensor::ones([1]));
    let m = g.matmul(a, b).unwrap();
    let l = g.sum(m);
    g.backward(l).unwrap();
    assert!(g.grad(a).is_some() && g.grad(b).is_some());
    assert!(g.grad(unused).is_none());
}

#[test]
fn clip_rows_bounds_norm() {
    let mut g = Graph::new();
    let x = g.constant(t(&[2, 2], &[3.0, 4.0, 0.3, 0.4]));
    let y = g.clip_rows(x, 1.0).unwrap();
    close(g.value(y).data(), &[0.6, 0.8, 0.3, 0.4], 1e-15);
}

#[test]
fn concat_and_narrow_are_inverse() {
    let mut g = Graph::new();
    let a = g.constant(t(&[2, 1, 2], &[1.0, 2.0, 3.0, 4.0]));
    let b = g.constant(t(&[2, 2, 2], &[5.0, 6.0, 7.0, 8.0, 9.0, 10.0, 11.0, 12.0]));
    let c = g.concat(&[a, b], 1).unwrap();
    assert_eq!(g.value(c).data(), &[1.0, 2.0, 5.0, 6.0, 7.0, 8.0, 3.0, 4.0, 9.0, 10.0, 11.0, 12.0]);
    let back = g.narrow(c, 1, 1, 2).unwrap();
    assert_eq!(g.value(back), g.value(b));
}
