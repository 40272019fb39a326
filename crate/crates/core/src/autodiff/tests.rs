use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_xoshiro::Xoshiro256PlusPlus;

use super::*;

fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol)
}

fn random_tensor(rng: &mut Xoshiro256PlusPlus, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

#[test]
fn matmul_identity() {
    let mut g = Graph::new();
    let i = g.constant(Tensor::matrix(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap());
    let m = g.constant(Tensor::matrix(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap());
    let out = g.matmul(i, m).unwrap();
    assert_eq!(g.value(out).data(), &[1.0, 2.0, 3.0, 4.0]);
}

#[test]
fn matmul_hand_computed() {
    let mut g = Graph::new();
    let a = g.constant(Tensor::matrix(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap());
    let b = g.constant(Tensor::matrix(2, 1, vec![5.0, 6.0]).unwrap());
    let out = g.matmul(a, b).unwrap();
    assert_eq!(g.shape(out), &[2, 1]);
    assert_eq!(g.value(out).data(), &[17.0, 39.0]);
}

#[test]
fn matmul_shape_mismatch_names_both_shapes() {
    let mut g = Graph::new();
    let a = g.constant(Tensor::zeros(&[2, 3]));
    let b = g.constant(Tensor::zeros(&[2, 3]));
    let err = g.matmul(a, b).unwrap_err();
    assert_eq!(
        err,
        TensorError::ShapeMismatch {
            op: "matmul",
            lhs: vec![2, 3],
            rhs: vec![2, 3]
        }
    );
    assert!(err.to_string().contains("[2, 3]"));
}

#[test]
fn softmax_examples() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::vector(vec![0.0; 4]));
    let y = g.softmax(x, 0).unwrap();
    assert!(close(g.value(y).data(), &[0.25; 4], 1e-15));

    let x = g.constant(Tensor::vector(vec![0.0, 3f64.ln()]));
    let y = g.softmax(x, 0).unwrap();
    assert!(close(g.value(y).data(), &[0.25, 0.75], 1e-15));

    let x = g.constant(Tensor::vector(vec![1000.0, 1000.0]));
    let y = g.softmax(x, 0).unwrap();
    assert_eq!(g.value(y).data(), &[0.5, 0.5]);
}

#[test]
fn softmax_rejects_bad_axis() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::vector(vec![1.0, 2.0]));
    assert!(matches!(
        g.softmax(x, 1),
        Err(TensorError::InvalidAxis { .. })
    ));
}

#[test]
fn softmax_along_rows_and_columns() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::matrix(2, 2, vec![0.0, 0.0, 0.0, 3f64.ln()]).unwrap());
    let rows = g.softmax(x, 1).unwrap();
    assert!(close(g.value(rows).data(), &[0.5, 0.5, 0.25, 0.75], 1e-15));
    let cols = g.softmax(x, 0).unwrap();
    assert!(close(g.value(cols).data(), &[0.5, 0.25, 0.5, 0.75], 1e-15));
}

#[test]
fn elementwise_examples() {
    let mut g = Graph::new();
    let a = g.constant(Tensor::vector(vec![1.0, 2.0, 3.0]));
    let z = g.constant(Tensor::vector(vec![0.0; 3]));
    let m = g.mul(a, z).unwrap();
    assert_eq!(g.value(m).data(), &[0.0; 3]);

    let zero = g.constant(Tensor::vector(vec![0.0]));
    let s = g.sigmoid(zero);
    assert_eq!(g.value(s).data(), &[0.5]);

    let short = g.constant(Tensor::vector(vec![1.0]));
    assert!(matches!(
        g.add(a, short),
        Err(TensorError::ShapeMismatch { op: "add", .. })
    ));
}

#[test]
fn tanh_derivative_at_zero_matches_finite_difference() {
    let mut g = Graph::new();
    let x = g.param(Tensor::vector(vec![0.0]));
    let y = g.tanh(x);
    let loss = g.sum(y);
    g.backward(loss).unwrap();
    let analytic = g.grad(x).data()[0];
    let h = 1e-6f64;
    let numeric = (h.tanh() - (-h).tanh()) / (2.0 * h);
    assert!((analytic - 1.0).abs() < 1e-15);
    assert!((analytic - numeric).abs() < 1e-9);
}

#[test]
fn mean_along_examples() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::matrix(2, 2, vec![1.0, 3.0, 5.0, 7.0]).unwrap());
    let m = g.mean_along(x, 0).unwrap();
    assert_eq!(g.value(m).data(), &[3.0, 5.0]);

    let row = g.constant(Tensor::matrix(1, 3, vec![4.0, 5.0, 6.0]).unwrap());
    let m = g.mean_along(row, 0).unwrap();
    assert_eq!(g.value(m).data(), &[4.0, 5.0, 6.0]);

    let c = g.constant(Tensor::full(&[5, 3], 2.5));
    let m = g.mean_along(c, 0).unwrap();
    assert_eq!(g.value(m).data(), &[2.5; 3]);
}

#[test]
fn mean_along_backward_spreads_evenly() {
    let mut g = Graph::new();
    let x = g.param(Tensor::zeros(&[4, 2]));
    let m = g.mean_along(x, 0).unwrap();
    let s = g.sum(m);
    g.backward(s).unwrap();
    assert_eq!(g.grad(x).data(), &[0.25; 8]);
}

#[test]
fn concat_examples() {
    let mut g = Graph::new();
    let a = g.param(Tensor::vector(vec![1.0, 2.0]));
    let b = g.param(Tensor::vector(vec![3.0]));
    let c = g.concat(&[a, b], 0).unwrap();
    assert_eq!(g.value(c).data(), &[1.0, 2.0, 3.0]);

    let alone = g.concat(&[a], 0).unwrap();
    assert_eq!(g.value(alone), g.value(a));

    let s = g.sum(c);
    g.backward(s).unwrap();
    assert_eq!(g.grad(a).data(), &[1.0, 1.0]);
    assert_eq!(g.grad(b).data(), &[1.0]);

    assert!(g.concat(&[], 0).is_err());
}

#[test]
fn concat_rejects_mismatched_dims() {
    let mut g = Graph::new();
    let a = g.constant(Tensor::zeros(&[2, 3]));
    let b = g.constant(Tensor::zeros(&[2, 4]));
    assert!(g.concat(&[a, b], 0).is_err());
    let c = g.concat(&[a, b], 1).unwrap();
    assert_eq!(g.shape(c), &[2, 7]);
}

#[test]
fn concat_backward_matches_finite_differences() {
    let mut rng = Xoshiro256PlusPlus::seed_from_u64(3);
    let params = vec![
        random_tensor(&mut rng, &[2, 3]),
        random_tensor(&mut rng, &[2, 2]),
    ];
    let err = grad_check(
        |g, p| {
            let c = g.concat(&[p[0], p[1]], 1)?;
            let t = g.tanh(c);
            Ok(g.sum(t))
        },
        &params,
        1e-5,
        0,
    )
    .unwrap();
    assert!(err < 1e-8, "{err}");
}

#[test]
fn backward_examples() {
    let mut g = Graph::new();
    let w = g.param(Tensor::vector(vec![1.0, 2.0]));
    let sq = g.mul(w, w).unwrap();
    let loss = g.sum(sq);
    g.backward(loss).unwrap();
    assert_eq!(g.grad(w).data(), &[2.0, 4.0]);

    let mut g = Graph::new();
    let w = g.param(Tensor::vector(vec![1.0, 2.0]));
    let other = g.param(Tensor::vector(vec![3.0]));
    let loss = g.sum(other);
    g.backward(loss).unwrap();
    assert_eq!(g.grad(w).data(), &[0.0, 0.0]);

    let mut g = Graph::new();
    let x = g.param(Tensor::zeros(&[3]));
    let t = g.tanh(x);
    let loss = g.sum(t);
    g.backward(loss).unwrap();
    assert_eq!(g.grad(x).data(), &[1.0; 3]);
}

#[test]
fn backward_rejects_non_scalar_loss() {
    let mut g = Graph::new();
    let x = g.param(Tensor::zeros(&[3]));
    assert_eq!(
        g.backward(x).unwrap_err(),
        TensorError::NonScalarLoss(vec![3])
    );
}

#[test]
fn repeated_backward_accumulates_until_zeroed() {
    let mut g = Graph::new();
    let w = g.param(Tensor::vector(vec![1.0, 2.0]));
    let sq = g.mul(w, w).unwrap();
    let loss = g.sum(sq);
    g.backward(loss).unwrap();
    g.backward(loss).unwrap();
    assert_eq!(g.grad(w).data(), &[4.0, 8.0]);
    g.zero_grad();
    assert_eq!(g.grad(w).data(), &[0.0, 0.0]);
}

#[test]
fn shared_subexpression_sums_paths() {
    // f = sum(tanh(w) * tanh(w)) reusing one tanh node, against two copies.
    let w0 = Tensor::vector(vec![0.3, -0.7, 1.1]);

    let mut g = Graph::new();
    let w = g.param(w0.clone());
    let t = g.tanh(w);
    let p = g.mul(t, t).unwrap();
    let loss = g.sum(p);
    g.backward(loss).unwrap();
    let shared = g.grad(w);

    let mut g = Graph::new();
    let w = g.param(w0);
    let t1 = g.tanh(w);
    let t2 = g.tanh(w);
    let p = g.mul(t1, t2).unwrap();
    let loss = g.sum(p);
    g.backward(loss).unwrap();
    let unshared = g.grad(w);

    assert!(close(shared.data(), unshared.data(), 1e-15));
}

#[test]
fn grad_check_quadratic_is_tight() {
    let params = vec![Tensor::vector(vec![0.5, -1.5, 2.0])];
    let err = grad_check(
        |g, p| {
            let sq = g.mul(p[0], p[0])?;
            Ok(g.sum(sq))
        },
        &params,
        1e-5,
        1,
    )
    .unwrap();
    assert!(err < 1e-9, "{err}");
}

#[test]
fn grad_check_flags_relu_kink() {
    let params = vec![Tensor::vector(vec![0.0, 1.0])];
    let err = grad_check(
        |g, p| {
            let r = g.relu(p[0]);
            Ok(g.sum(r))
        },
        &params,
        1e-5,
        0,
    )
    .unwrap_err();
    assert!(matches!(err, GradCheckError::NearKink { .. }));
}

#[test]
fn grad_check_rejects_bad_step_and_non_finite() {
    let params = vec![Tensor::vector(vec![1.0])];
    let f = |g: &mut Graph, p: &[Var]| Ok(g.sum(p[0]));
    assert!(matches!(
        grad_check(f, &params, 0.0, 0),
        Err(GradCheckError::BadStep(_))
    ));
    let nan = vec![Tensor::vector(vec![f64::NAN])];
    assert!(matches!(
        grad_check(f, &nan, 1e-5, 0),
        Err(GradCheckError::NonFinite(_))
    ));
}

/// Random composite of every differentiable op, projected onto a fixed
/// random direction so gradients are O(1).
fn composite(g: &mut Graph, p: &[Var], proj: &Tensor) -> Result<Var, TensorError> {
    let (w, x, b, v) = (p[0], p[1], p[2], p[3]);
    let h = g.matmul(x, w)?; // 5×4
    let h = g.add_bias(h, b)?;
    let t = g.tanh(h);
    let s = g.sigmoid(h);
    let r = g.relu(h);
    let m = g.mul(t, s)?;
    let m = g.sub(m, r)?;
    let m = g.add(m, t)?;
    let sm = g.softmax(m, 1)?;
    let ls = g.log_softmax(m, 0)?;
    let both = g.concat(&[sm, ls], 1)?; // 5×8
    let tr = g.transpose(both)?; // 8×5
    let mv = g.matvec(tr, v)?; // 8
    let vm = g.vecmat(v, both)?; // 8
    let mv = g.add(mv, vm)?;
    let sl = g.slice(mv, 0, 2, 6)?; // 4
    let mean = g.mean_along(both, 0)?; // 8
    let mean = g.slice(mean, 0, 0, 4)?;
    let z = g.add(sl, mean)?;
    let z = g.scale(z, 0.7);
    let z = g.reshape(z, &[2, 2])?;
    let pr = g.constant(proj.clone());
    let z = g.mul(z, pr)?;
    let picked = g.pick(z, 3)?;
    let total = g.sum(z);
    let out = g.add(total, picked)?;
    Ok(out)
}

#[test]
fn composite_ops_pass_grad_check_over_seeds() {
    for seed in 0..5u64 {
        let mut rng = Xoshiro256PlusPlus::seed_from_u64(100 + seed);
        let proj = random_tensor(&mut rng, &[2, 2]);
        let mut attempt = 0;
        loop {
            let params = vec![
                random_tensor(&mut rng, &[3, 4]),
                random_tensor(&mut rng, &[5, 3]),
                random_tensor(&mut rng, &[4]),
                random_tensor(&mut rng, &[5]),
            ];
            match grad_check(|g, p| composite(g, p, &proj), &params, 1e-5, seed) {
                Ok(err) => {
                    assert!(err < 1e-4, "seed {seed}: {err}");
                    break;
                }
                Err(GradCheckError::NearKink { .. }) if attempt < 20 => attempt += 1,
                Err(e) => panic!("seed {seed}: {e}"),
            }
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn softmax_is_a_distribution(
        v in prop::collection::vec(-700.0f64..700.0, 1..10_000)
    ) {
        let mut g = Graph::new();
        let x = g.constant(Tensor::vector(v));
        let y = g.softmax(x, 0).unwrap();
        let out = g.value(y).data();
        prop_assert!(out.iter().all(|p| *p >= 0.0));
        let total: f64 = out.iter().sum();
        prop_assert!((total - 1.0).abs() <= 1e-9);
    }
}
