use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use xgap::tensor::{grad_check, Graph, Tensor, Var};
use xgap::Result;

const TOL: f64 = 1e-5;
const EPS: f64 = 1e-5;

fn randn(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::randn(shape, 1.0, &mut rng)
}

/// Reduces any tensor to a scalar with fixed random weights so that every
/// output coordinate contributes a distinct sensitivity.
fn weighted_sum(g: &mut Graph, x: Var, seed: u64) -> Result<Var> {
    let w = randn(g.shape(x), seed ^ 0xABCD);
    let w = g.constant(w)?;
    let y = g.mul(x, w)?;
    g.sum(y)
}

fn check(inputs: &[Tensor], f: impl Fn(&mut Graph, &[Var]) -> Result<Var>) -> f64 {
    let err = grad_check(|g, v| {
        let y = f(g, v)?;
        weighted_sum(g, y, 99)
    }, inputs, EPS)
    .unwrap();
    assert!(err < TOL, "relative error {err}");
    err
}

#[test]
fn square_is_exact() {
    let err = grad_check(
        |g, v| {
            let y = g.mul(v[0], v[0])?;
            g.sum(y)
        },
        &[Tensor::scalar(3.0)],
        1e-5,
    )
    .unwrap();
    assert!(err <= 1e-8, "{err}");
}

#[test]
fn matmul_all_transpositions() {
    let a = randn(&[3, 4], 1);
    let b = randn(&[4, 5], 2);
    check(&[a.clone(), b.clone()], |g, v| g.matmul(v[0], v[1]));
    let at = randn(&[4, 3], 3);
    check(&[at, b.clone()], |g, v| g.matmul_t(v[0], v[1], true, false));
    let bt = randn(&[5, 4], 4);
    check(&[a.clone(), bt.clone()], |g, v| g.matmul_t(v[0], v[1], false, true));
    let at = randn(&[4, 3], 5);
    check(&[at, bt], |g, v| g.matmul_t(v[0], v[1], true, true));
    let a3 = randn(&[2, 3, 4], 6);
    check(&[a3, b], |g, v| g.matmul(v[0], v[1]));
}

#[test]
fn batch_matmul_both_layouts() {
    check(&[randn(&[2, 3, 4], 1), randn(&[2, 4, 2], 2)], |g, v| {
        g.batch_matmul(v[0], v[1], false)
    });
    check(&[randn(&[2, 3, 4], 3), randn(&[2, 5, 4], 4)], |g, v| {
        g.batch_matmul(v[0], v[1], true)
    });
}

#[test]
fn elementwise_ops() {
    let a = randn(&[2, 3], 1);
    let b = randn(&[2, 3], 2);
    check(&[a.clone(), b.clone()], |g, v| g.add(v[0], v[1]));
    check(&[a.clone(), b.clone()], |g, v| g.sub(v[0], v[1]));
    check(&[a.clone(), b.clone()], |g, v| g.mul(v[0], v[1]));
    check(std::slice::from_ref(&a), |g, v| g.scale(v[0], -1.7));
    check(std::slice::from_ref(&a), |g, v| g.add_scalar(v[0], 0.3));
    check(&[a.clone(), randn(&[3], 3)], |g, v| g.add_broadcast(v[0], v[1]));
    check(&[randn(&[2, 2, 3], 4), randn(&[2, 3], 5)], |g, v| g.mul_broadcast(v[0], v[1]));
    check(std::slice::from_ref(&a), |g, v| g.gelu(v[0]));
    check(std::slice::from_ref(&a), |g, v| g.log_sigmoid(v[0]));
    check(std::slice::from_ref(&a), |g, v| g.mean(v[0]));
    check(&[a], |g, v| {
        let r = g.reshape(v[0], &[3, 2])?;
        g.sum(r)
    });
}

#[test]
fn normalization_ops() {
    let a = randn(&[3, 5], 7);
    check(std::slice::from_ref(&a), |g, v| g.softmax(v[0]));
    check(std::slice::from_ref(&a), |g, v| g.layer_norm(v[0]));
    check(std::slice::from_ref(&a), |g, v| g.l2_normalize_rows(v[0]));
    check(&[a.clone(), randn(&[3, 5], 8)], |g, v| g.cosine_rows(v[0], v[1]));
    check(&[a, randn(&[4, 5], 9)], |g, v| g.cosine_matrix(v[0], v[1]));
}

#[test]
fn masked_softmax_and_pooling() {
    check(&[randn(&[3, 4, 4], 1)], |g, v| g.masked_softmax(v[0], &[4, 2, 3]));
    check(&[randn(&[2, 4, 3], 2)], |g, v| g.masked_mean_seq(v[0], &[4, 2]));
    check(&[randn(&[2, 4, 3], 3)], |g, v| g.mean_seq(v[0]));
    check(&[randn(&[2, 4, 3], 4)], |g, v| g.select_seq(v[0], 2));
}

#[test]
fn structural_ops() {
    check(&[randn(&[2, 3, 4], 1), randn(&[2, 1, 4], 2)], |g, v| g.concat(v[0], v[1], 1));
    check(&[randn(&[2, 4], 3), randn(&[3, 4], 4)], |g, v| g.concat(v[0], v[1], 0));
    check(&[randn(&[5, 3], 5)], |g, v| g.gather_rows(v[0], &[4, 0, 4, 1], &[2, 2, 3]));
    check(&[randn(&[2, 3, 12], 6)], |g, v| g.split_heads(v[0], 4, 2, 4));
    check(&[randn(&[4, 3, 2], 7)], |g, v| g.merge_heads(v[0], 2));
}

#[test]
fn cross_entropy_with_and_without_exclusion() {
    let logits = randn(&[3, 4], 11);
    check(std::slice::from_ref(&logits), |g, v| g.cross_entropy(v[0], &[0, 3, 1], None));
    check(&[logits], |g, v| {
        g.cross_entropy(v[0], &[1, 3, 0], Some(&[Some(0), None, Some(2)]))
    });
}

#[test]
fn split_then_merge_is_identity() {
    let mut g = Graph::new();
    let x = g.constant(randn(&[2, 3, 8], 1)).unwrap();
    let s = g.split_heads(x, 0, 2, 4).unwrap();
    let m = g.merge_heads(s, 2).unwrap();
    assert_eq!(g.value(x), g.value(m));
}

#[test]
fn softmax_rows_sum_to_one() {
    let mut g = Graph::new();
    let x = g.constant(randn(&[6, 9], 3).reshape(&[6, 9]).unwrap()).unwrap();
    let x = g.scale(x, 20.0).unwrap();
    let y = g.softmax(x).unwrap();
    for row in g.value(y).data().chunks(9) {
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
}

#[test]
fn reused_tensor_accumulates_gradient() {
    let mut g = Graph::new();
    let x = g.param(Tensor::vector(vec![2.0, -1.0])).unwrap();
    let a = g.scale(x, 3.0).unwrap();
    let b = g.mul(x, x).unwrap();
    let c = g.add(a, b).unwrap();
    let loss = g.sum(c).unwrap();
    let grads = g.backward(loss).unwrap();
    // d/dx (3x + x²) = 3 + 2x
    assert_eq!(grads.get(x).unwrap(), &[7.0, 1.0]);
    assert_eq!(grads.get(loss).unwrap(), &[1.0]);
}

#[test]
fn backward_leaves_forward_values_alone() {
    let mut g = Graph::new();
    let x = g.param(randn(&[3, 4], 5)).unwrap();
    let w = g.param(randn(&[4, 2], 6)).unwrap();
    let y = g.matmul(x, w).unwrap();
    let y = g.gelu(y).unwrap();
    let loss = g.mean(y).unwrap();
    let before: Vec<Tensor> = [x, w, y, loss].iter().map(|v| g.value(*v).clone()).collect();
    g.backward(loss).unwrap();
    g.backward(loss).unwrap();
    let after: Vec<Tensor> = [x, w, y, loss].iter().map(|v| g.value(*v).clone()).collect();
    assert_eq!(before, after);
}

#[test]
fn constants_receive_no_gradient() {
    let mut g = Graph::new();
    let x = g.param(Tensor::vector(vec![1.0, 2.0])).unwrap();
    let c = g.constant(Tensor::vector(vec![3.0, 4.0])).unwrap();
    let y = g.mul(x, c).unwrap();
    let loss = g.sum(y).unwrap();
    let grads = g.backward(loss).unwrap();
    assert!(grads.get(c).is_none());
    assert_eq!(grads.get(x).unwrap(), &[3.0, 4.0]);
}

#[test]
fn non_finite_values_are_errors() {
    let mut g = Graph::new();
    assert!(g.constant(Tensor::vector(vec![f64::NAN])).is_err());
    let x = g.constant(Tensor::vector(vec![1e300])).unwrap();
    assert!(g.mul(x, x).is_err());
    let z = g.constant(Tensor::zeros(&[1, 3])).unwrap();
    assert!(g.l2_normalize_rows(z).is_err());
}

#[test]
fn grad_check_validates_its_inputs() {
    let f = |g: &mut Graph, v: &[Var]| g.sum(v[0]);
    assert!(grad_check(f, &[Tensor::scalar(1.0)], 0.0).is_err());
    assert!(grad_check(f, &[Tensor::scalar(1.0)], 0.1).is_err());
    let non_scalar = |_: &mut Graph, v: &[Var]| Ok(v[0]);
    assert!(grad_check(non_scalar, &[Tensor::vector(vec![1.0, 2.0])], 1e-5).is_err());
}

#[test]
fn cosine_similarity_gradient_on_unit_vectors() {
    for seed in 0..5 {
        let a = xgap::tensor::l2_normalize(randn(&[6], seed).data()).unwrap();
        let b = xgap::tensor::l2_normalize(randn(&[6], seed + 100).data()).unwrap();
        let err = grad_check(
            |g, v| {
                let a = g.reshape(v[0], &[1, 6])?;
                let b = g.reshape(v[1], &[1, 6])?;
                let c = g.cosine_rows(a, b)?;
                g.sum(c)
            },
            &[Tensor::vector(a), Tensor::vector(b)],
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-6, "seed {seed}: {err}");
    }
}
