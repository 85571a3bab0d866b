use approx::assert_abs_diff_eq;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::Error;

#[test]
fn matmul_identity() {
    let mut g = Graph::new();
    let a = g.constant(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
    let i = g.constant(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
    let y = g.matmul(a, i).unwrap();
    assert_eq!(g.value(y), &[1.0, 2.0, 3.0, 4.0]);
    assert_eq!(g.shape(y), &[2, 2]);
}

#[test]
fn relu_clamps_negatives() {
    let mut g = Graph::new();
    let x = g.leaf(&Tensor::vector(vec![-1.0, 0.0, 2.0]));
    let y = g.relu(x);
    assert_eq!(g.value(y), &[0.0, 0.0, 2.0]);
}

#[test]
fn log_softmax_of_equal_logits() {
    let mut g = Graph::new();
    let x = g.leaf(&Tensor::vector(vec![0.0, 0.0]));
    let y = g.log_softmax(x).unwrap();
    for v in g.value(y) {
        assert_abs_diff_eq!(*v, 0.5f64.ln(), epsilon = 1e-15);
    }
}

#[test]
fn shape_mismatch_names_op_and_shapes() {
    let mut g = Graph::new();
    let a = g.constant(vec![2, 3], vec![0.0; 6]).unwrap();
    let b = g.constant(vec![2, 3], vec![0.0; 6]).unwrap();
    match g.matmul(a, b) {
        Err(Error::ShapeMismatch { op, left, right }) => {
            assert_eq!(op, "matmul");
            assert_eq!(left, vec![2, 3]);
            assert_eq!(right, vec![2, 3]);
        }
        other => panic!("expected shape mismatch, got {other:?}"),
    }
    let c = g.constant(vec![3], vec![0.0; 3]).unwrap();
    assert!(matches!(g.add(a, c), Err(Error::ShapeMismatch { op: "add", .. })));
    // bias must match the column count
    let d = g.constant(vec![2], vec![0.0; 2]).unwrap();
    assert!(g.add_row_bias(a, d).is_err());
}

#[test]
fn tensor_rejects_bad_shape() {
    assert!(Tensor::new(vec![2, 2], vec![1.0; 3]).is_err());
    let mut t = Tensor::zeros(&[2]);
    assert!(t.set_grad(vec![0.0; 3]).is_err());
    t.set_grad(vec![1.0, 2.0]).unwrap();
    assert_eq!(t.grad(), Some(&[1.0, 2.0][..]));
}

#[test]
fn backward_of_sum_is_ones() {
    let mut g = Graph::new();
    let theta = g.param(&Tensor::vector(vec![1.0, 2.0, 3.0]));
    let loss = g.sum(theta);
    let grads = g.backward(loss).unwrap();
    assert_eq!(grads.get(theta).unwrap(), &[1.0, 1.0, 1.0]);
    assert_eq!(grads.get(loss).unwrap(), &[1.0]);
}

#[test]
fn backward_of_sum_of_squares() {
    let mut g = Graph::new();
    let theta = g.param(&Tensor::vector(vec![1.0, 2.0]));
    let sq = g.square(theta);
    let loss = g.sum(sq);
    let grads = g.backward(loss).unwrap();
    assert_eq!(grads.get(theta).unwrap(), &[2.0, 4.0]);
}

#[test]
fn backward_rejects_non_scalar() {
    let mut g = Graph::new();
    let theta = g.param(&Tensor::vector(vec![1.0, 2.0]));
    assert!(matches!(g.backward(theta), Err(Error::NonScalarLoss(_))));
}

#[test]
fn repeated_backward_does_not_accumulate() {
    let mut g = Graph::new();
    let theta = g.param(&Tensor::vector(vec![1.0, 2.0]));
    let sq = g.square(theta);
    let loss = g.sum(sq);
    let first = g.backward(loss).unwrap();
    let second = g.backward(loss).unwrap();
    assert_eq!(first.get(theta), second.get(theta));
}

#[test]
fn constants_receive_no_gradient() {
    let mut g = Graph::new();
    let c = g.leaf(&Tensor::vector(vec![1.0, 2.0]));
    let p = g.param(&Tensor::vector(vec![3.0, 4.0]));
    let prod = g.mul(c, p).unwrap();
    let loss = g.sum(prod);
    let grads = g.backward(loss).unwrap();
    assert!(grads.get(c).is_none());
    assert_eq!(grads.get(p).unwrap(), &[1.0, 2.0]);
}

#[test]
fn embedding_bag_checks_ids_and_empty_bags() {
    let mut g = Graph::new();
    let table = g.param(&Tensor::zeros(&[4, 2]));
    assert!(matches!(
        g.embedding_bag_mean(table, &[vec![4]]),
        Err(Error::IndexOutOfRange { index: 4, bound: 4, .. })
    ));
    assert!(matches!(
        g.embedding_bag_mean(table, &[vec![]]),
        Err(Error::EmptyTokens(_))
    ));
}

#[test]
fn nll_rejects_out_of_range_target() {
    let mut g = Graph::new();
    let x = g.param(&Tensor::matrix(1, 3, vec![0.0; 3]).unwrap());
    let lp = g.log_softmax(x).unwrap();
    assert!(g.nll(lp, &[3], None).is_err());
    assert!(g.nll(lp, &[0, 1], None).is_err());
}

#[test]
fn finite_diff_on_square() {
    let theta = Tensor::vector(vec![3.0]);
    let g = finite_diff_gradient(|t| Ok(t.data()[0] * t.data()[0]), &theta, 1e-5).unwrap();
    assert_abs_diff_eq!(g.data()[0], 6.0, epsilon = 1e-8);
}

#[test]
fn finite_diff_on_constant_is_zero() {
    let theta = Tensor::vector(vec![1.0, -2.0, 0.5]);
    let g = finite_diff_gradient(|_| Ok(7.0), &theta, 1e-5).unwrap();
    assert_eq!(g.data(), &[0.0, 0.0, 0.0]);
}

#[test]
fn finite_diff_rejects_nonfinite_and_bad_step() {
    let theta = Tensor::vector(vec![1.0]);
    assert!(finite_diff_gradient(|_| Ok(f64::NAN), &theta, 1e-5).is_err());
    assert!(finite_diff_gradient(|_| Ok(0.0), &theta, 0.0).is_err());
}

/// Every differentiable op in a single loss, checked against central differences.
struct Mlp {
    table: Tensor,
    w1: Tensor,
    b1: Tensor,
    w2: Tensor,
    b2: Tensor,
}

fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-2.0..2.0)).collect()).unwrap()
}

fn mlp_loss(m: &Mlp, flat: Option<(usize, &Tensor)>) -> (Graph, Var, Vec<Var>) {
    let pick = |i: usize, t: &Tensor| -> Tensor {
        match flat {
            Some((j, repl)) if i == j => repl.clone(),
            _ => t.clone(),
        }
    };
    let mut g = Graph::new();
    let params = [&m.table, &m.w1, &m.b1, &m.w2, &m.b2];
    let vars: Vec<Var> = params.iter().enumerate().map(|(i, t)| g.param(&pick(i, t))).collect();
    let bags = vec![vec![0, 1], vec![2], vec![1, 3, 3], vec![0, 2, 4], vec![4]];
    let left = g.embedding_bag_mean(vars[0], &bags).unwrap();
    let right = g
        .embedding_bag_mean(
            vars[0],
            &bags[1..].iter().chain(&bags[..1]).cloned().collect::<Vec<_>>(),
        )
        .unwrap();
    let x = g.concat_cols(left, right).unwrap();
    let h = g.matmul(x, vars[1]).unwrap();
    let h = g.add_row_bias(h, vars[2]).unwrap();
    let h = g.tanh(h);
    let z = g.matmul(h, vars[3]).unwrap();
    let z = g.add_row_bias(z, vars[4]).unwrap();
    let r = g.relu(z);
    let z = g.add(z, r).unwrap();
    let lp = g.log_softmax(z).unwrap();
    let nll = g.nll(lp, &[0, 1, 2, 1, 0], Some(&[1.0, 0.5, 2.0, 1.0, 0.25])).unwrap();
    let sq = g.square(vars[4]);
    let reg = g.sum(sq);
    let reg = g.scale(reg, 0.1);
    let loss = g.add(nll, reg).unwrap();
    let loss = g.add_scalar(loss, 1.0);
    (g, loss, vars)
}

#[test]
fn mlp_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let m = Mlp {
        table: random_tensor(&mut rng, &[5, 3]),
        w1: random_tensor(&mut rng, &[6, 4]),
        b1: random_tensor(&mut rng, &[4]),
        w2: random_tensor(&mut rng, &[4, 3]),
        b2: random_tensor(&mut rng, &[3]),
    };
    let (g, loss, vars) = mlp_loss(&m, None);
    let grads = g.backward(loss).unwrap();
    let params = [&m.table, &m.w1, &m.b1, &m.w2, &m.b2];
    for (i, p) in params.iter().enumerate() {
        let fd = finite_diff_gradient(
            |t| {
                let (g, loss, _) = mlp_loss(&m, Some((i, t)));
                g.scalar(loss)
            },
            p,
            1e-5,
        )
        .unwrap();
        let ad = grads.get(vars[i]).unwrap();
        let err = max_relative_error(ad, fd.data());
        assert!(err <= 1e-6, "param {i}: max relative error {err}");
    }
}

#[test]
fn backward_is_linear_in_loss() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let w = random_tensor(&mut rng, &[3, 2]);
    let x = random_tensor(&mut rng, &[4, 3]);
    let (a, b) = (0.7, -1.3);

    let build = |g: &mut Graph| {
        let wv = g.param(&w);
        let xv = g.leaf(&x);
        let y = g.matmul(xv, wv).unwrap();
        let t = g.tanh(y);
        let l1 = g.sum(t);
        let s = g.square(y);
        let l2 = g.sum(s);
        (wv, l1, l2)
    };

    let mut g = Graph::new();
    let (wv, l1, l2) = build(&mut g);
    let s1 = g.scale(l1, a);
    let s2 = g.scale(l2, b);
    let comb = g.add(s1, s2).unwrap();
    let gc = g.backward(comb).unwrap();
    let g1 = g.backward(l1).unwrap();
    let g2 = g.backward(l2).unwrap();
    for ((c, x1), x2) in gc
        .get(wv)
        .unwrap()
        .iter()
        .zip(g1.get(wv).unwrap())
        .zip(g2.get(wv).unwrap())
    {
        assert_abs_diff_eq!(*c, a * x1 + b * x2, epsilon = 1e-12);
    }
}
