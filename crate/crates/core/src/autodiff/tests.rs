use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::tensor::Tensor;

type Build = dyn Fn(&mut Tape, &[Var]) -> Result<Var, AutodiffError>;

/// Reduces the output of `build` to a scalar with fixed random weights and
/// returns the max relative error of backward against central differences.
fn gradcheck(shapes: &[Vec<usize>], values: &[Vec<f64>], weights: &[f64], build: &Build) -> f64 {
    let loss_of = |tape: &mut Tape, vars: &[Var]| -> Var {
        let out = build(tape, vars).unwrap();
        let shape = tape.value(out).shape().to_vec();
        let c = tape.constant(Tensor::new(shape, weights[..tape.value(out).len()].to_vec()).unwrap());
        let prod = tape.mul(out, c).unwrap();
        tape.sum(prod).unwrap()
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = shapes
        .iter()
        .zip(values)
        .map(|(s, v)| tape.param(Tensor::new(s.clone(), v.clone()).unwrap()))
        .collect();
    let loss = loss_of(&mut tape, &vars);
    let grads = tape.backward(loss).unwrap();
    let analytic: Vec<f64> = vars.iter().flat_map(|v| grads.get(*v).unwrap().to_vec()).collect();

    let flat: Vec<f64> = values.iter().flatten().copied().collect();
    let numeric = finite_difference_grad(
        |p| {
            let mut tape = Tape::new();
            let mut offset = 0;
            let vars: Vec<Var> = shapes
                .iter()
                .map(|s| {
                    let n: usize = s.iter().product();
                    let v = tape.param(Tensor::new(s.clone(), p[offset..offset + n].to_vec()).unwrap());
                    offset += n;
                    v
                })
                .collect();
            let loss = loss_of(&mut tape, &vars);
            tape.value(loss).data()[0]
        },
        &flat,
        DEFAULT_FD_STEP,
    );
    max_relative_error(&analytic, &numeric)
}

fn random_vec(rng: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(lo..hi)).collect()
}

/// 100 random points per primitive.
fn check_primitive(name: &str, shapes: &[Vec<usize>], range: (f64, f64), build: &Build) {
    let mut rng = ChaCha8Rng::seed_from_u64(name.bytes().map(u64::from).sum());
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let values: Vec<Vec<f64>> = shapes
            .iter()
            .map(|s| random_vec(&mut rng, s.iter().product(), range.0, range.1))
            .collect();
        let weights = random_vec(&mut rng, 256, -1.0, 1.0);
        worst = worst.max(gradcheck(shapes, &values, &weights, build));
    }
    assert!(worst < 1e-5, "{name}: max relative error {worst:e}");
}

#[test]
fn primitives_match_finite_differences() {
    let v23 = vec![2, 3];
    check_primitive("add", &[v23.clone(), v23.clone()], (-2.0, 2.0), &|t, v| {
        t.add(v[0], v[1])
    });
    check_primitive("sub", &[v23.clone(), v23.clone()], (-2.0, 2.0), &|t, v| {
        t.sub(v[0], v[1])
    });
    check_primitive("mul", &[v23.clone(), v23.clone()], (-2.0, 2.0), &|t, v| {
        t.mul(v[0], v[1])
    });
    check_primitive("div", &[v23.clone(), v23.clone()], (0.5, 2.0), &|t, v| {
        t.div(v[0], v[1])
    });
    check_primitive("matmul", &[vec![2, 3], vec![3, 4]], (-1.0, 1.0), &|t, v| {
        t.matmul(v[0], v[1])
    });
    check_primitive("map", std::slice::from_ref(&v23), (-2.0, 2.0), &|t, v| {
        t.map(v[0], |x| (x.sin() * x, x.cos() * x + x.sin()))
    });
    check_primitive("reduce-mean", std::slice::from_ref(&v23), (-2.0, 2.0), &|t, v| {
        t.mean(v[0])
    });
    check_primitive("reduce-sum", std::slice::from_ref(&v23), (-2.0, 2.0), &|t, v| {
        t.sum(v[0])
    });
    check_primitive("broadcast", &[vec![3]], (-2.0, 2.0), &|t, v| t.broadcast(v[0], &[4, 3]));
    check_primitive("broadcast-col", &[vec![2, 1]], (-2.0, 2.0), &|t, v| {
        t.broadcast(v[0], &[2, 5])
    });
    check_primitive("concat", &[vec![2, 3], vec![2, 2]], (-2.0, 2.0), &|t, v| t.concat(v, 1));
    check_primitive("reshape", std::slice::from_ref(&v23), (-2.0, 2.0), &|t, v| {
        t.reshape(v[0], &[3, 2])
    });
    check_primitive("softmax-cross-entropy", &[vec![3, 4]], (-3.0, 3.0), &|t, v| {
        t.softmax_cross_entropy(v[0], &[0, 3, 1])
    });
    check_primitive("standardize", &[vec![2, 5]], (-2.0, 2.0), &|t, v| {
        t.standardize(v[0], 1e-5)
    });
    check_primitive("conv2d", &[vec![2, 2, 4, 4], vec![3, 2, 2, 2]], (-1.0, 1.0), &|t, v| {
        t.conv2d(v[0], v[1])
    });
    check_primitive("fused", &[v23.clone(), vec![2]], (-1.0, 1.0), &|t, v| {
        // out = s0 * x^2 + s1 * x with scalars s taken from element inputs
        let x = t.value(v[0]).data().to_vec();
        let s = t.value(v[1]).data().to_vec();
        let value = x.iter().map(|xi| s[0] * xi * xi + s[1] * xi).collect();
        let dx = x.iter().map(|xi| 2.0 * s[0] * xi + s[1]).collect();
        let ds0 = x.iter().map(|xi| xi * xi).collect();
        let ds1 = x.clone();
        t.fused(
            "fused",
            vec![2, 3],
            value,
            vec![
                FusedInput {
                    var: v[0],
                    partial: Partial::Full(dx),
                },
                FusedInput {
                    var: v[1],
                    partial: Partial::Element { index: 0, partial: ds0 },
                },
                FusedInput {
                    var: v[1],
                    partial: Partial::Element { index: 1, partial: ds1 },
                },
            ],
        )
    });
}

#[test]
fn add_example() {
    let mut t = Tape::new();
    let a = t.constant(Tensor::vector(vec![1.0, 2.0]));
    let b = t.constant(Tensor::vector(vec![3.0, 4.0]));
    let c = t.add(a, b).unwrap();
    assert_eq!(t.value(c).data(), &[4.0, 6.0]);
}

#[test]
fn matmul_identity() {
    let mut t = Tape::new();
    let eye = t.constant(Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap());
    let data = vec![1.5, -2.0, 3.25, 0.0, 7.0, -1.0];
    let a = t.constant(Tensor::new(vec![2, 3], data.clone()).unwrap());
    let out = t.matmul(eye, a).unwrap();
    assert_eq!(t.value(out).data(), data.as_slice());
}

#[test]
fn uniform_cross_entropy_is_ln2() {
    let mut t = Tape::new();
    let logits = t.constant(Tensor::new(vec![1, 2], vec![0.0, 0.0]).unwrap());
    let loss = t.softmax_cross_entropy(logits, &[0]).unwrap();
    assert!((t.value(loss).data()[0] - std::f64::consts::LN_2).abs() < 1e-15);
}

#[test]
fn shape_mismatch_names_op_and_shapes() {
    let mut t = Tape::new();
    let a = t.constant(Tensor::vector(vec![1.0, 2.0]));
    let b = t.constant(Tensor::vector(vec![1.0, 2.0, 3.0]));
    let err = t.add(a, b).unwrap_err();
    assert_eq!(
        err,
        AutodiffError::ShapeMismatch {
            op: "add",
            shapes: vec![vec![2], vec![3]]
        }
    );
    let err = t.matmul(a, b).unwrap_err();
    assert!(matches!(err, AutodiffError::ShapeMismatch { op: "matmul", .. }));
}

#[test]
fn mean_of_squares_gradient() {
    let mut t = Tape::new();
    let w = t.param(Tensor::vector(vec![1.0, 2.0, 3.0]));
    let sq = t.mul(w, w).unwrap();
    let loss = t.mean(sq).unwrap();
    let g = t.backward(loss).unwrap();
    let got = g.get(w).unwrap();
    for (a, b) in got.iter().zip([2.0 / 3.0, 4.0 / 3.0, 2.0]) {
        assert!((a - b).abs() < 1e-15);
    }
}

#[test]
fn constant_loss_gives_zero_grads() {
    let mut t = Tape::new();
    let w = t.param(Tensor::vector(vec![1.0, 2.0]));
    let c = t.constant(Tensor::scalar(5.0));
    let g = t.backward(c).unwrap();
    assert_eq!(g.get(w).unwrap(), &[0.0, 0.0]);
}

#[test]
fn product_rule() {
    let mut t = Tape::new();
    let x = t.param(Tensor::scalar(2.0));
    let y = t.param(Tensor::scalar(3.0));
    let z = t.mul(x, y).unwrap();
    let g = t.backward(z).unwrap();
    assert_eq!(g.get(x).unwrap(), &[3.0]);
    assert_eq!(g.get(y).unwrap(), &[2.0]);
}

#[test]
fn non_scalar_loss_is_rejected() {
    let mut t = Tape::new();
    let w = t.param(Tensor::vector(vec![1.0, 2.0]));
    assert_eq!(t.backward(w).unwrap_err(), AutodiffError::NonScalarLoss(vec![2]));
}

#[test]
fn non_finite_forward_is_an_error() {
    let mut t = Tape::new();
    let a = t.constant(Tensor::scalar(1.0));
    let b = t.constant(Tensor::scalar(0.0));
    assert_eq!(t.div(a, b).unwrap_err(), AutodiffError::NonFinite { op: "div" });
}

#[test]
fn diamond_graph_sums_path_gradients() {
    // s = x * x; loss = s * 3 + sin(s)  =>  dloss/dx = (3 + cos(s)) * 2x
    let mut t = Tape::new();
    let x = t.param(Tensor::scalar(0.7));
    let s = t.mul(x, x).unwrap();
    let three = t.constant(Tensor::scalar(3.0));
    let left = t.mul(s, three).unwrap();
    let right = t.map(s, |v| (v.sin(), v.cos())).unwrap();
    let loss = t.add(left, right).unwrap();
    let g = t.backward(loss).unwrap().get(x).unwrap()[0];
    let s = 0.49f64;
    let expected = (3.0 + s.cos()) * 1.4;
    assert!((g - expected).abs() < 1e-14);
}

#[test]
fn forward_primitive_dispatch() {
    let mut t = Tape::new();
    let a = t.constant(Tensor::vector(vec![1.0, 2.0]));
    let b = t.constant(Tensor::vector(vec![3.0, 4.0]));
    let sum = t.forward_primitive(Primitive::Add, &[a, b]).unwrap();
    assert_eq!(t.value(sum).data(), &[4.0, 6.0]);
    let err = t.forward_primitive(Primitive::Add, &[a]).unwrap_err();
    assert!(matches!(err, AutodiffError::Arity { op: "add", .. }));
    let sq = |x: f64| (x * x, 2.0 * x);
    let out = t.forward_primitive(Primitive::Unary(&sq), &[b]).unwrap();
    assert_eq!(t.value(out).data(), &[9.0, 16.0]);
}

#[test]
fn label_out_of_range() {
    let mut t = Tape::new();
    let logits = t.constant(Tensor::new(vec![1, 2], vec![0.0, 0.0]).unwrap());
    assert!(matches!(
        t.softmax_cross_entropy(logits, &[2]),
        Err(AutodiffError::LabelOutOfRange { label: 2, classes: 2 })
    ));
}
