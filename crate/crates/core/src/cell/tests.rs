use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::symbolic::{parse, Expr, Func, Style};
use super::*;
use crate::autodiff::{finite_difference_grad, relative_error, Tape, DEFAULT_FD_STEP};
use crate::ops::{eval_discovered, FormulaId};
use crate::Tensor;

fn u(op: UnaryOpId) -> OpId {
    OpId::Unary(op)
}

fn b(op: BinaryOpId) -> OpId {
    OpId::Binary(op)
}

fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

fn provenance() -> Provenance {
    Provenance::new(0, 0, "test")
}

fn rn4_cell() -> DiscreteActivation {
    DiscreteActivation::new(
        [
            (UnaryOpId::MaxZero, 0.0),
            (UnaryOpId::Gelu, 0.0),
            (UnaryOpId::Identity, 0.0),
            (UnaryOpId::Identity, 0.0),
        ],
        [(BinaryOpId::WeightedAvg, logit(0.4756)), (BinaryOpId::Left, 0.0)],
        provenance(),
    )
}

fn random_cell(rng: &mut ChaCha8Rng) -> DiscreteActivation {
    let unary = std::array::from_fn(|_| (UnaryOpId::ALL[rng.random_range(0..23)], rng.random_range(-2.0..2.0)));
    let binary = std::array::from_fn(|_| (BinaryOpId::ALL[rng.random_range(0..9)], rng.random_range(-2.0..2.0)));
    DiscreteActivation::new(unary, binary, provenance())
}

#[test]
fn fresh_distribution_has_110_ops_at_the_anchor() {
    let d = CellDistribution::new();
    assert_eq!(d.active_count(), 110);
    assert_eq!(d.counts(), [23, 23, 23, 23, 9, 9]);
    for l in Location::ALL {
        for r in d.rho(l) {
            assert!((r - 1.0).abs() < 1e-12);
        }
    }
    let scale = d.location(Location::U1).position(u(UnaryOpId::Scale)).unwrap();
    assert_eq!(d.location(Location::U1).gamma()[scale], 1.0);
    let wavg = d.location(Location::BBot).position(b(BinaryOpId::WeightedAvg)).unwrap();
    assert_eq!(d.location(Location::BBot).gamma()[wavg], 0.0);
}

proptest! {
    #[test]
    fn samples_lie_on_the_simplex(rho in prop::collection::vec(0.01f64..20.0, 2..24), seed in any::<u64>()) {
        let mut d = CellDistribution::new();
        let n = rho.len().min(23);
        let keep: Vec<OpId> = UnaryOpId::ALL[..n].iter().map(|&o| u(o)).collect();
        for op in Location::U1.all_ops().into_iter().filter(|o| !keep.contains(o)) {
            d.drop_op(Location::U1, op).unwrap();
        }
        d.set_rho(Location::U1, &rho[..n]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let s = sample_cell(&d, &mut rng);
        for draw in &s.draws {
            let total: f64 = draw.weights.iter().sum();
            prop_assert!((total - 1.0).abs() <= 1e-12);
            prop_assert!(draw.weights.iter().all(|&w| w >= 0.0));
        }
    }
}

#[test]
fn single_op_location_always_weighs_one() {
    let mut d = CellDistribution::new();
    for op in BinaryOpId::ALL.iter().skip(1) {
        d.drop_op(Location::BTop, b(*op)).unwrap();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for _ in 0..100 {
        assert_eq!(sample_cell(&d, &mut rng).draw(Location::BTop).weights, vec![1.0]);
    }
}

fn three_op_edge(rho: [f64; 3]) -> CellDistribution {
    let mut d = CellDistribution::with_ops([
        vec![u(UnaryOpId::Identity), u(UnaryOpId::Negation), u(UnaryOpId::Square)],
        vec![u(UnaryOpId::Identity)],
        vec![u(UnaryOpId::Identity)],
        vec![u(UnaryOpId::Identity)],
        vec![b(BinaryOpId::Add)],
        vec![b(BinaryOpId::Add)],
    ])
    .unwrap();
    d.set_rho(Location::U1, &rho).unwrap();
    d
}

#[test]
fn empirical_mean_matches_dirichlet_mean() {
    let d = three_op_edge([2.0, 1.0, 1.0]);
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    let n = 100_000;
    let mut mean = [0.0; 3];
    for _ in 0..n {
        let s = sample_cell(&d, &mut rng);
        for (m, w) in mean.iter_mut().zip(&s.draw(Location::U1).weights) {
            *m += w / n as f64;
        }
    }
    for (m, e) in mean.iter().zip([0.5, 0.25, 0.25]) {
        assert!((m - e).abs() < 0.01, "{mean:?}");
    }
}

#[test]
fn sites_receive_independent_samples() {
    let d = three_op_edge([1.0, 1.0, 1.0]);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let n = 20_000;
    let (mut a, mut c) = (Vec::with_capacity(n), Vec::with_capacity(n));
    for _ in 0..n {
        a.push(sample_cell(&d, &mut rng).draw(Location::U1).weights[0]);
        c.push(sample_cell(&d, &mut rng).draw(Location::U1).weights[0]);
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let (ma, mc) = (mean(&a), mean(&c));
    let cov: f64 = a.iter().zip(&c).map(|(x, y)| (x - ma) * (y - mc)).sum::<f64>() / n as f64;
    let var = |v: &[f64], m: f64| v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / n as f64;
    let corr = cov / (var(&a, ma) * var(&c, mc)).sqrt();
    assert!(corr.abs() < 3.0 / (n as f64).sqrt(), "corr {corr}");
}

fn two_op_vertex(rho: [f64; 2]) -> CellDistribution {
    let mut d = CellDistribution::with_ops([
        vec![u(UnaryOpId::Identity)],
        vec![u(UnaryOpId::Identity)],
        vec![u(UnaryOpId::Identity)],
        vec![u(UnaryOpId::Identity)],
        vec![b(BinaryOpId::Add), b(BinaryOpId::Sub)],
        vec![b(BinaryOpId::Add)],
    ])
    .unwrap();
    d.set_rho(Location::BBot, &rho).unwrap();
    d
}

/// Mean and standard error of the pathwise estimate of ∂E[α₁]/∂ρ₁.
fn mc_mean_weight_grad(rho: [f64; 2], n: usize, seed: u64) -> (f64, f64) {
    let d = two_op_vertex(rho);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut sum, mut sum_sq) = (0.0, 0.0);
    for _ in 0..n {
        let s = sample_cell(&d, &mut rng);
        let g = dirichlet_backward(s.draw(Location::BBot), &rho, &[1.0, 0.0])[0];
        sum += g;
        sum_sq += g * g;
    }
    let mean = sum / n as f64;
    let var = (sum_sq / n as f64 - mean * mean).max(0.0);
    (mean, (var / n as f64).sqrt())
}

#[test]
fn pathwise_gradient_matches_dirichlet_moment() {
    for rho in [[1.0, 1.0], [0.5, 2.0], [3.0, 0.7]] {
        let (mean, se) = mc_mean_weight_grad(rho, 100_000, 17);
        let exact = rho[1] / (rho[0] + rho[1]).powi(2);
        assert!((mean - exact).abs() < 3.0 * se, "{rho:?}: {mean} ± {se} vs {exact}");
    }
}

#[test]
fn zero_upstream_gives_zero_gradient() {
    let d = two_op_vertex([1.3, 0.4]);
    let s = sample_cell(&d, &mut ChaCha8Rng::seed_from_u64(0));
    assert_eq!(
        dirichlet_backward(s.draw(Location::BBot), &[1.3, 0.4], &[0.0, 0.0]),
        vec![0.0, 0.0]
    );
}

#[test]
fn symmetric_concentrations_give_symmetric_gradients() {
    // Loss α₁² + α₂² is symmetric; its expected gradient components agree.
    let rho = [1.5, 1.5];
    let d = two_op_vertex(rho);
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let n = 50_000;
    let mut diffs = Vec::with_capacity(n);
    for _ in 0..n {
        let s = sample_cell(&d, &mut rng);
        let w = &s.draw(Location::BBot).weights;
        let g = dirichlet_backward(s.draw(Location::BBot), &rho, &[2.0 * w[0], 2.0 * w[1]]);
        diffs.push(g[0] - g[1]);
    }
    let mean = diffs.iter().sum::<f64>() / n as f64;
    let sd = (diffs.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / n as f64).sqrt();
    assert!(mean.abs() < 3.0 * sd / (n as f64).sqrt(), "{mean} sd {sd}");
}

#[test]
fn reparameterization_derivative_matches_quantile_difference() {
    // z(ρ) at fixed CDF level u moves by dz/dρ; check against inverting F
    // numerically by bisection at ρ ± h.
    use statrs::function::gamma::gamma_lr;
    let invert = |rho: f64, u: f64| {
        let (mut lo, mut hi) = (1e-12, 100.0);
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if gamma_lr(rho, mid) < u {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        0.5 * (lo + hi)
    };
    for (rho, u) in [(1.0, 0.3), (0.4, 0.6), (2.5, 0.9), (7.0, 0.05)] {
        let z = invert(rho, u);
        let h = 1e-4;
        let numeric = (invert(rho + h, u) - invert(rho - h, u)) / (2.0 * h);
        let analytic = sample::gamma_reparam_deriv(z, rho);
        assert!(
            relative_error(analytic, numeric) < 1e-5,
            "{rho}: {analytic} vs {numeric}"
        );
    }
}

/// Random fixed sample on a full distribution with random γ.
fn random_setup(rng: &mut ChaCha8Rng) -> (CellDistribution, CellSample) {
    let mut d = CellDistribution::new();
    for l in Location::ALL {
        for g in d.gamma_mut(l) {
            *g = rng.random_range(-1.5..1.5);
        }
    }
    let s = sample_cell(&d, rng);
    (d, s)
}

fn relaxed_loss(d: &CellDistribution, weights: &[Vec<f64>], xs: &[f64], coef: &[f64]) -> f64 {
    let mut tape = Tape::new();
    let leaves = CellLeaves::new(&mut tape, d);
    let w: Vec<_> = weights.iter().map(|w| tape.param(Tensor::vector(w.clone()))).collect();
    let x = tape.param(Tensor::vector(xs.to_vec()));
    let y = eval_relaxed(&mut tape, d, &leaves, &w, x, 10.0).unwrap();
    let c = tape.constant(Tensor::vector(coef.to_vec()));
    let p = tape.mul(y, c).unwrap();
    let l = tape.sum(p).unwrap();
    tape.value(l).data()[0]
}

#[test]
fn relaxed_cell_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let (d, s) = random_setup(&mut rng);
    let xs: Vec<f64> = (0..50).map(|_| rng.random_range(-2.5..2.5)).collect();
    let coef: Vec<f64> = (0..50).map(|_| rng.random_range(-1.0..1.0)).collect();
    let weights: Vec<Vec<f64>> = s.draws.iter().map(|d| d.weights.clone()).collect();

    let mut tape = Tape::new();
    let leaves = CellLeaves::new(&mut tape, &d);
    let w = CellLeaves::site_weights(&mut tape, &s);
    let x = tape.param(Tensor::vector(xs.clone()));
    let y = eval_relaxed(&mut tape, &d, &leaves, &w, x, 10.0).unwrap();
    let c = tape.constant(Tensor::vector(coef.clone()));
    let p = tape.mul(y, c).unwrap();
    let l = tape.sum(p).unwrap();
    let grads = tape.backward(l).unwrap();

    // Weights.
    for (li, loc) in Location::ALL.iter().enumerate() {
        let analytic = grads.get(w[li]).unwrap().to_vec();
        let numeric = finite_difference_grad(
            |p| {
                let mut ws = weights.clone();
                ws[li] = p.to_vec();
                relaxed_loss(&d, &ws, &xs, &coef)
            },
            &weights[li],
            DEFAULT_FD_STEP,
        );
        for (a, n) in analytic.iter().zip(&numeric) {
            assert!(relative_error(*a, *n) < 1e-5, "{loc} weight: {a} vs {n}");
        }
    }
    // γ, including the inert entries of ops without one.
    for (li, loc) in Location::ALL.iter().enumerate() {
        let analytic = grads.get(leaves.gamma[li]).unwrap().to_vec();
        let numeric = finite_difference_grad(
            |p| {
                let mut dd = d.clone();
                dd.gamma_mut(*loc).copy_from_slice(p);
                relaxed_loss(&dd, &weights, &xs, &coef)
            },
            d.location(*loc).gamma(),
            DEFAULT_FD_STEP,
        );
        for (a, n) in analytic.iter().zip(&numeric) {
            assert!(relative_error(*a, *n) < 1e-5, "{loc} gamma: {a} vs {n}");
        }
    }
    // Input.
    let analytic = grads.get(x).unwrap().to_vec();
    let numeric = finite_difference_grad(|p| relaxed_loss(&d, &weights, p, &coef), &xs, DEFAULT_FD_STEP);
    for (a, n) in analytic.iter().zip(&numeric) {
        assert!(relative_error(*a, *n) < 1e-5, "x: {a} vs {n}");
    }
}

#[test]
fn relaxed_outputs_stay_in_band() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for _ in 0..20 {
        let (d, s) = random_setup(&mut rng);
        let xs: Vec<f64> = (0..64).map(|_| rng.random_range(-1e4..1e4)).collect();
        let mut tape = Tape::new();
        let leaves = CellLeaves::new(&mut tape, &d);
        let w = CellLeaves::site_weights(&mut tape, &s);
        let x = tape.constant(Tensor::vector(xs));
        let y = eval_relaxed(&mut tape, &d, &leaves, &w, x, 10.0).unwrap();
        assert!(tape.value(y).data().iter().all(|v| v.abs() <= 10.0));
    }
}

#[test]
fn sample_arity_mismatch_is_an_error() {
    let d = CellDistribution::new();
    let mut tape = Tape::new();
    let leaves = CellLeaves::new(&mut tape, &d);
    let mut s = sample_cell(&d, &mut ChaCha8Rng::seed_from_u64(0));
    s.draws[4] = SimplexDraw::fixed(vec![0.5, 0.5]);
    let w = CellLeaves::site_weights(&mut tape, &s);
    let x = tape.constant(Tensor::vector(vec![1.0]));
    let err = eval_relaxed(&mut tape, &d, &leaves, &w, x, 10.0).unwrap_err();
    assert_eq!(
        err,
        CellError::Arity {
            location: Location::BBot,
            expected: 9,
            found: 2
        }
    );
}

#[test]
fn one_hot_cell_reproduces_rn4() {
    let cell = rn4_cell();
    let rn4: FormulaId = "F_RN^4".parse().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    for _ in 0..1000 {
        let x: f64 = rng.random_range(-10.0..10.0);
        let (got, want) = (cell.eval(x), eval_discovered(rn4, x));
        assert!((got - want).abs() <= 1e-12 * want.abs(), "{x}: {got} vs {want}");
    }
    assert_eq!(cell.formula(), "0.4756·ReLU(x) + 0.5244·GELU(x)");
}

#[test]
fn one_hot_relaxed_sample_equals_discrete_cell() {
    let mut d = CellDistribution::new();
    let target = rn4_cell();
    let choices = [
        (Location::U1, u(UnaryOpId::MaxZero)),
        (Location::U2, u(UnaryOpId::Gelu)),
        (Location::U3, u(UnaryOpId::Identity)),
        (Location::U4, u(UnaryOpId::Identity)),
        (Location::BBot, b(BinaryOpId::WeightedAvg)),
        (Location::BTop, b(BinaryOpId::Left)),
    ];
    for (l, op) in choices {
        let mut rho = vec![1.0; d.location(l).len()];
        rho[d.location(l).position(op).unwrap()] = 5.0;
        d.set_rho(l, &rho).unwrap();
    }
    d.set_gamma(Location::BBot, b(BinaryOpId::WeightedAvg), logit(0.4756))
        .unwrap();
    let discrete = d.discretize(provenance());
    assert_eq!(discrete.unary(), target.unary());
    assert_eq!(discrete.binary(), target.binary());

    let xs: Vec<f64> = (0..101).map(|i| -10.0 + 0.2 * i as f64).collect();
    let mut tape = Tape::new();
    let leaves = CellLeaves::new(&mut tape, &d);
    let w = CellLeaves::site_weights(&mut tape, &CellSample::one_hot(&d));
    let x = tape.constant(Tensor::vector(xs.clone()));
    let y = eval_relaxed(&mut tape, &d, &leaves, &w, x, 10.0).unwrap();
    for (xi, yi) in xs.iter().zip(tape.value(y).data()) {
        assert_eq!(*yi, discrete.eval_clamped(*xi, Some(10.0)).0);
        assert_eq!(*yi, discrete.eval(*xi));
    }
}

#[test]
fn identity_add_cell_is_three_x() {
    let cell = DiscreteActivation::new(
        [(UnaryOpId::Identity, 0.0); 4],
        [(BinaryOpId::Add, 0.0), (BinaryOpId::Add, 0.0)],
        provenance(),
    );
    assert_eq!(cell.eval(1.0), 3.0);
    assert_eq!(cell.eval_with_grad(0.3).1, 3.0);

    let d = CellDistribution::with_ops([
        vec![u(UnaryOpId::Identity)],
        vec![u(UnaryOpId::Identity)],
        vec![u(UnaryOpId::Identity)],
        vec![u(UnaryOpId::Identity)],
        vec![b(BinaryOpId::Add)],
        vec![b(BinaryOpId::Add)],
    ])
    .unwrap();
    let mut tape = Tape::new();
    let leaves = CellLeaves::new(&mut tape, &d);
    let w = CellLeaves::site_weights(&mut tape, &sample_cell(&d, &mut ChaCha8Rng::seed_from_u64(0)));
    let x = tape.constant(Tensor::vector(vec![1.0]));
    let y = eval_relaxed(&mut tape, &d, &leaves, &w, x, 10.0).unwrap();
    assert_eq!(tape.value(y).data(), &[3.0]);
}

#[test]
fn drop_removes_lowest_concentration() {
    let mut d = three_op_edge([0.2, 1.5, 0.9]);
    let before = d.active_count();
    let (op, index) = d.drop_lowest(Location::U1).unwrap();
    assert_eq!((op, index), (u(UnaryOpId::Identity), 0));
    assert_eq!(d.active_count(), before - 1);
    let rho = d.rho(Location::U1);
    assert!((rho[0] - 1.5).abs() < 1e-12 && (rho[1] - 0.9).abs() < 1e-12);
}

#[test]
fn dropping_to_one_op_then_last_is_an_error() {
    let mut d = two_op_vertex([1.0, 2.0]);
    d.drop_lowest(Location::BBot).unwrap();
    let s = sample_cell(&d, &mut ChaCha8Rng::seed_from_u64(1));
    assert_eq!(s.draw(Location::BBot).weights, vec![1.0]);
    assert_eq!(d.drop_lowest(Location::BBot), Err(CellError::LastOp(Location::BBot)));
    assert_eq!(
        d.drop_op(Location::U1, u(UnaryOpId::Cube)),
        Err(CellError::NotActive {
            location: Location::U1,
            op: u(UnaryOpId::Cube)
        })
    );
}

#[test]
fn discretize_breaks_ties_by_enumeration_order() {
    let d = CellDistribution::new();
    let a = d.discretize(provenance());
    assert!(a.unary().iter().all(|(op, _)| *op == UnaryOpId::Identity));
    assert!(a.binary().iter().all(|(op, _)| *op == BinaryOpId::Add));

    let mut d = CellDistribution::new();
    let mut rho = vec![1.0; 9];
    rho[3] = 2.0;
    rho[6] = 2.0;
    d.set_rho(Location::BTop, &rho).unwrap();
    assert_eq!(d.discretize(provenance()).binary()[1].0, BinaryOpId::Max);
}

#[test]
fn projection_elides_unused_branch() {
    let cell = DiscreteActivation::new(
        [
            (UnaryOpId::Tanh, 0.0),
            (UnaryOpId::Cube, 0.0),
            (UnaryOpId::Identity, 0.0),
            (UnaryOpId::Exp, 0.0),
        ],
        [(BinaryOpId::Left, 0.0), (BinaryOpId::Left, 0.0)],
        provenance(),
    );
    assert_eq!(cell.formula(), "tanh(x)");
}

#[test]
fn nested_leaky_relus_compose_slopes() {
    let e = Expr::unary(
        UnaryOpId::LeakyRelu,
        0.0,
        Expr::unary(UnaryOpId::LeakyRelu, 0.0, Expr::X),
    )
    .simplify();
    assert_eq!(e.render(Style::Display), "LeakyReLU_{1e-4}(x)");
    assert!(matches!(e, Expr::LeakyRelu(k, _) if (k - 1e-4).abs() < 1e-18));
}

#[test]
fn weighted_average_prints_coefficient_pair() {
    let e = Expr::binary(
        BinaryOpId::WeightedAvg,
        logit(0.4756),
        Expr::unary(UnaryOpId::Sigmoid, 0.0, Expr::X),
        Expr::unary(UnaryOpId::Silu, 0.0, Expr::X),
    );
    assert_eq!(e.render(Style::Display), "0.4756·sigmoid(x) + 0.5244·SiLU(x)");
}

#[test]
fn simplifier_rules() {
    let x = || Box::new(Expr::X);
    let cases = [
        (Expr::Neg(Box::new(Expr::Neg(x()))), "x"),
        (Expr::Scale(1.0, x()), "x"),
        (Expr::Scale(2.0, Box::new(Expr::Scale(0.5, x()))), "x"),
        (Expr::Mul(Box::new(Expr::Const(3.0)), x()), "3·x"),
        (Expr::Add(x(), Box::new(Expr::Const(0.0))), "x"),
        (
            Expr::Add(
                x(),
                Box::new(Expr::Add(Box::new(Expr::Const(1.0)), Box::new(Expr::Const(2.0)))),
            ),
            "x + 3",
        ),
        (Expr::Add(x(), Box::new(Expr::Const(-0.5))), "x - 0.5"),
        (Expr::Sub(Box::new(Expr::Const(0.0)), x()), "-x"),
        (
            Expr::Mix(
                0.3,
                Box::new(Expr::Call(Func::Erf, x())),
                Box::new(Expr::Call(Func::Erf, x())),
            ),
            "erf(x)",
        ),
        (Expr::Max(x(), x()), "x"),
        (
            Expr::Min(
                Box::new(Expr::Call(Func::Tanh, x())),
                Box::new(Expr::Call(Func::Tanh, x())),
            ),
            "tanh(x)",
        ),
    ];
    for (e, want) in cases {
        assert_eq!(e.simplify().render(Style::Display), want, "{e:?}");
    }
}

#[test]
fn symbolic_form_agrees_with_raw_cell() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    for _ in 0..300 {
        let cell = random_cell(&mut rng);
        let simplified = cell.expr();
        let reparsed = parse(&cell.formula_exact()).unwrap();
        for _ in 0..1000 / 100 {
            let x: f64 = rng.random_range(-5.0..5.0);
            let raw = cell.eval(x);
            for (name, v) in [("simplified", simplified.eval(x)), ("parsed", reparsed.eval(x))] {
                let tol = 1e-10 * raw.abs().max(v.abs()).max(1e-300);
                assert!(
                    (raw - v).abs() <= tol,
                    "{name} {} at {x}: {raw} vs {v}",
                    cell.formula_exact()
                );
            }
        }
    }
}

#[test]
fn symbolic_derivative_matches_cell_chain_rule() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    for _ in 0..200 {
        let cell = random_cell(&mut rng);
        let e = cell.expr();
        let x: f64 = rng.random_range(-3.0..3.0);
        let (a, b) = (cell.eval_with_grad(x).1, e.eval_with_grad(x).1);
        assert!(relative_error(a, b) < 1e-9, "{}: {a} vs {b}", cell.formula_exact());
    }
}

#[test]
fn display_form_parses() {
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    for _ in 0..300 {
        let cell = random_cell(&mut rng);
        parse(&cell.formula()).unwrap_or_else(|e| panic!("{}: {e}", cell.formula()));
    }
}

#[test]
fn parse_errors_carry_positions() {
    let err = parse("0.5·foo(x)").unwrap_err();
    assert_eq!(err.position, 4);
    let err = parse("x + ").unwrap_err();
    assert_eq!(err.position, 4);
    assert!(parse("max(x, 0").is_err());
}

proptest! {
    #[test]
    fn activation_json_round_trips_bit_exactly(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut cell = random_cell(&mut rng);
        cell.provenance_mut().seed = seed;
        cell.provenance_mut().config_digest = Some("abc".into());
        let text = cell.to_json();
        let back = DiscreteActivation::from_json(&text).unwrap();
        prop_assert_eq!(&back, &cell);
        prop_assert_eq!(back.to_json(), text);
    }

    #[test]
    fn discrete_cells_are_finite_on_wide_inputs(seed in any::<u64>(), x in -100f64..100.0) {
        let cell = random_cell(&mut ChaCha8Rng::seed_from_u64(seed));
        let (v, d) = cell.eval_with_grad(x);
        prop_assert!(v.is_finite() && d.is_finite(), "{} at {x}", cell.formula());
    }
}

#[test]
fn activation_json_rejects_foreign_documents() {
    let text = rn4_cell().to_json().replace(ACTIVATION_FORMAT, "other");
    assert!(DiscreteActivation::from_json(&text).is_err());
    let text = rn4_cell().to_json().replace("\"max_zero\"", "\"add\"");
    assert!(DiscreteActivation::from_json(&text).is_err());
}
