use super::dual::{gauss_newton_explicit, kfac_push_through, shampoo_series};
use super::*;
use crate::param::exp;
use crate::network::{forward, init_weights, Activation, Architecture};
use crate::param::{materialize, table_for, Scheme, Widths};
use ndarray::array;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

fn gaussian(rows: usize, cols: usize, seed: u64) -> Array2<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Array2::from_shape_fn((rows, cols), |_| StandardNormal.sample(&mut rng))
}

fn rel(a: &Array2<f64>, b: &Array2<f64>) -> f64 {
    let diff = (a - b).mapv(|x| x * x).sum().sqrt();
    diff / b.mapv(|x| x * x).sum().sqrt().max(1e-300)
}

struct Problem {
    weights: Weights<f64>,
    tape: Tape<f64>,
    mat: Materialized,
}

fn problem(family: Family, loss: LossKind, width: usize, n: usize, out: usize, seed: u64) -> Problem {
    let arch = Architecture { d_in: 5, width, depth: 3, out_dim: out, activation: Activation::Tanh, bias: false };
    let t = table_for(Scheme::Mup, family, &FamilyExps::default(), 3).unwrap();
    let mat = materialize(&t.param.with_base(1.0, 0.5), &t.damping, 1.0, Widths { d_in: 5, hidden: width }).unwrap();
    let mut init = mat.clone();
    // A nonzero output layer keeps the hidden-layer signals away from zero.
    init.init_std[2] = 1.0 / (width as f64).sqrt();
    let weights = init_weights::<f64>(&arch, &init, false, seed).unwrap();
    let x = gaussian(5, n, seed + 1);
    let y = match loss {
        LossKind::Mse => gaussian(out, n, seed + 2),
        LossKind::CrossEntropy => Array2::from_shape_fn((out, n), |(k, i)| if (i * 7 + 3) % out == k { 1.0 } else { 0.0 }),
    };
    let mut tape = forward(&weights, x.view()).unwrap();
    tape.backward(&weights, loss, &y, true).unwrap();
    Problem { weights, tape, mat }
}

fn spec(family: Family, strategy: DampingStrategy) -> OptimizerSpec {
    OptimizerSpec::new(family, DampingSpec { strategy, rho_prime: 0.5, normalized: true })
}

fn first_directions(p: &Problem, s: OptimizerSpec) -> (Vec<Direction<f64>>, StepReport) {
    Optimizer::new(s, p.mat.clone()).unwrap().directions(&p.weights, &p.tape).unwrap()
}

#[test]
fn zero_exponent_kfac_bitwise_matches_sgd() {
    let p = problem(Family::Kfac, LossKind::Mse, 12, 6, 2, 1);
    let mut s = spec(Family::Kfac, DampingStrategy::RescaledTrace);
    s.exps = FamilyExps { e_a: exp(0, 1), e_b: exp(0, 1), ..Default::default() };
    let sgd_mat = {
        let t = table_for(Scheme::Mup, Family::Sgd, &FamilyExps::default(), 3).unwrap();
        materialize(&t.param.with_base(1.0, 0.5), &t.damping, 1.0, Widths { d_in: 5, hidden: 12 }).unwrap()
    };
    let kfac_mat = Materialized { lr: sgd_mat.lr.clone(), ..p.mat.clone() };
    let (wk, _) = kfac_step(&p.weights, &p.tape, &s, &kfac_mat).unwrap();
    let ws = sgd_step(&p.weights, &p.tape, &sgd_mat).unwrap();
    for (a, b) in wk.layers.iter().zip(&ws.layers) {
        assert_eq!(a.w, b.w);
    }
}

#[test]
fn sgd_direction_is_the_gradient() {
    let p = problem(Family::Sgd, LossKind::Mse, 8, 4, 2, 2);
    let (dirs, _) = first_directions(&p, spec(Family::Sgd, DampingStrategy::FixedExponent));
    for (l, d) in dirs.iter().enumerate() {
        assert!(rel(&d.dense(), &p.tape.grad(l).unwrap()) < 1e-14);
    }
}

#[test]
fn foof_is_the_activation_side_specialization() {
    let p = problem(Family::Foof, LossKind::Mse, 10, 6, 2, 3);
    let (foof, _) = first_directions(&p, spec(Family::Foof, DampingStrategy::RescaledTrace));
    let mut s = spec(Family::Kfac, DampingStrategy::RescaledTrace);
    s.exps = FamilyExps { e_a: exp(1, 1), e_b: exp(0, 1), ..Default::default() };
    let (kfac, _) = first_directions(&p, s);
    for (a, b) in foof.iter().zip(&kfac) {
        assert_eq!(a.dense(), b.dense());
    }
}

fn check_push_through(loss: LossKind, width: usize, mode: FactorMode, strategy: DampingStrategy) {
    let p = problem(Family::Kfac, loss, width, 8, 3, 4);
    let mut s = spec(Family::Kfac, strategy);
    s.factor_mode = mode;
    let (dirs, report) = first_directions(&p, s);
    for l in 0..3 {
        let rep = &report.layers[l];
        let dual = kfac_push_through(&p.tape, l, 1.0, 1.0, rep.rho_right.unwrap(), rep.rho_left.unwrap()).unwrap();
        let e = rel(&dirs[l].dense(), &dual);
        assert!(e < 1e-9, "{loss:?} M={width} layer {l}: {e:e}");
    }
}

#[test]
fn primal_matches_push_through() {
    for &m in &[4, 16, 40] {
        for loss in [LossKind::Mse, LossKind::CrossEntropy] {
            check_push_through(loss, m, FactorMode::Auto, DampingStrategy::RescaledTrace);
        }
    }
    check_push_through(LossKind::Mse, 16, FactorMode::Dense, DampingStrategy::FixedExponent);
    check_push_through(LossKind::Mse, 16, FactorMode::Auto, DampingStrategy::KfacHeuristic);
}

#[test]
fn shampoo_matches_series_when_damping_dominates() {
    let p = problem(Family::Shampoo, LossKind::Mse, 12, 6, 2, 5);
    let mut s = spec(Family::Shampoo, DampingStrategy::MaxEigenvalue);
    s.damping.rho_prime = 3.0;
    for mode in [FactorMode::Auto, FactorMode::Dense] {
        s.factor_mode = mode;
        let (dirs, report) = first_directions(&p, s.clone());
        for l in 0..3 {
            let r = &report.layers[l];
            let dual = shampoo_series(&p.tape, l, 0.5, r.rho_left.unwrap(), r.rho_right.unwrap()).unwrap();
            let e = rel(&dirs[l].dense(), &dual);
            assert!(e < 1e-10, "layer {l}: {e:e}");
        }
    }
}

#[test]
fn shampoo_series_refuses_small_damping() {
    let p = problem(Family::Shampoo, LossKind::Mse, 8, 4, 1, 6);
    assert!(matches!(shampoo_series(&p.tape, 1, 0.5, 1e-12, 1e-12), Err(dual::DualError::SeriesDiverges { .. })));
}

#[test]
fn shampoo_single_sample_is_collinear_with_gradient() {
    // n = 1, M = 4: L and R are rank one, so the update is a rescaled δ hᵀ.
    let p = problem(Family::Shampoo, LossKind::Mse, 4, 1, 1, 7);
    let (dirs, _) = first_directions(&p, spec(Family::Shampoo, DampingStrategy::FixedExponent));
    for (l, d) in dirs.iter().enumerate() {
        let g = p.tape.grad(l).unwrap();
        let u = d.dense();
        let ratio = (&u * &g).sum() / (&g * &g).sum();
        assert!(ratio > 0.0);
        assert!(rel(&u, &(&g * ratio)) < 1e-12, "layer {l}");
    }
}

#[test]
fn shampoo_zero_power_is_sgd() {
    let p = problem(Family::Shampoo, LossKind::Mse, 6, 3, 1, 8);
    let opt = Optimizer::<f64>::new(spec(Family::Shampoo, DampingStrategy::FixedExponent), p.mat.clone()).unwrap();
    assert!(!opt.needs_output_signals());
    let mut s = spec(Family::Shampoo, DampingStrategy::FixedExponent);
    s.exps.e = exp(0, 1);
    assert!(s.validate().is_err());
}

#[test]
fn gauss_newton_matches_explicit_jacobian() {
    let p = problem(Family::GaussNewton, LossKind::Mse, 12, 8, 2, 9);
    let (dirs, report) = first_directions(&p, spec(Family::GaussNewton, DampingStrategy::FixedExponent));
    for l in 0..3 {
        let rho = report.layers[l].rho_right.unwrap();
        for sample_space in [true, false] {
            let e = rel(&dirs[l].dense(), &gauss_newton_explicit(&p.tape, l, rho, sample_space).unwrap());
            assert!(e < 1e-9, "layer {l} sample_space={sample_space}: {e:e}");
        }
    }
}

#[test]
fn gauss_newton_single_sample_scalar() {
    let p = problem(Family::GaussNewton, LossKind::Mse, 6, 1, 1, 10);
    let (dirs, report) = first_directions(&p, spec(Family::GaussNewton, DampingStrategy::FixedExponent));
    let back = p.tape.backward_ref().unwrap();
    let chi = back.chi[[0, 0]];
    for l in 0..3 {
        let d = &back.delta_out.as_ref().unwrap()[l];
        let h = &p.tape.h[l];
        let g = d.column(0).dot(&d.column(0)) * h.column(0).dot(&h.column(0));
        let rho = report.layers[l].rho_right.unwrap();
        let chi_t = chi / (chi * chi * g + rho);
        let expected = Array2::from_shape_fn((d.nrows(), h.nrows()), |(a, b)| -chi_t * d[[a, 0]] * h[[b, 0]]);
        assert!(rel(&dirs[l].dense(), &expected) < 1e-12);
    }
}

#[test]
fn gauss_newton_rejects_cross_entropy() {
    let p = problem(Family::GaussNewton, LossKind::CrossEntropy, 6, 3, 2, 11);
    let mut opt = Optimizer::new(spec(Family::GaussNewton, DampingStrategy::FixedExponent), p.mat.clone()).unwrap();
    assert_eq!(opt.directions(&p.weights, &p.tape).unwrap_err(), OptimError::GaussNewtonLoss);
}

#[test]
fn zero_error_gives_zero_update() {
    for family in [Family::Kfac, Family::Shampoo, Family::GaussNewton, Family::Sgd] {
        let mut p = problem(family, LossKind::Mse, 6, 4, 2, 12);
        let f = p.tape.output().clone();
        p.tape.backward(&p.weights, LossKind::Mse, &f, true).unwrap();
        let strategy = if family == Family::Kfac { DampingStrategy::RescaledTrace } else { DampingStrategy::FixedExponent };
        let mut w = p.weights.clone();
        let mut opt = Optimizer::new(spec(family, strategy), p.mat.clone()).unwrap();
        opt.step(&mut w, &p.tape).unwrap();
        for (a, b) in w.layers.iter().zip(&p.weights.layers) {
            assert_eq!(a.w, b.w, "{family}");
        }
    }
}

#[test]
fn zero_learning_rate_leaves_weights() {
    let p = problem(Family::Kfac, LossKind::Mse, 6, 4, 2, 13);
    let mat = Materialized { lr: vec![0.0; 3], ..p.mat.clone() };
    let (w, _) = kfac_step(&p.weights, &p.tape, &spec(Family::Kfac, DampingStrategy::RescaledTrace), &mat).unwrap();
    for (a, b) in w.layers.iter().zip(&p.weights.layers) {
        assert_eq!(a.w, b.w);
    }
}

#[test]
fn scalar_model_sgd_step() {
    // f = w2 · w1 · x with scalar weights; ∂(½ (y − f)²)/∂w1 = −(y − f) w2 x.
    let arch = Architecture { d_in: 1, width: 1, depth: 2, out_dim: 1, activation: Activation::Identity, bias: false };
    let mat = Materialized {
        multiplier: vec![1.0; 2],
        init_std: vec![1.0; 2],
        lr: vec![0.1, 0.2],
        rho_left: vec![None; 2],
        rho_right: vec![None; 2],
        bias_lr: 0.1,
        bias_std: 1.0,
    };
    let mut w = init_weights::<f64>(&arch, &mat, false, 3).unwrap();
    w.layers[0].w[[0, 0]] = 0.5;
    w.layers[1].w[[0, 0]] = -2.0;
    let x = array![[3.0]];
    let y = array![[1.0]];
    let mut tape = forward(&w, x.view()).unwrap();
    tape.backward(&w, LossKind::Mse, &y, false).unwrap();
    let new = sgd_step(&w, &tape, &mat).unwrap();
    let r = 1.0 - (-2.0 * 0.5 * 3.0);
    assert!((new.layers[0].w[[0, 0]] - (0.5 - 0.1 * (-r * -2.0 * 3.0))).abs() < 1e-14);
    assert!((new.layers[1].w[[0, 0]] - (-2.0 - 0.2 * (-r * 0.5 * 3.0))).abs() < 1e-14);
}

#[test]
fn multiplier_keeps_function_space_step() {
    // Shifting a onto the multiplier must not change the effective-weight update.
    let p = problem(Family::Kfac, LossKind::Mse, 8, 4, 2, 14);
    let s = spec(Family::Kfac, DampingStrategy::RescaledTrace);
    let (base, _) = kfac_step(&p.weights, &p.tape, &s, &p.mat).unwrap();
    let mut scaled = p.weights.clone();
    for layer in &mut scaled.layers {
        layer.w *= 4.0;
        layer.multiplier = 0.25;
    }
    let mat = Materialized { lr: p.mat.lr.iter().map(|x| x * 16.0).collect(), multiplier: vec![0.25; 3], ..p.mat.clone() };
    let (shifted, _) = kfac_step(&scaled, &p.tape, &s, &mat).unwrap();
    for (a, b) in base.layers.iter().zip(&shifted.layers) {
        assert!(rel(&b.effective(), &a.effective()) < 1e-12);
    }
}

#[test]
fn ema_and_sum_accumulation() {
    let x = Factor::Thin(gaussian(6, 2, 15));
    let dense = x.to_dense();
    let mut ema = CurvatureState::<f64>::new(Accumulation::Ema { xi: 0.9 }, 1);
    let mut sum = CurvatureState::<f64>::new(Accumulation::Sum, 1);
    let mut none = CurvatureState::<f64>::new(Accumulation::Ema { xi: 0.0 }, 1);
    let other = Factor::Thin(gaussian(6, 2, 16));
    for t in 0..5 {
        let batch = || vec![LayerFactors { left: Some(x.clone()), right: None }];
        ema.accumulate(batch()).unwrap();
        sum.accumulate(batch()).unwrap();
        none.accumulate(vec![LayerFactors { left: Some(if t % 2 == 0 { other.clone() } else { x.clone() }), right: None }]).unwrap();
        let got = ema.layers[0].left.as_ref().unwrap().to_dense();
        assert!(rel(&got, &dense) < 1e-13);
        let got = sum.layers[0].left.as_ref().unwrap().to_dense();
        assert!(rel(&got, &(&dense * (t + 1) as f64)) < 1e-13);
    }
    assert!(rel(&none.layers[0].left.as_ref().unwrap().to_dense(), &other.to_dense()) < 1e-13);
    let mut bad = CurvatureState::<f64>::new(Accumulation::Ema { xi: 1.0 }, 1);
    assert_eq!(bad.accumulate(vec![LayerFactors::default()]), Err(OptimError::EmaFactor(1.0)));
}

#[test]
fn ema_runs_through_optimizer() {
    let p = problem(Family::Kfac, LossKind::Mse, 8, 4, 2, 17);
    let mut s = spec(Family::Kfac, DampingStrategy::RescaledTrace);
    s.accumulation = Accumulation::Ema { xi: 0.5 };
    s.momentum = 0.9;
    let mut opt = Optimizer::new(s, p.mat.clone()).unwrap();
    let mut w = p.weights.clone();
    for _ in 0..3 {
        let r = opt.step(&mut w, &p.tape).unwrap();
        assert!(r.layers.iter().all(|l| l.coord_dwh.is_finite()));
    }
    // Identical batches: the EMA equals the batch factor.
    let a = opt.curvature().layers[1].right.as_ref().unwrap().to_dense();
    let h = &p.tape.h[1];
    assert!(rel(&a, &(h.dot(&h.t()) / 4.0)) < 1e-12);
}

#[test]
fn strategy_family_validation() {
    assert!(matches!(
        spec(Family::Shampoo, DampingStrategy::RescaledTrace).validate(),
        Err(OptimError::StrategyFamily { .. })
    ));
    assert!(spec(Family::Kfac, DampingStrategy::MaxEigenvalue).validate().is_err());
    let mut s = spec(Family::Kfac, DampingStrategy::RescaledTrace);
    s.accumulation = Accumulation::Ema { xi: -0.1 };
    assert!(s.validate().is_err());
}

#[test]
fn report_is_finite_and_valid() {
    let p = problem(Family::Kfac, LossKind::CrossEntropy, 10, 6, 3, 18);
    let (_, r) = first_directions(&p, spec(Family::Kfac, DampingStrategy::KfacHeuristic));
    for l in &r.layers {
        assert!(l.rho_left.unwrap().is_finite() && l.rho_right.unwrap().is_finite());
        assert!(l.validity_left().unwrap() > 0.0);
        assert!(!l.fallback);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn accumulated_factors_stay_symmetric_psd(seed in 0u64..1000, xi in 0.0f64..0.99, steps in 1usize..5) {
        let mut st = CurvatureState::<f64>::new(Accumulation::Ema { xi }, 1);
        for t in 0..steps {
            let f = Factor::from_root(gaussian(5, 1 + (t % 3), seed + t as u64));
            st.accumulate(vec![LayerFactors { left: Some(f), right: None }]).unwrap();
        }
        let x = st.layers[0].left.as_ref().unwrap().to_dense();
        prop_assert!(crate::linalg::asymmetry(&x) <= 1e-12);
        let (w, _) = f64::eigh_sym(&x).unwrap();
        prop_assert!(w[0] >= -1e-10 * w[w.len() - 1].max(1e-300));
    }
}
