//! The acceptance checks, shared by the test suite and the `verify` command.
//!
//! Every check returns a [`Check`] instead of panicking so a caller can run
//! the whole list and report each outcome.

use crate::diagnostics::{delta_h_profile, nngp_reference, slope_fit, DiagError, SlopeFit};
use crate::harness::config::{AccumulationMode, Config, Precision};
use crate::harness::data::{load_idx, make_synthetic, write_idx, DataError, Dataset, DatasetSpec, TargetKind};
use crate::harness::run::{resolve, Metric, Scope};
use crate::harness::sweep::{read_csv, run_sweep_with, select_optimum, CsvRow, CsvSink};
use crate::harness::{run_training, HarnessError, SweepMetric};
use crate::network::{forward, init_weights, objective, Activation, Architecture, LossKind, Tape, Weights};
use crate::optim::dual::{gauss_newton_explicit, kfac_push_through, DualError};
use crate::optim::{DampingSpec, DampingStrategy, OptimError, Optimizer, OptimizerSpec};
use crate::param::{
    apply_shift, exp, lazy_table, materialize, mup_table, sp_table, DampingExps, Exp, Family, FamilyExps, ParamError,
    Scheme, Widths,
};
use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use std::collections::{BTreeMap, HashMap};
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum VerifyError {
    #[error(transparent)]
    Harness(#[from] HarnessError),
    #[error(transparent)]
    Dual(#[from] DualError),
    #[error(transparent)]
    Optim(#[from] OptimError),
    #[error(transparent)]
    Param(#[from] ParamError),
    #[error(transparent)]
    Diag(#[from] DiagError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Network(#[from] crate::network::NetworkError),
    #[error("{0}")]
    Io(#[from] std::io::Error),
    #[error("{0}")]
    Missing(String),
}

impl From<crate::harness::ConfigError> for VerifyError {
    fn from(e: crate::harness::ConfigError) -> Self {
        VerifyError::Harness(e.into())
    }
}

/// Outcome of one acceptance criterion.
#[derive(Debug, Clone, PartialEq)]
pub struct Check {
    pub id: u8,
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
    pub elapsed: Duration,
}

impl Check {
    pub fn line(&self) -> String {
        format!(
            "criterion {:>2} {:<28} {}  ({:.2}s) {}",
            self.id,
            self.name,
            if self.passed { "PASS" } else { "FAIL" },
            self.elapsed.as_secs_f64(),
            self.detail
        )
    }
}

#[derive(Debug, Clone, Default)]
pub struct VerifyOptions {
    /// Worker threads for sweeps.
    pub jobs: usize,
    /// Where sweep CSVs go; a temporary directory when absent.
    pub out: Option<PathBuf>,
}

pub struct Criterion {
    pub id: u8,
    pub name: &'static str,
    pub budget: Duration,
    /// Part of `verify --fast`.
    pub fast: bool,
    run: fn(&VerifyOptions) -> Result<(bool, String), VerifyError>,
}

const fn secs(s: u64) -> Duration {
    Duration::from_secs(s)
}

pub const CRITERIA: [Criterion; 13] = [
    Criterion { id: 1, name: "golden tables", budget: secs(1), fast: true, run: golden_tables },
    Criterion { id: 2, name: "push-through equivalence", budget: secs(5), fast: true, run: push_through },
    Criterion { id: 3, name: "gauss-newton dual", budget: secs(5), fast: true, run: gauss_newton_dual },
    Criterion { id: 4, name: "gradient finite differences", budget: secs(10), fast: true, run: gradient_fd },
    Criterion { id: 5, name: "shift invariance", budget: secs(10), fast: true, run: shift_invariance },
    Criterion { id: 6, name: "nngp one step", budget: secs(10), fast: true, run: nngp_one_step },
    Criterion { id: 7, name: "coordinate check", budget: secs(30 * 60), fast: false, run: coordinate_check },
    Criterion { id: 8, name: "damping validity slope", budget: secs(30 * 60), fast: false, run: damping_validity },
    Criterion { id: 9, name: "heuristic damping scale", budget: secs(120), fast: true, run: heuristic_scale },
    Criterion { id: 10, name: "learning-rate transfer", budget: secs(2 * 3600), fast: false, run: lr_transfer },
    Criterion { id: 11, name: "damping transfer", budget: secs(3600), fast: false, run: damping_transfer },
    Criterion { id: 12, name: "curvature stability", budget: secs(600), fast: false, run: curvature_stability },
    Criterion { id: 13, name: "idx ingestion", budget: secs(1), fast: true, run: idx_ingestion },
];

pub fn criterion(id: u8) -> Option<&'static Criterion> {
    CRITERIA.iter().find(|c| c.id == id)
}

/// Runs one criterion; errors and blown time budgets count as failures.
pub fn run_criterion(c: &Criterion, opts: &VerifyOptions) -> Check {
    let start = Instant::now();
    let result = (c.run)(opts);
    let elapsed = start.elapsed();
    let (mut passed, mut detail) = match result {
        Ok(r) => r,
        Err(e) => (false, format!("error: {e}")),
    };
    if elapsed > c.budget {
        passed = false;
        detail = format!("over the {:.0}s budget; {detail}", c.budget.as_secs_f64());
    }
    Check { id: c.id, name: c.name, passed, detail, elapsed }
}

pub fn run_by_id(id: u8, opts: &VerifyOptions) -> Option<Check> {
    criterion(id).map(|c| run_criterion(c, opts))
}

// ---------------------------------------------------------------------------
// Shared helpers

fn frob(a: &Array2<f64>) -> f64 {
    a.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn rel(a: &Array2<f64>, b: &Array2<f64>) -> f64 {
    frob(&(a - b)) / frob(b).max(f64::MIN_POSITIVE)
}

fn gaussian(rows: usize, cols: usize, seed: u64) -> Array2<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Array2::from_shape_fn((rows, cols), |_| StandardNormal.sample(&mut rng))
}

fn one_hot(classes: usize, n: usize, seed: u64) -> Array2<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut y = Array2::zeros((classes, n));
    for i in 0..n {
        let z: f64 = StandardNormal.sample(&mut rng);
        let k = ((z.abs() * 1e6) as usize + i) % classes;
        y[[k, i]] = 1.0;
    }
    y
}

/// A μP network with a unit-scale output layer, one batch and its tape.
struct Problem {
    weights: Weights<f64>,
    tape: Tape<f64>,
    mat: crate::param::Materialized,
    x: Array2<f64>,
    y: Array2<f64>,
}

struct ProblemSpec {
    family: Family,
    loss: LossKind,
    activation: Activation,
    width: usize,
    depth: usize,
    n: usize,
    d_in: usize,
    classes: usize,
    seed: u64,
}

fn problem(p: &ProblemSpec) -> Result<Problem, VerifyError> {
    let arch = Architecture { d_in: p.d_in, width: p.width, depth: p.depth, out_dim: p.classes, activation: p.activation, bias: false };
    let t = mup_table(p.family, &FamilyExps::default(), p.depth)?;
    let mat = materialize(&t.param.with_base(1.0, 0.5), &t.damping, 1.0, Widths { d_in: p.d_in, hidden: p.width })?;
    let mut init = mat.clone();
    // A unit-order output layer keeps the hidden-layer signals well away from zero.
    init.init_std[p.depth - 1] = 1.0 / (p.width as f64).sqrt();
    let weights = init_weights::<f64>(&arch, &init, false, p.seed)?;
    let x = gaussian(p.d_in, p.n, p.seed + 1);
    let y = match p.loss {
        LossKind::Mse => gaussian(p.classes, p.n, p.seed + 2),
        LossKind::CrossEntropy => one_hot(p.classes, p.n, p.seed + 2),
    };
    let mut tape = forward(&weights, x.view())?;
    tape.backward(&weights, p.loss, &y, true)?;
    Ok(Problem { weights, tape, mat, x, y })
}

fn synthetic(n_train: usize, n_probe: usize, classes: usize, target: TargetKind) -> Result<Dataset, VerifyError> {
    let spec = DatasetSpec { n_train, n_probe, classes, target, ..DatasetSpec::default() };
    Ok(make_synthetic(&spec, spec.teacher_seed)?)
}

fn config(family: Family, scheme: Scheme, strategy: DampingStrategy, width: usize) -> Config {
    let mut c = Config::default();
    c.optimizer.family = family;
    c.parameterization.scheme = scheme;
    c.damping = DampingSpec { strategy, rho_prime: 1.0, normalized: false };
    c.architecture.width = width;
    c.architecture.depth = 3;
    c.architecture.activation = Activation::Relu;
    c
}

fn scratch_dir(opts: &VerifyOptions) -> Result<(PathBuf, Option<tempfile::TempDir>), VerifyError> {
    match &opts.out {
        Some(p) => {
            std::fs::create_dir_all(p)?;
            Ok((p.clone(), None))
        }
        None => {
            let t = tempfile::tempdir()?;
            Ok((t.path().to_path_buf(), Some(t)))
        }
    }
}

/// Runs `cells` into `csv` (resuming) and returns the CSV rows grouped by config hash.
pub fn sweep_rows(cells: &[Config], data: &Dataset, csv: &Path, jobs: usize) -> Result<HashMap<String, Vec<CsvRow>>, VerifyError> {
    let sink = CsvSink::open(csv)?;
    let outcome = run_sweep_with(cells, &sink, jobs, &|c: &Config| run_training(c, data))?;
    if let Some((h, e)) = outcome.failures.first() {
        return Err(VerifyError::Missing(format!("run {h} failed: {e}")));
    }
    drop(sink);
    let mut by_hash: HashMap<String, Vec<CsvRow>> = HashMap::new();
    for r in read_csv(csv)? {
        by_hash.entry(r.config_hash.clone()).or_default().push(r);
    }
    Ok(by_hash)
}

fn value(rows: &[CsvRow], step: usize, layer: &str, metric: Metric) -> Option<f64> {
    rows.iter().find(|r| r.step == step && r.layer == layer && r.metric == metric.name()).map(|r| r.value)
}

fn fmt_slopes(s: &[f64]) -> String {
    let parts: Vec<String> = s.iter().map(|v| format!("{v:+.2}")).collect();
    format!("[{}]", parts.join(", "))
}

fn fmt_sci(s: &[f64]) -> String {
    let parts: Vec<String> = s.iter().map(|v| format!("{v:.2e}")).collect();
    format!("[{}]", parts.join(", "))
}

// ---------------------------------------------------------------------------
// 1

fn golden_tables(_: &VerifyOptions) -> Result<(bool, String), VerifyError> {
    let z = || exp(0, 1);
    let h = exp(1, 2);
    let one = exp(1, 1);
    let m1 = exp(-1, 1);
    let v = |xs: &[Exp]| xs.to_vec();
    let defaults = FamilyExps::default();
    let mut bad = Vec::new();
    let mut expect = |what: &str, got: Vec<Exp>, want: Vec<Exp>| {
        if got != want {
            bad.push(format!("{what}: {got:?} != {want:?}"));
        }
    };

    let kfac = mup_table(Family::Kfac, &defaults, 3)?;
    expect("kfac b", kfac.param.b(), v(&[z(), h, one]));
    expect("kfac c", kfac.param.c(), v(&[z(), z(), z()]));
    match &kfac.damping {
        DampingExps::Kfac { d_a: Some(a), d_b: Some(b) } => {
            expect("kfac d_A", a.clone(), v(&[z(), m1, m1]));
            expect("kfac d_B", b.clone(), v(&[one, one, z()]));
        }
        other => expect(&format!("kfac damping {other:?}"), vec![], vec![one]),
    }

    let shampoo = mup_table(Family::Shampoo, &defaults, 3)?;
    expect("shampoo b", shampoo.param.b(), v(&[z(), h, one]));
    expect("shampoo c", shampoo.param.c(), v(&[exp(-1, 2), z(), h]));
    match &shampoo.damping {
        DampingExps::Shampoo { d_l, d_r } => {
            expect("shampoo d_L", d_l.clone(), v(&[one, z(), m1]));
            expect("shampoo d_R", d_r.clone(), v(&[one, z(), m1]));
        }
        other => expect(&format!("shampoo damping {other:?}"), vec![], vec![one]),
    }

    let sgd = mup_table(Family::Sgd, &defaults, 3)?;
    expect("sgd b", sgd.param.b(), v(&[z(), h, one]));
    expect("sgd c", sgd.param.c(), v(&[m1, z(), one]));

    let foof = mup_table(Family::Foof, &defaults, 3)?;
    expect("foof c", foof.param.c(), v(&[m1, m1, z()]));
    match &foof.damping {
        DampingExps::Kfac { d_a: Some(a), d_b: None } => expect("foof d_A", a.clone(), v(&[z(), m1, m1])),
        other => expect(&format!("foof damping {other:?}"), vec![], vec![one]),
    }

    let gn = mup_table(Family::GaussNewton, &defaults, 3)?;
    expect("gn c", gn.param.c(), v(&[z(), z(), z()]));
    match &gn.damping {
        DampingExps::GaussNewton { d } => expect("gn d", d.clone(), v(&[one, z(), m1])),
        other => expect(&format!("gn damping {other:?}"), vec![], vec![one]),
    }

    expect("sp L=3 b", sp_table(3)?.b(), v(&[z(), h, h]));
    expect("sp L=3 c", sp_table(3)?.c(), v(&[z(), z(), z()]));
    expect("sp L=2 b", sp_table(2)?.b(), v(&[z(), h]));
    expect("sp L=2 c", sp_table(2)?.c(), v(&[z(), z()]));
    expect("sp L=5 b", sp_table(5)?.b(), v(&[z(), h, h, h, h]));
    expect("sp L=5 c", sp_table(5)?.c(), vec![z(); 5]);

    let lazy_kfac = lazy_table(Family::Kfac, &defaults, 3)?;
    expect("lazy kfac b", lazy_kfac.param.b(), v(&[z(), h, h]));
    expect("lazy kfac c", lazy_kfac.param.c(), v(&[z(), z(), z()]));
    expect("lazy sgd c", lazy_table(Family::Sgd, &defaults, 3)?.param.c(), v(&[z(), one, one]));
    expect("lazy shampoo c", lazy_table(Family::Shampoo, &defaults, 3)?.param.c(), v(&[z(), h, h]));

    let zero = FamilyExps { e_a: z(), e_b: z(), ..defaults };
    for depth in 2..=6 {
        let a = mup_table(Family::Kfac, &zero, depth)?.param;
        let b = mup_table(Family::Sgd, &defaults, depth)?.param;
        expect(&format!("kfac(0,0) = sgd at L={depth}"), a.c(), b.c());
        for family in [Family::Sgd, Family::Kfac, Family::Foof, Family::Shampoo, Family::GaussNewton] {
            let b = mup_table(family, &defaults, depth)?.param.b();
            let mut want = vec![h; depth];
            want[0] = z();
            want[depth - 1] = one;
            expect(&format!("{family} b at L={depth}"), b, want);
        }
    }

    let k = mup_table(Family::Kfac, &defaults, 3)?.param;
    let shifted = apply_shift(&k, h);
    expect("shift a", shifted.a(), v(&[h, h, h]));
    expect("shift b", shifted.b(), v(&[exp(-1, 2), z(), h]));
    expect("shift c", shifted.c(), v(&[m1, m1, m1]));
    expect("shift inverse", apply_shift(&shifted, -h).b(), k.b());

    let n = bad.len();
    Ok((n == 0, if n == 0 { "all tables exact".into() } else { bad.join("; ") }))
}

// ---------------------------------------------------------------------------
// 2

fn push_through(_: &VerifyOptions) -> Result<(bool, String), VerifyError> {
    let mut worst: f64 = 0.0;
    for &width in &[16, 64, 256] {
        for loss in [LossKind::Mse, LossKind::CrossEntropy] {
            let p = problem(&ProblemSpec {
                family: Family::Kfac,
                loss,
                activation: Activation::Tanh,
                width,
                depth: 3,
                n: 8,
                d_in: 10,
                classes: 3,
                seed: 11,
            })?;
            let spec = OptimizerSpec::new(Family::Kfac, DampingSpec { strategy: DampingStrategy::RescaledTrace, rho_prime: 0.1, normalized: true });
            let mut opt = Optimizer::<f64>::new(spec, p.mat.clone())?;
            let mut w = p.weights.clone();
            let report = opt.step(&mut w, &p.tape)?;
            for l in 0..3 {
                let r = &report.layers[l];
                let (rho_a, rho_b) = (r.rho_right.unwrap_or(0.0), r.rho_left.unwrap_or(0.0));
                let dual = kfac_push_through(&p.tape, l, 1.0, 1.0, rho_a, rho_b)?;
                // Update of the stored weights implied by the dual direction.
                let m = p.weights.layers[l].multiplier;
                let dual_update = dual * (-p.mat.lr[l] * m);
                let primal_update = &w.layers[l].w - &p.weights.layers[l].w;
                worst = worst.max(rel(&primal_update, &dual_update));
            }
        }
    }
    Ok((worst <= 1e-8, format!("max relative error {worst:.2e} over M in {{16, 64, 256}}, n = 8, mse and ce")))
}

// ---------------------------------------------------------------------------
// 3

fn gauss_newton_dual(_: &VerifyOptions) -> Result<(bool, String), VerifyError> {
    let p = problem(&ProblemSpec {
        family: Family::GaussNewton,
        loss: LossKind::Mse,
        activation: Activation::Tanh,
        width: 32,
        depth: 3,
        n: 8,
        d_in: 10,
        classes: 2,
        seed: 21,
    })?;
    let spec = OptimizerSpec::new(Family::GaussNewton, DampingSpec { strategy: DampingStrategy::FixedExponent, rho_prime: 0.1, normalized: true });
    let (dirs, report) = Optimizer::<f64>::new(spec, p.mat.clone())?.directions(&p.weights, &p.tape)?;
    let mut worst = [0.0f64; 2];
    for l in 0..3 {
        let rho = report.layers[l].rho_right.ok_or_else(|| VerifyError::Missing("gauss-newton damping".into()))?;
        for (i, sample_space) in [false, true].into_iter().enumerate() {
            let explicit = gauss_newton_explicit(&p.tape, l, rho, sample_space)?;
            worst[i] = worst[i].max(rel(&dirs[l].dense(), &explicit));
        }
    }
    let ok = worst.iter().all(|&e| e <= 1e-8);
    Ok((ok, format!("vectorized {:.2e}, sample-space {:.2e} (M = 32, n = 8)", worst[0], worst[1])))
}

// ---------------------------------------------------------------------------
// 4

/// Largest `‖g_fd − g‖_∞ / ‖g_fd‖_∞` over layers, with central differences on
/// the stored weights.
fn finite_difference_error(p: &Problem, loss: LossKind, step: f64) -> Result<f64, VerifyError> {
    let eval = |w: &Weights<f64>| -> Result<f64, VerifyError> { Ok(objective(forward(w, p.x.view())?.output(), &p.y, loss)?) };
    let mut worst: f64 = 0.0;
    let mut w = p.weights.clone();
    for l in 0..w.depth() {
        let g = p.tape.param_grad(&p.weights, l)?;
        let mut fd = Array2::zeros(g.raw_dim());
        for idx in ndarray::indices(g.raw_dim()) {
            let orig = w.layers[l].w[idx];
            w.layers[l].w[idx] = orig + step;
            let plus = eval(&w)?;
            w.layers[l].w[idx] = orig - step;
            let minus = eval(&w)?;
            w.layers[l].w[idx] = orig;
            fd[idx] = (plus - minus) / (2.0 * step);
        }
        let scale = fd.iter().fold(0.0f64, |m, x| m.max(x.abs()));
        let err = (&fd - &g).iter().fold(0.0f64, |m, x| m.max(x.abs()));
        worst = worst.max(err / scale.max(f64::MIN_POSITIVE));
    }
    Ok(worst)
}

fn gradient_fd(_: &VerifyOptions) -> Result<(bool, String), VerifyError> {
    let mut worst: f64 = 0.0;
    let mut cases = 0;
    for activation in [Activation::Relu, Activation::Tanh] {
        for loss in [LossKind::Mse, LossKind::CrossEntropy] {
            for depth in [2, 3] {
                let p = problem(&ProblemSpec { family: Family::Sgd, loss, activation, width: 16, depth, n: 8, d_in: 6, classes: 3, seed: 31 + depth as u64 })?;
                worst = worst.max(finite_difference_error(&p, loss, 1e-5)?);
                cases += 1;
            }
        }
    }
    Ok((worst <= 1e-5, format!("max relative error {worst:.2e} over {cases} cases (relu/tanh, mse/ce, L = 2, 3)")))
}

// ---------------------------------------------------------------------------
// 5

/// Outputs `f_0, …, f_steps` on the training set.
pub fn output_trajectory(config: &Config, data: &Dataset, steps: usize) -> Result<Vec<Array2<f64>>, VerifyError> {
    let setup = resolve(config, data)?;
    let mut w = init_weights::<f64>(&setup.arch, &setup.mat, setup.zero_init_last, config.run.seed)?;
    let mut opt = Optimizer::<f64>::new(config.optimizer_spec()?, setup.mat)?;
    let mut out = Vec::with_capacity(steps + 1);
    for t in 0..=steps {
        let mut tape = forward(&w, data.x_train.view())?;
        out.push(tape.output().clone());
        if t == steps {
            break;
        }
        tape.backward(&w, config.run.loss, &data.y_train, opt.needs_output_signals())?;
        opt.step(&mut w, &tape)?;
    }
    Ok(out)
}

fn shift_invariance(_: &VerifyOptions) -> Result<(bool, String), VerifyError> {
    let data = synthetic(64, 0, 2, TargetKind::Regression)?;
    let cases = [
        (Family::Sgd, DampingStrategy::FixedExponent),
        (Family::Kfac, DampingStrategy::RescaledTrace),
        (Family::Shampoo, DampingStrategy::FixedExponent),
    ];
    let mut parts = Vec::new();
    let mut ok = true;
    for (family, strategy) in cases {
        // A width that is not a power of two, so the shifted multipliers round.
        let mut c = config(family, Scheme::Mup, strategy, 100);
        c.run.probe_steps = Vec::new();
        c.dataset.n_train = 64;
        c.dataset.n_probe = 0;
        c.parameterization.base_lr = 0.25;
        let mut s = c.clone();
        s.parameterization.shift = "1/2".into();
        let a = output_trajectory(&c, &data, 5)?;
        let b = output_trajectory(&s, &data, 5)?;
        let worst = a.iter().zip(&b).map(|(x, y)| rel(y, x)).fold(0.0f64, f64::max);
        let moved = rel(&a[5], &a[0]);
        ok &= worst <= 1e-8 && moved > 1e-3;
        parts.push(format!("{family}/{strategy}: {worst:.1e}"));
    }
    Ok((ok, format!("max relative output difference over 5 steps: {}", parts.join(", "))))
}

// ---------------------------------------------------------------------------
// 6

fn nngp_one_step(_: &VerifyOptions) -> Result<(bool, String), VerifyError> {
    let data = synthetic(64, 32, 2, TargetKind::Regression)?;
    let mut c = config(Family::Kfac, Scheme::Mup, DampingStrategy::RescaledTrace, 64);
    c.parameterization.b_last = Some("inf".into());
    c.dataset.n_train = 64;
    c.dataset.n_probe = 32;

    let setup = resolve(&c, &data)?;
    let init = init_weights::<f64>(&setup.arch, &setup.mat, setup.zero_init_last, 0)?;
    let mut tape = forward(&init, data.x_train.view())?;
    let mut opt = Optimizer::<f64>::new(c.optimizer_spec()?, setup.mat.clone())?;
    tape.backward(&init, LossKind::Mse, &data.y_train, opt.needs_output_signals())?;
    let mut w = init.clone();
    let report = opt.step(&mut w, &tape)?;
    let last = w.depth() - 1;
    let r = &report.layers[last];
    let (rho_a, rho_b) = (r.rho_right.unwrap_or(0.0), r.rho_left.unwrap_or(0.0));
    let mult = w.layers[last].multiplier;
    let eta = setup.mat.lr[last] * mult * mult / (1.0 / data.classes() as f64 + rho_b);
    let reference = nngp_reference(&tape.h[last], &data.y_train, rho_a, eta)?;
    let err = rel(&w.layers[last].effective(), &reference);
    let hidden_same = (0..last).all(|l| w.layers[l].w.iter().zip(init.layers[l].w.iter()).all(|(a, b)| a.to_bits() == b.to_bits()));

    // SGD from the same zero output layer.
    let mut s = c.clone();
    s.optimizer.family = Family::Sgd;
    s.damping.strategy = DampingStrategy::FixedExponent;
    let setup = resolve(&s, &data)?;
    let init = init_weights::<f64>(&setup.arch, &setup.mat, true, 0)?;
    let mut sgd = Optimizer::<f64>::new(s.optimizer_spec()?, setup.mat.clone())?;
    let mut w = init.clone();
    let probe_ref = forward(&init, data.x_probe.view())?;
    let mut dh = Vec::new();
    for _ in 0..2 {
        let mut tape = forward(&w, data.x_train.view())?;
        tape.backward(&w, LossKind::Mse, &data.y_train, false)?;
        sgd.step(&mut w, &tape)?;
        let profile = delta_h_profile(&forward(&w, data.x_probe.view())?, &probe_ref)?;
        dh.push(profile[..last].to_vec());
    }
    let step1_frozen = dh[0].iter().all(|&v| v == 0.0);
    let step2_moves = dh[1].iter().all(|&v| v >= 1e-8);
    let ok = err <= 1e-8 && hidden_same && step1_frozen && step2_moves;
    Ok((
        ok,
        format!(
            "k-fac vs reference {err:.2e}, hidden unchanged: {hidden_same}; sgd hidden coord(dh) step 1 {}, step 2 {}",
            fmt_sci(&dh[0]),
            fmt_sci(&dh[1])
        ),
    ))
}

// ---------------------------------------------------------------------------
// 7 and 8

pub const PROBE_WIDTHS: [usize; 4] = [128, 512, 2048, 8192];

/// Per-layer slopes of `coord(Δh)` at `step`, averaging the coordinate size over seeds.
pub fn coord_slopes(cells: &[Config], rows: &HashMap<String, Vec<CsvRow>>, step: usize) -> Result<Vec<SlopeFit>, VerifyError> {
    let mut per_width: BTreeMap<usize, Vec<Vec<f64>>> = BTreeMap::new();
    for c in cells {
        let r = rows.get(&c.hash()).ok_or_else(|| VerifyError::Missing(format!("no rows for width {}", c.architecture.width)))?;
        if r.first().is_some_and(|x| x.diverged) {
            return Err(VerifyError::Missing(format!("run at width {} seed {} diverged", c.architecture.width, c.run.seed)));
        }
        let layers: Vec<f64> = (1..=c.architecture.depth)
            .map(|l| value(r, step, &l.to_string(), Metric::CoordDh).ok_or_else(|| VerifyError::Missing(format!("coord_dh layer {l}"))))
            .collect::<Result<_, _>>()?;
        per_width.entry(c.architecture.width).or_default().push(layers);
    }
    let depth = cells.first().map_or(0, |c| c.architecture.depth);
    (0..depth)
        .map(|l| {
            let pts: Vec<(f64, f64)> =
                per_width.iter().map(|(&m, seeds)| (m as f64, seeds.iter().map(|s| s[l]).sum::<f64>() / seeds.len() as f64)).collect();
            Ok(slope_fit(&pts)?)
        })
        .collect()
}

pub fn coordcheck_cells(base: &Config, widths: &[usize], seeds: &[u64]) -> Vec<Config> {
    let mut cells = Vec::new();
    for &m in widths {
        for &s in seeds {
            let mut c = base.cell();
            c.architecture.width = m;
            c.run.seed = s;
            cells.push(c);
        }
    }
    cells
}

/// The desk-scale coordinate-check setup: 10 full-batch MSE steps in single
/// precision, probed at step 10.
pub fn coordcheck_base(family: Family, scheme: Scheme, strategy: DampingStrategy, base_lr: f64) -> Config {
    let mut c = config(family, scheme, strategy, 128);
    c.parameterization.base_lr = base_lr;
    c.run.steps = 10;
    c.run.probe_steps = vec![10];
    c.run.report_steps = Some(vec![1, 10]);
    c.run.precision = Precision::F32;
    c
}

fn coordinate_check(opts: &VerifyOptions) -> Result<(bool, String), VerifyError> {
    let data = synthetic(1024, 256, 1, TargetKind::Regression)?;
    let (dir, _guard) = scratch_dir(opts)?;
    let seeds = [0, 1, 2];
    let cases: [(&str, Config); 4] = [
        ("a", coordcheck_base(Family::Kfac, Scheme::Mup, DampingStrategy::RescaledTrace, 0.5)),
        ("b", coordcheck_base(Family::Kfac, Scheme::Mup, DampingStrategy::KfacHeuristic, 0.5)),
        ("c", coordcheck_base(Family::Sgd, Scheme::Sp, DampingStrategy::FixedExponent, 2f64.powi(-10))),
        ("d", coordcheck_base(Family::Shampoo, Scheme::Mup, DampingStrategy::FixedExponent, 0.5)),
    ];
    let mut ok = true;
    let mut parts = Vec::new();
    for (tag, base) in &cases {
        let cells = coordcheck_cells(base, &PROBE_WIDTHS, &seeds);
        let rows = sweep_rows(&cells, &data, &dir.join("coordcheck.csv"), opts.jobs.max(1))?;
        let slopes: Vec<f64> = coord_slopes(&cells, &rows, 10)?.iter().map(|f| f.slope).collect();
        let pass = match *tag {
            "a" => slopes.iter().all(|s| s.abs() <= 0.2),
            "b" => slopes[0] <= -0.5,
            "c" => slopes.iter().any(|s| s.abs() >= 0.3),
            _ => slopes.iter().all(|s| s.abs() <= 0.25),
        };
        ok &= pass;
        parts.push(format!("({tag}) {} {}", fmt_slopes(&slopes), if pass { "ok" } else { "FAIL" }));
    }
    Ok((ok, parts.join("; ")))
}

fn damping_validity(opts: &VerifyOptions) -> Result<(bool, String), VerifyError> {
    let data = synthetic(1024, 256, 1, TargetKind::Regression)?;
    let (dir, _guard) = scratch_dir(opts)?;
    let mut base = coordcheck_base(Family::Kfac, Scheme::Mup, DampingStrategy::FixedExponent, 0.5);
    base.run.steps = 1;
    base.run.probe_steps = Vec::new();
    base.run.report_steps = Some(vec![1]);
    let cells = coordcheck_cells(&base, &PROBE_WIDTHS, &[0]);
    let rows = sweep_rows(&cells, &data, &dir.join("damping_validity.csv"), opts.jobs.max(1))?;
    let mut ok = true;
    let mut parts = Vec::new();
    for (side, rho, lam) in [("A", Metric::RhoA, Metric::LamMeanA), ("B", Metric::RhoB, Metric::LamMeanB)] {
        let mut slopes = Vec::new();
        for l in 1..=base.architecture.depth {
            let layer = l.to_string();
            let pts: Vec<(f64, f64)> = cells
                .iter()
                .filter_map(|c| {
                    let r = rows.get(&c.hash())?;
                    Some((c.architecture.width as f64, value(r, 1, &layer, rho)? / value(r, 1, &layer, lam)?))
                })
                .collect();
            if pts.len() < 2 {
                continue;
            }
            let s = slope_fit(&pts)?.slope;
            ok &= s.abs() <= 0.3;
            slopes.push(s);
        }
        parts.push(format!("rho_{side}/lam_mean_{side} {}", fmt_slopes(&slopes)));
    }
    Ok((ok, parts.join("; ")))
}

// ---------------------------------------------------------------------------
// 9

fn heuristic_scale(opts: &VerifyOptions) -> Result<(bool, String), VerifyError> {
    let data = synthetic(1024, 0, 1, TargetKind::Regression)?;
    let mut base = config(Family::Kfac, Scheme::Mup, DampingStrategy::KfacHeuristic, 512);
    base.run.steps = 1;
    base.run.probe_steps = Vec::new();
    base.run.report_steps = Some(vec![1]);
    base.dataset.n_probe = 0;
    let widths = [512, 1024, 2048];
    let mut rho = Vec::new();
    for &m in &widths {
        let mut c = base.clone();
        c.architecture.width = m;
        let rec = run_training(&c, &data)?;
        let per_layer: Vec<f64> = (1..base.architecture.depth)
            .map(|l| rec.get(1, Scope::Layer(l), Metric::RhoA).ok_or_else(|| VerifyError::Missing("rho_A".into())))
            .collect::<Result<_, _>>()?;
        rho.push(per_layer);
    }
    let _ = opts;
    let mut ratios = Vec::new();
    for i in 0..widths.len() - 1 {
        for l in 0..rho[i].len() {
            ratios.push(rho[i + 1][l] / rho[i][l]);
        }
    }
    let ok = ratios.iter().all(|r| (1.6..=2.4).contains(r));
    Ok((ok, format!("rho_A(2M)/rho_A(M) for hidden-side layers at M = 512, 1024: {}", fmt_slopes(&ratios))))
}

// ---------------------------------------------------------------------------
// 10 and 11

pub const TRANSFER_WIDTHS: [usize; 3] = [256, 1024, 4096];

/// Optimum per width of a one-dimensional sweep; `axis` reads the swept exponent.
fn optima(
    cells: &[Config],
    rows: &HashMap<String, Vec<CsvRow>>,
    axis: impl Fn(&Config) -> f64,
) -> Result<BTreeMap<usize, (f64, f64)>, VerifyError> {
    let mut pts: BTreeMap<usize, Vec<(f64, Option<f64>)>> = BTreeMap::new();
    for c in cells {
        let r = rows.get(&c.hash()).ok_or_else(|| VerifyError::Missing("sweep cell".into()))?;
        let diverged = r.first().is_some_and(|x| x.diverged);
        let score = if diverged { None } else { value(r, c.run.steps, "", Metric::Loss).filter(|v| v.is_finite()) };
        pts.entry(c.architecture.width).or_default().push((axis(c), score));
    }
    let mut out = BTreeMap::new();
    for (m, p) in pts {
        let o = select_optimum(&p, SweepMetric::Loss)?;
        out.insert(m, (o.value, o.score));
    }
    Ok(out)
}

fn transfer_cells(base: &Config, seeds: &[u64], grid: &[i32], set: impl Fn(&mut Config, i32)) -> Vec<Config> {
    let mut cells = Vec::new();
    for &m in &TRANSFER_WIDTHS {
        for &z in grid {
            for &s in seeds {
                let mut c = base.cell();
                c.architecture.width = m;
                c.run.seed = s;
                set(&mut c, z);
                cells.push(c);
            }
        }
    }
    cells
}

fn transfer_base(family: Family, scheme: Scheme, strategy: DampingStrategy) -> Config {
    let mut c = config(family, scheme, strategy, 256);
    c.run.steps = 20;
    c.run.probe_steps = Vec::new();
    c.run.report_steps = Some(Vec::new());
    c.dataset.n_probe = 0;
    c.run.precision = Precision::F32;
    c
}

fn describe(o: &BTreeMap<usize, (f64, f64)>) -> String {
    let parts: Vec<String> = o.iter().map(|(m, (z, s))| format!("M={m}: 2^{z} ({s:.3e})")).collect();
    parts.join(", ")
}

fn spread(o: &BTreeMap<usize, (f64, f64)>) -> f64 {
    let zs: Vec<f64> = o.values().map(|v| v.0).collect();
    zs.iter().cloned().fold(f64::MIN, f64::max) - zs.iter().cloned().fold(f64::MAX, f64::min)
}

fn lr_transfer(opts: &VerifyOptions) -> Result<(bool, String), VerifyError> {
    let data = synthetic(1024, 0, 1, TargetKind::Regression)?;
    let (dir, _guard) = scratch_dir(opts)?;
    let grid: Vec<i32> = (-12..=0).collect();
    let seeds = [0, 1, 2];
    let set_lr = |c: &mut Config, z: i32| c.parameterization.base_lr = 2f64.powi(z);
    let lr_axis = |c: &Config| c.parameterization.base_lr.log2();

    let mup = transfer_cells(&transfer_base(Family::Kfac, Scheme::Mup, DampingStrategy::RescaledTrace), &seeds, &grid, set_lr);
    let rows = sweep_rows(&mup, &data, &dir.join("lr_transfer.csv"), opts.jobs.max(1))?;
    let mup_opt = optima(&mup, &rows, lr_axis)?;

    let sp = transfer_cells(&transfer_base(Family::Sgd, Scheme::Sp, DampingStrategy::FixedExponent), &seeds, &grid, set_lr);
    let rows = sweep_rows(&sp, &data, &dir.join("lr_transfer.csv"), opts.jobs.max(1))?;
    let sp_opt = optima(&sp, &rows, lr_axis)?;

    let narrow = TRANSFER_WIDTHS[0];
    let wide = TRANSFER_WIDTHS[TRANSFER_WIDTHS.len() - 1];
    let mup_stable = spread(&mup_opt) <= 2.0;
    let wider_better = mup_opt[&wide].1 <= mup_opt[&narrow].1;
    let sp_shift = sp_opt[&narrow].0 - sp_opt[&wide].0;
    let ok = mup_stable && wider_better && sp_shift >= 2.0;
    Ok((
        ok,
        format!(
            "mup k-fac optima {} (spread {} steps, wider better: {wider_better}); sp sgd optima {} (shift {} steps)",
            describe(&mup_opt),
            spread(&mup_opt),
            describe(&sp_opt),
            sp_shift
        ),
    ))
}

fn damping_transfer(opts: &VerifyOptions) -> Result<(bool, String), VerifyError> {
    let data = synthetic(1024, 0, 1, TargetKind::Regression)?;
    let (dir, _guard) = scratch_dir(opts)?;
    let grid: Vec<i32> = (-6..=6).collect();
    let seeds = [0];
    let set_rho = |c: &mut Config, z: i32| c.damping.rho_prime = 2f64.powi(z);
    let rho_axis = |c: &Config| c.damping.rho_prime.log2();

    let rescaled = transfer_cells(&transfer_base(Family::Kfac, Scheme::Mup, DampingStrategy::RescaledTrace), &seeds, &grid, set_rho);
    let rows = sweep_rows(&rescaled, &data, &dir.join("damping_transfer.csv"), opts.jobs.max(1))?;
    let r_opt = optima(&rescaled, &rows, rho_axis)?;

    let heuristic = transfer_cells(&transfer_base(Family::Kfac, Scheme::Mup, DampingStrategy::KfacHeuristic), &seeds, &grid, set_rho);
    let rows = sweep_rows(&heuristic, &data, &dir.join("damping_transfer.csv"), opts.jobs.max(1))?;
    let h_opt = optima(&heuristic, &rows, rho_axis)?;

    let ok = spread(&r_opt) <= 2.0 && spread(&h_opt) >= 2.0;
    Ok((
        ok,
        format!(
            "rescaled optima {} (spread {}); heuristic optima {} (spread {})",
            describe(&r_opt),
            spread(&r_opt),
            describe(&h_opt),
            spread(&h_opt)
        ),
    ))
}

// ---------------------------------------------------------------------------
// 12

fn curvature_stability(_: &VerifyOptions) -> Result<(bool, String), VerifyError> {
    let data = synthetic(1024, 0, 1, TargetKind::Regression)?;
    let steps = 50;
    let mut base = config(Family::Kfac, Scheme::Mup, DampingStrategy::RescaledTrace, 512);
    base.run.steps = steps;
    base.run.probe_steps = Vec::new();
    base.run.report_steps = Some(vec![1, steps]);
    base.dataset.n_probe = 0;
    base.optimizer.accumulation = AccumulationMode::None;
    base.run.precision = Precision::F64;
    let widths = [512, 2048];
    // lam[(width, metric, layer)] = (step 1, step T)
    let mut lam: BTreeMap<(usize, Metric, usize), (f64, f64)> = BTreeMap::new();
    for &m in &widths {
        let mut c = base.clone();
        c.architecture.width = m;
        let rec = run_training(&c, &data)?;
        if rec.diverged {
            return Ok((false, format!("run at M = {m} diverged")));
        }
        for metric in [Metric::LamMeanA, Metric::LamMeanB] {
            for l in 1..=base.architecture.depth {
                let a = rec.get(1, Scope::Layer(l), metric);
                let b = rec.get(steps, Scope::Layer(l), metric);
                if let (Some(a), Some(b)) = (a, b) {
                    lam.insert((m, metric, l), (a, b));
                }
            }
        }
    }
    let mut worst_drift: f64 = 1.0;
    let mut worst_cross: f64 = 1.0;
    let sym = |r: f64| if r >= 1.0 { r } else { 1.0 / r };
    for (&(m, metric, l), &(a, b)) in &lam {
        worst_drift = worst_drift.max(sym(b / a));
        if m == widths[0] {
            if let Some(&(wa, wb)) = lam.get(&(widths[1], metric, l)) {
                worst_cross = worst_cross.max(sym((wb / b) / (wa / a)));
            }
        }
    }
    let ok = !lam.is_empty() && worst_drift <= 4.0 && worst_cross <= 2.0;
    Ok((ok, format!("worst drift from step 1: {worst_drift:.2}x; worst change of cross-width ratio: {worst_cross:.2}x")))
}

// ---------------------------------------------------------------------------
// 13

fn idx_ingestion(_: &VerifyOptions) -> Result<(bool, String), VerifyError> {
    let dir = tempfile::tempdir()?;
    let (images, labels) = (dir.path().join("images.idx3"), dir.path().join("labels.idx1"));
    let n = 1500;
    let (rows, cols) = (4, 3);
    let pixels: Vec<u8> = (0..n * rows * cols).map(|i| ((i * 37 + 11) % 256) as u8).collect();
    let label_bytes: Vec<u8> = (0..n).map(|i| ((i * 7) % 10) as u8).collect();
    write_idx(&images, &labels, rows, cols, &pixels, &label_bytes)?;

    let all = load_idx(&images, &labels, None)?;
    let round_trip = all.len() == n
        && all.rows == rows
        && all.cols == cols
        && all.labels == label_bytes
        && all.images.iter().zip(&pixels).all(|(&v, &p)| (v * 255.0).round() as u8 == p && v == p as f64 / 255.0);

    let mut bytes = std::fs::read(&images)?;
    bytes[3] = 0x02;
    let bad = dir.path().join("bad.idx");
    std::fs::write(&bad, &bytes)?;
    let rejects = matches!(load_idx(&bad, &labels, None), Err(DataError::BadMagic { found: 0x0802, .. }));

    let first = load_idx(&images, &labels, Some(1024))?;
    let truncation = first.len() == 1024 && first.images.nrows() == 1024 && first.labels[..] == label_bytes[..1024];

    let ok = round_trip && rejects && truncation;
    Ok((ok, format!("round trip: {round_trip}, bad magic rejected: {rejects}, first-1024 truncation: {truncation}")))
}
