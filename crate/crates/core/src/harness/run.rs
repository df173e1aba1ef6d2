//! A single training run and its record.

use super::config::{BLast, Config, Precision};
use super::data::{Dataset, TargetKind};
use super::HarnessError;
use crate::diagnostics::{delta_h_profile, relative_weight_distance};
use crate::linalg::LinalgError;
use crate::network::{forward, init_weights, loss_eval, Architecture, LossKind, Tape, Weights};
use crate::optim::{OptimError, Optimizer, StepReport};
use crate::param::{apply_shift, materialize, table_for, Materialized, Widths};
use crate::scalar::Real;
use ndarray::{Array2, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::collections::BTreeSet;
use std::fmt;
use std::time::Instant;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Metric {
    Loss,
    Acc,
    CoordDh,
    CoordDwh,
    RhoA,
    RhoB,
    LamMeanA,
    LamMeanB,
    LamMax,
    RelWdist,
    NngpDist,
}

impl Metric {
    pub const ALL: [Metric; 11] = [
        Metric::Loss,
        Metric::Acc,
        Metric::CoordDh,
        Metric::CoordDwh,
        Metric::RhoA,
        Metric::RhoB,
        Metric::LamMeanA,
        Metric::LamMeanB,
        Metric::LamMax,
        Metric::RelWdist,
        Metric::NngpDist,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Metric::Loss => "loss",
            Metric::Acc => "acc",
            Metric::CoordDh => "coord_dh",
            Metric::CoordDwh => "coord_dwh",
            Metric::RhoA => "rho_A",
            Metric::RhoB => "rho_B",
            Metric::LamMeanA => "lam_mean_A",
            Metric::LamMeanB => "lam_mean_B",
            Metric::LamMax => "lam_max",
            Metric::RelWdist => "rel_wdist",
            Metric::NngpDist => "nngp_dist",
        }
    }

    pub fn parse(s: &str) -> Option<Metric> {
        Metric::ALL.into_iter().find(|m| m.name() == s)
    }
}

impl fmt::Display for Metric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// What a metric row refers to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Scope {
    /// Whole network on the training set.
    Train,
    /// Whole network on the held-out probe set.
    Probe,
    /// Layer `l`, counted from 1.
    Layer(usize),
}

impl Scope {
    pub fn label(self) -> String {
        match self {
            Scope::Train => String::new(),
            Scope::Probe => "probe".into(),
            Scope::Layer(l) => l.to_string(),
        }
    }

    pub fn parse(s: &str) -> Option<Scope> {
        match s {
            "" => Some(Scope::Train),
            "probe" => Some(Scope::Probe),
            other => other.parse().ok().map(Scope::Layer),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricRow {
    pub step: usize,
    pub scope: Scope,
    pub metric: Metric,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunRecord {
    pub run_id: String,
    pub config_hash: String,
    pub config: Config,
    pub rows: Vec<MetricRow>,
    pub diverged: bool,
    /// Number of optimizer steps completed.
    pub steps_done: usize,
    pub wall_time: f64,
}

impl RunRecord {
    pub fn get(&self, step: usize, scope: Scope, metric: Metric) -> Option<f64> {
        self.rows.iter().find(|r| r.step == step && r.scope == scope && r.metric == metric).map(|r| r.value)
    }

    /// Last recorded value of a metric.
    pub fn last(&self, scope: Scope, metric: Metric) -> Option<f64> {
        self.rows.iter().filter(|r| r.scope == scope && r.metric == metric).max_by_key(|r| r.step).map(|r| r.value)
    }

    pub fn final_loss(&self) -> Option<f64> {
        self.last(Scope::Train, Metric::Loss)
    }
}

/// Everything needed to run, resolved from a config against a dataset.
#[derive(Debug, Clone)]
pub struct Setup {
    pub arch: Architecture,
    pub mat: Materialized,
    pub zero_init_last: bool,
}

pub fn resolve(config: &Config, data: &Dataset) -> Result<Setup, HarnessError> {
    let a = &config.architecture;
    let arch = Architecture {
        d_in: data.d_in(),
        width: a.width,
        depth: a.depth,
        out_dim: data.classes(),
        activation: a.activation,
        bias: a.bias,
    };
    arch.validate()?;
    if config.run.loss == LossKind::CrossEntropy && data.target != TargetKind::OneHot {
        return Err(HarnessError::Mismatch("cross-entropy needs one-hot targets".into()));
    }
    let table = table_for(config.parameterization.scheme, config.optimizer.family, &config.family_exps()?, a.depth)?;
    let mut param = table.param;
    let mut zero_init_last = config.run.zero_init_last;
    match config.b_last()? {
        Some(BLast::Finite(b)) => param.layers[a.depth - 1].b = b,
        Some(BLast::Infinite) => zero_init_last = true,
        None => {}
    }
    let param = apply_shift(&param, config.shift()?).with_base(config.parameterization.base_init_std, config.parameterization.base_lr);
    let mat = materialize(&param, &table.damping, config.damping.rho_prime, Widths { d_in: arch.d_in, hidden: arch.width })?;
    Ok(Setup { arch, mat, zero_init_last })
}

/// Rows for one optimizer report (layers counted from 1).
pub fn report_rows(step: usize, report: &StepReport) -> Vec<MetricRow> {
    let mut rows = Vec::new();
    for (l, r) in report.layers.iter().enumerate() {
        let scope = Scope::Layer(l + 1);
        let mut push = |metric, value: Option<f64>| {
            if let Some(value) = value {
                rows.push(MetricRow { step, scope, metric, value });
            }
        };
        push(Metric::CoordDwh, Some(r.coord_dwh));
        push(Metric::RhoA, r.rho_right);
        push(Metric::RhoB, r.rho_left);
        push(Metric::LamMeanA, r.right.map(|s| s.lam_mean));
        push(Metric::LamMeanB, r.left.map(|s| s.lam_mean));
        push(Metric::LamMax, r.right.or(r.left).map(|s| s.lam_max));
    }
    rows
}

pub fn accuracy<T: Real>(f: &Array2<T>, y: &Array2<T>) -> f64 {
    let argmax = |c: ndarray::ArrayView1<T>| c.iter().enumerate().fold(0, |b, (k, &v)| if v > c[b] { k } else { b });
    let hits = f.columns().into_iter().zip(y.columns()).filter(|(a, b)| argmax(*a) == argmax(*b)).count();
    hits as f64 / f.ncols().max(1) as f64
}

fn is_divergence(e: &OptimError) -> bool {
    matches!(
        e,
        OptimError::Linalg { source: LinalgError::NonFinite | LinalgError::Singular { .. } | LinalgError::Decomposition(_) | LinalgError::NotSymmetric(_), .. }
    )
}

fn weights_finite<T: Real>(w: &Weights<T>) -> bool {
    w.layers.iter().all(|l| l.w.iter().all(|x| x.is_finite()))
}

/// Hooks for experiments that need more than the standard rows.
pub trait RunObserver<T> {
    /// Whether `after_step` needs the weights from before the step. Keeping
    /// them costs a full copy per step.
    fn wants_before(&self) -> bool {
        false
    }

    /// Called after every optimizer step.
    fn after_step(&mut self, _step: usize, _before: Option<&Weights<T>>, _after: &Weights<T>, _tape: &Tape<T>, _report: &StepReport) -> Vec<MetricRow> {
        Vec::new()
    }
}

struct NoObserver;
impl<T> RunObserver<T> for NoObserver {}

pub fn run_training(config: &Config, data: &Dataset) -> Result<RunRecord, HarnessError> {
    match config.run.precision {
        Precision::F64 => run_training_with::<f64>(config, data, &mut NoObserver),
        Precision::F32 => run_training_with::<f32>(config, data, &mut NoObserver),
    }
}

struct Batches {
    n: usize,
    size: usize,
    seed: u64,
    order: Vec<usize>,
    epoch: u64,
    pos: usize,
}

impl Batches {
    fn next(&mut self) -> Option<Vec<usize>> {
        if self.size >= self.n {
            return None;
        }
        if self.pos + self.size > self.n || self.order.is_empty() {
            self.order = (0..self.n).collect();
            self.order.shuffle(&mut ChaCha8Rng::seed_from_u64(self.seed ^ (self.epoch << 32)));
            self.epoch += 1;
            self.pos = 0;
        }
        let idx = self.order[self.pos..self.pos + self.size].to_vec();
        self.pos += self.size;
        Some(idx)
    }
}

pub fn run_training_with<T: Real>(config: &Config, data: &Dataset, observer: &mut dyn RunObserver<T>) -> Result<RunRecord, HarnessError> {
    let start = Instant::now();
    let setup = resolve(config, data)?;
    let spec = config.optimizer_spec()?;
    let run = &config.run;
    let cast = |a: &Array2<f64>| a.mapv(T::lit);
    let (x, y) = (cast(&data.x_train), cast(&data.y_train));
    let (xp, yp) = (cast(&data.x_probe), cast(&data.y_probe));
    let classify = data.target == TargetKind::OneHot;

    let init = init_weights::<T>(&setup.arch, &setup.mat, setup.zero_init_last, run.seed)?;
    let mut w = init.clone();
    let mut opt = Optimizer::<T>::new(spec, setup.mat.clone())?;
    let probes: BTreeSet<usize> = run.probe_steps.iter().copied().collect();
    let reports: BTreeSet<usize> = match &run.report_steps {
        Some(s) => s.iter().copied().collect(),
        None => probes.iter().copied().chain([1, run.steps]).collect(),
    };
    let probe_ref = if probes.is_empty() || xp.ncols() == 0 { None } else { Some(forward(&init, xp.view())?) };

    let mut rows = Vec::new();
    let mut diverged = false;
    let mut steps_done = 0;
    let mut batches = Batches { n: x.ncols(), size: run.batch_size.unwrap_or(x.ncols()), seed: run.seed, order: Vec::new(), epoch: 0, pos: 0 };

    let probe = |w: &Weights<T>, step: usize, rows: &mut Vec<MetricRow>| -> Result<(), HarnessError> {
        if let (Some(reference), true) = (&probe_ref, probes.contains(&step)) {
            let now = forward(w, xp.view())?;
            for (l, v) in delta_h_profile(&now, reference)?.into_iter().enumerate() {
                rows.push(MetricRow { step, scope: Scope::Layer(l + 1), metric: Metric::CoordDh, value: v });
            }
            for (l, v) in relative_weight_distance(w, &init)?.into_iter().enumerate() {
                if let Some(v) = v {
                    rows.push(MetricRow { step, scope: Scope::Layer(l + 1), metric: Metric::RelWdist, value: v });
                }
            }
        }
        Ok(())
    };
    probe(&w, 0, &mut rows)?;

    for t in 0..run.steps {
        let (tape, loss) = match batches.next() {
            None => {
                let mut tape = forward(&w, x.view())?;
                tape.backward(&w, run.loss, &y, opt.needs_output_signals())?;
                let l = tape.backward_ref()?.loss.to_f64_lossy();
                if classify {
                    rows.push(MetricRow { step: t, scope: Scope::Train, metric: Metric::Acc, value: accuracy(tape.output(), &y) });
                }
                (tape, l)
            }
            Some(idx) => {
                let full = forward(&w, x.view())?;
                let l = loss_eval(full.output(), &y, run.loss)?.to_f64_lossy();
                if classify {
                    rows.push(MetricRow { step: t, scope: Scope::Train, metric: Metric::Acc, value: accuracy(full.output(), &y) });
                }
                let xb = x.select(Axis(1), &idx);
                let yb = y.select(Axis(1), &idx);
                let mut tape = forward(&w, xb.view())?;
                tape.backward(&w, run.loss, &yb, opt.needs_output_signals())?;
                (tape, l)
            }
        };
        rows.push(MetricRow { step: t, scope: Scope::Train, metric: Metric::Loss, value: loss });
        if !loss.is_finite() {
            diverged = true;
            break;
        }
        let before = observer.wants_before().then(|| w.clone());
        let report = match opt.step(&mut w, &tape) {
            Ok(r) => r,
            Err(e) if is_divergence(&e) => {
                diverged = true;
                break;
            }
            Err(e) => return Err(e.into()),
        };
        steps_done = t + 1;
        if !weights_finite(&w) {
            diverged = true;
            break;
        }
        if reports.contains(&(t + 1)) {
            rows.extend(report_rows(t + 1, &report));
        }
        rows.extend(observer.after_step(t + 1, before.as_ref(), &w, &tape, &report));
        probe(&w, t + 1, &mut rows)?;
    }

    if !diverged {
        let f = forward(&w, x.view())?;
        let l = loss_eval(f.output(), &y, run.loss)?.to_f64_lossy();
        rows.push(MetricRow { step: run.steps, scope: Scope::Train, metric: Metric::Loss, value: l });
        if !l.is_finite() {
            diverged = true;
        }
        if classify {
            rows.push(MetricRow { step: run.steps, scope: Scope::Train, metric: Metric::Acc, value: accuracy(f.output(), &y) });
        }
        if xp.ncols() > 0 && !diverged {
            let fp = forward(&w, xp.view())?;
            let lp = loss_eval(fp.output(), &yp, run.loss)?.to_f64_lossy();
            rows.push(MetricRow { step: run.steps, scope: Scope::Probe, metric: Metric::Loss, value: lp });
            if classify {
                rows.push(MetricRow { step: run.steps, scope: Scope::Probe, metric: Metric::Acc, value: accuracy(fp.output(), &yp) });
            }
        }
    }

    let hash = config.hash();
    Ok(RunRecord {
        run_id: hash[..12].to_string(),
        config_hash: hash,
        config: config.cell(),
        rows,
        diverged,
        steps_done,
        wall_time: start.elapsed().as_secs_f64(),
    })
}
