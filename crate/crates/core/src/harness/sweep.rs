//! Sweeps: grid expansion, parallel execution, CSV persistence and optimum
//! selection.

use super::config::{exact_log2, Config, SweepMetric};
use super::data::Dataset;
use super::run::{run_training, run_training_with, Metric, MetricRow, RunObserver, RunRecord, Scope};
use super::HarnessError;
use crate::diagnostics::nngp_reference;
use crate::network::{Tape, Weights};
use crate::optim::StepReport;
use crate::param::{exp_to_f64, Family};
use crate::scalar::Real;
use ndarray::Array2;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, HashSet};
use std::fs::{File, OpenOptions};
use std::path::{Path, PathBuf};
use std::sync::Mutex;

pub const CSV_HEADER: [&str; 15] = [
    "run_id",
    "config_hash",
    "family",
    "param_scheme",
    "damping_strategy",
    "width",
    "layer",
    "step",
    "metric",
    "value",
    "lr_exp",
    "rho_prime",
    "b_L",
    "seed",
    "diverged",
];

/// One line of the results CSV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CsvRow {
    pub run_id: String,
    pub config_hash: String,
    pub family: String,
    pub param_scheme: String,
    pub damping_strategy: String,
    pub width: usize,
    pub layer: String,
    pub step: usize,
    pub metric: String,
    pub value: f64,
    pub lr_exp: Option<i32>,
    pub rho_prime: f64,
    #[serde(rename = "b_L")]
    pub b_l: String,
    pub seed: u64,
    pub diverged: bool,
}

pub fn csv_rows(record: &RunRecord) -> Vec<CsvRow> {
    let c = &record.config;
    let base = |r: &MetricRow| CsvRow {
        run_id: record.run_id.clone(),
        config_hash: record.config_hash.clone(),
        family: c.optimizer.family.to_string(),
        param_scheme: c.parameterization.scheme.to_string(),
        damping_strategy: c.damping.strategy.to_string(),
        width: c.architecture.width,
        layer: r.scope.label(),
        step: r.step,
        metric: r.metric.name().to_string(),
        value: r.value,
        lr_exp: c.lr_exp(),
        rho_prime: c.damping.rho_prime,
        b_l: c.b_last_label(),
        seed: c.run.seed,
        diverged: record.diverged,
    };
    if record.rows.is_empty() {
        return vec![base(&MetricRow { step: 0, scope: Scope::Train, metric: Metric::Loss, value: f64::NAN })];
    }
    record.rows.iter().map(base).collect()
}

/// Append-only results file. Rows of one run are written together under a
/// lock, so concurrent workers never interleave.
pub struct CsvSink {
    path: PathBuf,
    writer: Mutex<csv::Writer<File>>,
    done: HashSet<String>,
}

impl CsvSink {
    pub fn open(path: &Path) -> Result<Self, HarnessError> {
        let io = |source| HarnessError::Io { path: path.to_path_buf(), source };
        let mut done = HashSet::new();
        let fresh = !path.exists() || std::fs::metadata(path).map_err(io)?.len() == 0;
        if !fresh {
            let mut reader = csv::Reader::from_path(path)?;
            let header: Vec<String> = reader.headers()?.iter().map(str::to_string).collect();
            if header != CSV_HEADER {
                return Err(HarnessError::Mismatch(format!("{} has header {:?}", path.display(), header)));
            }
            for row in reader.deserialize::<CsvRow>() {
                done.insert(row?.config_hash);
            }
        }
        if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            std::fs::create_dir_all(parent).map_err(io)?;
        }
        let file = OpenOptions::new().create(true).append(true).open(path).map_err(io)?;
        let mut writer = csv::WriterBuilder::new().has_headers(false).from_writer(file);
        if fresh {
            writer.write_record(CSV_HEADER)?;
            writer.flush().map_err(io)?;
        }
        Ok(CsvSink { path: path.to_path_buf(), writer: Mutex::new(writer), done })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn contains(&self, hash: &str) -> bool {
        self.done.contains(hash)
    }

    pub fn write(&self, record: &RunRecord) -> Result<(), HarnessError> {
        let mut w = self.writer.lock().expect("csv writer lock");
        for row in csv_rows(record) {
            w.serialize(row)?;
        }
        w.flush().map_err(|source| HarnessError::Io { path: self.path.clone(), source })
    }
}

pub fn read_csv(path: &Path) -> Result<Vec<CsvRow>, HarnessError> {
    let mut reader = csv::Reader::from_path(path)?;
    reader.deserialize().map(|r| r.map_err(HarnessError::from)).collect()
}

/// Cross product of sweep axes over a base config.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepGrid {
    pub base: Config,
    pub widths: Vec<usize>,
    pub lr_exps: Vec<i32>,
    pub rho_exps: Vec<i32>,
    pub b_last: Vec<String>,
    pub seeds: Vec<u64>,
    pub families: Vec<Family>,
}

impl SweepGrid {
    pub fn from_config(config: &Config) -> Self {
        let s = config.sweep.clone().unwrap_or_default();
        SweepGrid {
            base: config.cell(),
            widths: s.widths,
            lr_exps: s.lr_exps,
            rho_exps: s.rho_exps,
            b_last: s.b_last,
            seeds: s.seeds,
            families: s.families,
        }
    }

    /// Every cell, in a fixed order. An empty axis keeps the base value.
    pub fn cells(&self) -> Vec<Config> {
        fn axis<T: Clone>(v: &[T]) -> Vec<Option<T>> {
            if v.is_empty() {
                vec![None]
            } else {
                v.iter().cloned().map(Some).collect()
            }
        }
        let mut out = Vec::new();
        for fam in axis(&self.families) {
            for w in axis(&self.widths) {
                for b in axis(&self.b_last) {
                    for rho in axis(&self.rho_exps) {
                        for lr in axis(&self.lr_exps) {
                            for seed in axis(&self.seeds) {
                                let mut c = self.base.clone();
                                if let Some(f) = fam {
                                    c.optimizer.family = f;
                                }
                                if let Some(w) = w {
                                    c.architecture.width = w;
                                }
                                if let Some(b) = b.clone() {
                                    c.parameterization.b_last = Some(b);
                                }
                                if let Some(z) = rho {
                                    c.damping.rho_prime = 2f64.powi(z);
                                }
                                if let Some(z) = lr {
                                    c.parameterization.base_lr = 2f64.powi(z);
                                }
                                if let Some(s) = seed {
                                    c.run.seed = s;
                                }
                                out.push(c);
                            }
                        }
                    }
                }
            }
        }
        out
    }
}

#[derive(Debug, Default)]
pub struct SweepOutcome {
    pub records: Vec<RunRecord>,
    /// Hashes of cells already present in the CSV.
    pub skipped: Vec<String>,
    /// Cells that failed with an error, with the message. The sweep continues past them.
    pub failures: Vec<(String, String)>,
}

pub type Runner<'a> = dyn Fn(&Config) -> Result<RunRecord, HarnessError> + Sync + 'a;

/// Runs every cell not already in the sink on `jobs` worker threads.
pub fn run_sweep_with(cells: &[Config], sink: &CsvSink, jobs: usize, runner: &Runner<'_>) -> Result<SweepOutcome, HarnessError> {
    let pool = rayon::ThreadPoolBuilder::new().num_threads(jobs.max(1)).build().map_err(|e| HarnessError::Mismatch(e.to_string()))?;
    let mut seen = HashSet::new();
    let mut todo = Vec::new();
    let mut outcome = SweepOutcome::default();
    for c in cells {
        let h = c.hash();
        if sink.contains(&h) {
            outcome.skipped.push(h);
        } else if seen.insert(h) {
            todo.push(c);
        }
    }
    let results: Vec<(String, Result<RunRecord, HarnessError>)> = pool.install(|| {
        todo.par_iter()
            .map(|c| {
                let r = runner(c).and_then(|rec| {
                    sink.write(&rec)?;
                    Ok(rec)
                });
                (c.hash(), r)
            })
            .collect()
    });
    for (h, r) in results {
        match r {
            Ok(rec) => outcome.records.push(rec),
            Err(e) => outcome.failures.push((h, e.to_string())),
        }
    }
    Ok(outcome)
}

pub fn run_sweep(grid: &SweepGrid, data: &Dataset, sink: &CsvSink, jobs: usize) -> Result<SweepOutcome, HarnessError> {
    run_sweep_with(&grid.cells(), sink, jobs, &|c: &Config| run_training(c, data))
}

/// Final outcome of one run, as needed for optimum selection.
#[derive(Debug, Clone, PartialEq)]
pub struct RunSummary {
    pub config_hash: String,
    pub family: String,
    pub param_scheme: String,
    pub damping_strategy: String,
    pub width: usize,
    pub lr_exp: Option<i32>,
    pub rho_prime: f64,
    pub b_l: String,
    pub seed: u64,
    pub diverged: bool,
    pub final_loss: Option<f64>,
    pub final_acc: Option<f64>,
}

impl RunSummary {
    pub fn from_record(r: &RunRecord) -> Self {
        let c = &r.config;
        RunSummary {
            config_hash: r.config_hash.clone(),
            family: c.optimizer.family.to_string(),
            param_scheme: c.parameterization.scheme.to_string(),
            damping_strategy: c.damping.strategy.to_string(),
            width: c.architecture.width,
            lr_exp: c.lr_exp(),
            rho_prime: c.damping.rho_prime,
            b_l: c.b_last_label(),
            seed: c.run.seed,
            diverged: r.diverged,
            final_loss: r.last(Scope::Train, Metric::Loss),
            final_acc: r.last(Scope::Train, Metric::Acc),
        }
    }

    pub fn score(&self, metric: SweepMetric) -> Option<f64> {
        if self.diverged {
            return None;
        }
        match metric {
            SweepMetric::Loss => self.final_loss.filter(|v| v.is_finite()),
            SweepMetric::Acc => self.final_acc,
        }
    }
}

/// Rebuilds run summaries from CSV rows, one per config hash.
pub fn summaries_from_csv(rows: &[CsvRow]) -> Vec<RunSummary> {
    let mut by_hash: BTreeMap<&str, RunSummary> = BTreeMap::new();
    let mut last_step: BTreeMap<(&str, &str), usize> = BTreeMap::new();
    for r in rows {
        let s = by_hash.entry(&r.config_hash).or_insert_with(|| RunSummary {
            config_hash: r.config_hash.clone(),
            family: r.family.clone(),
            param_scheme: r.param_scheme.clone(),
            damping_strategy: r.damping_strategy.clone(),
            width: r.width,
            lr_exp: r.lr_exp,
            rho_prime: r.rho_prime,
            b_l: r.b_l.clone(),
            seed: r.seed,
            diverged: r.diverged,
            final_loss: None,
            final_acc: None,
        });
        if r.layer.is_empty() && (r.metric == "loss" || r.metric == "acc") {
            let prev = last_step.entry((&r.config_hash, &r.metric)).or_insert(0);
            if r.step >= *prev {
                *prev = r.step;
                if r.metric == "loss" {
                    s.final_loss = Some(r.value);
                } else {
                    s.final_acc = Some(r.value);
                }
            }
        }
    }
    by_hash.into_values().collect()
}

/// Best axis value and its seed-averaged score.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Optimum {
    pub value: f64,
    pub score: f64,
}

/// `(axis value, score or None when diverged)` pairs, several seeds per value.
///
/// A value counts only when none of its seeds diverged; the score is the mean
/// over seeds. Exact ties go to the smaller value.
pub fn select_optimum(points: &[(f64, Option<f64>)], metric: SweepMetric) -> Result<Optimum, HarnessError> {
    let mut groups: BTreeMap<u64, (f64, Vec<Option<f64>>)> = BTreeMap::new();
    for &(v, s) in points {
        // Order-preserving key for finite floats.
        let bits = v.to_bits();
        let key = if v.is_sign_negative() { !bits } else { bits | (1 << 63) };
        groups.entry(key).or_insert((v, Vec::new())).1.push(s);
    }
    let mut best: Option<Optimum> = None;
    for (_, (value, scores)) in groups {
        let Some(all): Option<Vec<f64>> = scores.into_iter().collect() else { continue };
        let score = all.iter().sum::<f64>() / all.len() as f64;
        let better = match (best, metric) {
            (None, _) => true,
            (Some(b), SweepMetric::Loss) => score < b.score,
            (Some(b), SweepMetric::Acc) => score > b.score,
        };
        if better {
            best = Some(Optimum { value, score });
        }
    }
    best.ok_or(HarnessError::AllDiverged)
}

/// Records the relative distance of the first-step output layer to the
/// kernel-ridge reference (K-FAC family only).
struct NngpObserver<T> {
    y: Array2<T>,
    e_b: f64,
    lr_last: f64,
}

impl<T: Real> RunObserver<T> for NngpObserver<T> {
    fn after_step(&mut self, step: usize, _: Option<&Weights<T>>, after: &Weights<T>, tape: &Tape<T>, report: &StepReport) -> Vec<MetricRow> {
        if step != 1 {
            return Vec::new();
        }
        let l = after.depth() - 1;
        let last = &report.layers[l];
        let Some(rho_a) = last.rho_right else { return Vec::new() };
        let c = self.y.nrows() as f64;
        let mult = after.layers[l].multiplier.to_f64_lossy();
        let mut eta = self.lr_last * mult * mult;
        if self.e_b != 0.0 {
            let Some(rho_b) = last.rho_left else { return Vec::new() };
            eta /= (1.0 / c + rho_b).powf(self.e_b);
        }
        let Ok(reference) = nngp_reference(&tape.h[l], &self.y, T::lit(rho_a), T::lit(eta)) else { return Vec::new() };
        let w = after.layers[l].effective();
        let norm = |x: &Array2<T>| x.iter().fold(0.0, |s, &v| s + v.to_f64_lossy().powi(2)).sqrt();
        let dist = norm(&(&w - &reference)) / norm(&reference).max(f64::MIN_POSITIVE);
        vec![MetricRow { step, scope: Scope::Layer(l + 1), metric: Metric::NngpDist, value: dist }]
    }
}

/// Trains every `(b_L, family)` pair and records accuracies plus, for the
/// K-FAC family, the first-step distance to the kernel-ridge solution.
pub fn nngp_bias_experiment(
    base: &Config,
    b_lasts: &[String],
    families: &[Family],
    data: &Dataset,
    sink: &CsvSink,
    jobs: usize,
) -> Result<SweepOutcome, HarnessError> {
    let grid = SweepGrid {
        base: base.cell(),
        widths: Vec::new(),
        lr_exps: Vec::new(),
        rho_exps: Vec::new(),
        b_last: b_lasts.to_vec(),
        seeds: base.sweep.as_ref().map(|s| s.seeds.clone()).unwrap_or_default(),
        families: families.to_vec(),
    };
    let runner = |c: &Config| -> Result<RunRecord, HarnessError> {
        let family = c.optimizer.family;
        if !matches!(family, Family::Kfac | Family::Foof) || c.run.batch_size.is_some_and(|b| b < data.n_train()) {
            return run_training(c, data);
        }
        let setup = super::run::resolve(c, data)?;
        let (_, e_b) = c.family_exps()?.effective(family)?;
        let lr_last = *setup.mat.lr.last().expect("depth ≥ 2");
        match c.run.precision {
            super::config::Precision::F64 => {
                let mut obs = NngpObserver { y: data.y_train.clone(), e_b: exp_to_f64(e_b), lr_last };
                run_training_with::<f64>(c, data, &mut obs)
            }
            super::config::Precision::F32 => {
                let mut obs = NngpObserver { y: data.y_train.mapv(|v| v as f32), e_b: exp_to_f64(e_b), lr_last };
                run_training_with::<f32>(c, data, &mut obs)
            }
        }
    };
    run_sweep_with(&grid.cells(), sink, jobs, &runner)
}

/// Seed-averaged `(axis value, score)` curve per width from run summaries.
pub fn curves_by_width(
    summaries: &[RunSummary],
    axis: impl Fn(&RunSummary) -> Option<f64>,
    metric: SweepMetric,
) -> BTreeMap<usize, Vec<(f64, Option<f64>)>> {
    let mut out: BTreeMap<usize, Vec<(f64, Option<f64>)>> = BTreeMap::new();
    for s in summaries {
        if let Some(v) = axis(s) {
            out.entry(s.width).or_default().push((v, s.score(metric)));
        }
    }
    out
}

pub fn lr_axis(s: &RunSummary) -> Option<f64> {
    s.lr_exp.map(f64::from)
}

pub fn rho_axis(s: &RunSummary) -> Option<f64> {
    exact_log2(s.rho_prime).map(f64::from)
}
