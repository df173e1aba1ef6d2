use clap::{Args, Parser, Subcommand};
use somup::harness::config::{SweepConfig, CONFIG_KEYS};
use somup::harness::sweep::{curves_by_width, lr_axis, nngp_bias_experiment, rho_axis, summaries_from_csv, RunSummary};
use somup::harness::{load_dataset, read_csv, run_sweep, run_training, select_optimum, Config, CsvSink, SweepGrid};
use somup::param::{fmt_exps, parse_exp, table_for, DampingExps, Family, FamilyExps, Scheme};
use somup::verify::{coord_slopes, coordcheck_cells, run_criterion, VerifyOptions, CRITERIA, PROBE_WIDTHS, TRANSFER_WIDTHS};
use std::collections::{HashMap, HashSet};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use thiserror::Error;

#[derive(Debug, Error)]
enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Config(#[from] somup::harness::ConfigError),
    #[error(transparent)]
    Param(#[from] somup::param::ParamError),
    #[error(transparent)]
    Harness(#[from] somup::harness::HarnessError),
    #[error(transparent)]
    Data(#[from] somup::harness::DataError),
    #[error(transparent)]
    Verify(#[from] somup::verify::VerifyError),
    #[error("{0} criteria failed")]
    Failed(usize),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) | CliError::Config(_) | CliError::Param(_) => 2,
            _ => 1,
        }
    }
}

fn key_help() -> String {
    let mut s = String::from("Config keys (TOML sections, or --set section.key=value):\n");
    for k in CONFIG_KEYS {
        s.push_str("  ");
        s.push_str(k);
        s.push('\n');
    }
    s
}

#[derive(Debug, Parser)]
#[command(name = "somup", version, about = "Second-order optimizers under width-scaled parameterizations", arg_required_else_help = true)]
#[command(after_help = key_help())]
struct Cli {
    #[command(subcommand)]
    command: Command,
    #[command(flatten)]
    common: Common,
}

#[derive(Debug, Args)]
struct Common {
    /// TOML experiment config.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory for CSV files [default: results; verify keeps its
    /// CSVs in a temporary directory unless given].
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Worker threads for sweeps.
    #[arg(long, global = true, default_value_t = 1)]
    jobs: usize,
    /// Fast tier only (verify), or a reduced grid (sweeps).
    #[arg(long, global = true)]
    fast: bool,
    /// Seed for single runs; replaces the seed list of sweeps.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Dotted override, applied after the config file. Repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run the acceptance checks; exits 1 if any fails.
    Verify {
        /// Comma-separated criterion numbers.
        #[arg(long, value_delimiter = ',')]
        only: Vec<u8>,
    },
    /// Coordinate check: per-layer coord(Δh) slopes over widths.
    Coordcheck,
    /// Learning-rate sweep over widths.
    LrSweep,
    /// Damping-constant sweep over widths.
    DampingSweep,
    /// Output-layer init scale vs accuracy, with the first-step NNGP distance.
    Nngp,
    /// Train one configuration.
    Train,
    /// Print parameterization tables.
    Tables {
        #[arg(long)]
        family: Option<Family>,
        #[arg(long)]
        scheme: Option<Scheme>,
        #[arg(long, default_value_t = 3)]
        depth: usize,
        #[arg(long, default_value = "1")]
        e_a: String,
        #[arg(long, default_value = "1")]
        e_b: String,
        #[arg(long, default_value = "1/2")]
        e: String,
    },
}

fn load_config(common: &Common) -> Result<Config, CliError> {
    let mut sets = common.set.clone();
    if let Some(s) = common.seed {
        sets.push(format!("run.seed={s}"));
    }
    Ok(match &common.config {
        Some(p) => Config::from_file(p, &sets)?,
        None => Config::from_toml_str("", &sets)?,
    })
}

fn sweep_section(config: &Config, common: &Common) -> SweepConfig {
    let mut s = config.sweep.clone().unwrap_or_default();
    if let Some(seed) = common.seed {
        s.seeds = vec![seed];
    }
    if s.seeds.is_empty() {
        s.seeds = if common.fast { vec![0] } else { vec![0, 1, 2] };
    }
    if s.widths.is_empty() {
        s.widths = if common.fast { vec![64, 128, 256] } else { Vec::new() };
    }
    s
}

fn csv_path(common: &Common, name: &str) -> Result<PathBuf, CliError> {
    let dir = common.out.clone().unwrap_or_else(|| PathBuf::from("results"));
    std::fs::create_dir_all(&dir).map_err(|e| CliError::Usage(format!("{}: {e}", dir.display())))?;
    Ok(dir.join(name))
}

fn summaries_for(csv: &Path, cells: &[Config]) -> Result<Vec<RunSummary>, CliError> {
    let wanted: HashSet<String> = cells.iter().map(Config::hash).collect();
    let rows = read_csv(csv)?;
    Ok(summaries_from_csv(&rows).into_iter().filter(|s| wanted.contains(&s.config_hash)).collect())
}

fn report_outcome(outcome: &somup::harness::SweepOutcome) {
    println!("{} runs trained, {} already in the CSV", outcome.records.len(), outcome.skipped.len());
    for (h, e) in &outcome.failures {
        eprintln!("run {} failed: {e}", &h[..12]);
    }
}

fn cmd_verify(common: &Common, only: &[u8]) -> Result<(), CliError> {
    let opts = VerifyOptions { jobs: common.jobs, out: common.out.clone() };
    let mut failed = 0;
    let mut ran = 0;
    for c in &CRITERIA {
        let selected = if only.is_empty() { c.fast || !common.fast } else { only.contains(&c.id) };
        if !selected {
            continue;
        }
        let check = run_criterion(c, &opts);
        println!("{}", check.line());
        ran += 1;
        failed += usize::from(!check.passed);
    }
    if ran == 0 {
        return Err(CliError::Usage("no criteria selected".into()));
    }
    if failed > 0 {
        return Err(CliError::Failed(failed));
    }
    Ok(())
}

fn cmd_train(common: &Common) -> Result<(), CliError> {
    let config = load_config(common)?;
    let data = load_dataset(&config.dataset)?;
    let sink = CsvSink::open(&csv_path(common, "train.csv")?)?;
    let record = run_training(&config.cell(), &data)?;
    sink.write(&record)?;
    println!(
        "run {}: {} steps, final loss {}, diverged {}, {:.2}s",
        record.run_id,
        record.steps_done,
        record.final_loss().map_or("n/a".into(), |v| format!("{v:.6e}")),
        record.diverged,
        record.wall_time
    );
    Ok(())
}

fn cmd_coordcheck(common: &Common) -> Result<(), CliError> {
    let config = load_config(common)?;
    let sweep = sweep_section(&config, common);
    let widths = if sweep.widths.is_empty() { PROBE_WIDTHS.to_vec() } else { sweep.widths.clone() };
    let step = config.run.probe_steps.last().copied().ok_or_else(|| CliError::Usage("run.probe_steps is empty".into()))?;
    let data = load_dataset(&config.dataset)?;
    let csv = csv_path(common, "coordcheck.csv")?;
    let cells = coordcheck_cells(&config, &widths, &sweep.seeds);
    let rows = somup::verify::sweep_rows(&cells, &data, &csv, common.jobs)?;
    let slopes = coord_slopes(&cells, &rows, step)?;
    println!("coord(dh) slopes at step {step} over widths {widths:?}:");
    for (l, s) in slopes.iter().enumerate() {
        println!("  layer {}: slope {:+.3} (residual {:.3})", l + 1, s.slope, s.residual);
    }
    Ok(())
}

fn cmd_axis_sweep(common: &Common, lr: bool) -> Result<(), CliError> {
    let mut config = load_config(common)?;
    let mut sweep = sweep_section(&config, common);
    if sweep.widths.is_empty() {
        sweep.widths = TRANSFER_WIDTHS.to_vec();
    }
    if lr && sweep.lr_exps.is_empty() {
        sweep.lr_exps = (-12..=0).collect();
    }
    if !lr && sweep.rho_exps.is_empty() {
        sweep.rho_exps = (-6..=6).collect();
    }
    if lr {
        sweep.rho_exps.clear();
    } else {
        sweep.lr_exps.clear();
    }
    let metric = sweep.metric;
    config.sweep = Some(sweep);
    let data = load_dataset(&config.dataset)?;
    let csv = csv_path(common, if lr { "lr_sweep.csv" } else { "damping_sweep.csv" })?;
    let grid = SweepGrid::from_config(&config);
    let sink = CsvSink::open(&csv)?;
    let outcome = run_sweep(&grid, &data, &sink, common.jobs)?;
    drop(sink);
    report_outcome(&outcome);
    let summaries = summaries_for(&csv, &grid.cells())?;
    let curves = curves_by_width(&summaries, if lr { lr_axis } else { rho_axis }, metric);
    let name = if lr { "lr" } else { "rho'" };
    for (m, pts) in curves {
        match select_optimum(&pts, metric) {
            Ok(o) => println!("M = {m}: best {name} = 2^{}  ({metric:?} {:.6e})", o.value, o.score),
            Err(e) => println!("M = {m}: {e}"),
        }
    }
    Ok(())
}

fn cmd_nngp(common: &Common) -> Result<(), CliError> {
    let mut config = load_config(common)?;
    let sweep = sweep_section(&config, common);
    let b_lasts = if sweep.b_last.is_empty() { vec!["1/2".to_string(), "1".into(), "inf".into()] } else { sweep.b_last.clone() };
    let families = if sweep.families.is_empty() { vec![Family::Kfac, Family::Sgd] } else { sweep.families.clone() };
    config.sweep = Some(sweep);
    let data = load_dataset(&config.dataset)?;
    let csv = csv_path(common, "nngp.csv")?;
    let sink = CsvSink::open(&csv)?;
    let outcome = nngp_bias_experiment(&config, &b_lasts, &families, &data, &sink, common.jobs)?;
    drop(sink);
    report_outcome(&outcome);

    let rows = read_csv(&csv)?;
    let mut seen: HashMap<(String, String), Vec<(Option<f64>, Option<f64>, Option<f64>)>> = HashMap::new();
    let summaries: HashMap<String, RunSummary> = summaries_from_csv(&rows).into_iter().map(|s| (s.config_hash.clone(), s)).collect();
    for s in summaries.values() {
        let probe_acc = rows
            .iter()
            .filter(|r| r.config_hash == s.config_hash && r.layer == "probe" && r.metric == "acc")
            .map(|r| r.value)
            .next_back();
        let dist = rows.iter().find(|r| r.config_hash == s.config_hash && r.metric == "nngp_dist").map(|r| r.value);
        seen.entry((s.b_l.clone(), s.family.clone())).or_default().push((s.final_acc, probe_acc, dist));
    }
    let mut keys: Vec<_> = seen.keys().cloned().collect();
    keys.sort();
    println!("{:<6} {:<14} {:>10} {:>10} {:>12}", "b_L", "family", "train_acc", "probe_acc", "nngp_dist");
    let mean = |v: Vec<f64>| if v.is_empty() { f64::NAN } else { v.iter().sum::<f64>() / v.len() as f64 };
    for k in keys {
        let v = &seen[&k];
        let train = mean(v.iter().filter_map(|x| x.0).collect());
        let probe = mean(v.iter().filter_map(|x| x.1).collect());
        let dist = mean(v.iter().filter_map(|x| x.2).collect());
        println!("{:<6} {:<14} {:>10.4} {:>10.4} {:>12.3e}", k.0, k.1, train, probe, dist);
    }
    Ok(())
}

fn cmd_tables(family: Option<Family>, scheme: Option<Scheme>, depth: usize, e_a: &str, e_b: &str, e: &str) -> Result<(), CliError> {
    let exps = FamilyExps { e_a: parse_exp(e_a)?, e_b: parse_exp(e_b)?, e: parse_exp(e)? };
    let families = family.map_or_else(|| vec![Family::Sgd, Family::Kfac, Family::Foof, Family::Shampoo, Family::GaussNewton], |f| vec![f]);
    let schemes = scheme.map_or_else(|| vec![Scheme::Mup, Scheme::Sp, Scheme::Ntk], |s| vec![s]);
    for s in &schemes {
        for f in &families {
            let t = table_for(*s, *f, &exps, depth)?;
            let mut line = format!("{s} {f} L={depth}: b={}, c={}", fmt_exps(&t.param.b()), fmt_exps(&t.param.c()));
            match &t.damping {
                DampingExps::None => {}
                DampingExps::Kfac { d_a, d_b } => {
                    if let Some(a) = d_a {
                        line += &format!(", d_A={}", fmt_exps(a));
                    }
                    if let Some(b) = d_b {
                        line += &format!(", d_B={}", fmt_exps(b));
                    }
                }
                DampingExps::Shampoo { d_l, d_r } => line += &format!(", d_L={}, d_R={}", fmt_exps(d_l), fmt_exps(d_r)),
                DampingExps::GaussNewton { d } => line += &format!(", d={}", fmt_exps(d)),
            }
            println!("{line}");
        }
    }
    Ok(())
}

fn run(cli: Cli) -> Result<(), CliError> {
    let common = &cli.common;
    if common.jobs == 0 {
        return Err(CliError::Usage("--jobs must be at least 1".into()));
    }
    match cli.command {
        Command::Verify { only } => cmd_verify(common, &only),
        Command::Coordcheck => cmd_coordcheck(common),
        Command::LrSweep => cmd_axis_sweep(common, true),
        Command::DampingSweep => cmd_axis_sweep(common, false),
        Command::Nngp => cmd_nngp(common),
        Command::Train => cmd_train(common),
        Command::Tables { family, scheme, depth, e_a, e_b, e } => cmd_tables(family, scheme, depth, &e_a, &e_b, &e),
    }
}

fn main() -> ExitCode {
    somup::blas::relaunch_with_coretype();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
