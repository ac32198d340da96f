//! `bikd`: dataset generation, training, evaluation, weight export, and
//! verification suites for bilevel knowledge distillation.
//!
//! Exit status is 0 on success, 1 when a verification suite fails, and 2
//! for every other error. Errors print as one line: `error[CODE]: message`.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use bikd::experiment::{
    self, build_dataset, comparison_csv, eval_run, export_run, run_dir, run_seed, write_dataset, DataSource,
    DatasetSpec, ExperimentConfig, RunEval,
};
use bikd::verify::{self, Report};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

const OUTPUT_ROOT_ENV: &str = "BIKD_OUTPUT_ROOT";

/// Writes to stdout; a closed pipe is not an error.
macro_rules! out {
    ($($t:tt)*) => {{
        use std::io::Write as _;
        let _ = write!(std::io::stdout().lock(), $($t)*);
    }};
}

macro_rules! outln {
    ($($t:tt)*) => {{
        use std::io::Write as _;
        let _ = writeln!(std::io::stdout().lock(), $($t)*);
    }};
}

#[derive(Debug, Parser)]
#[command(name = "bikd", version, about = "Bilevel knowledge distillation experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Build a long-tailed dataset directory (train/val/test + dataset.json).
    Data(DataArgs),
    /// Train one or more seeds of an experiment.
    Train(TrainArgs),
    /// Recompute metrics of run directories; prints a comparison table.
    Eval(EvalArgs),
    /// Write per-sample weights of a bikd run to weight_scatter.csv.
    Export(ExportArgs),
    /// Run a double-precision verification suite; prints a JSON report.
    Verify(VerifyArgs),
}

fn parse_rho(s: &str) -> Result<f64, String> {
    let v: f64 = s.parse().map_err(|e| format!("{e}"))?;
    if !(v >= 1.0) || !v.is_finite() {
        return Err(format!("imbalance factor must be a finite value >= 1, got {v}"));
    }
    Ok(v)
}

#[derive(Debug, Args)]
struct DataArgs {
    /// TOML dataset spec; flags below override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Gaussian-mixture source (the default).
    #[arg(long, conflicts_with = "cifar")]
    synthetic: bool,
    /// Directory holding the CIFAR-10 binary batches.
    #[arg(long)]
    cifar: Option<PathBuf>,
    #[arg(long)]
    classes: Option<usize>,
    #[arg(long)]
    dim: Option<usize>,
    #[arg(long)]
    separation: Option<f64>,
    #[arg(long)]
    scale: Option<f64>,
    #[arg(long)]
    test_per_class: Option<usize>,
    #[arg(long)]
    n_max: Option<usize>,
    #[arg(long, value_parser = parse_rho)]
    rho: Option<f64>,
    #[arg(long)]
    val_size: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, default_value = "data")]
    out: PathBuf,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum MethodArg {
    Ce,
    Kd,
    Bikd,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum RoleArg {
    Teacher,
    Student,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum PrecisionArg {
    F32,
    F64,
}

#[derive(Debug, Args)]
struct TrainArgs {
    /// TOML experiment config; flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_enum)]
    method: Option<MethodArg>,
    #[arg(long, value_enum)]
    role: Option<RoleArg>,
    #[arg(long, value_enum)]
    precision: Option<PrecisionArg>,
    #[arg(long)]
    dataset: Option<PathBuf>,
    #[arg(long)]
    teacher: Option<PathBuf>,
    /// Replaces the config's seed list; repeatable.
    #[arg(long = "seed")]
    seeds: Vec<u64>,
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    epochs: Option<usize>,
    /// Runs kd for alpha in 0.1, 0.2, ..., 0.9 under `<out>/alpha-<a>`.
    #[arg(long)]
    alpha_sweep: bool,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Generic override `dotted.key=value` (TOML value syntax); repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
}

#[derive(Debug, Args)]
struct EvalArgs {
    /// Run directories, or parents of `seed-<n>` run directories.
    #[arg(required = true)]
    runs: Vec<PathBuf>,
    /// Also write the comparison table here.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct ExportArgs {
    run: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Suite {
    Gradcheck,
    Hypergrad,
    Equivalence,
    Data,
    All,
}

#[derive(Debug, Args)]
struct VerifyArgs {
    #[arg(value_enum)]
    suite: Suite,
    /// Window lengths for the hypergradient suite; repeatable.
    #[arg(long = "k")]
    ks: Vec<usize>,
    /// Random seeds per check.
    #[arg(long)]
    seeds: Option<u64>,
    #[arg(long, default_value_t = 10)]
    classes: usize,
    #[arg(long, default_value_t = 5000)]
    n_max: usize,
    #[arg(long, default_value_t = 100.0, value_parser = parse_rho)]
    rho: f64,
    /// Also write the JSON report here.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug)]
enum CliError {
    Usage(String),
    Lib(bikd::Error),
    VerificationFailed,
}

impl From<bikd::Error> for CliError {
    fn from(e: bikd::Error) -> Self {
        CliError::Lib(e)
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Lib(e.into())
    }
}

type CliResult<T> = Result<T, CliError>;

fn one_line(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                out!("{e}");
                return ExitCode::SUCCESS;
            }
            let text = e.render().to_string();
            let first = text.lines().next().unwrap_or_default().trim_start_matches("error: ");
            eprintln!("error[E_USAGE]: {}", one_line(first));
            return ExitCode::from(2);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::VerificationFailed) => ExitCode::from(1),
        Err(CliError::Usage(m)) => {
            eprintln!("error[E_USAGE]: {}", one_line(&m));
            ExitCode::from(2)
        }
        Err(CliError::Lib(e)) => {
            eprintln!("error[{}]: {}", e.code(), one_line(&e.to_string()));
            ExitCode::from(2)
        }
    }
}

/// Relative paths resolve against the output root when it is set.
fn rooted(p: &Path) -> PathBuf {
    match std::env::var_os(OUTPUT_ROOT_ENV) {
        Some(root) if p.is_relative() => PathBuf::from(root).join(p),
        _ => p.to_path_buf(),
    }
}

fn run(cli: Cli) -> CliResult<()> {
    match cli.command {
        Command::Data(a) => cmd_data(a),
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Export(a) => cmd_export(a),
        Command::Verify(a) => cmd_verify(a),
    }
}

fn read_file(p: &Path) -> CliResult<String> {
    std::fs::read_to_string(p).map_err(|e| CliError::Usage(format!("cannot read {}: {e}", p.display())))
}

fn cmd_data(a: DataArgs) -> CliResult<()> {
    let mut spec = match &a.config {
        Some(p) => toml::from_str::<DatasetSpec>(&read_file(&rooted(p))?)
            .map_err(|e| bikd::Error::Config(e.message().to_string()))?,
        None => DatasetSpec::default(),
    };
    if let Some(dir) = &a.cifar {
        let norm = match spec.source {
            DataSource::Cifar10 { norm, .. } => norm,
            DataSource::Synthetic { .. } => Default::default(),
        };
        spec.source = DataSource::Cifar10 { dir: rooted(dir), norm };
    } else if a.synthetic && matches!(spec.source, DataSource::Cifar10 { .. }) {
        spec.source = DatasetSpec::default().source;
    }
    match &mut spec.source {
        DataSource::Synthetic {
            classes,
            dim,
            separation,
            scale,
            test_per_class,
        } => {
            *classes = a.classes.unwrap_or(*classes);
            *dim = a.dim.unwrap_or(*dim);
            *separation = a.separation.unwrap_or(*separation);
            *scale = a.scale.unwrap_or(*scale);
            *test_per_class = a.test_per_class.unwrap_or(*test_per_class);
        }
        DataSource::Cifar10 { .. } => {
            if a.classes.is_some_and(|c| c != 10) {
                return Err(CliError::Usage("--classes must be 10 for CIFAR-10".into()));
            }
            if a.dim.is_some() || a.separation.is_some() || a.scale.is_some() || a.test_per_class.is_some() {
                return Err(CliError::Usage(
                    "--dim, --separation, --scale and --test-per-class apply to synthetic data only".into(),
                ));
            }
        }
    }
    spec.n_max = a.n_max.unwrap_or(spec.n_max);
    spec.rho = a.rho.unwrap_or(spec.rho);
    spec.val_total = a.val_size.unwrap_or(spec.val_total);
    spec.seed = a.seed.unwrap_or(spec.seed);
    if !(spec.rho >= 1.0) {
        return Err(CliError::Usage(format!("--rho must be >= 1, got {}", spec.rho)));
    }
    let out = rooted(&a.out);
    let data = build_dataset(&spec)?;
    let m = write_dataset(&out, &spec, &data)?;
    outln!("dataset {}", out.display());
    outln!("train counts {:?}", m.train_counts);
    outln!("val counts {:?}", m.val_counts);
    outln!("test counts {:?}", m.test_counts);
    Ok(())
}

/// Sets `dotted.key` in a TOML table, creating intermediate tables.
fn set_key(table: &mut toml::Table, key: &str, value: toml::Value) -> CliResult<()> {
    let mut parts: Vec<&str> = key.split('.').collect();
    let last = parts.pop().filter(|s| !s.is_empty()).ok_or_else(|| CliError::Usage(format!("empty key in --set {key}")))?;
    let mut t = table;
    for p in parts {
        let entry = t.entry(p.to_string()).or_insert_with(|| toml::Value::Table(Default::default()));
        t = entry
            .as_table_mut()
            .ok_or_else(|| CliError::Usage(format!("--set {key}: {p} is not a table")))?;
    }
    t.insert(last.to_string(), value);
    Ok(())
}

fn parse_set(s: &str) -> CliResult<(String, toml::Value)> {
    let (k, v) = s
        .split_once('=')
        .ok_or_else(|| CliError::Usage(format!("--set expects KEY=VALUE, got {s:?}")))?;
    let doc: toml::Table = format!("v = {v}")
        .parse()
        .or_else(|_| format!("v = {:?}", v).parse())
        .map_err(|e: toml::de::Error| CliError::Usage(format!("--set {k}: {}", e.message())))?;
    Ok((k.trim().to_string(), doc["v"].clone()))
}

fn path_value(p: &Path) -> toml::Value {
    toml::Value::String(rooted(p).to_string_lossy().into_owned())
}

/// Merges the config file with flag overrides; the result is validated
/// by the same parser used for config files.
fn effective_config(a: &TrainArgs) -> CliResult<ExperimentConfig> {
    let mut table: toml::Table = match &a.config {
        Some(p) => read_file(&rooted(p))?
            .parse()
            .map_err(|e: toml::de::Error| bikd::Error::Config(e.message().to_string()))?,
        None => toml::Table::new(),
    };
    // Paths inside a config file are relative to the output root, like flags.
    for key in ["dataset", "teacher", "output"] {
        if let Some(toml::Value::String(s)) = table.get(key) {
            let v = path_value(Path::new(s));
            table.insert(key.into(), v);
        }
    }
    let s = |v: &str| toml::Value::String(v.into());
    if let Some(m) = a.method {
        let v = match m {
            MethodArg::Ce => "ce",
            MethodArg::Kd => "kd",
            MethodArg::Bikd => "bikd",
        };
        table.insert("method".into(), s(v));
    }
    if let Some(r) = a.role {
        let v = match r {
            RoleArg::Teacher => "teacher",
            RoleArg::Student => "student",
        };
        table.insert("role".into(), s(v));
    }
    if let Some(p) = a.precision {
        let v = match p {
            PrecisionArg::F32 => "f32",
            PrecisionArg::F64 => "f64",
        };
        table.insert("precision".into(), s(v));
    }
    if let Some(p) = &a.dataset {
        table.insert("dataset".into(), path_value(p));
    }
    if let Some(p) = &a.teacher {
        table.insert("teacher".into(), path_value(p));
    }
    if let Some(p) = &a.out {
        table.insert("output".into(), path_value(p));
    } else if !table.contains_key("output") {
        table.insert("output".into(), path_value(Path::new("runs")));
    }
    if !a.seeds.is_empty() {
        let seeds = a.seeds.iter().map(|&v| toml::Value::Integer(v as i64)).collect();
        table.insert("seeds".into(), toml::Value::Array(seeds));
    }
    if let Some(k) = a.k {
        set_key(&mut table, "train.k", toml::Value::Integer(k as i64))?;
    }
    if let Some(al) = a.alpha {
        set_key(&mut table, "train.alpha", toml::Value::Float(al))?;
    }
    if let Some(e) = a.epochs {
        set_key(&mut table, "train.epochs", toml::Value::Integer(e as i64))?;
    }
    for raw in &a.sets {
        let (k, v) = parse_set(raw)?;
        set_key(&mut table, &k, v)?;
    }
    if !table.contains_key("method") {
        return Err(CliError::Usage("train needs --method or a config file that sets method".into()));
    }
    if !table.contains_key("dataset") {
        return Err(CliError::Usage("train needs --dataset or a config file that sets dataset".into()));
    }
    let text = toml::to_string(&table).map_err(|e| bikd::Error::Config(e.to_string()))?;
    Ok(ExperimentConfig::from_toml_str(&text)?)
}

fn train_all(cfg: &ExperimentConfig) -> CliResult<()> {
    for &seed in &cfg.seeds {
        let dir = run_dir(&cfg.output, seed);
        let out = run_seed(cfg, seed, &dir)?;
        let last = out.log.records.last().expect("initial record is always present");
        let acc = last.class_accuracy.iter().sum::<f64>() / last.class_accuracy.len().max(1) as f64;
        outln!(
            "{} seed {seed}: {} epochs, mean class accuracy {acc:.4}, run {}",
            out.manifest.label,
            last.epoch,
            dir.display()
        );
    }
    Ok(())
}

fn cmd_train(a: TrainArgs) -> CliResult<()> {
    let cfg = effective_config(&a)?;
    if !a.alpha_sweep {
        return train_all(&cfg);
    }
    if cfg.method != experiment::Method::Kd {
        return Err(CliError::Usage("--alpha-sweep applies to --method kd only".into()));
    }
    for i in 1..=9 {
        let alpha = i as f64 / 10.0;
        let mut c = cfg.clone();
        c.train.alpha = alpha;
        c.output = cfg.output.join(format!("alpha-{alpha}"));
        c.validate()?;
        train_all(&c)?;
    }
    Ok(())
}

/// A directory with a run manifest, else its `seed-<n>` children.
fn expand_runs(paths: &[PathBuf]) -> CliResult<Vec<PathBuf>> {
    let mut out = Vec::new();
    for p in paths {
        let p = rooted(p);
        if p.join(experiment::RUN_MANIFEST).exists() {
            out.push(p);
            continue;
        }
        let mut children: Vec<PathBuf> = match std::fs::read_dir(&p) {
            Ok(rd) => rd
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|c| c.join(experiment::RUN_MANIFEST).exists())
                .collect(),
            Err(_) => Vec::new(),
        };
        if children.is_empty() {
            return Err(bikd::Error::Data(format!(
                "missing artifact {}",
                p.join(experiment::RUN_MANIFEST).display()
            ))
            .into());
        }
        children.sort();
        out.extend(children);
    }
    Ok(out)
}

fn cmd_eval(a: EvalArgs) -> CliResult<()> {
    let runs = expand_runs(&a.runs)?;
    let mut evals: Vec<RunEval> = Vec::with_capacity(runs.len());
    for r in &runs {
        let e = eval_run(r)?;
        outln!(
            "{} seed {}: accuracy {:.4}, head {:.4}, tail {:.4}, tail-{} {:.4} ({})",
            e.label,
            e.seed,
            e.metrics.accuracy,
            e.metrics.head_accuracy,
            e.metrics.tail_accuracy,
            experiment::TAIL_CLASSES,
            e.tail,
            r.display()
        );
        evals.push(e);
    }
    let table = comparison_csv(&evals);
    out!("{table}");
    if let Some(p) = &a.out {
        std::fs::write(rooted(p), &table)?;
    }
    Ok(())
}

fn cmd_export(a: ExportArgs) -> CliResult<()> {
    let dir = rooted(&a.run);
    let records = export_run(&dir)?;
    outln!("{} records written to {}", records.len(), dir.join("weight_scatter.csv").display());
    Ok(())
}

#[derive(Serialize)]
struct VerifyOutput {
    passed: bool,
    reports: Vec<Report>,
}

fn cmd_verify(a: VerifyArgs) -> CliResult<()> {
    let want = |s: Suite| a.suite == s || a.suite == Suite::All;
    let mut reports = Vec::new();
    if want(Suite::Gradcheck) {
        reports.push(verify::gradcheck_suite(a.seeds.unwrap_or(20))?);
    }
    if want(Suite::Hypergrad) {
        let ks = if a.ks.is_empty() { vec![1, 2, 3, 5] } else { a.ks.clone() };
        if ks.contains(&0) {
            return Err(CliError::Usage("--k must be at least 1".into()));
        }
        reports.push(verify::hypergrad_suite(&ks, a.seeds.unwrap_or(2))?);
    }
    if want(Suite::Equivalence) {
        reports.push(verify::equivalence_suite()?);
    }
    if want(Suite::Data) {
        reports.push(verify::data_suite(a.classes, a.n_max, a.rho)?);
    }
    let out = VerifyOutput {
        passed: reports.iter().all(|r| r.passed),
        reports,
    };
    let json = serde_json::to_string_pretty(&out).map_err(|e| bikd::Error::Config(e.to_string()))?;
    outln!("{json}");
    if let Some(p) = &a.out {
        std::fs::write(rooted(p), &json)?;
    }
    if out.passed {
        Ok(())
    } else {
        Err(CliError::VerificationFailed)
    }
}
