//! `nashmeta simulate | train | report`.
//!
//! Every command writes JSON Lines. Each row carries a `"kind"` tag:
//!
//! | kind         | command  | contents                                          |
//! |--------------|----------|---------------------------------------------------|
//! | `config`     | all      | full run configuration and crate version          |
//! | `trajectory` | simulate | every iterate and per-step bargaining status      |
//! | `endpoint`   | simulate | final point and its stationarity / fairness class |
//! | `step`       | train    | per-step record (only with `--log-steps`)         |
//! | `epoch`      | train    | per-epoch test metrics and alignment              |
//! | `final`      | train    | test metrics after the last epoch, per seed       |
//! | `summary`    | both     | aggregate over inits or seeds                     |
//!
//! Rows contain no timestamps, so identical arguments give identical bytes.
//! Output goes to `--out` (default stdout). A relative `--out` is placed under
//! `$NASHMETA_OUT_DIR` when that variable is set.

use crate::aggregation::{NbsOptions, ProtocolKind};
use crate::data::{balanced_split, load_csv, standardize, DatasetSpec, TrainingDefaults};
use crate::error::{Error, Result};
use crate::metalearn::{train_two_stage, EpochMetrics, StepRecord, TrainConfig};
use crate::metrics::GroupMetrics;
use crate::synthetic::{
    run_trajectory, EndpointClass, Method, SyntheticPoint, Trajectory, TrajectoryConfig,
    STANDARD_INITS,
};
use clap::{Args, Parser, Subcommand};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use std::ffi::OsString;
use std::io::{BufRead, BufWriter, Write};
use std::path::{Path, PathBuf};

pub const OUT_DIR_ENV: &str = "NASHMETA_OUT_DIR";
pub const VERSION: &str = env!("CARGO_PKG_VERSION");

pub const EXIT_OK: i32 = 0;
pub const EXIT_FAILURE: i32 = 1;
pub const EXIT_USAGE: i32 = 2;

#[derive(Debug, Parser)]
#[command(
    name = "nashmeta",
    version,
    about = "Bargained hypergradient aggregation experiments"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run the two-objective toy benchmark.
    Simulate(SimulateArgs),
    /// Train the reweighted MLP on a tabular dataset.
    Train(TrainArgs),
    /// Summarise one or more run files.
    Report(ReportArgs),
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    /// Comma-separated methods: ltr, forml, gdro, nbs-full, nbs-two-stage, pcgrad, cagrad, gm.
    #[arg(long, value_delimiter = ',', required = true)]
    pub method: Vec<Method>,
    /// Fallback and stage-2 protocol of the bargaining methods.
    #[arg(long, default_value = "ltr")]
    pub protocol: ProtocolKind,
    #[arg(long, default_value_t = 1000)]
    pub steps: usize,
    #[arg(long, default_value_t = 0.1)]
    pub lr: f64,
    #[arg(long, default_value_t = 100)]
    pub bargain_steps: usize,
    /// `paper` or `x,y;x,y;...`.
    #[arg(long, default_value = "paper")]
    pub inits: InitSet,
    #[arg(long, default_value_t = 0.5)]
    pub cagrad_c: f64,
    #[arg(long, default_value_t = 2.0)]
    pub gm_p: f64,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Dataset spec JSON.
    #[arg(long)]
    pub dataset: PathBuf,
    #[arg(long, default_value = "ltr")]
    pub protocol: ProtocolKind,
    /// Bargain for the first `--bargain-epochs` epochs. Without it the run is one-stage.
    #[arg(long)]
    pub two_stage: bool,
    #[arg(long, default_value_t = 15)]
    pub bargain_epochs: usize,
    #[arg(long, default_value_t = 50)]
    pub epochs: usize,
    /// Number of seeds; runs use seeds `seed-base .. seed-base + seeds`.
    #[arg(long, default_value_t = 1)]
    pub seeds: usize,
    #[arg(long, default_value_t = 0)]
    pub seed_base: u64,
    /// Overrides the dataset default.
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub dropout: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Also write one row per optimisation step.
    #[arg(long)]
    pub log_steps: bool,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    #[arg(long, required = true, num_args = 1..)]
    pub input: Vec<PathBuf>,
    /// Also write the metrics table as CSV.
    #[arg(long)]
    pub csv: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InitSet(pub Vec<[f64; 2]>);

impl std::str::FromStr for InitSet {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s == "paper" {
            return Ok(InitSet(STANDARD_INITS.to_vec()));
        }
        let pts = s
            .split(';')
            .filter(|p| !p.trim().is_empty())
            .map(|p| {
                let v: Vec<f64> = p
                    .split(',')
                    .map(|x| x.trim().parse::<f64>())
                    .collect::<std::result::Result<_, _>>()
                    .map_err(|e| Error::input(format!("bad init {p:?}: {e}")))?;
                match v[..] {
                    [x, y] if x.is_finite() && y.is_finite() => Ok([x, y]),
                    _ => Err(Error::input(format!("init {p:?} is not a finite pair"))),
                }
            })
            .collect::<Result<Vec<_>>>()?;
        if pts.is_empty() {
            return Err(Error::input("no inits given"));
        }
        Ok(InitSet(pts))
    }
}

/// Parses `args` (program name first), runs the command, returns the exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    let outcome = match cli.command {
        Command::Simulate(a) => cmd_simulate(&a),
        Command::Train(a) => cmd_train(&a),
        Command::Report(a) => cmd_report(&a, &mut std::io::stdout().lock()),
    };
    match outcome {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            EXIT_FAILURE
        }
    }
}

fn resolve_out(out: &Option<PathBuf>) -> Option<PathBuf> {
    let p = out.as_ref()?;
    match std::env::var_os(OUT_DIR_ENV) {
        Some(dir) if p.is_relative() && !dir.is_empty() => Some(Path::new(&dir).join(p)),
        _ => Some(p.clone()),
    }
}

fn write_rows(out: &Option<PathBuf>, rows: &[Value]) -> Result<()> {
    let mut text = String::new();
    for r in rows {
        text.push_str(&serde_json::to_string(r)?);
        text.push('\n');
    }
    match resolve_out(out) {
        Some(path) => {
            if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
                std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            }
            let f = std::fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
            let mut w = BufWriter::new(f);
            w.write_all(text.as_bytes())
                .map_err(|e| Error::io(&path, e))?;
            w.flush().map_err(|e| Error::io(&path, e))
        }
        None => std::io::stdout()
            .lock()
            .write_all(text.as_bytes())
            .map_err(|e| Error::io("<stdout>", e)),
    }
}

fn tagged(kind: &str, body: impl Serialize) -> Result<Value> {
    let mut v = serde_json::to_value(body)?;
    match v.as_object_mut() {
        Some(obj) => {
            obj.insert("kind".into(), Value::String(kind.into()));
        }
        None => v = json!({ "kind": kind, "value": v }),
    }
    Ok(v)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SimulateConfig {
    pub command: String,
    pub version: String,
    pub methods: Vec<Method>,
    pub inits: Vec<[f64; 2]>,
    pub trajectory: TrajectoryConfig,
}

#[derive(Serialize)]
struct EndpointRow {
    method: Method,
    init: [f64; 2],
    endpoint: SyntheticPoint,
    #[serde(flatten)]
    class: EndpointClass,
    both_ok: bool,
}

#[derive(Serialize)]
struct SimulateSummary {
    method: Method,
    inits: usize,
    pareto_ok: usize,
    fair_ok: usize,
    both_ok: usize,
}

pub fn simulate_config(a: &SimulateArgs) -> SimulateConfig {
    SimulateConfig {
        command: "simulate".into(),
        version: VERSION.into(),
        methods: a.method.clone(),
        inits: a.inits.0.clone(),
        trajectory: TrajectoryConfig {
            steps: a.steps,
            lr: a.lr,
            bargain_steps: a.bargain_steps,
            protocol: a.protocol,
            cagrad_c: a.cagrad_c,
            gm_p: a.gm_p,
            nbs: NbsOptions::default(),
        },
    }
}

/// Runs every method from every init; returns the JSONL rows.
pub fn simulate_rows(cfg: &SimulateConfig) -> Result<Vec<Value>> {
    if cfg.methods.contains(&Method::NbsTwoStage)
        && cfg.trajectory.bargain_steps > cfg.trajectory.steps
    {
        return Err(Error::input("bargain steps exceed total steps"));
    }
    let jobs: Vec<(Method, [f64; 2])> = cfg
        .methods
        .iter()
        .flat_map(|&m| cfg.inits.iter().map(move |&i| (m, i)))
        .collect();
    let runs: Vec<Trajectory> = jobs
        .par_iter()
        .map(|&(m, init)| run_trajectory(m, init, &cfg.trajectory))
        .collect::<Result<_>>()?;

    let mut rows = vec![tagged("config", cfg)?];
    for tr in &runs {
        rows.push(tagged("trajectory", tr)?);
        let class = tr.classify();
        rows.push(tagged(
            "endpoint",
            EndpointRow {
                method: tr.method,
                init: tr.init,
                endpoint: *tr.endpoint(),
                class,
                both_ok: class.both(),
            },
        )?);
    }
    for &m in &cfg.methods {
        let classes: Vec<EndpointClass> = runs
            .iter()
            .filter(|t| t.method == m)
            .map(Trajectory::classify)
            .collect();
        rows.push(tagged(
            "summary",
            SimulateSummary {
                method: m,
                inits: classes.len(),
                pareto_ok: classes.iter().filter(|c| c.pareto_ok).count(),
                fair_ok: classes.iter().filter(|c| c.fair_ok).count(),
                both_ok: classes.iter().filter(|c| c.both()).count(),
            },
        )?);
    }
    Ok(rows)
}

pub fn cmd_simulate(a: &SimulateArgs) -> Result<()> {
    let rows = simulate_rows(&simulate_config(a))?;
    write_rows(&a.out, &rows)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainRunConfig {
    pub command: String,
    pub version: String,
    /// `<protocol>-one-stage` or `<protocol>-two-stage`.
    pub method: String,
    pub dataset: DatasetSpec,
    pub seeds: Vec<u64>,
    pub log_steps: bool,
    pub train: TrainConfig,
}

/// Merges flags over the dataset's shipped defaults.
pub fn train_config(a: &TrainArgs) -> Result<TrainRunConfig> {
    let dataset = DatasetSpec::from_json_file(&a.dataset)?;
    let defaults = dataset.training.unwrap_or(TrainingDefaults {
        lr: 1e-3,
        dropout: 0.0,
        batch_size: 32,
    });
    if a.seeds == 0 {
        return Err(Error::input("--seeds must be at least 1"));
    }
    let bargain_epochs = if a.two_stage { a.bargain_epochs } else { 0 };
    if bargain_epochs > a.epochs {
        return Err(Error::input("bargain epochs exceed total epochs"));
    }
    let train = TrainConfig {
        epochs: a.epochs,
        bargain_epochs,
        lr: a.lr.unwrap_or(defaults.lr),
        dropout: a.dropout.unwrap_or(defaults.dropout),
        batch_size: a.batch_size.unwrap_or(defaults.batch_size),
        protocol: a.protocol,
        ..TrainConfig::default()
    };
    Ok(TrainRunConfig {
        command: "train".into(),
        version: VERSION.into(),
        method: format!(
            "{}-{}",
            a.protocol,
            if bargain_epochs > 0 {
                "two-stage"
            } else {
                "one-stage"
            }
        ),
        dataset,
        seeds: (0..a.seeds as u64).map(|s| a.seed_base + s).collect(),
        log_steps: a.log_steps,
        train,
    })
}

#[derive(Serialize)]
struct StepRow<'a> {
    method: &'a str,
    seed: u64,
    #[serde(flatten)]
    record: &'a StepRecord,
}

#[derive(Serialize)]
struct EpochRow<'a> {
    method: &'a str,
    seed: u64,
    #[serde(flatten)]
    metrics: &'a EpochMetrics,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FinalRow {
    pub method: String,
    pub seed: u64,
    pub dataset: String,
    pub metrics: GroupMetrics,
}

/// Mean and sample standard deviation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

impl MeanStd {
    pub fn of(xs: &[f64]) -> Self {
        let n = xs.len() as f64;
        let mean = xs.iter().sum::<f64>() / n;
        let std = if xs.len() > 1 {
            (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        } else {
            0.0
        };
        Self { mean, std }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricSummary {
    pub method: String,
    pub seeds: usize,
    pub overall_auc: MeanStd,
    pub max_gaucd: MeanStd,
    pub worst_gauc: MeanStd,
}

impl MetricSummary {
    pub fn from_finals(method: &str, finals: &[&GroupMetrics]) -> Self {
        let pick = |f: fn(&GroupMetrics) -> f64| {
            MeanStd::of(&finals.iter().map(|m| f(m)).collect::<Vec<_>>())
        };
        Self {
            method: method.to_string(),
            seeds: finals.len(),
            overall_auc: pick(|m| m.overall_auc),
            max_gaucd: pick(|m| m.max_gaucd),
            worst_gauc: pick(|m| m.worst_gauc),
        }
    }
}

/// Trains one model per seed (in parallel) and returns the JSONL rows in seed order.
///
/// Run seed `s` also resamples the balanced split with split seed
/// `dataset.split_seed + s`, so runs sharing seeds share splits.
pub fn train_rows(cfg: &TrainRunConfig) -> Result<Vec<Value>> {
    let table = load_csv(&cfg.dataset)?;
    let per_seed: Vec<Vec<Value>> = cfg
        .seeds
        .par_iter()
        .map(|&seed| -> Result<Vec<Value>> {
            let spec = DatasetSpec {
                split_seed: cfg.dataset.split_seed.wrapping_add(seed),
                ..cfg.dataset.clone()
            };
            let ds = standardize(&balanced_split(&table, &spec)?);
            for w in &ds.warnings {
                eprintln!("warning: seed {seed}: {w}");
            }
            let tc = TrainConfig {
                seed,
                ..cfg.train.clone()
            };
            let out = train_two_stage(&tc, &ds)?;
            let method = cfg.method.as_str();
            let mut rows = Vec::new();
            if cfg.log_steps {
                for r in &out.records {
                    rows.push(tagged(
                        "step",
                        StepRow {
                            method,
                            seed,
                            record: r,
                        },
                    )?);
                }
            }
            for e in &out.epochs {
                rows.push(tagged(
                    "epoch",
                    EpochRow {
                        method,
                        seed,
                        metrics: e,
                    },
                )?);
            }
            rows.push(tagged(
                "final",
                FinalRow {
                    method: method.into(),
                    seed,
                    dataset: cfg.dataset.name.clone(),
                    metrics: out.final_metrics,
                },
            )?);
            Ok(rows)
        })
        .collect::<Result<_>>()?;

    let mut rows = vec![tagged("config", cfg)?];
    let mut finals = Vec::new();
    for seed_rows in per_seed {
        for r in seed_rows {
            if r["kind"] == "final" {
                finals.push(serde_json::from_value::<FinalRow>(r.clone())?.metrics);
            }
            rows.push(r);
        }
    }
    let refs: Vec<&GroupMetrics> = finals.iter().collect();
    rows.push(tagged(
        "summary",
        MetricSummary::from_finals(&cfg.method, &refs),
    )?);
    Ok(rows)
}

pub fn cmd_train(a: &TrainArgs) -> Result<()> {
    let cfg = train_config(a)?;
    let rows = train_rows(&cfg)?;
    write_rows(&a.out, &rows)
}

/// Parsed content of run files relevant to reporting.
#[derive(Debug, Default, Clone, PartialEq)]
pub struct Report {
    pub metrics: Vec<MetricSummary>,
    /// `(method, epoch, mean alignment rate over seeds)`.
    pub alignment: Vec<(String, usize, Option<f64>)>,
    /// `(method, inits, both tests passed)` from simulate runs.
    pub endpoints: Vec<(String, usize, usize)>,
}

fn push_grouped<T>(groups: &mut Vec<(String, Vec<T>)>, key: &str, v: T) {
    match groups.iter_mut().find(|(k, _)| k == key) {
        Some((_, list)) => list.push(v),
        None => groups.push((key.to_string(), vec![v])),
    }
}

type EpochRate = (usize, Option<f64>);

/// Reads JSONL run files. Methods appear in first-seen order.
pub fn build_report(inputs: &[PathBuf]) -> Result<Report> {
    let mut finals: Vec<(String, Vec<GroupMetrics>)> = Vec::new();
    let mut align: Vec<(String, Vec<EpochRate>)> = Vec::new();
    let mut ends: Vec<(String, Vec<bool>)> = Vec::new();
    let mut rows_seen = 0usize;

    for path in inputs {
        let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        for (i, line) in std::io::BufReader::new(f).lines().enumerate() {
            let line = line.map_err(|e| Error::io(path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            let where_ = || format!("{}:{}", path.display(), i + 1);
            let v: Value = serde_json::from_str(&line)
                .map_err(|e| Error::input(format!("{}: malformed JSON: {e}", where_())))?;
            let kind = v
                .get("kind")
                .and_then(Value::as_str)
                .ok_or_else(|| Error::input(format!("{}: row has no \"kind\"", where_())))?;
            rows_seen += 1;
            let method = v
                .get("method")
                .and_then(Value::as_str)
                .unwrap_or("")
                .to_string();
            let bad =
                |e: serde_json::Error| Error::input(format!("{}: bad {kind} row: {e}", where_()));
            match kind {
                "final" => {
                    let r: FinalRow = serde_json::from_value(v.clone()).map_err(bad)?;
                    push_grouped(&mut finals, &r.method, r.metrics);
                }
                "epoch" => {
                    let m: EpochMetrics = serde_json::from_value(v.clone()).map_err(bad)?;
                    push_grouped(&mut align, &method, (m.epoch, m.alignment.rate));
                }
                "endpoint" => {
                    let ok = v.get("both_ok").and_then(Value::as_bool).ok_or_else(|| {
                        Error::input(format!("{}: endpoint row lacks \"both_ok\"", where_()))
                    })?;
                    push_grouped(&mut ends, &method, ok);
                }
                _ => {}
            }
        }
    }
    if rows_seen == 0 {
        return Err(Error::input("no rows in input"));
    }
    if finals.is_empty() && ends.is_empty() {
        return Err(Error::input(
            "input holds neither training results nor simulation endpoints",
        ));
    }

    let metrics = finals
        .iter()
        .map(|(m, list)| MetricSummary::from_finals(m, &list.iter().collect::<Vec<_>>()))
        .collect();
    let mut alignment = Vec::new();
    for (m, list) in &align {
        let max_epoch = list.iter().map(|e| e.0).max().unwrap_or(0);
        for epoch in 0..=max_epoch {
            let rates: Vec<f64> = list
                .iter()
                .filter(|e| e.0 == epoch)
                .filter_map(|e| e.1)
                .collect();
            let mean = (!rates.is_empty()).then(|| rates.iter().sum::<f64>() / rates.len() as f64);
            alignment.push((m.clone(), epoch, mean));
        }
    }
    let endpoints = ends
        .iter()
        .map(|(m, oks)| (m.clone(), oks.len(), oks.iter().filter(|&&b| b).count()))
        .collect();
    Ok(Report {
        metrics,
        alignment,
        endpoints,
    })
}

pub fn write_csv(report: &Report, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)
        .map_err(|e| Error::Input(format!("{}: {e}", path.display())))?;
    let wrap = |e: csv::Error| Error::Input(format!("{}: {e}", path.display()));
    w.write_record([
        "method",
        "seeds",
        "overall_auc_mean",
        "overall_auc_std",
        "max_gaucd_mean",
        "max_gaucd_std",
        "worst_gauc_mean",
        "worst_gauc_std",
    ])
    .map_err(wrap)?;
    for s in &report.metrics {
        w.write_record([
            s.method.clone(),
            s.seeds.to_string(),
            s.overall_auc.mean.to_string(),
            s.overall_auc.std.to_string(),
            s.max_gaucd.mean.to_string(),
            s.max_gaucd.std.to_string(),
            s.worst_gauc.mean.to_string(),
            s.worst_gauc.std.to_string(),
        ])
        .map_err(wrap)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn cmd_report(a: &ReportArgs, out: &mut impl Write) -> Result<()> {
    let report = build_report(&a.input)?;
    let io = |e| Error::io("<stdout>", e);
    if !report.metrics.is_empty() {
        writeln!(
            out,
            "{:<24} {:>5}  {:>17}  {:>17}  {:>17}",
            "method", "seeds", "overall AUC", "Max-gAUCD", "Worst-gAUC"
        )
        .map_err(io)?;
        for s in &report.metrics {
            let cell = |m: MeanStd| format!("{:.4} ± {:.4}", m.mean, m.std);
            writeln!(
                out,
                "{:<24} {:>5}  {:>17}  {:>17}  {:>17}",
                s.method,
                s.seeds,
                cell(s.overall_auc),
                cell(s.max_gaucd),
                cell(s.worst_gauc)
            )
            .map_err(io)?;
        }
    }
    if !report.alignment.is_empty() {
        writeln!(out, "\nalignment rate per epoch (mean over seeds)").map_err(io)?;
        for (m, epoch, rate) in &report.alignment {
            let r = rate.map_or("-".to_string(), |r| format!("{r:.3}"));
            writeln!(out, "{m:<24} {epoch:>4}  {r}").map_err(io)?;
        }
    }
    if !report.endpoints.is_empty() {
        writeln!(out, "\nsimulation endpoints passing both tests").map_err(io)?;
        for (m, n, ok) in &report.endpoints {
            writeln!(out, "{m:<24} {ok}/{n}").map_err(io)?;
        }
    }
    if let Some(p) = &a.csv {
        write_csv(&report, p)?;
    }
    Ok(())
}
