use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use clap::{Args, Parser, Subcommand, ValueEnum};

use fewshot_dc::annotations::{
    compute_missing_rate, load_split_files, parse_annotations, AnnotationSet, ClassScope, ImageCounting,
    MissingRateReport, RateOptions, ScopeKind,
};
use fewshot_dc::experiment::{
    grad_check, report, rows_to_csv, simulate, summarize, summary_to_csv, ExperimentConfig, RunManifest, SummaryRow,
    DEFAULT_GRAD_CHECK_CASES, DEFAULT_GRAD_CHECK_TOLERANCE,
};
use fewshot_dc::sim::SimConfig;
use fewshot_dc::trainer::{LossKind, TrainConfig};
use fewshot_dc::Error;

const EXIT_FAILURE: u8 = 1;
const EXIT_USAGE: u8 = 2;
const EXIT_INPUT: u8 = 3;

#[derive(Parser)]
#[command(
    name = "fewshot-dc",
    version,
    about = "Decoupled-loss few-shot detection experiments"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Compare analytic gradients with central finite differences.
    GradCheck(GradCheckArgs),
    /// Train CE and DC classifiers on paired synthetic data and report recall.
    Simulate(SimulateArgs),
    /// Missing-label rate of a few-shot split.
    MissingRate(MissingRateArgs),
    /// Aggregate simulation manifests.
    Report(ReportArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Csv,
    Machine,
}

#[derive(Clone, Copy, ValueEnum)]
enum LossArg {
    Ce,
    Dc,
    Both,
}

#[derive(Clone, Copy, ValueEnum)]
enum ScopeArg {
    Fsod,
    Gfsod,
    Both,
}

#[derive(Args)]
struct Output {
    /// Output file (directory for `simulate` and `report`); stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "csv")]
    format: Format,
}

#[derive(Args)]
struct GradCheckArgs {
    #[arg(long, default_value_t = DEFAULT_GRAD_CHECK_CASES, value_parser = clap::builder::RangedU64ValueParser::<usize>::new().range(1..))]
    cases: usize,
    #[arg(long, default_value_t = DEFAULT_GRAD_CHECK_TOLERANCE)]
    tolerance: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[command(flatten)]
    output: Output,
}

#[derive(Args)]
struct SimulateArgs {
    /// Comma-separated seeds or a half-open range `a..b`.
    #[arg(long, default_value = "0..10", value_parser = parse_seeds)]
    seeds: SeedList,
    #[arg(long, default_value_t = 1)]
    shots: usize,
    #[arg(long)]
    classes: Option<usize>,
    #[arg(long)]
    scenes: Option<usize>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    momentum: Option<f64>,
    #[arg(long)]
    weight_decay: Option<f64>,
    #[arg(long, value_enum, default_value = "both")]
    loss: LossArg,
    #[command(flatten)]
    output: Output,
}

#[derive(Args)]
struct MissingRateArgs {
    /// COCO-style annotation files; several are merged.
    #[arg(long, required = true, num_args = 1..)]
    annotations: Vec<PathBuf>,
    /// A canonical split file, or one or more per-class shot files.
    #[arg(long, required = true, num_args = 1..)]
    split: Vec<PathBuf>,
    /// Shot count when it cannot be read from the split.
    #[arg(long)]
    shots: Option<usize>,
    /// Novel category ids; defaults to the categories the split labels.
    #[arg(long, value_delimiter = ',')]
    novel: Option<Vec<u64>>,
    /// Base category ids; defaults to every other category.
    #[arg(long, value_delimiter = ',')]
    base: Option<Vec<u64>>,
    #[arg(long, value_enum, default_value = "gfsod")]
    scope: ScopeArg,
    /// Count crowd annotations as instances.
    #[arg(long)]
    include_crowd: bool,
    /// Count a training image once per shot category it hosts.
    #[arg(long)]
    per_category_images: bool,
    #[command(flatten)]
    output: Output,
}

#[derive(Args)]
struct ReportArgs {
    /// Manifest files written by `simulate --out`.
    #[arg(required = true)]
    manifests: Vec<PathBuf>,
    #[command(flatten)]
    output: Output,
}

#[derive(Clone)]
struct SeedList(Vec<u64>);

fn parse_seeds(s: &str) -> Result<SeedList, String> {
    let seeds: Vec<u64> = if let Some((a, b)) = s.split_once("..") {
        let a: u64 = a.trim().parse().map_err(|e| format!("bad range start: {e}"))?;
        let b: u64 = b.trim().parse().map_err(|e| format!("bad range end: {e}"))?;
        (a..b).collect()
    } else {
        s.split(',')
            .map(|t| t.trim().parse::<u64>().map_err(|e| format!("bad seed {t:?}: {e}")))
            .collect::<Result<_, _>>()?
    };
    if seeds.is_empty() {
        return Err("seed list is empty".into());
    }
    Ok(SeedList(seeds))
}

enum Failure {
    Usage(String),
    Input(String),
    Tolerance(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Config(_) => Failure::Usage(e.to_string()),
            _ => Failure::Input(e.to_string()),
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Input(e.to_string())
    }
}

impl From<serde_json::Error> for Failure {
    fn from(e: serde_json::Error) -> Self {
        Failure::Input(e.to_string())
    }
}

type CmdResult = Result<(), Failure>;

fn emit(out: Option<&Path>, body: &str) -> CmdResult {
    match out {
        Some(p) => std::fs::write(p, body).map_err(|e| Failure::Input(format!("cannot write {}: {e}", p.display()))),
        None => {
            print!("{body}");
            Ok(())
        }
    }
}

fn write_in_dir(dir: &Path, name: &str, body: &str) -> CmdResult {
    std::fs::create_dir_all(dir).map_err(|e| Failure::Input(format!("cannot create {}: {e}", dir.display())))?;
    emit(Some(&dir.join(name)), body)
}

fn cmd_grad_check(a: GradCheckArgs) -> CmdResult {
    let r = grad_check(a.cases, a.tolerance, a.seed)?;
    let body = match a.output.format {
        Format::Csv => r.to_csv(),
        Format::Machine => serde_json::to_string_pretty(&r)? + "\n",
    };
    emit(a.output.out.as_deref(), &body)?;
    eprintln!(
        "max relative error {:e} (tolerance {:e}) over {} cases",
        r.max_error(),
        r.tolerance,
        r.cases
    );
    if r.passed() {
        Ok(())
    } else {
        Err(Failure::Tolerance(format!(
            "max relative error {:e} exceeds {:e}",
            r.max_error(),
            r.tolerance
        )))
    }
}

fn print_summary(summary: &[SummaryRow]) {
    for s in summary {
        eprintln!(
            "K={} {}: mRecall {:.4} ± {:.4}, Recall {:.4} ± {:.4}, missing rate {:.4} (n={})",
            s.shots, s.loss, s.m_recall.mean, s.m_recall.std, s.recall.mean, s.recall.std, s.missing_rate.mean, s.n
        );
    }
}

fn machine_body<T: serde::Serialize>(rows: &T, summary: &[SummaryRow]) -> Result<String, Failure> {
    Ok(serde_json::to_string_pretty(&serde_json::json!({ "rows": rows, "summary": summary }))? + "\n")
}

fn cmd_simulate(a: SimulateArgs) -> CmdResult {
    let mut sim = SimConfig::default();
    if let Some(c) = a.classes {
        sim = sim.with_classes(c);
    }
    if let Some(n) = a.scenes {
        sim.num_scenes = n;
    }
    let mut train = TrainConfig::default();
    if let Some(s) = a.steps {
        train.steps = s;
    }
    if let Some(lr) = a.lr {
        train.learning_rate = lr;
    }
    if let Some(m) = a.momentum {
        train.momentum = m;
    }
    if let Some(w) = a.weight_decay {
        train.weight_decay = w;
    }
    let losses = match a.loss {
        LossArg::Ce => vec![LossKind::StandardCe],
        LossArg::Dc => vec![LossKind::Decoupled],
        LossArg::Both => vec![LossKind::StandardCe, LossKind::Decoupled],
    };
    let cfg = ExperimentConfig {
        seeds: a.seeds.0,
        shots: a.shots,
        sim,
        train,
        losses,
    };
    let started = Instant::now();
    let rows = simulate(&cfg)?;
    let summary = summarize(&rows);
    let (rows_body, summary_body) = match a.output.format {
        Format::Csv => (rows_to_csv(&rows), summary_to_csv(&summary)),
        Format::Machine => (machine_body(&rows, &summary)?, String::new()),
    };
    match a.output.out.as_deref() {
        Some(dir) => {
            let manifest = RunManifest {
                tool_version: env!("CARGO_PKG_VERSION").to_string(),
                created_unix: SystemTime::now()
                    .duration_since(UNIX_EPOCH)
                    .map(|d| d.as_secs())
                    .unwrap_or(0),
                elapsed_seconds: started.elapsed().as_secs_f64(),
                config: cfg,
                rows,
            };
            match a.output.format {
                Format::Csv => {
                    write_in_dir(dir, "results.csv", &rows_body)?;
                    write_in_dir(dir, "summary.csv", &summary_body)?;
                }
                Format::Machine => write_in_dir(dir, "results.json", &rows_body)?,
            }
            write_in_dir(dir, "manifest.json", &(serde_json::to_string_pretty(&manifest)? + "\n"))?;
        }
        None => emit(None, &rows_body)?,
    }
    print_summary(&summary);
    Ok(())
}

fn load_annotations(paths: &[PathBuf]) -> Result<AnnotationSet, Error> {
    let mut iter = paths.iter();
    let mut set = parse_annotations(iter.next().expect("clap requires one file"))?;
    for p in iter {
        set.merge(parse_annotations(p)?)?;
    }
    Ok(set)
}

fn fmt_rate(r: Option<f64>) -> String {
    r.map(|v| v.to_string()).unwrap_or_default()
}

fn cmd_missing_rate(a: MissingRateArgs) -> CmdResult {
    let anns = load_annotations(&a.annotations)?;
    let split = load_split_files(&a.split, &anns, a.shots)?;
    for w in &split.warnings {
        eprintln!("warning: {w}");
    }
    let novel: BTreeSet<u64> = match a.novel {
        Some(v) => v.into_iter().collect(),
        None => split
            .per_category
            .iter()
            .filter(|(_, ids)| !ids.is_empty())
            .map(|(c, _)| *c)
            .collect(),
    };
    let base: BTreeSet<u64> = match a.base {
        Some(v) => v.into_iter().collect(),
        None => anns.categories.keys().copied().filter(|c| !novel.contains(c)).collect(),
    };
    let kinds = match a.scope {
        ScopeArg::Fsod => vec![ScopeKind::NovelOnly],
        ScopeArg::Gfsod => vec![ScopeKind::BasePlusNovel],
        ScopeArg::Both => vec![ScopeKind::NovelOnly, ScopeKind::BasePlusNovel],
    };
    let opts = RateOptions {
        include_crowd: a.include_crowd,
        image_counting: if a.per_category_images {
            ImageCounting::PerShotCategory
        } else {
            ImageCounting::Once
        },
    };
    let mut reports: Vec<(ScopeKind, MissingRateReport)> = Vec::new();
    for kind in kinds {
        let scope = ClassScope::new(kind, base.clone(), novel.clone())?;
        reports.push((kind, compute_missing_rate(&anns, &split, &scope, opts)?));
    }
    let body = match a.output.format {
        Format::Csv => {
            let mut s = String::from("scope,shots,category,present,labeled,missing_rate\n");
            for (kind, r) in &reports {
                let _ = writeln!(
                    s,
                    "{},{},all,{},{},{}",
                    kind.label(),
                    split.shots,
                    r.present,
                    r.labeled,
                    r.rate
                );
                for (c, cr) in &r.per_category {
                    let _ = writeln!(
                        s,
                        "{},{},{},{},{},{}",
                        kind.label(),
                        split.shots,
                        c,
                        cr.present,
                        cr.labeled,
                        fmt_rate(cr.rate)
                    );
                }
            }
            s
        }
        Format::Machine => {
            let v: Vec<_> = reports
                .iter()
                .map(|(k, r)| serde_json::json!({ "scope": k.label(), "shots": split.shots, "report": r }))
                .collect();
            serde_json::to_string_pretty(&v)? + "\n"
        }
    };
    emit(a.output.out.as_deref(), &body)?;
    for (kind, r) in &reports {
        eprintln!(
            "{} missing rate {:.4} ({} of {} instances unlabeled)",
            kind.label(),
            r.rate,
            r.present - r.labeled,
            r.present
        );
    }
    Ok(())
}

fn cmd_report(a: ReportArgs) -> CmdResult {
    let mut manifests = Vec::with_capacity(a.manifests.len());
    for p in &a.manifests {
        let text =
            std::fs::read_to_string(p).map_err(|e| Failure::Input(format!("cannot read {}: {e}", p.display())))?;
        let m: RunManifest =
            serde_json::from_str(&text).map_err(|e| Failure::Input(format!("{}: {e}", p.display())))?;
        manifests.push(m);
    }
    let (rows, summary) = report(&manifests)?;
    match (a.output.format, a.output.out.as_deref()) {
        (Format::Csv, Some(dir)) => {
            write_in_dir(dir, "results.csv", &rows_to_csv(&rows))?;
            write_in_dir(dir, "summary.csv", &summary_to_csv(&summary))?;
        }
        (Format::Csv, None) => emit(None, &summary_to_csv(&summary))?,
        (Format::Machine, Some(dir)) => write_in_dir(dir, "report.json", &machine_body(&rows, &summary)?)?,
        (Format::Machine, None) => emit(None, &machine_body(&rows, &summary)?)?,
    }
    print_summary(&summary);
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::GradCheck(a) => cmd_grad_check(a),
        Command::Simulate(a) => cmd_simulate(a),
        Command::MissingRate(a) => cmd_missing_rate(a),
        Command::Report(a) => cmd_report(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Tolerance(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(EXIT_FAILURE)
        }
        Err(Failure::Usage(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(EXIT_USAGE)
        }
        Err(Failure::Input(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(EXIT_INPUT)
        }
    }
}
