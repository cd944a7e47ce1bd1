use std::collections::BTreeMap;
use std::fs::File;
use std::io::{self, BufReader, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use dart_core::adaptive::{AdaptiveConfig, Strategy};
use dart_core::difficulty::{difficulty_with, DifficultyConfig, DifficultyScore, DifficultyWeights};
use dart_core::engine::{read_outcomes, simulate, write_outcomes, DifficultySource, SimOptions};
use dart_core::image::load_image;
use dart_core::metrics::{compare, compare_runs, render_rows, MethodSummary, ReportFormat};
use dart_core::optimizer::{
    build_mdp, evaluate_objective, extract_thresholds, grid_search, quantile_candidates,
    value_iterate, MdpConfig, ObjectiveConfig, SolverConfig, DEFAULT_GRID_CAP,
};
use dart_core::policy::{read_policy, write_policy, PolicyFile};
use dart_core::trace::{read_trace, synth_trace, write_trace, SynthConfig, TraceSet};
use rayon::prelude::*;
use serde::Deserialize;

mod output;

use output::{write_atomic, InputError};

#[derive(Parser)]
#[command(name = "dart", version, about = "Difficulty-aware early-exit policy engine")]
struct Cli {
    /// Worker threads for parallel stages (default: all cores).
    #[arg(long, global = true)]
    jobs: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Score images for difficulty.
    Difficulty(DifficultyArgs),
    /// Generate a synthetic calibrated trace.
    Synth(SynthArgs),
    /// Print per-exit quantile threshold candidates.
    Calibrate(CalibrateArgs),
    /// Optimize exit thresholds and write a policy file.
    Optimize(OptimizeArgs),
    /// Replay a trace through a policy.
    Simulate(SimulateArgs),
    /// Summarize outcomes, or compute comparison rows from a summary table.
    Report(ReportArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Table,
    Csv,
    Json,
}

impl From<Format> for ReportFormat {
    fn from(f: Format) -> Self {
        match f {
            Format::Table => ReportFormat::Table,
            Format::Csv => ReportFormat::Csv,
            Format::Json => ReportFormat::Json,
        }
    }
}

#[derive(Args)]
struct DifficultyArgs {
    #[arg(required = true)]
    images: Vec<PathBuf>,
    /// Edge, variance and gradient weights.
    #[arg(long, value_delimiter = ',', default_value = "0.4,0.3,0.3")]
    weights: Vec<f64>,
    /// Edge threshold is mean + k * stddev of the gradient magnitude.
    #[arg(long, default_value_t = 1.0)]
    edge_k: f64,
    #[arg(long, value_enum, default_value_t = Format::Table)]
    format: Format,
}

fn parse_bias(s: &str) -> Result<(usize, f64), String> {
    let (c, v) = s.split_once('=').ok_or("expected CLASS=OFFSET")?;
    Ok((
        c.trim().parse().map_err(|e| format!("class {c:?}: {e}"))?,
        v.trim().parse().map_err(|e| format!("offset {v:?}: {e}"))?,
    ))
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long, default_value_t = 3, value_parser = clap::value_parser!(u64).range(1..))]
    exits: u64,
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
    samples: u64,
    #[arg(long, default_value_t = 10, value_parser = clap::value_parser!(u64).range(2..))]
    classes: u64,
    #[arg(long, env = "DART_SEED", default_value_t = 0)]
    seed: u64,
    /// Per-class difficulty offsets, e.g. `--bias 0=-0.3 --bias 2=0.3`.
    #[arg(long, value_parser = parse_bias)]
    bias: Vec<(usize, f64)>,
    #[arg(long, default_value_t = 1.0e9)]
    total_macs: f64,
    #[arg(long, default_value_t = 1.0)]
    total_time_ms: f64,
    #[arg(long, default_value_t = 50.0)]
    total_energy_mj: f64,
    /// Output trace; stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
}

const QUANTILES: &str = "0.1,0.2,0.3,0.4,0.5,0.6,0.7,0.8,0.9";

#[derive(Args)]
struct CalibrateArgs {
    #[arg(long)]
    trace: PathBuf,
    #[arg(long, value_delimiter = ',', default_value = QUANTILES)]
    quantiles: Vec<f64>,
    #[arg(long, value_enum, default_value_t = Format::Table)]
    format: Format,
}

#[derive(Clone, Copy, ValueEnum)]
enum Method {
    Grid,
    Dp,
}

#[derive(Args)]
struct OptimizeArgs {
    #[arg(long)]
    trace: PathBuf,
    #[arg(long, value_enum, default_value_t = Method::Grid)]
    method: Method,
    #[arg(long, default_value_t = 0.3)]
    beta_opt: f64,
    #[arg(long, value_delimiter = ',', default_value = QUANTILES)]
    quantiles: Vec<f64>,
    #[arg(long, default_value_t = 10)]
    alpha_bins: usize,
    #[arg(long, default_value_t = 10)]
    conf_bins: usize,
    /// Refuse grids with more combinations than this.
    #[arg(long, default_value_t = DEFAULT_GRID_CAP)]
    grid_cap: u128,
    /// Difficulty sensitivity stored in the policy.
    #[arg(long, default_value_t = 0.3)]
    beta_diff: f64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum SourceArg {
    Auto,
    Stored,
    Image,
    Constant,
}

#[derive(Args)]
struct SimulateArgs {
    #[arg(long)]
    trace: PathBuf,
    /// Policy file; thresholds of 1.0 (no early exit) when absent.
    #[arg(long)]
    policy: Option<PathBuf>,
    /// Overrides the policy's difficulty sensitivity.
    #[arg(long)]
    beta_diff: Option<f64>,
    #[arg(long)]
    adaptive: bool,
    /// Let UCB1 pick the adaptation strategy each period.
    #[arg(long, requires = "adaptive")]
    bandit: bool,
    #[arg(long, default_value = "both", requires = "adaptive")]
    strategy: Strategy,
    #[arg(long, default_value_t = 0.85)]
    target_accuracy: f64,
    #[arg(long, default_value_t = 1000)]
    window: usize,
    #[arg(long, default_value_t = 100)]
    cadence: usize,
    #[arg(long, value_enum, default_value_t = SourceArg::Auto)]
    difficulty_source: SourceArg,
    /// Difficulty used with `--difficulty-source constant`.
    #[arg(long, required_if_eq("difficulty_source", "constant"))]
    alpha: Option<f64>,
    /// Directory that relative image paths in the trace are resolved against.
    #[arg(long)]
    image_root: Option<PathBuf>,
    /// Replay samples in a seeded random order.
    #[arg(long)]
    shuffle: bool,
    #[arg(long, env = "DART_SEED", default_value_t = 0)]
    seed: u64,
    /// Outcome stream, one JSON object per line.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Coefficient update events, one JSON object per line.
    #[arg(long, requires = "adaptive")]
    adapt_log: Option<PathBuf>,
    /// Policy with the final adapted coefficients.
    #[arg(long)]
    policy_out: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = Format::Table)]
    format: Format,
}

#[derive(Args)]
struct ReportArgs {
    /// Outcome stream written by `simulate --out`.
    #[arg(long, conflicts_with = "summary", required_unless_present = "summary")]
    outcomes: Option<PathBuf>,
    /// Static-baseline outcome stream.
    #[arg(long, requires = "outcomes")]
    baseline: Option<PathBuf>,
    /// CSV with columns dataset,model,method,accuracy,time_ms,energy_mj[,alpha];
    /// the `Static` row of each dataset/model group is the baseline.
    #[arg(long)]
    summary: Option<PathBuf>,
    /// Difficulty used for DAES instead of the recorded mean.
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long, default_value = "model")]
    model: String,
    #[arg(long, default_value = "candidate")]
    method: String,
    #[arg(long, value_enum, default_value_t = Format::Table)]
    format: Format,
}

fn open(path: &Path) -> Result<BufReader<File>> {
    File::open(path)
        .map(BufReader::new)
        .map_err(|e| InputError(format!("{}: {e}", path.display())).into())
}

fn load_trace(path: &Path) -> Result<TraceSet> {
    read_trace(open(path)?).with_context(|| format!("reading trace {}", path.display()))
}

fn emit(out: Option<&Path>, body: impl FnOnce(&mut dyn Write) -> Result<()>) -> Result<()> {
    match out {
        Some(p) => write_atomic(p, body),
        None => {
            let stdout = io::stdout();
            let mut lock = stdout.lock();
            body(&mut lock)?;
            lock.flush()?;
            Ok(())
        }
    }
}

fn score_cells(s: &DifficultyScore) -> [String; 4] {
    [s.edge, s.variance, s.gradient, s.fused].map(|v| format!("{v:.6}"))
}

fn cmd_difficulty(a: DifficultyArgs) -> Result<()> {
    let [edge, variance, gradient] = a.weights[..] else {
        bail!("--weights needs exactly three values");
    };
    let cfg = DifficultyConfig {
        weights: DifficultyWeights::new(edge, variance, gradient)?,
        edge_k: a.edge_k,
    };
    let results: Vec<_> = a
        .images
        .par_iter()
        .map(|p| load_image(p).and_then(|img| difficulty_with(&img, &cfg)))
        .collect();

    let mut ok = Vec::new();
    let mut failed = Vec::new();
    for (path, r) in a.images.iter().zip(results) {
        match r {
            Ok(s) => ok.push((path.display().to_string(), s)),
            Err(e) => {
                eprintln!("{}: {e}", path.display());
                failed.push(path.display().to_string());
            }
        }
    }

    let mut out = String::new();
    match a.format {
        Format::Json => {
            let rows: Vec<_> = ok
                .iter()
                .map(|(p, s)| serde_json::json!({"path": p, "score": s}))
                .collect();
            out = serde_json::to_string_pretty(&rows)?;
            out.push('\n');
        }
        Format::Csv => {
            out.push_str("path,edge,variance,gradient,fused\n");
            for (p, s) in &ok {
                out.push_str(&format!("{p},{}\n", score_cells(s).join(",")));
            }
        }
        Format::Table => {
            let width = ok.iter().map(|(p, _)| p.len()).max().unwrap_or(4).max(4);
            out.push_str(&format!(
                "{:<width$}  {:>8}  {:>8}  {:>8}  {:>8}\n",
                "path", "edge", "variance", "gradient", "fused"
            ));
            for (p, s) in &ok {
                let [e, v, g, f] = score_cells(s);
                out.push_str(&format!("{p:<width$}  {e:>8}  {v:>8}  {g:>8}  {f:>8}\n"));
            }
        }
    }
    print!("{out}");
    if !failed.is_empty() {
        return Err(InputError(format!("failed to score: {}", failed.join(", "))).into());
    }
    Ok(())
}

fn cmd_synth(a: SynthArgs) -> Result<()> {
    let mut cfg = SynthConfig::new(a.exits as usize, a.samples as usize, a.classes as usize, a.seed)
        .with_bias(a.bias.into_iter().collect::<BTreeMap<_, _>>());
    cfg.total_macs = a.total_macs;
    cfg.total_time_ms = a.total_time_ms;
    cfg.total_energy_mj = a.total_energy_mj;
    let trace = synth_trace(&cfg)?;
    emit(a.out.as_deref(), |w| Ok(write_trace(&trace, w)?))
}

fn cmd_calibrate(a: CalibrateArgs) -> Result<()> {
    let trace = load_trace(&a.trace)?;
    let cands = quantile_candidates(&trace, &a.quantiles)?;
    match a.format {
        Format::Json => println!("{}", serde_json::to_string_pretty(&cands)?),
        Format::Csv => {
            println!("exit,candidates");
            for (i, c) in cands.iter().enumerate() {
                let vals: Vec<String> = c.iter().map(|v| v.to_string()).collect();
                println!("{},\"{}\"", i + 1, vals.join(","));
            }
        }
        Format::Table => {
            for (i, c) in cands.iter().enumerate() {
                let vals: Vec<String> = c.iter().map(|v| format!("{v:.4}")).collect();
                println!("exit {}: {}", i + 1, vals.join(" "));
            }
        }
    }
    Ok(())
}

fn cmd_optimize(a: OptimizeArgs) -> Result<()> {
    let trace = load_trace(&a.trace)?;
    let cfg = ObjectiveConfig::new(a.beta_opt)?;
    let mut meta = serde_json::Map::new();
    let (thresholds, objective) = match a.method {
        Method::Grid => {
            let cands = quantile_candidates(&trace, &a.quantiles)?;
            let r = grid_search(&cands, &trace, &cfg, a.grid_cap)?;
            meta.insert("method".into(), "grid".into());
            meta.insert("evaluated".into(), r.evaluated.into());
            (r.thresholds, r.objective)
        }
        Method::Dp => {
            let mdp = build_mdp(
                &trace,
                &MdpConfig {
                    alpha_bins: a.alpha_bins,
                    conf_bins: a.conf_bins,
                },
                &cfg,
            )?;
            let q = value_iterate(&mdp, &SolverConfig::default())?;
            let ex = extract_thresholds(&q, &mdp)?;
            if !ex.non_monotone.is_empty() {
                eprintln!(
                    "warning: exit preference not monotone in confidence for {} (exit, difficulty bin) pairs",
                    ex.non_monotone.len()
                );
            }
            let j = evaluate_objective(&ex.thresholds, &trace, &cfg)?;
            meta.insert("method".into(), "dp".into());
            meta.insert("non_monotone".into(), serde_json::to_value(&ex.non_monotone)?);
            (ex.thresholds, j)
        }
    };
    meta.insert("objective".into(), objective.into());
    meta.insert("beta_opt".into(), a.beta_opt.into());
    let policy = PolicyFile {
        thresholds: thresholds.values().to_vec(),
        beta_diff: a.beta_diff,
        coefficients: None,
        meta,
    };
    policy.to_policy()?;
    write_atomic(&a.out, |w| Ok(write_policy(&policy, w)?))?;
    let tau: Vec<String> = thresholds.values().iter().map(|v| format!("{v:.4}")).collect();
    println!("J = {objective:.6}  tau = [{}]", tau.join(", "));
    Ok(())
}

fn cmd_simulate(a: SimulateArgs) -> Result<()> {
    let trace = load_trace(&a.trace)?;
    let mut file = match &a.policy {
        Some(p) => read_policy(open(p)?).with_context(|| format!("reading policy {}", p.display()))?,
        None => PolicyFile {
            thresholds: vec![1.0; trace.num_exits() - 1],
            beta_diff: 0.0,
            coefficients: None,
            meta: Default::default(),
        },
    };
    if let Some(b) = a.beta_diff {
        file.beta_diff = b;
    }
    let policy = file.to_policy()?;

    let adaptive = a.adaptive.then(|| AdaptiveConfig {
        target_accuracy: a.target_accuracy,
        window: a.window,
        cadence: a.cadence,
        strategy: a.strategy,
        use_bandit: a.bandit,
        ..AdaptiveConfig::default()
    });
    let difficulty_source = match a.difficulty_source {
        SourceArg::Auto => DifficultySource::Auto,
        SourceArg::Stored => DifficultySource::Stored,
        SourceArg::Image => DifficultySource::Image,
        SourceArg::Constant => {
            DifficultySource::Constant(a.alpha.ok_or_else(|| anyhow!("--alpha is required"))?)
        }
    };
    let image_root = a
        .image_root
        .clone()
        .or_else(|| a.trace.parent().map(Path::to_path_buf));
    let opts = SimOptions {
        adaptive,
        difficulty_source,
        image_root,
        shuffle_seed: a.shuffle.then_some(a.seed),
        ..SimOptions::default()
    };
    let run = simulate(&trace, &policy, &opts)?;

    if let Some(p) = &a.out {
        write_atomic(p, |w| Ok(write_outcomes(&run.outcomes, w)?))?;
    }
    if let Some(p) = &a.adapt_log {
        write_atomic(p, |w| {
            for e in &run.adapt_log {
                serde_json::to_writer(&mut *w, e)?;
                w.write_all(b"\n")?;
            }
            Ok(())
        })?;
    }
    if let Some(p) = &a.policy_out {
        let mut adapted = file.clone();
        adapted.coefficients = Some(run.final_coefficients.clone());
        write_atomic(p, |w| Ok(write_policy(&adapted, w)?))?;
    }

    let r = &run.report;
    match a.format {
        Format::Json => println!("{}", serde_json::to_string_pretty(r)?),
        Format::Table | Format::Csv => {
            let profile = trace.profile();
            let summary = MethodSummary::from_report(&profile.model_name, "simulated", r);
            print!("{}", render_rows(&[compare(None, &summary, None)?], a.format.into())?);
            if matches!(a.format, Format::Table) {
                let hist: Vec<String> = r.exit_histogram.iter().map(|h| format!("{h:.3}")).collect();
                println!("exit fractions: {}", hist.join(" "));
                if let Some(d) = r.mean_difficulty {
                    println!("mean difficulty: {d:.4}  overhead: {:.4} ms/sample", r.overhead_ms);
                }
            }
        }
    }
    Ok(())
}

#[derive(Deserialize)]
struct SummaryRow {
    #[serde(default)]
    dataset: String,
    model: String,
    method: String,
    accuracy: Option<f64>,
    time_ms: f64,
    energy_mj: f64,
    alpha: Option<f64>,
}

fn cmd_report(a: ReportArgs) -> Result<()> {
    if let Some(path) = &a.summary {
        let mut reader = csv::Reader::from_reader(open(path)?);
        let rows: Vec<SummaryRow> = reader
            .deserialize()
            .collect::<Result<_, _>>()
            .with_context(|| format!("reading {}", path.display()))?;
        let summary = |r: &SummaryRow| MethodSummary {
            model: r.model.clone(),
            method: r.method.clone(),
            accuracy: r.accuracy,
            time_ms: r.time_ms,
            energy_mj: r.energy_mj,
            alpha: r.alpha,
        };
        let mut out = Vec::with_capacity(rows.len());
        for r in &rows {
            let base = rows
                .iter()
                .find(|b| {
                    b.dataset == r.dataset && b.model == r.model && b.method.eq_ignore_ascii_case("static")
                })
                .ok_or_else(|| anyhow!("no Static row for {} {}", r.dataset, r.model))?;
            out.push(compare(Some(&summary(base)), &summary(r), a.alpha)?);
        }
        print!("{}", render_rows(&out, a.format.into())?);
        return Ok(());
    }

    let path = a.outcomes.as_ref().expect("clap enforces --outcomes");
    let outcomes = read_outcomes(open(path)?)?;
    let run = dart_core::metrics::aggregate(&outcomes, 0.0)?;
    let base = match &a.baseline {
        Some(p) => Some(dart_core::metrics::aggregate(&read_outcomes(open(p)?)?, 0.0)?),
        None => None,
    };
    match a.format {
        Format::Json => {
            let body = match &base {
                Some(b) => serde_json::json!({
                    "run": run,
                    "comparison": compare_runs(b, &run, a.alpha)?,
                }),
                None => serde_json::json!({ "run": run }),
            };
            println!("{}", serde_json::to_string_pretty(&body)?);
        }
        Format::Table | Format::Csv => {
            let cand = MethodSummary::from_report(&a.model, &a.method, &run);
            let mut rows = Vec::new();
            match &base {
                Some(b) => {
                    let b = MethodSummary::from_report(&a.model, "baseline", b);
                    rows.push(compare(Some(&b), &b, a.alpha.or(cand.alpha))?);
                    rows.push(compare(Some(&b), &cand, a.alpha)?);
                }
                None => rows.push(compare(None, &cand, a.alpha)?),
            }
            print!("{}", render_rows(&rows, a.format.into())?);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(n) = cli.jobs {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: {e}");
            return ExitCode::FAILURE;
        }
    }
    let result = match cli.command {
        Command::Difficulty(a) => cmd_difficulty(a),
        Command::Synth(a) => cmd_synth(a),
        Command::Calibrate(a) => cmd_calibrate(a),
        Command::Optimize(a) => cmd_optimize(a),
        Command::Simulate(a) => cmd_simulate(a),
        Command::Report(a) => cmd_report(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.downcast_ref::<InputError>().is_some() {
                ExitCode::from(2)
            } else {
                ExitCode::FAILURE
            }
        }
    }
}
