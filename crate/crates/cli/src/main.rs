use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::str::FromStr;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use cicada_core::catalog::{generate_model, CostProfile, ModelFamily};
use cicada_core::metrics::{
    check_event_log, parse_csv, parse_json, render_svg, to_csv, to_json, utilization, EventLog, GanttFormat, RunHeader,
};
use cicada_core::pipeline::{
    PipelineError, Runtime, RuntimeConfig, SimConfig, Simulator, StrategyConfig, StrategyName,
};
use cicada_core::rng::seed_override;
use cicada_core::workload::{
    parse_trace, run_experiment, synthesize_trace, write_trace, DriverMode, ExperimentPlan, ModelCatalog, TraceRecord,
};

#[derive(Parser)]
#[command(name = "cicada", version, about = "Pipelined layer-wise model loading: simulator, runtime and benchmarks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic model descriptor and its weight files.
    Gen(GenArgs),
    /// Run one inference request against a generated model.
    Run(RunArgs),
    /// Replay a trace under several strategies and write comparison reports.
    Bench(BenchArgs),
    /// Convert a recorded event log to SVG, CSV or JSON.
    Gantt(GanttArgs),
    /// Check the stage ordering invariants of a recorded event log.
    Verify(VerifyArgs),
}

#[derive(Args)]
struct GenArgs {
    #[arg(long, value_parser = ModelFamily::from_str)]
    family: ModelFamily,
    /// Defaults to the family's reference layer count.
    #[arg(long)]
    layers: Option<u32>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 1.0 / 64.0)]
    size_factor: f64,
    /// (rows, cols) of custom-family kernels, as ROWSxCOLS.
    #[arg(long, default_value = "1x1", value_parser = parse_kernel)]
    kernel: (u32, u32),
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    Virtual,
    Real,
}

impl From<Mode> for DriverMode {
    fn from(m: Mode) -> Self {
        match m {
            Mode::Virtual => DriverMode::Virtual,
            Mode::Real => DriverMode::Real,
        }
    }
}

#[derive(Args)]
struct RunArgs {
    /// Directory written by `cicada gen`.
    #[arg(long)]
    model: PathBuf,
    #[arg(long, default_value = "cicada", value_parser = StrategyName::from_str)]
    strategy: StrategyName,
    #[arg(long, default_value_t = 0)]
    input_seed: u64,
    #[arg(long, value_enum, default_value_t = Mode::Virtual)]
    mode: Mode,
    /// Real seconds per model second (real mode). Host work is not
    /// scaled, so small values inflate measured stage times.
    #[arg(long, default_value_t = 1.0)]
    time_scale: f64,
    #[arg(long, default_value_t = 1)]
    max_parallel_reads: usize,
    /// Write the event log here (JSON).
    #[arg(long)]
    events: Option<PathBuf>,
}

#[derive(Args)]
struct BenchArgs {
    /// `offset_ms,model_id` CSV; without it a trace is synthesized.
    #[arg(long, conflicts_with_all = ["synth_minutes", "synth_count", "burstiness"])]
    trace: Option<PathBuf>,
    #[arg(long, default_value_t = 60)]
    synth_minutes: u32,
    #[arg(long, default_value_t = 2426)]
    synth_count: u64,
    #[arg(long, default_value_t = 0.5)]
    burstiness: f64,
    /// Model directories from `cicada gen`. Without them models are
    /// generated from `--families` into `<out-dir>/models`.
    #[arg(long, value_delimiter = ',')]
    models: Vec<PathBuf>,
    /// FAMILY[:LAYERS] list used when no `--models` are given.
    #[arg(long, value_delimiter = ',', default_value = "vgg:5,resnet:10")]
    families: Vec<String>,
    #[arg(long, default_value_t = 1.0 / 1024.0)]
    size_factor: f64,
    #[arg(long, value_delimiter = ',', default_value = "sp,mini,preload,cicada", value_parser = StrategyName::from_str)]
    strategies: Vec<StrategyName>,
    #[arg(long)]
    out_dir: PathBuf,
    #[arg(long, value_enum, default_value_t = Mode::Virtual)]
    mode: Mode,
    #[arg(long, default_value_t = 1.0 / 16.0)]
    time_scale: f64,
    #[arg(long, default_value_t = 1)]
    repeat: u32,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 8)]
    max_in_flight: usize,
    #[arg(long, default_value_t = 1)]
    max_parallel_reads: usize,
}

#[derive(Args)]
struct GanttArgs {
    /// Event log, JSON (`.json`) or CSV.
    #[arg(long)]
    events: PathBuf,
    #[arg(long, default_value = "svg", value_parser = GanttFormat::from_str)]
    format: GanttFormat,
    /// Defaults to stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct VerifyArgs {
    #[arg(long)]
    events: PathBuf,
}

fn parse_kernel(s: &str) -> Result<(u32, u32), String> {
    let (r, c) = s.split_once(['x', 'X']).ok_or_else(|| format!("expected ROWSxCOLS, got `{s}`"))?;
    let parse = |v: &str| v.trim().parse::<u32>().map_err(|e| format!("`{v}`: {e}"));
    Ok((parse(r)?, parse(c)?))
}

fn seed(s: u64) -> u64 {
    seed_override().unwrap_or(s)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let outcome = match cli.command {
        Command::Gen(a) => gen(a),
        Command::Run(a) => run(a),
        Command::Bench(a) => bench(a),
        Command::Gantt(a) => gantt(a),
        Command::Verify(a) => verify(a),
    };
    match outcome {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {}", describe(&e));
            ExitCode::from(2)
        }
    }
}

/// The error chain, skipping causes that a wrapper already printed.
fn describe(e: &anyhow::Error) -> String {
    let mut out = String::new();
    for cause in e.chain() {
        let text = cause.to_string();
        if !out.contains(&text) {
            if !out.is_empty() {
                out.push_str(": ");
            }
            out.push_str(&text);
        }
    }
    out
}

fn gen(a: GenArgs) -> Result<ExitCode> {
    let seed = seed(a.seed);
    let profile = CostProfile { size_factor: a.size_factor, custom_kernel: a.kernel, ..CostProfile::default() };
    let layers = a.layers.unwrap_or(a.family.defaults().default_layers);
    let model = generate_model(a.family, layers, seed, &profile)?;
    let id = model.model_id.clone();
    let bytes = model.total_weight_bytes;
    ModelCatalog::new().add_generated(model, seed, &a.out)?;
    println!("{id}: {layers} layers, {bytes} weight bytes -> {}", a.out.display());
    Ok(ExitCode::SUCCESS)
}

fn run(a: RunArgs) -> Result<ExitCode> {
    let mut catalog = ModelCatalog::new();
    let id = catalog.load_model_dir(&a.model)?;
    let strategy = StrategyConfig::of(a.strategy);
    let input_seed = seed(a.input_seed);
    let trace = vec![TraceRecord { offset_ms: 0, model_id: id.clone() }];
    let request = ExperimentPlan::new(trace, catalog, input_seed).request(0);
    let header = RunHeader {
        strategy: a.strategy.to_string(),
        model_id: id.clone(),
        seed: input_seed,
        time_scale: a.time_scale,
        wall_clock: None,
    };
    let (result, log) = match a.mode {
        Mode::Virtual => {
            let cfg = SimConfig { max_parallel_reads: a.max_parallel_reads, ..SimConfig::for_strategy(strategy) };
            let mut out = Simulator::new(cfg).run(vec![request]);
            let log = out.event_log(header);
            (out.results.remove(0).map_err(|f| f.error), log)
        }
        Mode::Real => {
            let rt = Runtime::start(RuntimeConfig {
                strategy,
                time_scale: a.time_scale,
                engine: cicada_core::decoupler::EngineConfig {
                    max_parallel_reads: a.max_parallel_reads,
                    ..Default::default()
                },
                ..RuntimeConfig::default()
            });
            let result = rt.run_request(request);
            (result, rt.event_log(header))
        }
    };
    if let Some(path) = &a.events {
        fs::write(path, to_json(&log)?).with_context(|| format!("writing {}", path.display()))?;
    }
    let res = match result {
        Ok(res) => res,
        Err(e @ PipelineError::InvariantViolation(_)) => {
            eprintln!("invariant violation: {e}");
            return Ok(ExitCode::from(1));
        }
        Err(e) => bail!(e),
    };
    let violations = check_event_log(&log);
    for v in &violations {
        eprintln!("invariant violation: {v}");
    }
    let util = utilization(&res.events)?;
    println!("model       {id}");
    println!("strategy    {}", a.strategy);
    println!("latency_us  {}", res.latency);
    println!("layer_wait  {}", res.layer_wait);
    println!("utilization {:.4}", util.utilization);
    let shown: Vec<String> = res.output.iter().take(8).map(|v| format!("{v:.6}")).collect();
    println!("output      [{}{}]", shown.join(", "), if res.output.len() > 8 { ", ..." } else { "" });
    Ok(if violations.is_empty() { ExitCode::SUCCESS } else { ExitCode::from(1) })
}

fn bench(a: BenchArgs) -> Result<ExitCode> {
    let seed = seed(a.seed);
    fs::create_dir_all(&a.out_dir).with_context(|| format!("creating {}", a.out_dir.display()))?;
    let mut catalog = ModelCatalog::new();
    if a.models.is_empty() {
        let profile = CostProfile { size_factor: a.size_factor, ..CostProfile::default() };
        for spec in &a.families {
            let (family, layers) = match spec.split_once(':') {
                Some((f, l)) => (ModelFamily::from_str(f).map_err(anyhow::Error::msg)?, Some(l.parse::<u32>()?)),
                None => (ModelFamily::from_str(spec).map_err(anyhow::Error::msg)?, None),
            };
            let layers = layers.unwrap_or(family.defaults().default_layers);
            let model = generate_model(family, layers, seed, &profile)?;
            let dir = a.out_dir.join("models").join(&model.model_id);
            catalog.add_generated(model, seed, &dir)?;
        }
    } else {
        for dir in &a.models {
            catalog.load_model_dir(dir)?;
        }
    }
    let trace = match &a.trace {
        Some(path) => parse_trace(path, |m| catalog.contains(m))?,
        None => synthesize_trace(a.synth_minutes, a.synth_count.max(1), a.burstiness, seed, &catalog.ids()),
    };
    write_trace(&trace, &a.out_dir.join("trace.csv"))?;
    let mut plan = ExperimentPlan::new(trace, catalog, seed);
    plan.strategies = a.strategies.iter().map(|&s| StrategyConfig::of(s)).collect();
    plan.mode = a.mode.into();
    plan.time_scale = a.time_scale;
    plan.repeat_count = a.repeat;
    plan.max_in_flight = a.max_in_flight;
    plan.max_parallel_reads = a.max_parallel_reads;
    let report = run_experiment(&plan)?;
    report.write_artifacts(&a.out_dir, 10_000)?;
    println!(
        "{:<8} {:<22} {:>6} {:>12} {:>10} {:>10} {:>7}",
        "strategy", "model", "ok", "mean_us", "p50_us", "p99_us", "util"
    );
    for c in &report.cells {
        println!(
            "{:<8} {:<22} {:>6} {:>12.1} {:>10} {:>10} {:>7.4}{}",
            c.strategy.to_string(),
            c.model_id,
            format!("{}/{}", c.completed, c.requests),
            c.mean_latency_us,
            c.p50_latency_us,
            c.p99_latency_us,
            c.mean_utilization,
            c.error.as_ref().map(|e| format!("  ERROR {e}")).unwrap_or_default()
        );
    }
    println!("reports in {}", a.out_dir.display());
    Ok(ExitCode::SUCCESS)
}

fn load_log(path: &Path) -> Result<EventLog> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    if path.extension().is_some_and(|e| e.eq_ignore_ascii_case("csv")) {
        let mut log = EventLog::new(RunHeader {
            strategy: String::new(),
            model_id: String::new(),
            seed: 0,
            time_scale: 1.0,
            wall_clock: None,
        });
        log.events = parse_csv(&text)?;
        Ok(log)
    } else {
        Ok(parse_json(&text)?)
    }
}

fn gantt(a: GanttArgs) -> Result<ExitCode> {
    let log = load_log(&a.events)?;
    let text = match a.format {
        GanttFormat::Svg => render_svg(&log),
        GanttFormat::Csv => to_csv(&log.events)?,
        GanttFormat::Json => to_json(&log)?,
    };
    match &a.out {
        Some(path) => fs::write(path, text).with_context(|| format!("writing {}", path.display()))?,
        None => print!("{text}"),
    }
    Ok(ExitCode::SUCCESS)
}

fn verify(a: VerifyArgs) -> Result<ExitCode> {
    let log = load_log(&a.events)?;
    let violations = check_event_log(&log);
    if violations.is_empty() {
        println!("ok: {} intervals, no violations", log.events.len());
        return Ok(ExitCode::SUCCESS);
    }
    for v in &violations {
        println!("violation: {v}");
    }
    println!("{} violation(s)", violations.len());
    Ok(ExitCode::from(1))
}
