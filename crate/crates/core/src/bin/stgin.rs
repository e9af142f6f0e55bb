//! `stgin` command line: file-based pipeline stages
//! (synth → mask → train → impute → evaluate / report) plus a gradient check.
//!
//! Every stage writes `manifest.json` next to its outputs with the resolved
//! configuration, seeds, and SHA-256 hashes of every input and output file.

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use sha2::{Digest, Sha256};

use stgin::checkpoint;
use stgin::config::RunConfig;
use stgin::data::{apply_mask, synth_generate, Mask, MaskSpec, NormScheme, Regime, TrafficTensor, UnitTag};
use stgin::eval::{
    clip_negative, interval_coverage, interval_svg, mae, mse, run_benchmark, EvalCell, EvalReport, Method,
    ReportUnits,
};
use stgin::graph::SensorGraph;
use stgin::io::{read_matrix_csv, write_matrix_csv};
use stgin::model::{Architecture, GaussianField};
use stgin::train::{gradient_check, FittedModel};
use stgin::{Error, Result};

/// Default output directory when `--out` is omitted.
const OUT_DIR_ENV: &str = "STGIN_OUT_DIR";

#[derive(Parser, Debug)]
#[command(name = "stgin", version, about = "Graph-attention + BiGRU imputation for sensor networks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic ring dataset (data.csv, graph.csv, distances.csv).
    Synth(SynthArgs),
    /// Draw a held-out mask (mask.csv; 1 = observed, 0 = held out).
    Mask(MaskArgs),
    /// Train on the observed entries and write a checkpoint.
    Train(TrainArgs),
    /// Write imputed means and variances (mu.csv, sigma2.csv).
    Impute(ImputeArgs),
    /// Score an imputation, or run the method × regime × rate benchmark.
    Evaluate(EvaluateArgs),
    /// Compare analytic and finite-difference gradients on a small instance.
    Gradcheck(GradcheckArgs),
    /// Render report tables and interval plots.
    Report(ReportArgs),
}

#[derive(Args, Debug)]
struct OutArg {
    /// Output directory (defaults to $STGIN_OUT_DIR, then the current directory).
    #[arg(long)]
    out: Option<PathBuf>,
}

impl OutArg {
    fn dir(&self) -> PathBuf {
        self.out
            .clone()
            .or_else(|| std::env::var_os(OUT_DIR_ENV).map(PathBuf::from))
            .unwrap_or_else(|| PathBuf::from("."))
    }
}

#[derive(Args, Debug)]
struct SynthArgs {
    #[arg(long, default_value_t = 20)]
    nodes: usize,
    #[arg(long, default_value_t = 576)]
    steps: usize,
    #[arg(long, default_value_t = 2.0)]
    noise_std: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[command(flatten)]
    out: OutArg,
}

#[derive(Args, Debug)]
struct MaskArgs {
    /// Dataset CSV whose shape (and pre-existing gaps) the mask follows.
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value = "random")]
    regime: Regime,
    #[arg(long)]
    rate: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[command(flatten)]
    out: OutArg,
}

#[derive(Args, Debug)]
struct DataArgs {
    #[arg(long)]
    data: PathBuf,
    /// Mask CSV (1 = observed); entries marked 0 are hidden from the model.
    #[arg(long)]
    mask: Option<PathBuf>,
    /// Adjacency CSV.
    #[arg(long)]
    graph: PathBuf,
    /// speed, flow or synthetic.
    #[arg(long, default_value = "speed")]
    unit: UnitTag,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[command(flatten)]
    input: DataArgs,
    /// TOML run configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides training.seed (also seeds initialization).
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    architecture: Option<Architecture>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    learning_rate: Option<f64>,
    #[arg(long)]
    window_length: Option<usize>,
    /// minmax or zscore.
    #[arg(long, default_value = "minmax")]
    scheme: NormScheme,
    #[command(flatten)]
    out: OutArg,
}

#[derive(Args, Debug)]
struct ImputeArgs {
    #[command(flatten)]
    input: DataArgs,
    /// Checkpoint written by `train`.
    #[arg(long)]
    model: PathBuf,
    #[command(flatten)]
    out: OutArg,
}

#[derive(Args, Debug)]
struct EvaluateArgs {
    /// Ground-truth dataset CSV.
    #[arg(long)]
    data: PathBuf,
    /// Adjacency CSV (benchmark mode).
    #[arg(long)]
    graph: Option<PathBuf>,
    /// Held-out mask used for imputation (scoring mode).
    #[arg(long, requires = "mu")]
    mask: Option<PathBuf>,
    /// Imputed means to score (scoring mode).
    #[arg(long, requires = "mask")]
    mu: Option<PathBuf>,
    /// Imputed variances; enables interval coverage in scoring mode.
    #[arg(long, requires = "mu")]
    sigma2: Option<PathBuf>,
    #[arg(long, default_value = "speed")]
    unit: UnitTag,
    #[arg(long)]
    config: Option<PathBuf>,
    /// Comma-separated: average,mean,svd,bigru,gcn,stgin.
    #[arg(long, value_delimiter = ',')]
    methods: Option<Vec<Method>>,
    #[arg(long, value_delimiter = ',')]
    rates: Option<Vec<f64>>,
    #[arg(long, value_delimiter = ',')]
    regimes: Option<Vec<Regime>>,
    #[arg(long, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
    #[arg(long)]
    level: Option<f64>,
    /// normalized or raw.
    #[arg(long)]
    units: Option<ReportUnits>,
    #[arg(long)]
    epochs: Option<usize>,
    #[command(flatten)]
    out: OutArg,
}

#[derive(Args, Debug)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 5)]
    nodes: usize,
    #[arg(long, default_value_t = 8)]
    steps: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    architecture: Option<Architecture>,
    #[arg(long, default_value_t = 1e-4)]
    tolerance: f64,
}

#[derive(Args, Debug)]
struct ReportArgs {
    /// report.csv written by `evaluate`.
    #[arg(long)]
    report: Option<PathBuf>,
    /// Ground truth for interval plots.
    #[arg(long, requires_all = ["mu", "sigma2"])]
    data: Option<PathBuf>,
    #[arg(long)]
    mu: Option<PathBuf>,
    #[arg(long)]
    sigma2: Option<PathBuf>,
    #[arg(long, default_value = "speed")]
    unit: UnitTag,
    /// Sensors to plot (comma-separated row indices).
    #[arg(long, value_delimiter = ',', default_value = "0")]
    sensors: Vec<usize>,
    /// Day index (288 five-minute steps per day) to plot.
    #[arg(long, default_value_t = 0)]
    day: usize,
    #[arg(long, default_value_t = 0.95)]
    level: f64,
    #[command(flatten)]
    out: OutArg,
}

#[derive(Serialize)]
struct FileHash {
    path: String,
    sha256: String,
}

#[derive(Serialize)]
struct RunManifest {
    subcommand: &'static str,
    version: &'static str,
    config: serde_json::Value,
    seeds: Vec<u64>,
    inputs: Vec<FileHash>,
    outputs: Vec<FileHash>,
    wall_time_secs: f64,
}

struct Run {
    subcommand: &'static str,
    started: Instant,
    out_dir: PathBuf,
    inputs: Vec<PathBuf>,
    outputs: Vec<PathBuf>,
}

impl Run {
    fn new(subcommand: &'static str, out_dir: PathBuf) -> Self {
        Self { subcommand, started: Instant::now(), out_dir, inputs: Vec::new(), outputs: Vec::new() }
    }

    fn input(&mut self, path: &Path) -> PathBuf {
        self.inputs.push(path.to_path_buf());
        path.to_path_buf()
    }

    fn output(&mut self, name: &str) -> PathBuf {
        let path = self.out_dir.join(name);
        self.outputs.push(path.clone());
        path
    }

    fn finish(self, config: impl Serialize, seeds: Vec<u64>) -> Result<()> {
        let hash_all = |paths: &[PathBuf]| paths.iter().map(|p| hash_file(p)).collect::<Result<Vec<_>>>();
        let manifest = RunManifest {
            subcommand: self.subcommand,
            version: env!("CARGO_PKG_VERSION"),
            config: serde_json::to_value(config).map_err(|e| Error::Config(e.to_string()))?,
            seeds,
            inputs: hash_all(&self.inputs)?,
            outputs: hash_all(&self.outputs)?,
            wall_time_secs: self.started.elapsed().as_secs_f64(),
        };
        let text = serde_json::to_string_pretty(&manifest).map_err(|e| Error::Config(e.to_string()))?;
        write_text(&self.out_dir.join("manifest.json"), &(text + "\n"))
    }
}

fn hash_file(path: &Path) -> Result<FileHash> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let digest = Sha256::digest(&bytes);
    let sha256 = digest.iter().map(|b| format!("{b:02x}")).collect();
    Ok(FileHash { path: path.display().to_string(), sha256 })
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn load_config(path: Option<&Path>, run: &mut Run) -> Result<RunConfig> {
    match path {
        Some(p) => {
            run.input(p);
            RunConfig::load(p)
        }
        None => Ok(RunConfig::default()),
    }
}

/// Loads the dataset and, if given, hides the entries the mask marks 0.
fn load_masked(args: &DataArgs, run: &mut Run) -> Result<(TrafficTensor, SensorGraph)> {
    let data = TrafficTensor::load_csv(&run.input(&args.data), args.unit)?;
    let graph = SensorGraph::read_csv(&run.input(&args.graph))?;
    if graph.n() != data.n() {
        return Err(Error::Shape {
            op: "load",
            detail: format!("graph has {} sensors, data has {}", graph.n(), data.n()),
        });
    }
    let masked = match &args.mask {
        Some(p) => apply_mask(&data, &Mask::read_csv(&run.input(p))?)?,
        None => data,
    };
    Ok((masked, graph))
}

fn cmd_synth(a: &SynthArgs) -> Result<()> {
    let mut run = Run::new("synth", a.out.dir());
    let ds = synth_generate(a.nodes, a.steps, a.seed, a.noise_std)?;
    ds.tensor.write_csv(&run.output("data.csv"))?;
    ds.graph.write_csv(&run.output("graph.csv"))?;
    write_matrix_csv(&run.output("distances.csv"), &ds.distances)?;
    #[derive(Serialize)]
    struct SynthConfig {
        nodes: usize,
        steps: usize,
        noise_std: f64,
        seed: u64,
        unit: UnitTag,
        bandwidth: f64,
        threshold: f64,
    }
    let cfg = SynthConfig {
        nodes: a.nodes,
        steps: a.steps,
        noise_std: a.noise_std,
        seed: a.seed,
        unit: UnitTag::Synthetic,
        bandwidth: ds.graph.bandwidth(),
        threshold: ds.graph.threshold(),
    };
    run.finish(cfg, vec![a.seed])
}

fn cmd_mask(a: &MaskArgs) -> Result<()> {
    let mut run = Run::new("mask", a.out.dir());
    let data = TrafficTensor::load_csv(&run.input(&a.data), UnitTag::Speed)?;
    let spec = MaskSpec { regime: a.regime, rate: a.rate, seed: a.seed };
    let held = spec.generate(data.n(), data.t())?;
    // pre-existing gaps stay unobserved
    let mask = data.mask.and(&held)?;
    mask.write_csv(&run.output("mask.csv"))?;
    println!("{} of {} entries held out", held.missing_count(), data.n() * data.t());
    run.finish(spec, vec![a.seed])
}

fn cmd_train(a: &TrainArgs) -> Result<()> {
    let mut run = Run::new("train", a.out.dir());
    let mut cfg = load_config(a.config.as_deref(), &mut run)?;
    if let Some(s) = a.seed {
        cfg.training.seed = s;
    }
    if let Some(arch) = a.architecture {
        cfg.model.architecture = arch;
    }
    if let Some(e) = a.epochs {
        cfg.training.max_epochs = e;
    }
    if let Some(lr) = a.learning_rate {
        cfg.training.learning_rate = lr;
    }
    if let Some(w) = a.window_length {
        cfg.training.window_length = w;
    }
    cfg.validate()?;
    let (masked, graph) = load_masked(&a.input, &mut run)?;
    let (fitted, report) = FittedModel::fit(&masked, &graph, &cfg.model, &cfg.training, a.scheme)?;
    checkpoint::save(&fitted, &run.output("model.ckpt"))?;
    write_text(&run.output("train_report.csv"), &report.to_csv())?;
    if let (Some(first), Some(last)) = (report.initial(), report.last()) {
        println!(
            "epochs {} (best {}), combined loss {:.6} -> {:.6}",
            report.epochs.len(),
            report.best_epoch,
            first.combined,
            last.combined
        );
    }
    #[derive(Serialize)]
    struct TrainManifest<'a> {
        run: &'a RunConfig,
        scheme: NormScheme,
        unit: UnitTag,
    }
    let seed = cfg.training.seed;
    run.finish(TrainManifest { run: &cfg, scheme: a.scheme, unit: a.input.unit }, vec![seed])
}

fn cmd_impute(a: &ImputeArgs) -> Result<()> {
    let mut run = Run::new("impute", a.out.dir());
    let fitted = checkpoint::load(&run.input(&a.model))?;
    let (masked, graph) = load_masked(&a.input, &mut run)?;
    let field = clip_negative(&fitted.impute(&masked, &graph)?, a.input.unit);
    write_matrix_csv(&run.output("mu.csv"), &field.mu)?;
    write_matrix_csv(&run.output("sigma2.csv"), &field.sigma2)?;
    let seed = fitted.params.seed();
    run.finish(serde_json::json!({ "unit": a.input.unit, "window_length": fitted.window_length }), vec![seed])
}

fn cmd_evaluate(a: &EvaluateArgs) -> Result<()> {
    let mut run = Run::new("evaluate", a.out.dir());
    let truth = TrafficTensor::load_csv(&run.input(&a.data), a.unit)?;
    if let (Some(mask), Some(mu)) = (&a.mask, &a.mu) {
        return score_files(a, &truth, mask, mu, run);
    }
    let graph_path = a.graph.as_deref().ok_or_else(|| Error::invalid("benchmark mode needs --graph"))?;
    let graph = SensorGraph::read_csv(&run.input(graph_path))?;
    let mut cfg = load_config(a.config.as_deref(), &mut run)?;
    if let Some(m) = &a.methods {
        cfg.eval.methods = m.clone();
    }
    if let Some(r) = &a.rates {
        cfg.eval.rates = r.clone();
    }
    if let Some(r) = &a.regimes {
        cfg.eval.regimes = r.clone();
    }
    if let Some(s) = &a.seeds {
        cfg.eval.seeds = s.clone();
    }
    if let Some(l) = a.level {
        cfg.eval.level = l;
    }
    if let Some(u) = a.units {
        cfg.eval.units = u;
    }
    if let Some(e) = a.epochs {
        cfg.training.max_epochs = e;
    }
    cfg.validate()?;
    let report = run_benchmark(&truth, &graph, &cfg.benchmark_spec())?;
    for note in &report.skipped {
        eprintln!("note: {note}");
    }
    write_text(&run.output("report.csv"), &report.to_csv())?;
    let table = report.to_table();
    write_text(&run.output("table.txt"), &table)?;
    print!("{table}");
    let seeds = cfg.eval.seeds.clone();
    run.finish(&cfg, seeds)
}

/// Scores files produced by `impute` on the entries the mask held out.
fn score_files(a: &EvaluateArgs, truth: &TrafficTensor, mask: &Path, mu: &Path, mut run: Run) -> Result<()> {
    let mask = Mask::read_csv(&run.input(mask))?;
    let mu = read_matrix_csv(&run.input(mu))?;
    let scored = truth.mask.and_not(&mask)?;
    let level = a.level.unwrap_or(0.95);
    let coverage = match &a.sigma2 {
        Some(p) => {
            let field = GaussianField { mu: mu.clone(), sigma2: read_matrix_csv(&run.input(p))? };
            Some(interval_coverage(&field, &truth.values, &scored, level)?)
        }
        None => None,
    };
    let cell = EvalCell {
        method: Method::Stgin,
        regime: Regime::Random,
        rate: scored.observed_count() as f64 / (truth.n() * truth.t()) as f64,
        seed: 0,
        mse: mse(&truth.values, &mu, &scored)?,
        mae: mae(&truth.values, &mu, &scored)?,
        count: scored.observed_count(),
        coverage,
        runtime_secs: 0.0,
    };
    println!("mse {} mae {} count {}", cell.mse, cell.mae, cell.count);
    if let Some(c) = coverage {
        println!("coverage@{level} {c}");
    }
    #[derive(Serialize)]
    struct Scores {
        mse: f64,
        mae: f64,
        count: usize,
        coverage: Option<f64>,
        level: f64,
    }
    let scores = Scores { mse: cell.mse, mae: cell.mae, count: cell.count, coverage, level };
    let json = serde_json::to_string_pretty(&scores).map_err(|e| Error::Config(e.to_string()))?;
    write_text(&run.output("scores.json"), &(json + "\n"))?;
    run.finish(serde_json::json!({ "mode": "score", "unit": a.unit, "level": level }), vec![])
}

fn cmd_gradcheck(a: &GradcheckArgs) -> Result<bool> {
    let mut run = Run::new("gradcheck", PathBuf::from("."));
    let mut cfg = load_config(a.config.as_deref(), &mut run)?;
    if let Some(arch) = a.architecture {
        cfg.model.architecture = arch;
    }
    let r = gradient_check(&cfg.model, a.nodes, a.steps, a.seed, cfg.training.lambda)?;
    let pass = r.worst_relative_error < a.tolerance;
    println!(
        "{} worst_relative_error={:e} at {}[{}] over {} coordinates (tolerance {:e})",
        if pass { "pass" } else { "fail" },
        r.worst_relative_error,
        r.worst_param,
        r.worst_index,
        r.coordinates,
        a.tolerance
    );
    Ok(pass)
}

fn cmd_report(a: &ReportArgs) -> Result<()> {
    let mut run = Run::new("report", a.out.dir());
    if a.report.is_none() && a.data.is_none() {
        return Err(Error::invalid("report needs --report and/or --data with --mu and --sigma2"));
    }
    if let Some(p) = &a.report {
        let text = std::fs::read_to_string(run.input(p)).map_err(|e| Error::io(p, e))?;
        let table = EvalReport::from_csv(&text)?.to_table();
        write_text(&run.output("table.txt"), &table)?;
        print!("{table}");
    }
    if let (Some(data), Some(mu), Some(sigma2)) = (&a.data, &a.mu, &a.sigma2) {
        let truth = TrafficTensor::load_csv(&run.input(data), a.unit)?;
        let mu = read_matrix_csv(&run.input(mu))?;
        let sigma2 = read_matrix_csv(&run.input(sigma2))?;
        truth.values.expect_same_shape("report", &mu)?;
        truth.values.expect_same_shape("report", &sigma2)?;
        let per_day = stgin::data::STEPS_PER_DAY;
        let start = a.day * per_day;
        if start >= truth.t() {
            return Err(Error::invalid(format!("day {} starts past the last step {}", a.day, truth.t())));
        }
        let end = (start + per_day).min(truth.t());
        for &s in &a.sensors {
            if s >= truth.n() {
                return Err(Error::invalid(format!("sensor {s} out of range for {} sensors", truth.n())));
            }
            let slice = |m: &stgin::Tensor2D| (start..end).map(|j| m[(s, j)]).collect::<Vec<f64>>();
            let id = truth.sensor_ids.get(s).cloned().unwrap_or_else(|| s.to_string());
            let title = format!("sensor {id}, day {}", a.day);
            let svg = interval_svg(&slice(&truth.values), &slice(&mu), &slice(&sigma2), a.level, &title)?;
            write_text(&run.output(&format!("interval_sensor{s}_day{}.svg", a.day)), &svg)?;
        }
    }
    run.finish(serde_json::json!({ "level": a.level, "sensors": a.sensors, "day": a.day }), vec![])
}

fn one_line(msg: &str) -> String {
    msg.split_whitespace().collect::<Vec<_>>().join(" ")
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            // --help and --version
            print!("{e}");
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let text = e.to_string();
            let first = text.lines().find(|l| !l.trim().is_empty()).unwrap_or("invalid arguments");
            eprintln!("error: usage: {}", one_line(first.trim_start_matches("error: ")));
            return ExitCode::from(2);
        }
    };
    let outcome = match &cli.command {
        Command::Synth(a) => cmd_synth(a),
        Command::Mask(a) => cmd_mask(a),
        Command::Train(a) => cmd_train(a),
        Command::Impute(a) => cmd_impute(a),
        Command::Evaluate(a) => cmd_evaluate(a),
        Command::Gradcheck(a) => match cmd_gradcheck(a) {
            Ok(true) => Ok(()),
            Ok(false) => return ExitCode::FAILURE,
            Err(e) => Err(e),
        },
        Command::Report(a) => cmd_report(a),
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}: {}", e.kind(), one_line(&e.to_string()));
            ExitCode::FAILURE
        }
    }
}
