use std::io::{self, BufRead, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context};
use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use iqa_core::checkpoint::{read_checkpoint, write_checkpoint, CheckpointMeta};
use iqa_core::data::{
    median_of_runs, split, synth_generate, write_atomic, Manifest, SplitSpec, SynthDims,
};
use iqa_core::decoder::{Ffn, Linear};
use iqa_core::gradsuite::{run_gradient_suite, SuiteOptions, SUITE_TOLERANCE};
use iqa_core::model::{ModelConfig, QualityModel};
use iqa_core::moe::{expert_param_count, experts_param_count, gate_param_count, MoeConfig};
use iqa_core::parallel::Execution;
use iqa_core::train::{evaluate, train, TrainConfig};

#[derive(Parser, Debug)]
#[command(
    name = "iqa",
    version,
    about = "Quality decoder training and evaluation on precomputed features"
)]
struct Cli {
    /// Worker threads for per-record work; 1 runs sequentially, 0 uses all cores.
    #[arg(long, global = true, default_value_t = 0)]
    threads: usize,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic feature corpus with planted labels.
    Synth(SynthArgs),
    /// Train on one split of a manifest and evaluate on its test part.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a manifest split.
    Eval(EvalArgs),
    /// Check analytic gradients against central differences.
    Gradcheck(GradcheckArgs),
    /// Print exact parameter counts for the FFN and MoE heads.
    Params(ParamsArgs),
    /// Aggregate per-run metrics files into one summary with medians.
    ExportMetrics(ExportArgs),
}

#[derive(Args, Debug, Serialize)]
struct SynthArgs {
    #[arg(long)]
    count: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Feature map sizes as H3xW3xC3,H4xW4xC4.
    #[arg(long, default_value_t = SynthDims::default())]
    dims: SynthDims,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug, Serialize)]
struct SplitArgs {
    #[arg(long, default_value_t = 0)]
    split_seed: u64,
    #[arg(long, default_value_t = 0)]
    run: u64,
}

#[derive(Args, Debug, Serialize)]
struct TrainArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[command(flatten)]
    split: SplitArgs,
    /// JSON run configuration, or a config echo from an earlier run.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug, Serialize)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    manifest: PathBuf,
    #[command(flatten)]
    split: SplitArgs,
    #[arg(long, default_value_t = 0.8)]
    train_fraction: f64,
    /// Evaluate every record instead of the test split.
    #[arg(long)]
    all: bool,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug, Serialize)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Negate the analytic gradient of one parameter group.
    #[arg(long, hide = true)]
    inject_flip: Option<String>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug, Serialize)]
struct ParamsArgs {
    #[arg(long, default_value_t = 4)]
    experts: usize,
    /// Expert hidden width.
    #[arg(long, default_value_t = 1536)]
    hidden: usize,
    #[arg(long, default_value_t = 384)]
    dim: usize,
    #[arg(long, default_value_t = 2048)]
    ffn_hidden: usize,
}

#[derive(Args, Debug, Serialize)]
struct ExportArgs {
    /// Per-run metrics files; read one path per line from stdin when omitted.
    inputs: Vec<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
enum Preset {
    Tiny,
    #[default]
    Small,
    Reference,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct RunConfig {
    preset: Preset,
    /// Full model layout; overrides `preset` when present.
    model: Option<ModelConfig>,
    train: TrainConfig,
    train_fraction: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            preset: Preset::Small,
            model: None,
            train: TrainConfig::default(),
            train_fraction: 0.8,
        }
    }
}

impl RunConfig {
    fn load(path: &Path) -> anyhow::Result<Self> {
        let text =
            std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let value: Value =
            serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
        let value = match value.get("config") {
            Some(inner) if value.get("command").is_some() => inner.clone(),
            _ => value,
        };
        serde_json::from_value(value)
            .with_context(|| format!("invalid run config {}", path.display()))
    }

    fn model_for(&self, c3: usize, c4: usize) -> ModelConfig {
        if let Some(m) = &self.model {
            return m.clone();
        }
        match self.preset {
            Preset::Tiny => ModelConfig::tiny(c3, c4),
            Preset::Small => ModelConfig::small(c3, c4),
            Preset::Reference => ModelConfig::reference(c3, c4),
        }
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct RunMetrics {
    run: u64,
    split_seed: u64,
    srocc: f64,
    plcc: f64,
}

#[derive(Debug, Serialize, Deserialize)]
struct MetricsFile {
    srocc: f64,
    plcc: f64,
    runs: Vec<RunMetrics>,
    median_srocc: f64,
    median_plcc: f64,
}

impl MetricsFile {
    fn from_runs(runs: Vec<RunMetrics>) -> anyhow::Result<Self> {
        let s: Vec<f64> = runs.iter().map(|r| r.srocc).collect();
        let p: Vec<f64> = runs.iter().map(|r| r.plcc).collect();
        let median_srocc = median_of_runs(&s)?;
        let median_plcc = median_of_runs(&p)?;
        Ok(Self {
            srocc: median_srocc,
            plcc: median_plcc,
            runs,
            median_srocc,
            median_plcc,
        })
    }
}

enum Failure {
    Usage(anyhow::Error),
    Run(anyhow::Error),
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        Failure::Run(e)
    }
}

impl From<iqa_core::Error> for Failure {
    fn from(e: iqa_core::Error) -> Self {
        Failure::Run(e.into())
    }
}

fn usage(msg: impl std::fmt::Display) -> Failure {
    Failure::Usage(anyhow!("{msg}"))
}

fn write_json(path: &Path, value: &impl Serialize) -> anyhow::Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    write_atomic(path, &bytes)?;
    Ok(())
}

fn write_echo(
    dir: &Path,
    command: &str,
    args: &impl Serialize,
    config: Option<&RunConfig>,
    threads: usize,
) -> anyhow::Result<()> {
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let mut echo = json!({ "command": command, "args": args, "threads": threads });
    if let Some(c) = config {
        echo["config"] = serde_json::to_value(c)?;
    }
    write_json(&dir.join("config.json"), &echo)
}

fn load_manifest(path: &Path) -> Result<Manifest, Failure> {
    if !path.is_file() {
        return Err(usage(format!("manifest not found: {}", path.display())));
    }
    Ok(Manifest::load(path)?)
}

fn grouped(n: usize) -> String {
    let digits = n.to_string();
    let mut out = String::new();
    for (i, c) in digits.chars().enumerate() {
        if i > 0 && (digits.len() - i).is_multiple_of(3) {
            out.push(',');
        }
        out.push(c);
    }
    out
}

fn cmd_synth(a: &SynthArgs, threads: usize) -> Result<(), Failure> {
    if a.count == 0 {
        return Err(usage("--count must be at least 1"));
    }
    synth_generate(a.count, a.seed, &a.dims, &a.out)?;
    write_echo(&a.out, "synth", a, None, threads)?;
    println!("{}", a.out.join("manifest.json").display());
    Ok(())
}

fn cmd_train(a: &TrainArgs, exec: Execution, threads: usize) -> Result<(), Failure> {
    let manifest = load_manifest(&a.manifest)?;
    let mut config = match &a.config {
        Some(p) if !p.is_file() => return Err(usage(format!("config not found: {}", p.display()))),
        Some(p) => RunConfig::load(p).map_err(Failure::Usage)?,
        None => RunConfig::default(),
    };
    config.train.validate().map_err(usage)?;
    let spec = SplitSpec {
        seed: a.split.split_seed,
        train_fraction: config.train_fraction,
        run_index: a.split.run,
    };
    let parts = split(&manifest, &spec).map_err(usage)?;
    let train_records = manifest.load_records(&parts.train)?;
    let test_records = manifest.load_records(&parts.test)?;
    let first = train_records
        .first()
        .ok_or_else(|| usage("empty training split"))?;
    let model_config = config.model_for(first.stage3.shape()[2], first.stage4.shape()[2]);
    config.model = Some(model_config.clone());
    write_echo(&a.out, "train", a, Some(&config), threads)?;

    // each run gets its own initialization and shuffle order
    let train_config = TrainConfig {
        seed: config.train.seed.wrapping_add(a.split.run),
        ..config.train.clone()
    };
    let (model, mut store) = QualityModel::new(model_config.clone(), train_config.seed)?;
    let report = train(&model, &mut store, &train_records, &train_config, exec)
        .with_context(|| "training aborted")?;
    write_atomic(&a.out.join("log.csv"), report.to_csv().as_bytes())?;
    let meta = CheckpointMeta {
        model: model_config,
        label_scale: report.label_scale,
        seed: train_config.seed,
    };
    write_checkpoint(&a.out.join("checkpoint.lifc"), &store, &meta)?;
    let result = evaluate(
        &model,
        &store,
        &test_records,
        &report.label_scale,
        config.train.precision,
        exec,
    )
    .with_context(|| "evaluating the test split")?;
    let metrics = MetricsFile::from_runs(vec![RunMetrics {
        run: a.split.run,
        split_seed: a.split.split_seed,
        srocc: result.srocc,
        plcc: result.plcc,
    }])?;
    write_json(&a.out.join("metrics.json"), &metrics)?;
    println!(
        "run {} steps {} final loss {:.6} srocc {:.4} plcc {:.4}",
        a.split.run,
        report.steps,
        report.log.last().map_or(f64::NAN, |r| r.total),
        result.srocc,
        result.plcc
    );
    Ok(())
}

fn cmd_eval(a: &EvalArgs, exec: Execution, threads: usize) -> Result<(), Failure> {
    let manifest = load_manifest(&a.manifest)?;
    if !a.checkpoint.is_file() {
        return Err(usage(format!(
            "checkpoint not found: {}",
            a.checkpoint.display()
        )));
    }
    let (saved, meta) = read_checkpoint(&a.checkpoint)?;
    let (model, mut store) = QualityModel::new(meta.model.clone(), meta.seed)?;
    store.load_values_from(&saved)?;
    let ids = if a.all {
        manifest.records.iter().map(|e| e.id.clone()).collect()
    } else {
        let spec = SplitSpec {
            seed: a.split.split_seed,
            train_fraction: a.train_fraction,
            run_index: a.split.run,
        };
        split(&manifest, &spec).map_err(usage)?.test
    };
    let records = manifest.load_records(&ids)?;
    let result = evaluate(
        &model,
        &store,
        &records,
        &meta.label_scale,
        Default::default(),
        exec,
    )?;
    let metrics = MetricsFile::from_runs(vec![RunMetrics {
        run: a.split.run,
        split_seed: a.split.split_seed,
        srocc: result.srocc,
        plcc: result.plcc,
    }])?;
    if let Some(out) = &a.out {
        write_echo(out, "eval", a, None, threads)?;
        write_json(&out.join("metrics.json"), &metrics)?;
    }
    println!(
        "records {} srocc {:.6} plcc {:.6}",
        records.len(),
        result.srocc,
        result.plcc
    );
    Ok(())
}

fn cmd_gradcheck(a: &GradcheckArgs, threads: usize) -> Result<(), Failure> {
    let report = run_gradient_suite(&SuiteOptions {
        seed: a.seed,
        flip_group: a.inject_flip.clone(),
    })
    .map_err(|e| match e {
        iqa_core::Error::Argument(_) => usage(e),
        other => other.into(),
    })?;
    println!(
        "{:<18} {:>12} {:>12}  status",
        "group", "max rel err", "max |grad|"
    );
    for g in &report.groups {
        println!(
            "{:<18} {:>12.3e} {:>12.3e}  {}",
            g.group,
            g.max_rel_err,
            g.max_abs_grad,
            if g.passed { "ok" } else { "FAIL" }
        );
    }
    println!(
        "points {} redraws {} gamma closed-form err {:.3e} elapsed {:.2}s",
        report.points,
        report.redraws,
        report.gamma_closed_form_err,
        report.elapsed.as_secs_f64()
    );
    if let Some(out) = &a.out {
        write_echo(out, "gradcheck", a, None, threads)?;
        write_json(&out.join("gradcheck.json"), &report)?;
    }
    let failed: Vec<&str> = report
        .groups
        .iter()
        .filter(|g| !g.passed)
        .map(|g| g.group.as_str())
        .collect();
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Failure::Run(anyhow!(
            "groups above tolerance {SUITE_TOLERANCE:e}: {}",
            failed.join(", ")
        )))
    }
}

fn cmd_params(a: &ParamsArgs) -> Result<(), Failure> {
    let moe = MoeConfig {
        num_experts: a.experts,
        top_k: 1,
        expert_hidden: a.hidden,
        embed_dim: a.dim,
    };
    moe.validate().map_err(usage)?;
    if a.ffn_hidden == 0 {
        return Err(usage("--ffn-hidden must be at least 1"));
    }
    let rows = [
        (
            format!("FFN {}-{}-{}", a.dim, a.ffn_hidden, a.dim),
            Ffn::param_count(a.dim, a.ffn_hidden),
        ),
        (
            format!("expert {}-{}-{}", a.dim, a.hidden, a.dim),
            expert_param_count(a.dim, a.hidden),
        ),
        (
            format!("MoE {} experts", a.experts),
            experts_param_count(&moe),
        ),
        ("gate".to_string(), gate_param_count(&moe)),
        ("score regressor".to_string(), Linear::param_count(a.dim, 1)),
    ];
    println!("{:<24} {:>14} {:>9}", "component", "parameters", "millions");
    for (name, n) in rows {
        println!("{:<24} {:>14} {:>8.2}M", name, grouped(n), n as f64 / 1e6);
    }
    Ok(())
}

fn cmd_export(a: &ExportArgs) -> Result<(), Failure> {
    let paths: Vec<PathBuf> = if a.inputs.is_empty() {
        io::stdin()
            .lock()
            .lines()
            .map(|l| l.map(|s| s.trim().to_string()))
            .filter(|l| l.as_ref().map_or(true, |s| !s.is_empty()))
            .map(|l| l.map(PathBuf::from))
            .collect::<io::Result<_>>()
            .context("reading input paths from stdin")?
    } else {
        a.inputs.clone()
    };
    if paths.is_empty() {
        return Err(usage("no metrics files given"));
    }
    let mut runs = Vec::new();
    for p in &paths {
        if !p.is_file() {
            return Err(usage(format!("metrics file not found: {}", p.display())));
        }
        let text =
            std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
        let file: MetricsFile =
            serde_json::from_str(&text).with_context(|| format!("parsing {}", p.display()))?;
        runs.extend(file.runs);
    }
    let summary = MetricsFile::from_runs(runs)?;
    let text = serde_json::to_string_pretty(&summary).map_err(anyhow::Error::from)?;
    match &a.out {
        Some(out) => write_atomic(out, format!("{text}\n").as_bytes())?,
        None => {
            let mut stdout = io::stdout().lock();
            writeln!(stdout, "{text}").map_err(anyhow::Error::from)?;
        }
    }
    eprintln!(
        "runs {} median srocc {:.6} median plcc {:.6}",
        summary.runs.len(),
        summary.median_srocc,
        summary.median_plcc
    );
    Ok(())
}

fn configure_threads(threads: usize) -> Result<Execution, Failure> {
    if threads == 1 {
        return Ok(Execution::Sequential);
    }
    #[cfg(feature = "parallel")]
    if threads > 1 {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build_global()
            .map_err(|e| Failure::Run(e.into()))?;
    }
    Ok(if Execution::parallel_available() {
        Execution::Parallel
    } else {
        Execution::Sequential
    })
}

fn run(cli: &Cli) -> Result<(), Failure> {
    let exec = configure_threads(cli.threads)?;
    match &cli.command {
        Command::Synth(a) => cmd_synth(a, cli.threads),
        Command::Train(a) => cmd_train(a, exec, cli.threads),
        Command::Eval(a) => cmd_eval(a, exec, cli.threads),
        Command::Gradcheck(a) => cmd_gradcheck(a, cli.threads),
        Command::Params(a) => cmd_params(a),
        Command::ExportMetrics(a) => cmd_export(a),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
        Err(Failure::Run(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
