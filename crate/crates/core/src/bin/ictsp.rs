//! Command-line front end for data generation, training, evaluation and
//! the analysis experiments.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde_json::{json, Value};

use ictsp::data::{gen_channels_independent, gen_multi, MultiSpec, NoiseSpec, SplitName};
use ictsp::experiments::{
    architecture_config, context_token_counts, preset, run_ablation, run_architecture_comparison, run_experiment,
    write_results, Dataset, ResultRow, RunSpec, Setting, PRESETS,
};
use ictsp::model::{export_attention, load_checkpoint, parameter_formula, Model, Variant};
use ictsp::retrieval::{similarity_scores, write_scores_csv};
use ictsp::tokenizer::{count_context_tokens, count_formula};
use ictsp::training::{evaluate, EvalWindows};

#[derive(Parser)]
#[command(name = "ictsp", version, about = "In-context time series forecasting experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic dataset as CSV.
    GenerateData(GenerateArgs),
    /// Train one configuration per horizon and report test metrics.
    Train(RunArgs),
    /// Score a checkpoint on a split.
    Evaluate(EvaluateArgs),
    /// Run the ablation matrix.
    Ablate(AblateArgs),
    /// Train the three architectures on each dataset with matched budgets.
    CompareArchitectures(CompareArgs),
    /// Write per-layer attention maps, tokens and retrieval scores for one window.
    ExportAttention(ExportArgs),
    /// Context-token and parameter counts for a configuration.
    Count(CountArgs),
}

#[derive(Args)]
struct GenerateArgs {
    /// `multi` (lagged random walks) or `noise` (independent AR(1) channels).
    #[arg(long, default_value = "multi")]
    kind: String,
    #[arg(long, default_value_t = 20_000)]
    length: usize,
    #[arg(long, default_value_t = 2024)]
    seed: u64,
    /// Comma-separated lags for `multi`.
    #[arg(long, value_delimiter = ',')]
    shifts: Option<Vec<usize>>,
    #[arg(long, default_value_t = 3)]
    combinations: usize,
    /// Channel count for `noise`.
    #[arg(long, default_value_t = 8)]
    channels: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Clone)]
struct SpecArgs {
    /// Named configuration to start from.
    #[arg(long)]
    preset: Option<String>,
    /// JSON run specification; applied on top of the preset when both are given.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Train on a CSV file instead of the configured dataset.
    #[arg(long)]
    data: Option<PathBuf>,
    /// The CSV's first column is a date.
    #[arg(long)]
    date_column: bool,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    variant: Option<Variant>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Override any field by dotted path, e.g. `model.d_model=32`.
    #[arg(long = "set", value_name = "PATH=VALUE")]
    sets: Vec<String>,
}

#[derive(Args)]
struct RunArgs {
    #[command(flatten)]
    spec: SpecArgs,
    /// `full`, `few10`, `few5`, or `zeroshot:<csv>` to test on another file.
    #[arg(long)]
    protocol: Option<String>,
    /// Comma-separated forecast horizons.
    #[arg(long, value_delimiter = ',')]
    horizons: Option<Vec<usize>>,
}

#[derive(Args)]
struct EvaluateArgs {
    #[command(flatten)]
    spec: SpecArgs,
    #[arg(long)]
    checkpoint: PathBuf,
    /// `val` or `test`.
    #[arg(long, default_value = "test")]
    split: String,
    #[arg(long)]
    stride: Option<usize>,
    /// Zero all but the newest steps of each input.
    #[arg(long)]
    visible: Option<usize>,
}

#[derive(Args)]
struct AblateArgs {
    #[command(flatten)]
    spec: SpecArgs,
    /// Comma-separated subset of full,no_context,no_retrieval,m1,m64,m256.
    #[arg(long, value_delimiter = ',')]
    settings: Option<Vec<Setting>>,
}

#[derive(Args)]
struct CompareArgs {
    /// Comma-separated presets, one per dataset.
    #[arg(long, value_delimiter = ',', default_value = "multi-small,noise-small")]
    presets: Vec<String>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long = "set", value_name = "PATH=VALUE")]
    sets: Vec<String>,
}

#[derive(Args)]
struct ExportArgs {
    #[command(flatten)]
    spec: SpecArgs,
    #[arg(long)]
    checkpoint: PathBuf,
    /// First input step of the window; defaults to the last test window.
    #[arg(long)]
    start: Option<usize>,
}

#[derive(Args)]
struct CountArgs {
    #[command(flatten)]
    spec: SpecArgs,
    /// Channel count; defaults to the model's.
    #[arg(long)]
    channels: Option<usize>,
}

fn parse_value(raw: &str) -> Value {
    serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()))
}

/// Applies `path=value` overrides to the JSON form of a spec.
fn apply_overrides(spec: &RunSpec, sets: &[String]) -> Result<RunSpec> {
    let mut doc = serde_json::to_value(spec)?;
    for s in sets {
        let (path, raw) = s
            .split_once('=')
            .with_context(|| format!("override `{s}` is not PATH=VALUE"))?;
        let mut node = &mut doc;
        for key in path.split('.') {
            node = node
                .as_object_mut()
                .and_then(|o| o.get_mut(key))
                .with_context(|| format!("override `{s}`: no field `{key}`"))?;
        }
        *node = parse_value(raw);
    }
    serde_json::from_value(doc).context("overrides produce an invalid run specification")
}

fn merge_json(base: &mut Value, patch: Value) {
    match (base, patch) {
        (Value::Object(b), Value::Object(p)) => {
            for (k, v) in p {
                merge_json(b.entry(k).or_insert(Value::Null), v);
            }
        }
        (slot, v) => *slot = v,
    }
}

fn resolve_spec(args: &SpecArgs) -> Result<RunSpec> {
    let mut spec = match &args.preset {
        Some(p) => preset(p)?,
        None => RunSpec::default(),
    };
    if let Some(path) = &args.config {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let patch: Value = serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
        let mut doc = serde_json::to_value(&spec)?;
        merge_json(&mut doc, patch);
        spec = serde_json::from_value(doc).with_context(|| format!("invalid run specification in {}", path.display()))?;
    }
    if let Some(path) = &args.data {
        spec.dataset = Dataset::Csv {
            path: path.clone(),
            has_date_column: args.date_column,
        };
    }
    if let Some(seed) = args.seed {
        spec.train.seed = seed;
    }
    if let Some(steps) = args.steps {
        spec.train.max_steps = steps;
    }
    if let Some(v) = args.variant {
        spec.model = architecture_config(&spec.model, v);
    }
    if let Some(out) = &args.out {
        spec.out = Some(out.clone());
    }
    apply_overrides(&spec, &args.sets)
}

fn print_rows(rows: &[ResultRow]) {
    for r in rows {
        println!(
            "{:<10} {:<14} {:<13} L_P={:<4} mse {:.6} mae {:.6} params {} tokens {}/{} ({:.1}s)",
            r.dataset,
            r.variant.as_str(),
            r.setting,
            r.horizon,
            r.test_mse,
            r.test_mae,
            r.params,
            r.retained_tokens,
            r.context_tokens,
            r.wall_seconds
        );
    }
}

fn generate(a: GenerateArgs) -> Result<()> {
    let frame = match a.kind.as_str() {
        "multi" => gen_multi(&MultiSpec {
            length: a.length,
            shifts: a.shifts.unwrap_or_else(|| MultiSpec::default().shifts),
            combinations: a.combinations,
            seed: a.seed,
        })?,
        "noise" => gen_channels_independent(&NoiseSpec {
            length: a.length,
            channels: a.channels,
            seed: a.seed,
            ..NoiseSpec::default()
        })?,
        other => bail!("unknown dataset kind `{other}` (expected multi or noise)"),
    };
    frame.write_csv(&a.out)?;
    println!("wrote {} channels x {} steps to {}", frame.channels(), frame.len(), a.out.display());
    Ok(())
}

fn train(a: RunArgs) -> Result<()> {
    let mut spec = resolve_spec(&a.spec)?;
    if let Some(p) = &a.protocol {
        spec.protocol = match p.as_str() {
            "full" => ictsp::experiments::Protocol::Full,
            "few10" => ictsp::experiments::Protocol::Few10,
            "few5" => ictsp::experiments::Protocol::Few5,
            other => match other.strip_prefix("zeroshot:") {
                Some(path) => ictsp::experiments::Protocol::ZeroShot {
                    test: Dataset::Csv {
                        path: path.into(),
                        has_date_column: a.spec.date_column,
                    },
                },
                None => bail!("unknown protocol `{other}`"),
            },
        };
    }
    if let Some(h) = a.horizons {
        spec.horizons = h;
    }
    let rows = run_experiment(&spec)?;
    print_rows(&rows);
    Ok(())
}

fn split_name(s: &str) -> Result<SplitName> {
    Ok(match s {
        "train" => SplitName::Train,
        "val" => SplitName::Val,
        "test" => SplitName::Test,
        other => bail!("unknown split `{other}`"),
    })
}

fn evaluate_cmd(a: EvaluateArgs) -> Result<()> {
    let spec = resolve_spec(&a.spec)?;
    let model: Model<f32> = load_checkpoint(&a.checkpoint)?;
    let frame = spec.dataset.prepare(&spec.split)?;
    let cfg = model.config();
    let w = EvalWindows {
        input_len: cfg.input_len,
        horizon: cfg.horizon,
        stride: a.stride.unwrap_or(spec.test_stride).max(1),
        mask_visible: a.visible,
    };
    let (mse, mae) = evaluate(&model, &frame, split_name(&a.split)?, &w)?;
    let report = json!({
        "checkpoint": a.checkpoint,
        "dataset": spec.dataset.name(),
        "split": a.split,
        "variant": cfg.variant.as_str(),
        "horizon": cfg.horizon,
        "mse": mse,
        "mae": mae,
    });
    println!("{}", serde_json::to_string_pretty(&report)?);
    if let Some(dir) = &spec.out {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("evaluation.json"), serde_json::to_string_pretty(&report)?)?;
    }
    Ok(())
}

fn ablate(a: AblateArgs) -> Result<()> {
    let spec = resolve_spec(&a.spec)?;
    let settings = a.settings.unwrap_or_else(|| Setting::ALL.to_vec());
    let rows = run_ablation(&spec, &settings)?;
    print_rows(&rows);
    Ok(())
}

fn compare(a: CompareArgs) -> Result<()> {
    let mut specs = Vec::new();
    for p in &a.presets {
        let args = SpecArgs {
            preset: Some(p.clone()),
            config: None,
            data: None,
            date_column: false,
            seed: a.seed,
            steps: a.steps,
            variant: None,
            out: a.out.clone(),
            sets: a.sets.clone(),
        };
        specs.push(resolve_spec(&args)?);
    }
    let cmp = run_architecture_comparison(&specs)?;
    print_rows(&cmp.rows);
    if let Some(dir) = &a.out {
        write_results(&cmp.rows, dir, "comparison")?;
        std::fs::write(dir.join("comparison_curves.json"), serde_json::to_string_pretty(&cmp.curves)?)?;
    }
    Ok(())
}

fn export(a: ExportArgs) -> Result<()> {
    let spec = resolve_spec(&a.spec)?;
    let out = spec.out.clone().unwrap_or_else(|| PathBuf::from("attention"));
    let model: Model<f32> = load_checkpoint(&a.checkpoint)?;
    let frame = spec.dataset.prepare(&spec.split)?;
    let cfg = model.config().clone();
    let start = match a.start {
        Some(s) => s,
        None => {
            let test = frame.range(SplitName::Test)?;
            test.end
                .checked_sub(cfg.input_len + cfg.horizon)
                .context("series shorter than one window")?
        }
    };
    if start + cfg.input_len > frame.len() {
        bail!("window starting at {start} runs past the end of the series ({} steps)", frame.len());
    }
    let window = frame.window(start, cfg.input_len);
    let (forecast, records) = model.predict_with_attention(&window)?;
    let paths = export_attention(&records, &out)?;
    for p in &paths {
        println!("wrote {}", p.display());
    }
    if cfg.variant == Variant::Ictsp {
        let tm = model.tokenize(&window, 0)?;
        let path = out.join("tokens.csv");
        tm.write_debug_csv(&path)?;
        println!("wrote {}", path.display());
        if cfg.uses_retrieval() {
            let (w, b) = (
                model.param("retrieval.w").context("missing retrieval.w")?.cast::<f64>(),
                model.param("retrieval.b").context("missing retrieval.b")?.cast::<f64>(),
            );
            let scores = similarity_scores(&tm, &cfg.retrieval, &w, &b)?;
            let path = out.join("scores.csv");
            write_scores_csv(&tm, &scores, &path)?;
            println!("wrote {}", path.display());
        }
    }
    write_forecast(&out.join("forecast.csv"), &forecast)?;
    Ok(())
}

fn write_forecast(path: &Path, f: &ictsp::numerics::Tensor<f64>) -> Result<()> {
    let mut s = String::from("channel,t,value\n");
    for j in 0..f.rows() {
        for (t, v) in f.row(j).iter().enumerate() {
            s += &format!("{j},{t},{v}\n");
        }
    }
    std::fs::write(path, s).with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

fn count(a: CountArgs) -> Result<()> {
    let spec = resolve_spec(&a.spec)?;
    let cfg = &spec.model;
    let c = a.channels.unwrap_or(cfg.channels);
    let (pre, post) = context_token_counts(cfg, c);
    let (_, pipeline) = count_context_tokens(
        cfg.input_len,
        cfg.lookback,
        cfg.horizon,
        cfg.step,
        c,
        cfg.retrieval.keep_fraction,
        cfg.retrieval.merged,
    );
    let report = json!({
        "variant": cfg.variant.as_str(),
        "channels": c,
        "context_tokens": pre,
        "retained_tokens": post,
        "retained_tokens_with_retrieval": pipeline,
        "closed_form": count_formula(
            cfg.input_len,
            cfg.lookback,
            cfg.horizon,
            cfg.step,
            c,
            cfg.retrieval.keep_fraction,
            cfg.retrieval.merged,
        ),
        "parameters": parameter_formula(cfg),
    });
    println!("{}", serde_json::to_string_pretty(&report)?);
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenerateData(a) => generate(a),
        Command::Train(a) => train(a),
        Command::Evaluate(a) => evaluate_cmd(a),
        Command::Ablate(a) => ablate(a),
        Command::CompareArchitectures(a) => compare(a),
        Command::ExportAttention(a) => export(a),
        Command::Count(a) => count(a),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let kind = e
                .downcast_ref::<ictsp::Error>()
                .map(error_kind)
                .unwrap_or("error");
            let diag = json!({
                "status": "error",
                "kind": kind,
                "message": e.to_string(),
                "causes": e.chain().skip(1).map(|c| c.to_string()).collect::<Vec<_>>(),
                "presets": PRESETS,
            });
            eprintln!("{diag}");
            ExitCode::from(1)
        }
    }
}

fn error_kind(e: &ictsp::Error) -> &'static str {
    use ictsp::Error::*;
    match e {
        Shape(_) => "shape",
        Config(_) => "config",
        Ingest { .. } | IngestFile(_) => "ingest",
        Capacity(_) => "capacity",
        ChannelMismatch { .. } => "channel_mismatch",
        Training(_) => "training",
        Experiment(_) => "experiment",
        Checkpoint(_) => "checkpoint",
        Io { .. } => "io",
        Csv(_) => "csv",
        Json(_) => "json",
    }
}
