//! Command-line surface: one subcommand per library capability.
//!
//! Every subcommand prints a JSON result to stdout; CSV/SVG artifacts go to
//! the paths named by `--out`/`--svg`. Exit codes: 0 on success, 1 on usage
//! or configuration errors (including bad flag values), 2 on data or
//! file-format errors (unreadable files, malformed corpora, corrupt
//! checkpoints). The `POP_THREADS` environment variable pins the worker
//! pool before any parallel section runs.

use std::path::PathBuf;

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand};
use serde_json::json;

use crate::analysis::{
    bench_ttft, count_flops, drift_diagnostics, reproduce_figures, synthetic_prompts,
    write_drift_csv, write_drift_svg,
};
use crate::error::{PopError, Result};
use crate::importance::{
    calibration_from_jsonl, estimate_importance, fill_responses, CalibSample, ImportanceProfile,
    SamplingParams,
};
use crate::model::{
    generate, init_model, load_checkpoint, save_checkpoint, tokenizer, weights_hash, ModelConfig,
};
use crate::pop::{
    make_plan, parse_ratio, pop_generate, run_variant, write_variant_csv, PruningPlan, Strategy,
    Variant, VariantMetrics,
};
use crate::train::{heldout_loss, load_corpus, split_corpus, train, write_loss_csv, TrainConfig};

#[derive(Parser)]
#[command(
    name = "poplab",
    version,
    about = "Prefill-only layer pruning lab: train a byte-level transformer, \
             profile layer importance, skip deep layers during prefill, and \
             measure what that costs and saves."
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a freshly initialized model checkpoint.
    Init(InitArgs),
    /// Train a model on a byte corpus and save the checkpoint.
    Train(TrainArgs),
    /// Generate text with the full model.
    Generate(GenerateArgs),
    /// Estimate per-layer, per-stage importance over a calibration set.
    Importance(ImportanceArgs),
    /// Build a pruning plan and print it (1-based layer numbers).
    Plan(PlanArgs),
    /// Generate text with a pruned prefill.
    PopGenerate(PopGenerateArgs),
    /// Analytic FLOPs accounting for a config and plan.
    Flops(FlopsArgs),
    /// Measure time-to-first-token against the full model.
    Bench(BenchArgs),
    /// Per-layer drift between the pruned and full pipelines.
    Diagnose(DiagnoseArgs),
    /// Compare pruning variants and ablations on one calibration set.
    Ablate(AblateArgs),
    /// Reproduce the full figure set from a trained checkpoint.
    Figures(FiguresArgs),
}

fn parse_strategy(s: &str) -> Result<Strategy> {
    s.parse()
}

/// Flags shared by every subcommand that needs a pruning plan.
#[derive(Args)]
struct PlanFlags {
    /// Fraction of layers to skip during prefill, as a decimal or fraction
    /// (e.g. 0.25 or 1/3).
    #[arg(long, default_value = "1/3", value_parser = parse_ratio)]
    ratio: f64,
    /// Which layers to skip: deep, shallow, interleaved, or from_profile.
    #[arg(long, default_value = "deep", value_parser = parse_strategy)]
    strategy: Strategy,
    /// Importance profile JSON; required by --strategy from_profile.
    #[arg(long)]
    profile: Option<PathBuf>,
    /// Skip layers outright instead of keeping their KV projections.
    #[arg(long)]
    no_indep_kv: bool,
    /// Run the last prompt token through the pruned stack instead of the
    /// full model.
    #[arg(long)]
    no_boundary: bool,
}

impl PlanFlags {
    fn build(&self, num_layers: usize) -> Result<PruningPlan> {
        let profile = match (&self.profile, self.strategy) {
            (Some(path), Strategy::FromProfile) => Some(ImportanceProfile::load(path)?),
            (Some(_), _) => {
                return Err(PopError::Config(
                    "--profile only applies with --strategy from_profile".into(),
                ))
            }
            (None, _) => None,
        };
        let mut plan = make_plan(num_layers, self.ratio, self.strategy, profile.as_ref())?;
        if self.no_indep_kv {
            plan.indep_kv = false;
        }
        if self.no_boundary {
            plan.boundary_handling = false;
        }
        Ok(plan)
    }
}

#[derive(Args)]
struct InitArgs {
    /// Model architecture JSON.
    #[arg(long)]
    config: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Where to write the checkpoint.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    /// Model architecture JSON.
    #[arg(long)]
    config: PathBuf,
    /// Training corpus (raw bytes; the trailing 5% is held out).
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long, default_value_t = 2000)]
    steps: usize,
    #[arg(long, default_value_t = 4)]
    batch: usize,
    /// Window length in tokens (excluding the leading BOS).
    #[arg(long, default_value_t = 64)]
    seq_len: usize,
    #[arg(long, default_value_t = 1e-3)]
    learning_rate: f64,
    #[arg(long, default_value_t = 100)]
    warmup_steps: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Where to write the trained checkpoint.
    #[arg(long)]
    out: PathBuf,
    /// Optional per-step training-loss CSV.
    #[arg(long)]
    loss_csv: Option<PathBuf>,
}

#[derive(Args)]
struct GenerateArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Prompt text; BOS is prepended automatically.
    #[arg(long)]
    prompt: String,
    #[arg(long, default_value_t = 64)]
    max_new: usize,
    #[arg(long, default_value_t = 0.0)]
    temperature: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct ImportanceArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Calibration JSONL: one {"prompt": ..., "response"?: ...} per line.
    #[arg(long)]
    calib: PathBuf,
    /// Use at most this many calibration samples.
    #[arg(long)]
    samples: Option<usize>,
    /// Estimate prefill and decode gates separately instead of one gate
    /// spanning both stages.
    #[arg(long)]
    stage_aware: bool,
    /// Sampling temperature for self-generated targets.
    #[arg(long, default_value_t = 1.0)]
    temperature: f64,
    /// Longest self-generated target, in tokens.
    #[arg(long, default_value_t = 64)]
    max_new: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Write the profile JSON here instead of printing it.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct PlanArgs {
    /// Number of layers to plan for.
    #[arg(long, conflicts_with = "config")]
    layers: Option<usize>,
    /// Model architecture JSON to take the layer count from.
    #[arg(long)]
    config: Option<PathBuf>,
    #[command(flatten)]
    plan: PlanFlags,
    /// Write the plan JSON here as well as printing it.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct PopGenerateArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Prompt text; BOS is prepended automatically.
    #[arg(long)]
    prompt: String,
    /// Saved plan JSON; overrides --ratio/--strategy when given.
    #[arg(long)]
    plan: Option<PathBuf>,
    #[command(flatten)]
    plan_flags: PlanFlags,
    #[arg(long, default_value_t = 64)]
    max_new: usize,
    #[arg(long, default_value_t = 0.0)]
    temperature: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct FlopsArgs {
    /// Model architecture JSON (analytic only; no weights are created).
    #[arg(long)]
    config: PathBuf,
    #[command(flatten)]
    plan: PlanFlags,
    #[arg(long, default_value_t = 2048)]
    seq_len: usize,
}

#[derive(Args)]
struct BenchArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[command(flatten)]
    plan: PlanFlags,
    /// Synthetic prompt length in tokens.
    #[arg(long, default_value_t = 128)]
    seq_len: usize,
    /// Prompts per repetition.
    #[arg(long, default_value_t = 4)]
    batch: usize,
    /// Timed repetitions (two warmups run first).
    #[arg(long, default_value_t = 5)]
    reps: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct DiagnoseArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[command(flatten)]
    plan: PlanFlags,
    /// Calibration JSONL to take prompts from; synthetic prompts are
    /// generated when absent.
    #[arg(long)]
    calib: Option<PathBuf>,
    /// Number of prompts to diagnose over.
    #[arg(long, default_value_t = 8)]
    samples: usize,
    /// Synthetic prompt length in tokens (ignored with --calib).
    #[arg(long, default_value_t = 64)]
    seq_len: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Write the per-layer similarity CSV here.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Write the similarity chart here.
    #[arg(long)]
    svg: Option<PathBuf>,
}

#[derive(Args)]
struct AblateArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Calibration JSONL; samples without responses get model-sampled ones.
    #[arg(long)]
    calib: PathBuf,
    /// Skip ratio applied to every variant.
    #[arg(long, default_value = "1/3", value_parser = parse_ratio)]
    ratio: f64,
    /// Use at most this many calibration samples.
    #[arg(long)]
    samples: Option<usize>,
    /// Sampling temperature for filling in missing responses.
    #[arg(long, default_value_t = 1.0)]
    temperature: f64,
    /// Longest sampled response, in tokens.
    #[arg(long, default_value_t = 64)]
    max_new: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Write the variant-metrics CSV here.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct FiguresArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Calibration JSONL driving importance, drift, and the ratio sweep.
    #[arg(long)]
    calib: PathBuf,
    /// Output directory for the CSV/SVG set.
    #[arg(long)]
    out: PathBuf,
    /// Use at most this many calibration samples.
    #[arg(long, default_value_t = 16)]
    samples: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

/// Maps library errors onto the documented exit codes: usage and
/// configuration problems are 1, broken inputs are 2.
fn exit_code(err: &PopError) -> i32 {
    match err {
        PopError::Config(_)
        | PopError::Contract(_)
        | PopError::Index { .. }
        | PopError::Dimension { .. } => 1,
        PopError::Data(_)
        | PopError::Format(_)
        | PopError::Io { .. }
        | PopError::Capacity(_)
        | PopError::NonFinite { .. } => 2,
    }
}

/// Entry point for the `poplab` binary; returns the process exit code.
pub fn run() -> i32 {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            // clap routes help to stdout and errors (with usage) to stderr.
            let _ = e.print();
            return code;
        }
    };
    let outcome = crate::threads::init_worker_pool().and_then(|_| dispatch(cli.command));
    match outcome {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

fn dispatch(command: Command) -> Result<()> {
    match command {
        Command::Init(a) => cmd_init(a),
        Command::Train(a) => cmd_train(a),
        Command::Generate(a) => cmd_generate(a),
        Command::Importance(a) => cmd_importance(a),
        Command::Plan(a) => cmd_plan(a),
        Command::PopGenerate(a) => cmd_pop_generate(a),
        Command::Flops(a) => cmd_flops(a),
        Command::Bench(a) => cmd_bench(a),
        Command::Diagnose(a) => cmd_diagnose(a),
        Command::Ablate(a) => cmd_ablate(a),
        Command::Figures(a) => cmd_figures(a),
    }
}

fn emit(value: &impl serde::Serialize) -> Result<()> {
    println!(
        "{}",
        serde_json::to_string_pretty(value).expect("command output serializes")
    );
    Ok(())
}

fn load_calibration(path: &PathBuf, samples: Option<usize>) -> Result<Vec<CalibSample>> {
    if samples == Some(0) {
        return Err(PopError::Config("--samples must be at least 1".into()));
    }
    let text = std::fs::read_to_string(path).map_err(|e| PopError::io(path, e))?;
    let mut set = calibration_from_jsonl(&text)?;
    if let Some(n) = samples {
        set.truncate(n);
    }
    Ok(set)
}

fn cmd_init(a: InitArgs) -> Result<()> {
    let config = ModelConfig::from_json_file(&a.config)?;
    let weights = init_model(&config, a.seed)?;
    save_checkpoint(&weights, &a.out)?;
    let parameters: usize = weights.tensors().iter().map(|(_, t)| t.numel()).sum();
    emit(&json!({
        "checkpoint": a.out,
        "weights_hash": weights_hash(&weights),
        "parameters": parameters,
    }))
}

fn cmd_train(a: TrainArgs) -> Result<()> {
    let config = ModelConfig::from_json_file(&a.config)?;
    let tcfg = TrainConfig {
        steps: a.steps,
        batch: a.batch,
        seq_len: a.seq_len,
        learning_rate: a.learning_rate,
        warmup_steps: a.warmup_steps,
        seed: a.seed,
        corpus: a.corpus.clone(),
    };
    let outcome = train(&config, &tcfg)?;
    save_checkpoint(&outcome.weights, &a.out)?;
    if let Some(path) = &a.loss_csv {
        write_loss_csv(path, &outcome.losses)?;
    }
    let corpus = load_corpus(&a.corpus)?;
    let (_, heldout) = split_corpus(&corpus);
    let heldout = heldout_loss(&outcome.weights, heldout, a.seq_len)?;
    emit(&json!({
        "checkpoint": a.out,
        "weights_hash": weights_hash(&outcome.weights),
        "steps": a.steps,
        "first_loss": outcome.losses.first(),
        "final_loss": outcome.losses.last(),
        "heldout_loss": heldout,
    }))
}

fn cmd_generate(a: GenerateArgs) -> Result<()> {
    let weights = load_checkpoint(&a.checkpoint)?;
    let prompt = tokenizer::encode_str(&a.prompt);
    let tokens = generate(&weights, &prompt, a.max_new, a.temperature, a.seed)?;
    let text = String::from_utf8_lossy(&tokenizer::decode(&tokens)?).into_owned();
    emit(&json!({ "tokens": tokens, "text": text }))
}

fn cmd_importance(a: ImportanceArgs) -> Result<()> {
    let weights = load_checkpoint(&a.checkpoint)?;
    let mut samples = load_calibration(&a.calib, a.samples)?;
    let sampling = SamplingParams {
        temperature: a.temperature,
        max_len: a.max_new,
    };
    let profile = estimate_importance(
        &weights,
        &mut samples,
        a.stage_aware,
        &sampling,
        a.seed,
        false,
    )?;
    match &a.out {
        Some(path) => {
            profile.save(path)?;
            emit(&json!({
                "profile": path,
                "model_hash": profile.model_hash,
                "num_samples": profile.num_samples,
                "stage_aware": profile.stage_aware,
            }))
        }
        None => emit(&profile),
    }
}

fn cmd_plan(a: PlanArgs) -> Result<()> {
    let num_layers = match (a.layers, &a.config) {
        (Some(n), _) => n,
        (None, Some(path)) => ModelConfig::from_json_file(path)?.num_layers,
        (None, None) => {
            return Err(PopError::Config(
                "plan needs --layers or --config to know the layer count".into(),
            ))
        }
    };
    let plan = a.plan.build(num_layers)?;
    if let Some(path) = &a.out {
        plan.save(path)?;
    }
    emit(&plan)
}

fn cmd_pop_generate(a: PopGenerateArgs) -> Result<()> {
    let weights = load_checkpoint(&a.checkpoint)?;
    let plan = match &a.plan {
        Some(path) => PruningPlan::load(path)?,
        None => a.plan_flags.build(weights.config.num_layers)?,
    };
    let prompt = tokenizer::encode_str(&a.prompt);
    let (tokens, trace) = pop_generate(&weights, &plan, &prompt, a.max_new, a.temperature, a.seed)?;
    let text = String::from_utf8_lossy(&tokenizer::decode(&tokens)?).into_owned();
    let (full, kv_only, skipped) = trace.mode_counts();
    emit(&json!({
        "tokens": tokens,
        "text": text,
        "skipped_layers": plan.skip_set.iter().map(|l| l + 1).collect::<Vec<_>>(),
        "prefill_seconds": trace.prefill_seconds,
        "first_token_seconds": trace.first_token_seconds,
        "position_layer_modes": { "full": full, "kv_only": kv_only, "skipped": skipped },
    }))
}

fn cmd_flops(a: FlopsArgs) -> Result<()> {
    if a.seq_len == 0 {
        return Err(PopError::Config("--seq-len must be at least 1".into()));
    }
    let config = ModelConfig::from_json_file(&a.config)?;
    let plan = a.plan.build(config.num_layers)?;
    emit(&count_flops(&config, &plan, a.seq_len))
}

fn cmd_bench(a: BenchArgs) -> Result<()> {
    let weights = load_checkpoint(&a.checkpoint)?;
    let plan = a.plan.build(weights.config.num_layers)?;
    let stats = bench_ttft(&weights, &plan, a.seq_len, a.batch, a.reps, a.seed)?;
    emit(&stats)
}

fn cmd_diagnose(a: DiagnoseArgs) -> Result<()> {
    if a.samples == 0 {
        return Err(PopError::Config("--samples must be at least 1".into()));
    }
    let weights = load_checkpoint(&a.checkpoint)?;
    let plan = a.plan.build(weights.config.num_layers)?;
    let prompts: Vec<Vec<u32>> = match &a.calib {
        Some(path) => load_calibration(path, Some(a.samples))?
            .into_iter()
            .map(|s| s.prompt)
            .collect(),
        None => synthetic_prompts(a.seq_len, a.samples, a.seed),
    };
    let trace = drift_diagnostics(&weights, &plan, &prompts)?;
    if let Some(path) = &a.out {
        write_drift_csv(&trace, path)?;
    }
    if let Some(path) = &a.svg {
        write_drift_svg(&trace, path)?;
    }
    emit(&trace)
}

fn cmd_ablate(a: AblateArgs) -> Result<()> {
    let weights = load_checkpoint(&a.checkpoint)?;
    let mut samples = load_calibration(&a.calib, a.samples)?;
    let sampling = SamplingParams {
        temperature: a.temperature,
        max_len: a.max_new,
    };
    fill_responses(&weights, &mut samples, &sampling, a.seed)?;
    let metrics: Vec<VariantMetrics> = Variant::ALL
        .iter()
        .map(|&v| run_variant(&weights, v, a.ratio, &samples))
        .collect::<Result<_>>()?;
    if let Some(path) = &a.out {
        write_variant_csv(path, &metrics)?;
    }
    emit(&metrics)
}

fn cmd_figures(a: FiguresArgs) -> Result<()> {
    let paths = reproduce_figures(&a.checkpoint, &a.calib, &a.out, a.samples, a.seed)?;
    emit(&paths)
}
