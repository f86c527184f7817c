use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use log::info;

use sprint_core::calibration::{write_token_file, CalibrationSet};
use sprint_core::engine::{replay, run, PruneConfig, ReferenceMode, DEFAULT_ALPHA, DEFAULT_BETA};
use sprint_core::latency::{measure_latency_table, Clock, LatencyTable, MonotonicClock};
use sprint_core::model::{build_toy_model, load_model, vary_sublayer_gains, save_model, write_model, ModelConfig, SublayerStack};
use sprint_core::report::{eval_fidelity, plot_svg, render_pattern, CalibrationSpec, Report};
use sprint_core::tuning::{default_rows_percent, Ridge};
use sprint_core::{Result, SprintError};

/// Exit code for command-line usage errors, shared with configuration errors.
const USAGE_EXIT: u8 = 4;
const BUILTIN_TABLE: &str = "llama3-8b-gen";

#[derive(Parser)]
#[command(name = "sprint", version, about = "Latency-aware sublayer pruning for decoder-only transformers")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a randomly initialized toy model.
    GenToy(GenToyArgs),
    /// Write uniformly random token ids.
    GenTokens(GenTokensArgs),
    /// Print a model's configuration, pruning pattern and latency.
    Inspect(InspectArgs),
    /// Time sublayers on this machine and write a latency table.
    MeasureLatency(MeasureArgs),
    /// Prune a model until it fits a latency budget.
    Prune(PruneArgs),
    /// Compare a pruned model with its original on held-out tokens.
    Eval(EvalArgs),
    /// Re-apply a report's trajectory to the input model.
    Replay(ReplayArgs),
    /// Render a report as SVG.
    Plot(PlotArgs),
}

#[derive(Args)]
struct GenToyArgs {
    #[arg(long, default_value_t = 32)]
    d_model: usize,
    #[arg(long, default_value_t = 4)]
    heads: usize,
    #[arg(long, default_value_t = 64)]
    d_ff: usize,
    #[arg(long, default_value_t = 8)]
    layers: usize,
    #[arg(long, default_value_t = 256)]
    vocab: usize,
    #[arg(long, default_value_t = 128)]
    max_seq_len: usize,
    #[arg(long, default_value_t = 1e-6)]
    norm_eps: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Rescale each sublayer's output projection by a random gain.
    #[arg(long)]
    varied_gains: bool,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct GenTokensArgs {
    #[arg(long)]
    vocab: usize,
    #[arg(long)]
    count: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct InspectArgs {
    #[arg(long)]
    model: PathBuf,
    /// Latency table JSON, or `llama3-8b-gen`.
    #[arg(long, default_value = BUILTIN_TABLE)]
    latency_table: String,
    /// Model to compute the speedup against; defaults to the model itself.
    #[arg(long)]
    baseline: Option<PathBuf>,
}

#[derive(Args)]
struct CalibArgs {
    /// Token file, or `synth` for uniformly random tokens.
    #[arg(long)]
    calib: String,
    #[arg(long, default_value_t = 16)]
    calib_seqs: usize,
    #[arg(long, default_value_t = 64)]
    calib_len: usize,
    #[arg(long, default_value_t = 0)]
    calib_seed: u64,
}

impl CalibArgs {
    fn spec(&self) -> CalibrationSpec {
        if self.calib == "synth" {
            CalibrationSpec::Synth { n_seqs: self.calib_seqs, seq_len: self.calib_len, seed: self.calib_seed }
        } else {
            CalibrationSpec::File {
                path: PathBuf::from(&self.calib),
                n_seqs: self.calib_seqs,
                seq_len: self.calib_len,
                seed: self.calib_seed,
            }
        }
    }
}

#[derive(Args)]
struct MeasureArgs {
    #[arg(long)]
    model: PathBuf,
    #[command(flatten)]
    calib: CalibArgs,
    #[arg(long, default_value_t = 7)]
    trials: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct PruneArgs {
    #[arg(long)]
    model: PathBuf,
    #[command(flatten)]
    calib: CalibArgs,
    /// Latency budget in milliseconds.
    #[arg(long)]
    tau_ms: f64,
    /// Latency table JSON, or `llama3-8b-gen`.
    #[arg(long, conflicts_with = "measure")]
    latency_table: Option<String>,
    /// Measure the latency table on the calibration set instead.
    #[arg(long)]
    measure: bool,
    #[arg(long, default_value_t = 7)]
    measure_trials: usize,
    #[arg(long, default_value_t = DEFAULT_ALPHA)]
    alpha: usize,
    #[arg(long, default_value_t = DEFAULT_BETA)]
    beta: usize,
    /// Share of output rows to tune; 100, or 75 when d_model >= 8192.
    #[arg(long)]
    rows_percent: Option<f64>,
    /// `auto` or a nonnegative number.
    #[arg(long, default_value = "auto")]
    ridge: Ridge,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Score references from the current pruned model instead of the original.
    #[arg(long)]
    current_reference: bool,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    report: PathBuf,
    /// Write every iteration's pseudo-sensitivities to this JSON file.
    #[arg(long)]
    dump_scores: Option<PathBuf>,
    /// Keep activation checkpoints in files under this directory.
    #[arg(long)]
    spill_dir: Option<PathBuf>,
    /// Record per-iteration wall time in the report.
    #[arg(long)]
    timings: bool,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    original: PathBuf,
    #[arg(long)]
    pruned: PathBuf,
    /// Held-out token file, or `synth`.
    #[arg(long)]
    holdout: String,
    #[arg(long, default_value_t = 8)]
    holdout_seqs: usize,
    #[arg(long, default_value_t = 32)]
    holdout_len: usize,
    #[arg(long, default_value_t = 1)]
    holdout_seed: u64,
}

#[derive(Args)]
struct ReplayArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    report: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct PlotArgs {
    #[arg(long)]
    report: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

fn load_table(arg: &str) -> Result<LatencyTable> {
    if arg == BUILTIN_TABLE {
        Ok(LatencyTable::llama3_8b_generation())
    } else {
        LatencyTable::load(arg)
    }
}

fn print_json<T: serde::Serialize>(value: &T) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(value)?);
    Ok(())
}

fn gen_toy(a: GenToyArgs) -> Result<()> {
    let config = ModelConfig {
        d_model: a.d_model,
        n_heads: a.heads,
        d_ff: a.d_ff,
        n_layers: a.layers,
        vocab_size: a.vocab,
        max_seq_len: a.max_seq_len,
        norm_eps: a.norm_eps,
    };
    let mut model = build_toy_model(&config, a.seed)?;
    if a.varied_gains {
        vary_sublayer_gains(&mut model, a.seed);
    }
    save_model(&model, &a.out)
}

fn gen_tokens(a: GenTokensArgs) -> Result<()> {
    let seqs = sprint_core::calibration::synth_calibration(a.vocab, 1, a.count, a.seed)?;
    write_token_file(&a.out, &seqs.sequences[0])
}

fn inspect(a: InspectArgs) -> Result<()> {
    let model = load_model(&a.model)?;
    let table = load_table(&a.latency_table)?;
    let baseline = match &a.baseline {
        Some(p) => load_model(p)?,
        None => model.clone(),
    };
    let (n1, n2) = model.live_counts();
    let latency = table.latency_of(&model);
    print_json(&serde_json::json!({
        "config": model.config,
        "pattern": render_pattern(&model),
        "live_mha": n1,
        "live_mlp": n2,
        "pruned": model.pruned_indices(),
        "latency_table": table,
        "latency_ms": latency,
        "speedup": table.latency_of(&baseline) / latency,
    }))
}

fn measure(model: &SublayerStack, calib: &CalibrationSet, trials: usize) -> Result<LatencyTable> {
    measure_latency_table(model, &calib.sequences, trials, &mut MonotonicClock)
}

fn measure_latency(a: MeasureArgs) -> Result<()> {
    let model = load_model(&a.model)?;
    let calib = a.calib.spec().load(model.config.vocab_size)?;
    let table = measure(&model, &calib, a.trials)?;
    table.save(&a.out)?;
    print_json(&table)
}

fn save_bytes(model: &SublayerStack, path: &Path) -> Result<()> {
    let mut bytes = Vec::new();
    write_model(model, &mut bytes)?;
    fs::write(path, bytes)?;
    Ok(())
}

fn prune(a: PruneArgs) -> Result<()> {
    let model = load_model(&a.model)?;
    let spec = a.calib.spec();
    let calib = spec.load(model.config.vocab_size)?;
    let table = match (&a.latency_table, a.measure) {
        (_, true) => measure(&model, &calib, a.measure_trials)?,
        (Some(t), false) => load_table(t)?,
        (None, false) => return Err(SprintError::Config("pass --latency-table or --measure".into())),
    };
    let config = PruneConfig {
        tau_ms: a.tau_ms,
        alpha: a.alpha,
        beta: a.beta,
        rows_percent: a.rows_percent.unwrap_or_else(|| default_rows_percent(&model.config)),
        ridge: a.ridge,
        seed: a.seed,
        reference: if a.current_reference { ReferenceMode::Current } else { ReferenceMode::Dense },
        record_timings: a.timings,
        spill_dir: a.spill_dir.clone(),
    };
    if let Some(dir) = &config.spill_dir {
        fs::create_dir_all(dir)?;
    }
    let outcome = run(model.clone(), &calib, &config, &table)?;
    save_bytes(&outcome.model, &a.out)?;
    if let Some(path) = &a.dump_scores {
        fs::write(path, serde_json::to_string_pretty(&outcome.scores)? + "\n")?;
    }

    let mut clock = MonotonicClock;
    let before = clock.time_forward(&model, &calib.sequences)?;
    let after = clock.time_forward(&outcome.model, &calib.sequences)?;
    info!("wall-clock check: {before:.3} ms -> {after:.3} ms ({:.2}x)", before / after);

    let report = Report::build(&model, &outcome.model, &calib, spec, &config, &table, outcome.records)?;
    report.save(&a.report)?;
    println!("{}", report.pattern);
    println!(
        "pruned {} MHA + {} MLP, latency {:.4} -> {:.4} ms ({}), final relative error {:.6}",
        report.summary.n_pruned_mha,
        report.summary.n_pruned_mlp,
        report.summary.latency_before,
        report.summary.latency_after,
        report.summary.speedup.map_or("speedup n/a".to_string(), |x| format!("{x:.3}x")),
        report.summary.final_zeta
    );
    Ok(())
}

fn eval(a: EvalArgs) -> Result<()> {
    let original = load_model(&a.original)?;
    let pruned = load_model(&a.pruned)?;
    let spec = CalibArgs { calib: a.holdout, calib_seqs: a.holdout_seqs, calib_len: a.holdout_len, calib_seed: a.holdout_seed }
        .spec();
    let holdout = spec.load(original.config.vocab_size)?;
    print_json(&eval_fidelity(&original, &pruned, &holdout.sequences)?)
}

fn replay_cmd(a: ReplayArgs) -> Result<()> {
    let model = load_model(&a.model)?;
    let report = Report::load(&a.report)?;
    if report.model != model.config {
        return Err(SprintError::Data("report was produced for a different model configuration".into()));
    }
    let calib = report.calibration.load(model.config.vocab_size)?;
    let out = replay(&model, &calib, &report.config, &report.records)?;
    if render_pattern(&out) != report.pattern {
        return Err(SprintError::Data("replayed pattern differs from the report".into()));
    }
    save_bytes(&out, &a.out)
}

fn plot(a: PlotArgs) -> Result<()> {
    let report = Report::load(&a.report)?;
    fs::write(&a.out, plot_svg(&report))?;
    Ok(())
}

fn dispatch(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenToy(a) => gen_toy(a),
        Command::GenTokens(a) => gen_tokens(a),
        Command::Inspect(a) => inspect(a),
        Command::MeasureLatency(a) => measure_latency(a),
        Command::Prune(a) => prune(a),
        Command::Eval(a) => eval(a),
        Command::Replay(a) => replay_cmd(a),
        Command::Plot(a) => plot(a),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(USAGE_EXIT) } else { ExitCode::SUCCESS };
        }
    };
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
