//! `ccnn`: generate data, train, evaluate, predict, export kernels and
//! benchmark continuous-kernel disruption predictors.

use std::fs;
use std::io::{self, BufWriter, Read, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use ccnn_core::config::RunConfig;
use ccnn_core::eval::{self, DEFAULT_MAX_FPR};
use ccnn_core::gradcore::Tensor;
use ccnn_core::kernels::{effective_length_of, write_kernel_csv, CoordinateGrid};
use ccnn_core::model::CcnnModel;
use ccnn_core::shots::{
    load_dataset, parse_shot_csv, synth_generate, write_dataset, Shot, N_FEATURES,
};
use ccnn_core::train::{run_case, split_case};
use ccnn_core::Error;
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

const CONFIG_FILE: &str = "config.json";
const TIMING_FILE: &str = "timing.json";

#[derive(Parser)]
#[command(
    name = "ccnn",
    version,
    about = "Continuous-kernel CNNs for disruption prediction"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic shot dataset.
    Synth(SynthArgs),
    /// Train a model on one dataset-composition case.
    Train(TrainArgs),
    /// Score a dataset with a trained model.
    Eval(EvalArgs),
    /// Emit the disruptivity trace of one shot.
    Predict(PredictArgs),
    /// Write the sampled kernels of every block as CSV.
    ExportKernels(ExportArgs),
    /// Time single-shot inference.
    Bench(BenchArgs),
}

#[derive(Args)]
struct ConfigArg {
    /// Run configuration (JSON); flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args)]
struct SynthArgs {
    #[command(flatten)]
    config: ConfigArg,
    /// Output dataset directory.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    n_shots: Option<usize>,
    #[arg(long)]
    disruptive_fraction: Option<f64>,
    /// Replace an existing dataset in `out`.
    #[arg(long)]
    force: bool,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    config: ConfigArg,
    /// Dataset directory.
    #[arg(long)]
    data: PathBuf,
    /// Training-set composition: 1 all shots, 2 twenty disruptive, 3 a third
    /// of the non-disruptive shots.
    #[arg(long)]
    case: Option<u8>,
    /// Seeds both the model initialisation and training.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epochs: Option<usize>,
    /// Output directory for model, report and resolved config.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    /// Every shot in the dataset.
    All,
    /// The held-out test shots of the configured split.
    Test,
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    config: ConfigArg,
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, value_enum, default_value = "all")]
    split: SplitArg,
    /// False-positive-rate budgets for the reported operating points.
    #[arg(long, num_args = 1.., default_values_t = [DEFAULT_MAX_FPR])]
    max_fpr: Vec<f64>,
    /// Length of the exported disruptivity traces before the end of each shot.
    #[arg(long, default_value_t = 1000.0)]
    trace_window_ms: f64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct PredictArgs {
    #[arg(long)]
    model: PathBuf,
    /// Shot CSV (time_s plus the feature columns).
    #[arg(long, conflicts_with = "stdin", required_unless_present = "stdin")]
    shot_csv: Option<PathBuf>,
    /// Read the shot CSV from standard input.
    #[arg(long)]
    stdin: bool,
}

#[derive(Args)]
struct ExportArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct BenchArgs {
    #[command(flatten)]
    config: ConfigArg,
    /// Trained model; a freshly initialised one is timed otherwise.
    #[arg(long)]
    model: Option<PathBuf>,
    #[arg(long, default_value_t = 200)]
    samples: usize,
    #[arg(long, default_value_t = 50)]
    warmups: usize,
    #[arg(long, default_value_t = 1000)]
    iterations: usize,
}

/// A failure with its process exit code.
struct Failure {
    code: u8,
    message: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::Config(_) | Error::NotImplemented(_) => 2,
            Error::Composition(_) => 3,
            _ => 4,
        };
        Self {
            code,
            message: e.to_string(),
        }
    }
}

impl From<io::Error> for Failure {
    fn from(e: io::Error) -> Self {
        Error::Io(e).into()
    }
}

type CliResult<T = ()> = Result<T, Failure>;

fn config_error(message: impl Into<String>) -> Failure {
    Failure {
        code: 2,
        message: message.into(),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Synth(a) => cmd_synth(a),
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Predict(a) => cmd_predict(a),
        Command::ExportKernels(a) => cmd_export_kernels(a),
        Command::Bench(a) => cmd_bench(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}

fn load_config(arg: &ConfigArg) -> CliResult<RunConfig> {
    match &arg.config {
        None => Ok(RunConfig::default()),
        Some(path) => {
            let text = fs::read_to_string(path)
                .map_err(|e| config_error(format!("cannot read config {}: {e}", path.display())))?;
            Ok(RunConfig::from_json(&text)?)
        }
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> CliResult {
    let mut text = serde_json::to_string_pretty(value).map_err(Error::from)?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

#[derive(Serialize)]
struct Timing {
    command: &'static str,
    wall_clock_s: f64,
}

fn write_timing(dir: &Path, command: &'static str, started: Instant) -> CliResult {
    write_json(
        &dir.join(TIMING_FILE),
        &Timing {
            command,
            wall_clock_s: started.elapsed().as_secs_f64(),
        },
    )
}

fn cmd_synth(a: SynthArgs) -> CliResult {
    let started = Instant::now();
    let mut cfg = load_config(&a.config)?;
    if let Some(seed) = a.seed {
        cfg.data_seed = seed;
    }
    if let Some(n) = a.n_shots {
        cfg.synth.n_shots = n;
    }
    if let Some(f) = a.disruptive_fraction {
        cfg.synth.disruptive_fraction = f;
    }
    cfg.validate()?;

    if a.out.exists() {
        let non_empty = fs::read_dir(&a.out)?.next().is_some();
        if non_empty && !a.force {
            return Err(config_error(format!(
                "{} exists and is not empty (use --force to replace it)",
                a.out.display()
            )));
        }
        if a.force {
            let shots_dir = a.out.join("shots");
            if shots_dir.exists() {
                fs::remove_dir_all(&shots_dir)?;
            }
        }
    }
    let (manifest, shots) = synth_generate(&cfg.synth, cfg.data_seed)?;
    write_dataset(&a.out, &manifest, &shots)?;
    fs::write(a.out.join(CONFIG_FILE), cfg.to_json()?)?;
    write_timing(&a.out, "synth", started)?;
    println!(
        "wrote {} shots to {}: disruptive {} nondisruptive {}",
        shots.len(),
        a.out.display(),
        manifest.counts.disruptive,
        manifest.counts.nondisruptive
    );
    Ok(())
}

fn check_step(cfg: &RunConfig, step_s: f64) -> CliResult {
    if (cfg.model.step_s - step_s).abs() > 1e-12 {
        return Err(config_error(format!(
            "dataset is sampled every {step_s} s but the model expects {} s",
            cfg.model.step_s
        )));
    }
    Ok(())
}

fn cmd_train(a: TrainArgs) -> CliResult {
    let started = Instant::now();
    let mut cfg = load_config(&a.config)?;
    if let Some(case) = a.case {
        cfg.train.case = case;
    }
    if let Some(seed) = a.seed {
        cfg.train.seed = seed;
        cfg.model.seed = seed;
    }
    if let Some(epochs) = a.epochs {
        cfg.train.epochs = epochs;
    }
    cfg.validate()?;

    let data = load_dataset(&a.data)?;
    check_step(&cfg, data.manifest.step_s)?;
    if !data.excluded.is_empty() {
        log::info!(
            "{} shots too short after truncation were skipped",
            data.excluded.len()
        );
    }
    let run = run_case(&data.shots, &cfg.model, &cfg.train)?;

    fs::create_dir_all(&a.out)?;
    fs::write(a.out.join(CONFIG_FILE), cfg.to_json()?)?;
    run.model.save(&a.out.join("model.json"))?;
    write_json(&a.out.join("report.json"), &run.report)?;
    write_timing(&a.out, "train", started)?;

    let r = &run.report;
    println!(
        "case {} trained on {} shots ({} disruptive), best epoch {}",
        cfg.train.case, r.n_train, r.n_train_disruptive, r.best_epoch
    );
    match r.test_auc {
        Some(auc) => println!("test auc {auc:.6} on {} shots", r.n_test),
        None => println!("no test shots"),
    }
    Ok(())
}

fn cmd_eval(a: EvalArgs) -> CliResult {
    let started = Instant::now();
    let cfg = load_config(&a.config)?;
    let model = CcnnModel::load(&a.model)?;
    let data = load_dataset(&a.data)?;
    if (model.config.step_s - data.manifest.step_s).abs() > 1e-12 {
        return Err(config_error(format!(
            "dataset is sampled every {} s but the model expects {} s",
            data.manifest.step_s, model.config.step_s
        )));
    }
    let shots: Vec<Shot> = match a.split {
        SplitArg::All => data.shots,
        SplitArg::Test => split_case(&data.shots, 1, cfg.train.seed, cfg.train.test_fraction)?.test,
    };
    let (report, roc) = eval::evaluate(&model, &shots, &a.max_fpr)?;
    let traces = eval::export_traces(&model, &shots, a.trace_window_ms)?;

    fs::create_dir_all(&a.out)?;
    fs::write(a.out.join(CONFIG_FILE), cfg.to_json()?)?;
    write_json(&a.out.join("eval_report.json"), &report)?;
    eval::write_roc_csv(
        BufWriter::new(fs::File::create(a.out.join("roc.csv"))?),
        &roc,
    )?;
    eval::write_traces_csv(
        BufWriter::new(fs::File::create(a.out.join("traces.csv"))?),
        &traces.rows,
    )?;
    write_timing(&a.out, "eval", started)?;

    println!(
        "auc {:.6} on {} shots ({} disruptive)",
        report.auc, report.n_shots, report.n_disruptive
    );
    for op in &report.operating_points {
        println!(
            "fpr <= {}: tpr {:.4} fpr {:.4} threshold {:.6}",
            op.max_fpr, op.tpr, op.fpr, op.threshold
        );
    }
    Ok(())
}

fn cmd_predict(a: PredictArgs) -> CliResult {
    let model = CcnnModel::load(&a.model)?;
    let mut text = Vec::new();
    match &a.shot_csv {
        Some(path) => {
            text = fs::read(path).map_err(|e| {
                Failure::from(Error::Input(format!("cannot read {}: {e}", path.display())))
            })?
        }
        None => {
            io::stdin().lock().read_to_end(&mut text)?;
        }
    }
    let table = parse_shot_csv(text.as_slice())?;
    let step_s = model.config.step_s;
    let x = table.to_channels(step_s)?;
    let trace = model.forward_trace(&x)?;
    let t0_ms = table.times[0] * 1000.0;

    let stdout = io::stdout();
    let mut out = BufWriter::new(stdout.lock());
    for (i, d) in trace.iter().enumerate() {
        writeln!(out, "{},{}", t0_ms + i as f64 * step_s * 1000.0, d)?;
    }
    let score = trace.last().copied().unwrap_or(0.5);
    writeln!(out, "score,{score}")?;
    out.flush()?;
    Ok(())
}

fn cmd_export_kernels(a: ExportArgs) -> CliResult {
    let model = CcnnModel::load(&a.model)?;
    let grid = CoordinateGrid::full(model.config.step_s, model.config.horizon_s)?;
    fs::create_dir_all(&a.out)?;
    for (b, block) in model.blocks.iter().enumerate() {
        let path = a.out.join(format!("kernel_block{b}.csv"));
        write_kernel_csv(
            BufWriter::new(fs::File::create(&path)?),
            &block.kernel.export_rows(&grid)?,
        )?;
        let sampled = block.kernel.sample(&grid)?;
        let k_len = grid.len();
        for (c, row) in sampled.data().chunks(k_len).enumerate() {
            let filter = Tensor::new(vec![1, k_len], row.to_vec())?;
            let len = effective_length_of(&filter, grid.step_s());
            println!("block {b} channel {c} effective_length_ms {}", len.ms);
        }
    }
    Ok(())
}

fn cmd_bench(a: BenchArgs) -> CliResult {
    let model = match &a.model {
        Some(path) => CcnnModel::load(path)?,
        None => CcnnModel::init(&load_config(&a.config)?.model)?,
    };
    if a.samples == 0 {
        return Err(config_error("--samples must be positive"));
    }
    let data = (0..N_FEATURES * a.samples)
        .map(|i| (i as f64 * 0.37).sin())
        .collect();
    let x = Tensor::new(vec![N_FEATURES, a.samples], data)?;
    let stats = eval::bench_latency(&model, &x, a.warmups, a.iterations)?;
    println!("samples {} iterations {}", stats.samples, stats.iterations);
    println!("median_ms {:.4}", stats.median_ms);
    println!("p95_ms {:.4}", stats.p95_ms);
    Ok(())
}
