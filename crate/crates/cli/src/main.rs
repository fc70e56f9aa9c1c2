mod error;
mod layered;
mod stages;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use nfembed::datamodel::{save_dataset, Dataset, TraitKind};
use nfembed::eval::{emit_report, render_summary, run_experiment, EvalReport, ExperimentConfig};
use nfembed::pipeline::LstmVariant;
use nfembed::synthgen::{generate, GeneratorConfig};

use error::{CliError, Result};
use layered::{resolve, ENV_PREFIX};
use stages::{FitRequest, TrainRequest};

/// Subject embeddings from passive and active fMRI runs.
#[derive(Parser)]
#[command(name = "nfembed", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic dataset container.
    Generate(GenerateArgs),
    /// Train one pipeline stage and write its bundle and loss curve.
    Train(TrainArgs),
    /// Fit one subject's embedding against a frozen lstm bundle.
    FitEmbedding(FitArgs),
    /// Run the repeated-split evaluation and write the report set.
    Evaluate(EvaluateArgs),
    /// Re-render a saved report.json.
    Report(ReportArgs),
}

#[derive(Args)]
struct GenerateArgs {
    /// Generator config (JSON); defaults apply to missing fields.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Stage {
    P2a,
    Lstm,
    Classifier,
}

#[derive(Clone, Copy, ValueEnum)]
enum Variant {
    Conditioned,
    Vanilla,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long, value_enum)]
    stage: Stage,
    /// Dataset container.
    #[arg(long)]
    data: PathBuf,
    /// Bundle from the previous stage (p2a for lstm, lstm for classifier).
    #[arg(long)]
    model_in: Option<PathBuf>,
    #[arg(long)]
    model_out: PathBuf,
    /// Loss-curve CSV; defaults to the bundle path with a `.curve.csv` extension.
    #[arg(long)]
    curve_out: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "conditioned")]
    variant: Variant,
    /// Experiment config (JSON); its seed and stage sections are used.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct FitArgs {
    /// Conditioned lstm bundle.
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    subject_id: String,
    #[arg(long)]
    out: PathBuf,
    /// Overrides the fit steps recorded in the bundle.
    #[arg(long)]
    steps: Option<usize>,
    /// Overrides the fit learning rate recorded in the bundle.
    #[arg(long)]
    lr: Option<f64>,
}

#[derive(Args)]
struct EvaluateArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out_dir: PathBuf,
    /// Cap on repeats run in parallel; defaults to every core.
    #[arg(long)]
    threads: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct ReportArgs {
    /// A report.json written by `evaluate`.
    #[arg(long)]
    report: PathBuf,
    /// Rewrite the CSV tables and summary here.
    #[arg(long)]
    out_dir: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = e.exit_code();
            let _ = e.print();
            return ExitCode::from(code as u8);
        }
    };
    let env: Vec<(String, String)> = std::env::vars().filter(|(k, _)| k.starts_with(ENV_PREFIX)).collect();
    match run(cli.command, &env) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}

fn run(command: Command, env: &[(String, String)]) -> Result<()> {
    match command {
        Command::Generate(a) => cmd_generate(a, env),
        Command::Train(a) => cmd_train(a, env),
        Command::FitEmbedding(a) => stages::fit_embedding(&FitRequest {
            model: &a.model,
            data: &a.data,
            subject_id: &a.subject_id,
            out: &a.out,
            steps: a.steps,
            lr: a.lr,
        })
        .map(drop),
        Command::Evaluate(a) => cmd_evaluate(a, env),
        Command::Report(a) => cmd_report(a),
    }
}

fn describe(dataset: &Dataset, path: &Path) -> String {
    let s = &dataset.shape;
    let traits: Vec<&str> = TraitKind::ALL
        .into_iter()
        .filter(|k| dataset.cohort.allows(*k))
        .map(TraitKind::name)
        .collect();
    format!(
        "{}: {} subjects ({:?}), frames {}x{}x{}, {} runs of {} passive + {} active\ntraits: {}",
        path.display(),
        dataset.len(),
        dataset.cohort,
        s.dims.h,
        s.dims.w,
        s.dims.d,
        s.runs,
        s.t_passive,
        s.t_active,
        traits.join(", ")
    )
}

fn cmd_generate(a: GenerateArgs, env: &[(String, String)]) -> Result<()> {
    let mut cfg: GeneratorConfig = resolve(a.config.as_deref(), env, &[])?;
    if let Some(seed) = a.seed {
        cfg.seed = seed;
    }
    cfg.validate()?;
    let dataset = generate(&cfg)?.dataset;
    if let Some(dir) = a.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    save_dataset(&dataset, &a.out)?;
    println!("{}", describe(&dataset, &a.out));
    Ok(())
}

fn experiment_config(path: Option<&Path>, env: &[(String, String)], seed: Option<u64>) -> Result<ExperimentConfig> {
    let mut cfg: ExperimentConfig = resolve(path, env, &["threads"])?;
    if let Some(seed) = seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

fn cmd_train(a: TrainArgs, env: &[(String, String)]) -> Result<()> {
    let config = experiment_config(a.config.as_deref(), env, a.seed)?;
    config.p2a.validate()?;
    config.lstm.validate()?;
    let req = TrainRequest {
        config,
        data: &a.data,
        model_in: a.model_in.as_deref(),
        model_out: &a.model_out,
        curve_out: a.curve_out.as_deref(),
        variant: match a.variant {
            Variant::Conditioned => LstmVariant::Conditioned,
            Variant::Vanilla => LstmVariant::Vanilla,
        },
    };
    match a.stage {
        Stage::P2a => stages::train_p2a_stage(&req),
        Stage::Lstm => stages::train_lstm_stage(&req),
        Stage::Classifier => stages::train_classifier_stage(&req),
    }
    .map(drop)
}

fn cmd_evaluate(a: EvaluateArgs, env: &[(String, String)]) -> Result<()> {
    let mut cfg = experiment_config(a.config.as_deref(), env, a.seed)?;
    if a.threads.is_some() {
        cfg.threads = a.threads;
    }
    let out = run_experiment(&cfg)?;
    emit_report(&out.report, Some(&out.predictions), &a.out_dir)?;
    print!("{}", render_summary(&out.report));
    println!("wrote {}", a.out_dir.display());
    let failed = out.report.incomplete_repeats;
    if failed > 0 {
        return Err(CliError::Incomplete {
            failed,
            total: out.report.repeats.len(),
        });
    }
    Ok(())
}

fn cmd_report(a: ReportArgs) -> Result<()> {
    let report = EvalReport::load(&a.report)?;
    if let Some(dir) = &a.out_dir {
        emit_report(&report, None, dir)?;
    }
    print!("{}", render_summary(&report));
    Ok(())
}
