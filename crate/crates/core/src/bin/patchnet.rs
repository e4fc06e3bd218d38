//! Command-line entry point for the staged classification pipeline.
//!
//! Progress goes to standard error; standard output carries only the final
//! report path. Flags override the JSON config file.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use patchnet::experiment::Task;
use patchnet::model::Modality;
use patchnet::pipeline::{run_pipeline, PipelineConfig, Stage};

#[derive(Parser)]
#[command(
    name = "patchnet",
    about = "Multiscale patch featurization and branch-fusion classification on synthetic cohorts"
)]
struct Cli {
    #[command(subcommand)]
    stage: StageCmd,
}

#[derive(Subcommand)]
enum StageCmd {
    /// Generate the synthetic cohort
    Gen(CommonArgs),
    /// Build the multi-scale patch atlas
    Atlas(CommonArgs),
    /// Extract patch features from every scan
    Featurize(CommonArgs),
    /// Train the cross-validated ensembles
    Train(CommonArgs),
    /// Evaluate trained ensembles on the test folds
    Eval(CommonArgs),
    /// Assemble the final report
    Report(CommonArgs),
    /// Run every stage in order
    All(CommonArgs),
}

impl StageCmd {
    fn split(&self) -> (Stage, &CommonArgs) {
        match self {
            StageCmd::Gen(a) => (Stage::Gen, a),
            StageCmd::Atlas(a) => (Stage::Atlas, a),
            StageCmd::Featurize(a) => (Stage::Featurize, a),
            StageCmd::Train(a) => (Stage::Train, a),
            StageCmd::Eval(a) => (Stage::Eval, a),
            StageCmd::Report(a) => (Stage::Report, a),
            StageCmd::All(a) => (Stage::All, a),
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum TaskArg {
    #[value(name = "smci-pmci")]
    SmciPmci,
    L1,
    L2,
    L3,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModalityArg {
    Volume,
    Pet,
    Both,
}

#[derive(Args)]
struct CommonArgs {
    /// JSON configuration file; defaults apply when omitted
    #[arg(long)]
    config: Option<PathBuf>,
    /// Master seed; overrides the config file
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory; overrides the config file
    #[arg(long)]
    out: Option<PathBuf>,
    /// Worker thread cap
    #[arg(long)]
    jobs: Option<usize>,
    /// Classification task; overrides the config file
    #[arg(long, value_enum)]
    task: Option<TaskArg>,
    /// Modality mask; overrides the config file
    #[arg(long, value_enum)]
    modality: Option<ModalityArg>,
    /// Comma-separated scale indices (e.g. 0,1,2); overrides the config file
    #[arg(long)]
    scales: Option<String>,
}

fn build_config(args: &CommonArgs) -> patchnet::Result<PipelineConfig> {
    let mut cfg = match &args.config {
        Some(path) => PipelineConfig::load(path)?,
        None => PipelineConfig::default(),
    };
    if let Some(seed) = args.seed {
        cfg.set_seed(seed);
    }
    if let Some(out) = &args.out {
        cfg.output_dir = out.clone();
    }
    if let Some(task) = args.task {
        cfg.experiment.task = match task {
            TaskArg::SmciPmci => Task::SmciVsPmci,
            TaskArg::L1 => Task::PathologyL1,
            TaskArg::L2 => Task::PathologyL2,
            TaskArg::L3 => Task::PathologyL3,
        };
    }
    if let Some(modality) = args.modality {
        cfg.experiment.modalities = match modality {
            ModalityArg::Volume => vec![Modality::Volume],
            ModalityArg::Pet => vec![Modality::Pet],
            ModalityArg::Both => vec![Modality::Volume, Modality::Pet],
        };
    }
    if let Some(scales) = &args.scales {
        cfg.experiment.scales = scales
            .split(',')
            .map(|s| {
                s.trim().parse::<usize>().map_err(|e| {
                    patchnet::Error::Config(format!("bad scale index {s:?}: {e}"))
                })
            })
            .collect::<patchnet::Result<Vec<_>>>()?;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run() -> patchnet::Result<()> {
    let cli = Cli::parse();
    let (stage, args) = cli.stage.split();
    if let Some(jobs) = args.jobs {
        rayon::ThreadPoolBuilder::new()
            .num_threads(jobs)
            .build_global()
            .map_err(|e| patchnet::Error::Config(format!("thread pool: {e}")))?;
    }
    let cfg = build_config(args)?;
    if let Some(report_path) = run_pipeline(&cfg, stage)? {
        println!("{}", report_path.display());
    }
    Ok(())
}

fn main() -> ExitCode {
    match run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
