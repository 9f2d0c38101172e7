use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use vb_cli::artifacts::{clear_failed, mark_failed, RunLock};
use vb_cli::config::OracleKind;
use vb_cli::{resolve_config, stages, Run};

/// Virtual biopsy: phantom generation, tumor localization and
/// mask-guided classification of 3D brain volumes.
#[derive(Parser, Debug)]
#[command(name = "vbiopsy", version)]
struct Cli {
    /// Run configuration (TOML); built-in defaults when omitted
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Output root; overrides `output_root`
    #[arg(long, global = true, value_name = "DIR")]
    out: Option<PathBuf>,
    /// Master seed; overrides `master_seed`
    #[arg(long, global = true, value_name = "N")]
    seed: Option<u64>,
    /// Worker threads; 0 uses every core
    #[arg(long, global = true, value_name = "N", default_value_t = 0)]
    jobs: usize,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum OracleArg {
    Stub,
    Remote,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate the synthetic cohort and its manifest
    PhantomGen,
    /// Brain extraction, bias correction and template registration
    Preprocess,
    /// Coarse tumor prior from slice boxes, then the refined mask
    Localize {
        /// Box predictor; overrides `oracle.kind`
        #[arg(long, value_enum)]
        oracle: Option<OracleArg>,
    },
    /// Stratified folds and one diagnoser per fold
    Train,
    /// Score the fold checkpoints on their held-out cases
    Evaluate,
    /// Five-row ablation of mask source and attention head
    Ablate,
    /// Grad-CAM heatmaps of correctly classified test cases
    Saliency,
    /// Every stage in order
    Pipeline,
    /// Classify one registered volume and print the result as JSON
    Predict {
        /// Diagnoser checkpoint
        #[arg(long, value_name = "PATH")]
        checkpoint: PathBuf,
        /// Case id under the output root, or a path to a registered VBV volume
        #[arg(long, value_name = "ID|PATH")]
        case: String,
        /// Attention mask; defaults to the case's refined mask, or the whole volume for a bare file
        #[arg(long, value_name = "PATH")]
        mask: Option<PathBuf>,
    },
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::PhantomGen => "phantom-gen",
            Command::Preprocess => "preprocess",
            Command::Localize { .. } => "localize",
            Command::Train => "train",
            Command::Evaluate => "evaluate",
            Command::Ablate => "ablate",
            Command::Saliency => "saliency",
            Command::Pipeline => "pipeline",
            Command::Predict { .. } => "predict",
        }
    }
}

fn execute(cli: Cli) -> anyhow::Result<()> {
    let mut cfg = resolve_config(cli.config.as_deref(), cli.out.clone(), cli.seed)?;
    if let Command::Localize { oracle: Some(o) } = &cli.command {
        cfg.oracle.kind = match o {
            OracleArg::Stub => OracleKind::Stub,
            OracleArg::Remote => OracleKind::Remote,
        };
    }
    let run = Run::new(cfg);
    if let Command::Predict { checkpoint, case, mask } = &cli.command {
        let (volume, mask) = resolve_case(&run, case, mask.clone());
        let pred = stages::predict(checkpoint, &volume, mask.as_ref())?;
        println!("{}", serde_json::to_string_pretty(&pred)?);
        return Ok(());
    }

    let root = run.layout.root.clone();
    let _lock = RunLock::acquire(&root)?;
    clear_failed(&root)?;
    let result = match &cli.command {
        Command::PhantomGen => stages::phantom_gen(&run).map(drop),
        Command::Preprocess => stages::preprocess(&run).map(drop),
        Command::Localize { .. } => stages::localize(&run).map(drop),
        Command::Train => stages::train(&run).map(drop),
        Command::Evaluate => stages::evaluate(&run).map(drop),
        Command::Ablate => stages::ablate(&run).map(drop),
        Command::Saliency => stages::saliency(&run).map(drop),
        Command::Pipeline => stages::pipeline(&run),
        Command::Predict { .. } => unreachable!("handled above"),
    };
    if let Err(e) = &result {
        mark_failed(&root, cli.command.name(), e);
    }
    result
}

/// A bare path is used as is; anything else names a case of the run.
fn resolve_case(run: &Run, case: &str, mask: Option<PathBuf>) -> (PathBuf, Option<PathBuf>) {
    let direct = PathBuf::from(case);
    if direct.is_file() {
        return (direct, mask);
    }
    let volume = run.layout.stage("preprocess").join(format!("{case}.vbv"));
    let mask = mask.or_else(|| {
        let name = match stages::mask_source(run.cfg.diagnoser.head) {
            vb_core::eval::MaskSource::Brain => run.layout.stage("preprocess").join(format!("{case}_brain.vbm")),
            _ => run.layout.stage("localize").join(format!("{case}_refined.vbm")),
        };
        Some(name)
    });
    (volume, mask)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("VB_LOG", "info")).init();
    let cli = Cli::parse();
    if cli.jobs > 0 {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(cli.jobs).build_global() {
            eprintln!("error: {e}");
            return ExitCode::FAILURE;
        }
    }
    match execute(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
