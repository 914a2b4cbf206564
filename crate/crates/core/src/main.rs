use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use sens_merge::harness::experiment::{run_seeds, ExperimentConfig, Pipeline};
use sens_merge::harness::report::Format;
use sens_merge::{Error, MergeMethod};

#[derive(Parser)]
#[command(
    name = "sens-merge",
    version,
    about = "Sensitivity-guided model merging on toy MLPs"
)]
struct Cli {
    /// Experiment config (JSON). Defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the experiment seed and re-derives task seeds.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Overrides the output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a config file holding the defaults.
    InitConfig { path: PathBuf },
    /// Generate task datasets and the pretraining pool.
    GenData,
    /// Pretrain the shared base model.
    TrainBase,
    /// Fine-tune the base on each task.
    Finetune {
        #[arg(long)]
        task: Option<String>,
    },
    /// Write task vectors (fine-tuned minus base).
    TaskVector {
        #[arg(long)]
        task: Option<String>,
    },
    /// Compute sensitivity scores and merging coefficients.
    Sensitivity,
    /// Merge the fine-tuned models.
    Merge {
        #[arg(long)]
        method: Option<MergeMethod>,
        #[arg(long)]
        sens: Option<bool>,
    },
    /// Evaluate every model on every task and write the reports.
    Eval {
        #[arg(long, default_value = "csv")]
        format: Format,
    },
    /// Run every stage, optionally over several seeds.
    Compare {
        #[arg(long, value_delimiter = ',')]
        seeds: Vec<u64>,
        #[arg(long, default_value = "markdown")]
        format: Format,
    },
}

fn stage_name(cmd: &Command) -> &'static str {
    match cmd {
        Command::InitConfig { .. } => "init-config",
        Command::GenData => "gen-data",
        Command::TrainBase => "train-base",
        Command::Finetune { .. } => "finetune",
        Command::TaskVector { .. } => "task-vector",
        Command::Sensitivity => "sensitivity",
        Command::Merge { .. } => "merge",
        Command::Eval { .. } => "eval",
        Command::Compare { .. } => "compare",
    }
}

fn load_config(cli: &Cli) -> Result<ExperimentConfig, Error> {
    let mut cfg = match &cli.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg = cfg.with_seed(seed);
    }
    if let Some(out) = &cli.out {
        cfg.output_dir = out.clone();
    }
    Ok(cfg)
}

fn run(cli: &Cli) -> Result<(), Error> {
    let cfg = load_config(cli)?;
    if let Command::InitConfig { path } = &cli.command {
        return std::fs::write(path, cfg.to_json()?).map_err(|e| Error::Io {
            path: path.clone(),
            source: e,
        });
    }
    if let Command::Compare { seeds, format } = &cli.command {
        if !seeds.is_empty() {
            let (_, mean) = run_seeds(&cfg, seeds)?;
            print!("{}", mean.render(*format)?);
            return Ok(());
        }
        let table = Pipeline::new(cfg)?.compare()?;
        print!("{}", table.render(*format)?);
        return Ok(());
    }
    let p = Pipeline::new(cfg)?;
    match &cli.command {
        Command::GenData => p.gen_data(),
        Command::TrainBase => p.train_base(),
        Command::Finetune { task } => p.finetune(task.as_deref()),
        Command::TaskVector { task } => p.task_vectors(task.as_deref()),
        Command::Sensitivity => p.sensitivity().map(|_| ()),
        Command::Merge { method, sens } => {
            for (_, _, file) in p.merge(method.map(|m| (m, *sens)))? {
                println!("{}", p.path(&file).display());
            }
            Ok(())
        }
        Command::Eval { format } => {
            print!("{}", p.eval()?.render(*format)?);
            Ok(())
        }
        Command::InitConfig { .. } | Command::Compare { .. } => unreachable!(),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let (stage, cause) = match e {
                Error::Stage { stage, source } => (stage, source.to_string()),
                other => (stage_name(&cli.command), other.to_string()),
            };
            eprintln!("error: stage={stage} cause={}", cause.replace('\n', " "));
            ExitCode::FAILURE
        }
    }
}
