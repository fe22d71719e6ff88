use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context};
use clap::{Parser, Subcommand};
use log::info;

use mtl_core::checkpoint::load_checkpoint;
use mtl_core::config::{ExperimentConfig, GlobalConfig};
use mtl_core::data::synthetic::{gen_synthetic_suite, SyntheticConfig};
use mtl_core::experiment::{
    pairwise_mtl, run_experiment, Artifacts, Experiment, ExperimentError, ReportRow, RunReport, FINETUNE, REFINE,
};

#[derive(Parser)]
#[command(name = "mtl", version, about = "Multi-task training of a shared text encoder")]
struct Cli {
    /// Experiment config (TOML).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the global seed and every stage seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Directory for checkpoints, logs and reports.
    #[arg(long, global = true, default_value = "out")]
    out_dir: PathBuf,
    /// Log progress to stderr.
    #[arg(short, long, global = true)]
    verbose: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Masked-token pretraining of the encoder on the corpus.
    Pretrain,
    /// Multi-task refinement over every configured task.
    Refine {
        /// Initialize the encoder from this checkpoint.
        #[arg(long)]
        init: Option<PathBuf>,
    },
    /// Fine-tune a refined checkpoint on each task with a fresh head.
    Finetune {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Restrict to these tasks (repeatable); all configured tasks by default.
        #[arg(long = "task")]
        tasks: Vec<String>,
    },
    /// Evaluate a checkpoint on the configured datasets.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value = "test", value_parser = ["train", "dev", "test"])]
        split: String,
    },
    /// Pairwise task-affinity matrix.
    Pairwise,
    /// Write the synthetic task suite and a config that uses it.
    GenSynthetic {
        #[arg(long, default_value_t = 512)]
        train: usize,
        #[arg(long, default_value_t = 128)]
        dev: usize,
        #[arg(long, default_value_t = 128)]
        test: usize,
        #[arg(long, default_value_t = 0.5)]
        difficulty: f64,
    },
    /// Every stage listed in the config, ending with the strategy report.
    Run,
}

/// A failure with its exit status.
struct Failure {
    code: u8,
    error: anyhow::Error,
}

impl From<ExperimentError> for Failure {
    fn from(e: ExperimentError) -> Self {
        let code = if e.is_config() { 1 } else { 2 };
        Self { code, error: e.into() }
    }
}

fn config_error(error: anyhow::Error) -> Failure {
    Failure { code: 1, error }
}

fn runtime_error(error: anyhow::Error) -> Failure {
    Failure { code: 2, error }
}

fn load_config(cli: &Cli) -> Result<ExperimentConfig, Failure> {
    let path = cli
        .config
        .as_ref()
        .ok_or_else(|| config_error(anyhow!("--config is required for this command")))?;
    let config = ExperimentConfig::load(path).map_err(|e| config_error(e.into()))?;
    Ok(match cli.seed {
        Some(s) => config.with_seed(s),
        None => config,
    })
}

fn artifacts(cli: &Cli) -> Result<Artifacts, Failure> {
    Ok(Artifacts::create(&cli.out_dir)?)
}

fn emit(artifacts: &Artifacts, stem: &str, text: String, tsv: String) -> Result<(), Failure> {
    print!("{text}");
    artifacts.write(&format!("{stem}.txt"), &text)?;
    artifacts.write(&format!("{stem}.tsv"), &tsv)?;
    Ok(())
}

fn execute(cli: &Cli) -> Result<(), Failure> {
    match &cli.command {
        Command::Run => {
            let config = load_config(cli)?;
            let report = run_experiment(config, Some(&cli.out_dir))?;
            print!("{}", report.to_text());
        }
        Command::Pretrain => {
            let config = load_config(cli)?;
            let exp = Experiment::prepare(config)?;
            let out = exp.pretrain()?;
            let a = artifacts(cli)?;
            a.save_outcome("pretrain", &out)?;
            let last = out.log.rows.last().map_or(f64::NAN, |r| r.loss);
            println!("pretrained for {} steps, final loss {last:.4}", out.steps);
            println!("wrote {}", a.path("pretrain.ckpt").display());
        }
        Command::Refine { init } => {
            let mut config = load_config(cli)?;
            if init.is_some() {
                config.global.init_checkpoint = init.clone();
            }
            let exp = Experiment::prepare(config)?;
            let start = exp.initial_encoder()?;
            let all: Vec<usize> = (0..exp.tasks.len()).collect();
            let out = exp.refine(&all, start.as_ref())?;
            let a = artifacts(cli)?;
            a.save_outcome("refine", &out)?;
            let values = (0..exp.tasks.len())
                .map(|t| exp.test_score(&out.model, t))
                .collect::<Result<Vec<_>, _>>()?;
            let report = task_report(&exp, &all, REFINE, values);
            emit(&a, "refine-report", report.to_text(), report.to_tsv())?;
        }
        Command::Finetune { checkpoint, tasks } => {
            let config = load_config(cli)?;
            let exp = Experiment::prepare(config)?;
            let model = read_checkpoint(checkpoint)?;
            let indices: Vec<usize> = if tasks.is_empty() {
                (0..exp.tasks.len()).collect()
            } else {
                tasks.iter().map(|t| exp.task_index(t)).collect::<Result<_, _>>()?
            };
            let a = artifacts(cli)?;
            let mut values = Vec::new();
            for &t in &indices {
                let name = &exp.tasks[t].spec().name;
                info!("fine-tuning {name}");
                let out = exp.finetune(&model, t)?;
                a.save_outcome(&format!("finetune-{name}"), &out)?;
                values.push(exp.test_score(&out.model, t)?);
            }
            let report = task_report(&exp, &indices, FINETUNE, values);
            emit(&a, "finetune-report", report.to_text(), report.to_tsv())?;
        }
        Command::Eval { checkpoint, split } => {
            let config = load_config(cli)?;
            let exp = Experiment::prepare(config)?;
            let model = read_checkpoint(checkpoint)?;
            println!("task\tmetric\tvalue\tsupport");
            for (task, r) in exp.evaluate(&model, split)? {
                println!("{task}\t{}\t{:.6}\t{}", r.metric, r.value, r.support);
            }
        }
        Command::Pairwise => {
            let config = load_config(cli)?;
            let matrix = pairwise_mtl(&config, Some(&cli.out_dir))?;
            print!("{}", matrix.to_text());
        }
        Command::GenSynthetic {
            train,
            dev,
            test,
            difficulty,
        } => gen_synthetic(cli, *train, *dev, *test, *difficulty)?,
    }
    Ok(())
}

fn read_checkpoint(path: &Path) -> Result<mtl_core::model::Model, Failure> {
    load_checkpoint(path)
        .with_context(|| format!("loading {}", path.display()))
        .map_err(config_error)
}

fn task_report(exp: &Experiment, indices: &[usize], strategy: &str, values: Vec<f64>) -> RunReport {
    RunReport {
        tasks: indices.iter().map(|&t| exp.tasks[t].spec().name.clone()).collect(),
        metrics: indices.iter().map(|&t| exp.tasks[t].spec().metric).collect(),
        rows: vec![ReportRow {
            strategy: strategy.into(),
            values,
        }],
    }
}

fn gen_synthetic(cli: &Cli, train: usize, dev: usize, test: usize, difficulty: f64) -> Result<(), Failure> {
    if !(0.0..=1.0).contains(&difficulty) {
        return Err(config_error(anyhow!("difficulty must lie in [0, 1]")));
    }
    let seed = cli.seed.unwrap_or(0);
    let suite = gen_synthetic_suite(&SyntheticConfig {
        seed,
        train,
        dev,
        test,
        difficulty,
        ..SyntheticConfig::default()
    });
    let dir = &cli.out_dir;
    let mut tasks = suite
        .write(dir)
        .context("writing the synthetic suite")
        .map_err(runtime_error)?;
    // The config sits next to the data, so paths are kept relative.
    let relative = |p: &mut Option<PathBuf>| {
        if let Some(path) = p {
            *path = PathBuf::from(path.file_name().expect("file path"));
        }
    };
    for t in &mut tasks {
        relative(&mut t.paths.train);
        relative(&mut t.paths.dev);
        relative(&mut t.paths.test);
    }
    let global = GlobalConfig {
        seed,
        vocab: Some("vocab.txt".into()),
        corpus: Some("corpus.txt".into()),
        ..GlobalConfig::default()
    };
    let config = ExperimentConfig::with_tasks(global, tasks).map_err(|e| config_error(e.into()))?;
    let path = dir.join("config.toml");
    std::fs::write(&path, config.to_toml())
        .with_context(|| format!("writing {}", path.display()))
        .map_err(runtime_error)?;
    println!("wrote {} tasks and {}", config.tasks.len(), path.display());
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let level = if cli.verbose { "info" } else { "warn" };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match execute(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {:#}", f.error);
            ExitCode::from(f.code)
        }
    }
}
