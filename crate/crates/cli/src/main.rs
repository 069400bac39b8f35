//! `mmdc`: runs the compression pipeline stage by stage or end to end.
//!
//! Exit codes: 0 success, 2 configuration error, 3 missing upstream artifact,
//! 4 numeric failure, 1 anything else.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use mmdc_core::bench::{bench_block, records_csv, stage_timings};
use mmdc_core::importance::OmegaKind;
use mmdc_core::pipeline::{load_config, plan_only, write_report, Pipeline, PipelineConfig, RunLock, Stage};
use mmdc_core::{BlockKind, Error};

#[derive(Parser)]
#[command(
    name = "mmdc",
    version,
    about = "Depth pruning and hybrid-stream conversion for a toy dual-stream diffusion transformer"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Pipeline config (JSON). Defaults apply to anything it leaves out.
    #[arg(long, short)]
    config: Option<PathBuf>,
    /// Override one config value, e.g. `--set prune.target_keep=6`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Omega {
    Uniform,
    Linear,
    Quadratic,
}

impl From<Omega> for OmegaKind {
    fn from(o: Omega) -> Self {
        match o {
            Omega::Uniform => OmegaKind::Uniform,
            Omega::Linear => OmegaKind::Linear,
            Omega::Quadratic => OmegaKind::Quadratic,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Render the train and validation splits to `<out>/data`.
    GenData(Common),
    /// Train the all-dual teacher.
    TrainTeacher(Common),
    /// Score layers by ablation; repeat `--omega` for one report per weighting.
    EstimateImportance {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum)]
        omega: Vec<Omega>,
    },
    /// Remove the least important layers and average each cluster into its kept layer.
    Prune {
        #[command(flatten)]
        common: Common,
        /// Print a plan for `--depth` layers without reading any weights.
        #[arg(long)]
        plan_only: bool,
        #[arg(long, requires = "plan_only")]
        depth: Option<usize>,
        #[arg(long, requires = "plan_only")]
        keep: Option<usize>,
    },
    /// Distill the layers standing in for pruned clusters.
    Distill(Common),
    /// Full-parameter fine-tune of the pruned student.
    Finetune(Common),
    /// Convert deep layers of the student to single-stream blocks.
    Hybridize(Common),
    /// Align single-stream layers to the student's concatenated streams.
    Align(Common),
    /// Short full-parameter fine-tune of the aligned hybrid.
    FinetuneLite(Common),
    /// Evaluate every stage checkpoint.
    Eval(Common),
    /// Write `report.md` and `report.json` for the output directory.
    Report(Common),
    /// Every stage in order, then the report.
    RunAll(Common),
    /// Print the fully resolved config as JSON.
    ShowConfig(Common),
    /// Time dual and single blocks at three widths; with `--pipeline`, also
    /// tabulate per-stage wall-clock of the run in the output directory.
    Bench {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 20)]
        iters: usize,
        #[arg(long, default_value_t = 8)]
        batch: usize,
        #[arg(long)]
        pipeline: bool,
    },
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config { .. } => 2,
        Error::MissingArtifact { .. } => 3,
        e if e.is_numeric() => 4,
        _ => 1,
    }
}

fn config(c: &Common) -> Result<PipelineConfig, Error> {
    load_config(c.config.as_deref(), &c.overrides)
}

fn stage(c: &Common, stage: Stage) -> Result<(), Error> {
    let mut p = Pipeline::new(config(c)?)?;
    let _lock = RunLock::acquire(p.root())?;
    println!("{}", p.run(stage)?.line());
    Ok(())
}

fn write(path: &Path, text: &str) -> Result<(), Error> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::Io {
            path: dir.into(),
            source: e,
        })?;
    }
    fs::write(path, text).map_err(|e| Error::Io {
        path: path.into(),
        source: e,
    })
}

fn execute(cmd: Command) -> Result<(), Error> {
    match cmd {
        Command::GenData(c) => {
            let mut p = Pipeline::new(config(&c)?)?;
            let _lock = RunLock::acquire(p.root())?;
            let hashes = p.gen_data()?;
            println!(
                "{}",
                serde_json::json!({"stage": "gen-data", "status": "ok", "outputs": hashes})
            );
        }
        Command::TrainTeacher(c) => stage(&c, Stage::Teacher)?,
        Command::EstimateImportance { common, omega } => {
            let cfg = config(&common)?;
            let kinds: Vec<OmegaKind> = if omega.is_empty() {
                vec![cfg.importance.omega]
            } else {
                omega.into_iter().map(Into::into).collect()
            };
            let mut p = Pipeline::new(cfg)?;
            let _lock = RunLock::acquire(p.root())?;
            println!("{}", p.run_importance(&kinds)?.line());
        }
        Command::Prune {
            common,
            plan_only: true,
            depth,
            keep,
        } => {
            let cfg = config(&common)?;
            let depth = depth.unwrap_or(cfg.model.depth);
            let keep = keep.unwrap_or(depth / 2);
            let plan = plan_only(depth, keep)?;
            println!(
                "{}",
                serde_json::json!({
                    "depth": depth,
                    "protected": [0, depth - 1],
                    "keep": plan.keep,
                    "remove": plan.remove,
                    "clusters": plan.clusters,
                })
            );
        }
        Command::Prune { common, .. } => stage(&common, Stage::Prune)?,
        Command::Distill(c) => stage(&c, Stage::Distill)?,
        Command::Finetune(c) => stage(&c, Stage::Finetune)?,
        Command::Hybridize(c) => stage(&c, Stage::Hybridize)?,
        Command::Align(c) => stage(&c, Stage::Align)?,
        Command::FinetuneLite(c) => stage(&c, Stage::FinetuneLite)?,
        Command::Eval(c) => stage(&c, Stage::Eval)?,
        Command::Report(c) => {
            let cfg = config(&c)?;
            let (md, js) = write_report(&cfg.output_dir)?;
            println!(
                "{}",
                serde_json::json!({"stage": "report", "status": "ok", "markdown": md, "json": js})
            );
        }
        Command::RunAll(c) => {
            let mut p = Pipeline::new(config(&c)?)?;
            p.run_all(|s| println!("{}", s.line()))?;
            let (md, _) = write_report(p.root())?;
            println!(
                "{}",
                serde_json::json!({"stage": "report", "status": "ok", "markdown": md})
            );
        }
        Command::ShowConfig(c) => println!("{}", serde_json::to_string_pretty(&config(&c)?)?),
        Command::Bench {
            common,
            iters,
            batch,
            pipeline,
        } => {
            let cfg = config(&common)?;
            let mut records = Vec::new();
            for scale in [1, 2, 4] {
                let width = cfg.model.d_model * scale / 2;
                let m = mmdc_core::ModelConfig {
                    d_model: width,
                    mlp_hidden: cfg.model.mlp_hidden * scale / 2,
                    ..cfg.model.clone()
                };
                for kind in [BlockKind::Dual, BlockKind::Single] {
                    records.push(bench_block(kind, &m, batch, iters)?);
                }
            }
            let csv = records_csv(&records);
            write(&cfg.output_dir.join("bench.csv"), &csv)?;
            print!("{csv}");
            if pipeline {
                let t = stage_timings(&cfg.output_dir)?;
                write(&cfg.output_dir.join("bench_stages.csv"), &t.to_csv())?;
                print!("{}", t.to_csv());
                if let Some(s) = t.dominant() {
                    println!("largest stage: {}", s.name());
                }
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match execute(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
