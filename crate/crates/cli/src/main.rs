//! `secat`: runs the self-context adaptation pipeline stage by stage inside
//! a workspace directory.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use secat_core::eval::{k_sweep_plot_data, render_table};
use secat_core::pipeline::{paths, stages, AblationKind, PipelineConfig};
use secat_core::workspace::Workspace;
use secat_core::{Error, Executor, Result};

/// Environment variable capping the worker count.
const THREADS_ENV: &str = "SECAT_THREADS";

#[derive(Debug, Parser)]
#[command(name = "secat", version, about = "Self-context adaptation on synthetic embeddings")]
struct Cli {
    /// Pipeline configuration (JSON). Defaults to the workspace copy, then the desk preset.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Experiment directory holding artifacts and the manifest.
    #[arg(long, global = true, default_value = "secat-workspace")]
    workspace: PathBuf,
    /// Overrides the run seed; stage seeds are derived from it.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate the synthetic embedding dataset.
    GenData,
    /// Cluster the adaptation rows and build difficulty pools.
    Cluster,
    /// Pretrain the captioner on the adaptation classes.
    Pretrain,
    /// Name the clusters with the configured vocabulary.
    AssignNames,
    /// Run self-context adaptation.
    Adapt,
    /// Evaluate adapted and pretrained-only models on held-out classes.
    Eval,
    /// Re-run adaptation and evaluation across one factor.
    Ablate {
        /// difficulty, vocabulary, matching, task_mode, model_size, template or k_sweep.
        #[arg(long)]
        kind: AblationKind,
    },
    /// Print recorded reports as a ways-by-shots table.
    Report {
        /// Print "K accuracy" pairs of the K sweep instead of the table.
        #[arg(long)]
        plot_data: bool,
    },
}

impl Command {
    fn name(&self) -> String {
        match self {
            Command::GenData => "gen-data".into(),
            Command::Cluster => "cluster".into(),
            Command::Pretrain => "pretrain".into(),
            Command::AssignNames => "assign-names".into(),
            Command::Adapt => "adapt".into(),
            Command::Eval => "eval".into(),
            Command::Ablate { kind } => format!("ablate --kind {}", kind.name()),
            Command::Report { .. } => "report".into(),
        }
    }
}

fn executor() -> Result<Executor> {
    let threads = match std::env::var(THREADS_ENV) {
        Ok(v) => Some(
            v.parse::<usize>()
                .ok()
                .filter(|&n| n > 0)
                .ok_or_else(|| Error::Config(format!("{THREADS_ENV} must be a positive integer, got {v:?}")))?,
        ),
        Err(_) => None,
    };
    #[cfg(feature = "parallel")]
    {
        if let Some(n) = threads {
            if n == 1 {
                return Ok(Executor::Sequential);
            }
            rayon::ThreadPoolBuilder::new()
                .num_threads(n)
                .build_global()
                .map_err(|e| Error::Config(e.to_string()))?;
        }
        Ok(Executor::Rayon)
    }
    #[cfg(not(feature = "parallel"))]
    {
        let _ = threads;
        Ok(Executor::Sequential)
    }
}

fn resolve_config(ws: &Workspace, file: Option<&Path>, seed: Option<u64>) -> Result<PipelineConfig> {
    let cfg = match file {
        Some(path) => {
            let text = std::fs::read_to_string(path).map_err(|e| match e.kind() {
                std::io::ErrorKind::NotFound => Error::Missing {
                    what: "config",
                    path: path.to_path_buf(),
                },
                _ => Error::Io(e),
            })?;
            PipelineConfig::from_json(&text)?
        }
        None if ws.contains(paths::CONFIG) => stages::load_config(ws)?,
        None => PipelineConfig::desk(0),
    };
    let cfg = match seed {
        Some(s) => cfg.with_seed(s),
        None => cfg,
    };
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: Cli) -> Result<()> {
    let exec = executor()?;
    let mut ws = Workspace::open(&cli.workspace)?;
    let cfg = resolve_config(&ws, cli.config.as_deref(), cli.seed)?;
    if !matches!(cli.command, Command::Report { .. }) {
        stages::save_config(&mut ws, &cfg)?;
    }
    match &cli.command {
        Command::GenData => stages::gen_data(&mut ws, &cfg)?,
        Command::Cluster => stages::cluster(&mut ws, &cfg, exec)?,
        Command::Pretrain => stages::pretrain(&mut ws, &cfg, exec)?,
        Command::AssignNames => stages::assign_names(&mut ws, &cfg)?,
        Command::Adapt => stages::adapt(&mut ws, &cfg, exec)?,
        Command::Eval => print!("{}", render_table(&stages::eval(&mut ws, &cfg, exec)?)),
        Command::Ablate { kind } => print!("{}", render_table(&stages::ablate(&mut ws, &cfg, *kind, exec)?)),
        Command::Report { plot_data } => {
            let reports = stages::collect_reports(&ws)?;
            if *plot_data {
                for (k, acc) in k_sweep_plot_data(&reports) {
                    println!("{k} {acc:.4}");
                }
            } else {
                print!("{}", render_table(&reports));
            }
        }
    }
    ws.record_command(&cli.command.name())?;
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
