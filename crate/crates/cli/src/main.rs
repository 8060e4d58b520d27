use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use digzsl::{exit_code, Overrides, Runner, StageName, StagePlan};
use digzsl_core::config::{Backend, RunConfig};
use digzsl_core::Result;

#[derive(Parser)]
#[command(name = "digzsl", version, about = "Discriminative image generation for zero-shot learning")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run several stages in pipeline order.
    Run {
        /// Run every stage.
        #[arg(long, conflicts_with = "stage")]
        all: bool,
        /// Stages to run (repeatable).
        #[arg(long, value_enum)]
        stage: Vec<StageName>,
        /// Skip plan entries before this stage.
        #[arg(long, value_enum)]
        resume_from: Option<StageName>,
        #[command(flatten)]
        common: Common,
    },
    /// Encode class prototypes.
    Prototypes(Common),
    /// Train the category discrimination model on seen classes.
    TrainCdm(Common),
    /// Learn one class token per unseen class.
    LearnDct(Common),
    /// Synthesize unseen-class images from the learned tokens.
    Generate(Common),
    /// Train the zero-shot classifier.
    TrainClassifier(Common),
    /// Evaluate and write the metrics report.
    Evaluate(Common),
    /// Export the learned token embeddings as a table.
    Export(Common),
}

#[derive(Clone, Copy, ValueEnum)]
enum BackendArg {
    Toy,
    External,
}

#[derive(Args, Clone)]
struct Common {
    /// TOML configuration file; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Calibration coefficient override.
    #[arg(long)]
    lambda: Option<f64>,
    /// Token-learning accuracy threshold override.
    #[arg(long)]
    gamma: Option<f64>,
    #[arg(long, value_enum)]
    backend: Option<BackendArg>,
    /// Artifact root directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

impl Common {
    fn overrides(&self) -> Overrides {
        Overrides {
            seed: self.seed,
            lambda: self.lambda,
            gamma: self.gamma,
            backend: self.backend.map(|b| match b {
                BackendArg::Toy => Backend::Toy,
                BackendArg::External => Backend::External,
            }),
            out: self.out.clone(),
        }
    }
}

fn execute(common: &Common, plan: StagePlan) -> Result<()> {
    let cfg = match &common.config {
        Some(p) => RunConfig::from_path(p)?,
        None => RunConfig::default(),
    };
    let mut runner = Runner::new(cfg, &common.overrides())?;
    for h in runner.run_plan(&plan)? {
        log::info!("wrote {}", h.path.display());
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let (common, plan) = match cli.command {
        Command::Run { all, stage, resume_from, common } => {
            let mut plan = if all || stage.is_empty() {
                StagePlan::all(common.config.clone())
            } else {
                let mut s = stage;
                s.sort();
                s.dedup();
                StagePlan { stages: s, resume_from: None, config_path: common.config.clone() }
            };
            plan.resume_from = resume_from;
            (common, plan)
        }
        Command::Prototypes(c) => single(c, StageName::Prototypes),
        Command::TrainCdm(c) => single(c, StageName::TrainCdm),
        Command::LearnDct(c) => single(c, StageName::LearnDct),
        Command::Generate(c) => single(c, StageName::Generate),
        Command::TrainClassifier(c) => single(c, StageName::TrainClassifier),
        Command::Evaluate(c) => single(c, StageName::Evaluate),
        Command::Export(c) => single(c, StageName::Export),
    };
    match execute(&common, plan) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e) as u8)
        }
    }
}

fn single(c: Common, stage: StageName) -> (Common, StagePlan) {
    let plan = StagePlan::single(stage, c.config.clone());
    (c, plan)
}
