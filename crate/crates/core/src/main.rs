use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use iivcl::cli::{self, EvalContext};
use iivcl::train::{run_pretraining, Config};
use iivcl::Result;

#[derive(Parser)]
#[command(name = "iivcl", version, about = "Inter/intra video contrastive pretraining and evaluation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Self-supervised pretraining.
    Pretrain {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Dump frozen backbone features of the train and test splits.
    Extract(EvalArgs),
    /// Linear probe on frozen features.
    Probe(EvalArgs),
    /// Test-to-train retrieval recall at k.
    Retrieve(EvalArgs),
    /// Linear probe on class-stratified training subsets.
    Fewshot(EvalArgs),
    /// Same-class fraction of nearest neighbors in the NN-head space.
    Nnquality(EvalArgs),
    /// Probability that a queue holds a sample of a given class.
    Cooccur {
        #[command(flatten)]
        common: EvalArgs,
        #[arg(long)]
        classes: Option<u64>,
        #[arg(long)]
        queue: Option<u64>,
    },
    /// JSON summary and curve CSVs from the metrics log and eval outputs.
    Report {
        #[command(flatten)]
        common: EvalArgs,
        /// Training metrics log; defaults to `<inputs>/metrics.csv`.
        #[arg(long)]
        metrics: Option<PathBuf>,
        /// Directory holding eval outputs; defaults to `--out`.
        #[arg(long)]
        inputs: Option<PathBuf>,
    },
}

fn eval_ctx(a: &EvalArgs) -> Result<EvalContext> {
    EvalContext::open(&a.config, a.checkpoint.as_deref(), &a.out)
}

fn print_json<S: serde::Serialize>(s: &S) {
    print!("{}", iivcl::eval::to_json(s));
}

fn run(cmd: Command) -> Result<()> {
    match cmd {
        Command::Pretrain { config, out, resume } => {
            let config = Config::load(&config)?;
            let summary = run_pretraining::<f32>(&config, &out, resume.as_deref())?;
            if let Some(last) = summary.metrics.last() {
                println!(
                    "finished {} steps, last loss {:.4}, checkpoint {}",
                    last.step + 1,
                    last.loss_total,
                    summary.final_checkpoint.display()
                );
            }
        }
        Command::Extract(a) => cli::extract(&eval_ctx(&a)?)?,
        Command::Probe(a) => print_json(&cli::probe(&eval_ctx(&a)?)?),
        Command::Retrieve(a) => print_json(&cli::retrieve(&eval_ctx(&a)?)?),
        Command::Fewshot(a) => print_json(&cli::fewshot(&eval_ctx(&a)?)?),
        Command::Nnquality(a) => print_json(&cli::nnquality(&eval_ctx(&a)?)?),
        Command::Cooccur { common, classes, queue } => {
            let config = Config::load(&common.config)?;
            print_json(&cli::cooccur(&config, classes, queue, &common.out)?);
        }
        Command::Report { common, metrics, inputs } => {
            let config = Config::load(&common.config)?;
            let inputs = inputs.unwrap_or_else(|| common.out.clone());
            cli::report(Some(&config), metrics.as_deref(), &inputs, &common.out)?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
