use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use nsmc::cli::{self, CliError, ProposalKind, RunConfig, OUT_DIR_ENV};

#[derive(Parser)]
#[command(name = "nsmc", version, about = "Learned proposals for importance sampling and SMC")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train proposal networks on synthetic samples from the model.
    Train(Common),
    /// Run inference on a data set.
    Infer(Common),
    /// Compare learned and prior proposals over particle counts and seeds.
    Benchmark(Common),
    /// Print the model, its inverse factorization and network shapes.
    Inspect(Common),
}

#[derive(Args)]
struct Common {
    /// regression, pump, fhmm or conjugate-toy.
    #[arg(long)]
    model: String,
    #[arg(long, default_value_t = 1000)]
    particles: usize,
    #[arg(long, default_value = "prior")]
    proposal: ProposalKind,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    artifact: Option<PathBuf>,
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long, env = OUT_DIR_ENV, default_value = ".")]
    out: PathBuf,
    /// Model, training or inference parameter as key=value. Repeatable.
    #[arg(long = "set", value_parser = cli::parse_set)]
    sets: Vec<(String, String)>,
}

impl Common {
    fn config(self) -> RunConfig {
        RunConfig {
            model: self.model,
            particles: self.particles,
            proposal: self.proposal,
            seed: self.seed,
            artifact: self.artifact,
            data: self.data,
            out: self.out,
            sets: self.sets,
        }
    }
}

fn run(cmd: Command) -> Result<(), CliError> {
    match cmd {
        Command::Train(c) => {
            let out = cli::cmd_train(&c.config())?;
            println!("artifact: {}", out.artifact.display());
            println!("trace: {}", out.trace.display());
        }
        Command::Infer(c) => {
            let out = cli::cmd_infer(&c.config())?;
            println!("log evidence: {}", out.log_evidence);
            println!("posterior: {}", out.posterior.display());
            println!("diagnostics: {}", out.diagnostics.display());
        }
        Command::Benchmark(c) => {
            let out = cli::cmd_benchmark(&c.config())?;
            println!("cells: {}", out.cells.display());
            println!("summary: {}", out.summary.display());
            if let Some(a) = out.ancestry {
                println!("ancestry: {}", a.display());
            }
        }
        Command::Inspect(c) => print!("{}", cli::cmd_inspect(&c.config())?),
    }
    Ok(())
}

fn main() -> ExitCode {
    let parsed = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(parsed.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
