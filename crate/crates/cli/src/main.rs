use std::process::ExitCode;

use clap::{Parser, Subcommand};

use epan_cli::commands::dataset::MakeDataset;
use epan_cli::commands::edges::DetectEdges;
use epan_cli::commands::eval::Eval;
use epan_cli::commands::infer::Infer;
use epan_cli::commands::train::Train;
use epan_cli::error::CliResult;

#[derive(Parser, Debug)]
#[command(name = "epan", version, about = "Edge-prior motion deblurring")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    DetectEdges(DetectEdges),
    MakeDataset(MakeDataset),
    Train(Train),
    Infer(Infer),
    Eval(Eval),
}

fn run(cli: Cli) -> CliResult<()> {
    match cli.command {
        Command::DetectEdges(c) => c.run(),
        Command::MakeDataset(c) => c.run(),
        Command::Train(c) => c.run(),
        Command::Infer(c) => c.run(),
        Command::Eval(c) => c.run(),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
