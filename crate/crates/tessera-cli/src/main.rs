//! `tessera` — one binary over the whole pipeline: synthesize a tile corpus,
//! run the self-distillation trainer against it, pull frozen embeddings,
//! probe them, model distributed step times, and summarize a run directory.
//!
//! Every subcommand resolves its settings as config file < flags, writes the
//! resolved config into the output directory, and only then does any work.
//! Exit codes: 0 success, 2 usage or configuration problems, 3 numerical
//! failures (overflow storms, singular solves).

mod cmd_corpus;
mod cmd_embed;
mod cmd_probe;
mod cmd_report;
mod cmd_simulate;
mod cmd_train;
mod config;

use clap::Parser;
use tessera_core::Error;

#[derive(Parser)]
#[command(name = "tessera", version, about = "Desk-scale pathology SSL workbench")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Subcommand)]
enum Command {
    /// Synthesize a labelled slide corpus and tile manifest.
    MakeCorpus(cmd_corpus::MakeCorpusArgs),
    /// Train the student/teacher towers against a corpus manifest.
    Train(cmd_train::TrainArgs),
    /// Extract frozen tile embeddings from a checkpoint into CSV.
    Embed(cmd_embed::EmbedArgs),
    /// Linear-probe embeddings against the slide classes.
    Probe(cmd_probe::ProbeArgs),
    /// Model DDP/FSDP step times and emit scaling curves.
    Simulate(cmd_simulate::SimulateArgs),
    /// Summarize the metrics and tables in a run directory.
    Report(cmd_report::ReportArgs),
}

fn main() {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::MakeCorpus(a) => cmd_corpus::run(a),
        Command::Train(a) => cmd_train::run(a),
        Command::Embed(a) => cmd_embed::run(a),
        Command::Probe(a) => cmd_probe::run(a),
        Command::Simulate(a) => cmd_simulate::run(a),
        Command::Report(a) => cmd_report::run(a),
    };
    if let Err(e) = result {
        eprintln!("error: {e}");
        let code = match e {
            Error::Overflow { .. } | Error::Numerical { .. } => 3,
            _ => 2,
        };
        std::process::exit(code);
    }
}
