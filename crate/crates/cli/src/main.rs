//! `sgalign`: generate a corpus, train the text model, align image-side
//! features, caption and evaluate.

mod commands;
mod config;

use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use sgalign_core::Error;

use commands::{CaptionArgs, Run, Table};

#[derive(Parser)]
#[command(name = "sgalign", version, about = "Unpaired captioning through scene-graph alignment")]
struct Cli {
    /// Directory holding run directories.
    #[arg(long, env = "SGALIGN_RUN_ROOT", default_value = "runs", global = true)]
    root: PathBuf,
    /// Run name; artifacts go to <root>/<run>.
    #[arg(long, default_value = "default", global = true)]
    run: String,
    /// Configuration file. Defaults to the run's snapshot, then built-in defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic corpus into the run's data directory.
    GenData,
    /// Train the encoder and decoder on sentences alone.
    TrainText,
    /// Learn the image-to-sentence feature mapping with the text model frozen.
    Align {
        #[arg(long)]
        text: Option<PathBuf>,
    },
    /// Caption every graph in an interchange-format file, one line per graph.
    Caption {
        graphs: PathBuf,
        #[arg(long)]
        text: Option<PathBuf>,
        #[arg(long, conflicts_with = "no_align")]
        align: Option<PathBuf>,
        /// Decode image-side features without mapping them.
        #[arg(long)]
        no_align: bool,
        #[arg(long)]
        beam: Option<usize>,
        #[arg(long, short)]
        out: Option<PathBuf>,
    },
    /// Score captions against references, one sentence per line in each file.
    Evaluate {
        hyps: PathBuf,
        refs: PathBuf,
    },
    /// Print an ablation grid.
    Ablate {
        #[arg(long, value_enum)]
        table: Table,
        #[arg(long)]
        text: Option<PathBuf>,
    },
}

/// Exit status for each error class.
fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) => 3,
        Error::Io { .. } => 4,
        Error::Checkpoint(_) => 5,
        Error::CheckpointMismatch { .. } => 6,
        Error::Parse { .. }
        | Error::MalformedGraph(_)
        | Error::EmptyGraph
        | Error::UnknownSymbol { .. }
        | Error::NoObjects
        | Error::Inexpressible(_)
        | Error::EmptyInput(_)
        | Error::Dimension(_) => 7,
        Error::TokenOutOfRange { .. } | Error::NonFinite(_) | Error::Untrained => 1,
    }
}

fn run(cli: Cli) -> Result<String, Error> {
    if let Command::Evaluate { hyps, refs } = &cli.command {
        return commands::evaluate(hyps, refs);
    }
    let run = Run::open(cli.root.join(&cli.run), cli.config.as_deref())?;
    match &cli.command {
        Command::GenData => commands::gen_data(&run),
        Command::TrainText => commands::train_text_cmd(&run),
        Command::Align { text } => commands::align(&run, text.as_deref()),
        Command::Caption {
            graphs,
            text,
            align,
            no_align,
            beam,
            out,
        } => {
            let captions = commands::caption(
                &run,
                &CaptionArgs {
                    graphs,
                    text: text.as_deref(),
                    align: align.as_deref(),
                    no_align: *no_align,
                    beam: *beam,
                },
            )?;
            match out {
                Some(path) => {
                    std::fs::write(path, &captions).map_err(|e| Error::Io {
                        path: path.clone(),
                        source: e,
                    })?;
                    Ok(String::new())
                }
                None => Ok(captions),
            }
        }
        Command::Ablate { table, text } => commands::ablate(&run, *table, text.as_deref()),
        Command::Evaluate { .. } => unreachable!(),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(out) => {
            let _ = std::io::stdout().write_all(out.as_bytes());
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
