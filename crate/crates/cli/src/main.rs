//! `tokencodec`: fit codebooks, train token models, encode, decode and report.

mod commands;
mod errors;
mod settings;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use tokencodec::Role;

use crate::commands::{DecodeArgs, EncodeArgs, ReportArgs, TrainArgs, VadReportArgs};
use crate::errors::{exit_code, EXIT_INTERNAL};
use crate::settings::{resolve, SettingFlags};

#[derive(Parser)]
#[command(name = "tokencodec", version, about = "Token-based speech codec")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    #[command(flatten)]
    flags: SettingFlags,
}

#[derive(Clone, Copy, ValueEnum)]
enum RoleArg {
    Coarse,
    Fine,
}

#[derive(Subcommand)]
enum Command {
    /// Fit residual codebooks on a directory of WAV files.
    FitCodebooks {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
    },
    /// Train a coarse or fine token model with frozen codebooks.
    Train {
        #[arg(long, value_enum)]
        role: RoleArg,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        codebooks: PathBuf,
        #[arg(long)]
        output: PathBuf,
        /// Loss curve CSV for transformer training. Defaults next to the model.
        #[arg(long)]
        loss_log: Option<PathBuf>,
    },
    /// Encode a WAV file to a bitstream.
    Encode {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        codebooks: PathBuf,
        #[arg(long)]
        coarse_model: PathBuf,
        /// Fine model to name in the header.
        #[arg(long)]
        fine_model: Option<PathBuf>,
        #[arg(long)]
        output: PathBuf,
    },
    /// Decode a bitstream to a WAV file.
    Decode {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        codebooks: PathBuf,
        #[arg(long)]
        coarse_model: PathBuf,
        /// Without it, fine layers stay zero.
        #[arg(long)]
        fine_model: Option<PathBuf>,
        #[arg(long)]
        output: PathBuf,
        /// Dump the decoded token grid as CSV.
        #[arg(long)]
        grid_csv: Option<PathBuf>,
    },
    /// Rate and accuracy report over a corpus.
    Report {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        codebooks: PathBuf,
        #[arg(long)]
        coarse_model: PathBuf,
        #[arg(long)]
        fine_model: Option<PathBuf>,
        /// CSV report.
        #[arg(long)]
        output: PathBuf,
        #[arg(long)]
        json: Option<PathBuf>,
        /// Per-file confidence profiles are written here.
        #[arg(long)]
        profile_dir: Option<PathBuf>,
    },
    /// Voice-gated rate report, one row per file.
    VadReport {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        codebooks: PathBuf,
        #[arg(long)]
        coarse_model: PathBuf,
        #[arg(long)]
        output: PathBuf,
        #[arg(long)]
        json: Option<PathBuf>,
    },
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let s = resolve(&cli.flags)?;
    eprintln!("effective config: {}", serde_json::to_string(&s)?);
    let explicit_size = cli.flags.codebook_size.is_some();
    match &cli.command {
        Command::FitCodebooks { input, output } => commands::fit_codebooks(&s, input, output),
        Command::Train {
            role,
            input,
            codebooks,
            output,
            loss_log,
        } => commands::train(
            &s,
            explicit_size,
            TrainArgs {
                role: match role {
                    RoleArg::Coarse => Role::Coarse,
                    RoleArg::Fine => Role::Fine,
                },
                input,
                codebooks,
                output,
                loss_log: loss_log.as_deref(),
            },
        ),
        Command::Encode {
            input,
            codebooks,
            coarse_model,
            fine_model,
            output,
        } => commands::encode(
            &s,
            explicit_size,
            EncodeArgs {
                input,
                codebooks,
                coarse_model,
                fine_model: fine_model.as_deref(),
                output,
            },
        ),
        Command::Decode {
            input,
            codebooks,
            coarse_model,
            fine_model,
            output,
            grid_csv,
        } => commands::decode_cmd(
            &s,
            DecodeArgs {
                input,
                codebooks,
                coarse_model,
                fine_model: fine_model.as_deref(),
                output,
                grid_csv: grid_csv.as_deref(),
            },
        ),
        Command::Report {
            input,
            codebooks,
            coarse_model,
            fine_model,
            output,
            json,
            profile_dir,
        } => commands::report(ReportArgs {
            input,
            codebooks,
            coarse_model,
            fine_model: fine_model.as_deref(),
            output,
            json: json.as_deref(),
            profile_dir: profile_dir.as_deref(),
        }),
        Command::VadReport {
            input,
            codebooks,
            coarse_model,
            output,
            json,
        } => commands::vad_report(
            &s,
            VadReportArgs {
                input,
                codebooks,
                coarse_model,
                output,
                json: json.as_deref(),
            },
        ),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("TOKENCODEC_LOG", "warn"))
        .init();
    let cli = Cli::parse();
    match std::panic::catch_unwind(|| run(cli)) {
        Ok(Ok(())) => ExitCode::SUCCESS,
        Ok(Err(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
        Err(_) => ExitCode::from(EXIT_INTERNAL),
    }
}
