mod commands;
mod overrides;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use famos_core::config::KEYS;
use famos_core::Error;

/// Sets the default output directory; config files and flags override it.
pub const OUTPUT_ENV: &str = "FAMOS_OUTPUT_DIR";

#[derive(Parser, Debug)]
#[command(name = "famos", version, about = "Adversarial mosaic stylization with a tiled-template memory")]
struct Cli {
    /// TOML config file with dotted-key sections (unet, disc, loss, train, memory, paths, infer).
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Build the template memory from paths.style and export PNGs and a manifest.
    Templates {
        /// Directory for the templates [default: <paths.output>/templates].
        #[arg(long, value_name = "DIR")]
        out: Option<PathBuf>,
    },
    /// Train on paths.content and paths.style; writes metrics.csv, snapshots and checkpoint.famo into paths.output.
    Train {
        /// Continue from this checkpoint.
        #[arg(long, value_name = "CHECKPOINT")]
        resume: Option<PathBuf>,
    },
    /// Stylize a content image with a trained checkpoint.
    Infer {
        #[arg(long, value_name = "CHECKPOINT")]
        checkpoint: PathBuf,
        /// Content image [default: first of paths.content].
        #[arg(long, value_name = "IMAGE")]
        content: Option<PathBuf>,
        /// Chunk core size in pixels, a multiple of 2^depth; 0 runs the whole image at once (sets infer.chunk).
        #[arg(long, value_name = "PIXELS")]
        chunk: Option<usize>,
        /// Also write the memory image, parametric image, blend mask and mixture entropy.
        #[arg(long)]
        decompose: bool,
    },
    /// Time template mixing for N in {8, 16, 32, 64} against full spatial attention; prints CSV.
    Bench {
        /// Also write the CSV to this file.
        #[arg(long, value_name = "FILE")]
        out: Option<PathBuf>,
    },
    /// Print a checkpoint's entries with their shapes, and its stored config.
    Inspect {
        #[arg(value_name = "CHECKPOINT")]
        checkpoint: PathBuf,
    },
}

fn key_help() -> String {
    let width = KEYS.iter().map(|(k, _)| k.len()).max().unwrap_or(0);
    let mut s = String::from("Configuration overrides (--KEY VALUE or --KEY=VALUE, applied after --config):\n");
    for (key, doc) in KEYS {
        s.push_str(&format!("  --{key:<width$}  {doc}\n"));
    }
    s.push_str(&format!(
        "\nAliases: --steps = --train.steps, --seed = --train.seed\n\
         Environment: {OUTPUT_ENV} sets the default paths.output\n\
         Exit codes: 0 success, 2 configuration error, 3 divergence, 4 I/O error"
    ));
    s
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::Shape { .. } | Error::Invalid { .. } => 2,
        Error::Divergence(_) | Error::NonFinite(_) => 3,
        Error::Io { .. } | Error::Image { .. } | Error::Checkpoint(_) => 4,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let args: Vec<String> = std::env::args().collect();
    let (args, overrides) = match overrides::split(&args) {
        Ok(split) => split,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(2);
        }
    };
    let cli = match Cli::command_with_keys().try_get_matches_from(&args) {
        Ok(m) => match <Cli as clap::FromArgMatches>::from_arg_matches(&m) {
            Ok(cli) => cli,
            Err(e) => e.exit(),
        },
        Err(e) => e.exit(),
    };
    match commands::run(cli, &overrides) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

impl Cli {
    fn command_with_keys() -> clap::Command {
        <Cli as clap::CommandFactory>::command().after_help(key_help())
    }
}
