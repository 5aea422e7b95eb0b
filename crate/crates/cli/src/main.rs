use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use dermarket_cli::commands::{
    cmd_certify, cmd_clear, cmd_generate, cmd_simulate, CommonArgs, SeriesFormat,
};
use dermarket_cli::CliError;

/// Market-based coordination of distributed energy resources.
#[derive(Parser)]
#[command(name = "dermarket", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Scenario config (JSON)
    #[arg(long)]
    config: PathBuf,
    /// Overrides `simulation.seed`
    #[arg(long)]
    seed: Option<u64>,
    /// Write the result here instead of stdout
    #[arg(long)]
    output: Option<PathBuf>,
    /// Machine-readable JSON output
    #[arg(long)]
    json: bool,
}

impl From<Common> for CommonArgs {
    fn from(c: Common) -> Self {
        CommonArgs {
            config: c.config,
            seed: c.seed,
            output: c.output,
            json: c.json,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Csv,
    Json,
}

#[derive(Subcommand)]
enum Command {
    /// Draw the configured population and initial state
    Generate {
        #[command(flatten)]
        common: Common,
        /// Emit a config with the population written out explicitly
        #[arg(long)]
        emit_config: bool,
    },
    /// Clear the market once at the configured state
    Clear {
        #[command(flatten)]
        common: Common,
    },
    /// Run the closed loop over the base-price schedule
    Simulate {
        #[command(flatten)]
        common: Common,
        /// Series format
        #[arg(long, value_enum, default_value = "csv")]
        format: Format,
    },
    /// Print the stability certificate
    Certify {
        #[command(flatten)]
        common: Common,
    },
}

fn run(cli: Cli) -> Result<(), CliError> {
    let stdout = std::io::stdout();
    let mut out = stdout.lock();
    match cli.command {
        Command::Generate {
            common,
            emit_config,
        } => cmd_generate(&common.into(), emit_config, &mut out),
        Command::Clear { common } => cmd_clear(&common.into(), &mut out).map(|_| ()),
        Command::Simulate { common, format } => {
            let args: CommonArgs = common.into();
            let format = match format {
                Format::Csv => SeriesFormat::Csv,
                Format::Json => SeriesFormat::Json,
            };
            // the series owns stdout when no output file is given
            if args.output.is_some() {
                cmd_simulate(&args, format, &mut std::io::sink(), &mut out).map(|_| ())
            } else {
                let mut err = std::io::stderr();
                cmd_simulate(&args, format, &mut out, &mut err).map(|_| ())
            }
        }
        Command::Certify { common } => cmd_certify(&common.into(), &mut out).map(|_| ()),
    }?;
    out.flush()?;
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("MARKET_LOG", "warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) | Err(CliError::BrokenPipe) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
