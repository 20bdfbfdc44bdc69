use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use otr_cli::{parse_config, parse_values, run, sweep, CliError, PRESETS};

#[derive(Parser)]
#[command(name = "otr-sim", version, about = "Optimistic TEE-rollup protocol simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one scenario. CONFIG is a TOML file or `preset:NAME`.
    Run {
        config: String,
        #[arg(long, default_value = "out")]
        out: PathBuf,
        /// Override the config seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Run one scenario per value of a parameter.
    Sweep {
        config: String,
        /// One of rho, p_fish, l_slash, batch_size, query_value.
        #[arg(long)]
        param: String,
        /// Comma-separated values.
        #[arg(long, allow_hyphen_values = true)]
        values: String,
        #[arg(long, default_value = "out")]
        out: PathBuf,
    },
    /// Shipped scenario presets.
    Presets {
        #[command(subcommand)]
        action: PresetAction,
    },
    /// Parse and validate a config, then print it with defaults filled in.
    Validate { config: String },
}

#[derive(Subcommand)]
enum PresetAction {
    /// List preset names.
    List,
    /// Print a preset's TOML.
    Show { name: String },
}

fn main() -> ExitCode {
    match dispatch(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

fn dispatch(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Run { config, out, seed } => {
            let mut cfg = parse_config(&config)?;
            if let Some(s) = seed {
                cfg.seed = s;
                cfg.validate()?;
            }
            let bundle = run(&cfg, &out)?;
            print!("{}", bundle.summary);
            println!("\nwrote {}", out.display());
        }
        Command::Sweep { config, param, values, out } => {
            let cfg = parse_config(&config)?;
            let values = parse_values(&param, &values)?;
            let bundles = sweep(&cfg, &param, &values, Some(&out))?;
            for (v, b) in &bundles {
                for r in &b.runs {
                    println!(
                        "{param}={v:<10} {:<5} L_avg={:.4}s cost={:.4} slashed={}",
                        r.protocol.as_str(),
                        r.l_avg,
                        r.mean_cost,
                        r.slash_count
                    );
                }
            }
            println!("wrote {}", out.join("sweep.csv").display());
        }
        Command::Presets { action: PresetAction::List } => {
            for p in PRESETS {
                println!("{:<18} {}", p.name, p.description);
            }
        }
        Command::Presets { action: PresetAction::Show { name } } => {
            let p = otr_cli::preset(&name).ok_or(CliError::UnknownPreset(name))?;
            print!("{}", p.toml);
        }
        Command::Validate { config } => {
            let cfg = parse_config(&config)?;
            print!("{}", toml::to_string(&cfg)?);
        }
    }
    Ok(())
}
