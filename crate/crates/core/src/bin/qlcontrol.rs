use std::collections::BTreeMap;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use qlcontrol::config::parse_value;
use qlcontrol::experiment::{self, EXIT_CONFIG, EXIT_DIAGNOSTIC, EXIT_OK};
use qlcontrol::Error;

#[derive(Parser)]
#[command(name = "qlcontrol", version, about = "Exact control of quasilinear diffusion equations")]
struct Cli {
    /// Overrides the seed of the configuration.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory (overrides `output.dir`).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Worker threads for sweep points.
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the configured pipeline once.
    Run { config: PathBuf },
    /// Run every point of a parameter sweep.
    Sweep {
        config: PathBuf,
        /// Axis as `key=v1,v2,...`; repeatable. Defaults to the `[sweep]` section.
        #[arg(long = "set", value_name = "KEY=VALUES")]
        set: Vec<String>,
    },
    /// Run one named diagnostic on the configured setting.
    Check {
        /// One of: weights, psi, duality, carleman, observability, smoothing.
        name: String,
        config: PathBuf,
    },
    /// Convert a binary field file to CSV.
    Export {
        input: PathBuf,
        /// Destination CSV; defaults to the input path with a `.csv` extension.
        output: Option<PathBuf>,
    },
}

fn parse_axis(spec: &str) -> Result<(String, Vec<toml::Value>), Error> {
    let (key, values) = spec.split_once('=').ok_or_else(|| Error::ConfigInvalid {
        field: "set".into(),
        reason: format!("expected KEY=V1,V2,..., got `{spec}`"),
    })?;
    let values: Vec<toml::Value> = values.split(',').map(|v| parse_value(v.trim())).collect();
    Ok((key.trim().to_string(), values))
}

fn fail(e: &Error) -> i32 {
    eprintln!("error: {e}");
    experiment::exit_code(e)
}

fn execute(cli: Cli) -> i32 {
    let out = cli.out.as_deref();
    match cli.command {
        Command::Run { config } => {
            let (code, report) = experiment::run_path(&config, &[], cli.seed, out);
            if let Some(r) = report {
                println!(
                    "{}: {} (terminal error {}, checksum {})",
                    r.name,
                    r.status,
                    r.terminal_error.map_or("n/a".into(), |v| format!("{v:e}")),
                    r.checksum
                );
                if let Some(e) = &r.error {
                    eprintln!("error: {e}");
                }
                for v in &r.violations {
                    eprintln!("violation: {v}");
                }
            }
            code
        }
        Command::Sweep { config, set } => {
            let mut axes = BTreeMap::new();
            for s in &set {
                match parse_axis(s) {
                    Ok((k, v)) => {
                        axes.insert(k, v);
                    }
                    Err(e) => return fail(&e),
                }
            }
            match experiment::run_sweep(&config, axes, cli.seed, out, cli.threads) {
                Ok(r) => {
                    for p in &r.points {
                        println!("point {:03}: exit {} {:?}", p.index, p.exit_code, p.overrides);
                    }
                    if let Some(f) = r.control_fit {
                        println!("control norm exponent {:.4}", f.exponent);
                    }
                    r.exit_code
                }
                Err(e) => fail(&e),
            }
        }
        Command::Check { name, config } => {
            let cfg = match experiment::load(&config, &[], cli.seed, out) {
                Ok(c) => c,
                Err(e) => return fail(&e),
            };
            let dir = cfg.output.dir.clone();
            match experiment::run_check(&cfg, &name, &dir) {
                Ok(r) => {
                    println!("{}: {}", r.name, if r.pass { "pass" } else { "violation" });
                    if r.pass {
                        EXIT_OK
                    } else {
                        EXIT_DIAGNOSTIC
                    }
                }
                Err(e) => fail(&e),
            }
        }
        Command::Export { input, output } => {
            let output = output.or_else(|| out.map(PathBuf::from)).unwrap_or_else(|| input.with_extension("csv"));
            match experiment::export_csv(&input, &output) {
                Ok(()) => EXIT_OK,
                Err(e) => {
                    eprintln!("error: {e}");
                    EXIT_CONFIG
                }
            }
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { EXIT_CONFIG as u8 } else { EXIT_OK as u8 });
        }
    };
    ExitCode::from(execute(cli) as u8)
}
