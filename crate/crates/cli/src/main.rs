//! `twn`: train, quantize, pack, run and inspect ternary weight networks.
//!
//! Every subcommand writes its outputs and a `manifest.json` into `--out`
//! and prints one JSON document on stdout (`compare` and `inspect` print a
//! table unless `--json` is given). Exit codes: 0 success, 1 internal
//! error, 2 usage or input error.

mod config;
mod error;
mod manifest;
mod quant;
mod report;
mod train;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use twn::nn::{Grouping, WeightMode};

use error::{CliResult, EXIT_OK};
use manifest::RunDir;
use quant::{Dist, Method};

#[derive(Debug, Parser)]
#[command(name = "twn", version, about = "Ternary weight network toolkit")]
struct Cli {
    /// Output directory for results and the run manifest
    /// [default: twn-out/<subcommand>]
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train a network described by a config file.
    Train {
        config: PathBuf,
        #[arg(long)]
        mode: Option<WeightMode>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        epochs: Option<usize>,
        /// MNIST directory [default: $TWN_MNIST_DIR or data/mnist]
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Ternarize one weight vector.
    Ternarize {
        /// Weights file: numbers separated by whitespace or commas, or raw
        /// little-endian f32 with a .f32 extension
        #[arg(long = "in", conflicts_with = "random", required_unless_present = "random")]
        input: Option<PathBuf>,
        /// Sample N weights instead of reading a file
        #[arg(long, value_name = "N")]
        random: Option<usize>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, value_enum, default_value_t = Dist::Normal)]
        dist: Dist,
        /// Uniform half-width or normal standard deviation
        #[arg(long, default_value_t = 1.0)]
        param: f32,
        #[arg(long, value_enum, default_value_t = Method::Exact)]
        method: Method,
    },
    /// Compare the exact optimal threshold with the closed-form rule.
    ValidateRules {
        #[arg(long, value_enum)]
        dist: Dist,
        #[arg(long, default_value_t = 100_000)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 1.0)]
        param: f32,
    },
    /// Quantize the full-precision layers of a model file.
    Pack {
        #[arg(long)]
        model: PathBuf,
        #[arg(long, default_value_t = WeightMode::Ternary)]
        mode: WeightMode,
        #[arg(long, value_enum, default_value_t = Method::Exact)]
        method: Method,
        /// channel or layer [default: channel for conv, layer for fc]
        #[arg(long)]
        group: Option<Grouping>,
    },
    /// Evaluate a model file on the MNIST test split or a config's dataset.
    Infer {
        #[arg(long)]
        model: PathBuf,
        /// MNIST directory [default: $TWN_MNIST_DIR or data/mnist]
        #[arg(long)]
        data: Option<PathBuf>,
        /// Take the dataset from this config's data line
        #[arg(long)]
        config: Option<PathBuf>,
        /// Data seed for synthetic datasets [default: the config's seed]
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value_t = 64)]
        batch: usize,
    },
    /// Time the ternary and reference kernels and count their operations.
    Bench {
        /// Kernel name or all
        #[arg(long)]
        kernel: Option<String>,
        /// Comma-separated sizes, e.g. 1,256,256 for matmul
        #[arg(long, value_delimiter = ',')]
        sizes: Option<Vec<usize>>,
        #[arg(long, default_value_t = 20)]
        reps: usize,
        #[arg(long, default_value_t = 0.5)]
        zero_fraction: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Tabulate training reports.
    Compare {
        #[arg(required = true)]
        reports: Vec<PathBuf>,
        #[arg(long)]
        json: bool,
    },
    /// Describe a model file.
    Inspect {
        model: PathBuf,
        #[arg(long)]
        json: bool,
    },
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Train { .. } => "train",
            Command::Ternarize { .. } => "ternarize",
            Command::ValidateRules { .. } => "validate-rules",
            Command::Pack { .. } => "pack",
            Command::Infer { .. } => "infer",
            Command::Bench { .. } => "bench",
            Command::Compare { .. } => "compare",
            Command::Inspect { .. } => "inspect",
        }
    }
}

enum Output {
    Json(serde_json::Value),
    Text { text: String, json: serde_json::Value },
}

fn dispatch(command: Command, run: &mut RunDir) -> CliResult<(Output, bool)> {
    let json = |v| Ok((Output::Json(v), false));
    match command {
        Command::Train {
            config,
            mode,
            seed,
            epochs,
            data,
        } => json(train::cmd_train(
            &train::TrainArgs {
                config,
                mode,
                seed,
                epochs,
                data,
            },
            run,
        )?),
        Command::Ternarize {
            input,
            random,
            seed,
            dist,
            param,
            method,
        } => json(quant::cmd_ternarize(
            &quant::TernarizeArgs {
                input,
                random,
                seed,
                dist,
                param,
                method,
            },
            run,
        )?),
        Command::ValidateRules { dist, n, seed, param } => {
            json(quant::cmd_validate_rules(&quant::RulesArgs { dist, n, seed, param }, run)?)
        }
        Command::Pack {
            model,
            mode,
            method,
            group,
        } => json(quant::cmd_pack(
            &quant::PackArgs {
                model,
                mode,
                method,
                grouping: group,
            },
            run,
        )?),
        Command::Infer {
            model,
            data,
            config,
            seed,
            batch,
        } => {
            let v = train::cmd_infer(
                &train::InferArgs {
                    model,
                    data,
                    config,
                    seed,
                    batch,
                },
                run,
            )?;
            Ok((Output::Json(v), true))
        }
        Command::Bench {
            kernel,
            sizes,
            reps,
            zero_fraction,
            seed,
        } => {
            let v = report::cmd_bench(
                &report::BenchArgs {
                    kernel,
                    sizes,
                    reps,
                    zero_fraction,
                    seed,
                },
                run,
            )?;
            Ok((Output::Json(v), true))
        }
        Command::Compare { reports, json: as_json } => {
            let out = report::cmd_compare(&reports, run)?;
            Ok((
                if as_json {
                    Output::Json(out.json)
                } else {
                    Output::Text {
                        text: out.table,
                        json: out.json,
                    }
                },
                false,
            ))
        }
        Command::Inspect { model, json: as_json } => {
            let out = report::cmd_inspect(&model, run)?;
            Ok((
                if as_json {
                    Output::Json(out.json)
                } else {
                    Output::Text {
                        text: out.text,
                        json: out.json,
                    }
                },
                false,
            ))
        }
    }
}

fn run(cli: Cli) -> CliResult<()> {
    let name = cli.command.name();
    let out = cli.out.unwrap_or_else(|| PathBuf::from("twn-out").join(name));
    let args: Vec<String> = std::env::args().skip(1).collect();
    let mut run = RunDir::create(&out, name, args)?;
    let (output, volatile) = dispatch(cli.command, &mut run)?;
    let json = match &output {
        Output::Json(v) | Output::Text { json: v, .. } => v,
    };
    let text = serde_json::to_string_pretty(json).expect("output serializes") + "\n";
    run.write("result.json", text.as_bytes(), volatile)?;
    run.finish()?;
    match output {
        Output::Json(_) => print!("{text}"),
        Output::Text { text, .. } => print!("{text}"),
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::from(EXIT_OK as u8),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
