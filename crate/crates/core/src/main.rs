use std::fs::File;
use std::io::{self, Write};
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use cfl_core::aggregation::Arithmetic;
use cfl_core::analysis::{connectivity_sweep, write_sweep_csv};
use cfl_core::config::ExperimentConfig;
use cfl_core::experiment::{
    bench, compare, efficiency_sweep, median, run_experiment, write_artifacts, write_csv, BenchOp, ExperimentError,
    TABLE_DROPOUTS,
};
use cfl_core::simnet::Protocol;

#[derive(Parser)]
#[command(name = "cfl", version, about = "Cluster federated learning simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum ProtocolArg {
    Cfl,
    Ppt,
}

#[derive(Clone, Copy, ValueEnum)]
enum OpArg {
    Encrypt,
    Decrypt,
    NoiseGeneration,
    NoiseAddition,
    NoiseSubtraction,
}

#[derive(Subcommand)]
enum Command {
    /// Train for the configured rounds and write CSV, model and summary.
    Run {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, value_enum)]
        protocol: Option<ProtocolArg>,
        /// Per-round dropout in percent.
        #[arg(long)]
        dropout: Option<f64>,
        /// Overrides every seed in the config.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        rounds: Option<u64>,
    },
    /// Key-ring connectivity sweep as CSV.
    Connectivity {
        #[arg(long, value_delimiter = ',', num_args = 0..)]
        n: Vec<usize>,
        #[arg(long, value_delimiter = ',', num_args = 0..)]
        pc: Vec<f64>,
        #[arg(long, default_value_t = 1000)]
        trials: usize,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Mean time per cryptographic and masking operation as CSV.
    Bench {
        #[arg(long, value_enum, value_delimiter = ',')]
        ops: Vec<OpArg>,
        #[arg(long, default_value_t = 1000)]
        dim: usize,
        #[arg(long, default_value_t = 1000)]
        iterations: usize,
        #[arg(long)]
        float: bool,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// CFL vs PPT aggregation messages at several dropout rates.
    Compare {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, value_delimiter = ',')]
        dropouts: Vec<f64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// CFL/PPT message ratio over scenario seeds, run in parallel.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value_t = 20)]
        seeds: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn output(path: &Option<PathBuf>) -> io::Result<Box<dyn Write>> {
    Ok(match path {
        Some(p) => {
            if let Some(dir) = p.parent().filter(|d| !d.as_os_str().is_empty()) {
                std::fs::create_dir_all(dir)?;
            }
            Box::new(File::create(p)?)
        }
        None => Box::new(io::stdout()),
    })
}

fn execute(cli: Cli) -> Result<(), ExperimentError> {
    match cli.command {
        Command::Run {
            config,
            protocol,
            dropout,
            seed,
            out,
            rounds,
        } => {
            let mut cfg = ExperimentConfig::load(&config)?;
            if let Some(p) = protocol {
                cfg.sim.protocol = match p {
                    ProtocolArg::Cfl => Protocol::Cfl,
                    ProtocolArg::Ppt => Protocol::Ppt,
                };
            }
            if let Some(d) = dropout {
                cfg.faults.dropout_fraction = d / 100.0;
            }
            if let Some(s) = seed {
                cfg.scenario.seed = s;
                cfg.sim.seed = s;
                cfg.faults.dropout_seed = s;
                cfg.training.data_seed = s;
            }
            if let Some(r) = rounds {
                cfg.rounds = r;
            }
            if let Some(o) = out {
                cfg.output.dir = o;
            }
            cfg.validate()?;
            let outcome = run_experiment(&cfg)?;
            write_artifacts(&outcome, &cfg, &cfg.output.dir)?;
            let s = &outcome.summary;
            println!("rounds run          {}", s.rounds_run);
            println!("converged           {}", s.converged);
            println!("aggregation msgs    {}", s.aggregation_messages);
            println!("broadcast msgs      {}", s.broadcast_messages);
            println!("bytes sent          {}", s.bytes_sent);
            if let (Some(a), Some(c)) = (s.final_accuracy, s.centralized_accuracy) {
                println!("accuracy            {a:.4} (centralized {c:.4})");
            }
            println!("artifacts           {}", cfg.output.dir.display());
        }
        Command::Connectivity {
            n,
            pc,
            trials,
            seed,
            out,
        } => {
            let rows = connectivity_sweep(&n, &pc, trials, seed)
                .map_err(|e| cfl_core::config::ConfigError::Invalid(e.to_string()))?;
            write_sweep_csv(&rows, output(&out)?)?;
        }
        Command::Bench {
            ops,
            dim,
            iterations,
            float,
            out,
        } => {
            let ops: Vec<BenchOp> = if ops.is_empty() {
                BenchOp::ALL.to_vec()
            } else {
                ops.into_iter()
                    .map(|o| match o {
                        OpArg::Encrypt => BenchOp::Encrypt,
                        OpArg::Decrypt => BenchOp::Decrypt,
                        OpArg::NoiseGeneration => BenchOp::NoiseGeneration,
                        OpArg::NoiseAddition => BenchOp::NoiseAddition,
                        OpArg::NoiseSubtraction => BenchOp::NoiseSubtraction,
                    })
                    .collect()
            };
            let mode = if float { Arithmetic::Float } else { Arithmetic::Fixed };
            write_csv(&bench(&ops, dim, iterations.max(100), mode), output(&out)?)?;
        }
        Command::Compare { config, dropouts, out } => {
            let cfg = ExperimentConfig::load(&config)?;
            let dropouts = if dropouts.is_empty() { TABLE_DROPOUTS.to_vec() } else { dropouts };
            let rows = compare(&cfg, &dropouts)?;
            eprintln!("{:>9} {:>6} {:>6} {:>8}", "dropout%", "CFL", "PPT", "gain%");
            for r in &rows {
                eprintln!(
                    "{:>9} {:>6} {:>6} {:>8.2}",
                    r.dropout_pct, r.cfl_messages, r.ppt_messages, r.improvement_pct
                );
            }
            write_csv(&rows, output(&out)?)?;
        }
        Command::Sweep { config, seeds, out } => {
            let cfg = ExperimentConfig::load(&config)?;
            let seeds: Vec<u64> = (1..=seeds).collect();
            let rows = efficiency_sweep(&cfg, &seeds)?;
            let ratios: Vec<f64> = rows.iter().map(|r| r.ratio).collect();
            eprintln!("median CFL/PPT ratio {:.4} over {} seeds", median(&ratios), rows.len());
            write_csv(&rows, output(&out)?)?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match execute(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
