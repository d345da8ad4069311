//! Command-line front end for the analog training simulator.

use aimc_sim::composite::CompositeCheckpoint;
use aimc_sim::costmodel::{latency_ns, storage_bytes, CostAlgo, CostParams};
use aimc_sim::harness::{
    apply_env_seed, load_config, run, sweep_tiles, validate_lemma1, HarnessError,
};
use clap::{Args, Parser, Subcommand};
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "aimc-sim", about = "Analog crossbar training simulator", version)]
struct Cli {
    /// Worker thread cap for parallel runs.
    #[arg(long, global = true)]
    jobs: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the experiment described by a config file.
    Run { config: PathBuf },
    /// Run a config repeatedly while varying one parameter.
    Sweep {
        config: PathBuf,
        /// Sweep spec, currently `tiles=LO..HI` (inclusive).
        #[arg(long)]
        vary: String,
    },
    /// Print the analytical latency/storage table.
    Cost(CostArgs),
    /// Statistical validators.
    Validate {
        #[command(subcommand)]
        which: ValidateCommand,
    },
    /// Summarize a composite checkpoint file.
    Inspect { checkpoint: PathBuf },
}

#[derive(Args)]
struct CostArgs {
    #[arg(long, default_value_t = 512)]
    d: u64,
    #[arg(long, default_value_t = 100)]
    b: u64,
    #[arg(long, default_value_t = 2)]
    n_s: u64,
    #[arg(long, default_value_t = 5.0)]
    l_avg: f64,
    /// Nanoseconds per pulse.
    #[arg(long, default_value_t = 5.0)]
    t_sp: f64,
    /// Nanoseconds per analog readout.
    #[arg(long, default_value_t = 40.0)]
    t_m: f64,
    /// Peak digital throughput in FLOP/s (shared across 4 tiles).
    #[arg(long, default_value_t = 0.7e12)]
    throughput: f64,
    /// Emit CSV instead of an aligned table.
    #[arg(long)]
    csv: bool,
}

#[derive(Subcommand)]
enum ValidateCommand {
    /// Monte-Carlo check of the pulse-noise mean/variance closed forms.
    Lemma1 {
        #[arg(long, default_value_t = 0.1)]
        alpha: f64,
        #[arg(long, default_value_t = 0.5)]
        dw_min: f64,
        #[arg(long, default_value_t = 10)]
        bl: u32,
        #[arg(long, default_value_t = 100_000)]
        trials: u64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(jobs) = cli.jobs {
        let _ = rayon::ThreadPoolBuilder::new().num_threads(jobs).build_global();
    }
    match dispatch(cli.command) {
        Ok(ok) => {
            if ok {
                ExitCode::SUCCESS
            } else {
                ExitCode::FAILURE
            }
        }
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::FAILURE
        }
    }
}

fn dispatch(command: Command) -> Result<bool, HarnessError> {
    match command {
        Command::Run { config } => {
            let mut config = load_config(&config)?;
            apply_env_seed(&mut config)?;
            let records = run(&config)?;
            for record in &records {
                println!(
                    "seed {}: final loss {:.6e}, dist2 {:.6e}, {} intervals",
                    record.seed,
                    record.final_loss(),
                    record.final_dist2(),
                    record.rows.len()
                );
            }
            if let Some(dir) = &config.run.out_dir {
                println!("wrote metrics under {dir}");
            }
            Ok(true)
        }
        Command::Sweep { config, vary } => {
            let mut config = load_config(&config)?;
            apply_env_seed(&mut config)?;
            let range = parse_tiles_range(&vary)?;
            let results = sweep_tiles(&config, range)?;
            println!("tiles,median_final_loss");
            for (tiles, loss) in results {
                println!("{tiles},{loss:.6e}");
            }
            Ok(true)
        }
        Command::Cost(args) => {
            let params = CostParams {
                d: args.d,
                b: args.b,
                n_s: args.n_s,
                l_avg: args.l_avg,
                t_sp: args.t_sp,
                t_m: args.t_m,
                throughput: args.throughput,
            };
            if args.csv {
                println!("algorithm,latency_ns,storage_bytes");
            } else {
                println!("{:<16} {:>12} {:>16}", "algorithm", "latency[ns]", "storage[bytes]");
            }
            for algo in CostAlgo::ALL {
                let ns = latency_ns(algo, &params)
                    .map_err(|e| HarnessError::Config(e.to_string()))?;
                let bytes = storage_bytes(algo, args.d, args.b);
                if args.csv {
                    println!("{},{ns:.1},{bytes}", algo.label());
                } else {
                    println!("{:<16} {ns:>12.1} {bytes:>16}", algo.label());
                }
            }
            Ok(true)
        }
        Command::Validate { which } => match which {
            ValidateCommand::Lemma1 { alpha, dw_min, bl, trials, seed } => {
                let report = validate_lemma1(alpha, dw_min, bl, trials, seed)?;
                println!(
                    "mean: empirical {:.6e} vs oracle {:.6e} (z = {:.2})",
                    report.empirical_mean, report.oracle_mean, report.mean_z
                );
                println!(
                    "var:  empirical {:.6e} vs oracle {:.6e} (rel err = {:.3})",
                    report.empirical_var, report.oracle_var, report.var_rel_err
                );
                println!("{}", if report.pass { "PASS" } else { "FAIL" });
                Ok(report.pass)
            }
        },
        Command::Inspect { checkpoint } => {
            let text = std::fs::read_to_string(&checkpoint).map_err(|source| HarnessError::Io {
                path: checkpoint.display().to_string(),
                source,
            })?;
            let ckpt: CompositeCheckpoint = serde_json::from_str(&text)
                .map_err(|e| HarnessError::Config(format!("bad checkpoint: {e}")))?;
            println!("tiles: {}, t_global: {}", ckpt.tiles.len(), ckpt.t_global);
            println!("scales: {:?}", ckpt.scales);
            println!("transfer_every: {:?}", ckpt.transfer_every);
            for (n, tile) in ckpt.tiles.iter().enumerate() {
                let linf = tile.weights.iter().fold(0.0f64, |m, &w| m.max(w.abs()));
                println!(
                    "tile {n}: {}x{}, cursor {}, |W|_inf {:.6}, device {}",
                    tile.rows, tile.cols, tile.transfer_cursor, linf, tile.device_hash
                );
            }
            Ok(true)
        }
    }
}

fn parse_tiles_range(vary: &str) -> Result<std::ops::RangeInclusive<usize>, HarnessError> {
    let spec = vary
        .strip_prefix("tiles=")
        .ok_or_else(|| HarnessError::Config(format!("unsupported --vary '{vary}' (expected tiles=LO..HI)")))?;
    let (lo, hi) = spec
        .split_once("..")
        .ok_or_else(|| HarnessError::Config(format!("bad range '{spec}' (expected LO..HI)")))?;
    let lo: usize = lo
        .parse()
        .map_err(|_| HarnessError::Config(format!("bad range start '{lo}'")))?;
    let hi: usize = hi
        .parse()
        .map_err(|_| HarnessError::Config(format!("bad range end '{hi}'")))?;
    if lo == 0 || hi < lo {
        return Err(HarnessError::Config(format!("bad tile range {lo}..{hi}")));
    }
    Ok(lo..=hi)
}
