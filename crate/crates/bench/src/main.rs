//! CLI for generating sparse attention workloads, verifying them against
//! oracles, and benchmarking sparse versus dense attention.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use ssa_bench::bench::{bench_ladder, to_csv};
use ssa_bench::verify::{verify, Tolerances};
use ssa_bench::workload::{gen_workload, load, save, WorkloadConfig};
use ssa_bench::resolve_seed;

#[derive(Parser)]
#[command(name = "ssa-bench", about = "Sparse attention workload and benchmark harness")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// Selection block count per token and kv head.
    #[arg(long, default_value_t = 8)]
    topk: usize,
    /// Compression block edge length.
    #[arg(long, default_value_t = 4)]
    mcmp: u32,
    /// Selection block edge length.
    #[arg(long, default_value_t = 8)]
    mslc: u32,
    /// Window block edge length.
    #[arg(long, default_value_t = 8)]
    mwin: u32,
    /// Key/value head count.
    #[arg(long, default_value_t = 1)]
    heads: usize,
    /// Query heads per kv head.
    #[arg(long, default_value_t = 2)]
    hs: usize,
    /// Channels per head.
    #[arg(long, default_value_t = 12)]
    dim: usize,
}

impl ConfigArgs {
    fn to_config(&self) -> WorkloadConfig {
        WorkloadConfig {
            m_cmp: self.mcmp,
            m_slc: self.mslc,
            m_win: self.mwin,
            top_k: self.topk,
            kv_heads: self.heads,
            shared: self.hs,
            dim: self.dim,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate a workload from an analytic shape shell.
    Gen {
        /// Shape name: sphere, box or torus.
        #[arg(long)]
        shape: String,
        /// Full grid resolution before latent downsampling.
        #[arg(long)]
        res: u32,
        /// Latent downsample factor.
        #[arg(long, default_value_t = 8)]
        factor: u32,
        /// RNG seed (also settable via SSA_SEED).
        #[arg(long)]
        seed: Option<u64>,
        /// Output path for the workload JSON.
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Verify a workload against the oracle suite.
    Verify {
        /// Workload JSON produced by `gen`.
        #[arg(long = "in")]
        input: PathBuf,
        /// Relative tolerance for the reduction-to-dense check.
        #[arg(long, default_value_t = 1e-10)]
        tol: f64,
        /// Run in 64-bit arithmetic (always on; flag kept for symmetry).
        #[arg(long, default_value_t = true)]
        f64: bool,
        /// Negative-control hook: corrupt the stored logsumexp and expect
        /// the identity check to fail.
        #[arg(long, hide = true)]
        corrupt_lse: bool,
    },
    /// Benchmark dense vs sparse attention over a size ladder.
    Bench {
        /// Comma-separated token counts, e.g. 8192,16384,32768.
        #[arg(long, value_delimiter = ',')]
        sizes: Vec<usize>,
        /// Timed repeats per measurement (median reported).
        #[arg(long, default_value_t = 3)]
        repeats: usize,
        /// Worker thread count.
        #[arg(long, default_value_t = 1)]
        threads: usize,
        /// Output CSV path; '-' for stdout.
        #[arg(long, default_value = "-")]
        csv: String,
        /// RNG seed (also settable via SSA_SEED).
        #[arg(long)]
        seed: Option<u64>,
        #[command(flatten)]
        config: ConfigArgs,
    },
}

fn main() -> ExitCode {
    match run() {
        Ok(code) => code,
        Err(msg) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
    }
}

fn run() -> Result<ExitCode, String> {
    let cli = Cli::parse();
    match cli.command {
        Command::Gen {
            shape,
            res,
            factor,
            seed,
            out,
            config,
        } => {
            let workload = gen_workload(&shape, res, factor, config.to_config(), resolve_seed(seed))
                .map_err(|e| e.to_string())?;
            save(&workload, &out).map_err(|e| e.to_string())?;
            println!(
                "wrote {} tokens ({} at factor {}) to {}",
                workload.coords.len(),
                shape,
                factor,
                out.display()
            );
            Ok(ExitCode::SUCCESS)
        }
        Command::Verify {
            input,
            tol,
            f64: _,
            corrupt_lse,
        } => {
            let workload = load(&input).map_err(|e| e.to_string())?;
            let tolerances = Tolerances {
                reduction: tol,
                ..Tolerances::default()
            };
            let report = verify(&workload, &tolerances, corrupt_lse);
            if report.all_pass() {
                Ok(ExitCode::SUCCESS)
            } else {
                Ok(ExitCode::from(1))
            }
        }
        Command::Bench {
            sizes,
            repeats,
            threads,
            csv,
            seed,
            config,
        } => {
            if sizes.is_empty() {
                return Err("at least one size is required".into());
            }
            if repeats < 3 {
                return Err("repeats must be >= 3".into());
            }
            rayon::ThreadPoolBuilder::new()
                .num_threads(threads)
                .build_global()
                .map_err(|e| e.to_string())?;
            let records = bench_ladder(&sizes, &config.to_config(), repeats, threads, resolve_seed(seed));
            let text = to_csv(&records);
            if csv == "-" {
                print!("{text}");
            } else {
                std::fs::write(&csv, &text).map_err(|e| e.to_string())?;
                eprintln!("wrote {} records to {csv}", records.len());
            }
            Ok(ExitCode::SUCCESS)
        }
    }
}
