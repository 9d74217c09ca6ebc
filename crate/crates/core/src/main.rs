//! `badmarket`: equilibria of production economies with bads and negative
//! prices. See `badmarket --help` and the README for the document formats.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use badmarket::cli::{
    cmd_family, cmd_oracle, cmd_quota, cmd_solve, cmd_verify, cmd_welfare, CommonFlags,
};

#[derive(Parser)]
#[command(
    name = "badmarket",
    version,
    about = "Non-free-disposal competitive equilibria with bads, negative prices, and quotas"
)]
struct Args {
    #[command(subcommand)]
    command: Command,

    /// Clearing tolerance (the optimality tolerance is 10x this value).
    #[arg(long, global = true)]
    tol: Option<f64>,

    /// Seed for every stochastic path; identical invocations produce
    /// byte-identical artifacts.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Number of multi-start restarts for the solver.
    #[arg(long, global = true)]
    restarts: Option<usize>,

    /// Output path for the certificate or CSV artifact.
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    /// Quota document path (pairs with quota solving and verification).
    #[arg(long, global = true)]
    quota: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Validate and solve an economy, then verify and print the certificate.
    Solve { economy: PathBuf },
    /// Verify a certificate against an economy (with --quota: as a quota
    /// equilibrium).
    Verify {
        economy: PathBuf,
        certificate: PathBuf,
    },
    /// Solve an economy under an emission-quota scheme (requires --quota).
    Quota { economy: PathBuf },
    /// Compare two certificates' allocations consumer by consumer.
    Welfare {
        economy: PathBuf,
        /// The two certificates to compare.
        #[arg(long, num_args = 2, value_names = ["CERT_A", "CERT_B"])]
        compare: Vec<PathBuf>,
        /// Write the utility table as CSV.
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Solve a family of economies over a list of sizes and emit a CSV.
    Family {
        /// Family name: hara or garbage.
        #[arg(long)]
        family: String,
        /// Comma-separated instance sizes, e.g. 1,2,10.
        #[arg(long)]
        ns: String,
    },
    /// Print a family's closed-form reference (certificate or continuum
    /// values).
    Oracle {
        /// Family name: hara or garbage.
        #[arg(long)]
        family: String,
        /// Instance size (quadratic-bad family only).
        #[arg(long)]
        n: Option<usize>,
    },
}

fn main() -> ExitCode {
    if let Ok(threads) = std::env::var("BADMARKET_THREADS") {
        if let Ok(n) = threads.parse::<usize>() {
            let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
        }
    }
    let args = Args::parse();
    let flags = CommonFlags {
        tol: args.tol,
        seed: args.seed,
        restarts: args.restarts,
        out: args.out,
        quota: args.quota,
    };
    let outcome = match &args.command {
        Command::Solve { economy } => cmd_solve(economy, &flags),
        Command::Verify {
            economy,
            certificate,
        } => cmd_verify(economy, certificate, &flags),
        Command::Quota { economy } => cmd_quota(economy, &flags),
        Command::Welfare {
            economy,
            compare,
            csv,
        } => {
            if compare.len() != 2 {
                eprintln!("welfare requires --compare CERT_A CERT_B");
                return ExitCode::from(badmarket::cli::EXIT_INPUT as u8);
            }
            cmd_welfare(economy, &compare[0], &compare[1], csv.as_deref(), &flags)
        }
        Command::Family { family, ns } => cmd_family(family, ns, &flags),
        Command::Oracle { family, n } => cmd_oracle(family, *n, &flags),
    };
    print!("{}", outcome.summary);
    if !outcome.summary.ends_with('\n') {
        println!();
    }
    ExitCode::from(outcome.exit_code as u8)
}
