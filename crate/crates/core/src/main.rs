use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use gridmarket::congestion::{self, MarketError, MarketTrace, Termination};
use gridmarket::oracle;
use gridmarket::report::{self, Summary};
use gridmarket::scenario::{Scenario, Scheme};

#[derive(Parser)]
#[command(
    name = "gridmarket",
    version,
    about = "Peer-to-peer market on a radial distribution grid"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the two-layer market until congestion is resolved.
    Run(RunArgs),
    /// Check a scenario file and report the first violation.
    Validate {
        #[arg(long)]
        scenario: PathBuf,
    },
    /// Solve the centralized welfare program only.
    Oracle {
        #[command(flatten)]
        common: Common,
        /// Enforce line capacities, voltage limits and losses.
        #[arg(long)]
        capacity: bool,
    },
}

#[derive(Args)]
struct Common {
    /// Scenario TOML; `ieee15.toml` and `ieee15_case2.toml` are bundled.
    #[arg(long)]
    scenario: PathBuf,
    #[arg(long)]
    scheme: Option<Scheme>,
    #[arg(long, allow_negative_numbers = true)]
    gamma: Option<f64>,
    #[arg(long)]
    max_rounds: Option<usize>,
    /// Worker threads for the per-agent solves.
    #[arg(long)]
    threads: Option<usize>,
}

#[derive(Args)]
struct RunArgs {
    #[command(flatten)]
    common: Common,
    /// Directory for CSV and SVG artifacts.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Add the centralized optimum as a second summary column.
    #[arg(long)]
    oracle: bool,
    /// Also write per-iteration residual traces.
    #[arg(long)]
    trace: bool,
}

enum Failure {
    Input(String),
    NotConverged(String),
}

impl Common {
    fn load(&self) -> Result<Scenario, Failure> {
        let mut s =
            Scenario::load_or_bundled(&self.scenario).map_err(|e| Failure::Input(e.to_string()))?;
        if let Some(scheme) = self.scheme {
            s.grid.scheme = scheme;
        }
        if let Some(g) = self.gamma {
            if !(g.is_finite() && g > 0.0) {
                return Err(Failure::Input(format!("gamma must be positive, got {g}")));
            }
            s.algo.gamma = g;
        }
        if let Some(n) = self.max_rounds {
            if n == 0 {
                return Err(Failure::Input("max-rounds must be positive".into()));
            }
            s.algo.max_outer_rounds = n;
        }
        if let Some(n) = self.threads {
            rayon::ThreadPoolBuilder::new()
                .num_threads(n.max(1))
                .build_global()
                .map_err(|e| Failure::Input(e.to_string()))?;
        }
        Ok(s)
    }
}

fn market_failure(e: MarketError) -> Failure {
    match e {
        MarketError::Scenario(e) => Failure::Input(e.to_string()),
        other => Failure::NotConverged(other.to_string()),
    }
}

fn io_failure(e: std::io::Error) -> Failure {
    Failure::Input(format!("cannot write outputs: {e}"))
}

fn run(args: &RunArgs) -> Result<(), Failure> {
    let scenario = args.common.load()?;
    let mut trace = MarketTrace::default();
    let outcome = congestion::run_market_traced(&scenario, args.trace.then_some(&mut trace))
        .map_err(market_failure)?;
    let settlement = congestion::settlement(&scenario, &outcome.trades).map_err(market_failure)?;
    let reference = if args.oracle {
        // Capacity is only binding when the loop had to price congestion.
        let capacity = outcome.termination == Termination::Resolved && outcome.rounds.len() > 1;
        Some(
            oracle::solve_centralized_p2(&scenario, scenario.grid.scheme, capacity)
                .map_err(|e| Failure::NotConverged(format!("oracle: {e}")))?,
        )
    } else {
        None
    };
    let summary = Summary::build(&scenario, &outcome, &settlement, reference.as_ref());
    if let Some(dir) = &args.out {
        report::write_csvs(dir, &scenario, &outcome, &settlement).map_err(io_failure)?;
        report::write_plots(dir, &scenario, &outcome).map_err(io_failure)?;
        if args.trace {
            report::write_traces(dir, &trace).map_err(io_failure)?;
        }
    }
    print!("{summary}");
    if !outcome.trades.converged || !outcome.physical.converged {
        return Err(Failure::NotConverged(
            "inner iterations hit their cap".into(),
        ));
    }
    if outcome.termination == Termination::RoundCap {
        return Err(Failure::NotConverged(format!(
            "congestion still present after {} rounds",
            outcome.rounds.len()
        )));
    }
    Ok(())
}

fn solve_oracle(common: &Common, capacity: bool) -> Result<(), Failure> {
    let s = common.load()?;
    let o = oracle::solve_centralized_p2(&s, s.grid.scheme, capacity)
        .map_err(|e| Failure::NotConverged(e.to_string()))?;
    println!(
        "scenario {} ({}), capacity {}",
        s.name, s.grid.scheme, capacity
    );
    println!("{:<22}{:>14.6}", "social_welfare", o.social_welfare);
    println!("{:<22}{:>14.6}", "grid_purchase", o.grid_purchase);
    println!("{:<22}{:>14.6}", "grid_payment", o.grid_payment);
    println!("{:<22}{:>14.6}", "p2p_energy", o.p2p_energy());
    if capacity {
        println!("{:<22}{:>14.6}", "losses", o.total_losses(&s));
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("GRIDMARKET_LOG", "warn"))
        .init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            // Usage errors are input errors; help and version are not errors.
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    let result = match &cli.command {
        Command::Run(args) => run(args),
        Command::Validate { scenario } => Scenario::load_or_bundled(scenario)
            .map(|s| {
                println!(
                    "{}: ok ({} buses, {} lines)",
                    scenario.display(),
                    s.n_bus(),
                    s.lines().count()
                )
            })
            .map_err(|e| Failure::Input(e.to_string())),
        Command::Oracle { common, capacity } => solve_oracle(common, *capacity),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Input(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::NotConverged(msg)) => {
            eprintln!("not converged: {msg}");
            ExitCode::from(2)
        }
    }
}
