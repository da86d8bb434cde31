use std::io::Read;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use prefchain::commands::{
    build_providers, cmd_build_graph, cmd_evaluate, cmd_gen_synth, cmd_predict, cmd_simulate, cmd_sweep,
    resolve_config, CliError, Overrides,
};

/// Preference chain: graph retrieval and path-weight priors for travel
/// mode and duration choice, with an agent-based day simulation.
#[derive(Parser)]
#[command(name = "prefchain", version)]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Global {
    /// TOML run configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Root seed; overrides the configuration.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Use the identity calibration mock.
    #[arg(long, global = true)]
    mock_llm: bool,
    /// Use the local hash embedder.
    #[arg(long, global = true)]
    mock_embed: bool,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Build the behavior graph from the reference CSV and write a snapshot.
    BuildGraph,
    /// Prior and calibrated posterior for one query agent.
    Predict {
        /// Query JSON file, or `-` for stdin.
        #[arg(long)]
        query: PathBuf,
    },
    /// KLD and MAE on the validation CSV.
    Evaluate {
        /// Also report uniform and marginal predictors.
        #[arg(long)]
        baselines: bool,
        /// Trip CSV of choices from an outside predictor to score as well.
        #[arg(long)]
        predictions: Option<PathBuf>,
    },
    /// Evaluate over reference sizes and seeds.
    Sweep {
        /// Comma-separated reference sizes.
        #[arg(long, value_delimiter = ',')]
        sizes: Option<Vec<usize>>,
        /// Seeds per size.
        #[arg(long)]
        seeds: Option<u64>,
    },
    /// Simulate one day of agents on the city and export tallies.
    Simulate {
        /// Number of agents.
        #[arg(long)]
        agents: Option<usize>,
    },
    /// Write a synthetic population CSV.
    GenSynth {
        /// Synthetic spec (JSON or TOML).
        #[arg(long)]
        spec: Option<PathBuf>,
        /// Population size for the built-in spec.
        #[arg(long)]
        size: Option<usize>,
    },
}

fn run(cli: Cli) -> Result<(), CliError> {
    let g = cli.global;
    let overrides =
        Overrides { config: g.config, seed: g.seed, mock_llm: g.mock_llm, mock_embed: g.mock_embed, out: g.out };
    let mut config = resolve_config(&overrides, |k| std::env::var(k).ok())?;
    match cli.command {
        Command::BuildGraph => {
            let stats = cmd_build_graph(&config)?;
            println!(
                "nodes {} edges {} persons {} desires {} intentions {}",
                stats.nodes, stats.edges, stats.persons, stats.desires, stats.intentions
            );
        }
        Command::Predict { query } => {
            let text = if query.as_os_str() == "-" {
                let mut s = String::new();
                std::io::stdin()
                    .read_to_string(&mut s)
                    .map_err(|e| CliError::Data(format!("cannot read stdin: {e}")))?;
                s
            } else {
                std::fs::read_to_string(&query)
                    .map_err(|e| CliError::Config(format!("cannot read {}: {e}", query.display())))?
            };
            let providers = build_providers(&config)?;
            println!("{:#}", cmd_predict(&config, &providers, &text)?);
        }
        Command::Evaluate { baselines, predictions } => {
            if predictions.is_some() {
                config.paths.predictions = predictions;
            }
            let providers = build_providers(&config)?;
            for (name, report) in cmd_evaluate(&config, &providers, baselines)? {
                println!("{name}: mean KLD {:.6} mean MAE {:.6}", report.mean_kld, report.mean_mae);
            }
        }
        Command::Sweep { sizes, seeds } => {
            if let Some(sizes) = sizes {
                config.sweep.sizes = sizes;
            }
            if let Some(seeds) = seeds {
                config.sweep.seeds = seeds;
            }
            config.validate()?;
            let providers = build_providers(&config)?;
            for row in cmd_sweep(&config, &providers)? {
                println!("{} {} {} {:.6}", row.size, row.seed, row.metric, row.value);
            }
        }
        Command::Simulate { agents } => {
            if let Some(n) = agents {
                config.simulation.agents = n;
            }
            let providers = build_providers(&config)?;
            let s = cmd_simulate(&config, &providers)?.summary;
            println!("agents {} trips {} traversals {} visits {}", s.agents, s.trips, s.edge_traversals, s.poi_visits);
            if let Some(k) = s.flow_kld {
                println!("flow KLD {k:.6}");
            }
            if let Some(k) = s.visit_kld {
                println!("visit KLD {k:.6}");
            }
        }
        Command::GenSynth { spec, size } => {
            if let Some(spec) = spec {
                config.synthetic.spec = Some(spec);
            }
            if let Some(size) = size {
                config.synthetic.size = size;
            }
            let records = cmd_gen_synth(&config)?;
            println!("wrote {} records", records.len());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
