use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use log::info;

use misinfo_sim::agents::{BackendConfig, PersonaProfile};
use misinfo_sim::corpus::{self, Corpus};
use misinfo_sim::engine::{self, Mode, RunConfig, RunOptions, RunResult};
use misinfo_sim::metrics::{self, summarize_grid};
use misinfo_sim::report::{self, HeatmapKind, HeatmapSpec};

#[derive(Parser)]
#[command(name = "misinfo", version, about = "Persona rewrite chains and factual drift reports")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run (or resume) a simulation grid.
    Simulate(SimulateArgs),
    /// Render tables and plots from a finished run directory.
    Report {
        #[command(subcommand)]
        what: ReportCommand,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Homogeneous,
    Heterogeneous,
    Custom,
}

#[derive(Clone, Copy, ValueEnum)]
enum BackendArg {
    Live,
    Synthetic,
}

#[derive(Args)]
struct SimulateArgs {
    #[arg(long, value_enum, required_unless_present = "resume")]
    mode: Option<ModeArg>,
    /// Comma-separated domain ids, or `all`.
    #[arg(long, default_value = "all")]
    domains: String,
    /// Branches per domain (defaults to the number of personas).
    #[arg(long)]
    branches: Option<u32>,
    #[arg(long, default_value_t = 30)]
    depth: u32,
    #[arg(long, default_value_t = 42)]
    seed: u64,
    #[arg(long, value_enum, default_value = "synthetic")]
    backend: BackendArg,
    #[arg(long, required_unless_present = "resume")]
    out: Option<PathBuf>,
    /// Continue an interrupted run in this directory.
    #[arg(long, conflicts_with = "out")]
    resume: Option<PathBuf>,
    /// JSON array of persona-id arrays, one per branch.
    #[arg(long)]
    custom_assignment: Option<PathBuf>,
    #[arg(long, default_value_t = 2)]
    max_repeats: u32,
    /// Directory holding personas.json, domains.json and questions.json.
    #[arg(long)]
    corpus: Option<PathBuf>,
    /// JSON object mapping persona id to {"flip_rate", "restore_rate"}.
    #[arg(long)]
    profiles: Option<PathBuf>,
    #[arg(long)]
    workers: Option<usize>,
    #[arg(long)]
    model: Option<String>,
    #[arg(long)]
    auditor_model: Option<String>,
    #[arg(long)]
    endpoint: Option<String>,
    #[arg(long)]
    max_in_flight: Option<usize>,
    #[arg(long)]
    max_retries: Option<u32>,
}

#[derive(Subcommand)]
enum ReportCommand {
    /// Branch-by-domain MPR heatmap, or MI trajectories of ranked cells.
    Heatmap {
        #[arg(long)]
        run: PathBuf,
        #[arg(long)]
        node_level: bool,
        #[arg(long, default_value_t = 10)]
        top: usize,
        #[arg(long, default_value_t = 10)]
        bottom: usize,
        /// Domain ids left out of the ranking (repeatable or comma-separated).
        #[arg(long, value_delimiter = ',')]
        exclude: Vec<String>,
        /// Print values divided by the question count.
        #[arg(long)]
        normalized: bool,
        /// Output directory (defaults to the run directory).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Tier counts, means, inflection points and aborted branches.
    Summary {
        #[arg(long)]
        run: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Highest and lowest MPR cells.
    Rank {
        #[arg(long)]
        run: PathBuf,
        #[arg(long, default_value_t = 10)]
        top: usize,
        #[arg(long, default_value_t = 10)]
        bottom: usize,
        #[arg(long, value_delimiter = ',')]
        exclude: Vec<String>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match cli.command {
        Command::Simulate(args) => simulate(args),
        Command::Report { what } => run_report(what),
    }
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

fn simulate(args: SimulateArgs) -> Result<()> {
    let opts = RunOptions {
        workers: args.workers,
        ..RunOptions::default()
    };
    if let Some(dir) = &args.resume {
        info!("resuming {}", dir.display());
        let run = engine::resume_experiment(dir, &opts)?;
        return finish(dir, &run);
    }
    let corpus: Corpus = match &args.corpus {
        Some(dir) => corpus::load_corpus(dir)?,
        None => corpus::bundled_corpus(),
    };
    let mode = match args.mode.expect("clap enforces --mode") {
        ModeArg::Homogeneous => Mode::Homogeneous,
        ModeArg::Heterogeneous => Mode::Heterogeneous,
        ModeArg::Custom => Mode::Custom,
    };
    let domain_ids = if args.domains == "all" {
        corpus.domain_ids()
    } else {
        args.domains.split(',').map(|s| s.trim().to_string()).collect()
    };
    let custom_assignment: Option<Vec<Vec<u32>>> = args.custom_assignment.as_deref().map(read_json).transpose()?;
    let branch_count = args.branches.unwrap_or(match &custom_assignment {
        Some(a) => a.len() as u32,
        None => corpus.personas.len() as u32,
    });

    let mut backend = match args.backend {
        BackendArg::Synthetic => BackendConfig::synthetic(),
        BackendArg::Live => BackendConfig::live(),
    };
    if let Some(p) = &args.profiles {
        let profiles: BTreeMap<u32, PersonaProfile> = read_json(p)?;
        backend.profiles = profiles;
    }
    if let Some(m) = args.model {
        backend.model_name = m;
    }
    if let Some(m) = args.auditor_model {
        backend.auditor_model = m;
    }
    if let Some(e) = args.endpoint {
        backend.endpoint = e;
    }
    if let Some(n) = args.max_in_flight {
        backend.max_in_flight = n;
    }
    if let Some(n) = args.max_retries {
        backend.max_retries = n;
    }

    let config = RunConfig {
        mode,
        branch_count,
        depth: args.depth,
        domain_ids,
        backend,
        master_seed: args.seed,
        custom_assignment,
        max_repeats: args.max_repeats,
    };
    let out = args.out.expect("clap enforces --out");
    info!(
        "{} branches x {} domains, depth {}, writing to {}",
        config.branch_count,
        config.domain_ids.len(),
        config.depth,
        out.display()
    );
    let run = engine::run_experiment(&config, &corpus, &out, &opts)?;
    finish(&out, &run)
}

fn finish(dir: &Path, run: &RunResult) -> Result<()> {
    let summary = summarize_grid(run);
    println!(
        "run {} complete: {} branches, {} aborted, results in {}",
        run.manifest.run_id,
        run.branches.len(),
        run.aborted.len(),
        dir.display()
    );
    if let Some(m) = summary.overall_mean {
        println!("overall mean MPR {}", metrics::format_2dp(m));
    }
    Ok(())
}

fn write(dir: &Path, name: &str, contents: &str) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let path = dir.join(name);
    fs::write(&path, contents).with_context(|| format!("writing {}", path.display()))?;
    println!("wrote {}", path.display());
    Ok(())
}

fn run_report(what: ReportCommand) -> Result<()> {
    match what {
        ReportCommand::Heatmap {
            run,
            node_level,
            top,
            bottom,
            exclude,
            normalized,
            out,
        } => {
            let result = engine::load_run(&run)?;
            let out = out.unwrap_or_else(|| run.clone());
            let summary = summarize_grid(&result);
            if node_level {
                let exclude: BTreeSet<String> = exclude.into_iter().collect();
                let (hi, lo) = metrics::rank_cells(&summary, top, bottom, &exclude)?;
                for (name, cells, title) in [("node_heatmap_top", hi, "Highest-MPR branches: MI per node"), ("node_heatmap_bottom", lo, "Lowest-MPR branches: MI per node")] {
                    if cells.is_empty() {
                        continue;
                    }
                    let r = report::render_node_heatmap(&result, &report::selection_of(&cells), title)?;
                    write(&out, &format!("{name}.csv"), &r.csv)?;
                    write(&out, &format!("{name}.svg"), &r.svg)?;
                }
            } else {
                if !exclude.is_empty() {
                    bail!("--exclude applies to --node-level only");
                }
                let spec = HeatmapSpec {
                    kind: HeatmapKind::BranchLevel,
                    include_means: true,
                    normalize_by: normalized.then_some(result.manifest.m as u64),
                };
                let r = report::render_branch_heatmap(&summary, &spec)?;
                write(&out, "heatmap.csv", &r.csv)?;
                write(&out, "heatmap.svg", &r.svg)?;
            }
        }
        ReportCommand::Summary { run, out } => {
            let result = engine::load_run(&run)?;
            let text = report::render_summary(&result);
            print!("{text}");
            write(&out.unwrap_or(run), "summary.txt", &text)?;
        }
        ReportCommand::Rank {
            run,
            top,
            bottom,
            exclude,
            out,
        } => {
            let result = engine::load_run(&run)?;
            let summary = summarize_grid(&result);
            let exclude: BTreeSet<String> = exclude.into_iter().collect();
            let (hi, lo) = metrics::rank_cells(&summary, top, bottom, &exclude)?;
            let text = report::render_rank(&hi, &lo);
            print!("{text}");
            write(&out.unwrap_or(run), "rank.txt", &text)?;
        }
    }
    Ok(())
}
