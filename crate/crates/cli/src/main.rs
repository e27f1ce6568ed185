use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use anyhow::Context;
use clap::{Parser, Subcommand};

use skillbank::cache::{inspect_dir, purge_stale, ReplayCache};
use skillbank::config::{ProposerMode, RunConfig};
use skillbank::curation::{read_reports, run_in_world};
use skillbank::embedding::{EmbeddingProvider, TrigramHashEmbedder};
use skillbank::objectives::{evaluate_profile, ObjectiveSet};
use skillbank::proposers::EditOps;
use skillbank::retrieval::HybridRetriever;
use skillbank::rollout::Split;
use skillbank::skill::load_bank;
use skillbank::world::{generate_world, SyntheticWorker, SyntheticWorld, WorldParams};

#[derive(Parser)]
#[command(name = "skillbank", version, about = "Curate retrievable skill banks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the curation loop and write bank.json, rounds.jsonl and cache stats.
    Curate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        cache_dir: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        rounds: Option<u32>,
        #[arg(long)]
        candidates: Option<usize>,
        /// Utility tolerance of the selector.
        #[arg(long)]
        epsilon: Option<f64>,
        /// Comma-separated subset of util,div,cov.
        #[arg(long, value_delimiter = ',')]
        objectives: Option<Vec<String>>,
        /// Comma-separated subset of add,rewrite,remove.
        #[arg(long, value_delimiter = ',')]
        edit_ops: Option<Vec<String>>,
        /// `rule` or `remote`.
        #[arg(long)]
        proposer: Option<String>,
    },
    /// Evaluate one bank's objective profile on a split.
    Eval {
        #[arg(long)]
        bank: PathBuf,
        #[arg(long)]
        world: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        /// support, query or test.
        #[arg(long, default_value = "query")]
        split: String,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Convert rounds.jsonl into a CSV series.
    Report {
        #[arg(long)]
        rounds: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Summarize a persisted replay cache.
    InspectCache {
        #[arg(long)]
        cache_dir: PathBuf,
    },
    /// Delete cache entries recorded under another worker version.
    PurgeCache {
        #[arg(long)]
        cache_dir: PathBuf,
        #[arg(long)]
        worker_version: String,
    },
    /// Generate a synthetic world file.
    GenWorld {
        #[arg(long, default_value_t = 6)]
        n_tags: usize,
        #[arg(long, default_value_t = 24)]
        n_tasks_per_split: usize,
        #[arg(long, default_value_t = 0.3)]
        solvable_fraction: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
}

/// Failure with its exit code: 2 for bad input, 1 for runtime errors.
struct Failure {
    code: u8,
    error: anyhow::Error,
}

fn usage(e: impl Into<anyhow::Error>) -> Failure {
    Failure {
        code: 2,
        error: e.into(),
    }
}

fn runtime(e: impl Into<anyhow::Error>) -> Failure {
    Failure {
        code: 1,
        error: e.into(),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {:#}", f.error);
            ExitCode::from(f.code)
        }
    }
}

fn dispatch(cmd: Command) -> Result<(), Failure> {
    match cmd {
        Command::Curate {
            config,
            out,
            cache_dir,
            seed,
            rounds,
            candidates,
            epsilon,
            objectives,
            edit_ops,
            proposer,
        } => {
            let mut cfg = RunConfig::load(&config).map_err(usage)?;
            if let Some(d) = cache_dir {
                cfg.cache_dir = Some(d);
            }
            if let Some(s) = seed {
                cfg.seed = s;
            }
            if let Some(r) = rounds {
                cfg.rounds = r;
            }
            if let Some(k) = candidates {
                cfg.candidates = k;
            }
            if let Some(e) = epsilon {
                cfg.epsilon_tol = e;
            }
            if let Some(o) = objectives {
                cfg.objectives = ObjectiveSet::from_names(&o).map_err(usage)?;
            }
            if let Some(o) = edit_ops {
                cfg.edit_ops = EditOps::from_names(&o).map_err(usage)?;
            }
            if let Some(p) = proposer {
                cfg.proposer.mode = p.parse::<ProposerMode>().map_err(usage)?;
            }
            cfg.validate().map_err(usage)?;
            curate(&cfg, &out)
        }
        Command::Eval {
            bank,
            world,
            config,
            split,
            out,
        } => eval(&bank, &world, config.as_deref(), &split, out.as_deref()),
        Command::Report { rounds, out } => report(&rounds, &out),
        Command::InspectCache { cache_dir } => {
            if !cache_dir.is_dir() {
                return Err(usage(anyhow::anyhow!(
                    "cache directory {} does not exist",
                    cache_dir.display()
                )));
            }
            let inv = inspect_dir(&cache_dir).map_err(runtime)?;
            println!(
                "{}",
                serde_json::to_string_pretty(&inv).expect("serializable")
            );
            Ok(())
        }
        Command::PurgeCache {
            cache_dir,
            worker_version,
        } => {
            if !cache_dir.is_dir() {
                return Err(usage(anyhow::anyhow!(
                    "cache directory {} does not exist",
                    cache_dir.display()
                )));
            }
            let n = purge_stale(&cache_dir, &worker_version).map_err(runtime)?;
            println!("removed {n} stale entries");
            Ok(())
        }
        Command::GenWorld {
            n_tags,
            n_tasks_per_split,
            solvable_fraction,
            seed,
            out,
        } => {
            let world = generate_world(WorldParams {
                n_tags,
                n_tasks_per_split,
                solvable_fraction,
                seed,
            })
            .map_err(usage)?;
            world.save(&out).map_err(runtime)?;
            Ok(())
        }
    }
}

fn curate(cfg: &RunConfig, out: &Path) -> Result<(), Failure> {
    let world = SyntheticWorld::load(&cfg.world).map_err(usage)?;
    world.validate().map_err(usage)?;
    let cache = match &cfg.cache_dir {
        Some(d) => ReplayCache::persistent(d).map_err(runtime)?,
        None => ReplayCache::in_memory(),
    };
    let outcome = run_in_world(cfg, &world, &cache, out).map_err(runtime)?;
    let last = outcome.reports.last();
    println!(
        "final bank {} with {} skills after {} rounds{}",
        outcome.final_bank.bank_id(),
        outcome.final_bank.len(),
        outcome.reports.len(),
        last.map(|r| format!(
            " (util {:.4}, div {:.4}, cov {:.4})",
            r.profile.util, r.profile.div, r.profile.cov
        ))
        .unwrap_or_default()
    );
    Ok(())
}

fn eval(
    bank_path: &Path,
    world_path: &Path,
    config: Option<&Path>,
    split: &str,
    out: Option<&Path>,
) -> Result<(), Failure> {
    let cfg = match config {
        Some(p) => RunConfig::load(p).map_err(usage)?,
        None => RunConfig {
            world: world_path.to_path_buf(),
            ..RunConfig::default()
        },
    };
    let split = match split {
        "support" => Split::Support,
        "query" => Split::Query,
        "test" => Split::Test,
        other => return Err(usage(anyhow::anyhow!("unknown split {other:?}"))),
    };
    let embedder: Arc<dyn EmbeddingProvider> =
        Arc::new(TrigramHashEmbedder::new(cfg.embedding_dim));
    let world = SyntheticWorld::load(world_path).map_err(usage)?;
    let bank = load_bank(bank_path, embedder.as_ref()).map_err(usage)?;
    let retriever = HybridRetriever::new(cfg.retrieval, embedder).map_err(usage)?;
    let worker = SyntheticWorker::new(&world, cfg.success_threshold);
    let tasks = world.split(split);
    let evaluation = evaluate_profile(
        &bank,
        &tasks,
        &worker,
        &retriever,
        &ReplayCache::in_memory(),
        cfg.epsilon_reg,
    )
    .map_err(runtime)?;
    let body = serde_json::to_string_pretty(&evaluation.report(&bank)).expect("serializable");
    println!("{body}");
    if let Some(p) = out {
        std::fs::write(p, body + "\n")
            .with_context(|| format!("writing {}", p.display()))
            .map_err(runtime)?;
    }
    Ok(())
}

fn report(rounds: &Path, out: &Path) -> Result<(), Failure> {
    let text = std::fs::read_to_string(rounds)
        .with_context(|| format!("reading {}", rounds.display()))
        .map_err(usage)?;
    let reports = read_reports(&text, &rounds.display().to_string()).map_err(usage)?;
    let mut w = csv::Writer::from_path(out)
        .with_context(|| format!("creating {}", out.display()))
        .map_err(runtime)?;
    let write = |w: &mut csv::Writer<std::fs::File>| -> anyhow::Result<()> {
        w.write_record([
            "round",
            "bank_size",
            "util",
            "div",
            "cov",
            "winner_is_null",
            "cache_hit_rate",
        ])?;
        for r in &reports {
            w.write_record([
                r.round.to_string(),
                r.bank_size.to_string(),
                json_number(r.profile.util),
                json_number(r.profile.div),
                json_number(r.profile.cov),
                r.winner_is_null.to_string(),
                json_number(r.cache_hit_rate),
            ])?;
        }
        w.flush()?;
        Ok(())
    };
    write(&mut w).map_err(runtime)
}

/// Same text the rounds file uses for the value.
fn json_number(x: f64) -> String {
    serde_json::to_string(&x).expect("finite")
}
