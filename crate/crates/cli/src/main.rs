use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{bail, Result};
use clap::{Args, Parser, Subcommand};
use mixlm_cli::ablate::{self, AblationGrid};
use mixlm_cli::bench::{self, BenchSpec, RepSpec, Representation};
use mixlm_cli::commands;
use mixlm_cli::config::RunConfig;
use mixlm_core::cost_model::CostParams;
use mixlm_core::engine::EngineMode;
use serde::Serialize;

#[derive(Parser)]
#[command(name = "mixlm", version, about = "Train, serve and benchmark mixed-prompt LLM rankers")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct RunArgs {
    /// Run config file; the desk defaults when absent.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory for the default config.
    #[arg(long, default_value = "runs/desk")]
    out: PathBuf,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    #[arg(long)]
    teacher_steps: Option<usize>,
    #[arg(long)]
    joint_steps: Option<usize>,
}

impl RunArgs {
    fn resolve(&self) -> Result<RunConfig> {
        let base = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::desk(self.seed, &self.out),
        };
        Ok(base.with_steps(self.teacher_steps, self.joint_steps))
    }
}

#[derive(Subcommand)]
enum Command {
    /// Train the full-text teacher.
    TrainTeacher(RunArgs),
    /// Train ranker and encoder jointly.
    TrainJoint(RunArgs),
    /// Encode items into the embedding cache.
    Encode {
        #[command(flatten)]
        run: RunArgs,
        /// JSONL file of {"id", "tokens"}; the held-out set when absent.
        #[arg(long)]
        items: Option<PathBuf>,
    },
    /// Serve scoring requests over TCP.
    Serve {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long, default_value = "127.0.0.1:7878")]
        addr: String,
        #[arg(long, default_value_t = 2)]
        workers: usize,
        #[arg(long, default_value = "prefix_cached")]
        mode: EngineMode,
    },
    /// Score cached items for one query against a running server.
    Score {
        #[arg(long, default_value = "127.0.0.1:7878")]
        addr: String,
        /// Comma-separated query tokens.
        #[arg(long, value_delimiter = ',', required = true)]
        query: Vec<u32>,
        /// Comma-separated cached item ids.
        #[arg(long, value_delimiter = ',', required = true)]
        items: Vec<String>,
        #[arg(long)]
        mode: Option<EngineMode>,
    },
    /// Prefill throughput per item representation and engine mode.
    Bench {
        #[arg(long, default_value_t = 60)]
        t_q: usize,
        #[arg(long, default_value_t = 50)]
        n_i: usize,
        /// name=tokens pairs, tokens including EOI.
        #[arg(long, value_delimiter = ',', default_value = "fulltext=766,summarized=145,mixlm=2")]
        representations: Vec<String>,
        #[arg(long, value_delimiter = ',', default_value = "naive,prefix_cached,multi_item")]
        modes: Vec<EngineMode>,
        #[arg(long, default_value_t = 5)]
        repetitions: usize,
        #[arg(long, default_value_t = 1)]
        warmup: usize,
        #[arg(long)]
        latency_budget_ms: Option<f64>,
        #[arg(long, default_value_t = 7)]
        seed: u64,
        /// Ranker checkpoint; random desk weights when absent.
        #[arg(long)]
        ranker: Option<PathBuf>,
        /// Concurrent clients through the service instead of direct engine calls.
        #[arg(long)]
        clients: Option<usize>,
    },
    /// Cost-model predictions for one configuration.
    Costmodel {
        #[arg(long, default_value_t = 60)]
        t_q: u64,
        #[arg(long, default_value_t = 900)]
        t_i: u64,
        #[arg(long, default_value_t = 250)]
        n_i: u64,
        #[arg(long, default_value_t = 450)]
        k: u64,
    },
    /// Ablation grid with mean and sd over seeds.
    Ablate {
        /// Only the axes used by the trend checks.
        #[arg(long)]
        trends_only: bool,
        #[arg(long, value_delimiter = ',')]
        seeds: Option<Vec<u64>>,
        #[arg(long)]
        teacher_steps: Option<usize>,
        #[arg(long)]
        joint_steps: Option<usize>,
        /// Also write the report as JSON here.
        #[arg(long)]
        report: Option<PathBuf>,
    },
}

fn emit(v: &impl Serialize) -> Result<()> {
    println!("{}", serde_json::to_string(v)?);
    Ok(())
}

fn parse_reps(pairs: &[String]) -> Result<Vec<RepSpec>> {
    pairs
        .iter()
        .map(|p| {
            let Some((name, tokens)) = p.split_once('=') else {
                bail!("expected name=tokens, got {p:?}");
            };
            Ok(RepSpec {
                representation: name.parse::<Representation>()?,
                tokens: tokens.parse()?,
            })
        })
        .collect()
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::TrainTeacher(a) => {
            let cfg = a.resolve()?;
            let rec = commands::train_teacher(&cfg)?;
            emit(&rec)?;
            eprintln!("teacher ndcg@10 {:.4} -> {}", rec.ndcg_at_10, cfg.paths.teacher.display());
        }
        Command::TrainJoint(a) => {
            let cfg = a.resolve()?;
            let rec = commands::train_joint(&cfg)?;
            emit(&rec)?;
            eprintln!("joint ndcg@10 {:.4} -> {}", rec.ndcg_at_10, cfg.paths.ranker.display());
        }
        Command::Encode { run, items } => {
            let cfg = run.resolve()?;
            let items = match items {
                Some(p) => commands::read_items(&p)?,
                None => commands::eval_items(&cfg),
            };
            let rep = commands::encode(&cfg, &items)?;
            emit(&serde_json::json!({"updated": rep.updated, "errors": rep.errors}))?;
            eprintln!("encoded {} items into {}", rep.updated, cfg.paths.cache.display());
        }
        Command::Serve { run, addr, workers, mode } => {
            let cfg = run.resolve()?;
            let (server, _service) = commands::start_server(&cfg, &addr, workers, mode)?;
            eprintln!("serving {} on {}", cfg.model_version, server.addr());
            server.wait();
        }
        Command::Score { addr, query, items, mode } => {
            for line in commands::score_remote(&addr, &query, &items, mode)? {
                emit(&line)?;
            }
        }
        Command::Bench {
            t_q,
            n_i,
            representations,
            modes,
            repetitions,
            warmup,
            latency_budget_ms,
            seed,
            ranker,
            clients,
        } => {
            let spec = BenchSpec {
                t_q,
                n_i,
                representations: parse_reps(&representations)?,
                modes,
                repetitions,
                warmup,
                latency_budget_ms,
                seed,
            };
            spec.validate()?;
            let mcfg = spec.model_config();
            let ranker = commands::bench_ranker(ranker.as_deref(), mcfg.max_seq, seed, &mcfg)?;
            let enc_cfg = mixlm_core::model::ModelConfig {
                head_mode: mixlm_core::model::HeadMode::None,
                ..ranker.config.clone()
            };
            let encoder = mixlm_core::model::Params::init(&enc_cfg, seed + 1)?;
            match clients {
                Some(c) => {
                    for r in bench::run_service_bench(&spec, Arc::new(ranker), &encoder, c)? {
                        emit(&r)?;
                    }
                }
                None => {
                    let recs = bench::run_bench(&spec, &ranker, &encoder)?;
                    for r in &recs {
                        emit(r)?;
                    }
                    eprint!("{}", bench::bench_table(&recs));
                }
            }
        }
        Command::Costmodel { t_q, t_i, n_i, k } => {
            for r in commands::costmodel_records(&CostParams { t_q, t_i, n_i, k })? {
                emit(&r)?;
            }
        }
        Command::Ablate {
            trends_only,
            seeds,
            teacher_steps,
            joint_steps,
            report,
        } => {
            let mut grid = if trends_only { AblationGrid::trends_only() } else { AblationGrid::full() };
            if let Some(s) = seeds {
                grid.seeds = s;
            }
            grid.teacher_steps = teacher_steps;
            grid.joint_steps = joint_steps;
            let rep = ablate::run_ablations(&grid, &mut |r| {
                let _ = emit(r);
            })?;
            for row in &rep.rows {
                emit(row)?;
            }
            for t in &rep.trends {
                emit(t)?;
            }
            eprint!("{}", ablate::report_table(&rep));
            if let Some(p) = report {
                write_json(&p, &rep)?;
            }
        }
    }
    Ok(())
}

fn write_json(path: &Path, v: &impl Serialize) -> Result<()> {
    std::fs::write(path, serde_json::to_string_pretty(v)? + "\n")?;
    Ok(())
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    if let Err(e) = run(Cli::parse()) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}
