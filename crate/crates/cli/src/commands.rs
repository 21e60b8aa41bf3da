//! Subcommand bodies. Each returns its records; the binary prints them.

use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use mixlm_core::checkpoint;
use mixlm_core::cost_model::{self, CostParams, Regime};
use mixlm_core::data::{gen_dataset, gen_eval_set};
use mixlm_core::engine::EngineMode;
use mixlm_core::model::Params;
use mixlm_core::train::{eval_fulltext, eval_mixed, train_stage2_teacher, train_stage3_joint, RankerInit, StepRecord};
use mixlm_serving::{refresh, Client, EmbeddingCache, Flags, ItemRef, ItemResult, RefreshReport, ScoreRequest, Server, Service, ServiceConfig};
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::config::RunConfig;

struct MetricsLog(BufWriter<File>);

impl MetricsLog {
    fn open(path: &Path, append: bool) -> Result<Self> {
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir)?;
        }
        let f = OpenOptions::new()
            .create(true)
            .write(true)
            .append(append)
            .truncate(!append)
            .open(path)
            .with_context(|| format!("opening {}", path.display()))?;
        Ok(Self(BufWriter::new(f)))
    }

    fn write(&mut self, v: &impl Serialize) -> Result<()> {
        serde_json::to_writer(&mut self.0, v)?;
        self.0.write_all(b"\n")?;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub stage: String,
    pub event: String,
    pub ndcg_at_10: f64,
}

/// Stage II: full-text teacher. Truncates the metrics log.
pub fn train_teacher(cfg: &RunConfig) -> Result<EvalRecord> {
    cfg.train.validate()?;
    cfg.persist()?;
    let data = gen_dataset(cfg.train.data_seed, cfg.train.dataset_size);
    let eval = gen_eval_set(cfg.train.eval_seed, cfg.train.eval_queries);
    let mut log = MetricsLog::open(&cfg.paths.metrics, false)?;
    let mut failed = None;
    let teacher = train_stage2_teacher(&cfg.train, &data, &mut |r: &StepRecord| {
        if let Err(e) = log.write(r) {
            failed.get_or_insert(e);
        }
    })?;
    if let Some(e) = failed {
        return Err(e);
    }
    checkpoint::save(&teacher, &cfg.paths.teacher)?;
    let rec = EvalRecord {
        stage: "teacher".into(),
        event: "eval".into(),
        ndcg_at_10: eval_fulltext(&teacher, &eval)?,
    };
    log.write(&rec)?;
    Ok(rec)
}

/// Stage III: joint ranker and encoder. Appends to the metrics log.
pub fn train_joint(cfg: &RunConfig) -> Result<EvalRecord> {
    cfg.train.validate()?;
    cfg.persist()?;
    let teacher = if cfg.paths.teacher.exists() {
        Some(checkpoint::load::<f64>(&cfg.paths.teacher)?)
    } else {
        None
    };
    if teacher.is_none() && (cfg.train.losses.distill || cfg.train.ranker_init == RankerInit::Teacher) {
        bail!("{} is missing; run train-teacher first", cfg.paths.teacher.display());
    }
    let data = gen_dataset(cfg.train.data_seed, cfg.train.dataset_size);
    let eval = gen_eval_set(cfg.train.eval_seed, cfg.train.eval_queries);
    let mut log = MetricsLog::open(&cfg.paths.metrics, true)?;
    let mut failed = None;
    let joint = train_stage3_joint(&cfg.train, &data, teacher.as_ref(), &mut |r: &StepRecord| {
        if let Err(e) = log.write(r) {
            failed.get_or_insert(e);
        }
    })?;
    if let Some(e) = failed {
        return Err(e);
    }
    checkpoint::save(&joint.ranker, &cfg.paths.ranker)?;
    checkpoint::save(&joint.encoder, &cfg.paths.encoder)?;
    let rec = EvalRecord {
        stage: "joint".into(),
        event: "eval".into(),
        ndcg_at_10: eval_mixed(&joint.ranker, &joint.encoder, &eval, cfg.train.t_s)?,
    };
    log.write(&rec)?;
    Ok(rec)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ItemText {
    pub id: String,
    pub tokens: Vec<u32>,
}

/// Items of the held-out set, with ids `q{query}-{item}`.
pub fn eval_items(cfg: &RunConfig) -> Vec<ItemText> {
    gen_eval_set(cfg.train.eval_seed, cfg.train.eval_queries)
        .iter()
        .enumerate()
        .flat_map(|(qi, q)| {
            q.items.iter().enumerate().map(move |(j, t)| ItemText {
                id: format!("q{qi}-{j}"),
                tokens: t.clone(),
            })
        })
        .collect()
}

pub fn read_items(path: &Path) -> Result<Vec<ItemText>> {
    let f = File::open(path).with_context(|| format!("opening {}", path.display()))?;
    BufReader::new(f)
        .lines()
        .enumerate()
        .filter(|(_, l)| l.as_ref().map_or(true, |l| !l.trim().is_empty()))
        .map(|(i, l)| serde_json::from_str(&l?).with_context(|| format!("{}:{}", path.display(), i + 1)))
        .collect()
}

/// Encodes items into the nearline cache under the run's model version.
pub fn encode(cfg: &RunConfig, items: &[ItemText]) -> Result<RefreshReport> {
    let encoder = checkpoint::load::<f64>(&cfg.paths.encoder)?;
    let cache = EmbeddingCache::open(&cfg.paths.cache)?;
    let changed: Vec<(String, Vec<u32>)> = items.iter().map(|i| (i.id.clone(), i.tokens.clone())).collect();
    let report = refresh(&cache, &encoder, &cfg.model_version, &changed, cfg.train.t_s)?;
    cache.flush()?;
    Ok(report)
}

/// Starts the service and its TCP front end.
pub fn start_server(cfg: &RunConfig, addr: &str, workers: usize, mode: EngineMode) -> Result<(Server, Arc<Service>)> {
    let ranker = Arc::new(checkpoint::load::<f64>(&cfg.paths.ranker)?);
    let cache = Arc::new(EmbeddingCache::open(&cfg.paths.cache)?);
    let config = ServiceConfig {
        workers,
        default_mode: mode,
        model_version: cfg.model_version.clone(),
        ..ServiceConfig::default()
    };
    let service = Arc::new(Service::start(config, ranker, cache)?);
    Ok((Server::start(addr, service.clone())?, service))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreLine {
    pub item: String,
    pub p_yes: Option<f64>,
    pub error: Option<String>,
}

pub fn score_remote(addr: &str, query: &[u32], item_ids: &[String], mode: Option<EngineMode>) -> Result<Vec<ScoreLine>> {
    let mut client = Client::connect(addr)?;
    let resp = client.score(&ScoreRequest {
        query_tokens: query.to_vec(),
        items: item_ids.iter().map(|i| ItemRef::Cached(i.clone())).collect(),
        flags: Flags { mode },
    })?;
    Ok(item_ids
        .iter()
        .zip(resp.results)
        .map(|(id, r)| match r {
            ItemResult::Score { p_yes, .. } => ScoreLine {
                item: id.clone(),
                p_yes: Some(p_yes),
                error: None,
            },
            ItemResult::Error(e) => ScoreLine {
                item: id.clone(),
                p_yes: None,
                error: Some(e),
            },
        })
        .collect())
}

/// Loads a ranker for benchmarking, widening its sequence limit if needed.
pub fn bench_ranker(path: Option<&Path>, max_seq: usize, seed: u64, spec_cfg: &mixlm_core::model::ModelConfig) -> Result<Params<f64>> {
    let mut p = match path {
        Some(p) => checkpoint::load::<f64>(p)?,
        None => Params::init(spec_cfg, seed)?,
    };
    p.config.max_seq = p.config.max_seq.max(max_seq);
    Ok(p)
}

pub fn costmodel_records(p: &CostParams) -> Result<Vec<serde_json::Value>> {
    p.validate()?;
    let mut out = Vec::new();
    for r in Regime::ALL {
        let pred = cost_model::predict(p, r);
        let ex = cost_model::exact(p, r);
        out.push(json!({
            "regime": r.name(),
            "params": p,
            "proportional": {"attention": pred.attention, "linear": pred.linear},
            "exact_causal": {"attention": ex.attention, "linear": ex.linear},
        }));
    }
    for (a, b) in [
        (Regime::Naive, Regime::AmortizedFull),
        (Regime::AmortizedFull, Regime::AmortizedMixlm),
        (Regime::Naive, Regime::AmortizedMixlm),
    ] {
        let s = cost_model::speedup(p, a, b)?;
        out.push(json!({"speedup": format!("{} / {}", a.name(), b.name()), "attention": s.attention, "linear": s.linear}));
    }
    Ok(out)
}
