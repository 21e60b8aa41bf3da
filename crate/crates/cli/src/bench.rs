//! Prefill throughput for full-text, summarized and mixed item prompts.

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;
use std::time::Instant;

use anyhow::{bail, ensure, Result};
use mixlm_core::engine::{self, CostReport, EngineMode, KvPool, ScoringBatch, DEFAULT_PAGE_SIZE};
use mixlm_core::mix::{encode_item, ItemBlock, DATA_VOCAB};
use mixlm_core::model::{HeadMode, ModelConfig, Params};
use mixlm_serving::{EmbeddingCache, Flags, ItemRef, ScoreRequest, Service, ServiceConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Representation {
    Fulltext,
    /// Full text cut to a summary-sized prefix.
    Summarized,
    /// Encoder rows standing in for the item.
    Mixlm,
}

impl Representation {
    pub fn name(&self) -> &'static str {
        match self {
            Representation::Fulltext => "fulltext",
            Representation::Summarized => "summarized",
            Representation::Mixlm => "mixlm",
        }
    }
}

impl fmt::Display for Representation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Representation {
    type Err = anyhow::Error;
    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "fulltext" => Representation::Fulltext,
            "summarized" => Representation::Summarized,
            "mixlm" => Representation::Mixlm,
            _ => bail!("unknown representation {s:?}"),
        })
    }
}

/// Ranker rows one item occupies, including its `EOI`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RepSpec {
    pub representation: Representation,
    pub tokens: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchSpec {
    /// Shared prefix length, `BOS` and `SEP` included.
    pub t_q: usize,
    pub n_i: usize,
    pub representations: Vec<RepSpec>,
    pub modes: Vec<EngineMode>,
    pub repetitions: usize,
    pub warmup: usize,
    /// Per-call latency budget; records note whether p99 stays inside it.
    pub latency_budget_ms: Option<f64>,
    pub seed: u64,
}

impl Default for BenchSpec {
    fn default() -> Self {
        Self {
            t_q: 60,
            n_i: 50,
            representations: vec![
                RepSpec {
                    representation: Representation::Fulltext,
                    tokens: 766,
                },
                RepSpec {
                    representation: Representation::Summarized,
                    tokens: 145,
                },
                RepSpec {
                    representation: Representation::Mixlm,
                    tokens: 2,
                },
            ],
            modes: EngineMode::ALL.to_vec(),
            repetitions: 5,
            warmup: 1,
            latency_budget_ms: None,
            seed: 7,
        }
    }
}

impl BenchSpec {
    pub fn validate(&self) -> Result<()> {
        ensure!(!self.representations.is_empty(), "empty representation set");
        ensure!(!self.modes.is_empty(), "empty mode set");
        ensure!(self.t_q >= 2, "t_q must cover BOS and SEP");
        ensure!(self.n_i > 0 && self.repetitions > 0, "n_i and repetitions must be positive");
        for r in &self.representations {
            ensure!(r.tokens >= 2, "{} items need at least one token plus EOI", r.representation);
        }
        Ok(())
    }

    pub fn longest_item(&self) -> usize {
        self.representations.iter().map(|r| r.tokens).max().unwrap_or(0)
    }

    /// Desk ranker shape with room for the packed multi-item sequence.
    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            max_seq: self.t_q + self.n_i * self.longest_item(),
            ..ModelConfig::desk(HeadMode::Binary)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchRecord {
    pub representation: Representation,
    pub tokens_per_item: usize,
    pub mode: EngineMode,
    pub t_q: usize,
    pub n_i: usize,
    pub repetitions: usize,
    pub items_per_sec: f64,
    pub mean_latency_ms: f64,
    pub p99_latency_ms: f64,
    pub within_budget: Option<bool>,
    pub report: CostReport,
}

/// Nearest-rank percentile of unsorted samples.
pub fn percentile(samples: &[f64], q: f64) -> f64 {
    if samples.is_empty() {
        return f64::NAN;
    }
    let mut s = samples.to_vec();
    s.sort_by(f64::total_cmp);
    let rank = ((q * s.len() as f64).ceil() as usize).clamp(1, s.len());
    s[rank - 1]
}

fn data_tokens(rng: &mut ChaCha8Rng, n: usize) -> Vec<u32> {
    (0..n).map(|_| rng.random_range(0..DATA_VOCAB)).collect()
}

/// Query tokens and item blocks per representation. Summaries are the
/// leading tokens of the full text; mixed items are encoder rows of it.
pub struct BenchInputs {
    pub query: Vec<u32>,
    pub items: Vec<(RepSpec, Vec<ItemBlock<f64>>)>,
}

pub fn build_inputs(spec: &BenchSpec, encoder: &Params<f64>) -> Result<BenchInputs> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let query = data_tokens(&mut rng, spec.t_q - 2);
    let full_len = spec.longest_item() - 1;
    let texts: Vec<Vec<u32>> = (0..spec.n_i).map(|_| data_tokens(&mut rng, full_len)).collect();
    let mut items = Vec::new();
    for r in &spec.representations {
        let keep = r.tokens - 1;
        let blocks = texts
            .iter()
            .map(|t| match r.representation {
                Representation::Mixlm => Ok(ItemBlock::Embedded(encode_item(encoder, t, keep)?)),
                _ => Ok(ItemBlock::Text(t[..keep].to_vec())),
            })
            .collect::<mixlm_core::Result<Vec<_>>>()?;
        items.push((*r, blocks));
    }
    Ok(BenchInputs { query, items })
}

/// Times every (representation, mode) pair, one engine call per repetition.
pub fn run_bench(spec: &BenchSpec, ranker: &Params<f64>, encoder: &Params<f64>) -> Result<Vec<BenchRecord>> {
    let inputs = build_inputs(spec, encoder)?;
    let longest = spec.t_q + spec.longest_item();
    let rows = spec.t_q + spec.n_i * spec.longest_item();
    let pages = rows.div_ceil(DEFAULT_PAGE_SIZE) + longest.div_ceil(DEFAULT_PAGE_SIZE) + 1;
    let mut pool = KvPool::for_model(ranker, DEFAULT_PAGE_SIZE, pages)?;
    let mut out = Vec::new();
    for (rep, blocks) in &inputs.items {
        let batch = ScoringBatch::for_query(&inputs.query, blocks.clone());
        for &mode in &spec.modes {
            for _ in 0..spec.warmup {
                engine::score(ranker, &mut pool, &batch, mode)?;
            }
            let mut lat = Vec::with_capacity(spec.repetitions);
            let mut report = None;
            let t0 = Instant::now();
            for _ in 0..spec.repetitions {
                let t = Instant::now();
                let r = engine::score(ranker, &mut pool, &batch, mode)?;
                lat.push(t.elapsed().as_secs_f64() * 1e3);
                report = Some(r.report);
            }
            let total = t0.elapsed().as_secs_f64();
            let p99 = percentile(&lat, 0.99);
            out.push(BenchRecord {
                representation: rep.representation,
                tokens_per_item: rep.tokens,
                mode,
                t_q: spec.t_q,
                n_i: spec.n_i,
                repetitions: spec.repetitions,
                items_per_sec: (spec.n_i * spec.repetitions) as f64 / total,
                mean_latency_ms: lat.iter().sum::<f64>() / lat.len() as f64,
                p99_latency_ms: p99,
                within_budget: spec.latency_budget_ms.map(|b| p99 <= b),
                report: report.expect("at least one repetition"),
            });
            log::info!("{} {} done", rep.representation, mode.name());
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ServiceBenchRecord {
    pub representation: Representation,
    pub mode: EngineMode,
    pub clients: usize,
    pub requests: usize,
    pub items_per_sec: f64,
    pub mean_latency_ms: f64,
    pub p99_latency_ms: f64,
}

/// Drives an in-process service from `clients` threads. Each request is one
/// query with all of its items; queries differ so they spread over workers.
pub fn run_service_bench(
    spec: &BenchSpec,
    ranker: Arc<Params<f64>>,
    encoder: &Params<f64>,
    clients: usize,
) -> Result<Vec<ServiceBenchRecord>> {
    ensure!(clients > 0, "need at least one client");
    let inputs = build_inputs(spec, encoder)?;
    let rows = spec.t_q + spec.n_i * spec.longest_item();
    let config = ServiceConfig {
        workers: clients,
        pool_pages: rows.div_ceil(DEFAULT_PAGE_SIZE) + spec.n_i + 1,
        ..ServiceConfig::default()
    };
    let service = Arc::new(Service::start(config, ranker, Arc::new(EmbeddingCache::in_memory()))?);
    let mut out = Vec::new();
    for (rep, blocks) in &inputs.items {
        let items: Vec<ItemRef> = blocks
            .iter()
            .map(|b| match b {
                ItemBlock::Text(t) => ItemRef::Text(t.clone()),
                ItemBlock::Embedded(e) => ItemRef::Payload(e.clone()),
            })
            .collect();
        for &mode in &spec.modes {
            let t0 = Instant::now();
            let handles: Vec<_> = (0..clients)
                .map(|c| {
                    let service = service.clone();
                    let items = items.clone();
                    let mut query = inputs.query.clone();
                    let reps = spec.repetitions;
                    std::thread::spawn(move || -> Result<Vec<f64>> {
                        let mut lat = Vec::new();
                        for r in 0..reps {
                            query[0] = ((c * reps + r) % DATA_VOCAB as usize) as u32;
                            let t = Instant::now();
                            service.score(ScoreRequest {
                                query_tokens: query.clone(),
                                items: items.clone(),
                                flags: Flags { mode: Some(mode) },
                            })?;
                            lat.push(t.elapsed().as_secs_f64() * 1e3);
                        }
                        Ok(lat)
                    })
                })
                .collect();
            let mut lat = Vec::new();
            for h in handles {
                lat.extend(h.join().map_err(|_| anyhow::anyhow!("client thread panicked"))??);
            }
            let total = t0.elapsed().as_secs_f64();
            out.push(ServiceBenchRecord {
                representation: rep.representation,
                mode,
                clients,
                requests: lat.len(),
                items_per_sec: (lat.len() * spec.n_i) as f64 / total,
                mean_latency_ms: lat.iter().sum::<f64>() / lat.len() as f64,
                p99_latency_ms: percentile(&lat, 0.99),
            });
        }
    }
    Ok(out)
}

pub fn bench_table(records: &[BenchRecord]) -> String {
    let mut s = format!(
        "{:<11} {:>6} {:<14} {:>12} {:>10} {:>10} {:>14} {:>11}\n",
        "repr", "tokens", "mode", "items/sec", "mean ms", "p99 ms", "attn pairs", "linear rows"
    );
    for r in records {
        s += &format!(
            "{:<11} {:>6} {:<14} {:>12.1} {:>10.2} {:>10.2} {:>14} {:>11}\n",
            r.representation.name(),
            r.tokens_per_item,
            r.mode.name(),
            r.items_per_sec,
            r.mean_latency_ms,
            r.p99_latency_ms,
            r.report.attention_pairs,
            r.report.linear_rows
        );
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn percentile_nearest_rank() {
        assert_eq!(percentile(&[3.0, 1.0, 2.0], 0.5), 2.0);
        assert_eq!(percentile(&[5.0], 0.99), 5.0);
        let v: Vec<f64> = (1..=100).map(f64::from).collect();
        assert_eq!(percentile(&v, 0.99), 99.0);
    }

    #[test]
    fn spec_checks() {
        let mut s = BenchSpec::default();
        assert_eq!(s.model_config().max_seq, 60 + 50 * 766);
        s.representations.clear();
        assert!(s.validate().is_err());
        assert!("nope".parse::<Representation>().is_err());
    }
}
