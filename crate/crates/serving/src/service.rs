//! Multi-worker scoring service.
//!
//! Each worker thread owns a KV pool and handles its queue serially. A
//! request is routed by a hash of its query, so all items of one query land
//! on one worker and go through the engine in a single batch.

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::mpsc::{self, Receiver, Sender};
use std::sync::{Arc, Mutex};
use std::thread::JoinHandle;

use mixlm_core::engine::{self, EngineMode, KvPool, ScoringBatch, DEFAULT_PAGE_SIZE};
use mixlm_core::mix::ItemBlock;
use mixlm_core::model::Params;
use serde::{Deserialize, Serialize};

use crate::cache::EmbeddingCache;
use crate::error::{Result, ServeError};
use crate::protocol::{ItemRef, ItemResult, ScoreRequest, ScoreResponse};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ServiceConfig {
    pub workers: usize,
    /// KV pool quota per worker, in pages.
    pub pool_pages: usize,
    pub page_size: usize,
    pub default_mode: EngineMode,
    pub model_version: String,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        Self {
            workers: 2,
            pool_pages: 4096,
            page_size: DEFAULT_PAGE_SIZE,
            default_mode: EngineMode::PrefixCached,
            model_version: "v1".into(),
        }
    }
}

/// FNV-1a over the little-endian query tokens.
pub fn query_hash(query_tokens: &[u32]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for t in query_tokens {
        for b in t.to_le_bytes() {
            h ^= b as u64;
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        }
    }
    h
}

pub fn route(query_tokens: &[u32], workers: usize) -> Result<usize> {
    if workers == 0 {
        return Err(ServeError::Service("no workers".into()));
    }
    Ok((query_hash(query_tokens) % workers as u64) as usize)
}

/// What a worker did with one request.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct WorkerLogEntry {
    pub request_id: u64,
    pub worker: usize,
    pub items: usize,
    /// Engine calls used for the request (one when any item resolved).
    pub engine_calls: usize,
    pub free_before: usize,
    pub free_after: usize,
    pub capacity: usize,
}

struct Job {
    id: u64,
    request: ScoreRequest,
    reply: Sender<Result<ScoreResponse>>,
}

pub struct Service {
    config: ServiceConfig,
    senders: Vec<Sender<Job>>,
    handles: Vec<JoinHandle<()>>,
    cache: Arc<EmbeddingCache>,
    loads: Vec<AtomicU64>,
    log: Arc<Mutex<Vec<WorkerLogEntry>>>,
    next_id: AtomicU64,
}

struct Worker {
    index: usize,
    version: String,
    default_mode: EngineMode,
    ranker: Arc<Params<f64>>,
    cache: Arc<EmbeddingCache>,
    pool: KvPool<f64>,
    log: Arc<Mutex<Vec<WorkerLogEntry>>>,
}

impl Worker {
    fn run(mut self, jobs: Receiver<Job>) {
        for job in jobs {
            let out = self.handle(job.id, job.request);
            let _ = job.reply.send(out);
        }
    }

    fn resolve(&self, item: ItemRef) -> std::result::Result<ItemBlock<f64>, String> {
        match item {
            ItemRef::Cached(id) => self
                .cache
                .get(&id, &self.version)
                .map(ItemBlock::Embedded)
                .ok_or_else(|| format!("unknown item {id} for model version {}", self.version)),
            ItemRef::Payload(rows) => {
                if rows.shape().len() != 2 || rows.cols() != self.ranker.config.hidden || rows.rows() == 0 {
                    Err(format!("payload of shape {:?} does not fit hidden {}", rows.shape(), self.ranker.config.hidden))
                } else {
                    Ok(ItemBlock::Embedded(rows))
                }
            }
            ItemRef::Text(tokens) => Ok(ItemBlock::Text(tokens)),
        }
    }

    fn handle(&mut self, id: u64, req: ScoreRequest) -> Result<ScoreResponse> {
        let mode = req.flags.mode.unwrap_or(self.default_mode);
        let n = req.items.len();
        let mut results: Vec<Option<ItemResult>> = vec![None; n];
        let mut blocks = Vec::new();
        let mut slots = Vec::new();
        for (i, item) in req.items.into_iter().enumerate() {
            match self.resolve(item) {
                Ok(b) => {
                    blocks.push(b);
                    slots.push(i);
                }
                Err(e) => results[i] = Some(ItemResult::Error(e)),
            }
        }
        let free_before = self.pool.free_pages();
        let mut report = None;
        let mut engine_calls = 0;
        let mut failure = None;
        if !blocks.is_empty() {
            engine_calls = 1;
            let batch = ScoringBatch::for_query(&req.query_tokens, blocks);
            match engine::score(&self.ranker, &mut self.pool, &batch, mode) {
                Ok(out) => {
                    for (slot, s) in slots.iter().zip(out.scores) {
                        results[*slot] = Some(ItemResult::Score {
                            p_yes: s.p_yes,
                            p_no: s.p_no,
                        });
                    }
                    report = Some(out.report);
                }
                Err(e) => failure = Some(e),
            }
        }
        self.log.lock().expect("lock").push(WorkerLogEntry {
            request_id: id,
            worker: self.index,
            items: n,
            engine_calls,
            free_before,
            free_after: self.pool.free_pages(),
            capacity: self.pool.capacity(),
        });
        if let Some(e) = failure {
            return Err(e.into());
        }
        Ok(ScoreResponse {
            request_id: id,
            worker: self.index,
            mode,
            results: results.into_iter().map(|r| r.expect("every item answered")).collect(),
            report,
        })
    }
}

impl Service {
    pub fn start(config: ServiceConfig, ranker: Arc<Params<f64>>, cache: Arc<EmbeddingCache>) -> Result<Self> {
        if config.workers == 0 {
            return Err(ServeError::Service("no workers".into()));
        }
        if ranker.head.is_none() {
            return Err(ServeError::Input("service needs a ranker with a binary head".into()));
        }
        cache.register_version(&config.model_version, ranker.config.hidden)?;
        let log = Arc::new(Mutex::new(Vec::new()));
        let mut senders = Vec::new();
        let mut handles = Vec::new();
        for index in 0..config.workers {
            let (tx, rx) = mpsc::channel();
            let worker = Worker {
                index,
                version: config.model_version.clone(),
                default_mode: config.default_mode,
                ranker: ranker.clone(),
                cache: cache.clone(),
                pool: KvPool::for_model(&ranker, config.page_size, config.pool_pages)?,
                log: log.clone(),
            };
            let h = std::thread::Builder::new()
                .name(format!("mixlm-worker-{index}"))
                .spawn(move || worker.run(rx))?;
            senders.push(tx);
            handles.push(h);
        }
        Ok(Self {
            loads: (0..config.workers).map(|_| AtomicU64::new(0)).collect(),
            config,
            senders,
            handles,
            cache,
            log,
            next_id: AtomicU64::new(1),
        })
    }

    pub fn config(&self) -> &ServiceConfig {
        &self.config
    }

    pub fn cache(&self) -> &Arc<EmbeddingCache> {
        &self.cache
    }

    pub fn route(&self, req: &ScoreRequest) -> Result<usize> {
        route(&req.query_tokens, self.senders.len())
    }

    /// Requests routed to each worker so far.
    pub fn loads(&self) -> Vec<u64> {
        self.loads.iter().map(|l| l.load(Ordering::Relaxed)).collect()
    }

    pub fn worker_log(&self) -> Vec<WorkerLogEntry> {
        self.log.lock().expect("lock").clone()
    }

    /// Scores one request on its worker and waits for the answer.
    pub fn score(&self, req: ScoreRequest) -> Result<ScoreResponse> {
        let w = self.route(&req)?;
        self.loads[w].fetch_add(1, Ordering::Relaxed);
        let id = self.next_id.fetch_add(1, Ordering::Relaxed);
        let (tx, rx) = mpsc::channel();
        self.senders[w]
            .send(Job {
                id,
                request: req,
                reply: tx,
            })
            .map_err(|_| ServeError::Service(format!("worker {w} stopped")))?;
        rx.recv()
            .map_err(|_| ServeError::Service(format!("worker {w} dropped request {id}")))?
    }
}

impl Drop for Service {
    fn drop(&mut self) {
        self.senders.clear();
        for h in self.handles.drain(..) {
            let _ = h.join();
        }
    }
}
