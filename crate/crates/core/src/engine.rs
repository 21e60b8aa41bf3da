//! Prefill-only scoring engine over a paged KV pool.
//!
//! Three ways to score one query against many items:
//!
//! * `naive`: every item is prefilled behind its own copy of the prefix;
//! * `prefix_cached`: the prefix is prefilled once and every item suffix
//!   attends to its cached keys;
//! * `multi_item`: prefix and all items form one sequence in which item rows
//!   see the prefix and their own item only, with positions restarting at
//!   `T_q` for every item.
//!
//! Keys are always visited in logical order (prefix, then the item's own
//! rows) with the same row kernels the tape uses, so the three modes and the
//! tape forward agree bitwise.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernels::{self, RowKeys};
use crate::mix::{ranker_prefix, ItemBlock};
use crate::model::{head_probs, Params, ScoreDistribution};
use crate::scalar::Scalar;
use crate::tensor::{gemm_acc, Tensor};

pub const DEFAULT_PAGE_SIZE: usize = 16;

pub type LeaseId = u64;

/// Paged key/value storage for one model shape. Pages are handed out in
/// leases and returned whole.
#[derive(Debug)]
pub struct KvPool<T> {
    page_size: usize,
    capacity: usize,
    layers: usize,
    width: usize,
    /// Per layer: `capacity * page_size * width` keys, then values.
    keys: Vec<Vec<T>>,
    values: Vec<Vec<T>>,
    free: Vec<usize>,
    leases: BTreeMap<LeaseId, Vec<usize>>,
    next_id: LeaseId,
    attended_pairs: u64,
    token_rows: u64,
}

impl<T: Scalar> KvPool<T> {
    pub fn new(layers: usize, width: usize, page_size: usize, capacity: usize) -> Result<Self> {
        if page_size == 0 || capacity == 0 || layers == 0 || width == 0 {
            return Err(Error::Input("pool dimensions must be positive".into()));
        }
        let cells = capacity * page_size * width;
        Ok(Self {
            page_size,
            capacity,
            layers,
            width,
            keys: vec![vec![T::zero(); cells]; layers],
            values: vec![vec![T::zero(); cells]; layers],
            free: (0..capacity).rev().collect(),
            leases: BTreeMap::new(),
            next_id: 1,
            attended_pairs: 0,
            token_rows: 0,
        })
    }

    pub fn for_model(model: &Params<T>, page_size: usize, capacity: usize) -> Result<Self> {
        Self::new(model.config.layers, model.config.hidden, page_size, capacity)
    }

    pub fn page_size(&self) -> usize {
        self.page_size
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn free_pages(&self) -> usize {
        self.free.len()
    }

    pub fn leased_pages(&self) -> usize {
        self.leases.values().map(Vec::len).sum()
    }

    pub fn active_leases(&self) -> usize {
        self.leases.len()
    }

    /// Lifetime count of attended query/key pairs.
    pub fn attended_pairs(&self) -> u64 {
        self.attended_pairs
    }

    /// Lifetime count of rows pushed through the linear layers.
    pub fn token_rows(&self) -> u64 {
        self.token_rows
    }

    pub fn pages_for(&self, rows: usize) -> usize {
        rows.div_ceil(self.page_size)
    }

    /// Reserves pages for `rows` rows.
    pub fn acquire(&mut self, rows: usize) -> Result<LeaseId> {
        let need = self.pages_for(rows);
        if need > self.free.len() {
            return Err(Error::Capacity {
                required: need,
                free: self.free.len(),
                capacity: self.capacity,
            });
        }
        let at = self.free.len() - need;
        let pages = self.free.split_off(at);
        let id = self.next_id;
        self.next_id += 1;
        self.leases.insert(id, pages);
        Ok(id)
    }

    pub fn release(&mut self, id: LeaseId) -> Result<()> {
        let pages = self
            .leases
            .remove(&id)
            .ok_or_else(|| Error::Contract(format!("release of unknown lease {id}")))?;
        self.free.extend(pages.into_iter().rev());
        Ok(())
    }

    pub fn lease_pages(&self, id: LeaseId) -> Option<&[usize]> {
        self.leases.get(&id).map(Vec::as_slice)
    }

    /// Verifies that every page is either free or in exactly one lease.
    pub fn check_invariants(&self) -> Result<()> {
        let mut seen = vec![false; self.capacity];
        for p in self.free.iter().chain(self.leases.values().flatten()) {
            if *p >= self.capacity || seen[*p] {
                return Err(Error::Contract(format!("page {p} aliased or out of range")));
            }
            seen[*p] = true;
        }
        if seen.iter().any(|s| !s) {
            return Err(Error::Contract("page lost".into()));
        }
        Ok(())
    }

    /// Physical row index of logical row `row` of a lease.
    fn physical(&self, id: LeaseId, row: usize) -> Result<usize> {
        let pages = self
            .leases
            .get(&id)
            .ok_or_else(|| Error::Contract(format!("unknown lease {id}")))?;
        let page = pages
            .get(row / self.page_size)
            .ok_or_else(|| Error::Contract(format!("row {row} beyond lease {id}")))?;
        Ok(page * self.page_size + row % self.page_size)
    }
}

/// A run of rows inside a lease.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Span {
    pub lease: LeaseId,
    pub start: usize,
    pub len: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EngineMode {
    Naive,
    PrefixCached,
    MultiItem,
}

impl EngineMode {
    pub const ALL: [EngineMode; 3] = [EngineMode::Naive, EngineMode::PrefixCached, EngineMode::MultiItem];

    pub fn name(&self) -> &'static str {
        match self {
            EngineMode::Naive => "naive",
            EngineMode::PrefixCached => "prefix_cached",
            EngineMode::MultiItem => "multi_item",
        }
    }
}

impl std::str::FromStr for EngineMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::Input(format!("unknown engine mode {s:?}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CostReport {
    pub mode: EngineMode,
    pub attention_pairs: u64,
    pub linear_rows: u64,
}

/// One query with its candidate items.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoringBatch<T> {
    /// Ranker prefix tokens (`BOS q SEP`), length `T_q`.
    pub prefix: Vec<u32>,
    pub items: Vec<ItemBlock<T>>,
}

impl<T: Scalar> ScoringBatch<T> {
    pub fn for_query(q_tokens: &[u32], items: Vec<ItemBlock<T>>) -> Self {
        Self {
            prefix: ranker_prefix(q_tokens),
            items,
        }
    }

    pub fn item_lens(&self) -> Vec<u64> {
        self.items.iter().map(|i| i.len() as u64).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EngineOutput {
    pub scores: Vec<ScoreDistribution>,
    pub report: CostReport,
}

/// New rows to push through the stack. Logical key index `j` refers to
/// `context` rows first (in order), then to the new rows.
struct Block<'a, T> {
    input: Tensor<T>,
    positions: Vec<usize>,
    keys: Vec<RowKeys>,
    context: &'a [Span],
    dest: Span,
}

/// Runs `block` through every layer, writing its keys and values into the
/// pool. Returns the final-norm hidden rows.
fn prefill<T: Scalar>(model: &Params<T>, pool: &mut KvPool<T>, block: Block<'_, T>) -> Result<Tensor<T>> {
    let cfg = &model.config;
    let (n, w) = (block.input.rows(), cfg.hidden);
    if pool.layers != cfg.layers || pool.width != w {
        return Err(Error::dim("engine", "pool shape does not match the model"));
    }
    if block.input.cols() != w || block.positions.len() != n || block.keys.len() != n || block.dest.len != n {
        return Err(Error::dim("engine", "block rows, positions and keys disagree"));
    }
    let mut phys = Vec::new();
    for s in block.context.iter().chain(std::iter::once(&block.dest)) {
        for r in s.start..s.start + s.len {
            phys.push(pool.physical(s.lease, r)?);
        }
    }
    let dest_base = phys.len() - n;
    if let Some(rk) = block.keys.iter().find(|rk| rk.count() == 0 || rk.first.end > phys.len() || rk.second.end > phys.len()) {
        return Err(Error::Contract(format!("key range {rk:?} outside {} visible rows", phys.len())));
    }

    let eps = T::lit(cfg.norm_eps);
    let f = cfg.ffn_dim();
    let mut x = block.input;
    let mut normed = Tensor::zeros(&[n, w]);
    let mut scores = Vec::new();
    for (l, lp) in model.layers.iter().enumerate() {
        for r in 0..n {
            kernels::rms_norm_row(x.row(r), lp.attn_norm.data(), eps, normed.row_mut(r));
        }
        let mut q = vec![T::zero(); n * w];
        let mut k = vec![T::zero(); n * w];
        let mut v = vec![T::zero(); n * w];
        gemm_acc(normed.data(), lp.wq.data(), &mut q, n, w, w);
        gemm_acc(normed.data(), lp.wk.data(), &mut k, n, w, w);
        gemm_acc(normed.data(), lp.wv.data(), &mut v, n, w, w);
        for (r, &p) in block.positions.iter().enumerate() {
            kernels::rope_row(&mut q[r * w..(r + 1) * w], p, cfg.heads, cfg.rope_base, false);
            kernels::rope_row(&mut k[r * w..(r + 1) * w], p, cfg.heads, cfg.rope_base, false);
        }
        for r in 0..n {
            let at = phys[dest_base + r] * w;
            pool.keys[l][at..at + w].copy_from_slice(&k[r * w..(r + 1) * w]);
            pool.values[l][at..at + w].copy_from_slice(&v[r * w..(r + 1) * w]);
        }
        let (kl, vl) = (&pool.keys[l], &pool.values[l]);
        let mut att = vec![T::zero(); n * w];
        for (r, rk) in block.keys.iter().enumerate() {
            kernels::attend_row(
                &q[r * w..(r + 1) * w],
                rk,
                cfg.heads,
                |j| &kl[phys[j] * w..(phys[j] + 1) * w],
                |j| &vl[phys[j] * w..(phys[j] + 1) * w],
                &mut att[r * w..(r + 1) * w],
                &mut scores,
                None,
            );
        }
        let mut o = vec![T::zero(); n * w];
        gemm_acc(&att, lp.wo.data(), &mut o, n, w, w);
        for (xv, ov) in x.data_mut().iter_mut().zip(&o) {
            *xv = *xv + *ov;
        }
        for r in 0..n {
            kernels::rms_norm_row(x.row(r), lp.ffn_norm.data(), eps, normed.row_mut(r));
        }
        let mut gate = vec![T::zero(); n * f];
        let mut up = vec![T::zero(); n * f];
        gemm_acc(normed.data(), lp.w_gate.data(), &mut gate, n, w, f);
        gemm_acc(normed.data(), lp.w_up.data(), &mut up, n, w, f);
        let act: Vec<T> = gate.iter().zip(&up).map(|(&g, &u)| kernels::silu(g) * u).collect();
        let mut d = vec![T::zero(); n * w];
        gemm_acc(&act, lp.w_down.data(), &mut d, n, f, w);
        for (xv, dv) in x.data_mut().iter_mut().zip(&d) {
            *xv = *xv + *dv;
        }
    }
    let mut out = Tensor::zeros(&[n, w]);
    for r in 0..n {
        kernels::rms_norm_row(x.row(r), model.final_norm.data(), eps, out.row_mut(r));
    }
    if !out.is_finite() {
        return Err(Error::NonFinite { op: "engine" });
    }
    pool.attended_pairs += block.keys.iter().map(|k| k.count() as u64).sum::<u64>();
    pool.token_rows += n as u64;
    Ok(out)
}

fn head_of<T: Scalar>(model: &Params<T>, hidden: &[T]) -> Result<ScoreDistribution> {
    let w = model
        .head
        .as_ref()
        .ok_or_else(|| Error::Contract("scoring needs a ranker with a binary head".into()))?;
    Ok(head_probs(w, hidden))
}

fn causal_keys(base: usize, n: usize) -> Vec<RowKeys> {
    (0..n).map(|i| RowKeys::causal(0, base + i)).collect()
}

fn check_len<T: Scalar>(model: &Params<T>, len: usize) -> Result<()> {
    if len > model.config.max_seq {
        return Err(Error::Length {
            len,
            max: model.config.max_seq,
        });
    }
    Ok(())
}

/// Runs `f` with a lease for `rows` rows and releases it afterwards, also on
/// error.
fn with_lease<T: Scalar, R>(
    pool: &mut KvPool<T>,
    rows: usize,
    f: impl FnOnce(&mut KvPool<T>, LeaseId) -> Result<R>,
) -> Result<R> {
    let id = pool.acquire(rows)?;
    let out = f(pool, id);
    pool.release(id)?;
    out
}

/// Scores a batch against a pool. Leases are released before returning.
pub fn score<T: Scalar>(
    model: &Params<T>,
    pool: &mut KvPool<T>,
    batch: &ScoringBatch<T>,
    mode: EngineMode,
) -> Result<EngineOutput> {
    if batch.items.is_empty() {
        return Err(Error::Input("scoring batch without items".into()));
    }
    let prefix_rows = model.embed_tokens(&batch.prefix)?;
    let items: Vec<Tensor<T>> = batch.items.iter().map(|i| i.input_rows(model)).collect::<Result<_>>()?;
    let (pairs0, rows0) = (pool.attended_pairs, pool.token_rows);
    let t_q = batch.prefix.len();
    let scores = match mode {
        EngineMode::Naive => naive(model, pool, &prefix_rows, &items)?,
        EngineMode::PrefixCached => prefix_cached(model, pool, &prefix_rows, &items)?,
        EngineMode::MultiItem => {
            let total = t_q + items.iter().map(Tensor::rows).sum::<usize>();
            check_len(model, total)?;
            multi_item(model, pool, &prefix_rows, &items)?
        }
    };
    Ok(EngineOutput {
        scores,
        report: CostReport {
            mode,
            attention_pairs: pool.attended_pairs - pairs0,
            linear_rows: pool.token_rows - rows0,
        },
    })
}

fn naive<T: Scalar>(
    model: &Params<T>,
    pool: &mut KvPool<T>,
    prefix: &Tensor<T>,
    items: &[Tensor<T>],
) -> Result<Vec<ScoreDistribution>> {
    let t_q = prefix.rows();
    for it in items {
        check_len(model, t_q + it.rows())?;
    }
    items
        .iter()
        .map(|it| {
            let len = t_q + it.rows();
            with_lease(pool, len, |pool, lease| {
                let out = prefill(
                    model,
                    pool,
                    Block {
                        input: Tensor::concat_rows(&[prefix, it])?,
                        positions: (0..len).collect(),
                        keys: causal_keys(0, len),
                        context: &[],
                        dest: Span { lease, start: 0, len },
                    },
                )?;
                head_of(model, out.row(len - 1))
            })
        })
        .collect()
}

fn prefix_cached<T: Scalar>(
    model: &Params<T>,
    pool: &mut KvPool<T>,
    prefix: &Tensor<T>,
    items: &[Tensor<T>],
) -> Result<Vec<ScoreDistribution>> {
    let t_q = prefix.rows();
    for it in items {
        check_len(model, t_q + it.rows())?;
    }
    with_lease(pool, t_q, |pool, p_lease| {
        let p_span = Span {
            lease: p_lease,
            start: 0,
            len: t_q,
        };
        if t_q > 0 {
            prefill(
                model,
                pool,
                Block {
                    input: prefix.clone(),
                    positions: (0..t_q).collect(),
                    keys: causal_keys(0, t_q),
                    context: &[],
                    dest: p_span,
                },
            )?;
        }
        let context = [p_span];
        items
            .iter()
            .map(|it| {
                let n = it.rows();
                with_lease(pool, n, |pool, lease| {
                    let keys = (0..n)
                        .map(|i| RowKeys {
                            first: 0..t_q,
                            second: t_q..t_q + i + 1,
                        })
                        .collect();
                    let out = prefill(
                        model,
                        pool,
                        Block {
                            input: it.clone(),
                            positions: (t_q..t_q + n).collect(),
                            keys,
                            context: &context,
                            dest: Span { lease, start: 0, len: n },
                        },
                    )?;
                    head_of(model, out.row(n - 1))
                })
            })
            .collect()
    })
}

fn multi_item<T: Scalar>(
    model: &Params<T>,
    pool: &mut KvPool<T>,
    prefix: &Tensor<T>,
    items: &[Tensor<T>],
) -> Result<Vec<ScoreDistribution>> {
    let t_q = prefix.rows();
    let mut spans = Vec::with_capacity(items.len());
    let mut at = t_q;
    for it in items {
        spans.push((at, it.rows()));
        at += it.rows();
    }
    let mask = crate::model::MaskPolicy::PrefixPlusItem {
        prefix_len: t_q,
        item_spans: spans.clone(),
    };
    let keys = mask.row_keys(at, 0)?;
    let mut positions: Vec<usize> = (0..t_q).collect();
    for &(_, n) in &spans {
        positions.extend(t_q..t_q + n);
    }
    let mut parts = vec![prefix];
    parts.extend(items.iter());
    let input = Tensor::concat_rows(&parts)?;
    with_lease(pool, at, |pool, lease| {
        let out = prefill(
            model,
            pool,
            Block {
                input,
                positions,
                keys,
                context: &[],
                dest: Span { lease, start: 0, len: at },
            },
        )?;
        spans.iter().map(|&(s, n)| head_of(model, out.row(s + n - 1))).collect()
    })
}
