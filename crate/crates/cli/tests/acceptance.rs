//! Acceptance checks. Prints one PASS/FAIL line per criterion and exits
//! non-zero if a hard criterion fails. Criteria 4 and 5 are soft: their
//! FAIL lines are printed but do not change the exit code.
//! `MIXLM_ACCEPT=1,3,8` runs a subset.

use std::collections::{HashMap, HashSet};
use std::net::SocketAddr;
use std::sync::Arc;
use std::time::{Duration, Instant};

use anyhow::{ensure, Result};
use mixlm_cli::ablate::{run_ablations, AblationGrid, Axis};
use mixlm_cli::bench::{run_bench, BenchSpec, Representation};
use mixlm_core::cost_model::{self, CostParams, Regime};
use mixlm_core::data::{gen_dataset, gen_eval_set, Example};
use mixlm_core::engine::{self, EngineMode, KvPool, ScoringBatch};
use mixlm_core::losses::{total_loss_var, LossInputs, LossWeights};
use mixlm_core::mix::{encode_item, fulltext_batch, mixed_batch, score_embedded, score_fulltext, ItemBlock, DATA_VOCAB};
use mixlm_core::model::{HeadMode, ModelConfig, Params};
use mixlm_core::train::{eval_fulltext, eval_mixed, train_stage2_teacher, train_stage3_joint, TrainConfig};
use mixlm_core::{Graph64, Tensor};
use mixlm_serving::payload::{decode_payload, encode_payload};
use mixlm_serving::{refresh, route, Client, EmbeddingCache, Flags, ItemRef, ScoreRequest, Server, Service, ServiceConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Result<Outcome> {
    Ok(Outcome { pass, detail })
}

fn rand_rows(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor<f64> {
    let data = (0..rows * cols).map(|_| StandardNormal.sample(rng)).collect();
    Tensor::new(vec![rows, cols], data).unwrap()
}

fn rand_tokens(rng: &mut ChaCha8Rng, n: usize) -> Vec<u32> {
    (0..n).map(|_| rng.random_range(0..DATA_VOCAB)).collect()
}

// 1 ---------------------------------------------------------------------

fn engine_equivalence() -> Result<Outcome> {
    let t0 = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let (mut worst, mut instances) = (0.0f64, 0);
    for case in 0..240 {
        let hidden = [8, 16, 32][rng.random_range(0..3)];
        let heads = [1, 2, 4][rng.random_range(0..3)];
        let cfg = ModelConfig {
            hidden,
            heads,
            layers: 2,
            max_seq: 160,
            ..ModelConfig::desk(HeadMode::Binary)
        };
        let model = Params::<f64>::init(&cfg, 5000 + case)?;
        let q_len = rng.random_range(0..=14);
        let q = rand_tokens(&mut rng, q_len);
        let n_i = rng.random_range(1..=8);
        let items: Vec<ItemBlock<f64>> = (0..n_i)
            .map(|_| {
                let len = rng.random_range(1..=15);
                if rng.random_bool(0.5) {
                    ItemBlock::Text(rand_tokens(&mut rng, len))
                } else {
                    ItemBlock::Embedded(rand_rows(&mut rng, len, hidden))
                }
            })
            .collect();
        let batch = ScoringBatch::for_query(&q, items);
        let mut pool = KvPool::for_model(&model, 4, 64)?;
        let outs: Vec<Vec<f64>> = EngineMode::ALL
            .iter()
            .map(|&m| Ok(engine::score(&model, &mut pool, &batch, m)?.scores.iter().map(|s| s.p_yes).collect()))
            .collect::<Result<_>>()?;
        for o in &outs[1..] {
            for (a, b) in outs[0].iter().zip(o) {
                worst = worst.max((a - b).abs());
            }
        }
        ensure!(pool.free_pages() == pool.capacity(), "pool not restored");
        instances += 1;
    }
    let secs = t0.elapsed().as_secs_f64();
    outcome(
        instances >= 200 && worst <= 1e-10 && secs < 120.0,
        format!("{instances} instances, max |diff| {worst:.2e}, {secs:.1}s"),
    )
}

// 2 ---------------------------------------------------------------------

fn counter_identity() -> Result<Outcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(202);
    let model = Params::<f64>::init(
        &ModelConfig {
            hidden: 8,
            heads: 2,
            max_seq: 512,
            ..ModelConfig::desk(HeadMode::Binary)
        },
        3,
    )?;
    let mut mismatches = Vec::new();
    for _ in 0..50 {
        let p = CostParams {
            t_q: rng.random_range(2..=16),
            t_i: rng.random_range(2..=24),
            n_i: rng.random_range(1..=6),
            k: 1,
        };
        let p = CostParams {
            k: rng.random_range(1..p.t_i),
            ..p
        };
        let q = rand_tokens(&mut rng, p.t_q as usize - 2);
        let text: Vec<ItemBlock<f64>> = (0..p.n_i).map(|_| ItemBlock::Text(rand_tokens(&mut rng, p.t_i as usize - 1))).collect();
        let mixed: Vec<ItemBlock<f64>> = (0..p.n_i)
            .map(|_| ItemBlock::Embedded(rand_rows(&mut rng, p.compressed_len() as usize - 1, 8)))
            .collect();
        let mut pool = KvPool::for_model(&model, 8, 128)?;
        let cases = [
            (EngineMode::Naive, &text, Regime::Naive),
            (EngineMode::PrefixCached, &text, Regime::AmortizedFull),
            (EngineMode::MultiItem, &text, Regime::AmortizedFull),
            (EngineMode::PrefixCached, &mixed, Regime::AmortizedMixlm),
            (EngineMode::MultiItem, &mixed, Regime::AmortizedMixlm),
        ];
        for (mode, items, regime) in cases {
            let batch = ScoringBatch::for_query(&q, items.clone());
            let r = engine::score(&model, &mut pool, &batch, mode)?.report;
            let want = cost_model::exact(&p, regime);
            if (r.attention_pairs, r.linear_rows) != (want.attention, want.linear) {
                mismatches.push(format!("{p:?} {}", mode.name()));
            }
        }
    }

    // Proportional forms against the closed-form expressions.
    let mut symbolic = 0;
    for _ in 0..200 {
        let (t_q, n_i, k) = (rng.random_range(1..200u64), rng.random_range(1..300u64), rng.random_range(1..500u64));
        let t_i = k * rng.random_range(1..20u64);
        let p = CostParams { t_q, t_i, n_i, k };
        let c = |r| cost_model::predict(&p, r);
        let l = t_i / k;
        let ok = c(Regime::Naive).attention == n_i * (t_q + t_i).pow(2)
            && c(Regime::Naive).linear == n_i * (t_q + t_i)
            && c(Regime::AmortizedFull).attention == t_q * t_q + n_i * (2 * t_i * t_q + t_i * t_i)
            && c(Regime::AmortizedFull).linear == t_q + n_i * t_i
            && c(Regime::AmortizedMixlm).attention == t_q * t_q + n_i * (2 * l * t_q + l * l)
            && c(Regime::AmortizedMixlm).linear == t_q + n_i * l;
        if !ok {
            mismatches.push(format!("proportional {p:?}"));
        }
        // Instantiated rows at N_i = 250, K = 450.
        let p = CostParams {
            t_q,
            t_i: 450 * (t_i % 7 + 1),
            n_i: 250,
            k: 450,
        };
        let full = cost_model::predict(&p, Regime::AmortizedFull).attention;
        let mix = cost_model::predict(&p, Regime::AmortizedMixlm);
        if full != t_q * t_q + 500 * p.t_i * t_q + 250 * p.t_i * p.t_i
            || 810 * mix.attention != 810 * t_q * t_q + 900 * p.t_i * t_q + p.t_i * p.t_i
            || 9 * mix.linear != 9 * t_q + 5 * p.t_i
        {
            mismatches.push(format!("instantiated {p:?}"));
        }
        symbolic += 1;
    }
    outcome(
        mismatches.is_empty(),
        format!("50 tuples x 5 engine runs, {symbolic} symbolic checks, {} mismatches {:?}", mismatches.len(), mismatches.first()),
    )
}

// 3 ---------------------------------------------------------------------

#[derive(Clone, Copy, Debug)]
enum Term {
    Sft,
    Distill,
    PredAlign,
    HiddenAlign,
    Total,
}

struct GradSetup {
    ranker: Params<f64>,
    encoder: Params<f64>,
    q: Vec<Vec<u32>>,
    items: Vec<Vec<u32>>,
    p_star: Tensor<f64>,
    p_hat: Tensor<f64>,
    t_s: usize,
}

impl GradSetup {
    fn loss(&self, ranker: &Params<f64>, encoder: &Params<f64>, term: Term, w: &LossWeights, grads: bool) -> Result<(f64, Vec<Tensor<f64>>)> {
        let mut g = Graph64::new();
        let rv = ranker.register(&mut g, true);
        let ev = encoder.register(&mut g, true);
        let pairs: Vec<(&[u32], &[u32])> = self.q.iter().zip(&self.items).map(|(q, i)| (q.as_slice(), i.as_slice())).collect();
        let mixed = mixed_batch(&ranker.config, &rv, &encoder.config, &ev, &mut g, &pairs, self.t_s)?;
        let full = fulltext_batch(&ranker.config, &rv, &mut g, &pairs)?;
        let inputs = LossInputs {
            pred: mixed.probs,
            p_star: g.constant(self.p_star.clone()),
            p_hat: Some(g.constant(self.p_hat.clone())),
            p_bar: Some(full.probs),
            h_last: Some(mixed.h_last),
            h_bar_last: Some(full.h_last),
        };
        let lv = total_loss_var(&mut g, &inputs, w)?;
        let out = match term {
            Term::Sft => lv.sft,
            Term::Distill => lv.distill.expect("distill on"),
            Term::PredAlign => lv.pred_align.expect("pred align on"),
            Term::HiddenAlign => lv.hidden_align.expect("hidden align on"),
            Term::Total => lv.total,
        };
        let value = g.value(out).item();
        if !grads {
            return Ok((value, vec![]));
        }
        g.backward(out)?;
        let all: Vec<_> = rv.all().into_iter().chain(ev.all()).collect();
        Ok((value, all.into_iter().map(|v| g.grad(v).cloned().unwrap_or_else(|| Tensor::zeros(g.value(v).shape()))).collect()))
    }
}

fn gradient_suite() -> Result<Outcome> {
    let t0 = Instant::now();
    let cfg = ModelConfig {
        hidden: 16,
        heads: 2,
        layers: 2,
        max_seq: 32,
        ..ModelConfig::desk(HeadMode::Binary)
    };
    let enc_cfg = ModelConfig {
        head_mode: HeadMode::None,
        ..cfg.clone()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(303);
    let s = GradSetup {
        ranker: Params::init(&cfg, 31)?,
        encoder: Params::init(&enc_cfg, 32)?,
        q: (0..3).map(|_| rand_tokens(&mut rng, 3)).collect(),
        items: (0..3).map(|_| rand_tokens(&mut rng, 4)).collect(),
        p_star: Tensor::new(vec![3, 2], vec![1.0, 0.0, 0.25, 0.75, 0.5, 0.5])?,
        p_hat: Tensor::new(vec![3, 2], vec![0.9, 0.1, 0.3, 0.7, 0.45, 0.55])?,
        t_s: 2,
    };
    let all_on = LossWeights::BALANCED_PHASE;
    let terms = [
        (Term::Sft, all_on),
        (Term::Distill, all_on),
        (Term::PredAlign, all_on),
        (Term::HiddenAlign, all_on),
        (Term::Total, LossWeights::ALIGN_PHASE),
        (Term::Total, LossWeights::TASK_PHASE),
        (Term::Total, all_on),
    ];
    let n_ranker = s.ranker.num_tensors();
    let h = 1e-5;
    let mut worst = 0.0f64;
    let mut lines = Vec::new();
    let mut encoder_norm = f64::INFINITY;
    for (term, w) in terms {
        let (_, grads) = s.loss(&s.ranker, &s.encoder, term, &w, true)?;
        let enc_sq: f64 = grads[n_ranker..].iter().flat_map(|t| t.data()).map(|x| x * x).sum();
        if matches!(term, Term::Sft) {
            encoder_norm = enc_sq.sqrt();
        }
        let (mut diff, mut norm_a, mut norm_n) = (0.0, 0.0, 0.0);
        for ti in 0..grads.len() {
            let len = grads[ti].len();
            for _ in 0..3 {
                let j = rng.random_range(0..len);
                let eval = |delta: f64| -> Result<f64> {
                    let (mut r, mut e) = (s.ranker.clone(), s.encoder.clone());
                    {
                        let mut ts = r.tensors_mut();
                        ts.extend(e.tensors_mut());
                        ts[ti].data_mut()[j] += delta;
                    }
                    Ok(s.loss(&r, &e, term, &w, false)?.0)
                };
                let num = (eval(h)? - eval(-h)?) / (2.0 * h);
                let ana = grads[ti].data()[j];
                diff += (num - ana).powi(2);
                norm_a += ana * ana;
                norm_n += num * num;
            }
        }
        let rel = diff.sqrt() / f64::max(norm_a.sqrt().max(norm_n.sqrt()), 1e-12);
        worst = worst.max(rel);
        lines.push(format!("{term:?}@{}/{}: {rel:.1e}", w.lambda_distill, w.lambda_align));
    }
    let secs = t0.elapsed().as_secs_f64();
    outcome(
        worst < 1e-4 && encoder_norm > 1e-8 && secs < 60.0,
        format!("worst rel err {worst:.2e}, encoder grad norm {encoder_norm:.2e}, {secs:.1}s [{}]", lines.join(", ")),
    )
}

// 4 and 5 -----------------------------------------------------------------

const SEEDS: [u64; 3] = [1, 2, 3];

fn desk_quality() -> Result<Outcome> {
    let t0 = Instant::now();
    let mut ok = 0;
    let mut parts = Vec::new();
    for seed in SEEDS {
        let cfg = TrainConfig::desk(seed);
        let data: Vec<Example> = gen_dataset(cfg.data_seed, cfg.dataset_size);
        let eval = gen_eval_set(cfg.eval_seed, cfg.eval_queries);
        let teacher = train_stage2_teacher(&cfg, &data, &mut |_| {})?;
        let t = eval_fulltext(&teacher, &eval)?;
        let joint = train_stage3_joint(&cfg, &data, Some(&teacher), &mut |_| {})?;
        let s = eval_mixed(&joint.ranker, &joint.encoder, &eval, cfg.t_s)?;
        let good = t >= 0.90 && t - s <= 0.05;
        ok += good as usize;
        parts.push(format!("seed {seed}: teacher {t:.4} student {s:.4}{}", if good { "" } else { " (miss)" }));
    }
    let secs = t0.elapsed().as_secs_f64();
    outcome(
        ok >= 2 && secs < 1200.0,
        format!("{ok}/3 seeds hold; {}; {secs:.0}s", parts.join("; ")),
    )
}

fn ablation_trends() -> Result<Outcome> {
    let t0 = Instant::now();
    let grid = AblationGrid {
        seeds: SEEDS.to_vec(),
        ..AblationGrid::trends_only()
    };
    let report = run_ablations(&grid, &mut |_| {})?;
    let rows: Vec<String> = report
        .rows
        .iter()
        .filter(|r| r.axis != Axis::Default)
        .map(|r| format!("{}={:.4}±{:.4}", r.value, r.mean, r.sd))
        .collect();
    let checks: Vec<String> = report
        .trends
        .iter()
        .map(|t| format!("[{}] {}: {}", if t.holds { "ok" } else { "fail" }, t.name, t.detail))
        .collect();
    let pass = report.trends.len() == 3 && report.trends.iter().all(|t| t.holds);
    outcome(
        pass,
        format!("{}; rows {}; {:.0}s", checks.join("; "), rows.join(" "), t0.elapsed().as_secs_f64()),
    )
}

// 6 ---------------------------------------------------------------------

fn throughput_ordering() -> Result<Outcome> {
    let spec = BenchSpec {
        repetitions: 3,
        ..BenchSpec::default()
    };
    let cfg = spec.model_config();
    let ranker = Params::<f64>::init(&cfg, spec.seed)?;
    let encoder = Params::<f64>::init(
        &ModelConfig {
            head_mode: HeadMode::None,
            ..cfg
        },
        spec.seed + 1,
    )?;
    let recs = run_bench(&spec, &ranker, &encoder)?;
    let ips = |r: Representation, m: EngineMode| {
        recs.iter()
            .find(|x| x.representation == r && x.mode == m)
            .map(|x| x.items_per_sec)
            .unwrap_or(f64::NAN)
    };
    let mut pass = true;
    let mut parts = Vec::new();
    for m in EngineMode::ALL {
        let (f, s, x) = (ips(Representation::Fulltext, m), ips(Representation::Summarized, m), ips(Representation::Mixlm, m));
        pass &= x > s && s > f;
        parts.push(format!("{}: {x:.0} > {s:.0} > {f:.0}", m.name()));
    }
    for r in [Representation::Fulltext, Representation::Summarized, Representation::Mixlm] {
        let pairs = |m| recs.iter().find(|x| x.representation == r && x.mode == m).map(|x| x.report.attention_pairs);
        pass &= pairs(EngineMode::Naive) >= pairs(EngineMode::PrefixCached);
    }
    let ratio = ips(Representation::Mixlm, EngineMode::PrefixCached) / ips(Representation::Fulltext, EngineMode::PrefixCached);
    pass &= ratio > 5.0;
    outcome(pass, format!("{}; mixlm/fulltext prefix-cached {ratio:.0}x", parts.join("; ")))
}

// 7 ---------------------------------------------------------------------

fn serving_correctness() -> Result<Outcome> {
    const T_S: usize = 2;
    let mut rng = ChaCha8Rng::seed_from_u64(707);
    // Room for ten packed text items in multi-item mode.
    let ranker_cfg = ModelConfig {
        max_seq: 256,
        ..ModelConfig::desk(HeadMode::Binary)
    };
    let ranker = Arc::new(Params::<f64>::init(&ranker_cfg, 71)?);
    let encoder = Params::<f64>::init(&ModelConfig::desk(HeadMode::None), 72)?;
    let catalog: Vec<(String, Vec<u32>)> = (0..40).map(|i| (format!("job-{i}"), rand_tokens(&mut rng, 24))).collect();
    let cache = Arc::new(EmbeddingCache::in_memory());
    let config = ServiceConfig {
        workers: 4,
        pool_pages: 32,
        ..ServiceConfig::default()
    };
    refresh(&cache, &encoder, &config.model_version, &catalog, T_S)?;
    let embedded: HashMap<&str, Tensor<f64>> = catalog
        .iter()
        .map(|(id, t)| Ok((id.as_str(), encode_item(&encoder, t, T_S)?)))
        .collect::<Result<_>>()?;
    let service = Arc::new(Service::start(config, ranker.clone(), cache)?);
    let server = Server::start("127.0.0.1:0", service.clone())?;
    let addr: SocketAddr = server.addr();
    let mut client = Client::connect(addr)?;

    let (mut requests, mut mismatches) = (0, 0);
    let mut expected_ids = Vec::new();
    for _ in 0..1000 {
        let q_len = rng.random_range(1..=6);
        let q = rand_tokens(&mut rng, q_len);
        let n = rng.random_range(1..=10);
        let mut items = Vec::new();
        let mut want = Vec::new();
        for _ in 0..n {
            match rng.random_range(0..3) {
                0 => {
                    let (id, _) = &catalog[rng.random_range(0..catalog.len())];
                    want.push(score_embedded(&ranker, &q, &embedded[id.as_str()])?.p_yes);
                    items.push(ItemRef::Cached(id.clone()));
                }
                1 => {
                    let r = rng.random_range(1..=3);
                    let rows = rand_rows(&mut rng, r, ranker.config.hidden);
                    want.push(score_embedded(&ranker, &q, &rows)?.p_yes);
                    items.push(ItemRef::Payload(rows));
                }
                _ => {
                    let len = rng.random_range(1..=12);
                    let t = rand_tokens(&mut rng, len);
                    want.push(score_fulltext(&ranker, &q, &t)?.p_yes);
                    items.push(ItemRef::Text(t));
                }
            }
        }
        let mode = EngineMode::ALL[rng.random_range(0..3)];
        let req = ScoreRequest {
            query_tokens: q.clone(),
            items,
            flags: Flags { mode: Some(mode) },
        };
        let resp = client.score(&req)?;
        requests += 1;
        let got: Vec<u64> = resp.results.iter().map(|r| r.p_yes().map_or(u64::MAX, f64::to_bits)).collect();
        let want: Vec<u64> = want.iter().map(|x| x.to_bits()).collect();
        if got != want || resp.worker != route(&q, 4)? {
            mismatches += 1;
        }
        expected_ids.push((resp.request_id, resp.worker, n));
    }
    drop(client);
    server.shutdown();

    // Pool restoration and batch atomicity from the worker logs.
    let log = service.worker_log();
    let mut seen = HashSet::new();
    let mut violations = 0;
    for e in &log {
        if !seen.insert(e.request_id) || e.engine_calls != 1 || e.free_before != e.capacity || e.free_after != e.capacity {
            violations += 1;
        }
    }
    let by_id: HashMap<u64, _> = log.iter().map(|e| (e.request_id, e)).collect();
    for (id, worker, n) in &expected_ids {
        match by_id.get(id) {
            Some(e) if e.worker == *worker && e.items == *n => {}
            _ => violations += 1,
        }
    }

    // Payload codec, both widths, special values included.
    let mut codec_bad = 0;
    for i in 0..500 {
        let (r, c) = (rng.random_range(1..6), rng.random_range(1..9));
        let mut v: Vec<f64> = (0..r * c).map(|_| StandardNormal.sample(&mut rng)).collect();
        v[0] = [-0.0, f64::MIN_POSITIVE / 3.0, f64::MAX, 1e-300][i % 4];
        let t = Tensor::new(vec![r, c], v)?;
        let back = decode_payload::<f64>(&encode_payload(&t)?)?;
        codec_bad += (back.shape() != t.shape() || back.data().iter().zip(t.data()).any(|(a, b)| a.to_bits() != b.to_bits())) as usize;
        let t32: Tensor<f32> = t.map(|x| x.clamp(-1e30, 1e30)).cast();
        let back = decode_payload::<f32>(&encode_payload(&t32)?)?;
        codec_bad += back.data().iter().zip(t32.data()).any(|(a, b)| a.to_bits() != b.to_bits()) as usize;
    }
    let loads = service.loads();
    outcome(
        requests == 1000 && mismatches == 0 && violations == 0 && codec_bad == 0 && log.len() == 1000,
        format!("{requests} requests, {mismatches} score mismatches, {violations} log violations, {codec_bad} codec failures, loads {loads:?}"),
    )
}

// 8 ---------------------------------------------------------------------

fn cost_spot_values() -> Result<Outcome> {
    let p = CostParams {
        t_q: 60,
        t_i: 900,
        n_i: 250,
        k: 450,
    };
    let mix = cost_model::predict(&p, Regime::AmortizedMixlm);
    let naive = cost_model::predict(&p, Regime::Naive);
    outcome(
        mix.attention == 64_600 && mix.linear == 560 && naive.attention == 230_400_000,
        format!(
            "amortized_mixlm attention {} linear {}; naive attention {}",
            mix.attention, mix.linear, naive.attention
        ),
    )
}

type Check = fn() -> Result<Outcome>;

fn main() {
    let only: Option<HashSet<usize>> = std::env::var("MIXLM_ACCEPT")
        .ok()
        .map(|s| s.split(',').filter_map(|x| x.trim().parse().ok()).collect());
    const SOFT: [usize; 2] = [4, 5];
    let checks: [(usize, &str, Check); 8] = [
        (1, "engine equivalence", engine_equivalence),
        (2, "counter/formula identity", counter_identity),
        (3, "gradient suite", gradient_suite),
        (4, "desk quality", desk_quality),
        (5, "ablation trends", ablation_trends),
        (6, "throughput ordering", throughput_ordering),
        (7, "serving correctness", serving_correctness),
        (8, "cost-model spot values", cost_spot_values),
    ];
    let mut failed = 0;
    for (n, name, check) in checks {
        if only.as_ref().is_some_and(|o| !o.contains(&n)) {
            continue;
        }
        let t0 = Instant::now();
        let (pass, detail) = match check() {
            Ok(o) => (o.pass, o.detail),
            Err(e) => (false, format!("error: {e:#}")),
        };
        let soft = SOFT.contains(&n);
        failed += (!pass && !soft) as usize;
        println!(
            "criterion {n} {name}: {} ({}; {:.1}s)",
            match (pass, soft) {
                (true, _) => "PASS",
                (false, true) => "FAIL (soft)",
                (false, false) => "FAIL",
            },
            detail,
            Duration::as_secs_f64(&t0.elapsed())
        );
    }
    if failed > 0 {
        std::process::exit(1);
    }
}
