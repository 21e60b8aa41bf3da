use std::fs;
use std::process::Command;

use mixlm_cli::bench::{run_bench, BenchSpec, RepSpec, Representation};
use mixlm_cli::commands::{self, ItemText};
use mixlm_cli::config::{RunConfig, RESOLVED_CONFIG};
use mixlm_core::cost_model::{self, CostParams, Regime};
use mixlm_core::engine::EngineMode;
use mixlm_core::model::{HeadMode, ModelConfig, Params};

fn small(seed: u64, dir: &std::path::Path) -> RunConfig {
    let mut cfg = RunConfig::desk(seed, dir).with_steps(Some(12), Some(8));
    cfg.train.dataset_size = 400;
    cfg.train.eval_queries = 6;
    cfg
}

#[test]
fn training_reruns_reproduce_metrics_bitwise() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    for d in [a.path(), b.path()] {
        let cfg = small(9, d);
        commands::train_teacher(&cfg).unwrap();
        commands::train_joint(&cfg).unwrap();
    }
    let ma = fs::read(a.path().join("metrics.jsonl")).unwrap();
    assert_eq!(ma, fs::read(b.path().join("metrics.jsonl")).unwrap());
    assert_eq!(ma.iter().filter(|&&c| c == b'\n').count(), 12 + 1 + 8 + 1);
    assert_eq!(
        fs::read(a.path().join("ranker.ckpt")).unwrap(),
        fs::read(b.path().join("ranker.ckpt")).unwrap()
    );
    let resolved = RunConfig::load(&a.path().join(RESOLVED_CONFIG)).unwrap();
    assert_eq!(resolved, small(9, a.path()));
}

#[test]
fn joint_without_teacher_is_refused() {
    let d = tempfile::tempdir().unwrap();
    let err = commands::train_joint(&small(1, d.path())).unwrap_err();
    assert!(err.to_string().contains("train-teacher"), "{err}");
}

#[test]
fn encode_serve_score_end_to_end() {
    let d = tempfile::tempdir().unwrap();
    let cfg = small(4, d.path());
    commands::train_teacher(&cfg).unwrap();
    commands::train_joint(&cfg).unwrap();
    let items = commands::eval_items(&cfg);
    assert_eq!(items.len(), 60);
    let items_file = d.path().join("items.jsonl");
    let lines: Vec<String> = items[..5].iter().map(|i| serde_json::to_string(i).unwrap()).collect();
    fs::write(&items_file, lines.join("\n") + "\n\n").unwrap();
    let read: Vec<ItemText> = commands::read_items(&items_file).unwrap();
    assert_eq!(read, items[..5].to_vec());
    let rep = commands::encode(&cfg, &items).unwrap();
    assert_eq!((rep.updated, rep.errors.len()), (60, 0));

    let (server, _svc) = commands::start_server(&cfg, "127.0.0.1:0", 2, EngineMode::PrefixCached).unwrap();
    let addr = server.addr().to_string();
    let ids = vec!["q0-0".to_string(), "q0-1".to_string(), "nope".to_string()];
    let lines = commands::score_remote(&addr, &[1, 2, 3, 4], &ids, None).unwrap();
    assert_eq!(lines.len(), 3);
    assert!(lines[0].p_yes.is_some() && lines[1].p_yes.is_some());
    assert!(lines[2].error.is_some());
    let again = commands::score_remote(&addr, &[1, 2, 3, 4], &ids, Some(EngineMode::MultiItem)).unwrap();
    assert_eq!(again[0].p_yes.unwrap().to_bits(), lines[0].p_yes.unwrap().to_bits());
    server.shutdown();
}

#[test]
fn bench_counters_follow_the_cost_model() {
    let spec = BenchSpec {
        t_q: 12,
        n_i: 4,
        representations: vec![
            RepSpec {
                representation: Representation::Fulltext,
                tokens: 20,
            },
            RepSpec {
                representation: Representation::Mixlm,
                tokens: 2,
            },
        ],
        repetitions: 2,
        warmup: 0,
        latency_budget_ms: Some(1e9),
        ..BenchSpec::default()
    };
    let cfg = spec.model_config();
    let ranker = Params::init(&cfg, 1).unwrap();
    let encoder = Params::init(
        &ModelConfig {
            head_mode: HeadMode::None,
            ..cfg
        },
        2,
    )
    .unwrap();
    let recs = run_bench(&spec, &ranker, &encoder).unwrap();
    assert_eq!(recs.len(), 6);
    let p = CostParams {
        t_q: 12,
        t_i: 20,
        n_i: 4,
        k: 10,
    };
    for r in &recs {
        let want = match (r.representation, r.mode) {
            (Representation::Fulltext, EngineMode::Naive) => cost_model::exact(&p, Regime::Naive),
            (Representation::Fulltext, _) => cost_model::exact(&p, Regime::AmortizedFull),
            (_, EngineMode::Naive) => cost_model::exact_naive(12, &[2; 4]),
            _ => cost_model::exact(&p, Regime::AmortizedMixlm),
        };
        assert_eq!((r.report.attention_pairs, r.report.linear_rows), (want.attention, want.linear));
        assert_eq!(r.within_budget, Some(true));
        assert!(r.items_per_sec > 0.0 && r.p99_latency_ms >= r.mean_latency_ms);
    }
    let empty = BenchSpec {
        representations: vec![],
        ..spec
    };
    assert!(run_bench(&empty, &ranker, &encoder).is_err());
}

#[test]
fn bench_spec_defaults_give_the_worked_counter() {
    // Prefix-cached mixlm at T_q = 60, two-row items, N_i = 50.
    let lens = vec![2u64; 50];
    assert_eq!(cost_model::exact_prefix_cached(60, &lens).attention, 1830 + 50 * (120 + 3));
    let full = cost_model::exact_prefix_cached(60, &[766; 50]).attention as f64;
    assert!((full / 7980.0 - 2129.0).abs() < 1.0);
}

#[test]
fn binary_costmodel_and_usage_errors() {
    let bin = env!("CARGO_BIN_EXE_mixlm");
    let out = Command::new(bin).arg("costmodel").output().unwrap();
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    let recs: Vec<serde_json::Value> = text.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    let mixlm = recs.iter().find(|r| r["regime"] == "amortized_mixlm").unwrap();
    assert_eq!(mixlm["proportional"]["attention"], 64_600);
    assert_eq!(mixlm["proportional"]["linear"], 560);

    let bad = Command::new(bin)
        .args(["bench", "--representations", "fulltext=766,poster=3"])
        .output()
        .unwrap();
    assert!(!bad.status.success());
    assert!(String::from_utf8_lossy(&bad.stderr).contains("unknown representation"));

    let d = tempfile::tempdir().unwrap();
    let cfg = d.path().join("cfg.json");
    fs::write(&cfg, "{\"seed\": 1}").unwrap();
    let bad = Command::new(bin)
        .args(["train-teacher", "--config", cfg.to_str().unwrap()])
        .output()
        .unwrap();
    assert!(!bad.status.success());
}
