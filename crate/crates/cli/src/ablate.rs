//! Ablation grid over dataset size, `t_s`, loss set and curriculum.
//!
//! Each axis is varied on its own around the default config. Runs with equal
//! resolved configs are trained once, and the teacher is shared by every run
//! with the same seed and dataset size.

use std::collections::HashMap;

use anyhow::Result;
use mixlm_core::data::{gen_dataset, gen_eval_set};
use mixlm_core::metrics::mean_sd;
use mixlm_core::model::Params;
use mixlm_core::train::{eval_fulltext, eval_mixed, train_stage2_teacher, train_stage3_joint, Curriculum, LossSet, TrainConfig};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationGrid {
    pub seeds: Vec<u64>,
    pub dataset_sizes: Vec<usize>,
    pub t_s: Vec<usize>,
    pub losses: Vec<LossSet>,
    pub curricula: Vec<Curriculum>,
    /// Step overrides applied to every run.
    pub teacher_steps: Option<usize>,
    pub joint_steps: Option<usize>,
}

impl AblationGrid {
    pub fn full() -> Self {
        Self {
            seeds: vec![1, 2, 3],
            dataset_sizes: vec![2_000, 20_000],
            t_s: (1..=8).collect(),
            losses: LossSet::ALL_COMBINATIONS.to_vec(),
            curricula: vec![
                Curriculum::None,
                Curriculum::TwoPhase { align_fraction: 0.3 },
                Curriculum::ThreePhase { align_fraction: 0.3 },
            ],
            teacher_steps: None,
            joint_steps: None,
        }
    }

    /// The part of the grid the trend checks need.
    pub fn trends_only() -> Self {
        Self {
            dataset_sizes: vec![],
            t_s: vec![1, 2, 4, 8],
            losses: vec![LossSet::ALL, LossSet::SFT_ONLY],
            curricula: vec![Curriculum::None, Curriculum::TwoPhase { align_fraction: 0.3 }],
            ..Self::full()
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Axis {
    Default,
    DatasetSize,
    TS,
    Losses,
    Curriculum,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRun {
    pub axis: Axis,
    pub value: String,
    pub seed: u64,
    pub teacher_ndcg: f64,
    pub ndcg: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub axis: Axis,
    pub value: String,
    pub seeds: Vec<u64>,
    pub ndcg: Vec<f64>,
    pub mean: f64,
    pub sd: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrendCheck {
    pub name: String,
    pub holds: bool,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub runs: Vec<AblationRun>,
    pub rows: Vec<AblationRow>,
    pub trends: Vec<TrendCheck>,
}

/// Tolerance for the non-decreasing `t_s` trend.
pub const TS_NOISE: f64 = 0.01;

fn curriculum_label(c: &Curriculum) -> String {
    match c {
        Curriculum::None => "none".into(),
        Curriculum::TwoPhase { .. } => "two_phase".into(),
        Curriculum::ThreePhase { .. } => "three_phase".into(),
        Curriculum::Custom { phases } => format!("custom_{}", phases.len()),
    }
}

fn variants(grid: &AblationGrid, seed: u64) -> Vec<(Axis, String, TrainConfig)> {
    let base = || {
        let mut c = TrainConfig::desk(seed);
        if let Some(n) = grid.teacher_steps {
            c.teacher_optim = mixlm_core::optim::OptimConfig::with_steps(n, c.teacher_optim.peak_lr);
        }
        if let Some(n) = grid.joint_steps {
            c.joint_optim = mixlm_core::optim::OptimConfig::with_steps(n, c.joint_optim.peak_lr);
        }
        c
    };
    let mut v = vec![(Axis::Default, "default".to_string(), base())];
    for &n in &grid.dataset_sizes {
        v.push((Axis::DatasetSize, n.to_string(), TrainConfig { dataset_size: n, ..base() }));
    }
    for &t in &grid.t_s {
        v.push((Axis::TS, t.to_string(), TrainConfig { t_s: t, ..base() }));
    }
    for &l in &grid.losses {
        v.push((Axis::Losses, l.label().to_string(), TrainConfig { losses: l, ..base() }));
    }
    for c in &grid.curricula {
        v.push((
            Axis::Curriculum,
            curriculum_label(c),
            TrainConfig {
                curriculum: c.clone(),
                ..base()
            },
        ));
    }
    v
}

/// Runs the grid. `progress` sees every finished run.
pub fn run_ablations(grid: &AblationGrid, progress: &mut dyn FnMut(&AblationRun)) -> Result<AblationReport> {
    let mut runs = Vec::new();
    for &seed in &grid.seeds {
        let mut teachers: HashMap<usize, (Params<f64>, f64)> = HashMap::new();
        let mut done: HashMap<String, (f64, f64)> = HashMap::new();
        for (axis, value, cfg) in variants(grid, seed) {
            cfg.validate()?;
            let key = serde_json::to_string(&cfg)?;
            let (teacher_ndcg, ndcg) = match done.get(&key) {
                Some(&r) => r,
                None => {
                    let data = gen_dataset(cfg.data_seed, cfg.dataset_size);
                    let eval = gen_eval_set(cfg.eval_seed, cfg.eval_queries);
                    if !teachers.contains_key(&cfg.dataset_size) {
                        let t = train_stage2_teacher(&cfg, &data, &mut |_| {})?;
                        let n = eval_fulltext(&t, &eval)?;
                        teachers.insert(cfg.dataset_size, (t, n));
                    }
                    let (teacher, teacher_ndcg) = &teachers[&cfg.dataset_size];
                    let joint = train_stage3_joint(&cfg, &data, Some(teacher), &mut |_| {})?;
                    let r = (*teacher_ndcg, eval_mixed(&joint.ranker, &joint.encoder, &eval, cfg.t_s)?);
                    done.insert(key, r);
                    r
                }
            };
            let run = AblationRun {
                axis,
                value,
                seed,
                teacher_ndcg,
                ndcg,
            };
            progress(&run);
            runs.push(run);
        }
    }
    Ok(summarize(runs))
}

/// Groups runs into mean/sd rows and evaluates the trend checks.
pub fn summarize(runs: Vec<AblationRun>) -> AblationReport {
    let mut rows: Vec<AblationRow> = Vec::new();
    for r in &runs {
        match rows.iter_mut().find(|x| x.axis == r.axis && x.value == r.value) {
            Some(row) => {
                row.seeds.push(r.seed);
                row.ndcg.push(r.ndcg);
            }
            None => rows.push(AblationRow {
                axis: r.axis,
                value: r.value.clone(),
                seeds: vec![r.seed],
                ndcg: vec![r.ndcg],
                mean: 0.0,
                sd: 0.0,
            }),
        }
    }
    for row in &mut rows {
        (row.mean, row.sd) = mean_sd(&row.ndcg);
    }
    let trends = trend_checks(&rows);
    AblationReport { runs, rows, trends }
}

fn mean_of(rows: &[AblationRow], axis: Axis, value: &str) -> Option<f64> {
    rows.iter().find(|r| r.axis == axis && r.value == value).map(|r| r.mean)
}

fn at_least(name: &str, a: (&str, Option<f64>), b: (&str, Option<f64>), slack: f64) -> Option<TrendCheck> {
    let (x, y) = (a.1?, b.1?);
    Some(TrendCheck {
        name: name.into(),
        holds: x >= y - slack,
        detail: format!("{} {x:.4} vs {} {y:.4}", a.0, b.0),
    })
}

pub fn trend_checks(rows: &[AblationRow]) -> Vec<TrendCheck> {
    let mut out = Vec::new();
    out.extend(at_least(
        "distill+align >= sft only",
        ("distill+align", mean_of(rows, Axis::Losses, LossSet::ALL.label())),
        ("sft only", mean_of(rows, Axis::Losses, LossSet::SFT_ONLY.label())),
        0.0,
    ));
    let mut ts: Vec<(usize, f64)> = rows
        .iter()
        .filter(|r| r.axis == Axis::TS)
        .filter_map(|r| r.value.parse().ok().map(|t| (t, r.mean)))
        .collect();
    ts.sort_by_key(|x| x.0);
    if ts.len() >= 2 {
        let worst = ts.windows(2).map(|w| w[1].1 - w[0].1).fold(f64::INFINITY, f64::min);
        out.push(TrendCheck {
            name: format!("t_s non-decreasing within {TS_NOISE}"),
            holds: worst >= -TS_NOISE,
            detail: ts.iter().map(|(t, m)| format!("{t}:{m:.4}")).collect::<Vec<_>>().join(" "),
        });
    }
    out.extend(at_least(
        "two-phase >= no curriculum",
        ("two_phase", mean_of(rows, Axis::Curriculum, "two_phase")),
        ("none", mean_of(rows, Axis::Curriculum, "none")),
        0.0,
    ));
    let mut sizes: Vec<(usize, f64)> = rows
        .iter()
        .filter(|r| r.axis == Axis::DatasetSize)
        .filter_map(|r| r.value.parse().ok().map(|n| (n, r.mean)))
        .collect();
    sizes.sort_by_key(|x| x.0);
    if let (Some(small), Some(large)) = (sizes.first(), sizes.last()) {
        if small.0 != large.0 {
            out.push(TrendCheck {
                name: "larger dataset >= smaller - 0.01".into(),
                holds: large.1 >= small.1 - 0.01,
                detail: format!("{}:{:.4} {}:{:.4}", small.0, small.1, large.0, large.1),
            });
        }
    }
    out
}

pub fn report_table(report: &AblationReport) -> String {
    let mut s = format!("{:<13} {:<15} {:>16} {:>5}\n", "axis", "value", "ndcg@10", "n");
    for r in &report.rows {
        let axis = serde_json::to_value(r.axis).ok().and_then(|v| v.as_str().map(String::from)).unwrap_or_default();
        s += &format!(
            "{:<13} {:<15} {:>9.4} ± {:.4} {:>5}\n",
            axis,
            r.value,
            r.mean,
            r.sd,
            r.ndcg.len()
        );
    }
    for t in &report.trends {
        s += &format!("[{}] {}: {}\n", if t.holds { "ok" } else { "FAIL" }, t.name, t.detail);
    }
    s
}
