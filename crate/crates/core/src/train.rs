//! Teacher SFT and joint encoder/ranker training loops, plus held-out
//! evaluation.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Graph;
use crate::data::{EvalQuery, Example};
use crate::error::{Error, Result};
use crate::losses::{total_loss_var, CurriculumSchedule, LossInputs, LossTerms, LossWeights, Phase};
use crate::metrics::{mean_sd, ndcg_for_scores};
use crate::mix::{fulltext_batch, mixed_batch, VOCAB_SIZE};
use crate::model::{HeadMode, ModelConfig, ParamVars, Params};
use crate::optim::{AdamW, OptimConfig};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Curriculum {
    /// Task-phase weights for the whole run.
    None,
    TwoPhase { align_fraction: f64 },
    ThreePhase { align_fraction: f64 },
    Custom { phases: Vec<Phase> },
}

/// Which auxiliary terms are switched on; SFT is always on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LossSet {
    pub distill: bool,
    pub align: bool,
}

impl LossSet {
    pub const ALL: LossSet = LossSet {
        distill: true,
        align: true,
    };
    pub const SFT_ONLY: LossSet = LossSet {
        distill: false,
        align: false,
    };
    pub const ALL_COMBINATIONS: [LossSet; 4] = [
        LossSet::SFT_ONLY,
        LossSet {
            distill: true,
            align: false,
        },
        LossSet {
            distill: false,
            align: true,
        },
        LossSet::ALL,
    ];

    pub fn label(&self) -> &'static str {
        match (self.distill, self.align) {
            (false, false) => "sft",
            (true, false) => "sft+distill",
            (false, true) => "sft+align",
            (true, true) => "sft+distill+align",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RankerInit {
    /// Same initialization the teacher started from.
    Seed,
    /// Copy of the trained teacher.
    Teacher,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub data_seed: u64,
    pub dataset_size: usize,
    pub eval_seed: u64,
    pub eval_queries: usize,
    pub init_seed: u64,
    pub batch_size: usize,
    pub teacher_optim: OptimConfig,
    pub joint_optim: OptimConfig,
    pub t_s: usize,
    pub curriculum: Curriculum,
    pub losses: LossSet,
    pub ranker_init: RankerInit,
}

impl TrainConfig {
    pub fn desk(seed: u64) -> Self {
        Self {
            model: ModelConfig::desk(HeadMode::Binary),
            data_seed: seed,
            dataset_size: 20_000,
            eval_seed: seed.wrapping_add(1_000),
            eval_queries: 200,
            init_seed: seed.wrapping_add(2_000),
            batch_size: 32,
            teacher_optim: OptimConfig::with_steps(300, 3e-3),
            joint_optim: OptimConfig::with_steps(300, 5e-4),
            t_s: 1,
            curriculum: Curriculum::TwoPhase { align_fraction: 0.3 },
            losses: LossSet::ALL,
            ranker_init: RankerInit::Teacher,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        if self.model.head_mode != HeadMode::Binary {
            return Err(Error::Input("ranker model needs the binary head".into()));
        }
        if self.model.vocab_size < VOCAB_SIZE {
            return Err(Error::Input(format!("vocab_size must be at least {VOCAB_SIZE}")));
        }
        if self.batch_size == 0 || self.dataset_size == 0 {
            return Err(Error::Input("batch_size and dataset_size must be positive".into()));
        }
        if self.t_s == 0 {
            return Err(Error::Input("t_s must be positive".into()));
        }
        Ok(())
    }

    pub fn encoder_config(&self) -> ModelConfig {
        ModelConfig {
            head_mode: HeadMode::None,
            ..self.model.clone()
        }
    }

    /// The joint-stage schedule with disabled loss terms zeroed.
    pub fn schedule(&self) -> Result<CurriculumSchedule> {
        let total = self.joint_optim.total_steps;
        let base = match &self.curriculum {
            Curriculum::None => CurriculumSchedule::constant(total, LossWeights::TASK_PHASE)?,
            Curriculum::TwoPhase { align_fraction } => CurriculumSchedule::two_phase(total, *align_fraction)?,
            Curriculum::ThreePhase { align_fraction } => CurriculumSchedule::three_phase(total, *align_fraction)?,
            Curriculum::Custom { phases } => CurriculumSchedule::new(phases.clone())?,
        };
        if base.total_steps() != total {
            return Err(Error::Input(format!(
                "curriculum covers {} steps, optimizer {total}",
                base.total_steps()
            )));
        }
        let phases = base
            .phases
            .into_iter()
            .map(|p| Phase {
                steps: p.steps,
                weights: LossWeights {
                    lambda_distill: if self.losses.distill { p.weights.lambda_distill } else { 0.0 },
                    lambda_align: if self.losses.align { p.weights.lambda_align } else { 0.0 },
                    ..p.weights
                },
            })
            .collect();
        CurriculumSchedule::new(phases)
    }
}

/// One line of the metrics log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub stage: String,
    pub step: usize,
    pub lr: f64,
    pub sft: f64,
    pub distill: f64,
    pub pred_align: f64,
    pub hidden_align: f64,
    pub total: f64,
}

/// Shuffled epochs over example indices.
struct Batcher {
    rng: ChaCha8Rng,
    order: Vec<usize>,
    at: usize,
}

impl Batcher {
    fn new(n: usize, seed: u64) -> Self {
        let mut b = Self {
            rng: ChaCha8Rng::seed_from_u64(seed),
            order: (0..n).collect(),
            at: n,
        };
        b.reshuffle();
        b
    }

    fn reshuffle(&mut self) {
        self.order.shuffle(&mut self.rng);
        self.at = 0;
    }

    fn next(&mut self, size: usize) -> Vec<usize> {
        let size = size.min(self.order.len());
        if self.at + size > self.order.len() {
            self.reshuffle();
        }
        let out = self.order[self.at..self.at + size].to_vec();
        self.at += size;
        out
    }
}

fn training_error(step: usize, e: Error) -> Error {
    match e {
        Error::NonFinite { op } => Error::Training {
            step,
            detail: format!("non-finite value in {op}; lower the learning rate or enable clipping"),
        },
        Error::Training { detail, .. } => Error::Training { step, detail },
        other => other,
    }
}

fn dist_tensor(rows: impl Iterator<Item = [f64; 2]>) -> Tensor<f64> {
    let data: Vec<f64> = rows.flatten().collect();
    let n = data.len() / 2;
    Tensor::new(vec![n, 2], data).expect("two columns")
}

fn grads_of(g: &Graph<f64>, pv: &ParamVars) -> Vec<Tensor<f64>> {
    pv.all()
        .into_iter()
        .map(|v| g.grad(v).cloned().unwrap_or_else(|| Tensor::zeros(g.value(v).shape())))
        .collect()
}

fn check_loss(step: usize, terms: &LossTerms, total: f64) -> Result<()> {
    if !total.is_finite() {
        return Err(Error::Training {
            step,
            detail: format!("loss diverged: total {total}, terms {terms:?}"),
        });
    }
    Ok(())
}

/// Stage II: full-text SFT of the teacher against `p*`.
pub fn train_stage2_teacher(
    cfg: &TrainConfig,
    data: &[Example],
    log: &mut dyn FnMut(&StepRecord),
) -> Result<Params<f64>> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::Input("empty training set".into()));
    }
    let mut params = Params::<f64>::init(&cfg.model, cfg.init_seed)?;
    let mut opt = AdamW::new(cfg.teacher_optim.clone());
    let mut batches = Batcher::new(data.len(), cfg.data_seed ^ 0x5eed_7eac);
    for step in 0..cfg.teacher_optim.total_steps {
        let idx = batches.next(cfg.batch_size);
        let mut g = Graph::new();
        let pv = params.register(&mut g, true);
        let pairs: Vec<(&[u32], &[u32])> = idx
            .iter()
            .map(|&i| (data[i].q_tokens.as_slice(), data[i].item_tokens.as_slice()))
            .collect();
        let run = |g: &mut Graph<f64>| -> Result<_> {
            let out = fulltext_batch(&cfg.model, &pv, g, &pairs)?;
            let p_star = g.constant(dist_tensor(idx.iter().map(|&i| data[i].p_star().as_array())));
            let inputs = LossInputs {
                pred: out.probs,
                p_star,
                p_hat: None,
                p_bar: None,
                h_last: None,
                h_bar_last: None,
            };
            let lv = total_loss_var(g, &inputs, &LossWeights::SFT_ONLY)?;
            g.backward(lv.total)?;
            Ok(lv)
        };
        let lv = run(&mut g).map_err(|e| training_error(step, e))?;
        let terms = lv.values(&g);
        let total = g.value(lv.total).item();
        check_loss(step, &terms, total)?;
        let grads = grads_of(&g, &pv);
        let lr = opt
            .step(&mut params.tensors_mut(), &grads)
            .map_err(|e| training_error(step, e))?;
        log(&StepRecord {
            stage: "teacher".into(),
            step,
            lr,
            sft: terms.sft,
            distill: 0.0,
            pred_align: 0.0,
            hidden_align: 0.0,
            total,
        });
    }
    Ok(params)
}

const EVAL_CHUNK: usize = 64;

/// Teacher `(p_yes, p_no)` for every example, computed once.
pub fn teacher_targets(teacher: &Params<f64>, data: &[Example]) -> Result<Vec<[f64; 2]>> {
    let pairs: Vec<(&[u32], &[u32])> = data
        .iter()
        .map(|e| (e.q_tokens.as_slice(), e.item_tokens.as_slice()))
        .collect();
    fulltext_probs(teacher, &pairs)
}

/// Full-text `(p_yes, p_no)` for many pairs without gradients.
pub fn fulltext_probs(ranker: &Params<f64>, pairs: &[(&[u32], &[u32])]) -> Result<Vec<[f64; 2]>> {
    let mut out = Vec::with_capacity(pairs.len());
    for chunk in pairs.chunks(EVAL_CHUNK) {
        let mut g = Graph::new();
        let pv = ranker.register(&mut g, false);
        let b = fulltext_batch(&ranker.config, &pv, &mut g, chunk)?;
        let t = g.value(b.probs);
        out.extend((0..t.rows()).map(|r| [t.row(r)[0], t.row(r)[1]]));
    }
    Ok(out)
}

/// Mixed-prompt `(p_yes, p_no)` for many pairs without gradients.
pub fn mixed_probs(
    ranker: &Params<f64>,
    encoder: &Params<f64>,
    pairs: &[(&[u32], &[u32])],
    t_s: usize,
) -> Result<Vec<[f64; 2]>> {
    let mut out = Vec::with_capacity(pairs.len());
    for chunk in pairs.chunks(EVAL_CHUNK) {
        let mut g = Graph::new();
        let rv = ranker.register(&mut g, false);
        let ev = encoder.register(&mut g, false);
        let b = mixed_batch(&ranker.config, &rv, &encoder.config, &ev, &mut g, chunk, t_s)?;
        let t = g.value(b.probs);
        out.extend((0..t.rows()).map(|r| [t.row(r)[0], t.row(r)[1]]));
    }
    Ok(out)
}

fn eval_pairs(eval: &[EvalQuery]) -> Vec<(&[u32], &[u32])> {
    eval.iter()
        .flat_map(|q| q.items.iter().map(move |j| (q.q_tokens.as_slice(), j.as_slice())))
        .collect()
}

fn ndcg_from_probs(eval: &[EvalQuery], probs: &[[f64; 2]]) -> Result<f64> {
    let mut at = 0;
    let mut vals = Vec::with_capacity(eval.len());
    for q in eval {
        let scores: Vec<f64> = probs[at..at + q.items.len()].iter().map(|p| p[0]).collect();
        at += q.items.len();
        vals.push(ndcg_for_scores(&q.grades, &scores)?);
    }
    Ok(mean_sd(&vals).0)
}

/// Mean NDCG@10 of the full-text ranker over held-out queries.
pub fn eval_fulltext(ranker: &Params<f64>, eval: &[EvalQuery]) -> Result<f64> {
    ndcg_from_probs(eval, &fulltext_probs(ranker, &eval_pairs(eval))?)
}

/// Mean NDCG@10 of the mixed-input model over held-out queries.
pub fn eval_mixed(ranker: &Params<f64>, encoder: &Params<f64>, eval: &[EvalQuery], t_s: usize) -> Result<f64> {
    ndcg_from_probs(eval, &mixed_probs(ranker, encoder, &eval_pairs(eval), t_s)?)
}

/// Trained Stage III models.
#[derive(Debug, Clone)]
pub struct JointModels {
    pub ranker: Params<f64>,
    pub encoder: Params<f64>,
}

/// Stage III: trains ranker and encoder on mixed prompts under the
/// configured curriculum. `teacher` is required when any phase distills.
pub fn train_stage3_joint(
    cfg: &TrainConfig,
    data: &[Example],
    teacher: Option<&Params<f64>>,
    log: &mut dyn FnMut(&StepRecord),
) -> Result<JointModels> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::Input("empty training set".into()));
    }
    let schedule = cfg.schedule()?;
    let p_hat = match (schedule.needs_teacher(), teacher) {
        (true, Some(t)) => Some(teacher_targets(t, data)?),
        (true, None) => return Err(Error::Contract("distillation scheduled without a teacher".into())),
        (false, _) => None,
    };
    let mut ranker = match (cfg.ranker_init, teacher) {
        (RankerInit::Teacher, Some(t)) => t.clone(),
        (RankerInit::Teacher, None) => return Err(Error::Contract("ranker_init=teacher without a teacher".into())),
        (RankerInit::Seed, _) => Params::init(&cfg.model, cfg.init_seed)?,
    };
    let enc_cfg = cfg.encoder_config();
    let mut encoder = Params::<f64>::init(&enc_cfg, cfg.init_seed.wrapping_add(1))?;
    let mut opt = AdamW::new(cfg.joint_optim.clone());
    let mut batches = Batcher::new(data.len(), cfg.data_seed ^ 0x5eed_3011);

    for step in 0..cfg.joint_optim.total_steps {
        let weights = schedule.weights_at(step)?;
        let idx = batches.next(cfg.batch_size);
        let pairs: Vec<(&[u32], &[u32])> = idx
            .iter()
            .map(|&i| (data[i].q_tokens.as_slice(), data[i].item_tokens.as_slice()))
            .collect();
        let mut g = Graph::new();
        let rv = ranker.register(&mut g, true);
        let ev = encoder.register(&mut g, true);
        let run = |g: &mut Graph<f64>| -> Result<_> {
            let mixed = mixed_batch(&cfg.model, &rv, &enc_cfg, &ev, g, &pairs, cfg.t_s)?;
            let p_star = g.constant(dist_tensor(idx.iter().map(|&i| data[i].p_star().as_array())));
            let p_hat_var = match (&p_hat, weights.lambda_distill > 0.0) {
                (Some(ph), true) => Some(g.constant(dist_tensor(idx.iter().map(|&i| ph[i])))),
                _ => None,
            };
            let full = if weights.needs_alignment() {
                Some(fulltext_batch(&cfg.model, &rv, g, &pairs)?)
            } else {
                None
            };
            let inputs = LossInputs {
                pred: mixed.probs,
                p_star,
                p_hat: p_hat_var,
                p_bar: full.map(|f| f.probs),
                h_last: Some(mixed.h_last),
                h_bar_last: full.map(|f| f.h_last),
            };
            let lv = total_loss_var(g, &inputs, &weights)?;
            g.backward(lv.total)?;
            Ok(lv)
        };
        let lv = run(&mut g).map_err(|e| training_error(step, e))?;
        let terms = lv.values(&g);
        let total = g.value(lv.total).item();
        check_loss(step, &terms, total)?;
        let mut grads = grads_of(&g, &rv);
        grads.extend(grads_of(&g, &ev));
        let mut tensors = ranker.tensors_mut();
        tensors.extend(encoder.tensors_mut());
        let lr = opt.step(&mut tensors, &grads).map_err(|e| training_error(step, e))?;
        log(&StepRecord {
            stage: "joint".into(),
            step,
            lr,
            sft: terms.sft,
            distill: terms.distill,
            pred_align: terms.pred_align,
            hidden_align: terms.hidden_align,
            total,
        });
    }
    Ok(JointModels { ranker, encoder })
}

/// Hidden-alignment loss `1 - cos(h_last, h_bar_last)` averaged over pairs,
/// measured outside training.
pub fn hidden_alignment(
    ranker: &Params<f64>,
    encoder: &Params<f64>,
    pairs: &[(&[u32], &[u32])],
    t_s: usize,
) -> Result<f64> {
    let mut g = Graph::new();
    let rv = ranker.register(&mut g, false);
    let ev = encoder.register(&mut g, false);
    let m = mixed_batch(&ranker.config, &rv, &encoder.config, &ev, &mut g, pairs, t_s)?;
    let f = fulltext_batch(&ranker.config, &rv, &mut g, pairs)?;
    let cos = g.cos_rows(m.h_last, f.h_last)?;
    let mean = g.mean(cos)?;
    Ok(1.0 - g.value(mean).item())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::gen_dataset;

    fn tiny(steps: usize) -> TrainConfig {
        TrainConfig {
            batch_size: 4,
            teacher_optim: OptimConfig::with_steps(steps, 3e-3),
            joint_optim: OptimConfig::with_steps(steps, 3e-3),
            ..TrainConfig::desk(1)
        }
    }

    #[test]
    fn batcher_covers_each_epoch() {
        let mut b = Batcher::new(10, 3);
        let mut seen: Vec<usize> = (0..5).flat_map(|_| b.next(2)).collect();
        seen.sort();
        assert_eq!(seen, (0..10).collect::<Vec<_>>());
    }

    #[test]
    fn schedule_masks_disabled_terms() {
        let cfg = TrainConfig {
            losses: LossSet::SFT_ONLY,
            ..tiny(10)
        };
        let s = cfg.schedule().unwrap();
        assert!(!s.needs_alignment() && !s.needs_teacher());
        assert_eq!(s.total_steps(), 10);
    }

    #[test]
    fn joint_requires_teacher_when_distilling() {
        let data = gen_dataset(1, 8);
        let r = train_stage3_joint(&tiny(2), &data, None, &mut |_| {});
        assert!(matches!(r, Err(Error::Contract(_))));
    }

    #[test]
    fn joint_step_logs_every_term() {
        let data = gen_dataset(1, 8);
        let teacher = Params::init(&tiny(2).model, 5).unwrap();
        let mut recs = Vec::new();
        train_stage3_joint(&tiny(2), &data, Some(&teacher), &mut |r| recs.push(r.clone())).unwrap();
        assert_eq!(recs.len(), 2);
        assert!(recs[0].distill > 0.0 && recs[0].hidden_align > 0.0 && recs[0].pred_align > 0.0);
    }
}
