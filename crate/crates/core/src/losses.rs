//! Training objectives for the full-text teacher and the joint
//! encoder/ranker model, plus the phased loss-weight schedule.
//!
//! Every KL term is `KL(target || prediction)`. Probabilities are clamped at
//! [`PROB_FLOOR`] before the logarithm so hard labels stay finite.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var, PROB_FLOOR};
use crate::error::{Error, Result};
use crate::model::ScoreDistribution;
use crate::scalar::Scalar;

/// Ground truth, frozen-teacher and self-ranker full-text distributions for
/// one example.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Targets {
    pub p_star: ScoreDistribution,
    pub p_hat: ScoreDistribution,
    pub p_bar: ScoreDistribution,
}

/// Last-token hidden states from the mixed prompt and the full-text prompt.
#[derive(Debug, Clone, PartialEq)]
pub struct AlignmentState {
    pub h_last: Vec<f64>,
    pub h_bar_last: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub alpha: f64,
    pub beta: f64,
    pub lambda_distill: f64,
    pub lambda_align: f64,
}

impl LossWeights {
    pub const SFT_ONLY: LossWeights = LossWeights {
        alpha: 0.5,
        beta: 0.5,
        lambda_distill: 0.0,
        lambda_align: 0.0,
    };

    /// Alignment-heavy first phase of the default curriculum.
    pub const ALIGN_PHASE: LossWeights = LossWeights {
        alpha: 0.5,
        beta: 0.5,
        lambda_distill: 0.1,
        lambda_align: 1.0,
    };

    /// Task-focused phase; also the constant weights of the no-curriculum run.
    pub const TASK_PHASE: LossWeights = LossWeights {
        alpha: 0.5,
        beta: 0.5,
        lambda_distill: 1.0,
        lambda_align: 0.1,
    };

    /// Middle phase of the three-phase schedule: equal weight on every term.
    pub const BALANCED_PHASE: LossWeights = LossWeights {
        alpha: 0.5,
        beta: 0.5,
        lambda_distill: 1.0,
        lambda_align: 1.0,
    };

    pub fn validate(&self) -> Result<()> {
        let all = [self.alpha, self.beta, self.lambda_distill, self.lambda_align];
        if all.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(Error::Input(format!("loss weights must be finite and non-negative: {self:?}")));
        }
        Ok(())
    }

    pub fn needs_alignment(&self) -> bool {
        self.lambda_align > 0.0 && (self.alpha > 0.0 || self.beta > 0.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Phase {
    pub steps: usize,
    pub weights: LossWeights,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurriculumSchedule {
    pub phases: Vec<Phase>,
}

impl CurriculumSchedule {
    pub fn new(phases: Vec<Phase>) -> Result<Self> {
        if phases.is_empty() {
            return Err(Error::Input("curriculum needs at least one phase".into()));
        }
        for p in &phases {
            if p.steps == 0 {
                return Err(Error::Input("curriculum phase with zero steps".into()));
            }
            p.weights.validate()?;
        }
        Ok(Self { phases })
    }

    pub fn constant(steps: usize, weights: LossWeights) -> Result<Self> {
        Self::new(vec![Phase { steps, weights }])
    }

    /// Alignment phase for `align_fraction` of the run, then the task phase.
    pub fn two_phase(total: usize, align_fraction: f64) -> Result<Self> {
        let first = ((total as f64 * align_fraction).round() as usize).clamp(1, total.saturating_sub(1).max(1));
        Self::new(vec![
            Phase {
                steps: first,
                weights: LossWeights::ALIGN_PHASE,
            },
            Phase {
                steps: total - first,
                weights: LossWeights::TASK_PHASE,
            },
        ])
    }

    /// Alignment, balanced, task; the first two phases take `align_fraction`
    /// of the run each.
    pub fn three_phase(total: usize, align_fraction: f64) -> Result<Self> {
        let a = ((total as f64 * align_fraction).round() as usize).max(1);
        let b = a;
        if a + b >= total {
            return Err(Error::Input(format!("three-phase schedule does not fit {total} steps")));
        }
        Self::new(vec![
            Phase {
                steps: a,
                weights: LossWeights::ALIGN_PHASE,
            },
            Phase {
                steps: b,
                weights: LossWeights::BALANCED_PHASE,
            },
            Phase {
                steps: total - a - b,
                weights: LossWeights::TASK_PHASE,
            },
        ])
    }

    pub fn total_steps(&self) -> usize {
        self.phases.iter().map(|p| p.steps).sum()
    }

    pub fn weights_at(&self, step: usize) -> Result<LossWeights> {
        let mut end = 0;
        for p in &self.phases {
            end += p.steps;
            if step < end {
                return Ok(p.weights);
            }
        }
        Err(Error::Input(format!("step {step} beyond schedule of {end} steps")))
    }

    /// True if any phase turns on the alignment terms.
    pub fn needs_alignment(&self) -> bool {
        self.phases.iter().any(|p| p.weights.needs_alignment())
    }

    pub fn needs_teacher(&self) -> bool {
        self.phases.iter().any(|p| p.weights.lambda_distill > 0.0)
    }
}

fn check_dist(p: &[f64]) -> Result<()> {
    let s: f64 = p.iter().sum();
    if p.is_empty() || p.iter().any(|v| !(0.0..=1.0).contains(v)) || (s - 1.0).abs() > 1e-9 {
        return Err(Error::Input(format!("invalid distribution {p:?}")));
    }
    Ok(())
}

/// `sum p_i ln(p_i / q_i)`, `0 ln 0 = 0`, `q` clamped at [`PROB_FLOOR`].
pub fn kl(p: &[f64], q: &[f64]) -> Result<f64> {
    if p.len() != q.len() {
        return Err(Error::Input("distributions of different support".into()));
    }
    check_dist(p)?;
    check_dist(q)?;
    Ok(p.iter()
        .zip(q)
        .filter(|(pi, _)| **pi > 0.0)
        .map(|(pi, qi)| pi * (pi.ln() - qi.max(PROB_FLOOR).ln()))
        .sum())
}

pub fn loss_sft(pred: &ScoreDistribution, targets: &Targets) -> Result<f64> {
    kl(&targets.p_star.as_array(), &pred.as_array())
}

pub fn loss_distill(pred: &ScoreDistribution, targets: &Targets) -> Result<f64> {
    kl(&targets.p_hat.as_array(), &pred.as_array())
}

pub fn cosine(a: &[f64], b: &[f64]) -> Result<f64> {
    let na = a.iter().map(|v| v * v).sum::<f64>().sqrt();
    let nb = b.iter().map(|v| v * v).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return Err(Error::Numeric("cosine similarity of a zero-norm vector".into()));
    }
    Ok(a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>() / (na * nb))
}

/// `alpha * KL(p_bar || pred) + beta * (1 - cos(h_last, h_bar_last))`.
pub fn loss_align(
    state: &AlignmentState,
    p_bar: &ScoreDistribution,
    pred: &ScoreDistribution,
    weights: &LossWeights,
) -> Result<f64> {
    let pred_align = kl(&p_bar.as_array(), &pred.as_array())?;
    let hidden_align = 1.0 - cosine(&state.h_last, &state.h_bar_last)?;
    Ok(weights.alpha * pred_align + weights.beta * hidden_align)
}

/// Component values of one evaluation of the objective.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossTerms {
    pub sft: f64,
    pub distill: f64,
    pub pred_align: f64,
    pub hidden_align: f64,
}

impl LossTerms {
    pub fn align(&self, w: &LossWeights) -> f64 {
        w.alpha * self.pred_align + w.beta * self.hidden_align
    }
}

/// `L_sft + lambda_distill * L_distill + lambda_align * L_align`.
pub fn loss_total(terms: &LossTerms, weights: &LossWeights) -> f64 {
    terms.sft + weights.lambda_distill * terms.distill + weights.lambda_align * terms.align(weights)
}

/// Batch-mean loss terms on the tape. Absent terms were not requested.
#[derive(Debug, Clone, Copy)]
pub struct LossVars {
    pub sft: Var,
    pub distill: Option<Var>,
    pub pred_align: Option<Var>,
    pub hidden_align: Option<Var>,
    pub total: Var,
}

impl LossVars {
    pub fn values<T: Scalar>(&self, g: &Graph<T>) -> LossTerms {
        let v = |x: Option<Var>| x.map_or(0.0, |x| g.value(x).item().as_f64());
        LossTerms {
            sft: g.value(self.sft).item().as_f64(),
            distill: v(self.distill),
            pred_align: v(self.pred_align),
            hidden_align: v(self.hidden_align),
        }
    }
}

/// Inputs to [`total_loss_var`]; all distributions are `B x 2` and hidden
/// states `B x H`.
#[derive(Debug, Clone, Copy)]
pub struct LossInputs {
    pub pred: Var,
    pub p_star: Var,
    pub p_hat: Option<Var>,
    pub p_bar: Option<Var>,
    pub h_last: Option<Var>,
    pub h_bar_last: Option<Var>,
}

/// Assembles the weighted objective. Terms whose weight is zero are left off
/// the tape; the distillation and alignment terms need their inputs present
/// whenever their weight is positive.
pub fn total_loss_var<T: Scalar>(g: &mut Graph<T>, inputs: &LossInputs, weights: &LossWeights) -> Result<LossVars> {
    weights.validate()?;
    let sft_rows = g.kl_rows(inputs.p_star, inputs.pred)?;
    let sft = g.mean(sft_rows)?;
    let mut total = sft;

    let mut distill = None;
    if weights.lambda_distill > 0.0 {
        let p_hat = inputs
            .p_hat
            .ok_or_else(|| Error::Contract("distillation weight set without teacher targets".into()))?;
        let rows = g.kl_rows(p_hat, inputs.pred)?;
        let d = g.mean(rows)?;
        let scaled = g.scale(d, T::lit(weights.lambda_distill))?;
        total = g.add(total, scaled)?;
        distill = Some(d);
    }

    let (mut pred_align, mut hidden_align) = (None, None);
    if weights.needs_alignment() {
        let mut align_terms = Vec::new();
        if weights.alpha > 0.0 {
            let p_bar = inputs
                .p_bar
                .ok_or_else(|| Error::Contract("alignment weight set without full-text predictions".into()))?;
            let rows = g.kl_rows(p_bar, inputs.pred)?;
            let pa = g.mean(rows)?;
            align_terms.push(g.scale(pa, T::lit(weights.alpha * weights.lambda_align))?);
            pred_align = Some(pa);
        }
        if weights.beta > 0.0 {
            let (h, hb) = inputs
                .h_last
                .zip(inputs.h_bar_last)
                .ok_or_else(|| Error::Contract("alignment weight set without hidden states".into()))?;
            let cos = g.cos_rows(h, hb)?;
            let mean_cos = g.mean(cos)?;
            let neg = g.scale(mean_cos, -T::one())?;
            let ha = g.add_scalar(neg, T::one())?;
            align_terms.push(g.scale(ha, T::lit(weights.beta * weights.lambda_align))?);
            hidden_align = Some(ha);
        }
        for t in align_terms {
            total = g.add(total, t)?;
        }
    }
    Ok(LossVars {
        sft,
        distill,
        pred_align,
        hidden_align,
        total,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn d(p: f64) -> ScoreDistribution {
        ScoreDistribution::new(p)
    }

    fn targets(star: f64, hat: f64, bar: f64) -> Targets {
        Targets {
            p_star: d(star),
            p_hat: d(hat),
            p_bar: d(bar),
        }
    }

    #[test]
    fn kl_examples() {
        assert_eq!(kl(&[0.3, 0.7], &[0.3, 0.7]).unwrap(), 0.0);
        assert!((kl(&[1.0, 0.0], &[0.5, 0.5]).unwrap() - 2f64.ln()).abs() < 1e-15);
        let expect = 0.75 * 1.5f64.ln() + 0.25 * 0.5f64.ln();
        assert!((kl(&[0.75, 0.25], &[0.5, 0.5]).unwrap() - expect).abs() < 1e-15);
        assert!((expect - 0.130812).abs() < 1e-6);
    }

    #[test]
    fn kl_rejects_invalid() {
        assert!(matches!(kl(&[0.6, 0.6], &[0.5, 0.5]), Err(Error::Input(_))));
        assert!(matches!(kl(&[1.0], &[0.5, 0.5]), Err(Error::Input(_))));
    }

    #[test]
    fn kl_hard_label_stays_finite() {
        let v = kl(&[1.0, 0.0], &[0.0, 1.0]).unwrap();
        assert!((v - (-PROB_FLOOR.ln())).abs() < 1e-9);
    }

    #[test]
    fn sft_and_distill() {
        let t = targets(1.0, 0.9, 0.5);
        assert_eq!(loss_sft(&d(1.0), &t).unwrap(), 0.0);
        assert!((loss_sft(&d(0.5), &t).unwrap() - 2f64.ln()).abs() < 1e-15);
        assert!(loss_distill(&d(0.9), &t).unwrap().abs() < 1e-15);
        let expect = 0.9 * 1.8f64.ln() + 0.1 * 0.2f64.ln();
        assert!((loss_distill(&d(0.5), &t).unwrap() - expect).abs() < 1e-15);
        assert!((expect - 0.368064).abs() < 1e-6);
    }

    #[test]
    fn align_examples() {
        let w = LossWeights {
            alpha: 0.5,
            beta: 1.0,
            ..LossWeights::SFT_ONLY
        };
        let same = AlignmentState {
            h_last: vec![1.0, 2.0],
            h_bar_last: vec![1.0, 2.0],
        };
        assert!(loss_align(&same, &d(0.3), &d(0.3), &w).unwrap().abs() < 1e-15);
        let anti = AlignmentState {
            h_last: vec![1.0, -2.0],
            h_bar_last: vec![-1.0, 2.0],
        };
        assert!((loss_align(&anti, &d(0.3), &d(0.3), &w).unwrap() - 2.0).abs() < 1e-15);
        let orth = AlignmentState {
            h_last: vec![1.0, 0.0],
            h_bar_last: vec![0.0, 3.0],
        };
        let w0 = LossWeights { alpha: 0.0, ..w };
        assert_eq!(loss_align(&orth, &d(0.9), &d(0.1), &w0).unwrap(), 1.0);
        let zero = AlignmentState {
            h_last: vec![0.0, 0.0],
            h_bar_last: vec![1.0, 0.0],
        };
        assert!(matches!(loss_align(&zero, &d(0.5), &d(0.5), &w), Err(Error::Numeric(_))));
    }

    #[test]
    fn total_reductions() {
        let terms = LossTerms {
            sft: 0.4,
            distill: 0.3,
            pred_align: 0.2,
            hidden_align: 0.1,
        };
        assert_eq!(loss_total(&terms, &LossWeights::SFT_ONLY), 0.4);
        assert_eq!(loss_total(&LossTerms::default(), &LossWeights::TASK_PHASE), 0.0);
        let w1 = LossWeights::TASK_PHASE;
        let w2 = LossWeights {
            lambda_distill: 2.0 * w1.lambda_distill,
            ..w1
        };
        let base = loss_total(&terms, &LossWeights { lambda_distill: 0.0, ..w1 });
        let c1 = loss_total(&terms, &w1) - base;
        let c2 = loss_total(&terms, &w2) - base;
        assert!((c2 - 2.0 * c1).abs() < 1e-15);
    }

    #[test]
    fn schedule_lookup() {
        let s = CurriculumSchedule::constant(10, LossWeights::TASK_PHASE).unwrap();
        for step in 0..10 {
            assert_eq!(s.weights_at(step).unwrap(), LossWeights::TASK_PHASE);
        }
        assert!(matches!(s.weights_at(10), Err(Error::Input(_))));

        let two = CurriculumSchedule::two_phase(200, 0.5).unwrap();
        assert_eq!(two.weights_at(99).unwrap(), LossWeights::ALIGN_PHASE);
        assert_eq!(two.weights_at(100).unwrap(), LossWeights::TASK_PHASE);
        assert_eq!(two.total_steps(), 200);
        let w = two.weights_at(0).unwrap();
        assert_eq!((w.lambda_align, w.lambda_distill), (1.0, 0.1));
        let w = two.weights_at(199).unwrap();
        assert_eq!((w.lambda_align, w.lambda_distill), (0.1, 1.0));

        let three = CurriculumSchedule::three_phase(300, 0.2).unwrap();
        assert_eq!(three.phases.len(), 3);
        assert_eq!(three.weights_at(60).unwrap(), LossWeights::BALANCED_PHASE);
        assert_eq!(three.total_steps(), 300);
    }

    #[test]
    fn schedule_rejects_bad_phases() {
        assert!(CurriculumSchedule::new(vec![]).is_err());
        assert!(CurriculumSchedule::constant(0, LossWeights::SFT_ONLY).is_err());
        let neg = LossWeights {
            alpha: -1.0,
            ..LossWeights::SFT_ONLY
        };
        assert!(CurriculumSchedule::constant(5, neg).is_err());
    }

    #[test]
    fn tape_losses_match_plain_values() {
        let mut g = Graph::<f64>::new();
        let pred = g.constant(Tensor::from_rows(&[&[0.5, 0.5], &[0.8, 0.2]]).unwrap());
        let star = g.constant(Tensor::from_rows(&[&[1.0, 0.0], &[0.75, 0.25]]).unwrap());
        let hat = g.constant(Tensor::from_rows(&[&[0.9, 0.1], &[0.6, 0.4]]).unwrap());
        let bar = g.constant(Tensor::from_rows(&[&[0.4, 0.6], &[0.7, 0.3]]).unwrap());
        let h = g.constant(Tensor::from_rows(&[&[1.0, 0.0], &[1.0, 1.0]]).unwrap());
        let hb = g.constant(Tensor::from_rows(&[&[0.0, 1.0], &[2.0, 2.0]]).unwrap());
        let w = LossWeights::TASK_PHASE;
        let lv = total_loss_var(
            &mut g,
            &LossInputs {
                pred,
                p_star: star,
                p_hat: Some(hat),
                p_bar: Some(bar),
                h_last: Some(h),
                h_bar_last: Some(hb),
            },
            &w,
        )
        .unwrap();
        let terms = lv.values(&g);
        let plain_sft = (kl(&[1.0, 0.0], &[0.5, 0.5]).unwrap() + kl(&[0.75, 0.25], &[0.8, 0.2]).unwrap()) / 2.0;
        assert!((terms.sft - plain_sft).abs() < 1e-15);
        assert!((terms.hidden_align - 0.5).abs() < 1e-15);
        let total = g.value(lv.total).item();
        assert!((total - loss_total(&terms, &w)).abs() < 1e-14);
    }

    #[test]
    fn missing_teacher_is_contract_error() {
        let mut g = Graph::<f64>::new();
        let pred = g.constant(Tensor::from_rows(&[&[0.5, 0.5]]).unwrap());
        let inputs = LossInputs {
            pred,
            p_star: pred,
            p_hat: None,
            p_bar: None,
            h_last: None,
            h_bar_last: None,
        };
        assert!(matches!(
            total_loss_var(&mut g, &inputs, &LossWeights::TASK_PHASE),
            Err(Error::Contract(_))
        ));
        assert!(total_loss_var(&mut g, &inputs, &LossWeights::SFT_ONLY).is_ok());
    }
}
