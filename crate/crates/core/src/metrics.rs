//! Ranking quality.

use crate::data::MAX_GRADE;
use crate::error::{Error, Result};

pub const NDCG_DEPTH: usize = 10;

fn dcg(grades: &[u8]) -> f64 {
    grades
        .iter()
        .take(NDCG_DEPTH)
        .enumerate()
        .map(|(i, &g)| (g as f64 / MAX_GRADE as f64) / ((i + 2) as f64).log2())
        .sum()
}

/// NDCG@10 with linear gain `grade / 4`. `ideal_grades` must hold the same
/// multiset as `ranked_grades`; it is sorted here. A list whose ideal DCG is
/// zero scores 1.
pub fn ndcg_at_10(ranked_grades: &[u8], ideal_grades: &[u8]) -> Result<f64> {
    if ranked_grades.is_empty() {
        return Err(Error::Input("NDCG of an empty list".into()));
    }
    let mut a = ranked_grades.to_vec();
    let mut ideal = ideal_grades.to_vec();
    a.sort_unstable();
    ideal.sort_unstable();
    if a != ideal {
        return Err(Error::Input("ranked and ideal grades differ as multisets".into()));
    }
    ideal.reverse();
    let best = dcg(&ideal);
    if best == 0.0 {
        return Ok(1.0);
    }
    Ok(dcg(ranked_grades) / best)
}

/// Orders `grades` by descending score; ties keep input order.
pub fn rank_by_scores(grades: &[u8], scores: &[f64]) -> Vec<u8> {
    let mut idx: Vec<usize> = (0..grades.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    idx.into_iter().map(|i| grades[i]).collect()
}

/// NDCG@10 of one query's candidates ordered by `scores`.
pub fn ndcg_for_scores(grades: &[u8], scores: &[f64]) -> Result<f64> {
    if grades.len() != scores.len() {
        return Err(Error::Input("one score per candidate required".into()));
    }
    ndcg_at_10(&rank_by_scores(grades, scores), grades)
}

pub fn mean_sd(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn perfect_ordering() {
        assert_eq!(ndcg_at_10(&[4, 3, 1, 0], &[0, 1, 3, 4]).unwrap(), 1.0);
    }

    #[test]
    fn two_item_closed_form() {
        let v = ndcg_at_10(&[0, 1], &[1, 0]).unwrap();
        assert!((v - 1.0 / 3f64.log2()).abs() < 1e-15);
        assert!((v - 0.63093).abs() < 1e-5);
    }

    #[test]
    fn all_zero_is_one() {
        assert_eq!(ndcg_at_10(&[0, 0, 0], &[0, 0, 0]).unwrap(), 1.0);
    }

    #[test]
    fn multiset_mismatch() {
        assert!(matches!(ndcg_at_10(&[1, 2], &[1, 3]), Err(Error::Input(_))));
        assert!(ndcg_at_10(&[], &[]).is_err());
    }

    #[test]
    fn invariant_below_depth_when_tail_is_flat() {
        let mut ranked = vec![4, 3, 3, 2, 2, 1, 1, 0, 4, 2, 1, 1, 1, 1];
        let base = ndcg_at_10(&ranked, &ranked.clone()).unwrap();
        ranked[10..].reverse();
        assert_eq!(ndcg_at_10(&ranked, &ranked.clone()).unwrap(), base);
    }

    #[test]
    fn scores_rank_descending() {
        assert_eq!(rank_by_scores(&[0, 4, 2], &[0.1, 0.9, 0.5]), vec![4, 2, 0]);
        assert_eq!(ndcg_for_scores(&[0, 4, 2], &[0.1, 0.9, 0.5]).unwrap(), 1.0);
    }

    #[test]
    fn mean_and_sd() {
        let (m, s) = mean_sd(&[1.0, 2.0, 3.0]);
        assert_eq!(m, 2.0);
        assert!((s - 1.0).abs() < 1e-15);
    }
}
