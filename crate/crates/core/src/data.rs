//! Synthetic relevance data.
//!
//! Tokens `0..16` are "skills". A query is four distinct skills; an item is
//! 24 tokens mixing some of the query's skills, some other skills and filler.
//! The judge grades a pair by how many query skills the item mentions.

use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::mix::DATA_VOCAB;
use crate::model::ScoreDistribution;

pub const NUM_SKILLS: u32 = 16;
pub const QUERY_LEN: usize = 4;
pub const ITEM_LEN: usize = 24;
pub const MAX_GRADE: u8 = 4;
pub const CANDIDATES_PER_QUERY: usize = 10;

/// Deterministic grader: `min(4, |skills(q) & skills(item)|)`.
#[derive(Debug, Clone, Copy, Default)]
pub struct JudgeOracle;

impl JudgeOracle {
    pub fn skills(tokens: &[u32]) -> BTreeSet<u32> {
        tokens.iter().copied().filter(|t| *t < NUM_SKILLS).collect()
    }

    pub fn grade(&self, q_tokens: &[u32], item_tokens: &[u32]) -> u8 {
        let q = Self::skills(q_tokens);
        let shared = Self::skills(item_tokens).intersection(&q).count();
        shared.min(MAX_GRADE as usize) as u8
    }
}

/// Normalized label for a grade: `(grade/4, 1 - grade/4)`.
pub fn grade_to_target(grade: u8) -> ScoreDistribution {
    ScoreDistribution::new(grade as f64 / MAX_GRADE as f64)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Example {
    pub q_tokens: Vec<u32>,
    pub item_tokens: Vec<u32>,
    pub grade: u8,
}

impl Example {
    pub fn p_star(&self) -> ScoreDistribution {
        grade_to_target(self.grade)
    }
}

pub fn sample_query(rng: &mut ChaCha8Rng) -> Vec<u32> {
    let mut skills: Vec<u32> = (0..NUM_SKILLS).collect();
    skills.shuffle(rng);
    skills.truncate(QUERY_LEN);
    skills
}

/// An item sharing exactly `overlap` skills with `query`.
pub fn sample_item(rng: &mut ChaCha8Rng, query: &[u32], overlap: usize) -> Vec<u32> {
    let mut shared = query.to_vec();
    shared.shuffle(rng);
    shared.truncate(overlap.min(query.len()));
    let mut others: Vec<u32> = (0..NUM_SKILLS).filter(|s| !query.contains(s)).collect();
    others.shuffle(rng);
    let distractors = rng.random_range(0..=3usize);
    let mut item = shared;
    item.extend(others.into_iter().take(distractors));
    while item.len() < ITEM_LEN {
        item.push(rng.random_range(NUM_SKILLS..DATA_VOCAB));
    }
    item.shuffle(rng);
    item
}

/// `n` independent labelled pairs; a pure function of `seed`.
pub fn gen_dataset(seed: u64, n: usize) -> Vec<Example> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let judge = JudgeOracle;
    (0..n)
        .map(|_| {
            let q = sample_query(&mut rng);
            let overlap = rng.random_range(0..=MAX_GRADE as usize);
            let item = sample_item(&mut rng, &q, overlap);
            let grade = judge.grade(&q, &item);
            Example {
                q_tokens: q,
                item_tokens: item,
                grade,
            }
        })
        .collect()
}

/// One ranking query with its candidate items and judge grades.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvalQuery {
    pub q_tokens: Vec<u32>,
    pub items: Vec<Vec<u32>>,
    pub grades: Vec<u8>,
}

/// Held-out queries with [`CANDIDATES_PER_QUERY`] candidates each.
pub fn gen_eval_set(seed: u64, queries: usize) -> Vec<EvalQuery> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
    let judge = JudgeOracle;
    (0..queries)
        .map(|_| {
            let q = sample_query(&mut rng);
            let items: Vec<Vec<u32>> = (0..CANDIDATES_PER_QUERY)
                .map(|_| {
                    let overlap = rng.random_range(0..=MAX_GRADE as usize);
                    sample_item(&mut rng, &q, overlap)
                })
                .collect();
            let grades = items.iter().map(|j| judge.grade(&q, j)).collect();
            EvalQuery {
                q_tokens: q,
                items,
                grades,
            }
        })
        .collect()
}
