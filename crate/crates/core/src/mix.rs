//! Mixed text/embedding prompts.
//!
//! The encoder reads `BOS item` and its last `t_s` hidden rows stand in for
//! the item. The ranker reads `BOS query SEP` as ordinary token embeddings,
//! then the item rows verbatim, then one `EOI` token, and scores at `EOI`.
//! The full-text prompt `BOS query SEP item EOI` uses the same ranker without
//! an encoder.

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::model::{self, MaskPolicy, ModelConfig, ParamVars, Params, ScoreDistribution, SeqLayout};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Ordinary data tokens are `0..DATA_VOCAB`.
pub const DATA_VOCAB: u32 = 64;
pub const BOS: u32 = 64;
pub const SEP: u32 = 65;
/// End of item.
pub const EOI: u32 = 66;
pub const VOCAB_SIZE: usize = 67;

pub fn is_special(t: u32) -> bool {
    (DATA_VOCAB..VOCAB_SIZE as u32).contains(&t)
}

/// `BOS query SEP`.
pub fn ranker_prefix(q_tokens: &[u32]) -> Vec<u32> {
    let mut p = Vec::with_capacity(q_tokens.len() + 2);
    p.push(BOS);
    p.extend_from_slice(q_tokens);
    p.push(SEP);
    p
}

/// `BOS item`.
pub fn encoder_prompt(item_tokens: &[u32]) -> Vec<u32> {
    let mut p = Vec::with_capacity(item_tokens.len() + 1);
    p.push(BOS);
    p.extend_from_slice(item_tokens);
    p
}

/// `BOS query SEP item EOI`.
pub fn fulltext_prompt(q_tokens: &[u32], item_tokens: &[u32]) -> Vec<u32> {
    let mut p = ranker_prefix(q_tokens);
    p.extend_from_slice(item_tokens);
    p.push(EOI);
    p
}

pub fn seq_positions(len: usize) -> Vec<usize> {
    (0..len).collect()
}

/// The part of a ranker prompt that follows the shared prefix.
#[derive(Debug, Clone, PartialEq)]
pub enum ItemBlock<T> {
    /// Item text tokens; an `EOI` token follows.
    Text(Vec<u32>),
    /// Precomputed encoder rows (`T_S x H`); an `EOI` token follows.
    Embedded(Tensor<T>),
}

impl<T: Scalar> ItemBlock<T> {
    /// Rows occupied in the ranker sequence, including the trailing `EOI`.
    pub fn len(&self) -> usize {
        match self {
            ItemBlock::Text(t) => t.len() + 1,
            ItemBlock::Embedded(rows) => rows.rows() + 1,
        }
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Ranker input rows for this block.
    pub fn input_rows(&self, ranker: &Params<T>) -> Result<Tensor<T>> {
        match self {
            ItemBlock::Text(tokens) => {
                let mut ids = tokens.clone();
                ids.push(EOI);
                ranker.embed_tokens(&ids)
            }
            ItemBlock::Embedded(rows) => {
                if rows.cols() != ranker.config.hidden {
                    return Err(Error::dim(
                        "item block",
                        format!("embedding width {} vs ranker hidden {}", rows.cols(), ranker.config.hidden),
                    ));
                }
                if rows.rows() == 0 {
                    return Err(Error::Input("embedded item needs at least one row".into()));
                }
                if !rows.is_finite() {
                    return Err(Error::Input("embedded item has non-finite rows".into()));
                }
                let eoi = ranker.embed_tokens(&[EOI])?;
                Tensor::concat_rows(&[rows, &eoi])
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MixedPrompt<T> {
    pub prefix_tokens: Vec<u32>,
    pub item: ItemBlock<T>,
}

impl<T: Scalar> MixedPrompt<T> {
    pub fn len(&self) -> usize {
        self.prefix_tokens.len() + self.item.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }
}

/// Encoder outputs for every row of `BOS item`.
pub fn encode_hidden<T: Scalar>(encoder: &Params<T>, item_tokens: &[u32]) -> Result<Tensor<T>> {
    let prompt = encoder_prompt(item_tokens);
    let h = encoder.embed_tokens(&prompt)?;
    encoder.forward_hidden(&h, &MaskPolicy::Causal, &seq_positions(prompt.len()))
}

/// Last-`t_s` sampling of an encoder output.
pub fn sample_last<T: Scalar>(h_e: &Tensor<T>, t_s: usize) -> Result<Tensor<T>> {
    if t_s == 0 || t_s > h_e.rows() {
        return Err(Error::Input(format!("t_s {t_s} outside 1..={}", h_e.rows())));
    }
    h_e.slice_rows(h_e.rows() - t_s, t_s)
}

/// Compressed item representation: the last `t_s` encoder rows over
/// `BOS item`. `t_s` may range up to the encoder prompt length.
pub fn encode_item<T: Scalar>(encoder: &Params<T>, item_tokens: &[u32], t_s: usize) -> Result<Tensor<T>> {
    if t_s == 0 || t_s > item_tokens.len() + 1 {
        return Err(Error::Input(format!(
            "t_s {t_s} outside 1..={} for an item of {} tokens",
            item_tokens.len() + 1,
            item_tokens.len()
        )));
    }
    sample_last(&encode_hidden(encoder, item_tokens)?, t_s)
}

/// Ranker input for `prefix ++ item_emb ++ EOI` with sequential positions and
/// a causal mask.
pub fn assemble_mixed<T: Scalar>(
    ranker: &Params<T>,
    prefix_tokens: &[u32],
    item_emb: &Tensor<T>,
) -> Result<(Tensor<T>, Vec<usize>, MaskPolicy)> {
    let prefix = ranker.embed_tokens(prefix_tokens)?;
    let item = ItemBlock::Embedded(item_emb.clone()).input_rows(ranker)?;
    let h = Tensor::concat_rows(&[&prefix, &item])?;
    let n = h.rows();
    Ok((h, seq_positions(n), MaskPolicy::Causal))
}

fn score_rows<T: Scalar>(ranker: &Params<T>, h: &Tensor<T>) -> Result<(ScoreDistribution, Vec<T>)> {
    if h.rows() > ranker.config.max_seq {
        return Err(Error::Length {
            len: h.rows(),
            max: ranker.config.max_seq,
        });
    }
    let out = ranker.forward_hidden(h, &MaskPolicy::Causal, &seq_positions(h.rows()))?;
    let last = out.row(out.rows() - 1).to_vec();
    Ok((ranker.binary_head(&last)?, last))
}

/// Score from precomputed item rows (e.g. read from the nearline cache).
pub fn score_embedded<T: Scalar>(ranker: &Params<T>, q_tokens: &[u32], item_emb: &Tensor<T>) -> Result<ScoreDistribution> {
    let (h, _, _) = assemble_mixed(ranker, &ranker_prefix(q_tokens), item_emb)?;
    Ok(score_rows(ranker, &h)?.0)
}

pub fn score_mixed<T: Scalar>(
    ranker: &Params<T>,
    encoder: &Params<T>,
    q_tokens: &[u32],
    item_tokens: &[u32],
    t_s: usize,
) -> Result<ScoreDistribution> {
    check_width(ranker, encoder)?;
    let emb = encode_item(encoder, item_tokens, t_s)?;
    score_embedded(ranker, q_tokens, &emb)
}

pub fn score_fulltext<T: Scalar>(ranker: &Params<T>, q_tokens: &[u32], item_tokens: &[u32]) -> Result<ScoreDistribution> {
    let prompt = fulltext_prompt(q_tokens, item_tokens);
    if prompt.len() > ranker.config.max_seq {
        return Err(Error::Length {
            len: prompt.len(),
            max: ranker.config.max_seq,
        });
    }
    let h = ranker.embed_tokens(&prompt)?;
    Ok(score_rows(ranker, &h)?.0)
}

fn check_width<T: Scalar>(ranker: &Params<T>, encoder: &Params<T>) -> Result<()> {
    if ranker.config.hidden != encoder.config.hidden {
        return Err(Error::dim(
            "score_mixed",
            format!("encoder hidden {} vs ranker hidden {}", encoder.config.hidden, ranker.config.hidden),
        ));
    }
    Ok(())
}

/// One scored batch on the tape.
#[derive(Debug, Clone, Copy)]
pub struct BatchOutput {
    /// `B x 2` rows of `(p_yes, p_no)`.
    pub probs: Var,
    /// `B x H` final hidden state at each sequence's last row.
    pub h_last: Var,
}

/// Full-text prompts for a batch of `(query, item)` pairs, packed into one
/// tape forward.
pub fn fulltext_batch<T: Scalar>(
    cfg: &ModelConfig,
    pv: &ParamVars,
    g: &mut Graph<T>,
    pairs: &[(&[u32], &[u32])],
) -> Result<BatchOutput> {
    let prompts: Vec<Vec<u32>> = pairs.iter().map(|(q, j)| fulltext_prompt(q, j)).collect();
    let tokens: Vec<u32> = prompts.iter().flatten().copied().collect();
    let pos: Vec<Vec<usize>> = prompts.iter().map(|p| seq_positions(p.len())).collect();
    let seqs: Vec<_> = prompts
        .iter()
        .zip(&pos)
        .map(|(p, ps)| (p.len(), &MaskPolicy::Causal, ps.as_slice()))
        .collect();
    let layout = SeqLayout::pack(&seqs)?;
    let h = model::embed_var(cfg, pv, g, &tokens)?;
    let out = model::forward_hidden_var(cfg, pv, g, h, &layout)?;
    let h_last = g.rows(out, &layout.last_rows())?;
    let probs = model::head_var(pv, g, h_last)?;
    Ok(BatchOutput { probs, h_last })
}

/// Encoder rows for a batch of items: the last `t_s` rows of each, stacked
/// (`B*t_s x H`).
pub fn encode_batch<T: Scalar>(
    cfg: &ModelConfig,
    pv: &ParamVars,
    g: &mut Graph<T>,
    items: &[&[u32]],
    t_s: usize,
) -> Result<Var> {
    let prompts: Vec<Vec<u32>> = items.iter().map(|j| encoder_prompt(j)).collect();
    if let Some(p) = prompts.iter().find(|p| t_s == 0 || t_s > p.len()) {
        return Err(Error::Input(format!("t_s {t_s} outside 1..={}", p.len())));
    }
    let tokens: Vec<u32> = prompts.iter().flatten().copied().collect();
    let pos: Vec<Vec<usize>> = prompts.iter().map(|p| seq_positions(p.len())).collect();
    let seqs: Vec<_> = prompts
        .iter()
        .zip(&pos)
        .map(|(p, ps)| (p.len(), &MaskPolicy::Causal, ps.as_slice()))
        .collect();
    let layout = SeqLayout::pack(&seqs)?;
    let h = model::embed_var(cfg, pv, g, &tokens)?;
    let out = model::forward_hidden_var(cfg, pv, g, h, &layout)?;
    let idx: Vec<usize> = layout
        .segments
        .iter()
        .flat_map(|&(s, n)| (s + n - t_s)..(s + n))
        .collect();
    g.rows(out, &idx)
}

/// Mixed prompts for a batch: the ranker sees `BOS q SEP`, the item's encoder
/// rows, then `EOI`. Gradients reach both models.
#[allow(clippy::too_many_arguments)]
pub fn mixed_batch<T: Scalar>(
    ranker_cfg: &ModelConfig,
    ranker: &ParamVars,
    encoder_cfg: &ModelConfig,
    encoder: &ParamVars,
    g: &mut Graph<T>,
    pairs: &[(&[u32], &[u32])],
    t_s: usize,
) -> Result<BatchOutput> {
    if ranker_cfg.hidden != encoder_cfg.hidden {
        return Err(Error::dim("mixed_batch", "encoder and ranker widths differ"));
    }
    let items: Vec<&[u32]> = pairs.iter().map(|p| p.1).collect();
    let emb = encode_batch(encoder_cfg, encoder, g, &items, t_s)?;
    let prefixes: Vec<Vec<u32>> = pairs.iter().map(|(q, _)| ranker_prefix(q)).collect();
    let prefix_tokens: Vec<u32> = prefixes.iter().flatten().copied().collect();
    let p_rows = model::embed_var(ranker_cfg, ranker, g, &prefix_tokens)?;
    let eoi = model::embed_var(ranker_cfg, ranker, g, &vec![EOI; pairs.len()])?;
    let all = g.concat_rows(&[p_rows, emb, eoi])?;

    // Interleave [prefix_b, emb_b, eoi_b] for each example b.
    let n_prefix = prefix_tokens.len();
    let n_emb = pairs.len() * t_s;
    let mut order = Vec::new();
    let mut pos = Vec::new();
    let mut p_off = 0;
    for (b, p) in prefixes.iter().enumerate() {
        order.extend(p_off..p_off + p.len());
        order.extend(n_prefix + b * t_s..n_prefix + (b + 1) * t_s);
        order.push(n_prefix + n_emb + b);
        p_off += p.len();
        pos.push(seq_positions(p.len() + t_s + 1));
    }
    let h = g.rows(all, &order)?;
    let seqs: Vec<_> = pos.iter().map(|ps| (ps.len(), &MaskPolicy::Causal, ps.as_slice())).collect();
    let layout = SeqLayout::pack(&seqs)?;
    let out = model::forward_hidden_var(ranker_cfg, ranker, g, h, &layout)?;
    let h_last = g.rows(out, &layout.last_rows())?;
    let probs = model::head_var(ranker, g, h_last)?;
    Ok(BatchOutput { probs, h_last })
}
