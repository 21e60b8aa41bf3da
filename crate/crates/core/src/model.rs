//! Decoder-only transformer shared by the encoder and ranker models.
//!
//! Pre-norm blocks: RMSNorm, multi-head attention with rotary positions,
//! RMSNorm, SwiGLU feed-forward. The stack ends in a final RMSNorm whose
//! output is the hidden state exposed to callers. Rankers add a two-column
//! head whose softmax is `(p_yes, p_no)`.

use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::kernels::RowKeys;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HeadMode {
    None,
    Binary,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub hidden: usize,
    pub layers: usize,
    pub heads: usize,
    pub ffn_mult: f64,
    pub max_seq: usize,
    pub head_mode: HeadMode,
    #[serde(default = "default_rope_base")]
    pub rope_base: f64,
    #[serde(default = "default_norm_eps")]
    pub norm_eps: f64,
}

fn default_rope_base() -> f64 {
    10_000.0
}

fn default_norm_eps() -> f64 {
    1e-6
}

impl ModelConfig {
    /// Desk-scale ranker: H=32, 2 layers, 2 heads, 67-token vocabulary.
    pub fn desk(head_mode: HeadMode) -> Self {
        Self {
            vocab_size: crate::mix::VOCAB_SIZE,
            hidden: 32,
            layers: 2,
            heads: 2,
            ffn_mult: 2.0,
            max_seq: 64,
            head_mode,
            rope_base: default_rope_base(),
            norm_eps: default_norm_eps(),
        }
    }

    pub fn ffn_dim(&self) -> usize {
        ((self.hidden as f64 * self.ffn_mult).round() as usize).max(1)
    }

    pub fn head_dim(&self) -> usize {
        self.hidden / self.heads
    }

    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 || self.hidden % self.heads != 0 {
            return Err(Error::Input(format!(
                "hidden {} not divisible by heads {}",
                self.hidden, self.heads
            )));
        }
        if self.head_dim() % 2 != 0 {
            return Err(Error::Input("rotary encoding needs an even head width".into()));
        }
        if self.max_seq == 0 || self.layers == 0 {
            return Err(Error::Input("max_seq and layers must be positive".into()));
        }
        if self.vocab_size <= crate::mix::EOI as usize {
            return Err(Error::Input("vocab_size must include the special tokens".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams<T> {
    pub attn_norm: Tensor<T>,
    pub wq: Tensor<T>,
    pub wk: Tensor<T>,
    pub wv: Tensor<T>,
    pub wo: Tensor<T>,
    pub ffn_norm: Tensor<T>,
    pub w_gate: Tensor<T>,
    pub w_up: Tensor<T>,
    pub w_down: Tensor<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Params<T> {
    pub config: ModelConfig,
    pub token_embedding: Tensor<T>,
    pub layers: Vec<LayerParams<T>>,
    pub final_norm: Tensor<T>,
    pub head: Option<Tensor<T>>,
}

impl<T: Scalar> Params<T> {
    /// Scaled-normal initialization, `std = 0.02 / sqrt(layers)`; norm gains
    /// start at one.
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let std = 0.02 / (config.layers as f64).sqrt();
        let normal = Normal::new(0.0, std).map_err(|e| Error::Input(e.to_string()))?;
        let mut mat = |r: usize, c: usize| {
            let data = (0..r * c).map(|_| T::lit(normal.sample(&mut rng))).collect();
            Tensor::new(vec![r, c], data).expect("sized")
        };
        let (h, f) = (config.hidden, config.ffn_dim());
        let token_embedding = mat(config.vocab_size, h);
        let layers = (0..config.layers)
            .map(|_| LayerParams {
                attn_norm: Tensor::full(&[h], T::one()),
                wq: mat(h, h),
                wk: mat(h, h),
                wv: mat(h, h),
                wo: mat(h, h),
                ffn_norm: Tensor::full(&[h], T::one()),
                w_gate: mat(h, f),
                w_up: mat(h, f),
                w_down: mat(f, h),
            })
            .collect();
        let head = match config.head_mode {
            HeadMode::Binary => Some(mat(h, 2)),
            HeadMode::None => None,
        };
        Ok(Self {
            config: config.clone(),
            token_embedding,
            layers,
            final_norm: Tensor::full(&[h], T::one()),
            head,
        })
    }

    /// Parameters in a fixed order with stable names.
    pub fn named(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out = vec![("token_embedding".to_string(), &self.token_embedding)];
        for (i, l) in self.layers.iter().enumerate() {
            for (n, t) in l.fields() {
                out.push((format!("layers.{i}.{n}"), t));
            }
        }
        out.push(("final_norm".into(), &self.final_norm));
        if let Some(h) = &self.head {
            out.push(("head".into(), h));
        }
        out
    }

    /// Mutable view in the same order as [`Params::named`].
    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let mut out = vec![&mut self.token_embedding];
        for l in &mut self.layers {
            out.extend([
                &mut l.attn_norm,
                &mut l.wq,
                &mut l.wk,
                &mut l.wv,
                &mut l.wo,
                &mut l.ffn_norm,
                &mut l.w_gate,
                &mut l.w_up,
                &mut l.w_down,
            ]);
        }
        out.push(&mut self.final_norm);
        if let Some(h) = &mut self.head {
            out.push(h);
        }
        out
    }

    pub fn num_tensors(&self) -> usize {
        2 + 9 * self.layers.len() + usize::from(self.head.is_some())
    }

    pub fn num_scalars(&self) -> usize {
        self.named().iter().map(|(_, t)| t.len()).sum()
    }

    /// Puts every parameter on the tape, in [`Params::named`] order.
    pub fn register(&self, g: &mut Graph<T>, trainable: bool) -> ParamVars {
        let mut put = |t: &Tensor<T>| {
            if trainable {
                g.param(t.clone())
            } else {
                g.constant(t.clone())
            }
        };
        let token_embedding = put(&self.token_embedding);
        let layers = self
            .layers
            .iter()
            .map(|l| LayerVars {
                attn_norm: put(&l.attn_norm),
                wq: put(&l.wq),
                wk: put(&l.wk),
                wv: put(&l.wv),
                wo: put(&l.wo),
                ffn_norm: put(&l.ffn_norm),
                w_gate: put(&l.w_gate),
                w_up: put(&l.w_up),
                w_down: put(&l.w_down),
            })
            .collect();
        let final_norm = put(&self.final_norm);
        let head = self.head.as_ref().map(&mut put);
        ParamVars {
            token_embedding,
            layers,
            final_norm,
            head,
        }
    }

    pub fn cast<U: Scalar>(&self) -> Params<U> {
        let c = |t: &Tensor<T>| t.cast::<U>();
        Params {
            config: self.config.clone(),
            token_embedding: c(&self.token_embedding),
            layers: self
                .layers
                .iter()
                .map(|l| LayerParams {
                    attn_norm: c(&l.attn_norm),
                    wq: c(&l.wq),
                    wk: c(&l.wk),
                    wv: c(&l.wv),
                    wo: c(&l.wo),
                    ffn_norm: c(&l.ffn_norm),
                    w_gate: c(&l.w_gate),
                    w_up: c(&l.w_up),
                    w_down: c(&l.w_down),
                })
                .collect(),
            final_norm: c(&self.final_norm),
            head: self.head.as_ref().map(c),
        }
    }

    pub fn embed_tokens(&self, tokens: &[u32]) -> Result<Tensor<T>> {
        let h = self.config.hidden;
        let mut data = Vec::with_capacity(tokens.len() * h);
        for &t in tokens {
            if t as usize >= self.config.vocab_size {
                return Err(Error::Input(format!(
                    "token {t} outside vocabulary of {}",
                    self.config.vocab_size
                )));
            }
            data.extend_from_slice(self.token_embedding.row(t as usize));
        }
        Tensor::matrix(tokens.len(), h, data)
    }

    /// Runs the stack over already-embedded rows. Returns post-final-norm
    /// hidden states.
    pub fn forward_hidden(&self, h_in: &Tensor<T>, mask: &MaskPolicy, positions: &[usize]) -> Result<Tensor<T>> {
        let layout = SeqLayout::single(h_in.rows(), mask, positions)?;
        let mut g = Graph::new();
        let pv = self.register(&mut g, false);
        let x = g.constant(h_in.clone());
        let out = forward_hidden_var(&self.config, &pv, &mut g, x, &layout)?;
        Ok(g.value(out).clone())
    }

    pub fn binary_head(&self, h_last: &[T]) -> Result<ScoreDistribution> {
        let w = self
            .head
            .as_ref()
            .ok_or_else(|| Error::Contract("binary_head on a model without a head".into()))?;
        if h_last.len() != self.config.hidden {
            return Err(Error::dim("binary_head", format!("{} vs hidden {}", h_last.len(), self.config.hidden)));
        }
        Ok(head_probs(w, h_last))
    }
}

impl<T> LayerParams<T> {
    fn fields(&self) -> [(&'static str, &Tensor<T>); 9] {
        [
            ("attn_norm", &self.attn_norm),
            ("wq", &self.wq),
            ("wk", &self.wk),
            ("wv", &self.wv),
            ("wo", &self.wo),
            ("ffn_norm", &self.ffn_norm),
            ("w_gate", &self.w_gate),
            ("w_up", &self.w_up),
            ("w_down", &self.w_down),
        ]
    }
}

/// Head softmax for one hidden row; `(p_yes, p_no)` are columns 0 and 1.
pub(crate) fn head_probs<T: Scalar>(w: &Tensor<T>, h_last: &[T]) -> ScoreDistribution {
    let mut logits = [T::zero(); 2];
    for (i, &hv) in h_last.iter().enumerate() {
        let r = w.row(i);
        logits[0] += hv * r[0];
        logits[1] += hv * r[1];
    }
    crate::tensor::softmax_in_place(&mut logits);
    ScoreDistribution {
        p_yes: logits[0].as_f64(),
        p_no: logits[1].as_f64(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoreDistribution {
    pub p_yes: f64,
    pub p_no: f64,
}

impl ScoreDistribution {
    pub fn new(p_yes: f64) -> Self {
        Self { p_yes, p_no: 1.0 - p_yes }
    }

    pub fn as_array(&self) -> [f64; 2] {
        [self.p_yes, self.p_no]
    }
}

#[derive(Debug, Clone, Copy)]
pub struct LayerVars {
    pub attn_norm: Var,
    pub wq: Var,
    pub wk: Var,
    pub wv: Var,
    pub wo: Var,
    pub ffn_norm: Var,
    pub w_gate: Var,
    pub w_up: Var,
    pub w_down: Var,
}

#[derive(Debug, Clone)]
pub struct ParamVars {
    pub token_embedding: Var,
    pub layers: Vec<LayerVars>,
    pub final_norm: Var,
    pub head: Option<Var>,
}

impl ParamVars {
    /// Tape handles in [`Params::named`] order.
    pub fn all(&self) -> Vec<Var> {
        let mut out = vec![self.token_embedding];
        for l in &self.layers {
            out.extend([
                l.attn_norm, l.wq, l.wk, l.wv, l.wo, l.ffn_norm, l.w_gate, l.w_up, l.w_down,
            ]);
        }
        out.push(self.final_norm);
        out.extend(self.head);
        out
    }
}

/// Which keys each query row may attend to.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum MaskPolicy {
    Causal,
    /// Prefix rows are causal. A row inside an item span sees the whole
    /// prefix plus the earlier rows of its own span. Spans must tile
    /// `prefix_len..len` in order.
    PrefixPlusItem {
        prefix_len: usize,
        item_spans: Vec<(usize, usize)>,
    },
}

impl MaskPolicy {
    /// Visible keys for every row of a sequence of length `len`, offset by
    /// `base` within a packed batch.
    pub fn row_keys(&self, len: usize, base: usize) -> Result<Vec<RowKeys>> {
        match self {
            MaskPolicy::Causal => Ok((0..len).map(|i| RowKeys::causal(base, base + i)).collect()),
            MaskPolicy::PrefixPlusItem { prefix_len, item_spans } => {
                let p = *prefix_len;
                if p > len {
                    return Err(Error::Contract(format!("prefix {p} longer than sequence {len}")));
                }
                let mut keys: Vec<RowKeys> = (0..p).map(|i| RowKeys::causal(base, base + i)).collect();
                let mut cursor = p;
                for &(start, n) in item_spans {
                    if start != cursor || n == 0 {
                        return Err(Error::Contract(format!(
                            "item span ({start},{n}) overlaps, leaves a gap or is empty (expected start {cursor})"
                        )));
                    }
                    for i in start..start + n {
                        keys.push(RowKeys {
                            first: base..base + p,
                            second: base + start..base + i + 1,
                        });
                    }
                    cursor = start + n;
                }
                if cursor != len {
                    return Err(Error::Contract(format!("item spans end at {cursor}, sequence has {len} rows")));
                }
                Ok(keys)
            }
        }
    }
}

/// Positions and visibility for a packed set of sequences.
#[derive(Debug, Clone)]
pub struct SeqLayout {
    pub positions: Arc<[usize]>,
    pub keys: Arc<[RowKeys]>,
    /// `(start, len)` of each packed sequence.
    pub segments: Vec<(usize, usize)>,
}

impl SeqLayout {
    pub fn single(len: usize, mask: &MaskPolicy, positions: &[usize]) -> Result<Self> {
        Self::pack(&[(len, mask, positions)])
    }

    pub fn pack(seqs: &[(usize, &MaskPolicy, &[usize])]) -> Result<Self> {
        let mut positions = Vec::new();
        let mut keys = Vec::new();
        let mut segments = Vec::new();
        for &(len, mask, pos) in seqs {
            if pos.len() != len {
                return Err(Error::Contract(format!("{} positions for {len} rows", pos.len())));
            }
            let base = positions.len();
            keys.extend(mask.row_keys(len, base)?);
            positions.extend_from_slice(pos);
            segments.push((base, len));
        }
        Ok(Self {
            positions: positions.into(),
            keys: keys.into(),
            segments,
        })
    }

    pub fn rows(&self) -> usize {
        self.positions.len()
    }

    /// Index of the last row of every segment.
    pub fn last_rows(&self) -> Vec<usize> {
        self.segments.iter().map(|&(s, n)| s + n - 1).collect()
    }
}

/// Embedding lookup on the tape.
pub fn embed_var<T: Scalar>(cfg: &ModelConfig, pv: &ParamVars, g: &mut Graph<T>, tokens: &[u32]) -> Result<Var> {
    if let Some(&bad) = tokens.iter().find(|&&t| t as usize >= cfg.vocab_size) {
        return Err(Error::Input(format!("token {bad} outside vocabulary of {}", cfg.vocab_size)));
    }
    let idx: Vec<usize> = tokens.iter().map(|&t| t as usize).collect();
    g.rows(pv.token_embedding, &idx)
}

/// The transformer stack on the tape.
pub fn forward_hidden_var<T: Scalar>(
    cfg: &ModelConfig,
    pv: &ParamVars,
    g: &mut Graph<T>,
    h_in: Var,
    layout: &SeqLayout,
) -> Result<Var> {
    let h = g.value(h_in);
    if h.cols() != cfg.hidden {
        return Err(Error::dim("forward_hidden", format!("width {} vs hidden {}", h.cols(), cfg.hidden)));
    }
    if h.rows() != layout.rows() {
        return Err(Error::Contract(format!("{} rows but layout for {}", h.rows(), layout.rows())));
    }
    if let Some(&(_, n)) = layout.segments.iter().find(|s| s.1 > cfg.max_seq) {
        return Err(Error::Length { len: n, max: cfg.max_seq });
    }
    let eps = T::lit(cfg.norm_eps);
    let mut x = h_in;
    for l in &pv.layers {
        let n = g.rms_norm(x, l.attn_norm, eps)?;
        let q = g.matmul(n, l.wq)?;
        let k = g.matmul(n, l.wk)?;
        let v = g.matmul(n, l.wv)?;
        let q = g.rope(q, layout.positions.clone(), cfg.heads, cfg.rope_base)?;
        let k = g.rope(k, layout.positions.clone(), cfg.heads, cfg.rope_base)?;
        let a = g.attention(q, k, v, cfg.heads, layout.keys.clone())?;
        let o = g.matmul(a, l.wo)?;
        x = g.add(x, o)?;
        let n = g.rms_norm(x, l.ffn_norm, eps)?;
        let gate = g.matmul(n, l.w_gate)?;
        let up = g.matmul(n, l.w_up)?;
        let act = g.swiglu(gate, up)?;
        let d = g.matmul(act, l.w_down)?;
        x = g.add(x, d)?;
    }
    g.rms_norm(x, pv.final_norm, eps)
}

/// `softmax(h_last * head)` for every row of `h_last`.
pub fn head_var<T: Scalar>(pv: &ParamVars, g: &mut Graph<T>, h_last: Var) -> Result<Var> {
    let w = pv
        .head
        .ok_or_else(|| Error::Contract("binary head requested on a model without one".into()))?;
    let logits = g.matmul(h_last, w)?;
    g.softmax(logits)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny(head: HeadMode) -> Params<f64> {
        let cfg = ModelConfig {
            hidden: 8,
            heads: 2,
            max_seq: 16,
            ..ModelConfig::desk(head)
        };
        Params::init(&cfg, 0).unwrap()
    }

    #[test]
    fn init_is_deterministic() {
        let cfg = ModelConfig::desk(HeadMode::Binary);
        let a = Params::<f64>::init(&cfg, 7).unwrap();
        let b = Params::<f64>::init(&cfg, 7).unwrap();
        let c = Params::<f64>::init(&cfg, 8).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert_eq!(a.named().len(), a.num_tensors());
    }

    #[test]
    fn config_rejects_bad_heads() {
        let cfg = ModelConfig {
            heads: 3,
            ..ModelConfig::desk(HeadMode::None)
        };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn embed_lookup() {
        let p = tiny(HeadMode::None);
        let e = p.embed_tokens(&[5]).unwrap();
        assert_eq!(e.data(), p.token_embedding.row(5));
        let e = p.embed_tokens(&[3, 3]).unwrap();
        assert_eq!(e.row(0), e.row(1));
        assert!(matches!(p.embed_tokens(&[67]), Err(Error::Input(_))));
    }

    #[test]
    fn embed_hand_set_table() {
        let mut p = tiny(HeadMode::None);
        let mut table = Tensor::zeros(&[p.config.vocab_size, 8]);
        table.row_mut(0).copy_from_slice(&[1., 2., 3., 4., 5., 6., 7., 8.]);
        table.row_mut(1).copy_from_slice(&[-1.; 8]);
        p.token_embedding = table;
        let e = p.embed_tokens(&[0, 1]).unwrap();
        assert_eq!(e.row(0), &[1., 2., 3., 4., 5., 6., 7., 8.]);
        assert_eq!(e.row(1), &[-1.; 8]);
    }

    #[test]
    fn single_row_ignores_mask_kind() {
        let p = tiny(HeadMode::None);
        let h = p.embed_tokens(&[9]).unwrap();
        let a = p.forward_hidden(&h, &MaskPolicy::Causal, &[0]).unwrap();
        let b = p
            .forward_hidden(
                &h,
                &MaskPolicy::PrefixPlusItem {
                    prefix_len: 1,
                    item_spans: vec![],
                },
                &[0],
            )
            .unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn causal_perturbation_probe() {
        let p = tiny(HeadMode::None);
        let h = p.embed_tokens(&[1, 2, 3, 4, 5]).unwrap();
        let pos = [0, 1, 2, 3, 4];
        let base = p.forward_hidden(&h, &MaskPolicy::Causal, &pos).unwrap();
        let mut h2 = h.clone();
        h2.row_mut(3).iter_mut().for_each(|v| *v += 0.7);
        let pert = p.forward_hidden(&h2, &MaskPolicy::Causal, &pos).unwrap();
        for r in 0..3 {
            assert_eq!(base.row(r), pert.row(r));
        }
        assert_ne!(base.row(3), pert.row(3));
    }

    #[test]
    fn item_perturbation_probe() {
        let p = tiny(HeadMode::None);
        let h = p.embed_tokens(&[1, 2, 10, 11, 20, 21, 22]).unwrap();
        let mask = MaskPolicy::PrefixPlusItem {
            prefix_len: 2,
            item_spans: vec![(2, 2), (4, 3)],
        };
        let pos = [0, 1, 2, 3, 2, 3, 4];
        let base = p.forward_hidden(&h, &mask, &pos).unwrap();
        let mut h2 = h.clone();
        h2.row_mut(2).iter_mut().for_each(|v| *v -= 1.3);
        h2.row_mut(3).iter_mut().for_each(|v| *v += 0.4);
        let pert = p.forward_hidden(&h2, &mask, &pos).unwrap();
        for r in [0, 1, 4, 5, 6] {
            assert_eq!(base.row(r), pert.row(r));
        }
        assert_ne!(base.row(2), pert.row(2));
    }

    #[test]
    fn forward_is_bitwise_repeatable() {
        let p = tiny(HeadMode::None);
        let h = p.embed_tokens(&[4, 8, 15, 16]).unwrap();
        let a = p.forward_hidden(&h, &MaskPolicy::Causal, &[0, 1, 2, 3]).unwrap();
        let b = p.forward_hidden(&h, &MaskPolicy::Causal, &[0, 1, 2, 3]).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn positions_must_match_rows() {
        let p = tiny(HeadMode::None);
        let h = p.embed_tokens(&[1, 2]).unwrap();
        assert!(matches!(
            p.forward_hidden(&h, &MaskPolicy::Causal, &[0]),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn overlapping_spans_rejected() {
        let m = MaskPolicy::PrefixPlusItem {
            prefix_len: 1,
            item_spans: vec![(1, 2), (2, 1)],
        };
        assert!(matches!(m.row_keys(4, 0), Err(Error::Contract(_))));
    }

    #[test]
    fn head_equal_columns_is_uniform() {
        let mut p = tiny(HeadMode::Binary);
        let mut w = Tensor::zeros(&[8, 2]);
        for r in 0..8 {
            w.row_mut(r).copy_from_slice(&[0.3 * r as f64, 0.3 * r as f64]);
        }
        p.head = Some(w);
        let s = p.binary_head(&[1.0; 8]).unwrap();
        assert_eq!((s.p_yes, s.p_no), (0.5, 0.5));
    }

    #[test]
    fn head_closed_form_and_swap() {
        let mut p = tiny(HeadMode::Binary);
        let mut w = Tensor::zeros(&[8, 2]);
        w.row_mut(0)[0] = 3f64.ln();
        p.head = Some(w.clone());
        let mut h = [0.0; 8];
        h[0] = 1.0;
        let s = p.binary_head(&h).unwrap();
        assert!((s.p_yes - 0.75).abs() < 1e-15 && (s.p_no - 0.25).abs() < 1e-15);
        for r in 0..8 {
            w.row_mut(r).swap(0, 1);
        }
        p.head = Some(w);
        let t = p.binary_head(&h).unwrap();
        assert_eq!((t.p_yes, t.p_no), (s.p_no, s.p_yes));
    }

    #[test]
    fn head_missing_is_contract_error() {
        let p = tiny(HeadMode::None);
        assert!(matches!(p.binary_head(&[0.0; 8]), Err(Error::Contract(_))));
    }
}
