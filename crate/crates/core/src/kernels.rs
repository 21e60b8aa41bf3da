//! Row kernels shared by the autodiff tape and the prefill engine.
//!
//! Both paths call these with identical operands in identical order, which is
//! what makes tape scores, naive engine scores and prefix-cached engine scores
//! agree bit for bit.

use std::ops::Range;

use crate::scalar::Scalar;

/// Keys visible to one query row: `first` then `second`, both ascending.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RowKeys {
    pub first: Range<usize>,
    pub second: Range<usize>,
}

impl RowKeys {
    pub fn causal(start: usize, row: usize) -> Self {
        Self {
            first: start..row + 1,
            second: 0..0,
        }
    }

    pub fn count(&self) -> usize {
        self.first.len() + self.second.len()
    }

    pub fn iter(&self) -> impl Iterator<Item = usize> + '_ {
        self.first.clone().chain(self.second.clone())
    }

    pub fn contains(&self, k: usize) -> bool {
        self.first.contains(&k) || self.second.contains(&k)
    }
}

/// `y = x / sqrt(mean(x^2) + eps) * gain`; returns the inverse rms.
pub fn rms_norm_row<T: Scalar>(x: &[T], gain: &[T], eps: T, out: &mut [T]) -> T {
    let mut ss = T::zero();
    for &v in x {
        ss += v * v;
    }
    let inv = T::one() / (ss / T::lit(x.len() as f64) + eps).sqrt();
    for ((o, &v), &g) in out.iter_mut().zip(x).zip(gain) {
        *o = v * inv * g;
    }
    inv
}

#[inline]
fn rope_angle<T: Scalar>(pos: usize, pair: usize, half: usize, base: f64) -> (T, T) {
    let freq = base.powf(-(pair as f64) / half as f64);
    let a = pos as f64 * freq;
    (T::lit(a.cos()), T::lit(a.sin()))
}

/// Rotary encoding over each head of one row (rotate-half convention).
/// With `inverse`, applies the transposed rotation (used by backward).
pub fn rope_row<T: Scalar>(row: &mut [T], pos: usize, heads: usize, base: f64, inverse: bool) {
    let hd = row.len() / heads;
    let half = hd / 2;
    for h in 0..heads {
        let seg = &mut row[h * hd..(h + 1) * hd];
        for d in 0..half {
            let (c, s) = rope_angle::<T>(pos, d, half, base);
            let s = if inverse { -s } else { s };
            let x1 = seg[d];
            let x2 = seg[d + half];
            seg[d] = x1 * c - x2 * s;
            seg[d + half] = x1 * s + x2 * c;
        }
    }
}

#[inline]
pub fn sigmoid<T: Scalar>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

#[inline]
pub fn silu<T: Scalar>(x: T) -> T {
    x * sigmoid(x)
}

/// Multi-head attention for one query row.
///
/// `key(j)` and `value(j)` return the full-width rows for key index `j`.
/// Softmax weights are appended to `probs` head by head when given.
#[allow(clippy::too_many_arguments)]
pub fn attend_row<'a, T: Scalar>(
    q: &[T],
    keys: &RowKeys,
    heads: usize,
    key: impl Fn(usize) -> &'a [T],
    value: impl Fn(usize) -> &'a [T],
    out: &mut [T],
    scores: &mut Vec<T>,
    mut probs: Option<&mut Vec<T>>,
) {
    let hd = q.len() / heads;
    let scale = T::lit(1.0 / (hd as f64).sqrt());
    for h in 0..heads {
        let r = h * hd..(h + 1) * hd;
        let qh = &q[r.clone()];
        scores.clear();
        for j in keys.iter() {
            let kh = &key(j)[r.clone()];
            let mut s = T::zero();
            for (a, b) in qh.iter().zip(kh) {
                s += *a * *b;
            }
            scores.push(s * scale);
        }
        crate::tensor::softmax_in_place(scores);
        let oh = &mut out[r.clone()];
        oh.iter_mut().for_each(|v| *v = T::zero());
        for (p, j) in scores.iter().zip(keys.iter()) {
            let vh = &value(j)[r.clone()];
            for (o, &v) in oh.iter_mut().zip(vh) {
                *o += *p * v;
            }
        }
        if let Some(pr) = probs.as_deref_mut() {
            pr.extend_from_slice(scores);
        }
    }
}
