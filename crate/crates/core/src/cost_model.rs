//! Attention and linear-layer cost of scoring `N` items against one query.
//!
//! Two families of expressions:
//!
//! * proportional: a length-`L` causal prefill costs `L^2` attention
//!   and `L` linear, architecture constants dropped;
//! * exact-causal: the same prefill attends `L(L+1)/2` query/key pairs. This
//!   is what the engine counts, and what [`exact_naive`] and
//!   [`exact_prefix_cached`] return.
//!
//! A suffix of length `l` behind a cached prefix of `T_q` costs `l*T_q` pairs
//! against the prefix plus `l(l+1)/2` among its own rows; its `L^2` analogue
//! is `2*l*T_q + l^2`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CostParams {
    /// Shared prefix tokens.
    pub t_q: u64,
    /// Full item tokens.
    pub t_i: u64,
    /// Items per query.
    pub n_i: u64,
    /// Compression factor; 1 means full text.
    pub k: u64,
}

impl CostParams {
    pub fn validate(&self) -> Result<()> {
        if self.t_q == 0 || self.t_i == 0 || self.n_i == 0 || self.k == 0 {
            return Err(Error::Input(format!("cost parameters must be positive: {self:?}")));
        }
        Ok(())
    }

    /// Item footprint after compression, rounded up to whole tokens.
    pub fn compressed_len(&self) -> u64 {
        self.t_i.div_ceil(self.k)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Regime {
    /// Every item prefilled with its own copy of the prefix.
    Naive,
    /// Prefix prefilled once, full-text items as suffixes.
    AmortizedFull,
    /// Prefix prefilled once, compressed items as suffixes.
    AmortizedMixlm,
}

impl Regime {
    pub const ALL: [Regime; 3] = [Regime::Naive, Regime::AmortizedFull, Regime::AmortizedMixlm];

    pub fn name(&self) -> &'static str {
        match self {
            Regime::Naive => "naive",
            Regime::AmortizedFull => "amortized_full",
            Regime::AmortizedMixlm => "amortized_mixlm",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Cost {
    pub attention: u64,
    pub linear: u64,
}

/// Proportional cost.
pub fn predict(p: &CostParams, regime: Regime) -> Cost {
    let (q, n) = (p.t_q, p.n_i);
    let amortized = |l: u64| Cost {
        attention: q * q + n * (2 * l * q + l * l),
        linear: q + n * l,
    };
    match regime {
        Regime::Naive => Cost {
            attention: n * (q + p.t_i).pow(2),
            linear: n * (q + p.t_i),
        },
        Regime::AmortizedFull => amortized(p.t_i),
        Regime::AmortizedMixlm => amortized(p.compressed_len()),
    }
}

fn tri(l: u64) -> u64 {
    l * (l + 1) / 2
}

/// Exact pair and row counts when each item is prefilled behind its own copy
/// of the prefix.
pub fn exact_naive(t_q: u64, lens: &[u64]) -> Cost {
    Cost {
        attention: lens.iter().map(|&l| tri(t_q + l)).sum(),
        linear: lens.iter().map(|&l| t_q + l).sum(),
    }
}

/// Exact counts with the prefix prefilled once. Multi-item masking attends
/// the same pairs, so this also covers that mode.
pub fn exact_prefix_cached(t_q: u64, lens: &[u64]) -> Cost {
    Cost {
        attention: tri(t_q) + lens.iter().map(|&l| l * t_q + tri(l)).sum::<u64>(),
        linear: t_q + lens.iter().sum::<u64>(),
    }
}

/// Exact counts for uniform items under a regime.
pub fn exact(p: &CostParams, regime: Regime) -> Cost {
    let n = p.n_i as usize;
    match regime {
        Regime::Naive => exact_naive(p.t_q, &vec![p.t_i; n]),
        Regime::AmortizedFull => exact_prefix_cached(p.t_q, &vec![p.t_i; n]),
        Regime::AmortizedMixlm => exact_prefix_cached(p.t_q, &vec![p.compressed_len(); n]),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Speedup {
    pub attention: f64,
    pub linear: f64,
}

/// Cost of `a` divided by cost of `b`, proportional forms.
pub fn speedup(p: &CostParams, a: Regime, b: Regime) -> Result<Speedup> {
    p.validate()?;
    let (ca, cb) = (predict(p, a), predict(p, b));
    if cb.attention == 0 || cb.linear == 0 {
        return Err(Error::Input("zero cost in denominator".into()));
    }
    Ok(Speedup {
        attention: ca.attention as f64 / cb.attention as f64,
        linear: ca.linear as f64 / cb.linear as f64,
    })
}
