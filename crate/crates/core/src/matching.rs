//! Macro (dot-product) and micro (time-sensitive co-attention) matching.
//!
//! Macro matching scores a pair with the two directional propensities
//! `p_u · f_v + p_v · f_u`. Micro matching builds the per-position matching
//! matrix `G = P̃ F̃ᵀ` between one side's active micro states and the other
//! side's passive micro states and aggregates it with two attention
//! vectors: `γ` over passive positions (keyed by the active user's original
//! active embedding) and `δ` over active positions (keyed by the passive
//! user's original passive embedding plus a learned bias indexed by distance
//! from the most recent event).

use serde::{Deserialize, Serialize};

use crate::encoder::EncoderOutput;
use crate::error::{Error, Result};
use crate::numerics::{dot, softmax_all, Matrix};

/// How the micro matching matrix is reduced to a score.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MicroAggregation {
    /// Co-attention with the relative time bias.
    TimeSensitive,
    /// Uniform weights over valid positions (ablation).
    Mean,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DirectionalScores {
    /// U → V propensity.
    pub fwd: f64,
    /// V → U propensity.
    pub bwd: f64,
    pub total: f64,
}

impl DirectionalScores {
    pub fn new(fwd: f64, bwd: f64) -> Self {
        DirectionalScores {
            fwd,
            bwd,
            total: fwd + bwd,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MatchScores {
    pub macro_level: DirectionalScores,
    /// `None` when either user's history is empty.
    pub micro_level: Option<DirectionalScores>,
}

pub(crate) struct MicroForward {
    pub score: f64,
    pub gamma: Vec<f64>,
    pub delta: Vec<f64>,
}

/// Relative time bias for a sequence of `len` valid events: the most recent
/// position receives `alpha[0]`, the one before it `alpha[1]`, and so on.
pub fn relative_time_bias(alpha: &[f64], len: usize) -> Vec<f64> {
    (0..len).map(|pos| alpha[len - 1 - pos]).collect()
}

/// Shared forward kernel. Reads `sa` active rows of `active` starting at
/// `a0` and `sb` passive rows of `passive` starting at `b0`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn ti_sensi_forward(
    active: &Matrix,
    a0: usize,
    sa: usize,
    passive: &Matrix,
    b0: usize,
    sb: usize,
    e_p: &[f64],
    e_f: &[f64],
    alpha: &[f64],
    mode: MicroAggregation,
) -> MicroForward {
    let mut g = vec![0.0; sa * sb];
    for a in 0..sa {
        let pa = active.row(a0 + a);
        for b in 0..sb {
            g[a * sb + b] = dot(pa, passive.row(b0 + b));
        }
    }
    let (gamma, delta) = match mode {
        MicroAggregation::Mean => (vec![1.0 / sb as f64; sb], vec![1.0 / sa as f64; sa]),
        MicroAggregation::TimeSensitive => {
            let mut gamma: Vec<f64> = (0..sb).map(|b| dot(passive.row(b0 + b), e_p)).collect();
            softmax_all(&mut gamma);
            let mut delta: Vec<f64> = (0..sa)
                .map(|a| dot(active.row(a0 + a), e_f) + alpha[sa - 1 - a])
                .collect();
            softmax_all(&mut delta);
            (gamma, delta)
        }
    };
    let mut score = 0.0;
    for a in 0..sa {
        let row = &g[a * sb..(a + 1) * sb];
        score += delta[a] * dot(row, &gamma);
    }
    MicroForward { score, gamma, delta }
}

fn check_dims(ctx: &str, d: usize, vs: &[&[f64]]) -> Result<()> {
    for v in vs {
        if v.len() != d {
            return Err(Error::shape(ctx, d, v.len()));
        }
    }
    Ok(())
}

/// Two-direction dot-product score.
pub fn macro_score(p_u: &[f64], f_v: &[f64], p_v: &[f64], f_u: &[f64]) -> Result<DirectionalScores> {
    check_dims("macro_score", p_u.len(), &[f_v, p_v, f_u])?;
    Ok(DirectionalScores::new(dot(p_u, f_v), dot(p_v, f_u)))
}

/// Single-direction micro score between an active micro matrix and a passive
/// one. Only the first `valid_p` / `valid_f` rows take part.
#[allow(clippy::too_many_arguments)]
pub fn ti_sensi_match(
    p_micro: &Matrix,
    f_micro: &Matrix,
    e_p: &[f64],
    e_f: &[f64],
    alpha: &[f64],
    valid_p: usize,
    valid_f: usize,
    mode: MicroAggregation,
) -> Result<f64> {
    if valid_p == 0 || valid_f == 0 {
        return Err(Error::MicroUndefined);
    }
    let d = p_micro.cols();
    if f_micro.cols() != d {
        return Err(Error::shape("ti_sensi_match", d, f_micro.cols()));
    }
    check_dims("ti_sensi_match embeddings", d, &[e_p, e_f])?;
    if valid_p > p_micro.rows() || valid_f > f_micro.rows() || valid_p > alpha.len() {
        return Err(Error::InvalidArgument(format!(
            "valid lengths ({valid_p}, {valid_f}) exceed micro rows ({}, {}) or time weights ({})",
            p_micro.rows(),
            f_micro.rows(),
            alpha.len()
        )));
    }
    Ok(ti_sensi_forward(p_micro, 0, valid_p, f_micro, 0, valid_f, e_p, e_f, alpha, mode).score)
}

/// Everything matching needs about one user at one point in time.
#[derive(Clone, Debug)]
pub struct UserEncoding {
    pub active: EncoderOutput,
    pub passive: EncoderOutput,
    /// Original (table) active embedding.
    pub e_p: Vec<f64>,
    /// Original (table) passive embedding.
    pub e_f: Vec<f64>,
}

/// Learned relative-time weights, one vector per matching direction.
#[derive(Clone, Debug)]
pub struct TimeWeights {
    pub u_to_v: Vec<f64>,
    pub v_to_u: Vec<f64>,
}

fn directional_micro(
    active: &UserEncoding,
    passive: &UserEncoding,
    alpha: &[f64],
    mode: MicroAggregation,
) -> Result<f64> {
    ti_sensi_match(
        &active.active.micro,
        &passive.passive.micro,
        &active.e_p,
        &passive.e_f,
        alpha,
        active.active.valid_len,
        passive.passive.valid_len,
        mode,
    )
}

pub fn micro_score(
    u: &UserEncoding,
    v: &UserEncoding,
    alpha: &TimeWeights,
    mode: MicroAggregation,
) -> Result<DirectionalScores> {
    let fwd = directional_micro(u, v, &alpha.u_to_v, mode)?;
    let bwd = directional_micro(v, u, &alpha.v_to_u, mode)?;
    Ok(DirectionalScores::new(fwd, bwd))
}

pub fn match_scores(
    u: &UserEncoding,
    v: &UserEncoding,
    alpha: &TimeWeights,
    mode: MicroAggregation,
) -> Result<MatchScores> {
    let macro_level = macro_score(
        &u.active.macro_vec,
        &v.passive.macro_vec,
        &v.active.macro_vec,
        &u.passive.macro_vec,
    )?;
    let micro_level = match micro_score(u, v, alpha, mode) {
        Ok(s) => Some(s),
        Err(Error::MicroUndefined) => None,
        Err(e) => return Err(e),
    };
    Ok(MatchScores {
        macro_level,
        micro_level,
    })
}

/// Negative-instance scores for one positive pair. Index `k` of both arrays
/// corresponds to replacing one element of the positive score:
/// 0: `p_u → p_u'`, 1: `f_u → f_u'`, 2: `p_v → p_v'`, 3: `f_v → f_v'`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NegativeScores {
    pub macro_level: [f64; 4],
    pub micro_level: Option<[f64; 4]>,
}

pub fn expand_negative_scores(
    u: &UserEncoding,
    v: &UserEncoding,
    neg_u: &UserEncoding,
    neg_v: &UserEncoding,
    alpha: &TimeWeights,
    mode: MicroAggregation,
) -> Result<NegativeScores> {
    let y = |pu: &UserEncoding, fu: &UserEncoding, pv: &UserEncoding, fv: &UserEncoding| {
        macro_score(
            &pu.active.macro_vec,
            &fv.passive.macro_vec,
            &pv.active.macro_vec,
            &fu.passive.macro_vec,
        )
        .map(|s| s.total)
    };
    let macro_level = [
        y(neg_u, u, v, v)?,
        y(u, neg_u, v, v)?,
        y(u, u, neg_v, v)?,
        y(u, u, v, neg_v)?,
    ];
    let z = |pu: &UserEncoding, fu: &UserEncoding, pv: &UserEncoding, fv: &UserEncoding| -> Result<f64> {
        Ok(directional_micro(pu, fv, &alpha.u_to_v, mode)? + directional_micro(pv, fu, &alpha.v_to_u, mode)?)
    };
    let micro = (|| -> Result<[f64; 4]> {
        Ok([
            z(neg_u, u, v, v)?,
            z(u, neg_u, v, v)?,
            z(u, u, neg_v, v)?,
            z(u, u, v, neg_v)?,
        ])
    })();
    let micro_level = match micro {
        Ok(m) => Some(m),
        Err(Error::MicroUndefined) => None,
        Err(e) => return Err(e),
    };
    Ok(NegativeScores {
        macro_level,
        micro_level,
    })
}
