//! Loss terms: Gaussian reconstruction NLL, closed-form diagonal-Gaussian KL,
//! the per-step evidence bound, the pattern reconstruction error and their
//! weighted total.
//!
//! Plain `f64` versions sit at the top level; [`graph`] records the same
//! formulas into an autodiff graph for training.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::backbone::GaussianParams;
use crate::error::{Error, Result};

/// `0.5 * Σ_d [logvar_d + (x_d − mu_d)² / exp(logvar_d) + log 2π]`.
pub fn gaussian_nll(x: &[f64], dist: &GaussianParams) -> f64 {
    x.iter()
        .zip(&dist.mu)
        .zip(&dist.logvar)
        .map(|((x, m), lv)| 0.5 * (lv + (x - m).powi(2) * (-lv).exp() + (2.0 * PI).ln()))
        .sum()
}

/// `KL(q ‖ p)` between diagonal Gaussians.
pub fn kl_diag_gaussians(q: &GaussianParams, p: &GaussianParams) -> f64 {
    (0..q.mu.len())
        .map(|d| {
            let (mq, lq, mp, lp) = (q.mu[d], q.logvar[d], p.mu[d], p.logvar[d]);
            0.5 * (lp - lq + (lq.exp() + (mq - mp).powi(2)) / lp.exp() - 1.0)
        })
        .sum()
}

/// Per-step terms of one agent that contribute to the evidence bound.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepTerms {
    pub nll: f64,
    pub kl: f64,
}

/// Mean over contributing (agent, step) pairs of `nll + kl_weight * kl`.
pub fn cvae_loss(terms: &[StepTerms], kl_weight: f64) -> Result<f64> {
    if terms.is_empty() {
        return Err(Error::Invalid("evidence bound has no contributing steps".into()));
    }
    let sum: f64 = terms.iter().map(|t| t.nll + kl_weight * t.kl).sum();
    Ok(sum / terms.len() as f64)
}

/// Mean squared error over present (agent, step, element) entries.
/// `truth[a][s]` and `pred[a][s]` are flattened patterns; `mask[a]` selects
/// the agents that count.
pub fn pattern_loss(truth: &[Vec<Vec<f64>>], pred: &[Vec<Vec<f64>>], mask: &[bool]) -> Result<f64> {
    let mut sum = 0.0;
    let mut count = 0usize;
    for ((t, p), _) in truth.iter().zip(pred).zip(mask).filter(|(_, &m)| m) {
        for (ts, ps) in t.iter().zip(p) {
            if ts.len() != ps.len() {
                return Err(Error::Invalid("pattern shapes differ".into()));
            }
            sum += ts.iter().zip(ps).map(|(a, b)| (a - b).powi(2)).sum::<f64>();
            count += ts.len();
        }
    }
    if count == 0 {
        return Err(Error::Invalid("pattern loss over an empty mask".into()));
    }
    Ok(sum / count as f64)
}

/// Relative weights of the loss terms.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub kl: f64,
    pub pattern: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { kl: 1.0, pattern: 1.0 }
    }
}

/// Component values of one loss evaluation. `nll` and `kl` are means over
/// `pairs` (agent, step) pairs; `pattern_mse` is a mean over
/// `pattern_elements` entries.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub nll: f64,
    pub kl: f64,
    pub pattern_mse: f64,
    pub total: f64,
    pub pairs: usize,
    pub pattern_elements: usize,
}

impl LossBreakdown {
    pub fn cvae(&self, weights: LossWeights) -> f64 {
        self.nll + weights.kl * self.kl
    }

    pub fn is_finite(&self) -> bool {
        [self.nll, self.kl, self.pattern_mse, self.total].iter().all(|v| v.is_finite())
    }

    /// Element-weighted average of several breakdowns.
    pub fn average<'a>(items: impl IntoIterator<Item = &'a LossBreakdown>) -> LossBreakdown {
        let mut out = LossBreakdown::default();
        let mut n = 0usize;
        for b in items {
            out.nll += b.nll;
            out.kl += b.kl;
            out.pattern_mse += b.pattern_mse;
            out.total += b.total;
            out.pairs += b.pairs;
            out.pattern_elements += b.pattern_elements;
            n += 1;
        }
        if n > 0 {
            let k = n as f64;
            out.nll /= k;
            out.kl /= k;
            out.pattern_mse /= k;
            out.total /= k;
        }
        out
    }
}

/// Assembles the total `cvae + pattern_weight * pattern_mse`.
pub fn total_loss(nll: f64, kl: f64, pattern_mse: f64, weights: LossWeights) -> LossBreakdown {
    LossBreakdown {
        nll,
        kl,
        pattern_mse,
        total: nll + weights.kl * kl + weights.pattern * pattern_mse,
        pairs: 0,
        pattern_elements: 0,
    }
}

/// Differentiable versions recorded into a graph.
pub mod graph {
    use std::f64::consts::PI;

    use patternrnn_autodiff::{Graph, Tensor, Var};

    use crate::backbone::Gaussian;
    use crate::error::Result;

    /// Elementwise NLL terms `[N, D]` of `x` under `dist`.
    pub fn gaussian_nll(g: &mut Graph, x: Var, dist: Gaussian) -> Result<Var> {
        let resid = g.sub(x, dist.mu)?;
        let sq = g.mul(resid, resid)?;
        let neg = g.scale(dist.logvar, -1.0);
        let prec = g.exp(neg);
        let scaled = g.mul(sq, prec)?;
        let inner = g.add(scaled, dist.logvar)?;
        Ok(g.affine(inner, 0.5, 0.5 * (2.0 * PI).ln()))
    }

    /// Elementwise KL terms `[N, d_z]` of `KL(q ‖ p)`.
    pub fn kl_diag(g: &mut Graph, q: Gaussian, p: Gaussian) -> Result<Var> {
        let var_q = g.exp(q.logvar);
        let dm = g.sub(q.mu, p.mu)?;
        let dm2 = g.mul(dm, dm)?;
        let num = g.add(var_q, dm2)?;
        let neg = g.scale(p.logvar, -1.0);
        let prec = g.exp(neg);
        let ratio = g.mul(num, prec)?;
        let dl = g.sub(p.logvar, q.logvar)?;
        let inner = g.add(ratio, dl)?;
        Ok(g.affine(inner, 0.5, -0.5))
    }

    /// Sum of the rows of `v` (`[N, W]`) selected by `mask`.
    pub fn masked_sum(g: &mut Graph, v: Var, mask: &[bool]) -> Result<Var> {
        let shape = g.shape(v).to_vec();
        let width = shape[1];
        let weights: Vec<f64> = mask
            .iter()
            .flat_map(|&m| std::iter::repeat_n(if m { 1.0 } else { 0.0 }, width))
            .collect();
        let w = g.constant(Tensor::new(shape, weights)?);
        let prod = g.mul(v, w)?;
        Ok(g.sum(prod))
    }
}
