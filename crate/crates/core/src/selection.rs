//! Chooses the closed-question hypotheses shown in a task.
//!
//! Candidates are drawn one at a time without replacement with probability
//! proportional to their weight: the odds ratio once a hypothesis has
//! `cold_start_threshold` direct answers, the current maximum odds ratio
//! before that. A drawn candidate whose experiencer set is significantly
//! associated (two-sided Fisher exact test) with an already chosen one is
//! dropped for this task.
//!
//! Sequential weighted draws are realized with exponential keys
//! `ln(u) / w` (Efraimidis-Spirakis): sorting by key gives the same
//! distribution over draw orders as repeated proportional draws.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ranking::Tabulation;
use crate::stats::fisher_exact_two_sided;
use crate::tree::NodeId;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SelectionConfig {
    /// Closed questions per task.
    pub m: usize,
    /// Direct answers below which a hypothesis counts as cold.
    pub cold_start_threshold: u64,
    /// Significance level of the redundancy test.
    pub similarity_alpha: f64,
    pub rng_seed: u64,
}

impl Default for SelectionConfig {
    fn default() -> Self {
        Self {
            m: 10,
            cold_start_threshold: 10,
            similarity_alpha: 0.05,
            rng_seed: 0,
        }
    }
}

impl SelectionConfig {
    pub fn validate(&self) -> Result<(), SelectionError> {
        if self.m == 0 {
            return Err(SelectionError::InvalidConfig("m must be at least 1".into()));
        }
        if self.cold_start_threshold == 0 {
            return Err(SelectionError::InvalidConfig("cold_start_threshold must be positive".into()));
        }
        if !(self.similarity_alpha > 0.0 && self.similarity_alpha < 1.0) {
            return Err(SelectionError::InvalidConfig("similarity_alpha must lie in (0, 1)".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum SelectionError {
    #[error("no candidate hypotheses")]
    NoCandidates,
    #[error("invalid selection config: {0}")]
    InvalidConfig(String),
}

/// Selection weight of every candidate, in input order.
pub fn selection_weights(candidates: &[NodeId], tab: &Tabulation, cfg: &SelectionConfig) -> Vec<f64> {
    let max_p = candidates
        .iter()
        .filter_map(|h| tab.odds_ratio(*h))
        .fold(None, |acc: Option<f64>, p| Some(acc.map_or(p, |m| m.max(p))))
        .unwrap_or(1.0);
    candidates
        .iter()
        .map(|h| {
            if tab.direct_answer_count(*h) >= cfg.cold_start_threshold {
                tab.odds_ratio(*h).unwrap_or(max_p)
            } else {
                max_p
            }
        })
        .collect()
}

/// Indices of `weights` in weighted-without-replacement draw order.
///
/// Weights are normalized by their maximum first, so multiplying every
/// weight by a positive constant leaves the order for a given RNG stream
/// unchanged. Non-positive or non-finite weights are drawn last.
pub fn weighted_draw_order<R: Rng + ?Sized>(weights: &[f64], rng: &mut R) -> Vec<usize> {
    let max = weights
        .iter()
        .copied()
        .filter(|w| w.is_finite() && *w > 0.0)
        .fold(0.0, f64::max);
    let mut keyed: Vec<(f64, usize)> = weights
        .iter()
        .enumerate()
        .map(|(i, &w)| {
            // u in (0, 1]
            let u = 1.0 - rng.random::<f64>();
            let key = if max > 0.0 && w.is_finite() && w > 0.0 {
                u.ln() / (w / max)
            } else {
                f64::NEG_INFINITY
            };
            (key, i)
        })
        .collect();
    keyed.sort_by(|x, y| y.0.total_cmp(&x.0).then(x.1.cmp(&y.1)));
    keyed.into_iter().map(|(_, i)| i).collect()
}

/// Two-sided Fisher p-value for the association between the sets of workers
/// who experienced `h_i` and `h_j`, over workers who gave a
/// consistent/inconsistent verdict on both. No common respondents gives 1.
pub fn experiencer_overlap_test(h_i: NodeId, h_j: NodeId, tab: &Tabulation) -> f64 {
    let (Some(ri), Some(rj)) = (tab.responses(h_i), tab.responses(h_j)) else {
        return 1.0;
    };
    let (small, large, flipped) = if ri.len() <= rj.len() { (ri, rj, false) } else { (rj, ri, true) };
    let mut cells = [0u64; 4];
    for (worker, &exp_small) in small {
        if let Some(&exp_large) = large.get(worker) {
            let (ei, ej) = if flipped { (exp_large, exp_small) } else { (exp_small, exp_large) };
            let idx = match (ei, ej) {
                (true, true) => 0,
                (true, false) => 1,
                (false, true) => 2,
                (false, false) => 3,
            };
            cells[idx] += 1;
        }
    }
    if cells.iter().sum::<u64>() == 0 {
        return 1.0;
    }
    fisher_exact_two_sided(cells[0], cells[1], cells[2], cells[3])
}

/// Draws up to `cfg.m` distinct hypotheses from `candidates`.
pub fn select_closed_set<R: Rng + ?Sized>(
    candidates: &[NodeId],
    tab: &Tabulation,
    cfg: &SelectionConfig,
    rng: &mut R,
) -> Result<Vec<NodeId>, SelectionError> {
    cfg.validate()?;
    if candidates.is_empty() {
        return Err(SelectionError::NoCandidates);
    }
    let mut unique = Vec::with_capacity(candidates.len());
    let mut seen = std::collections::HashSet::with_capacity(candidates.len());
    for h in candidates {
        if seen.insert(*h) {
            unique.push(*h);
        }
    }

    let weights = selection_weights(&unique, tab, cfg);
    let mut chosen: Vec<NodeId> = Vec::with_capacity(cfg.m.min(unique.len()));
    for idx in weighted_draw_order(&weights, rng) {
        if chosen.len() == cfg.m {
            break;
        }
        let h = unique[idx];
        let redundant = chosen
            .iter()
            .any(|c| experiencer_overlap_test(h, *c, tab) < cfg.similarity_alpha);
        if !redundant {
            chosen.push(h);
        }
    }
    Ok(chosen)
}

/// `select_closed_set` driven by `cfg.rng_seed`.
pub fn select_closed_set_seeded(
    candidates: &[NodeId],
    tab: &Tabulation,
    cfg: &SelectionConfig,
) -> Result<Vec<NodeId>, SelectionError> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.rng_seed);
    select_closed_set(candidates, tab, cfg, &mut rng)
}
