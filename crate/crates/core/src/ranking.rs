//! Per-hypothesis cross-tabulation of closed-question answers and the
//! odds-ratio ranking built on it.
//!
//! A consistent/inconsistent verdict on a node counts for that node and for
//! every ancestor below the root. Nonsense verdicts stay on the answered node
//! and only feed the spam exclusion rule.

use std::cmp::Ordering;
use std::collections::{HashMap, HashSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tree::{HypothesisTree, NodeId, TreeError};
use crate::WorkerId;

/// Nonsense votes at or above this count exclude a hypothesis.
pub const NONSENSE_EXCLUSION_THRESHOLD: u64 = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ConditionLabel {
    Positive,
    Negative,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Verdict {
    Consistent,
    Inconsistent,
    Nonsense,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClosedAnswer {
    pub worker: WorkerId,
    pub hypothesis: NodeId,
    pub verdict: Verdict,
}

/// Condition x experience counts:
/// `a` positive & consistent, `b` positive & inconsistent,
/// `c` negative & consistent, `d` negative & inconsistent.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CrossTab {
    pub a: u64,
    pub b: u64,
    pub c: u64,
    pub d: u64,
}

impl CrossTab {
    pub fn new(a: u64, b: u64, c: u64, d: u64) -> Self {
        Self { a, b, c, d }
    }

    pub fn total(&self) -> u64 {
        self.a + self.b + self.c + self.d
    }

    fn increment(&mut self, condition: ConditionLabel, verdict: Verdict) {
        match (condition, verdict) {
            (ConditionLabel::Positive, Verdict::Consistent) => self.a += 1,
            (ConditionLabel::Positive, Verdict::Inconsistent) => self.b += 1,
            (ConditionLabel::Negative, Verdict::Consistent) => self.c += 1,
            (ConditionLabel::Negative, Verdict::Inconsistent) => self.d += 1,
            (_, Verdict::Nonsense) => {}
        }
    }

    pub fn odds_ratio(&self) -> Result<f64, RankingError> {
        odds_ratio(self)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum RankingError {
    #[error("no data: cross-tabulation is all zero")]
    NoData,
    #[error("worker {0} already answered hypothesis {1}")]
    DuplicateAnswer(WorkerId, NodeId),
    #[error("worker {0} has no recorded condition")]
    UnknownWorker(WorkerId),
    #[error("the root node cannot be voted on")]
    RootVote,
    #[error(transparent)]
    Tree(#[from] TreeError),
}

/// (a/b)/(c/d), with +0.5 added to every cell when any cell is zero.
pub fn odds_ratio(t: &CrossTab) -> Result<f64, RankingError> {
    if t.total() == 0 {
        return Err(RankingError::NoData);
    }
    let cells = [t.a, t.b, t.c, t.d].map(|x| x as f64);
    let [a, b, c, d] = if cells.contains(&0.0) {
        cells.map(|x| x + 0.5)
    } else {
        cells
    };
    Ok((a * d) / (b * c))
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
struct NodeTally {
    crosstab: CrossTab,
    /// Consistent/inconsistent answers given on this node itself.
    direct: u64,
    nonsense: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedHypothesis {
    pub hypothesis: NodeId,
    pub text: String,
    pub crosstab: CrossTab,
    #[serde(with = "crate::stats::lenient_f64")]
    pub odds_ratio: f64,
    pub answer_count: u64,
    pub nonsense_count: u64,
    pub excluded: bool,
}

/// Tabulation state for one campaign.
#[derive(Debug, Clone, Default)]
pub struct Tabulation {
    conditions: HashMap<WorkerId, ConditionLabel>,
    worker_index: HashMap<WorkerId, u32>,
    tallies: Vec<NodeTally>,
    /// Per node: worker index -> experienced (consistent) for direct answers.
    responses: Vec<HashMap<u32, bool>>,
    answered: HashSet<(u32, NodeId)>,
    log: Vec<ClosedAnswer>,
}

impl Tabulation {
    pub fn new() -> Self {
        Self::default()
    }

    /// Records the worker's condition. The first label wins; returns whether
    /// this call stored it.
    pub fn record_condition(&mut self, worker: &WorkerId, label: ConditionLabel) -> bool {
        if self.conditions.contains_key(worker) {
            return false;
        }
        self.conditions.insert(worker.clone(), label);
        let next = self.worker_index.len() as u32;
        self.worker_index.entry(worker.clone()).or_insert(next);
        true
    }

    pub fn condition(&self, worker: &WorkerId) -> Option<ConditionLabel> {
        self.conditions.get(worker).copied()
    }

    pub fn has_answered(&self, worker: &WorkerId, hypothesis: NodeId) -> bool {
        self.worker_index
            .get(worker)
            .is_some_and(|w| self.answered.contains(&(*w, hypothesis)))
    }

    /// Checks every precondition of `record_closed_answer` without mutating.
    pub fn validate_answer(&self, answer: &ClosedAnswer, tree: &HypothesisTree) -> Result<(), RankingError> {
        tree.get(answer.hypothesis)?;
        if answer.hypothesis == tree.root() {
            return Err(RankingError::RootVote);
        }
        if !self.conditions.contains_key(&answer.worker) {
            return Err(RankingError::UnknownWorker(answer.worker.clone()));
        }
        if self.has_answered(&answer.worker, answer.hypothesis) {
            return Err(RankingError::DuplicateAnswer(answer.worker.clone(), answer.hypothesis));
        }
        Ok(())
    }

    fn ensure_len(&mut self, n: usize) {
        if self.tallies.len() < n {
            self.tallies.resize(n, NodeTally::default());
            self.responses.resize_with(n, HashMap::new);
        }
    }

    pub fn record_closed_answer(&mut self, answer: ClosedAnswer, tree: &HypothesisTree) -> Result<(), RankingError> {
        self.validate_answer(&answer, tree)?;
        let condition = self.conditions[&answer.worker];
        let worker = self.worker_index[&answer.worker];
        self.ensure_len(tree.len());

        let node = answer.hypothesis;
        self.answered.insert((worker, node));
        match answer.verdict {
            Verdict::Nonsense => self.tallies[node.0 as usize].nonsense += 1,
            verdict => {
                let tally = &mut self.tallies[node.0 as usize];
                tally.direct += 1;
                tally.crosstab.increment(condition, verdict);
                self.responses[node.0 as usize].insert(worker, verdict == Verdict::Consistent);
                for ancestor in tree.hypothesis_ancestors(node)? {
                    self.tallies[ancestor.0 as usize].crosstab.increment(condition, verdict);
                }
            }
        }
        self.log.push(answer);
        Ok(())
    }

    fn tally(&self, node: NodeId) -> NodeTally {
        self.tallies.get(node.0 as usize).copied().unwrap_or_default()
    }

    pub fn crosstab(&self, node: NodeId) -> CrossTab {
        self.tally(node).crosstab
    }

    /// Non-nonsense answers attributed to the node, propagated ones included.
    pub fn answer_count(&self, node: NodeId) -> u64 {
        self.tally(node).crosstab.total()
    }

    /// Consistent/inconsistent answers given on the node itself.
    pub fn direct_answer_count(&self, node: NodeId) -> u64 {
        self.tally(node).direct
    }

    pub fn nonsense_count(&self, node: NodeId) -> u64 {
        self.tally(node).nonsense
    }

    pub fn is_excluded(&self, node: NodeId) -> bool {
        self.nonsense_count(node) >= NONSENSE_EXCLUSION_THRESHOLD
    }

    /// Current odds ratio, if the node has any data.
    pub fn odds_ratio(&self, node: NodeId) -> Option<f64> {
        odds_ratio(&self.crosstab(node)).ok()
    }

    /// Direct respondents of `node` as (worker index, experienced) pairs.
    pub(crate) fn responses(&self, node: NodeId) -> Option<&HashMap<u32, bool>> {
        self.responses.get(node.0 as usize)
    }

    /// The closed-answer log in recording order.
    pub fn answer_log(&self) -> &[ClosedAnswer] {
        &self.log
    }

    fn summary(&self, tree: &HypothesisTree, node: NodeId) -> RankedHypothesis {
        let t = self.tally(node);
        RankedHypothesis {
            hypothesis: node,
            text: tree.get(node).map(|n| n.text.clone()).unwrap_or_default(),
            crosstab: t.crosstab,
            odds_ratio: odds_ratio(&t.crosstab).unwrap_or(f64::NAN),
            answer_count: t.crosstab.total(),
            nonsense_count: t.nonsense,
            excluded: t.nonsense >= NONSENSE_EXCLUSION_THRESHOLD,
        }
    }

    /// Non-excluded hypotheses with at least `min_answers` answers (and at
    /// least one), by odds ratio descending, then answer count descending,
    /// then id ascending.
    pub fn rank_hypotheses(&self, tree: &HypothesisTree, min_answers: u64) -> Vec<RankedHypothesis> {
        let min_answers = min_answers.max(1);
        let mut out: Vec<RankedHypothesis> = tree
            .nodes()
            .iter()
            .skip(1)
            .map(|n| self.summary(tree, n.id))
            .filter(|r| !r.excluded && r.answer_count >= min_answers)
            .collect();
        out.sort_by(ranking_order);
        out
    }

    /// CSV of every hypothesis that received any answer: ranked rows first,
    /// then excluded ones. Odds ratios carry 6 decimals and are empty when the
    /// node only received nonsense votes.
    pub fn export_csv(&self, tree: &HypothesisTree) -> Result<String, csv::Error> {
        let mut rows = self.rank_hypotheses(tree, 1);
        let mut excluded: Vec<RankedHypothesis> = tree
            .nodes()
            .iter()
            .skip(1)
            .map(|n| self.summary(tree, n.id))
            .filter(|r| r.excluded)
            .collect();
        excluded.sort_by(|x, y| match (x.odds_ratio.is_nan(), y.odds_ratio.is_nan()) {
            (false, true) => Ordering::Less,
            (true, false) => Ordering::Greater,
            (true, true) => x.hypothesis.cmp(&y.hypothesis),
            (false, false) => ranking_order(x, y),
        });
        rows.extend(excluded);

        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record([
            "hypothesis_id",
            "text",
            "a",
            "b",
            "c",
            "d",
            "odds_ratio",
            "answer_count",
            "nonsense_count",
            "excluded",
        ])?;
        for r in rows {
            let or = if r.odds_ratio.is_nan() {
                String::new()
            } else {
                format!("{:.6}", r.odds_ratio)
            };
            w.write_record([
                r.hypothesis.to_string(),
                r.text,
                r.crosstab.a.to_string(),
                r.crosstab.b.to_string(),
                r.crosstab.c.to_string(),
                r.crosstab.d.to_string(),
                or,
                r.answer_count.to_string(),
                r.nonsense_count.to_string(),
                r.excluded.to_string(),
            ])?;
        }
        let bytes = w.into_inner().map_err(|e| e.into_error())?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }
}

fn ranking_order(x: &RankedHypothesis, y: &RankedHypothesis) -> Ordering {
    y.odds_ratio
        .total_cmp(&x.odds_ratio)
        .then(y.answer_count.cmp(&x.answer_count))
        .then(x.hypothesis.cmp(&y.hypothesis))
}
