//! Hypothesis generation and ranking task: one task carries the outcome
//! question (PSQI form plus the direct question), the open question over the
//! current tree, and the closed questions chosen by the selection module.
//! Every submission updates the tree and the cross-tabulations immediately,
//! so a best-effort ranking exists at any moment.
//!
//! Operations are split into a validating `plan`/`validate` step and an
//! infallible `apply` step so the event store can log an event before it
//! mutates state.

use std::collections::{HashMap, HashSet};
use std::fmt;
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::psqi::{condition_label_with, score_psqi, ConditionRule, PsqiError, PsqiResponse};
use crate::ranking::{ClosedAnswer, RankedHypothesis, Tabulation, Verdict};
use crate::selection::{select_closed_set, SelectionConfig, SelectionError};
use crate::tree::{HypothesisTree, NodeId, TreeError, SYSTEM_AUTHOR};
use crate::WorkerId;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct TaskId(pub u64);

impl fmt::Display for TaskId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Phase1Config {
    /// Text of the synthetic root node (the outcome).
    pub root_text: String,
    pub outcome_prompt: String,
    pub open_prompt: String,
    /// Identifier of the questionnaire form shown with the outcome question.
    pub psqi_form: String,
    pub starter_hypotheses: Vec<String>,
    /// Outstanding tasks expire after this many time units.
    pub task_ttl: Option<u64>,
    pub max_tasks_per_worker: Option<u32>,
    pub condition_rule: ConditionRule,
    /// Minimum answer count for a hypothesis to appear in reports.
    pub min_answers: u64,
}

impl Default for Phase1Config {
    fn default() -> Self {
        Self {
            root_text: "causes of good sleep".into(),
            outcome_prompt: "Do you sleep well?".into(),
            open_prompt: "What do you think is a possible cause of good sleep?".into(),
            psqi_form: "psqi".into(),
            starter_hypotheses: Vec::new(),
            task_ttl: None,
            max_tasks_per_worker: None,
            condition_rule: ConditionRule::DirectQuestion,
            min_answers: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OutcomeQuestion {
    pub prompt: String,
    pub form: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OpenQuestion {
    pub prompt: String,
    /// Tree snapshot at issue time.
    pub tree: Arc<HypothesisTree>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClosedQuestion {
    pub hypothesis: NodeId,
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Phase1Task {
    pub task_id: TaskId,
    pub worker_id: WorkerId,
    pub issued_at: u64,
    pub outcome_question: OutcomeQuestion,
    pub open_question: OpenQuestion,
    pub closed_questions: Vec<ClosedQuestion>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NewHypothesis {
    pub parent_id: NodeId,
    pub text: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct VerdictEntry {
    pub hypothesis: NodeId,
    pub verdict: Verdict,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Phase1Submission {
    pub task_id: TaskId,
    pub psqi_response: PsqiResponse,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub new_hypothesis: Option<NewHypothesis>,
    #[serde(default)]
    pub closed_verdicts: Vec<VerdictEntry>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SubmissionAck {
    pub task_id: TaskId,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub new_hypothesis: Option<NodeId>,
}

/// The logged fact that a task was handed to a worker.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskIssued {
    pub task_id: TaskId,
    pub worker_id: WorkerId,
    pub issued_at: u64,
    pub closed: Vec<NodeId>,
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum Phase1Error {
    #[error("campaign is closed")]
    CampaignClosed,
    #[error("worker {0} reached the task limit")]
    TaskLimit(WorkerId),
    #[error("unknown task {0}")]
    UnknownTask(TaskId),
    #[error("task {0} was already submitted")]
    DuplicateSubmission(TaskId),
    #[error("task {0} expired")]
    TaskExpired(TaskId),
    #[error("verdicts do not match the task's closed questions: {0}")]
    VerdictMismatch(String),
    #[error("malformed questionnaire: {0}")]
    Psqi(#[from] PsqiError),
    #[error("invalid hypothesis: {0}")]
    Tree(#[from] TreeError),
    #[error(transparent)]
    Selection(#[from] SelectionError),
    #[error("worker {0} already answered hypothesis {1}")]
    DuplicateAnswer(WorkerId, NodeId),
}

#[derive(Debug, Clone)]
struct Outstanding {
    task_id: TaskId,
    issued_at: u64,
    closed: Vec<NodeId>,
}

/// What `next_task` needs to do: hand back a still-valid task, or issue a new one.
#[derive(Debug, Clone)]
pub enum TaskPlan {
    Existing(Phase1Task),
    Issue(TaskIssued),
}

#[derive(Debug, Clone)]
pub struct Phase1Engine {
    cfg: Phase1Config,
    selection: SelectionConfig,
    tree: Arc<HypothesisTree>,
    tab: Tabulation,
    outstanding: HashMap<WorkerId, Outstanding>,
    task_owner: HashMap<TaskId, WorkerId>,
    consumed: HashSet<TaskId>,
    issued_per_worker: HashMap<WorkerId, u32>,
    next_task_id: u64,
    submissions: u64,
    closed: bool,
}

impl Phase1Engine {
    pub fn new(cfg: Phase1Config, selection: SelectionConfig) -> Result<Self, Phase1Error> {
        selection.validate()?;
        let mut tree = HypothesisTree::new(cfg.root_text.as_str());
        for text in &cfg.starter_hypotheses {
            tree.add_hypothesis(NodeId::ROOT, text, SYSTEM_AUTHOR)?;
        }
        Ok(Self {
            cfg,
            selection,
            tree: Arc::new(tree),
            tab: Tabulation::new(),
            outstanding: HashMap::new(),
            task_owner: HashMap::new(),
            consumed: HashSet::new(),
            issued_per_worker: HashMap::new(),
            next_task_id: 1,
            submissions: 0,
            closed: false,
        })
    }

    pub fn config(&self) -> &Phase1Config {
        &self.cfg
    }

    pub fn selection_config(&self) -> &SelectionConfig {
        &self.selection
    }

    pub fn tree(&self) -> &HypothesisTree {
        &self.tree
    }

    pub fn tree_snapshot(&self) -> Arc<HypothesisTree> {
        Arc::clone(&self.tree)
    }

    pub fn tabulation(&self) -> &Tabulation {
        &self.tab
    }

    pub fn submissions(&self) -> u64 {
        self.submissions
    }

    pub fn is_closed(&self) -> bool {
        self.closed
    }

    pub fn close(&mut self) {
        self.closed = true;
    }

    fn expired(&self, issued_at: u64, now: u64) -> bool {
        self.cfg.task_ttl.is_some_and(|ttl| now.saturating_sub(issued_at) > ttl)
    }

    /// Leaf hypotheses this worker may still be asked about.
    pub fn eligible_candidates(&self, worker: &WorkerId) -> Vec<NodeId> {
        self.tree
            .hypothesis_leaves()
            .into_iter()
            .filter(|h| !self.tab.is_excluded(*h) && !self.tab.has_answered(worker, *h))
            .collect()
    }

    fn build_task(&self, task_id: TaskId, worker: &WorkerId, issued_at: u64, closed: &[NodeId]) -> Phase1Task {
        Phase1Task {
            task_id,
            worker_id: worker.clone(),
            issued_at,
            outcome_question: OutcomeQuestion {
                prompt: self.cfg.outcome_prompt.clone(),
                form: self.cfg.psqi_form.clone(),
            },
            open_question: OpenQuestion {
                prompt: self.cfg.open_prompt.clone(),
                tree: self.tree_snapshot(),
            },
            closed_questions: closed
                .iter()
                .map(|h| ClosedQuestion {
                    hypothesis: *h,
                    text: self.tree.get(*h).map(|n| n.text.clone()).unwrap_or_default(),
                })
                .collect(),
        }
    }

    pub fn plan_task(&self, worker: &WorkerId, now: u64) -> Result<TaskPlan, Phase1Error> {
        if self.closed {
            return Err(Phase1Error::CampaignClosed);
        }
        if let Some(out) = self.outstanding.get(worker) {
            if !self.expired(out.issued_at, now) {
                return Ok(TaskPlan::Existing(self.build_task(out.task_id, worker, out.issued_at, &out.closed)));
            }
        }
        let issued = self.issued_per_worker.get(worker).copied().unwrap_or(0);
        if self.cfg.max_tasks_per_worker.is_some_and(|cap| issued >= cap) {
            return Err(Phase1Error::TaskLimit(worker.clone()));
        }

        let task_id = TaskId(self.next_task_id);
        let candidates = self.eligible_candidates(worker);
        let closed = if candidates.is_empty() {
            Vec::new()
        } else {
            let mut rng = ChaCha8Rng::seed_from_u64(self.selection.rng_seed);
            rng.set_stream(task_id.0);
            select_closed_set(&candidates, &self.tab, &self.selection, &mut rng)?
        };
        Ok(TaskPlan::Issue(TaskIssued {
            task_id,
            worker_id: worker.clone(),
            issued_at: now,
            closed,
        }))
    }

    pub fn apply_task_issued(&mut self, ev: &TaskIssued) -> Phase1Task {
        if let Some(prev) = self.outstanding.remove(&ev.worker_id) {
            self.task_owner.remove(&prev.task_id);
        }
        self.next_task_id = self.next_task_id.max(ev.task_id.0 + 1);
        *self.issued_per_worker.entry(ev.worker_id.clone()).or_insert(0) += 1;
        self.task_owner.insert(ev.task_id, ev.worker_id.clone());
        self.outstanding.insert(
            ev.worker_id.clone(),
            Outstanding {
                task_id: ev.task_id,
                issued_at: ev.issued_at,
                closed: ev.closed.clone(),
            },
        );
        self.build_task(ev.task_id, &ev.worker_id, ev.issued_at, &ev.closed)
    }

    /// Returns the worker's outstanding task or issues a new one.
    pub fn next_task(&mut self, worker: &WorkerId, now: u64) -> Result<Phase1Task, Phase1Error> {
        match self.plan_task(worker, now)? {
            TaskPlan::Existing(task) => Ok(task),
            TaskPlan::Issue(ev) => Ok(self.apply_task_issued(&ev)),
        }
    }

    /// Checks every precondition of a submission; nothing is mutated.
    pub fn validate_submission(&self, sub: &Phase1Submission, now: u64) -> Result<(), Phase1Error> {
        if self.consumed.contains(&sub.task_id) {
            return Err(Phase1Error::DuplicateSubmission(sub.task_id));
        }
        let worker = self
            .task_owner
            .get(&sub.task_id)
            .ok_or(Phase1Error::UnknownTask(sub.task_id))?;
        let out = &self.outstanding[worker];
        if self.expired(out.issued_at, now) {
            return Err(Phase1Error::TaskExpired(sub.task_id));
        }

        score_psqi(&sub.psqi_response)?;
        condition_label_with(&sub.psqi_response, self.cfg.condition_rule)?;

        if let Some(new) = &sub.new_hypothesis {
            self.tree.validate_new(new.parent_id, &new.text)?;
        }

        let expected: HashSet<NodeId> = out.closed.iter().copied().collect();
        let mut given = HashSet::with_capacity(sub.closed_verdicts.len());
        for v in &sub.closed_verdicts {
            if !given.insert(v.hypothesis) {
                return Err(Phase1Error::VerdictMismatch(format!("hypothesis {} answered twice", v.hypothesis)));
            }
            if !expected.contains(&v.hypothesis) {
                return Err(Phase1Error::VerdictMismatch(format!("hypothesis {} was not asked", v.hypothesis)));
            }
            if self.tab.has_answered(worker, v.hypothesis) {
                return Err(Phase1Error::DuplicateAnswer(worker.clone(), v.hypothesis));
            }
        }
        if given.len() != expected.len() {
            return Err(Phase1Error::VerdictMismatch(format!(
                "{} of {} questions answered",
                given.len(),
                expected.len()
            )));
        }
        Ok(())
    }

    /// Applies a submission that passed `validate_submission`.
    pub fn apply_submission(&mut self, sub: &Phase1Submission) -> SubmissionAck {
        let worker = self
            .task_owner
            .remove(&sub.task_id)
            .expect("submission was validated");
        self.outstanding.remove(&worker);
        self.consumed.insert(sub.task_id);
        self.submissions += 1;

        let label = condition_label_with(&sub.psqi_response, self.cfg.condition_rule).expect("validated");
        self.tab.record_condition(&worker, label);

        let new_id = sub.new_hypothesis.as_ref().map(|new| {
            Arc::make_mut(&mut self.tree)
                .add_hypothesis(new.parent_id, &new.text, worker.as_str())
                .expect("validated")
        });

        for v in &sub.closed_verdicts {
            self.tab
                .record_closed_answer(
                    ClosedAnswer {
                        worker: worker.clone(),
                        hypothesis: v.hypothesis,
                        verdict: v.verdict,
                    },
                    &self.tree,
                )
                .expect("validated");
        }
        SubmissionAck {
            task_id: sub.task_id,
            new_hypothesis: new_id,
        }
    }

    pub fn submit(&mut self, sub: &Phase1Submission, now: u64) -> Result<SubmissionAck, Phase1Error> {
        self.validate_submission(sub, now)?;
        Ok(self.apply_submission(sub))
    }

    /// Top-`k` of the current ranking.
    pub fn report(&self, k: usize) -> Vec<RankedHypothesis> {
        let mut ranked = self.tab.rank_hypotheses(&self.tree, self.cfg.min_answers);
        ranked.truncate(k);
        ranked
    }

    pub fn export_csv(&self) -> Result<String, csv::Error> {
        self.tab.export_csv(&self.tree)
    }
}
