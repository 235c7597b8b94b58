//! Simulated worker population with planted ground truth.
//!
//! Workers carry a fixed condition and a set of experienced causes drawn from
//! the configured rates. They interact with a campaign only through
//! [`StudyApi`], so the same drivers run in process or over HTTP.
//!
//! Hypothesis text encodes its cause: a fresh entry is the cause label, a
//! variant appends `", <qualifier>"` to an existing entry. Text that does not
//! start with a known label is garbage and honest workers call it nonsense.

use std::collections::{BTreeSet, HashMap};

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::Normal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::clock::ManualClock;
use crate::phase1::{NewHypothesis, Phase1Submission, VerdictEntry};
use crate::phase2::{CrossoverReport, EnrollmentRequest, TrialCampaign, TrialReportRequest};
use crate::psqi::PsqiResponse;
use crate::ranking::{ConditionLabel, CrossTab, RankedHypothesis, Verdict};
use crate::store::{ApiError, StudyApi};
use crate::tree::{HypothesisTree, NodeId};
use crate::WorkerId;

const QUALIFIERS: &[&str] = &[
    "10 minutes before",
    "every day",
    "on weekdays",
    "in the evening",
    "right after dinner",
    "for at least a week",
    "with the lights off",
    "at a fixed time",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlantedCause {
    pub id: String,
    pub rate_positive: f64,
    pub rate_negative: f64,
    /// PSQI points added during a fully adhered intervention week.
    #[serde(default)]
    pub phase2_effect: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecoyCause {
    pub id: String,
    pub rate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SimConfig {
    pub population_size: usize,
    pub condition_prevalence: f64,
    pub planted_causes: Vec<PlantedCause>,
    pub decoy_causes: Vec<DecoyCause>,
    pub duplicate_phrasing_rate: f64,
    pub spam_rate: f64,
    /// Probability a worker enters a hypothesis in the open question.
    pub proposal_rate: f64,
    pub dropout_per_followup: f64,
    /// Relative weights for 0..=7 adherence days.
    pub adherence_distribution: [f64; 8],
    /// Standard deviation of the per-report PSQI noise.
    pub noise_sd: f64,
    /// Mean and standard deviation of the latent global PSQI.
    pub baseline_positive: (f64, f64),
    pub baseline_negative: (f64, f64),
    pub seed: u64,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            population_size: 2000,
            condition_prevalence: 0.5,
            planted_causes: vec![
                PlantedCause {
                    id: "bask in the morning sun".into(),
                    rate_positive: 0.8,
                    rate_negative: 0.2,
                    phase2_effect: -2.0,
                },
                PlantedCause {
                    id: "take a warm bath".into(),
                    rate_positive: 0.8,
                    rate_negative: 0.2,
                    phase2_effect: 0.0,
                },
                PlantedCause {
                    id: "keep a regular bedtime".into(),
                    rate_positive: 0.8,
                    rate_negative: 0.2,
                    phase2_effect: 2.0,
                },
            ],
            decoy_causes: decoys(200, 0.1),
            duplicate_phrasing_rate: 0.3,
            spam_rate: 0.0,
            proposal_rate: 0.8,
            dropout_per_followup: 0.5,
            adherence_distribution: [1.0, 1.0, 1.0, 2.0, 3.0, 4.0, 6.0, 8.0],
            noise_sd: 1.5,
            baseline_positive: (4.0, 1.5),
            baseline_negative: (9.0, 2.5),
            seed: 0,
        }
    }
}

/// `n` decoy causes with the same experience rate in both conditions.
pub fn decoys(n: usize, rate: f64) -> Vec<DecoyCause> {
    (0..n)
        .map(|i| DecoyCause {
            id: format!("habit {i:03}"),
            rate,
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SimError {
    #[error("invalid simulator config: {0}")]
    Config(String),
    #[error("unknown cause {0:?}")]
    UnknownCause(String),
    #[error(transparent)]
    Api(#[from] ApiError),
}

fn is_probability(p: f64) -> bool {
    (0.0..=1.0).contains(&p)
}

impl SimConfig {
    pub fn validate(&self) -> Result<(), SimError> {
        let bad = |m: &str| Err(SimError::Config(m.into()));
        if self.population_size == 0 {
            return bad("population_size must be at least 1");
        }
        let probs = [
            self.condition_prevalence,
            self.duplicate_phrasing_rate,
            self.spam_rate,
            self.proposal_rate,
            self.dropout_per_followup,
        ];
        if !probs.iter().all(|p| is_probability(*p)) {
            return bad("probabilities must lie in [0, 1]");
        }
        let rates_ok = self
            .planted_causes
            .iter()
            .all(|c| is_probability(c.rate_positive) && is_probability(c.rate_negative) && c.phase2_effect.is_finite())
            && self.decoy_causes.iter().all(|c| is_probability(c.rate));
        if !rates_ok {
            return bad("cause rates must lie in [0, 1]");
        }
        let mut labels = BTreeSet::new();
        for label in self.cause_labels() {
            if label.is_empty() || label.contains(", ") || !labels.insert(label) {
                return bad("cause ids must be unique, non-empty and free of \", \"");
            }
        }
        if self.adherence_distribution.iter().any(|w| !(w.is_finite() && *w >= 0.0))
            || self.adherence_distribution.iter().sum::<f64>() <= 0.0
        {
            return bad("adherence weights must be non-negative with a positive sum");
        }
        if !(self.noise_sd >= 0.0 && self.baseline_positive.1 >= 0.0 && self.baseline_negative.1 >= 0.0) {
            return bad("standard deviations must be non-negative");
        }
        Ok(())
    }

    /// Planted labels first, then decoys; a cause's index is its position here.
    pub fn cause_labels(&self) -> impl Iterator<Item = &str> {
        self.planted_causes
            .iter()
            .map(|c| c.id.as_str())
            .chain(self.decoy_causes.iter().map(|c| c.id.as_str()))
    }

    pub fn n_causes(&self) -> usize {
        self.planted_causes.len() + self.decoy_causes.len()
    }

    pub fn is_planted(&self, cause: usize) -> bool {
        cause < self.planted_causes.len()
    }

    pub fn cause_index(&self, label: &str) -> Option<usize> {
        self.cause_labels().position(|l| l == label)
    }

    fn rates(&self, cause: usize) -> (f64, f64) {
        match self.planted_causes.get(cause) {
            Some(c) => (c.rate_positive, c.rate_negative),
            None => {
                let r = self.decoy_causes[cause - self.planted_causes.len()].rate;
                (r, r)
            }
        }
    }

    fn phase2_effect(&self, cause: usize) -> f64 {
        self.planted_causes.get(cause).map_or(0.0, |c| c.phase2_effect)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorkerProfile {
    pub worker_id: WorkerId,
    pub condition: ConditionLabel,
    /// Indices into [`SimConfig::cause_labels`].
    pub experiences: BTreeSet<usize>,
    /// Latent global PSQI around which reports scatter.
    pub latent_psqi: f64,
    /// Days the worker follows a trial instruction in the intervention week.
    pub adherence_days: u8,
    pub drops_before_task2: bool,
    pub drops_before_task3: bool,
}

impl WorkerProfile {
    pub fn has_experienced(&self, cause: usize) -> bool {
        self.experiences.contains(&cause)
    }
}

fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

const POPULATION_STREAM: u64 = 0;
const PHASE1_STREAM: u64 = 1;
const PHASE2_STREAM: u64 = 2;

pub fn generate_population(cfg: &SimConfig) -> Result<Vec<WorkerProfile>, SimError> {
    cfg.validate()?;
    let mut rng = stream(cfg.seed, POPULATION_STREAM);
    let adherence = WeightedIndex::new(cfg.adherence_distribution).expect("validated weights");
    let pos = Normal::new(cfg.baseline_positive.0, cfg.baseline_positive.1).expect("validated sd");
    let neg = Normal::new(cfg.baseline_negative.0, cfg.baseline_negative.1).expect("validated sd");
    let mut out = Vec::with_capacity(cfg.population_size);
    for i in 0..cfg.population_size {
        let condition = if rng.random_bool(cfg.condition_prevalence) {
            ConditionLabel::Positive
        } else {
            ConditionLabel::Negative
        };
        let experiences = (0..cfg.n_causes())
            .filter(|&c| {
                let (rp, rn) = cfg.rates(c);
                let rate = if condition == ConditionLabel::Positive { rp } else { rn };
                rng.random_bool(rate)
            })
            .collect();
        let latent_psqi = match condition {
            ConditionLabel::Positive => pos.sample(&mut rng),
            ConditionLabel::Negative => neg.sample(&mut rng),
        }
        .clamp(0.0, 21.0);
        out.push(WorkerProfile {
            worker_id: WorkerId(format!("sim-{i:05}")),
            condition,
            experiences,
            latent_psqi,
            adherence_days: adherence.sample(&mut rng) as u8,
            drops_before_task2: rng.random_bool(cfg.dropout_per_followup),
            drops_before_task3: rng.random_bool(cfg.dropout_per_followup),
        });
    }
    Ok(out)
}

/// Splits a global score into seven components, each 0..=3.
pub fn components_for_global<R: Rng + ?Sized>(global: u8, rng: &mut R) -> [u8; 7] {
    let mut comps = [0u8; 7];
    for _ in 0..global.min(21) {
        let open: Vec<usize> = (0..7).filter(|&i| comps[i] < 3).collect();
        comps[*open.choose(rng).expect("global <= 21")] += 1;
    }
    comps
}

fn questionnaire<R: Rng + ?Sized>(
    latent: f64,
    shift: f64,
    noise: &Normal<f64>,
    sleeps_well: Option<bool>,
    rng: &mut R,
) -> PsqiResponse {
    let global = (latent + shift + noise.sample(rng)).round().clamp(0.0, 21.0) as u8;
    PsqiResponse::from_components(components_for_global(global, rng), sleeps_well)
}

/// One closed-question decision as the simulator made it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimAnswer {
    pub worker: usize,
    pub hypothesis: NodeId,
    pub cause: Option<usize>,
    pub verdict: Verdict,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Phase1Outcome {
    pub answers: Vec<SimAnswer>,
    /// Hypothesis count (root excluded) after each task.
    pub hypothesis_counts: Vec<usize>,
    pub report: Vec<RankedHypothesis>,
    /// Cause of every node seen, `None` for garbage; indexed by node id.
    pub node_causes: Vec<Option<usize>>,
}

impl Phase1Outcome {
    pub fn cause_of(&self, node: NodeId) -> Option<usize> {
        self.node_causes.get(node.0 as usize).copied().flatten()
    }

    /// Distinct planted causes among the first `k` ranked hypotheses.
    pub fn planted_in_top(&self, cfg: &SimConfig, k: usize) -> BTreeSet<usize> {
        self.report
            .iter()
            .take(k)
            .filter_map(|r| self.cause_of(r.hypothesis))
            .filter(|c| cfg.is_planted(*c))
            .collect()
    }

    /// Cross-tabulation of every direct answer about a cause, pooled over all
    /// of its phrasings.
    pub fn pooled_crosstab(&self, population: &[WorkerProfile], cause: usize) -> CrossTab {
        let mut t = CrossTab::default();
        for a in self.answers.iter().filter(|a| a.cause == Some(cause)) {
            match (population[a.worker].condition, a.verdict) {
                (ConditionLabel::Positive, Verdict::Consistent) => t.a += 1,
                (ConditionLabel::Positive, Verdict::Inconsistent) => t.b += 1,
                (ConditionLabel::Negative, Verdict::Consistent) => t.c += 1,
                (ConditionLabel::Negative, Verdict::Inconsistent) => t.d += 1,
                (_, Verdict::Nonsense) => {}
            }
        }
        t
    }
}

/// Maps tree nodes to causes by parsing their text, caching as the tree grows.
struct CauseIndex {
    by_label: HashMap<String, usize>,
    nodes: Vec<Option<usize>>,
}

impl CauseIndex {
    fn new(cfg: &SimConfig) -> Self {
        Self {
            by_label: cfg.cause_labels().enumerate().map(|(i, l)| (l.to_string(), i)).collect(),
            nodes: Vec::new(),
        }
    }

    fn parse(&self, text: &str) -> Option<usize> {
        let label = text.split(", ").next().unwrap_or(text);
        self.by_label.get(label).copied()
    }

    fn sync(&mut self, tree: &HypothesisTree) {
        for node in &tree.nodes()[self.nodes.len().min(tree.len())..] {
            let cause = if node.id == tree.root() { None } else { self.parse(&node.text) };
            self.nodes.push(cause);
        }
    }
}

fn garbage<R: Rng + ?Sized>(rng: &mut R) -> String {
    let len = rng.random_range(4..10);
    (0..len).map(|_| rng.random_range(b'a'..=b'z') as char).collect()
}

/// Runs `n_tasks` Phase 1 tasks, each fetched and submitted through `api` by
/// a uniformly drawn worker.
pub fn simulate_phase1<A: StudyApi + ?Sized>(
    cfg: &SimConfig,
    population: &[WorkerProfile],
    api: &A,
    n_tasks: usize,
) -> Result<Phase1Outcome, SimError> {
    cfg.validate()?;
    let mut rng = stream(cfg.seed, PHASE1_STREAM);
    let noise = Normal::new(0.0, cfg.noise_sd).expect("validated sd");
    let mut index = CauseIndex::new(cfg);
    let mut answers = Vec::new();
    let mut counts = Vec::with_capacity(n_tasks);

    for _ in 0..n_tasks {
        let wi = rng.random_range(0..population.len());
        let worker = &population[wi];
        let task = api.next_task(&worker.worker_id)?;
        let tree = task.open_question.tree;
        index.sync(&tree);
        let spamming = rng.random_bool(cfg.spam_rate);

        let mut verdicts = Vec::with_capacity(task.closed_questions.len());
        for q in &task.closed_questions {
            let cause = index.nodes.get(q.hypothesis.0 as usize).copied().flatten();
            let verdict = if spamming {
                *[Verdict::Consistent, Verdict::Inconsistent, Verdict::Nonsense]
                    .choose(&mut rng)
                    .expect("non-empty")
            } else {
                match cause {
                    Some(c) if worker.has_experienced(c) => Verdict::Consistent,
                    Some(_) => Verdict::Inconsistent,
                    None => Verdict::Nonsense,
                }
            };
            verdicts.push(VerdictEntry {
                hypothesis: q.hypothesis,
                verdict,
            });
            answers.push(SimAnswer {
                worker: wi,
                hypothesis: q.hypothesis,
                cause,
                verdict,
            });
        }

        let new_hypothesis = if !rng.random_bool(cfg.proposal_rate) {
            None
        } else if spamming {
            Some(NewHypothesis {
                parent_id: NodeId::ROOT,
                text: garbage(&mut rng),
            })
        } else {
            propose(cfg, worker, &tree, &index, &mut rng)
        };

        let sleeps_well = worker.condition == ConditionLabel::Positive;
        let submission = Phase1Submission {
            task_id: task.task_id,
            psqi_response: questionnaire(worker.latent_psqi, 0.0, &noise, Some(sleeps_well), &mut rng),
            new_hypothesis,
            closed_verdicts: verdicts,
        };
        let proposed_text = submission.new_hypothesis.as_ref().map(|h| h.text.clone());
        let ack = api.submit(&submission)?;
        if let (Some(id), Some(text)) = (ack.new_hypothesis, proposed_text) {
            if id.0 as usize == index.nodes.len() {
                index.nodes.push(index.parse(&text));
            }
        }
        counts.push(tree.len() - 1 + usize::from(ack.new_hypothesis.is_some()));
    }

    let report = api.report(usize::MAX)?;
    let node_causes = index.nodes;
    Ok(Phase1Outcome {
        answers,
        hypothesis_counts: counts,
        report,
        node_causes,
    })
}

fn propose<R: Rng + ?Sized>(
    cfg: &SimConfig,
    worker: &WorkerProfile,
    tree: &HypothesisTree,
    index: &CauseIndex,
    rng: &mut R,
) -> Option<NewHypothesis> {
    if rng.random_bool(cfg.duplicate_phrasing_rate) {
        let known: Vec<NodeId> = tree
            .nodes()
            .iter()
            .filter(|n| index.nodes[n.id.0 as usize].is_some_and(|c| worker.has_experienced(c)))
            .map(|n| n.id)
            .collect();
        if let Some(&parent) = known.choose(rng) {
            let base = &tree.get(parent).expect("node from tree").text;
            let qualifier = QUALIFIERS.choose(rng).expect("non-empty");
            return Some(NewHypothesis {
                parent_id: parent,
                text: format!("{base}, {qualifier}"),
            });
        }
    }
    let experiences: Vec<usize> = worker.experiences.iter().copied().collect();
    let cause = *experiences.choose(rng)?;
    let label = cfg.cause_labels().nth(cause).expect("cause index in range");
    Some(NewHypothesis {
        parent_id: NodeId::ROOT,
        text: label.to_string(),
    })
}

/// Configures a trial of `campaign.hypothesis` (whose true cause is `cause`),
/// enrolls the whole population, collects reports and analyzes them.
///
/// The clock is moved into each task window in turn.
pub fn simulate_phase2<A: StudyApi + ?Sized>(
    cfg: &SimConfig,
    population: &[WorkerProfile],
    api: &A,
    clock: &ManualClock,
    campaign: &TrialCampaign,
    cause: &str,
) -> Result<CrossoverReport, SimError> {
    cfg.validate()?;
    let cause_idx = cfg.cause_index(cause).ok_or_else(|| SimError::UnknownCause(cause.into()))?;
    let effect = cfg.phase2_effect(cause_idx);
    let mut rng = stream(cfg.seed, PHASE2_STREAM);
    let noise = Normal::new(0.0, cfg.noise_sd).expect("validated sd");
    api.configure_trial(campaign)?;

    let schedule = campaign.schedule;
    clock.set(schedule.window(1).0);
    let mut groups = Vec::with_capacity(population.len());
    for w in population {
        let baseline = questionnaire(w.latent_psqi, 0.0, &noise, None, &mut rng);
        let enrollment = api.enroll(&EnrollmentRequest {
            worker_id: w.worker_id.clone(),
            baseline,
        })?;
        groups.push(enrollment.group);
    }

    for task_index in [2u8, 3] {
        clock.set(schedule.window(task_index).0);
        for (w, group) in population.iter().zip(&groups) {
            if w.drops_before_task2 || (task_index == 3 && w.drops_before_task3) {
                continue;
            }
            let intervention = group.intervention_week() + 1 == task_index;
            let shift = if intervention {
                effect * f64::from(w.adherence_days) / 7.0
            } else {
                0.0
            };
            let psqi = questionnaire(w.latent_psqi, shift, &noise, None, &mut rng);
            api.record_report(&TrialReportRequest {
                worker_id: w.worker_id.clone(),
                task_index,
                psqi,
                adherence_days: intervention.then_some(w.adherence_days),
            })?;
        }
    }
    Ok(api.analyze()?)
}
