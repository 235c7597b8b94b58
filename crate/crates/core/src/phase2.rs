//! Crossover pseudo-RCT for one hypothesis.
//!
//! Group A performs the action in week 1 and group B in week 2. Task 1
//! (enrollment) records the baseline questionnaire, tasks 2 and 3 record the
//! end-of-week questionnaires. Each group is tested on its intervention week
//! and its control week with paired t-tests over complete records only.

use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::psqi::{score_psqi, PsqiError, PsqiResponse, PsqiScore};
use crate::stats::{mean_and_se, paired_t_test, significance_marker, TestResult};
use crate::tree::NodeId;
use crate::WorkerId;

pub const MAX_ADHERENCE_DAYS: u8 = 7;

/// Task windows in abstract time units, relative to `start`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrialSchedule {
    pub start: u64,
    /// How long task 1 (enrollment) stays open.
    pub enrollment_window: u64,
    /// Distance between consecutive task openings.
    pub followup_offset: u64,
    /// How long tasks 2 and 3 stay open.
    pub followup_window: u64,
}

impl Default for TrialSchedule {
    fn default() -> Self {
        Self {
            start: 0,
            enrollment_window: 1,
            followup_offset: 7,
            followup_window: 5,
        }
    }
}

impl TrialSchedule {
    pub fn validate(&self) -> Result<(), Phase2Error> {
        if self.enrollment_window == 0 || self.followup_window == 0 {
            return Err(Phase2Error::InvalidSchedule("windows must be non-empty".into()));
        }
        if self.enrollment_window > self.followup_offset || self.followup_window > self.followup_offset {
            return Err(Phase2Error::InvalidSchedule("windows overlap".into()));
        }
        Ok(())
    }

    /// Half-open `[open, close)` window of task 1, 2 or 3.
    pub fn window(&self, task_index: u8) -> (u64, u64) {
        match task_index {
            1 => (self.start, self.start + self.enrollment_window),
            2 => {
                let open = self.start + self.followup_offset;
                (open, open + self.followup_window)
            }
            _ => {
                let open = self.start + 2 * self.followup_offset;
                (open, open + self.followup_window)
            }
        }
    }

    pub fn is_open(&self, task_index: u8, now: u64) -> bool {
        let (open, close) = self.window(task_index);
        (open..close).contains(&now)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ExpertLabel {
    #[serde(rename = "seems to be effective")]
    SeemsEffective,
    #[serde(rename = "seems to be ineffective")]
    SeemsIneffective,
    #[serde(rename = "neither agree nor disagree")]
    Neither,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialCampaign {
    pub hypothesis: NodeId,
    pub instruction: String,
    #[serde(default)]
    pub schedule: TrialSchedule,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub expert_label: Option<ExpertLabel>,
    #[serde(default)]
    pub seed: u64,
    /// Significance level used for classification.
    #[serde(default = "default_alpha")]
    pub alpha: f64,
}

fn default_alpha() -> f64 {
    0.05
}

impl TrialCampaign {
    pub fn new(hypothesis: NodeId, instruction: impl Into<String>) -> Self {
        Self {
            hypothesis,
            instruction: instruction.into(),
            schedule: TrialSchedule::default(),
            expert_label: None,
            seed: 0,
            alpha: default_alpha(),
        }
    }

    pub fn validate(&self) -> Result<(), Phase2Error> {
        self.schedule.validate()?;
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(Phase2Error::InvalidSchedule("alpha must lie in (0, 1)".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Group {
    A,
    B,
}

impl Group {
    /// Week (1 or 2) in which the group performs the action.
    pub fn intervention_week(self) -> u8 {
        match self {
            Group::A => 1,
            Group::B => 2,
        }
    }

    pub fn other(self) -> Group {
        match self {
            Group::A => Group::B,
            Group::B => Group::A,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialRecord {
    pub worker_id: WorkerId,
    pub group: Group,
    pub r1: Option<PsqiScore>,
    pub r2: Option<PsqiScore>,
    pub r3: Option<PsqiScore>,
    pub adherence_days_1: u8,
    pub adherence_days_2: u8,
}

impl TrialRecord {
    pub fn is_complete(&self) -> bool {
        self.r1.is_some() && self.r2.is_some() && self.r3.is_some()
    }

    pub fn intervention_adherence(&self) -> u8 {
        match self.group {
            Group::A => self.adherence_days_1,
            Group::B => self.adherence_days_2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Enrollment {
    pub worker_id: WorkerId,
    pub group: Group,
    pub intervention_week: u8,
    pub instruction: String,
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum Phase2Error {
    #[error("task {task} is not open at time {now}")]
    WindowClosed { task: u8, now: u64 },
    #[error("worker {0} is already enrolled")]
    AlreadyEnrolled(WorkerId),
    #[error("worker {0} is not enrolled")]
    NotEnrolled(WorkerId),
    #[error("task {task} report from worker {worker} is out of order")]
    OutOfOrder { worker: WorkerId, task: u8 },
    #[error("task index must be 2 or 3, got {0}")]
    BadTaskIndex(u8),
    #[error("adherence days must be 0..=7, got {0}")]
    AdherenceRange(u8),
    #[error("adherence days are required for the intervention week")]
    MissingAdherence,
    #[error("malformed questionnaire: {0}")]
    Psqi(#[from] PsqiError),
    #[error("invalid trial schedule: {0}")]
    InvalidSchedule(String),
    #[error("campaign has no expert label")]
    NoExpertLabel,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Classification {
    Effective,
    Counterproductive,
    Inconclusive,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairedComparison {
    pub from_task: u8,
    pub to_task: u8,
    /// Mean of (later - earlier); negative is an improvement.
    pub mean_change: f64,
    pub test: TestResult,
    pub marker: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupSummary {
    pub group: Group,
    /// Workers with all three reports.
    pub n: usize,
    pub mean_t1: Option<f64>,
    pub mean_t2: Option<f64>,
    pub mean_t3: Option<f64>,
    pub t1_t2: Option<PairedComparison>,
    pub t2_t3: Option<PairedComparison>,
    /// Reported only; attributed to self-selection and not used to classify.
    pub t1_t3: Option<PairedComparison>,
}

impl GroupSummary {
    pub fn intervention(&self) -> Option<&PairedComparison> {
        match self.group {
            Group::A => self.t1_t2.as_ref(),
            Group::B => self.t2_t3.as_ref(),
        }
    }

    pub fn control(&self) -> Option<&PairedComparison> {
        match self.group {
            Group::A => self.t2_t3.as_ref(),
            Group::B => self.t1_t2.as_ref(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdherencePoint {
    pub days: u8,
    pub n: usize,
    pub mean_change: Option<f64>,
    pub se: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CrossoverReport {
    pub hypothesis: NodeId,
    pub alpha: f64,
    pub groups: Vec<GroupSummary>,
    pub classification: Classification,
    /// Fewer than two complete records in some group.
    pub insufficient_data: bool,
    pub adherence_curve: Vec<AdherencePoint>,
}

impl CrossoverReport {
    pub fn group(&self, g: Group) -> &GroupSummary {
        self.groups.iter().find(|s| s.group == g).expect("both groups present")
    }

    pub fn classification_label(&self) -> String {
        match (self.classification, self.insufficient_data) {
            (Classification::Inconclusive, true) => "inconclusive (insufficient n)".into(),
            (Classification::Effective, _) => "effective".into(),
            (Classification::Counterproductive, _) => "counterproductive".into(),
            (Classification::Inconclusive, false) => "inconclusive".into(),
        }
    }

    /// Group summary CSV.
    pub fn summary_csv(&self) -> Result<String, csv::Error> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record([
            "group", "n", "mean_t1", "mean_t2", "mean_t3", "comparison", "mean_change", "t", "df", "p_value", "marker",
            "classification",
        ])?;
        let fmt = |x: Option<f64>| x.map(|v| format!("{v:.6}")).unwrap_or_default();
        for g in &self.groups {
            let comps = [("t1_t2", &g.t1_t2), ("t2_t3", &g.t2_t3), ("t1_t3", &g.t1_t3)];
            for (name, comp) in comps {
                let group = format!("{:?}", g.group);
                let (change, t, df, p, marker) = match comp {
                    Some(c) => (
                        fmt(Some(c.mean_change)),
                        format!("{:.6}", c.test.statistic),
                        fmt(c.test.df),
                        format!("{:.6}", c.test.p_value),
                        c.marker.clone(),
                    ),
                    None => Default::default(),
                };
                w.write_record([
                    group,
                    g.n.to_string(),
                    fmt(g.mean_t1),
                    fmt(g.mean_t2),
                    fmt(g.mean_t3),
                    name.to_string(),
                    change,
                    t,
                    df,
                    p,
                    marker,
                    self.classification_label(),
                ])?;
            }
        }
        finish_csv(w)
    }

    /// Adherence curve CSV.
    pub fn adherence_csv(&self) -> Result<String, csv::Error> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["days", "n", "mean_change", "se"])?;
        for p in &self.adherence_curve {
            w.write_record([
                p.days.to_string(),
                p.n.to_string(),
                p.mean_change.map(|v| format!("{v:.6}")).unwrap_or_default(),
                p.se.map(|v| format!("{v:.6}")).unwrap_or_default(),
            ])?;
        }
        finish_csv(w)
    }
}

fn finish_csv(w: csv::Writer<Vec<u8>>) -> Result<String, csv::Error> {
    let bytes = w.into_inner().map_err(|e| e.into_error())?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

fn compare(before: &[f64], after: &[f64], from_task: u8, to_task: u8) -> Option<PairedComparison> {
    let test = paired_t_test(before, after).ok()?;
    let mean_change = after.iter().zip(before).map(|(a, b)| a - b).sum::<f64>() / before.len() as f64;
    Some(PairedComparison {
        from_task,
        to_task,
        mean_change,
        test,
        marker: significance_marker(test.p_value).to_string(),
    })
}

fn summarize(group: Group, records: &[&TrialRecord]) -> GroupSummary {
    let col = |f: fn(&TrialRecord) -> Option<PsqiScore>| -> Vec<f64> {
        records.iter().filter_map(|r| f(r)).map(|s| s.global as f64).collect()
    };
    let t1 = col(|r| r.r1);
    let t2 = col(|r| r.r2);
    let t3 = col(|r| r.r3);
    let mean = |v: &[f64]| mean_and_se(v).ok().map(|(m, _)| m);
    GroupSummary {
        group,
        n: records.len(),
        mean_t1: mean(&t1),
        mean_t2: mean(&t2),
        mean_t3: mean(&t3),
        t1_t2: compare(&t1, &t2, 1, 2),
        t2_t3: compare(&t2, &t3, 2, 3),
        t1_t3: compare(&t1, &t3, 1, 3),
    }
}

fn improved(c: Option<&PairedComparison>, alpha: f64) -> bool {
    c.is_some_and(|c| c.test.p_value < alpha && c.mean_change < 0.0)
}

fn worsened(c: Option<&PairedComparison>, alpha: f64) -> bool {
    c.is_some_and(|c| c.test.p_value < alpha && c.mean_change > 0.0)
}

/// Effective: in both groups the intervention week improves significantly
/// and the control week does not. Counterproductive: in both groups the
/// intervention week does not improve significantly while either the
/// control week improves or the intervention week worsens significantly.
pub fn classify(groups: &[GroupSummary], alpha: f64) -> Classification {
    let effective = groups
        .iter()
        .all(|g| improved(g.intervention(), alpha) && !improved(g.control(), alpha));
    let counter = groups.iter().all(|g| {
        !improved(g.intervention(), alpha) && (improved(g.control(), alpha) || worsened(g.intervention(), alpha))
    });
    match (effective, counter) {
        (true, false) => Classification::Effective,
        (false, true) => Classification::Counterproductive,
        _ => Classification::Inconclusive,
    }
}

/// Crossover analysis over complete records.
pub fn analyze_records(hypothesis: NodeId, records: &[TrialRecord], alpha: f64) -> CrossoverReport {
    let complete: Vec<&TrialRecord> = records.iter().filter(|r| r.is_complete()).collect();
    let groups: Vec<GroupSummary> = [Group::A, Group::B]
        .into_iter()
        .map(|g| {
            let members: Vec<&TrialRecord> = complete.iter().copied().filter(|r| r.group == g).collect();
            summarize(g, &members)
        })
        .collect();
    let insufficient = groups.iter().any(|g| g.n < 2);
    let classification = if insufficient {
        Classification::Inconclusive
    } else {
        classify(&groups, alpha)
    };

    let mut buckets: Vec<Vec<f64>> = vec![Vec::new(); MAX_ADHERENCE_DAYS as usize + 1];
    for r in &complete {
        let (before, after) = match r.group {
            Group::A => (r.r1, r.r2),
            Group::B => (r.r2, r.r3),
        };
        let change = after.expect("complete").global as f64 - before.expect("complete").global as f64;
        buckets[r.intervention_adherence().min(MAX_ADHERENCE_DAYS) as usize].push(change);
    }
    let adherence_curve = buckets
        .iter()
        .enumerate()
        .map(|(days, v)| {
            let stats = mean_and_se(v).ok();
            AdherencePoint {
                days: days as u8,
                n: v.len(),
                mean_change: stats.map(|s| s.0),
                se: stats.map(|s| s.1),
            }
        })
        .collect();

    CrossoverReport {
        hypothesis,
        alpha,
        groups,
        classification,
        insufficient_data: insufficient,
        adherence_curve,
    }
}

/// Whether the classification agrees with the experts' label.
pub fn compare_with_expert(report: &CrossoverReport, campaign: &TrialCampaign) -> Result<bool, Phase2Error> {
    let label = campaign.expert_label.ok_or(Phase2Error::NoExpertLabel)?;
    Ok(matches!(
        (report.classification, label),
        (Classification::Effective, ExpertLabel::SeemsEffective)
            | (Classification::Counterproductive, ExpertLabel::SeemsIneffective)
            | (Classification::Inconclusive, ExpertLabel::Neither)
    ))
}

/// Logged trial report request.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialReportRequest {
    pub worker_id: WorkerId,
    pub task_index: u8,
    pub psqi: PsqiResponse,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub adherence_days: Option<u8>,
}

/// Logged enrollment request.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnrollmentRequest {
    pub worker_id: WorkerId,
    pub baseline: PsqiResponse,
}

#[derive(Debug, Clone)]
pub struct Phase2Engine {
    campaign: TrialCampaign,
    records: Vec<TrialRecord>,
    index: HashMap<WorkerId, usize>,
}

impl Phase2Engine {
    pub fn new(campaign: TrialCampaign) -> Result<Self, Phase2Error> {
        campaign.validate()?;
        Ok(Self {
            campaign,
            records: Vec::new(),
            index: HashMap::new(),
        })
    }

    pub fn campaign(&self) -> &TrialCampaign {
        &self.campaign
    }

    /// Records in enrollment order.
    pub fn records(&self) -> &[TrialRecord] {
        &self.records
    }

    pub fn record(&self, worker: &WorkerId) -> Option<&TrialRecord> {
        self.index.get(worker).map(|i| &self.records[*i])
    }

    /// Group for the next enrollee: permuted blocks of two keep |#A - #B| <= 1.
    fn next_group(&self) -> Group {
        let k = self.records.len() as u64;
        let mut rng = ChaCha8Rng::seed_from_u64(self.campaign.seed);
        rng.set_stream(k / 2);
        let first = if rng.random_bool(0.5) { Group::A } else { Group::B };
        if k.is_multiple_of(2) {
            first
        } else {
            first.other()
        }
    }

    pub fn validate_enroll(&self, req: &EnrollmentRequest, now: u64) -> Result<(), Phase2Error> {
        if !self.campaign.schedule.is_open(1, now) {
            return Err(Phase2Error::WindowClosed { task: 1, now });
        }
        if self.index.contains_key(&req.worker_id) {
            return Err(Phase2Error::AlreadyEnrolled(req.worker_id.clone()));
        }
        score_psqi(&req.baseline)?;
        Ok(())
    }

    pub fn apply_enroll(&mut self, req: &EnrollmentRequest) -> Enrollment {
        let group = self.next_group();
        let r1 = score_psqi(&req.baseline).expect("validated");
        self.index.insert(req.worker_id.clone(), self.records.len());
        self.records.push(TrialRecord {
            worker_id: req.worker_id.clone(),
            group,
            r1: Some(r1),
            r2: None,
            r3: None,
            adherence_days_1: 0,
            adherence_days_2: 0,
        });
        Enrollment {
            worker_id: req.worker_id.clone(),
            group,
            intervention_week: group.intervention_week(),
            instruction: self.campaign.instruction.clone(),
        }
    }

    pub fn enroll(&mut self, worker: &WorkerId, baseline: &PsqiResponse, now: u64) -> Result<Enrollment, Phase2Error> {
        let req = EnrollmentRequest {
            worker_id: worker.clone(),
            baseline: baseline.clone(),
        };
        self.validate_enroll(&req, now)?;
        Ok(self.apply_enroll(&req))
    }

    pub fn validate_report(&self, req: &TrialReportRequest, now: u64) -> Result<(), Phase2Error> {
        if req.task_index != 2 && req.task_index != 3 {
            return Err(Phase2Error::BadTaskIndex(req.task_index));
        }
        let record = self
            .record(&req.worker_id)
            .ok_or_else(|| Phase2Error::NotEnrolled(req.worker_id.clone()))?;
        if !self.campaign.schedule.is_open(req.task_index, now) {
            return Err(Phase2Error::WindowClosed { task: req.task_index, now });
        }
        let in_order = match req.task_index {
            2 => record.r1.is_some() && record.r2.is_none(),
            _ => record.r2.is_some() && record.r3.is_none(),
        };
        if !in_order {
            return Err(Phase2Error::OutOfOrder {
                worker: req.worker_id.clone(),
                task: req.task_index,
            });
        }
        match req.adherence_days {
            Some(d) if d > MAX_ADHERENCE_DAYS => return Err(Phase2Error::AdherenceRange(d)),
            None if record.group.intervention_week() + 1 == req.task_index => {
                return Err(Phase2Error::MissingAdherence)
            }
            _ => {}
        }
        score_psqi(&req.psqi)?;
        Ok(())
    }

    pub fn apply_report(&mut self, req: &TrialReportRequest) {
        let score = score_psqi(&req.psqi).expect("validated");
        let record = &mut self.records[self.index[&req.worker_id]];
        let days = req.adherence_days.unwrap_or(0);
        if req.task_index == 2 {
            record.r2 = Some(score);
            record.adherence_days_1 = days;
        } else {
            record.r3 = Some(score);
            record.adherence_days_2 = days;
        }
    }

    pub fn record_report(
        &mut self,
        worker: &WorkerId,
        task_index: u8,
        psqi: &PsqiResponse,
        adherence_days: Option<u8>,
        now: u64,
    ) -> Result<(), Phase2Error> {
        let req = TrialReportRequest {
            worker_id: worker.clone(),
            task_index,
            psqi: psqi.clone(),
            adherence_days,
        };
        self.validate_report(&req, now)?;
        self.apply_report(&req);
        Ok(())
    }

    pub fn analyze(&self) -> CrossoverReport {
        analyze_records(self.campaign.hypothesis, &self.records, self.campaign.alpha)
    }
}
