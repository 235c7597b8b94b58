//! Event-sourced campaign state.
//!
//! Every state change is a record in an append-only JSON-lines log. A
//! campaign is rebuilt by folding its records in order, so replaying the log
//! after a crash yields the same tree, tabulation and trial records.

use std::fmt;
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::clock::Clock;
use crate::phase1::{Phase1Config, Phase1Engine, Phase1Error, Phase1Submission, Phase1Task, SubmissionAck, TaskIssued, TaskPlan};
use crate::phase2::{
    CrossoverReport, Enrollment, EnrollmentRequest, Phase2Engine, Phase2Error, TrialCampaign, TrialReportRequest,
};
use crate::ranking::RankedHypothesis;
use crate::selection::SelectionConfig;

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct CampaignConfig {
    pub phase1: Phase1Config,
    pub selection: SelectionConfig,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub trial: Option<TrialCampaign>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "payload", rename_all = "kebab-case")]
pub enum Event {
    CampaignConfig(CampaignConfig),
    TaskIssued(TaskIssued),
    /// Carries the questionnaire, the optional new hypothesis and all closed
    /// answers of one task, applied as a unit.
    Phase1Submission(Phase1Submission),
    TrialConfigured(TrialCampaign),
    Enrollment(EnrollmentRequest),
    TrialReport(TrialReportRequest),
    CampaignClosed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EventRecord {
    pub seq: u64,
    pub timestamp: u64,
    #[serde(flatten)]
    pub event: Event,
}

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("corrupt record at line {line} (expected seq {expected_seq}): {reason}")]
    Corrupt { line: usize, expected_seq: u64, reason: String },
    #[error("log does not start with a campaign config")]
    MissingConfig,
    #[error("event {seq} cannot be applied: {reason}")]
    Inconsistent { seq: u64, reason: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ErrorKind {
    NotFound,
    Conflict,
    Rejected,
    Closed,
    Internal,
    Transport,
}

/// Error surface shared by the in-process and HTTP implementations.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize, Error)]
pub struct ApiError {
    pub kind: ErrorKind,
    pub message: String,
}

impl fmt::Display for ApiError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:?}: {}", self.kind, self.message)
    }
}

impl ApiError {
    pub fn new(kind: ErrorKind, message: impl Into<String>) -> Self {
        Self {
            kind,
            message: message.into(),
        }
    }
}

impl From<Phase1Error> for ApiError {
    fn from(e: Phase1Error) -> Self {
        let kind = match &e {
            Phase1Error::CampaignClosed => ErrorKind::Closed,
            Phase1Error::UnknownTask(_) => ErrorKind::NotFound,
            Phase1Error::TaskLimit(_) | Phase1Error::DuplicateSubmission(_) | Phase1Error::TaskExpired(_) => {
                ErrorKind::Conflict
            }
            Phase1Error::VerdictMismatch(_)
            | Phase1Error::Psqi(_)
            | Phase1Error::Tree(_)
            | Phase1Error::Selection(_)
            | Phase1Error::DuplicateAnswer(..) => ErrorKind::Rejected,
        };
        ApiError::new(kind, e.to_string())
    }
}

impl From<Phase2Error> for ApiError {
    fn from(e: Phase2Error) -> Self {
        let kind = match &e {
            Phase2Error::NotEnrolled(_) => ErrorKind::NotFound,
            Phase2Error::WindowClosed { .. } | Phase2Error::AlreadyEnrolled(_) | Phase2Error::OutOfOrder { .. } => {
                ErrorKind::Conflict
            }
            _ => ErrorKind::Rejected,
        };
        ApiError::new(kind, e.to_string())
    }
}

impl From<StoreError> for ApiError {
    fn from(e: StoreError) -> Self {
        ApiError::new(ErrorKind::Internal, e.to_string())
    }
}

fn no_trial() -> ApiError {
    ApiError::new(ErrorKind::NotFound, "no trial is configured")
}

/// Campaign state rebuilt from its events.
#[derive(Debug, Clone)]
pub struct Campaign {
    config: CampaignConfig,
    phase1: Phase1Engine,
    phase2: Option<Phase2Engine>,
    closed: bool,
}

impl Campaign {
    pub fn new(config: CampaignConfig) -> Result<Self, ApiError> {
        let phase1 = Phase1Engine::new(config.phase1.clone(), config.selection.clone())?;
        let phase2 = config.trial.clone().map(Phase2Engine::new).transpose()?;
        Ok(Self {
            config,
            phase1,
            phase2,
            closed: false,
        })
    }

    pub fn config(&self) -> &CampaignConfig {
        &self.config
    }

    pub fn phase1(&self) -> &Phase1Engine {
        &self.phase1
    }

    pub fn phase2(&self) -> Option<&Phase2Engine> {
        self.phase2.as_ref()
    }

    pub fn is_closed(&self) -> bool {
        self.closed
    }

    /// Applies an already validated event.
    pub fn apply(&mut self, event: &Event) -> Result<(), String> {
        match event {
            Event::CampaignConfig(_) => return Err("duplicate campaign config".into()),
            Event::TaskIssued(ev) => {
                self.phase1.apply_task_issued(ev);
            }
            Event::Phase1Submission(sub) => {
                // expiry was checked when the event was accepted
                self.phase1.validate_submission(sub, 0).map_err(|e| e.to_string())?;
                self.phase1.apply_submission(sub);
            }
            Event::TrialConfigured(trial) => {
                if self.phase2.is_some() {
                    return Err("trial already configured".into());
                }
                self.phase2 = Some(Phase2Engine::new(trial.clone()).map_err(|e| e.to_string())?);
            }
            Event::Enrollment(req) => {
                let p2 = self.phase2.as_mut().ok_or("no trial configured")?;
                p2.apply_enroll(req);
            }
            Event::TrialReport(req) => {
                let p2 = self.phase2.as_mut().ok_or("no trial configured")?;
                p2.apply_report(req);
            }
            Event::CampaignClosed => {
                self.closed = true;
                self.phase1.close();
            }
        }
        Ok(())
    }

    /// Folds a log. An empty log yields a campaign with the default config.
    pub fn replay(records: &[EventRecord]) -> Result<Self, StoreError> {
        let Some((first, rest)) = records.split_first() else {
            return Campaign::new(CampaignConfig::default()).map_err(|e| StoreError::Inconsistent {
                seq: 0,
                reason: e.message,
            });
        };
        let Event::CampaignConfig(cfg) = &first.event else {
            return Err(StoreError::MissingConfig);
        };
        let mut campaign = Campaign::new(cfg.clone()).map_err(|e| StoreError::Inconsistent {
            seq: first.seq,
            reason: e.message,
        })?;
        for r in rest {
            campaign
                .apply(&r.event)
                .map_err(|reason| StoreError::Inconsistent { seq: r.seq, reason })?;
        }
        Ok(campaign)
    }
}

/// Append-only event log, in memory or backed by a JSON-lines file.
#[derive(Debug)]
pub struct EventLog {
    records: Vec<EventRecord>,
    file: Option<File>,
    path: Option<PathBuf>,
    sync: bool,
}

impl EventLog {
    pub fn in_memory() -> Self {
        Self {
            records: Vec::new(),
            file: None,
            path: None,
            sync: false,
        }
    }

    /// Opens or creates a log file. A torn final line left by a crash is cut off.
    pub fn open(path: impl AsRef<Path>) -> Result<Self, StoreError> {
        let path = path.as_ref().to_path_buf();
        let mut file = OpenOptions::new().read(true).append(true).create(true).open(&path)?;
        let (records, valid_len) = read_records(&mut file)?;
        if valid_len < file.metadata()?.len() {
            file.set_len(valid_len)?;
        }
        file.seek(SeekFrom::End(0))?;
        Ok(Self {
            records,
            file: Some(file),
            path: Some(path),
            sync: true,
        })
    }

    /// Reads a log file without opening it for writing.
    pub fn read(path: impl AsRef<Path>) -> Result<Vec<EventRecord>, StoreError> {
        let mut file = File::open(path)?;
        Ok(read_records(&mut file)?.0)
    }

    /// Whether each append is flushed to stable storage before returning.
    pub fn set_sync(&mut self, sync: bool) {
        self.sync = sync;
    }

    pub fn path(&self) -> Option<&Path> {
        self.path.as_deref()
    }

    pub fn records(&self) -> &[EventRecord] {
        &self.records
    }

    /// Sequence numbers start at 1.
    pub fn next_seq(&self) -> u64 {
        self.records.len() as u64 + 1
    }

    pub fn append(&mut self, timestamp: u64, event: Event) -> Result<&EventRecord, StoreError> {
        let record = EventRecord {
            seq: self.next_seq(),
            timestamp,
            event,
        };
        if let Some(file) = self.file.as_mut() {
            let mut line = serde_json::to_vec(&record).map_err(std::io::Error::from)?;
            line.push(b'\n');
            file.write_all(&line)?;
            if self.sync {
                file.sync_data()?;
            }
        }
        self.records.push(record);
        Ok(self.records.last().expect("just pushed"))
    }

    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for r in &self.records {
            out.push_str(&serde_json::to_string(r).expect("records serialize"));
            out.push('\n');
        }
        out
    }
}

/// Parses complete lines; returns the records and the byte length they span.
fn read_records(file: &mut File) -> Result<(Vec<EventRecord>, u64), StoreError> {
    file.seek(SeekFrom::Start(0))?;
    let mut reader = BufReader::new(file);
    let mut records = Vec::new();
    let mut valid = 0u64;
    let mut buf = Vec::new();
    let mut line_no = 0;
    loop {
        buf.clear();
        let n = reader.read_until(b'\n', &mut buf)?;
        if n == 0 {
            break;
        }
        line_no += 1;
        if buf.last() != Some(&b'\n') {
            // torn write: the record never completed
            break;
        }
        let expected_seq = records.len() as u64 + 1;
        let corrupt = |reason: String| StoreError::Corrupt {
            line: line_no,
            expected_seq,
            reason,
        };
        let record: EventRecord = serde_json::from_slice(&buf).map_err(|e| corrupt(e.to_string()))?;
        if record.seq != expected_seq {
            return Err(corrupt(format!("found seq {}", record.seq)));
        }
        records.push(record);
        valid += n as u64;
    }
    Ok((records, valid))
}

struct Inner {
    campaign: Campaign,
    log: EventLog,
}

/// A live campaign: state, log and clock behind one lock so that each
/// request is validated, logged and applied atomically.
pub struct CampaignHandle {
    inner: Mutex<Inner>,
    clock: Arc<dyn Clock>,
}

impl fmt::Debug for CampaignHandle {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("CampaignHandle").finish_non_exhaustive()
    }
}

impl CampaignHandle {
    /// Starts a campaign on an empty log.
    pub fn create(config: CampaignConfig, mut log: EventLog, clock: Arc<dyn Clock>) -> Result<Self, ApiError> {
        if !log.records().is_empty() {
            return Err(ApiError::new(ErrorKind::Conflict, "log is not empty"));
        }
        let campaign = Campaign::new(config.clone())?;
        log.append(clock.now(), Event::CampaignConfig(config))?;
        Ok(Self {
            inner: Mutex::new(Inner { campaign, log }),
            clock,
        })
    }

    /// Rebuilds a campaign from the records already in `log`.
    pub fn recover(log: EventLog, clock: Arc<dyn Clock>) -> Result<Self, StoreError> {
        let campaign = Campaign::replay(log.records())?;
        Ok(Self {
            inner: Mutex::new(Inner { campaign, log }),
            clock,
        })
    }

    fn lock(&self) -> std::sync::MutexGuard<'_, Inner> {
        self.inner.lock().unwrap_or_else(|p| p.into_inner())
    }

    /// Runs `f` against the current state.
    pub fn with_campaign<R>(&self, f: impl FnOnce(&Campaign) -> R) -> R {
        f(&self.lock().campaign)
    }

    pub fn records(&self) -> Vec<EventRecord> {
        self.lock().log.records().to_vec()
    }

    pub fn clock(&self) -> &Arc<dyn Clock> {
        &self.clock
    }

    fn commit(inner: &mut Inner, now: u64, event: Event) -> Result<(), ApiError> {
        inner.log.append(now, event.clone())?;
        inner
            .campaign
            .apply(&event)
            .map_err(|m| ApiError::new(ErrorKind::Internal, m))
    }

    fn ensure_open(inner: &Inner) -> Result<(), ApiError> {
        if inner.campaign.closed {
            return Err(ApiError::new(ErrorKind::Closed, "campaign is closed"));
        }
        Ok(())
    }
}

/// Operations available to workers and requesters.
pub trait StudyApi {
    fn next_task(&self, worker: &crate::WorkerId) -> Result<Phase1Task, ApiError>;
    fn submit(&self, submission: &Phase1Submission) -> Result<SubmissionAck, ApiError>;
    fn report(&self, k: usize) -> Result<Vec<RankedHypothesis>, ApiError>;
    fn configure_trial(&self, trial: &TrialCampaign) -> Result<(), ApiError>;
    fn enroll(&self, request: &EnrollmentRequest) -> Result<Enrollment, ApiError>;
    fn record_report(&self, request: &TrialReportRequest) -> Result<(), ApiError>;
    fn analyze(&self) -> Result<CrossoverReport, ApiError>;
    fn export_csv(&self) -> Result<String, ApiError>;
    fn close(&self) -> Result<(), ApiError>;
}

impl StudyApi for CampaignHandle {
    fn next_task(&self, worker: &crate::WorkerId) -> Result<Phase1Task, ApiError> {
        let mut inner = self.lock();
        let now = self.clock.now();
        match inner.campaign.phase1.plan_task(worker, now)? {
            TaskPlan::Existing(task) => Ok(task),
            TaskPlan::Issue(ev) => {
                inner.log.append(now, Event::TaskIssued(ev.clone()))?;
                Ok(inner.campaign.phase1.apply_task_issued(&ev))
            }
        }
    }

    fn submit(&self, submission: &Phase1Submission) -> Result<SubmissionAck, ApiError> {
        let mut inner = self.lock();
        Self::ensure_open(&inner)?;
        let now = self.clock.now();
        inner.campaign.phase1.validate_submission(submission, now)?;
        inner.log.append(now, Event::Phase1Submission(submission.clone()))?;
        Ok(inner.campaign.phase1.apply_submission(submission))
    }

    fn report(&self, k: usize) -> Result<Vec<RankedHypothesis>, ApiError> {
        Ok(self.lock().campaign.phase1.report(k))
    }

    fn configure_trial(&self, trial: &TrialCampaign) -> Result<(), ApiError> {
        let mut inner = self.lock();
        Self::ensure_open(&inner)?;
        if inner.campaign.phase2.is_some() {
            return Err(ApiError::new(ErrorKind::Conflict, "trial already configured"));
        }
        if !inner.campaign.phase1.tree().contains(trial.hypothesis) {
            return Err(ApiError::new(
                ErrorKind::NotFound,
                format!("unknown hypothesis {}", trial.hypothesis),
            ));
        }
        trial.validate()?;
        let now = self.clock.now();
        Self::commit(&mut inner, now, Event::TrialConfigured(trial.clone()))
    }

    fn enroll(&self, request: &EnrollmentRequest) -> Result<Enrollment, ApiError> {
        let mut inner = self.lock();
        Self::ensure_open(&inner)?;
        let now = self.clock.now();
        let p2 = inner.campaign.phase2.as_ref().ok_or_else(no_trial)?;
        p2.validate_enroll(request, now)?;
        inner.log.append(now, Event::Enrollment(request.clone()))?;
        Ok(inner.campaign.phase2.as_mut().expect("checked").apply_enroll(request))
    }

    fn record_report(&self, request: &TrialReportRequest) -> Result<(), ApiError> {
        let mut inner = self.lock();
        Self::ensure_open(&inner)?;
        let now = self.clock.now();
        let p2 = inner.campaign.phase2.as_ref().ok_or_else(no_trial)?;
        p2.validate_report(request, now)?;
        Self::commit(&mut inner, now, Event::TrialReport(request.clone()))
    }

    fn analyze(&self) -> Result<CrossoverReport, ApiError> {
        let inner = self.lock();
        Ok(inner.campaign.phase2.as_ref().ok_or_else(no_trial)?.analyze())
    }

    fn export_csv(&self) -> Result<String, ApiError> {
        self.lock()
            .campaign
            .phase1
            .export_csv()
            .map_err(|e| ApiError::new(ErrorKind::Internal, e.to_string()))
    }

    fn close(&self) -> Result<(), ApiError> {
        let mut inner = self.lock();
        Self::ensure_open(&inner)?;
        let now = self.clock.now();
        Self::commit(&mut inner, now, Event::CampaignClosed)
    }
}

impl<T: StudyApi + ?Sized> StudyApi for Arc<T> {
    fn next_task(&self, worker: &crate::WorkerId) -> Result<Phase1Task, ApiError> {
        (**self).next_task(worker)
    }
    fn submit(&self, submission: &Phase1Submission) -> Result<SubmissionAck, ApiError> {
        (**self).submit(submission)
    }
    fn report(&self, k: usize) -> Result<Vec<RankedHypothesis>, ApiError> {
        (**self).report(k)
    }
    fn configure_trial(&self, trial: &TrialCampaign) -> Result<(), ApiError> {
        (**self).configure_trial(trial)
    }
    fn enroll(&self, request: &EnrollmentRequest) -> Result<Enrollment, ApiError> {
        (**self).enroll(request)
    }
    fn record_report(&self, request: &TrialReportRequest) -> Result<(), ApiError> {
        (**self).record_report(request)
    }
    fn analyze(&self) -> Result<CrossoverReport, ApiError> {
        (**self).analyze()
    }
    fn export_csv(&self) -> Result<String, ApiError> {
        (**self).export_csv()
    }
    fn close(&self) -> Result<(), ApiError> {
        (**self).close()
    }
}
