//! Two-phase crowd research workflow.
//!
//! Phase 1 grows a hypothesis tree from pipelined microtasks and ranks the
//! hypotheses by the odds ratio of worker condition against experience.
//! Phase 2 verifies a chosen hypothesis with a crossover pseudo-RCT scored by
//! the PSQI. A simulated worker population drives both phases through the
//! same public API that serves real workers.

use std::fmt;

use serde::{Deserialize, Serialize};

pub mod clock;
pub mod crowdsim;
pub mod phase1;
pub mod phase2;
pub mod psqi;
pub mod ranking;
pub mod selection;
pub mod stats;
pub mod store;
pub mod tree;

pub use clock::{Clock, ManualClock, SystemClock};
pub use phase1::{Phase1Config, Phase1Engine, Phase1Submission, Phase1Task, TaskId};
pub use phase2::{Classification, CrossoverReport, ExpertLabel, Group, Phase2Engine, TrialCampaign, TrialRecord};
pub use psqi::{score_psqi, PsqiResponse, PsqiScore};
pub use ranking::{ConditionLabel, CrossTab, RankedHypothesis, Tabulation, Verdict};
pub use selection::SelectionConfig;
pub use store::{ApiError, Campaign, CampaignConfig, CampaignHandle, EventLog, EventRecord, StudyApi};
pub use tree::{HypothesisNode, HypothesisTree, NodeId};

/// Opaque worker identifier.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct WorkerId(pub String);

impl WorkerId {
    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for WorkerId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl From<&str> for WorkerId {
    fn from(s: &str) -> Self {
        WorkerId(s.to_string())
    }
}

impl From<String> for WorkerId {
    fn from(s: String) -> Self {
        WorkerId(s)
    }
}
