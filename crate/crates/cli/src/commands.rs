//! Offline commands: simulation runs and reports from a log file.

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{bail, Context};
use microstudy_core::crowdsim::{generate_population, simulate_phase1, simulate_phase2, SimConfig};
use microstudy_core::phase2::{compare_with_expert, TrialSchedule};
use microstudy_core::store::Campaign;
use microstudy_core::{
    CampaignConfig, CampaignHandle, Clock, CrossoverReport, EventLog, ExpertLabel, ManualClock, RankedHypothesis, StudyApi,
    TrialCampaign,
};
use serde::{Deserialize, Serialize};

/// Which hypothesis to trial after Phase 1, and how.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialPlan {
    /// Simulator cause whose first tree entry becomes the trial hypothesis.
    pub cause: String,
    pub instruction: String,
    #[serde(default)]
    pub expert_label: Option<ExpertLabel>,
    #[serde(default)]
    pub schedule: Option<TrialSchedule>,
    /// Workers enrolled in the trial; defaults to the whole population.
    #[serde(default)]
    pub population_size: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct StudyConfig {
    pub campaign: CampaignConfig,
    pub sim: SimConfig,
    pub phase1_tasks: usize,
    pub report_k: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub trial: Option<TrialPlan>,
    /// Where `serve` keeps campaign logs.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub data_dir: Option<PathBuf>,
}

impl Default for StudyConfig {
    fn default() -> Self {
        Self {
            campaign: CampaignConfig::default(),
            sim: SimConfig::default(),
            phase1_tasks: 3000,
            report_k: 20,
            trial: None,
            data_dir: None,
        }
    }
}

impl StudyConfig {
    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
    }
}

#[derive(Debug, Serialize)]
pub struct SimulationSummary {
    pub seed: u64,
    pub tasks: usize,
    pub hypotheses: usize,
    pub top: Vec<RankedHypothesis>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub classification: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub agrees_with_experts: Option<bool>,
}

/// Runs Phase 1 (and the trial, if configured) in process, writing the event
/// log, report, CSV exports and analysis into `out`.
pub fn simulate(cfg: &StudyConfig, seed: u64, out: &Path) -> anyhow::Result<SimulationSummary> {
    fs::create_dir_all(out)?;
    let log_path = out.join("events.jsonl");
    if log_path.exists() {
        bail!("{} already exists", log_path.display());
    }
    let sim = SimConfig { seed, ..cfg.sim.clone() };
    let mut campaign = cfg.campaign.clone();
    campaign.selection.rng_seed = seed;
    campaign.trial = None;

    let clock = Arc::new(ManualClock::new(0));
    let mut log = EventLog::open(&log_path)?;
    log.set_sync(false);
    let handle = CampaignHandle::create(campaign, log, clock.clone())?;
    let population = generate_population(&sim)?;
    let outcome = simulate_phase1(&sim, &population, &handle, cfg.phase1_tasks)?;

    let top = handle.report(cfg.report_k)?;
    fs::write(out.join("report.json"), serde_json::to_string_pretty(&top)?)?;
    fs::write(out.join("hypotheses.csv"), handle.export_csv()?)?;

    let mut summary = SimulationSummary {
        seed,
        tasks: cfg.phase1_tasks,
        hypotheses: outcome.hypothesis_counts.last().copied().unwrap_or(0),
        top,
        classification: None,
        agrees_with_experts: None,
    };

    if let Some(plan) = &cfg.trial {
        let hypothesis = handle
            .with_campaign(|c| {
                c.phase1()
                    .tree()
                    .nodes()
                    .iter()
                    .find(|n| n.text == plan.cause)
                    .map(|n| n.id)
            })
            .with_context(|| format!("no hypothesis entered for cause {:?}", plan.cause))?;
        let schedule = plan.schedule.unwrap_or(TrialSchedule {
            start: clock.now() + 1,
            ..TrialSchedule::default()
        });
        let trial = TrialCampaign {
            schedule,
            expert_label: plan.expert_label,
            seed,
            ..TrialCampaign::new(hypothesis, plan.instruction.clone())
        };
        let trial_sim = SimConfig {
            population_size: plan.population_size.unwrap_or(sim.population_size),
            ..sim.clone()
        };
        let participants = generate_population(&trial_sim)?;
        let report = simulate_phase2(&trial_sim, &participants, &handle, &clock, &trial, &plan.cause)?;
        write_analysis(&report, out)?;
        summary.classification = Some(report.classification_label());
        summary.agrees_with_experts = trial.expert_label.map(|_| compare_with_expert(&report, &trial)).transpose()?;
    }
    Ok(summary)
}

fn write_analysis(report: &CrossoverReport, out: &Path) -> anyhow::Result<()> {
    fs::write(out.join("analysis.json"), serde_json::to_string_pretty(report)?)?;
    fs::write(out.join("phase2_summary.csv"), report.summary_csv()?)?;
    fs::write(out.join("adherence.csv"), report.adherence_csv()?)?;
    Ok(())
}

pub fn replay(log: &Path) -> anyhow::Result<Campaign> {
    let records = EventLog::read(log).with_context(|| format!("reading {}", log.display()))?;
    Ok(Campaign::replay(&records)?)
}

pub fn report(log: &Path, k: usize) -> anyhow::Result<Vec<RankedHypothesis>> {
    Ok(replay(log)?.phase1().report(k))
}

#[derive(Debug, Serialize)]
pub struct AnalysisOutput {
    pub report: CrossoverReport,
    pub classification: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub agrees_with_experts: Option<bool>,
}

pub fn analyze(log: &Path) -> anyhow::Result<AnalysisOutput> {
    let campaign = replay(log)?;
    let phase2 = campaign.phase2().context("the log has no trial")?;
    let report = phase2.analyze();
    let agrees = phase2
        .campaign()
        .expert_label
        .map(|_| compare_with_expert(&report, phase2.campaign()))
        .transpose()?;
    Ok(AnalysisOutput {
        classification: report.classification_label(),
        report,
        agrees_with_experts: agrees,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum ExportFormat {
    Csv,
    Json,
}

pub fn export(log: &Path, format: ExportFormat) -> anyhow::Result<String> {
    let campaign = replay(log)?;
    match format {
        ExportFormat::Csv => Ok(campaign.phase1().export_csv()?),
        ExportFormat::Json => Ok(serde_json::to_string_pretty(&campaign.phase1().report(usize::MAX))?),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use microstudy_core::crowdsim::decoys;

    fn small() -> StudyConfig {
        StudyConfig {
            sim: SimConfig {
                population_size: 400,
                decoy_causes: decoys(30, 0.1),
                ..SimConfig::default()
            },
            phase1_tasks: 300,
            trial: Some(TrialPlan {
                cause: "bask in the morning sun".into(),
                instruction: "Get up early and bask in the sun".into(),
                expert_label: Some(ExpertLabel::SeemsEffective),
                schedule: None,
                population_size: None,
            }),
            ..StudyConfig::default()
        }
    }

    #[test]
    fn simulate_then_read_back() {
        let dir = tempfile::tempdir().unwrap();
        let summary = simulate(&small(), 9, dir.path()).unwrap();
        assert!(summary.classification.is_some());
        let log = dir.path().join("events.jsonl");
        assert_eq!(report(&log, 20).unwrap(), summary.top);
        assert_eq!(
            export(&log, ExportFormat::Csv).unwrap(),
            fs::read_to_string(dir.path().join("hypotheses.csv")).unwrap()
        );
        let analysis = analyze(&log).unwrap();
        assert_eq!(Some(analysis.classification), summary.classification);
        assert_eq!(analysis.agrees_with_experts, summary.agrees_with_experts);
        // refuses to overwrite a previous run
        assert!(simulate(&small(), 9, dir.path()).is_err());
    }

    #[test]
    fn config_defaults_fill_missing_fields() {
        let cfg: StudyConfig = serde_json::from_str(r#"{"phase1_tasks": 5, "sim": {"population_size": 10}}"#).unwrap();
        assert_eq!(cfg.phase1_tasks, 5);
        assert_eq!(cfg.sim.population_size, 10);
        assert_eq!(cfg.campaign.selection.m, 10);
        assert_eq!(cfg.report_k, 20);
    }
}
