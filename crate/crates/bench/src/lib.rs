//! Workloads shared by the criterion benches.

use std::sync::Arc;

use microstudy_core::crowdsim::{generate_population, simulate_phase1, SimConfig};
use microstudy_core::{CampaignConfig, CampaignHandle, EventLog, ManualClock, SelectionConfig};

/// A campaign that has already run `tasks` simulated Phase 1 tasks.
pub fn warmed_campaign(tasks: usize, seed: u64) -> (CampaignHandle, SimConfig) {
    let sim = SimConfig { seed, ..SimConfig::default() };
    let population = generate_population(&sim).expect("default config is valid");
    let config = CampaignConfig {
        selection: SelectionConfig { rng_seed: seed, ..SelectionConfig::default() },
        ..CampaignConfig::default()
    };
    let handle = CampaignHandle::create(config, EventLog::in_memory(), Arc::new(ManualClock::new(0)))
        .expect("default config is valid");
    simulate_phase1(&sim, &population, &handle, tasks).expect("in-process run");
    (handle, sim)
}
