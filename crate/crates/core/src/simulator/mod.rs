//! Synthetic ad ecosystem: users with favourite sites, static campaigns
//! placed on sites, targeted campaigns with audiences and a frequency cap.
//! Experiments push simulated weeks through the detector and score its
//! decisions against the known labels.

mod config;
mod experiment;
mod world;

pub use config::{ConfigError, SimConfig, SlotModel, StressConfig};
pub use experiment::{
    cap_sweep, cleartext_week, compare_threshold_pipelines, private_week, run_experiment, sweep, write_csv,
    CleartextWeek, ConfusionCounts, ExperimentResult, PairDecisions, PipelineComparison, SimError, SweepParameter,
    SweepRow, WeekResult, CSV_HEADER,
};
pub use world::{generate_world, Campaign, CampaignKind, Impression, Label, SimWorld, WeekLog};
