//! Experiment orchestration: configuration, the training loop, metrics
//! files, evaluation, and the analysis pipeline.

pub mod analysis;
pub mod config;
pub mod metrics;
pub mod run;

pub use analysis::{analyze_top2_match, wilcoxon_signed_rank_greater, win_rate, Top2Report};
pub use config::{config_to_json, load_config, ExperimentConfig, RunMode};
pub use metrics::{read_evals, read_metrics, EvalRow, MetricsRow};
pub use run::{evaluate, greedy_episode_returns, run, EvalReport, RunArtifacts, RunDiagnostics};
