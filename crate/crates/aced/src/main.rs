//! Command-line entry point: train runs, snapshot evaluation, analysis
//! tables, and tabular theory diagnostics.
//!
//! Exit codes: 0 on success, 2 on configuration errors, 1 on runtime errors.

use std::collections::BTreeMap;
use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use serde::{Deserialize, Serialize};

use aced::agents::AgentKind;
use aced::error::Error;
use aced::oracle::{
    self, fixtures, operator_gap, tracking_experiment, trap_value_probe, value_iteration,
    StepSchedule, TabularMDP, VariantRunConfig,
};
use aced::rng::keyed_rng;
use aced::runner::analysis::{
    analyze_top2_match, rank_agents, rel_mse_block_scores, summarize_run_dir, win_rate,
};
use aced::runner::{self, load_config, RunMode};

#[derive(Parser)]
#[command(
    name = "aced",
    version,
    about = "Reliability-arbitrated ensemble RL at desk scale"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train an ensemble on a block schedule and write run artifacts.
    Run {
        /// JSON experiment config; missing keys take defaults.
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: u64,
        /// Output directory for metrics, evals, and the snapshot.
        #[arg(long)]
        out: PathBuf,
    },
    /// Greedily score a finished run's snapshot.
    Eval {
        /// A run directory produced by `run`.
        #[arg(long)]
        snapshot: PathBuf,
        #[arg(long)]
        episodes: u32,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Post-hoc analyses over finished run directories.
    Analyze {
        #[command(subcommand)]
        what: AnalyzeCommand,
    },
    /// Tabular theory diagnostics on frozen fixtures.
    Oracle {
        #[command(subcommand)]
        what: OracleCommand,
    },
}

#[derive(Subcommand)]
enum AnalyzeCommand {
    /// Top-2 match of arbitration reliabilities against the best
    /// single-agent runs, with a shuffled baseline and a Wilcoxon test.
    Top2 {
        /// Run directories: single-agent runs plus at least one aced run
        /// per environment.
        #[arg(long, num_args = 1.., required = true)]
        inputs: Vec<PathBuf>,
        #[arg(long, default_value_t = 200)]
        shuffles: u32,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Optional JSON report path.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Win-rate table over (environment, block) cells across run modes.
    Winrate {
        #[arg(long, num_args = 1.., required = true)]
        inputs: Vec<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Subcommand)]
enum OracleCommand {
    /// Value iteration on a named fixture, with self-consistency residual.
    ValueIter {
        #[arg(long)]
        config: PathBuf,
    },
    /// Overestimation probe and expected-operator gap of the double rule.
    DoubleGap {
        #[arg(long)]
        config: PathBuf,
    },
    /// Steady-state tracking error under drift and injected noise.
    Tracking {
        #[arg(long)]
        config: PathBuf,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            match err {
                Error::Config(_) => ExitCode::from(2),
                _ => ExitCode::from(1),
            }
        }
    }
}

fn dispatch(cli: Cli) -> aced::Result<()> {
    match cli.command {
        Command::Run { config, seed, out } => {
            let text = fs::read_to_string(&config).map_err(|e| Error::io(&config, e))?;
            let cfg = load_config(&text)?;
            let artifacts = runner::run(&cfg, seed, &out)?;
            println!("metrics: {}", artifacts.metrics_path.display());
            println!("evals:   {}", artifacts.evals_path.display());
            println!("snapshot: {}", artifacts.snapshot_dir.display());
            println!(
                "train events: {}, episodes: {}, assignment violations: {}",
                artifacts.diagnostics.train_events,
                artifacts.diagnostics.episodes_completed,
                artifacts.diagnostics.assignment_sum_violations,
            );
            Ok(())
        }
        Command::Eval {
            snapshot,
            episodes,
            seed,
        } => {
            let report = runner::evaluate(&snapshot, episodes, seed)?;
            println!(
                "{}",
                serde_json::to_string_pretty(&report).expect("report serializes")
            );
            if report.mean.is_none() {
                println!("note: zero episodes requested; mean undefined");
            }
            Ok(())
        }
        Command::Analyze { what } => match what {
            AnalyzeCommand::Top2 {
                inputs,
                shuffles,
                seed,
                out,
            } => analyze_top2(&inputs, shuffles, seed, out.as_deref()),
            AnalyzeCommand::Winrate { inputs, out } => analyze_winrate(&inputs, out.as_deref()),
        },
        Command::Oracle { what } => match what {
            OracleCommand::ValueIter { config } => oracle_value_iter(&config),
            OracleCommand::DoubleGap { config } => oracle_double_gap(&config),
            OracleCommand::Tracking { config } => oracle_tracking(&config),
        },
    }
}

fn analyze_top2(
    inputs: &[PathBuf],
    shuffles: u32,
    seed: u64,
    out: Option<&std::path::Path>,
) -> aced::Result<()> {
    // Single-agent runs supply best-agent labels; aced runs supply
    // reliability rankings. Multiple seeds per cell are averaged.
    type BlockScores = (Vec<AgentKind>, Vec<Vec<f64>>);
    let mut single: BTreeMap<(String, AgentKind), Vec<Vec<f64>>> = BTreeMap::new();
    let mut aced_scores: BTreeMap<String, Vec<BlockScores>> = BTreeMap::new();
    let mut blocks_per_env: BTreeMap<String, usize> = BTreeMap::new();
    for dir in inputs {
        let summary = summarize_run_dir(dir)?;
        let prev = blocks_per_env
            .entry(summary.env.clone())
            .or_insert(summary.n_blocks);
        if *prev != summary.n_blocks {
            return Err(Error::invalid(format!(
                "environment {}: inconsistent schedule lengths across inputs",
                summary.env
            )));
        }
        match summary.mode {
            RunMode::SingleAgent(kind) => {
                single
                    .entry((summary.env.clone(), kind))
                    .or_default()
                    .push(summary.block_eval_means.clone());
            }
            RunMode::Aced => {
                let scores = rel_mse_block_scores(&dir.join("metrics.csv"), summary.n_blocks)?;
                aced_scores
                    .entry(summary.env.clone())
                    .or_default()
                    .push(scores);
            }
            _ => {
                return Err(Error::invalid(format!(
                    "{}: top2 analysis accepts single-agent and aced runs only",
                    dir.display()
                )))
            }
        }
    }

    let mut best_labels = BTreeMap::new();
    for (env, &n_blocks) in &blocks_per_env {
        let kinds: Vec<AgentKind> = single
            .keys()
            .filter(|(e, _)| e == env)
            .map(|(_, k)| *k)
            .collect();
        if kinds.is_empty() {
            return Err(Error::invalid(format!(
                "environment {env}: no single-agent runs supplied"
            )));
        }
        for block in 0..n_blocks {
            let mut best: Option<(AgentKind, f64)> = None;
            for kind in &kinds {
                let runs = &single[&(env.clone(), *kind)];
                let mean: f64 = runs.iter().map(|r| r[block]).sum::<f64>() / runs.len() as f64;
                if best.is_none_or(|(_, b)| mean > b) {
                    best = Some((*kind, mean));
                }
            }
            best_labels.insert((env.clone(), block), best.expect("non-empty kinds").0);
        }
    }

    let mut rankings = BTreeMap::new();
    for (env, &n_blocks) in &blocks_per_env {
        let entries = aced_scores
            .get(env)
            .ok_or_else(|| Error::invalid(format!("environment {env}: no aced run supplied")))?;
        let roster = entries[0].0.clone();
        let mut averaged = vec![vec![0.0f64; roster.len()]; n_blocks];
        for (r, scores) in entries {
            if *r != roster {
                return Err(Error::invalid(format!(
                    "environment {env}: aced runs disagree on the roster"
                )));
            }
            for (avg_row, row) in averaged.iter_mut().zip(scores) {
                for (a, v) in avg_row.iter_mut().zip(row) {
                    *a += v / entries.len() as f64;
                }
            }
        }
        for (block, ranking) in rank_agents(&roster, &averaged).into_iter().enumerate() {
            rankings.insert((env.clone(), block), ranking);
        }
    }

    let mut rng = keyed_rng(seed, 0xA11A);
    let report = analyze_top2_match(&best_labels, &rankings, shuffles, &mut rng)?;
    let json = serde_json::to_string_pretty(&report).expect("report serializes");
    println!("{json}");
    if let Some(path) = out {
        fs::write(path, json).map_err(|e| Error::io(path, e))?;
    }
    Ok(())
}

fn analyze_winrate(inputs: &[PathBuf], out: Option<&std::path::Path>) -> aced::Result<()> {
    let mut grouped: BTreeMap<(String, String), Vec<Vec<f64>>> = BTreeMap::new();
    for dir in inputs {
        let summary = summarize_run_dir(dir)?;
        grouped
            .entry((summary.env.clone(), summary.mode.as_string()))
            .or_default()
            .push(summary.block_eval_means.clone());
    }
    let mut block_means = BTreeMap::new();
    for ((env, mode), runs) in grouped {
        let n_blocks = runs[0].len();
        let mut means = vec![0.0; n_blocks];
        for run in &runs {
            if run.len() != n_blocks {
                return Err(Error::invalid(format!(
                    "environment {env}, mode {mode}: inconsistent block counts"
                )));
            }
            for (m, v) in means.iter_mut().zip(run) {
                *m += v / runs.len() as f64;
            }
        }
        block_means.insert((env, mode), means);
    }
    let table = win_rate(&block_means)?;
    let json = serde_json::to_string_pretty(&table).expect("table serializes");
    println!("{json}");
    if let Some(path) = out {
        fs::write(path, json).map_err(|e| Error::io(path, e))?;
    }
    Ok(())
}

fn parse_json_config<T: for<'de> Deserialize<'de>>(path: &std::path::Path) -> aced::Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Config(e.to_string()))
}

fn fixture_by_name(name: &str) -> aced::Result<TabularMDP> {
    match name {
        "chain" => Ok(fixtures::chain_one_state()),
        "random5" => Ok(fixtures::random_dense_5()),
        "bias" => Ok(fixtures::max_bias()),
        "drift" => Ok(fixtures::drift_base()),
        other => Err(Error::Config(format!(
            "fixture: unknown value {other:?} (expected chain, random5, bias, or drift)"
        ))),
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct ValueIterConfig {
    fixture: String,
    tol: f64,
}

impl Default for ValueIterConfig {
    fn default() -> Self {
        ValueIterConfig {
            fixture: "random5".into(),
            tol: 1e-10,
        }
    }
}

fn oracle_value_iter(path: &std::path::Path) -> aced::Result<()> {
    let cfg: ValueIterConfig = parse_json_config(path)?;
    let mdp = fixture_by_name(&cfg.fixture)?;
    let q_star = value_iteration(&mdp, cfg.tol);
    let residual = oracle::bellman_apply(&q_star, &mdp)?.max_distance(&q_star);
    #[derive(Serialize)]
    struct Report<'a> {
        fixture: &'a str,
        tol: f64,
        n_states: usize,
        n_actions: usize,
        q_star: &'a [f64],
        self_consistency_residual: f64,
    }
    let report = Report {
        fixture: &cfg.fixture,
        tol: cfg.tol,
        n_states: mdp.n_states,
        n_actions: mdp.n_actions,
        q_star: &q_star.data,
        self_consistency_residual: residual,
    };
    println!(
        "{}",
        serde_json::to_string_pretty(&report).expect("report serializes")
    );
    Ok(())
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct DoubleGapConfig {
    updates: u64,
    sync_period: u32,
    snapshot_stride: u64,
    mc_draws: u64,
    exploration: f64,
    seeds: Vec<u64>,
}

impl Default for DoubleGapConfig {
    fn default() -> Self {
        DoubleGapConfig {
            updates: 100_000,
            sync_period: 100,
            snapshot_stride: 1_000,
            mc_draws: 10_000,
            exploration: 0.3,
            seeds: (0..10).collect(),
        }
    }
}

fn oracle_double_gap(path: &std::path::Path) -> aced::Result<()> {
    let cfg: DoubleGapConfig = parse_json_config(path)?;
    let mdp = fixtures::max_bias();
    let q_star = value_iteration(&mdp, 1e-10);
    #[derive(Serialize)]
    struct SeedReport {
        seed: u64,
        standard_trap_average: f64,
        double_trap_average: f64,
        standard_gap: f64,
        double_gap: f64,
        double_bound: f64,
        double_final_distance: f64,
        bound_holds: Option<bool>,
    }
    let mut reports = Vec::new();
    let mut ordering_holds = 0u32;
    for &seed in &cfg.seeds {
        let run_cfg = VariantRunConfig {
            total_updates: cfg.updates,
            exploration: cfg.exploration,
            sync_period: cfg.sync_period,
            snapshot_stride: cfg.snapshot_stride,
            log_stride: 0,
            ..VariantRunConfig::default()
        };
        let probe = |kind| {
            let mut behavior = keyed_rng(seed, 10);
            let mut noise = keyed_rng(seed, 11);
            trap_value_probe(
                &mdp,
                kind,
                &run_cfg,
                fixtures::BIAS_START_STATE,
                fixtures::BIAS_SAFE_ACTION,
                &mut behavior,
                &mut noise,
            )
        };
        let (std_avg, std_run) = probe(AgentKind::Standard);
        let (dbl_avg, dbl_run) = probe(AgentKind::Double);
        if std_avg > dbl_avg {
            ordering_holds += 1;
        }
        let mut gap_rng = keyed_rng(seed, 12);
        let std_samples: Vec<_> = std_run
            .snapshots
            .iter()
            .map(|s| (s.online.clone(), s.target.clone()))
            .collect();
        let std_gap = operator_gap(
            &std_samples,
            &mdp,
            AgentKind::Standard,
            cfg.mc_draws,
            Some(std_run.final_table.max_distance(&q_star)),
            &mut gap_rng,
        )?;
        let dbl_samples: Vec<_> = dbl_run
            .snapshots
            .iter()
            .map(|s| (s.online.clone(), s.target.clone()))
            .collect();
        let dbl_final = dbl_run.final_table.max_distance(&q_star);
        let dbl_gap = operator_gap(
            &dbl_samples,
            &mdp,
            AgentKind::Double,
            cfg.mc_draws,
            Some(dbl_final),
            &mut gap_rng,
        )?;
        reports.push(SeedReport {
            seed,
            standard_trap_average: std_avg,
            double_trap_average: dbl_avg,
            standard_gap: std_gap.gap,
            double_gap: dbl_gap.gap,
            double_bound: dbl_gap.bound,
            double_final_distance: dbl_final,
            bound_holds: dbl_gap.bound_holds,
        });
    }
    #[derive(Serialize)]
    struct Report {
        seeds: usize,
        overestimation_ordering_holds: u32,
        per_seed: Vec<SeedReport>,
    }
    let report = Report {
        seeds: cfg.seeds.len(),
        overestimation_ordering_holds: ordering_holds,
        per_seed: reports,
    };
    println!(
        "{}",
        serde_json::to_string_pretty(&report).expect("report serializes")
    );
    Ok(())
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct TrackingCliConfig {
    noise_stds: Vec<f64>,
    seeds: Vec<u64>,
    phase_length: u64,
    n_phases: usize,
    step_size: f64,
    log_stride: u64,
}

impl Default for TrackingCliConfig {
    fn default() -> Self {
        TrackingCliConfig {
            noise_stds: vec![0.0, 0.1, 0.3],
            seeds: (0..10).collect(),
            phase_length: 3_000,
            n_phases: 4,
            step_size: 0.2,
            log_stride: 100,
        }
    }
}

fn oracle_tracking(path: &std::path::Path) -> aced::Result<()> {
    let cfg: TrackingCliConfig = parse_json_config(path)?;
    let base = fixtures::drift_base();
    let drift = fixtures::alternating_drift(&base, cfg.phase_length, cfg.n_phases);
    let mut per_seed_monotone = 0u32;
    let mut all_reports = Vec::new();
    for &seed in &cfg.seeds {
        let mut steady: Vec<f64> = Vec::new();
        for &std in &cfg.noise_stds {
            let report = tracking_experiment(
                &base,
                &drift,
                AgentKind::Standard,
                cfg.step_size,
                std,
                seed,
                cfg.log_stride,
                1e-10,
            )?;
            steady.push(report.steady_state_delta);
            all_reports.push(report);
        }
        if steady.windows(2).all(|w| w[0] <= w[1]) {
            per_seed_monotone += 1;
        }
    }
    #[derive(Serialize)]
    struct Report {
        noise_stds: Vec<f64>,
        seeds: usize,
        monotone_seeds: u32,
        step_schedule: StepSchedule,
        runs: Vec<oracle::TrackingReport>,
    }
    let report = Report {
        noise_stds: cfg.noise_stds.clone(),
        seeds: cfg.seeds.len(),
        monotone_seeds: per_seed_monotone,
        step_schedule: StepSchedule::Constant {
            rate: cfg.step_size,
        },
        runs: all_reports,
    };
    println!(
        "{}",
        serde_json::to_string_pretty(&report).expect("report serializes")
    );
    Ok(())
}
