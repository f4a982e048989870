//! Post-hoc analyses: Top-2 match of reliability rankings against the best
//! single-agent labels, a paired Wilcoxon signed-rank test, and win-rate
//! tables across run modes.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::agents::AgentKind;
use crate::error::{Error, Result};
use crate::runner::config::{load_config, ExperimentConfig, RunMode};
use crate::runner::metrics::{read_evals, read_metrics};

/// Outcome of a one-sided Wilcoxon signed-rank test.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct WilcoxonResult {
    /// Rank sum of the negative differences (the test statistic for the
    /// one-sided "greater" alternative).
    pub w_minus: f64,
    /// Rank sum of the positive differences.
    pub w_plus: f64,
    /// One-sided p-value for the alternative "differences are positive".
    pub p_value: f64,
    /// Differences used after dropping zeros.
    pub n_used: usize,
    /// False when every difference was zero (no decision possible).
    pub decisive: bool,
    /// "exact" for n <= 25, "normal" beyond.
    pub method: String,
}

/// One-sided (greater) Wilcoxon signed-rank test on paired differences.
///
/// Zero differences are dropped. Up to n = 25 the p-value is exact, computed
/// from the distribution of rank-sum subsets (ties get average ranks);
/// beyond that a normal approximation with continuity and tie correction is
/// used.
pub fn wilcoxon_signed_rank_greater(diffs: &[f64]) -> WilcoxonResult {
    let nonzero: Vec<f64> = diffs.iter().copied().filter(|d| *d != 0.0).collect();
    let n = nonzero.len();
    if n == 0 {
        return WilcoxonResult {
            w_minus: 0.0,
            w_plus: 0.0,
            p_value: 1.0,
            n_used: 0,
            decisive: false,
            method: "degenerate".into(),
        };
    }

    // Average ranks of |d|, doubled so ties stay integral.
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| {
        nonzero[a]
            .abs()
            .partial_cmp(&nonzero[b].abs())
            .expect("finite diffs")
    });
    let mut doubled_ranks = vec![0u64; n];
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && nonzero[order[j + 1]].abs() == nonzero[order[i]].abs() {
            j += 1;
        }
        // Average of ranks i+1..=j+1, doubled: (i+1 + j+1).
        let doubled = (i + 1 + j + 1) as u64;
        for &ix in &order[i..=j] {
            doubled_ranks[ix] = doubled;
        }
        i = j + 1;
    }

    let doubled_w_minus: u64 = (0..n)
        .filter(|&ix| nonzero[ix] < 0.0)
        .map(|ix| doubled_ranks[ix])
        .sum();
    let doubled_w_plus: u64 = (0..n)
        .filter(|&ix| nonzero[ix] > 0.0)
        .map(|ix| doubled_ranks[ix])
        .sum();

    let (p_value, method) = if n <= 25 {
        (
            exact_p_at_most(&doubled_ranks, doubled_w_minus),
            "exact".to_string(),
        )
    } else {
        // Continuity-corrected normal approximation with tie correction.
        let nf = n as f64;
        let mean = nf * (nf + 1.0) / 4.0;
        let mut tie_term = 0.0;
        let mut counts: BTreeMap<u64, f64> = BTreeMap::new();
        for &r in &doubled_ranks {
            *counts.entry(r).or_insert(0.0) += 1.0;
        }
        for (_, t) in counts {
            tie_term += t * t * t - t;
        }
        let var = nf * (nf + 1.0) * (2.0 * nf + 1.0) / 24.0 - tie_term / 48.0;
        let w = doubled_w_minus as f64 / 2.0;
        let z = (w + 0.5 - mean) / var.sqrt();
        (phi(z), "normal".to_string())
    };

    WilcoxonResult {
        w_minus: doubled_w_minus as f64 / 2.0,
        w_plus: doubled_w_plus as f64 / 2.0,
        p_value,
        n_used: n,
        decisive: true,
        method,
    }
}

/// P(W- <= observed) over all 2^n sign assignments, by subset-sum counting.
fn exact_p_at_most(doubled_ranks: &[u64], observed: u64) -> f64 {
    let total: u64 = doubled_ranks.iter().sum();
    let mut counts = vec![0.0f64; total as usize + 1];
    counts[0] = 1.0;
    let mut reach = 0usize;
    for &r in doubled_ranks {
        let r = r as usize;
        reach += r;
        for s in (r..=reach).rev() {
            counts[s] += counts[s - r];
        }
    }
    let favorable: f64 = counts[..=(observed as usize).min(total as usize)].iter().sum();
    favorable / 2f64.powi(doubled_ranks.len() as i32)
}

/// Standard normal CDF via the Abramowitz-Stegun erf approximation.
fn phi(z: f64) -> f64 {
    0.5 * (1.0 + erf(z / std::f64::consts::SQRT_2))
}

fn erf(x: f64) -> f64 {
    let sign = if x < 0.0 { -1.0 } else { 1.0 };
    let x = x.abs();
    let t = 1.0 / (1.0 + 0.3275911 * x);
    let poly = t
        * (0.254829592
            + t * (-0.284496736 + t * (1.421413741 + t * (-1.453152027 + t * 1.061405429))));
    sign * (1.0 - poly * (-x * x).exp())
}

/// A (environment, block) analysis cell.
pub type CellKey = (String, usize);

/// Top-2 match of reliability rankings against best-agent labels.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Top2Report {
    pub cells: Vec<CellKey>,
    /// Fraction of cells where the best agent is in the ranking's top two.
    pub match_ratio: f64,
    /// Same fraction under rank shuffling, averaged over trials.
    pub baseline_ratio: f64,
    pub shuffle_trials: u32,
    pub per_cell_match: Vec<f64>,
    pub per_cell_baseline: Vec<f64>,
    pub wilcoxon: WilcoxonResult,
}

/// Compares per-cell best-agent labels with reliability rankings.
///
/// A cell matches when its best label appears among the top two ranked
/// agents. The shuffled baseline redraws each cell's ranking uniformly;
/// the paired Wilcoxon test runs on per-cell match indicator differences.
pub fn analyze_top2_match(
    best_labels: &BTreeMap<CellKey, AgentKind>,
    rankings: &BTreeMap<CellKey, Vec<AgentKind>>,
    shuffle_trials: u32,
    rng: &mut impl Rng,
) -> Result<Top2Report> {
    if best_labels.is_empty() {
        return Err(Error::invalid("no analysis cells supplied"));
    }
    if shuffle_trials == 0 {
        return Err(Error::invalid("shuffle_trials must be positive"));
    }
    let label_cells: Vec<&CellKey> = best_labels.keys().collect();
    let ranking_cells: Vec<&CellKey> = rankings.keys().collect();
    if label_cells != ranking_cells {
        return Err(Error::invalid(
            "best-agent labels and rankings cover different (environment, block) cells",
        ));
    }

    let mut cells = Vec::new();
    let mut per_cell_match = Vec::new();
    let mut per_cell_baseline = Vec::new();
    for (cell, best) in best_labels {
        let ranking = &rankings[cell];
        if ranking.is_empty() {
            return Err(Error::invalid(format!("empty ranking for cell {cell:?}")));
        }
        let top2 = &ranking[..ranking.len().min(2)];
        per_cell_match.push(top2.contains(best) as u8 as f64);

        let mut hits = 0u32;
        let mut shuffled = ranking.clone();
        for _ in 0..shuffle_trials {
            for i in (1..shuffled.len()).rev() {
                let j = rng.random_range(0..=i);
                shuffled.swap(i, j);
            }
            if shuffled[..shuffled.len().min(2)].contains(best) {
                hits += 1;
            }
        }
        per_cell_baseline.push(hits as f64 / shuffle_trials as f64);
        cells.push(cell.clone());
    }

    let diffs: Vec<f64> = per_cell_match
        .iter()
        .zip(&per_cell_baseline)
        .map(|(m, b)| m - b)
        .collect();
    let n = per_cell_match.len() as f64;
    Ok(Top2Report {
        cells,
        match_ratio: per_cell_match.iter().sum::<f64>() / n,
        baseline_ratio: per_cell_baseline.iter().sum::<f64>() / n,
        shuffle_trials,
        per_cell_match,
        per_cell_baseline,
        wilcoxon: wilcoxon_signed_rank_greater(&diffs),
    })
}

/// Win percentages per mode over all (environment, block) cells.
///
/// In every cell the mode with the highest mean return scores one win,
/// split fractionally on exact ties.
pub fn win_rate(
    block_means: &BTreeMap<(String, String), Vec<f64>>,
) -> Result<BTreeMap<String, f64>> {
    if block_means.is_empty() {
        return Err(Error::invalid("no results supplied"));
    }
    let mut envs: BTreeMap<String, usize> = BTreeMap::new();
    let mut modes: Vec<String> = Vec::new();
    for ((env, mode), blocks) in block_means {
        let entry = envs.entry(env.clone()).or_insert(blocks.len());
        if *entry != blocks.len() {
            return Err(Error::invalid(format!(
                "environment {env} has inconsistent block counts"
            )));
        }
        if !modes.contains(mode) {
            modes.push(mode.clone());
        }
    }
    for env in envs.keys() {
        for mode in &modes {
            if !block_means.contains_key(&(env.clone(), mode.clone())) {
                return Err(Error::invalid(format!(
                    "missing cell: environment {env}, mode {mode}"
                )));
            }
        }
    }

    let mut wins: BTreeMap<String, f64> = modes.iter().map(|m| (m.clone(), 0.0)).collect();
    let mut total_cells = 0u32;
    for (env, &n_blocks) in &envs {
        for block in 0..n_blocks {
            total_cells += 1;
            let scores: Vec<(String, f64)> = modes
                .iter()
                .map(|m| {
                    (
                        m.clone(),
                        block_means[&(env.clone(), m.clone())][block],
                    )
                })
                .collect();
            let best = scores
                .iter()
                .map(|(_, s)| *s)
                .fold(f64::NEG_INFINITY, f64::max);
            let winners: Vec<&String> = scores
                .iter()
                .filter(|(_, s)| *s == best)
                .map(|(m, _)| m)
                .collect();
            let share = 1.0 / winners.len() as f64;
            for w in winners {
                *wins.get_mut(w).expect("mode present") += share;
            }
        }
    }
    Ok(wins
        .into_iter()
        .map(|(m, w)| (m, 100.0 * w / total_cells as f64))
        .collect())
}

/// Digest of one run directory used by the analysis commands.
#[derive(Debug, Clone)]
pub struct RunSummary {
    pub env: String,
    pub mode: RunMode,
    pub config: ExperimentConfig,
    pub n_blocks: usize,
    /// Mean evaluation return per block (averaged over the block's eval
    /// events).
    pub block_eval_means: Vec<f64>,
}

/// Reads a run directory's echoed config and evaluation records.
pub fn summarize_run_dir(dir: &Path) -> Result<RunSummary> {
    let cfg_path = dir.join("config.json");
    let text = fs::read_to_string(&cfg_path).map_err(|e| Error::io(&cfg_path, e))?;
    let config = load_config(&text)?;
    let n_blocks = config.schedule.len();
    let evals = read_evals(&dir.join("evals.csv"))?;
    let mut sums = vec![0.0; n_blocks];
    let mut counts = vec![0u32; n_blocks];
    for row in &evals {
        if row.block >= n_blocks {
            return Err(Error::invalid(format!(
                "{}: eval row references block {} beyond the schedule",
                dir.display(),
                row.block
            )));
        }
        sums[row.block] += row.mean_return;
        counts[row.block] += 1;
    }
    if counts.contains(&0) {
        return Err(Error::invalid(format!(
            "{}: evaluation records do not cover every block",
            dir.display()
        )));
    }
    let env = serde_json::to_value(config.env)
        .expect("env serializes")
        .as_str()
        .expect("env is a string")
        .to_string();
    Ok(RunSummary {
        env,
        mode: config.mode.clone(),
        n_blocks,
        block_eval_means: sums
            .iter()
            .zip(&counts)
            .map(|(s, &c)| s / c as f64)
            .collect(),
        config,
    })
}

/// Per-block, per-agent mean of the across-agent normalized reliability/MSE
/// ratio.
pub fn rel_mse_block_scores(
    metrics_path: &Path,
    n_blocks: usize,
) -> Result<(Vec<AgentKind>, Vec<Vec<f64>>)> {
    let (roster, rows) = read_metrics(metrics_path)?;
    let n = roster.len();
    let mut sums = vec![vec![0.0f64; n]; n_blocks];
    let mut counts = vec![0u64; n_blocks];
    for row in &rows {
        if row.block >= n_blocks {
            return Err(Error::invalid(format!(
                "{}: metrics row references block {} beyond the schedule",
                metrics_path.display(),
                row.block
            )));
        }
        let total: f64 = row.per_agent.iter().map(|a| a.rel_mse).sum();
        for (i, a) in row.per_agent.iter().enumerate() {
            let normalized = if total > 0.0 {
                a.rel_mse / total
            } else {
                1.0 / n as f64
            };
            sums[row.block][i] += normalized;
        }
        counts[row.block] += 1;
    }
    for (block, &count) in counts.iter().enumerate() {
        if count == 0 {
            return Err(Error::invalid(format!(
                "{}: no metric rows for block {block}",
                metrics_path.display()
            )));
        }
        for v in sums[block].iter_mut() {
            *v /= count as f64;
        }
    }
    Ok((roster, sums))
}

/// Ranks agents per block by descending score; ties keep roster order.
pub fn rank_agents(roster: &[AgentKind], block_scores: &[Vec<f64>]) -> Vec<Vec<AgentKind>> {
    block_scores
        .iter()
        .map(|scores| {
            let mut order: Vec<usize> = (0..roster.len()).collect();
            order.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).expect("finite scores"));
            order.into_iter().map(|i| roster[i]).collect()
        })
        .collect()
}

/// Per-block agent rankings by the normalized reliability/MSE ratio.
pub fn rel_mse_block_rankings(metrics_path: &Path, n_blocks: usize) -> Result<Vec<Vec<AgentKind>>> {
    let (roster, scores) = rel_mse_block_scores(metrics_path, n_blocks)?;
    Ok(rank_agents(&roster, &scores))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn wilcoxon_all_positive_small_sample() {
        // 2^3 sign assignments, only the all-positive one has W- = 0.
        let r = wilcoxon_signed_rank_greater(&[1.0, 2.0, 3.0]);
        assert_eq!(r.w_minus, 0.0);
        assert_relative_eq!(r.p_value, 0.125, epsilon = 1e-15);
        assert!(r.decisive);
        assert_eq!(r.method, "exact");
    }

    #[test]
    fn wilcoxon_all_zero_is_flagged_not_decided() {
        let r = wilcoxon_signed_rank_greater(&[0.0, 0.0, 0.0]);
        assert!(!r.decisive);
        assert_eq!(r.p_value, 1.0);
        assert_eq!(r.n_used, 0);
    }

    #[test]
    fn wilcoxon_zeros_are_dropped() {
        let with_zeros = wilcoxon_signed_rank_greater(&[1.0, 0.0, 2.0, 0.0, 3.0]);
        let without = wilcoxon_signed_rank_greater(&[1.0, 2.0, 3.0]);
        assert_eq!(with_zeros.n_used, 3);
        assert_relative_eq!(with_zeros.p_value, without.p_value, epsilon = 1e-15);
    }

    #[test]
    fn wilcoxon_symmetric_data_is_inconclusive() {
        let r = wilcoxon_signed_rank_greater(&[1.0, -1.0, 2.0, -2.0]);
        // W- = W+ by symmetry; p around half.
        assert_eq!(r.w_minus, r.w_plus);
        assert!(r.p_value > 0.3 && r.p_value < 0.8, "p {}", r.p_value);
    }

    #[test]
    fn wilcoxon_exact_matches_enumeration_with_ties() {
        // Ranks of |d|: ties at |1.0| (ranks 1,2 -> avg 1.5 each), then 3, 4.
        let diffs = [1.0, -1.0, 2.5, 3.5];
        let r = wilcoxon_signed_rank_greater(&diffs);
        // Enumerate all 16 assignments over doubled ranks {3,3,6,8}.
        let doubled = [3u64, 3, 6, 8];
        let observed = 3u64; // only the -1.0 is negative: doubled rank 3
        let mut favorable = 0u32;
        for mask in 0..16u32 {
            let w: u64 = (0..4)
                .filter(|i| mask & (1 << i) != 0)
                .map(|i| doubled[i])
                .sum();
            if w <= observed {
                favorable += 1;
            }
        }
        assert_relative_eq!(r.p_value, favorable as f64 / 16.0, epsilon = 1e-15);
    }

    #[test]
    fn wilcoxon_large_sample_uses_normal_path() {
        let diffs: Vec<f64> = (1..=30).map(|i| i as f64).collect();
        let r = wilcoxon_signed_rank_greater(&diffs);
        assert_eq!(r.method, "normal");
        assert!(r.p_value < 1e-4, "p {}", r.p_value);

        let balanced: Vec<f64> = (1..=30).map(|i| if i % 2 == 0 { i as f64 } else { -(i as f64) }).collect();
        let r = wilcoxon_signed_rank_greater(&balanced);
        assert!(r.p_value > 0.2 && r.p_value < 0.8, "p {}", r.p_value);
    }

    #[test]
    fn top2_perfect_rankings_hit_ratio_one() {
        let mut best = BTreeMap::new();
        let mut rankings = BTreeMap::new();
        let kinds = [AgentKind::Standard, AgentKind::Double, AgentKind::Noisy];
        for block in 0..6 {
            let cell = ("collect_grid".to_string(), block);
            best.insert(cell.clone(), kinds[block % 3]);
            let mut ranking = vec![kinds[block % 3]];
            ranking.extend(kinds.iter().filter(|k| **k != kinds[block % 3]));
            rankings.insert(cell, ranking);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let report = analyze_top2_match(&best, &rankings, 200, &mut rng).unwrap();
        assert_eq!(report.match_ratio, 1.0);
        assert!(report.baseline_ratio < 1.0);
        assert!(report.match_ratio > report.baseline_ratio);
    }

    #[test]
    fn top2_rejects_cell_mismatch() {
        let mut best = BTreeMap::new();
        best.insert(("e".to_string(), 0), AgentKind::Standard);
        let mut rankings = BTreeMap::new();
        rankings.insert(("e".to_string(), 1), vec![AgentKind::Standard]);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert!(analyze_top2_match(&best, &rankings, 10, &mut rng).is_err());
    }

    #[test]
    fn win_rate_dominance_and_ties() {
        let mut results = BTreeMap::new();
        results.insert(("e1".to_string(), "aced".to_string()), vec![2.0, 2.0]);
        results.insert(("e1".to_string(), "uniform".to_string()), vec![1.0, 1.0]);
        let table = win_rate(&results).unwrap();
        assert_relative_eq!(table["aced"], 100.0);
        assert_relative_eq!(table["uniform"], 0.0);

        let mut tied = BTreeMap::new();
        tied.insert(("e1".to_string(), "a".to_string()), vec![1.0, 3.0]);
        tied.insert(("e1".to_string(), "b".to_string()), vec![1.0, 3.0]);
        let table = win_rate(&tied).unwrap();
        assert_relative_eq!(table["a"], 50.0);
        assert_relative_eq!(table["b"], 50.0);
    }

    #[test]
    fn win_rate_rejects_missing_cells() {
        let mut results = BTreeMap::new();
        results.insert(("e1".to_string(), "a".to_string()), vec![1.0]);
        results.insert(("e2".to_string(), "a".to_string()), vec![1.0]);
        results.insert(("e1".to_string(), "b".to_string()), vec![1.0]);
        assert!(win_rate(&results).is_err());
    }

    #[test]
    fn normal_cdf_sane() {
        assert_relative_eq!(phi(0.0), 0.5, epsilon = 1e-7);
        assert_relative_eq!(phi(1.96), 0.975, epsilon = 1e-3);
        assert_relative_eq!(phi(-1.96), 0.025, epsilon = 1e-3);
    }
}
