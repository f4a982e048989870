//! Reliability-based arbitration over an ensemble of value learners.
//!
//! Each agent reports a recent scalar loss. Losses map to reliabilities via a
//! tempered softmax, reliabilities are smoothed by an exponential moving
//! average, clamped into a fixed band, normalized into weights, and the
//! weighted sum of the agents' Q-rows picks the greedy action.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Parameters of the arbitration step.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ArbitrationConfig {
    /// Softmax temperature for action-selection reliabilities.
    pub temperature_act: f64,
    /// EMA mixing coefficient on the fresh reliability (1.0 = no smoothing).
    pub momentum: f64,
    /// Lower clamp bound on smoothed reliabilities.
    pub r_min: f64,
    /// Upper clamp bound on smoothed reliabilities.
    pub r_max: f64,
    /// Ensemble size.
    pub n_agents: usize,
}

impl ArbitrationConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.temperature_act > 0.0 && self.temperature_act.is_finite()) {
            return Err(Error::invalid("temperature_act must be positive"));
        }
        if !(0.0..=1.0).contains(&self.momentum) {
            return Err(Error::invalid("momentum must lie in [0, 1]"));
        }
        if !(0.0 < self.r_min && self.r_min < self.r_max && self.r_max < 1.0) {
            return Err(Error::invalid("need 0 < r_min < r_max < 1"));
        }
        if self.n_agents == 0 {
            return Err(Error::invalid("n_agents must be at least 1"));
        }
        Ok(())
    }
}

/// Smoothed per-agent reliabilities.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReliabilityState {
    /// EMA of reliabilities, one entry per agent, each in (0, 1).
    pub ema: Vec<f64>,
    /// Number of EMA updates applied so far.
    pub step: u64,
}

impl ReliabilityState {
    /// Uniform state: with no loss evidence yet, every agent is equally
    /// reliable, which is also what equal losses produce.
    pub fn uniform(n_agents: usize) -> Self {
        ReliabilityState {
            ema: vec![1.0 / n_agents as f64; n_agents],
            step: 0,
        }
    }
}

/// Output of one arbitration pass.
#[derive(Debug, Clone, PartialEq)]
pub struct ArbitrationDecision {
    /// Normalized ensemble weights; positive, summing to 1.
    pub weights: Vec<f64>,
    /// Weighted Q-values per action.
    pub q_total: Vec<f64>,
    /// Greedy action index (lowest index on ties).
    pub action: usize,
}

/// Softmax of `-losses / temperature`, max-shifted for stability.
///
/// Lower loss means higher reliability; equal losses give the uniform
/// distribution regardless of temperature. Exponentials are floored at the
/// smallest normal float so entries stay strictly positive even when a loss
/// gap would underflow.
pub fn compute_reliability(losses: &[f64], temperature: f64) -> Result<Vec<f64>> {
    if losses.is_empty() {
        return Err(Error::invalid("losses must be non-empty"));
    }
    if !(temperature > 0.0 && temperature.is_finite()) {
        return Err(Error::invalid("temperature must be positive and finite"));
    }
    if losses.iter().any(|l| !l.is_finite()) {
        return Err(Error::invalid("losses must be finite"));
    }
    let logits: Vec<f64> = losses.iter().map(|l| -l / temperature).collect();
    let shift = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits
        .iter()
        .map(|z| (z - shift).exp().max(f64::MIN_POSITIVE))
        .collect();
    let sum: f64 = exps.iter().sum();
    Ok(exps.into_iter().map(|e| e / sum).collect())
}

/// EMA refresh: `ema' = (1 - momentum) * ema + momentum * fresh`.
///
/// Evaluated in delta form `ema + momentum * (fresh - ema)` so a fixed point
/// (`fresh == ema`) is preserved bitwise; `momentum == 1` copies `fresh`
/// exactly.
pub fn ema_update(state: &mut ReliabilityState, fresh: &[f64], momentum: f64) -> Result<()> {
    if fresh.len() != state.ema.len() {
        return Err(Error::invalid(format!(
            "fresh reliability length {} does not match state length {}",
            fresh.len(),
            state.ema.len()
        )));
    }
    if !(0.0..=1.0).contains(&momentum) {
        return Err(Error::invalid("momentum must lie in [0, 1]"));
    }
    for (e, &f) in state.ema.iter_mut().zip(fresh) {
        if momentum == 1.0 {
            *e = f;
        } else {
            *e += momentum * (f - *e);
        }
    }
    state.step += 1;
    Ok(())
}

/// Clamps each entry into `[r_min, r_max]`, then normalizes to sum 1.
///
/// Clamping precedes normalization, so the normalized weights may leave the
/// clamp band; the output contract is simplex membership only. The post-clamp
/// sum is at least `n * r_min > 0`, so the division is always safe.
pub fn clamp_and_normalize(ema: &[f64], r_min: f64, r_max: f64) -> Result<Vec<f64>> {
    if ema.is_empty() {
        return Err(Error::invalid("ema must be non-empty"));
    }
    if !(0.0 < r_min && r_min < r_max) {
        return Err(Error::invalid("need 0 < r_min < r_max"));
    }
    if ema.iter().any(|e| !e.is_finite()) {
        return Err(Error::invalid("ema entries must be finite"));
    }
    let clamped: Vec<f64> = ema.iter().map(|&e| e.clamp(r_min, r_max)).collect();
    let sum: f64 = clamped.iter().sum();
    Ok(clamped.into_iter().map(|c| c / sum).collect())
}

/// Weighted Q aggregation and greedy selection.
///
/// `q_total(a) = sum_i weights[i] * q_values[i][a]`; ties in the argmax break
/// toward the lowest action index so the decision is platform-independent.
pub fn aggregate_and_select(weights: &[f64], q_values: &[Vec<f64>]) -> Result<ArbitrationDecision> {
    if weights.len() != q_values.len() {
        return Err(Error::invalid(format!(
            "got {} weights for {} agents",
            weights.len(),
            q_values.len()
        )));
    }
    if q_values.is_empty() {
        return Err(Error::invalid("need at least one agent"));
    }
    let n_actions = q_values[0].len();
    if n_actions == 0 {
        return Err(Error::invalid("need at least one action"));
    }
    let mut q_total = vec![0.0; n_actions];
    for (w, row) in weights.iter().zip(q_values) {
        if row.len() != n_actions {
            return Err(Error::invalid("ragged q_values rows"));
        }
        if row.iter().any(|q| !q.is_finite()) {
            return Err(Error::invalid("q values must be finite"));
        }
        for (t, q) in q_total.iter_mut().zip(row) {
            *t += w * q;
        }
    }
    let action = argmax(&q_total);
    Ok(ArbitrationDecision {
        weights: weights.to_vec(),
        q_total,
        action,
    })
}

/// Index of the largest entry; lowest index wins ties.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn equal_losses_give_uniform_reliability() {
        for &t in &[0.3, 0.8, 5.0] {
            let r = compute_reliability(&[0.7, 0.7, 0.7], t).unwrap();
            for &x in &r {
                assert_relative_eq!(x, 1.0 / 3.0, epsilon = 1e-15);
            }
        }
    }

    #[test]
    fn reliability_matches_frozen_softmax_values() {
        // exp(-1), exp(-2) normalized, evaluated independently at high precision.
        let r = compute_reliability(&[0.3, 0.6], 0.3).unwrap();
        assert_relative_eq!(r[0], 0.7310585786300049, epsilon = 1e-12);
        assert_relative_eq!(r[1], 0.2689414213699951, epsilon = 1e-12);
        // Same logits at a different scale.
        let r = compute_reliability(&[1.0, 2.0], 1.0).unwrap();
        assert_relative_eq!(r[0], 0.7310585786300049, epsilon = 1e-12);
        assert_relative_eq!(r[1], 0.2689414213699951, epsilon = 1e-12);
    }

    #[test]
    fn reliability_is_monotone_in_own_loss() {
        let base = compute_reliability(&[0.5, 0.5, 0.5], 0.3).unwrap();
        let better = compute_reliability(&[0.4, 0.5, 0.5], 0.3).unwrap();
        assert!(better[0] > base[0]);
        assert!(better[1] < base[1]);
    }

    #[test]
    fn reliability_survives_extreme_loss_gaps() {
        let r = compute_reliability(&[0.0, 1e6], 0.3).unwrap();
        assert!(r[0] > 0.999_999);
        assert!(r[1] >= 0.0 && r.iter().sum::<f64>() > 0.999_999);
    }

    #[test]
    fn reliability_rejects_bad_input() {
        assert!(compute_reliability(&[0.1, f64::NAN], 0.3).is_err());
        assert!(compute_reliability(&[0.1, 0.2], 0.0).is_err());
        assert!(compute_reliability(&[0.1, 0.2], -1.0).is_err());
        assert!(compute_reliability(&[], 0.3).is_err());
    }

    #[test]
    fn ema_update_identity_and_fixed_point() {
        let mut s = ReliabilityState {
            ema: vec![0.2, 0.8],
            step: 0,
        };
        ema_update(&mut s, &[0.6, 0.4], 1.0).unwrap();
        assert_eq!(s.ema, vec![0.6, 0.4]);
        assert_eq!(s.step, 1);

        let fixed = s.ema.clone();
        ema_update(&mut s, &fixed.clone(), 0.6).unwrap();
        assert_eq!(s.ema, fixed);
    }

    #[test]
    fn ema_update_frozen_example() {
        let mut s = ReliabilityState {
            ema: vec![0.5],
            step: 0,
        };
        ema_update(&mut s, &[1.0], 0.6).unwrap();
        assert_relative_eq!(s.ema[0], 0.8, epsilon = 1e-15);
    }

    #[test]
    fn ema_update_rejects_length_mismatch() {
        let mut s = ReliabilityState::uniform(3);
        assert!(ema_update(&mut s, &[0.5, 0.5], 0.6).is_err());
    }

    #[test]
    fn ema_converges_geometrically() {
        let mut s = ReliabilityState {
            ema: vec![0.9, 0.1],
            step: 0,
        };
        let target = [0.3, 0.7];
        let momentum = 0.6;
        let initial_gap = 0.6;
        for t in 1..=40 {
            ema_update(&mut s, &target, momentum).unwrap();
            let gap = s
                .ema
                .iter()
                .zip(&target)
                .map(|(e, r)| (e - r).abs())
                .fold(0.0, f64::max);
            // Slack covers one ulp of the iterate magnitude per step.
            let bound = (1.0 - momentum).powi(t) * initial_gap + t as f64 * f64::EPSILON;
            assert!(gap <= bound, "t={t}: {gap} > {bound}");
        }
    }

    #[test]
    fn clamp_and_normalize_feasible_input_is_identity() {
        let w = clamp_and_normalize(&[0.2; 5], 0.2, 0.5).unwrap();
        for &x in &w {
            assert_relative_eq!(x, 0.2, epsilon = 1e-15);
        }
    }

    #[test]
    fn clamp_and_normalize_frozen_example() {
        let w = clamp_and_normalize(&[0.7, 0.1, 0.2, 0.3, 0.4], 0.2, 0.5).unwrap();
        let expected = [0.3125, 0.125, 0.125, 0.1875, 0.25];
        for (x, e) in w.iter().zip(&expected) {
            assert_relative_eq!(x, e, epsilon = 1e-12);
        }
    }

    #[test]
    fn clamp_and_normalize_single_agent() {
        assert_eq!(clamp_and_normalize(&[0.037], 0.2, 0.5).unwrap(), vec![1.0]);
        assert_eq!(clamp_and_normalize(&[0.93], 0.2, 0.5).unwrap(), vec![1.0]);
    }

    #[test]
    fn aggregate_frozen_example() {
        let d = aggregate_and_select(&[0.6, 0.4], &[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        assert_relative_eq!(d.q_total[0], 0.6, epsilon = 1e-15);
        assert_relative_eq!(d.q_total[1], 0.4, epsilon = 1e-15);
        assert_eq!(d.action, 0);
    }

    #[test]
    fn aggregate_identical_rows_is_exact() {
        let row = vec![1.5, -2.0, 0.25];
        let d = aggregate_and_select(&[0.3, 0.45, 0.25], &[row.clone(), row.clone(), row.clone()])
            .unwrap();
        // Convex combination of equal points: exact because the weights sum to 1.
        for (q, r) in d.q_total.iter().zip(&row) {
            assert_relative_eq!(q, r, epsilon = 1e-12);
        }
        assert_eq!(d.action, 0);
    }

    #[test]
    fn aggregate_single_agent_degeneracy() {
        let d = aggregate_and_select(&[1.0], &[vec![0.1, 0.9, 0.3]]).unwrap();
        assert_eq!(d.q_total, vec![0.1, 0.9, 0.3]);
        assert_eq!(d.action, 1);
    }

    #[test]
    fn aggregate_ties_break_low() {
        let d = aggregate_and_select(&[0.5, 0.5], &[vec![1.0, 1.0], vec![1.0, 1.0]]).unwrap();
        assert_eq!(d.action, 0);
    }

    #[test]
    fn aggregate_rejects_mismatch() {
        assert!(aggregate_and_select(&[1.0], &[vec![1.0], vec![2.0]]).is_err());
        assert!(aggregate_and_select(&[0.5, 0.5], &[vec![1.0, 2.0], vec![1.0]]).is_err());
    }

    #[test]
    fn config_validation() {
        let mut cfg = ArbitrationConfig {
            temperature_act: 0.3,
            momentum: 0.6,
            r_min: 0.2,
            r_max: 0.5,
            n_agents: 5,
        };
        assert!(cfg.validate().is_ok());
        cfg.r_min = 0.6;
        assert!(cfg.validate().is_err());
    }

    mod properties {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn reliability_and_weights_stay_on_simplex(
                losses in proptest::collection::vec(0.0f64..100.0, 1..=8),
                temperature in 0.05f64..10.0,
            ) {
                let rel = compute_reliability(&losses, temperature).unwrap();
                prop_assert!((rel.iter().sum::<f64>() - 1.0).abs() < 1e-12);
                prop_assert!(rel.iter().all(|r| *r > 0.0));
                let w = clamp_and_normalize(&rel, 0.2, 0.5).unwrap();
                prop_assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
                prop_assert!(w.iter().all(|x| *x > 0.0));
            }

            #[test]
            fn lowering_own_loss_strictly_raises_reliability(
                losses in proptest::collection::vec(0.1f64..10.0, 2..=8),
                pick in 0usize..8,
                drop in 0.01f64..0.09,
            ) {
                let i = pick % losses.len();
                let before = compute_reliability(&losses, 0.3).unwrap();
                let mut improved = losses.clone();
                improved[i] -= drop;
                let after = compute_reliability(&improved, 0.3).unwrap();
                prop_assert!(after[i] > before[i]);
            }
        }
    }
}
