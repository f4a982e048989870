//! Tabular theory checks for the ensemble's learning rules.
//!
//! Works on explicit finite MDPs: the Bellman operator and value iteration
//! give ground-truth fixed points; stochastic-approximation runs of the
//! variant update rules validate convergence of the unbiased kinds; the
//! operator-gap probe measures how far the double rule's expected operator
//! sits from the standard one; and the tracking experiment quantifies how
//! update noise inflates steady-state error under a drifting reward table.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::agents::{AgentKind, AgentModel, AgentOptions, Params, Support, Table};
use crate::arbitration::argmax;
use crate::error::{Error, Result};
use crate::replay::NStepTransition;

/// Explicit finite MDP with optional per-entry Gaussian reward noise.
#[derive(Debug, Clone)]
pub struct TabularMDP {
    pub n_states: usize,
    pub n_actions: usize,
    transition: Vec<f64>,
    reward: Vec<f64>,
    reward_noise_std: Vec<f64>,
    pub discount: f64,
    terminal: Vec<bool>,
}

impl TabularMDP {
    pub fn new(
        n_states: usize,
        n_actions: usize,
        transition: Vec<f64>,
        reward: Vec<f64>,
        reward_noise_std: Vec<f64>,
        discount: f64,
        terminal: Vec<bool>,
    ) -> Result<Self> {
        if n_states == 0 || n_actions == 0 {
            return Err(Error::invalid("state and action spaces must be non-empty"));
        }
        if !(0.0 < discount && discount < 1.0) {
            return Err(Error::invalid("discount must lie in (0, 1)"));
        }
        if transition.len() != n_states * n_actions * n_states
            || reward.len() != n_states * n_actions
            || reward_noise_std.len() != n_states * n_actions
            || terminal.len() != n_states
        {
            return Err(Error::invalid("mdp arrays have inconsistent shapes"));
        }
        for s in 0..n_states {
            for a in 0..n_actions {
                let row = &transition[(s * n_actions + a) * n_states..][..n_states];
                let sum: f64 = row.iter().sum();
                if (sum - 1.0).abs() > 1e-12 || row.iter().any(|&p| p < 0.0) {
                    return Err(Error::invalid(format!(
                        "transition row ({s}, {a}) is not a distribution (sum {sum})"
                    )));
                }
            }
        }
        Ok(TabularMDP {
            n_states,
            n_actions,
            transition,
            reward,
            reward_noise_std,
            discount,
            terminal,
        })
    }

    #[inline]
    pub fn transition_row(&self, s: usize, a: usize) -> &[f64] {
        &self.transition[(s * self.n_actions + a) * self.n_states..][..self.n_states]
    }

    #[inline]
    pub fn reward(&self, s: usize, a: usize) -> f64 {
        self.reward[s * self.n_actions + a]
    }

    #[inline]
    pub fn is_terminal(&self, s: usize) -> bool {
        self.terminal[s]
    }

    pub fn set_rewards(&mut self, reward: Vec<f64>) -> Result<()> {
        if reward.len() != self.reward.len() {
            return Err(Error::invalid("reward table has the wrong shape"));
        }
        self.reward = reward;
        Ok(())
    }

    pub fn rewards(&self) -> &[f64] {
        &self.reward
    }

    pub fn sample_next(&self, s: usize, a: usize, rng: &mut impl Rng) -> usize {
        let row = self.transition_row(s, a);
        let u: f64 = rng.random();
        let mut acc = 0.0;
        for (s2, &p) in row.iter().enumerate() {
            acc += p;
            if u < acc {
                return s2;
            }
        }
        self.n_states - 1
    }

    pub fn sample_reward(&self, s: usize, a: usize, rng: &mut impl Rng) -> f64 {
        let std = self.reward_noise_std[s * self.n_actions + a];
        let noise: f64 = if std > 0.0 {
            let z: f64 = StandardNormal.sample(rng);
            std * z
        } else {
            0.0
        };
        self.reward(s, a) + noise
    }
}

/// One application of the Bellman optimality operator.
///
/// `Q'(s,a) = r(s,a) + g * sum_s' P(s'|s,a) max_a' Q(s',a')`; terminal
/// successors contribute no bootstrap and terminal states stay at zero.
pub fn bellman_apply(q: &Table, mdp: &TabularMDP) -> Result<Table> {
    if q.n_states != mdp.n_states || q.n_actions != mdp.n_actions {
        return Err(Error::invalid("q table shape does not match the mdp"));
    }
    let mut out = Table::zeros(mdp.n_states, mdp.n_actions);
    let max_q: Vec<f64> = (0..mdp.n_states)
        .map(|s| {
            if mdp.is_terminal(s) {
                0.0
            } else {
                let row = q.row(s);
                row[argmax(row)]
            }
        })
        .collect();
    for s in 0..mdp.n_states {
        if mdp.is_terminal(s) {
            continue;
        }
        for a in 0..mdp.n_actions {
            let expect: f64 = mdp
                .transition_row(s, a)
                .iter()
                .zip(&max_q)
                .map(|(p, m)| p * m)
                .sum();
            out.set(s, a, mdp.reward(s, a) + mdp.discount * expect);
        }
    }
    Ok(out)
}

/// Iterates the Bellman operator until `||Q_{k+1} - Q_k|| < tol*(1-g)/g`,
/// which guarantees `||Q_k - Q*|| < tol`.
pub fn value_iteration(mdp: &TabularMDP, tol: f64) -> Table {
    let threshold = tol * (1.0 - mdp.discount) / mdp.discount;
    let mut q = Table::zeros(mdp.n_states, mdp.n_actions);
    loop {
        let next = bellman_apply(&q, mdp).expect("shapes fixed");
        let delta = next.max_distance(&q);
        q = next;
        if delta < threshold {
            return q;
        }
    }
}

/// Step-size rule of a stochastic-approximation run.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StepSchedule {
    /// Robbins-Monro compliant: `1 / (1 + visits(s,a))^power`.
    VisitCountPower { power: f64 },
    Constant { rate: f64 },
}

impl StepSchedule {
    fn rate(&self, visits: u64) -> f64 {
        match *self {
            StepSchedule::VisitCountPower { power } => (1.0 + visits as f64).powf(-power),
            StepSchedule::Constant { rate } => rate,
        }
    }
}

/// Configuration of a single-agent tabular run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct VariantRunConfig {
    pub total_updates: u64,
    /// Epsilon of the epsilon-greedy behavior policy.
    pub exploration: f64,
    pub step_schedule: StepSchedule,
    pub sync_period: u32,
    /// Stride for distance logging (0 disables).
    pub log_stride: u64,
    /// Stride for online/target table snapshots (0 disables).
    pub snapshot_stride: u64,
    pub noisy_sigma_init: f64,
    pub noisy_sigma_frozen: bool,
    /// Additive zero-mean Gaussian on sampled rewards.
    pub injected_noise_std: f64,
}

impl Default for VariantRunConfig {
    fn default() -> Self {
        VariantRunConfig {
            total_updates: 100_000,
            exploration: 1.0,
            step_schedule: StepSchedule::VisitCountPower { power: 0.8 },
            sync_period: 1,
            log_stride: 1_000,
            snapshot_stride: 0,
            noisy_sigma_init: 0.5,
            noisy_sigma_frozen: false,
            injected_noise_std: 0.0,
        }
    }
}

/// Noise-free table snapshot taken during a run.
#[derive(Debug, Clone)]
pub struct QSnapshot {
    pub update: u64,
    pub online: Table,
    pub target: Table,
}

/// Outcome of a stochastic-approximation run.
#[derive(Debug, Clone)]
pub struct VariantRun {
    pub kind: AgentKind,
    /// `(update index, ||Q - Q*||_inf)` at the logging stride, when a
    /// reference was supplied.
    pub distances: Vec<(u64, f64)>,
    pub final_distance: Option<f64>,
    pub final_table: Table,
    pub snapshots: Vec<QSnapshot>,
}

/// Runs asynchronous tabular updates of one variant under epsilon-greedy
/// behavior, one transition per update.
///
/// Behavior and environment draws come from `behavior_rng`; the noisy kind's
/// parameter noise comes from `noise_rng`, so kinds that never touch it see
/// identical trajectories.
pub fn run_variant(
    mdp: &TabularMDP,
    kind: AgentKind,
    cfg: &VariantRunConfig,
    q_star: Option<&Table>,
    behavior_rng: &mut impl Rng,
    noise_rng: &mut impl Rng,
) -> VariantRun {
    let mut opts = AgentOptions {
        sync_period: cfg.sync_period,
        step_size: 1.0,
        noisy_sigma_init: cfg.noisy_sigma_init,
        noisy_sigma_frozen: cfg.noisy_sigma_frozen,
        ..AgentOptions::default()
    };
    // Keep the categorical support wide enough for the reachable values.
    let reach = mdp
        .rewards()
        .iter()
        .fold(0.0f64, |m, r| m.max(r.abs()))
        .max(1.0)
        / (1.0 - mdp.discount);
    opts.support = Support {
        v_min: -reach,
        v_max: reach,
        n_atoms: opts.support.n_atoms,
    };
    let mut model = AgentModel::new(kind, mdp.n_states, mdp.n_actions, &opts);
    let mut visits = vec![0u64; mdp.n_states * mdp.n_actions];
    let mut state = initial_state(mdp, behavior_rng);
    let mut distances = Vec::new();
    let mut snapshots = Vec::new();
    let mut q_row = vec![0.0; mdp.n_actions];

    for t in 0..cfg.total_updates {
        let action = if behavior_rng.random_bool(cfg.exploration) {
            behavior_rng.random_range(0..mdp.n_actions)
        } else {
            model
                .q_values_into(state, &mut q_row, noise_rng)
                .expect("state in range");
            argmax(&q_row)
        };
        let next = mdp.sample_next(state, action, behavior_rng);
        let mut reward = mdp.sample_reward(state, action, behavior_rng);
        if cfg.injected_noise_std > 0.0 {
            let z: f64 = StandardNormal.sample(behavior_rng);
            reward += cfg.injected_noise_std * z;
        }
        let slot = state * mdp.n_actions + action;
        let rate = cfg.step_schedule.rate(visits[slot]);
        visits[slot] += 1;
        model.set_step_size(rate);
        let transition = NStepTransition {
            start_state: state,
            action,
            return_n: reward,
            end_state: next,
            done: mdp.is_terminal(next),
            n: 1,
            loss_vector: Vec::new(),
            priority: 0.0,
        };
        model
            .train_step(
                std::slice::from_ref(&transition),
                &[1.0],
                mdp.discount,
                noise_rng,
            )
            .expect("well-formed transition");

        state = if mdp.is_terminal(next) {
            initial_state(mdp, behavior_rng)
        } else {
            next
        };

        if cfg.log_stride > 0 && (t + 1) % cfg.log_stride == 0 {
            if let Some(q_star) = q_star {
                distances.push((t + 1, model.mean_q_table().max_distance(q_star)));
            }
        }
        if cfg.snapshot_stride > 0 && (t + 1) % cfg.snapshot_stride == 0 {
            snapshots.push(QSnapshot {
                update: t + 1,
                online: model.mean_q_table(),
                target: model.mean_target_table(),
            });
        }
    }

    let final_table = model.mean_q_table();
    VariantRun {
        kind,
        final_distance: q_star.map(|qs| final_table.max_distance(qs)),
        distances,
        final_table,
        snapshots,
    }
}

fn initial_state(mdp: &TabularMDP, rng: &mut impl Rng) -> usize {
    let non_terminal: Vec<usize> = (0..mdp.n_states).filter(|&s| !mdp.is_terminal(s)).collect();
    non_terminal[rng.random_range(0..non_terminal.len())]
}

/// Per-sample and aggregate estimates of `||TQ - T_variant Q||_inf`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GapReport {
    pub kind: AgentKind,
    pub per_sample_gap: Vec<f64>,
    /// Max over samples; a lower bound on the true sup over all Q.
    pub gap: f64,
    /// `gap / (1 - discount)`, the fixed-point displacement this gap allows.
    pub bound: f64,
    /// `||Q_final - Q*||_inf` supplied by the caller, if any.
    pub final_distance: Option<f64>,
    /// Whether `final_distance <= bound`; diagnostic only, since `gap` only
    /// lower-bounds the sup.
    pub bound_holds: Option<bool>,
}

/// Measures the expected-operator gap of the double rule on sampled
/// `(Q, Q_lag)` pairs.
///
/// `T_double Q (s,a) = E[r_hat + g * Q_lag(s', argmax_a' Q(s', a'))]` is
/// estimated by Monte Carlo over reward noise and transitions and compared
/// to the analytic `TQ`. The standard kind evaluates selection and bootstrap
/// identically, so its gap is zero by construction.
pub fn operator_gap(
    samples: &[(Table, Table)],
    mdp: &TabularMDP,
    kind: AgentKind,
    mc_draws: u64,
    final_distance: Option<f64>,
    rng: &mut impl Rng,
) -> Result<GapReport> {
    if !matches!(kind, AgentKind::Standard | AgentKind::Double) {
        return Err(Error::invalid(format!(
            "operator_gap applies to standard/double, not {kind}"
        )));
    }
    if mc_draws == 0 {
        return Err(Error::invalid("mc_draws must be positive"));
    }
    let mut per_sample_gap = Vec::with_capacity(samples.len());
    for (q, q_lag) in samples {
        if kind == AgentKind::Standard {
            per_sample_gap.push(0.0);
            continue;
        }
        let tq = bellman_apply(q, mdp)?;
        let mut worst = 0.0f64;
        for s in 0..mdp.n_states {
            if mdp.is_terminal(s) {
                continue;
            }
            for a in 0..mdp.n_actions {
                let mut acc = 0.0;
                for _ in 0..mc_draws {
                    let r = mdp.sample_reward(s, a, rng);
                    let s2 = mdp.sample_next(s, a, rng);
                    let boot = if mdp.is_terminal(s2) {
                        0.0
                    } else {
                        q_lag.get(s2, argmax(q.row(s2)))
                    };
                    acc += r + mdp.discount * boot;
                }
                let estimate = acc / mc_draws as f64;
                worst = worst.max((tq.get(s, a) - estimate).abs());
            }
        }
        per_sample_gap.push(worst);
    }
    let gap = per_sample_gap.iter().cloned().fold(0.0, f64::max);
    let bound = gap / (1.0 - mdp.discount);
    Ok(GapReport {
        kind,
        per_sample_gap,
        gap,
        bound,
        final_distance,
        bound_holds: final_distance.map(|d| d <= bound),
    })
}

/// Piecewise-stationary reward specification.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DriftPhase {
    pub length: u64,
    /// Full reward-table override for the phase.
    pub reward: Vec<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DriftSchedule {
    pub phases: Vec<DriftPhase>,
}

impl DriftSchedule {
    pub fn validate(&self, mdp: &TabularMDP) -> Result<()> {
        if self.phases.is_empty() {
            return Err(Error::invalid("drift schedule needs at least one phase"));
        }
        for p in &self.phases {
            if p.length == 0 {
                return Err(Error::invalid("phase lengths must be at least 1"));
            }
            if p.reward.len() != mdp.n_states * mdp.n_actions {
                return Err(Error::invalid("phase reward table has the wrong shape"));
            }
        }
        Ok(())
    }

    pub fn total_steps(&self) -> u64 {
        self.phases.iter().map(|p| p.length).sum()
    }
}

/// Tracking diagnostics of one (noise level, seed) run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrackingReport {
    pub noise_std: f64,
    pub seed: u64,
    /// `||Q_t - Q*_t||_inf` at the logging stride.
    pub delta: Vec<f64>,
    /// Environmental drift `||Q*_{t+1} - Q*_t||_inf` at the same stride.
    pub beta: Vec<f64>,
    /// Realized update-noise magnitude at the same stride.
    pub noise_magnitude: Vec<f64>,
    /// Fraction of steps satisfying the per-step tracking recursion.
    pub recursion_satisfaction_rate: f64,
    /// Mean of delta over the final quarter of each phase, averaged over
    /// phases.
    pub steady_state_delta: f64,
    /// `(1 - g) * (mean beta + mean noise magnitude)`: the steady-state
    /// comparison value; reported, never asserted.
    pub steady_state_bound_rhs: f64,
}

/// Runs a constant-step-size variant on a piecewise-stationary MDP and logs
/// how well it tracks the moving fixed point.
#[allow(clippy::too_many_arguments)]
pub fn tracking_experiment(
    base: &TabularMDP,
    drift: &DriftSchedule,
    kind: AgentKind,
    step_size: f64,
    noise_std: f64,
    seed: u64,
    log_stride: u64,
    vi_tol: f64,
) -> Result<TrackingReport> {
    drift.validate(base)?;
    let mut mdp = base.clone();
    let q_stars: Vec<Table> = drift
        .phases
        .iter()
        .map(|p| {
            let mut phase_mdp = base.clone();
            phase_mdp.set_rewards(p.reward.clone())?;
            Ok(value_iteration(&phase_mdp, vi_tol))
        })
        .collect::<Result<_>>()?;

    let mut behavior_rng = crate::rng::keyed_rng(seed, 0);
    let mut noise_rng = crate::rng::keyed_rng(seed, 1);
    let opts = AgentOptions {
        sync_period: 1,
        step_size,
        ..AgentOptions::default()
    };
    let mut model = AgentModel::new(kind, base.n_states, base.n_actions, &opts);
    let mut state = initial_state(base, &mut behavior_rng);

    let mut delta_series = Vec::new();
    let mut beta_series = Vec::new();
    let mut noise_series = Vec::new();
    let mut satisfied = 0u64;
    let mut checked = 0u64;
    let mut beta_sum = 0.0;
    let mut noise_sum = 0.0;
    let mut phase = 0usize;
    let mut phase_step = 0u64;
    let mut per_phase_tail: Vec<Vec<f64>> = vec![Vec::new(); drift.phases.len()];
    mdp.set_rewards(drift.phases[0].reward.clone())?;

    let total = drift.total_steps();
    let mut delta_t = model.mean_q_table().max_distance(&q_stars[0]);
    for t in 0..total {
        // Phase bookkeeping: beta is nonzero only when the fixed point moves.
        let mut beta_t = 0.0;
        if phase_step == drift.phases[phase].length {
            phase += 1;
            phase_step = 0;
            mdp.set_rewards(drift.phases[phase].reward.clone())?;
            beta_t = q_stars[phase].max_distance(&q_stars[phase - 1]);
            delta_t = model.mean_q_table().max_distance(&q_stars[phase]);
        }
        beta_sum += beta_t;

        // Uniform random behavior keeps every entry refreshed.
        let action = behavior_rng.random_range(0..base.n_actions);
        let next = mdp.sample_next(state, action, &mut behavior_rng);
        let mut reward = mdp.sample_reward(state, action, &mut behavior_rng);
        if noise_std > 0.0 {
            let z: f64 = StandardNormal.sample(&mut behavior_rng);
            reward += noise_std * z;
        }

        // Realized update noise: sampled target minus its expectation under
        // the current table.
        let online = model.mean_q_table();
        let boot = if mdp.is_terminal(next) {
            0.0
        } else {
            let row = online.row(next);
            row[argmax(row)]
        };
        let sampled_target = reward + mdp.discount * boot;
        let expected: f64 = mdp.reward(state, action)
            + mdp.discount
                * mdp
                    .transition_row(state, action)
                    .iter()
                    .enumerate()
                    .map(|(s2, p)| {
                        if mdp.is_terminal(s2) {
                            0.0
                        } else {
                            let row = online.row(s2);
                            p * row[argmax(row)]
                        }
                    })
                    .sum::<f64>();
        let m_t = (sampled_target - expected).abs();
        noise_sum += m_t;

        let transition = NStepTransition {
            start_state: state,
            action,
            return_n: reward,
            end_state: next,
            done: mdp.is_terminal(next),
            n: 1,
            loss_vector: Vec::new(),
            priority: 0.0,
        };
        model
            .train_step(
                std::slice::from_ref(&transition),
                &[1.0],
                mdp.discount,
                &mut noise_rng,
            )
            .expect("well-formed transition");
        state = if mdp.is_terminal(next) {
            initial_state(base, &mut behavior_rng)
        } else {
            next
        };

        let delta_next = model.mean_q_table().max_distance(&q_stars[phase]);
        // Per-step recursion check, reported as a satisfaction rate. The
        // slack absorbs the value-iteration tolerance of the reference.
        let rhs =
            (1.0 - step_size / (1.0 - mdp.discount)) * delta_t + step_size * (beta_t + m_t);
        checked += 1;
        if delta_next <= rhs + 100.0 * vi_tol {
            satisfied += 1;
        }
        delta_t = delta_next;

        let remaining = drift.phases[phase].length - phase_step;
        if remaining * 4 <= drift.phases[phase].length {
            per_phase_tail[phase].push(delta_next);
        }
        if log_stride > 0 && (t + 1) % log_stride == 0 {
            delta_series.push(delta_next);
            beta_series.push(beta_t);
            noise_series.push(m_t);
        }
        phase_step += 1;
    }

    let steady_state_delta = {
        let means: Vec<f64> = per_phase_tail
            .iter()
            .filter(|v| !v.is_empty())
            .map(|v| v.iter().sum::<f64>() / v.len() as f64)
            .collect();
        means.iter().sum::<f64>() / means.len() as f64
    };
    Ok(TrackingReport {
        noise_std,
        seed,
        delta: delta_series,
        beta: beta_series,
        noise_magnitude: noise_series,
        recursion_satisfaction_rate: satisfied as f64 / checked as f64,
        steady_state_delta,
        steady_state_bound_rhs: (1.0 - mdp.discount)
            * (beta_sum / checked as f64 + noise_sum / checked as f64),
    })
}

/// Time-averaged apparent value of the trap-bound actions at a designated
/// state over a training run; the quantity maximization bias inflates.
///
/// Returns the average over snapshots of `max_{a != safe} Q(state, a)`
/// together with the run itself (snapshots doubling as operator-gap input).
pub fn trap_value_probe(
    mdp: &TabularMDP,
    kind: AgentKind,
    cfg: &VariantRunConfig,
    probe_state: usize,
    safe_action: usize,
    behavior_rng: &mut impl Rng,
    noise_rng: &mut impl Rng,
) -> (f64, VariantRun) {
    let run = run_variant(mdp, kind, cfg, None, behavior_rng, noise_rng);
    let avg = run
        .snapshots
        .iter()
        .map(|snap| {
            snap.online
                .row(probe_state)
                .iter()
                .enumerate()
                .filter(|&(a, _)| a != safe_action)
                .map(|(_, &v)| v)
                .fold(f64::NEG_INFINITY, f64::max)
        })
        .sum::<f64>()
        / run.snapshots.len().max(1) as f64;
    (avg, run)
}

/// Seeds a model's online (and target) tables at a scalar Q table.
pub fn initialize_at(model: &mut AgentModel, q: &Table) {
    match model.online_mut() {
        Params::Q(t) => t.data.copy_from_slice(&q.data),
        Params::Noisy { mu, .. } => mu.data.copy_from_slice(&q.data),
        Params::Dueling { v, a } => {
            for (s, slot) in v.iter_mut().enumerate() {
                let row = q.row(s);
                let mean = row.iter().sum::<f64>() / row.len() as f64;
                *slot = mean;
                for (act, &val) in row.iter().enumerate() {
                    a.set(s, act, val - mean);
                }
            }
        }
        Params::Categorical(_) => {
            unimplemented!("categorical tables cannot represent arbitrary scalars exactly")
        }
    }
    model.sync_target();
}

/// Frozen small MDPs used by the diagnostics and the CLI.
pub mod fixtures {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Single state, single action, reward 1, discount 0.5; Q* = 2.
    pub fn chain_one_state() -> TabularMDP {
        TabularMDP::new(1, 1, vec![1.0], vec![1.0], vec![0.0], 0.5, vec![false]).unwrap()
    }

    /// Dense random 5-state, 3-action MDP with deterministic rewards in
    /// [0, 1); discount 0.85. Frozen by seed.
    pub fn random_dense_5() -> TabularMDP {
        random_dense(5, 3, 0.85, 0xACED_5EED)
    }

    pub fn random_dense(n_states: usize, n_actions: usize, discount: f64, seed: u64) -> TabularMDP {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut transition = Vec::with_capacity(n_states * n_actions * n_states);
        for _ in 0..n_states * n_actions {
            let raw: Vec<f64> = (0..n_states).map(|_| rng.random::<f64>() + 0.05).collect();
            let sum: f64 = raw.iter().sum();
            // Normalize and push the rounding slack onto the last entry so
            // the row sums to 1 exactly.
            let mut acc = 0.0;
            for (i, x) in raw.iter().enumerate() {
                let p = if i + 1 == n_states { 1.0 - acc } else { x / sum };
                acc += p;
                transition.push(p);
            }
        }
        let reward: Vec<f64> = (0..n_states * n_actions)
            .map(|_| rng.random::<f64>())
            .collect();
        TabularMDP::new(
            n_states,
            n_actions,
            transition,
            reward,
            vec![0.0; n_states * n_actions],
            discount,
            vec![false; n_states],
        )
        .unwrap()
    }

    /// Classic maximization-bias construction: from the start state, one
    /// safe action terminates at reward 0 while the rest lead to a trap
    /// state whose 8 actions all terminate with reward ~ Normal(-0.1, 1).
    ///
    /// States: 0 = start, 1 = trap, 2 = terminal. The trap-bound actions
    /// 1..8 at the start state are the "biased" ones.
    pub fn max_bias() -> TabularMDP {
        let n_states = 3;
        let n_actions = 8;
        let mut transition = vec![0.0; n_states * n_actions * n_states];
        let mut reward = vec![0.0; n_states * n_actions];
        let mut noise = vec![0.0; n_states * n_actions];
        for a in 0..n_actions {
            let dest = if a == BIAS_SAFE_ACTION { 2 } else { 1 };
            transition[a * n_states + dest] = 1.0;
            // Trap state: every action terminates with noisy reward.
            transition[(n_actions + a) * n_states + 2] = 1.0;
            reward[n_actions + a] = -0.1;
            noise[n_actions + a] = 1.0;
            // Terminal self-loops keep the tensor stochastic.
            transition[(2 * n_actions + a) * n_states + 2] = 1.0;
        }
        TabularMDP::new(
            n_states,
            n_actions,
            transition,
            reward,
            noise,
            0.9,
            vec![false, false, true],
        )
        .unwrap()
    }

    pub const BIAS_START_STATE: usize = 0;
    pub const BIAS_TRAP_STATE: usize = 1;
    pub const BIAS_SAFE_ACTION: usize = 0;

    /// Deterministic 4-state, 2-action cyclic MDP; discount 0.8, keeping
    /// per-phase convergence fast at moderate step sizes. The drift variant
    /// negates the rewards, which moves Q* substantially.
    pub fn drift_base() -> TabularMDP {
        let n_states = 4;
        let n_actions = 2;
        let mut transition = vec![0.0; n_states * n_actions * n_states];
        let mut reward = vec![0.0; n_states * n_actions];
        for s in 0..n_states {
            for a in 0..n_actions {
                let dest = (s + 1 + a) % n_states;
                transition[(s * n_actions + a) * n_states + dest] = 1.0;
                reward[s * n_actions + a] = ((s * n_actions + a) as f64 * 0.7).sin();
            }
        }
        TabularMDP::new(
            n_states,
            n_actions,
            transition,
            reward,
            vec![0.0; n_states * n_actions],
            0.8,
            vec![false; n_states],
        )
        .unwrap()
    }

    /// Alternates the base rewards with their negation across phases.
    pub fn alternating_drift(
        base: &TabularMDP,
        phase_length: u64,
        n_phases: usize,
    ) -> DriftSchedule {
        let flipped: Vec<f64> = base.rewards().iter().map(|r| -r).collect();
        DriftSchedule {
            phases: (0..n_phases)
                .map(|i| DriftPhase {
                    length: phase_length,
                    reward: if i % 2 == 0 {
                        base.rewards().to_vec()
                    } else {
                        flipped.clone()
                    },
                })
                .collect(),
        }
    }
}
