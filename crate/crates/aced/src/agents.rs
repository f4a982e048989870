//! Tabular analogues of the five DQN variants.
//!
//! Every agent keeps an online parameter set and a lagged target copy and
//! reports a scalar squared-error loss per transition, which is what the
//! arbiter consumes. The variants differ in how a Q row is produced and how
//! the bootstrap target is formed:
//!
//! * standard — plain Q table, target `r + g^n max_a' Q_target(s', a')`
//! * double — action chosen by the online table, evaluated by the target one
//! * dueling — `Q(s,a) = V(s) + A(s,a) - mean_a' A(s,a')`
//! * noisy — `mu + sigma * eps` with fresh per-entry Gaussian noise
//! * distributional — categorical distribution over a fixed atom support,
//!   trained by projecting the shifted target distribution back on the grid

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;
use std::str::FromStr;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::arbitration::argmax;
use crate::error::{Error, Result};
use crate::replay::NStepTransition;

/// The ensemble member kinds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AgentKind {
    Standard,
    Double,
    Dueling,
    Noisy,
    Distributional,
}

impl AgentKind {
    pub const ALL: [AgentKind; 5] = [
        AgentKind::Standard,
        AgentKind::Double,
        AgentKind::Dueling,
        AgentKind::Noisy,
        AgentKind::Distributional,
    ];

    pub fn name(self) -> &'static str {
        match self {
            AgentKind::Standard => "standard",
            AgentKind::Double => "double",
            AgentKind::Dueling => "dueling",
            AgentKind::Noisy => "noisy",
            AgentKind::Distributional => "distributional",
        }
    }
}

impl std::fmt::Display for AgentKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for AgentKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        AgentKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::invalid(format!("unknown agent kind: {s}")))
    }
}

/// Fixed atom grid of the distributional agent.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Support {
    pub v_min: f64,
    pub v_max: f64,
    pub n_atoms: usize,
}

impl Support {
    pub fn new(v_min: f64, v_max: f64, n_atoms: usize) -> Result<Self> {
        if !(v_min < v_max) || n_atoms < 2 {
            return Err(Error::invalid(
                "support needs v_min < v_max and at least 2 atoms",
            ));
        }
        Ok(Support {
            v_min,
            v_max,
            n_atoms,
        })
    }

    pub fn delta_z(&self) -> f64 {
        (self.v_max - self.v_min) / (self.n_atoms - 1) as f64
    }

    pub fn atom(&self, i: usize) -> f64 {
        self.v_min + i as f64 * self.delta_z()
    }

    /// Expectation of a probability row over the atoms.
    pub fn expectation(&self, probs: &[f64]) -> f64 {
        probs
            .iter()
            .enumerate()
            .map(|(i, p)| p * self.atom(i))
            .sum()
    }

    /// Projects the shifted distribution `shift + scale * z` back onto the
    /// grid by proportional mass splitting between the bracketing atoms.
    ///
    /// `scale == 0` collapses the source to the single value `shift`
    /// (terminal transitions).
    pub fn project(&self, src: &[f64], shift: f64, scale: f64) -> Vec<f64> {
        let mut out = vec![0.0; self.n_atoms];
        self.project_into(src, shift, scale, &mut out);
        out
    }

    pub fn project_into(&self, src: &[f64], shift: f64, scale: f64, out: &mut [f64]) {
        out.fill(0.0);
        let span = self.v_max - self.v_min;
        let cells = (self.n_atoms - 1) as f64;
        let mut spread = |value: f64, mass: f64| {
            let tz = value.clamp(self.v_min, self.v_max);
            // Multiply before dividing so grid-aligned targets hit atom
            // indices exactly.
            let b = (tz - self.v_min) * cells / span;
            let low = b.floor() as usize;
            let high = b.ceil() as usize;
            if low == high {
                out[low] += mass;
            } else {
                out[low] += mass * (high as f64 - b);
                out[high] += mass * (b - low as f64);
            }
        };
        if scale == 0.0 {
            spread(shift, 1.0);
        } else {
            for (i, &p) in src.iter().enumerate() {
                if p > 0.0 {
                    spread(shift + scale * self.atom(i), p);
                }
            }
        }
    }
}

/// Dense state-action table, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Table {
    pub n_states: usize,
    pub n_actions: usize,
    pub data: Vec<f64>,
}

impl Table {
    pub fn zeros(n_states: usize, n_actions: usize) -> Self {
        Table {
            n_states,
            n_actions,
            data: vec![0.0; n_states * n_actions],
        }
    }

    pub fn filled(n_states: usize, n_actions: usize, value: f64) -> Self {
        Table {
            n_states,
            n_actions,
            data: vec![value; n_states * n_actions],
        }
    }

    #[inline]
    pub fn get(&self, s: usize, a: usize) -> f64 {
        self.data[s * self.n_actions + a]
    }

    #[inline]
    pub fn set(&mut self, s: usize, a: usize, v: f64) {
        self.data[s * self.n_actions + a] = v;
    }

    #[inline]
    pub fn row(&self, s: usize) -> &[f64] {
        &self.data[s * self.n_actions..(s + 1) * self.n_actions]
    }

    #[inline]
    pub fn row_mut(&mut self, s: usize) -> &mut [f64] {
        &mut self.data[s * self.n_actions..(s + 1) * self.n_actions]
    }

    /// Max-norm distance to another table of the same shape.
    pub fn max_distance(&self, other: &Table) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

/// Per-(state, action) categorical distributions over the support.
#[derive(Debug, Clone, PartialEq)]
pub struct CategoricalTable {
    pub n_states: usize,
    pub n_actions: usize,
    pub n_atoms: usize,
    pub data: Vec<f64>,
}

impl CategoricalTable {
    pub fn uniform(n_states: usize, n_actions: usize, n_atoms: usize) -> Self {
        CategoricalTable {
            n_states,
            n_actions,
            n_atoms,
            data: vec![1.0 / n_atoms as f64; n_states * n_actions * n_atoms],
        }
    }

    #[inline]
    pub fn row(&self, s: usize, a: usize) -> &[f64] {
        let base = (s * self.n_actions + a) * self.n_atoms;
        &self.data[base..base + self.n_atoms]
    }

    #[inline]
    pub fn row_mut(&mut self, s: usize, a: usize) -> &mut [f64] {
        let base = (s * self.n_actions + a) * self.n_atoms;
        &mut self.data[base..base + self.n_atoms]
    }
}

/// Variant-specific parameter storage.
#[derive(Debug, Clone, PartialEq)]
pub enum Params {
    Q(Table),
    Dueling { v: Vec<f64>, a: Table },
    Noisy { mu: Table, sigma: Table },
    Categorical(CategoricalTable),
}

/// Construction options shared by all kinds.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AgentOptions {
    pub sync_period: u32,
    pub step_size: f64,
    pub support: Support,
    /// Rescale factor on the distributional agent's scalar loss.
    pub rescale_alpha: f64,
    pub noisy_sigma_init: f64,
    /// Disables the sigma update (used by collapse checks).
    pub noisy_sigma_frozen: bool,
}

impl Default for AgentOptions {
    fn default() -> Self {
        AgentOptions {
            sync_period: 500,
            step_size: 0.1,
            support: Support {
                v_min: -10.0,
                v_max: 10.0,
                n_atoms: 51,
            },
            rescale_alpha: 1.0,
            noisy_sigma_init: 0.5,
            noisy_sigma_frozen: false,
        }
    }
}

/// Scalar loss summary of a batch.
#[derive(Debug, Clone, PartialEq)]
pub struct LossReport {
    pub per_transition: Vec<f64>,
    pub batch_mean: f64,
    /// Rescale factor that was applied (1.0 for scalar-valued kinds).
    pub rescale_alpha: f64,
}

impl LossReport {
    fn from_losses(per_transition: Vec<f64>, rescale_alpha: f64) -> Self {
        let batch_mean = per_transition.iter().sum::<f64>() / per_transition.len() as f64;
        LossReport {
            per_transition,
            batch_mean,
            rescale_alpha,
        }
    }
}

/// One ensemble member: online parameters plus a lagged target copy.
#[derive(Debug, Clone)]
pub struct AgentModel {
    kind: AgentKind,
    n_states: usize,
    n_actions: usize,
    online: Params,
    target: Params,
    support: Support,
    sync_period: u32,
    steps_since_sync: u32,
    step_size: f64,
    rescale_alpha: f64,
    sigma_frozen: bool,
    /// Bumped on every target sync; callers key caches off it.
    sync_epoch: u64,
    // Greedy target actions per state, valid for one sync epoch.
    greedy_cache: Vec<usize>,
    greedy_cache_epoch: u64,
}

impl AgentModel {
    pub fn new(kind: AgentKind, n_states: usize, n_actions: usize, opts: &AgentOptions) -> Self {
        let online = match kind {
            AgentKind::Standard | AgentKind::Double => Params::Q(Table::zeros(n_states, n_actions)),
            AgentKind::Dueling => Params::Dueling {
                v: vec![0.0; n_states],
                a: Table::zeros(n_states, n_actions),
            },
            AgentKind::Noisy => Params::Noisy {
                mu: Table::zeros(n_states, n_actions),
                sigma: Table::filled(n_states, n_actions, opts.noisy_sigma_init.max(0.0)),
            },
            AgentKind::Distributional => Params::Categorical(CategoricalTable::uniform(
                n_states,
                n_actions,
                opts.support.n_atoms,
            )),
        };
        AgentModel {
            kind,
            n_states,
            n_actions,
            target: online.clone(),
            online,
            support: opts.support,
            sync_period: opts.sync_period.max(1),
            steps_since_sync: 0,
            step_size: opts.step_size,
            rescale_alpha: opts.rescale_alpha,
            sigma_frozen: opts.noisy_sigma_frozen,
            sync_epoch: 0,
            greedy_cache: Vec::new(),
            greedy_cache_epoch: u64::MAX,
        }
    }

    pub fn kind(&self) -> AgentKind {
        self.kind
    }

    pub fn n_states(&self) -> usize {
        self.n_states
    }

    pub fn n_actions(&self) -> usize {
        self.n_actions
    }

    pub fn support(&self) -> Support {
        self.support
    }

    pub fn online(&self) -> &Params {
        &self.online
    }

    pub fn online_mut(&mut self) -> &mut Params {
        &mut self.online
    }

    pub fn step_size(&self) -> f64 {
        self.step_size
    }

    pub fn set_step_size(&mut self, step_size: f64) {
        self.step_size = step_size;
    }

    pub fn rescale_alpha(&self) -> f64 {
        self.rescale_alpha
    }

    pub fn set_rescale_alpha(&mut self, alpha: f64) {
        self.rescale_alpha = alpha;
    }

    fn check_state(&self, state: usize) -> Result<()> {
        if state >= self.n_states {
            return Err(Error::invalid(format!(
                "state {state} out of range for {} states",
                self.n_states
            )));
        }
        Ok(())
    }

    /// Online Q row for action selection. Only the noisy kind consumes `rng`.
    pub fn q_values(&self, state: usize, rng: &mut impl Rng) -> Result<Vec<f64>> {
        let mut out = vec![0.0; self.n_actions];
        self.q_values_into(state, &mut out, rng)?;
        Ok(out)
    }

    pub fn q_values_into(&self, state: usize, out: &mut [f64], rng: &mut impl Rng) -> Result<()> {
        self.check_state(state)?;
        scalar_row(&self.online, &self.support, state, out, rng);
        Ok(())
    }

    /// Scalar bootstrap targets for the standard and double kinds.
    pub fn td_target(&self, batch: &[NStepTransition], discount: f64) -> Result<Vec<f64>> {
        if !matches!(self.kind, AgentKind::Standard | AgentKind::Double) {
            return Err(Error::invalid(format!(
                "td_target applies to standard/double, not {}",
                self.kind
            )));
        }
        let mut noop = NoopRng;
        batch
            .iter()
            .map(|t| self.target_value(t, discount, &mut noop))
            .collect()
    }

    /// The kind's bootstrap target for one transition.
    fn target_value(&self, t: &NStepTransition, discount: f64, rng: &mut impl Rng) -> Result<f64> {
        self.check_state(t.start_state)?;
        self.check_state(t.end_state)?;
        if t.done {
            return Ok(t.return_n);
        }
        let scale = discount.powi(t.n as i32);
        let bootstrap = match (&self.kind, &self.online, &self.target) {
            (AgentKind::Double, Params::Q(online), Params::Q(target)) => {
                let chosen = argmax(online.row(t.end_state));
                target.get(t.end_state, chosen)
            }
            _ => {
                let mut stack = [0.0f64; STACK_ROW];
                let mut heap;
                let row: &mut [f64] = if self.n_actions <= STACK_ROW {
                    &mut stack[..self.n_actions]
                } else {
                    heap = vec![0.0; self.n_actions];
                    &mut heap
                };
                scalar_row(&self.target, &self.support, t.end_state, row, rng);
                row[argmax(row)]
            }
        };
        Ok(t.return_n + scale * bootstrap)
    }

    /// Online scalar value of the transition's own (s, a) entry.
    fn predicted_value(&self, t: &NStepTransition, rng: &mut impl Rng) -> f64 {
        match &self.online {
            Params::Q(q) => q.get(t.start_state, t.action),
            Params::Dueling { v, a } => {
                let row = a.row(t.start_state);
                let mean = row.iter().sum::<f64>() / row.len() as f64;
                v[t.start_state] + row[t.action] - mean
            }
            Params::Noisy { mu, sigma } => {
                let eps: f64 = StandardNormal.sample(rng);
                mu.get(t.start_state, t.action) + sigma.get(t.start_state, t.action) * eps
            }
            Params::Categorical(c) => self.support.expectation(c.row(t.start_state, t.action)),
        }
    }

    /// Per-transition squared errors under the kind's own target rule.
    ///
    /// The noisy kind evaluates with a fresh noise draw; the distributional
    /// kind compares support expectations and applies the rescale factor.
    pub fn loss_for_arbitration(
        &self,
        batch: &[NStepTransition],
        discount: f64,
        rng: &mut impl Rng,
    ) -> Result<LossReport> {
        if batch.is_empty() {
            return Err(Error::invalid("empty batch"));
        }
        let alpha = if self.kind == AgentKind::Distributional {
            self.rescale_alpha
        } else {
            1.0
        };
        let mut losses = Vec::with_capacity(batch.len());
        for t in batch {
            losses.push(self.transition_loss(t, discount, alpha, rng)?);
        }
        Ok(LossReport::from_losses(losses, alpha))
    }

    /// Squared error of a single transition under the kind's target rule.
    pub fn transition_loss_single(
        &self,
        t: &NStepTransition,
        discount: f64,
        rng: &mut impl Rng,
    ) -> Result<f64> {
        let alpha = if self.kind == AgentKind::Distributional {
            self.rescale_alpha
        } else {
            1.0
        };
        self.transition_loss(t, discount, alpha, rng)
    }

    fn transition_loss(
        &self,
        t: &NStepTransition,
        discount: f64,
        alpha: f64,
        rng: &mut impl Rng,
    ) -> Result<f64> {
        let y = self.target_value(t, discount, rng)?;
        let q = self.predicted_value(t, rng);
        Ok(alpha * (q - y) * (q - y))
    }

    /// Distributional projection update at unit importance weight.
    pub fn c51_update(
        &mut self,
        batch: &[NStepTransition],
        discount: f64,
        step_size: f64,
    ) -> Result<LossReport> {
        let unit = vec![1.0; batch.len()];
        self.c51_update_weighted(batch, &unit, discount, step_size)
    }

    fn c51_update_weighted(
        &mut self,
        batch: &[NStepTransition],
        iws: &[f64],
        discount: f64,
        step_size: f64,
    ) -> Result<LossReport> {
        if self.kind != AgentKind::Distributional {
            return Err(Error::invalid(format!(
                "c51_update applies to distributional, not {}",
                self.kind
            )));
        }
        if batch.is_empty() {
            return Err(Error::invalid("empty batch"));
        }
        self.refresh_greedy_cache();
        let mut losses = Vec::with_capacity(batch.len());
        let mut projections = vec![0.0; batch.len() * self.support.n_atoms];
        for (t, out) in batch
            .iter()
            .zip(projections.chunks_mut(self.support.n_atoms))
        {
            self.check_state(t.start_state)?;
            self.check_state(t.end_state)?;
            let (Params::Categorical(online), Params::Categorical(target)) =
                (&self.online, &self.target)
            else {
                unreachable!("distributional storage")
            };
            let q = self.support.expectation(online.row(t.start_state, t.action));
            let greedy = self.greedy_cache[t.end_state];
            let y = if t.done {
                t.return_n
            } else {
                t.return_n
                    + discount.powi(t.n as i32)
                        * self.support.expectation(target.row(t.end_state, greedy))
            };
            losses.push(self.rescale_alpha * (q - y) * (q - y));
            if t.done {
                self.support.project_into(&[], t.return_n, 0.0, out);
            } else {
                self.support.project_into(
                    target.row(t.end_state, greedy),
                    t.return_n,
                    discount.powi(t.n as i32),
                    out,
                );
            }
        }
        let Params::Categorical(online) = &mut self.online else {
            unreachable!("distributional online storage")
        };
        for ((t, projected), iw) in batch
            .iter()
            .zip(projections.chunks(self.support.n_atoms))
            .zip(iws)
        {
            let eta = (step_size * iw).clamp(0.0, 1.0);
            let row = online.row_mut(t.start_state, t.action);
            for (p, tp) in row.iter_mut().zip(projected) {
                *p = (1.0 - eta) * *p + eta * tp;
            }
        }
        Ok(LossReport::from_losses(losses, self.rescale_alpha))
    }

    /// One stochastic-approximation step on the batch.
    ///
    /// Targets and the returned losses are computed against the pre-update
    /// tables; entries then move by `step_size * iw * (y - entry)`. The
    /// dueling kind splits the error equally onto V and A and re-centers the
    /// advantage row; the noisy kind updates mu with the full error and sigma
    /// with `error * eps`, clamped nonnegative. Counts toward the sync period
    /// and syncs the target copy when it elapses.
    pub fn train_step(
        &mut self,
        batch: &[NStepTransition],
        iws: &[f64],
        discount: f64,
        rng: &mut impl Rng,
    ) -> Result<LossReport> {
        if batch.is_empty() {
            return Err(Error::invalid("empty batch"));
        }
        if iws.len() != batch.len() {
            return Err(Error::invalid(
                "one importance weight per transition required",
            ));
        }
        let report = if self.kind == AgentKind::Distributional {
            self.c51_update_weighted(batch, iws, discount, self.step_size)?
        } else {
            // Prediction and update must share the same noise draw.
            let mut noise = Vec::with_capacity(batch.len());
            let mut targets = Vec::with_capacity(batch.len());
            let mut losses = Vec::with_capacity(batch.len());
            for t in batch {
                let eps: f64 = if self.kind == AgentKind::Noisy {
                    StandardNormal.sample(rng)
                } else {
                    0.0
                };
                let q = match &self.online {
                    Params::Q(q) => q.get(t.start_state, t.action),
                    Params::Dueling { v, a } => {
                        let row = a.row(t.start_state);
                        let mean = row.iter().sum::<f64>() / row.len() as f64;
                        v[t.start_state] + row[t.action] - mean
                    }
                    Params::Noisy { mu, sigma } => {
                        mu.get(t.start_state, t.action)
                            + sigma.get(t.start_state, t.action) * eps
                    }
                    Params::Categorical(_) => unreachable!(),
                };
                let y = self.target_value(t, discount, rng)?;
                noise.push(eps);
                targets.push(y);
                losses.push((q - y) * (q - y));
            }
            for ((t, &y), (&iw, &eps)) in batch.iter().zip(&targets).zip(iws.iter().zip(&noise)) {
                let rate = self.step_size * iw;
                match &mut self.online {
                    Params::Q(q) => {
                        let cur = q.get(t.start_state, t.action);
                        q.set(t.start_state, t.action, cur + rate * (y - cur));
                    }
                    Params::Dueling { v, a } => {
                        let row = a.row(t.start_state);
                        let mean = row.iter().sum::<f64>() / row.len() as f64;
                        let err = y - (v[t.start_state] + row[t.action] - mean);
                        v[t.start_state] += rate * err / 2.0;
                        let row = a.row_mut(t.start_state);
                        row[t.action] += rate * err / 2.0;
                        let mean = row.iter().sum::<f64>() / row.len() as f64;
                        for x in row.iter_mut() {
                            *x -= mean;
                        }
                    }
                    Params::Noisy { mu, sigma } => {
                        let err = y
                            - (mu.get(t.start_state, t.action)
                                + sigma.get(t.start_state, t.action) * eps);
                        let cur = mu.get(t.start_state, t.action);
                        mu.set(t.start_state, t.action, cur + rate * err);
                        if !self.sigma_frozen {
                            let cur = sigma.get(t.start_state, t.action);
                            sigma.set(t.start_state, t.action, (cur + rate * err * eps).max(0.0));
                        }
                    }
                    Params::Categorical(_) => unreachable!(),
                }
            }
            LossReport::from_losses(losses, 1.0)
        };
        self.steps_since_sync += 1;
        if self.steps_since_sync >= self.sync_period {
            self.sync_target();
        }
        Ok(report)
    }

    /// Deep-copies the online parameters into the target slot.
    pub fn sync_target(&mut self) {
        self.target.clone_from(&self.online);
        self.steps_since_sync = 0;
        self.sync_epoch += 1;
    }

    /// Identifier of the current target-table contents.
    pub fn sync_epoch(&self) -> u64 {
        self.sync_epoch
    }

    /// Noise-free bootstrap value of every state under the target table
    /// (`max_a` of the target scalar row). Valid until the next sync for
    /// kinds whose target rule reads the target table alone.
    pub fn fill_target_bootstrap(&self, out: &mut [f64]) {
        debug_assert_eq!(out.len(), self.n_states);
        let mut row = vec![0.0; self.n_actions];
        for (s, slot) in out.iter_mut().enumerate() {
            scalar_noiseless_row(&self.target, &self.support, s, &mut row);
            *slot = row[argmax(&row)];
        }
    }

    /// Squared error of one transition with a precomputed target-bootstrap
    /// vector. Only valid for kinds whose bootstrap is a noise-free function
    /// of the target table (standard, dueling, distributional).
    pub fn transition_loss_with_bootstrap(
        &self,
        t: &NStepTransition,
        discount: f64,
        bootstrap: &[f64],
        rng: &mut impl Rng,
    ) -> Result<f64> {
        debug_assert!(matches!(
            self.kind,
            AgentKind::Standard | AgentKind::Dueling | AgentKind::Distributional
        ));
        self.check_state(t.start_state)?;
        self.check_state(t.end_state)?;
        let y = if t.done {
            t.return_n
        } else {
            t.return_n + discount.powi(t.n as i32) * bootstrap[t.end_state]
        };
        let q = self.predicted_value(t, rng);
        let alpha = if self.kind == AgentKind::Distributional {
            self.rescale_alpha
        } else {
            1.0
        };
        Ok(alpha * (q - y) * (q - y))
    }

    /// Refreshes the greedy-target-action cache for the current sync epoch.
    fn refresh_greedy_cache(&mut self) {
        if self.greedy_cache_epoch != self.sync_epoch {
            let mut row = vec![0.0; self.n_actions];
            self.greedy_cache.resize(self.n_states, 0);
            for s in 0..self.n_states {
                scalar_noiseless_row(&self.target, &self.support, s, &mut row);
                self.greedy_cache[s] = argmax(&row);
            }
            self.greedy_cache_epoch = self.sync_epoch;
        }
    }

    /// Noise-free online scalar table (sigma ignored for the noisy kind).
    pub fn mean_q_table(&self) -> Table {
        let mut out = Table::zeros(self.n_states, self.n_actions);
        let mut row = vec![0.0; self.n_actions];
        for s in 0..self.n_states {
            scalar_noiseless_row(&self.online, &self.support, s, &mut row);
            out.row_mut(s).copy_from_slice(&row);
        }
        out
    }

    /// Noise-free target scalar table.
    pub fn mean_target_table(&self) -> Table {
        let mut out = Table::zeros(self.n_states, self.n_actions);
        let mut row = vec![0.0; self.n_actions];
        for s in 0..self.n_states {
            scalar_noiseless_row(&self.target, &self.support, s, &mut row);
            out.row_mut(s).copy_from_slice(&row);
        }
        out
    }
}

/// Scalar Q row of a parameter set; noisy parameters draw fresh noise.
fn scalar_row(
    params: &Params,
    support: &Support,
    state: usize,
    out: &mut [f64],
    rng: &mut impl Rng,
) {
    match params {
        Params::Q(q) => out.copy_from_slice(q.row(state)),
        Params::Dueling { v, a } => {
            let row = a.row(state);
            let mean = row.iter().sum::<f64>() / row.len() as f64;
            for (o, adv) in out.iter_mut().zip(row) {
                *o = v[state] + adv - mean;
            }
        }
        Params::Noisy { mu, sigma } => {
            for (a, o) in out.iter_mut().enumerate() {
                let eps: f64 = StandardNormal.sample(rng);
                *o = mu.get(state, a) + sigma.get(state, a) * eps;
            }
        }
        Params::Categorical(c) => {
            for (a, o) in out.iter_mut().enumerate() {
                *o = support.expectation(c.row(state, a));
            }
        }
    }
}

fn scalar_noiseless_row(params: &Params, support: &Support, state: usize, out: &mut [f64]) {
    match params {
        Params::Noisy { mu, .. } => out.copy_from_slice(mu.row(state)),
        other => scalar_row(other, support, state, out, &mut NoopRng),
    }
}

/// Stack-buffer size for transient Q rows on hot paths.
const STACK_ROW: usize = 64;

/// Rng stand-in for paths that never draw (non-noisy kinds).
struct NoopRng;

impl rand::RngCore for NoopRng {
    fn next_u32(&mut self) -> u32 {
        unreachable!("no randomness expected on this path")
    }
    fn next_u64(&mut self) -> u64 {
        unreachable!("no randomness expected on this path")
    }
    fn fill_bytes(&mut self, _dest: &mut [u8]) {
        unreachable!("no randomness expected on this path")
    }
}

const MODEL_MAGIC: &[u8; 8] = b"ACEDMD01";

/// Writes the ensemble to a binary snapshot: per model a shape header, then
/// online and target parameter values row-major.
pub fn save_models(models: &[AgentModel], path: &Path) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    w.write_all(MODEL_MAGIC).map_err(|e| Error::io(path, e))?;
    w.write_all(&(models.len() as u64).to_le_bytes())
        .map_err(|e| Error::io(path, e))?;
    for m in models {
        let mut head = Vec::new();
        head.push(kind_tag(m.kind));
        head.extend((m.n_states as u64).to_le_bytes());
        head.extend((m.n_actions as u64).to_le_bytes());
        head.extend(m.sync_period.to_le_bytes());
        head.extend(m.steps_since_sync.to_le_bytes());
        head.extend(m.step_size.to_le_bytes());
        head.extend(m.rescale_alpha.to_le_bytes());
        head.push(m.sigma_frozen as u8);
        head.extend(m.support.v_min.to_le_bytes());
        head.extend(m.support.v_max.to_le_bytes());
        head.extend((m.support.n_atoms as u64).to_le_bytes());
        w.write_all(&head).map_err(|e| Error::io(path, e))?;
        for params in [&m.online, &m.target] {
            for v in param_values(params) {
                w.write_all(&v.to_le_bytes())
                    .map_err(|e| Error::io(path, e))?;
            }
        }
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn load_models(path: &Path) -> Result<Vec<AgentModel>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = BufReader::new(file);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic).map_err(|e| Error::io(path, e))?;
    if &magic != MODEL_MAGIC {
        return Err(Error::Snapshot(format!(
            "bad magic in {}: expected ACEDMD01",
            path.display()
        )));
    }
    let n_models = read_u64(&mut r, path)? as usize;
    let mut models = Vec::with_capacity(n_models);
    for _ in 0..n_models {
        let mut tag = [0u8; 1];
        r.read_exact(&mut tag).map_err(|e| Error::io(path, e))?;
        let kind = kind_from_tag(tag[0])?;
        let n_states = read_u64(&mut r, path)? as usize;
        let n_actions = read_u64(&mut r, path)? as usize;
        let mut u32buf = [0u8; 4];
        r.read_exact(&mut u32buf).map_err(|e| Error::io(path, e))?;
        let sync_period = u32::from_le_bytes(u32buf);
        r.read_exact(&mut u32buf).map_err(|e| Error::io(path, e))?;
        let steps_since_sync = u32::from_le_bytes(u32buf);
        let step_size = read_f64(&mut r, path)?;
        let rescale_alpha = read_f64(&mut r, path)?;
        r.read_exact(&mut tag).map_err(|e| Error::io(path, e))?;
        let sigma_frozen = tag[0] != 0;
        let v_min = read_f64(&mut r, path)?;
        let v_max = read_f64(&mut r, path)?;
        let n_atoms = read_u64(&mut r, path)? as usize;
        let opts = AgentOptions {
            sync_period,
            step_size,
            support: Support {
                v_min,
                v_max,
                n_atoms,
            },
            rescale_alpha,
            noisy_sigma_init: 0.0,
            noisy_sigma_frozen: sigma_frozen,
        };
        let mut model = AgentModel::new(kind, n_states, n_actions, &opts);
        model.steps_since_sync = steps_since_sync;
        for which in 0..2 {
            let params = if which == 0 {
                &mut model.online
            } else {
                &mut model.target
            };
            for slot in param_values_mut(params) {
                *slot = read_f64(&mut r, path)?;
            }
        }
        models.push(model);
    }
    Ok(models)
}

fn kind_tag(kind: AgentKind) -> u8 {
    AgentKind::ALL.iter().position(|&k| k == kind).unwrap() as u8
}

fn kind_from_tag(tag: u8) -> Result<AgentKind> {
    AgentKind::ALL
        .get(tag as usize)
        .copied()
        .ok_or_else(|| Error::Snapshot(format!("unknown agent kind tag {tag}")))
}

fn param_values(params: &Params) -> Vec<f64> {
    match params {
        Params::Q(t) => t.data.clone(),
        Params::Dueling { v, a } => v.iter().chain(&a.data).copied().collect(),
        Params::Noisy { mu, sigma } => mu.data.iter().chain(&sigma.data).copied().collect(),
        Params::Categorical(c) => c.data.clone(),
    }
}

fn param_values_mut(params: &mut Params) -> Vec<&mut f64> {
    match params {
        Params::Q(t) => t.data.iter_mut().collect(),
        Params::Dueling { v, a } => v.iter_mut().chain(a.data.iter_mut()).collect(),
        Params::Noisy { mu, sigma } => mu.data.iter_mut().chain(sigma.data.iter_mut()).collect(),
        Params::Categorical(c) => c.data.iter_mut().collect(),
    }
}

fn read_u64(r: &mut impl Read, path: &Path) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b).map_err(|e| Error::io(path, e))?;
    Ok(u64::from_le_bytes(b))
}

fn read_f64(r: &mut impl Read, path: &Path) -> Result<f64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b).map_err(|e| Error::io(path, e))?;
    Ok(f64::from_le_bytes(b))
}
