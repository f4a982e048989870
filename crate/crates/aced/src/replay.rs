//! Prioritized experience replay with agency-based batch formation.
//!
//! Transitions carry n-step returns and a per-agent loss vector. Sampling is
//! proportional PER over a sum tree; a presampled pool is then routed to
//! ensemble members by a categorical draw over per-transition reliabilities,
//! and each member trains on the top-k entries of its own pool.

use std::collections::VecDeque;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::arbitration::compute_reliability;
use crate::error::{Error, Result};

/// Stored experience unit.
#[derive(Debug, Clone, PartialEq)]
pub struct NStepTransition {
    pub start_state: usize,
    pub action: usize,
    /// Discounted n-step return (no bootstrap term).
    pub return_n: f64,
    pub end_state: usize,
    pub done: bool,
    /// Number of rewards folded into `return_n`; shrinks near episode ends.
    pub n: u32,
    /// Most recent per-agent losses on this transition.
    pub loss_vector: Vec<f64>,
    /// Shared PER priority (mean absolute loss plus floor).
    pub priority: f64,
}

/// Which score ranks entries in top-k batch formation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TopKCriterion {
    /// Rank by the assignment reliability of the receiving agent.
    #[default]
    Reliability,
    /// Rank by the shared transition priority.
    Priority,
}

/// Parameters of presampling and agency-based batch formation.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SamplingConfig {
    /// Pre-sample pool size M.
    pub presample_size: usize,
    /// Per-agent batch size k.
    pub batch_size: usize,
    /// Softmax temperature for agency assignment.
    pub temperature_samp: f64,
    /// PER exponent omega applied to priorities.
    pub priority_exponent: f64,
    /// Importance-sampling exponent beta.
    pub is_exponent: f64,
    /// Additive floor keeping every transition reachable.
    pub priority_floor: f64,
    /// Multi-step return length.
    pub n_step: u32,
    /// Discount factor of the returns.
    pub discount: f64,
    /// Top-k ranking criterion.
    pub top_k_criterion: TopKCriterion,
}

impl SamplingConfig {
    pub fn validate(&self) -> Result<()> {
        if self.presample_size == 0 || self.batch_size == 0 {
            return Err(Error::invalid("presample_size and batch_size must be positive"));
        }
        if !(self.temperature_samp > 0.0 && self.temperature_samp.is_finite()) {
            return Err(Error::invalid("temperature_samp must be positive"));
        }
        if !(0.0..=1.0).contains(&self.priority_exponent) {
            return Err(Error::invalid("priority_exponent must lie in [0, 1]"));
        }
        if !(0.0..=1.0).contains(&self.is_exponent) {
            return Err(Error::invalid("is_exponent must lie in [0, 1]"));
        }
        if !(self.priority_floor > 0.0) {
            return Err(Error::invalid("priority_floor must be positive"));
        }
        if self.n_step == 0 {
            return Err(Error::invalid("n_step must be at least 1"));
        }
        if !(0.0 < self.discount && self.discount < 1.0) {
            return Err(Error::invalid("discount must lie in (0, 1)"));
        }
        Ok(())
    }
}

/// Discounted sum of up to n rewards: `sum_m discount^m * rewards[m]`.
pub fn compute_n_step(rewards: &[f64], discount: f64) -> Result<f64> {
    if rewards.is_empty() {
        return Err(Error::invalid("reward sequence must be non-empty"));
    }
    if !(0.0 < discount && discount < 1.0) {
        return Err(Error::invalid("discount must lie in (0, 1)"));
    }
    let mut acc = 0.0;
    let mut scale = 1.0;
    for &r in rewards {
        acc += scale * r;
        scale *= discount;
    }
    Ok(acc)
}

/// Rolls per-step experience into n-step transitions.
///
/// Emits a transition once n rewards have accumulated ahead of its start
/// step; at episode end the remaining starts flush with shrunk n and the
/// done flag set.
#[derive(Debug, Clone)]
pub struct NStepAssembler {
    n: usize,
    discount: f64,
    pending: VecDeque<(usize, usize, f64)>,
}

impl NStepAssembler {
    pub fn new(n_step: u32, discount: f64) -> Self {
        NStepAssembler {
            n: n_step.max(1) as usize,
            discount,
            pending: VecDeque::new(),
        }
    }

    /// Feed one environment step; returns the transitions that became complete.
    pub fn push_step(
        &mut self,
        state: usize,
        action: usize,
        reward: f64,
        next_state: usize,
        done: bool,
    ) -> Vec<NStepTransition> {
        self.pending.push_back((state, action, reward));
        let mut out = Vec::new();
        if done {
            while !self.pending.is_empty() {
                out.push(self.emit(next_state, true));
            }
        } else if self.pending.len() == self.n {
            out.push(self.emit(next_state, false));
        }
        out
    }

    /// Drops any partial history (call on external resets).
    pub fn clear(&mut self) {
        self.pending.clear();
    }

    fn emit(&mut self, end_state: usize, done: bool) -> NStepTransition {
        let rewards: Vec<f64> = self.pending.iter().map(|&(_, _, r)| r).collect();
        let (start_state, action, _) = self.pending.pop_front().expect("pending non-empty");
        let return_n = compute_n_step(&rewards, self.discount).expect("non-empty rewards");
        NStepTransition {
            start_state,
            action,
            return_n,
            end_state,
            done,
            n: rewards.len() as u32,
            loss_vector: Vec::new(),
            priority: 0.0,
        }
    }
}

/// Complete binary tree whose internal nodes hold subtree mass sums.
///
/// Internal nodes are recomputed from their children on every update, so the
/// parent-equals-sum-of-children invariant holds by construction rather than
/// by incremental deltas.
#[derive(Debug, Clone)]
pub struct SumTree {
    capacity: usize,
    tree: Vec<f64>,
}

impl SumTree {
    pub fn new(capacity: usize) -> Self {
        let capacity = capacity.next_power_of_two().max(1);
        SumTree {
            capacity,
            tree: vec![0.0; 2 * capacity - 1],
        }
    }

    pub fn total(&self) -> f64 {
        self.tree[0]
    }

    pub fn mass(&self, ix: usize) -> f64 {
        self.tree[ix + self.capacity - 1]
    }

    /// Sets the mass at leaf `ix` and refreshes the path to the root.
    pub fn set(&mut self, ix: usize, mass: f64) {
        debug_assert!(ix < self.capacity);
        debug_assert!(mass.is_finite() && mass >= 0.0);
        let mut node = ix + self.capacity - 1;
        self.tree[node] = mass;
        while node > 0 {
            node = (node - 1) / 2;
            self.tree[node] = self.tree[2 * node + 1] + self.tree[2 * node + 2];
        }
    }

    /// Maps a cumulative mass in `[0, total)` to the first leaf whose prefix
    /// sum exceeds it. Out-of-range queries clamp to the last non-empty leaf.
    pub fn find(&self, mass: f64) -> usize {
        let mut node = 0;
        let mut residual = mass;
        while node < self.capacity - 1 {
            let left = 2 * node + 1;
            let right = left + 1;
            if residual < self.tree[left] || self.tree[right] == 0.0 {
                node = left;
            } else {
                residual -= self.tree[left];
                node = right;
            }
        }
        node - (self.capacity - 1)
    }
}

/// Reference to a sampled slot; the stamp detects eviction between sampling
/// and the subsequent priority update.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SampleRef {
    pub slot: usize,
    pub stamp: u64,
}

/// One presampled transition with its importance weight.
#[derive(Debug, Clone, Copy)]
pub struct PresampleEntry {
    pub sample: SampleRef,
    pub importance_weight: f64,
}

/// Batch routed to one ensemble member.
#[derive(Debug, Clone)]
pub struct AgencyBatch {
    pub agent_id: usize,
    pub entries: Vec<AgencyBatchEntry>,
}

#[derive(Debug, Clone, Copy)]
pub struct AgencyBatchEntry {
    pub sample: SampleRef,
    /// Assignment reliability of the receiving agent on this transition.
    pub reliability: f64,
    pub importance_weight: f64,
}

/// Ring-buffer prioritized replay store.
#[derive(Debug, Clone)]
pub struct ReplayBuffer {
    capacity: usize,
    n_agents: usize,
    priority_exponent: f64,
    priority_floor: f64,
    slots: Vec<NStepTransition>,
    stamps: Vec<u64>,
    cursor: usize,
    next_stamp: u64,
    tree: SumTree,
    max_priority: f64,
    loss_sum: f64,
    loss_count: u64,
    stale_updates: u64,
}

impl ReplayBuffer {
    pub fn new(capacity: usize, n_agents: usize, priority_exponent: f64, priority_floor: f64) -> Self {
        assert!(capacity > 0 && n_agents > 0);
        ReplayBuffer {
            capacity,
            n_agents,
            priority_exponent,
            priority_floor,
            slots: Vec::with_capacity(capacity),
            stamps: Vec::with_capacity(capacity),
            cursor: 0,
            next_stamp: 0,
            tree: SumTree::new(capacity),
            max_priority: 1.0,
            loss_sum: 0.0,
            loss_count: 0,
            stale_updates: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn n_agents(&self) -> usize {
        self.n_agents
    }

    pub fn max_priority(&self) -> f64 {
        self.max_priority
    }

    /// Number of priority updates that referenced an evicted slot.
    pub fn stale_updates(&self) -> u64 {
        self.stale_updates
    }

    pub fn total_mass(&self) -> f64 {
        self.tree.total()
    }

    pub fn get(&self, sample: SampleRef) -> Option<&NStepTransition> {
        (sample.slot < self.slots.len() && self.stamps[sample.slot] == sample.stamp)
            .then(|| &self.slots[sample.slot])
    }

    pub fn slot(&self, slot: usize) -> &NStepTransition {
        &self.slots[slot]
    }

    /// Running mean of all updated losses; 1.0 before any update so that
    /// fresh slots produce uniform reliabilities.
    pub fn mean_loss(&self) -> f64 {
        if self.loss_count == 0 {
            1.0
        } else {
            self.loss_sum / self.loss_count as f64
        }
    }

    /// Inserts at the ring cursor, evicting FIFO when full.
    ///
    /// The stored priority is the running max so new data is sampled at least
    /// once, and the loss vector is reset to the ensemble-wide mean.
    pub fn push(&mut self, mut transition: NStepTransition) {
        transition.loss_vector = vec![self.mean_loss(); self.n_agents];
        transition.priority = self.max_priority;
        let slot = self.cursor;
        if self.slots.len() < self.capacity {
            self.slots.push(transition);
            self.stamps.push(self.next_stamp);
        } else {
            self.slots[slot] = transition;
            self.stamps[slot] = self.next_stamp;
        }
        self.tree.set(slot, self.max_priority.powf(self.priority_exponent));
        self.cursor = (self.cursor + 1) % self.capacity;
        self.next_stamp += 1;
    }

    /// Stratified proportional sampling of `m` transitions.
    ///
    /// Draw `j` lands with probability `p_j^omega / sum_l p_l^omega`; the
    /// importance weight `(len * P(j))^-beta` is normalized by the batch max.
    pub fn presample(
        &self,
        m: usize,
        is_exponent: f64,
        rng: &mut impl Rng,
    ) -> Result<Vec<PresampleEntry>> {
        if self.is_empty() {
            return Err(Error::Precondition("presample on empty buffer".into()));
        }
        let total = self.tree.total();
        debug_assert!(total > 0.0);
        let len = self.slots.len() as f64;
        let mut entries = Vec::with_capacity(m);
        let mut max_w = 0.0_f64;
        for i in 0..m {
            let u = total * ((i as f64 + rng.random::<f64>()) / m as f64);
            let slot = self.tree.find(u);
            let prob = self.tree.mass(slot) / total;
            let w = (len * prob).powf(-is_exponent);
            max_w = max_w.max(w);
            entries.push(PresampleEntry {
                sample: SampleRef {
                    slot,
                    stamp: self.stamps[slot],
                },
                importance_weight: w,
            });
        }
        for e in &mut entries {
            e.importance_weight /= max_w;
        }
        Ok(entries)
    }

    /// Routes each presampled transition to one agent.
    ///
    /// Row `j` of `loss_matrix` holds fresh per-agent losses for transition
    /// `j`; reliabilities are `softmax(-L_j / temperature)` and the receiving
    /// agent is a categorical draw over them. Returns, per agent, the indices
    /// into the presample pool together with the drawn agent's reliability.
    pub fn assign_agency(
        presampled: &[PresampleEntry],
        loss_matrix: &[Vec<f64>],
        n_agents: usize,
        temperature: f64,
        rng: &mut impl Rng,
    ) -> Result<Vec<Vec<(usize, f64)>>> {
        if loss_matrix.len() != presampled.len() {
            return Err(Error::invalid(format!(
                "loss matrix has {} rows for {} presampled transitions",
                loss_matrix.len(),
                presampled.len()
            )));
        }
        let mut pools: Vec<Vec<(usize, f64)>> = vec![Vec::new(); n_agents];
        for (j, row) in loss_matrix.iter().enumerate() {
            if row.len() != n_agents {
                return Err(Error::invalid(format!(
                    "loss row {} has length {}, expected {}",
                    j,
                    row.len(),
                    n_agents
                )));
            }
            let rel = compute_reliability(row, temperature)?;
            let agent = categorical_draw(&rel, rng);
            pools[agent].push((j, rel[agent]));
        }
        Ok(pools)
    }

    /// Keeps each agent's k best-scoring entries.
    ///
    /// Ties break by insertion order. Underfull pools pad by uniform
    /// resampling with replacement from the same pool; empty pools fill with
    /// fresh prioritized draws whose reliability comes from the stored loss
    /// vector.
    #[allow(clippy::too_many_arguments)]
    pub fn select_top_k(
        &self,
        pools: &[Vec<(usize, f64)>],
        presampled: &[PresampleEntry],
        k: usize,
        criterion: TopKCriterion,
        temperature: f64,
        is_exponent: f64,
        rng: &mut impl Rng,
    ) -> Result<Vec<AgencyBatch>> {
        let mut batches = Vec::with_capacity(pools.len());
        for (agent_id, pool) in pools.iter().enumerate() {
            let mut ranked: Vec<(usize, f64)> = pool.clone();
            match criterion {
                TopKCriterion::Reliability => {
                    ranked.sort_by(|a, b| b.1.partial_cmp(&a.1).expect("finite reliabilities"));
                }
                TopKCriterion::Priority => {
                    ranked.sort_by(|a, b| {
                        let pa = self
                            .get(presampled[a.0].sample)
                            .map_or(0.0, |t| t.priority);
                        let pb = self
                            .get(presampled[b.0].sample)
                            .map_or(0.0, |t| t.priority);
                        pb.partial_cmp(&pa).expect("finite priorities")
                    });
                }
            }
            ranked.truncate(k);

            let mut entries: Vec<AgencyBatchEntry> = ranked
                .iter()
                .map(|&(j, rel)| AgencyBatchEntry {
                    sample: presampled[j].sample,
                    reliability: rel,
                    importance_weight: presampled[j].importance_weight,
                })
                .collect();

            if entries.len() < k {
                if !entries.is_empty() {
                    let base = entries.clone();
                    while entries.len() < k {
                        entries.push(base[rng.random_range(0..base.len())]);
                    }
                } else {
                    for e in self.presample(k, is_exponent, rng)? {
                        let t = self.get(e.sample).expect("fresh sample is live");
                        let rel = compute_reliability(&t.loss_vector, temperature)?;
                        entries.push(AgencyBatchEntry {
                            sample: e.sample,
                            reliability: rel[agent_id],
                            importance_weight: e.importance_weight,
                        });
                    }
                }
            }
            batches.push(AgencyBatch { agent_id, entries });
        }
        Ok(batches)
    }

    /// Replaces loss vectors and re-derives priorities for the given samples.
    ///
    /// Stale references (slot evicted since sampling) are skipped and counted.
    pub fn update_priorities(
        &mut self,
        samples: &[SampleRef],
        new_loss_vectors: &[Vec<f64>],
    ) -> Result<()> {
        if samples.len() != new_loss_vectors.len() {
            return Err(Error::invalid("one loss vector per sample required"));
        }
        for (sample, losses) in samples.iter().zip(new_loss_vectors) {
            if losses.len() != self.n_agents {
                return Err(Error::invalid(format!(
                    "loss vector length {} does not match ensemble size {}",
                    losses.len(),
                    self.n_agents
                )));
            }
            if losses.iter().any(|l| !l.is_finite() || *l < 0.0) {
                return Err(Error::invalid("losses must be finite and nonnegative"));
            }
            if sample.slot >= self.slots.len() || self.stamps[sample.slot] != sample.stamp {
                self.stale_updates += 1;
                continue;
            }
            let mean_abs = losses.iter().map(|l| l.abs()).sum::<f64>() / losses.len() as f64;
            let priority = mean_abs + self.priority_floor;
            let t = &mut self.slots[sample.slot];
            t.loss_vector = losses.clone();
            t.priority = priority;
            self.tree.set(sample.slot, priority.powf(self.priority_exponent));
            self.max_priority = self.max_priority.max(priority);
            self.loss_sum += mean_abs;
            self.loss_count += 1;
        }
        Ok(())
    }

    /// Writes the buffer to a versioned binary snapshot.
    ///
    /// Layout (little-endian): magic `ACEDRB01`; u64 capacity, len, cursor,
    /// next_stamp, n_agents; f64 priority_exponent, priority_floor,
    /// max_priority, loss_sum; u64 loss_count, stale_updates; then `len`
    /// records in insertion order, each: u64 stamp, start_state, action,
    /// end_state; f64 return_n; u8 done; u32 n; f64 loss[n_agents]; f64
    /// priority.
    pub fn save(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        let mut put = |bytes: &[u8]| w.write_all(bytes).map_err(|e| Error::io(path, e));
        put(MAGIC)?;
        for v in [
            self.capacity as u64,
            self.slots.len() as u64,
            self.cursor as u64,
            self.next_stamp,
            self.n_agents as u64,
        ] {
            put(&v.to_le_bytes())?;
        }
        for v in [
            self.priority_exponent,
            self.priority_floor,
            self.max_priority,
            self.loss_sum,
        ] {
            put(&v.to_le_bytes())?;
        }
        put(&self.loss_count.to_le_bytes())?;
        put(&self.stale_updates.to_le_bytes())?;
        for i in 0..self.slots.len() {
            let slot = self.insertion_order_slot(i);
            let t = &self.slots[slot];
            put(&self.stamps[slot].to_le_bytes())?;
            put(&(t.start_state as u64).to_le_bytes())?;
            put(&(t.action as u64).to_le_bytes())?;
            put(&(t.end_state as u64).to_le_bytes())?;
            put(&t.return_n.to_le_bytes())?;
            put(&[t.done as u8])?;
            put(&t.n.to_le_bytes())?;
            for l in &t.loss_vector {
                put(&l.to_le_bytes())?;
            }
            put(&t.priority.to_le_bytes())?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let mut r = BufReader::new(file);
        let mut magic = [0u8; 8];
        read_exact(&mut r, &mut magic, path)?;
        if &magic != MAGIC {
            return Err(Error::Snapshot(format!(
                "bad magic in {}: expected ACEDRB01",
                path.display()
            )));
        }
        let capacity = read_u64(&mut r, path)? as usize;
        let len = read_u64(&mut r, path)? as usize;
        let cursor = read_u64(&mut r, path)? as usize;
        let next_stamp = read_u64(&mut r, path)?;
        let n_agents = read_u64(&mut r, path)? as usize;
        if capacity == 0 || n_agents == 0 || len > capacity || cursor >= capacity.max(1) {
            return Err(Error::Snapshot("inconsistent snapshot header".into()));
        }
        let priority_exponent = read_f64(&mut r, path)?;
        let priority_floor = read_f64(&mut r, path)?;
        let max_priority = read_f64(&mut r, path)?;
        let loss_sum = read_f64(&mut r, path)?;
        let loss_count = read_u64(&mut r, path)?;
        let stale_updates = read_u64(&mut r, path)?;

        let mut buf = ReplayBuffer::new(capacity, n_agents, priority_exponent, priority_floor);
        buf.max_priority = max_priority;
        buf.loss_sum = loss_sum;
        buf.loss_count = loss_count;
        buf.stale_updates = stale_updates;
        buf.cursor = cursor;
        buf.next_stamp = next_stamp;
        let placeholder = NStepTransition {
            start_state: 0,
            action: 0,
            return_n: 0.0,
            end_state: 0,
            done: false,
            n: 1,
            loss_vector: vec![0.0; n_agents],
            priority: priority_floor,
        };
        buf.slots = vec![placeholder; len];
        buf.stamps = vec![0; len];
        for i in 0..len {
            let slot = insertion_order_slot_for(len, capacity, cursor, i);
            let stamp = read_u64(&mut r, path)?;
            let start_state = read_u64(&mut r, path)? as usize;
            let action = read_u64(&mut r, path)? as usize;
            let end_state = read_u64(&mut r, path)? as usize;
            let return_n = read_f64(&mut r, path)?;
            let mut done_byte = [0u8; 1];
            read_exact(&mut r, &mut done_byte, path)?;
            let mut n_bytes = [0u8; 4];
            read_exact(&mut r, &mut n_bytes, path)?;
            let n = u32::from_le_bytes(n_bytes);
            let mut loss_vector = Vec::with_capacity(n_agents);
            for _ in 0..n_agents {
                loss_vector.push(read_f64(&mut r, path)?);
            }
            let priority = read_f64(&mut r, path)?;
            buf.slots[slot] = NStepTransition {
                start_state,
                action,
                return_n,
                end_state,
                done: done_byte[0] != 0,
                n,
                loss_vector,
                priority,
            };
            buf.stamps[slot] = stamp;
            buf.tree.set(slot, priority.powf(priority_exponent));
        }
        Ok(buf)
    }

    /// Slot holding the i-th oldest stored transition.
    fn insertion_order_slot(&self, i: usize) -> usize {
        insertion_order_slot_for(self.slots.len(), self.capacity, self.cursor, i)
    }
}

fn insertion_order_slot_for(len: usize, capacity: usize, cursor: usize, i: usize) -> usize {
    if len < capacity {
        i
    } else {
        (cursor + i) % capacity
    }
}

const MAGIC: &[u8; 8] = b"ACEDRB01";

fn read_exact(r: &mut impl Read, buf: &mut [u8], path: &Path) -> Result<()> {
    r.read_exact(buf).map_err(|e| Error::io(path, e))
}

fn read_u64(r: &mut impl Read, path: &Path) -> Result<u64> {
    let mut b = [0u8; 8];
    read_exact(r, &mut b, path)?;
    Ok(u64::from_le_bytes(b))
}

fn read_f64(r: &mut impl Read, path: &Path) -> Result<f64> {
    let mut b = [0u8; 8];
    read_exact(r, &mut b, path)?;
    Ok(f64::from_le_bytes(b))
}

/// Draws an index from a probability vector (assumed to sum to 1).
pub fn categorical_draw(probs: &[f64], rng: &mut impl Rng) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, &p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    probs.len() - 1
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn raw(start: usize) -> NStepTransition {
        NStepTransition {
            start_state: start,
            action: 0,
            return_n: 1.0,
            end_state: start + 1,
            done: false,
            n: 1,
            loss_vector: Vec::new(),
            priority: 0.0,
        }
    }

    /// Linear-scan counterpart of `SumTree::find`.
    fn linear_find(masses: &[f64], query: f64) -> usize {
        let mut acc = 0.0;
        for (i, &m) in masses.iter().enumerate() {
            acc += m;
            if query < acc {
                return i;
            }
        }
        masses.iter().rposition(|&m| m > 0.0).unwrap_or(0)
    }

    #[test]
    fn n_step_examples() {
        assert_relative_eq!(compute_n_step(&[0.7], 0.99).unwrap(), 0.7);
        assert_relative_eq!(compute_n_step(&[0.0, 0.0, 0.0], 0.99).unwrap(), 0.0);
        assert_relative_eq!(
            compute_n_step(&[1.0, 1.0, 1.0], 0.99).unwrap(),
            2.9701,
            epsilon = 1e-12
        );
        assert!(compute_n_step(&[], 0.99).is_err());
    }

    #[test]
    fn assembler_emits_full_and_truncated_transitions() {
        let mut asm = NStepAssembler::new(3, 0.5);
        assert!(asm.push_step(0, 1, 1.0, 1, false).is_empty());
        assert!(asm.push_step(1, 1, 2.0, 2, false).is_empty());
        let full = asm.push_step(2, 1, 4.0, 3, false);
        assert_eq!(full.len(), 1);
        assert_eq!(full[0].start_state, 0);
        assert_eq!(full[0].end_state, 3);
        assert_eq!(full[0].n, 3);
        assert!(!full[0].done);
        assert_relative_eq!(full[0].return_n, 1.0 + 0.5 * 2.0 + 0.25 * 4.0);

        // Terminal step flushes the rest with shrinking n.
        let flushed = asm.push_step(3, 0, 8.0, 4, true);
        assert_eq!(flushed.len(), 3);
        assert!(flushed.iter().all(|t| t.done && t.end_state == 4));
        assert_eq!(
            flushed.iter().map(|t| t.n).collect::<Vec<_>>(),
            vec![3, 2, 1]
        );
        assert_relative_eq!(flushed[0].return_n, 2.0 + 0.5 * 4.0 + 0.25 * 8.0);
        assert_relative_eq!(flushed[2].return_n, 8.0);
    }

    #[test]
    fn push_sets_max_priority_mass_and_evicts_fifo() {
        let mut buf = ReplayBuffer::new(2, 3, 0.5, 1e-6);
        buf.push(raw(0));
        assert_eq!(buf.len(), 1);
        assert_relative_eq!(buf.total_mass(), 1.0f64.powf(0.5), epsilon = 1e-12);
        assert_eq!(buf.slot(0).loss_vector, vec![1.0; 3]);

        buf.push(raw(1));
        buf.push(raw(2));
        assert_eq!(buf.len(), 2);
        let starts: Vec<usize> = (0..2).map(|s| buf.slot(s).start_state).collect();
        assert!(starts.contains(&2) && starts.contains(&1) && !starts.contains(&0));
    }

    #[test]
    fn push_after_priority_raise_carries_new_max() {
        let mut buf = ReplayBuffer::new(8, 2, 0.5, 1e-6);
        buf.push(raw(0));
        let sample = SampleRef { slot: 0, stamp: 0 };
        buf.update_priorities(&[sample], &[vec![4.0, 4.0]]).unwrap();
        assert!(buf.max_priority() > 4.0 - 1e-9);
        buf.push(raw(1));
        // Linear-scan oracle over the same state: both leaves carry p^omega.
        let expect = (4.0f64 + 1e-6).powf(0.5) * 2.0;
        assert_relative_eq!(buf.total_mass(), expect, epsilon = 1e-9);
    }

    #[test]
    fn presample_matches_sqrt_priority_probabilities() {
        let mut buf = ReplayBuffer::new(2, 1, 0.5, 1e-6);
        buf.push(raw(0));
        buf.push(raw(1));
        buf.update_priorities(
            &[SampleRef { slot: 0, stamp: 0 }, SampleRef { slot: 1, stamp: 1 }],
            &[vec![1.0 - 1e-6], vec![4.0 - 1e-6]],
        )
        .unwrap();
        // Masses exactly [1, 2] -> P = [1/3, 2/3].
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let n = 100_000;
        let mut counts = [0u64; 2];
        for e in buf.presample(n, 0.4, &mut rng).unwrap() {
            counts[e.sample.slot] += 1;
        }
        let p0 = 1.0 / 3.0;
        let sigma = (n as f64 * p0 * (1.0 - p0)).sqrt();
        assert!(
            (counts[0] as f64 - n as f64 * p0).abs() < 3.0 * sigma,
            "counts {counts:?}"
        );
    }

    #[test]
    fn presample_importance_weights_frozen_example() {
        let mut buf = ReplayBuffer::new(2, 1, 0.5, 1e-6);
        buf.push(raw(0));
        buf.push(raw(1));
        buf.update_priorities(
            &[SampleRef { slot: 0, stamp: 0 }, SampleRef { slot: 1, stamp: 1 }],
            &[vec![1.0 - 1e-6], vec![4.0 - 1e-6]],
        )
        .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let entries = buf.presample(64, 0.4, &mut rng).unwrap();
        for e in &entries {
            if e.sample.slot == 0 {
                // (2 * 1/3)^-0.4 is the batch max -> normalized to 1.
                assert_relative_eq!(e.importance_weight, 1.0, epsilon = 1e-12);
            } else {
                // (2 * 2/3)^-0.4 / (2 * 1/3)^-0.4 = 2^-0.4
                assert_relative_eq!(
                    e.importance_weight,
                    0.757858283255199,
                    epsilon = 1e-12
                );
            }
        }
        assert!(entries.iter().any(|e| e.sample.slot == 0));
        assert!(entries.iter().any(|e| e.sample.slot == 1));
    }

    #[test]
    fn presample_uniform_when_priorities_equal() {
        let mut buf = ReplayBuffer::new(4, 1, 0.5, 1e-6);
        for i in 0..4 {
            buf.push(raw(i));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let n = 40_000;
        let mut counts = [0u64; 4];
        for e in buf.presample(n, 0.4, &mut rng).unwrap() {
            counts[e.sample.slot] += 1;
        }
        let expect = n as f64 / 4.0;
        let sigma = (n as f64 * 0.25 * 0.75).sqrt();
        for &c in &counts {
            assert!((c as f64 - expect).abs() < 3.0 * sigma, "counts {counts:?}");
        }
    }

    #[test]
    fn presample_empty_buffer_errors() {
        let buf = ReplayBuffer::new(4, 1, 0.5, 1e-6);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(buf.presample(4, 0.4, &mut rng).is_err());
    }

    #[test]
    fn assignment_is_a_partition() {
        let mut buf = ReplayBuffer::new(64, 3, 0.5, 1e-6);
        for i in 0..32 {
            buf.push(raw(i));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let pre = buf.presample(24, 0.4, &mut rng).unwrap();
        let losses: Vec<Vec<f64>> = (0..24)
            .map(|j| vec![0.1 * j as f64, 0.2, 0.05 * j as f64])
            .collect();
        let pools = ReplayBuffer::assign_agency(&pre, &losses, 3, 0.8, &mut rng).unwrap();
        let mut seen: Vec<usize> = pools
            .iter()
            .flat_map(|p| p.iter().map(|&(j, _)| j))
            .collect();
        seen.sort_unstable();
        assert_eq!(seen, (0..24).collect::<Vec<_>>());
    }

    #[test]
    fn assignment_single_agent_takes_everything() {
        let pre = vec![
            PresampleEntry {
                sample: SampleRef { slot: 0, stamp: 0 },
                importance_weight: 1.0,
            };
            5
        ];
        let losses = vec![vec![0.3]; 5];
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let pools = ReplayBuffer::assign_agency(&pre, &losses, 1, 0.8, &mut rng).unwrap();
        assert_eq!(pools[0].len(), 5);
        assert!(pools[0].iter().all(|&(_, r)| r == 1.0));
    }

    #[test]
    fn assignment_frequencies_match_softmax() {
        // softmax(-[0.8, 1.6]/0.8) = [e^-1, e^-2] normalized.
        let pre = vec![
            PresampleEntry {
                sample: SampleRef { slot: 0, stamp: 0 },
                importance_weight: 1.0,
            };
            20_000
        ];
        let losses = vec![vec![0.8, 1.6]; 20_000];
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let pools = ReplayBuffer::assign_agency(&pre, &losses, 2, 0.8, &mut rng).unwrap();
        let p0 = 0.7310585786300049;
        let n = 20_000.0_f64;
        let sigma = (n * p0 * (1.0 - p0)).sqrt();
        assert!((pools[0].len() as f64 - n * p0).abs() < 3.0 * sigma);
    }

    #[test]
    fn assignment_uniform_when_losses_equal() {
        let trials = 30_000usize;
        let pre = vec![
            PresampleEntry {
                sample: SampleRef { slot: 0, stamp: 0 },
                importance_weight: 1.0,
            };
            trials
        ];
        let losses = vec![vec![0.37; 4]; trials];
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let pools = ReplayBuffer::assign_agency(&pre, &losses, 4, 0.8, &mut rng).unwrap();
        let expect = trials as f64 / 4.0;
        let sigma = (trials as f64 * 0.25 * 0.75).sqrt();
        for pool in &pools {
            assert!(
                (pool.len() as f64 - expect).abs() < 3.0 * sigma,
                "pool size {}",
                pool.len()
            );
        }
    }

    #[test]
    fn assignment_counts_pass_chi_square_against_exact_softmax() {
        // Five-agent fixture with a fixed loss row; 1e5 categorical draws.
        let trials = 100_000usize;
        let row = vec![0.2, 0.5, 0.8, 1.1, 1.4];
        let pre = vec![
            PresampleEntry {
                sample: SampleRef { slot: 0, stamp: 0 },
                importance_weight: 1.0,
            };
            trials
        ];
        let losses = vec![row.clone(); trials];
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let pools = ReplayBuffer::assign_agency(&pre, &losses, 5, 0.8, &mut rng).unwrap();
        let probs = crate::arbitration::compute_reliability(&row, 0.8).unwrap();
        let chi2: f64 = pools
            .iter()
            .zip(&probs)
            .map(|(pool, p)| {
                let expected = trials as f64 * p;
                let observed = pool.len() as f64;
                (observed - expected) * (observed - expected) / expected
            })
            .sum();
        // 4 degrees of freedom at significance 0.01.
        assert!(chi2 < 13.277, "chi2 {chi2}");
    }

    #[test]
    fn top_k_orders_by_reliability() {
        let mut buf = ReplayBuffer::new(8, 2, 0.5, 1e-6);
        for i in 0..3 {
            buf.push(raw(i));
        }
        let pre: Vec<PresampleEntry> = (0..3)
            .map(|slot| PresampleEntry {
                sample: SampleRef {
                    slot,
                    stamp: slot as u64,
                },
                importance_weight: 1.0,
            })
            .collect();
        let pools = vec![vec![(0, 0.9), (1, 0.5), (2, 0.7)], vec![]];
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let batches = buf
            .select_top_k(&pools, &pre, 2, TopKCriterion::Reliability, 0.8, 0.4, &mut rng)
            .unwrap();
        let rels: Vec<f64> = batches[0].entries.iter().map(|e| e.reliability).collect();
        assert_eq!(rels, vec![0.9, 0.7]);
        // Empty pool falls back to fresh prioritized draws of length k.
        assert_eq!(batches[1].entries.len(), 2);
    }

    #[test]
    fn top_k_pads_underfull_pool_from_itself() {
        let mut buf = ReplayBuffer::new(8, 1, 0.5, 1e-6);
        buf.push(raw(0));
        let pre = vec![PresampleEntry {
            sample: SampleRef { slot: 0, stamp: 0 },
            importance_weight: 1.0,
        }];
        let pools = vec![vec![(0, 0.6)]];
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let batches = buf
            .select_top_k(&pools, &pre, 4, TopKCriterion::Reliability, 0.8, 0.4, &mut rng)
            .unwrap();
        assert_eq!(batches[0].entries.len(), 4);
        assert!(batches[0].entries.iter().all(|e| e.sample.slot == 0));
    }

    #[test]
    fn top_k_smaller_pool_keeps_every_entry() {
        let mut buf = ReplayBuffer::new(8, 1, 0.5, 1e-6);
        for i in 0..2 {
            buf.push(raw(i));
        }
        let pre: Vec<PresampleEntry> = (0..2)
            .map(|slot| PresampleEntry {
                sample: SampleRef {
                    slot,
                    stamp: slot as u64,
                },
                importance_weight: 1.0,
            })
            .collect();
        let pools = vec![vec![(0, 0.4), (1, 0.4)]];
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let batches = buf
            .select_top_k(&pools, &pre, 5, TopKCriterion::Reliability, 0.8, 0.4, &mut rng)
            .unwrap();
        let mut slots: Vec<usize> = batches[0].entries.iter().map(|e| e.sample.slot).collect();
        slots.sort_unstable();
        slots.dedup();
        assert_eq!(slots, vec![0, 1]);
    }

    #[test]
    fn update_priorities_floor_and_mass_scaling() {
        let mut buf = ReplayBuffer::new(4, 2, 0.5, 1e-6);
        buf.push(raw(0));
        let s = SampleRef { slot: 0, stamp: 0 };
        buf.update_priorities(&[s], &[vec![0.0, 0.0]]).unwrap();
        assert_relative_eq!(buf.slot(0).priority, 1e-6, epsilon = 1e-18);

        buf.update_priorities(&[s], &[vec![1.0, 1.0]]).unwrap();
        let mass_before = buf.tree.mass(0);
        buf.update_priorities(&[s], &[vec![9.0, 9.0]]).unwrap();
        let mass_after = buf.tree.mass(0);
        assert_relative_eq!(mass_after / mass_before, 3.0, epsilon = 1e-5);
    }

    #[test]
    fn update_priorities_skips_stale_refs() {
        let mut buf = ReplayBuffer::new(1, 1, 0.5, 1e-6);
        buf.push(raw(0));
        buf.push(raw(1)); // evicts stamp 0
        let stale = SampleRef { slot: 0, stamp: 0 };
        buf.update_priorities(&[stale], &[vec![5.0]]).unwrap();
        assert_eq!(buf.stale_updates(), 1);
        assert_relative_eq!(buf.slot(0).priority, 1.0); // untouched
    }

    #[test]
    fn root_mass_matches_priority_sum_after_full_update() {
        let mut buf = ReplayBuffer::new(16, 2, 0.5, 1e-6);
        for i in 0..16 {
            buf.push(raw(i));
        }
        let samples: Vec<SampleRef> = (0..16)
            .map(|slot| SampleRef {
                slot,
                stamp: slot as u64,
            })
            .collect();
        let losses: Vec<Vec<f64>> = (0..16)
            .map(|i| vec![0.25 * i as f64, 0.5 * i as f64])
            .collect();
        buf.update_priorities(&samples, &losses).unwrap();
        let expect: f64 = (0..16)
            .map(|s| buf.slot(s).priority.powf(0.5))
            .sum();
        assert_relative_eq!(buf.total_mass(), expect, max_relative = 1e-9);
    }

    #[test]
    fn snapshot_roundtrip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("replay.bin");
        let mut buf = ReplayBuffer::new(3, 2, 0.5, 1e-6);
        for i in 0..5 {
            buf.push(raw(i));
        }
        buf.update_priorities(
            &[SampleRef { slot: 1, stamp: 4 }],
            &[vec![2.0, 3.0]],
        )
        .unwrap();
        buf.save(&path).unwrap();
        let loaded = ReplayBuffer::load(&path).unwrap();
        assert_eq!(loaded.len(), buf.len());
        assert_eq!(loaded.cursor, buf.cursor);
        assert_eq!(loaded.next_stamp, buf.next_stamp);
        for s in 0..buf.len() {
            assert_eq!(loaded.slot(s), buf.slot(s));
            assert_eq!(loaded.stamps[s], buf.stamps[s]);
        }
        assert_relative_eq!(loaded.total_mass(), buf.total_mass(), max_relative = 1e-12);
        assert_eq!(loaded.mean_loss(), buf.mean_loss());
    }

    #[test]
    fn snapshot_rejects_bad_magic() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bogus.bin");
        std::fs::write(&path, b"NOTMAGIC0000000000000000").unwrap();
        assert!(ReplayBuffer::load(&path).is_err());
    }

    proptest! {
        #[test]
        fn n_step_matches_brute_force(
            rewards in proptest::collection::vec(-10.0f64..10.0, 1..=10),
            discount in 0.05f64..0.999,
        ) {
            let got = compute_n_step(&rewards, discount).unwrap();
            let want: f64 = rewards
                .iter()
                .enumerate()
                .map(|(m, r)| discount.powi(m as i32) * r)
                .sum();
            prop_assert!((got - want).abs() <= 1e-9 * (1.0 + want.abs()));
        }

        #[test]
        fn tree_matches_linear_scan_on_random_ops(
            ops in proptest::collection::vec((0usize..32, 0.0f64..10.0), 1..120),
            queries in proptest::collection::vec(0.0f64..1.0, 20),
        ) {
            let mut tree = SumTree::new(32);
            let mut masses = vec![0.0f64; 32];
            for (ix, m) in ops {
                tree.set(ix, m);
                masses[ix] = m;
            }
            let total: f64 = masses.iter().sum();
            prop_assume!(total > 0.0);
            prop_assert!((tree.total() - total).abs() <= 1e-9 * total);
            for q in queries {
                let u = q * total * (1.0 - 1e-12);
                prop_assert_eq!(tree.find(u), linear_find(&masses, u));
            }
        }
    }
}
