//! Gridworld families on a block schedule of environmental contexts.
//!
//! A block fixes two context dimensions: which reward objective is active
//! and the probability that components of the executed action are randomly
//! perturbed. Dynamics never depend on the objective, so flipping it changes
//! rewards only — state trajectories under a fixed seed are identical.
//!
//! Actions live in an 18-way flat space combining an optional compass
//! direction (8 values) with a fire flag; indices 0 and 1 are the reserved
//! no-direction actions.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const N_DIRECTIONS: usize = 8;
pub const N_ACTIONS: usize = 2 + 2 * N_DIRECTIONS;

/// One contiguous schedule segment.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BlockSpec {
    /// Reward-objective flag: 0 = original, 1 = modified.
    pub objective: u8,
    /// Probability of perturbing each action component.
    pub epsilon: f64,
    /// Segment length in environment steps.
    pub length: u64,
}

impl BlockSpec {
    pub fn validate(&self) -> Result<()> {
        if self.objective > 1 {
            return Err(Error::invalid("objective flag must be 0 or 1"));
        }
        if !(0.0..=1.0).contains(&self.epsilon) {
            return Err(Error::invalid("epsilon must lie in [0, 1]"));
        }
        if self.length == 0 {
            return Err(Error::invalid("block length must be at least 1"));
        }
        Ok(())
    }
}

/// Ordered sequence of blocks; steps beyond the end stay in the final block.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockSchedule {
    pub blocks: Vec<BlockSpec>,
}

impl BlockSchedule {
    /// The five-block default: objective flips and rising randomness, with
    /// blocks 1 and 3 identical so retention after block 2 is observable.
    pub fn default_with_block_length(length: u64) -> Self {
        let spec = |objective, epsilon| BlockSpec {
            objective,
            epsilon,
            length,
        };
        BlockSchedule {
            blocks: vec![
                spec(0, 0.0),
                spec(1, 0.2),
                spec(0, 0.4),
                spec(1, 0.2),
                spec(1, 0.4),
            ],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.blocks.is_empty() {
            return Err(Error::invalid("schedule must contain at least one block"));
        }
        for b in &self.blocks {
            b.validate()?;
        }
        Ok(())
    }

    pub fn total_steps(&self) -> u64 {
        self.blocks.iter().map(|b| b.length).sum()
    }

    /// Maps a global step to its block; `length * k` is the first step of
    /// block k when lengths are equal.
    pub fn block_for_step(&self, global_step: u64) -> Result<(usize, BlockSpec)> {
        if self.blocks.is_empty() {
            return Err(Error::invalid("empty schedule"));
        }
        let mut start = 0u64;
        for (i, b) in self.blocks.iter().enumerate() {
            if global_step < start + b.length {
                return Ok((i, *b));
            }
            start += b.length;
        }
        Ok((self.blocks.len() - 1, *self.blocks.last().unwrap()))
    }
}

/// Decoded action: optional direction plus fire flag.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ActionCode {
    pub direction: Option<u8>,
    pub fire: bool,
}

impl ActionCode {
    pub fn index(self) -> usize {
        encode_action(self.direction, self.fire).expect("valid components")
    }
}

/// Flat index of a (direction, fire) pair: `d + 8f + 2`, with 0/1 reserved
/// for the no-direction actions.
pub fn encode_action(direction: Option<u8>, fire: bool) -> Result<usize> {
    match direction {
        None => Ok(fire as usize),
        Some(d) => {
            if d as usize >= N_DIRECTIONS {
                return Err(Error::invalid(format!("direction {d} out of range")));
            }
            Ok(d as usize + N_DIRECTIONS * fire as usize + 2)
        }
    }
}

pub fn decode_action(index: usize) -> Result<ActionCode> {
    if index >= N_ACTIONS {
        return Err(Error::invalid(format!(
            "action index {index} out of range for {N_ACTIONS} actions"
        )));
    }
    Ok(match index {
        0 => ActionCode {
            direction: None,
            fire: false,
        },
        1 => ActionCode {
            direction: None,
            fire: true,
        },
        _ => ActionCode {
            direction: Some(((index - 2) % N_DIRECTIONS) as u8),
            fire: index - 2 >= N_DIRECTIONS,
        },
    })
}

/// Independently resamples each action component with probability `epsilon`.
///
/// A resampled component may land on its original value, so the chance a
/// direction survives is `(1 - epsilon) + epsilon / 8`. Actions without a
/// direction keep having none; only the fire flag is perturbed.
pub fn perturb_action(code: ActionCode, epsilon: f64, rng: &mut impl Rng) -> ActionCode {
    let direction = match code.direction {
        Some(_) if rng.random_bool(epsilon) => Some(rng.random_range(0..N_DIRECTIONS as u8)),
        other => other,
    };
    let fire = if rng.random_bool(epsilon) {
        rng.random_bool(0.5)
    } else {
        code.fire
    };
    ActionCode { direction, fire }
}

/// Compass displacement of a direction index (N, NE, E, SE, S, SW, W, NW).
fn direction_delta(d: u8) -> (i32, i32) {
    match d {
        0 => (0, -1),
        1 => (1, -1),
        2 => (1, 0),
        3 => (1, 1),
        4 => (0, 1),
        5 => (-1, 1),
        6 => (-1, 0),
        7 => (-1, -1),
        _ => unreachable!("direction out of range"),
    }
}

/// The two desk-scale task families.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EnvFamily {
    /// Collect items and reach the goal (original) vs survive while ignoring
    /// items (modified).
    CollectGrid,
    /// Shoot approaching targets (original) vs evade them (modified).
    CorridorFire,
}

impl EnvFamily {
    pub fn n_states(self) -> usize {
        match self {
            // 5x5 agent cell x collected-items bitmask.
            EnvFamily::CollectGrid => GRID_SIDE * GRID_SIDE * (1 << N_ITEMS),
            // agent lane x target lane x target distance.
            EnvFamily::CorridorFire => N_LANES * N_LANES * (TARGET_START_DISTANCE + 1),
        }
    }
}

const GRID_SIDE: usize = 5;
const N_ITEMS: usize = 3;
const N_HAZARDS: usize = 2;
const EPISODE_LIMIT: u32 = 100;
const N_LANES: usize = 5;
const TARGET_START_DISTANCE: usize = 4;

#[derive(Debug, Clone)]
enum EnvState {
    Collect {
        agent: (i32, i32),
        items: [(i32, i32); N_ITEMS],
        hazards: [(i32, i32); N_HAZARDS],
        goal: (i32, i32),
        collected: u8,
    },
    Corridor {
        agent_lane: usize,
        target_lane: usize,
        distance: usize,
    },
}

/// A small discrete environment under a block context.
#[derive(Debug, Clone)]
pub struct GridEnv {
    family: EnvFamily,
    block: BlockSpec,
    state: Option<EnvState>,
    steps: u32,
    done: bool,
}

impl GridEnv {
    pub fn new(family: EnvFamily) -> Self {
        GridEnv {
            family,
            block: BlockSpec {
                objective: 0,
                epsilon: 0.0,
                length: 1,
            },
            state: None,
            steps: 0,
            done: true,
        }
    }

    pub fn family(&self) -> EnvFamily {
        self.family
    }

    pub fn n_states(&self) -> usize {
        self.family.n_states()
    }

    pub fn n_actions(&self) -> usize {
        N_ACTIONS
    }

    pub fn block(&self) -> BlockSpec {
        self.block
    }

    /// Swaps the active context; the episode in progress keeps its layout.
    pub fn set_block(&mut self, block: BlockSpec) {
        self.block = block;
    }

    pub fn is_done(&self) -> bool {
        self.done
    }

    /// Re-randomizes the layout from the rng stream and starts an episode.
    pub fn reset(&mut self, rng: &mut impl Rng) -> usize {
        self.state = Some(match self.family {
            EnvFamily::CollectGrid => {
                let cells =
                    sample_distinct_cells(rng, GRID_SIDE * GRID_SIDE, 2 + N_ITEMS + N_HAZARDS);
                let to_xy = |c: usize| ((c % GRID_SIDE) as i32, (c / GRID_SIDE) as i32);
                EnvState::Collect {
                    agent: to_xy(cells[0]),
                    goal: to_xy(cells[1]),
                    items: [to_xy(cells[2]), to_xy(cells[3]), to_xy(cells[4])],
                    hazards: [to_xy(cells[5]), to_xy(cells[6])],
                    collected: 0,
                }
            }
            EnvFamily::CorridorFire => EnvState::Corridor {
                agent_lane: rng.random_range(0..N_LANES),
                target_lane: rng.random_range(0..N_LANES),
                distance: TARGET_START_DISTANCE,
            },
        });
        self.steps = 0;
        self.done = false;
        self.observation()
    }

    /// Flat state index of the current configuration.
    ///
    /// CollectGrid: `(y * 5 + x) * 8 + collected_mask`. CorridorFire:
    /// `(agent_lane * 5 + target_lane) * 5 + distance`.
    pub fn observation(&self) -> usize {
        match self.state.as_ref().expect("reset before observing") {
            EnvState::Collect {
                agent, collected, ..
            } => {
                let cell = agent.1 as usize * GRID_SIDE + agent.0 as usize;
                cell * (1 << N_ITEMS) + *collected as usize
            }
            EnvState::Corridor {
                agent_lane,
                target_lane,
                distance,
            } => (agent_lane * N_LANES + target_lane) * (TARGET_START_DISTANCE + 1) + distance,
        }
    }

    /// Applies one action: perturbs it per the block's epsilon, advances the
    /// dynamics, and scores it under the block's objective.
    pub fn step(
        &mut self,
        action: usize,
        perturb_rng: &mut impl Rng,
        dynamics_rng: &mut impl Rng,
    ) -> Result<(usize, f64, bool)> {
        if self.done {
            return Err(Error::Precondition(
                "step called on a finished episode".into(),
            ));
        }
        let code = decode_action(action)?;
        let executed = perturb_action(code, self.block.epsilon, perturb_rng);
        let objective = self.block.objective;
        self.steps += 1;
        let limit_hit = self.steps >= EPISODE_LIMIT;

        let (reward, terminal) = match self.state.as_mut().expect("reset before stepping") {
            EnvState::Collect {
                agent,
                items,
                hazards,
                goal,
                collected,
            } => {
                if let Some(d) = executed.direction {
                    let (dx, dy) = direction_delta(d);
                    let nx = agent.0 + dx;
                    let ny = agent.1 + dy;
                    if (0..GRID_SIDE as i32).contains(&nx) && (0..GRID_SIDE as i32).contains(&ny) {
                        *agent = (nx, ny);
                    }
                }
                let mut reward = 0.0;
                let mut terminal = false;
                for (i, item) in items.iter().enumerate() {
                    if *agent == *item && *collected & (1 << i) == 0 {
                        *collected |= 1 << i;
                        if objective == 0 {
                            reward += 1.0;
                        }
                    }
                }
                if *agent == *goal {
                    terminal = true;
                    if objective == 0 {
                        reward += 5.0;
                    }
                } else if hazards.contains(agent) {
                    terminal = true;
                    if objective == 1 {
                        reward -= 1.0;
                    }
                }
                if objective == 1 && !terminal && !limit_hit {
                    reward += 0.01;
                }
                (reward, terminal)
            }
            EnvState::Corridor {
                agent_lane,
                target_lane,
                distance,
            } => {
                match executed.direction {
                    Some(2) if *agent_lane + 1 < N_LANES => *agent_lane += 1, // east
                    Some(6) if *agent_lane > 0 => *agent_lane -= 1,           // west
                    _ => {}
                }
                let mut reward = 0.0;
                let mut terminal = false;
                if executed.fire && *target_lane == *agent_lane && *distance > 0 {
                    if objective == 0 {
                        reward += 1.0;
                    }
                    *target_lane = dynamics_rng.random_range(0..N_LANES);
                    *distance = TARGET_START_DISTANCE;
                } else {
                    *distance -= 1;
                    if *distance == 0 {
                        if *target_lane == *agent_lane {
                            terminal = true; // collision, unrewarded under both objectives
                        } else {
                            if objective == 1 {
                                reward += 1.0;
                            }
                            *target_lane = dynamics_rng.random_range(0..N_LANES);
                            *distance = TARGET_START_DISTANCE;
                        }
                    }
                }
                if objective == 1 && !terminal && !limit_hit {
                    reward += 0.01;
                }
                (reward, terminal)
            }
        };

        self.done = terminal || limit_hit;
        Ok((self.observation(), reward, self.done))
    }
}

/// First `count` entries of a seeded partial shuffle of `0..n`.
fn sample_distinct_cells(rng: &mut impl Rng, n: usize, count: usize) -> Vec<usize> {
    let mut cells: Vec<usize> = (0..n).collect();
    for i in 0..count {
        let j = rng.random_range(i..n);
        cells.swap(i, j);
    }
    cells.truncate(count);
    cells
}
