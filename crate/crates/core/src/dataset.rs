//! Offline trajectory datasets: collection, validation and JSON-Lines I/O.
//!
//! A dataset file starts with one metadata object followed by one trajectory
//! object per line. Keys are written in a fixed order so identical datasets
//! serialize to identical bytes.

use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{DailError, Result};
use crate::gridworld::{Action, EnvConfig, EpisodeState, Gridworld, InstructionMapping, Observation};
use crate::rng::{self, Rng};

/// Consecutive failed random rollouts before a success slot switches to the
/// epsilon-expert.
pub const REJECTION_LIMIT: usize = 200;
/// Random-action probability of the fallback expert.
pub const FALLBACK_EPSILON: f64 = 0.3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Transition {
    pub obs: Observation,
    pub action: Action,
    pub reward: f64,
    pub next_obs: Observation,
    pub done: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Source {
    Random,
    EpsExpert,
    Expert,
    Policy,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub instruction_id: usize,
    pub success: bool,
    pub episode_return: f64,
    pub source: Source,
    pub transitions: Vec<Transition>,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.transitions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.transitions.is_empty()
    }

    fn validate(&self, max_step: usize) -> std::result::Result<(), String> {
        let t = self.transitions.len();
        if t == 0 || t > max_step {
            return Err(format!("trajectory length {t} outside [1, {max_step}]"));
        }
        for (i, tr) in self.transitions.iter().enumerate() {
            let last = i + 1 == t;
            if tr.done != last {
                return Err(format!("transition {i}: done flag must mark only the last transition"));
            }
            if !(tr.reward == 0.0 || (tr.reward > 0.1 - 1e-12 && tr.reward <= 1.0)) {
                return Err(format!("transition {i}: reward {} out of range", tr.reward));
            }
            if tr.reward > 0.0 && !last {
                return Err(format!("transition {i}: nonzero reward before the end"));
            }
        }
        let last_reward = self.transitions[t - 1].reward;
        if self.success != (last_reward > 0.0) {
            return Err("success flag disagrees with the final reward".into());
        }
        let total: f64 = self.transitions.iter().map(|tr| tr.reward).sum();
        if total != self.episode_return {
            return Err("episode_return disagrees with the rewards".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SourceMix {
    pub random: usize,
    pub eps_expert: usize,
    pub expert: usize,
    pub policy: usize,
}

impl SourceMix {
    fn count(trajectories: &[Trajectory]) -> Self {
        let mut mix = SourceMix::default();
        for t in trajectories {
            match t.source {
                Source::Random => mix.random += 1,
                Source::EpsExpert => mix.eps_expert += 1,
                Source::Expert => mix.expert += 1,
                Source::Policy => mix.policy += 1,
            }
        }
        mix
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetMeta {
    pub num_instructions: usize,
    pub mapping_seed: u64,
    pub collection_seed: u64,
    pub n_traj: usize,
    pub success_ratio: f64,
    /// Instruction ids were assigned round-robin, so per-instruction counts
    /// differ by at most one.
    pub balanced: bool,
    pub source_mix: SourceMix,
    pub env: EnvConfig,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OfflineDataset {
    pub meta: DatasetMeta,
    pub trajectories: Vec<Trajectory>,
}

impl OfflineDataset {
    pub fn len(&self) -> usize {
        self.trajectories.len()
    }

    pub fn is_empty(&self) -> bool {
        self.trajectories.is_empty()
    }

    pub fn num_transitions(&self) -> usize {
        self.trajectories.iter().map(|t| t.len()).sum()
    }

    pub fn success_count(&self) -> usize {
        self.trajectories.iter().filter(|t| t.success).count()
    }

    pub fn instruction_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.meta.num_instructions];
        for t in &self.trajectories {
            if let Some(c) = counts.get_mut(t.instruction_id) {
                *c += 1;
            }
        }
        counts
    }

    /// Checks every trajectory and the metadata against each other.
    pub fn validate(&self) -> Result<()> {
        self.meta.env.validate().map_err(|e| DailError::Schema(e.to_string()))?;
        if self.meta.n_traj != self.trajectories.len() {
            return Err(DailError::Schema(format!(
                "metadata announces {} trajectories, found {}",
                self.meta.n_traj,
                self.trajectories.len()
            )));
        }
        for (i, t) in self.trajectories.iter().enumerate() {
            if t.instruction_id >= self.meta.num_instructions {
                return Err(DailError::Schema(format!(
                    "trajectory {i}: instruction {} >= num_instructions {}",
                    t.instruction_id, self.meta.num_instructions
                )));
            }
            t.validate(self.meta.env.max_step)
                .map_err(|m| DailError::Schema(format!("trajectory {i}: {m}")))?;
        }
        if !self.trajectories.is_empty() {
            let realized = self.success_count() as f64 / self.trajectories.len() as f64;
            if realized != self.meta.success_ratio {
                return Err(DailError::Schema(format!(
                    "metadata success_ratio {} but realized {realized}",
                    self.meta.success_ratio
                )));
            }
        }
        if SourceMix::count(&self.trajectories) != self.meta.source_mix {
            return Err(DailError::Schema("source_mix disagrees with trajectories".into()));
        }
        Ok(())
    }

    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        // serde_json output for these types cannot fail
        let _ = writeln!(out, "{}", serde_json::to_string(&self.meta).unwrap_or_default());
        for t in &self.trajectories {
            let _ = writeln!(out, "{}", serde_json::to_string(t).unwrap_or_default());
        }
        out
    }

    pub fn from_jsonl(text: &str, path: &Path) -> Result<Self> {
        let parse_err = |line: usize, msg: String| DailError::Parse {
            path: path.to_path_buf(),
            line,
            msg,
        };
        let mut lines = text.lines().enumerate();
        let meta = match lines.next() {
            Some((_, l)) => serde_json::from_str::<DatasetMeta>(l).map_err(|e| parse_err(1, e.to_string()))?,
            None => return Err(parse_err(1, "missing metadata line".into())),
        };
        let mut trajectories = Vec::new();
        for (i, line) in lines {
            if line.trim().is_empty() {
                continue;
            }
            let t: Trajectory = serde_json::from_str(line).map_err(|e| parse_err(i + 1, e.to_string()))?;
            trajectories.push(t);
        }
        let ds = OfflineDataset { meta, trajectories };
        ds.validate()?;
        Ok(ds)
    }
}

pub fn save(dataset: &OfflineDataset, path: &Path) -> Result<()> {
    std::fs::write(path, dataset.to_jsonl()).map_err(|e| DailError::io(path, e))
}

pub fn load(path: &Path) -> Result<OfflineDataset> {
    let text = std::fs::read_to_string(path).map_err(|e| DailError::io(path, e))?;
    OfflineDataset::from_jsonl(&text, path)
}

/// Something that picks actions during a rollout. Agents see the state
/// through [`EpisodeState::observation`] and their own history only;
/// scripted bots may use the full state.
pub trait Policy {
    fn begin_episode(&mut self, _instruction_id: usize) -> Result<()> {
        Ok(())
    }

    fn act(&mut self, env: &Gridworld, state: &EpisodeState, rng: &mut Rng) -> Result<Action>;

    /// Called after every step with the observation the action was taken in.
    fn observe(&mut self, _obs: &Observation, _action: Action) -> Result<()> {
        Ok(())
    }

    /// True when `act` ignores the rng, so repeated episodes of the same
    /// instruction are identical.
    fn is_deterministic(&self) -> bool {
        false
    }
}

pub struct RandomPolicy;

impl Policy for RandomPolicy {
    fn act(&mut self, _env: &Gridworld, _state: &EpisodeState, rng: &mut Rng) -> Result<Action> {
        Action::from_index(rng.random_range(0..Action::ALL.len()))
    }
}

pub struct ExpertPolicy;

impl Policy for ExpertPolicy {
    fn act(&mut self, env: &Gridworld, state: &EpisodeState, _rng: &mut Rng) -> Result<Action> {
        env.expert_action(state)
    }

    fn is_deterministic(&self) -> bool {
        true
    }
}

/// Expert that takes a uniformly random action with probability `epsilon`.
pub struct EpsilonExpert {
    pub epsilon: f64,
}

impl Policy for EpsilonExpert {
    fn act(&mut self, env: &Gridworld, state: &EpisodeState, rng: &mut Rng) -> Result<Action> {
        if rng.random::<f64>() < self.epsilon {
            return Action::from_index(rng.random_range(0..Action::ALL.len()));
        }
        // off the optimal path the goal may be out of reach; act randomly then
        match env.expert_action(state) {
            Ok(a) => Ok(a),
            Err(DailError::NoPath) => Action::from_index(rng.random_range(0..Action::ALL.len())),
            Err(e) => Err(e),
        }
    }
}

/// Always the same action.
pub struct ConstantPolicy(pub Action);

impl Policy for ConstantPolicy {
    fn act(&mut self, _env: &Gridworld, _state: &EpisodeState, _rng: &mut Rng) -> Result<Action> {
        Ok(self.0)
    }

    fn is_deterministic(&self) -> bool {
        true
    }
}

/// Runs `policy` from reset until the episode ends.
pub fn rollout(
    env: &Gridworld,
    mapping: &InstructionMapping,
    instruction_id: usize,
    policy: &mut dyn Policy,
    rng: &mut Rng,
    source: Source,
) -> Result<Trajectory> {
    let mut state = env.reset(mapping, instruction_id)?;
    policy.begin_episode(instruction_id)?;
    let mut transitions = Vec::with_capacity(env.config().max_step);
    loop {
        let obs = state.observation();
        let action = policy.act(env, &state, rng)?;
        let out = env.step(&state, action)?;
        policy.observe(&obs, action)?;
        transitions.push(Transition {
            obs,
            action,
            reward: out.reward,
            next_obs: out.state.observation(),
            done: out.done,
        });
        state = out.state;
        if out.done {
            break;
        }
    }
    let success = transitions.last().is_some_and(|t| t.reward > 0.0);
    let episode_return = transitions.iter().map(|t| t.reward).sum();
    Ok(Trajectory {
        instruction_id,
        success,
        episode_return,
        source,
        transitions,
    })
}

/// Dataset size used by the instruction-count sweep: 64 trajectories per
/// instruction up to 8 instructions, 1024 beyond.
pub fn default_dataset_size(num_instructions: usize) -> usize {
    if num_instructions <= 8 {
        64 * num_instructions
    } else {
        1024
    }
}

fn success_rollout(env: &Gridworld, mapping: &InstructionMapping, id: usize, rng: &mut Rng) -> Result<Trajectory> {
    for _ in 0..REJECTION_LIMIT {
        let t = rollout(env, mapping, id, &mut RandomPolicy, rng, Source::Random)?;
        if t.success {
            return Ok(t);
        }
    }
    let mut eps = EpsilonExpert {
        epsilon: FALLBACK_EPSILON,
    };
    loop {
        let t = rollout(env, mapping, id, &mut eps, rng, Source::EpsExpert)?;
        if t.success {
            return Ok(t);
        }
    }
}

fn failure_rollout(env: &Gridworld, mapping: &InstructionMapping, id: usize, rng: &mut Rng) -> Result<Trajectory> {
    // random rollouts fail far more often than not on valid layouts
    for _ in 0..100_000 {
        let t = rollout(env, mapping, id, &mut RandomPolicy, rng, Source::Random)?;
        if !t.success {
            return Ok(t);
        }
    }
    Err(DailError::invalid(format!("instruction {id}: random rollouts never fail")))
}

/// Mixed-quality dataset with exactly `round(success_ratio * n_traj)`
/// successful trajectories.
///
/// Successes come from rejection-sampled random rollouts, with an
/// epsilon-expert fallback after [`REJECTION_LIMIT`] misses; failures are
/// random rollouts that missed the goal. Instruction ids are dealt
/// round-robin and the final order is shuffled. Each slot draws from its own
/// stream derived from `collection_seed`, so collection runs in parallel
/// without affecting the result.
pub fn collect_mixed(
    env: &Gridworld,
    mapping: &InstructionMapping,
    n_traj: usize,
    success_ratio: f64,
    collection_seed: u64,
) -> Result<OfflineDataset> {
    if !(0.0..=1.0).contains(&success_ratio) {
        return Err(DailError::invalid(format!("success_ratio must lie in [0, 1], got {success_ratio}")));
    }
    if n_traj == 0 {
        return Err(DailError::invalid("n_traj must be >= 1"));
    }
    let n_success = (success_ratio * n_traj as f64).round() as usize;
    let num_instructions = mapping.num_instructions();
    // slot i < n_success is a success slot; ids continue round-robin across
    // the two groups so per-instruction totals stay balanced
    let slots: Vec<(usize, bool)> = (0..n_traj).map(|i| (i % num_instructions, i < n_success)).collect();
    let mut trajectories = slots
        .par_iter()
        .enumerate()
        .map(|(i, &(id, success))| {
            let mut r = rng::derived(collection_seed, i as u64);
            if success {
                success_rollout(env, mapping, id, &mut r)
            } else {
                failure_rollout(env, mapping, id, &mut r)
            }
        })
        .collect::<Result<Vec<_>>>()?;
    trajectories.shuffle(&mut rng::seeded(collection_seed));
    let meta = DatasetMeta {
        num_instructions,
        mapping_seed: mapping.seed,
        collection_seed,
        n_traj,
        success_ratio: n_success as f64 / n_traj as f64,
        balanced: true,
        source_mix: SourceMix::count(&trajectories),
        env: env.config().clone(),
    };
    Ok(OfflineDataset { meta, trajectories })
}

/// Expert demonstrations, instructions dealt round-robin.
pub fn collect_expert(
    env: &Gridworld,
    mapping: &InstructionMapping,
    n_traj: usize,
    collection_seed: u64,
) -> Result<OfflineDataset> {
    if n_traj == 0 {
        return Err(DailError::invalid("n_traj must be >= 1"));
    }
    let mut r = rng::seeded(collection_seed);
    let trajectories = (0..n_traj)
        .map(|i| rollout(env, mapping, i % mapping.num_instructions(), &mut ExpertPolicy, &mut r, Source::Expert))
        .collect::<Result<Vec<_>>>()?;
    let successes = trajectories.iter().filter(|t| t.success).count();
    let meta = DatasetMeta {
        num_instructions: mapping.num_instructions(),
        mapping_seed: mapping.seed,
        collection_seed,
        n_traj,
        success_ratio: successes as f64 / n_traj as f64,
        balanced: true,
        source_mix: SourceMix::count(&trajectories),
        env: env.config().clone(),
    };
    Ok(OfflineDataset { meta, trajectories })
}
