//! The distributional, conservative, alignment-regularized agent and its
//! offline training loop.

mod network;

pub use network::{NetworkDims, NetworkLayout, PolicyNetwork};

use std::path::Path;
use std::rc::Rc;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::alignment::{self, AlignmentItem};
use crate::analysis::{self, EpochMetrics, RunMetrics};
use crate::dataset::{OfflineDataset, Policy, Trajectory, Transition};
use crate::distributional::{self, CategoricalDistribution, Support};
use crate::error::{DailError, Result};
use crate::gridworld::{make_mapping, Action, EnvConfig, EpisodeState, Gridworld, Observation, NUM_ACTIONS};
use crate::rng::{self, Rng};
use crate::tensor::{AdamConfig, NodeId, ParamStore, Tape};

fn d_lr() -> f64 {
    3e-4
}
fn d_batch() -> usize {
    64
}
fn d_lambda() -> f64 {
    0.2
}
fn d_alpha() -> f64 {
    2.0
}
fn d_gamma() -> f64 {
    0.99
}
fn d_atoms() -> usize {
    51
}
fn d_v_min() -> f64 {
    -20.0
}
fn d_v_max() -> f64 {
    20.0
}
fn d_k_update() -> u64 {
    1000
}
fn d_epochs() -> usize {
    20
}
fn d_feature_dim() -> usize {
    64
}
fn d_true() -> bool {
    true
}
fn d_eval_episodes() -> usize {
    100
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Hyperparams {
    #[serde(default = "d_lr")]
    pub lr: f64,
    #[serde(default = "d_batch")]
    pub batch: usize,
    /// Weight of the alignment loss.
    #[serde(default = "d_lambda")]
    pub lambda: f64,
    /// Weight of the conservative penalty.
    #[serde(default = "d_alpha")]
    pub alpha: f64,
    #[serde(default = "d_gamma")]
    pub gamma: f64,
    #[serde(default = "d_atoms")]
    pub atoms: usize,
    #[serde(default = "d_v_min")]
    pub v_min: f64,
    #[serde(default = "d_v_max")]
    pub v_max: f64,
    /// Gradient steps between target-network copies.
    #[serde(default = "d_k_update")]
    pub k_update: u64,
    #[serde(default = "d_epochs")]
    pub epochs: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "d_feature_dim")]
    pub feature_dim: usize,
    /// Off: squared TD error on expected Q instead of the categorical loss.
    #[serde(default = "d_true")]
    pub distributional: bool,
    #[serde(default = "d_true")]
    pub alignment: bool,
    /// Pick the bootstrap action with the target network (true) or the
    /// online network (false).
    #[serde(default = "d_true")]
    pub target_greedy: bool,
    /// Episodes per end-of-epoch evaluation; 0 skips evaluation.
    #[serde(default = "d_eval_episodes")]
    pub eval_episodes: usize,
}

impl Default for Hyperparams {
    fn default() -> Self {
        Hyperparams {
            lr: d_lr(),
            batch: d_batch(),
            lambda: d_lambda(),
            alpha: d_alpha(),
            gamma: d_gamma(),
            atoms: d_atoms(),
            v_min: d_v_min(),
            v_max: d_v_max(),
            k_update: d_k_update(),
            epochs: d_epochs(),
            seed: 0,
            feature_dim: d_feature_dim(),
            distributional: true,
            alignment: true,
            target_greedy: true,
            eval_episodes: d_eval_episodes(),
        }
    }
}

impl Hyperparams {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(DailError::invalid(m.to_string()));
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad("lr must be positive");
        }
        if self.batch == 0 {
            return bad("batch must be >= 1");
        }
        if !(self.lambda >= 0.0 && self.alpha >= 0.0) {
            return bad("lambda and alpha must be >= 0");
        }
        if !(0.0..=1.0).contains(&self.gamma) {
            return bad("gamma must lie in [0, 1]");
        }
        if self.k_update == 0 {
            return bad("k_update must be >= 1");
        }
        if self.feature_dim == 0 {
            return bad("feature_dim must be >= 1");
        }
        Support::new(self.v_min, self.v_max, self.atoms)?;
        Ok(())
    }

    pub fn support(&self) -> Result<Support> {
        Support::new(self.v_min, self.v_max, self.atoms)
    }

    /// Short label used in sweep tables.
    pub fn algorithm_name(&self) -> &'static str {
        match (self.distributional, self.alignment) {
            (true, true) => "dail",
            (false, false) => "baseline",
            (true, false) => "distributional",
            (false, true) => "alignment",
        }
    }
}

pub const MODEL_FILE: &str = "model.ckpt";
pub const TARGET_FILE: &str = "target.ckpt";
pub const SIDECAR_FILE: &str = "agent.json";

/// JSON written next to the checkpoints.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AgentSidecar {
    pub hyperparams: Hyperparams,
    pub dims: NetworkDims,
    pub num_instructions: usize,
    pub mapping_seed: u64,
    pub env: EnvConfig,
}

/// Online and target parameters plus everything needed to rebuild them.
#[derive(Debug, Clone)]
pub struct DailAgent {
    pub online: PolicyNetwork,
    pub target: ParamStore,
    pub hp: Hyperparams,
    pub support: Support,
    pub num_instructions: usize,
    pub mapping_seed: u64,
}

/// Loss components of one batch.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LossBreakdown {
    pub dist: f64,
    pub c: f64,
    pub cql: f64,
    pub tot: f64,
}

/// Bootstrap target of one transition, fixed while the online network is
/// differentiated.
#[derive(Debug, Clone)]
enum TdTarget {
    Dist(Vec<f64>),
    Value(f64),
}

struct LossNodes {
    dist: NodeId,
    c: NodeId,
    cql: NodeId,
    tot: NodeId,
}

impl DailAgent {
    pub fn new(hp: Hyperparams, env: &EnvConfig, num_instructions: usize, mapping_seed: u64) -> Result<Self> {
        hp.validate()?;
        let dims = NetworkDims {
            grid_width: env.width,
            obs_dim: env.obs_dim(),
            num_instructions,
            feature_dim: hp.feature_dim,
            num_actions: NUM_ACTIONS,
            atoms: hp.atoms,
        };
        let online = PolicyNetwork::new(dims, &mut rng::derived(hp.seed, 0))?;
        Self::from_parts(hp, online, None, mapping_seed)
    }

    /// Assembles an agent around existing parameters; `target` defaults to a
    /// copy of the online parameters.
    pub fn from_parts(hp: Hyperparams, online: PolicyNetwork, target: Option<ParamStore>, mapping_seed: u64) -> Result<Self> {
        hp.validate()?;
        let support = hp.support()?;
        if online.dims().atoms != support.len() || online.dims().feature_dim != hp.feature_dim {
            return Err(DailError::invalid("network dimensions disagree with hyperparameters"));
        }
        let target = match target {
            Some(t) => {
                online.params.check_same_layout(&t)?;
                t
            }
            None => online.params.clone(),
        };
        Ok(DailAgent {
            num_instructions: online.dims().num_instructions,
            online,
            target,
            hp,
            support,
            mapping_seed,
        })
    }

    pub fn dims(&self) -> NetworkDims {
        self.online.dims()
    }

    /// Writes both checkpoints and the sidecar into `dir`.
    pub fn save(&self, dir: &Path, env: &EnvConfig) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| DailError::io(dir, e))?;
        self.online.params.save(&dir.join(MODEL_FILE))?;
        self.target.save(&dir.join(TARGET_FILE))?;
        let sidecar = AgentSidecar {
            hyperparams: self.hp.clone(),
            dims: self.dims(),
            num_instructions: self.num_instructions,
            mapping_seed: self.mapping_seed,
            env: env.clone(),
        };
        let path = dir.join(SIDECAR_FILE);
        let text = serde_json::to_string_pretty(&sidecar).map_err(|e| DailError::Schema(e.to_string()))?;
        std::fs::write(&path, text + "\n").map_err(|e| DailError::io(&path, e))
    }

    /// Loads an agent written by [`save`](Self::save), with its environment.
    pub fn load(dir: &Path) -> Result<(Self, EnvConfig)> {
        let path = dir.join(SIDECAR_FILE);
        let text = std::fs::read_to_string(&path).map_err(|e| DailError::io(&path, e))?;
        let sidecar: AgentSidecar =
            serde_json::from_str(&text).map_err(|e| DailError::Schema(format!("{}: {e}", path.display())))?;
        let online = PolicyNetwork::from_params(sidecar.dims, ParamStore::load(&dir.join(MODEL_FILE))?)?;
        let target = ParamStore::load(&dir.join(TARGET_FILE))?;
        let agent = Self::from_parts(sidecar.hyperparams, online, Some(target), sidecar.mapping_seed)?;
        Ok((agent, sidecar.env))
    }

    pub fn sync_target(&mut self) -> Result<()> {
        self.target.copy_values_from(&self.online.params)
    }

    /// Per-action return distributions at one decision point.
    pub fn forward(&self, obs: &Observation, instruction_id: usize, history: &[f64]) -> Result<Vec<CategoricalDistribution>> {
        let logits = self.online.logits(obs, instruction_id, history)?;
        split_distributions(self.support, &logits)
    }

    /// Same as [`forward`](Self::forward) under the target parameters.
    pub fn forward_target(&self, obs: &Observation, instruction_id: usize, history: &[f64]) -> Result<Vec<CategoricalDistribution>> {
        let logits = self.online.layout.logits(&self.target, obs, instruction_id, history)?;
        split_distributions(self.support, &logits)
    }

    pub fn select_action(&self, obs: &Observation, instruction_id: usize, history: &[f64]) -> Result<Action> {
        let q = q_values(&self.forward(obs, instruction_id, history)?);
        Action::from_index(argmax(&q))
    }

    /// Target-network history `x_t` after each prefix of `transitions`.
    fn histories(&self, params: &ParamStore, transitions: &[Transition]) -> Result<Vec<Vec<f64>>> {
        let mut tape = Tape::new();
        let hs = alignment::stream_prefixes(&self.online.layout, params, &mut tape, transitions)?;
        Ok(hs.into_iter().map(|h| tape.value(h).to_vec()).collect())
    }

    /// Projected categorical target for `transition` given the history after
    /// it. No gradient flows through the result.
    pub fn build_td_target(&self, transition: &Transition, instruction_id: usize, history_next: &[f64]) -> Result<CategoricalDistribution> {
        if transition.done {
            return Ok(self.support.point_mass(transition.reward));
        }
        let next = self.bootstrap(&transition.next_obs, instruction_id, history_next, history_next)?;
        distributional::project_target(transition.reward, self.hp.gamma, &next, false)
    }

    /// Target distribution at the greedy next action. `online_history` is
    /// only used when the online network chooses the action.
    fn bootstrap(
        &self,
        next_obs: &Observation,
        instruction_id: usize,
        target_history: &[f64],
        online_history: &[f64],
    ) -> Result<CategoricalDistribution> {
        let dists = self.forward_target(next_obs, instruction_id, target_history)?;
        let a = if self.hp.target_greedy {
            argmax(&q_values(&dists))
        } else {
            argmax(&q_values(&self.forward(next_obs, instruction_id, online_history)?))
        };
        Ok(dists.into_iter().nth(a).unwrap_or_else(|| CategoricalDistribution::uniform(self.support)))
    }

    fn td_targets(&self, traj: &Trajectory) -> Result<Vec<TdTarget>> {
        let target_h = self.histories(&self.target, &traj.transitions)?;
        let online_h = if self.hp.target_greedy {
            None
        } else {
            Some(self.histories(&self.online.params, &traj.transitions)?)
        };
        let id = traj.instruction_id;
        traj.transitions
            .iter()
            .enumerate()
            .map(|(t, tr)| {
                if self.hp.distributional {
                    let dist = if tr.done {
                        self.support.point_mass(tr.reward)
                    } else {
                        let oh = online_h.as_ref().map_or(&target_h[t + 1], |h| &h[t + 1]);
                        let next = self.bootstrap(&tr.next_obs, id, &target_h[t + 1], oh)?;
                        distributional::project_target(tr.reward, self.hp.gamma, &next, false)?
                    };
                    Ok(TdTarget::Dist(dist.into_probs()))
                } else {
                    let y = if tr.done {
                        tr.reward
                    } else {
                        let q = q_values(&self.forward_target(&tr.next_obs, id, &target_h[t + 1])?);
                        let a = match &online_h {
                            None => argmax(&q),
                            Some(h) => argmax(&q_values(&self.forward(&tr.next_obs, id, &h[t + 1])?)),
                        };
                        tr.reward + self.hp.gamma * q[a]
                    };
                    Ok(TdTarget::Value(y))
                }
            })
            .collect()
    }

    /// Records the batch loss under `params` (same layout as the online
    /// network) with precomputed targets.
    fn loss_graph(
        &self,
        params: &ParamStore,
        tape: &mut Tape,
        batch: &[&Trajectory],
        targets: &[Vec<TdTarget>],
    ) -> Result<LossNodes> {
        let layout = &self.online.layout;
        let m = self.support.len();
        let atoms: Rc<[f64]> = Rc::from(self.support.atoms());
        let b = batch.len() as f64;
        let mut dist_terms = Vec::new();
        let mut cql_terms = Vec::new();
        let mut items = Vec::with_capacity(batch.len());
        for (traj, tgt) in batch.iter().zip(targets) {
            if traj.transitions.is_empty() {
                return Err(DailError::invalid("empty trajectory in batch"));
            }
            let w = 1.0 / (b * traj.len() as f64);
            let hs = alignment::stream_prefixes(layout, params, tape, &traj.transitions)?;
            let instr = layout.instruction(tape, params, traj.instruction_id)?;
            for (t, tr) in traj.transitions.iter().enumerate() {
                let o = layout.encode_obs(tape, params, &tr.obs)?;
                let logits = layout.head(tape, params, o, instr, hs[t])?;
                let a = tr.action.index();
                let q = tape.expectations(logits, atoms.clone())?;
                let lse = tape.log_sum_exp(q)?;
                let qa = tape.pick(q, a)?;
                cql_terms.push((lse, w));
                cql_terms.push((qa, -w));
                match &tgt[t] {
                    TdTarget::Dist(p) => dist_terms.push((tape.kl_div(logits, a * m, p)?, w)),
                    TdTarget::Value(y) => dist_terms.push((tape.squared_error(qa, *y), w)),
                }
            }
            items.push(AlignmentItem {
                trajectory: hs[hs.len() - 1],
                instruction: instr,
                instruction_id: traj.instruction_id,
            });
        }
        let dist = tape.weighted_sum(&dist_terms);
        let cql = tape.weighted_sum(&cql_terms);
        let c = if self.hp.alignment {
            match alignment::nce_loss_node(tape, &items) {
                Ok(n) => n,
                Err(DailError::NoNegatives) => tape.leaf(vec![0.0]),
                Err(e) => return Err(e),
            }
        } else {
            tape.leaf(vec![0.0])
        };
        let tot = tape.weighted_sum(&[(dist, 1.0), (c, self.hp.lambda), (cql, self.hp.alpha)]);
        Ok(LossNodes { dist, c, cql, tot })
    }

    fn batch_targets(&self, batch: &[&Trajectory]) -> Result<Vec<Vec<TdTarget>>> {
        batch.iter().map(|t| self.td_targets(t)).collect()
    }

    /// Loss components on `batch` without touching gradients.
    pub fn total_loss(&self, batch: &[&Trajectory]) -> Result<LossBreakdown> {
        self.check_batch(batch)?;
        let targets = self.batch_targets(batch)?;
        let mut tape = Tape::new();
        let n = self.loss_graph(&self.online.params, &mut tape, batch, &targets)?;
        Ok(LossBreakdown {
            dist: tape.scalar(n.dist),
            c: tape.scalar(n.c),
            cql: tape.scalar(n.cql),
            tot: tape.scalar(n.tot),
        })
    }

    /// Records the total loss for `batch` on `tape` under `params`, with the
    /// targets taken from the current agent. Used for gradient checking.
    pub fn record_total_loss(&self, params: &ParamStore, tape: &mut Tape, batch: &[&Trajectory]) -> Result<NodeId> {
        self.check_batch(batch)?;
        let targets = self.batch_targets(batch)?;
        Ok(self.loss_graph(params, tape, batch, &targets)?.tot)
    }

    fn check_batch(&self, batch: &[&Trajectory]) -> Result<()> {
        if batch.is_empty() {
            return Err(DailError::invalid("empty batch"));
        }
        for t in batch {
            if t.instruction_id >= self.num_instructions {
                return Err(DailError::UnknownInstruction {
                    id: t.instruction_id,
                    count: self.num_instructions,
                });
            }
        }
        Ok(())
    }

    /// One Adam step on `batch`; returns the loss before the update.
    pub fn train_step(&mut self, batch: &[&Trajectory], step: u64) -> Result<LossBreakdown> {
        self.check_batch(batch)?;
        let targets = self.batch_targets(batch)?;
        let mut tape = Tape::new();
        let n = self.loss_graph(&self.online.params, &mut tape, batch, &targets)?;
        let out = LossBreakdown {
            dist: tape.scalar(n.dist),
            c: tape.scalar(n.c),
            cql: tape.scalar(n.cql),
            tot: tape.scalar(n.tot),
        };
        self.online.params.zero_grad();
        tape.backward(n.tot, &mut self.online.params)?;
        self.online.params.adam_step(AdamConfig::with_lr(self.hp.lr), step)?;
        Ok(out)
    }

    /// Greedy rollout policy for one instruction at a time.
    pub fn policy(&self) -> GreedyPolicy<'_> {
        GreedyPolicy {
            agent: self,
            instruction_id: 0,
            history: self.online.zero_history(),
        }
    }
}

fn split_distributions(support: Support, logits: &[f64]) -> Result<Vec<CategoricalDistribution>> {
    let m = support.len();
    if logits.len() % m != 0 || logits.is_empty() {
        return Err(DailError::Shape(format!("{} logits for {m} atoms", logits.len())));
    }
    logits.chunks(m).map(|c| CategoricalDistribution::from_logits(support, c)).collect()
}

pub fn q_values(dists: &[CategoricalDistribution]) -> Vec<f64> {
    dists.iter().map(distributional::expectation).collect()
}

/// Index of the largest value; the lowest index wins ties.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate() {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

/// `logsumexp(q) - q[action]`.
pub fn cql_penalty(q: &[f64], dataset_action: usize) -> Result<f64> {
    let qa = *q.get(dataset_action).ok_or(DailError::Index {
        what: "action",
        index: dataset_action,
        len: q.len(),
    })?;
    Ok(crate::tensor::logsumexp(q)? - qa)
}

/// Acts greedily and keeps its own running history embedding.
pub struct GreedyPolicy<'a> {
    agent: &'a DailAgent,
    instruction_id: usize,
    history: Vec<f64>,
}

impl GreedyPolicy<'_> {
    pub fn history(&self) -> &[f64] {
        &self.history
    }
}

impl Policy for GreedyPolicy<'_> {
    fn begin_episode(&mut self, instruction_id: usize) -> Result<()> {
        if instruction_id >= self.agent.num_instructions {
            return Err(DailError::UnknownInstruction {
                id: instruction_id,
                count: self.agent.num_instructions,
            });
        }
        self.instruction_id = instruction_id;
        self.history = self.agent.online.zero_history();
        Ok(())
    }

    fn act(&mut self, _env: &Gridworld, state: &EpisodeState, _rng: &mut Rng) -> Result<Action> {
        self.agent.select_action(&state.observation(), self.instruction_id, &self.history)
    }

    fn observe(&mut self, obs: &Observation, action: Action) -> Result<()> {
        let mut tape = Tape::new();
        let h = tape.leaf(std::mem::take(&mut self.history));
        let h = self.agent.online.extend_history(&mut tape, h, obs, action)?;
        self.history = tape.value(h).to_vec();
        Ok(())
    }

    fn is_deterministic(&self) -> bool {
        true
    }
}

/// Number of gradient steps in one pass over `n` trajectories.
pub fn steps_per_epoch(n: usize, batch: usize) -> usize {
    n.div_ceil(batch.max(1))
}

/// Trains a fresh agent on `dataset` for `hp.epochs` shuffled passes.
pub fn train(hp: &Hyperparams, dataset: &OfflineDataset) -> Result<(DailAgent, RunMetrics)> {
    train_with_callback(hp, dataset, |_| {})
}

/// [`train`] with a hook called after every epoch.
pub fn train_with_callback<F>(hp: &Hyperparams, dataset: &OfflineDataset, mut on_epoch: F) -> Result<(DailAgent, RunMetrics)>
where
    F: FnMut(&EpochMetrics),
{
    hp.validate()?;
    if dataset.is_empty() {
        return Err(DailError::invalid("cannot train on an empty dataset"));
    }
    let meta = &dataset.meta;
    let env = Gridworld::new(meta.env.clone())?;
    let mapping = make_mapping(meta.num_instructions, meta.mapping_seed)?;
    let mut agent = DailAgent::new(hp.clone(), &meta.env, meta.num_instructions, meta.mapping_seed)?;
    let mut shuffle_rng = rng::derived(hp.seed, 1);
    let mut metrics = RunMetrics::default();
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    let mut step: u64 = 0;
    for epoch in 0..hp.epochs {
        order.shuffle(&mut shuffle_rng);
        let mut sums = LossBreakdown::default();
        let mut n_batches = 0usize;
        for chunk in order.chunks(hp.batch) {
            let batch: Vec<&Trajectory> = chunk.iter().map(|&i| &dataset.trajectories[i]).collect();
            step += 1;
            let l = agent.train_step(&batch, step)?;
            sums.dist += l.dist;
            sums.c += l.c;
            sums.cql += l.cql;
            sums.tot += l.tot;
            n_batches += 1;
            if step % hp.k_update == 0 {
                agent.sync_target()?;
            }
        }
        let k = n_batches as f64;
        let eval_success_rate = if hp.eval_episodes > 0 {
            analysis::evaluate(&agent, &env, &mapping, hp.eval_episodes, rng::mix(hp.seed, epoch as u64))?
        } else {
            f64::NAN
        };
        let row = EpochMetrics {
            epoch: epoch + 1,
            l_dist: sums.dist / k,
            l_c: sums.c / k,
            l_cql: sums.cql / k,
            l_tot: sums.tot / k,
            eval_success_rate,
        };
        on_epoch(&row);
        metrics.rows.push(row);
    }
    metrics.final_success = metrics.rows.last().map(|r| r.eval_success_rate);
    Ok((agent, metrics))
}
