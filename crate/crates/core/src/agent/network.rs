use serde::{Deserialize, Serialize};

use crate::error::{DailError, Result};
use crate::gridworld::{Action, Observation, NUM_ACTIONS};
use crate::rng::Rng;
use crate::tensor::{Embedding, Linear, NodeId, ParamStore, RnnCell, Tape};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetworkDims {
    /// Grid width, needed to index one-hot observations.
    pub grid_width: usize,
    pub obs_dim: usize,
    pub num_instructions: usize,
    pub feature_dim: usize,
    pub num_actions: usize,
    pub atoms: usize,
}

/// Parameter handles of the policy network. The same layout drives the
/// online and target parameter stores.
///
/// Observation encoder, instruction table, state-action encoder, recurrent
/// history cell and a two-layer distributional head producing
/// `num_actions * atoms` logits.
#[derive(Debug, Clone, Copy)]
pub struct NetworkLayout {
    pub dims: NetworkDims,
    pub obs_encoder: Linear,
    pub instructions: Embedding,
    pub pair_encoder: Linear,
    pub seq_cell: RnnCell,
    pub head_hidden: Linear,
    pub head_out: Linear,
}

#[derive(Debug, Clone)]
pub struct PolicyNetwork {
    pub layout: NetworkLayout,
    pub params: ParamStore,
}

impl PolicyNetwork {
    pub fn new(dims: NetworkDims, rng: &mut Rng) -> Result<Self> {
        if dims.num_actions != NUM_ACTIONS {
            return Err(DailError::invalid(format!("network needs {NUM_ACTIONS} actions")));
        }
        if dims.num_instructions == 0 || dims.feature_dim == 0 || dims.atoms < 2 {
            return Err(DailError::invalid("degenerate network dimensions"));
        }
        let d = dims.feature_dim;
        let mut params = ParamStore::new();
        let layout = NetworkLayout {
            dims,
            obs_encoder: Linear::new(&mut params, "obs_encoder", dims.obs_dim, d, rng)?,
            instructions: Embedding::new(&mut params, "instructions", dims.num_instructions, d, rng)?,
            pair_encoder: Linear::new(&mut params, "pair_encoder", dims.obs_dim + dims.num_actions, d, rng)?,
            seq_cell: RnnCell::new(&mut params, "seq_cell", d, d, rng)?,
            head_hidden: Linear::new(&mut params, "head_hidden", 3 * d, d, rng)?,
            head_out: Linear::new(&mut params, "head_out", d, dims.num_actions * dims.atoms, rng)?,
        };
        Ok(PolicyNetwork { layout, params })
    }

    /// Rebinds a checkpointed store to a freshly built layout, checking that
    /// names and shapes agree.
    pub fn from_params(dims: NetworkDims, params: ParamStore) -> Result<Self> {
        let fresh = PolicyNetwork::new(dims, &mut crate::rng::seeded(0))?;
        fresh.params.check_same_layout(&params)?;
        Ok(PolicyNetwork {
            layout: fresh.layout,
            params,
        })
    }

    pub fn dims(&self) -> NetworkDims {
        self.layout.dims
    }

    pub fn zero_history(&self) -> Vec<f64> {
        vec![0.0; self.layout.dims.feature_dim]
    }

    pub fn encode_obs(&self, tape: &mut Tape, obs: &Observation) -> Result<NodeId> {
        self.layout.encode_obs(tape, &self.params, obs)
    }

    pub fn extend_history(&self, tape: &mut Tape, h: NodeId, obs: &Observation, action: Action) -> Result<NodeId> {
        self.layout.extend_history(tape, &self.params, h, obs, action)
    }

    pub fn instruction(&self, tape: &mut Tape, id: usize) -> Result<NodeId> {
        self.layout.instruction(tape, &self.params, id)
    }

    pub fn head(&self, tape: &mut Tape, obs: NodeId, instruction: NodeId, history: NodeId) -> Result<NodeId> {
        self.layout.head(tape, &self.params, obs, instruction, history)
    }

    /// Logits for all actions at one decision point.
    pub fn logits(&self, obs: &Observation, instruction_id: usize, history: &[f64]) -> Result<Vec<f64>> {
        self.layout.logits(&self.params, obs, instruction_id, history)
    }
}

impl NetworkLayout {
    fn obs_index(&self, obs: &Observation) -> Result<usize> {
        let i = obs.index(self.dims.grid_width);
        if obs.x >= self.dims.grid_width || i >= self.dims.obs_dim {
            return Err(DailError::Index {
                what: "observation",
                index: i,
                len: self.dims.obs_dim,
            });
        }
        Ok(i)
    }

    pub fn encode_obs(&self, tape: &mut Tape, params: &ParamStore, obs: &Observation) -> Result<NodeId> {
        let i = self.obs_index(obs)?;
        let pre = self.obs_encoder.forward_indicator(tape, params, &[i])?;
        Ok(tape.tanh(pre))
    }

    /// State-action embedding fed to the sequence cell.
    pub fn encode_pair(&self, tape: &mut Tape, params: &ParamStore, obs: &Observation, action: Action) -> Result<NodeId> {
        let i = self.obs_index(obs)?;
        let pre = self
            .pair_encoder
            .forward_indicator(tape, params, &[i, self.dims.obs_dim + action.index()])?;
        Ok(tape.tanh(pre))
    }

    /// One step of the history encoder.
    pub fn extend_history(
        &self,
        tape: &mut Tape,
        params: &ParamStore,
        h: NodeId,
        obs: &Observation,
        action: Action,
    ) -> Result<NodeId> {
        let u = self.encode_pair(tape, params, obs, action)?;
        self.seq_cell.step(tape, params, h, u)
    }

    pub fn instruction(&self, tape: &mut Tape, params: &ParamStore, id: usize) -> Result<NodeId> {
        self.instructions.forward(tape, params, id)
    }

    pub fn head(
        &self,
        tape: &mut Tape,
        params: &ParamStore,
        obs: NodeId,
        instruction: NodeId,
        history: NodeId,
    ) -> Result<NodeId> {
        let x = tape.concat(&[obs, instruction, history]);
        let h = self.head_hidden.forward(tape, params, x)?;
        let h = tape.tanh(h);
        self.head_out.forward(tape, params, h)
    }

    pub fn logits(&self, params: &ParamStore, obs: &Observation, instruction_id: usize, history: &[f64]) -> Result<Vec<f64>> {
        if history.len() != self.dims.feature_dim {
            return Err(DailError::Shape(format!(
                "history has length {}, expected {}",
                history.len(),
                self.dims.feature_dim
            )));
        }
        let mut tape = Tape::new();
        let o = self.encode_obs(&mut tape, params, obs)?;
        let l = self.instruction(&mut tape, params, instruction_id)?;
        let h = tape.leaf(history.to_vec());
        let out = self.head(&mut tape, params, o, l, h)?;
        Ok(tape.value(out).to_vec())
    }
}
