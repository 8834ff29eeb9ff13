//! Trajectory/instruction alignment.
//!
//! A trajectory is embedded by folding the recurrent cell over its
//! state-action embeddings, starting from the zero vector. Instructions are
//! embedded by table lookup. The binary contrastive loss pulls each
//! trajectory towards its own instruction and away from the other
//! instructions in the batch, with cosine similarity as the score.

use crate::agent::{NetworkLayout, PolicyNetwork};
use crate::dataset::{Trajectory, Transition};
use crate::error::{DailError, Result};
use crate::tensor::{NodeId, ParamStore, Tape};

pub type TrajectoryEmbedding = Vec<f64>;
pub type InstructionEmbedding = Vec<f64>;

/// Hidden states `h_0 ..= h_T` of the history encoder over `transitions`,
/// recorded on `tape`. `h_0` is the zero vector.
pub fn stream_prefixes(
    layout: &NetworkLayout,
    params: &ParamStore,
    tape: &mut Tape,
    transitions: &[Transition],
) -> Result<Vec<NodeId>> {
    let mut hs = Vec::with_capacity(transitions.len() + 1);
    let mut h = tape.leaf(vec![0.0; layout.dims.feature_dim]);
    hs.push(h);
    for tr in transitions {
        h = layout.extend_history(tape, params, h, &tr.obs, tr.action)?;
        hs.push(h);
    }
    Ok(hs)
}

pub fn encode_prefix(net: &PolicyNetwork, transitions: &[Transition]) -> Result<TrajectoryEmbedding> {
    let mut tape = Tape::new();
    let hs = stream_prefixes(&net.layout, &net.params, &mut tape, transitions)?;
    Ok(tape.value(hs[hs.len() - 1]).to_vec())
}

pub fn encode_instruction(net: &PolicyNetwork, instruction_id: usize) -> Result<InstructionEmbedding> {
    let mut tape = Tape::new();
    let node = net.instruction(&mut tape, instruction_id)?;
    Ok(tape.value(node).to_vec())
}

/// Cosine similarity.
pub fn similarity(x_tau: &[f64], x_l: &[f64]) -> Result<f64> {
    if x_tau.len() != x_l.len() {
        return Err(DailError::Shape(format!("{} vs {}", x_tau.len(), x_l.len())));
    }
    let na = x_tau.iter().map(|v| v * v).sum::<f64>().sqrt();
    let nb = x_l.iter().map(|v| v * v).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return Err(DailError::DegenerateEmbedding);
    }
    let dot: f64 = x_tau.iter().zip(x_l).map(|(a, b)| a * b).sum();
    Ok(dot / (na * nb))
}

/// One batch element for the contrastive loss.
#[derive(Debug, Clone, Copy)]
pub struct AlignmentItem {
    pub trajectory: NodeId,
    pub instruction: NodeId,
    pub instruction_id: usize,
}

/// Records the contrastive loss
/// `-(1/P) Σ_(k,j) [log σ(f(τ_k, l_k)) + log(1 - σ(f(τ_k, l_j)))]`
/// over the P ordered pairs with differing instruction ids.
pub fn nce_loss_node(tape: &mut Tape, items: &[AlignmentItem]) -> Result<NodeId> {
    let mut pairs = 0usize;
    let mut terms = Vec::new();
    let mut negatives_per_item = Vec::with_capacity(items.len());
    for (k, a) in items.iter().enumerate() {
        let mut negs = Vec::new();
        for (j, b) in items.iter().enumerate() {
            if j != k && b.instruction_id != a.instruction_id {
                negs.push(j);
            }
        }
        pairs += negs.len();
        negatives_per_item.push(negs);
    }
    if pairs == 0 {
        return Err(DailError::NoNegatives);
    }
    let w = 1.0 / pairs as f64;
    for (k, a) in items.iter().enumerate() {
        let negs = &negatives_per_item[k];
        if negs.is_empty() {
            continue;
        }
        let pos = tape.cosine(a.trajectory, a.instruction)?;
        let pos = tape.log_sigmoid(pos, 1.0);
        terms.push((pos, -(negs.len() as f64) * w));
        for &j in negs {
            let neg = tape.cosine(a.trajectory, items[j].instruction)?;
            let neg = tape.log_sigmoid(neg, -1.0);
            terms.push((neg, -w));
        }
    }
    Ok(tape.weighted_sum(&terms))
}

/// Contrastive loss of `batch` (trajectory, instruction id) pairs under
/// the network's current encoders.
pub fn nce_loss(net: &PolicyNetwork, batch: &[(&Trajectory, usize)]) -> Result<f64> {
    if batch.len() < 2 {
        return Err(DailError::NoNegatives);
    }
    let mut tape = Tape::new();
    let items = batch
        .iter()
        .map(|(t, id)| {
            let hs = stream_prefixes(&net.layout, &net.params, &mut tape, &t.transitions)?;
            Ok(AlignmentItem {
                trajectory: hs[hs.len() - 1],
                instruction: net.instruction(&mut tape, *id)?,
                instruction_id: *id,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let loss = nce_loss_node(&mut tape, &items)?;
    Ok(tape.scalar(loss))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::agent::NetworkDims;
    use crate::dataset::{rollout, RandomPolicy, Source};
    use crate::gridworld::{make_mapping, EnvConfig, Gridworld};
    use crate::rng;
    use crate::tensor::{grad_check, GradCheckOptions};

    fn net(num_instructions: usize, seed: u64) -> PolicyNetwork {
        let cfg = EnvConfig::default();
        let dims = NetworkDims {
            grid_width: cfg.width,
            obs_dim: cfg.obs_dim(),
            num_instructions,
            feature_dim: 8,
            num_actions: 3,
            atoms: 5,
        };
        PolicyNetwork::new(dims, &mut rng::seeded(seed)).unwrap()
    }

    fn trajectories(n: usize, seed: u64) -> Vec<Trajectory> {
        let env = Gridworld::new(EnvConfig::default()).unwrap();
        let mapping = make_mapping(4, 0).unwrap();
        let mut r = rng::seeded(seed);
        (0..n)
            .map(|i| rollout(&env, &mapping, i % 4, &mut RandomPolicy, &mut r, Source::Random).unwrap())
            .collect()
    }

    #[test]
    fn empty_prefix_is_zero() {
        let n = net(4, 0);
        assert_eq!(encode_prefix(&n, &[]).unwrap(), vec![0.0; 8]);
    }

    #[test]
    fn single_step_with_zero_cell_is_tanh_bias() {
        let mut n = net(4, 0);
        for id in [n.layout.seq_cell.w_h, n.layout.seq_cell.w_x] {
            n.params.get_mut(id).values.iter_mut().for_each(|v| *v = 0.0);
        }
        let b = n.params.get(n.layout.seq_cell.b).values.clone();
        let t = &trajectories(1, 3)[0];
        let e = encode_prefix(&n, &t.transitions[..1]).unwrap();
        let want: Vec<f64> = b.iter().map(|v| v.tanh()).collect();
        assert_eq!(e, want);
    }

    #[test]
    fn prefix_encoding_matches_streaming_pass_bitwise() {
        let n = net(4, 1);
        for t in trajectories(5, 2) {
            let mut tape = Tape::new();
            let hs = stream_prefixes(&n.layout, &n.params, &mut tape, &t.transitions).unwrap();
            for k in 0..=t.len() {
                let batch = encode_prefix(&n, &t.transitions[..k]).unwrap();
                let bits: Vec<u64> = batch.iter().map(|v| v.to_bits()).collect();
                let stream: Vec<u64> = tape.value(hs[k]).iter().map(|v| v.to_bits()).collect();
                assert_eq!(bits, stream);
            }
        }
    }

    #[test]
    fn instruction_rows_are_independent() {
        let n = net(4, 1);
        let a = encode_instruction(&n, 0).unwrap();
        let b = encode_instruction(&n, 1).unwrap();
        assert_ne!(a, b);
        assert_eq!(a, n.params.get(n.layout.instructions.table).values[..8].to_vec());
        assert!(encode_instruction(&n, 4).is_err());
    }

    #[test]
    fn gradient_flows_only_into_looked_up_rows() {
        let mut n = net(4, 5);
        let table = n.layout.instructions.table;
        let trajs = trajectories(2, 9);
        let batch = [(&trajs[0], 0usize), (&trajs[1], 2usize)];
        let layout = n.layout;
        let store = &mut n.params;
        let opts = GradCheckOptions {
            param_filter: Some(|name| name == "instructions"),
            ..GradCheckOptions::default()
        };
        let report = grad_check(store, opts, |s, tape| {
            let items = batch
                .iter()
                .map(|(t, id)| {
                    let hs = stream_prefixes(&layout, s, tape, &t.transitions)?;
                    Ok(AlignmentItem {
                        trajectory: hs[hs.len() - 1],
                        instruction: layout.instruction(tape, s, *id)?,
                        instruction_id: *id,
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            nce_loss_node(tape, &items)
        })
        .unwrap();
        assert!(report.max_rel_error <= 1e-4, "{report:?}");
        assert_eq!(report.entries_checked, 32);
        let g = &n.params.get(table).grad;
        let row_norm = |r: usize| g[r * 8..(r + 1) * 8].iter().map(|v| v.abs()).sum::<f64>();
        assert!(row_norm(0) > 0.0 && row_norm(2) > 0.0);
        assert_eq!(row_norm(1), 0.0);
        assert_eq!(row_norm(3), 0.0);
    }

    #[test]
    fn similarity_examples() {
        assert!((similarity(&[1.0, 2.0], &[1.0, 2.0]).unwrap() - 1.0).abs() < 1e-15);
        assert_eq!(similarity(&[1.0, 0.0], &[0.0, 3.0]).unwrap(), 0.0);
        assert!(matches!(similarity(&[0.0, 0.0], &[1.0, 0.0]), Err(DailError::DegenerateEmbedding)));
        let a = [0.3, -1.2, 2.5];
        let b = [1.0, 0.5, -0.25];
        let scaled: Vec<f64> = a.iter().map(|v| v * 4.0).collect();
        assert_eq!(similarity(&scaled, &b).unwrap(), similarity(&a, &b).unwrap());
    }

    #[test]
    fn nce_closed_form_values() {
        // orthogonal embeddings: every similarity is 0
        let mut tape = Tape::new();
        let t0 = tape.leaf(vec![1.0, 0.0, 0.0, 0.0]);
        let t1 = tape.leaf(vec![0.0, 1.0, 0.0, 0.0]);
        let l0 = tape.leaf(vec![0.0, 0.0, 1.0, 0.0]);
        let l1 = tape.leaf(vec![0.0, 0.0, 0.0, 1.0]);
        let items = [
            AlignmentItem { trajectory: t0, instruction: l0, instruction_id: 0 },
            AlignmentItem { trajectory: t1, instruction: l1, instruction_id: 1 },
        ];
        let loss = nce_loss_node(&mut tape, &items).unwrap();
        assert!((tape.scalar(loss) - 2.0 * 2f64.ln()).abs() < 1e-12);

        // f+ = 1, f- = -1 for both pairs
        let mut tape = Tape::new();
        let t0 = tape.leaf(vec![1.0, 0.0]);
        let t1 = tape.leaf(vec![-1.0, 0.0]);
        let l0 = tape.leaf(vec![2.0, 0.0]);
        let l1 = tape.leaf(vec![-3.0, 0.0]);
        let items = [
            AlignmentItem { trajectory: t0, instruction: l0, instruction_id: 0 },
            AlignmentItem { trajectory: t1, instruction: l1, instruction_id: 1 },
        ];
        let loss = nce_loss_node(&mut tape, &items).unwrap();
        let sigma1 = 1.0 / (1.0 + (-1.0f64).exp());
        assert!((tape.scalar(loss) - (-2.0 * sigma1.ln())).abs() < 1e-12);
        assert!((tape.scalar(loss) - 0.6265).abs() < 1e-4);
    }

    #[test]
    fn nce_needs_negatives() {
        let n = net(4, 0);
        let trajs = trajectories(3, 1);
        assert!(matches!(nce_loss(&n, &[(&trajs[0], 0)]), Err(DailError::NoNegatives)));
        assert!(matches!(
            nce_loss(&n, &[(&trajs[0], 2), (&trajs[1], 2), (&trajs[2], 2)]),
            Err(DailError::NoNegatives)
        ));
        let v = nce_loss(&n, &[(&trajs[0], 0), (&trajs[1], 1), (&trajs[2], 2)]).unwrap();
        assert!(v > 0.0);
    }
}
