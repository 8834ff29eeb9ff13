//! Evaluation and the measurements built on top of it.

mod plot;
mod sweep;

pub use plot::{sweep_plot_svg, SeriesPoint};
pub use sweep::{
    aggregate, algorithm_flags, ambiguity_sweep, read_sweep_csv, run_cell, sweep_csv, train_cell, SweepCell, SweepRow, SweepSettings,
    TrainedCell, SWEEP_HEADER,
};

use std::collections::HashMap;
use std::fmt::Write as _;

use rand::Rng as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::agent::DailAgent;
use crate::dataset::{rollout, Policy, Source};
use crate::distributional::{self, CategoricalDistribution};
use crate::error::{DailError, Result};
use crate::gridworld::{Gridworld, InstructionMapping, Observation};
use crate::rng::{self, Rng};

fn d_one() -> f64 {
    1.0
}
fn d_eta() -> f64 {
    0.05
}
fn d_epsilon() -> f64 {
    0.1
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnalysisThresholds {
    /// Mean-gap threshold.
    #[serde(default = "d_one")]
    pub delta: f64,
    /// Wasserstein threshold.
    #[serde(default = "d_one")]
    pub d: f64,
    #[serde(default = "d_eta")]
    pub eta: f64,
    /// Sub-optimality gap; recorded only.
    #[serde(default = "d_epsilon")]
    pub epsilon: f64,
}

impl Default for AnalysisThresholds {
    fn default() -> Self {
        AnalysisThresholds {
            delta: 1.0,
            d: 1.0,
            eta: d_eta(),
            epsilon: d_epsilon(),
        }
    }
}

impl AnalysisThresholds {
    pub fn validate(&self) -> Result<()> {
        if !(self.delta > 0.0 && self.d > 0.0) {
            return Err(DailError::invalid("delta and d must be positive"));
        }
        if !(self.eta > 0.0 && self.eta < 1.0) {
            return Err(DailError::invalid("eta must lie in (0, 1)"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub l_dist: f64,
    pub l_c: f64,
    pub l_cql: f64,
    pub l_tot: f64,
    pub eval_success_rate: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct RunMetrics {
    pub rows: Vec<EpochMetrics>,
    pub final_success: Option<f64>,
    pub silhouette: Option<f64>,
}

pub const METRICS_HEADER: &str = "epoch,l_dist,l_c,l_cql,l_tot,eval_success_rate";

impl RunMetrics {
    pub fn to_csv(&self) -> String {
        let mut out = String::from(METRICS_HEADER);
        out.push('\n');
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{}",
                r.epoch, r.l_dist, r.l_c, r.l_cql, r.l_tot, r.eval_success_rate
            );
        }
        out
    }
}

/// Success rate of `policy` over `n_episodes` episodes with instruction ids
/// cycled in order. Episode `i` draws from its own stream derived from
/// `(seed, i)`; deterministic policies replay one episode per instruction.
pub fn evaluate_policy(
    env: &Gridworld,
    mapping: &InstructionMapping,
    policy: &mut dyn Policy,
    n_episodes: usize,
    seed: u64,
) -> Result<f64> {
    if n_episodes == 0 {
        return Err(DailError::invalid("n_episodes must be >= 1"));
    }
    let deterministic = policy.is_deterministic();
    let mut memo: HashMap<usize, bool> = HashMap::new();
    let mut successes = 0usize;
    for i in 0..n_episodes {
        let id = i % mapping.num_instructions();
        let ok = match memo.get(&id) {
            Some(&ok) if deterministic => ok,
            _ => {
                let mut r = rng::derived(seed, i as u64);
                let ok = rollout(env, mapping, id, policy, &mut r, Source::Policy)?.success;
                memo.insert(id, ok);
                ok
            }
        };
        successes += ok as usize;
    }
    Ok(successes as f64 / n_episodes as f64)
}

/// Greedy success rate of `agent`.
pub fn evaluate(agent: &DailAgent, env: &Gridworld, mapping: &InstructionMapping, n_episodes: usize, seed: u64) -> Result<f64> {
    check_agent(agent, env, mapping)?;
    evaluate_policy(env, mapping, &mut agent.policy(), n_episodes, seed)
}

fn check_agent(agent: &DailAgent, env: &Gridworld, mapping: &InstructionMapping) -> Result<()> {
    if agent.num_instructions != mapping.num_instructions() {
        return Err(DailError::invalid(format!(
            "agent knows {} instructions, mapping has {}",
            agent.num_instructions,
            mapping.num_instructions()
        )));
    }
    if agent.dims().obs_dim != env.config().obs_dim() || agent.dims().grid_width != env.config().width {
        return Err(DailError::invalid("agent was built for a different grid"));
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Verdict {
    Same,
    Different,
    Inconclusive,
}

impl Verdict {
    /// "different" at or above the threshold, "same" at or below half of it.
    pub fn classify(value: f64, threshold: f64) -> Verdict {
        if value >= threshold {
            Verdict::Different
        } else if value <= threshold / 2.0 {
            Verdict::Same
        } else {
            Verdict::Inconclusive
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Verdict::Same => "same",
            Verdict::Different => "different",
            Verdict::Inconclusive => "inconclusive",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DisambiguationReport {
    /// `mean_gap[i][j]`: average |Q(s,a,l_i) - Q(s,a,l_j)|.
    pub mean_gap: Vec<Vec<f64>>,
    /// `w1_gap[i][j]`: average W1 between the two return distributions.
    pub w1_gap: Vec<Vec<f64>>,
    pub mean_verdict: Vec<Vec<Verdict>>,
    pub w1_verdict: Vec<Vec<Verdict>>,
    pub goals: Vec<usize>,
    pub thresholds: AnalysisThresholds,
    pub n_states: usize,
}

pub const DISAMBIGUATION_HEADER: &str = "i,j,goal_i,goal_j,mean_gap,w1_gap,mean_verdict,w1_verdict";

impl DisambiguationReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        // the expectation runs over the learned policy only; epsilon is not checked
        let _ = writeln!(
            out,
            "# states={} delta={} d={} eta={} epsilon={} (unverified; learned greedy policy only)",
            self.n_states, self.thresholds.delta, self.thresholds.d, self.thresholds.eta, self.thresholds.epsilon
        );
        out.push_str(DISAMBIGUATION_HEADER);
        out.push('\n');
        let n = self.goals.len();
        for i in 0..n {
            for j in 0..n {
                let _ = writeln!(
                    out,
                    "{i},{j},{},{},{},{},{},{}",
                    self.goals[i],
                    self.goals[j],
                    self.mean_gap[i][j],
                    self.w1_gap[i][j],
                    self.mean_verdict[i][j].as_str(),
                    self.w1_verdict[i][j].as_str()
                );
            }
        }
        out
    }
}

/// Pairwise instruction gaps on states visited by the greedy policy.
///
/// States and histories come from greedy episodes under uniformly drawn
/// instructions. For a pair (i, j) the gap is measured at the greedy action
/// of each side and the two values are averaged, which keeps both matrices
/// symmetric.
pub fn disambiguation_report(
    agent: &DailAgent,
    env: &Gridworld,
    mapping: &InstructionMapping,
    thresholds: AnalysisThresholds,
    n_states: usize,
    seed: u64,
) -> Result<DisambiguationReport> {
    thresholds.validate()?;
    check_agent(agent, env, mapping)?;
    if n_states == 0 {
        return Err(DailError::invalid("n_states must be >= 1"));
    }
    let states = sample_states(agent, env, mapping, n_states, seed)?;
    let n = mapping.num_instructions();
    // per state: every instruction's distributions and greedy action
    let per_state: Vec<Vec<(Vec<CategoricalDistribution>, usize)>> = states
        .iter()
        .map(|(obs, hist)| {
            (0..n)
                .map(|id| {
                    let d = agent.forward(obs, id, hist)?;
                    let a = crate::agent::argmax(&crate::agent::q_values(&d));
                    Ok((d, a))
                })
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<_>>()?;
    let rows: Vec<(Vec<f64>, Vec<f64>)> = (0..n)
        .into_par_iter()
        .map(|i| {
            let mut mean_row = vec![0.0; n];
            let mut w1_row = vec![0.0; n];
            for j in 0..n {
                if i == j {
                    continue;
                }
                let (lo, hi) = (i.min(j), i.max(j));
                let (mut m_acc, mut w_acc) = (0.0, 0.0);
                for s in &per_state {
                    let (di, ai) = &s[lo];
                    let (dj, aj) = &s[hi];
                    for a in [*ai, *aj] {
                        m_acc += (di[a].expectation() - dj[a].expectation()).abs();
                        w_acc += distributional::wasserstein1(&di[a], &dj[a])?;
                    }
                }
                let k = 2.0 * per_state.len() as f64;
                mean_row[j] = m_acc / k;
                w1_row[j] = w_acc / k;
            }
            Ok((mean_row, w1_row))
        })
        .collect::<Result<_>>()?;
    let (mean_gap, w1_gap): (Vec<_>, Vec<_>) = rows.into_iter().unzip();
    let verdicts = |m: &Vec<Vec<f64>>, t: f64| -> Vec<Vec<Verdict>> {
        m.iter()
            .enumerate()
            .map(|(i, row)| {
                row.iter()
                    .enumerate()
                    .map(|(j, v)| if i == j { Verdict::Same } else { Verdict::classify(*v, t) })
                    .collect()
            })
            .collect()
    };
    Ok(DisambiguationReport {
        mean_verdict: verdicts(&mean_gap, thresholds.delta),
        w1_verdict: verdicts(&w1_gap, thresholds.d),
        mean_gap,
        w1_gap,
        goals: mapping.table.clone(),
        thresholds,
        n_states,
    })
}

fn sample_states(
    agent: &DailAgent,
    env: &Gridworld,
    mapping: &InstructionMapping,
    n_states: usize,
    seed: u64,
) -> Result<Vec<(Observation, Vec<f64>)>> {
    let mut r = rng::seeded(seed);
    let mut out = Vec::with_capacity(n_states);
    while out.len() < n_states {
        let id = r.random_range(0..mapping.num_instructions());
        let mut policy = agent.policy();
        policy.begin_episode(id)?;
        let mut state = env.reset(mapping, id)?;
        while !state.done && out.len() < n_states {
            let obs = state.observation();
            out.push((obs, policy.history().to_vec()));
            let a = policy.act(env, &state, &mut r)?;
            policy.observe(&obs, a)?;
            state = env.step(&state, a)?.state;
        }
    }
    Ok(out)
}

/// Finite discrete distribution used as a return sampler.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiscreteDist {
    pub values: Vec<f64>,
    pub weights: Vec<f64>,
}

impl DiscreteDist {
    pub fn new(values: Vec<f64>, weights: Vec<f64>) -> Result<Self> {
        if values.is_empty() || values.len() != weights.len() {
            return Err(DailError::invalid("values and weights must be nonempty and equally long"));
        }
        if weights.iter().any(|w| !(*w >= 0.0)) || weights.iter().sum::<f64>() <= 0.0 {
            return Err(DailError::invalid("weights must be non-negative with positive total"));
        }
        Ok(DiscreteDist { values, weights })
    }

    pub fn point(v: f64) -> Self {
        DiscreteDist {
            values: vec![v],
            weights: vec![1.0],
        }
    }

    pub fn sample(&self, rng: &mut Rng) -> f64 {
        let total: f64 = self.weights.iter().sum();
        let mut u = rng.random::<f64>() * total;
        for (v, w) in self.values.iter().zip(&self.weights) {
            if u < *w {
                return *v;
            }
            u -= w;
        }
        self.values[self.values.len() - 1]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct McReport {
    pub w1_detect_rate: f64,
    pub mean_detect_rate: f64,
}

/// Empirical W1 of two equal-size samples: mean gap between order
/// statistics.
pub fn empirical_w1(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() || a.is_empty() {
        return Err(DailError::invalid("empirical W1 needs two nonempty samples of equal size"));
    }
    let mut a = a.to_vec();
    let mut b = b.to_vec();
    a.sort_by(f64::total_cmp);
    b.sort_by(f64::total_cmp);
    Ok(a.iter().zip(&b).map(|(x, y)| (x - y).abs()).sum::<f64>() / a.len() as f64)
}

/// Compares a mean-gap detector with a W1 detector on samples from two
/// return distributions. Each trial draws `n_samples` returns from both;
/// the mean detector fires when the sample means differ by at least
/// `delta / 2`, the W1 detector when the empirical W1 is at least `d / 2`.
pub fn mc_theorem_check<A, B>(
    dist_a: A,
    dist_b: B,
    n_samples: usize,
    n_trials: usize,
    thresholds: AnalysisThresholds,
    seed: u64,
) -> Result<McReport>
where
    A: Fn(&mut Rng) -> f64,
    B: Fn(&mut Rng) -> f64,
{
    thresholds.validate()?;
    if n_samples < 2 || n_trials == 0 {
        return Err(DailError::invalid("need n_samples >= 2 and n_trials >= 1"));
    }
    let (mut w1_hits, mut mean_hits) = (0usize, 0usize);
    for trial in 0..n_trials {
        let mut r = rng::derived(seed, trial as u64);
        let a: Vec<f64> = (0..n_samples).map(|_| dist_a(&mut r)).collect();
        let b: Vec<f64> = (0..n_samples).map(|_| dist_b(&mut r)).collect();
        let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
        if (mean(&a) - mean(&b)).abs() >= thresholds.delta / 2.0 {
            mean_hits += 1;
        }
        if empirical_w1(&a, &b)? >= thresholds.d / 2.0 {
            w1_hits += 1;
        }
    }
    Ok(McReport {
        w1_detect_rate: w1_hits as f64 / n_trials as f64,
        mean_detect_rate: mean_hits as f64 / n_trials as f64,
    })
}

/// Mean silhouette under cosine distance. Points alone in their cluster
/// score 0, as do points whose intra- and nearest-cluster distances are
/// both 0.
pub fn silhouette(embeddings: &[Vec<f64>], labels: &[usize]) -> Result<f64> {
    if embeddings.len() != labels.len() {
        return Err(DailError::Shape(format!("{} embeddings, {} labels", embeddings.len(), labels.len())));
    }
    let mut distinct: Vec<usize> = labels.to_vec();
    distinct.sort_unstable();
    distinct.dedup();
    if distinct.len() < 2 {
        return Err(DailError::invalid("silhouette needs at least two distinct labels"));
    }
    let n = embeddings.len();
    let mut dist = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in i + 1..n {
            let d = 1.0 - crate::alignment::similarity(&embeddings[i], &embeddings[j])?;
            dist[i][j] = d;
            dist[j][i] = d;
        }
    }
    let mut total = 0.0;
    for i in 0..n {
        let mut sums: HashMap<usize, (f64, usize)> = HashMap::new();
        for j in 0..n {
            if j != i {
                let e = sums.entry(labels[j]).or_insert((0.0, 0));
                e.0 += dist[i][j];
                e.1 += 1;
            }
        }
        let Some(&(own_sum, own_n)) = sums.get(&labels[i]) else {
            continue;
        };
        let a = own_sum / own_n as f64;
        let b = distinct
            .iter()
            .filter(|&&l| l != labels[i])
            .filter_map(|l| sums.get(l).map(|(s, c)| s / *c as f64))
            .fold(f64::INFINITY, f64::min);
        let denom = a.max(b);
        if denom > 0.0 {
            total += (b - a) / denom;
        }
    }
    Ok(total / n as f64)
}

/// Instruction embedding rows of the agent's table.
pub fn instruction_embeddings(agent: &DailAgent) -> Result<Vec<Vec<f64>>> {
    (0..agent.num_instructions)
        .map(|id| crate::alignment::encode_instruction(&agent.online, id))
        .collect()
}

/// Silhouette of the instruction embeddings labelled by goal.
pub fn instruction_silhouette(agent: &DailAgent, mapping: &InstructionMapping) -> Result<f64> {
    silhouette(&instruction_embeddings(agent)?, &mapping.table)
}

pub fn embeddings_csv(agent: &DailAgent, mapping: &InstructionMapping) -> Result<String> {
    let emb = instruction_embeddings(agent)?;
    let dim = agent.dims().feature_dim;
    let mut out = String::from("instruction_id,goal_index");
    for k in 0..dim {
        let _ = write!(out, ",e{k}");
    }
    out.push('\n');
    for (id, row) in emb.iter().enumerate() {
        let _ = write!(out, "{id},{}", mapping.goal_of(id)?);
        for v in row {
            let _ = write!(out, ",{v}");
        }
        out.push('\n');
    }
    Ok(out)
}
