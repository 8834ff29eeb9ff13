//! Instruction-count sweep: one cell per (count, algorithm, seed).

use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::agent::{self, Hyperparams};
use crate::dataset::{collect_mixed, default_dataset_size, OfflineDataset};
use crate::error::{DailError, Result};
use crate::gridworld::{make_mapping, EnvConfig, Gridworld, InstructionMapping};
use crate::rng;

pub const SWEEP_HEADER: &str = "count,algorithm,seed,success,status";

fn d_steps() -> usize {
    3200
}
fn d_train() -> Hyperparams {
    Hyperparams {
        lr: 1e-3,
        batch: 32,
        alpha: 5.0,
        k_update: 100,
        ..Hyperparams::default()
    }
}
fn d_ratio() -> f64 {
    0.5
}
fn d_eval() -> usize {
    100
}

/// Shared settings of every sweep cell. Each cell trains for a fixed
/// number of gradient steps, rounded up to whole epochs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSettings {
    #[serde(default)]
    pub env: EnvConfig,
    /// Tuned for the small toy datasets. A `train` object given in a
    /// settings file replaces it whole, with per-field training defaults.
    #[serde(default = "d_train")]
    pub train: Hyperparams,
    #[serde(default = "d_steps")]
    pub steps: usize,
    #[serde(default = "d_ratio")]
    pub success_ratio: f64,
    #[serde(default = "d_eval")]
    pub eval_episodes: usize,
}

impl Default for SweepSettings {
    fn default() -> Self {
        SweepSettings {
            env: EnvConfig::default(),
            train: d_train(),
            steps: d_steps(),
            success_ratio: d_ratio(),
            eval_episodes: d_eval(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct SweepCell {
    pub count: usize,
    pub algorithm: String,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub cell: SweepCell,
    pub success: Option<f64>,
    /// "ok" or the error message of a failed cell.
    pub status: String,
}

impl SweepRow {
    pub fn is_ok(&self) -> bool {
        self.status == "ok"
    }
}

/// Ablation flags `(distributional, alignment)` for a named algorithm.
pub fn algorithm_flags(name: &str) -> Result<(bool, bool)> {
    match name {
        "dail" => Ok((true, true)),
        "baseline" => Ok((false, false)),
        "distributional" => Ok((true, false)),
        "alignment" => Ok((false, true)),
        other => Err(DailError::invalid(format!("unknown algorithm `{other}`"))),
    }
}

/// A trained cell together with the task it was trained on.
pub struct TrainedCell {
    pub agent: agent::DailAgent,
    pub env: Gridworld,
    pub mapping: InstructionMapping,
    pub dataset: OfflineDataset,
}

/// Trains one cell. Both algorithms of a (count, seed) pair see the same
/// mapping and dataset.
pub fn train_cell(settings: &SweepSettings, cell: &SweepCell) -> Result<TrainedCell> {
    let (distributional, alignment) = algorithm_flags(&cell.algorithm)?;
    let env = Gridworld::new(settings.env.clone())?;
    let mapping = make_mapping(cell.count, cell.seed)?;
    let n = default_dataset_size(cell.count);
    let dataset = collect_mixed(&env, &mapping, n, settings.success_ratio, rng::mix(cell.seed, cell.count as u64))?;
    let mut hp = settings.train.clone();
    hp.distributional = distributional;
    hp.alignment = alignment;
    hp.seed = cell.seed;
    hp.eval_episodes = 0;
    hp.epochs = settings.steps.div_ceil(agent::steps_per_epoch(n, hp.batch));
    let (agent, _) = agent::train(&hp, &dataset)?;
    Ok(TrainedCell {
        agent,
        env,
        mapping,
        dataset,
    })
}

/// Trains and evaluates one cell.
pub fn run_cell(settings: &SweepSettings, cell: &SweepCell) -> Result<f64> {
    let t = train_cell(settings, cell)?;
    super::evaluate(&t.agent, &t.env, &t.mapping, settings.eval_episodes, rng::mix(cell.seed, u64::MAX))
}

/// Runs every cell not already present as a successful row in `existing`,
/// on up to `jobs` threads. `on_row` sees each fresh row as it finishes.
/// Returns all rows sorted by (count, algorithm, seed).
pub fn ambiguity_sweep<F>(
    settings: &SweepSettings,
    cells: &[SweepCell],
    jobs: usize,
    existing: &[SweepRow],
    on_row: F,
) -> Result<Vec<SweepRow>>
where
    F: Fn(&SweepRow) + Sync,
{
    if cells.is_empty() {
        return Err(DailError::invalid("sweep needs at least one cell"));
    }
    for c in cells {
        algorithm_flags(&c.algorithm)?;
    }
    let mut rows: Vec<SweepRow> = existing.iter().filter(|r| r.is_ok()).cloned().collect();
    let todo: Vec<&SweepCell> = cells.iter().filter(|c| !rows.iter().any(|r| &r.cell == *c)).collect();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| DailError::invalid(e.to_string()))?;
    let fresh: Vec<SweepRow> = pool.install(|| {
        todo.par_iter()
            .map(|cell| {
                let row = match run_cell(settings, cell) {
                    Ok(s) => SweepRow {
                        cell: (*cell).clone(),
                        success: Some(s),
                        status: "ok".into(),
                    },
                    Err(e) => SweepRow {
                        cell: (*cell).clone(),
                        success: None,
                        status: e.to_string().replace([',', '\n'], ";"),
                    },
                };
                on_row(&row);
                row
            })
            .collect()
    });
    rows.extend(fresh);
    rows.sort_by(|a, b| a.cell.cmp(&b.cell));
    Ok(rows)
}

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut out = String::from(SWEEP_HEADER);
    out.push('\n');
    for r in rows {
        let success = r.success.map(|s| s.to_string()).unwrap_or_default();
        let _ = writeln!(
            out,
            "{},{},{},{},{}",
            r.cell.count, r.cell.algorithm, r.cell.seed, success, r.status
        );
    }
    out
}

pub fn read_sweep_csv(text: &str) -> Result<Vec<SweepRow>> {
    let mut lines = text.lines();
    match lines.next() {
        Some(h) if h.trim() == SWEEP_HEADER => {}
        _ => return Err(DailError::Schema(format!("sweep file must start with `{SWEEP_HEADER}`"))),
    }
    let mut rows = Vec::new();
    for (i, line) in lines.enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let bad = || DailError::Schema(format!("sweep row {}: `{line}`", i + 1));
        let f: Vec<&str> = line.splitn(5, ',').collect();
        if f.len() != 5 {
            return Err(bad());
        }
        let success = if f[3].is_empty() {
            None
        } else {
            Some(f[3].parse().map_err(|_| bad())?)
        };
        rows.push(SweepRow {
            cell: SweepCell {
                count: f[0].parse().map_err(|_| bad())?,
                algorithm: f[1].to_string(),
                seed: f[2].parse().map_err(|_| bad())?,
            },
            success,
            status: f[4].to_string(),
        });
    }
    Ok(rows)
}

/// Mean success of the successful rows for each (algorithm, count), sorted.
pub fn aggregate(rows: &[SweepRow]) -> Vec<(String, usize, f64)> {
    let mut acc: std::collections::BTreeMap<(String, usize), (f64, usize)> = Default::default();
    for r in rows.iter().filter(|r| r.is_ok()) {
        if let Some(s) = r.success {
            let e = acc.entry((r.cell.algorithm.clone(), r.cell.count)).or_insert((0.0, 0));
            e.0 += s;
            e.1 += 1;
        }
    }
    acc.into_iter().map(|((a, c), (s, n))| (a, c, s / n as f64)).collect()
}
