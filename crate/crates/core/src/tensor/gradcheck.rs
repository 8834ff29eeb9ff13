use rand::seq::index::sample;

use super::param::ParamStore;
use super::tape::{NodeId, Tape};
use crate::error::Result;
use crate::rng;

#[derive(Debug, Clone, Copy)]
pub struct GradCheckOptions {
    pub eps: f64,
    /// Cap on checked entries per parameter; `None` checks every entry.
    /// When capped, the entry with the largest analytic gradient is always
    /// included and the rest are sampled with `seed`.
    pub max_entries_per_param: Option<usize>,
    pub seed: u64,
    /// Restricts the check to parameters whose name passes the filter.
    pub param_filter: Option<fn(&str) -> bool>,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions {
            eps: 1e-5,
            max_entries_per_param: None,
            seed: 0,
            param_filter: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub worst_param: String,
    pub worst_index: usize,
    pub entries_checked: usize,
}

/// Compares tape gradients of `loss` with central differences.
pub fn grad_check<F>(store: &mut ParamStore, opts: GradCheckOptions, loss: F) -> Result<GradCheckReport>
where
    F: Fn(&ParamStore, &mut Tape) -> Result<NodeId>,
{
    grad_check_with(
        store,
        opts,
        |s| {
            s.zero_grad();
            let mut tape = Tape::new();
            let root = loss(s, &mut tape)?;
            tape.backward(root, s)
        },
        |s| {
            let mut tape = Tape::new();
            let root = loss(s, &mut tape)?;
            Ok(tape.scalar(root))
        },
    )
}

/// Like [`grad_check`] with the analytic gradient supplied separately:
/// `analytic` must leave d(loss)/d(param) in the store's gradients.
pub fn grad_check_with<A, V>(store: &mut ParamStore, opts: GradCheckOptions, analytic: A, value: V) -> Result<GradCheckReport>
where
    A: FnOnce(&mut ParamStore) -> Result<()>,
    V: Fn(&ParamStore) -> Result<f64>,
{
    analytic(store)?;
    let mut rng = rng::seeded(opts.seed);
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst_param: String::new(),
        worst_index: 0,
        entries_checked: 0,
    };
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        if opts.param_filter.is_some_and(|f| !f(&store.get(id).name)) {
            continue;
        }
        let n = store.get(id).len();
        let entries: Vec<usize> = match opts.max_entries_per_param {
            Some(cap) if cap < n && cap > 0 => {
                let grad = &store.get(id).grad;
                let top = (0..n)
                    .max_by(|&a, &b| grad[a].abs().total_cmp(&grad[b].abs()))
                    .unwrap_or(0);
                let mut picked: Vec<usize> = sample(&mut rng, n, cap).into_iter().filter(|&i| i != top).collect();
                picked.truncate(cap - 1);
                picked.push(top);
                picked
            }
            _ => (0..n).collect(),
        };
        for i in entries {
            let original = store.get(id).values[i];
            store.get_mut(id).values[i] = original + opts.eps;
            let plus = value(store)?;
            store.get_mut(id).values[i] = original - opts.eps;
            let minus = value(store)?;
            store.get_mut(id).values[i] = original;
            let numeric = (plus - minus) / (2.0 * opts.eps);
            let exact = store.get(id).grad[i];
            let rel = (exact - numeric).abs() / numeric.abs().max(1e-8);
            report.entries_checked += 1;
            if rel > report.max_rel_error || report.worst_param.is_empty() {
                report.max_rel_error = rel;
                report.worst_param = store.get(id).name.clone();
                report.worst_index = i;
            }
        }
    }
    Ok(report)
}
