//! Categorical return distributions on a fixed, evenly spaced atom grid.

use serde::{Deserialize, Serialize};

use crate::error::{DailError, Result};
use crate::tensor;

/// Atoms `z_i = v_min + i * delta_z` for `i in 0..m`; the last atom is pinned
/// to `v_max` exactly.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Support {
    v_min: f64,
    v_max: f64,
    m: usize,
    delta_z: f64,
}

pub fn make_support(v_min: f64, v_max: f64, m: usize) -> Result<Support> {
    Support::new(v_min, v_max, m)
}

impl Support {
    pub fn new(v_min: f64, v_max: f64, m: usize) -> Result<Self> {
        if !(v_min.is_finite() && v_max.is_finite()) || v_min >= v_max {
            return Err(DailError::invalid(format!("support needs v_min < v_max, got [{v_min}, {v_max}]")));
        }
        if m < 2 {
            return Err(DailError::invalid("support needs at least 2 atoms"));
        }
        Ok(Support {
            v_min,
            v_max,
            m,
            delta_z: (v_max - v_min) / (m - 1) as f64,
        })
    }

    pub fn v_min(&self) -> f64 {
        self.v_min
    }

    pub fn v_max(&self) -> f64 {
        self.v_max
    }

    pub fn len(&self) -> usize {
        self.m
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn delta_z(&self) -> f64 {
        self.delta_z
    }

    pub fn atom(&self, i: usize) -> f64 {
        if i + 1 == self.m {
            self.v_max
        } else {
            self.v_min + i as f64 * self.delta_z
        }
    }

    pub fn atoms(&self) -> Vec<f64> {
        (0..self.m).map(|i| self.atom(i)).collect()
    }

    /// Same support up to the atom grid; the atom grid is a pure function of
    /// the three defining values.
    pub fn same_as(&self, other: &Support) -> bool {
        self.v_min == other.v_min && self.v_max == other.v_max && self.m == other.m
    }

    /// Distribution with all mass at `value`, clamped and split between the
    /// two neighbouring atoms.
    pub fn point_mass(&self, value: f64) -> CategoricalDistribution {
        let mut probs = vec![0.0; self.m];
        self.deposit(value, 1.0, &mut probs);
        CategoricalDistribution { support: *self, probs }
    }

    /// Adds `mass` at `value` by linear interpolation between the nearest
    /// atoms. Values beyond the grid are clamped to its ends.
    fn deposit(&self, value: f64, mass: f64, probs: &mut [f64]) {
        let v = value.clamp(self.v_min, self.v_max);
        let mut b = ((v - self.v_min) / self.delta_z).clamp(0.0, (self.m - 1) as f64);
        // rounding noise must not split mass that lands on an atom
        let nearest = b.round();
        if (b - nearest).abs() < 1e-11 {
            b = nearest;
        }
        let lower = b.floor();
        let l = lower as usize;
        let frac = b - lower;
        if frac == 0.0 || l + 1 >= self.m {
            probs[l] += mass;
        } else {
            probs[l] += mass * (1.0 - frac);
            probs[l + 1] += mass * frac;
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CategoricalDistribution {
    support: Support,
    probs: Vec<f64>,
}

impl CategoricalDistribution {
    /// Validates non-negativity and unit mass (within 1e-9).
    pub fn new(support: Support, probs: Vec<f64>) -> Result<Self> {
        if probs.len() != support.len() {
            return Err(DailError::Shape(format!(
                "distribution has {} probabilities for {} atoms",
                probs.len(),
                support.len()
            )));
        }
        if probs.iter().any(|p| !(p.is_finite() && *p >= 0.0)) {
            return Err(DailError::invalid("probabilities must be finite and non-negative"));
        }
        let total: f64 = probs.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(DailError::invalid(format!("probabilities sum to {total}")));
        }
        Ok(CategoricalDistribution { support, probs })
    }

    pub fn from_logits(support: Support, logits: &[f64]) -> Result<Self> {
        if logits.len() != support.len() {
            return Err(DailError::Shape(format!(
                "{} logits for {} atoms",
                logits.len(),
                support.len()
            )));
        }
        Ok(CategoricalDistribution {
            support,
            probs: tensor::softmax(logits)?,
        })
    }

    pub fn uniform(support: Support) -> Self {
        let m = support.len();
        CategoricalDistribution {
            support,
            probs: vec![1.0 / m as f64; m],
        }
    }

    pub fn support(&self) -> &Support {
        &self.support
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn into_probs(self) -> Vec<f64> {
        self.probs
    }

    pub fn expectation(&self) -> f64 {
        expectation(self)
    }

    pub fn cdf(&self) -> Vec<f64> {
        let mut acc = 0.0;
        self.probs
            .iter()
            .map(|p| {
                acc += p;
                acc
            })
            .collect()
    }
}

/// Projects `r + gamma * Z'` back onto the support. Terminal transitions
/// collapse to a point mass at `r`.
pub fn project_target(
    r: f64,
    gamma: f64,
    next_dist: &CategoricalDistribution,
    done: bool,
) -> Result<CategoricalDistribution> {
    if !(0.0..=1.0).contains(&gamma) {
        return Err(DailError::invalid(format!("gamma must lie in [0, 1], got {gamma}")));
    }
    let support = next_dist.support;
    if done {
        return Ok(support.point_mass(r));
    }
    let mut probs = vec![0.0; support.len()];
    for (j, &p) in next_dist.probs.iter().enumerate() {
        if p == 0.0 {
            continue;
        }
        support.deposit(r + gamma * support.atom(j), p, &mut probs);
    }
    Ok(CategoricalDistribution { support, probs })
}

/// `KL(target || softmax(logits))` with `0 log 0 = 0`.
pub fn kl_loss(target: &CategoricalDistribution, predicted_logits: &[f64]) -> Result<f64> {
    if predicted_logits.len() != target.probs.len() {
        return Err(DailError::Shape(format!(
            "{} logits for a {}-atom target",
            predicted_logits.len(),
            target.probs.len()
        )));
    }
    let lse = tensor::logsumexp(predicted_logits)?;
    Ok(target
        .probs
        .iter()
        .zip(predicted_logits)
        .filter(|(t, _)| **t > 0.0)
        .map(|(t, l)| t * (t.ln() - (l - lse)))
        .sum())
}

pub fn expectation(dist: &CategoricalDistribution) -> f64 {
    dist.probs
        .iter()
        .enumerate()
        .map(|(i, p)| p * dist.support.atom(i))
        .sum()
}

/// Earth mover's distance between two distributions on the same support:
/// the integral of the absolute CDF difference.
pub fn wasserstein1(a: &CategoricalDistribution, b: &CategoricalDistribution) -> Result<f64> {
    if !a.support.same_as(&b.support) {
        return Err(DailError::invalid("wasserstein1 needs distributions on the same support"));
    }
    let s = a.support;
    let (mut ca, mut cb, mut total) = (0.0, 0.0, 0.0);
    for i in 0..s.len() - 1 {
        ca += a.probs[i];
        cb += b.probs[i];
        total += (ca - cb).abs() * (s.atom(i + 1) - s.atom(i));
    }
    Ok(total)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use proptest::prelude::*;
    use rand::Rng as _;

    fn dist(support: Support, probs: &[f64]) -> CategoricalDistribution {
        CategoricalDistribution::new(support, probs.to_vec()).unwrap()
    }

    #[test]
    fn support_examples() {
        let s = make_support(-20.0, 20.0, 51).unwrap();
        assert!((s.delta_z() - 0.8).abs() < 1e-15);
        assert_eq!(s.atom(0), -20.0);
        assert_eq!(s.atom(50), 20.0);
        assert_eq!(make_support(0.0, 1.0, 2).unwrap().atoms(), vec![0.0, 1.0]);
        assert!(make_support(1.0, 1.0, 5).is_err());
        assert!(make_support(0.0, 1.0, 1).is_err());
        let atoms = s.atoms();
        assert!(atoms.windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn projection_worked_examples() {
        let s = make_support(-20.0, 20.0, 51).unwrap();
        let mut r = rng::seeded(0);
        let raw: Vec<f64> = (0..51).map(|_| r.random::<f64>()).collect();
        let total: f64 = raw.iter().sum();
        let d = dist(s, &raw.iter().map(|v| v / total).collect::<Vec<_>>());
        let same = project_target(0.0, 1.0, &d, false).unwrap();
        assert_eq!(same.probs(), d.probs());

        let s3 = make_support(0.0, 2.0, 3).unwrap();
        let p = project_target(0.5, 1.0, &dist(s3, &[0.0, 1.0, 0.0]), false).unwrap();
        assert_eq!(p.probs(), &[0.0, 0.5, 0.5]);

        let p = project_target(0.7, 0.99, &d, true).unwrap();
        for (i, &v) in p.probs().iter().enumerate() {
            let want = match i {
                25 => 0.125,
                26 => 0.875,
                _ => 0.0,
            };
            assert!((v - want).abs() < 1e-12, "atom {i}: {v}");
        }
    }

    #[test]
    fn projection_clamps_out_of_range_mass() {
        let s = make_support(0.0, 2.0, 3).unwrap();
        let p = project_target(5.0, 1.0, &dist(s, &[0.5, 0.0, 0.5]), false).unwrap();
        assert_eq!(p.probs(), &[0.0, 0.0, 1.0]);
        let p = project_target(-5.0, 0.5, &dist(s, &[0.5, 0.0, 0.5]), false).unwrap();
        assert_eq!(p.probs(), &[1.0, 0.0, 0.0]);
        assert!(project_target(0.0, 1.5, &dist(s, &[1.0, 0.0, 0.0]), false).is_err());
    }

    #[test]
    fn kl_examples() {
        let s = make_support(0.0, 1.0, 2).unwrap();
        let t = dist(s, &[1.0, 0.0]);
        assert!((kl_loss(&t, &[0.0, 0.0]).unwrap() - 2f64.ln()).abs() < 1e-15);
        let logits = [0.3, -1.2];
        let p = CategoricalDistribution::from_logits(s, &logits).unwrap();
        assert!(kl_loss(&p, &logits).unwrap().abs() < 1e-12);
        assert!(matches!(kl_loss(&t, &[0.0]), Err(DailError::Shape(_))));
    }

    #[test]
    fn kl_gradient_is_softmax_minus_target() {
        let s = make_support(-1.0, 1.0, 5).unwrap();
        let t = dist(s, &[0.1, 0.2, 0.0, 0.4, 0.3]);
        let logits = [0.5, -0.3, 1.1, 0.0, -2.0];
        let sm = tensor::softmax(&logits).unwrap();
        let eps = 1e-6;
        for i in 0..5 {
            let mut up = logits;
            let mut dn = logits;
            up[i] += eps;
            dn[i] -= eps;
            let fd = (kl_loss(&t, &up).unwrap() - kl_loss(&t, &dn).unwrap()) / (2.0 * eps);
            assert!((fd - (sm[i] - t.probs()[i])).abs() < 1e-9);
        }
        // and the tape op agrees with the analytic identity
        let mut store = tensor::ParamStore::new();
        let mut tape = tensor::Tape::new();
        let l = tape.leaf(logits.to_vec());
        let kl = tape.kl_div(l, 0, t.probs()).unwrap();
        assert!((tape.scalar(kl) - kl_loss(&t, &logits).unwrap()).abs() < 1e-15);
        tape.backward(kl, &mut store).unwrap();
    }

    #[test]
    fn expectation_examples() {
        let s = make_support(-20.0, 20.0, 51).unwrap();
        let mut probs = vec![0.0; 51];
        probs[37] = 1.0;
        assert_eq!(expectation(&dist(s, &probs)), s.atom(37));
        assert!(expectation(&CategoricalDistribution::uniform(s)).abs() < 1e-12);
    }

    #[test]
    fn wasserstein_examples() {
        let s = make_support(-20.0, 20.0, 51).unwrap();
        let a = s.point_mass(0.0);
        let b = s.point_mass(0.8);
        assert!((wasserstein1(&a, &b).unwrap() - 0.8).abs() < 1e-12);
        assert_eq!(wasserstein1(&a, &a).unwrap(), 0.0);

        let s3 = make_support(-1.0, 1.0, 3).unwrap();
        let bimodal = dist(s3, &[0.5, 0.0, 0.5]);
        let point = dist(s3, &[0.0, 1.0, 0.0]);
        assert_eq!(expectation(&bimodal), 0.0);
        assert_eq!(expectation(&point), 0.0);
        assert_eq!(wasserstein1(&bimodal, &point).unwrap(), 1.0);
        assert!(wasserstein1(&a, &bimodal).is_err());
    }

    fn arb_dist(m: usize) -> impl Strategy<Value = Vec<f64>> {
        proptest::collection::vec(0.0f64..1.0, m).prop_map(|v| {
            let v: Vec<f64> = v.iter().map(|x| x * x * x).collect();
            let total: f64 = v.iter().sum::<f64>().max(1e-12);
            let mut out: Vec<f64> = v.iter().map(|x| x / total).collect();
            if v.iter().sum::<f64>() <= 1e-12 {
                out = vec![0.0; out.len()];
                out[0] = 1.0;
            }
            out
        })
    }

    proptest! {
        #[test]
        fn projection_conserves_mass(r in -30.0f64..30.0, gamma in 0.0f64..=1.0, probs in arb_dist(11), done in any::<bool>()) {
            let s = make_support(-5.0, 5.0, 11).unwrap();
            let d = CategoricalDistribution::new(s, probs).unwrap();
            let p = project_target(r, gamma, &d, done).unwrap();
            let total: f64 = p.probs().iter().sum();
            prop_assert!((total - 1.0).abs() < 1e-9);
            prop_assert!(p.probs().iter().all(|&x| x >= 0.0));
        }

        #[test]
        fn projection_preserves_expectation_when_unclamped(r in -1.0f64..1.0, gamma in 0.0f64..=0.8, probs in arb_dist(11)) {
            let s = make_support(-5.0, 5.0, 11).unwrap();
            let d = CategoricalDistribution::new(s, probs).unwrap();
            let p = project_target(r, gamma, &d, false).unwrap();
            prop_assert!((expectation(&p) - (r + gamma * expectation(&d))).abs() < 1e-9);
        }

        #[test]
        fn wasserstein_is_a_metric_above_the_mean_gap(a in arb_dist(9), b in arb_dist(9), c in arb_dist(9)) {
            let s = make_support(-2.0, 3.0, 9).unwrap();
            let (a, b, c) = (dist(s, &a), dist(s, &b), dist(s, &c));
            let ab = wasserstein1(&a, &b).unwrap();
            prop_assert_eq!(ab, wasserstein1(&b, &a).unwrap());
            prop_assert!(ab >= 0.0);
            prop_assert!(ab <= wasserstein1(&a, &c).unwrap() + wasserstein1(&c, &b).unwrap() + 1e-9);
            prop_assert!(ab >= (expectation(&a) - expectation(&b)).abs() - 1e-9);
        }
    }
}
