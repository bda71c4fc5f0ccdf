//! Pliss-type combinatorics on finite sequences of log-rates.
//!
//! Two statements are implemented over a finite window `[0, N)`:
//!
//! * the classical Pliss lemma: if `a_j ≤ C` and the average of `a` is at
//!   least `c2`, then at least `ζN` indices `n` satisfy
//!   `Σ_{j=m}^{n-1} a_j ≥ c1 (n - m)` for every `m < n`, with
//!   `ζ = (c2 - c1) / (C - c1)`;
//! * the density version: if `|a_n| ≤ C` and `a_n ≤ γ1` on a set `L` of
//!   density above `1 - ρ`, then the set
//!   `J = { j : Σ_{i<n} a_{i+j} ≤ n γ2 for all n }` has density above
//!   `1 - ε`, for an explicit `ρ(γ1, γ2, C, ε)`.
//!
//! Densities are window densities `#(S ∩ [0, N)) / N`; the infinite-horizon
//! quantifier "for all n" is read as "for all n with `j + n ≤ N`".

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A finite sequence of log-rates with a uniform bound `C`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RealSequence {
    values: Vec<f64>,
    bound: f64,
}

impl RealSequence {
    pub fn new(values: Vec<f64>, bound: f64) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::invalid("sequence must contain at least one value"));
        }
        if !(bound > 0.0) || !bound.is_finite() {
            return Err(Error::invalid(format!("bound C must be finite and positive, got {bound}")));
        }
        if let Some((i, v)) = values.iter().enumerate().find(|(_, v)| !v.is_finite() || v.abs() > bound) {
            return Err(Error::invalid(format!("|a[{i}]| = {} exceeds the bound C = {bound}", v.abs())));
        }
        Ok(Self { values, bound })
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn bound(&self) -> f64 {
        self.bound
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// The sequence `-a`, which turns contraction statements into expansion
    /// statements and back.
    pub fn negated(&self) -> Self {
        Self { values: self.values.iter().map(|v| -v).collect(), bound: self.bound }
    }

    /// The tail `a_j, a_{j+1}, …`.
    pub fn shifted(&self, j: usize) -> Result<Self> {
        if j >= self.values.len() {
            return Err(Error::invalid(format!("shift {j} leaves an empty sequence")));
        }
        Ok(Self { values: self.values[j..].to_vec(), bound: self.bound })
    }
}

/// Constants of the density version of the lemma.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PlissParams {
    pub gamma1: f64,
    pub gamma2: f64,
    pub bound: f64,
    pub epsilon: f64,
}

impl PlissParams {
    pub fn new(gamma1: f64, gamma2: f64, bound: f64, epsilon: f64) -> Result<Self> {
        let p = Self { gamma1, gamma2, bound, epsilon };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        let Self { gamma1, gamma2, bound, epsilon } = *self;
        if ![gamma1, gamma2, bound, epsilon].iter().all(|v| v.is_finite()) {
            return Err(Error::invalid("Pliss parameters must be finite"));
        }
        if !(gamma1 < gamma2) {
            return Err(Error::invalid(format!("need gamma1 < gamma2, got {gamma1} >= {gamma2}")));
        }
        if !(gamma2.max(0.0) < bound) {
            return Err(Error::invalid(format!("need max(0, gamma2) < C, got gamma2 = {gamma2}, C = {bound}")));
        }
        if !(epsilon > 0.0 && epsilon < 1.0) {
            return Err(Error::invalid(format!("epsilon must lie in (0, 1), got {epsilon}")));
        }
        Ok(())
    }
}

/// A sorted set of indices inside the window `[0, horizon)`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct IndexSet {
    indices: Vec<usize>,
    horizon: usize,
}

impl IndexSet {
    pub fn new(mut indices: Vec<usize>, horizon: usize) -> Result<Self> {
        indices.sort_unstable();
        indices.dedup();
        if let Some(&last) = indices.last() {
            if last >= horizon {
                return Err(Error::invalid(format!("index {last} outside the window [0, {horizon})")));
            }
        }
        Ok(Self { indices, horizon })
    }

    pub fn full(horizon: usize) -> Self {
        Self { indices: (0..horizon).collect(), horizon }
    }

    pub fn indices(&self) -> &[usize] {
        &self.indices
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn contains(&self, i: usize) -> bool {
        self.indices.binary_search(&i).is_ok()
    }

    /// `#S / horizon`.
    pub fn density(&self) -> f64 {
        if self.horizon == 0 {
            0.0
        } else {
            self.indices.len() as f64 / self.horizon as f64
        }
    }

    pub fn is_subset_of(&self, other: &IndexSet) -> bool {
        self.indices.iter().all(|&i| other.contains(i))
    }
}

/// `ρ = ½ · min{1, (γ2-γ1) / (2(2C-γ1)), ε (γ2-γ1) / (C-γ1)}`.
pub fn rho_threshold(params: &PlissParams) -> Result<f64> {
    params.validate()?;
    let PlissParams { gamma1, gamma2, bound, epsilon } = *params;
    let gap = gamma2 - gamma1;
    let m = 1.0_f64.min(gap / (2.0 * (2.0 * bound - gamma1))).min(gap / (bound - gamma1) * epsilon);
    Ok(0.5 * m)
}

/// Indices `j` such that every forward partial sum starting at `j` stays
/// below the line of slope `gamma2`, within the window.
///
/// Linear time: with `Q(k) = Σ_{i<k} (a_i - γ2)` the condition reads
/// `Q(j) ≥ max_{j < k ≤ N} Q(k)`.
pub fn pliss_set(seq: &RealSequence, gamma2: f64) -> IndexSet {
    let a = seq.values();
    let n = a.len();
    let mut q = Vec::with_capacity(n + 1);
    q.push(0.0);
    for &v in a {
        let last = *q.last().unwrap();
        q.push(last + (v - gamma2));
    }
    let mut members = Vec::new();
    let mut suffix_max = f64::NEG_INFINITY;
    for j in (0..n).rev() {
        suffix_max = suffix_max.max(q[j + 1]);
        if q[j] >= suffix_max {
            members.push(j);
        }
    }
    members.reverse();
    IndexSet { indices: members, horizon: n }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlissLikeReport {
    pub rho_used: f64,
    pub density_of_l: f64,
    /// Whether `density(L) > 1 - ρ`; when false the lemma promises nothing.
    pub hypothesis_met: bool,
    pub j: IndexSet,
    pub density_of_j: f64,
    /// `density(J) > 1 - ε`.
    pub conclusion_holds: bool,
}

/// Checks the density version of the lemma on one finite sequence.
///
/// Fails when `L` leaves the window or when some `a_n` with `n ∈ L`
/// exceeds `γ1`. Whether `L` is dense enough is reported, not enforced.
pub fn verify_pliss_like(seq: &RealSequence, l: &IndexSet, params: &PlissParams) -> Result<PlissLikeReport> {
    params.validate()?;
    let n = seq.len();
    if l.horizon() != n {
        return Err(Error::invalid(format!("L is defined on a window of {} but the sequence has {n} terms", l.horizon())));
    }
    if seq.bound() > params.bound {
        return Err(Error::invalid(format!(
            "sequence bound {} exceeds the lemma constant C = {}",
            seq.bound(),
            params.bound
        )));
    }
    if let Some(&i) = l.indices().iter().find(|&&i| seq.values()[i] > params.gamma1) {
        return Err(Error::hypothesis(format!("a[{i}] = {} > gamma1 = {} on L", seq.values()[i], params.gamma1)));
    }
    let rho = rho_threshold(params)?;
    let density_of_l = l.density();
    let j = pliss_set(seq, params.gamma2);
    let density_of_j = j.density();
    Ok(PlissLikeReport {
        rho_used: rho,
        density_of_l,
        hypothesis_met: density_of_l > 1.0 - rho,
        density_of_j,
        conclusion_holds: density_of_j > 1.0 - params.epsilon,
        j,
    })
}

/// Pliss times of an expanding sequence: all `n ∈ [1, N]` with
/// `Σ_{j=m}^{n-1} a_j ≥ c1 (n - m)` for every `0 ≤ m < n`.
///
/// Requires `c1 < c2 ≤ C` and `Σ_{j<N} a_j ≥ c2 N`. The returned set lives in
/// the window `[0, N+1)` and has at least `ζN` elements,
/// `ζ = (c2 - c1) / (C - c1)`.
pub fn classic_pliss_times(seq: &RealSequence, c1: f64, c2: f64) -> Result<IndexSet> {
    let bound = seq.bound();
    if !(c1 < c2 && c2 <= bound) {
        return Err(Error::invalid(format!("need c1 < c2 <= C, got c1 = {c1}, c2 = {c2}, C = {bound}")));
    }
    let a = seq.values();
    let n = a.len();
    let total: f64 = a.iter().sum();
    if total < c2 * n as f64 {
        return Err(Error::hypothesis(format!(
            "average {} is below c2 = {c2}",
            total / n as f64
        )));
    }
    // S(k) = Σ_{j<k} (a_j - c1); k is a Pliss time iff S(k) ≥ S(m) for all m < k.
    let mut times = Vec::new();
    let mut s = 0.0;
    let mut running_max = 0.0_f64;
    for (k, &v) in a.iter().enumerate() {
        s += v - c1;
        if s >= running_max {
            times.push(k + 1);
        }
        running_max = running_max.max(s);
    }
    Ok(IndexSet { indices: times, horizon: n + 1 })
}

/// Pliss times for the contraction orientation: all `n` with
/// `Σ_{j=m}^{n-1} a_j ≤ c1 (n - m)` for every `m < n`, given
/// `c2 ≤ c1`, `a_j ≥ -C` and average at most `c2`.
pub fn classic_pliss_times_contracting(seq: &RealSequence, c1: f64, c2: f64) -> Result<IndexSet> {
    classic_pliss_times(&seq.negated(), -c1, -c2)
}

/// `ζ = (c2 - c1) / (C - c1)`, the guaranteed density of Pliss times.
pub fn pliss_density(c1: f64, c2: f64, bound: f64) -> f64 {
    (c2 - c1) / (bound - c1)
}

/// A random instance satisfying the hypotheses of the density lemma.
#[derive(Debug, Clone)]
pub struct PlissTrial {
    pub sequence: RealSequence,
    pub l: IndexSet,
}

/// Draws a sequence of length `n` whose good set `L` has density strictly
/// above `1 - ρ`. On `L` the value is exactly `γ1`; off `L` it is `±C` with
/// equal probability, so the bad indices are as damaging as the bound allows.
pub fn random_trial(params: &PlissParams, n: usize, seed: u64) -> Result<PlissTrial> {
    params.validate()?;
    if n == 0 {
        return Err(Error::invalid("trial length must be positive"));
    }
    if params.gamma1 < -params.bound {
        return Err(Error::invalid("gamma1 < -C cannot be attained by a sequence bounded by C"));
    }
    let rho = rho_threshold(params)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // Largest bad count keeping #L / n > 1 - ρ strictly.
    let max_bad = ((rho * n as f64).ceil() as usize).saturating_sub(1);
    let bad_count = if max_bad == 0 { 0 } else { rng.gen_range(0..=max_bad) };
    let bad = rand::seq::index::sample(&mut rng, n, bad_count).into_vec();
    let mut values = vec![params.gamma1; n];
    let mut is_bad = vec![false; n];
    for &i in &bad {
        is_bad[i] = true;
        values[i] = if rng.gen_bool(0.5) { params.bound } else { -params.bound };
    }
    let l = (0..n).filter(|&i| !is_bad[i]).collect();
    Ok(PlissTrial { sequence: RealSequence::new(values, params.bound)?, l: IndexSet::new(l, n)? })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    /// Direct double loop over (j, n); independent of the prefix-sum path.
    fn brute_pliss_set(a: &[f64], gamma2: f64) -> Vec<usize> {
        let n = a.len();
        (0..n)
            .filter(|&j| {
                let mut sum = 0.0;
                (1..=n - j).all(|len| {
                    sum += a[j + len - 1];
                    sum <= len as f64 * gamma2
                })
            })
            .collect()
    }

    fn brute_classic(a: &[f64], c1: f64) -> Vec<usize> {
        (1..=a.len())
            .filter(|&n| (0..n).all(|m| a[m..n].iter().sum::<f64>() >= c1 * (n - m) as f64))
            .collect()
    }

    #[test]
    fn rho_examples() {
        let p = PlissParams::new(-1.0, -0.5, 2.0, 0.1).unwrap();
        // min{1, 0.5/10, (0.5/3)·0.1} = 1/60, halved.
        assert_relative_eq!(rho_threshold(&p).unwrap(), 1.0 / 120.0, max_relative = 1e-14);
        let p = PlissParams::new(-1.0, 0.0, 1.0, 1.0 - 1e-9).unwrap();
        assert_relative_eq!(rho_threshold(&p).unwrap(), 1.0 / 12.0, max_relative = 1e-14);
    }

    #[test]
    fn rho_vanishes_with_the_gap() {
        let mut last = f64::INFINITY;
        for k in 1..12 {
            let gap = 10f64.powi(-k);
            let p = PlissParams::new(-1.0, -1.0 + gap, 2.0, 0.5).unwrap();
            let rho = rho_threshold(&p).unwrap();
            assert!(rho > 0.0 && rho < last);
            assert!(rho <= gap);
            last = rho;
        }
    }

    #[test]
    fn invalid_params_rejected() {
        assert!(PlissParams::new(0.0, 0.0, 1.0, 0.5).is_err());
        assert!(PlissParams::new(-1.0, 2.0, 1.0, 0.5).is_err());
        assert!(PlissParams::new(-1.0, -0.5, 1.0, 0.0).is_err());
        assert!(PlissParams::new(-1.0, -0.5, 1.0, 1.0).is_err());
        let bad = PlissParams { gamma1: 1.0, gamma2: 0.0, bound: 2.0, epsilon: 0.5 };
        assert!(rho_threshold(&bad).is_err());
    }

    #[test]
    fn sequence_construction() {
        assert!(RealSequence::new(vec![], 1.0).is_err());
        assert!(RealSequence::new(vec![1.5], 1.0).is_err());
        assert!(RealSequence::new(vec![f64::NAN], 1.0).is_err());
        assert!(RealSequence::new(vec![1.0, -1.0], 1.0).is_ok());
    }

    #[test]
    fn pliss_set_constant_sequences() {
        let s = RealSequence::new(vec![-1.0; 100], 2.0).unwrap();
        assert_eq!(pliss_set(&s, -0.5), IndexSet::full(100));
        let s = RealSequence::new(vec![1.0; 100], 2.0).unwrap();
        assert!(pliss_set(&s, -0.5).is_empty());
    }

    #[test]
    fn pliss_set_alternating() {
        let a: Vec<f64> = (0..40).map(|i| if i % 2 == 0 { -2.0 } else { 0.0 }).collect();
        let s = RealSequence::new(a.clone(), 2.0).unwrap();
        let set = pliss_set(&s, -0.5);
        assert_eq!(set.indices(), brute_pliss_set(&a, -0.5).as_slice());
        assert_eq!(set.indices(), (0..40).step_by(2).collect::<Vec<_>>().as_slice());
    }

    #[test]
    fn pliss_set_ties_are_members() {
        let s = RealSequence::new(vec![-0.5, -0.5, -0.5], 1.0).unwrap();
        assert_eq!(pliss_set(&s, -0.5).len(), 3);
    }

    #[test]
    fn verify_uniform_case() {
        let p = PlissParams::new(-1.0, -0.5, 2.0, 0.1).unwrap();
        let s = RealSequence::new(vec![-1.0; 1000], 2.0).unwrap();
        let r = verify_pliss_like(&s, &IndexSet::full(1000), &p).unwrap();
        assert!(r.hypothesis_met && r.conclusion_holds);
        assert_eq!(r.density_of_j, 1.0);
    }

    #[test]
    fn verify_rejects_bad_inputs() {
        let p = PlissParams::new(-1.0, -0.5, 2.0, 0.1).unwrap();
        let s = RealSequence::new(vec![-1.0, 0.0, -1.0], 2.0).unwrap();
        let l = IndexSet::full(3);
        assert!(matches!(verify_pliss_like(&s, &l, &p), Err(Error::HypothesisViolation(_))));
        assert!(IndexSet::new(vec![0, 4], 4).is_err());
        let l = IndexSet::new(vec![0, 2], 5).unwrap();
        assert!(matches!(verify_pliss_like(&s, &l, &p), Err(Error::InvalidParameter(_))));
    }

    #[test]
    fn verify_vacuous_hypothesis() {
        let p = PlissParams::new(-1.0, -0.5, 2.0, 0.1).unwrap();
        let rho = rho_threshold(&p).unwrap();
        let n = 10_000;
        let bad = (2.0 * rho * n as f64).round() as usize;
        let mut a = vec![-1.0; n];
        for v in a.iter_mut().take(bad) {
            *v = 2.0;
        }
        let s = RealSequence::new(a, 2.0).unwrap();
        let l = IndexSet::new((bad..n).collect(), n).unwrap();
        let r = verify_pliss_like(&s, &l, &p).unwrap();
        assert!(!r.hypothesis_met);
        assert!((r.density_of_l - (1.0 - 2.0 * rho)).abs() <= 1.0 / n as f64);
    }

    #[test]
    fn classic_constant_sequence() {
        let s = RealSequence::new(vec![0.5; 30], 1.0).unwrap();
        let t = classic_pliss_times(&s, 0.2, 0.5).unwrap();
        assert_eq!(t.indices(), (1..=30).collect::<Vec<_>>().as_slice());
    }

    #[test]
    fn classic_matches_brute_force_small() {
        // 20 terms mixing C and c1 - δ with average ≥ c2.
        let (c, c1, c2, delta) = (1.0, 0.1, 0.3, 0.4);
        let pattern = [c, c1 - delta, c, c, c1 - delta, c1 - delta, c, c1 - delta, c, c, c1 - delta, c, c1 - delta, c1 - delta, c, c, c1 - delta, c, c1 - delta, c];
        let a = pattern.to_vec();
        assert!(a.iter().sum::<f64>() >= c2 * 20.0);
        let s = RealSequence::new(a.clone(), c).unwrap();
        let t = classic_pliss_times(&s, c1, c2).unwrap();
        assert_eq!(t.indices(), brute_classic(&a, c1).as_slice());
        assert!(t.len() as f64 >= pliss_density(c1, c2, c) * 20.0);
    }

    #[test]
    fn classic_rejects_low_average() {
        let s = RealSequence::new(vec![0.0; 10], 1.0).unwrap();
        assert!(matches!(classic_pliss_times(&s, -0.5, 0.1), Err(Error::HypothesisViolation(_))));
        assert!(matches!(classic_pliss_times(&s, 0.5, 0.1), Err(Error::InvalidParameter(_))));
    }

    #[test]
    fn contracting_adapter() {
        let a = vec![-0.8, 0.2, -0.9, -0.7, 0.5, -1.0];
        let s = RealSequence::new(a.clone(), 1.0).unwrap();
        let t = classic_pliss_times_contracting(&s, -0.1, -0.3).unwrap();
        let expect: Vec<usize> = (1..=a.len())
            .filter(|&n| (0..n).all(|m| a[m..n].iter().sum::<f64>() <= -0.1 * (n - m) as f64))
            .collect();
        assert_eq!(t.indices(), expect.as_slice());
    }

    #[test]
    fn random_trial_meets_hypotheses() {
        let p = PlissParams::new(-1.0, -0.5, 2.0, 0.1).unwrap();
        for seed in 0..20 {
            let t = random_trial(&p, 2000, seed).unwrap();
            let r = verify_pliss_like(&t.sequence, &t.l, &p).unwrap();
            assert!(r.hypothesis_met, "seed {seed}: density {}", r.density_of_l);
            assert!(r.conclusion_holds);
        }
    }
}
