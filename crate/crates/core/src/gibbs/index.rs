use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::foliated::{abs_continuity_check, build_foliated_box, empirical_conditional_density, AbsContinuityReport, BoxOptions, FoliatedBox};
use super::{density_bound, fit_budget, HolderBudget};
use crate::error::{Error, Result};
use crate::pesin::{in_block, PesinBlockParams};
use crate::systems::{bundle_exponents, plaque_chain, BundleFrame, BundleSel, MapFamily, Point};

/// Backward stages kept by default, which is also the depth of the budget fit.
pub const DEFAULT_CHAIN_KEEP: usize = 40;
const BUDGET_NODES: usize = 9;
const BUDGET_PLAQUES: usize = 8;

fn default_keep() -> usize {
    DEFAULT_CHAIN_KEEP
}

/// Box and budget for one level `E^u ⊕ E^c_1 ⊕ … ⊕ E^c_i`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LevelSpec {
    pub block: PesinBlockParams,
    pub delta: f64,
    pub beta: f64,
    /// Fitted on the box plaques when absent.
    #[serde(default)]
    pub budget: Option<HolderBudget>,
    /// First block point of the frame when absent.
    #[serde(default)]
    pub base_index: Option<usize>,
    #[serde(default)]
    pub tolerance: Option<f64>,
    #[serde(default = "default_keep")]
    pub chain_keep: usize,
    /// Minimum gap between plaque crossings; `β/8` when absent.
    #[serde(default)]
    pub separation: Option<f64>,
}

impl LevelSpec {
    pub fn new(block: PesinBlockParams, delta: f64, beta: f64) -> Self {
        Self { block, delta, beta, budget: None, base_index: None, tolerance: None, chain_keep: DEFAULT_CHAIN_KEEP, separation: None }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LevelReport {
    pub level: usize,
    pub bundle_dim: usize,
    pub exponents: Vec<f64>,
    /// Every exponent of the level bundle is positive.
    pub expanding: bool,
    pub base_index: Option<usize>,
    pub plaques: usize,
    pub budget: Option<HolderBudget>,
    pub c_test: Option<f64>,
    pub discard_fraction: Option<f64>,
    pub abs_continuity: Option<AbsContinuityReport>,
    pub passes: bool,
    pub note: Option<String>,
}

impl LevelReport {
    fn failed(level: usize, bundle_dim: usize, exponents: Vec<f64>, expanding: bool, note: String) -> Self {
        Self {
            level,
            bundle_dim,
            exponents,
            expanding,
            base_index: None,
            plaques: 0,
            budget: None,
            c_test: None,
            discard_fraction: None,
            abs_continuity: None,
            passes: false,
            note: Some(note),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LevelIndex {
    /// Largest `i` such that levels `0..=i` all pass; −1 if level 0 fails.
    pub index: i64,
    /// False when a level above a failing one passes.
    pub downward_closed: bool,
    pub levels: Vec<LevelReport>,
}

/// Tests levels `0, 1, …` in turn. Level `i` passes when every exponent of
/// `E^u ⊕ E^c_1 ⊕ … ⊕ E^c_i` is positive and the conditionals of the sample
/// on a foliated box tangent to that bundle are bounded by the density bound
/// of the level's budget.
///
/// `sample` is called once per tested level and must yield the same points
/// each time.
pub fn gibbs_level_index<F, S, I>(family: &F, frame: &BundleFrame, levels: &[LevelSpec], mut sample: S) -> Result<LevelIndex>
where
    F: MapFamily + ?Sized,
    S: FnMut() -> I,
    I: IntoIterator<Item = Point>,
{
    let spec = &frame.spec;
    if levels.is_empty() || levels.len() > spec.center_count + 1 {
        return Err(Error::invalid(format!(
            "{} levels requested; this splitting supports 1 to {}",
            levels.len(),
            spec.center_count + 1
        )));
    }
    let mut reports = Vec::with_capacity(levels.len());
    for (i, ls) in levels.iter().enumerate() {
        let sel = BundleSel::through_center(i);
        let bundle_dim = spec.dim_of(sel);
        let exponents = if bundle_dim == 0 { Vec::new() } else { bundle_exponents(family, frame, sel)? };
        let expanding = !exponents.is_empty() && exponents.iter().all(|&l| l > 0.0);
        if !expanding {
            let note = if exponents.is_empty() {
                "the level bundle is trivial".to_string()
            } else {
                format!("non-positive exponent in {exponents:.4?}")
            };
            reports.push(LevelReport::failed(i, bundle_dim, exponents, expanding, note));
            continue;
        }
        reports.push(match test_level(family, frame, i, sel, ls, sample()) {
            Ok(mut r) => {
                r.bundle_dim = bundle_dim;
                r.exponents = exponents;
                r.expanding = true;
                r
            }
            Err(e @ (Error::HypothesisViolation(_) | Error::InsufficientSample(_) | Error::ChartExit(_))) => {
                LevelReport::failed(i, bundle_dim, exponents, true, e.to_string())
            }
            Err(e) => return Err(e),
        });
    }
    let first_fail = reports.iter().position(|r| !r.passes);
    let index = first_fail.map_or(reports.len() as i64 - 1, |k| k as i64 - 1);
    let downward_closed = first_fail.is_none_or(|k| reports[k..].iter().all(|r| !r.passes));
    Ok(LevelIndex { index, downward_closed, levels: reports })
}

fn test_level<F: MapFamily + ?Sized, I: IntoIterator<Item = Point>>(
    family: &F,
    frame: &BundleFrame,
    level: usize,
    sel: BundleSel,
    ls: &LevelSpec,
    sample: I,
) -> Result<LevelReport> {
    let (fbox, budget) = level_box(family, frame, sel, ls)?;
    let base = fbox.base_index;
    let c_test = density_bound(&budget)?;
    let cond = empirical_conditional_density(&fbox, sample, ls.tolerance)?;
    let ac = abs_continuity_check(&fbox, &cond, c_test)?;
    let note = (!cond.valid).then(|| format!("discard fraction {:.3} exceeds the limit", cond.discard_fraction));
    Ok(LevelReport {
        level,
        bundle_dim: 0,
        exponents: Vec::new(),
        expanding: true,
        base_index: Some(base),
        plaques: fbox.plaques.len(),
        budget: Some(budget),
        c_test: Some(c_test),
        discard_fraction: Some(cond.discard_fraction),
        passes: cond.valid && ac.passes,
        abs_continuity: Some(ac),
        note,
    })
}

/// The foliated box a level spec describes for the bundle `sel`, with the
/// spec's budget or one fitted on the first box plaques.
pub fn level_box<F: MapFamily + ?Sized>(
    family: &F,
    frame: &BundleFrame,
    sel: BundleSel,
    ls: &LevelSpec,
) -> Result<(FoliatedBox, HolderBudget)> {
    let base = match ls.base_index {
        Some(b) => b,
        None => first_block_point(family, frame, &ls.block, sel, ls.chain_keep)?,
    };
    let opts = BoxOptions { chain_keep: ls.chain_keep, separation: ls.separation };
    let fbox = build_foliated_box(family, frame, base, &ls.block, sel, ls.delta, ls.beta, opts)?;
    let budget = match ls.budget {
        Some(b) => b,
        None => {
            let chains: Vec<_> = fbox.plaques.iter().take(BUDGET_PLAQUES).map(|p| p.chain()).collect();
            fit_budget(family, &chains, BUDGET_NODES, ls.chain_keep.clamp(4, DEFAULT_CHAIN_KEEP))?
        }
    };
    Ok((fbox, budget))
}

fn first_block_point<F: MapFamily + ?Sized>(
    family: &F,
    frame: &BundleFrame,
    params: &PesinBlockParams,
    sel: BundleSel,
    keep: usize,
) -> Result<usize> {
    let start = params.reach().max(keep + 40);
    for i in start..frame.len() {
        if in_block(family, frame, i, params, sel)?.member {
            return Ok(i);
        }
    }
    Err(Error::hypothesis(format!(
        "no frame point is in the block ℓ = {}, α = {}",
        params.ell, params.alpha
    )))
}

/// Two-sample comparison of transversal measures related by unstable
/// holonomy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HolonomyReport {
    pub theta1: f64,
    pub theta2: f64,
    pub transported: usize,
    pub reference: usize,
    pub ks_statistic: f64,
    pub p_value: f64,
    /// The samples are compatible at the 1% level.
    pub passes: bool,
}

/// Transports frame points near the transversal `{x_0 = θ₁}` along their
/// unstable plaques to `{x_0 = θ₂}` and compares the arrival coordinates
/// `x_1` with those of frame points slid from near `θ₂` onto the same
/// transversal (Kolmogorov–Smirnov, two-sample).
///
/// `distort` is applied to the transported coordinates; pass the identity
/// except in negative controls.
pub fn holonomy_check<F: MapFamily + ?Sized>(
    family: &F,
    frame: &BundleFrame,
    theta1: f64,
    theta2: f64,
    window: f64,
    radius: f64,
    max_points: usize,
    distort: impl Fn(f64) -> f64,
) -> Result<HolonomyReport> {
    let region = family.system().attractor_box().clone();
    if region.dim() < 2 || !region.periodic[0] {
        return Err(Error::invalid("holonomy check needs a periodic base coordinate x_0"));
    }
    if !(window > 0.0) || !(radius > (theta2 - theta1).abs() + window) {
        return Err(Error::invalid("plaque radius must exceed |θ₂ − θ₁| plus the window"));
    }
    const DEPTH: usize = 30;
    let width = region.width(0);
    let circ = |a: f64, b: f64| {
        let d = (b - a).rem_euclid(width);
        if d > width / 2.0 {
            d - width
        } else {
            d
        }
    };
    let near = |theta: f64| -> Vec<usize> {
        (DEPTH..frame.len()).filter(|&i| circ(theta, frame.point(i)[0]).abs() < window).take(max_points).collect()
    };
    let slide = |i: usize, target: f64| -> Result<Option<f64>> {
        let chain = match plaque_chain(family, frame, i, BundleSel::unstable(), radius, DEPTH, 0) {
            Ok(c) => c,
            Err(Error::ChartExit(_)) => return Ok(None),
            Err(e) => return Err(e),
        };
        let plaque = chain.plaque();
        let g = |s: f64| circ(target, plaque.point_at(&[s])[0]);
        let (mut a, mut b) = (-radius, radius);
        if g(a).signum() == g(b).signum() {
            return Ok(None);
        }
        let up = g(b) > g(a);
        for _ in 0..80 {
            let m = 0.5 * (a + b);
            if (g(m) < 0.0) == up {
                a = m;
            } else {
                b = m;
            }
        }
        Ok(Some(plaque.point_at(&[0.5 * (a + b)])[1]))
    };
    let collect = |idx: Vec<usize>| -> Result<Vec<f64>> {
        let v: Vec<Option<f64>> = idx.par_iter().map(|&i| slide(i, theta2)).collect::<Result<_>>()?;
        Ok(v.into_iter().flatten().collect())
    };
    let transported: Vec<f64> = collect(near(theta1))?.into_iter().map(&distort).collect();
    let reference = collect(near(theta2))?;
    if transported.len() < 50 || reference.len() < 50 {
        return Err(Error::InsufficientSample(format!(
            "holonomy samples too small: {} transported, {} reference",
            transported.len(),
            reference.len()
        )));
    }
    let (ks_statistic, p_value) = ks_two_sample(&transported, &reference);
    Ok(HolonomyReport {
        theta1,
        theta2,
        transported: transported.len(),
        reference: reference.len(),
        ks_statistic,
        p_value,
        passes: p_value >= 0.01,
    })
}

/// Two-sample Kolmogorov–Smirnov statistic and its asymptotic p-value.
pub(crate) fn ks_two_sample(a: &[f64], b: &[f64]) -> (f64, f64) {
    let mut a = a.to_vec();
    let mut b = b.to_vec();
    a.sort_by(f64::total_cmp);
    b.sort_by(f64::total_cmp);
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let (mut i, mut j, mut d) = (0, 0, 0.0f64);
    while i < a.len() && j < b.len() {
        let x = a[i].min(b[j]);
        while i < a.len() && a[i] <= x {
            i += 1;
        }
        while j < b.len() && b[j] <= x {
            j += 1;
        }
        d = d.max((i as f64 / na - j as f64 / nb).abs());
    }
    let ne = (na * nb / (na + nb)).sqrt();
    let lambda = (ne + 0.12 + 0.11 / ne) * d;
    (d, kolmogorov_q(lambda))
}

/// `Q(λ) = 2 Σ (−1)^{k−1} e^{−2k²λ²}`.
fn kolmogorov_q(lambda: f64) -> f64 {
    if lambda < 1e-3 {
        return 1.0;
    }
    let mut sum = 0.0;
    for k in 1..=100 {
        let term = (-2.0 * (k * k) as f64 * lambda * lambda).exp();
        sum += if k % 2 == 1 { term } else { -term };
        if term < 1e-16 {
            break;
        }
    }
    (2.0 * sum).clamp(0.0, 1.0)
}
