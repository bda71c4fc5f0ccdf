//! Disintegration along unstable plaques: unstable Jacobians, the Liu–Qian
//! density-ratio product and its a-priori bound, foliated boxes with
//! empirical conditional densities, the Gibbs level index and the entropy
//! formula check.

mod entropy;
mod foliated;
mod index;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::gram_volume;
use crate::systems::bundles::fit_rate;
use crate::systems::{BundleFrame, BundleSel, MapFamily, PlaqueChain, Point};

pub use entropy::{pesin_formula_check, recurrence_entropy, symbolize, EntropyReport, FormulaReport, RecurrencePoint};
pub use foliated::{
    abs_continuity_check, build_foliated_box, empirical_conditional_density, liu_qian_comparison, ratio_bound_check, write_density_csv,
    AbsContinuityReport, BoxOptions, BoxPlaque, ConditionalDensity, ConditionalReport, FoliatedBox, RatioBound, RatioComparison, WorstCell,
    CONDITIONAL_BINS, MAX_DISCARD,
};
pub use index::{gibbs_level_index, holonomy_check, level_box, HolonomyReport, LevelIndex, LevelReport, LevelSpec, DEFAULT_CHAIN_KEEP};

/// Constants controlling how fast `log J^E` can vary along plaques and how
/// fast plaques contract under `f^{-1}`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HolderBudget {
    #[serde(rename = "C_H")]
    pub c_h: f64,
    pub alpha_h: f64,
    #[serde(rename = "C")]
    pub c: f64,
    pub lambda_star: f64,
}

impl HolderBudget {
    pub fn new(c_h: f64, alpha_h: f64, c: f64, lambda_star: f64) -> Result<Self> {
        let b = Self { c_h, alpha_h, c, lambda_star };
        b.validate()?;
        Ok(b)
    }

    /// `C_H = 0` is allowed: it describes a constant Jacobian.
    pub fn validate(&self) -> Result<()> {
        if !(self.c_h >= 0.0) || !self.c_h.is_finite() {
            return Err(Error::invalid(format!("C_H must be finite and non-negative, got {}", self.c_h)));
        }
        if !(self.alpha_h > 0.0 && self.alpha_h <= 1.0) {
            return Err(Error::invalid(format!("α_H must lie in (0,1], got {}", self.alpha_h)));
        }
        if !(self.c > 0.0) || !self.c.is_finite() {
            return Err(Error::invalid(format!("C must be positive, got {}", self.c)));
        }
        if !(self.lambda_star > 0.0 && self.lambda_star < 1.0) {
            return Err(Error::invalid(format!("λ_* must lie in (0,1), got {}", self.lambda_star)));
        }
        Ok(())
    }

    fn series_ratio(&self) -> f64 {
        self.lambda_star.powf(self.alpha_h)
    }

    /// `exp{C_H (C d)^{α_H} λ_*^{α_H T}/(1 − λ_*^{α_H})} − 1`: relative error
    /// of the density-ratio product truncated after `T` factors for points
    /// at distance `d`.
    pub fn tail_bound(&self, d: f64, t: usize) -> f64 {
        let q = self.series_ratio();
        (self.c_h * (self.c * d).powf(self.alpha_h) * q.powi(t as i32) / (1.0 - q)).exp_m1()
    }

    /// Smallest `T ≥ 1` with `tail_bound(d, T) < rel`.
    pub fn truncation_depth(&self, d: f64, rel: f64) -> usize {
        let q = self.series_ratio();
        let head = self.c_h * (self.c * d).powf(self.alpha_h) / (1.0 - q);
        if !(head > 0.0) {
            return 1;
        }
        let t = ((rel.ln_1p() / head).ln() / q.ln()).ceil();
        let mut t = if t.is_finite() { t.max(1.0) as usize } else { 1 };
        // guard against rounding at the boundary
        while self.tail_bound(d, t) >= rel {
            t += 1;
        }
        t
    }
}

/// `L = exp{C_H C^{α_H}/(1 − λ_*^{α_H})}`, the bound on density ratios of
/// points within unit distance on one plaque.
pub fn density_bound(budget: &HolderBudget) -> Result<f64> {
    budget.validate()?;
    Ok((budget.c_h * budget.c.powf(budget.alpha_h) / (1.0 - budget.series_ratio())).exp())
}

/// `|det Df|_E|` at frame point `idx`: the volume of the pushed-forward
/// frame of `E`.
pub fn unstable_jacobian<F: MapFamily + ?Sized>(family: &F, frame: &BundleFrame, idx: usize, sel: BundleSel) -> Result<f64> {
    unstable_jacobian_n(family, frame, idx, sel, 1)
}

/// `|det Df^n|_E|` at frame point `idx`.
pub fn unstable_jacobian_n<F: MapFamily + ?Sized>(
    family: &F,
    frame: &BundleFrame,
    idx: usize,
    sel: BundleSel,
    n: usize,
) -> Result<f64> {
    sel.check(&frame.spec)?;
    if idx + n >= frame.len() {
        return Err(Error::invalid(format!("{n} steps from point {idx} run past the frame of {} points", frame.len())));
    }
    let mut b = frame.basis(idx, sel);
    for k in idx..idx + n {
        b = frame.orbit.jacobian(family, k) * b;
    }
    let v = gram_volume(&b);
    if !(v > 0.0) || !v.is_finite() {
        return Err(Error::numerical(format!("degenerate frame of E at point {idx}")));
    }
    Ok(v)
}

/// A truncated Liu–Qian product.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DensityRatio {
    pub ratio: f64,
    pub log_ratio: f64,
    /// Relative error bound of the truncation.
    pub tail_bound: f64,
    pub depth: usize,
}

/// `ρ(y)/ρ(z) ≈ ∏_{j=1}^{T} J^E(f^{-j}z)/J^E(f^{-j}y)` for plaque points with
/// chain parameters `s_y`, `s_z`.
pub fn density_ratio_params<F: MapFamily + ?Sized>(
    family: &F,
    chain: &PlaqueChain,
    s_y: &[f64],
    s_z: &[f64],
    depth: usize,
    budget: &HolderBudget,
) -> Result<DensityRatio> {
    budget.validate()?;
    let plaque = chain.plaque();
    if !plaque.contains_param(s_y) || !plaque.contains_param(s_z) {
        return Err(Error::invalid("density ratio requested for parameters outside the plaque"));
    }
    let d = plaque.region_distance(&plaque.point_at(s_y), &plaque.point_at(s_z));
    if s_y == s_z {
        return Ok(DensityRatio { ratio: 1.0, log_ratio: 0.0, tail_bound: 0.0, depth });
    }
    let ly = chain.backward_log_jacobians(family, s_y, depth)?;
    let lz = chain.backward_log_jacobians(family, s_z, depth)?;
    let log_ratio: f64 = lz.iter().zip(&ly).map(|(a, b)| a - b).sum();
    Ok(DensityRatio { ratio: log_ratio.exp(), log_ratio, tail_bound: budget.tail_bound(d, depth), depth })
}

/// As [`density_ratio_params`] for points `y`, `z`, which must lie on the
/// chain's plaque.
pub fn density_ratio<F: MapFamily + ?Sized>(
    family: &F,
    chain: &PlaqueChain,
    y: &Point,
    z: &Point,
    depth: usize,
    budget: &HolderBudget,
) -> Result<DensityRatio> {
    let plaque = chain.plaque();
    let on = |p: &Point| -> Result<Vec<f64>> {
        match plaque.locate(p) {
            Some((s, off)) if off <= 1e-9 => Ok(s),
            Some((_, off)) => Err(Error::invalid(format!("point is {off:.2e} away from the plaque"))),
            None => Err(Error::invalid("point does not project onto the plaque")),
        }
    };
    let (sy, sz) = (on(y)?, on(z)?);
    density_ratio_params(family, chain, &sy, &sz, depth, budget)
}

/// Budget fitted on a set of plaque chains.
///
/// `C_H, α_H`: `log|Δ log J^E|` regressed on `log d` over pairs of points of
/// each plaque gives `α_H` (clamped to `[0.05, 1]`); `C_H` is then the
/// smallest constant dominating every pair. `C, λ_*`: the worst
/// `d(f^{-n}y, f^{-n}z)/d(y,z)` over the same pairs, fitted with the
/// domination rate rule.
pub fn fit_budget<F: MapFamily + ?Sized>(family: &F, chains: &[&PlaqueChain], nodes: usize, depth: usize) -> Result<HolderBudget> {
    if chains.is_empty() {
        return Err(Error::InsufficientSample("no plaques to fit a Hölder budget on".into()));
    }
    if nodes < 3 || depth < 4 {
        return Err(Error::invalid("budget fit needs at least 3 nodes and depth 4"));
    }
    let mut pairs: Vec<(f64, f64)> = Vec::new();
    let mut worst = vec![f64::NEG_INFINITY; depth];
    for chain in chains {
        let plaque = chain.plaque();
        let params: Vec<Vec<f64>> = node_params(&plaque, nodes);
        let orbits = params.iter().map(|s| chain.backward_orbit(family, s, depth)).collect::<Result<Vec<_>>>()?;
        let log_j: Vec<f64> = orbits
            .iter()
            .map(|o| {
                let (p, t) = &o[0];
                let jac = family.step_jacobian(chain.omega_at_tip(), p);
                match t {
                    Some(t) => (jac * t).norm().ln(),
                    None => jac.determinant().abs().ln(),
                }
            })
            .collect();
        for a in 0..params.len() {
            for b in a + 1..params.len() {
                let d0 = plaque.region_distance(&orbits[a][0].0, &orbits[b][0].0);
                if !(d0 > 0.0) {
                    continue;
                }
                pairs.push((d0, (log_j[a] - log_j[b]).abs()));
                for n in 1..=depth {
                    let dn = plaque.region_distance(&orbits[a][n].0, &orbits[b][n].0);
                    worst[n - 1] = worst[n - 1].max((dn / d0).ln());
                }
            }
        }
    }
    if pairs.is_empty() {
        return Err(Error::InsufficientSample("plaques too short to fit a Hölder budget".into()));
    }
    let (lambda_star, c) = fit_rate(&worst).ok_or_else(|| {
        Error::hypothesis(format!(
            "plaques do not contract under backward iteration: worst log-ratio {:.3} after {depth} steps",
            worst[depth - 1]
        ))
    })?;
    let informative: Vec<(f64, f64)> = pairs.iter().copied().filter(|(_, v)| *v > 1e-12).collect();
    let (c_h, alpha_h) = if informative.len() < 3 {
        (0.0, 1.0)
    } else {
        let n = informative.len() as f64;
        let (mx, my) = informative.iter().fold((0.0, 0.0), |acc, (d, v)| (acc.0 + d.ln() / n, acc.1 + v.ln() / n));
        let (sxy, sxx) = informative
            .iter()
            .fold((0.0, 0.0), |acc, (d, v)| (acc.0 + (d.ln() - mx) * (v.ln() - my), acc.1 + (d.ln() - mx).powi(2)));
        let alpha = if sxx > 0.0 { (sxy / sxx).clamp(0.05, 1.0) } else { 1.0 };
        let c_h = pairs.iter().map(|(d, v)| v / d.powf(alpha)).fold(0.0, f64::max);
        (c_h, alpha)
    };
    HolderBudget::new(c_h, alpha_h, c.max(1.0), lambda_star)
}

/// `nodes` evenly spaced parameters across a plaque (a grid for cubes).
fn node_params(plaque: &crate::systems::LocalManifold, nodes: usize) -> Vec<Vec<f64>> {
    let r = plaque.radius;
    let line: Vec<f64> = (0..nodes).map(|k| -r + 2.0 * r * k as f64 / (nodes - 1) as f64).collect();
    if plaque.is_curve() {
        return line.into_iter().map(|s| vec![s]).collect();
    }
    let d = plaque.e_dim();
    let total = nodes.pow(d as u32);
    (0..total)
        .map(|mut c| {
            let mut s = vec![0.0; d];
            for v in s.iter_mut().rev() {
                *v = line[c % nodes];
                c /= nodes;
            }
            s
        })
        .collect()
}
