use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{density_ratio_params, DensityRatio, HolderBudget};
use crate::error::{Error, Result};
use crate::linalg::complement;
use crate::pesin::{in_block, PesinBlockParams};
use crate::systems::{plaque_chain, BundleFrame, BundleSel, LocalManifold, MapFamily, Matrix, PlaqueChain, Point};

/// Histogram bins per parameter axis of a plaque.
pub const CONDITIONAL_BINS: usize = 32;
/// Largest fraction of in-box samples that may fail to match a plaque.
pub const MAX_DISCARD: f64 = 0.05;
/// Graph-transform steps used to build each plaque.
const GRAPH_DEPTH: usize = 40;
const MAX_PLAQUES: usize = 64;

/// One plaque of a foliated box. Box parameters `s` correspond to chain
/// parameters `s + offset`.
#[derive(Debug, Clone)]
pub struct BoxPlaque {
    pub index: usize,
    pub plaque: LocalManifold,
    /// Coordinates of the crossing with the transversal.
    pub gamma: Vec<f64>,
    pub offset: Vec<f64>,
    chain: PlaqueChain,
}

impl BoxPlaque {
    pub fn chain(&self) -> &PlaqueChain {
        &self.chain
    }

    pub fn chain_params(&self, s: &[f64]) -> Vec<f64> {
        s.iter().zip(&self.offset).map(|(a, b)| a + b).collect()
    }
}

/// A transversal through a block point together with disjoint plaques
/// crossing it.
#[derive(Debug, Clone)]
pub struct FoliatedBox {
    pub base_index: usize,
    pub base: Point,
    pub sel: BundleSel,
    pub e_dim: usize,
    pub delta: f64,
    pub beta: f64,
    pub params: PesinBlockParams,
    /// Orthonormal basis of the complementary bundle at the base point.
    pub transversal: Matrix,
    /// Half-width of every plaque in the box.
    pub box_radius: f64,
    pub plaques: Vec<BoxPlaque>,
    base_plaque: LocalManifold,
}

impl FoliatedBox {
    /// Leaf-binning tolerance used when none is given.
    pub fn default_tolerance(&self) -> f64 {
        self.beta / 8.0
    }

    /// Backward stages kept by each plaque chain.
    pub fn chain_depth(&self) -> usize {
        self.plaques.first().map_or(0, |p| p.chain.depth())
    }

    /// Where `q` sits relative to the base plaque: `None` if it is far from
    /// every plaque, else whether it lies in the core tube (offset ≤ `β/2`,
    /// parameter within the box radius) used for the discard count. Leaves
    /// tilt against each other: plaques crossing the transversal within `β`
    /// cover the narrower core along its whole length, and the outer reach of
    /// `4β` keeps the ends of plaques that leave it.
    fn position(&self, q: &Point) -> Option<bool> {
        let (s, off) = self.base_plaque.locate(q)?;
        if off > 4.0 * self.beta {
            return None;
        }
        Some(off <= self.beta / 2.0 && s.iter().all(|v| v.abs() <= self.box_radius))
    }

    /// Nearest plaque within `tol` and the parameters of `q` on it.
    fn assign(&self, q: &Point, tol: f64) -> Option<(usize, Vec<f64>)> {
        let mut best: Option<(usize, Vec<f64>, f64)> = None;
        for (k, p) in self.plaques.iter().enumerate() {
            if let Some((s, off)) = p.plaque.locate(q) {
                if off <= tol && best.as_ref().is_none_or(|b| off < b.2) {
                    best = Some((k, s, off));
                }
            }
        }
        best.map(|(k, s, _)| (k, s))
    }

    /// `ρ(y)/ρ(z)` for box parameters on plaque `k`.
    pub fn density_ratio<F: MapFamily + ?Sized>(
        &self,
        family: &F,
        k: usize,
        s_y: &[f64],
        s_z: &[f64],
        depth: usize,
        budget: &HolderBudget,
    ) -> Result<DensityRatio> {
        let p = self.plaques.get(k).ok_or_else(|| Error::invalid(format!("box has no plaque {k}")))?;
        density_ratio_params(family, &p.chain, &p.chain_params(s_y), &p.chain_params(s_z), depth, budget)
    }

    /// Largest distance between two points of one plaque (bounds the `d` in
    /// tail estimates).
    pub fn plaque_diameter(&self) -> f64 {
        let r = self.box_radius;
        self.plaques
            .iter()
            .map(|p| {
                let lo = vec![-r; p.offset.len()];
                let hi = vec![r; p.offset.len()];
                p.plaque.region_distance(&p.plaque.point_at(&lo), &p.plaque.point_at(&hi))
            })
            .fold(0.0, f64::max)
    }
}

/// Finds the chain parameter where a curve plaque crosses the transversal
/// hyperplane through `base` (normal `u_base`).
fn crossing(plaque: &LocalManifold, base: &Point, u_base: &Point) -> Option<f64> {
    let g = |s: f64| u_base.dot(&plaque.region_displacement(base, &plaque.point_at(&[s])));
    let r = plaque.radius;
    let (mut a, mut b) = (-r, r);
    let (ga, gb) = (g(a), g(b));
    if ga.signum() == gb.signum() {
        return None;
    }
    let increasing = gb > ga;
    for _ in 0..80 {
        let m = 0.5 * (a + b);
        if (g(m) < 0.0) == increasing {
            a = m;
        } else {
            b = m;
        }
    }
    Some(0.5 * (a + b))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoxOptions {
    /// Past points kept on each plaque chain for density ratios.
    pub chain_keep: usize,
    /// Minimum gap between plaque crossings; `β/8` when absent. Leaves that
    /// spread apart along the box need a finer one to stay covered.
    pub separation: Option<f64>,
}

impl BoxOptions {
    pub fn keep(chain_keep: usize) -> Self {
        Self { chain_keep, separation: None }
    }
}

/// Foliated box at frame point `base_idx` for the bundle `sel`.
///
/// Candidate plaques come from block points of the frame within `β` of the
/// base plaque and within `β/2` of the transversal along it. Each is built
/// with radius `δ/2`, recentred on its crossing with the transversal and cut
/// to radius `δ/2 − β/2`; candidates whose crossings lie within the
/// separation of an accepted one are dropped.
pub fn build_foliated_box<F: MapFamily + ?Sized>(
    family: &F,
    frame: &BundleFrame,
    base_idx: usize,
    params: &PesinBlockParams,
    sel: BundleSel,
    delta: f64,
    beta: f64,
    opts: BoxOptions,
) -> Result<FoliatedBox> {
    let BoxOptions { chain_keep, separation } = opts;
    params.validate()?;
    sel.check(&frame.spec)?;
    if !(delta > 0.0) || !(beta > 0.0 && beta < delta / 4.0) {
        return Err(Error::invalid(format!("need δ > 0 and β ∈ (0, δ/4); got δ = {delta}, β = {beta}")));
    }
    let need = (GRAPH_DEPTH + chain_keep).max(params.reach());
    if base_idx < need || base_idx >= frame.len() {
        return Err(Error::invalid(format!(
            "base point {base_idx} needs {need} recorded past steps inside a frame of {} points",
            frame.len()
        )));
    }
    let base_verdict = in_block(family, frame, base_idx, params, sel)?;
    if !base_verdict.member {
        return Err(Error::hypothesis(format!(
            "base point {base_idx} is not in the Pesin block (margin {:.3e})",
            base_verdict.margin
        )));
    }
    let d = family.system().dim();
    let e_dim = frame.spec.dim_of(sel);
    let base = frame.point(base_idx).clone();
    let radius = delta / 2.0;

    if e_dim == d {
        let chain = plaque_chain(family, frame, base_idx, sel, radius, GRAPH_DEPTH, chain_keep)?;
        let plaque = chain.plaque();
        let bp = BoxPlaque { index: base_idx, plaque: plaque.clone(), gamma: Vec::new(), offset: vec![0.0; d], chain };
        return Ok(FoliatedBox {
            base_index: base_idx,
            base,
            sel,
            e_dim,
            delta,
            beta,
            params: *params,
            transversal: Matrix::zeros(d, 0),
            box_radius: radius,
            plaques: vec![bp],
            base_plaque: plaque,
        });
    }

    let base_plaque = plaque_chain(family, frame, base_idx, sel, radius, GRAPH_DEPTH, 0)?.plaque();
    let u_base = base_plaque.axis().cloned().ok_or_else(|| Error::invalid("bundle of this dimension has no plaques"))?;
    let transversal = complement(&Matrix::from_columns(std::slice::from_ref(&u_base)));
    let box_radius = radius - beta / 2.0;
    let sep = separation.unwrap_or(beta / 8.0);
    if !(sep > 0.0) {
        return Err(Error::invalid("plaque separation must be positive"));
    }

    // candidates: approximate transversal coordinates, nearest first
    let mut cands: Vec<(usize, f64, Vec<f64>)> = (need..frame.len())
        .into_par_iter()
        .filter_map(|i| {
            let q = frame.point(i);
            let (s, off) = base_plaque.locate(q)?;
            if off > beta || s[0].abs() > beta / 2.0 {
                return None;
            }
            let g: Vec<f64> = (transversal.transpose() * base_plaque.region_displacement(&base, q)).iter().copied().collect();
            Some((i, off, g))
        })
        .collect();
    cands.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
    let mut plaques: Vec<BoxPlaque> = Vec::new();
    let mut pre: Vec<Vec<f64>> = Vec::new();
    for (i, _, g_approx) in cands {
        if plaques.len() >= MAX_PLAQUES {
            break;
        }
        if i != base_idx && pre.iter().any(|h| dist(h, &g_approx) < sep) {
            continue;
        }
        if !in_block(family, frame, i, params, sel)?.member {
            continue;
        }
        let chain = match plaque_chain(family, frame, i, sel, radius, GRAPH_DEPTH, chain_keep) {
            Ok(c) => c,
            Err(Error::ChartExit(_)) => continue,
            Err(e) => return Err(e),
        };
        let full = chain.plaque();
        let Some(s_c) = crossing(&full, &base, &u_base) else { continue };
        if s_c.abs() > beta / 2.0 {
            continue;
        }
        let plaque = full.recentred(&[s_c], box_radius)?;
        let gamma: Vec<f64> =
            (transversal.transpose() * full.region_displacement(&base, &plaque.center)).iter().copied().collect();
        if plaques.iter().any(|p| dist(&p.gamma, &gamma) < sep) {
            continue;
        }
        pre.push(g_approx);
        plaques.push(BoxPlaque { index: i, plaque, gamma, offset: vec![s_c], chain });
    }
    if plaques.is_empty() {
        return Err(Error::hypothesis(format!("no block points within β = {beta} of the base point")));
    }
    check_disjoint(&plaques)?;
    Ok(FoliatedBox {
        base_index: base_idx,
        base,
        sel,
        e_dim,
        delta,
        beta,
        params: *params,
        transversal,
        box_radius,
        plaques,
        base_plaque,
    })
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
}

fn check_disjoint(plaques: &[BoxPlaque]) -> Result<()> {
    const SAMPLES: usize = 33;
    let pts: Vec<Vec<Point>> = plaques
        .iter()
        .map(|p| {
            let r = p.plaque.radius;
            (0..SAMPLES).map(|k| p.plaque.point_at(&[-r + 2.0 * r * k as f64 / (SAMPLES - 1) as f64])).collect()
        })
        .collect();
    for a in 0..plaques.len() {
        for b in a + 1..plaques.len() {
            let m = pts[a]
                .iter()
                .flat_map(|p| pts[b].iter().map(move |q| plaques[a].plaque.region_distance(p, q)))
                .fold(f64::INFINITY, f64::min);
            if !(m > 0.0) {
                return Err(Error::hypothesis(format!("plaques {a} and {b} intersect")));
            }
        }
    }
    Ok(())
}

/// Empirical conditional density on one plaque, per unit of leaf volume
/// (arc length for curves).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConditionalDensity {
    pub plaque: usize,
    pub bins_per_axis: usize,
    /// Bin-center parameters.
    pub nodes: Vec<Vec<f64>>,
    /// Leaf volume of each bin.
    pub volumes: Vec<f64>,
    pub counts: Vec<u64>,
    pub density: Vec<f64>,
    pub hits: u64,
}

impl ConditionalDensity {
    /// `∫ ρ` over the plaque; 1 up to rounding.
    pub fn integral(&self) -> f64 {
        self.density.iter().zip(&self.volumes).map(|(d, v)| d * v).sum()
    }

    pub fn modal_bin(&self) -> usize {
        self.counts.iter().enumerate().max_by_key(|(i, c)| (**c, std::cmp::Reverse(*i))).map(|(i, _)| i).unwrap_or(0)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ConditionalReport {
    pub tolerance: f64,
    pub in_box: u64,
    pub discarded: u64,
    pub discard_fraction: f64,
    /// Discard fraction below [`MAX_DISCARD`].
    pub valid: bool,
    /// `μ̂`: share of the assigned samples on each plaque.
    pub quotient: Vec<f64>,
    pub densities: Vec<ConditionalDensity>,
    /// Parameters of the assigned samples, per plaque, flattened.
    #[serde(skip)]
    pub assigned: Vec<Vec<f64>>,
}

fn bins_for(e_dim: usize) -> usize {
    if e_dim <= 2 {
        CONDITIONAL_BINS
    } else {
        8
    }
}

/// Assigns each sample to the nearest plaque within `tolerance` (default
/// `β/8`) and histograms the assigned samples along each plaque. Samples in
/// the core tube of the box that match no plaque are counted as discarded.
pub fn empirical_conditional_density<I>(fbox: &FoliatedBox, sample: I, tolerance: Option<f64>) -> Result<ConditionalReport>
where
    I: IntoIterator<Item = Point>,
{
    let tol = tolerance.unwrap_or_else(|| fbox.default_tolerance());
    if !(tol > 0.0) {
        return Err(Error::invalid("leaf-binning tolerance must be positive"));
    }
    let e = fbox.e_dim;
    let mut assigned: Vec<Vec<f64>> = vec![Vec::new(); fbox.plaques.len()];
    let (mut in_box, mut discarded) = (0u64, 0u64);
    for q in sample {
        let Some(core) = fbox.position(&q) else { continue };
        let hit = fbox.assign(&q, tol);
        if core {
            in_box += 1;
            discarded += u64::from(hit.is_none());
        }
        if let Some((k, s)) = hit {
            assigned[k].extend_from_slice(&s);
        }
    }
    if in_box < 1000 {
        return Err(Error::InsufficientSample(format!("only {in_box} samples fell in the foliated box (need 1000)")));
    }
    let total_assigned: usize = assigned.iter().map(|a| a.len() / e).sum();
    let quotient: Vec<f64> = assigned.iter().map(|a| (a.len() / e) as f64 / total_assigned.max(1) as f64).collect();
    let bins = bins_for(e);
    let r = fbox.box_radius;
    let width = 2.0 * r / bins as f64;
    let densities: Vec<ConditionalDensity> = assigned
        .par_iter()
        .enumerate()
        .filter(|(_, a)| !a.is_empty())
        .map(|(k, a)| {
            let plaque = &fbox.plaques[k].plaque;
            let cells = bins.pow(e as u32);
            let mut counts = vec![0u64; cells];
            for s in a.chunks(e) {
                counts[cell_index(s, r, bins)] += 1;
            }
            let nodes: Vec<Vec<f64>> = (0..cells)
                .map(|c| cell_coords(c, e, bins).iter().map(|&i| -r + (i as f64 + 0.5) * width).collect())
                .collect();
            let volumes: Vec<f64> = nodes
                .iter()
                .map(|n| if e == 1 { plaque.arc_length(n[0] - width / 2.0, n[0] + width / 2.0) } else { width.powi(e as i32) })
                .collect();
            let hits = (a.len() / e) as u64;
            let density = counts.iter().zip(&volumes).map(|(c, v)| *c as f64 / (hits as f64 * v)).collect();
            ConditionalDensity { plaque: k, bins_per_axis: bins, nodes, volumes, counts, density, hits }
        })
        .collect();
    let discard_fraction = discarded as f64 / in_box as f64;
    Ok(ConditionalReport {
        tolerance: tol,
        in_box,
        discarded,
        discard_fraction,
        valid: discard_fraction < MAX_DISCARD,
        quotient,
        densities,
        assigned,
    })
}

fn cell_index(s: &[f64], r: f64, bins: usize) -> usize {
    s.iter().fold(0, |acc, v| {
        let k = (((v + r) / (2.0 * r)) * bins as f64).floor().clamp(0.0, bins as f64 - 1.0) as usize;
        acc * bins + k
    })
}

fn cell_coords(mut c: usize, e: usize, bins: usize) -> Vec<usize> {
    let mut out = vec![0; e];
    for v in out.iter_mut().rev() {
        *v = c % bins;
        c /= bins;
    }
    out
}

/// One bin of a plaque against the Liu–Qian prediction.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RatioComparison {
    pub plaque: usize,
    pub bin: usize,
    pub hits: u64,
    pub density: f64,
    /// `ρ̂(y)/ρ̂(z)`, `z` the modal bin.
    pub empirical: f64,
    /// The truncated product for `ρ(y)/ρ(z)`.
    pub predicted: f64,
    /// `ρ(z)` fitted from the normalisation `∫ρ = 1` of the predicted profile.
    pub anchor: f64,
    pub tail_bound: f64,
}

impl RatioComparison {
    /// `|ρ̂(y) / (ρ(z)·predicted) − 1|` with the fitted anchor. Dividing by
    /// the raw modal count instead would bias every ratio low: the modal bin
    /// is the largest of many noisy counts.
    pub fn relative_deviation(&self) -> f64 {
        (self.density / (self.anchor * self.predicted) - 1.0).abs()
    }

    /// One binomial standard error of `ρ̂(y)`, relative.
    pub fn relative_sigma(&self) -> f64 {
        1.0 / (self.hits as f64).sqrt()
    }
}

/// Compares each plaque's histogram with the Liu–Qian product referenced to
/// the modal bin `z`, for every bin with at least `min_hits` samples.
pub fn liu_qian_comparison<F: MapFamily + ?Sized>(
    family: &F,
    fbox: &FoliatedBox,
    report: &ConditionalReport,
    budget: &HolderBudget,
    depth: usize,
    min_hits: u64,
) -> Result<Vec<RatioComparison>> {
    let jobs: Vec<(&ConditionalDensity, usize)> = report
        .densities
        .iter()
        .filter(|cd| cd.counts[cd.modal_bin()] >= min_hits)
        .flat_map(|cd| (0..cd.counts.len()).map(move |y| (cd, y)))
        .collect();
    let ratios: Vec<(f64, f64)> = jobs
        .par_iter()
        .map(|(cd, y)| {
            let z = cd.modal_bin();
            let r = fbox.density_ratio(family, cd.plaque, &cd.nodes[*y], &cd.nodes[z], depth, budget)?;
            Ok((r.ratio, r.tail_bound))
        })
        .collect::<Result<_>>()?;
    let mut out = Vec::new();
    let mut k = 0;
    for cd in report.densities.iter().filter(|cd| cd.counts[cd.modal_bin()] >= min_hits) {
        let bins = cd.counts.len();
        let rs = &ratios[k..k + bins];
        k += bins;
        let anchor = 1.0 / rs.iter().zip(&cd.volumes).map(|((r, _), v)| r * v).sum::<f64>();
        let z = cd.modal_bin();
        for (y, &(predicted, tail_bound)) in rs.iter().enumerate().filter(|(y, _)| cd.counts[*y] >= min_hits) {
            out.push(RatioComparison {
                plaque: cd.plaque,
                bin: y,
                hits: cd.counts[y],
                density: cd.density[y],
                empirical: cd.density[y] / cd.density[z],
                predicted,
                anchor,
                tail_bound,
            });
        }
    }
    Ok(out)
}

/// Largest observed density ratio on any plaque against the bound `L`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RatioBound {
    pub bound: f64,
    pub max_ratio: f64,
    /// Largest `ρ̂(y)/ρ̂(z) − 3σ − L` over bin pairs.
    pub worst_excess: f64,
    pub passes: bool,
}

/// Checks `ρ̂(y)/ρ̂(z) ≤ L + 3σ` for every pair of bins on a plaque with at
/// least `min_hits` samples each.
pub fn ratio_bound_check(report: &ConditionalReport, bound: f64, min_hits: u64) -> Result<RatioBound> {
    if !(bound >= 1.0) {
        return Err(Error::invalid(format!("a density-ratio bound is at least 1, got {bound}")));
    }
    let (mut max_ratio, mut worst_excess) = (0.0f64, f64::NEG_INFINITY);
    for cd in &report.densities {
        let live: Vec<usize> = (0..cd.counts.len()).filter(|&b| cd.counts[b] >= min_hits).collect();
        for &y in &live {
            for &z in &live {
                let r = cd.density[y] / cd.density[z];
                let sigma = r * (1.0 / cd.counts[y] as f64 + 1.0 / cd.counts[z] as f64).sqrt();
                max_ratio = max_ratio.max(r);
                worst_excess = worst_excess.max(r - 3.0 * sigma - bound);
            }
        }
    }
    Ok(RatioBound { bound, max_ratio, worst_excess, passes: worst_excess <= 0.0 })
}

/// Plot-ready CSV: `plaque,bin,s,hits,density,predicted`, the prediction
/// anchored at each plaque's modal bin.
pub fn write_density_csv<W: Write>(report: &ConditionalReport, comparisons: &[RatioComparison], mut out: W) -> Result<()> {
    writeln!(out, "plaque,bin,s,hits,density,predicted")?;
    for cd in &report.densities {
        let z = cd.modal_bin();
        for (b, node) in cd.nodes.iter().enumerate() {
            let pred = comparisons
                .iter()
                .find(|c| c.plaque == cd.plaque && c.bin == b)
                .map(|c| format!("{:.6e}", c.predicted * cd.density[z]))
                .unwrap_or_default();
            let s: Vec<String> = node.iter().map(|v| format!("{v:.6}")).collect();
            writeln!(out, "{},{b},{},{},{:.6e},{pred}", cd.plaque, s.join(" "), cd.counts[b], cd.density[b])?;
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorstCell {
    pub plaque: usize,
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
    /// `μ(A×ξ)/μ̂(ξ)`.
    pub observed: f64,
    /// `C·Leb(A)/Leb(ξ)` plus `z_slack` standard errors.
    pub allowed: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AbsContinuityReport {
    pub c_test: f64,
    pub passes: bool,
    pub cells_tested: usize,
    /// Standard errors of slack per cell.
    pub z_slack: f64,
    /// The cell with the largest `observed − allowed`.
    pub worst: Option<WorstCell>,
}

/// Checks `μ(A×ξ) ≤ C·μ̂(ξ)·Leb(A)` (leaf Lebesgue normalised to the plaque)
/// over dyadic parameter cells `A` down to 1/256 of the plaque and every
/// plaque `ξ`. Thousands of cells are tested at once, so the binomial slack
/// is Bonferroni-corrected: `z` standard errors with `P(Z > z) ≤ 0.01/cells`,
/// and never fewer than three.
pub fn abs_continuity_check(fbox: &FoliatedBox, report: &ConditionalReport, c_test: f64) -> Result<AbsContinuityReport> {
    if !(c_test > 0.0) {
        return Err(Error::invalid("C_test must be positive"));
    }
    let e = fbox.e_dim;
    let levels = if e == 1 { 8 } else { (8 / e).max(1) };
    let r = fbox.box_radius;
    let occupied = report.assigned.iter().filter(|a| !a.is_empty()).count();
    let per_plaque: usize = (1..=levels).map(|l| (1usize << l).pow(e as u32)).sum();
    let z = bonferroni_z(0.01 / (occupied * per_plaque).max(1) as f64).max(3.0);
    let mut worst: Option<(f64, WorstCell)> = None;
    let mut tested = 0usize;
    for (k, a) in report.assigned.iter().enumerate() {
        if a.is_empty() {
            continue;
        }
        let n = (a.len() / e) as f64;
        let plaque = &fbox.plaques[k].plaque;
        let total = if e == 1 { plaque.total_length() } else { (2.0 * r).powi(e as i32) };
        for level in 1..=levels {
            let bins = 1usize << level;
            let cells = bins.pow(e as u32);
            let mut counts = vec![0u64; cells];
            for s in a.chunks(e) {
                counts[cell_index(s, r, bins)] += 1;
            }
            let w = 2.0 * r / bins as f64;
            for (c, &cnt) in counts.iter().enumerate() {
                let lower: Vec<f64> = cell_coords(c, e, bins).iter().map(|&i| -r + i as f64 * w).collect();
                let upper: Vec<f64> = lower.iter().map(|v| v + w).collect();
                let leb = if e == 1 { plaque.arc_length(lower[0], upper[0]) } else { w.powi(e as i32) } / total;
                let p = cnt as f64 / n;
                let slack = z * (p * (1.0 - p)).max(1.0 / n).sqrt() / n.sqrt();
                let allowed = c_test * leb + slack;
                tested += 1;
                let excess = p - allowed;
                if worst.as_ref().is_none_or(|w| excess > w.0) {
                    worst = Some((excess, WorstCell { plaque: k, lower, upper, observed: p, allowed }));
                }
            }
        }
    }
    let passes = worst.as_ref().is_none_or(|w| w.0 <= 0.0);
    Ok(AbsContinuityReport { c_test, passes, cells_tested: tested, z_slack: z, worst: worst.map(|w| w.1) })
}

/// Smallest `z` whose Mills-ratio tail bound `φ(z)/z` is at most `p`.
fn bonferroni_z(p: f64) -> f64 {
    let tail = |z: f64| (-0.5 * z * z).exp() / (z * (2.0 * std::f64::consts::PI).sqrt());
    let (mut lo, mut hi) = (0.5, 40.0);
    for _ in 0..100 {
        let mid = 0.5 * (lo + hi);
        if tail(mid) > p {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    hi
}
