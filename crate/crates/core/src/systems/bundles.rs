use serde::{Deserialize, Serialize};

use super::{MapFamily, Matrix, OrbitSegment, Point, TRANSIENT};
use crate::error::{Error, Result};
use crate::linalg::{intersect, max_singular, orthonormalize, qr_diag, singular_values, subspace_sin};

/// Largest tolerated angle (sine) between `Df·E(x)` and `E(f x)`.
pub const INVARIANCE_TOL: f64 = 1e-6;

/// Dimensions of `E^u, E^c_1, …, E^c_k, E^s`, in that order. The outer
/// bundles may be trivial.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplittingSpec {
    pub bundle_dims: Vec<usize>,
    pub center_count: usize,
}

impl SplittingSpec {
    pub fn validate(&self, state_dim: usize) -> Result<()> {
        if self.bundle_dims.len() != self.center_count + 2 {
            return Err(Error::invalid(format!(
                "splitting lists {} bundles but {} centers need {}",
                self.bundle_dims.len(),
                self.center_count,
                self.center_count + 2
            )));
        }
        if self.bundle_dims.iter().sum::<usize>() != state_dim {
            return Err(Error::invalid(format!("bundle dimensions {:?} do not sum to {state_dim}", self.bundle_dims)));
        }
        if self.bundle_dims[1..=self.center_count].iter().any(|&d| d != 1) {
            return Err(Error::invalid("every center bundle must be one-dimensional"));
        }
        Ok(())
    }

    pub fn block_count(&self) -> usize {
        self.bundle_dims.len()
    }

    pub fn dim_of(&self, sel: BundleSel) -> usize {
        self.bundle_dims[sel.start..sel.end].iter().sum()
    }
}

/// A consecutive run of bundles `[start, end)`, e.g. `E^u ⊕ E^c_1` is
/// `BundleSel::through_center(1)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BundleSel {
    pub start: usize,
    pub end: usize,
}

impl BundleSel {
    pub fn new(start: usize, end: usize) -> Self {
        Self { start, end }
    }

    pub fn single(i: usize) -> Self {
        Self { start: i, end: i + 1 }
    }

    pub fn unstable() -> Self {
        Self::single(0)
    }

    /// `E^u ⊕ E^c_1 ⊕ … ⊕ E^c_i`.
    pub fn through_center(i: usize) -> Self {
        Self { start: 0, end: i + 1 }
    }

    pub fn stable(spec: &SplittingSpec) -> Self {
        Self::single(spec.block_count() - 1)
    }

    /// The bundles not in `self`.
    pub fn complement(&self, spec: &SplittingSpec) -> Vec<usize> {
        (0..spec.block_count()).filter(|i| *i < self.start || *i >= self.end).collect()
    }

    pub fn check(&self, spec: &SplittingSpec) -> Result<()> {
        if self.start >= self.end || self.end > spec.block_count() {
            return Err(Error::invalid(format!("bundle selection {}..{} out of range", self.start, self.end)));
        }
        Ok(())
    }
}

/// Orthonormal frames of every bundle at every point of an orbit window.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BundleFrame {
    pub spec: SplittingSpec,
    /// Orbit points (and noise) the frames are attached to.
    pub orbit: OrbitSegment,
    /// `frames[i][j]` is a `d × dim_j` orthonormal basis of bundle `j` at
    /// `orbit.points[i]`.
    pub frames: Vec<Vec<Matrix>>,
}

impl BundleFrame {
    pub fn len(&self) -> usize {
        self.orbit.len()
    }

    pub fn is_empty(&self) -> bool {
        self.orbit.is_empty()
    }

    pub fn point(&self, i: usize) -> &Point {
        &self.orbit.points[i]
    }

    /// Orthonormal basis of the selected sum of bundles at point `i`.
    pub fn basis(&self, i: usize, sel: BundleSel) -> Matrix {
        let blocks: Vec<&Matrix> = self.frames[i][sel.start..sel.end].iter().collect();
        stack(&blocks, self.orbit.points[i].len())
    }

    /// Basis of the bundles listed in `blocks`.
    pub fn basis_of(&self, i: usize, blocks: &[usize]) -> Matrix {
        let picked: Vec<&Matrix> = blocks.iter().map(|&j| &self.frames[i][j]).collect();
        stack(&picked, self.orbit.points[i].len())
    }

    /// Largest angle sine between `Df(x_i)·E_j(x_i)` and `E_j(x_{i+1})`
    /// over the window and all bundles.
    pub fn invariance_error<F: MapFamily + ?Sized>(&self, family: &F) -> f64 {
        let mut worst: f64 = 0.0;
        for i in 0..self.len().saturating_sub(1) {
            let jac = self.orbit.jacobian(family, i);
            for (j, e) in self.frames[i].iter().enumerate() {
                if e.ncols() == 0 {
                    continue;
                }
                let pushed = orthonormalize(&(&jac * e));
                worst = worst.max(subspace_sin(&pushed, &self.frames[i + 1][j]));
            }
        }
        worst
    }

    /// The frame restricted to `[start, end)`.
    pub fn window(&self, start: usize, end: usize) -> Self {
        let end = end.min(self.len());
        Self { spec: self.spec.clone(), orbit: self.orbit.window(start, end), frames: self.frames[start..end].to_vec() }
    }
}

fn stack(blocks: &[&Matrix], d: usize) -> Matrix {
    let cols: Vec<_> = blocks.iter().flat_map(|m| m.column_iter().map(|c| c.into_owned())).collect();
    if cols.is_empty() {
        Matrix::zeros(d, 0)
    } else {
        orthonormalize(&Matrix::from_columns(&cols))
    }
}

/// Estimates the splitting along `orbit`. Forward QR iteration of the
/// cocycle yields the flags `E_0 ⊕ … ⊕ E_j`, backward iteration the flags
/// `E_j ⊕ … ⊕ E_last`; each bundle is the intersection of the two. The first
/// and last [`TRANSIENT`] points serve only for convergence and are dropped.
pub fn estimate_bundles<F: MapFamily + ?Sized>(family: &F, spec: &SplittingSpec, orbit: &OrbitSegment) -> Result<BundleFrame> {
    let d = family.system().dim();
    spec.validate(d)?;
    let n = orbit.len();
    if n < 2 * TRANSIENT + 2 {
        return Err(Error::InsufficientSample(format!(
            "bundle estimation needs more than {} orbit points, got {n}",
            2 * TRANSIENT + 1
        )));
    }
    let jac: Vec<Matrix> = (0..n - 1).map(|i| orbit.jacobian(family, i)).collect();

    // forward flags at every index
    let mut forward = Vec::with_capacity(n);
    let mut q = Matrix::identity(d, d);
    forward.push(q.clone());
    for j in &jac {
        q = qr_diag(&(j * &q)).0;
        forward.push(q.clone());
    }
    // backward flags, built from the end
    let mut backward = vec![Matrix::zeros(d, d); n];
    let mut q = Matrix::identity(d, d);
    backward[n - 1] = q.clone();
    for i in (0..n - 1).rev() {
        let inv = jac[i]
            .clone()
            .try_inverse()
            .ok_or_else(|| Error::numerical(format!("derivative not invertible at orbit index {i}")))?;
        q = qr_diag(&(inv * &q)).0;
        backward[i] = q.clone();
    }

    let mut cum = vec![0usize];
    for &k in &spec.bundle_dims {
        cum.push(cum.last().unwrap() + k);
    }
    let start = TRANSIENT;
    let end = n - TRANSIENT;
    let mut frames = Vec::with_capacity(end - start);
    for i in start..end {
        let mut blocks = Vec::with_capacity(spec.block_count());
        for (j, &k) in spec.bundle_dims.iter().enumerate() {
            if k == 0 {
                blocks.push(Matrix::zeros(d, 0));
                continue;
            }
            let f = forward[i].columns(0, cum[j + 1]).into_owned();
            let b = backward[i].columns(0, d - cum[j]).into_owned();
            let e = intersect(&f, &b, k);
            if e.ncols() != k {
                return Err(Error::numerical(format!("bundle {j} collapsed at orbit index {i}")));
            }
            blocks.push(e);
        }
        frames.push(blocks);
    }
    let frame = BundleFrame { spec: spec.clone(), orbit: orbit.window(start, end), frames };
    let err = frame.invariance_error(family);
    if !(err < INVARIANCE_TOL) {
        return Err(Error::NonConvergence {
            iterations: TRANSIENT,
            detail: format!("bundle invariance angle {err:.3e} exceeds {INVARIANCE_TOL:e}; the splitting may not be dominated"),
        });
    }
    Ok(frame)
}

/// Constants certifying that `E` dominates `F` along the tested segments.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DominationEstimate {
    #[serde(rename = "C")]
    pub c: f64,
    pub lambda: f64,
    pub alpha_holder: f64,
    #[serde(rename = "C_holder")]
    pub c_holder: f64,
    pub lambda_holder: f64,
    pub n_max: usize,
    pub starts: usize,
}

/// Upper bound on the number of orbit points used as segment starts.
const MAX_STARTS: usize = 256;

/// `log ∥Df^n|_F(x)∥` and `log ∥Df^{-n}|_E(f^n x)∥` for `n = 1..=n_max`,
/// at evenly spaced starts.
fn norm_logs<F: MapFamily + ?Sized>(
    family: &F,
    frame: &BundleFrame,
    e: BundleSel,
    f: BundleSel,
    n_max: usize,
) -> Result<Vec<(Vec<f64>, Vec<f64>)>> {
    if frame.len() <= n_max {
        return Err(Error::InsufficientSample(format!("frame of {} points cannot host segments of length {n_max}", frame.len())));
    }
    let last = frame.len() - 1 - n_max;
    let stride = (last / MAX_STARTS).max(1);
    let (de, df) = (frame.spec.dim_of(e), frame.spec.dim_of(f));
    let mut out = Vec::new();
    for i in (0..=last).step_by(stride) {
        let (mut re, mut rf) = (Matrix::identity(de, de), Matrix::identity(df, df));
        let (mut se, mut sf) = (0.0, 0.0);
        let mut log_f = Vec::with_capacity(n_max);
        let mut log_e_inv = Vec::with_capacity(n_max);
        for n in 1..=n_max {
            let k = i + n - 1;
            let jac = frame.orbit.jacobian(family, k);
            advance(&restricted(&jac, frame, k, e), &mut re, &mut se);
            advance(&restricted(&jac, frame, k, f), &mut rf, &mut sf);
            log_f.push(sf + max_singular(&rf).ln());
            let smin = singular_values(&re).last().copied().unwrap_or(0.0);
            if !(smin > 0.0) || !smin.is_finite() {
                return Err(Error::numerical("restricted cocycle lost rank"));
            }
            log_e_inv.push(-(se + smin.ln()));
        }
        out.push((log_f, log_e_inv));
    }
    Ok(out)
}

/// The derivative at orbit point `k` restricted to a bundle, written in the
/// orthonormal frames at `x_k` and `x_{k+1}`. Working in frame coordinates
/// keeps a contracted bundle from picking up rounding errors along the
/// expanded ones.
pub(crate) fn restricted(jac: &Matrix, frame: &BundleFrame, k: usize, sel: BundleSel) -> Matrix {
    frame.basis(k + 1, sel).transpose() * jac * frame.basis(k, sel)
}

/// `R ← M R`, keeping `R` normalised with its log-scale tracked separately.
fn advance(m: &Matrix, r: &mut Matrix, log_scale: &mut f64) {
    *r = m * &*r;
    let s = r.norm();
    *r /= s;
    *log_scale += s.ln();
}

/// Smallest `λ` on the grid `0.99, 0.98, …, 0.01` whose fitted constant is
/// not driven by the far end of the window, with that constant.
///
/// For a trial `λ`, `C = max_n exp(w(n) − n log λ)` where `w(n)` is the worst
/// log-product at time `n`. A window cannot see `n → ∞`, so `λ` counts as
/// admissible when the maximiser is not in the second half of the window:
/// a genuine exponential bound with rate `λ` makes `w(n) − n log λ` bounded
/// above, while a too-small `λ` makes it grow to the end of the window.
pub(crate) fn fit_rate(worst: &[f64]) -> Option<(f64, f64)> {
    let half = worst.len() / 2;
    let mut best = None;
    for k in (1..=99).rev() {
        let lambda = k as f64 / 100.0;
        let r: Vec<f64> = worst.iter().enumerate().map(|(n, w)| w - (n + 1) as f64 * lambda.ln()).collect();
        let first = r[..half.max(1)].iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let second = r[half.max(1)..].iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        if second <= first + 1e-9 {
            best = Some((lambda, first.max(second).exp()));
        } else {
            break;
        }
    }
    best
}

fn worst_over_starts(logs: &[(Vec<f64>, Vec<f64>)], wf: f64, we: f64) -> Vec<f64> {
    let n_max = logs[0].0.len();
    (0..n_max)
        .map(|n| logs.iter().map(|(lf, le)| wf * lf[n] + we * le[n]).fold(f64::NEG_INFINITY, f64::max))
        .collect()
}

/// Fits `(C, λ)` with `∥Df^n|_F∥·∥Df^{-n}|_{E(f^n x)}∥ ≤ Cλ^n` for
/// `1 ≤ n ≤ n_max` along the frame's orbit, and the largest `α` on a grid of
/// step 0.01 for which both `(1+α)`-inequalities admit a rate.
pub fn certify_domination<F: MapFamily + ?Sized>(
    family: &F,
    frame: &BundleFrame,
    e: BundleSel,
    f: BundleSel,
    n_max: usize,
) -> Result<DominationEstimate> {
    e.check(&frame.spec)?;
    f.check(&frame.spec)?;
    if e.start > f.start || (e.start < f.start && e.end > f.start) {
        return Err(Error::invalid("E must precede F in the splitting order and not overlap it"));
    }
    if n_max < 4 {
        return Err(Error::invalid("n_max must be at least 4"));
    }
    if frame.spec.dim_of(e) == 0 || frame.spec.dim_of(f) == 0 {
        return Err(Error::invalid("cannot certify domination with a trivial bundle"));
    }
    let logs = norm_logs(family, frame, e, f, n_max)?;
    let worst = worst_over_starts(&logs, 1.0, 1.0);
    let (lambda, c) = fit_rate(&worst).ok_or_else(|| {
        Error::DominationRefuted(format!(
            "no λ < 1 bounds the product over n ≤ {n_max}; worst log-product at n={n_max} is {:.4}",
            worst[n_max - 1]
        ))
    })?;

    let mut holder = None;
    for k in (1..=100).rev() {
        let alpha = k as f64 / 100.0;
        let a = fit_rate(&worst_over_starts(&logs, 1.0 + alpha, 1.0));
        let b = fit_rate(&worst_over_starts(&logs, 1.0, 1.0 + alpha));
        if let (Some((la, ca)), Some((lb, cb))) = (a, b) {
            // a common rate: the larger of the two smallest admissible ones
            let l = la.max(lb);
            let ca = if l == la { ca } else { constant_at(&worst_over_starts(&logs, 1.0 + alpha, 1.0), l) };
            let cb = if l == lb { cb } else { constant_at(&worst_over_starts(&logs, 1.0, 1.0 + alpha), l) };
            holder = Some((alpha, ca.max(cb), l));
            break;
        }
    }
    let (alpha_holder, c_holder, lambda_holder) = holder.ok_or_else(|| {
        Error::DominationRefuted("domination holds but no (1+α)-domination with α ≥ 0.01 was found".into())
    })?;
    Ok(DominationEstimate { c, lambda, alpha_holder, c_holder, lambda_holder, n_max, starts: logs.len() })
}

fn constant_at(worst: &[f64], lambda: f64) -> f64 {
    worst.iter().enumerate().map(|(n, w)| w - (n + 1) as f64 * lambda.ln()).fold(f64::NEG_INFINITY, f64::max).exp()
}

/// Largest value of `log(∥Df^n|_F∥·∥Df^{-n}|_E∥) − log C − n log λ` over the
/// frame's segments; a certificate is confirmed when this is ≤ 0 (up to
/// rounding) on data not used to fit it.
pub fn domination_excess<F: MapFamily + ?Sized>(
    family: &F,
    frame: &BundleFrame,
    e: BundleSel,
    f: BundleSel,
    estimate: &DominationEstimate,
) -> Result<f64> {
    let logs = norm_logs(family, frame, e, f, estimate.n_max)?;
    let worst = worst_over_starts(&logs, 1.0, 1.0);
    Ok(worst
        .iter()
        .enumerate()
        .map(|(n, w)| w - estimate.c.ln() - (n + 1) as f64 * estimate.lambda.ln())
        .fold(f64::NEG_INFINITY, f64::max))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::systems::{builtin_system, default_start, sample_orbit};

    fn frame_of(name: &str, n: usize, seed: u64) -> (crate::systems::SmoothSystem, BundleFrame) {
        let sys = builtin_system(name).unwrap();
        let orbit = sample_orbit(&sys, &default_start(&sys, seed), TRANSIENT, n, seed).unwrap();
        let frame = estimate_bundles(&sys, &sys.natural_splitting(), &orbit).unwrap();
        (sys, frame)
    }

    #[test]
    fn spec_validation() {
        assert!(SplittingSpec { bundle_dims: vec![1, 2], center_count: 0 }.validate(3).is_ok());
        assert!(SplittingSpec { bundle_dims: vec![1, 1], center_count: 0 }.validate(3).is_err());
        assert!(SplittingSpec { bundle_dims: vec![1, 2, 0], center_count: 1 }.validate(3).is_err());
        assert!(SplittingSpec { bundle_dims: vec![1, 1], center_count: 1 }.validate(2).is_err());
    }

    #[test]
    fn cat_bundles_are_eigenlines() {
        let (_, frame) = frame_of("cat_map", 2000, 1);
        let g = (5f64.sqrt() - 1.0) / 2.0;
        let eu = Matrix::from_column_slice(2, 1, &[1.0, g]).normalize();
        let es = Matrix::from_column_slice(2, 1, &[-g, 1.0]).normalize();
        for i in 0..frame.len() {
            assert!(subspace_sin(&frame.frames[i][0], &eu) < 1e-12);
            assert!(subspace_sin(&frame.frames[i][1], &es) < 1e-12);
        }
    }

    #[test]
    fn solenoid_stable_is_fibre_plane() {
        let (_, frame) = frame_of("solenoid", 2000, 2);
        let plane = Matrix::from_row_slice(3, 2, &[0.0, 0.0, 1.0, 0.0, 0.0, 1.0]);
        for i in 0..frame.len() {
            assert!(subspace_sin(&frame.frames[i][1], &plane) < 1e-12);
            assert!(frame.frames[i][0][(0, 0)].abs() > 0.2);
        }
    }

    #[test]
    fn skew_center_is_vertical() {
        let (sys, frame) = frame_of("skew_center", 2000, 3);
        let vertical = Matrix::from_column_slice(2, 1, &[0.0, 1.0]);
        for i in 0..frame.len() {
            assert!(subspace_sin(&frame.frames[i][1], &vertical) < 1e-12);
        }
        assert!(frame.invariance_error(&sys) < INVARIANCE_TOL);
    }

    #[test]
    fn cat_domination_rate() {
        let (sys, frame) = frame_of("cat_map", 3000, 4);
        let est = certify_domination(&sys, &frame, BundleSel::single(0), BundleSel::single(1), 40).unwrap();
        assert!(est.lambda <= 0.15, "{est:?}");
        assert!(est.c <= 1.01);
        assert_eq!(est.alpha_holder, 1.0);
    }

    #[test]
    fn solenoid_domination_rate() {
        let (sys, frame) = frame_of("solenoid", 3000, 5);
        let est = certify_domination(&sys, &frame, BundleSel::single(0), BundleSel::single(1), 40).unwrap();
        // the product is exactly 8^{-n} up to the leaf-slope distortion
        assert!(est.lambda <= 0.13 && est.lambda >= 0.12, "{est:?}");
    }

    #[test]
    fn same_bundle_is_refuted() {
        let (sys, frame) = frame_of("cat_map", 2000, 6);
        let err = certify_domination(&sys, &frame, BundleSel::single(0), BundleSel::single(0), 20).unwrap_err();
        assert!(matches!(err, Error::DominationRefuted(_)));
        let err = certify_domination(&sys, &frame, BundleSel::single(1), BundleSel::single(0), 20).unwrap_err();
        assert!(matches!(err, Error::InvalidParameter(_)));
    }

    #[test]
    fn certificate_holds_on_fresh_segment() {
        let (sys, frame) = frame_of("skew_center", 3000, 7);
        let est = certify_domination(&sys, &frame, BundleSel::single(0), BundleSel::single(1), 30).unwrap();
        let (_, fresh) = frame_of("skew_center", 3000, 8);
        let excess = domination_excess(&sys, &fresh, BundleSel::single(0), BundleSel::single(1), &est).unwrap();
        assert!(excess < 0.05, "excess {excess}, {est:?}");
    }
}
