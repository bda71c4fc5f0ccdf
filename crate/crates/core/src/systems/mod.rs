//! Example systems with exact derivatives, and everything computed along
//! their orbits: Lyapunov spectra, invariant bundles, domination constants
//! and local unstable plaques.
//!
//! Every orbit-level computation is written against [`MapFamily`], so the
//! same code runs for a deterministic map (`ω` absent) and for a random
//! system driven along a realised noise path.

mod builtin;
pub mod bundles;
pub mod lyapunov;
pub mod plaque;

use std::collections::BTreeMap;
use std::io::Write;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use builtin::{builtin_system, SystemKind, BUILTIN_NAMES};
pub use bundles::{certify_domination, domination_excess, estimate_bundles, BundleFrame, BundleSel, DominationEstimate, SplittingSpec};
pub use lyapunov::{bundle_exponents, lyapunov_spectrum, lyapunov_spectrum_along, LyapunovOptions};
pub use plaque::{plaque_chain, pull_back, unstable_plaque, LocalManifold, PlaqueChain, PLAQUE_MESH};

pub type Point = DVector<f64>;
pub type Matrix = DMatrix<f64>;

/// Iterates discarded before any statistic is collected.
pub const TRANSIENT: usize = 500;

/// Size of the random low-order bits re-injected into expanding circle
/// coordinates after each step. Without it, `θ ↦ 2θ mod 1` in binary
/// floating point shifts every orbit onto the fixed point 0 within 53 steps.
pub const DITHER: f64 = 1.0 / (1u64 << 44) as f64;

/// Fraction of the box width by which the escape test enlarges the
/// attracting region on non-periodic axes.
pub const ESCAPE_MARGIN: f64 = 0.1;

/// An axis-aligned region; periodic axes are circles of length
/// `upper - lower`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoxRegion {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
    pub periodic: Vec<bool>,
}

impl BoxRegion {
    pub fn new(lower: Vec<f64>, upper: Vec<f64>, periodic: Vec<bool>) -> Result<Self> {
        if lower.len() != upper.len() || lower.len() != periodic.len() || lower.is_empty() {
            return Err(Error::invalid("box bounds must have matching, nonzero lengths"));
        }
        if lower.iter().zip(&upper).any(|(l, u)| !(l < u)) {
            return Err(Error::invalid("box lower bounds must be below upper bounds"));
        }
        Ok(Self { lower, upper, periodic })
    }

    pub fn dim(&self) -> usize {
        self.lower.len()
    }

    pub fn width(&self, axis: usize) -> f64 {
        self.upper[axis] - self.lower[axis]
    }

    /// Length of the shortest periodic axis, if any.
    pub fn min_periodic_width(&self) -> Option<f64> {
        (0..self.dim()).filter(|&i| self.periodic[i]).map(|i| self.width(i)).min_by(f64::total_cmp)
    }

    pub fn volume(&self) -> f64 {
        (0..self.dim()).map(|i| self.width(i)).product()
    }

    pub fn contains(&self, p: &Point) -> bool {
        (0..self.dim()).all(|i| self.periodic[i] || (p[i] >= self.lower[i] && p[i] <= self.upper[i]))
    }

    /// The box grown by `frac` of its width on every non-periodic axis.
    pub fn enlarged(&self, frac: f64) -> Self {
        let mut out = self.clone();
        for i in 0..self.dim() {
            if !self.periodic[i] {
                let w = self.width(i);
                out.lower[i] -= frac * w;
                out.upper[i] += frac * w;
            }
        }
        out
    }

    /// Reduces periodic coordinates into `[lower, upper)`.
    pub fn wrap(&self, p: &mut Point) {
        for i in 0..self.dim() {
            if self.periodic[i] {
                let w = self.width(i);
                let mut r = (p[i] - self.lower[i]).rem_euclid(w);
                if r >= w {
                    r -= w;
                }
                p[i] = self.lower[i] + r;
            }
        }
    }

    /// `b - a` with the minimal-image convention on periodic axes.
    pub fn displacement(&self, a: &Point, b: &Point) -> Point {
        let mut d = b - a;
        for i in 0..self.dim() {
            if self.periodic[i] {
                let w = self.width(i);
                d[i] -= w * (d[i] / w).round();
            }
        }
        d
    }

    pub fn distance(&self, a: &Point, b: &Point) -> f64 {
        self.displacement(a, b).norm()
    }

    pub fn sample_uniform<R: Rng + ?Sized>(&self, rng: &mut R) -> Point {
        Point::from_iterator(self.dim(), (0..self.dim()).map(|i| self.lower[i] + rng.gen::<f64>() * self.width(i)))
    }
}

/// A smooth map of a box or torus chart with exact derivative.
///
/// The roster systems whose base factor is a circle expansion are
/// endomorphisms; `inverse` is then a right inverse (a fixed branch) and
/// backward orbits are taken along recorded histories with
/// [`SmoothSystem::preimage_near`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SmoothSystem {
    name: String,
    kind: SystemKind,
    region: BoxRegion,
}

impl SmoothSystem {
    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn kind(&self) -> &SystemKind {
        &self.kind
    }

    pub fn dim(&self) -> usize {
        self.region.dim()
    }

    pub fn attractor_box(&self) -> &BoxRegion {
        &self.region
    }

    pub fn parameters(&self) -> BTreeMap<String, f64> {
        self.kind.parameters()
    }

    /// A copy with some named parameters replaced; unknown names and values
    /// outside the admissible range are rejected.
    pub fn with_overrides(&self, overrides: &BTreeMap<String, f64>) -> Result<Self> {
        let kind = self.kind.with_overrides(overrides)?;
        Ok(Self { name: self.name.clone(), kind, region: self.region.clone() })
    }

    pub fn forward(&self, x: &Point) -> Point {
        let mut y = self.kind.forward(x);
        self.region.wrap(&mut y);
        y
    }

    pub fn inverse(&self, y: &Point) -> Point {
        let mut x = self.kind.inverse(y, None);
        self.region.wrap(&mut x);
        x
    }

    /// The preimage of `y` on the branch closest to `hint`.
    pub fn preimage_near(&self, y: &Point, hint: &Point) -> Point {
        let mut x = self.kind.inverse(y, Some((hint, &self.region)));
        self.region.wrap(&mut x);
        x
    }

    pub fn derivative(&self, x: &Point) -> Matrix {
        self.kind.derivative(x)
    }

    /// The splitting the system is built to carry.
    pub fn natural_splitting(&self) -> SplittingSpec {
        self.kind.natural_splitting()
    }

    /// Re-randomises the lowest bits of expanding circle coordinates.
    pub fn dither<R: Rng + ?Sized>(&self, x: &mut Point, rng: &mut R) {
        let axes = self.kind.dither_axes();
        if axes.is_empty() {
            return;
        }
        for &i in axes {
            x[i] += rng.gen::<f64>() * DITHER;
        }
        self.region.wrap(x);
    }

    pub fn displacement(&self, a: &Point, b: &Point) -> Point {
        self.region.displacement(a, b)
    }

    pub fn distance(&self, a: &Point, b: &Point) -> f64 {
        self.region.distance(a, b)
    }
}

/// A family of maps `f_ω` indexed by noise values, with `f_None = f`.
pub trait MapFamily: Sync {
    fn system(&self) -> &SmoothSystem;

    fn step(&self, omega: Option<&Point>, x: &Point) -> Point;

    fn step_jacobian(&self, omega: Option<&Point>, x: &Point) -> Matrix;

    /// The `f_ω`-preimage of `y` on the branch closest to `hint`.
    fn step_preimage(&self, omega: Option<&Point>, y: &Point, hint: &Point) -> Point;
}

impl MapFamily for SmoothSystem {
    fn system(&self) -> &SmoothSystem {
        self
    }

    fn step(&self, _omega: Option<&Point>, x: &Point) -> Point {
        self.forward(x)
    }

    fn step_jacobian(&self, _omega: Option<&Point>, x: &Point) -> Matrix {
        self.derivative(x)
    }

    fn step_preimage(&self, _omega: Option<&Point>, y: &Point, hint: &Point) -> Point {
        self.preimage_near(y, hint)
    }
}

/// A finite piece of orbit, `points[i+1] = f_{ω_i}(points[i])`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OrbitSegment {
    pub points: Vec<Point>,
    /// `noise[i]` drives the step from `points[i]` to `points[i+1]`;
    /// absent for deterministic orbits.
    pub noise: Option<Vec<Point>>,
}

impl OrbitSegment {
    pub fn deterministic(points: Vec<Point>) -> Self {
        Self { points, noise: None }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn omega(&self, i: usize) -> Option<&Point> {
        self.noise.as_ref().and_then(|w| w.get(i))
    }

    /// Derivative of the step leaving `points[i]`.
    pub fn jacobian<F: MapFamily + ?Sized>(&self, family: &F, i: usize) -> Matrix {
        family.step_jacobian(self.omega(i), &self.points[i])
    }

    /// The sub-segment `[start, end)`, noise included.
    pub fn window(&self, start: usize, end: usize) -> Self {
        let end = end.min(self.points.len());
        Self {
            points: self.points[start..end].to_vec(),
            noise: self.noise.as_ref().map(|w| w[start.min(w.len())..end.min(w.len())].to_vec()),
        }
    }

    /// CSV with header `step,x0,x1,…`.
    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<()> {
        let d = self.points.first().map_or(0, |p| p.len());
        let header: Vec<String> = std::iter::once("step".to_string()).chain((0..d).map(|i| format!("x{i}"))).collect();
        writeln!(out, "{}", header.join(","))?;
        for (i, p) in self.points.iter().enumerate() {
            let row: Vec<String> = p.iter().map(|v| format!("{v:.17e}")).collect();
            writeln!(out, "{i},{}", row.join(","))?;
        }
        Ok(())
    }
}

/// Deterministic orbit of `n` points after discarding `transient` iterates.
/// The seed only feeds the low-order dither of expanding coordinates.
pub fn sample_orbit(sys: &SmoothSystem, x0: &Point, transient: usize, n: usize, seed: u64) -> Result<OrbitSegment> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let escape = sys.attractor_box().enlarged(ESCAPE_MARGIN);
    check_start(sys, x0)?;
    let mut x = x0.clone();
    let mut points = Vec::with_capacity(n);
    for step in 0..transient + n {
        if step >= transient {
            points.push(x.clone());
        }
        x = sys.forward(&x);
        sys.dither(&mut x, &mut rng);
        if !escape.contains(&x) {
            return Err(Error::Escape { step, detail: format!("point {:?} left the enlarged box", x.as_slice()) });
        }
    }
    Ok(OrbitSegment::deterministic(points))
}

/// Streams a deterministic orbit without storing it.
#[derive(Clone)]
pub struct OrbitIter<'a> {
    sys: &'a SmoothSystem,
    x: Point,
    rng: ChaCha8Rng,
    remaining: usize,
}

impl<'a> OrbitIter<'a> {
    pub fn new(sys: &'a SmoothSystem, x0: &Point, transient: usize, n: usize, seed: u64) -> Result<Self> {
        check_start(sys, x0)?;
        let mut it = Self { sys, x: x0.clone(), rng: ChaCha8Rng::seed_from_u64(seed), remaining: transient };
        for _ in 0..transient {
            it.advance();
        }
        it.remaining = n;
        Ok(it)
    }

    fn advance(&mut self) {
        self.x = self.sys.forward(&self.x);
        self.sys.dither(&mut self.x, &mut self.rng);
    }
}

impl Iterator for OrbitIter<'_> {
    type Item = Point;

    fn next(&mut self) -> Option<Point> {
        if self.remaining == 0 {
            return None;
        }
        self.remaining -= 1;
        let out = self.x.clone();
        self.advance();
        Some(out)
    }

    fn size_hint(&self) -> (usize, Option<usize>) {
        (self.remaining, Some(self.remaining))
    }
}

pub(crate) fn check_start(sys: &SmoothSystem, x0: &Point) -> Result<()> {
    if x0.len() != sys.dim() {
        return Err(Error::invalid(format!("start point has dimension {}, system {} needs {}", x0.len(), sys.name(), sys.dim())));
    }
    if !sys.attractor_box().contains(x0) {
        return Err(Error::invalid(format!("start point {:?} lies outside the attractor box", x0.as_slice())));
    }
    Ok(())
}

/// A start point inside the attractor box drawn from `seed`.
pub fn default_start(sys: &SmoothSystem, seed: u64) -> Point {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_5eed);
    let mut p = sys.attractor_box().sample_uniform(&mut rng);
    // keep away from the boundary of non-periodic axes
    for i in 0..p.len() {
        if !sys.attractor_box().periodic[i] {
            let mid = 0.5 * (sys.attractor_box().lower[i] + sys.attractor_box().upper[i]);
            p[i] = mid + 0.5 * (p[i] - mid);
        }
    }
    p
}
