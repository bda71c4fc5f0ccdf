use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use super::{BoxRegion, BundleFrame, BundleSel, MapFamily, Matrix, Point};
use crate::error::{Error, Result};
use crate::linalg::complement;

/// Nodes of the parameter mesh of a plaque curve.
pub const PLAQUE_MESH: usize = 129;

const BISECTION_STEPS: usize = 100;

/// A curve given as a graph `s ↦ c + s·u + N·h(s)` over a uniform mesh on
/// `[lo, hi]`, with heights and slopes at the nodes (cubic Hermite in
/// between).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct GraphCurve {
    center: Point,
    u: Point,
    normal: Matrix,
    lo: f64,
    hi: f64,
    heights: Vec<DVector<f64>>,
    slopes: Vec<DVector<f64>>,
}

impl GraphCurve {
    fn flat(center: Point, u: Point, normal: Matrix, lo: f64, hi: f64) -> Self {
        let m = normal.ncols();
        Self {
            center,
            u,
            normal,
            lo,
            hi,
            heights: vec![DVector::zeros(m); PLAQUE_MESH],
            slopes: vec![DVector::zeros(m); PLAQUE_MESH],
        }
    }

    fn step(&self) -> f64 {
        (self.hi - self.lo) / (PLAQUE_MESH - 1) as f64
    }

    fn node(&self, k: usize) -> f64 {
        self.lo + k as f64 * self.step()
    }

    /// Height and slope at `s` (clamped to the mesh).
    fn eval(&self, s: f64) -> (DVector<f64>, DVector<f64>) {
        let dx = self.step();
        let s = s.clamp(self.lo, self.hi);
        let k = (((s - self.lo) / dx).floor() as usize).min(PLAQUE_MESH - 2);
        let t = (s - self.node(k)) / dx;
        let (h0, h1, m0, m1) = (&self.heights[k], &self.heights[k + 1], &self.slopes[k], &self.slopes[k + 1]);
        let t2 = t * t;
        let t3 = t2 * t;
        let h = h0 * (2.0 * t3 - 3.0 * t2 + 1.0)
            + m0 * ((t3 - 2.0 * t2 + t) * dx)
            + h1 * (-2.0 * t3 + 3.0 * t2)
            + m1 * ((t3 - t2) * dx);
        let dh = h0 * ((6.0 * t2 - 6.0 * t) / dx)
            + m0 * (3.0 * t2 - 4.0 * t + 1.0)
            + h1 * ((-6.0 * t2 + 6.0 * t) / dx)
            + m1 * (3.0 * t2 - 2.0 * t);
        (h, dh)
    }

    /// Unwrapped point at parameter `s` and its tangent vector.
    fn point(&self, s: f64) -> (Point, Point) {
        let (h, dh) = self.eval(s);
        (&self.center + &self.u * s + &self.normal * h, &self.u + &self.normal * dh)
    }
}

/// A local manifold through `center` tangent to a bundle `E`: a graph curve
/// when `dim E = 1`, or a coordinate cube when `E` is the whole space.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LocalManifold {
    pub center: Point,
    pub radius: f64,
    /// Angle (as a slope) between the curve and `E` at the center.
    pub tangency_error: f64,
    region: BoxRegion,
    curve: Option<GraphCurve>,
}

impl LocalManifold {
    pub fn e_dim(&self) -> usize {
        if self.curve.is_some() {
            1
        } else {
            self.center.len()
        }
    }

    pub fn is_curve(&self) -> bool {
        self.curve.is_some()
    }

    /// Unit direction the curve is graphed over.
    pub fn axis(&self) -> Option<&Point> {
        self.curve.as_ref().map(|c| &c.u)
    }

    pub fn contains_param(&self, s: &[f64]) -> bool {
        s.iter().all(|v| v.abs() <= self.radius * (1.0 + 1e-12))
    }

    /// The point with parameter `s` (one coordinate for curves, `d` for
    /// cubes), reduced into the box.
    pub fn point_at(&self, s: &[f64]) -> Point {
        let mut p = match &self.curve {
            Some(c) => c.point(s[0]).0,
            None => &self.center + Point::from_column_slice(s),
        };
        self.region.wrap(&mut p);
        p
    }

    /// Tangent vectors (not normalised) at parameter `s`, one column per
    /// parameter.
    pub fn tangent_at(&self, s: &[f64]) -> Matrix {
        match &self.curve {
            Some(c) => Matrix::from_columns(&[c.point(s[0]).1]),
            None => Matrix::identity(self.center.len(), self.center.len()),
        }
    }

    /// Parameters of the foot of `q` and the size of its offset from the
    /// manifold measured along the normal directions, or `None` when `q` does
    /// not project into the parameter domain.
    pub fn locate(&self, q: &Point) -> Option<(Vec<f64>, f64)> {
        let disp = self.region.displacement(&self.center, q);
        match &self.curve {
            Some(c) => {
                let s = c.u.dot(&disp);
                if s.abs() > self.radius * (1.0 + 1e-9) {
                    return None;
                }
                let (h, _) = c.eval(s);
                Some((vec![s], (c.normal.transpose() * &disp - h).norm()))
            }
            None => {
                let s: Vec<f64> = disp.iter().copied().collect();
                self.contains_param(&s).then_some((s, 0.0))
            }
        }
    }

    /// Arc length of the curve between parameters `a` and `b`.
    pub fn arc_length(&self, a: f64, b: f64) -> f64 {
        let Some(c) = &self.curve else { return (b - a).abs() };
        let (a, b) = if a <= b { (a, b) } else { (b, a) };
        let cells = (((b - a) / c.step()).ceil() as usize).max(1) * 4;
        let h = (b - a) / cells as f64;
        let speed = |s: f64| (1.0 + c.eval(s).1.norm_squared()).sqrt();
        // composite Simpson
        let mut acc = speed(a) + speed(b);
        for i in 1..cells {
            acc += speed(a + i as f64 * h) * if i % 2 == 1 { 4.0 } else { 2.0 };
        }
        acc * h / 3.0
    }

    /// Distance in the ambient box (minimal image on periodic axes).
    pub fn region_distance(&self, a: &Point, b: &Point) -> f64 {
        self.region.distance(a, b)
    }

    /// Displacement `b − a` in the ambient box (minimal image).
    pub fn region_displacement(&self, a: &Point, b: &Point) -> Point {
        self.region.displacement(a, b)
    }

    pub fn total_length(&self) -> f64 {
        self.arc_length(-self.radius, self.radius)
    }

    /// The same manifold re-parameterised around the point with parameter
    /// `s_c`, keeping the part within `new_radius` of it.
    pub fn recentred(&self, s_c: &[f64], new_radius: f64) -> Result<Self> {
        if s_c.iter().any(|v| v.abs() + new_radius > self.radius * (1.0 + 1e-12)) {
            return Err(Error::ChartExit(format!(
                "recentring at {s_c:?} with radius {new_radius} leaves the plaque of radius {}",
                self.radius
            )));
        }
        let center = self.point_at(s_c);
        let curve = self.curve.as_ref().map(|c| {
            let (h_c, _) = c.eval(s_c[0]);
            let mut out = GraphCurve::flat(center.clone(), c.u.clone(), c.normal.clone(), -new_radius, new_radius);
            for k in 0..PLAQUE_MESH {
                let (h, dh) = c.eval(s_c[0] + out.node(k));
                out.heights[k] = h - &h_c;
                out.slopes[k] = dh;
            }
            out
        });
        Ok(Self { center, radius: new_radius, tangency_error: self.tangency_error, region: self.region.clone(), curve })
    }
}

/// Projection of `f_ω(γ(σ))` onto the axis of the next stage.
struct StepMap<'a, F: MapFamily + ?Sized> {
    family: &'a F,
    region: &'a BoxRegion,
    omega: Option<&'a Point>,
    from: &'a GraphCurve,
    center: &'a Point,
    u: &'a Point,
}

impl<F: MapFamily + ?Sized> StepMap<'_, F> {
    fn project(&self, sigma: f64) -> f64 {
        let (mut p, _) = self.from.point(sigma);
        self.region.wrap(&mut p);
        self.u.dot(&self.region.displacement(self.center, &self.family.step(self.omega, &p)))
    }

    /// Mesh parameters (with 0 inserted) bracketing the monotone run of the
    /// projection around σ = 0, cut off once `±target` is passed.
    fn run(&self, target: f64) -> (Vec<f64>, Vec<f64>, usize, usize) {
        let mut sigmas: Vec<f64> = (0..PLAQUE_MESH).map(|k| self.from.node(k)).collect();
        if self.from.lo < 0.0 && self.from.hi > 0.0 {
            sigmas.push(0.0);
        }
        sigmas.sort_by(f64::total_cmp);
        sigmas.dedup();
        let zero = sigmas
            .iter()
            .enumerate()
            .min_by(|a, b| a.1.abs().total_cmp(&b.1.abs()))
            .map(|(i, _)| i)
            .unwrap_or(0);
        let values: Vec<f64> = sigmas.iter().map(|s| self.project(*s)).collect();
        let mut right = zero;
        while right + 1 < sigmas.len() && values[right + 1] > values[right] && values[right] < target {
            right += 1;
        }
        let mut left = zero;
        while left > 0 && values[left - 1] < values[left] && values[left] > -target {
            left -= 1;
        }
        (sigmas, values, left, right)
    }

    /// The σ in the run whose image projects to `s`.
    fn solve(&self, s: f64, sigmas: &[f64], values: &[f64], left: usize, right: usize) -> Option<f64> {
        if s < values[left] || s > values[right] {
            return None;
        }
        let mut a = left;
        while a + 1 < right && values[a + 1] < s {
            a += 1;
        }
        let b = (a + 1).min(right);
        let (mut sa, mut sb) = (sigmas[a], sigmas[b]);
        if s <= values[a] {
            return Some(sa);
        }
        if s >= values[b] {
            return Some(sb);
        }
        // Illinois variant of regula falsi: the bracket is kept, and halving
        // the stale end's value stops it stalling on one side
        let (mut fa, mut fb) = (values[a] - s, values[b] - s);
        let mut side = 0i8;
        for _ in 0..BISECTION_STEPS {
            let mut m = sb - fb * (sb - sa) / (fb - fa);
            if !(m > sa && m < sb) {
                m = 0.5 * (sa + sb);
            }
            let fm = self.project(m) - s;
            if fm == 0.0 {
                return Some(m);
            }
            if fm < 0.0 {
                (sa, fa) = (m, fm);
                if side == -1 {
                    fb *= 0.5;
                }
                side = -1;
            } else {
                (sb, fb) = (m, fm);
                if side == 1 {
                    fa *= 0.5;
                }
                side = 1;
            }
            if sb - sa <= 1e-16 * (1.0 + sa.abs()) || fm.abs() <= 1e-15 * (1.0 + s.abs()) {
                break;
            }
        }
        Some(if fa.abs() < fb.abs() { sa } else { sb })
    }
}

/// The graph transform along `x_{idx-depth-keep}, …, x_idx`, keeping the
/// curves at the last `keep + 1` orbit points. The curve at `x_{idx-j}`
/// contains the backward iterates `f^{-j}` of the final plaque, so backward
/// orbits of plaque points are found by inverting one stage at a time
/// instead of applying `f^{-1}`, which is ill-conditioned wherever the
/// complementary directions contract.
#[derive(Debug, Clone)]
pub struct PlaqueChain {
    radius: f64,
    region: BoxRegion,
    /// Oldest first; the last stage is the plaque at `x_idx`.
    centers: Vec<Point>,
    omegas: Vec<Option<Point>>,
    curves: Option<Vec<GraphCurve>>,
    tangency_error: f64,
}

/// Local manifold tangent to `E = sel` at frame point `idx`, obtained by
/// pushing a flat graph at `x_{idx-depth}` forward `depth` times along the
/// recorded orbit.
pub fn unstable_plaque<F: MapFamily + ?Sized>(
    family: &F,
    frame: &BundleFrame,
    idx: usize,
    sel: BundleSel,
    radius: f64,
    depth: usize,
) -> Result<LocalManifold> {
    Ok(plaque_chain(family, frame, idx, sel, radius, depth, 0)?.plaque())
}

/// As [`unstable_plaque`], also keeping `keep` backward stages.
pub fn plaque_chain<F: MapFamily + ?Sized>(
    family: &F,
    frame: &BundleFrame,
    idx: usize,
    sel: BundleSel,
    radius: f64,
    depth: usize,
    keep: usize,
) -> Result<PlaqueChain> {
    let sys = family.system();
    let d = sys.dim();
    let region = sys.attractor_box().clone();
    if idx >= frame.len() {
        return Err(Error::invalid(format!("frame index {idx} beyond frame of length {}", frame.len())));
    }
    if !(radius > 0.0) {
        return Err(Error::invalid("plaque radius must be positive"));
    }
    if depth + keep > idx {
        return Err(Error::invalid(format!(
            "plaque depth {} reaches before the start of the frame (index {idx})",
            depth + keep
        )));
    }
    let centers: Vec<Point> = (idx - keep..=idx).map(|j| frame.point(j).clone()).collect();
    let omegas: Vec<Option<Point>> = (idx - keep..=idx).map(|j| frame.orbit.omega(j).cloned()).collect();
    let e_dim = frame.spec.dim_of(sel);
    if e_dim == d {
        return Ok(PlaqueChain { radius, region, centers, omegas, curves: None, tangency_error: 0.0 });
    }
    if e_dim != 1 {
        return Err(Error::invalid(format!(
            "plaques are supported for one-dimensional bundles or the whole space, not dimension {e_dim}"
        )));
    }
    if let Some(w) = region.min_periodic_width() {
        if 2.0 * radius > 0.25 * w {
            return Err(Error::invalid(format!("plaque radius {radius} is too large for a circle of length {w}")));
        }
    }

    let reach = 2.0 * radius;
    let j0 = idx - depth - keep;
    let flat_at = |j: usize, lo: f64, hi: f64| {
        let u = frame.basis(j, sel).column(0).into_owned();
        GraphCurve::flat(frame.point(j).clone(), u.clone(), complement(&Matrix::from_columns(&[u])), lo, hi)
    };
    let mut curve = if j0 == idx { flat_at(idx, -radius, radius) } else { flat_at(j0, -reach, reach) };
    let mut kept = Vec::with_capacity(keep + 1);
    if keep == depth + keep {
        kept.push(curve.clone());
    }
    for j in j0..idx {
        let omega = frame.orbit.omega(j);
        let last = j + 1 == idx;
        let jac = family.step_jacobian(omega, frame.point(j));
        let mut u = frame.basis(j + 1, sel).column(0).into_owned();
        if u.dot(&(&jac * &curve.u)) < 0.0 {
            u = -u;
        }
        let normal = complement(&Matrix::from_columns(&[u.clone()]));
        let center = frame.point(j + 1).clone();
        let step = StepMap { family, region: &region, omega, from: &curve, center: &center, u: &u };
        let target = if last { radius } else { reach };
        let (sigmas, values, left, right) = step.run(target);
        let (lo, hi) = (values[left].max(-target), values[right].min(target));
        if last && (lo > -radius * (1.0 - 1e-12) || hi < radius * (1.0 - 1e-12)) {
            return Err(Error::ChartExit(format!(
                "image covers [{lo:.4}, {hi:.4}] instead of ±{radius}; try a smaller radius"
            )));
        }
        if !(hi - lo > 1e-6 * radius) {
            return Err(Error::ChartExit("graph transform collapsed; try a smaller radius".into()));
        }
        let (lo, hi) = if last { (-radius, radius) } else { (lo, hi) };

        let mut next = GraphCurve::flat(center.clone(), u.clone(), normal.clone(), lo, hi);
        for k in 0..PLAQUE_MESH {
            let s = next.node(k).clamp(values[left], values[right]);
            let sigma = step.solve(s, &sigmas, &values, left, right).expect("node inside the run");
            let (mut p, tangent) = curve.point(sigma);
            region.wrap(&mut p);
            let disp = region.displacement(&center, &family.step(omega, &p));
            let v = family.step_jacobian(omega, &p) * tangent;
            next.heights[k] = normal.transpose() * &disp;
            next.slopes[k] = normal.transpose() * &v / u.dot(&v);
        }
        // The plaque passes through the orbit point. Re-pinning it removes
        // rounding offsets, which otherwise grow wherever the normal
        // directions expand too.
        if next.lo <= 0.0 && next.hi >= 0.0 {
            let (h0, _) = next.eval(0.0);
            for h in next.heights.iter_mut() {
                *h -= &h0;
            }
        }
        curve = next;
        if j + 1 >= idx - keep {
            kept.push(curve.clone());
        }
    }
    let tangency_error = curve.eval(0.0).1.norm();
    Ok(PlaqueChain { radius, region, centers, omegas, curves: Some(kept), tangency_error })
}

impl PlaqueChain {
    /// Number of backward stages available.
    pub fn depth(&self) -> usize {
        self.centers.len() - 1
    }

    /// Noise of the step leaving the plaque's base point.
    pub fn omega_at_tip(&self) -> Option<&Point> {
        self.omegas.last().and_then(|w| w.as_ref())
    }

    pub fn plaque(&self) -> LocalManifold {
        let n = self.centers.len();
        LocalManifold {
            center: self.centers[n - 1].clone(),
            radius: self.radius,
            tangency_error: self.tangency_error,
            region: self.region.clone(),
            curve: self.curves.as_ref().map(|c| c[n - 1].clone()),
        }
    }

    /// Backward orbit `y, f^{-1}y, …, f^{-steps}y` of the plaque point with
    /// parameter `s`, together with the unit tangent to `E` at each point
    /// (absent for full-dimensional plaques).
    pub fn backward_orbit<F: MapFamily + ?Sized>(
        &self,
        family: &F,
        s: &[f64],
        steps: usize,
    ) -> Result<Vec<(Point, Option<Point>)>> {
        if steps > self.depth() {
            return Err(Error::invalid(format!("chain keeps {} backward stages, {steps} requested", self.depth())));
        }
        let n = self.centers.len();
        let mut out = Vec::with_capacity(steps + 1);
        match &self.curves {
            None => {
                let mut y = self.plaque().point_at(s);
                out.push((y.clone(), None));
                for b in 1..=steps {
                    let j = n - 1 - b;
                    y = family.step_preimage(self.omegas[j].as_ref(), &y, &self.centers[j]);
                    out.push((y.clone(), None));
                }
            }
            Some(curves) => {
                let mut sigma = s[0];
                let unit = |c: &GraphCurve, sigma: f64| {
                    let (mut p, t) = c.point(sigma);
                    self.region.wrap(&mut p);
                    let norm = t.norm();
                    (p, Some(t / norm))
                };
                out.push(unit(&curves[n - 1], sigma));
                for b in 1..=steps {
                    let j = n - 1 - b;
                    let next = &curves[j + 1];
                    let step = StepMap {
                        family,
                        region: &self.region,
                        omega: self.omegas[j].as_ref(),
                        from: &curves[j],
                        center: &next.center,
                        u: &next.u,
                    };
                    let (sigmas, values, left, right) = step.run(f64::INFINITY);
                    sigma = step.solve(sigma, &sigmas, &values, left, right).ok_or_else(|| {
                        Error::ChartExit(format!("backward iterate {b} of a plaque point left the stored graph"))
                    })?;
                    out.push(unit(&curves[j], sigma));
                }
            }
        }
        Ok(out)
    }

    /// `log J^E(f^{-j} y)` for `j = 1..=steps`, where `J^E` is the volume
    /// expansion of the derivative along `E`.
    pub fn backward_log_jacobians<F: MapFamily + ?Sized>(&self, family: &F, s: &[f64], steps: usize) -> Result<Vec<f64>> {
        let orbit = self.backward_orbit(family, s, steps)?;
        let n = self.centers.len();
        Ok((1..=steps)
            .map(|b| {
                let (p, t) = &orbit[b];
                let jac = family.step_jacobian(self.omegas[n - 1 - b].as_ref(), p);
                match t {
                    Some(t) => (jac * t).norm().ln(),
                    None => jac.determinant().abs().ln(),
                }
            })
            .collect())
    }
}

/// Backward orbit `y, f^{-1}y, …, f^{-depth}y` of a point near frame point
/// `idx`, choosing at each step the branch that follows the recorded orbit.
pub fn pull_back<F: MapFamily + ?Sized>(family: &F, frame: &BundleFrame, idx: usize, y: &Point, depth: usize) -> Result<Vec<Point>> {
    if depth > idx {
        return Err(Error::invalid(format!("pull-back depth {depth} exceeds frame index {idx}")));
    }
    let mut out = Vec::with_capacity(depth + 1);
    out.push(y.clone());
    for n in 1..=depth {
        let j = idx - n;
        let prev = family.step_preimage(frame.orbit.omega(j), out.last().unwrap(), frame.point(j));
        out.push(prev);
    }
    Ok(out)
}
