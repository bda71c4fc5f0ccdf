//! Random perturbations `x ↦ φ¹_{ω₁}∘…∘φ^d_{ω_d}∘f(x)` of the roster
//! systems, their stationary measures, and zero-noise limits.

mod lift;
mod measure;
mod stationary;

use std::f64::consts::TAU;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::systems::{check_start, BoxRegion, MapFamily, Matrix, OrbitSegment, Point, SmoothSystem, ESCAPE_MARGIN};

pub use lift::{lift_check, LiftReport};
pub use measure::{EmpiricalMeasure, Grid};
pub use stationary::{
    stationary_mc, stationary_ulam, ulam_matrix, zero_noise_limit, Estimator, SparseStochastic, UlamResult, ZeroNoiseReport,
    POWER_TOL, ZERO_NOISE_MC,
};

/// Uniform noise on `[-amplitude, amplitude]^dim`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseKernel {
    pub dim: usize,
    pub amplitude: f64,
}

impl NoiseKernel {
    pub fn new(dim: usize, amplitude: f64) -> Result<Self> {
        if dim == 0 {
            return Err(Error::invalid("noise dimension must be positive"));
        }
        if !(amplitude >= 0.0) || !amplitude.is_finite() {
            return Err(Error::invalid(format!("noise amplitude must be finite and non-negative, got {amplitude}")));
        }
        Ok(Self { dim, amplitude })
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Point {
        Point::from_iterator(self.dim, (0..self.dim).map(|_| self.amplitude * (2.0 * rng.gen::<f64>() - 1.0)))
    }

    pub fn contains(&self, omega: &Point) -> bool {
        omega.len() == self.dim && omega.iter().all(|w| w.abs() <= self.amplitude)
    }

    /// Support containment `supp(self) ⊆ supp(other)`.
    pub fn is_nested_in(&self, other: &NoiseKernel) -> bool {
        self.dim == other.dim && self.amplitude <= other.amplitude
    }

    /// Kernels `amplitude·ratio^i`, `i < levels`.
    pub fn geometric_schedule(dim: usize, first: f64, ratio: f64, levels: usize) -> Result<Vec<Self>> {
        if !(ratio > 0.0 && ratio < 1.0) {
            return Err(Error::invalid("schedule ratio must lie in (0,1)"));
        }
        (0..levels).map(|i| Self::new(dim, first * ratio.powi(i as i32))).collect()
    }
}

type FieldFn = Arc<dyn Fn(&Point) -> Point + Send + Sync>;
type FieldJacobian = Arc<dyn Fn(&Point) -> Matrix + Send + Sync>;

/// A smooth vector field with its derivative.
#[derive(Clone)]
pub struct VectorField {
    pub name: String,
    value: FieldFn,
    jacobian: FieldJacobian,
}

impl std::fmt::Debug for VectorField {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "VectorField({})", self.name)
    }
}

impl VectorField {
    pub fn new(
        name: impl Into<String>,
        value: impl Fn(&Point) -> Point + Send + Sync + 'static,
        jacobian: impl Fn(&Point) -> Matrix + Send + Sync + 'static,
    ) -> Self {
        Self { name: name.into(), value: Arc::new(value), jacobian: Arc::new(jacobian) }
    }

    pub fn value(&self, p: &Point) -> Point {
        (self.value)(p)
    }

    pub fn jacobian(&self, p: &Point) -> Matrix {
        (self.jacobian)(p)
    }

    /// The constant field `e_axis`.
    pub fn coordinate(dim: usize, axis: usize) -> Self {
        Self::new(
            format!("e{axis}"),
            move |_| {
                let mut v = Point::zeros(dim);
                v[axis] = 1.0;
                v
            },
            move |_| Matrix::zeros(dim, dim),
        )
    }

    /// `(1 + κ sin 2π x_{axis+1}) e_axis`, a non-constant field that still
    /// spans together with its siblings when `|κ| < 1`.
    pub fn sheared(dim: usize, axis: usize, kappa: f64) -> Self {
        let other = (axis + 1) % dim;
        Self::new(
            format!("sheared-e{axis}"),
            move |p| {
                let mut v = Point::zeros(dim);
                v[axis] = 1.0 + kappa * (TAU * p[other]).sin();
                v
            },
            move |p| {
                let mut m = Matrix::zeros(dim, dim);
                m[(axis, other)] = kappa * TAU * (TAU * p[other]).cos();
                m
            },
        )
    }
}

/// How noise enters the random map.
#[derive(Debug, Clone)]
pub enum Perturbation {
    /// `φ^i_t(x) = x + t·e_i`: exact, Lebesgue-preserving translations.
    Translations,
    /// Time-`ω_i` flows of general fields, integrated by RK4 with step
    /// `amplitude / 8`.
    Fields { fields: Vec<VectorField>, step: f64 },
}

/// A base system with a spanning family of perturbing flows.
#[derive(Debug, Clone)]
pub struct RandomSystem {
    base: SmoothSystem,
    perturbation: Perturbation,
}

impl RandomSystem {
    pub fn translations(base: SmoothSystem) -> Self {
        Self { base, perturbation: Perturbation::Translations }
    }

    /// Flows of `fields`, which must span the tangent space at every point.
    pub fn with_fields(base: SmoothSystem, fields: Vec<VectorField>, kernel: &NoiseKernel) -> Result<Self> {
        if fields.len() != kernel.dim {
            return Err(Error::invalid("one perturbing field per noise coordinate is required"));
        }
        let d = base.dim();
        // spanning, checked on a deterministic sample
        let mut rng = ChaCha8Rng::seed_from_u64(0xf1e1d5);
        for _ in 0..256 {
            let p = base.attractor_box().sample_uniform(&mut rng);
            let m = Matrix::from_columns(&fields.iter().map(|f| f.value(&p)).collect::<Vec<_>>());
            if m.rank(1e-9) < d {
                return Err(Error::invalid(format!("perturbing fields do not span the tangent space at {:?}", p.as_slice())));
            }
        }
        let step = (kernel.amplitude / 8.0).max(1e-6);
        Ok(Self { base, perturbation: Perturbation::Fields { fields, step } })
    }

    pub fn base(&self) -> &SmoothSystem {
        &self.base
    }

    pub fn perturbation(&self) -> &Perturbation {
        &self.perturbation
    }

    /// The random map `f_ω`, after checking `ω` against the kernel.
    pub fn random_map(&self, kernel: &NoiseKernel, omega: &Point) -> Result<impl Fn(&Point) -> Point + '_> {
        if !kernel.contains(omega) {
            return Err(Error::invalid(format!(
                "noise {:?} outside the kernel support [-{}, {}]^{}",
                omega.as_slice(),
                kernel.amplitude,
                kernel.amplitude,
                kernel.dim
            )));
        }
        if let Perturbation::Translations = self.perturbation {
            if omega.len() != self.base.dim() {
                return Err(Error::invalid("translation noise needs one coordinate per state dimension"));
            }
        }
        let omega = omega.clone();
        Ok(move |x: &Point| self.apply(Some(&omega), x))
    }

    fn apply(&self, omega: Option<&Point>, x: &Point) -> Point {
        let y = self.base.forward(x);
        match omega {
            None => y,
            Some(w) => {
                let mut z = self.flow_all(w, &y, 1.0).0;
                self.base.attractor_box().wrap(&mut z);
                z
            }
        }
    }

    /// `φ¹_{s·ω₁}∘…∘φ^d_{s·ω_d}` applied to `y` (innermost `φ^d` first when
    /// `s = 1`; the reverse order when `s = -1`, giving the inverse), with its
    /// derivative.
    fn flow_all(&self, omega: &Point, y: &Point, sign: f64) -> (Point, Matrix) {
        let d = y.len();
        match &self.perturbation {
            Perturbation::Translations => (y + omega * sign, Matrix::identity(d, d)),
            Perturbation::Fields { fields, step } => {
                let mut p = y.clone();
                let mut m = Matrix::identity(d, d);
                let order: Vec<usize> = if sign > 0.0 { (0..fields.len()).rev().collect() } else { (0..fields.len()).collect() };
                for i in order {
                    let (q, dq) = flow(&fields[i], &p, sign * omega[i], *step);
                    p = q;
                    m = dq * m;
                }
                (p, m)
            }
        }
    }
}

/// RK4 integration of `ẋ = X(x)` with its variational equation for time `t`.
fn flow(field: &VectorField, x: &Point, t: f64, max_step: f64) -> (Point, Matrix) {
    let d = x.len();
    if t == 0.0 {
        return (x.clone(), Matrix::identity(d, d));
    }
    let n = (t.abs() / max_step).ceil().max(1.0) as usize;
    let h = t / n as f64;
    let mut p = x.clone();
    let mut m = Matrix::identity(d, d);
    for _ in 0..n {
        let k1 = field.value(&p);
        let l1 = field.jacobian(&p) * &m;
        let p2 = &p + &k1 * (h / 2.0);
        let m2 = &m + &l1 * (h / 2.0);
        let k2 = field.value(&p2);
        let l2 = field.jacobian(&p2) * &m2;
        let p3 = &p + &k2 * (h / 2.0);
        let m3 = &m + &l2 * (h / 2.0);
        let k3 = field.value(&p3);
        let l3 = field.jacobian(&p3) * &m3;
        let p4 = &p + &k3 * h;
        let m4 = &m + &l3 * h;
        let k4 = field.value(&p4);
        let l4 = field.jacobian(&p4) * &m4;
        p += (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (h / 6.0);
        m += (l1 + l2 * 2.0 + l3 * 2.0 + l4) * (h / 6.0);
    }
    (p, m)
}

impl MapFamily for RandomSystem {
    fn system(&self) -> &SmoothSystem {
        &self.base
    }

    fn step(&self, omega: Option<&Point>, x: &Point) -> Point {
        self.apply(omega, x)
    }

    fn step_jacobian(&self, omega: Option<&Point>, x: &Point) -> Matrix {
        let df = self.base.derivative(x);
        match (omega, &self.perturbation) {
            (None, _) | (Some(_), Perturbation::Translations) => df,
            (Some(w), _) => {
                let y = self.base.forward(x);
                self.flow_all(w, &y, 1.0).1 * df
            }
        }
    }

    fn step_preimage(&self, omega: Option<&Point>, y: &Point, hint: &Point) -> Point {
        let mut fx = match omega {
            None => y.clone(),
            Some(w) => self.flow_all(w, y, -1.0).0,
        };
        self.base.attractor_box().wrap(&mut fx);
        self.base.preimage_near(&fx, hint)
    }
}

/// A realised piece of the skew product: states, the noise driving each
/// step, and the index playing the role of time zero (noise before it is the
/// recorded past).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SkewOrbit {
    pub segment: OrbitSegment,
    pub origin: usize,
}

impl SkewOrbit {
    pub fn len(&self) -> usize {
        self.segment.len()
    }

    pub fn is_empty(&self) -> bool {
        self.segment.is_empty()
    }

    pub fn noise(&self) -> &[Point] {
        self.segment.noise.as_deref().unwrap_or(&[])
    }

    /// `log |det Df_{ω_i}(x_i)|` at every step.
    pub fn derivative_log(&self, rs: &RandomSystem) -> Vec<f64> {
        (0..self.len().saturating_sub(1)).map(|i| self.segment.jacobian(rs, i).determinant().abs().ln()).collect()
    }
}

/// Runs `n_steps` of the random system from `x0` with i.i.d. kernel noise,
/// recording every noise value. The origin marks the middle of the window.
pub fn sample_skew_orbit(rs: &RandomSystem, kernel: &NoiseKernel, x0: &Point, n_steps: usize, seed: u64) -> Result<SkewOrbit> {
    let sys = rs.base();
    check_start(sys, x0)?;
    check_kernel(rs, kernel)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let escape = sys.attractor_box().enlarged(ESCAPE_MARGIN);
    let mut points = Vec::with_capacity(n_steps + 1);
    let mut noise = Vec::with_capacity(n_steps);
    let mut x = x0.clone();
    points.push(x.clone());
    for step in 0..n_steps {
        let w = kernel.sample(&mut rng);
        x = rs.apply(Some(&w), &x);
        sys.dither(&mut x, &mut rng);
        if !escape.contains(&x) {
            return Err(Error::Escape {
                step,
                detail: format!(
                    "noise amplitude {} pushed the orbit to {:?}, outside the attracting neighbourhood",
                    kernel.amplitude,
                    x.as_slice()
                ),
            });
        }
        noise.push(w);
        points.push(x.clone());
    }
    // the last point has no outgoing step; pad so noise[i] aligns with points[i]
    noise.push(kernel.sample(&mut rng));
    let origin = points.len() / 2;
    Ok(SkewOrbit { segment: OrbitSegment { points, noise: Some(noise) }, origin })
}

/// Streams a random orbit without storing it: the stationary sample of the
/// perturbed system. The transient is checked for escape; afterwards the
/// stream simply ends at the first point outside the attracting
/// neighbourhood.
#[derive(Clone)]
pub struct RandomOrbitIter<'a> {
    rs: &'a RandomSystem,
    kernel: NoiseKernel,
    escape: BoxRegion,
    x: Point,
    rng: ChaCha8Rng,
    remaining: usize,
}

impl<'a> RandomOrbitIter<'a> {
    pub fn new(rs: &'a RandomSystem, kernel: &NoiseKernel, x0: &Point, transient: usize, n: usize, seed: u64) -> Result<Self> {
        check_start(rs.base(), x0)?;
        check_kernel(rs, kernel)?;
        let escape = rs.base().attractor_box().enlarged(ESCAPE_MARGIN);
        let mut it = Self { rs, kernel: *kernel, escape, x: x0.clone(), rng: ChaCha8Rng::seed_from_u64(seed), remaining: n };
        for step in 0..transient {
            if !it.advance() {
                return Err(Error::Escape {
                    step,
                    detail: format!("noise amplitude {} pushed the orbit out during the transient", kernel.amplitude),
                });
            }
        }
        Ok(it)
    }

    fn advance(&mut self) -> bool {
        let w = self.kernel.sample(&mut self.rng);
        self.x = self.rs.apply(Some(&w), &self.x);
        self.rs.base().dither(&mut self.x, &mut self.rng);
        self.escape.contains(&self.x)
    }
}

impl Iterator for RandomOrbitIter<'_> {
    type Item = Point;

    fn next(&mut self) -> Option<Point> {
        if self.remaining == 0 {
            return None;
        }
        let out = self.x.clone();
        self.remaining = if self.advance() { self.remaining - 1 } else { 0 };
        Some(out)
    }
}

pub(crate) fn check_kernel(rs: &RandomSystem, kernel: &NoiseKernel) -> Result<()> {
    let needed = match rs.perturbation() {
        Perturbation::Translations => rs.base().dim(),
        Perturbation::Fields { fields, .. } => fields.len(),
    };
    if kernel.dim != needed {
        return Err(Error::invalid(format!("kernel dimension {} does not match the {needed} perturbing flows", kernel.dim)));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::systems::{builtin_system, default_start};

    #[test]
    fn random_stream_matches_recorded_orbit() {
        let sys = builtin_system("solenoid").unwrap();
        let rs = RandomSystem::translations(sys.clone());
        let k = NoiseKernel::new(3, 0.01).unwrap();
        let x0 = default_start(&sys, 4);
        let streamed: Vec<Point> = RandomOrbitIter::new(&rs, &k, &x0, 0, 200, 8).unwrap().collect();
        assert_eq!(streamed.len(), 200);
        assert_eq!(streamed[0], x0);
        // same rng use as the recorded skew orbit: noise then dither per step
        let recorded = sample_skew_orbit(&rs, &k, &x0, 199, 8).unwrap();
        for (a, b) in streamed.iter().zip(&recorded.segment.points) {
            assert_eq!(a, b);
        }
        let big = NoiseKernel::new(3, 5.0).unwrap();
        assert!(matches!(RandomOrbitIter::new(&rs, &big, &x0, 100, 10, 1), Err(Error::Escape { .. })));
    }

    #[test]
    fn zero_noise_is_base_map() {
        let sys = builtin_system("cat_map").unwrap();
        let rs = RandomSystem::translations(sys.clone());
        let k = NoiseKernel::new(2, 0.1).unwrap();
        let f0 = rs.random_map(&k, &Point::zeros(2)).unwrap();
        let x = default_start(&sys, 1);
        assert_eq!(f0(&x), sys.forward(&x));
        assert!(rs.random_map(&k, &Point::from_vec(vec![0.2, 0.0])).is_err());
    }

    #[test]
    fn translations_add_noise() {
        let sys = builtin_system("skew_center").unwrap();
        let rs = RandomSystem::translations(sys.clone());
        let k = NoiseKernel::new(2, 0.1).unwrap();
        let w = Point::from_vec(vec![0.05, -0.03]);
        let x = default_start(&sys, 2);
        let mut expect = sys.forward(&x) + &w;
        sys.attractor_box().wrap(&mut expect);
        assert!(sys.distance(&rs.random_map(&k, &w).unwrap()(&x), &expect) < 1e-15);
    }

    #[test]
    fn constant_fields_integrate_to_translations() {
        let sys = builtin_system("cat_map").unwrap();
        let k = NoiseKernel::new(2, 0.05).unwrap();
        let rs = RandomSystem::with_fields(sys.clone(), vec![VectorField::coordinate(2, 0), VectorField::coordinate(2, 1)], &k).unwrap();
        let tr = RandomSystem::translations(sys.clone());
        let w = Point::from_vec(vec![0.04, -0.02]);
        let x = default_start(&sys, 3);
        assert!(sys.distance(&rs.step(Some(&w), &x), &tr.step(Some(&w), &x)) < 1e-14);
    }

    #[test]
    fn field_flow_jacobian_matches_finite_difference() {
        let sys = builtin_system("skew_center").unwrap();
        let k = NoiseKernel::new(2, 0.05).unwrap();
        let rs = RandomSystem::with_fields(sys.clone(), vec![VectorField::sheared(2, 0, 0.5), VectorField::sheared(2, 1, 0.5)], &k).unwrap();
        let w = Point::from_vec(vec![0.04, -0.03]);
        let x = default_start(&sys, 4);
        let j = rs.step_jacobian(Some(&w), &x);
        let h = 1e-6;
        for c in 0..2 {
            let mut xp = x.clone();
            xp[c] += h;
            let mut xm = x.clone();
            xm[c] -= h;
            let fd = sys.displacement(&rs.step(Some(&w), &xm), &rs.step(Some(&w), &xp)) / (2.0 * h);
            for r in 0..2 {
                assert!((fd[r] - j[(r, c)]).abs() < 1e-6);
            }
        }
        // and the flows invert
        let y = rs.step(Some(&w), &x);
        assert!(sys.distance(&rs.step_preimage(Some(&w), &y, &x), &x) < 1e-10);
    }

    #[test]
    fn non_spanning_fields_rejected() {
        let sys = builtin_system("cat_map").unwrap();
        let k = NoiseKernel::new(2, 0.05).unwrap();
        let fields = vec![VectorField::coordinate(2, 0), VectorField::coordinate(2, 0)];
        assert!(RandomSystem::with_fields(sys, fields, &k).is_err());
    }

    #[test]
    fn skew_orbit_is_deterministic_and_consistent() {
        let sys = builtin_system("solenoid").unwrap();
        let rs = RandomSystem::translations(sys.clone());
        let k = NoiseKernel::new(3, 1e-3).unwrap();
        let x0 = default_start(&sys, 5);
        let a = sample_skew_orbit(&rs, &k, &x0, 2000, 9).unwrap();
        let b = sample_skew_orbit(&rs, &k, &x0, 2000, 9).unwrap();
        assert_eq!(a, b);
        for i in 0..a.len() - 1 {
            let next = rs.step(a.segment.omega(i), &a.segment.points[i]);
            assert!(sys.distance(&next, &a.segment.points[i + 1]) < 1e-12);
            assert!(k.contains(&a.noise()[i]));
        }
    }

    #[test]
    fn zero_amplitude_reproduces_base_orbit() {
        let sys = builtin_system("cat_map").unwrap();
        let rs = RandomSystem::translations(sys.clone());
        let k = NoiseKernel::new(2, 0.0).unwrap();
        let x0 = default_start(&sys, 6);
        let o = sample_skew_orbit(&rs, &k, &x0, 100, 1).unwrap();
        let mut x = x0.clone();
        for p in &o.segment.points {
            assert!(sys.distance(p, &x) < 1e-12);
            x = sys.forward(&x);
        }
    }

    #[test]
    fn large_noise_escapes() {
        let sys = builtin_system("solenoid").unwrap();
        let rs = RandomSystem::translations(sys.clone());
        let k = NoiseKernel::new(3, 0.6).unwrap();
        let err = sample_skew_orbit(&rs, &k, &default_start(&sys, 1), 10_000, 1).unwrap_err();
        assert!(matches!(err, Error::Escape { .. }));
    }

    #[test]
    fn nested_schedule() {
        let s = NoiseKernel::geometric_schedule(2, 0.1, 0.5, 7).unwrap();
        for w in s.windows(2) {
            assert!(w[1].is_nested_in(&w[0]));
            assert!(!w[0].is_nested_in(&w[1]));
        }
    }
}
