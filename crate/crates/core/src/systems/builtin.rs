use std::collections::BTreeMap;
use std::f64::consts::TAU;

use serde::{Deserialize, Serialize};

use super::{BoxRegion, Matrix, Point, SmoothSystem, SplittingSpec};
use crate::error::{Error, Result};

pub const BUILTIN_NAMES: [&str; 4] = ["cat_map", "solenoid", "skew_center", "contraction"];

/// The roster. `contraction` is a global sink used as the negative control
/// of the SRB report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SystemKind {
    /// `(x, y) ↦ (2x + y, x + y) mod 1`.
    CatMap,
    /// `(θ, x, y) ↦ (2θ, λx + c cos 2πθ, λy + c sin 2πθ)`.
    Solenoid { lambda: f64, c: f64 },
    /// `(θ, t) ↦ (mθ, k·t + a sin 2πt + b cos 2πθ)` on the torus, with
    /// `m = base_degree`, `k = center_degree`.
    SkewCenter { a: f64, b: f64, base_degree: u32, center_degree: u32 },
    /// `x ↦ factor·x` on `[-1, 1]²`.
    Contraction { factor: f64 },
}

pub fn builtin_system(name: &str) -> Result<SmoothSystem> {
    let (kind, region) = match name {
        "cat_map" => (SystemKind::CatMap, torus(2)),
        "solenoid" => (
            SystemKind::Solenoid { lambda: 0.25, c: 0.5 },
            BoxRegion::new(vec![0.0, -1.0, -1.0], vec![1.0, 1.0, 1.0], vec![true, false, false])?,
        ),
        "skew_center" => (SystemKind::SkewCenter { a: 0.1, b: 0.3, base_degree: 2, center_degree: 1 }, torus(2)),
        "contraction" => (
            SystemKind::Contraction { factor: 0.5 },
            BoxRegion::new(vec![-1.0, -1.0], vec![1.0, 1.0], vec![false, false])?,
        ),
        other => return Err(Error::UnknownSystem(other.to_string())),
    };
    kind.validate()?;
    Ok(SmoothSystem { name: name.to_string(), kind, region })
}

fn torus(d: usize) -> BoxRegion {
    BoxRegion { lower: vec![0.0; d], upper: vec![1.0; d], periodic: vec![true; d] }
}

fn circle_dist(a: f64, b: f64) -> f64 {
    let d = (a - b).rem_euclid(1.0);
    d.min(1.0 - d)
}

impl SystemKind {
    pub fn parameters(&self) -> BTreeMap<String, f64> {
        let mut m = BTreeMap::new();
        match *self {
            SystemKind::CatMap => {}
            SystemKind::Solenoid { lambda, c } => {
                m.insert("lambda".into(), lambda);
                m.insert("c".into(), c);
            }
            SystemKind::SkewCenter { a, b, base_degree, center_degree } => {
                m.insert("a".into(), a);
                m.insert("b".into(), b);
                m.insert("base_degree".into(), base_degree as f64);
                m.insert("center_degree".into(), center_degree as f64);
            }
            SystemKind::Contraction { factor } => {
                m.insert("factor".into(), factor);
            }
        }
        m
    }

    pub(super) fn with_overrides(&self, overrides: &BTreeMap<String, f64>) -> Result<Self> {
        let known = self.parameters();
        if let Some(bad) = overrides.keys().find(|k| !known.contains_key(*k)) {
            let names: Vec<&String> = known.keys().collect();
            return Err(Error::invalid(format!("unknown parameter `{bad}`; this system takes {names:?}")));
        }
        let get = |k: &str| overrides.get(k).copied().unwrap_or(known[k]);
        let degree = |k: &str| -> Result<u32> {
            let v = get(k);
            if v.fract() != 0.0 || !(1.0..=64.0).contains(&v) {
                return Err(Error::invalid(format!("{k} must be a small positive integer, got {v}")));
            }
            Ok(v as u32)
        };
        let out = match self {
            SystemKind::CatMap => SystemKind::CatMap,
            SystemKind::Solenoid { .. } => SystemKind::Solenoid { lambda: get("lambda"), c: get("c") },
            SystemKind::SkewCenter { .. } => SystemKind::SkewCenter {
                a: get("a"),
                b: get("b"),
                base_degree: degree("base_degree")?,
                center_degree: degree("center_degree")?,
            },
            SystemKind::Contraction { .. } => SystemKind::Contraction { factor: get("factor") },
        };
        out.validate()?;
        Ok(out)
    }

    fn validate(&self) -> Result<()> {
        match *self {
            SystemKind::CatMap => Ok(()),
            SystemKind::Solenoid { lambda, c } => {
                if !(lambda > 0.0 && lambda < 1.0 && c > 0.0 && lambda + c < 1.0) {
                    return Err(Error::invalid(format!(
                        "solenoid needs 0 < lambda < 1, c > 0 and lambda + c < 1 (got lambda={lambda}, c={c})"
                    )));
                }
                Ok(())
            }
            SystemKind::SkewCenter { a, b, base_degree, center_degree } => {
                if !a.is_finite() || !b.is_finite() || a < 0.0 {
                    return Err(Error::invalid("skew_center needs finite a >= 0 and finite b"));
                }
                if base_degree < 2 {
                    return Err(Error::invalid("skew_center base_degree must be at least 2"));
                }
                if TAU * a >= center_degree as f64 {
                    return Err(Error::invalid(format!(
                        "skew_center center derivative {center_degree} + 2πa·cos(2πt) vanishes for a={a}"
                    )));
                }
                Ok(())
            }
            SystemKind::Contraction { factor } => {
                if !(factor > 0.0 && factor < 1.0) {
                    return Err(Error::invalid(format!("contraction factor must lie in (0,1), got {factor}")));
                }
                Ok(())
            }
        }
    }

    pub(super) fn forward(&self, p: &Point) -> Point {
        match *self {
            SystemKind::CatMap => Point::from_vec(vec![2.0 * p[0] + p[1], p[0] + p[1]]),
            SystemKind::Solenoid { lambda, c } => {
                let (s, co) = (TAU * p[0]).sin_cos();
                Point::from_vec(vec![2.0 * p[0], lambda * p[1] + c * co, lambda * p[2] + c * s])
            }
            SystemKind::SkewCenter { a, b, base_degree, center_degree } => Point::from_vec(vec![
                base_degree as f64 * p[0],
                center_degree as f64 * p[1] + a * (TAU * p[1]).sin() + b * (TAU * p[0]).cos(),
            ]),
            SystemKind::Contraction { factor } => p * factor,
        }
    }

    /// A preimage of `y`; with a hint, the branch whose preimage is closest to
    /// it, otherwise a fixed branch.
    pub(super) fn inverse(&self, y: &Point, hint: Option<(&Point, &BoxRegion)>) -> Point {
        match *self {
            SystemKind::CatMap => Point::from_vec(vec![y[0] - y[1], -y[0] + 2.0 * y[1]]),
            SystemKind::Solenoid { lambda, c } => {
                let theta = y[0].rem_euclid(1.0);
                let candidate = |k: f64| {
                    let th = (theta + k) / 2.0;
                    let (s, co) = (TAU * th).sin_cos();
                    Point::from_vec(vec![th, (y[1] - c * co) / lambda, (y[2] - c * s) / lambda])
                };
                let (c0, c1) = (candidate(0.0), candidate(1.0));
                let pick_first = match hint {
                    Some((h, region)) => region.distance(&c0, h) <= region.distance(&c1, h),
                    None => c0.rows(1, 2).norm() <= c1.rows(1, 2).norm(),
                };
                if pick_first {
                    c0
                } else {
                    c1
                }
            }
            SystemKind::SkewCenter { a, b, base_degree, center_degree } => {
                let m = base_degree as f64;
                let theta = y[0].rem_euclid(1.0);
                let j = match hint {
                    Some((h, _)) => (0..base_degree)
                        .min_by(|&i, &k| {
                            circle_dist((theta + i as f64) / m, h[0]).total_cmp(&circle_dist((theta + k as f64) / m, h[0]))
                        })
                        .unwrap_or(0),
                    None => 0,
                };
                let th = (theta + j as f64) / m;
                let s = (y[1] - b * (TAU * th).cos()).rem_euclid(1.0);
                let branch = |i: u32| solve_center(a, center_degree, s + i as f64);
                let t = match hint {
                    Some((h, _)) => (0..center_degree)
                        .map(branch)
                        .min_by(|u, v| circle_dist(*u, h[1]).total_cmp(&circle_dist(*v, h[1])))
                        .unwrap_or_else(|| branch(0)),
                    None => branch(0),
                };
                Point::from_vec(vec![th, t])
            }
            SystemKind::Contraction { factor } => y / factor,
        }
    }

    pub(super) fn derivative(&self, p: &Point) -> Matrix {
        match *self {
            SystemKind::CatMap => Matrix::from_row_slice(2, 2, &[2.0, 1.0, 1.0, 1.0]),
            SystemKind::Solenoid { lambda, c } => {
                let (s, co) = (TAU * p[0]).sin_cos();
                Matrix::from_row_slice(3, 3, &[2.0, 0.0, 0.0, -TAU * c * s, lambda, 0.0, TAU * c * co, 0.0, lambda])
            }
            SystemKind::SkewCenter { a, b, base_degree, center_degree } => Matrix::from_row_slice(
                2,
                2,
                &[
                    base_degree as f64,
                    0.0,
                    -TAU * b * (TAU * p[0]).sin(),
                    center_degree as f64 + TAU * a * (TAU * p[1]).cos(),
                ],
            ),
            SystemKind::Contraction { factor } => Matrix::identity(2, 2) * factor,
        }
    }

    pub(super) fn natural_splitting(&self) -> SplittingSpec {
        match self {
            SystemKind::CatMap => SplittingSpec { bundle_dims: vec![1, 1], center_count: 0 },
            SystemKind::Solenoid { .. } => SplittingSpec { bundle_dims: vec![1, 2], center_count: 0 },
            SystemKind::SkewCenter { .. } => SplittingSpec { bundle_dims: vec![1, 1, 0], center_count: 1 },
            SystemKind::Contraction { .. } => SplittingSpec { bundle_dims: vec![0, 2], center_count: 0 },
        }
    }

    pub(super) fn dither_axes(&self) -> &'static [usize] {
        match self {
            SystemKind::Solenoid { .. } => &[0],
            SystemKind::SkewCenter { center_degree, .. } if *center_degree >= 2 => &[0, 1],
            SystemKind::SkewCenter { .. } => &[0],
            _ => &[],
        }
    }
}

/// Solves `k·t + a sin 2πt = target` for `t ∈ [0, 1]` (the left side is
/// increasing from 0 to k), by Newton's method safeguarded with bisection.
fn solve_center(a: f64, k: u32, target: f64) -> f64 {
    let k = k as f64;
    let g = |t: f64| k * t + a * (TAU * t).sin() - target;
    let (mut lo, mut hi) = (0.0_f64, 1.0_f64);
    let mut t = (target / k).clamp(0.0, 1.0);
    for _ in 0..100 {
        let v = g(t);
        if v == 0.0 {
            return t;
        }
        if v < 0.0 {
            lo = t;
        } else {
            hi = t;
        }
        let dv = k + TAU * a * (TAU * t).cos();
        let mut next = t - v / dv;
        if !(next > lo && next < hi) {
            next = 0.5 * (lo + hi);
        }
        if (next - t).abs() < 1e-16 || hi - lo < 1e-16 {
            return next;
        }
        t = next;
    }
    t
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_name_rejected() {
        assert!(matches!(builtin_system("henon"), Err(Error::UnknownSystem(_))));
    }

    #[test]
    fn overrides_validate() {
        let sys = builtin_system("skew_center").unwrap();
        let mut o = BTreeMap::new();
        o.insert("a".to_string(), 0.5);
        assert!(sys.with_overrides(&o).is_err());
        o.clear();
        o.insert("zeta".to_string(), 1.0);
        assert!(sys.with_overrides(&o).is_err());
        o.clear();
        o.insert("base_degree".to_string(), 3.0);
        o.insert("center_degree".to_string(), 2.0);
        o.insert("a".to_string(), 0.05);
        let v = sys.with_overrides(&o).unwrap();
        assert_eq!(v.parameters()["base_degree"], 3.0);
        o.insert("center_degree".to_string(), 1.5);
        assert!(sys.with_overrides(&o).is_err());
    }

    #[test]
    fn constant_derivative_blocks() {
        let cat = builtin_system("cat_map").unwrap();
        let sol = builtin_system("solenoid").unwrap();
        let p = Point::from_vec(vec![0.3, 0.7]);
        assert_eq!(cat.derivative(&p), Matrix::from_row_slice(2, 2, &[2.0, 1.0, 1.0, 1.0]));
        let q = Point::from_vec(vec![0.37, 0.1, -0.2]);
        let d = sol.derivative(&q);
        assert_eq!(d.view((1, 1), (2, 2)).into_owned(), Matrix::identity(2, 2) * 0.25);
    }

    #[test]
    fn center_derivative_bounded_away_from_zero() {
        let sys = builtin_system("skew_center").unwrap();
        let a = 0.1;
        for i in 0..=1000 {
            let t = i as f64 / 1000.0;
            let d = sys.derivative(&Point::from_vec(vec![0.2, t]))[(1, 1)];
            assert!(d >= 1.0 - TAU * a - 1e-15 && d <= 1.0 + TAU * a + 1e-15);
            assert!(d > 0.3);
        }
    }

    #[test]
    fn center_solver_inverts() {
        for &(a, k) in &[(0.1, 1u32), (0.05, 2), (0.0, 1)] {
            for i in 0..200 {
                let target = k as f64 * i as f64 / 199.0;
                let t = solve_center(a, k, target);
                assert!((k as f64 * t + a * (TAU * t).sin() - target).abs() < 1e-13);
            }
        }
    }
}
