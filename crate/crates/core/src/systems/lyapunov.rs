use super::bundles::restricted;
use super::{check_start, BundleFrame, BundleSel, MapFamily, Matrix, OrbitIter, OrbitSegment, SmoothSystem, TRANSIENT};
use crate::error::{Error, Result};
use crate::linalg::qr_diag;

#[derive(Debug, Clone, Copy)]
pub struct LyapunovOptions {
    /// Steps used to align the frame before averaging starts.
    pub warmup: usize,
    /// Jacobians multiplied between re-orthogonalisations.
    pub cadence: usize,
}

impl Default for LyapunovOptions {
    fn default() -> Self {
        Self { warmup: TRANSIENT, cadence: 1 }
    }
}

/// Lyapunov exponents (nats per iterate, descending) from `n_steps` of the
/// orbit of `x0` after the standard transient.
pub fn lyapunov_spectrum(sys: &SmoothSystem, x0: &super::Point, n_steps: usize, seed: u64) -> Result<Vec<f64>> {
    if n_steps < 1000 {
        return Err(Error::invalid(format!("lyapunov_spectrum needs at least 1000 steps, got {n_steps}")));
    }
    check_start(sys, x0)?;
    let opts = LyapunovOptions::default();
    let orbit = OrbitIter::new(sys, x0, TRANSIENT, opts.warmup + n_steps, seed)?;
    let jacobians = orbit.map(|p| sys.derivative(&p));
    accumulate(jacobians, sys.dim(), opts)
}

/// Same estimate along a recorded (possibly random) orbit; the first
/// `opts.warmup` steps only align the frame.
pub fn lyapunov_spectrum_along<F: MapFamily + ?Sized>(
    family: &F,
    orbit: &OrbitSegment,
    opts: LyapunovOptions,
) -> Result<Vec<f64>> {
    if orbit.len() < opts.warmup + 2 {
        return Err(Error::InsufficientSample(format!(
            "orbit of {} points is shorter than the {}-step warm-up",
            orbit.len(),
            opts.warmup
        )));
    }
    let d = family.system().dim();
    let jacobians = (0..orbit.len() - 1).map(|i| orbit.jacobian(family, i));
    accumulate(jacobians, d, opts)
}

/// Exponents of the cocycle restricted to one bundle of a frame (descending).
/// The frame is already invariant, so only a short alignment of the QR
/// basis inside the bundle is discarded.
pub fn bundle_exponents<F: MapFamily + ?Sized>(family: &F, frame: &BundleFrame, sel: BundleSel) -> Result<Vec<f64>> {
    sel.check(&frame.spec)?;
    let dim = frame.spec.dim_of(sel);
    if dim == 0 {
        return Err(Error::invalid("bundle is trivial"));
    }
    if frame.len() < 64 {
        return Err(Error::InsufficientSample(format!("frame of {} points is too short for exponents", frame.len())));
    }
    let opts = LyapunovOptions { warmup: frame.len() / 16, cadence: 1 };
    let jacobians = (0..frame.len() - 1).map(|k| restricted(&frame.orbit.jacobian(family, k), frame, k, sel));
    accumulate(jacobians, dim, opts)
}

fn accumulate<I: Iterator<Item = Matrix>>(jacobians: I, d: usize, opts: LyapunovOptions) -> Result<Vec<f64>> {
    let cadence = opts.cadence.max(1);
    let mut q = Matrix::identity(d, d);
    let mut sums = vec![0.0; d];
    let mut counted = 0usize;
    let mut pending = 0usize;
    let mut step = 0usize;
    for j in jacobians {
        q = j * q;
        pending += 1;
        step += 1;
        if pending == cadence {
            let (nq, diag) = qr_diag(&q);
            if diag.iter().any(|v| !v.is_finite() || *v <= 0.0) || q.iter().any(|v| !v.is_finite()) {
                return Err(Error::numerical(format!(
                    "cocycle product degenerated at step {step}; re-orthogonalisation cadence {cadence} is too coarse"
                )));
            }
            if step > opts.warmup {
                for (s, r) in sums.iter_mut().zip(&diag) {
                    *s += r.ln();
                }
                counted += pending;
            }
            q = nq;
            pending = 0;
        }
    }
    if counted == 0 {
        return Err(Error::InsufficientSample("no steps after warm-up".into()));
    }
    let mut out: Vec<f64> = sums.iter().map(|s| s / counted as f64).collect();
    out.sort_by(|a, b| b.total_cmp(a));
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::systems::{builtin_system, default_start, sample_orbit};
    use std::collections::BTreeMap;

    #[test]
    fn cat_exponents() {
        let sys = builtin_system("cat_map").unwrap();
        let ex = lyapunov_spectrum(&sys, &default_start(&sys, 0), 20_000, 1).unwrap();
        let l = ((3.0 + 5f64.sqrt()) / 2.0).ln();
        assert!((ex[0] - l).abs() < 1e-9);
        assert!((ex[1] + l).abs() < 1e-9);
    }

    #[test]
    fn degenerate_center_has_zero_exponent() {
        let sys = builtin_system("skew_center").unwrap();
        let mut o = BTreeMap::new();
        o.insert("a".to_string(), 0.0);
        o.insert("b".to_string(), 0.0);
        let sys = sys.with_overrides(&o).unwrap();
        let ex = lyapunov_spectrum(&sys, &default_start(&sys, 0), 5000, 1).unwrap();
        assert!(ex[1].abs() < 1e-12);
        assert!((ex[0] - 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn coarse_cadence_overflow_is_reported() {
        let sys = builtin_system("cat_map").unwrap();
        let orbit = sample_orbit(&sys, &default_start(&sys, 0), 0, 3000, 0).unwrap();
        let err = lyapunov_spectrum_along(&sys, &orbit, LyapunovOptions { warmup: 10, cadence: 2000 }).unwrap_err();
        assert!(matches!(err, Error::Numerical(_)));
    }

    #[test]
    fn too_few_steps_rejected() {
        let sys = builtin_system("cat_map").unwrap();
        assert!(lyapunov_spectrum(&sys, &default_start(&sys, 0), 10, 1).is_err());
    }
}
