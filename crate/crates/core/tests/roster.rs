use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use srblab::systems::{builtin_system, default_start, lyapunov_spectrum, sample_orbit, Point, BUILTIN_NAMES, TRANSIENT};

fn interior_point(name: &str, rng: &mut ChaCha8Rng) -> Point {
    let sys = builtin_system(name).unwrap();
    let b = sys.attractor_box();
    // stay away from the wrap seams so central differences do not straddle them
    Point::from_iterator(b.dim(), (0..b.dim()).map(|i| b.lower[i] + b.width(i) * rng.gen_range(0.2..0.8)))
}

#[test]
fn derivatives_match_central_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let h = 1e-6;
    for name in BUILTIN_NAMES {
        let sys = builtin_system(name).unwrap();
        for _ in 0..20 {
            let x = interior_point(name, &mut rng);
            let df = sys.derivative(&x);
            for j in 0..sys.dim() {
                let (mut xp, mut xm) = (x.clone(), x.clone());
                xp[j] += h;
                xm[j] -= h;
                let col = sys.displacement(&sys.forward(&xm), &sys.forward(&xp)) / (2.0 * h);
                for i in 0..sys.dim() {
                    assert!((col[i] - df[(i, j)]).abs() < 1e-5, "{name} ∂{i}/∂{j}: {} vs {}", col[i], df[(i, j)]);
                }
            }
        }
    }
}

#[test]
fn preimage_on_the_right_branch_inverts_the_map() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for name in BUILTIN_NAMES {
        let sys = builtin_system(name).unwrap();
        for _ in 0..50 {
            let x = interior_point(name, &mut rng);
            let back = sys.preimage_near(&sys.forward(&x), &x);
            assert!(sys.distance(&back, &x) < 1e-9, "{name}: {x} → {back}");
        }
    }
}

/// The exponents add up to the Birkhoff average of `log|det Df|` along the
/// same orbit.
#[test]
fn exponent_sum_is_mean_log_determinant() {
    for name in BUILTIN_NAMES {
        let sys = builtin_system(name).unwrap();
        let x0 = default_start(&sys, 4);
        let n = 20_000;
        let spectrum = lyapunov_spectrum(&sys, &x0, n, 4).unwrap();
        let orbit = sample_orbit(&sys, &x0, TRANSIENT, n, 4).unwrap();
        let mean: f64 = orbit.points.iter().map(|x| sys.derivative(x).determinant().abs().ln()).sum::<f64>() / orbit.len() as f64;
        let sum: f64 = spectrum.iter().sum();
        assert!((sum - mean).abs() < 5e-3, "{name}: Σλ = {sum}, mean log|det| = {mean}");
        assert!(spectrum.windows(2).all(|w| w[0] >= w[1] - 1e-12), "{name}: {spectrum:?}");
    }
}

#[test]
fn orbits_stay_in_the_region_and_export_csv() {
    for name in BUILTIN_NAMES {
        let sys = builtin_system(name).unwrap();
        let orbit = sample_orbit(&sys, &default_start(&sys, 3), TRANSIENT, 2000, 3).unwrap();
        assert!(orbit.points.iter().all(|p| sys.attractor_box().contains(p)));
        let mut csv = Vec::new();
        orbit.write_csv(&mut csv).unwrap();
        let text = String::from_utf8(csv).unwrap();
        assert_eq!(text.lines().count(), 2001);
        assert!(text.starts_with("step,"));
    }
}

#[test]
fn overrides_are_validated() {
    let sys = builtin_system("skew_center").unwrap();
    let ok: BTreeMap<_, _> = [("a".to_string(), 0.05)].into_iter().collect();
    assert_eq!(sys.with_overrides(&ok).unwrap().parameters()["a"], 0.05);
    let unknown: BTreeMap<_, _> = [("lambda".to_string(), 0.1)].into_iter().collect();
    assert!(sys.with_overrides(&unknown).is_err());
    // 2πa ≥ k makes the center derivative vanish somewhere
    let singular: BTreeMap<_, _> = [("a".to_string(), 0.2)].into_iter().collect();
    assert!(sys.with_overrides(&singular).is_err());
}
