use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use srblab::gibbs::{gibbs_level_index, pesin_formula_check, recurrence_entropy, LevelSpec};
use srblab::pesin::PesinBlockParams;
use srblab::systems::{builtin_system, default_start, estimate_bundles, sample_orbit, OrbitIter, TRANSIENT};

#[test]
fn bernoulli_symbols_have_entropy_log_alphabet() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let symbols: Vec<u32> = (0..400_000).map(|_| rng.gen_range(0..4)).collect();
    let r = recurrence_entropy(&symbols, 4, 12).unwrap();
    assert!(r.plateau, "{:?}", r.increments);
    assert!((r.estimate - 4f64.ln()).abs() / 4f64.ln() < 0.1, "{}", r.estimate);
    let f = pesin_formula_check(&r, &[4f64.ln(), -1.0], 0.1).unwrap();
    assert_eq!(f.holds, Some(true));
    assert!(!f.vacuous);
}

#[test]
fn constant_symbols_are_zero_entropy() {
    let r = recurrence_entropy(&vec![0; 5000], 2, 20).unwrap();
    assert!(r.estimate.abs() < 1e-9);
    let f = pesin_formula_check(&r, &[-0.7, -0.7], 0.1).unwrap();
    assert!(f.vacuous);
    assert_eq!(f.positive_exponent_sum.to_bits(), 0f64.to_bits());
}

#[test]
fn cat_map_is_a_gibbs_u_state() {
    let sys = builtin_system("cat_map").unwrap();
    let orbit = sample_orbit(&sys, &default_start(&sys, 2), TRANSIENT, 20_000 + 2 * TRANSIENT, 2).unwrap();
    let frame = estimate_bundles(&sys, &sys.natural_splitting(), &orbit).unwrap();
    let spec = LevelSpec::new(PesinBlockParams::with_depth(1, 0.5, 10).unwrap(), 0.2, 0.04);
    let sample = OrbitIter::new(&sys, &default_start(&sys, 3), TRANSIENT, 500_000, 3).unwrap();
    let idx = gibbs_level_index(&sys, &frame, &[spec], || sample.clone()).unwrap();
    assert_eq!(idx.index, 0, "{idx:?}");
    assert!(idx.downward_closed);
    let level = &idx.levels[0];
    assert!(level.expanding && level.passes);
    assert!(level.discard_fraction.unwrap() < 0.05);
}
