//! Condensation against a brute-force importance oracle, and the compact
//! inference form against the masked dense layer.

use std::collections::BTreeSet;

use lconet::lg_conv::{CondensationSchedule, LGConvLayer, Phase};
use lconet::{Tape, Tensor};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn layer(h: usize, n: usize, groups: usize, c: usize, seed: u64) -> LGConvLayer<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    LGConvLayer::new("lg", h, n, 3, groups, c, &mut rng).unwrap()
}

/// L1 mass of group `g`'s filters on input channel `ch`, straight from the
/// kernel.
fn oracle_score(kernel: &Tensor<f64>, groups: usize, g: usize, ch: usize) -> f64 {
    let s = kernel.shape();
    let (n, h, k) = (s[0], s[1], s[2] * s[3]);
    let per = n / groups;
    let mut total = 0.0;
    for f in g * per..(g + 1) * per {
        for j in 0..k {
            total += kernel.data()[(f * h + ch) * k + j].abs();
        }
    }
    total
}

/// Bottom-`drop` channels of `alive` by score, ties on the lower index.
fn oracle_bottom(kernel: &Tensor<f64>, groups: usize, g: usize, alive: &BTreeSet<usize>, drop: usize) -> BTreeSet<usize> {
    let mut ranked: Vec<(f64, usize)> = alive.iter().map(|&c| (oracle_score(kernel, groups, g, c), c)).collect();
    ranked.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    ranked.into_iter().take(drop).map(|(_, c)| c).collect()
}

fn alive_set(l: &LGConvLayer<f64>, g: usize) -> BTreeSet<usize> {
    l.alive_channels(g).into_iter().collect()
}

/// Runs every stage, checking counts, the oracle and monotonicity.
fn check_condensation(h: usize, n: usize, groups: usize, c: usize, seed: u64) -> Vec<usize> {
    let mut l = layer(h, n, groups, c, seed);
    let mut counts = Vec::new();
    let mut prev: Vec<BTreeSet<usize>> = (0..groups).map(|g| alive_set(&l, g)).collect();
    for stage in 1..c {
        // Training would move the weights between stages; perturb them so
        // later stages are not decided by the first stage's ranking alone.
        let mut rng = ChaCha8Rng::seed_from_u64(seed + stage as u64);
        let noise = Tensor::<f64>::randn(l.kernel().shape(), 0.3, &mut rng);
        for (w, z) in l.kernel_mut().data_mut().iter_mut().zip(noise.data()) {
            *w += z;
        }
        l.enforce_mask();
        let kernel = l.kernel().clone();
        let target = (h * (c - stage)).div_ceil(c);
        let expected: Vec<BTreeSet<usize>> =
            (0..groups).map(|g| oracle_bottom(&kernel, groups, g, &prev[g], prev[g].len() - target)).collect();
        let record = l.condense().unwrap();
        assert_eq!(record.stage, stage);
        for g in 0..groups {
            let now = alive_set(&l, g);
            assert_eq!(now.len(), target, "group {g} after stage {stage}");
            let pruned: BTreeSet<usize> = prev[g].difference(&now).copied().collect();
            assert_eq!(pruned, expected[g], "group {g} stage {stage}");
            assert_eq!(pruned, record.pruned[g].iter().copied().collect::<BTreeSet<_>>());
            assert!(now.is_subset(&prev[g]), "pruning must be monotone");
            prev[g] = now;
        }
        counts.push(target);
    }
    // Pruned weights are exactly zero.
    let per = n / groups;
    let k = 9;
    for f in 0..n {
        for ch in 0..h {
            if !l.is_alive(f / per, ch) {
                assert!(l.kernel().data()[(f * h + ch) * k..(f * h + ch + 1) * k].iter().all(|&v| v == 0.0));
            }
        }
    }
    assert!(l.condense().is_err(), "a fully condensed layer refuses another stage");
    counts
}

#[test]
fn four_groups_factor_four_keeps_12_8_4() {
    assert_eq!(check_condensation(16, 16, 4, 4, 1), vec![12, 8, 4]);
}

#[test]
fn importance_is_mean_absolute_weight() {
    let l = layer(6, 8, 2, 4, 9);
    let scores = l.importance_scores();
    for g in 0..2 {
        for ch in 0..6 {
            let expect = oracle_score(l.kernel(), 2, g, ch) / (4.0 * 9.0);
            assert!((scores[g][ch] - expect).abs() < 1e-12);
        }
    }
}

fn masked_dense(l: &LGConvLayer<f64>, x: &Tensor<f64>) -> Tensor<f64> {
    let mut t = Tape::new();
    let xv = t.constant(x.clone());
    let y = l.forward(&mut t, xv).unwrap();
    t.value(y).clone()
}

#[test]
fn inference_form_matches_masked_dense_over_100_inputs() {
    let mut l = layer(16, 16, 4, 4, 5);
    for _ in 0..3 {
        l.condense().unwrap();
    }
    let fast = l.to_inference().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let x = Tensor::randn(&[1, 16, 6, 6], 1.0, &mut rng);
        let a = masked_dense(&l, &x);
        let b = fast.apply(&x).unwrap();
        assert_eq!(a.shape(), b.shape());
        for (p, q) in a.data().iter().zip(b.data()) {
            worst = worst.max((p - q).abs());
        }
    }
    assert!(worst < 1e-5, "max abs diff {worst}");
    assert_eq!(fast.weight_count(), l.alive_weight_count());
    assert_eq!(fast.weight_count() * 4, l.dense_weight_count());
}

#[test]
fn conversion_requires_full_condensation() {
    let mut l = layer(8, 8, 2, 4, 2);
    l.condense().unwrap();
    assert!(l.to_inference().is_err());
}

#[test]
fn mask_round_trip_through_set_mask() {
    let mut a = layer(8, 8, 2, 4, 4);
    a.condense().unwrap();
    a.condense().unwrap();
    let mask: Vec<u8> = a.mask().data().iter().map(|&v| (v != 0.0) as u8).collect();
    let mut b = layer(8, 8, 2, 4, 5);
    b.set_mask(&mask, a.stage(), a.history().to_vec()).unwrap();
    for g in 0..2 {
        assert_eq!(a.alive_channels(g), b.alive_channels(g));
    }
    // A mask with the wrong alive count for its stage is rejected.
    let mut c = layer(8, 8, 2, 4, 6);
    assert!(c.set_mask(&mask, 1, Vec::new()).is_err());
}

#[test]
fn schedule_places_stages_in_first_half() {
    let s = CondensationSchedule::new(60, 4).unwrap();
    let fires: Vec<usize> = (0..60).filter_map(|e| s.fires_at(e).map(|_| e)).collect();
    assert_eq!(fires, vec![10, 20, 30]);
    assert_eq!(s.phase(29).unwrap(), Phase::Condensing(2));
    assert_eq!(s.phase(30).unwrap(), Phase::Optimization);
    assert!(CondensationSchedule::new(4, 4).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn condensation_invariants_hold(
        groups in 1usize..4,
        per in 1usize..4,
        h in 2usize..12,
        c in 2usize..5,
        seed in 0u64..1000,
    ) {
        let counts = check_condensation(h, groups * per, groups, c, seed);
        prop_assert_eq!(counts.len(), c - 1);
        prop_assert!(counts.windows(2).all(|w| w[1] <= w[0]));
    }

    #[test]
    fn inference_form_matches_for_random_shapes(
        groups in 1usize..4,
        per in 1usize..3,
        h in 2usize..9,
        c in 1usize..4,
        seed in 0u64..1000,
    ) {
        let mut l = layer(h, groups * per, groups, c, seed);
        for _ in 1..c {
            l.condense().unwrap();
        }
        let fast = l.to_inference().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabc);
        let x = Tensor::randn(&[2, h, 5, 5], 1.0, &mut rng);
        let a = masked_dense(&l, &x);
        let b = fast.apply(&x).unwrap();
        for (p, q) in a.data().iter().zip(b.data()) {
            prop_assert!((p - q).abs() < 1e-9);
        }
        prop_assert_eq!(fast.weight_count(), l.alive_weight_count());
    }
}
