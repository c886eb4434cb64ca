//! Metric oracles: exhaustive enumeration of small mask pairs for the
//! DSC/Jaccard duality, naive recomputation for threshold sweeps, and
//! the symmetry and aggregation invariants.

mod common;

use proptest::prelude::*;
use rand::Rng;
use sliceseg::metrics::{aggregate, binarize, dsc, jaccard_index, threshold_sweep, CaseScore};
use sliceseg::rng::seeded;
use sliceseg::tensor::Tensor;

fn mask_from_bits(bits: u32, len: usize) -> Tensor {
    Tensor::from_vec(
        &[len],
        (0..len)
            .map(|i| if bits >> i & 1 == 1 { 1.0 } else { 0.0 })
            .collect(),
    )
    .unwrap()
}

#[test]
fn duality_holds_for_every_four_pixel_mask_pair() {
    // All 256 pairs of 4-pixel masks, checked against independent set
    // counting: dsc = 2 ji / (1 + ji).
    for a_bits in 0u32..16 {
        for b_bits in 0u32..16 {
            let a = mask_from_bits(a_bits, 4);
            let b = mask_from_bits(b_bits, 4);
            let d = dsc(&a, &b).unwrap();
            let j = jaccard_index(&a, &b).unwrap();
            assert!(
                (d - 2.0 * j / (1.0 + j)).abs() <= 1e-12,
                "bits {a_bits}/{b_bits}: dsc {d}, ji {j}"
            );

            let inter = (a_bits & b_bits).count_ones() as f64;
            let ca = a_bits.count_ones() as f64;
            let cb = b_bits.count_ones() as f64;
            let expected_dsc = if ca + cb == 0.0 {
                1.0
            } else {
                2.0 * inter / (ca + cb)
            };
            let union = ca + cb - inter;
            let expected_ji = if union == 0.0 { 1.0 } else { inter / union };
            assert_eq!(d, expected_dsc);
            assert_eq!(j, expected_ji);
        }
    }
}

#[test]
fn duality_holds_on_random_large_masks() {
    let mut rng = seeded(211);
    for _ in 0..100 {
        let len = 256;
        let random_mask = |rng: &mut rand_chacha::ChaCha8Rng| {
            Tensor::from_vec(
                &[len],
                (0..len)
                    .map(|_| if rng.random::<f64>() < 0.4 { 1.0 } else { 0.0 })
                    .collect(),
            )
            .unwrap()
        };
        let a = random_mask(&mut rng);
        let b = random_mask(&mut rng);
        let d = dsc(&a, &b).unwrap();
        let j = jaccard_index(&a, &b).unwrap();
        assert!((d - 2.0 * j / (1.0 + j)).abs() <= 1e-12);
    }
}

#[test]
fn sweep_matches_naive_per_threshold_recomputation() {
    let mut rng = seeded(223);
    let prob = sliceseg::rng::uniform_tensor(&mut rng, &[8, 8], 0.0, 1.0);
    let truth = Tensor::from_vec(
        &[8, 8],
        (0..64)
            .map(|_| if rng.random::<f64>() < 0.3 { 1.0 } else { 0.0 })
            .collect(),
    )
    .unwrap();
    let thresholds = sliceseg::metrics::sweep_thresholds();
    let scores = threshold_sweep("case", &prob, &truth, &thresholds).unwrap();
    assert_eq!(scores.len(), 19);
    for (score, &t) in scores.iter().zip(thresholds.iter()) {
        let mask = binarize(&prob, t);
        assert_eq!(score.dsc, dsc(&mask, &truth).unwrap());
        assert_eq!(score.ji, jaccard_index(&mask, &truth).unwrap());
        assert_eq!(score.threshold, t);
        assert_eq!(score.case_id, "case");
    }
}

#[test]
fn sweep_foreground_count_decreases_with_threshold() {
    let mut rng = seeded(227);
    let prob = sliceseg::rng::uniform_tensor(&mut rng, &[8, 8], 0.0, 1.0);
    let mut last = usize::MAX;
    for &t in &sliceseg::metrics::sweep_thresholds() {
        let count = binarize(&prob, t)
            .data()
            .iter()
            .filter(|&&v| v == 1.0)
            .count();
        assert!(count <= last);
        last = count;
    }
}

#[test]
fn perfect_probability_maps_sweep_to_one() {
    let truth = Tensor::full(&[4, 4], 1.0);
    let prob = Tensor::full(&[4, 4], 1.0);
    for score in
        threshold_sweep("c", &prob, &truth, &sliceseg::metrics::sweep_thresholds()).unwrap()
    {
        assert_eq!(score.dsc, 1.0);
        assert_eq!(score.ji, 1.0);
    }
}

#[test]
fn aggregate_is_order_invariant() {
    let scores: Vec<CaseScore> = (0..10)
        .map(|i| CaseScore {
            case_id: format!("c{i}"),
            threshold: 0.5,
            dsc: 0.5 + 0.04 * i as f64,
            ji: 0.4 + 0.05 * i as f64,
        })
        .collect();
    let forward = aggregate(&scores).unwrap();
    let mut reversed = scores.clone();
    reversed.reverse();
    assert_eq!(forward, aggregate(&reversed).unwrap());
    assert!(forward.dsc.worst <= forward.dsc.mean);
    assert!(forward.dsc.mean <= forward.dsc.best);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn metrics_are_symmetric(a_bits in 0u32..65536, b_bits in 0u32..65536) {
        let a = mask_from_bits(a_bits, 16);
        let b = mask_from_bits(b_bits, 16);
        prop_assert_eq!(dsc(&a, &b).unwrap(), dsc(&b, &a).unwrap());
        prop_assert_eq!(jaccard_index(&a, &b).unwrap(), jaccard_index(&b, &a).unwrap());
    }

    #[test]
    fn metrics_stay_in_unit_interval(a_bits in 0u32..65536, b_bits in 0u32..65536) {
        let a = mask_from_bits(a_bits, 16);
        let b = mask_from_bits(b_bits, 16);
        let d = dsc(&a, &b).unwrap();
        let j = jaccard_index(&a, &b).unwrap();
        prop_assert!((0.0..=1.0).contains(&d));
        prop_assert!((0.0..=1.0).contains(&j));
        prop_assert!(j <= d + 1e-15);
    }
}
