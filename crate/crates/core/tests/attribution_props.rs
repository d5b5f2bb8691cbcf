//! Invariants of the relative-attribution share.

use std::collections::BTreeMap;

use caia_core::attribution::{
    region_share, relative_attribution, AttributionSample, FloatGrid, MaskGrid,
};
use proptest::prelude::*;

fn map_and_labels() -> impl Strategy<Value = (usize, usize, Vec<f64>, Vec<u8>)> {
    (1usize..8, 1usize..8).prop_flat_map(|(h, w)| {
        (
            Just(h),
            Just(w),
            prop::collection::vec(0.0f64..10.0, h * w)
                .prop_filter("some mass", |v| v.iter().sum::<f64>() > 0.0),
            prop::collection::vec(0u8..4, h * w),
        )
    })
}

proptest! {
    #[test]
    fn partition_shares_sum_to_one((h, w, data, labels) in map_and_labels()) {
        let map = FloatGrid::new(h, w, data).unwrap();
        let masks: BTreeMap<String, MaskGrid> = (0..4u8)
            .map(|r| {
                let bits: Vec<bool> = labels.iter().map(|&l| l == r).collect();
                (format!("r{r}"), MaskGrid::new(h, w, bits).unwrap())
            })
            .collect();
        let report = relative_attribution(&[AttributionSample { map, masks }]).unwrap();
        let total: f64 = report.regions.values().map(|r| r.mean_share).sum();
        prop_assert!((total - 1.0).abs() <= 1e-12, "sum {}", total);
        prop_assert!(report.regions.values().all(|r| (0.0..=1.0).contains(&r.mean_share)));
    }

    #[test]
    fn scale_invariant((h, w, data, labels) in map_and_labels(), exp in -6i32..=6) {
        let c = 10f64.powi(exp);
        let map = FloatGrid::new(h, w, data).unwrap();
        let mask = MaskGrid::new(h, w, labels.iter().map(|&l| l < 2).collect()).unwrap();
        let a = region_share(&map, &mask).unwrap();
        let b = region_share(&map.scaled(c).unwrap(), &mask).unwrap();
        prop_assert!((a - b).abs() <= 1e-12);
    }

    #[test]
    fn growing_a_mask_never_lowers_its_share((h, w, data, labels) in map_and_labels()) {
        let map = FloatGrid::new(h, w, data).unwrap();
        let small = MaskGrid::new(h, w, labels.iter().map(|&l| l == 0).collect()).unwrap();
        let large = MaskGrid::new(h, w, labels.iter().map(|&l| l <= 1).collect()).unwrap();
        prop_assert!(region_share(&map, &large).unwrap() >= region_share(&map, &small).unwrap());
    }
}
