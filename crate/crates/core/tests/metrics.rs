mod support;

use proptest::prelude::*;
use unet_edge::metrics::{bce, Confusion};
use unet_edge::storage::Mask;

fn bce_direct(p: &[f32], y: &[u8]) -> f64 {
    let mut total = 0.0;
    for (&p, &y) in p.iter().zip(y) {
        let p = (p as f64).clamp(1e-7, 1.0 - 1e-7);
        total -= if y == 1 { p.ln() } else { (1.0 - p).ln() };
    }
    total / p.len() as f64
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn confusion_matches_direct_count(pairs in prop::collection::vec((0u8..=1, 0u8..=1), 1..400)) {
        let (pred, gt): (Vec<u8>, Vec<u8>) = pairs.into_iter().unzip();
        let c = Confusion::from_slices(&pred, &gt).unwrap();
        let (tp, fp, fn_, tn) = support::confusion(&pred, &gt);
        prop_assert_eq!(c, Confusion { tp, fp, fn_, tn });
        prop_assert_eq!(c.total(), pred.len() as u64);
        if tp + fp + fn_ > 0 {
            let iou = c.iou().unwrap();
            prop_assert!((iou - tp as f64 / (tp + fp + fn_) as f64).abs() < 1e-15);
            prop_assert!((0.0..=1.0).contains(&iou));
        }
        prop_assert!((c.accuracy().unwrap() - (tp + tn) as f64 / pred.len() as f64).abs() < 1e-15);
    }

    #[test]
    fn bce_matches_direct_sum(pairs in prop::collection::vec((0.0f32..=1.0, 0u8..=1), 1..300)) {
        let (p, y): (Vec<f32>, Vec<u8>) = pairs.into_iter().unzip();
        let got = bce(&p, &y).unwrap();
        prop_assert!((got - bce_direct(&p, &y)).abs() <= 1e-9);
        prop_assert!(got >= 0.0);
    }

    #[test]
    fn confusion_is_additive(a in prop::collection::vec((0u8..=1, 0u8..=1), 1..100),
                             b in prop::collection::vec((0u8..=1, 0u8..=1), 1..100)) {
        let split = |v: &[(u8, u8)]| -> (Vec<u8>, Vec<u8>) { v.iter().copied().unzip() };
        let (pa, ga) = split(&a);
        let (pb, gb) = split(&b);
        let whole = Confusion::from_slices(&[pa.clone(), pb.clone()].concat(), &[ga.clone(), gb.clone()].concat()).unwrap();
        let parts: Confusion = [Confusion::from_slices(&pa, &ga).unwrap(), Confusion::from_slices(&pb, &gb).unwrap()]
            .into_iter()
            .sum();
        prop_assert_eq!(whole, parts);
    }
}

#[test]
fn mismatched_mask_sizes_are_rejected() {
    let a = Mask::zeros(2, 3);
    let b = Mask::zeros(3, 2);
    assert!(Confusion::from_masks(&a, &b).is_err());
    let mut c = Confusion::default();
    assert!(c.update(&a, &b).is_err());
    c.update(&a, &a).unwrap();
    assert_eq!(c.tn, 6);
}
