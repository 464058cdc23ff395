use proptest::prelude::*;
use retina_forge::eval::{compute_metrics, confusion_within_fov, roc_auc, score_maps, ConfusionCounts};
use retina_forge::pipeline::{GrayImage, Mask};

fn pairwise_auc(scores: &[f32], labels: &[bool]) -> f64 {
    let pos: Vec<f32> = scores.iter().zip(labels).filter(|(_, &l)| l).map(|(&s, _)| s).collect();
    let neg: Vec<f32> = scores.iter().zip(labels).filter(|(_, &l)| !l).map(|(&s, _)| s).collect();
    let mut wins = 0.0;
    for &p in &pos {
        for &n in &neg {
            wins += if p > n {
                1.0
            } else if p == n {
                0.5
            } else {
                0.0
            };
        }
    }
    wins / (pos.len() * neg.len()) as f64
}

/// Scores on a coarse grid so ties are common, with both classes present.
fn scored_labels() -> impl Strategy<Value = (Vec<f32>, Vec<bool>)> {
    (2usize..40, 2usize..200).prop_flat_map(|(levels, n)| {
        (prop::collection::vec(0..levels, n), prop::collection::vec(any::<bool>(), n)).prop_map(move |(lv, mut l)| {
            l[0] = true;
            l[1] = false;
            (lv.iter().map(|&v| v as f32 / levels as f32).collect(), l)
        })
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn auc_equals_pairwise_probability((scores, labels) in scored_labels()) {
        let (auc, _) = roc_auc(&scores, &labels).unwrap();
        prop_assert!((auc - pairwise_auc(&scores, &labels)).abs() < 1e-9);
    }

    #[test]
    fn auc_of_reversed_scores_is_complement((scores, labels) in scored_labels()) {
        let flipped: Vec<f32> = scores.iter().map(|s| 1.0 - s).collect();
        let (a, _) = roc_auc(&scores, &labels).unwrap();
        let (b, _) = roc_auc(&flipped, &labels).unwrap();
        prop_assert!((a + b - 1.0).abs() < 1e-12);
    }

    #[test]
    fn auc_ignores_monotone_rescaling((scores, labels) in scored_labels()) {
        let squashed: Vec<f32> = scores.iter().map(|s| s * s * 0.5 + 0.1).collect();
        prop_assert_eq!(roc_auc(&scores, &labels).unwrap().0, roc_auc(&squashed, &labels).unwrap().0);
    }

    #[test]
    fn roc_curve_is_monotone_from_origin_to_corner((scores, labels) in scored_labels()) {
        let (_, curve) = roc_auc(&scores, &labels).unwrap();
        let pts = &curve.points;
        prop_assert_eq!((pts[0].fpr, pts[0].tpr), (0.0, 0.0));
        let last = pts.last().unwrap();
        prop_assert_eq!((last.fpr, last.tpr), (1.0, 1.0));
        for w in pts.windows(2) {
            prop_assert!(w[0].fpr <= w[1].fpr && w[0].tpr <= w[1].tpr);
        }
    }

    #[test]
    fn metric_identities(tp in 0u64..500, fp in 0u64..500, tn in 0u64..500, fn_ in 0u64..500) {
        prop_assume!(tp + fp + tn + fn_ > 0);
        let m = compute_metrics(ConfusionCounts::new(tp, fp, tn, fn_)).unwrap();
        let total = (tp + fp + tn + fn_) as f64;
        prop_assert_eq!(m.ac, Some((tp + tn) as f64 / total));
        match (m.se, m.pr, m.f1) {
            (Some(se), Some(pr), Some(f1)) if se + pr > 0.0 => {
                prop_assert!((f1 - 2.0 * pr * se / (pr + se)).abs() < 1e-12);
            }
            _ => {}
        }
        prop_assert_eq!(m.se.is_none(), tp + fn_ == 0);
        prop_assert_eq!(m.sp.is_none(), tn + fp == 0);
        for v in [m.se, m.sp, m.ac, m.pr, m.f1].into_iter().flatten() {
            prop_assert!((0.0..=1.0).contains(&v));
        }
    }

    #[test]
    fn pixels_outside_the_fov_never_count(
        w in 1usize..12, h in 1usize..12, bits in prop::collection::vec(any::<(bool, bool, bool)>(), 144),
    ) {
        let px = |x: usize, y: usize| bits[y * 12 + x];
        let pred = Mask::from_fn(w, h, |x, y| px(x, y).0);
        let gt = Mask::from_fn(w, h, |x, y| px(x, y).1);
        let fov = Mask::from_fn(w, h, |x, y| px(x, y).2);
        let c = confusion_within_fov(&pred, &gt, &fov).unwrap();
        prop_assert_eq!(c.total() as usize, fov.count());
        let everything = Mask::filled(w, h, true);
        let all = confusion_within_fov(&pred, &gt, &everything).unwrap();
        prop_assert_eq!(all.total() as usize, w * h);
    }
}

#[test]
fn hand_case() {
    let m = compute_metrics(ConfusionCounts::new(2, 1, 3, 2)).unwrap();
    assert_eq!(m.se, Some(0.5));
    assert_eq!(m.sp, Some(0.75));
    assert_eq!(m.ac, Some(0.625));
    assert_eq!(m.f1, Some(4.0 / 7.0));
}

#[test]
fn perfect_map_scores_one_everywhere() {
    let gt = Mask::from_fn(20, 16, |x, y| (x + 2 * y) % 5 == 0);
    let fov = Mask::from_fn(20, 16, |x, y| x > 1 && y > 1);
    let map = gt.to_gray();
    let r = score_maps(&["a".into()], &[map], &[&gt], &[&fov], 0.5).unwrap();
    for v in [r.pooled.auc, r.pooled.se, r.pooled.sp, r.pooled.ac, r.pooled.f1] {
        assert_eq!(v, Some(1.0));
    }
}

#[test]
fn pooled_counts_are_sums_of_image_counts() {
    let a = Mask::from_fn(8, 8, |x, _| x < 3);
    let b = Mask::from_fn(8, 8, |_, y| y % 2 == 0);
    let fov = Mask::filled(8, 8, true);
    let map = GrayImage::from_fn(8, 8, |x, y| ((x * 7 + y * 3) % 10) as f32 / 10.0);
    let r = score_maps(&["a".into(), "b".into()], &[map.clone(), map], &[&a, &b], &[&fov, &fov], 0.5).unwrap();
    let sum = r.images[0].report.counts + r.images[1].report.counts;
    assert_eq!(r.pooled.counts, sum);
}
