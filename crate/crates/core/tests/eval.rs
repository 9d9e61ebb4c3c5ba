use std::cell::Cell;
use std::rc::Rc;

#[path = "support/coco_reference.rs"]
mod coco_reference;

use coco_reference::*;
use maskrefine_core::eval::*;
use maskrefine_core::features::RoiBox;
use maskrefine_core::quadtree::{MaskGrid, MaskKind};
use maskrefine_core::training::DamageClass;
use maskrefine_core::Error;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[test]
fn micro_set_report_matches_reference_evaluator() {
    let m = micro_set();
    let (preds, gts) = records(&m);
    let report = coco_metrics(&preds, &gts).unwrap();
    let expected = [
        ("AP", report.ap, reference_mean(&m, 0)),
        ("AP50", report.ap50, reference_ap(&m, 0, 0.5)),
        ("AP75", report.ap75, reference_ap(&m, 0, 0.75)),
        ("APs", report.ap_small, reference_mean(&m, 1)),
        ("APm", report.ap_medium, reference_mean(&m, 2)),
        ("APl", report.ap_large, reference_mean(&m, 3)),
    ];
    for (name, got, want) in expected {
        assert!(close(got, want), "{name}: {got:?} vs {want:?}");
        assert!(got.is_some(), "{name} should be defined on the micro-set");
    }
    // The micro-set exercises partial credit rather than all-or-nothing.
    let ap = report.ap.unwrap();
    assert!(ap > 0.1 && ap < 0.9, "AP {ap}");
}

#[test]
fn micro_set_thresholds_match_individually() {
    let m = micro_set();
    let (preds, gts) = records(&m);
    for (k, t) in coco_thresholds().into_iter().enumerate() {
        assert!((t - (0.5 + 0.05 * k as f64)).abs() < 1e-12);
        let got = average_precision(&preds, &gts, t).unwrap();
        assert!(close(got, reference_ap(&m, 0, t)), "threshold {t}");
    }
}

#[test]
fn mask_iou_examples() {
    let a = BinaryMask::new(2, 2, vec![true, true, false, false]).unwrap();
    let b = BinaryMask::new(2, 2, vec![false, true, true, false]).unwrap();
    assert!((mask_iou(&a, &b).unwrap() - 1.0 / 3.0).abs() < 1e-15);
    assert_eq!(mask_iou(&a, &a).unwrap(), 1.0);
    let c = BinaryMask::new(2, 2, vec![false, false, true, true]).unwrap();
    assert_eq!(mask_iou(&a, &c).unwrap(), 0.0);
    let e = BinaryMask::empty(2, 2);
    assert_eq!(mask_iou(&e, &e).unwrap(), 0.0);
    let wide = BinaryMask::empty(3, 2);
    assert!(matches!(mask_iou(&a, &wide), Err(Error::Dimension(_))));
    assert!(matches!(BinaryMask::new(2, 2, vec![true; 3]), Err(Error::Dimension(_))));
}

fn gt(image_id: usize, rect: Rect) -> GroundTruthRecord {
    GroundTruthRecord { image_id, class: DamageClass::Dent, mask: rect.mask() }
}

fn pred(image_id: usize, score: f64, rect: Rect) -> PredictionRecord {
    PredictionRecord { image_id, class: DamageClass::Dent, score, mask: rect.mask() }
}

#[test]
fn average_precision_examples() {
    let g = r(10, 10, 50, 50);
    let near = r(10, 10, 50, 46);
    assert!(rect_iou(g, near) >= 0.9);
    assert_eq!(average_precision(&[pred(0, 0.8, near)], &[gt(0, g)], 0.5).unwrap(), Some(1.0));
    assert_eq!(average_precision(&[], &[gt(0, g)], 0.5).unwrap(), Some(0.0));
    assert_eq!(average_precision(&[pred(0, 0.8, near)], &[], 0.5).unwrap(), None);

    // TP at 0.9, FP at 0.8, TP at 0.7 over two GTs. The PR points are
    // (r .5, p 1), (r .5, p .5), (r 1, p 2/3): 51 recall levels see
    // precision 1 and the remaining 50 see 2/3.
    let g2 = r(70, 70, 100, 100);
    let preds = [pred(0, 0.9, g), pred(0, 0.8, r(0, 100, 20, 120)), pred(0, 0.7, g2)];
    let ap = average_precision(&preds, &[gt(0, g), gt(0, g2)], 0.5).unwrap().unwrap();
    let hand = (51.0 + 50.0 * 2.0 / 3.0) / 101.0;
    assert!((ap - hand).abs() < 1e-12, "{ap} vs {hand}");
}

#[test]
fn iou_equal_to_a_threshold_matches() {
    // 17/20 is the same double as 0.85.
    let (g, p) = (r(0, 0, 20, 1), r(0, 0, 17, 1));
    assert_eq!(rect_iou(p, g), 0.85);
    let t = coco_thresholds()[7];
    assert_eq!(average_precision(&[pred(0, 0.5, p)], &[gt(0, g)], t).unwrap(), Some(1.0));
}

#[test]
fn random_set_with_an_iou_on_a_threshold_agrees() {
    let m = random_set(17803936986373430087);
    let (preds, gts) = records(&m);
    assert!(close(coco_metrics(&preds, &gts).unwrap().ap, reference_mean(&m, 0)));
}

#[test]
fn matching_requires_same_image_and_class() {
    let g = r(10, 10, 50, 50);
    assert_eq!(average_precision(&[pred(1, 0.9, g)], &[gt(0, g)], 0.5).unwrap(), Some(0.0));
    let other = PredictionRecord { image_id: 0, class: DamageClass::Scrape, score: 0.9, mask: g.mask() };
    assert_eq!(average_precision(&[other], &[gt(0, g)], 0.5).unwrap(), Some(0.0));
}

#[test]
fn each_ground_truth_matches_once() {
    let g = r(10, 10, 50, 50);
    let ap = average_precision(&[pred(0, 0.9, g), pred(0, 0.8, g)], &[gt(0, g)], 0.5).unwrap().unwrap();
    // Second copy is a false positive after full recall, so it does not
    // lower the interpolated curve.
    assert_eq!(ap, 1.0);
    let g2 = r(60, 60, 100, 100);
    let ap = average_precision(&[pred(0, 0.9, g), pred(0, 0.8, g)], &[gt(0, g), gt(0, g2)], 0.5).unwrap().unwrap();
    assert!((ap - 51.0 / 101.0).abs() < 1e-12);
}

#[test]
fn perfect_and_empty_predictions() {
    let m = micro_set();
    let (_, gts) = records(&m);
    let perfect: Vec<_> = gts
        .iter()
        .map(|g| PredictionRecord { image_id: g.image_id, class: g.class, score: 1.0, mask: g.mask.clone() })
        .collect();
    let rep = coco_metrics(&perfect, &gts).unwrap();
    for v in [rep.ap, rep.ap50, rep.ap75, rep.ap_small, rep.ap_medium, rep.ap_large] {
        assert_eq!(v, Some(1.0));
    }
    let rep = coco_metrics(&[], &gts).unwrap();
    for v in [rep.ap, rep.ap50, rep.ap75, rep.ap_small, rep.ap_medium, rep.ap_large] {
        assert_eq!(v, Some(0.0));
    }
}

#[test]
fn empty_size_band_is_undefined() {
    let g = r(10, 10, 50, 50);
    let rep = coco_metrics(&[pred(0, 0.9, g)], &[gt(0, g)]).unwrap();
    assert_eq!(rep.ap_medium, Some(1.0));
    assert_eq!(rep.ap_small, None);
    assert_eq!(rep.ap_large, None);
}

#[test]
fn out_of_range_score_is_rejected() {
    let g = r(10, 10, 50, 50);
    assert!(matches!(coco_metrics(&[pred(0, 1.5, g)], &[gt(0, g)]), Err(Error::Input(_))));
}

#[test]
fn paste_covers_the_box_for_a_full_grid() {
    let grid = MaskGrid::filled(0, MaskKind::Probability, 0.9).unwrap();
    let m = paste_mask(&grid, &RoiBox::new(4.0, 6.0, 20.0, 30.0), 32, 32);
    assert_eq!(m.area(), 16 * 24);
    for y in 0..32 {
        for x in 0..32 {
            assert_eq!(m.bits[y * 32 + x], (4..20).contains(&x) && (6..30).contains(&y));
        }
    }
    let zero = MaskGrid::filled(0, MaskKind::Probability, 0.1).unwrap();
    assert_eq!(paste_mask(&zero, &RoiBox::new(4.0, 6.0, 20.0, 30.0), 32, 32).area(), 0);
    // Clipped at the image border.
    assert_eq!(paste_mask(&grid, &RoiBox::new(-8.0, -8.0, 8.0, 8.0), 32, 32).area(), 64);
}

#[test]
fn paste_keeps_the_left_half() {
    let side = 7;
    let values: Vec<f32> = (0..side * side).map(|k| if k % side < 3 { 1.0 } else { 0.0 }).collect();
    let grid = MaskGrid::new(0, MaskKind::Binary, values).unwrap();
    let m = paste_mask(&grid, &RoiBox::new(0.0, 0.0, 70.0, 70.0), 70, 70);
    // Cell centres 2 and 3 sit at x = 25 and 35, so the edge lands at 30.
    for x in 0..70 {
        assert_eq!(m.bits[10 * 70 + x], x < 30, "x {x}");
    }
}

#[test]
fn mask_score_averages_foreground() {
    let mut v = vec![0.2f32; 49];
    v[0] = 0.6;
    v[1] = 1.0;
    let g = MaskGrid::new(0, MaskKind::Probability, v).unwrap();
    assert!((mask_score(&g) - 0.8).abs() < 1e-7);
    let g = MaskGrid::filled(0, MaskKind::Probability, 0.25).unwrap();
    assert!((mask_score(&g) - 0.25).abs() < 1e-7);
}

struct FakeClock(Rc<Cell<f64>>);

impl Clock for FakeClock {
    fn now(&mut self) -> f64 {
        self.0.get()
    }
}

#[test]
fn warmup_calls_are_not_timed() {
    let time = Rc::new(Cell::new(0.0));
    let mut clock = FakeClock(time.clone());
    let mut calls = 0;
    let items = vec![(); 4];
    let stats = measure_fps(&mut clock, &items, 1, 3, |_| {
        calls += 1;
        time.set(time.get() + if calls == 1 { 100.0 } else { 0.01 });
        Ok(())
    })
    .unwrap();
    assert_eq!(calls, 13);
    for fps in &stats.per_repeat {
        assert!((fps - 100.0).abs() < 1e-6, "{fps}");
    }
    assert!(stats.std < 1e-6);

    // Without warmup the slow call lands in the first pass.
    let time = Rc::new(Cell::new(0.0));
    let mut clock = FakeClock(time.clone());
    let mut calls = 0;
    let stats = measure_fps(&mut clock, &items, 0, 3, |_| {
        calls += 1;
        time.set(time.get() + if calls == 1 { 100.0 } else { 0.01 });
        Ok(())
    })
    .unwrap();
    assert!(stats.per_repeat[0] < 1.0);
}

fn noisy_fps(items: usize, seed: u64) -> FpsStats {
    let time = Rc::new(Cell::new(0.0));
    let mut clock = FakeClock(time.clone());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let list = vec![(); items];
    measure_fps(&mut clock, &list, 2, 3, |_| {
        time.set(time.get() + 0.01 * (1.0 + 0.2 * (rng.gen::<f64>() - 0.5)));
        Ok(())
    })
    .unwrap()
}

#[test]
fn doubling_the_list_stays_within_three_sigma() {
    let one = noisy_fps(20, 1);
    let two = noisy_fps(40, 2);
    let band = 3.0 * one.std.max(two.std);
    assert!(band > 0.0);
    assert!((one.mean - two.mean).abs() <= band, "{} vs {} (band {band})", one.mean, two.mean);
    assert!(one.mean > 0.0 && two.mean > 0.0);
}

#[test]
fn fps_rejects_empty_input() {
    let mut clock = FakeClock(Rc::new(Cell::new(0.0)));
    let none: Vec<()> = Vec::new();
    assert!(matches!(measure_fps(&mut clock, &none, 0, 3, |_| Ok(())), Err(Error::Input(_))));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn ap50_dominates_ap(seed in any::<u64>()) {
        let m = random_set(seed);
        let (preds, gts) = records(&m);
        let rep = coco_metrics(&preds, &gts).unwrap();
        let (ap, ap50, ap75) = (rep.ap.unwrap(), rep.ap50.unwrap(), rep.ap75.unwrap());
        prop_assert!(ap50 + 1e-12 >= ap);
        prop_assert!(ap50 + 1e-12 >= ap75);
        prop_assert!(ap >= 0.0);
        prop_assert!(close(rep.ap, reference_mean(&m, 0)));
    }

    #[test]
    fn monotone_rescaling_of_scores_is_exact(seed in any::<u64>()) {
        let m = random_set(seed);
        let (preds, gts) = records(&m);
        let squashed: Vec<_> = preds
            .iter()
            .map(|p| PredictionRecord { score: p.score * p.score * 0.5, ..p.clone() })
            .collect();
        for t in [0.5, 0.75] {
            prop_assert_eq!(
                average_precision(&preds, &gts, t).unwrap(),
                average_precision(&squashed, &gts, t).unwrap()
            );
        }
    }

    #[test]
    fn duplicating_a_true_positive_never_helps(seed in any::<u64>()) {
        let m = random_set(seed);
        let (mut preds, gts) = records(&m);
        let before = average_precision(&preds, &gts, 0.5).unwrap().unwrap();
        let hit = preds
            .iter()
            .find(|p| gts.iter().any(|g| g.image_id == p.image_id && g.class == p.class
                && mask_iou(&p.mask, &g.mask).unwrap() >= 0.5))
            .cloned();
        if let Some(p) = hit {
            let low = preds.iter().map(|q| q.score).fold(f64::INFINITY, f64::min);
            preds.push(PredictionRecord { score: low * 0.5, ..p });
            let after = average_precision(&preds, &gts, 0.5).unwrap().unwrap();
            prop_assert!(after <= before + 1e-12, "{} > {}", after, before);
        }
    }

    #[test]
    fn mask_iou_is_symmetric(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (a, b) = (random_rect(&mut rng), random_rect(&mut rng));
        let (ma, mb) = (a.mask(), b.mask());
        let ab = mask_iou(&ma, &mb).unwrap();
        prop_assert_eq!(ab, mask_iou(&mb, &ma).unwrap());
        prop_assert!((ab - rect_iou(a, b)).abs() < 1e-12);
        prop_assert_eq!(ab == 1.0, ma == mb);
    }
}
