mod common;

use common::*;
use fscascade::geometry::{decode_deltas, encode_deltas, iou, match_to_gt, nms};
use fscascade::{BBox, LabeledBox, ScoredBox};
use proptest::prelude::*;
use rand::Rng;

#[test]
fn nms_matches_brute_force_on_200_sets() {
    let mut r = rng(1);
    for case in 0..200 {
        let n = r.gen_range(0..=30);
        // Every fourth case uses few distinct scores to exercise tie-breaking.
        let dets = random_dets(&mut r, n, 3, case % 4 == 0);
        let t = [0.3, 0.5, 0.7][case % 3];
        assert_eq!(nms(&dets, t), brute_force_nms(&dets, t), "case {case}");
    }
}

#[test]
fn matching_agrees_with_oracle() {
    let mut r = rng(2);
    for case in 0..300 {
        let gts: Vec<LabeledBox> = (0..r.gen_range(0..=5))
            .map(|_| LabeledBox {
                bbox: random_box(&mut r, 64.0),
                class_id: r.gen_range(1..=2),
            })
            .collect();
        let dets: Vec<ScoredBox> = (0..r.gen_range(0..=10))
            .map(|_| {
                let base = if !gts.is_empty() && r.gen_bool(0.7) {
                    let k = r.gen_range(0..gts.len());
                    near_box(&mut r, &gts[k].bbox)
                } else {
                    random_box(&mut r, 64.0)
                };
                ScoredBox {
                    bbox: base,
                    score: r.gen_range(0..4) as f64 / 3.0,
                    class_id: r.gen_range(1..=2),
                }
            })
            .collect();
        let t = [0.5, 0.75][case % 2];
        let got: Vec<bool> = match_to_gt(&dets, &gts, t).iter().map(|m| m.true_positive).collect();
        assert_eq!(got, oracle_match(&dets, &gts, t), "case {case}");
    }
}

#[test]
fn hundred_random_round_trips() {
    let mut r = rng(3);
    let stds = [0.1, 0.1, 0.2, 0.2];
    for _ in 0..100 {
        // Offset away from the origin so clipping never engages.
        let b = random_box(&mut r, 200.0);
        let p = BBox::new(b.x1 + 100.0, b.y1 + 100.0, b.x2 + 100.0, b.y2 + 100.0);
        let g = near_box(&mut r, &p);
        let d = encode_deltas(&p, &g, stds).unwrap();
        let back = decode_deltas(&p, d, stds, (1e6, 1e6));
        for (a, b) in back.to_array().iter().zip(g.to_array()) {
            assert!((a - b).abs() < 1e-9);
        }
    }
}

fn arb_box() -> impl Strategy<Value = BBox> {
    (0.0..100.0f64, 0.0..100.0f64, 0.5..50.0f64, 0.5..50.0f64).prop_map(|(x, y, w, h)| BBox::new(x, y, x + w, y + h))
}

fn arb_dets() -> impl Strategy<Value = Vec<ScoredBox>> {
    prop::collection::vec(
        (arb_box(), 0.0..1.0f64, 1usize..3).prop_map(|(bbox, score, class_id)| ScoredBox { bbox, score, class_id }),
        0..25,
    )
}

proptest! {
    #[test]
    fn iou_is_symmetric_and_bounded(a in arb_box(), b in arb_box()) {
        let v = iou(&a, &b);
        prop_assert_eq!(v, iou(&b, &a));
        prop_assert!((0.0..=1.0).contains(&v));
        prop_assert!((iou(&a, &a) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn delta_round_trip(p in arb_box(), g in arb_box()) {
        let stds = [0.05, 0.05, 0.1, 0.1];
        let d = encode_deltas(&p, &g, stds).unwrap();
        prop_assume!(d[2] * stds[2] <= fscascade::geometry::DELTA_CLAMP && d[3] * stds[3] <= fscascade::geometry::DELTA_CLAMP);
        let back = decode_deltas(&p, d, stds, (1e6, 1e6));
        for (x, y) in back.to_array().iter().zip(g.to_array()) {
            prop_assert!((x - y).abs() < 1e-9);
        }
    }

    #[test]
    fn nms_output_invariants(dets in arb_dets(), t in 0.1..0.9f64) {
        let kept = nms(&dets, t);
        prop_assert!(kept.iter().all(|k| dets.contains(k)));
        prop_assert!(kept.windows(2).all(|w| w[0].score >= w[1].score));
        for (i, a) in kept.iter().enumerate() {
            for b in &kept[i + 1..] {
                prop_assert!(a.class_id != b.class_id || iou(&a.bbox, &b.bbox) <= t);
            }
        }
        prop_assert_eq!(nms(&kept, t), kept);
    }

    #[test]
    fn decoded_boxes_stay_inside_image(p in arb_box(), d in prop::array::uniform4(-20.0..20.0f64)) {
        let b = decode_deltas(&p, d, [0.1, 0.1, 0.2, 0.2], (120.0, 90.0));
        prop_assert!(b.x1 >= 0.0 && b.y1 >= 0.0 && b.x2 <= 120.0 && b.y2 <= 90.0);
        prop_assert!(b.x2 >= b.x1 && b.y2 >= b.y1);
    }
}
