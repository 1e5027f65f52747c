//! Property tests over the geometry, codec, data and metric invariants.

use contourlm::codec::{self, Vocab, IMG};
use contourlm::evaluation::{coco_thresholds, match_and_score, Scene};
use contourlm::geometry::{canonicalize, enlarge_bbox, polygon_iou, rotate_start, shoelace_signed_area, BBox, Polygon};
use contourlm::synthdata::{chamfer_corners, gen_rectilinear_polygon, generate_record, GenParams, Split};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Rectilinear footprint from the scene generator, optionally with cut corners.
fn polygon(seed: u64, diagonal: bool) -> Polygon {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let p = gen_rectilinear_polygon(16, 8, &mut rng).unwrap();
    if diagonal {
        chamfer_corners(&p, 0.4, &mut rng).unwrap()
    } else {
        p
    }
}

fn any_polygon() -> impl Strategy<Value = Polygon> {
    (any::<u64>(), any::<bool>()).prop_map(|(s, d)| polygon(s, d))
}

fn rect(x: i32, y: i32, w: i32, h: i32) -> Polygon {
    Polygon::new(vec![(x, y), (x + w, y), (x + w, y + h), (x, y + h)]).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn reversal_negates_signed_area(p in any_polygon()) {
        prop_assert_eq!(shoelace_signed_area(&p.reversed()), -shoelace_signed_area(&p));
    }

    #[test]
    fn canonicalize_is_idempotent_rotation_invariant_and_area_preserving(p in any_polygon(), k in any::<usize>(), flip in any::<bool>()) {
        let p = if flip { p.reversed() } else { p };
        let c = canonicalize(&p).unwrap();
        prop_assert!(c.is_canonical());
        prop_assert_eq!(&canonicalize(&c).unwrap(), &c);
        prop_assert_eq!(&canonicalize(&rotate_start(&p, k % p.len()).unwrap()).unwrap(), &c);
        prop_assert_eq!(shoelace_signed_area(&c).abs(), shoelace_signed_area(&p).abs());
    }

    #[test]
    fn iou_is_symmetric_bounded_and_one_on_itself(a in any_polygon(), b in any_polygon()) {
        let ab = polygon_iou(&a, &b, 4).unwrap();
        let ba = polygon_iou(&b, &a, 4).unwrap();
        prop_assert_eq!(ab, ba);
        prop_assert!((0.0..=1.0).contains(&ab));
        prop_assert_eq!(polygon_iou(&a, &a, 4).unwrap(), 1.0);
    }

    #[test]
    fn rectangle_iou_matches_closed_form(
        x0 in 0..100i32, y0 in 0..100i32, w0 in 1..60i32, h0 in 1..60i32,
        x1 in 0..100i32, y1 in 0..100i32, w1 in 1..60i32, h1 in 1..60i32,
    ) {
        let iw = ((x0 + w0).min(x1 + w1) - x0.max(x1)).max(0) as f64;
        let ih = ((y0 + h0).min(y1 + h1) - y0.max(y1)).max(0) as f64;
        let inter = iw * ih;
        let want = inter / ((w0 * h0 + w1 * h1) as f64 - inter);
        let got = polygon_iou(&rect(x0, y0, w0, h0), &rect(x1, y1, w1, h1), 4).unwrap();
        prop_assert!((got - want).abs() <= 0.02, "got {got} want {want}");
    }

    #[test]
    fn enlarge_bbox_is_monotone_in_factor(x in 0..500i32, y in 0..500i32, w in 1..200i32, h in 1..200i32, f in 1.0f64..2.0, g in 0.0f64..1.0) {
        let b = BBox::new(x, y, x + w, y + h).unwrap();
        let small = enlarge_bbox(&b, f, 100_000, 100_000);
        let big = enlarge_bbox(&b, f + g, 100_000, 100_000);
        prop_assert!(small.contains(&b));
        prop_assert!(big.contains(&small));
    }

    #[test]
    fn codec_round_trips_canonical_polygons(p in any_polygon()) {
        let vocab = Vocab::new(128, 128);
        let c = canonicalize(&p).unwrap();
        let ids = codec::encode_polygon(&vocab, &c).unwrap();
        prop_assert_eq!(codec::decode_tokens(&vocab, &ids).unwrap(), c.clone());
        // and through the bracket text
        prop_assert_eq!(vocab.parse(&vocab.render(&ids)).unwrap(), ids);
    }

    #[test]
    fn generated_samples_are_canonical_and_masks_skip_prompts(seed in any::<u64>(), index in 0usize..50, offset in any::<usize>()) {
        let params = GenParams::default();
        let rec = generate_record(&params, seed, Split::Train, index).unwrap();
        prop_assert_eq!(&canonicalize(&rec.sample.gt).unwrap(), &rec.sample.gt);
        let vocab = Vocab::new(128, 128);

        let pre = codec::format_pretrain_at(&vocab, &rec.sample, offset % rec.sample.gt.len()).unwrap();
        prop_assert_eq!(pre.ids[0], IMG);
        prop_assert!(!pre.loss_mask[0]);
        let answer: Vec<_> = pre.ids[1..pre.len() - 1].to_vec();
        let ring = codec::decode_tokens(&vocab, &answer).unwrap();
        prop_assert_eq!(&canonicalize(&ring).unwrap(), &rec.sample.gt);

        let sft = codec::format_sft(&vocab, &rec.sample).unwrap();
        let prompt = codec::sft_prompt(&vocab);
        prop_assert_eq!(&sft.ids[..prompt.len()], &prompt.ids[..]);
        prop_assert!(sft.loss_mask[..prompt.len()].iter().all(|&m| !m));
        prop_assert!(sft.loss_mask[prompt.len()..].iter().all(|&m| m));
    }

    #[test]
    fn metrics_are_order_invariant_and_map_bounded_by_ap50(seeds in prop::collection::vec(any::<u64>(), 1..5), shift in 0..6i32) {
        let gts: Vec<Polygon> = seeds.iter().map(|&s| polygon(s, false)).collect();
        let preds: Vec<(Polygon, f64)> = gts
            .iter()
            .enumerate()
            .map(|(i, g)| {
                let v = g.vertices().iter().map(|&(x, y)| (x + shift * (i as i32 % 2), y)).collect();
                (Polygon::new(v).unwrap(), 0.9 - 0.1 * i as f64)
            })
            .collect();
        let th = coco_thresholds();
        let fwd = match_and_score(&[Scene { preds: preds.clone(), gts: gts.clone() }], &th).unwrap();
        let mut rev = preds.clone();
        rev.reverse();
        let back = match_and_score(&[Scene { preds: rev, gts: gts.clone() }], &th).unwrap();
        prop_assert_eq!(fwd.map, back.map);
        prop_assert_eq!(fwd.ap50, back.ap50);
        prop_assert!(fwd.map <= fwd.ap50 + 1e-12);
        let own: Vec<(Polygon, f64)> = gts.iter().enumerate().map(|(i, g)| (g.clone(), 1.0 - 0.01 * i as f64)).collect();
        let perfect = match_and_score(&[Scene { preds: own, gts }], &th).unwrap();
        prop_assert!((perfect.map - 1.0).abs() < 1e-12);
    }
}

#[test]
fn coordinate_vocabulary_has_one_token_per_row_and_column() {
    let v = Vocab::new(128, 128);
    assert_eq!(v.coordinate_count(), 256);
    assert_eq!(v.size(), v.words().len() + 256 + 4);
}

#[test]
fn seeded_rng_polygons_are_reproducible() {
    let mut a = ChaCha8Rng::seed_from_u64(3);
    let mut b = ChaCha8Rng::seed_from_u64(3);
    let pa = gen_rectilinear_polygon(16, 8, &mut a).unwrap();
    let pb = gen_rectilinear_polygon(16, 8, &mut b).unwrap();
    assert_eq!(pa, pb);
}
