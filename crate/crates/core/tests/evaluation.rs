mod common;

use proptest::prelude::*;
use protoadapt_core::eval::{
    ap_from_flags, average_precision, coco_thresholds, match_detections, mean_average_precision, Detection, GroundTruth,
};
use protoadapt_core::finetune::frozen_params;
use protoadapt_core::{
    evaluate_classification, evaluate_detection, run_ablation, sample_episode, synth_pack, EpisodeSpec, FinetuneConfig,
    Rect, Stage, SynthConfig,
};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn det(image: &str, bbox: Rect, class: usize, confidence: f64) -> Detection {
    Detection {
        image_id: image.into(),
        bbox,
        class,
        confidence,
    }
}

fn gt(image: &str, bbox: Rect, class: usize) -> GroundTruth {
    GroundTruth {
        image_id: image.into(),
        bbox,
        class,
    }
}

#[test]
fn three_detections_two_ground_truths() {
    let a = Rect::new(0.0, 0.0, 10.0, 10.0);
    let b = Rect::new(20.0, 0.0, 30.0, 10.0);
    let gts = vec![gt("x", a, 0), gt("x", b, 0)];
    let dets = vec![
        det("x", Rect::new(1.0, 0.0, 11.0, 10.0), 0, 0.9),
        det("x", Rect::new(0.0, 0.0, 10.0, 9.0), 0, 0.8),
        det("x", b, 0, 0.7),
    ];
    let flags = match_detections(&dets, &gts, 0, 0.5);
    assert_eq!(flags, vec![true, false, true]);
    assert_eq!(flags, common::brute_force_flags(&dets, &gts, 0, 0.5));
    // TP at ranks 1 and 3: envelope precision 1 and 2/3.
    let ap = average_precision(&dets, &gts, 0, 0.5).unwrap();
    assert!((ap - (1.0 + 2.0 / 3.0) / 2.0).abs() < 1e-15);
    assert_eq!(Some(ap), common::brute_force_ap(&flags, 2));
}

#[test]
fn perfect_and_empty_detectors() {
    let gts = vec![gt("a", Rect::new(0.0, 0.0, 5.0, 5.0), 0), gt("b", Rect::new(1.0, 1.0, 4.0, 6.0), 1)];
    let perfect: Vec<Detection> = gts.iter().map(|g| det(&g.image_id, g.bbox, g.class, 0.9)).collect();
    let th = coco_thresholds();
    assert_eq!(mean_average_precision(&perfect, &gts, 2, &th).unwrap().map, 1.0);
    let none = mean_average_precision(&[], &gts, 2, &th).unwrap().map;
    assert_eq!(none.to_bits(), 0.0f64.to_bits());
}

#[test]
fn class_without_ground_truth_is_skipped() {
    let gts = vec![gt("a", Rect::new(0.0, 0.0, 5.0, 5.0), 0)];
    let dets = vec![
        det("a", Rect::new(0.0, 0.0, 5.0, 5.0), 0, 0.9),
        det("a", Rect::new(0.0, 0.0, 5.0, 5.0), 1, 0.95),
    ];
    let s = mean_average_precision(&dets, &gts, 2, &[0.5]).unwrap();
    assert_eq!(s.per_class_ap, vec![Some(1.0), None]);
    assert_eq!(s.map, 1.0);
}

#[test]
fn empty_ground_truth_is_rejected() {
    assert!(mean_average_precision(&[], &[], 2, &[0.5]).is_err());
    assert!(ap_from_flags(&[true], 0).is_none());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn matches_exhaustive_oracle(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (dets, gts) = common::tiny_fixture(&mut rng);
        let th = coco_thresholds();
        for c in 0..2 {
            for &t in &th {
                prop_assert_eq!(match_detections(&dets, &gts, c, t), common::brute_force_flags(&dets, &gts, c, t));
            }
        }
        let got = mean_average_precision(&dets, &gts, 2, &th).unwrap().map;
        prop_assert_eq!(got.to_bits(), common::brute_force_map(&dets, &gts, 2, &th).to_bits());
    }

    #[test]
    fn rank_statistic(seed in any::<u64>(), scale in 0.1f64..10.0, shift in -5.0f64..5.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (dets, gts) = common::tiny_fixture(&mut rng);
        let moved: Vec<Detection> = dets
            .iter()
            .map(|d| Detection { confidence: (scale * d.confidence + shift).exp(), ..d.clone() })
            .collect();
        let th = coco_thresholds();
        prop_assert_eq!(
            mean_average_precision(&dets, &gts, 2, &th).unwrap(),
            mean_average_precision(&moved, &gts, 2, &th).unwrap()
        );
    }

    #[test]
    fn ap_within_unit_interval(flags in proptest::collection::vec(any::<bool>(), 0..12), extra in 0usize..4) {
        let n_gt = flags.iter().filter(|f| **f).count() + extra;
        prop_assume!(n_gt > 0);
        let ap = ap_from_flags(&flags, n_gt).unwrap();
        prop_assert!((0.0..=1.0).contains(&ap));
        prop_assert_eq!(Some(ap), common::brute_force_ap(&flags, n_gt));
    }
}

fn small_episode(seed: u64) -> protoadapt_core::Episode {
    let pack = synth_pack(&SynthConfig {
        n_classes: 3,
        instances_per_class: 12,
        n_background: 40,
        dim: 16,
        seed,
        ..SynthConfig::default()
    })
    .unwrap();
    sample_episode(&pack, &EpisodeSpec::new(3, 2, 30, seed)).unwrap()
}

#[test]
fn classification_ignores_query_order() {
    let mut ep = small_episode(4);
    let params = frozen_params(&ep, &FinetuneConfig::default()).unwrap();
    let before = evaluate_classification(&params, &ep).unwrap();
    ep.query.reverse();
    for q in &mut ep.query {
        q.instances.reverse();
    }
    assert_eq!(before, evaluate_classification(&params, &ep).unwrap());
}

#[test]
fn detection_report_is_consistent() {
    let ep = small_episode(2);
    let params = frozen_params(&ep, &FinetuneConfig::default()).unwrap();
    let r = evaluate_detection(&params, &ep, &coco_thresholds()).unwrap();
    assert_eq!(r.per_threshold_map.len(), 10);
    let classes: Vec<f64> = r.per_class_ap.iter().flatten().copied().collect();
    assert!(!classes.is_empty());
    assert!((0.0..=1.0).contains(&r.map));
    let again = evaluate_detection(&params, &ep, &coco_thresholds()).unwrap();
    assert_eq!(r, again);
}

#[test]
fn ablation_shares_episode_and_respects_order() {
    let ep = small_episode(1);
    let base = FinetuneConfig {
        n_bg: 30,
        epochs: Some(3),
        seed: 1,
        ..FinetuneConfig::default()
    };
    let stages = [Stage::Full, Stage::Frozen, Stage::FtHeads];
    let serial = run_ablation(&ep, &base, &stages, &[0.5], 1).unwrap();
    let parallel = run_ablation(&ep, &base, &stages, &[0.5], 3).unwrap();
    assert_eq!(serial, parallel);
    let labels: Vec<&str> = serial.iter().map(|r| r.stage.as_str()).collect();
    assert_eq!(labels, ["full", "frozen", "ft-heads"]);
    assert!(serial.iter().all(|r| r.episode_fingerprint == serial[0].episode_fingerprint));
    assert_ne!(serial[0].config_fingerprint, serial[1].config_fingerprint);
}
