//! Independent oracles shared by integration tests.

#![allow(dead_code)]

use protoadapt_core::eval::{Detection, GroundTruth};
use protoadapt_core::{iou, Rect};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// Exhaustive matcher: enumerates every injective assignment of detections to
/// same-image ground truths with IoU >= `threshold`, and keeps the one where each
/// detection, taken in descending confidence, holds the best-IoU ground truth
/// left over by the detections before it (lower index on ties), or holds
/// nothing when none is left.
pub fn brute_force_flags(dets: &[Detection], gts: &[GroundTruth], class: usize, threshold: f64) -> Vec<bool> {
    let mut dets: Vec<&Detection> = dets.iter().filter(|d| d.class == class).collect();
    dets.sort_by(|a, b| b.confidence.partial_cmp(&a.confidence).unwrap());
    let gts: Vec<&GroundTruth> = gts.iter().filter(|g| g.class == class).collect();
    let eligible = |d: &Detection, g: &GroundTruth| g.image_id == d.image_id && iou(&d.bbox, &g.bbox) >= threshold;

    let mut valid: Vec<Vec<Option<usize>>> = Vec::new();
    let mut current = vec![None; dets.len()];
    enumerate(0, &dets, &gts, &eligible, &mut current, &mut valid);

    let greedy: Vec<&Vec<Option<usize>>> = valid
        .iter()
        .filter(|assign| {
            (0..dets.len()).all(|i| {
                let taken: Vec<usize> = assign[..i].iter().flatten().copied().collect();
                let free: Vec<usize> = (0..gts.len())
                    .filter(|g| !taken.contains(g) && eligible(dets[i], gts[*g]))
                    .collect();
                match assign[i] {
                    None => free.is_empty(),
                    Some(g) => free.iter().all(|&o| {
                        let (a, b) = (iou(&dets[i].bbox, &gts[g].bbox), iou(&dets[i].bbox, &gts[o].bbox));
                        a > b || (a == b && g <= o)
                    }),
                }
            })
        })
        .collect();
    assert_eq!(greedy.len(), 1, "greedy assignment must be unique");
    greedy[0].iter().map(Option::is_some).collect()
}

fn enumerate(
    i: usize,
    dets: &[&Detection],
    gts: &[&GroundTruth],
    eligible: &dyn Fn(&Detection, &GroundTruth) -> bool,
    current: &mut Vec<Option<usize>>,
    out: &mut Vec<Vec<Option<usize>>>,
) {
    if i == dets.len() {
        out.push(current.clone());
        return;
    }
    current[i] = None;
    enumerate(i + 1, dets, gts, eligible, current, out);
    for g in 0..gts.len() {
        if eligible(dets[i], gts[g]) && !current[..i].contains(&Some(g)) {
            current[i] = Some(g);
            enumerate(i + 1, dets, gts, eligible, current, out);
        }
    }
    current[i] = None;
}

/// AP straight from the definition: each true positive contributes the best
/// precision reached at its rank or any later rank.
pub fn brute_force_ap(flags: &[bool], n_gt: usize) -> Option<f64> {
    if n_gt == 0 {
        return None;
    }
    let precision_at = |j: usize| flags[..=j].iter().filter(|f| **f).count() as f64 / (j + 1) as f64;
    let mut total = 0.0;
    for i in 0..flags.len() {
        if flags[i] {
            total += (i..flags.len()).map(precision_at).fold(f64::NEG_INFINITY, f64::max);
        }
    }
    Some(total / n_gt as f64)
}

pub fn brute_force_map(dets: &[Detection], gts: &[GroundTruth], n_classes: usize, thresholds: &[f64]) -> f64 {
    let per_threshold: Vec<f64> = thresholds
        .iter()
        .map(|&t| {
            let aps: Vec<f64> = (0..n_classes)
                .filter_map(|c| {
                    let n_gt = gts.iter().filter(|g| g.class == c).count();
                    brute_force_ap(&brute_force_flags(dets, gts, c, t), n_gt)
                })
                .collect();
            aps.iter().sum::<f64>() / aps.len() as f64
        })
        .collect();
    per_threshold.iter().sum::<f64>() / per_threshold.len() as f64
}

fn grid_box(rng: &mut ChaCha8Rng) -> Rect {
    let x = rng.gen_range(0..4) as f64 * 2.0;
    let y = rng.gen_range(0..4) as f64 * 2.0;
    let w = rng.gen_range(2..7) as f64;
    let h = rng.gen_range(2..7) as f64;
    Rect::new(x, y, x + w, y + h)
}

/// Tiny detection fixture: up to 5 detections and 1..=3 ground truths over two
/// images and two classes, boxes on a coarse grid so overlaps are common.
pub fn tiny_fixture(rng: &mut ChaCha8Rng) -> (Vec<Detection>, Vec<GroundTruth>) {
    let images = ["a", "b"];
    let n_gt = rng.gen_range(1..=3);
    let gts: Vec<GroundTruth> = (0..n_gt)
        .map(|_| GroundTruth {
            image_id: images[rng.gen_range(0..2)].to_string(),
            bbox: grid_box(rng),
            class: rng.gen_range(0..2),
        })
        .collect();
    let n_det = rng.gen_range(0..=5);
    // Distinct confidences keep the ranking unambiguous.
    let mut confidences: Vec<f64> = (0..n_det).map(|i| (i as f64 + rng.gen_range(0.0..0.9)) / 5.0).collect();
    for i in (1..confidences.len()).rev() {
        let j = rng.gen_range(0..=i);
        confidences.swap(i, j);
    }
    let dets: Vec<Detection> = confidences
        .into_iter()
        .map(|confidence| {
            // Most detections are shifted copies of a ground truth in its own image.
            if rng.gen_bool(0.6) {
                let g = &gts[rng.gen_range(0..gts.len())];
                let d = rng.gen_range(0..3) as f64 * 0.5;
                let class = if rng.gen_bool(0.8) { g.class } else { 1 - g.class };
                Detection {
                    image_id: g.image_id.clone(),
                    bbox: Rect::new(g.bbox.x_min + d, g.bbox.y_min, g.bbox.x_max + d, g.bbox.y_max),
                    class,
                    confidence,
                }
            } else {
                Detection {
                    image_id: images[rng.gen_range(0..2)].to_string(),
                    bbox: grid_box(rng),
                    class: rng.gen_range(0..2),
                    confidence,
                }
            }
        })
        .collect();
    (dets, gts)
}
