//! Query evaluation (accuracy and IoU-matched mAP) plus the module ablation harness.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor};
use crate::boxes::{decode_deltas, iou, Rect};
use crate::episode::{Episode, EpisodeSpec};
use crate::error::{Error, Result};
use crate::finetune::{build_query_regions, finetune, frozen_params, prototypes_of, FinetuneConfig};
use crate::head::{predict_deltas, score_features, top_k_columns, HeadVars, RegionLabel};
use crate::params::{AdaptationParams, Module};
use crate::rng;

pub const NMS_IOU: f64 = 0.5;

/// COCO-style thresholds 0.50, 0.55, ..., 0.95.
pub fn coco_thresholds() -> Vec<f64> {
    (0..10).map(|i| 0.5 + 0.05 * i as f64).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub image_id: String,
    pub bbox: Rect,
    pub class: usize,
    pub confidence: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub image_id: String,
    pub bbox: Rect,
    pub class: usize,
}

/// Indices of `dets` sorted by descending confidence, stable on ties.
fn by_confidence(dets: &[&Detection]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| dets[b].confidence.total_cmp(&dets[a].confidence).then(a.cmp(&b)));
    order
}

/// Greedy same-class suppression: keeps the most confident box and drops any
/// later box of the same image and class overlapping it by more than `threshold`.
pub fn nms(dets: Vec<Detection>, threshold: f64) -> Vec<Detection> {
    let refs: Vec<&Detection> = dets.iter().collect();
    let order = by_confidence(&refs);
    let mut kept: Vec<usize> = Vec::new();
    for i in order {
        let d = &dets[i];
        let suppressed = kept.iter().any(|&k| {
            let o = &dets[k];
            o.image_id == d.image_id && o.class == d.class && iou(&o.bbox, &d.bbox) > threshold
        });
        if !suppressed {
            kept.push(i);
        }
    }
    kept.into_iter().map(|i| dets[i].clone()).collect()
}

/// True-positive flags of `class` detections in descending confidence order.
///
/// Each detection takes the unmatched ground truth of its image with the
/// highest IoU at or above `threshold` (lowest index on ties).
pub fn match_detections(dets: &[Detection], gts: &[GroundTruth], class: usize, threshold: f64) -> Vec<bool> {
    let dets: Vec<&Detection> = dets.iter().filter(|d| d.class == class).collect();
    let gts: Vec<&GroundTruth> = gts.iter().filter(|g| g.class == class).collect();
    let mut taken = vec![false; gts.len()];
    by_confidence(&dets)
        .into_iter()
        .map(|i| {
            let d = dets[i];
            let mut best: Option<(usize, f64)> = None;
            for (j, g) in gts.iter().enumerate() {
                if taken[j] || g.image_id != d.image_id {
                    continue;
                }
                let o = iou(&d.bbox, &g.bbox);
                if o >= threshold && best.is_none_or(|(_, b)| o > b) {
                    best = Some((j, o));
                }
            }
            match best {
                Some((j, _)) => {
                    taken[j] = true;
                    true
                }
                None => false,
            }
        })
        .collect()
}

/// All-point interpolated AP from ranked true-positive flags; `None` without ground truth.
pub fn ap_from_flags(flags: &[bool], n_gt: usize) -> Option<f64> {
    if n_gt == 0 {
        return None;
    }
    let mut precision = Vec::with_capacity(flags.len());
    let mut tp = 0usize;
    for (i, &f) in flags.iter().enumerate() {
        tp += usize::from(f);
        precision.push(tp as f64 / (i + 1) as f64);
    }
    for i in (0..precision.len().saturating_sub(1)).rev() {
        precision[i] = precision[i].max(precision[i + 1]);
    }
    // Folding from +0.0: `Sum` for floats starts at -0.0.
    let total = flags
        .iter()
        .zip(&precision)
        .filter(|(f, _)| **f)
        .fold(0.0, |acc, (_, p)| acc + p);
    Some(total / n_gt as f64)
}

pub fn average_precision(dets: &[Detection], gts: &[GroundTruth], class: usize, threshold: f64) -> Option<f64> {
    let n_gt = gts.iter().filter(|g| g.class == class).count();
    ap_from_flags(&match_detections(dets, gts, class, threshold), n_gt)
}

/// Per-class AP (averaged over thresholds) and mAP (classes, then thresholds).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MapSummary {
    pub per_class_ap: Vec<Option<f64>>,
    pub per_threshold_map: Vec<(f64, f64)>,
    pub map: f64,
}

pub fn mean_average_precision(
    dets: &[Detection],
    gts: &[GroundTruth],
    n_classes: usize,
    thresholds: &[f64],
) -> Result<MapSummary> {
    if gts.is_empty() {
        return Err(Error::contract("no annotated ground truths"));
    }
    if thresholds.is_empty() {
        return Err(Error::Config("no IoU thresholds".into()));
    }
    let mut per_class = vec![Vec::new(); n_classes];
    let mut per_threshold = Vec::with_capacity(thresholds.len());
    for &t in thresholds {
        let aps: Vec<f64> = (0..n_classes)
            .filter_map(|c| {
                let ap = average_precision(dets, gts, c, t);
                if let Some(ap) = ap {
                    per_class[c].push(ap);
                }
                ap
            })
            .collect();
        per_threshold.push((t, aps.iter().sum::<f64>() / aps.len() as f64));
    }
    let map = per_threshold.iter().map(|(_, m)| m).sum::<f64>() / per_threshold.len() as f64;
    Ok(MapSummary {
        per_class_ap: per_class
            .into_iter()
            .map(|v| (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64))
            .collect(),
        per_threshold_map: per_threshold,
        map,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub stage: String,
    pub class_names: Vec<String>,
    pub per_class_ap: Vec<Option<f64>>,
    pub per_threshold_map: Vec<(f64, f64)>,
    pub map: f64,
    pub accuracy: f64,
    pub episode: EpisodeSpec,
    pub episode_fingerprint: String,
    pub config_fingerprint: String,
}

/// Argmax over `(classes, background)` for every query region, in query order.
pub fn predict_queries(params: &AdaptationParams, episode: &Episode) -> Result<Vec<(RegionLabel, RegionLabel)>> {
    let regions = build_query_regions(episode);
    if regions.is_empty() {
        return Err(Error::contract("episode has no query regions"));
    }
    let protos = prototypes_of(params)?;
    let feats = crate::head::region_features(&regions)?;
    let scores = score_features(&feats, &protos, &params.head)?;
    let n = params.n_way();
    Ok(regions
        .iter()
        .zip(scores)
        .map(|(r, s)| {
            let c = top_k_columns(&s, 1)[0];
            let pred = if c == n { RegionLabel::Background } else { RegionLabel::Class(c) };
            (pred, r.gt_class.expect("query regions are labelled"))
        })
        .collect())
}

/// Fraction of query regions whose argmax outcome equals the ground truth.
pub fn evaluate_classification(params: &AdaptationParams, episode: &Episode) -> Result<f64> {
    let preds = predict_queries(params, episode)?;
    let correct = preds.iter().filter(|(p, g)| p == g).count();
    Ok(correct as f64 / preds.len() as f64)
}

/// Scores every query proposal, keeps the best object class per region,
/// regresses its box and applies class-wise NMS per image.
pub fn detect(params: &AdaptationParams, episode: &Episode) -> Result<Vec<Detection>> {
    let regions = build_query_regions(episode);
    let protos = prototypes_of(params)?;
    let n = params.n_way();
    let with_box: Vec<usize> = (0..regions.len()).filter(|&i| regions[i].proposal_box.is_some()).collect();
    if with_box.is_empty() {
        return Ok(Vec::new());
    }
    let feats = Tensor::from_rows(&with_box.iter().map(|&i| regions[i].roi_feature.as_slice()).collect::<Vec<_>>())?;
    let scores = score_features(&feats, &protos, &params.head)?;
    let classes: Vec<usize> = scores.iter().map(|s| top_k_columns(&s[..n], 1)[0]).collect();

    let tape = Tape::new();
    let pv = crate::adapt::PrototypeVars {
        object: tape.constant(protos.object_prototypes.clone())?,
        background: None,
    };
    let hv = HeadVars {
        projection: tape.constant(params.head.projection.clone())?,
        box_w: tape.constant(params.head.box_w.clone())?,
        box_b: tape.constant(params.head.box_b.clone())?,
    };
    let fv = tape.constant(feats)?;
    let deltas = tape.value(predict_deltas(&tape, fv, &classes, &pv, &hv)?);

    let mut per_image: BTreeMap<String, Vec<Detection>> = BTreeMap::new();
    let images: Vec<&str> = episode
        .query
        .iter()
        .flat_map(|q| q.instances.iter().map(move |_| q.image_id.as_str()))
        .collect();
    for (row, &i) in with_box.iter().enumerate() {
        let d = deltas.row_slice(row);
        let bbox = decode_deltas(&regions[i].proposal_box.expect("filtered"), [d[0], d[1], d[2], d[3]]);
        if !bbox.is_valid() {
            continue;
        }
        per_image.entry(images[i].to_string()).or_default().push(Detection {
            image_id: images[i].to_string(),
            bbox,
            class: classes[row],
            confidence: scores[row][classes[row]],
        });
    }
    Ok(per_image.into_values().flat_map(|d| nms(d, NMS_IOU)).collect())
}

pub fn query_ground_truths(episode: &Episode) -> Vec<GroundTruth> {
    episode
        .query
        .iter()
        .flat_map(|q| {
            q.instances.iter().filter_map(|i| {
                Some(GroundTruth {
                    image_id: q.image_id.clone(),
                    bbox: i.bbox?,
                    class: i.label?,
                })
            })
        })
        .collect()
}

pub fn config_fingerprint(config: &FinetuneConfig) -> String {
    let json = serde_json::to_vec(config).expect("config serializes");
    format!("{:016x}", rng::fnv1a(json))
}

pub fn evaluate_detection(
    params: &AdaptationParams,
    episode: &Episode,
    iou_thresholds: &[f64],
) -> Result<EvalReport> {
    evaluate_stage("eval", params, episode, iou_thresholds, None)
}

fn evaluate_stage(
    stage: &str,
    params: &AdaptationParams,
    episode: &Episode,
    iou_thresholds: &[f64],
    config: Option<&FinetuneConfig>,
) -> Result<EvalReport> {
    crate::finetune::layout_check(params, episode)?;
    let gts = query_ground_truths(episode);
    if gts.is_empty() {
        return Err(Error::contract("no annotated query instances"));
    }
    let dets = detect(params, episode)?;
    let summary = mean_average_precision(&dets, &gts, params.n_way(), iou_thresholds)?;
    Ok(EvalReport {
        stage: stage.to_string(),
        class_names: params.class_names.clone(),
        per_class_ap: summary.per_class_ap,
        per_threshold_map: summary.per_threshold_map,
        map: summary.map,
        accuracy: evaluate_classification(params, episode)?,
        episode: episode.spec.clone(),
        episode_fingerprint: format!("{:016x}", episode.fingerprint()),
        config_fingerprint: config.map(config_fingerprint).unwrap_or_default(),
    })
}

/// Cumulative module configurations of the ablation study.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Stage {
    /// No finetuning: class-mean prototypes, top-1 candidate.
    Frozen,
    FtHeads,
    /// Heads + learnable instances.
    Lif,
    /// Heads + learnable instances + reweighting.
    Ir,
    /// Every module.
    Dp,
    Full,
}

impl Stage {
    pub fn label(&self) -> &'static str {
        match self {
            Stage::Frozen => "frozen",
            Stage::FtHeads => "ft-heads",
            Stage::Lif => "+lif",
            Stage::Ir => "+ir",
            Stage::Dp => "+dp",
            Stage::Full => "full",
        }
    }

    pub fn modules(&self) -> Vec<Module> {
        match self {
            Stage::Frozen => vec![],
            Stage::FtHeads => vec![Module::FtHeads],
            Stage::Lif => vec![Module::FtHeads, Module::Lif],
            Stage::Ir => vec![Module::FtHeads, Module::Lif, Module::Ir],
            Stage::Dp | Stage::Full => Module::ALL.to_vec(),
        }
    }

    pub const ORDER: [Stage; 6] = [Stage::Frozen, Stage::FtHeads, Stage::Lif, Stage::Ir, Stage::Dp, Stage::Full];
}

impl std::str::FromStr for Stage {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim_start_matches('+');
        Stage::ORDER
            .into_iter()
            .find(|st| st.label().trim_start_matches('+') == s)
            .ok_or_else(|| Error::Config(format!("unknown stage {s:?}")))
    }
}

/// Trains (unless frozen) and evaluates one stage.
pub fn run_stage(
    episode: &Episode,
    base: &FinetuneConfig,
    stage: Stage,
    iou_thresholds: &[f64],
) -> Result<(AdaptationParams, EvalReport)> {
    let config = base.clone().with_modules(stage.modules()).resolved_for(episode.n_way());
    let params = match stage {
        Stage::Frozen => frozen_params(episode, &config)?,
        _ => finetune(episode, &config)?.0,
    };
    let report = evaluate_stage(stage.label(), &params, episode, iou_thresholds, Some(&config))?;
    Ok((params, report))
}

/// One report per stage, in stage order. Stages run on up to `workers` threads;
/// the episode and seeds are shared, so only the enabled modules differ.
pub fn run_ablation(
    episode: &Episode,
    base: &FinetuneConfig,
    stages: &[Stage],
    iou_thresholds: &[f64],
    workers: usize,
) -> Result<Vec<EvalReport>> {
    let workers = workers.max(1);
    let mut results: Vec<Option<Result<EvalReport>>> = (0..stages.len()).map(|_| None).collect();
    for chunk_start in (0..stages.len()).step_by(workers) {
        let chunk = &stages[chunk_start..(chunk_start + workers).min(stages.len())];
        let outs: Vec<Result<EvalReport>> = std::thread::scope(|s| {
            let handles: Vec<_> = chunk
                .iter()
                .map(|&stage| s.spawn(move || run_stage(episode, base, stage, iou_thresholds).map(|r| r.1)))
                .collect();
            handles.into_iter().map(|h| h.join().expect("stage worker panicked")).collect()
        });
        for (i, out) in outs.into_iter().enumerate() {
            results[chunk_start + i] = Some(out);
        }
    }
    results.into_iter().map(|r| r.expect("every stage ran")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn det(img: &str, b: [f64; 4], class: usize, conf: f64) -> Detection {
        Detection {
            image_id: img.into(),
            bbox: b.into(),
            class,
            confidence: conf,
        }
    }

    fn gt(img: &str, b: [f64; 4], class: usize) -> GroundTruth {
        GroundTruth {
            image_id: img.into(),
            bbox: b.into(),
            class,
        }
    }

    #[test]
    fn perfect_detector_scores_one() {
        let gts = vec![gt("a", [0.0, 0.0, 10.0, 10.0], 0), gt("b", [5.0, 5.0, 20.0, 20.0], 1)];
        let dets = vec![det("a", [0.0, 0.0, 10.0, 10.0], 0, 0.9), det("b", [5.0, 5.0, 20.0, 20.0], 1, 0.8)];
        let s = mean_average_precision(&dets, &gts, 2, &coco_thresholds()).unwrap();
        assert_eq!(s.map, 1.0);
    }

    #[test]
    fn no_detections_scores_zero() {
        let gts = vec![gt("a", [0.0, 0.0, 10.0, 10.0], 0)];
        let s = mean_average_precision(&[], &gts, 1, &[0.5]).unwrap();
        assert_eq!(s.map, 0.0);
    }

    #[test]
    fn class_without_gt_is_skipped() {
        let gts = vec![gt("a", [0.0, 0.0, 10.0, 10.0], 0)];
        let dets = vec![det("a", [0.0, 0.0, 10.0, 10.0], 0, 0.9), det("a", [0.0, 0.0, 9.0, 9.0], 1, 0.95)];
        let s = mean_average_precision(&dets, &gts, 2, &[0.5]).unwrap();
        assert_eq!(s.per_class_ap, vec![Some(1.0), None]);
        assert_eq!(s.map, 1.0);
    }

    #[test]
    fn hand_ap_value() {
        // Ranked TP, FP, TP with two ground truths: precisions 1, 1/2, 2/3;
        // envelope at the second TP is 2/3, AP = (1 + 2/3) / 2.
        let gts = vec![gt("a", [0.0, 0.0, 10.0, 10.0], 0), gt("a", [20.0, 20.0, 30.0, 30.0], 0)];
        let dets = vec![
            det("a", [0.0, 0.0, 10.0, 10.0], 0, 0.9),
            det("a", [50.0, 50.0, 60.0, 60.0], 0, 0.8),
            det("a", [20.0, 20.0, 30.0, 30.0], 0, 0.7),
        ];
        let ap = average_precision(&dets, &gts, 0, 0.5).unwrap();
        assert!((ap - (1.0 + 2.0 / 3.0) / 2.0).abs() < 1e-15);
    }

    #[test]
    fn duplicate_detection_is_false_positive() {
        let gts = vec![gt("a", [0.0, 0.0, 10.0, 10.0], 0)];
        let dets = vec![det("a", [0.0, 0.0, 10.0, 10.0], 0, 0.9), det("a", [0.0, 0.0, 10.0, 9.0], 0, 0.8)];
        assert_eq!(match_detections(&dets, &gts, 0, 0.5), vec![true, false]);
    }

    #[test]
    fn nms_suppresses_same_class_only() {
        let dets = vec![
            det("a", [0.0, 0.0, 10.0, 10.0], 0, 0.9),
            det("a", [0.0, 0.0, 10.0, 9.0], 0, 0.8),
            det("a", [0.0, 0.0, 10.0, 9.0], 1, 0.7),
            det("b", [0.0, 0.0, 10.0, 9.0], 0, 0.6),
        ];
        let kept = nms(dets, NMS_IOU);
        assert_eq!(kept.len(), 3);
        assert!(kept.iter().all(|d| d.confidence != 0.8));
    }

    #[test]
    fn stage_parsing() {
        assert_eq!("frozen".parse::<Stage>().unwrap(), Stage::Frozen);
        assert_eq!("+lif".parse::<Stage>().unwrap(), Stage::Lif);
        assert_eq!("lif".parse::<Stage>().unwrap(), Stage::Lif);
        assert!("bogus".parse::<Stage>().is_err());
    }
}
