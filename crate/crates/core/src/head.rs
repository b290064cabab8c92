//! Cosine classification head and box regressor.
//!
//! Regions and prototypes pass through a shared `D x D` projection (identity
//! at initialization) before cosine scoring. Each region gets `N + 1` logits:
//! one per object prototype and one background channel holding the best
//! background-prototype similarity. Only the `top_k` most similar classes
//! (plus background) enter the softmax.

use rand_chacha::ChaCha8Rng;

use crate::adapt::{PrototypeSet, PrototypeVars};
use crate::autodiff::{softmax_in_place, Tape, Tensor, Var};
use crate::boxes::{encode_deltas, Rect};
use crate::error::{Error, Result};
use crate::params::uniform;

pub const DEFAULT_CLS_TEMPERATURE: f64 = 0.1;
pub const DEFAULT_TOP_K: usize = 5;

/// Candidate count for `n_way` classes: at most five, never more than N.
pub fn top_k_for(n_way: usize) -> usize {
    DEFAULT_TOP_K.min(n_way)
}

/// Ground-truth outcome of a region.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RegionLabel {
    Class(usize),
    Background,
}

impl RegionLabel {
    /// Column in the `N + 1` score vector.
    pub fn column(&self, n_way: usize) -> usize {
        match self {
            RegionLabel::Class(c) => *c,
            RegionLabel::Background => n_way,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct QueryRegion {
    pub roi_feature: Vec<f64>,
    pub proposal_box: Option<Rect>,
    pub gt_class: Option<RegionLabel>,
    pub gt_box: Option<Rect>,
    /// Background prototype row this region was taken from, if any. That row is
    /// left out of the region's background score so it cannot match itself.
    pub background_row: Option<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct HeadParams {
    /// `D x D` projection shared by regions and prototypes.
    pub projection: Tensor,
    /// `2D x 4` box regressor over `[roi ; matched prototype]`.
    pub box_w: Tensor,
    /// `1 x 4` regressor bias.
    pub box_b: Tensor,
    pub cls_temperature: f64,
    pub top_k: usize,
}

impl HeadParams {
    pub fn init(dim: usize, n_way: usize, cls_temperature: f64, rng: &mut ChaCha8Rng) -> Result<Self> {
        if !(cls_temperature > 0.0) {
            return Err(Error::Config(format!("cls_temperature must be positive, got {cls_temperature}")));
        }
        let bound = 1.0 / ((2 * dim) as f64).sqrt();
        Ok(Self {
            projection: Tensor::identity(dim),
            box_w: uniform(rng, 2 * dim, 4, 0.1 * bound),
            box_b: Tensor::zeros(1, 4),
            cls_temperature,
            top_k: top_k_for(n_way),
        })
    }
}

/// Tape handles for the head parameters.
#[derive(Debug, Clone, Copy)]
pub struct HeadVars {
    pub projection: Var,
    pub box_w: Var,
    pub box_b: Var,
}

/// Logits and candidate mask for a batch of regions.
#[derive(Debug)]
pub struct RegionLogits {
    /// `R x (N + 1)`, already divided by the temperature.
    pub logits: Var,
    /// Row-major `R x (N + 1)` candidate mask.
    pub mask: Vec<bool>,
    pub n_way: usize,
}

/// Scores `regions` (`R x D`) against the prototypes.
///
/// `keep` forces one extra column per row into the candidate set (the ground
/// truth during training, so the cross-entropy stays finite). `exclude_bg`
/// names, per row, a background prototype to leave out of the max.
#[allow(clippy::too_many_arguments)]
pub fn region_logits(
    tape: &Tape,
    regions: Var,
    protos: &PrototypeVars,
    head: &HeadVars,
    cls_temperature: f64,
    top_k: usize,
    keep: Option<&[usize]>,
    exclude_bg: Option<&[Option<usize>]>,
) -> Result<RegionLogits> {
    let n_way = protos.object.rows();
    if n_way == 0 {
        return Err(Error::contract("empty prototype set"));
    }
    if top_k == 0 {
        return Err(Error::Config("top_k must be positive".into()));
    }
    let r = regions.rows();
    let z = tape.matmul(regions, head.projection)?;
    let z = tape.l2_normalize_rows(z)?;
    let po = tape.matmul(protos.object, head.projection)?;
    let po = tape.l2_normalize_rows(po)?;
    let obj = tape.matmul_nt(z, po)?;
    let bg = match protos.background {
        Some(b) => {
            let pb = tape.matmul(b, head.projection)?;
            let pb = tape.l2_normalize_rows(pb)?;
            let mut sims = tape.matmul_nt(z, pb)?;
            if let Some(ex) = exclude_bg.filter(|ex| ex.iter().any(Option::is_some)) {
                // Cosines are >= -1, so an offset of -4 keeps the row out of the max
                // whenever another background row exists.
                let mut offset = Tensor::zeros(r, b.rows());
                for (row, col) in ex.iter().enumerate() {
                    if let Some(col) = *col {
                        if col >= b.rows() {
                            return Err(Error::contract(format!("background row {col} out of range")));
                        }
                        offset.set(row, col, -4.0);
                    }
                }
                let offset = tape.constant(offset)?;
                sims = tape.add(sims, offset)?;
            }
            tape.row_max(sims)?
        }
        None => tape.constant(Tensor::zeros(r, 1))?,
    };
    let sims = tape.concat_cols(obj, bg)?;
    let logits = tape.scale(sims, 1.0 / cls_temperature)?;

    let cols = n_way + 1;
    let mut mask = vec![false; r * cols];
    tape.with_value(obj, |s| {
        for row in 0..r {
            let m = &mut mask[row * cols..(row + 1) * cols];
            for c in top_k_columns(s.row_slice(row), top_k) {
                m[c] = true;
            }
            m[n_way] = protos.background.is_some();
            if let Some(keep) = keep {
                m[keep[row]] = true;
            }
        }
    });
    Ok(RegionLogits { logits, mask, n_way })
}

/// Indices of the `k` largest values; ties go to the lower index.
pub fn top_k_columns(values: &[f64], k: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[b].total_cmp(&values[a]).then(a.cmp(&b)));
    order.truncate(k);
    order
}

/// Softmax probabilities over `(classes, background)` for each row.
pub fn probabilities(tape: &Tape, logits: &RegionLogits) -> Vec<Vec<f64>> {
    let cols = logits.n_way + 1;
    tape.with_value(logits.logits, |t| {
        (0..t.rows())
            .map(|r| {
                let mut row = t.row_slice(r).to_vec();
                softmax_in_place(&mut row, Some(&logits.mask[r * cols..(r + 1) * cols]));
                row
            })
            .collect()
    })
}

fn head_constants(tape: &Tape, params: &HeadParams) -> Result<HeadVars> {
    Ok(HeadVars {
        projection: tape.constant(params.projection.clone())?,
        box_w: tape.constant(params.box_w.clone())?,
        box_b: tape.constant(params.box_b.clone())?,
    })
}

fn prototype_constants(tape: &Tape, protos: &PrototypeSet) -> Result<PrototypeVars> {
    if protos.n_way() == 0 {
        return Err(Error::contract("empty prototype set"));
    }
    Ok(PrototypeVars {
        object: tape.constant(protos.object_prototypes.clone())?,
        background: if protos.n_bg() > 0 {
            Some(tape.constant(protos.background_prototypes.clone())?)
        } else {
            None
        },
    })
}

/// Scores many region features at once; each row sums to one over `N + 1` outcomes.
pub fn score_features(features: &Tensor, protos: &PrototypeSet, params: &HeadParams) -> Result<Vec<Vec<f64>>> {
    if features.rows() == 0 {
        return Ok(Vec::new());
    }
    let tape = Tape::new();
    let pv = prototype_constants(&tape, protos)?;
    let hv = head_constants(&tape, params)?;
    let regions = tape.constant(features.clone())?;
    let logits = region_logits(&tape, regions, &pv, &hv, params.cls_temperature, params.top_k, None, None)?;
    Ok(probabilities(&tape, &logits))
}

/// Score vector over the N classes followed by background.
pub fn classify_region(region: &QueryRegion, protos: &PrototypeSet, params: &HeadParams) -> Result<Vec<f64>> {
    let features = Tensor::row(&region.roi_feature);
    Ok(score_features(&features, protos, params)?.remove(0))
}

fn labels_of(regions: &[QueryRegion], n_way: usize) -> Result<Vec<usize>> {
    regions
        .iter()
        .enumerate()
        .map(|(i, r)| {
            r.gt_class
                .map(|l| l.column(n_way))
                .ok_or_else(|| Error::contract(format!("region {i} has no gt_class")))
        })
        .collect()
}

pub(crate) fn region_features(regions: &[QueryRegion]) -> Result<Tensor> {
    let rows: Vec<&[f64]> = regions.iter().map(|r| r.roi_feature.as_slice()).collect();
    Tensor::from_rows(&rows)
}

/// Masked cross-entropy of labelled regions against the prototypes.
pub fn classification_loss_on_tape(
    tape: &Tape,
    regions: &[QueryRegion],
    protos: &PrototypeVars,
    head: &HeadVars,
    cls_temperature: f64,
    top_k: usize,
) -> Result<Var> {
    let n_way = protos.object.rows();
    let labels = labels_of(regions, n_way)?;
    if labels.is_empty() {
        return tape.constant(Tensor::scalar(0.0));
    }
    let feats = tape.constant(region_features(regions)?)?;
    let exclude: Vec<Option<usize>> = regions.iter().map(|r| r.background_row).collect();
    scored_cross_entropy(tape, feats, &labels, protos, head, cls_temperature, top_k, Some(&exclude))
}

/// Cross-entropy of arbitrary (possibly trainable) region rows with the given label columns.
#[allow(clippy::too_many_arguments)]
pub fn scored_cross_entropy(
    tape: &Tape,
    regions: Var,
    labels: &[usize],
    protos: &PrototypeVars,
    head: &HeadVars,
    cls_temperature: f64,
    top_k: usize,
    exclude_bg: Option<&[Option<usize>]>,
) -> Result<Var> {
    let logits = region_logits(tape, regions, protos, head, cls_temperature, top_k, Some(labels), exclude_bg)?;
    tape.masked_cross_entropy_with_logits(logits.logits, labels, Some(&logits.mask))
}

/// Standalone cross-entropy over fixed prototypes and head parameters.
pub fn classification_loss(regions: &[QueryRegion], protos: &PrototypeSet, params: &HeadParams) -> Result<f64> {
    let tape = Tape::new();
    let pv = prototype_constants(&tape, protos)?;
    let hv = head_constants(&tape, params)?;
    let loss = classification_loss_on_tape(&tape, regions, &pv, &hv, params.cls_temperature, params.top_k)?;
    Ok(tape.scalar_value(loss))
}

/// Regions that take part in box regression (object regions with both boxes).
pub fn localization_targets(regions: &[QueryRegion]) -> Result<Vec<(usize, usize, [f64; 4])>> {
    let mut out = Vec::new();
    for (i, r) in regions.iter().enumerate() {
        let (Some(RegionLabel::Class(c)), Some(gt), Some(proposal)) = (r.gt_class, r.gt_box, r.proposal_box) else {
            continue;
        };
        if gt.area() <= 0.0 || !gt.is_valid() {
            return Err(Error::contract(format!("region {i} has a degenerate gt_box")));
        }
        out.push((i, c, encode_deltas(&proposal, &gt)?));
    }
    Ok(out)
}

/// Box deltas predicted for `regions` (`R x D`) matched to prototype rows `classes`.
pub fn predict_deltas(
    tape: &Tape,
    regions: Var,
    classes: &[usize],
    protos: &PrototypeVars,
    head: &HeadVars,
) -> Result<Var> {
    let matched = tape.select_rows(protos.object, classes)?;
    let input = tape.concat_cols(regions, matched)?;
    let out = tape.matmul(input, head.box_w)?;
    tape.add(out, head.box_b)
}

/// Mean smooth-L1 between predicted and target deltas; zero when no region qualifies.
pub fn localization_loss_on_tape(
    tape: &Tape,
    regions: &[QueryRegion],
    protos: &PrototypeVars,
    head: &HeadVars,
) -> Result<Var> {
    let targets = localization_targets(regions)?;
    if targets.is_empty() {
        return tape.constant(Tensor::scalar(0.0));
    }
    let rows: Vec<&[f64]> = targets.iter().map(|(i, _, _)| regions[*i].roi_feature.as_slice()).collect();
    let feats = tape.constant(Tensor::from_rows(&rows)?)?;
    let classes: Vec<usize> = targets.iter().map(|(_, c, _)| *c).collect();
    let pred = predict_deltas(tape, feats, &classes, protos, head)?;
    let deltas: Vec<[f64; 4]> = targets.iter().map(|(_, _, d)| *d).collect();
    let target = tape.constant(Tensor::from_rows(&deltas)?)?;
    tape.smooth_l1(pred, target)
}

pub fn localization_loss(regions: &[QueryRegion], protos: &PrototypeSet, params: &HeadParams) -> Result<f64> {
    let tape = Tape::new();
    let pv = prototype_constants(&tape, protos)?;
    let hv = head_constants(&tape, params)?;
    let loss = localization_loss_on_tape(&tape, regions, &pv, &hv)?;
    Ok(tape.scalar_value(loss))
}

/// `L_loc + L_cls + L_dp`, with an absent prompter term counting as zero.
pub fn total_loss(tape: &Tape, loc: Var, cls: Var, dp: Option<Var>) -> Result<Var> {
    let sum = tape.add(loc, cls)?;
    match dp {
        Some(dp) => tape.add(sum, dp),
        None => Ok(sum),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn unit(d: usize, i: usize) -> Vec<f64> {
        let mut v = vec![0.0; d];
        v[i] = 1.0;
        v
    }

    fn protos(obj: &[Vec<f64>], bg: &[Vec<f64>], d: usize) -> PrototypeSet {
        PrototypeSet {
            object_prototypes: Tensor::from_rows(obj).unwrap(),
            background_prototypes: if bg.is_empty() {
                Tensor::zeros(0, d)
            } else {
                Tensor::from_rows(bg).unwrap()
            },
            class_names: (0..obj.len()).map(|i| format!("c{i}")).collect(),
        }
    }

    fn head(d: usize, top_k: usize, temp: f64) -> HeadParams {
        HeadParams {
            projection: Tensor::identity(d),
            box_w: Tensor::zeros(2 * d, 4),
            box_b: Tensor::zeros(1, 4),
            cls_temperature: temp,
            top_k,
        }
    }

    fn region(feature: Vec<f64>, label: Option<RegionLabel>) -> QueryRegion {
        QueryRegion {
            roi_feature: feature,
            proposal_box: None,
            gt_class: label,
            gt_box: None,
            background_row: None,
        }
    }

    fn argmax(v: &[f64]) -> usize {
        crate::head::top_k_columns(v, 1)[0]
    }

    #[test]
    fn identity_region_picks_its_class() {
        let p = protos(&[unit(4, 0), unit(4, 1), unit(4, 2)], &[], 4);
        let scores = classify_region(&region(unit(4, 2), None), &p, &head(4, 3, 0.1)).unwrap();
        assert_eq!(argmax(&scores), 2);
        assert_eq!(scores[3], 0.0);
        assert!((scores.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn background_prototype_wins_for_background_region() {
        let p = protos(&[unit(4, 0), unit(4, 1)], &[unit(4, 3), unit(4, 2)], 4);
        let scores = classify_region(&region(unit(4, 3), None), &p, &head(4, 2, 0.1)).unwrap();
        assert_eq!(argmax(&scores), 2);
    }

    #[test]
    fn top_k_rule() {
        assert_eq!(top_k_for(3), 3);
        assert_eq!(top_k_for(20), 5);
        assert_eq!(top_k_for(1), 1);
    }

    #[test]
    fn top_k_masks_low_classes() {
        let p = protos(&[unit(3, 0), unit(3, 1), unit(3, 2)], &[], 3);
        let scores = classify_region(&region(vec![0.9, 0.4, 0.1], None), &p, &head(3, 1, 0.5)).unwrap();
        assert_eq!(scores, vec![1.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn empty_prototypes_rejected() {
        let p = PrototypeSet {
            object_prototypes: Tensor::zeros(0, 2),
            background_prototypes: Tensor::zeros(0, 2),
            class_names: vec![],
        };
        assert!(matches!(
            classify_region(&region(vec![1.0, 0.0], None), &p, &head(2, 1, 0.1)),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn sharp_temperature_matched_regions_have_tiny_loss() {
        let p = protos(&[unit(3, 0), unit(3, 1), unit(3, 2)], &[], 3);
        let regions: Vec<_> = (0..3).map(|c| region(unit(3, c), Some(RegionLabel::Class(c)))).collect();
        let loss = classification_loss(&regions, &p, &head(3, 3, 0.01)).unwrap();
        assert!(loss < 1e-3, "{loss}");
    }

    #[test]
    fn identical_prototypes_give_uniform_loss() {
        let v = vec![0.6, 0.8];
        let p = protos(&[v.clone(), v.clone(), v.clone()], std::slice::from_ref(&v), 2);
        let regions = vec![
            region(vec![1.0, 0.0], Some(RegionLabel::Class(1))),
            region(vec![0.0, 1.0], Some(RegionLabel::Background)),
        ];
        let loss = classification_loss(&regions, &p, &head(2, 3, 0.1)).unwrap();
        assert!((loss - 4f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn missing_label_is_contract_error() {
        let p = protos(&[unit(2, 0)], &[], 2);
        assert!(matches!(
            classification_loss(&[region(unit(2, 0), None)], &p, &head(2, 1, 0.1)),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn localization_zero_cases() {
        let p = protos(&[unit(2, 0)], &[], 2);
        let b = Rect::new(1.0, 2.0, 5.0, 9.0);
        let r = QueryRegion {
            roi_feature: unit(2, 1),
            proposal_box: Some(b),
            gt_class: Some(RegionLabel::Class(0)),
            gt_box: Some(b),
            background_row: None,
        };
        assert_eq!(localization_loss(std::slice::from_ref(&r), &p, &head(2, 1, 0.1)).unwrap(), 0.0);

        let mut degenerate = r.clone();
        degenerate.gt_box = Some(Rect::new(1.0, 2.0, 1.0, 9.0));
        assert!(matches!(
            localization_loss(&[degenerate], &p, &head(2, 1, 0.1)),
            Err(Error::Contract(_))
        ));

        let mut bg = r;
        bg.gt_class = Some(RegionLabel::Background);
        assert_eq!(localization_loss(&[bg], &p, &head(2, 1, 0.1)).unwrap(), 0.0);
    }

    #[test]
    fn localization_pinned_fixture() {
        // Zero regressor, proposal (0,0,10,10), gt (2,0,12,20):
        // deltas (0.2, 0.5, 0, ln 2); smooth-L1 mean = (0.02 + 0.125 + 0 + 0.5 ln²2) / 4
        let p = protos(&[unit(2, 0)], &[], 2);
        let r = QueryRegion {
            roi_feature: unit(2, 1),
            proposal_box: Some(Rect::new(0.0, 0.0, 10.0, 10.0)),
            gt_class: Some(RegionLabel::Class(0)),
            gt_box: Some(Rect::new(2.0, 0.0, 12.0, 20.0)),
            background_row: None,
        };
        let ln2 = 2f64.ln();
        let expected = (0.5 * 0.04 + 0.5 * 0.25 + 0.5 * ln2 * ln2) / 4.0;
        let got = localization_loss(&[r], &p, &head(2, 1, 0.1)).unwrap();
        assert!((got - expected).abs() < 1e-15, "{got} vs {expected}");
    }

    #[test]
    fn total_loss_sums() {
        let tape = Tape::new();
        let a = tape.constant(Tensor::scalar(1.0)).unwrap();
        let b = tape.constant(Tensor::scalar(2.0)).unwrap();
        let c = tape.constant(Tensor::scalar(0.5)).unwrap();
        assert_eq!(tape.scalar_value(total_loss(&tape, a, b, Some(c)).unwrap()), 3.5);
        assert_eq!(tape.scalar_value(total_loss(&tape, a, b, None).unwrap()), 3.0);
        let z = tape.constant(Tensor::scalar(0.0)).unwrap();
        assert_eq!(tape.scalar_value(total_loss(&tape, z, z, Some(z)).unwrap()), 0.0);
    }
}
