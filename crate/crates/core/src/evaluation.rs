//! COCO-style detection and instance-segmentation evaluation.
//!
//! Greedy score-ordered matching, cumulative precision/recall with a monotone precision
//! envelope, 101-point interpolated AP, averaged over IoU thresholds 0.50:0.05:0.95 and
//! unweighted over classes. Group APs restrict the class mean to rare / common / frequent.
//! Annotation is assumed exhaustive.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mask::RleMask;
use crate::nms::{iou, BBox};
use crate::taxonomy::{CategorySet, Group};

pub const DEFAULT_MAX_DETS: usize = 300;
pub const RECALL_POINTS: usize = 101;

/// IoU thresholds 0.50, 0.55, ..., 0.95.
pub fn iou_thresholds() -> [f64; 10] {
    std::array::from_fn(|i| (50 + 5 * i) as f64 / 100.0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub image_id: String,
    #[serde(rename = "box")]
    pub bbox: BBox,
    pub class_id: usize,
    pub score: f64,
    #[serde(default)]
    pub mask_rle: Option<RleMask>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub image_id: String,
    #[serde(rename = "box")]
    pub bbox: BBox,
    pub class_id: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mask_rle: Option<RleMask>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum IouKind {
    Box,
    Mask,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EvalParams {
    pub iou_kind: IouKind,
    /// Per image, across classes.
    pub max_dets: usize,
}

impl Default for EvalParams {
    fn default() -> Self {
        EvalParams { iou_kind: IouKind::Box, max_dets: DEFAULT_MAX_DETS }
    }
}

/// Greedy matching over an IoU matrix `ious[det][gt]` with detections already in descending
/// score order. Each detection takes the unmatched gt of highest IoU `>= iou_thr` (lowest
/// index on ties).
pub fn match_greedy(ious: &[Vec<f64>], n_gt: usize, iou_thr: f64) -> Vec<Option<usize>> {
    let mut taken = vec![false; n_gt];
    ious.iter()
        .map(|row| {
            let mut best: Option<(usize, f64)> = None;
            for (g, &o) in row.iter().enumerate() {
                if taken[g] || o < iou_thr {
                    continue;
                }
                if best.is_none_or(|(_, b)| o > b) {
                    best = Some((g, o));
                }
            }
            best.map(|(g, _)| {
                taken[g] = true;
                g
            })
        })
        .collect()
}

fn pair_iou(d: &Detection, g: &GroundTruth, kind: IouKind) -> Result<f64> {
    match kind {
        IouKind::Box => Ok(iou(&d.bbox, &g.bbox)),
        IouKind::Mask => match (&d.mask_rle, &g.mask_rle) {
            (Some(a), Some(b)) => a.iou(b),
            _ => Err(Error::invalid(format!(
                "mask IoU requested but image `{}` class {} lacks a mask",
                d.image_id, d.class_id
            ))),
        },
    }
}

/// Matches one image's detections of one class (sorted by descending score) to its gts.
pub fn match_detections(
    dets: &[Detection],
    gts: &[GroundTruth],
    iou_thr: f64,
    kind: IouKind,
) -> Result<Vec<Option<usize>>> {
    let ious = dets
        .iter()
        .map(|d| gts.iter().map(|g| pair_iou(d, g, kind)).collect::<Result<Vec<_>>>())
        .collect::<Result<Vec<_>>>()?;
    Ok(match_greedy(&ious, gts.len(), iou_thr))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PrPoint {
    pub recall: f64,
    pub precision: f64,
}

/// Precision/recall sweep over `(score, is_true_positive)` pairs, visited by descending score
/// (stable). Precision is replaced by its right-to-left running max. `None` when `n_gt == 0`.
pub fn pr_curve(matches: &[(f64, bool)], n_gt: usize) -> Option<Vec<PrPoint>> {
    if n_gt == 0 {
        return None;
    }
    let mut order: Vec<usize> = (0..matches.len()).collect();
    order.sort_by(|&a, &b| matches[b].0.total_cmp(&matches[a].0));
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut curve: Vec<PrPoint> = order
        .iter()
        .map(|&i| {
            if matches[i].1 {
                tp += 1;
            } else {
                fp += 1;
            }
            PrPoint {
                recall: tp as f64 / n_gt as f64,
                precision: tp as f64 / (tp + fp) as f64,
            }
        })
        .collect();
    for i in (0..curve.len().saturating_sub(1)).rev() {
        if curve[i + 1].precision > curve[i].precision {
            curve[i].precision = curve[i + 1].precision;
        }
    }
    Some(curve)
}

/// 101-point interpolated AP: mean over recall levels `0.00..=1.00` of the precision at the
/// first curve point reaching that recall (0 when unreached).
pub fn average_precision(curve: &[PrPoint]) -> f64 {
    let mut sum = 0.0;
    let mut idx = 0;
    for r in 0..RECALL_POINTS {
        let level = r as f64 / (RECALL_POINTS - 1) as f64;
        while idx < curve.len() && curve[idx].recall < level {
            idx += 1;
        }
        if idx == curve.len() {
            break;
        }
        sum += curve[idx].precision;
    }
    sum / RECALL_POINTS as f64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassAp {
    pub class_id: usize,
    pub group: Group,
    pub n_gt: usize,
    pub ap: f64,
    pub ap50: f64,
    pub ap75: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrCurve {
    pub class_id: usize,
    pub iou_threshold: f64,
    pub points: Vec<PrPoint>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub iou_type: IouKind,
    pub ap: f64,
    pub ap50: f64,
    pub ap75: f64,
    /// `None` when the group has no class with ground truth.
    pub ap_r: Option<f64>,
    pub ap_c: Option<f64>,
    pub ap_f: Option<f64>,
    pub n_detections: usize,
    pub per_class: Vec<ClassAp>,
    pub pr_curves: Vec<PrCurve>,
}

impl EvalReport {
    pub fn per_class_csv(&self, categories: &CategorySet) -> String {
        let mut out = String::from("class_id,name,group,n_gt,ap,ap50,ap75\n");
        for c in &self.per_class {
            let name = categories.get(c.class_id).map_or("", |x| x.name.as_str());
            out.push_str(&format!(
                "{},{},{},{},{},{},{}\n",
                c.class_id, name, c.group, c.n_gt, c.ap, c.ap50, c.ap75
            ));
        }
        out
    }
}

fn mean(values: impl Iterator<Item = f64>) -> Option<f64> {
    let (sum, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    (n > 0).then(|| sum / n as f64)
}

/// Keeps the `max_dets` highest-scoring detections of each image (ties in input order).
fn cap_per_image(dets: &[Detection], max_dets: usize) -> Vec<&Detection> {
    let mut by_image: BTreeMap<&str, Vec<&Detection>> = BTreeMap::new();
    for d in dets {
        by_image.entry(d.image_id.as_str()).or_default().push(d);
    }
    by_image
        .into_values()
        .flat_map(|mut v| {
            v.sort_by(|a, b| b.score.total_cmp(&a.score));
            v.truncate(max_dets);
            v
        })
        .collect()
}

pub fn evaluate(
    dets: &[Detection],
    gts: &[GroundTruth],
    categories: &CategorySet,
    params: &EvalParams,
) -> Result<EvalReport> {
    if gts.is_empty() {
        return Err(Error::invalid("no ground truth to evaluate against"));
    }
    let n = categories.len();
    for c in dets.iter().map(|d| d.class_id).chain(gts.iter().map(|g| g.class_id)) {
        if c >= n {
            return Err(Error::ClassOutOfRange { class_id: c, n });
        }
    }
    if let Some(d) = dets.iter().find(|d| !d.score.is_finite()) {
        return Err(Error::invalid(format!("non-finite detection score in image `{}`", d.image_id)));
    }

    // (class, image) -> (detections sorted by score, gts)
    type Cell<'a> = (Vec<&'a Detection>, Vec<&'a GroundTruth>);
    let mut cells: BTreeMap<(usize, &str), Cell> = BTreeMap::new();
    let kept = cap_per_image(dets, params.max_dets);
    for d in &kept {
        cells.entry((d.class_id, d.image_id.as_str())).or_default().0.push(d);
    }
    for g in gts {
        cells.entry((g.class_id, g.image_id.as_str())).or_default().1.push(g);
    }
    let mut n_gt = vec![0usize; n];
    for g in gts {
        n_gt[g.class_id] += 1;
    }

    let thresholds = iou_thresholds();
    let mut per_class_matches: BTreeMap<usize, Vec<Vec<(f64, bool)>>> = BTreeMap::new();
    for ((class, _), (cell_dets, cell_gts)) in &mut cells {
        if n_gt[*class] == 0 {
            continue;
        }
        cell_dets.sort_by(|a, b| b.score.total_cmp(&a.score));
        let ious = cell_dets
            .iter()
            .map(|d| {
                cell_gts
                    .iter()
                    .map(|g| pair_iou(d, g, params.iou_kind))
                    .collect::<Result<Vec<_>>>()
            })
            .collect::<Result<Vec<_>>>()?;
        let entry = per_class_matches
            .entry(*class)
            .or_insert_with(|| vec![Vec::new(); thresholds.len()]);
        for (t, &thr) in thresholds.iter().enumerate() {
            let m = match_greedy(&ious, cell_gts.len(), thr);
            entry[t].extend(cell_dets.iter().zip(m).map(|(d, g)| (d.score, g.is_some())));
        }
    }

    let mut per_class = Vec::new();
    let mut pr_curves = Vec::new();
    for (class, &count) in n_gt.iter().enumerate() {
        if count == 0 {
            continue;
        }
        let matches = per_class_matches.remove(&class).unwrap_or_else(|| vec![Vec::new(); thresholds.len()]);
        let mut aps = [0.0; 10];
        for (t, m) in matches.iter().enumerate() {
            let curve = pr_curve(m, count).unwrap_or_default();
            aps[t] = average_precision(&curve);
            pr_curves.push(PrCurve { class_id: class, iou_threshold: thresholds[t], points: curve });
        }
        per_class.push(ClassAp {
            class_id: class,
            group: categories.group_of(class).expect("class id checked against N"),
            n_gt: count,
            ap: aps.iter().sum::<f64>() / aps.len() as f64,
            ap50: aps[0],
            ap75: aps[5],
        });
    }

    let group_ap = |g: Group| mean(per_class.iter().filter(|c| c.group == g).map(|c| c.ap));
    Ok(EvalReport {
        iou_type: params.iou_kind,
        ap: mean(per_class.iter().map(|c| c.ap)).unwrap_or(0.0),
        ap50: mean(per_class.iter().map(|c| c.ap50)).unwrap_or(0.0),
        ap75: mean(per_class.iter().map(|c| c.ap75)).unwrap_or(0.0),
        ap_r: group_ap(Group::Rare),
        ap_c: group_ap(Group::Common),
        ap_f: group_ap(Group::Frequent),
        n_detections: kept.len(),
        per_class,
        pr_curves,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::taxonomy::CategoryRecord;

    fn bx(x1: f64, y1: f64, x2: f64, y2: f64) -> BBox {
        BBox::new(x1, y1, x2, y2).unwrap()
    }

    fn det(img: &str, b: BBox, class_id: usize, score: f64) -> Detection {
        Detection { image_id: img.into(), bbox: b, class_id, score, mask_rle: None }
    }

    fn gt(img: &str, b: BBox, class_id: usize) -> GroundTruth {
        GroundTruth { image_id: img.into(), bbox: b, class_id, mask_rle: None }
    }

    fn cats(cfs: &[u64]) -> CategorySet {
        CategorySet::from_records(
            cfs.iter()
                .enumerate()
                .map(|(id, &cf)| CategoryRecord { id, name: format!("c{id}"), cf, group: None })
                .collect(),
            false,
        )
        .unwrap()
    }

    #[test]
    fn thresholds_are_exact() {
        let t = iou_thresholds();
        assert_eq!(t[0], 0.5);
        assert_eq!(t[5], 0.75);
        assert_eq!(t[9], 0.95);
    }

    #[test]
    fn matching_basics() {
        let g = [gt("a", bx(0.0, 0.0, 10.0, 10.0), 0)];
        let d = [det("a", bx(0.0, 0.0, 10.0, 10.0), 0, 0.9)];
        assert_eq!(match_detections(&d, &g, 0.5, IouKind::Box).unwrap(), vec![Some(0)]);

        let d = [det("a", bx(0.0, 0.0, 10.0, 10.0), 0, 0.9), det("a", bx(0.0, 0.0, 10.0, 9.0), 0, 0.8)];
        assert_eq!(match_detections(&d, &g, 0.5, IouKind::Box).unwrap(), vec![Some(0), None]);
    }

    #[test]
    fn three_dets_two_gts() {
        // gt0 = [0,0,10,10], gt1 = [6,0,16,10].
        // d0 (0.9) = [3,0,13,10]: IoU 7/13 with gt0, 7/13 with gt1 -> tie, takes gt0.
        // d1 (0.8) = [0,0,10,10]: gt0 taken; IoU with gt1 = 4/16 < 0.5 -> FP.
        // d2 (0.7) = [6,0,16,10]: takes gt1.
        let g = [gt("a", bx(0.0, 0.0, 10.0, 10.0), 0), gt("a", bx(6.0, 0.0, 16.0, 10.0), 0)];
        let d = [
            det("a", bx(3.0, 0.0, 13.0, 10.0), 0, 0.9),
            det("a", bx(0.0, 0.0, 10.0, 10.0), 0, 0.8),
            det("a", bx(6.0, 0.0, 16.0, 10.0), 0, 0.7),
        ];
        assert_eq!(match_detections(&d, &g, 0.5, IouKind::Box).unwrap(), vec![Some(0), None, Some(1)]);
    }

    #[test]
    fn pr_curve_cases() {
        let c = pr_curve(&[(0.9, true), (0.8, true)], 2).unwrap();
        assert_eq!(c.last().unwrap(), &PrPoint { recall: 1.0, precision: 1.0 });
        assert_eq!(average_precision(&c), 1.0);

        assert!(pr_curve(&[], 3).unwrap().is_empty());
        assert_eq!(average_precision(&[]), 0.0);
        assert!(pr_curve(&[(0.5, true)], 0).is_none());

        // TP, FP, TP with 2 gts: raw precision 1, 1/2, 2/3 -> envelope 1, 2/3, 2/3.
        let c = pr_curve(&[(0.9, true), (0.8, false), (0.7, true)], 2).unwrap();
        let p: Vec<f64> = c.iter().map(|x| x.precision).collect();
        assert_eq!(p, vec![1.0, 2.0 / 3.0, 2.0 / 3.0]);
        // 51 levels (0..=0.5) at precision 1, 50 levels at 2/3.
        let expected = (51.0 + 50.0 * 2.0 / 3.0) / 101.0;
        assert!((average_precision(&c) - expected).abs() < 1e-15);
    }

    #[test]
    fn single_tp_half_recall() {
        let c = pr_curve(&[(0.9, true)], 2).unwrap();
        assert!((average_precision(&c) - 51.0 / 101.0).abs() < 1e-15);
    }

    #[test]
    fn perfect_detections() {
        let g = vec![gt("a", bx(0.0, 0.0, 10.0, 10.0), 0), gt("b", bx(5.0, 5.0, 20.0, 20.0), 1)];
        let d: Vec<Detection> = g.iter().map(|g| det(&g.image_id, g.bbox, g.class_id, 0.9)).collect();
        let r = evaluate(&d, &g, &cats(&[5, 500]), &EvalParams::default()).unwrap();
        assert_eq!((r.ap, r.ap50, r.ap75), (1.0, 1.0, 1.0));
        assert_eq!(r.ap_r, Some(1.0));
        assert_eq!(r.ap_f, Some(1.0));
        assert_eq!(r.ap_c, None);
    }

    #[test]
    fn group_restriction() {
        let g = vec![gt("a", bx(0.0, 0.0, 10.0, 10.0), 0), gt("a", bx(50.0, 50.0, 60.0, 60.0), 1)];
        let d = vec![det("a", bx(0.0, 0.0, 10.0, 10.0), 0, 0.9)];
        let r = evaluate(&d, &g, &cats(&[5, 500]), &EvalParams::default()).unwrap();
        assert_eq!(r.ap_r, Some(1.0));
        assert_eq!(r.ap_f, Some(0.0));
        assert_eq!(r.ap, 0.5);
    }

    #[test]
    fn errors_and_empty_detections() {
        assert!(evaluate(&[], &[], &cats(&[5]), &EvalParams::default()).is_err());
        let g = vec![gt("a", bx(0.0, 0.0, 1.0, 1.0), 0)];
        let r = evaluate(&[], &g, &cats(&[5]), &EvalParams::default()).unwrap();
        assert_eq!(r.ap, 0.0);
        let bad = vec![gt("a", bx(0.0, 0.0, 1.0, 1.0), 3)];
        assert!(evaluate(&[], &bad, &cats(&[5]), &EvalParams::default()).is_err());
        let masks = EvalParams { iou_kind: IouKind::Mask, ..Default::default() };
        let d = vec![det("a", bx(0.0, 0.0, 1.0, 1.0), 0, 0.5)];
        assert!(evaluate(&d, &g, &cats(&[5]), &masks).is_err());
    }

    #[test]
    fn max_dets_cap() {
        let g = vec![gt("a", bx(0.0, 0.0, 10.0, 10.0), 0)];
        let d = vec![det("a", bx(50.0, 50.0, 60.0, 60.0), 0, 0.9), det("a", bx(0.0, 0.0, 10.0, 10.0), 0, 0.5)];
        let p = EvalParams { max_dets: 1, ..Default::default() };
        assert_eq!(evaluate(&d, &g, &cats(&[5]), &p).unwrap().ap, 0.0);
        assert!(evaluate(&d, &g, &cats(&[5]), &EvalParams::default()).unwrap().ap > 0.0);
    }

    #[test]
    fn mask_iou_evaluation() {
        let m = RleMask::from_bits(2, 2, &[true, true, false, false]).unwrap();
        let other = RleMask::from_bits(2, 2, &[false, false, true, true]).unwrap();
        let mut g = gt("a", bx(0.0, 0.0, 2.0, 2.0), 0);
        g.mask_rle = Some(m.clone());
        let mut hit = det("a", bx(0.0, 0.0, 2.0, 2.0), 0, 0.9);
        hit.mask_rle = Some(m);
        let mut miss = hit.clone();
        miss.mask_rle = Some(other);
        let p = EvalParams { iou_kind: IouKind::Mask, ..Default::default() };
        let cs = cats(&[5]);
        assert_eq!(evaluate(&[hit], std::slice::from_ref(&g), &cs, &p).unwrap().ap, 1.0);
        assert_eq!(evaluate(&[miss.clone()], std::slice::from_ref(&g), &cs, &p).unwrap().ap, 0.0);
        // Same boxes, so box AP is perfect.
        assert_eq!(evaluate(&[miss], &[g], &cs, &EvalParams::default()).unwrap().ap, 1.0);
    }
}
