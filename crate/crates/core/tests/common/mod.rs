//! Independent reference implementations used as test oracles. None of these call into the
//! library's numerical code; they restate each definition in the most direct form.

#![allow(dead_code)]

use forest_core::evaluation::{Detection, GroundTruth};
use forest_core::nms::{BBox, Proposal};
use forest_core::taxonomy::{Category, CategorySet, Group};

pub fn naive_softmax(z: &[f64]) -> Vec<f64> {
    let e: Vec<f64> = z.iter().map(|v| v.exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|v| v / s).collect()
}

/// Tree-calibrated scores computed in the linear domain: `p_i * q_parent(i)`, renormalised.
pub fn linear_tree_scores(z: &[f64], zu: &[f64], leaf_parent: &[usize]) -> Vec<f64> {
    let p = naive_softmax(z);
    let q = naive_softmax(zu);
    let w: Vec<f64> = p.iter().zip(leaf_parent).map(|(pi, &u)| pi * q[u]).collect();
    let s: f64 = w.iter().sum();
    w.iter().map(|v| v / s).collect()
}

/// Forest scores in the linear domain: `p_i` times the mean over trees of the parent
/// probability, renormalised.
pub fn linear_forest_scores(z: &[f64], trees: &[(Vec<f64>, Vec<usize>)]) -> Vec<f64> {
    let p = naive_softmax(z);
    let qs: Vec<Vec<f64>> = trees.iter().map(|(zu, _)| naive_softmax(zu)).collect();
    let w: Vec<f64> = (0..z.len())
        .map(|i| {
            let m: f64 = trees.iter().zip(&qs).map(|((_, lp), q)| q[lp[i]]).sum::<f64>() / trees.len() as f64;
            p[i] * m
        })
        .collect();
    let s: f64 = w.iter().sum();
    w.iter().map(|v| v / s).collect()
}

pub fn box_iou(a: &BBox, b: &BBox) -> f64 {
    let ix = (a.x2.min(b.x2) - a.x1.max(b.x1)).max(0.0);
    let iy = (a.y2.min(b.y2) - a.y1.max(b.y1)).max(0.0);
    let inter = ix * iy;
    let union = (a.x2 - a.x1) * (a.y2 - a.y1) + (b.x2 - b.x1) * (b.y2 - b.y1) - inter;
    if union > 0.0 {
        inter / union
    } else {
        0.0
    }
}

/// Quadratic reference NMS: repeatedly take the best remaining proposal (highest score, then
/// lowest index), keep it, and drop every remaining proposal overlapping it by more than the
/// kept proposal's threshold.
pub fn reference_nms(props: &[Proposal], thresholds: &[f64], background: f64) -> Vec<usize> {
    let mut remaining: Vec<usize> = (0..props.len()).collect();
    let mut keep = Vec::new();
    while !remaining.is_empty() {
        let mut best = remaining[0];
        for &i in &remaining {
            if props[i].score > props[best].score || (props[i].score == props[best].score && i < best) {
                best = i;
            }
        }
        keep.push(best);
        let thr = props[best].class_id.map_or(background, |c| thresholds[c]);
        remaining.retain(|&j| j != best && box_iou(&props[best].bbox, &props[j].bbox) <= thr);
    }
    keep
}

/// Textbook single-threshold NMS over boxes sorted by score.
pub fn standard_nms(props: &[Proposal], thr: f64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..props.len()).collect();
    order.sort_by(|&a, &b| props[b].score.partial_cmp(&props[a].score).unwrap().then(a.cmp(&b)));
    let mut keep: Vec<usize> = Vec::new();
    for i in order {
        if keep.iter().all(|&k| box_iou(&props[k].bbox, &props[i].bbox) <= thr) {
            keep.push(i);
        }
    }
    keep
}

/// Sum of squared distances to cluster means for a given partition.
pub fn partition_sse(points: &[Vec<f64>], labels: &[usize], k: usize) -> f64 {
    let dim = points[0].len();
    let mut total = 0.0;
    for c in 0..k {
        let members: Vec<&Vec<f64>> = points.iter().zip(labels).filter(|(_, &l)| l == c).map(|(p, _)| p).collect();
        if members.is_empty() {
            continue;
        }
        let mean: Vec<f64> = (0..dim).map(|d| members.iter().map(|p| p[d]).sum::<f64>() / members.len() as f64).collect();
        total += members.iter().map(|p| p.iter().zip(&mean).map(|(a, b)| (a - b) * (a - b)).sum::<f64>()).sum::<f64>();
    }
    total
}

/// Minimum SSE over every split of `points` into two non-empty clusters.
pub fn best_two_partition(points: &[Vec<f64>]) -> f64 {
    let n = points.len();
    let mut best = f64::INFINITY;
    for mask in 1u64..(1u64 << (n - 1)) {
        let labels: Vec<usize> = (0..n).map(|i| ((mask >> i) & 1) as usize).collect();
        best = best.min(partition_sse(points, &labels, 2));
    }
    best
}

/// Brute-force COCO-style evaluator: per class and IoU threshold, match each image's
/// detections by descending score to the unmatched gt of highest IoU (lowest index on ties),
/// then average, over recall levels r = 0, 0.01, ..., 1, the largest precision attained at
/// any rank whose recall is at least r.
pub struct MicroReport {
    pub ap: f64,
    pub ap50: f64,
    pub ap75: f64,
    pub ap_r: Option<f64>,
    pub ap_c: Option<f64>,
    pub ap_f: Option<f64>,
    pub per_class: Vec<(usize, f64)>,
}

pub fn micro_evaluate(dets: &[Detection], gts: &[GroundTruth], cats: &CategorySet) -> MicroReport {
    let thresholds = [0.50, 0.55, 0.60, 0.65, 0.70, 0.75, 0.80, 0.85, 0.90, 0.95];
    let mut per_class = Vec::new();
    let mut ap50s = Vec::new();
    let mut ap75s = Vec::new();
    for class in 0..cats.len() {
        let class_gts: Vec<&GroundTruth> = gts.iter().filter(|g| g.class_id == class).collect();
        if class_gts.is_empty() {
            continue;
        }
        let mut class_dets: Vec<&Detection> = dets.iter().filter(|d| d.class_id == class).collect();
        class_dets.sort_by(|a, b| b.score.partial_cmp(&a.score).unwrap());
        let mut aps = Vec::new();
        for &thr in &thresholds {
            let mut used = vec![false; class_gts.len()];
            let mut tps = Vec::new();
            for d in &class_dets {
                let mut best: Option<(usize, f64)> = None;
                for (j, g) in class_gts.iter().enumerate() {
                    if used[j] || g.image_id != d.image_id {
                        continue;
                    }
                    let o = box_iou(&d.bbox, &g.bbox);
                    if o >= thr && best.is_none_or(|(_, bo)| o > bo) {
                        best = Some((j, o));
                    }
                }
                if let Some((j, _)) = best {
                    used[j] = true;
                }
                tps.push(best.is_some());
            }
            let n_gt = class_gts.len() as f64;
            let ranks: Vec<(f64, f64)> = (0..tps.len())
                .map(|k| {
                    let tp = tps[..=k].iter().filter(|&&t| t).count() as f64;
                    (tp / n_gt, tp / (k + 1) as f64)
                })
                .collect();
            let mut sum = 0.0;
            for r in 0..=100 {
                let level = r as f64 / 100.0;
                sum += ranks.iter().filter(|(rec, _)| *rec >= level).map(|(_, p)| *p).fold(0.0, f64::max);
            }
            aps.push(sum / 101.0);
        }
        per_class.push((class, aps.iter().sum::<f64>() / 10.0));
        ap50s.push(aps[0]);
        ap75s.push(aps[5]);
    }
    let mean = |v: &[f64]| if v.is_empty() { 0.0 } else { v.iter().sum::<f64>() / v.len() as f64 };
    let group = |g: Group| {
        let v: Vec<f64> = per_class.iter().filter(|(c, _)| cats.group_of(*c) == Some(g)).map(|(_, a)| *a).collect();
        (!v.is_empty()).then(|| mean(&v))
    };
    MicroReport {
        ap: mean(&per_class.iter().map(|(_, a)| *a).collect::<Vec<_>>()),
        ap50: mean(&ap50s),
        ap75: mean(&ap75s),
        ap_r: group(Group::Rare),
        ap_c: group(Group::Common),
        ap_f: group(Group::Frequent),
        per_class,
    }
}

pub fn categories(cfs: &[u64]) -> CategorySet {
    CategorySet::new(
        cfs.iter()
            .enumerate()
            .map(|(i, &cf)| Category {
                id: i,
                name: format!("c{i}"),
                cf,
                group: forest_core::taxonomy::assign_group(cf).unwrap(),
            })
            .collect(),
    )
    .unwrap()
}
