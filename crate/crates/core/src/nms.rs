//! Class-aware NMS resampling.
//!
//! Each foreground class gets its own suppression threshold derived from its frequency group
//! (discrete scheme) or from its frequency position inside the group (linear scheme). Tail
//! classes get higher thresholds, so more of their overlapping proposals survive.

use serde::de::Error as _;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};
use crate::taxonomy::{CategorySet, Group, GroupStats};

/// Threshold used for background proposals.
pub const BACKGROUND_NMS_THRESHOLD: f64 = 0.7;
/// Minimum IoU for a proposal to take a ground-truth class.
pub const DEFAULT_FG_IOU: f64 = 0.5;

/// Axis-aligned box `[x1, y1, x2, y2]` in pixels; area is `(x2 - x1) * (y2 - y1)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BBox {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

impl BBox {
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Result<Self> {
        let b = BBox { x1, y1, x2, y2 };
        b.validate()?;
        Ok(b)
    }

    pub fn validate(&self) -> Result<()> {
        let finite = [self.x1, self.y1, self.x2, self.y2].iter().all(|v| v.is_finite());
        if !finite || self.x2 < self.x1 || self.y2 < self.y1 {
            return Err(Error::invalid(format!(
                "invalid box [{}, {}, {}, {}]",
                self.x1, self.y1, self.x2, self.y2
            )));
        }
        Ok(())
    }

    pub fn area(&self) -> f64 {
        (self.x2 - self.x1) * (self.y2 - self.y1)
    }

    pub fn to_array(self) -> [f64; 4] {
        [self.x1, self.y1, self.x2, self.y2]
    }
}

impl Serialize for BBox {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        self.to_array().serialize(s)
    }
}

impl<'de> Deserialize<'de> for BBox {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let [x1, y1, x2, y2] = <[f64; 4]>::deserialize(d)?;
        BBox::new(x1, y1, x2, y2).map_err(D::Error::custom)
    }
}

/// Intersection over union; zero when the union is empty.
pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let w = (a.x2.min(b.x2) - a.x1.max(b.x1)).max(0.0);
    let h = (a.y2.min(b.y2) - a.y1.max(b.y1)).max(0.0);
    let inter = w * h;
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// Class label of a proposal; `None` is background (`-1` on the wire).
pub type ClassLabel = Option<usize>;

pub(crate) mod class_label_serde {
    use super::*;

    pub fn serialize<S: Serializer>(label: &ClassLabel, s: S) -> std::result::Result<S::Ok, S::Error> {
        match label {
            Some(c) => s.serialize_i64(*c as i64),
            None => s.serialize_i64(-1),
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<ClassLabel, D::Error> {
        match i64::deserialize(d)? {
            -1 => Ok(None),
            c if c >= 0 => Ok(Some(c as usize)),
            c => Err(D::Error::custom(format!("class_id {c} is neither a class nor -1"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Proposal {
    #[serde(rename = "box")]
    pub bbox: BBox,
    pub score: f64,
    #[serde(with = "class_label_serde")]
    pub class_id: ClassLabel,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scheme {
    Discrete,
    Linear,
    Fixed,
}

impl std::str::FromStr for Scheme {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "discrete" => Ok(Scheme::Discrete),
            "linear" => Ok(Scheme::Linear),
            "fixed" => Ok(Scheme::Fixed),
            _ => Err(Error::invalid(format!("unknown NMS scheme `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ResamplingConfig {
    pub scheme: Scheme,
    pub alpha_f: f64,
    pub alpha_c: f64,
    pub alpha_r: f64,
    /// Length of each group's threshold interval (linear scheme).
    pub beta: f64,
    pub background_threshold: f64,
    /// Single threshold for every class (fixed scheme).
    pub fixed_threshold: f64,
    /// Use the linear formula with its printed base assignment (frequent -> `alpha_r`,
    /// rare -> `alpha_f`) instead of the frequency-inverse one.
    pub as_printed: bool,
}

impl Default for ResamplingConfig {
    fn default() -> Self {
        Self::discrete_default()
    }
}

impl ResamplingConfig {
    pub fn discrete_default() -> Self {
        ResamplingConfig {
            scheme: Scheme::Discrete,
            alpha_f: 0.7,
            alpha_c: 0.8,
            alpha_r: 0.9,
            beta: 0.1,
            background_threshold: BACKGROUND_NMS_THRESHOLD,
            fixed_threshold: BACKGROUND_NMS_THRESHOLD,
            as_printed: false,
        }
    }

    pub fn linear_default() -> Self {
        ResamplingConfig {
            scheme: Scheme::Linear,
            alpha_f: 0.65,
            alpha_c: 0.75,
            alpha_r: 0.85,
            beta: 0.1,
            ..Self::discrete_default()
        }
    }

    pub fn fixed(threshold: f64) -> Self {
        ResamplingConfig {
            scheme: Scheme::Fixed,
            fixed_threshold: threshold,
            ..Self::discrete_default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let unit = |name: &str, v: f64| {
            if v > 0.0 && v < 1.0 {
                Ok(())
            } else {
                Err(Error::invalid(format!("{name}={v} must lie in (0, 1)")))
            }
        };
        match self.scheme {
            Scheme::Fixed => unit("fixed_threshold", self.fixed_threshold)?,
            Scheme::Discrete | Scheme::Linear => {
                unit("alpha_f", self.alpha_f)?;
                unit("alpha_c", self.alpha_c)?;
                unit("alpha_r", self.alpha_r)?;
                if !(self.alpha_f < self.alpha_c && self.alpha_c < self.alpha_r) {
                    return Err(Error::invalid(format!(
                        "thresholds must satisfy alpha_f < alpha_c < alpha_r, got {} / {} / {}",
                        self.alpha_f, self.alpha_c, self.alpha_r
                    )));
                }
            }
        }
        if self.scheme == Scheme::Linear {
            if self.beta.is_nan() || self.beta < 0.0 {
                return Err(Error::invalid(format!("beta={} must be non-negative", self.beta)));
            }
            let top = self.alpha_r.max(self.alpha_f) + self.beta;
            if top > 1.0 {
                return Err(Error::invalid(format!("largest linear threshold {top} exceeds 1")));
            }
        }
        if !(self.background_threshold > 0.0 && self.background_threshold <= 1.0) {
            return Err(Error::invalid("background_threshold must lie in (0, 1]"));
        }
        Ok(())
    }

    fn base(&self, group: Group) -> f64 {
        match (group, self.as_printed) {
            (Group::Frequent, false) | (Group::Rare, true) => self.alpha_f,
            (Group::Common, _) => self.alpha_c,
            (Group::Rare, false) | (Group::Frequent, true) => self.alpha_r,
        }
    }
}

pub fn threshold_discrete(group: Group, cfg: &ResamplingConfig) -> f64 {
    match group {
        Group::Frequent => cfg.alpha_f,
        Group::Common => cfg.alpha_c,
        Group::Rare => cfg.alpha_r,
    }
}

/// `base(group) + beta * (cf_max - cf) / (cf_max - cf_min)`, with the fraction taken as 0 for
/// a single-frequency group.
pub fn threshold_linear(cf: u64, group: Group, stats: &GroupStats, cfg: &ResamplingConfig) -> Result<f64> {
    let range = stats
        .get(group)
        .ok_or_else(|| Error::invalid(format!("no frequency range for empty group `{group}`")))?;
    if cf < range.min || cf > range.max {
        return Err(Error::invalid(format!(
            "cf={cf} outside the `{group}` range [{}, {}]",
            range.min, range.max
        )));
    }
    let fraction = if range.max == range.min {
        0.0
    } else {
        (range.max - cf) as f64 / (range.max - range.min) as f64
    };
    Ok(cfg.base(group) + cfg.beta * fraction)
}

/// Per-class thresholds for every category, indexed by class id.
pub fn class_thresholds(categories: &CategorySet, cfg: &ResamplingConfig) -> Result<Vec<f64>> {
    cfg.validate()?;
    let stats = categories.group_stats();
    categories
        .iter()
        .map(|c| match cfg.scheme {
            Scheme::Fixed => Ok(cfg.fixed_threshold),
            Scheme::Discrete => Ok(threshold_discrete(c.group, cfg)),
            Scheme::Linear => threshold_linear(c.cf, c.group, &stats, cfg),
        })
        .collect()
}

/// Labels raw boxes with the class of their best-overlapping ground truth when that IoU
/// reaches `fg_iou`; otherwise background. IoU ties go to the lower gt index.
pub fn match_proposals_to_gt(raw: &[(BBox, f64)], gts: &[(BBox, usize)], fg_iou: f64) -> Vec<Proposal> {
    raw.iter()
        .map(|&(bbox, score)| {
            let mut best: Option<(f64, usize)> = None;
            for &(g, class) in gts {
                let o = iou(&bbox, &g);
                if best.is_none_or(|(b, _)| o > b) {
                    best = Some((o, class));
                }
            }
            let class_id = best.filter(|&(o, _)| o >= fg_iou).map(|(_, c)| c);
            Proposal { bbox, score, class_id }
        })
        .collect()
}

/// Greedy class-aware NMS. Returns indices into `proposals` in keep order.
///
/// Proposals are visited by descending score (ties in input order). A kept proposal suppresses
/// every later one whose IoU with it exceeds the kept proposal's own threshold:
/// `thresholds[class]` for foreground, `background_threshold` for background.
pub fn class_aware_nms_indices(
    proposals: &[Proposal],
    thresholds: &[f64],
    background_threshold: f64,
) -> Result<Vec<usize>> {
    let thr = proposals
        .iter()
        .map(|p| match p.class_id {
            None => Ok(background_threshold),
            Some(c) => thresholds.get(c).copied().ok_or(Error::MissingThreshold(c)),
        })
        .collect::<Result<Vec<_>>>()?;
    if let Some(p) = proposals.iter().find(|p| !p.score.is_finite()) {
        return Err(Error::invalid(format!("non-finite proposal score {}", p.score)));
    }

    let mut order: Vec<usize> = (0..proposals.len()).collect();
    order.sort_by(|&a, &b| proposals[b].score.total_cmp(&proposals[a].score));
    let areas: Vec<f64> = proposals.iter().map(|p| p.bbox.area()).collect();

    let mut suppressed = vec![false; proposals.len()];
    let mut keep = Vec::new();
    for (pos, &i) in order.iter().enumerate() {
        if suppressed[i] {
            continue;
        }
        keep.push(i);
        let a = &proposals[i].bbox;
        for &j in &order[pos + 1..] {
            if suppressed[j] {
                continue;
            }
            let b = &proposals[j].bbox;
            let w = (a.x2.min(b.x2) - a.x1.max(b.x1)).max(0.0);
            let h = (a.y2.min(b.y2) - a.y1.max(b.y1)).max(0.0);
            let inter = w * h;
            let union = areas[i] + areas[j] - inter;
            let o = if union <= 0.0 { 0.0 } else { inter / union };
            if o > thr[i] {
                suppressed[j] = true;
            }
        }
    }
    Ok(keep)
}

pub fn class_aware_nms(
    proposals: &[Proposal],
    thresholds: &[f64],
    background_threshold: f64,
) -> Result<Vec<Proposal>> {
    Ok(class_aware_nms_indices(proposals, thresholds, background_threshold)?
        .into_iter()
        .map(|i| proposals[i].clone())
        .collect())
}
