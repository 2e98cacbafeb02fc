//! Classifier-output arithmetic: softmax scoring, the parent-probability product, tree
//! calibration of fine-grained logits, forest averaging, and path-score label inference.
//!
//! Everything is evaluated in the log domain. A leaf's calibrated value
//! `f'_i = exp(z_i) * p(u_parent(i))` is carried as `z_i + log p(u_parent(i))`, and the forest
//! value `f_i = mean_t f'^t_i` as a log-sum-exp over trees minus `log T`.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};
use crate::taxonomy::{ClassificationTree, Forest};

/// Lower bound applied to `log p` when parent probabilities are supplied directly.
pub const LOG_PROB_FLOOR: f64 = -745.0;

/// Tolerance on the sum of supplied parent probabilities.
pub const PROB_SUM_TOLERANCE: f64 = 1e-6;

/// One object's classifier outputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogitRecord {
    pub object_id: String,
    #[serde(default)]
    pub gt_class: Option<usize>,
    pub fine_logits: Vec<f64>,
    #[serde(default)]
    pub parent_logits: BTreeMap<String, Vec<f64>>,
    /// Pre-normalised parent probabilities, used for a tree only when its logits are absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub parent_probs: Option<BTreeMap<String, Vec<f64>>>,
}

impl LogitRecord {
    pub fn new(object_id: impl Into<String>, fine_logits: Vec<f64>) -> Self {
        LogitRecord {
            object_id: object_id.into(),
            gt_class: None,
            fine_logits,
            parent_logits: BTreeMap::new(),
            parent_probs: None,
        }
    }

    pub fn with_parent(mut self, tree_id: &str, logits: Vec<f64>) -> Self {
        self.parent_logits.insert(tree_id.to_string(), logits);
        self
    }

    pub fn with_gt(mut self, gt: usize) -> Self {
        self.gt_class = Some(gt);
        self
    }

    /// Checks finiteness, the fine-logit length against `n`, and the gt class range.
    pub fn validate(&self, n: usize) -> Result<()> {
        if self.fine_logits.len() != n {
            return Err(Error::invalid(format!(
                "object `{}`: {} fine logits, expected N={n}",
                self.object_id,
                self.fine_logits.len()
            )));
        }
        if self.fine_logits.iter().any(|z| !z.is_finite()) {
            return Err(Error::invalid(format!("object `{}`: non-finite fine logit", self.object_id)));
        }
        for (tree, z) in &self.parent_logits {
            if z.iter().any(|v| !v.is_finite()) {
                return Err(Error::invalid(format!(
                    "object `{}`: non-finite parent logit for tree `{tree}`",
                    self.object_id
                )));
            }
        }
        if let Some(gt) = self.gt_class {
            if gt >= n {
                return Err(Error::ClassOutOfRange { class_id: gt, n });
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum ScoreMode {
    Baseline,
    Preliminary(String),
    Tree(String),
    ForestScore,
    ForestVote,
}

impl fmt::Display for ScoreMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ScoreMode::Baseline => f.write_str("baseline"),
            ScoreMode::Preliminary(t) => write!(f, "preliminary:{t}"),
            ScoreMode::Tree(t) => write!(f, "tree:{t}"),
            ScoreMode::ForestScore => f.write_str("forest_score"),
            ScoreMode::ForestVote => f.write_str("forest_vote"),
        }
    }
}

impl FromStr for ScoreMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "baseline" => Ok(ScoreMode::Baseline),
            "forest" | "forest_score" => Ok(ScoreMode::ForestScore),
            "forest_vote" => Ok(ScoreMode::ForestVote),
            _ => match s.split_once(':') {
                Some(("tree", t)) if !t.is_empty() => Ok(ScoreMode::Tree(t.to_string())),
                Some(("preliminary", t)) if !t.is_empty() => Ok(ScoreMode::Preliminary(t.to_string())),
                _ => Err(Error::invalid(format!(
                    "unknown score mode `{s}` (expected baseline, preliminary:<tree>, tree:<tree>, forest_score, forest_vote)"
                ))),
            },
        }
    }
}

impl Serialize for ScoreMode {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for ScoreMode {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        String::deserialize(d)?.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreResult {
    pub mode: ScoreMode,
    pub label: usize,
    pub scores: Vec<f64>,
}

impl ScoreResult {
    /// Confidence of the predicted label.
    pub fn confidence(&self) -> f64 {
        self.scores[self.label]
    }
}

/// A path score `d = f_leaf * f_parent`, stored as its logarithm.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd)]
pub struct PathScore(pub f64);

impl PathScore {
    pub fn ln(self) -> f64 {
        self.0
    }

    pub fn value(self) -> f64 {
        self.0.exp()
    }
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

pub fn logsumexp(values: &[f64]) -> f64 {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + values.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

pub fn log_softmax(logits: &[f64]) -> Result<Vec<f64>> {
    if logits.is_empty() {
        return Err(Error::invalid("softmax of an empty vector"));
    }
    if logits.iter().any(|z| !z.is_finite()) {
        return Err(Error::invalid("softmax of non-finite logits"));
    }
    let lse = logsumexp(logits);
    Ok(logits.iter().map(|z| z - lse).collect())
}

pub fn softmax(logits: &[f64]) -> Result<Vec<f64>> {
    if logits.is_empty() {
        return Err(Error::invalid("softmax of an empty vector"));
    }
    if logits.iter().any(|z| !z.is_finite()) {
        return Err(Error::invalid("softmax of non-finite logits"));
    }
    Ok(normalize_log(logits))
}

/// `exp(v_i - max) / sum_a exp(v_a - max)` for log-values that may contain `-inf`.
fn normalize_log(log_values: &[f64]) -> Vec<f64> {
    let max = log_values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = log_values.iter().map(|v| (v - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

fn check_tree_shape(rec: &LogitRecord, tree: &ClassificationTree) -> Result<()> {
    if rec.fine_logits.len() != tree.num_leaves() {
        return Err(Error::invalid(format!(
            "object `{}`: {} fine logits but tree `{}` has {} leaves",
            rec.object_id,
            rec.fine_logits.len(),
            tree.tree_id,
            tree.num_leaves()
        )));
    }
    Ok(())
}

/// `log p(u_j)` for every parent of `tree`.
pub fn parent_log_probs(rec: &LogitRecord, tree: &ClassificationTree) -> Result<Vec<f64>> {
    if let Some(z) = rec.parent_logits.get(&tree.tree_id) {
        if z.len() != tree.num_parents {
            return Err(Error::invalid(format!(
                "object `{}`: {} parent logits for tree `{}`, expected M={}",
                rec.object_id,
                z.len(),
                tree.tree_id,
                tree.num_parents
            )));
        }
        return log_softmax(z);
    }
    let probs = rec
        .parent_probs
        .as_ref()
        .and_then(|p| p.get(&tree.tree_id))
        .ok_or_else(|| Error::MissingParentLogits(tree.tree_id.clone()))?;
    if probs.len() != tree.num_parents {
        return Err(Error::invalid(format!(
            "object `{}`: {} parent probabilities for tree `{}`, expected M={}",
            rec.object_id,
            probs.len(),
            tree.tree_id,
            tree.num_parents
        )));
    }
    if probs.iter().any(|p| !(0.0..=1.0).contains(p)) {
        return Err(Error::invalid(format!(
            "object `{}`: parent probabilities for tree `{}` outside [0, 1]",
            rec.object_id, tree.tree_id
        )));
    }
    let sum: f64 = probs.iter().sum();
    if (sum - 1.0).abs() > PROB_SUM_TOLERANCE {
        return Err(Error::invalid(format!(
            "object `{}`: parent probabilities for tree `{}` sum to {sum}",
            rec.object_id, tree.tree_id
        )));
    }
    Ok(probs.iter().map(|p| p.ln().max(LOG_PROB_FLOOR)).collect())
}

/// Raw parent logits `z_u`, or `log p(u)` when only probabilities were supplied (the two
/// differ by a per-record constant, which leaves every argmax unchanged).
fn parent_raw_logits(rec: &LogitRecord, tree: &ClassificationTree) -> Result<Vec<f64>> {
    match rec.parent_logits.get(&tree.tree_id) {
        Some(z) if z.len() == tree.num_parents => Ok(z.clone()),
        _ => parent_log_probs(rec, tree),
    }
}

/// Scores from the fine-grained classifier alone.
pub fn score_baseline(rec: &LogitRecord) -> Result<ScoreResult> {
    let scores = softmax(&rec.fine_logits)?;
    Ok(ScoreResult {
        mode: ScoreMode::Baseline,
        label: argmax(&rec.fine_logits),
        scores,
    })
}

/// `s_i = p(x_i) * p(u_parent(i))`; these scores do not sum to one.
pub fn score_preliminary(rec: &LogitRecord, tree: &ClassificationTree) -> Result<ScoreResult> {
    check_tree_shape(rec, tree)?;
    let fine = softmax(&rec.fine_logits)?;
    let parent: Vec<f64> = parent_log_probs(rec, tree)?.iter().map(|v| v.exp()).collect();
    let scores: Vec<f64> = fine
        .iter()
        .zip(&tree.leaf_parent)
        .map(|(p, &j)| p * parent[j])
        .collect();
    Ok(ScoreResult {
        mode: ScoreMode::Preliminary(tree.tree_id.clone()),
        label: argmax(&scores),
        scores,
    })
}

/// Calibrated leaf values `log f'_i = z_i + log p(u_parent(i))`.
pub fn calibrate_tree(rec: &LogitRecord, tree: &ClassificationTree) -> Result<Vec<f64>> {
    check_tree_shape(rec, tree)?;
    let log_parent = parent_log_probs(rec, tree)?;
    Ok(rec
        .fine_logits
        .iter()
        .zip(&tree.leaf_parent)
        .map(|(z, &j)| z + log_parent[j])
        .collect())
}

pub fn score_tree(rec: &LogitRecord, tree: &ClassificationTree) -> Result<ScoreResult> {
    let calibrated = calibrate_tree(rec, tree)?;
    Ok(ScoreResult {
        mode: ScoreMode::Tree(tree.tree_id.clone()),
        label: argmax(&calibrated),
        scores: normalize_log(&calibrated),
    })
}

/// Root-to-leaf path score `f_leaf * f_parent(leaf)`.
pub fn path_score(rec: &LogitRecord, tree: &ClassificationTree, leaf: usize) -> Result<PathScore> {
    check_tree_shape(rec, tree)?;
    let parent = tree.parent_of(leaf).ok_or(Error::ClassOutOfRange {
        class_id: leaf,
        n: tree.num_leaves(),
    })?;
    let z_parent = parent_raw_logits(rec, tree)?;
    Ok(PathScore(rec.fine_logits[leaf] + z_parent[parent]))
}

fn log_path_scores(rec: &LogitRecord, tree: &ClassificationTree) -> Result<Vec<f64>> {
    check_tree_shape(rec, tree)?;
    let z_parent = parent_raw_logits(rec, tree)?;
    Ok(rec
        .fine_logits
        .iter()
        .zip(&tree.leaf_parent)
        .map(|(z, &j)| z + z_parent[j])
        .collect())
}

/// Leaf with the largest root-to-leaf path score.
pub fn infer_label_tree(rec: &LogitRecord, tree: &ClassificationTree) -> Result<usize> {
    Ok(argmax(&log_path_scores(rec, tree)?))
}

/// Forest values `log f_i = logsumexp_t(log f'^t_i) - log T`.
pub fn forest_log_values(rec: &LogitRecord, forest: &Forest) -> Result<Vec<f64>> {
    let per_tree = forest
        .trees()
        .iter()
        .map(|t| calibrate_tree(rec, t))
        .collect::<Result<Vec<_>>>()?;
    let log_t = (forest.len() as f64).ln();
    let mut column = vec![0.0; per_tree.len()];
    Ok((0..rec.fine_logits.len())
        .map(|i| {
            for (c, tree_vals) in column.iter_mut().zip(&per_tree) {
                *c = tree_vals[i];
            }
            logsumexp(&column) - log_t
        })
        .collect())
}

pub fn score_forest(rec: &LogitRecord, forest: &Forest) -> Result<ScoreResult> {
    let values = forest_log_values(rec, forest)?;
    Ok(ScoreResult {
        mode: ScoreMode::ForestScore,
        label: argmax(&values),
        scores: normalize_log(&values),
    })
}

/// Leaf maximising the sum over trees of its path scores.
pub fn infer_label_forest_vote(rec: &LogitRecord, forest: &Forest) -> Result<usize> {
    let per_tree = forest
        .trees()
        .iter()
        .map(|t| log_path_scores(rec, t))
        .collect::<Result<Vec<_>>>()?;
    let mut column = vec![0.0; per_tree.len()];
    let sums: Vec<f64> = (0..rec.fine_logits.len())
        .map(|i| {
            for (c, tree_vals) in column.iter_mut().zip(&per_tree) {
                *c = tree_vals[i];
            }
            logsumexp(&column)
        })
        .collect();
    Ok(argmax(&sums))
}

/// Scores `rec` in any mode. `forest_vote` reports forest scores with the vote label.
pub fn score(rec: &LogitRecord, forest: Option<&Forest>, mode: &ScoreMode) -> Result<ScoreResult> {
    let need_forest = || forest.ok_or_else(|| Error::invalid(format!("mode `{mode}` needs trees")));
    let tree = |id: &str| {
        need_forest()?
            .tree(id)
            .ok_or_else(|| Error::invalid(format!("no tree with id `{id}` loaded")))
    };
    match mode {
        ScoreMode::Baseline => score_baseline(rec),
        ScoreMode::Preliminary(id) => score_preliminary(rec, tree(id)?),
        ScoreMode::Tree(id) => score_tree(rec, tree(id)?),
        ScoreMode::ForestScore => score_forest(rec, need_forest()?),
        ScoreMode::ForestVote => {
            let f = need_forest()?;
            let mut r = score_forest(rec, f)?;
            r.label = infer_label_forest_vote(rec, f)?;
            r.mode = ScoreMode::ForestVote;
            Ok(r)
        }
    }
}
