//! Noisy-logit statistics and confidence-score density histograms.
//!
//! A logit is noisy when its share of the total (`f_i / sum_a f_a`) falls below `1 - eps_gt`
//! for the ground-truth class, or rises above `eps_neg` for any other class.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scoring::{calibrate_tree, forest_log_values, LogitRecord, ScoreResult};
use crate::taxonomy::Forest;

pub const DEFAULT_EPS: f64 = 0.1;
pub const DEFAULT_BIN_COUNT: usize = 50;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NoisyLogitConfig {
    pub eps_gt: f64,
    pub eps_neg: f64,
}

impl Default for NoisyLogitConfig {
    fn default() -> Self {
        NoisyLogitConfig { eps_gt: DEFAULT_EPS, eps_neg: DEFAULT_EPS }
    }
}

impl NoisyLogitConfig {
    pub fn new(eps_gt: f64, eps_neg: f64) -> Result<Self> {
        let cfg = NoisyLogitConfig { eps_gt, eps_neg };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("eps_gt", self.eps_gt), ("eps_neg", self.eps_neg)] {
            if !(v > 0.0 && v < 1.0) {
                return Err(Error::invalid(format!("{name}={v} must lie strictly inside (0, 1)")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct NoisyCount {
    pub gt_noisy: bool,
    pub neg_noisy: usize,
}

impl NoisyCount {
    pub fn total(&self) -> usize {
        self.gt_noisy as usize + self.neg_noisy
    }
}

fn count_from_shares(shares: impl Iterator<Item = f64>, gt: usize, cfg: &NoisyLogitConfig) -> NoisyCount {
    let mut out = NoisyCount::default();
    for (i, share) in shares.enumerate() {
        if i == gt {
            out.gt_noisy = share < 1.0 - cfg.eps_gt;
        } else if share > cfg.eps_neg {
            out.neg_noisy += 1;
        }
    }
    out
}

/// Counts noisy logits among non-negative exponential values (`f`, `f'` or the forest average).
pub fn count_noisy_logits(values: &[f64], gt_class: usize, cfg: &NoisyLogitConfig) -> Result<NoisyCount> {
    if gt_class >= values.len() {
        return Err(Error::ClassOutOfRange { class_id: gt_class, n: values.len() });
    }
    if values.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
        return Err(Error::invalid("noisy-logit values must be finite and non-negative"));
    }
    let total: f64 = values.iter().sum();
    if total <= 0.0 {
        return Err(Error::invalid("noisy-logit values are all zero"));
    }
    Ok(count_from_shares(values.iter().map(|v| v / total), gt_class, cfg))
}

/// Same as [`count_noisy_logits`] for values given as logarithms, which avoids overflow.
pub fn count_noisy_log_values(log_values: &[f64], gt_class: usize, cfg: &NoisyLogitConfig) -> Result<NoisyCount> {
    if gt_class >= log_values.len() {
        return Err(Error::ClassOutOfRange { class_id: gt_class, n: log_values.len() });
    }
    let max = log_values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return Err(Error::invalid("noisy-logit log-values have no finite maximum"));
    }
    let total: f64 = log_values.iter().map(|v| (v - max).exp()).sum();
    let shares = log_values.iter().map(|v| (v - max).exp() / total);
    Ok(count_from_shares(shares, gt_class, cfg))
}

/// Which values the noisy-logit statistic is taken over.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum LogitSource {
    RawFine,
    Tree(String),
    Forest,
}

impl fmt::Display for LogitSource {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            LogitSource::RawFine => f.write_str("raw_fine"),
            LogitSource::Tree(t) => write!(f, "tree:{t}"),
            LogitSource::Forest => f.write_str("forest"),
        }
    }
}

impl FromStr for LogitSource {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "raw_fine" | "raw" => Ok(LogitSource::RawFine),
            "forest" => Ok(LogitSource::Forest),
            _ => match s.strip_prefix("tree:") {
                Some(t) if !t.is_empty() => Ok(LogitSource::Tree(t.to_string())),
                _ => Err(Error::invalid(format!("unknown logit source `{s}`"))),
            },
        }
    }
}

/// Log-domain values of `source` for one record.
pub fn source_log_values(rec: &LogitRecord, source: &LogitSource, forest: Option<&Forest>) -> Result<Vec<f64>> {
    let forest_for = || forest.ok_or_else(|| Error::invalid(format!("source `{source}` needs trees")));
    match source {
        LogitSource::RawFine => Ok(rec.fine_logits.clone()),
        LogitSource::Tree(id) => {
            let tree = forest_for()?
                .tree(id)
                .ok_or_else(|| Error::invalid(format!("no tree with id `{id}` loaded")))?;
            calibrate_tree(rec, tree)
        }
        LogitSource::Forest => forest_log_values(rec, forest_for()?),
    }
}

pub fn noisy_count_for(rec: &LogitRecord, source: &LogitSource, forest: Option<&Forest>, cfg: &NoisyLogitConfig) -> Result<NoisyCount> {
    let gt = rec
        .gt_class
        .ok_or_else(|| Error::invalid(format!("object `{}` has no gt_class", rec.object_id)))?;
    count_noisy_log_values(&source_log_values(rec, source, forest)?, gt, cfg)
}

/// Streaming accumulator for the mean number of noisy logits per object.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct NoisyAccumulator {
    pub total: u64,
    pub objects: u64,
}

impl NoisyAccumulator {
    pub fn add(&mut self, c: NoisyCount) {
        self.total += c.total() as u64;
        self.objects += 1;
    }

    pub fn merge(mut self, other: NoisyAccumulator) -> Self {
        self.total += other.total;
        self.objects += other.objects;
        self
    }

    pub fn mean(&self) -> f64 {
        if self.objects == 0 {
            0.0
        } else {
            self.total as f64 / self.objects as f64
        }
    }
}

pub fn mean_noisy_per_object(
    records: &[LogitRecord],
    source: &LogitSource,
    forest: Option<&Forest>,
    cfg: &NoisyLogitConfig,
) -> Result<f64> {
    cfg.validate()?;
    let mut acc = NoisyAccumulator::default();
    for rec in records {
        acc.add(noisy_count_for(rec, source, forest, cfg)?);
    }
    Ok(acc.mean())
}

/// JSON summary of one noisy-logit run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoisyReport {
    pub mean_noisy: f64,
    pub eps_gt: f64,
    pub eps_neg: f64,
    pub source: String,
    pub n_objects: u64,
}

impl NoisyReport {
    pub fn new(acc: &NoisyAccumulator, source: &LogitSource, cfg: &NoisyLogitConfig) -> Self {
        NoisyReport {
            mean_noisy: acc.mean(),
            eps_gt: cfg.eps_gt,
            eps_neg: cfg.eps_neg,
            source: source.to_string(),
            n_objects: acc.objects,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Correct,
    Incorrect,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Correct => "correct",
            Split::Incorrect => "incorrect",
        }
    }
}

/// Equal-width bins over `[0, 1]`; the value 1 falls in the last bin.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct HistogramSpec {
    pub bin_count: usize,
}

impl Default for HistogramSpec {
    fn default() -> Self {
        HistogramSpec { bin_count: DEFAULT_BIN_COUNT }
    }
}

impl HistogramSpec {
    pub fn bin_of(&self, v: f64) -> usize {
        ((v.clamp(0.0, 1.0) * self.bin_count as f64) as usize).min(self.bin_count - 1)
    }

    pub fn edges(&self, bin: usize) -> (f64, f64) {
        let n = self.bin_count as f64;
        (bin as f64 / n, (bin + 1) as f64 / n)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Histogram {
    pub spec: HistogramSpec,
    pub counts: Vec<u64>,
}

impl Histogram {
    pub fn new(spec: HistogramSpec) -> Result<Self> {
        if spec.bin_count == 0 {
            return Err(Error::invalid("histogram needs at least one bin"));
        }
        Ok(Histogram { spec, counts: vec![0; spec.bin_count] })
    }

    pub fn add(&mut self, v: f64) {
        self.counts[self.spec.bin_of(v)] += 1;
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn is_empty(&self) -> bool {
        self.total() == 0
    }

    /// Bin masses summing to 1, or all zeros for an empty histogram.
    pub fn masses(&self) -> Vec<f64> {
        let total = self.total();
        if total == 0 {
            return vec![0.0; self.counts.len()];
        }
        self.counts.iter().map(|&c| c as f64 / total as f64).collect()
    }

    /// CSV with header `bin_lo,bin_hi,mass`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("bin_lo,bin_hi,mass\n");
        for (i, m) in self.masses().iter().enumerate() {
            let (lo, hi) = self.spec.edges(i);
            out.push_str(&format!("{lo},{hi},{m}\n"));
        }
        out
    }
}

/// Normalised density of predicted-label confidence, restricted to correctly or incorrectly
/// classified objects.
pub fn score_density<'a>(
    results: impl IntoIterator<Item = (&'a ScoreResult, usize)>,
    split: Split,
    spec: HistogramSpec,
) -> Result<Histogram> {
    let mut h = Histogram::new(spec)?;
    for (r, gt) in results {
        let correct = r.label == gt;
        if correct == (split == Split::Correct) {
            h.add(r.confidence());
        }
    }
    Ok(h)
}
