//! Commands behind the `forest` binary, the TOML pipeline configuration, and the demo dataset
//! writer. Every command is deterministic in its inputs, configuration and seed.

use std::collections::{BTreeMap, HashSet};
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::analysis::{
    count_noisy_logits, noisy_count_for, Histogram, HistogramSpec, LogitSource, NoisyAccumulator,
    NoisyCount, NoisyLogitConfig, NoisyReport, DEFAULT_BIN_COUNT,
};
use crate::error::{Error, Result};
use crate::evaluation::{evaluate, Detection, EvalParams, EvalReport, GroundTruth, IouKind, DEFAULT_MAX_DETS};
use crate::io::{
    self, read_categories, read_class_masks, read_feature_table, read_hierarchy, read_jsonl, read_tree, write_json,
    write_jsonl_line, write_text, write_tree, GtBoxRecord, JsonlReader, KeptProposalRecord, MaskRecord,
    ProposalRecord,
};
use crate::nms::{class_aware_nms_indices, class_thresholds, match_proposals_to_gt, BBox, Proposal, ResamplingConfig, DEFAULT_FG_IOU};
use crate::scoring::{score, LogitRecord, ScoreMode, ScoreResult};
use crate::synthetic::demo_dataset;
use crate::taxonomy::{CategorySet, ClassificationTree, Forest, Group};
use crate::tree_builder::{
    build_geometric_tree, build_lexical_tree, build_visual_tree, KMeansConfig, DEFAULT_GEOMETRIC_PARENTS,
    DEFAULT_VISUAL_PARENTS,
};

/// Records handed to the worker pool at once.
const CHUNK: usize = 1024;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct KMeansSection {
    /// Defaults to 25 for visual trees and 50 for geometric ones.
    pub k: Option<usize>,
    pub max_iter: usize,
    pub tol: f64,
}

impl Default for KMeansSection {
    fn default() -> Self {
        let d = KMeansConfig::default();
        KMeansSection { k: None, max_iter: d.max_iter, tol: d.tol }
    }
}

impl KMeansSection {
    pub fn config(&self, default_k: usize, seed: u64) -> KMeansConfig {
        KMeansConfig { k: self.k.unwrap_or(default_k), seed, max_iter: self.max_iter, tol: self.tol }
    }
}

/// Pipeline configuration, read from TOML. Relative paths resolve against the config file's
/// directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub categories: Option<PathBuf>,
    /// Reject category records whose declared group disagrees with their frequency.
    pub strict_groups: bool,
    pub trees: Vec<PathBuf>,
    pub records: Option<PathBuf>,
    pub proposals: Option<PathBuf>,
    /// Ground-truth boxes used to label raw proposals before NMS.
    pub proposal_gts: Option<PathBuf>,
    pub ground_truth: Option<PathBuf>,
    pub detections: Option<PathBuf>,
    pub mode: ScoreMode,
    pub out_dir: PathBuf,
    pub seed: u64,
    /// Worker threads; 0 picks the number of cores.
    pub threads: usize,
    pub histogram_bins: usize,
    pub max_dets: usize,
    pub fg_iou: f64,
    pub resampling: ResamplingConfig,
    pub noisy: NoisyLogitConfig,
    pub kmeans: KMeansSection,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            categories: None,
            strict_groups: true,
            trees: Vec::new(),
            records: None,
            proposals: None,
            proposal_gts: None,
            ground_truth: None,
            detections: None,
            mode: ScoreMode::ForestScore,
            out_dir: PathBuf::from("out"),
            seed: 0,
            threads: 0,
            histogram_bins: DEFAULT_BIN_COUNT,
            max_dets: DEFAULT_MAX_DETS,
            fg_iou: DEFAULT_FG_IOU,
            resampling: ResamplingConfig::default(),
            noisy: NoisyLogitConfig::default(),
            kmeans: KMeansSection::default(),
        }
    }
}

impl PipelineConfig {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg: PipelineConfig =
            toml::from_str(&text).map_err(|e| Error::invalid(format!("{}: {e}", path.display())))?;
        cfg.resolve_paths(path.parent().unwrap_or(Path::new("")));
        Ok(cfg)
    }

    pub fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        for p in [
            &mut self.categories,
            &mut self.records,
            &mut self.proposals,
            &mut self.proposal_gts,
            &mut self.ground_truth,
            &mut self.detections,
        ]
        .into_iter()
        .flatten()
        {
            fix(p);
        }
        self.trees.iter_mut().for_each(fix);
        fix(&mut self.out_dir);
    }

    pub fn validate(&self) -> Result<()> {
        self.resampling.validate()?;
        self.noisy.validate()?;
        if self.histogram_bins == 0 {
            return Err(Error::invalid("histogram_bins must be positive"));
        }
        if self.max_dets == 0 {
            return Err(Error::invalid("max_dets must be positive"));
        }
        if !(self.fg_iou > 0.0 && self.fg_iou <= 1.0) {
            return Err(Error::invalid(format!("fg_iou must lie in (0, 1], got {}", self.fg_iou)));
        }
        Ok(())
    }

    fn require<'a>(&self, field: &'a Option<PathBuf>, name: &str) -> Result<&'a PathBuf> {
        field.as_ref().ok_or_else(|| Error::invalid(format!("missing `{name}` path")))
    }
}

pub fn thread_pool(threads: usize) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| Error::invalid(format!("cannot start worker pool: {e}")))
}

pub fn load_forest(paths: &[PathBuf], n: usize) -> Result<Option<Forest>> {
    if paths.is_empty() {
        return Ok(None);
    }
    let trees = paths.iter().map(read_tree).collect::<Result<Vec<_>>>()?;
    Forest::new(trees, n).map(Some)
}

/// Reads a JSONL file in chunks, handing each `(line, value)` chunk to `f`.
fn for_each_chunk<T: serde::de::DeserializeOwned>(
    path: &Path,
    mut f: impl FnMut(Vec<(usize, T)>) -> Result<()>,
) -> Result<()> {
    let mut reader = JsonlReader::<T>::open(path)?;
    loop {
        let chunk = reader.by_ref().take(CHUNK).collect::<Result<Vec<_>>>()?;
        if chunk.is_empty() {
            return Ok(());
        }
        f(chunk)?;
    }
}

// ---------------------------------------------------------------------------------------------
// build-tree

#[derive(Debug, Clone)]
pub enum TreeInputs {
    Lexical { hierarchy: PathBuf, categories: PathBuf },
    Visual { features: PathBuf },
    Geometric { masks: PathBuf, categories: PathBuf, grid: (usize, usize) },
}

pub fn cmd_build_tree(inputs: &TreeInputs, kmeans: &KMeansSection, seed: u64, out: &Path) -> Result<ClassificationTree> {
    let tree = match inputs {
        TreeInputs::Lexical { hierarchy, categories } => {
            build_lexical_tree(&read_hierarchy(hierarchy)?, &read_categories(categories, true)?)?
        }
        TreeInputs::Visual { features } => {
            build_visual_tree(&read_feature_table(features)?, &kmeans.config(DEFAULT_VISUAL_PARENTS, seed))?
        }
        TreeInputs::Geometric { masks, categories, grid } => {
            let n = read_categories(categories, true)?.len();
            let masks = read_class_masks(masks, n)?;
            build_geometric_tree(&masks, *grid, &kmeans.config(DEFAULT_GEOMETRIC_PARENTS, seed))?
        }
    };
    write_tree(out, &tree)?;
    Ok(tree)
}

// ---------------------------------------------------------------------------------------------
// score

/// One line of a score file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredRecord {
    pub object_id: String,
    pub gt_class: Option<usize>,
    pub mode: ScoreMode,
    pub label: usize,
    pub scores: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreSummary {
    pub records: usize,
    pub mode: ScoreMode,
}

fn score_line(path: &Path, line: usize, rec: &LogitRecord, n: usize, forest: Option<&Forest>, mode: &ScoreMode) -> Result<ScoreResult> {
    rec.validate(n)
        .and_then(|_| score(rec, forest, mode))
        .map_err(|e| e.at_line(path, line))
}

pub fn cmd_score(
    categories: &CategorySet,
    forest: Option<&Forest>,
    records: &Path,
    mode: &ScoreMode,
    out: &Path,
    pool: &rayon::ThreadPool,
) -> Result<ScoreSummary> {
    let n = categories.len();
    let mut writer = io::create(out)?;
    let mut count = 0;
    for_each_chunk::<LogitRecord>(records, |chunk| {
        let results: Vec<Result<ScoreResult>> = pool.install(|| {
            chunk
                .par_iter()
                .map(|(line, rec)| score_line(records, *line, rec, n, forest, mode))
                .collect()
        });
        for ((_, rec), res) in chunk.into_iter().zip(results) {
            let r = res?;
            let row = ScoredRecord { object_id: rec.object_id, gt_class: rec.gt_class, mode: r.mode, label: r.label, scores: r.scores };
            write_jsonl_line(&mut writer, &row, out)?;
            count += 1;
        }
        Ok(())
    })?;
    use std::io::Write;
    writer.flush().map_err(|e| Error::io(out, e))?;
    Ok(ScoreSummary { records: count, mode: mode.clone() })
}

// ---------------------------------------------------------------------------------------------
// nms

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct GroupCount {
    pub input: usize,
    pub kept: usize,
}

impl GroupCount {
    pub fn ratio(&self) -> Option<f64> {
        (self.input > 0).then(|| self.kept as f64 / self.input as f64)
    }
}

/// Survival counts keyed by `rare`, `common`, `frequent` and `background`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct NmsStats {
    pub images: usize,
    pub groups: BTreeMap<String, GroupCount>,
}

impl NmsStats {
    pub fn group(&self, key: &str) -> GroupCount {
        self.groups.get(key).copied().unwrap_or_default()
    }
}

#[derive(Debug, Deserialize)]
struct RawBoxRecord {
    image_id: String,
    #[serde(rename = "box")]
    bbox: BBox,
    score: f64,
}

fn group_key(categories: &CategorySet, class: Option<usize>) -> &'static str {
    match class.and_then(|c| categories.group_of(c)) {
        Some(g) => g.as_str(),
        None => "background",
    }
}

pub fn thresholds_csv(categories: &CategorySet, thresholds: &[f64]) -> String {
    let mut out = String::from("class_id,name,group,cf,threshold\n");
    for (c, t) in categories.iter().zip(thresholds) {
        out.push_str(&format!("{},{},{},{},{}\n", c.id, c.name, c.group, c.cf, t));
    }
    out
}

/// Class-aware NMS over a proposal file whose lines are grouped by image. With `gts`, proposals
/// are read as raw boxes and labelled by their best-overlapping ground truth first.
pub fn cmd_nms(
    categories: &CategorySet,
    proposals: &Path,
    gts: Option<&Path>,
    cfg: &ResamplingConfig,
    fg_iou: f64,
    out_dir: &Path,
) -> Result<NmsStats> {
    cfg.validate()?;
    let n = categories.len();
    let thresholds = class_thresholds(categories, cfg)?;
    write_text(out_dir.join("nms_thresholds.csv"), &thresholds_csv(categories, &thresholds))?;

    let gt_map = match gts {
        Some(p) => {
            let mut m: BTreeMap<String, Vec<(BBox, usize)>> = BTreeMap::new();
            for item in JsonlReader::<GtBoxRecord>::open(p)? {
                let (line, g) = item?;
                if g.class_id >= n {
                    return Err(Error::ClassOutOfRange { class_id: g.class_id, n }.at_line(p, line));
                }
                m.entry(g.image_id).or_default().push((g.bbox, g.class_id));
            }
            Some(m)
        }
        None => None,
    };

    let out = out_dir.join("kept_proposals.jsonl");
    let mut writer = io::create(&out)?;
    let mut stats = NmsStats::default();
    for key in Group::ALL.iter().map(|g| g.as_str()).chain(["background"]) {
        stats.groups.insert(key.to_string(), GroupCount::default());
    }
    let mut seen: HashSet<String> = HashSet::new();

    let mut flush = |image: String, props: Vec<Proposal>, stats: &mut NmsStats| -> Result<()> {
        let props = match &gt_map {
            Some(m) => {
                let raw: Vec<(BBox, f64)> = props.iter().map(|p| (p.bbox, p.score)).collect();
                match_proposals_to_gt(&raw, m.get(&image).map_or(&[][..], Vec::as_slice), fg_iou)
            }
            None => props,
        };
        for p in &props {
            stats.groups.get_mut(group_key(categories, p.class_id)).unwrap().input += 1;
        }
        let keep = class_aware_nms_indices(&props, &thresholds, cfg.background_threshold)
            .map_err(|e| Error::invalid(format!("{}: image `{image}`: {e}", proposals.display())))?;
        for (rank, &i) in keep.iter().enumerate() {
            let p = &props[i];
            stats.groups.get_mut(group_key(categories, p.class_id)).unwrap().kept += 1;
            let rec = KeptProposalRecord { image_id: image.clone(), proposal: p.clone(), kept_rank: rank };
            write_jsonl_line(&mut writer, &rec, &out)?;
        }
        stats.images += 1;
        Ok(())
    };

    let mut current: Option<(String, Vec<Proposal>)> = None;
    let mut push = |line: usize, image_id: String, p: Proposal, stats: &mut NmsStats| -> Result<()> {
        if let Some(c) = p.class_id {
            if c >= n {
                return Err(Error::ClassOutOfRange { class_id: c, n }.at_line(proposals, line));
            }
        }
        p.bbox.validate().map_err(|e| e.at_line(proposals, line))?;
        match &mut current {
            Some((img, list)) if *img == image_id => list.push(p),
            _ => {
                if !seen.insert(image_id.clone()) {
                    return Err(Error::invalid(format!("image `{image_id}` is not contiguous"))
                        .at_line(proposals, line));
                }
                if let Some((img, list)) = current.replace((image_id, vec![p])) {
                    flush(img, list, stats)?;
                }
            }
        }
        Ok(())
    };

    if gt_map.is_some() {
        for item in JsonlReader::<RawBoxRecord>::open(proposals)? {
            let (line, r) = item?;
            push(line, r.image_id, Proposal { bbox: r.bbox, score: r.score, class_id: None }, &mut stats)?;
        }
    } else {
        for item in JsonlReader::<ProposalRecord>::open(proposals)? {
            let (line, r) = item?;
            push(line, r.image_id, r.proposal, &mut stats)?;
        }
    }
    if let Some((img, list)) = current.take() {
        flush(img, list, &mut stats)?;
    }
    use std::io::Write;
    writer.flush().map_err(|e| Error::io(&out, e))?;
    write_json(out_dir.join("nms_stats.json"), &stats)?;
    Ok(stats)
}

// ---------------------------------------------------------------------------------------------
// analyze

#[derive(Debug, Clone)]
pub enum AnalyzeInput<'a> {
    /// Raw logit records; `modes` select which score densities to write.
    Records { path: &'a Path, forest: Option<&'a Forest>, modes: Vec<ScoreMode> },
    /// A score file written by `score`.
    Scores { path: &'a Path },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnalyzeSummary {
    pub reports: Vec<NoisyReport>,
    /// `(mode, correct count, incorrect count)`.
    pub densities: Vec<(String, u64, u64)>,
}

fn file_tag(s: &str) -> String {
    s.chars().map(|c| if c.is_ascii_alphanumeric() || c == '_' || c == '-' { c } else { '_' }).collect()
}

/// Per-record noisy counts and scores, with the ground-truth class.
type RecordStats = (Vec<NoisyCount>, Vec<ScoreResult>, usize);

struct Stats {
    sources: Vec<String>,
    acc: Vec<NoisyAccumulator>,
    modes: Vec<String>,
    hist: Vec<(Histogram, Histogram)>,
}

impl Stats {
    fn new(sources: Vec<String>, modes: Vec<String>, spec: HistogramSpec) -> Result<Self> {
        let hist = modes
            .iter()
            .map(|_| Ok((Histogram::new(spec)?, Histogram::new(spec)?)))
            .collect::<Result<Vec<_>>>()?;
        Ok(Stats { acc: vec![NoisyAccumulator::default(); sources.len()], sources, modes, hist })
    }

    fn add(&mut self, counts: Vec<NoisyCount>, results: Vec<ScoreResult>, gt: usize) {
        for (a, c) in self.acc.iter_mut().zip(counts) {
            a.add(c);
        }
        for ((hc, hi), r) in self.hist.iter_mut().zip(&results) {
            if r.label == gt { hc.add(r.confidence()) } else { hi.add(r.confidence()) }
        }
    }

    fn write(&self, cfg: &NoisyLogitConfig, out_dir: &Path) -> Result<AnalyzeSummary> {
        let mut reports = Vec::new();
        for (source, acc) in self.sources.iter().zip(&self.acc) {
            let report = NoisyReport {
                mean_noisy: acc.mean(),
                eps_gt: cfg.eps_gt,
                eps_neg: cfg.eps_neg,
                source: source.clone(),
                n_objects: acc.objects,
            };
            write_json(out_dir.join(format!("noisy_{}.json", file_tag(source))), &report)?;
            reports.push(report);
        }
        let mut densities = Vec::new();
        for (mode, (hc, hi)) in self.modes.iter().zip(&self.hist) {
            write_text(out_dir.join(format!("density_{}_correct.csv", file_tag(mode))), &hc.to_csv())?;
            write_text(out_dir.join(format!("density_{}_incorrect.csv", file_tag(mode))), &hi.to_csv())?;
            densities.push((mode.clone(), hc.total(), hi.total()));
        }
        let summary = AnalyzeSummary { reports, densities };
        write_json(out_dir.join("analysis.json"), &summary)?;
        Ok(summary)
    }
}

fn need_gt(path: &Path, line: usize, gt: Option<usize>, n: usize) -> Result<usize> {
    match gt {
        Some(g) if g < n => Ok(g),
        Some(g) => Err(Error::ClassOutOfRange { class_id: g, n }.at_line(path, line)),
        None => Err(Error::invalid("record has no gt_class").at_line(path, line)),
    }
}

pub fn cmd_analyze(
    categories: &CategorySet,
    input: &AnalyzeInput,
    cfg: &NoisyLogitConfig,
    bins: usize,
    out_dir: &Path,
    pool: &rayon::ThreadPool,
) -> Result<AnalyzeSummary> {
    cfg.validate()?;
    let n = categories.len();
    let spec = HistogramSpec { bin_count: bins };
    match input {
        AnalyzeInput::Records { path, forest, modes } => {
            let mut sources = vec![LogitSource::RawFine];
            if let Some(f) = forest {
                sources.extend(f.trees().iter().map(|t| LogitSource::Tree(t.tree_id.clone())));
                sources.push(LogitSource::Forest);
            }
            let mut stats = Stats::new(
                sources.iter().map(|s| s.to_string()).collect(),
                modes.iter().map(|m| m.to_string()).collect(),
                spec,
            )?;
            for_each_chunk::<LogitRecord>(path, |chunk| {
                let per: Vec<Result<RecordStats>> = pool.install(|| {
                    chunk
                        .par_iter()
                        .map(|(line, rec)| {
                            let gt = need_gt(path, *line, rec.gt_class, n)?;
                            rec.validate(n).map_err(|e| e.at_line(*path, *line))?;
                            let counts = sources
                                .iter()
                                .map(|s| noisy_count_for(rec, s, *forest, cfg))
                                .collect::<Result<Vec<_>>>()
                                .map_err(|e| e.at_line(*path, *line))?;
                            let results = modes
                                .iter()
                                .map(|m| score_line(path, *line, rec, n, *forest, m))
                                .collect::<Result<Vec<_>>>()?;
                            Ok((counts, results, gt))
                        })
                        .collect()
                });
                for item in per {
                    let (counts, results, gt) = item?;
                    stats.add(counts, results, gt);
                }
                Ok(())
            })?;
            stats.write(cfg, out_dir)
        }
        AnalyzeInput::Scores { path } => {
            let mut stats: Option<Stats> = None;
            for item in JsonlReader::<ScoredRecord>::open(path)? {
                let (line, rec) = item?;
                let gt = need_gt(path, line, rec.gt_class, n)?;
                if rec.scores.len() != n || rec.label >= n {
                    return Err(Error::invalid(format!("expected {n} scores and a label below {n}")).at_line(*path, line));
                }
                let mode = rec.mode.to_string();
                let st = match &mut stats {
                    Some(s) => s,
                    None => stats.insert(Stats::new(vec![mode.clone()], vec![mode.clone()], spec)?),
                };
                if st.modes[0] != mode {
                    return Err(Error::invalid(format!("mixed modes `{}` and `{mode}`", st.modes[0])).at_line(*path, line));
                }
                let count = count_noisy_logits(&rec.scores, gt, cfg).map_err(|e| e.at_line(*path, line))?;
                let result = ScoreResult { mode: rec.mode, label: rec.label, scores: rec.scores };
                st.add(vec![count], vec![result], gt);
            }
            let stats = stats.ok_or_else(|| Error::invalid(format!("{}: no scored records", path.display())))?;
            stats.write(cfg, out_dir)
        }
    }
}

// ---------------------------------------------------------------------------------------------
// eval

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalOutputs {
    pub bbox: EvalReport,
    pub mask: Option<EvalReport>,
    pub warnings: Vec<String>,
}

pub fn cmd_eval(
    categories: &CategorySet,
    detections: &Path,
    ground_truth: &Path,
    max_dets: usize,
    out_dir: &Path,
) -> Result<EvalOutputs> {
    let dets: Vec<Detection> = read_jsonl(detections)?;
    let gts: Vec<GroundTruth> = read_jsonl(ground_truth)?;
    let mut warnings = Vec::new();
    if dets.is_empty() {
        warnings.push(format!("{}: no detections; every AP is 0", detections.display()));
    }
    let run = |kind: IouKind| -> Result<EvalReport> {
        let report = evaluate(&dets, &gts, categories, &EvalParams { iou_kind: kind, max_dets })?;
        let tag = match kind {
            IouKind::Box => "box",
            IouKind::Mask => "mask",
        };
        write_json(out_dir.join(format!("eval_{tag}.json")), &report)?;
        write_text(out_dir.join(format!("per_class_{tag}.csv")), &report.per_class_csv(categories))?;
        Ok(report)
    };
    let bbox = run(IouKind::Box)?;
    let with_masks = gts.iter().all(|g| g.mask_rle.is_some()) && dets.iter().all(|d| d.mask_rle.is_some());
    let mask = if with_masks { Some(run(IouKind::Mask)?) } else { None };
    Ok(EvalOutputs { bbox, mask, warnings })
}

// ---------------------------------------------------------------------------------------------
// pipeline

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineSummary {
    pub score: ScoreSummary,
    pub analysis: AnalyzeSummary,
    pub nms: Option<NmsStats>,
    pub eval: Option<EvalOutputs>,
}

/// score, then analyze, then (when configured) nms and eval. Outputs go to `cfg.out_dir`.
pub fn run_pipeline(cfg: &PipelineConfig) -> Result<PipelineSummary> {
    cfg.validate()?;
    let categories = read_categories(cfg.require(&cfg.categories, "categories")?, cfg.strict_groups)?;
    let records = cfg.require(&cfg.records, "records")?;
    let forest = load_forest(&cfg.trees, categories.len())?;
    let pool = thread_pool(cfg.threads)?;
    let out = &cfg.out_dir;

    let score = cmd_score(&categories, forest.as_ref(), records, &cfg.mode, &out.join("scores.jsonl"), &pool)?;

    let mut modes = vec![ScoreMode::Baseline];
    if cfg.mode != ScoreMode::Baseline {
        modes.push(cfg.mode.clone());
    }
    let input = AnalyzeInput::Records { path: records, forest: forest.as_ref(), modes };
    let analysis = cmd_analyze(&categories, &input, &cfg.noisy, cfg.histogram_bins, &out.join("analysis"), &pool)?;

    let nms = match &cfg.proposals {
        Some(p) => Some(cmd_nms(&categories, p, cfg.proposal_gts.as_deref(), &cfg.resampling, cfg.fg_iou, &out.join("nms"))?),
        None => None,
    };
    let eval = match (&cfg.detections, &cfg.ground_truth) {
        (Some(d), Some(g)) => Some(cmd_eval(&categories, d, g, cfg.max_dets, &out.join("eval"))?),
        _ => None,
    };
    let summary = PipelineSummary { score, analysis, nms, eval };
    write_json(out.join("summary.json"), &summary)?;
    Ok(summary)
}

/// Writes the seeded demo dataset plus a `pipeline.toml` that runs on it. Returns the config path.
pub fn write_demo(dir: &Path, seed: u64) -> Result<PathBuf> {
    let d = demo_dataset(seed)?;
    io::write_categories(dir.join("categories.jsonl"), &d.categories)?;
    write_json(dir.join("hierarchy.json"), &d.hierarchy)?;
    io::write_feature_table(dir.join("features.txt"), &d.features)?;
    let masks: Vec<MaskRecord> = d
        .masks
        .iter()
        .enumerate()
        .flat_map(|(c, ms)| ms.iter().map(move |m| MaskRecord { class_id: c, rle: m.clone() }))
        .collect();
    io::write_jsonl(dir.join("masks.jsonl"), &masks)?;
    let mut tree_paths = Vec::new();
    for t in &d.trees {
        let rel = format!("trees/{}.json", t.tree_id);
        write_tree(dir.join(&rel), t)?;
        tree_paths.push(rel);
    }
    io::write_jsonl(dir.join("records.jsonl"), &d.records)?;
    let props: Vec<ProposalRecord> = d
        .proposals
        .iter()
        .flat_map(|img| img.proposals.iter().map(|p| ProposalRecord { image_id: img.image_id.clone(), proposal: p.clone() }))
        .collect();
    io::write_jsonl(dir.join("proposals.jsonl"), &props)?;
    io::write_jsonl(dir.join("ground_truth.jsonl"), &d.ground_truth)?;
    io::write_jsonl(dir.join("detections.jsonl"), &d.detections)?;

    let cfg = PipelineConfig {
        categories: Some("categories.jsonl".into()),
        trees: tree_paths.into_iter().map(PathBuf::from).collect(),
        records: Some("records.jsonl".into()),
        proposals: Some("proposals.jsonl".into()),
        ground_truth: Some("ground_truth.jsonl".into()),
        detections: Some("detections.jsonl".into()),
        out_dir: "out".into(),
        seed,
        ..PipelineConfig::default()
    };
    let text = toml::to_string(&cfg).map_err(|e| Error::invalid(e.to_string()))?;
    let path = dir.join("pipeline.toml");
    write_text(&path, &text)?;
    Ok(path)
}
