//! Seeded synthetic data: a noisy-logit suite with informative parent classifiers, a
//! long-tailed proposal fixture, and the small end-to-end demo dataset.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::Result;
use crate::evaluation::{Detection, GroundTruth};
use crate::mask::RleMask;
use crate::nms::{match_proposals_to_gt, BBox, Proposal, DEFAULT_FG_IOU};
use crate::scoring::LogitRecord;
use crate::taxonomy::{CategoryRecord, CategorySet, ClassificationTree, Forest};
use crate::tree_builder::{
    build_geometric_tree, build_lexical_tree, build_visual_tree, FeatureTable, Hierarchy, KMeansConfig,
    DEFAULT_GEOMETRIC_PARENTS, DEFAULT_VISUAL_PARENTS,
};

/// Generator settings for objects whose fine-grained logits carry one strong wrong logit.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NoisySuiteConfig {
    /// Parents per tree; the suite has `parents^2` classes.
    pub parents: usize,
    pub objects: usize,
    pub base_sigma: f64,
    pub gt_boost: f64,
    pub spikes: usize,
    pub spike_low: f64,
    pub spike_high: f64,
    pub parent_sigma: f64,
    pub parent_boost: f64,
}

impl Default for NoisySuiteConfig {
    fn default() -> Self {
        NoisySuiteConfig {
            parents: 10,
            objects: 1000,
            base_sigma: 0.1,
            gt_boost: 5.0,
            spikes: 1,
            spike_low: 3.0,
            spike_high: 8.0,
            parent_sigma: 1.5,
            parent_boost: 3.0,
        }
    }
}

/// Three trees over `m * m` classes: class `i` sits at row `i / m`, column `i % m`, and
/// diagonal `(row + column) % m`. Two distinct classes share a parent in at most one tree.
pub fn orthogonal_forest(m: usize) -> Result<Forest> {
    let n = m * m;
    let row = ClassificationTree::from_assignment("row", m, (0..n).map(|i| i / m).collect());
    let col = ClassificationTree::from_assignment("column", m, (0..n).map(|i| i % m).collect());
    let diag = ClassificationTree::from_assignment("diagonal", m, (0..n).map(|i| (i / m + i % m) % m).collect());
    Forest::new(vec![row, col, diag], n)
}

fn noisy_record(
    rng: &mut ChaCha8Rng,
    id: String,
    gt: usize,
    forest: &Forest,
    cfg: &NoisySuiteConfig,
) -> LogitRecord {
    let n = forest.num_leaves();
    let base = Normal::new(0.0, cfg.base_sigma).unwrap();
    let parent_noise = Normal::new(0.0, cfg.parent_sigma).unwrap();
    let mut z: Vec<f64> = (0..n).map(|_| base.sample(rng)).collect();
    z[gt] += cfg.gt_boost;
    for k in sample(rng, n - 1, cfg.spikes.min(n - 1)) {
        let neg = if k >= gt { k + 1 } else { k };
        z[neg] += rng.random_range(cfg.spike_low..cfg.spike_high);
    }
    let mut rec = LogitRecord::new(id, z).with_gt(gt);
    for tree in forest.trees() {
        let mut zu: Vec<f64> = (0..tree.num_parents).map(|_| parent_noise.sample(rng)).collect();
        zu[tree.leaf_parent[gt]] += cfg.parent_boost;
        rec = rec.with_parent(&tree.tree_id, zu);
    }
    rec
}

/// Objects with uniformly drawn ground truth over the orthogonal forest's classes.
pub fn noisy_suite(cfg: &NoisySuiteConfig, seed: u64) -> Result<(Forest, Vec<LogitRecord>)> {
    let forest = orthogonal_forest(cfg.parents)?;
    let n = forest.num_leaves();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let records = (0..cfg.objects)
        .map(|o| {
            let gt = rng.random_range(0..n);
            noisy_record(&mut rng, format!("obj{o:05}"), gt, &forest, cfg)
        })
        .collect();
    Ok((forest, records))
}

/// Horizontal offset giving IoU `v` between two equal `w x h` boxes.
fn shift_for_iou(w: f64, v: f64) -> f64 {
    w * (1.0 - v) / (1.0 + v)
}

/// IoUs of the template proposals with the top-scoring one.
pub const TEMPLATE_IOUS: [f64; 6] = [1.0, 0.95, 0.85, 0.75, 0.65, 0.4];

#[derive(Debug, Clone, PartialEq)]
pub struct ImageProposals {
    pub image_id: String,
    pub gts: Vec<(BBox, usize)>,
    pub proposals: Vec<Proposal>,
}

/// Long-tailed proposal fixture: class `c` gets `instances[c]` objects, each in its own image
/// and each surrounded by the same proposal template (boxes shifted to [`TEMPLATE_IOUS`] with
/// the top box), plus two distant background boxes. Random translation and scale per image.
pub fn long_tailed_proposals(instances: &[usize], seed: u64) -> Vec<ImageProposals> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    for (class, &count) in instances.iter().enumerate() {
        for k in 0..count {
            let scale = rng.random_range(0.5..2.0);
            let (ox, oy) = (rng.random_range(0.0..500.0), rng.random_range(0.0..500.0));
            let (w, h) = (100.0 * scale, 80.0 * scale);
            let gt = BBox { x1: ox, y1: oy, x2: ox + w, y2: oy + h };
            let mut raw = Vec::new();
            for (t, &v) in TEMPLATE_IOUS.iter().enumerate() {
                let s = shift_for_iou(w, v) * if t % 2 == 0 { 1.0 } else { -1.0 };
                let b = BBox { x1: ox + s, y1: oy, x2: ox + s + w, y2: oy + h };
                raw.push((b, 0.95 - 0.1 * t as f64));
            }
            for j in 0..2 {
                let bx = ox + 3.0 * w + j as f64 * 2.0 * w;
                raw.push((BBox { x1: bx, y1: oy, x2: bx + w, y2: oy + h }, 0.3 - 0.1 * j as f64));
            }
            let gts = vec![(gt, class)];
            out.push(ImageProposals {
                image_id: format!("lt_{class:03}_{k:03}"),
                proposals: match_proposals_to_gt(&raw, &gts, DEFAULT_FG_IOU),
                gts,
            });
        }
    }
    out
}

/// Everything the `pipeline` demo needs, in memory.
#[derive(Debug, Clone)]
pub struct DemoDataset {
    pub categories: CategorySet,
    pub hierarchy: Hierarchy,
    pub features: FeatureTable,
    pub masks: Vec<Vec<RleMask>>,
    pub trees: Vec<ClassificationTree>,
    pub records: Vec<LogitRecord>,
    pub proposals: Vec<ImageProposals>,
    pub ground_truth: Vec<GroundTruth>,
    pub detections: Vec<Detection>,
}

pub const DEMO_CLASSES: usize = 64;
pub const DEMO_IMAGE_SIZE: usize = 64;

fn demo_categories() -> CategorySet {
    let records = (0..DEMO_CLASSES)
        .map(|i| CategoryRecord {
            id: i,
            name: format!("class_{i:02}"),
            cf: (3000.0 * 0.87f64.powi(i as i32)).round().max(1.0) as u64,
            group: None,
        })
        .collect();
    CategorySet::from_records(records, true).expect("demo categories are valid")
}

fn shape_mask(size: usize, class: usize, variant: usize) -> RleMask {
    let kind = class % 4;
    let extent = 0.3 + 0.15 * ((class / 4) % 4) as f64 + 0.03 * variant as f64;
    let c = size as f64 / 2.0;
    let r = extent * c;
    let bits: Vec<bool> = (0..size * size)
        .map(|p| {
            let (y, x) = ((p / size) as f64 + 0.5 - c, (p % size) as f64 + 0.5 - c);
            match kind {
                0 => x.abs() <= r && y.abs() <= r,
                1 => x * x + y * y <= r * r,
                2 => y >= -r && y <= r && x.abs() <= (y + r) / 2.0,
                _ => x.abs() <= r && y.abs() <= r / 3.0,
            }
        })
        .collect();
    RleMask::from_bits(size, size, &bits).unwrap()
}

fn box_mask(b: &BBox) -> RleMask {
    let s = DEMO_IMAGE_SIZE;
    let bits: Vec<bool> = (0..s * s)
        .map(|p| {
            let (y, x) = ((p / s) as f64 + 0.5, (p % s) as f64 + 0.5);
            x >= b.x1 && x < b.x2 && y >= b.y1 && y < b.y2
        })
        .collect();
    RleMask::from_bits(s, s, &bits).unwrap()
}

/// Deterministic demo dataset for `seed`.
pub fn demo_dataset(seed: u64) -> Result<DemoDataset> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let categories = demo_categories();
    let n = categories.len();

    let hierarchy = Hierarchy {
        entries: categories
            .iter()
            .map(|c| (c.name.clone(), format!("super_{}", (c.id * 7) % 12)))
            .collect(),
    };

    let noise = Normal::new(0.0, 0.3).unwrap();
    let features = FeatureTable::from_rows(
        (0..n)
            .map(|i| (0..8).map(|d| ((i % 8) == d) as u8 as f64 * 4.0 + (i / 8) as f64 * 0.5 + noise.sample(&mut rng)).collect())
            .collect(),
    )?;

    let masks: Vec<Vec<RleMask>> = (0..n).map(|c| (0..3).map(|v| shape_mask(16, c, v)).collect()).collect();

    let kmeans = KMeansConfig { seed, ..KMeansConfig::default() };
    let lexical = build_lexical_tree(&hierarchy, &categories)?;
    let visual = build_visual_tree(&features, &KMeansConfig { k: DEFAULT_VISUAL_PARENTS, ..kmeans })?;
    let geometric = build_geometric_tree(&masks, (16, 16), &KMeansConfig { k: DEFAULT_GEOMETRIC_PARENTS, ..kmeans })?;
    let trees = vec![lexical, visual, geometric];
    let forest = Forest::new(trees.clone(), n)?;

    let suite = NoisySuiteConfig::default();
    let records = (0..400)
        .map(|o| {
            let gt = rng.random_range(0..n);
            noisy_record(&mut rng, format!("obj{o:04}"), gt, &forest, &suite)
        })
        .collect();

    let instances: Vec<usize> = categories.iter().map(|c| ((c.cf as f64).sqrt() / 8.0).ceil() as usize).collect();
    let proposals = long_tailed_proposals(&instances, seed ^ 0x5eed);

    let mut ground_truth = Vec::new();
    let mut detections = Vec::new();
    for img in 0..40 {
        let image_id = format!("img{img:03}");
        let objects = rng.random_range(1..4);
        for _ in 0..objects {
            let class = rng.random_range(0..n);
            let (w, h) = (rng.random_range(8.0..24.0f64).round(), rng.random_range(8.0..24.0f64).round());
            let x1 = rng.random_range(0.0..(DEMO_IMAGE_SIZE as f64 - w)).round();
            let y1 = rng.random_range(0.0..(DEMO_IMAGE_SIZE as f64 - h)).round();
            let gt_box = BBox { x1, y1, x2: x1 + w, y2: y1 + h };
            ground_truth.push(GroundTruth {
                image_id: image_id.clone(),
                bbox: gt_box,
                class_id: class,
                mask_rle: Some(box_mask(&gt_box)),
            });
            if rng.random_bool(0.85) {
                let jitter = |r: &mut ChaCha8Rng| r.random_range(-2i32..=2) as f64;
                let b = BBox {
                    x1: (x1 + jitter(&mut rng)).max(0.0),
                    y1: (y1 + jitter(&mut rng)).max(0.0),
                    x2: (x1 + w + jitter(&mut rng)).min(DEMO_IMAGE_SIZE as f64),
                    y2: (y1 + h + jitter(&mut rng)).min(DEMO_IMAGE_SIZE as f64),
                };
                let label = if rng.random_bool(0.8) { class } else { rng.random_range(0..n) };
                detections.push(Detection {
                    image_id: image_id.clone(),
                    bbox: b,
                    class_id: label,
                    score: (rng.random_range(0.3..1.0f64) * 1000.0).round() / 1000.0,
                    mask_rle: Some(box_mask(&b)),
                });
            }
        }
        if rng.random_bool(0.5) {
            let x1 = rng.random_range(0.0..48.0f64).round();
            let y1 = rng.random_range(0.0..48.0f64).round();
            let b = BBox { x1, y1, x2: x1 + 12.0, y2: y1 + 12.0 };
            detections.push(Detection {
                image_id: image_id.clone(),
                bbox: b,
                class_id: rng.random_range(0..n),
                score: (rng.random_range(0.05..0.6f64) * 1000.0).round() / 1000.0,
                mask_rle: Some(box_mask(&b)),
            });
        }
    }

    Ok(DemoDataset {
        categories,
        hierarchy,
        features,
        masks,
        trees,
        records,
        proposals,
        ground_truth,
        detections,
    })
}
