//! Building classification trees from prior knowledge: a lexical parent map, and K-means
//! over per-class visual feature vectors or per-class mean mask shapes.

use std::collections::HashMap;
use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::de::{MapAccess, Visitor};
use serde::{Deserialize, Deserializer};

use crate::error::{Error, Result};
use crate::mask::RleMask;
use crate::taxonomy::{CategorySet, ClassificationTree};

/// Default parent count of the visual tree.
pub const DEFAULT_VISUAL_PARENTS: usize = 25;
/// Default parent count of the geometric tree.
pub const DEFAULT_GEOMETRIC_PARENTS: usize = 50;
/// Parent count of the reference lexical hierarchy (informational; derived from the file).
pub const REFERENCE_LEXICAL_PARENTS: usize = 108;
pub const DEFAULT_MASK_GRID: (usize, usize) = (28, 28);

/// Per-class feature vectors, one row per class id, stored row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureTable {
    rows: usize,
    dim: usize,
    data: Vec<f64>,
}

impl FeatureTable {
    pub fn new(rows: usize, dim: usize, data: Vec<f64>) -> Result<Self> {
        if rows == 0 || dim == 0 {
            return Err(Error::invalid("feature table must have at least one row and column"));
        }
        if data.len() != rows * dim {
            return Err(Error::invalid(format!(
                "feature table has {} values, expected {rows}x{dim}",
                data.len()
            )));
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::invalid(format!(
                "non-finite feature at row {}, column {}",
                pos / dim,
                pos % dim
            )));
        }
        Ok(FeatureTable { rows, dim, data })
    }

    pub fn from_rows(rows: Vec<Vec<f64>>) -> Result<Self> {
        let n = rows.len();
        let dim = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != dim) {
            return Err(Error::invalid("feature rows have differing lengths"));
        }
        Self::new(n, dim, rows.into_iter().flatten().collect())
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KMeansConfig {
    pub k: usize,
    pub seed: u64,
    pub max_iter: usize,
    /// Stop once an iteration lowers the objective by no more than this.
    pub tol: f64,
}

impl KMeansConfig {
    pub fn with_k(k: usize) -> Self {
        KMeansConfig { k, ..Self::default() }
    }
}

impl Default for KMeansConfig {
    fn default() -> Self {
        KMeansConfig {
            k: DEFAULT_VISUAL_PARENTS,
            seed: 0,
            max_iter: 300,
            tol: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct KMeansResult {
    pub assignments: Vec<usize>,
    /// `k` rows of length `dim`, row-major.
    pub centroids: Vec<f64>,
    pub objective: f64,
    /// Objective after every assignment step, ending with the final objective.
    pub history: Vec<f64>,
    pub iterations: usize,
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Lloyd's algorithm with k-means++ seeding.
///
/// Nearest-centroid ties go to the lower cluster index. A cluster left empty after an
/// assignment step is re-seeded with the point farthest from its centroid (taken from a
/// cluster that still has at least two members).
pub fn kmeans(table: &FeatureTable, cfg: &KMeansConfig) -> Result<KMeansResult> {
    let n = table.rows();
    let d = table.dim();
    let k = cfg.k;
    if k == 0 {
        return Err(Error::invalid("K-means needs K >= 1"));
    }
    if k > n {
        return Err(Error::invalid(format!("K={k} exceeds the number of rows N={n}")));
    }
    if cfg.max_iter == 0 {
        return Err(Error::invalid("max_iter must be positive"));
    }
    if cfg.tol.is_nan() || cfg.tol < 0.0 {
        return Err(Error::invalid("tol must be non-negative"));
    }

    let mut centroids = seed_plus_plus(table, k, cfg.seed);
    let mut assign = vec![0usize; n];
    let mut dists = vec![0.0; n];
    assign_nearest(table, &centroids, k, &mut assign, &mut dists);
    repair_empty(table, &mut centroids, k, &mut assign, &mut dists);
    let mut objective: f64 = dists.iter().sum();
    let mut history = vec![objective];
    let mut iterations = 0;

    while iterations < cfg.max_iter {
        iterations += 1;
        centroids = means(table, &assign, k);
        let mut next = vec![0usize; n];
        assign_nearest(table, &centroids, k, &mut next, &mut dists);
        repair_empty(table, &mut centroids, k, &mut next, &mut dists);
        let next_objective: f64 = dists.iter().sum();
        history.push(next_objective);
        let converged = next == assign || objective - next_objective <= cfg.tol;
        assign = next;
        objective = next_objective;
        if converged {
            break;
        }
    }

    centroids = means(table, &assign, k);
    objective = (0..n)
        .map(|i| sq_dist(table.row(i), &centroids[assign[i] * d..(assign[i] + 1) * d]))
        .sum();
    history.push(objective);

    Ok(KMeansResult {
        assignments: assign,
        centroids,
        objective,
        history,
        iterations,
    })
}

fn seed_plus_plus(table: &FeatureTable, k: usize, seed: u64) -> Vec<f64> {
    let n = table.rows();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut chosen = vec![rng.random_range(0..n)];
    let mut nearest: Vec<f64> = (0..n)
        .map(|i| sq_dist(table.row(i), table.row(chosen[0])))
        .collect();
    while chosen.len() < k {
        let total: f64 = nearest.iter().sum();
        let pick = if total > 0.0 {
            let target = rng.random::<f64>() * total;
            let mut acc = 0.0;
            let mut pick = None;
            for (i, &w) in nearest.iter().enumerate() {
                acc += w;
                if w > 0.0 && acc > target {
                    pick = Some(i);
                    break;
                }
            }
            // Rounding can leave `target` just above the accumulated sum.
            pick.unwrap_or_else(|| nearest.iter().rposition(|&w| w > 0.0).unwrap())
        } else {
            (0..n).find(|i| !chosen.contains(i)).unwrap()
        };
        chosen.push(pick);
        for (i, best) in nearest.iter_mut().enumerate() {
            *best = best.min(sq_dist(table.row(i), table.row(pick)));
        }
    }
    chosen.iter().flat_map(|&i| table.row(i).to_vec()).collect()
}

fn assign_nearest(
    table: &FeatureTable,
    centroids: &[f64],
    k: usize,
    assign: &mut [usize],
    dists: &mut [f64],
) {
    let d = table.dim();
    for i in 0..table.rows() {
        let row = table.row(i);
        let (mut best, mut best_d) = (0, f64::INFINITY);
        for c in 0..k {
            let dist = sq_dist(row, &centroids[c * d..(c + 1) * d]);
            if dist < best_d {
                best = c;
                best_d = dist;
            }
        }
        assign[i] = best;
        dists[i] = best_d;
    }
}

fn repair_empty(
    table: &FeatureTable,
    centroids: &mut [f64],
    k: usize,
    assign: &mut [usize],
    dists: &mut [f64],
) {
    let d = table.dim();
    let mut sizes = vec![0usize; k];
    for &a in assign.iter() {
        sizes[a] += 1;
    }
    for empty in 0..k {
        if sizes[empty] > 0 {
            continue;
        }
        let donor = (0..assign.len())
            .filter(|&i| sizes[assign[i]] > 1)
            .fold(None, |best: Option<usize>, i| match best {
                Some(b) if dists[b] >= dists[i] => Some(b),
                _ => Some(i),
            })
            .expect("K <= N guarantees a cluster with two members");
        sizes[assign[donor]] -= 1;
        sizes[empty] = 1;
        assign[donor] = empty;
        dists[donor] = 0.0;
        centroids[empty * d..(empty + 1) * d].copy_from_slice(table.row(donor));
    }
}

fn means(table: &FeatureTable, assign: &[usize], k: usize) -> Vec<f64> {
    let d = table.dim();
    let mut sums = vec![0.0; k * d];
    let mut counts = vec![0usize; k];
    for (i, &a) in assign.iter().enumerate() {
        counts[a] += 1;
        for (s, v) in sums[a * d..(a + 1) * d].iter_mut().zip(table.row(i)) {
            *s += v;
        }
    }
    for c in 0..k {
        let cnt = counts[c].max(1) as f64;
        for s in &mut sums[c * d..(c + 1) * d] {
            *s /= cnt;
        }
    }
    sums
}

/// Clusters per-class visual features into `cfg.k` parents.
pub fn build_visual_tree(table: &FeatureTable, cfg: &KMeansConfig) -> Result<ClassificationTree> {
    let result = kmeans(table, cfg)?;
    Ok(ClassificationTree::from_assignment("visual", cfg.k, result.assignments))
}

/// Averages each class's masks (resized to `grid`) into a shape vector in `[0,1]^(h*w)`.
pub fn mask_shape_vector(masks: &[RleMask], grid: (usize, usize)) -> Result<Vec<f64>> {
    if masks.is_empty() {
        return Err(Error::invalid("class has no masks"));
    }
    let mut acc = vec![0.0; grid.0 * grid.1];
    for m in masks {
        for (a, v) in acc.iter_mut().zip(m.resize_nearest(grid.0, grid.1)) {
            *a += v;
        }
    }
    let n = masks.len() as f64;
    acc.iter_mut().for_each(|a| *a /= n);
    Ok(acc)
}

/// Clusters per-class mean mask shapes into `cfg.k` parents. `masks[i]` holds class `i`'s masks.
pub fn build_geometric_tree(
    masks: &[Vec<RleMask>],
    grid: (usize, usize),
    cfg: &KMeansConfig,
) -> Result<ClassificationTree> {
    let rows = masks
        .iter()
        .enumerate()
        .map(|(class, m)| {
            mask_shape_vector(m, grid)
                .map_err(|_| Error::invalid(format!("class {class} has no masks")))
        })
        .collect::<Result<Vec<_>>>()?;
    let table = FeatureTable::from_rows(rows)?;
    let result = kmeans(&table, cfg)?;
    Ok(ClassificationTree::from_assignment("geometric", cfg.k, result.assignments))
}

/// A `category name -> parent name` map kept in file order, duplicates included.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Hierarchy {
    pub entries: Vec<(String, String)>,
}

impl<'de> Deserialize<'de> for Hierarchy {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        struct PairVisitor;
        impl<'de> Visitor<'de> for PairVisitor {
            type Value = Hierarchy;
            fn expecting(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str("a map of category name to parent name")
            }
            fn visit_map<A: MapAccess<'de>>(self, mut map: A) -> std::result::Result<Hierarchy, A::Error> {
                let mut entries = Vec::new();
                while let Some((k, v)) = map.next_entry::<String, String>()? {
                    entries.push((k, v));
                }
                Ok(Hierarchy { entries })
            }
        }
        d.deserialize_map(PairVisitor)
    }
}

impl serde::Serialize for Hierarchy {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        use serde::ser::SerializeMap;
        let mut map = s.serialize_map(Some(self.entries.len()))?;
        for (k, v) in &self.entries {
            map.serialize_entry(k, v)?;
        }
        map.end()
    }
}

/// Builds the lexical tree. Parents are numbered in order of first appearance in the file
/// among entries naming a known category; entries for unknown names are ignored.
pub fn build_lexical_tree(hierarchy: &Hierarchy, categories: &CategorySet) -> Result<ClassificationTree> {
    let mut parent_of: HashMap<&str, &str> = HashMap::new();
    let mut parent_names: Vec<String> = Vec::new();
    let mut parent_index: HashMap<&str, usize> = HashMap::new();
    for (name, parent) in &hierarchy.entries {
        if categories.position_of(name).is_none() {
            continue;
        }
        match parent_of.get(name.as_str()) {
            Some(&existing) if existing != parent => {
                return Err(Error::invalid(format!(
                    "category `{name}` mapped to two parents: `{existing}` and `{parent}`"
                )));
            }
            Some(_) => continue,
            None => {
                parent_of.insert(name, parent);
            }
        }
        if !parent_index.contains_key(parent.as_str()) {
            parent_index.insert(parent, parent_names.len());
            parent_names.push(parent.clone());
        }
    }
    let leaf_parent = categories
        .iter()
        .map(|c| {
            parent_of
                .get(c.name.as_str())
                .map(|p| parent_index[p])
                .ok_or_else(|| Error::invalid(format!("category `{}` missing from hierarchy", c.name)))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ClassificationTree {
        tree_id: "lexical".to_string(),
        num_parents: parent_names.len(),
        parent_names,
        leaf_parent,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::taxonomy::{validate_tree, CategoryRecord};

    fn cats(names: &[&str]) -> CategorySet {
        CategorySet::from_records(
            names
                .iter()
                .enumerate()
                .map(|(id, n)| CategoryRecord { id, name: n.to_string(), cf: 50, group: None })
                .collect(),
            false,
        )
        .unwrap()
    }

    #[test]
    fn identical_pair_single_cluster() {
        let t = FeatureTable::from_rows(vec![vec![1.0, 2.0], vec![1.0, 2.0]]).unwrap();
        let r = kmeans(&t, &KMeansConfig::with_k(1)).unwrap();
        assert_eq!(r.assignments, vec![0, 0]);
        assert_eq!(r.objective, 0.0);
    }

    #[test]
    fn identical_points_with_two_clusters_stay_nonempty() {
        let t = FeatureTable::from_rows(vec![vec![3.0], vec![3.0], vec![3.0]]).unwrap();
        let r = kmeans(&t, &KMeansConfig::with_k(2)).unwrap();
        let mut sizes = [0; 2];
        r.assignments.iter().for_each(|&a| sizes[a] += 1);
        assert!(sizes.iter().all(|&s| s > 0));
        assert_eq!(r.objective, 0.0);
    }

    #[test]
    fn four_point_fixture() {
        let t = FeatureTable::from_rows(vec![
            vec![0.0, 0.0],
            vec![0.0, 1.0],
            vec![10.0, 10.0],
            vec![10.0, 11.0],
        ])
        .unwrap();
        for seed in 0..10 {
            let r = kmeans(&t, &KMeansConfig { k: 2, seed, ..Default::default() }).unwrap();
            assert_eq!(r.assignments[0], r.assignments[1]);
            assert_eq!(r.assignments[2], r.assignments[3]);
            assert_ne!(r.assignments[0], r.assignments[2]);
            assert!((r.objective - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn k_equals_n_gives_identity_partition() {
        let rows: Vec<Vec<f64>> = (0..8).map(|i| vec![i as f64 * 3.0, (i * i) as f64]).collect();
        let t = FeatureTable::from_rows(rows).unwrap();
        let r = kmeans(&t, &KMeansConfig::with_k(8)).unwrap();
        let mut seen = r.assignments.clone();
        seen.sort();
        seen.dedup();
        assert_eq!(seen.len(), 8);
        assert_eq!(r.objective, 0.0);
    }

    #[test]
    fn rejects_bad_inputs() {
        assert!(FeatureTable::from_rows(vec![vec![f64::NAN]]).is_err());
        let t = FeatureTable::from_rows(vec![vec![0.0], vec![1.0]]).unwrap();
        assert!(kmeans(&t, &KMeansConfig::with_k(3)).is_err());
        assert!(kmeans(&t, &KMeansConfig::with_k(0)).is_err());
    }

    #[test]
    fn geometric_tree_separates_full_and_empty_masks() {
        let ones = RleMask::from_bits(2, 2, &[true; 4]).unwrap();
        let zeros = RleMask::from_bits(2, 2, &[false; 4]).unwrap();
        let masks = vec![vec![ones.clone(), ones], vec![zeros.clone(), zeros]];
        let tree = build_geometric_tree(&masks, (2, 2), &KMeansConfig::with_k(2)).unwrap();
        assert_eq!(tree.tree_id, "geometric");
        assert_ne!(tree.leaf_parent[0], tree.leaf_parent[1]);
        assert!(validate_tree(&tree, 2).is_ok());
    }

    #[test]
    fn geometric_identical_masks_single_parent() {
        let m = RleMask::from_bits(3, 3, &[true, false, true, false, true, false, true, false, true]).unwrap();
        let masks = vec![vec![m.clone()], vec![m]];
        let tree = build_geometric_tree(&masks, (3, 3), &KMeansConfig::with_k(1)).unwrap();
        assert_eq!(tree.leaf_parent, vec![0, 0]);
    }

    #[test]
    fn mixed_masks_average_to_half() {
        let ones = RleMask::from_bits(2, 2, &[true; 4]).unwrap();
        let zeros = RleMask::from_bits(2, 2, &[false; 4]).unwrap();
        assert_eq!(mask_shape_vector(&[ones, zeros], (2, 2)).unwrap(), vec![0.5; 4]);
        assert!(mask_shape_vector(&[], (2, 2)).is_err());
        assert!(build_geometric_tree(&[vec![]], (2, 2), &KMeansConfig::with_k(1)).is_err());
    }

    #[test]
    fn lexical_tree_from_hierarchy() {
        let h: Hierarchy = serde_json::from_str(
            r#"{"sedan": "vehicle", "school_bus": "vehicle", "toy": "plaything"}"#,
        )
        .unwrap();
        let tree = build_lexical_tree(&h, &cats(&["sedan", "school_bus", "toy"])).unwrap();
        assert_eq!(tree.num_parents, 2);
        assert_eq!(tree.parent_names, vec!["vehicle", "plaything"]);
        assert_eq!(tree.leaf_parent, vec![0, 0, 1]);
        assert_eq!(tree.tree_id, "lexical");
    }

    #[test]
    fn lexical_single_parent_and_errors() {
        let h: Hierarchy = serde_json::from_str(r#"{"a": "entity", "b": "entity"}"#).unwrap();
        assert_eq!(build_lexical_tree(&h, &cats(&["a", "b"])).unwrap().num_parents, 1);

        let err = build_lexical_tree(&h, &cats(&["a", "b", "c"])).unwrap_err();
        assert!(err.to_string().contains("`c`"), "{err}");

        let dup: Hierarchy = serde_json::from_str(r#"{"a": "x", "b": "x", "a": "y"}"#).unwrap();
        assert!(build_lexical_tree(&dup, &cats(&["a", "b"])).is_err());
    }
}
