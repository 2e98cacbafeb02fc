//! Category metadata and the three-level classification tree / forest structures.
//!
//! A tree is root -> `M` parent classes -> `N` leaves. Leaves are identified by their
//! integer index into the [`CategorySet`]; names are carried as metadata only.

use std::collections::BTreeSet;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Frequency group of a category. Ordered `Rare < Common < Frequent`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Group {
    Rare,
    Common,
    Frequent,
}

impl Group {
    pub const ALL: [Group; 3] = [Group::Rare, Group::Common, Group::Frequent];

    pub fn as_str(self) -> &'static str {
        match self {
            Group::Rare => "rare",
            Group::Common => "common",
            Group::Frequent => "frequent",
        }
    }
}

impl fmt::Display for Group {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Maps a category frequency (number of images containing the class) to its group:
/// 1..=10 rare, 11..=100 common, above 100 frequent.
pub fn assign_group(cf: u64) -> Result<Group> {
    match cf {
        0 => Err(Error::UnseenCategory),
        1..=10 => Ok(Group::Rare),
        11..=100 => Ok(Group::Common),
        _ => Ok(Group::Frequent),
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Category {
    pub id: usize,
    pub name: String,
    pub cf: u64,
    pub group: Group,
}

/// One line of a category file. `group` is optional and, when present, overrides derivation.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CategoryRecord {
    pub id: usize,
    pub name: String,
    pub cf: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub group: Option<Group>,
}

impl From<&Category> for CategoryRecord {
    fn from(c: &Category) -> Self {
        CategoryRecord {
            id: c.id,
            name: c.name.clone(),
            cf: c.cf,
            group: Some(c.group),
        }
    }
}

/// Minimum and maximum category frequency inside one group.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FrequencyRange {
    pub min: u64,
    pub max: u64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct GroupStats {
    pub rare: Option<FrequencyRange>,
    pub common: Option<FrequencyRange>,
    pub frequent: Option<FrequencyRange>,
}

impl GroupStats {
    pub fn get(&self, group: Group) -> Option<FrequencyRange> {
        match group {
            Group::Rare => self.rare,
            Group::Common => self.common,
            Group::Frequent => self.frequent,
        }
    }

    fn slot(&mut self, group: Group) -> &mut Option<FrequencyRange> {
        match group {
            Group::Rare => &mut self.rare,
            Group::Common => &mut self.common,
            Group::Frequent => &mut self.frequent,
        }
    }
}

/// The `N` fine-grained classes, indexed densely by id.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CategorySet {
    categories: Vec<Category>,
}

impl CategorySet {
    /// Builds a set from category-file records.
    ///
    /// Records may come in any order but their ids must be exactly `0..N`. A missing group is
    /// derived from `cf`. With `strict`, a supplied group is re-derived and a mismatch is an error.
    pub fn from_records(records: Vec<CategoryRecord>, strict: bool) -> Result<Self> {
        let categories = records
            .into_iter()
            .map(|r| {
                let group = match r.group {
                    Some(g) if strict => {
                        let derived = assign_group(r.cf)?;
                        if derived != g {
                            return Err(Error::invalid(format!(
                                "category {} ({}): group `{g}` does not match cf={} (expected `{derived}`)",
                                r.id, r.name, r.cf
                            )));
                        }
                        g
                    }
                    Some(g) => g,
                    None => assign_group(r.cf).map_err(|_| {
                        Error::invalid(format!(
                            "category {} ({}) has cf=0 and no explicit group",
                            r.id, r.name
                        ))
                    })?,
                };
                Ok(Category {
                    id: r.id,
                    name: r.name,
                    cf: r.cf,
                    group,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(categories)
    }

    pub fn new(mut categories: Vec<Category>) -> Result<Self> {
        if categories.is_empty() {
            return Err(Error::invalid("category set is empty"));
        }
        categories.sort_by_key(|c| c.id);
        for (expected, c) in categories.iter().enumerate() {
            if c.id != expected {
                return Err(Error::invalid(format!(
                    "category ids must be dense 0..{}; found id {} at position {expected}",
                    categories.len(),
                    c.id
                )));
            }
        }
        Ok(CategorySet { categories })
    }

    pub fn len(&self) -> usize {
        self.categories.len()
    }

    pub fn is_empty(&self) -> bool {
        self.categories.is_empty()
    }

    pub fn get(&self, id: usize) -> Option<&Category> {
        self.categories.get(id)
    }

    pub fn iter(&self) -> std::slice::Iter<'_, Category> {
        self.categories.iter()
    }

    pub fn categories(&self) -> &[Category] {
        &self.categories
    }

    pub fn group_of(&self, id: usize) -> Option<Group> {
        self.get(id).map(|c| c.group)
    }

    pub fn position_of(&self, name: &str) -> Option<usize> {
        self.categories.iter().position(|c| c.name == name)
    }

    pub fn group_stats(&self) -> GroupStats {
        let mut stats = GroupStats::default();
        for c in &self.categories {
            let slot = stats.slot(c.group);
            *slot = Some(match *slot {
                None => FrequencyRange { min: c.cf, max: c.cf },
                Some(r) => FrequencyRange {
                    min: r.min.min(c.cf),
                    max: r.max.max(c.cf),
                },
            });
        }
        stats
    }

    pub fn to_records(&self) -> Vec<CategoryRecord> {
        self.categories.iter().map(CategoryRecord::from).collect()
    }
}

/// A three-level classification tree over `N` leaves.
///
/// `leaf_parent[i]` is the parent index of leaf `i`. The file form uses the key `M` for the
/// parent count.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassificationTree {
    pub tree_id: String,
    #[serde(rename = "M")]
    pub num_parents: usize,
    pub parent_names: Vec<String>,
    pub leaf_parent: Vec<usize>,
}

impl ClassificationTree {
    /// Builds a tree from a leaf -> parent assignment, naming parents `<tree_id>_<j>`.
    pub fn from_assignment(tree_id: &str, num_parents: usize, leaf_parent: Vec<usize>) -> Self {
        ClassificationTree {
            tree_id: tree_id.to_string(),
            num_parents,
            parent_names: (0..num_parents).map(|j| format!("{tree_id}_{j}")).collect(),
            leaf_parent,
        }
    }

    pub fn num_leaves(&self) -> usize {
        self.leaf_parent.len()
    }

    pub fn parent_of(&self, leaf: usize) -> Option<usize> {
        self.leaf_parent.get(leaf).copied()
    }

    /// Number of leaves under each parent.
    pub fn parent_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.num_parents];
        for &p in &self.leaf_parent {
            if p < sizes.len() {
                sizes[p] += 1;
            }
        }
        sizes
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum TreeViolation {
    NoParents,
    TooManyParents { parents: usize, leaves: usize },
    ParentNameCount { names: usize, parents: usize },
    LeafUnassigned(usize),
    ExtraLeaf(usize),
    ParentOutOfRange { leaf: usize, parent: usize },
    ParentEmpty(usize),
}

impl fmt::Display for TreeViolation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TreeViolation::NoParents => write!(f, "tree has no parents"),
            TreeViolation::TooManyParents { parents, leaves } => {
                write!(f, "M={parents} exceeds N={leaves}")
            }
            TreeViolation::ParentNameCount { names, parents } => {
                write!(f, "{names} parent names for M={parents}")
            }
            TreeViolation::LeafUnassigned(i) => write!(f, "leaf {i} unassigned"),
            TreeViolation::ExtraLeaf(i) => write!(f, "leaf {i} beyond N"),
            TreeViolation::ParentOutOfRange { leaf, parent } => {
                write!(f, "leaf {leaf} maps to out-of-range parent {parent}")
            }
            TreeViolation::ParentEmpty(j) => write!(f, "parent {j} empty"),
        }
    }
}

/// Checks every structural invariant of `tree` against `n` leaves, reporting all violations.
pub fn validate_tree(tree: &ClassificationTree, n: usize) -> Result<(), Vec<TreeViolation>> {
    let mut violations = Vec::new();
    let m = tree.num_parents;
    if m == 0 {
        violations.push(TreeViolation::NoParents);
    }
    if m > n {
        violations.push(TreeViolation::TooManyParents { parents: m, leaves: n });
    }
    if tree.parent_names.len() != m {
        violations.push(TreeViolation::ParentNameCount {
            names: tree.parent_names.len(),
            parents: m,
        });
    }
    for leaf in tree.leaf_parent.len()..n {
        violations.push(TreeViolation::LeafUnassigned(leaf));
    }
    for leaf in n..tree.leaf_parent.len() {
        violations.push(TreeViolation::ExtraLeaf(leaf));
    }
    let mut sizes = vec![0usize; m];
    for (leaf, &parent) in tree.leaf_parent.iter().enumerate() {
        match sizes.get_mut(parent) {
            Some(s) => *s += 1,
            None => violations.push(TreeViolation::ParentOutOfRange { leaf, parent }),
        }
    }
    for (j, &s) in sizes.iter().enumerate() {
        if s == 0 {
            violations.push(TreeViolation::ParentEmpty(j));
        }
    }
    if violations.is_empty() {
        Ok(())
    } else {
        Err(violations)
    }
}

/// Like [`validate_tree`] but folds the violations into an [`Error`].
pub fn check_tree(tree: &ClassificationTree, n: usize) -> Result<()> {
    validate_tree(tree, n).map_err(|violations| Error::InvalidTree {
        tree_id: tree.tree_id.clone(),
        violations,
    })
}

/// Mask-head channel holding the mask of `class_id`: its parent in the geometric tree.
pub fn geo_mask_channel(class_id: usize, geo_tree: &ClassificationTree) -> Result<usize> {
    geo_tree.parent_of(class_id).ok_or(Error::ClassOutOfRange {
        class_id,
        n: geo_tree.num_leaves(),
    })
}

/// `T >= 1` trees over a shared leaf set, with unique tree ids.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Forest {
    trees: Vec<ClassificationTree>,
    num_leaves: usize,
}

impl Forest {
    pub fn new(trees: Vec<ClassificationTree>, num_leaves: usize) -> Result<Self> {
        if trees.is_empty() {
            return Err(Error::invalid("forest needs at least one tree"));
        }
        let mut seen = BTreeSet::new();
        for t in &trees {
            if !seen.insert(t.tree_id.as_str()) {
                return Err(Error::invalid(format!("duplicate tree_id `{}`", t.tree_id)));
            }
            check_tree(t, num_leaves)?;
        }
        Ok(Forest { trees, num_leaves })
    }

    pub fn trees(&self) -> &[ClassificationTree] {
        &self.trees
    }

    pub fn len(&self) -> usize {
        self.trees.len()
    }

    pub fn is_empty(&self) -> bool {
        self.trees.is_empty()
    }

    pub fn num_leaves(&self) -> usize {
        self.num_leaves
    }

    pub fn tree(&self, tree_id: &str) -> Option<&ClassificationTree> {
        self.trees.iter().find(|t| t.tree_id == tree_id)
    }
}
