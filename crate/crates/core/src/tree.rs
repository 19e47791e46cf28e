//! Binary-feature CART classifier used as the surrogate policy.
//!
//! Splits minimise weighted Gini impurity. Impurity comparisons are done in
//! exact integer arithmetic so that ties resolve deterministically to the
//! smallest feature index.

use std::cmp::Ordering;
use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::env::{Action, Role};
use crate::features::{FeatureError, FeatureId, FeatureVector, FEATURE_SCHEMA_VERSION, NUM_FEATURES};

pub const TREE_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum TreeError {
    #[error("cannot fit a tree to an empty dataset")]
    EmptyDataset,
    #[error("dataset rows mix feature schema versions")]
    MixedSchema,
    #[error(transparent)]
    Feature(#[from] FeatureError),
    #[error("invalid tree: {0}")]
    Invalid(String),
}

pub type ClassCounts = [u32; Action::COUNT];

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Node {
    Internal {
        feature: FeatureId,
        false_child: usize,
        true_child: usize,
    },
    Leaf {
        action: Action,
        class_counts: ClassCounts,
    },
}

/// Majority class; ties go to the earliest action in declaration order.
pub fn majority(counts: &ClassCounts) -> Action {
    let best = counts
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.cmp(b.1).then(b.0.cmp(&a.0)))
        .map(|(i, _)| i)
        .unwrap_or(Action::NoOp.index());
    Action::from_index(best).expect("index in range")
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "TreeFile", into = "TreeFile")]
pub struct DecisionTree {
    pub nodes: Vec<Node>,
    pub root: usize,
    pub role: Role,
    pub feature_schema_version: u32,
    pub max_depth: usize,
}

impl DecisionTree {
    /// Builds a tree from parts and checks every structural invariant.
    pub fn from_parts(nodes: Vec<Node>, root: usize, role: Role, max_depth: usize) -> Result<Self, TreeError> {
        let tree = Self {
            nodes,
            root,
            role,
            feature_schema_version: FEATURE_SCHEMA_VERSION,
            max_depth,
        };
        tree.validate()?;
        Ok(tree)
    }

    pub fn leaf(role: Role, action: Action) -> Self {
        let mut class_counts = [0; Action::COUNT];
        class_counts[action.index()] = 1;
        Self {
            nodes: vec![Node::Leaf { action, class_counts }],
            root: 0,
            role,
            feature_schema_version: FEATURE_SCHEMA_VERSION,
            max_depth: 0,
        }
    }

    /// Node ids visited from the root down to the leaf for `fv`.
    pub fn trace(&self, fv: &FeatureVector) -> Result<Vec<usize>, TreeError> {
        fv.check_schema(self.feature_schema_version)?;
        let mut ids = vec![self.root];
        let mut at = self.root;
        while let Node::Internal {
            feature,
            false_child,
            true_child,
        } = &self.nodes[at]
        {
            at = if fv.get(*feature) { *true_child } else { *false_child };
            ids.push(at);
        }
        Ok(ids)
    }

    pub fn predict(&self, fv: &FeatureVector) -> Result<Action, TreeError> {
        let ids = self.trace(fv)?;
        match &self.nodes[*ids.last().expect("non-empty trace")] {
            Node::Leaf { action, .. } => Ok(*action),
            Node::Internal { .. } => unreachable!("trace ends at a leaf"),
        }
    }

    /// Depth of the deepest leaf.
    pub fn depth(&self) -> usize {
        let mut deepest = 0;
        let mut stack = vec![(self.root, 0usize)];
        while let Some((id, d)) = stack.pop() {
            match &self.nodes[id] {
                Node::Leaf { .. } => deepest = deepest.max(d),
                Node::Internal {
                    false_child, true_child, ..
                } => {
                    stack.push((*false_child, d + 1));
                    stack.push((*true_child, d + 1));
                }
            }
        }
        deepest
    }

    pub fn leaf_count(&self) -> usize {
        self.nodes.iter().filter(|n| matches!(n, Node::Leaf { .. })).count()
    }

    pub fn validate(&self) -> Result<(), TreeError> {
        let invalid = |msg: String| Err(TreeError::Invalid(msg));
        if self.feature_schema_version != FEATURE_SCHEMA_VERSION {
            return Err(FeatureError::SchemaMismatch {
                expected: FEATURE_SCHEMA_VERSION,
                found: self.feature_schema_version,
            }
            .into());
        }
        if self.root >= self.nodes.len() {
            return invalid(format!("root {} out of range", self.root));
        }
        let mut seen = vec![false; self.nodes.len()];
        // (node, depth, features on the path above)
        let mut stack = vec![(self.root, 0usize, Vec::<FeatureId>::new())];
        while let Some((id, depth, path)) = stack.pop() {
            if id >= self.nodes.len() {
                return invalid(format!("child {id} out of range"));
            }
            if std::mem::replace(&mut seen[id], true) {
                return invalid(format!("node {id} reachable twice"));
            }
            if depth > self.max_depth {
                return invalid(format!("node {id} at depth {depth} exceeds max depth {}", self.max_depth));
            }
            match &self.nodes[id] {
                Node::Internal {
                    feature,
                    false_child,
                    true_child,
                } => {
                    if feature.index() >= NUM_FEATURES {
                        return invalid(format!("node {id} tests unknown feature {}", feature.index()));
                    }
                    if path.contains(feature) {
                        return invalid(format!("feature {} tested twice on one path", feature.index()));
                    }
                    let mut below = path;
                    below.push(*feature);
                    stack.push((*false_child, depth + 1, below.clone()));
                    stack.push((*true_child, depth + 1, below));
                }
                Node::Leaf { action, class_counts } => {
                    if class_counts.iter().any(|&c| c > 0) && majority(class_counts) != *action {
                        return invalid(format!("leaf {id} action disagrees with its class counts"));
                    }
                }
            }
        }
        if let Some(orphan) = seen.iter().position(|s| !s) {
            return invalid(format!("node {orphan} is unreachable"));
        }
        Ok(())
    }
}

/// Labelled feature vectors for one role.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub role: Role,
    pub rows: Vec<(FeatureVector, Action)>,
}

impl Dataset {
    pub fn new(role: Role) -> Self {
        Self { role, rows: Vec::new() }
    }

    pub fn push(&mut self, fv: FeatureVector, action: Action) {
        self.rows.push((fv, action));
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }
}

/// Greedy top-down induction limits.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FitParams {
    pub max_depth: usize,
    pub min_samples_leaf: usize,
}

impl FitParams {
    /// No depth limit beyond the number of features, single-sample leaves.
    pub fn unlimited() -> Self {
        Self {
            max_depth: NUM_FEATURES,
            min_samples_leaf: 1,
        }
    }
}

/// Sum of squared class counts over side size, as an exact fraction `num / den`.
/// Larger means purer; maximising `sq_t / n_t + sq_f / n_f` minimises weighted Gini.
#[derive(Debug, Clone, Copy)]
struct Purity {
    num: u128,
    den: u128,
}

impl Purity {
    fn of(t: &ClassCounts, n_t: u64, f: &ClassCounts, n_f: u64) -> Self {
        let sq = |c: &ClassCounts| c.iter().map(|&x| (x as u128) * (x as u128)).sum::<u128>();
        let (n_t, n_f) = (n_t as u128, n_f as u128);
        Purity {
            num: sq(t) * n_f + sq(f) * n_t,
            den: n_t * n_f,
        }
    }

    fn cmp(&self, other: &Purity) -> Ordering {
        (self.num * other.den).cmp(&(other.num * self.den))
    }
}

/// Weighted Gini impurity of a binary split, `(n_t g_t + n_f g_f) / n`.
pub fn weighted_gini(true_counts: &ClassCounts, false_counts: &ClassCounts) -> f64 {
    let side = |c: &ClassCounts| {
        let n: u64 = c.iter().map(|&x| x as u64).sum();
        if n == 0 {
            return (0.0, 0.0);
        }
        let g = 1.0 - c.iter().map(|&x| (x as f64 / n as f64).powi(2)).sum::<f64>();
        (n as f64, g)
    };
    let (nt, gt) = side(true_counts);
    let (nf, gf) = side(false_counts);
    if nt + nf == 0.0 {
        0.0
    } else {
        (nt * gt + nf * gf) / (nt + nf)
    }
}

struct Builder<'a> {
    rows: &'a [(FeatureVector, Action)],
    params: FitParams,
    nodes: Vec<Node>,
}

impl Builder<'_> {
    fn counts(&self, ids: &[usize]) -> ClassCounts {
        let mut c = [0; Action::COUNT];
        for &i in ids {
            c[self.rows[i].1.index()] += 1;
        }
        c
    }

    fn best_split(&self, ids: &[usize], total: &ClassCounts) -> Option<FeatureId> {
        let mut on = vec![[0u32; Action::COUNT]; NUM_FEATURES];
        for &i in ids {
            let (fv, a) = &self.rows[i];
            let mut bits = fv.raw();
            while bits != 0 {
                let f = bits.trailing_zeros() as usize;
                on[f][a.index()] += 1;
                bits &= bits - 1;
            }
        }
        let n = ids.len() as u64;
        let min_leaf = self.params.min_samples_leaf.max(1) as u64;
        let mut best: Option<(FeatureId, Purity)> = None;
        for (f, t) in on.iter().enumerate() {
            let n_t: u64 = t.iter().map(|&x| x as u64).sum();
            let n_f = n - n_t;
            if n_t < min_leaf || n_f < min_leaf {
                continue;
            }
            let mut fc = *total;
            for (k, v) in fc.iter_mut().enumerate() {
                *v -= t[k];
            }
            let p = Purity::of(t, n_t, &fc, n_f);
            if best.as_ref().is_none_or(|(_, b)| p.cmp(b) == Ordering::Greater) {
                best = Some((FeatureId::new(f).expect("in range"), p));
            }
        }
        best.map(|(f, _)| f)
    }

    fn grow(&mut self, ids: Vec<usize>, depth: usize) -> usize {
        let counts = self.counts(&ids);
        let pure = counts.iter().filter(|&&c| c > 0).count() <= 1;
        let split = if pure || depth >= self.params.max_depth {
            None
        } else {
            self.best_split(&ids, &counts)
        };
        let id = self.nodes.len();
        let Some(feature) = split else {
            self.nodes.push(Node::Leaf {
                action: majority(&counts),
                class_counts: counts,
            });
            return id;
        };
        // placeholder, children filled in below
        self.nodes.push(Node::Leaf {
            action: Action::NoOp,
            class_counts: counts,
        });
        let (on, off): (Vec<usize>, Vec<usize>) = ids.into_iter().partition(|&i| self.rows[i].0.get(feature));
        let false_child = self.grow(off, depth + 1);
        let true_child = self.grow(on, depth + 1);
        self.nodes[id] = Node::Internal {
            feature,
            false_child,
            true_child,
        };
        id
    }
}

/// Fits a classification tree with greedy Gini splits over the 100 binary features.
pub fn fit_tree(data: &Dataset, params: FitParams) -> Result<DecisionTree, TreeError> {
    let first = data.rows.first().ok_or(TreeError::EmptyDataset)?;
    let schema = first.0.schema_version;
    if data.rows.iter().any(|(fv, _)| fv.schema_version != schema) {
        return Err(TreeError::MixedSchema);
    }
    let mut b = Builder {
        rows: &data.rows,
        params,
        nodes: Vec::new(),
    };
    let root = b.grow((0..data.rows.len()).collect(), 0);
    Ok(DecisionTree {
        nodes: b.nodes,
        root,
        role: data.role,
        feature_schema_version: schema,
        max_depth: params.max_depth,
    })
}

pub fn tree_predict(tree: &DecisionTree, fv: &FeatureVector) -> Result<Action, TreeError> {
    tree.predict(fv)
}

// Persisted form: explicit node list with kind tags.

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
enum NodeRecord {
    Internal {
        id: usize,
        feature: usize,
        false_child: usize,
        true_child: usize,
    },
    Leaf {
        id: usize,
        action: Action,
        class_counts: BTreeMap<Action, u32>,
    },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct TreeFile {
    format_version: u32,
    feature_schema_version: u32,
    role: Role,
    max_depth: usize,
    root: usize,
    nodes: Vec<NodeRecord>,
}

impl From<DecisionTree> for TreeFile {
    fn from(t: DecisionTree) -> Self {
        let nodes = t
            .nodes
            .into_iter()
            .enumerate()
            .map(|(id, n)| match n {
                Node::Internal {
                    feature,
                    false_child,
                    true_child,
                } => NodeRecord::Internal {
                    id,
                    feature: feature.index(),
                    false_child,
                    true_child,
                },
                Node::Leaf { action, class_counts } => NodeRecord::Leaf {
                    id,
                    action,
                    class_counts: class_counts
                        .iter()
                        .enumerate()
                        .filter(|(_, &c)| c > 0)
                        .map(|(i, &c)| (Action::from_index(i).expect("in range"), c))
                        .collect(),
                },
            })
            .collect();
        TreeFile {
            format_version: TREE_FORMAT_VERSION,
            feature_schema_version: t.feature_schema_version,
            role: t.role,
            max_depth: t.max_depth,
            root: t.root,
            nodes,
        }
    }
}

impl TryFrom<TreeFile> for DecisionTree {
    type Error = TreeError;

    fn try_from(f: TreeFile) -> Result<Self, Self::Error> {
        if f.format_version != TREE_FORMAT_VERSION {
            return Err(TreeError::Invalid(format!("unsupported tree format version {}", f.format_version)));
        }
        let mut nodes = Vec::with_capacity(f.nodes.len());
        for (pos, rec) in f.nodes.into_iter().enumerate() {
            let node = match rec {
                NodeRecord::Internal {
                    id,
                    feature,
                    false_child,
                    true_child,
                } => {
                    if id != pos {
                        return Err(TreeError::Invalid(format!("node id {id} listed at position {pos}")));
                    }
                    Node::Internal {
                        feature: FeatureId::new(feature)?,
                        false_child,
                        true_child,
                    }
                }
                NodeRecord::Leaf {
                    id,
                    action,
                    class_counts,
                } => {
                    if id != pos {
                        return Err(TreeError::Invalid(format!("node id {id} listed at position {pos}")));
                    }
                    let mut counts = [0; Action::COUNT];
                    for (a, c) in class_counts {
                        counts[a.index()] = c;
                    }
                    Node::Leaf {
                        action,
                        class_counts: counts,
                    }
                }
            };
            nodes.push(node);
        }
        let tree = DecisionTree {
            nodes,
            root: f.root,
            role: f.role,
            feature_schema_version: f.feature_schema_version,
            max_depth: f.max_depth,
        };
        tree.validate()?;
        Ok(tree)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fv(bits: &[usize]) -> FeatureVector {
        let mut v = FeatureVector::zeros();
        for &b in bits {
            v.set(FeatureId::new(b).unwrap(), true);
        }
        v
    }

    #[test]
    fn single_label_gives_single_leaf() {
        let mut d = Dataset::new(Role::Engineer);
        for i in 0..10 {
            d.push(fv(&[i]), Action::MoveEast);
        }
        let t = fit_tree(&d, FitParams::unlimited()).unwrap();
        assert_eq!(t.depth(), 0);
        assert_eq!(t.predict(&fv(&[50])).unwrap(), Action::MoveEast);
    }

    #[test]
    fn xor_needs_depth_two() {
        let mut d = Dataset::new(Role::Medic);
        for (a, b) in [(false, false), (false, true), (true, false), (true, true)] {
            let bits: Vec<usize> = [(a, 0), (b, 1)].iter().filter(|(on, _)| *on).map(|(_, i)| *i).collect();
            d.push(fv(&bits), if a ^ b { Action::MoveNorth } else { Action::MoveSouth });
        }
        let t = fit_tree(&d, FitParams::unlimited()).unwrap();
        assert_eq!(t.depth(), 2);
        for (x, y) in &d.rows {
            assert_eq!(t.predict(x).unwrap(), *y);
        }
    }

    #[test]
    fn empty_dataset_is_an_error() {
        assert_eq!(
            fit_tree(&Dataset::new(Role::Medic), FitParams::unlimited()),
            Err(TreeError::EmptyDataset)
        );
    }

    #[test]
    fn majority_ties_break_by_action_order() {
        let mut c = [0; Action::COUNT];
        c[Action::NoOp.index()] = 3;
        c[Action::MoveEast.index()] = 3;
        assert_eq!(majority(&c), Action::MoveEast);
    }

    #[test]
    fn depth_limit_is_respected() {
        let mut d = Dataset::new(Role::Engineer);
        for i in 0..40 {
            d.push(fv(&[i]), Action::from_index(i % 5).unwrap());
        }
        let params = FitParams {
            max_depth: 3,
            min_samples_leaf: 1,
        };
        let t = fit_tree(&d, params).unwrap();
        assert!(t.depth() <= 3);
        t.validate().unwrap();
    }

    #[test]
    fn hand_built_tree_follows_bits() {
        let t = DecisionTree::from_parts(
            vec![
                Node::Internal {
                    feature: FeatureId::new(7).unwrap(),
                    false_child: 1,
                    true_child: 2,
                },
                Node::Leaf {
                    action: Action::MoveWest,
                    class_counts: [0; Action::COUNT],
                },
                Node::Leaf {
                    action: Action::RemoveRubble,
                    class_counts: [0; Action::COUNT],
                },
            ],
            0,
            Role::Engineer,
            1,
        )
        .unwrap();
        assert_eq!(t.predict(&fv(&[7])).unwrap(), Action::RemoveRubble);
        assert_eq!(t.predict(&fv(&[8])).unwrap(), Action::MoveWest);
        let mut wrong = fv(&[7]);
        wrong.schema_version = 3;
        assert!(matches!(t.predict(&wrong), Err(TreeError::Feature(FeatureError::SchemaMismatch { .. }))));
    }

    #[test]
    fn loading_rejects_broken_trees() {
        let leaf = || Node::Leaf {
            action: Action::NoOp,
            class_counts: [0; Action::COUNT],
        };
        let f = FeatureId::new(3).unwrap();
        // repeated feature on one path
        let nodes = vec![
            Node::Internal {
                feature: f,
                false_child: 1,
                true_child: 2,
            },
            Node::Internal {
                feature: f,
                false_child: 3,
                true_child: 4,
            },
            leaf(),
            leaf(),
            leaf(),
        ];
        assert!(DecisionTree::from_parts(nodes, 0, Role::Medic, 5).is_err());
        // cycle
        let nodes = vec![Node::Internal {
            feature: f,
            false_child: 0,
            true_child: 0,
        }];
        assert!(DecisionTree::from_parts(nodes, 0, Role::Medic, 5).is_err());
        // orphan
        assert!(DecisionTree::from_parts(vec![leaf(), leaf()], 0, Role::Medic, 5).is_err());
        // too deep
        let nodes = vec![
            Node::Internal {
                feature: f,
                false_child: 1,
                true_child: 2,
            },
            leaf(),
            leaf(),
        ];
        assert!(DecisionTree::from_parts(nodes, 0, Role::Medic, 0).is_err());
    }

    #[test]
    fn json_round_trip_and_validation() {
        let mut d = Dataset::new(Role::Engineer);
        for i in 0..30 {
            d.push(fv(&[i % 7, 20 + i % 3]), Action::from_index(i % 4).unwrap());
        }
        let t = fit_tree(&d, FitParams::unlimited()).unwrap();
        let json = serde_json::to_string_pretty(&t).unwrap();
        assert!(json.contains("\"kind\": \"internal\""));
        let back: DecisionTree = serde_json::from_str(&json).unwrap();
        assert_eq!(back, t);

        let bad = json.replacen("\"root\": 0", "\"root\": 9999", 1);
        assert!(serde_json::from_str::<DecisionTree>(&bad).is_err());
    }

    #[test]
    fn weighted_gini_matches_hand_values() {
        let mut t = [0; Action::COUNT];
        let mut f = [0; Action::COUNT];
        t[0] = 2;
        t[1] = 2;
        f[0] = 4;
        // true side gini 0.5 over 4 rows, false side pure
        assert!((weighted_gini(&t, &f) - 0.25).abs() < 1e-15);
    }
}
