//! Binary decision trees with axis-aligned, categorical and rotated split
//! rules, the depth-based structural prior and the five structural moves
//! (grow, grow-project, change, change-project, prune).
//!
//! Trees are value types: a proposal clones the current tree and edits the
//! copy, so an accepted move simply replaces the old value.

use std::f64::consts::PI;
use std::fmt;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::{ColumnKind, Design};

/// Rotate the pair `(xj, xh)` by `theta` radians.
#[inline]
pub fn rotate_pair(xj: f64, xh: f64, theta: f64) -> (f64, f64) {
    let (s, c) = theta.sin_cos();
    (xj * c - xh * s, xj * s + xh * c)
}

/// Ten equally spaced angles `pi/40, 2pi/40, ..., pi/4`.
pub fn default_theta_grid() -> Vec<f64> {
    (1..=10).map(|i| i as f64 * PI / 40.0).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SplitRule {
    /// Left iff `x[var] <= cutpoint`.
    Continuous { var: usize, cutpoint: f64 },
    /// Left iff the level code of `x[var]` is in `levels`.
    Categorical { var: usize, levels: Vec<u32> },
    /// Left iff the second coordinate of `rotate_pair(x[var_j], x[var_h], theta)`
    /// is `<= cutpoint`.
    Rotated {
        var_j: usize,
        var_h: usize,
        theta: f64,
        cutpoint: f64,
    },
}

impl SplitRule {
    /// Returns `(goes_left, unknown_level)`. A categorical code that is
    /// negative marks a level never seen in training; such rows go right.
    #[inline]
    pub fn evaluate(&self, row: &[f64]) -> (bool, bool) {
        match self {
            SplitRule::Continuous { var, cutpoint } => (row[*var] <= *cutpoint, false),
            SplitRule::Categorical { var, levels } => {
                let code = row[*var];
                if code < 0.0 {
                    return (false, true);
                }
                (levels.contains(&(code as u32)), false)
            }
            SplitRule::Rotated {
                var_j,
                var_h,
                theta,
                cutpoint,
            } => {
                let (_, second) = rotate_pair(row[*var_j], row[*var_h], *theta);
                (second <= *cutpoint, false)
            }
        }
    }

    #[inline]
    pub fn goes_left(&self, row: &[f64]) -> bool {
        self.evaluate(row).0
    }

    pub fn is_rotated(&self) -> bool {
        matches!(self, SplitRule::Rotated { .. })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Node {
    pub parent: Option<usize>,
    /// `(left, right)` for internal nodes.
    pub children: Option<(usize, usize)>,
    pub rule: Option<SplitRule>,
    pub depth: usize,
}

impl Node {
    fn leaf(parent: Option<usize>, depth: usize) -> Self {
        Node {
            parent,
            children: None,
            rule: None,
            depth,
        }
    }

    pub fn is_terminal(&self) -> bool {
        self.children.is_none()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DecisionTree {
    nodes: Vec<Node>,
    leaf_of_row: Vec<usize>,
}

impl DecisionTree {
    pub fn stump(n_rows: usize) -> Self {
        DecisionTree {
            nodes: vec![Node::leaf(None, 0)],
            leaf_of_row: vec![0; n_rows],
        }
    }

    /// Rebuild a tree from its node list, recomputing the leaf of every
    /// training row by routing `design`.
    pub fn from_nodes(nodes: Vec<Node>, design: &Design) -> Result<Self> {
        if nodes.is_empty() {
            return Err(Error::InvalidInput("tree has no nodes".into()));
        }
        for (id, node) in nodes.iter().enumerate() {
            match (&node.children, &node.rule) {
                (Some((l, r)), Some(_)) => {
                    for &c in &[*l, *r] {
                        let child = nodes.get(c).ok_or_else(|| {
                            Error::InvalidInput(format!("node {id} references missing child {c}"))
                        })?;
                        if child.parent != Some(id) || child.depth != node.depth + 1 {
                            return Err(Error::InvalidInput(format!(
                                "node {c} is inconsistent with its parent {id}"
                            )));
                        }
                    }
                }
                (None, None) => {}
                _ => {
                    return Err(Error::InvalidInput(format!(
                        "node {id} must carry both a rule and two children, or neither"
                    )))
                }
            }
        }
        let mut tree = DecisionTree {
            nodes,
            leaf_of_row: Vec::new(),
        };
        tree.leaf_of_row = (0..design.n_rows()).map(|i| tree.route(design.row(i))).collect();
        Ok(tree)
    }

    pub fn nodes(&self) -> &[Node] {
        &self.nodes
    }

    pub fn n_rows(&self) -> usize {
        self.leaf_of_row.len()
    }

    /// Leaf id for every training row.
    pub fn leaf_of_row(&self) -> &[usize] {
        &self.leaf_of_row
    }

    pub fn is_stump(&self) -> bool {
        self.nodes.len() == 1
    }

    pub fn leaves(&self) -> Vec<usize> {
        (0..self.nodes.len())
            .filter(|&i| self.nodes[i].is_terminal())
            .collect()
    }

    pub fn n_leaves(&self) -> usize {
        self.nodes.iter().filter(|n| n.is_terminal()).count()
    }

    pub fn max_depth(&self) -> usize {
        self.nodes.iter().map(|n| n.depth).max().unwrap_or(0)
    }

    /// Training rows assigned to `leaf`, in ascending order.
    pub fn rows_of(&self, leaf: usize) -> Vec<usize> {
        self.leaf_of_row
            .iter()
            .enumerate()
            .filter_map(|(i, &l)| (l == leaf).then_some(i))
            .collect()
    }

    /// `(leaf id, rows)` for every leaf, leaves in id order.
    pub fn leaf_rows(&self) -> Vec<(usize, Vec<usize>)> {
        let mut slots: Vec<Option<Vec<usize>>> = self
            .nodes
            .iter()
            .map(|n| n.is_terminal().then(Vec::new))
            .collect();
        for (i, &l) in self.leaf_of_row.iter().enumerate() {
            if let Some(rows) = slots[l].as_mut() {
                rows.push(i);
            }
        }
        slots
            .into_iter()
            .enumerate()
            .filter_map(|(id, rows)| rows.map(|r| (id, r)))
            .collect()
    }

    /// Internal nodes whose two children are both leaves.
    pub fn prunable_nodes(&self) -> Vec<usize> {
        self.nodes
            .iter()
            .enumerate()
            .filter_map(|(id, n)| {
                let (l, r) = n.children?;
                (self.nodes[l].is_terminal() && self.nodes[r].is_terminal()).then_some(id)
            })
            .collect()
    }

    pub fn route(&self, row: &[f64]) -> usize {
        self.route_flagged(row).0
    }

    /// Route a row to its leaf; the flag is set when a categorical level
    /// unseen in training forced a right turn on the way down.
    pub fn route_flagged(&self, row: &[f64]) -> (usize, bool) {
        let mut id = 0;
        let mut unknown = false;
        while let (Some((l, r)), Some(rule)) = (self.nodes[id].children, &self.nodes[id].rule) {
            let (left, flag) = rule.evaluate(row);
            unknown |= flag;
            id = if left { l } else { r };
        }
        (id, unknown)
    }

    /// True when every row maps to an existing leaf, routing agrees with the
    /// stored assignment, and no leaf is empty.
    pub fn check_partition(&self, design: &Design) -> bool {
        if self.leaf_of_row.len() != design.n_rows() {
            return false;
        }
        let mut counts = vec![0usize; self.nodes.len()];
        for (i, &leaf) in self.leaf_of_row.iter().enumerate() {
            if leaf >= self.nodes.len() || !self.nodes[leaf].is_terminal() {
                return false;
            }
            if self.route(design.row(i)) != leaf {
                return false;
            }
            counts[leaf] += 1;
        }
        self.leaves().iter().all(|&l| counts[l] > 0)
    }

    fn split_leaf(&mut self, leaf: usize, rule: SplitRule, rows: &[usize], design: &Design) {
        let depth = self.nodes[leaf].depth + 1;
        let left = self.nodes.len();
        let right = left + 1;
        self.nodes.push(Node::leaf(Some(leaf), depth));
        self.nodes.push(Node::leaf(Some(leaf), depth));
        for &i in rows {
            self.leaf_of_row[i] = if rule.goes_left(design.row(i)) { left } else { right };
        }
        self.nodes[leaf].children = Some((left, right));
        self.nodes[leaf].rule = Some(rule);
    }

    /// Collapse `node` (whose children must be leaves) and compact the node
    /// array. Returns the old-id to new-id map.
    fn collapse(&mut self, node: usize) -> Vec<Option<usize>> {
        let (l, r) = self.nodes[node].children.expect("collapse on a leaf");
        let mut map = Vec::with_capacity(self.nodes.len());
        let mut next = 0;
        for id in 0..self.nodes.len() {
            if id == l || id == r {
                map.push(None);
            } else {
                map.push(Some(next));
                next += 1;
            }
        }
        self.nodes[node].children = None;
        self.nodes[node].rule = None;
        let old = std::mem::take(&mut self.nodes);
        self.nodes = old
            .into_iter()
            .enumerate()
            .filter(|(id, _)| map[*id].is_some())
            .map(|(_, mut n)| {
                n.parent = n.parent.map(|p| map[p].expect("parent survives"));
                n.children = n
                    .children
                    .map(|(a, b)| (map[a].expect("child survives"), map[b].expect("child survives")));
                n
            })
            .collect();
        let new_id = map[node].expect("collapsed node survives");
        for leaf in &mut self.leaf_of_row {
            *leaf = map[*leaf].unwrap_or(new_id);
        }
        map
    }
}

impl fmt::Display for DecisionTree {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (id, n) in self.nodes.iter().enumerate() {
            let pad = "  ".repeat(n.depth);
            match &n.rule {
                Some(rule) => writeln!(f, "{pad}[{id}] {rule:?}")?,
                None => writeln!(f, "{pad}[{id}] leaf")?,
            }
        }
        Ok(())
    }
}

/// Log of the depth-based structural prior: each internal node at depth `d`
/// contributes `log(alpha (1+d)^-beta)` and each leaf `log(1 - alpha (1+d)^-beta)`.
pub fn log_tree_prior(tree: &DecisionTree, alpha: f64, beta: f64) -> f64 {
    tree.nodes
        .iter()
        .map(|n| {
            let p_split = alpha * (1.0 + n.depth as f64).powf(-beta);
            if n.is_terminal() {
                (1.0 - p_split).ln()
            } else {
                p_split.ln()
            }
        })
        .sum()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MoveKind {
    Grow,
    GrowProject,
    Change,
    ChangeProject,
    Prune,
}

impl MoveKind {
    pub const ALL: [MoveKind; 5] = [
        MoveKind::Grow,
        MoveKind::GrowProject,
        MoveKind::Change,
        MoveKind::ChangeProject,
        MoveKind::Prune,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            MoveKind::Grow => "grow",
            MoveKind::GrowProject => "grow-project",
            MoveKind::Change => "change",
            MoveKind::ChangeProject => "change-project",
            MoveKind::Prune => "prune",
        }
    }

    pub fn is_projection(self) -> bool {
        matches!(self, MoveKind::GrowProject | MoveKind::ChangeProject)
    }
}

impl fmt::Display for MoveKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Probabilities of (grow, grow-project, change, change-project, prune).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MoveProbabilities(pub [f64; 5]);

impl Default for MoveProbabilities {
    fn default() -> Self {
        MoveProbabilities([0.15, 0.15, 0.2, 0.2, 0.3])
    }
}

impl MoveProbabilities {
    /// Axis-aligned moves only, each pair collapsed onto its plain move.
    pub fn without_projection() -> Self {
        MoveProbabilities([0.3, 0.0, 0.4, 0.0, 0.3])
    }

    pub fn get(&self, kind: MoveKind) -> f64 {
        self.0[kind.index()]
    }

    /// Draw a move kind. A stump only admits the two grow moves, renormalised.
    pub fn sample<R: Rng + ?Sized>(&self, stump: bool, rng: &mut R) -> MoveKind {
        let mut weights = self.0;
        if stump {
            for k in [MoveKind::Change, MoveKind::ChangeProject, MoveKind::Prune] {
                weights[k.index()] = 0.0;
            }
        }
        let total: f64 = weights.iter().sum();
        if total <= 0.0 {
            return MoveKind::Grow;
        }
        let u = rng.random::<f64>() * total;
        let mut acc = 0.0;
        for kind in MoveKind::ALL {
            acc += weights[kind.index()];
            if u < acc {
                return kind;
            }
        }
        *MoveKind::ALL
            .iter()
            .rev()
            .find(|k| weights[k.index()] > 0.0)
            .expect("positive total weight")
    }
}

/// Everything a proposal needs to know about the training covariates.
#[derive(Clone, Copy, Debug)]
pub struct SplitContext<'a> {
    pub design: &'a Design,
    /// Columns eligible for axis-aligned or categorical splits.
    pub split_columns: &'a [usize],
    /// Continuous columns eligible for rotated splits.
    pub rotation_columns: &'a [usize],
    pub theta_grid: &'a [f64],
    pub min_leaf_size: usize,
}

#[derive(Clone, Debug)]
pub struct MoveProposal {
    pub kind: MoveKind,
    /// The leaf grown or the internal node changed or pruned.
    pub node: Option<usize>,
    /// `None` when the proposal is invalid.
    pub tree: Option<DecisionTree>,
    /// Leaves of the current tree whose row sets disappear.
    pub removed_leaves: Vec<usize>,
    /// Leaves of the proposed tree with new row sets.
    pub added_leaves: Vec<usize>,
    /// Old node id to new node id, for nodes that survive.
    pub id_map: Vec<Option<usize>>,
}

impl MoveProposal {
    fn invalid(kind: MoveKind, node: Option<usize>) -> Self {
        MoveProposal {
            kind,
            node,
            tree: None,
            removed_leaves: Vec::new(),
            added_leaves: Vec::new(),
            id_map: Vec::new(),
        }
    }

    pub fn is_valid(&self) -> bool {
        self.tree.is_some()
    }
}

/// Sample a move kind and build the corresponding proposal.
pub fn propose_move<R: Rng + ?Sized>(
    tree: &DecisionTree,
    ctx: &SplitContext<'_>,
    probs: &MoveProbabilities,
    rng: &mut R,
) -> MoveProposal {
    let kind = probs.sample(tree.is_stump(), rng);
    propose_kind(tree, ctx, kind, rng)
}

pub fn propose_kind<R: Rng + ?Sized>(
    tree: &DecisionTree,
    ctx: &SplitContext<'_>,
    kind: MoveKind,
    rng: &mut R,
) -> MoveProposal {
    match kind {
        MoveKind::Grow | MoveKind::GrowProject => {
            let leaves = tree.leaves();
            let leaf = leaves[rng.random_range(0..leaves.len())];
            let rows = tree.rows_of(leaf);
            let rule = if kind == MoveKind::Grow {
                sample_axis_rule(ctx, &rows, rng)
            } else {
                sample_rotated_rule(ctx, &rows, rng)
            };
            let Some(rule) = rule else {
                return MoveProposal::invalid(kind, Some(leaf));
            };
            if !split_sizes_ok(ctx, &rule, &rows) {
                return MoveProposal::invalid(kind, Some(leaf));
            }
            let mut proposed = tree.clone();
            proposed.split_leaf(leaf, rule, &rows, ctx.design);
            let (l, r) = proposed.nodes[leaf].children.expect("just split");
            MoveProposal {
                kind,
                node: Some(leaf),
                tree: Some(proposed),
                removed_leaves: vec![leaf],
                added_leaves: vec![l, r],
                id_map: (0..tree.nodes.len()).map(Some).collect(),
            }
        }
        MoveKind::Change | MoveKind::ChangeProject => {
            let candidates = tree.prunable_nodes();
            if candidates.is_empty() {
                return MoveProposal::invalid(kind, None);
            }
            let node = candidates[rng.random_range(0..candidates.len())];
            let (l, r) = tree.nodes[node].children.expect("internal node");
            let mut rows: Vec<usize> = tree
                .leaf_of_row
                .iter()
                .enumerate()
                .filter_map(|(i, &leaf)| (leaf == l || leaf == r).then_some(i))
                .collect();
            rows.sort_unstable();
            let rule = if kind == MoveKind::Change {
                sample_axis_rule(ctx, &rows, rng)
            } else {
                sample_rotated_rule(ctx, &rows, rng)
            };
            let Some(rule) = rule else {
                return MoveProposal::invalid(kind, Some(node));
            };
            if !split_sizes_ok(ctx, &rule, &rows) {
                return MoveProposal::invalid(kind, Some(node));
            }
            let mut proposed = tree.clone();
            for &i in &rows {
                proposed.leaf_of_row[i] = if rule.goes_left(ctx.design.row(i)) { l } else { r };
            }
            proposed.nodes[node].rule = Some(rule);
            MoveProposal {
                kind,
                node: Some(node),
                tree: Some(proposed),
                removed_leaves: vec![l, r],
                added_leaves: vec![l, r],
                id_map: (0..tree.nodes.len()).map(Some).collect(),
            }
        }
        MoveKind::Prune => {
            let candidates = tree.prunable_nodes();
            if candidates.is_empty() {
                return MoveProposal::invalid(kind, None);
            }
            let node = candidates[rng.random_range(0..candidates.len())];
            let (l, r) = tree.nodes[node].children.expect("internal node");
            let mut proposed = tree.clone();
            let id_map = proposed.collapse(node);
            let new_id = id_map[node].expect("survives");
            MoveProposal {
                kind,
                node: Some(node),
                tree: Some(proposed),
                removed_leaves: vec![l, r],
                added_leaves: vec![new_id],
                id_map,
            }
        }
    }
}

fn split_sizes_ok(ctx: &SplitContext<'_>, rule: &SplitRule, rows: &[usize]) -> bool {
    let n_left = rows
        .iter()
        .filter(|&&i| rule.goes_left(ctx.design.row(i)))
        .count();
    let min = ctx.min_leaf_size.max(1);
    n_left >= min && rows.len() - n_left >= min
}

/// Axis-aligned (or categorical) rule on a uniformly chosen split column.
fn sample_axis_rule<R: Rng + ?Sized>(
    ctx: &SplitContext<'_>,
    rows: &[usize],
    rng: &mut R,
) -> Option<SplitRule> {
    if ctx.split_columns.is_empty() || rows.is_empty() {
        return None;
    }
    let var = ctx.split_columns[rng.random_range(0..ctx.split_columns.len())];
    match ctx.design.kind(var) {
        ColumnKind::Continuous => {
            let (lo, hi) = range_of(rows.iter().map(|&i| ctx.design.get(i, var)));
            if !(lo < hi) {
                return None;
            }
            Some(SplitRule::Continuous {
                var,
                cutpoint: rng.random_range(lo..hi),
            })
        }
        ColumnKind::Categorical { .. } => {
            let mut observed: Vec<u32> = rows
                .iter()
                .map(|&i| ctx.design.get(i, var))
                .filter(|&c| c >= 0.0)
                .map(|c| c as u32)
                .collect();
            observed.sort_unstable();
            observed.dedup();
            if observed.len() < 2 {
                return None;
            }
            let level = observed[rng.random_range(0..observed.len())];
            Some(SplitRule::Categorical {
                var,
                levels: vec![level],
            })
        }
    }
}

/// Rotated rule on an ordered pair of distinct rotation columns.
fn sample_rotated_rule<R: Rng + ?Sized>(
    ctx: &SplitContext<'_>,
    rows: &[usize],
    rng: &mut R,
) -> Option<SplitRule> {
    let cols = ctx.rotation_columns;
    if cols.len() < 2 || ctx.theta_grid.is_empty() || rows.is_empty() {
        return None;
    }
    let a = rng.random_range(0..cols.len());
    let mut b = rng.random_range(0..cols.len() - 1);
    if b >= a {
        b += 1;
    }
    let (var_j, var_h) = (cols[a], cols[b]);
    let theta = ctx.theta_grid[rng.random_range(0..ctx.theta_grid.len())];
    let (lo, hi) = range_of(rows.iter().map(|&i| {
        rotate_pair(ctx.design.get(i, var_j), ctx.design.get(i, var_h), theta).1
    }));
    if !(lo < hi) {
        return None;
    }
    Some(SplitRule::Rotated {
        var_j,
        var_h,
        theta,
        cutpoint: rng.random_range(lo..hi),
    })
}

fn range_of(values: impl Iterator<Item = f64>) -> (f64, f64) {
    values.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| {
        (lo.min(v), hi.max(v))
    })
}
