//! Dimension partition trees over the variables {0, ..., d-1}.

use std::collections::HashMap;

use rand::seq::SliceRandom;
use rand::Rng;

use crate::error::{Error, Result};

/// Formats a variable set as `{0,1,2}`.
pub fn node_label(vars: &[usize]) -> String {
    let inner: Vec<String> = vars.iter().map(|v| v.to_string()).collect();
    format!("{{{}}}", inner.join(","))
}

#[derive(Clone, Debug, PartialEq)]
pub struct TreeNode {
    /// Sorted variable indices.
    pub vars: Vec<usize>,
    pub parent: Option<usize>,
    /// Children sorted lexicographically by their variable lists.
    pub children: Vec<usize>,
    pub level: usize,
}

impl TreeNode {
    pub fn is_leaf(&self) -> bool {
        self.children.is_empty()
    }
}

/// A validated dimension tree. Nodes are stored in lexicographic order of
/// their sorted variable lists; leaves are always singletons.
#[derive(Clone, Debug, PartialEq)]
pub struct DimensionTree {
    d: usize,
    nodes: Vec<TreeNode>,
    root: usize,
    index: HashMap<Vec<usize>, usize>,
}

impl DimensionTree {
    /// Builds a tree from its node set, deriving parents, children and levels.
    pub fn validate(d: usize, nodes: &[Vec<usize>]) -> Result<Self> {
        if d == 0 {
            return Err(Error::InvalidTree("no variables".into()));
        }
        let mut sets: Vec<Vec<usize>> = Vec::with_capacity(nodes.len());
        for n in nodes {
            let mut s = n.clone();
            s.sort_unstable();
            let len = s.len();
            s.dedup();
            if s.is_empty() || s.len() != len {
                return Err(Error::InvalidTree(format!(
                    "node {} is empty or repeats a variable",
                    node_label(n)
                )));
            }
            if let Some(&v) = s.iter().find(|&&v| v >= d) {
                return Err(Error::InvalidTree(format!("variable {v} out of range for d={d}")));
            }
            sets.push(s);
        }
        sets.sort();
        for w in sets.windows(2) {
            if w[0] == w[1] {
                return Err(Error::InvalidTree(format!("duplicate node {}", node_label(&w[0]))));
            }
        }
        let full: Vec<usize> = (0..d).collect();
        let root = sets
            .iter()
            .position(|s| *s == full)
            .ok_or_else(|| Error::InvalidTree(format!("missing root {}", node_label(&full))))?;

        let is_subset = |a: &[usize], b: &[usize]| a.iter().all(|v| b.binary_search(v).is_ok());
        let n = sets.len();
        let mut parent = vec![None; n];
        for i in 0..n {
            if i == root {
                continue;
            }
            // Parent is the smallest strict superset; it must contain every other superset's chain.
            let mut best: Option<usize> = None;
            for j in 0..n {
                if j != i && sets[j].len() > sets[i].len() && is_subset(&sets[i], &sets[j]) {
                    best = match best {
                        Some(b) if sets[b].len() <= sets[j].len() => Some(b),
                        _ => Some(j),
                    };
                }
            }
            parent[i] = best;
        }
        let mut children = vec![Vec::new(); n];
        for i in 0..n {
            if let Some(p) = parent[i] {
                children[p].push(i);
            }
        }
        for (i, ch) in children.iter().enumerate() {
            if ch.is_empty() {
                if sets[i].len() != 1 {
                    return Err(Error::InvalidTree(format!(
                        "leaf {} is not a singleton",
                        node_label(&sets[i])
                    )));
                }
                continue;
            }
            if sets[i].len() == 1 {
                return Err(Error::InvalidTree(format!(
                    "singleton {} has children",
                    node_label(&sets[i])
                )));
            }
            let mut union: Vec<usize> = ch.iter().flat_map(|&c| sets[c].iter().copied()).collect();
            union.sort_unstable();
            let disjoint = union.windows(2).all(|w| w[0] != w[1]);
            if !disjoint || union != sets[i] {
                let labels: Vec<String> = ch.iter().map(|&c| node_label(&sets[c])).collect();
                return Err(Error::InvalidTree(format!(
                    "children {} do not partition {}",
                    labels.join(","),
                    node_label(&sets[i])
                )));
            }
        }
        let mut levels = vec![0usize; n];
        // Sets are sorted lexicographically, not by size; resolve levels by walking up.
        for i in 0..n {
            let mut l = 0;
            let mut cur = i;
            while let Some(p) = parent[cur] {
                l += 1;
                cur = p;
            }
            levels[i] = l;
        }
        let index = sets.iter().enumerate().map(|(i, s)| (s.clone(), i)).collect();
        let nodes = sets
            .into_iter()
            .enumerate()
            .map(|(i, vars)| TreeNode {
                vars,
                parent: parent[i],
                children: children[i].clone(),
                level: levels[i],
            })
            .collect();
        Ok(DimensionTree {
            d,
            nodes,
            root,
            index,
        })
    }

    /// Binary tree splitting each ordered variable list with ceil(k/2) on the left.
    pub fn balanced_binary(d: usize) -> Result<Self> {
        let order: Vec<usize> = (0..d).collect();
        Self::balanced_over(&order)
    }

    /// Balanced shape over a uniformly random permutation of the variables.
    pub fn random_balanced<R: Rng + ?Sized>(d: usize, rng: &mut R) -> Result<Self> {
        let mut order: Vec<usize> = (0..d).collect();
        order.shuffle(rng);
        Self::balanced_over(&order)
    }

    fn balanced_over(order: &[usize]) -> Result<Self> {
        let d = order.len();
        if d < 2 {
            return Err(Error::InvalidArgument(format!("a dimension tree needs d >= 2, got {d}")));
        }
        let mut nodes = Vec::new();
        fn split(list: &[usize], out: &mut Vec<Vec<usize>>) {
            out.push(list.to_vec());
            if list.len() > 1 {
                let left = list.len().div_ceil(2);
                split(&list[..left], out);
                split(&list[left..], out);
            }
        }
        split(order, &mut nodes);
        Self::validate(d, &nodes)
    }

    /// Recursive uniformly random bipartition into two nonempty parts.
    pub fn random_binary<R: Rng + ?Sized>(d: usize, rng: &mut R) -> Result<Self> {
        if d < 2 {
            return Err(Error::InvalidArgument(format!("a dimension tree needs d >= 2, got {d}")));
        }
        let mut nodes = Vec::new();
        let mut stack = vec![(0..d).collect::<Vec<usize>>()];
        while let Some(set) = stack.pop() {
            if set.len() > 1 {
                // Uniform over ordered splits minus the two trivial ones, hence
                // uniform over unordered bipartitions.
                let (left, right) = loop {
                    let mut l = Vec::new();
                    let mut r = Vec::new();
                    for &v in &set {
                        if rng.random::<bool>() {
                            l.push(v)
                        } else {
                            r.push(v)
                        }
                    }
                    if !l.is_empty() && !r.is_empty() {
                        break (l, r);
                    }
                };
                stack.push(left);
                stack.push(right);
            }
            nodes.push(set);
        }
        Self::validate(d, &nodes)
    }

    pub fn dim(&self) -> usize {
        self.d
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn root(&self) -> usize {
        self.root
    }

    pub fn node(&self, i: usize) -> &TreeNode {
        &self.nodes[i]
    }

    pub fn nodes(&self) -> &[TreeNode] {
        &self.nodes
    }

    pub fn find(&self, vars: &[usize]) -> Option<usize> {
        let mut key = vars.to_vec();
        key.sort_unstable();
        self.index.get(&key).copied()
    }

    pub fn depth(&self) -> usize {
        self.nodes.iter().map(|n| n.level).max().unwrap_or(0)
    }

    /// Leaf node indices in lexicographic order (i.e. by variable).
    pub fn leaves(&self) -> Vec<usize> {
        (0..self.nodes.len()).filter(|&i| self.nodes[i].is_leaf()).collect()
    }

    /// Index of the leaf {v}.
    pub fn leaf_of(&self, v: usize) -> usize {
        self.index[&vec![v]]
    }

    /// All nodes except the root, deepest first, ties in lexicographic order.
    pub fn nodes_by_decreasing_level(&self) -> Vec<usize> {
        let mut order: Vec<usize> = (0..self.nodes.len()).filter(|&i| i != self.root).collect();
        // Node indices already follow lexicographic order, so a stable sort suffices.
        order.sort_by(|&a, &b| self.nodes[b].level.cmp(&self.nodes[a].level));
        order
    }

    /// Sorted variable lists of all nodes (the serialized form).
    pub fn node_sets(&self) -> Vec<Vec<usize>> {
        self.nodes.iter().map(|n| n.vars.clone()).collect()
    }

    /// Pairs of leaf variables sharing a parent, used to inspect the first pairing level.
    pub fn sibling_leaf_pairs(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        for n in &self.nodes {
            if n.children.len() == 2 && n.children.iter().all(|&c| self.nodes[c].is_leaf()) {
                out.push((self.nodes[n.children[0]].vars[0], self.nodes[n.children[1]].vars[0]));
            }
        }
        out
    }
}
