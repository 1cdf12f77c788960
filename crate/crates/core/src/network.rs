//! Tree tensor networks: evaluation, storage accounting and the model JSON.

use std::collections::BTreeMap;

use nalgebra::DMatrix;
use serde_json::{json, Map, Value};

use crate::basis::{MarginalMeasure, PolynomialBasis};
use crate::error::{Error, Result};
use crate::space::kron_into;
use crate::tree::{node_label, DimensionTree};

pub const MODEL_VERSION: u64 = 1;

/// Default bound on the number of entries of a full coefficient tensor.
pub const DEFAULT_TENSOR_CAP: usize = 10_000_000;

/// A function in tree-based tensor format.
///
/// Leaf tensors are m_ν × r_ν, interior tensors (∏ child ranks) × r_α with
/// children in lexicographic order (first child slowest), and the root tensor
/// is (∏ child ranks) × 1.
#[derive(Clone, Debug, PartialEq)]
pub struct TreeTensorNetwork {
    tree: DimensionTree,
    leaf_bases: Vec<PolynomialBasis>,
    tensors: Vec<DMatrix<f64>>,
}

impl TreeTensorNetwork {
    /// `tensors` is indexed like `tree.nodes()`.
    pub fn new(tree: DimensionTree, leaf_bases: Vec<PolynomialBasis>, tensors: Vec<DMatrix<f64>>) -> Result<Self> {
        if leaf_bases.len() != tree.dim() {
            return Err(Error::ShapeMismatch(format!(
                "{} leaf bases for {} variables",
                leaf_bases.len(),
                tree.dim()
            )));
        }
        if tensors.len() != tree.len() {
            return Err(Error::ShapeMismatch(format!("{} tensors for {} nodes", tensors.len(), tree.len())));
        }
        for (i, node) in tree.nodes().iter().enumerate() {
            let t = &tensors[i];
            let rows = if node.is_leaf() {
                leaf_bases[node.vars[0]].dim()
            } else {
                node.children.iter().map(|&c| tensors[c].ncols()).product()
            };
            let cols_ok = if i == tree.root() { t.ncols() == 1 } else { t.ncols() >= 1 };
            if t.nrows() != rows || !cols_ok {
                return Err(Error::ShapeMismatch(format!(
                    "tensor of node {} is {}x{}, expected {rows} rows{}",
                    node_label(&node.vars),
                    t.nrows(),
                    t.ncols(),
                    if i == tree.root() { " and 1 column" } else { "" }
                )));
            }
        }
        Ok(TreeTensorNetwork {
            tree,
            leaf_bases,
            tensors,
        })
    }

    pub fn tree(&self) -> &DimensionTree {
        &self.tree
    }

    pub fn dim(&self) -> usize {
        self.tree.dim()
    }

    pub fn leaf_bases(&self) -> &[PolynomialBasis] {
        &self.leaf_bases
    }

    pub fn tensor(&self, node: usize) -> &DMatrix<f64> {
        &self.tensors[node]
    }

    /// Replaces one node tensor, keeping its shape.
    pub fn set_tensor(&mut self, node: usize, t: DMatrix<f64>) -> Result<()> {
        if t.shape() != self.tensors[node].shape() {
            return Err(Error::ShapeMismatch(format!(
                "replacement for node {} has shape {:?}",
                node_label(&self.tree.node(node).vars),
                t.shape()
            )));
        }
        self.tensors[node] = t;
        Ok(())
    }

    /// r_α for every node, indexed like the tree (root rank is 1).
    pub fn ranks(&self) -> Vec<usize> {
        self.tensors.iter().map(|t| t.ncols()).collect()
    }

    pub fn rank_of(&self, vars: &[usize]) -> Option<usize> {
        self.tree.find(vars).map(|i| self.tensors[i].ncols())
    }

    /// Total number of stored parameters.
    pub fn storage(&self) -> usize {
        self.tensors.iter().map(|t| t.len()).sum()
    }

    pub fn evaluate(&self, x: &[f64]) -> Result<f64> {
        if x.len() != self.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.dim(),
                got: x.len(),
            });
        }
        let mut vals: Vec<Vec<f64>> = vec![Vec::new(); self.tree.len()];
        let mut order = self.tree.nodes_by_decreasing_level();
        order.push(self.tree.root());
        for i in order {
            let node = self.tree.node(i);
            let input = if node.is_leaf() {
                self.leaf_bases[node.vars[0]].eval(x[node.vars[0]])
            } else {
                let parts: Vec<Vec<f64>> = node.children.iter().map(|&c| std::mem::take(&mut vals[c])).collect();
                let mut k = vec![0.0; self.tensors[i].nrows()];
                kron_into(&parts, &mut k);
                k
            };
            let t = &self.tensors[i];
            vals[i] = (0..t.ncols())
                .map(|c| t.column(c).iter().zip(&input).map(|(a, b)| a * b).sum())
                .collect();
        }
        Ok(vals[self.tree.root()][0])
    }

    /// Model JSON document.
    pub fn to_json(&self) -> Value {
        let mut ranks = Map::new();
        let mut tensors = Map::new();
        for (i, node) in self.tree.nodes().iter().enumerate() {
            let label = node_label(&node.vars);
            let t = &self.tensors[i];
            ranks.insert(label.clone(), json!(t.ncols()));
            let mut data = Vec::with_capacity(t.len());
            for r in 0..t.nrows() {
                for c in 0..t.ncols() {
                    data.push(t[(r, c)]);
                }
            }
            tensors.insert(label, json!({ "shape": [t.nrows(), t.ncols()], "data": data }));
        }
        let mut leaves = Map::new();
        for (v, b) in self.leaf_bases.iter().enumerate() {
            let mut entry = json!({ "family": b.family_name(), "degree": b.degree() });
            if let MarginalMeasure::Uniform { a, b } = b.measure() {
                entry["interval"] = json!([a, b]);
            }
            leaves.insert(v.to_string(), entry);
        }
        json!({
            "version": MODEL_VERSION,
            "tree": self.tree.node_sets(),
            "ranks": ranks,
            "leaf_bases": leaves,
            "tensors": tensors,
        })
    }

    pub fn to_json_string(&self) -> String {
        serde_json::to_string_pretty(&self.to_json()).expect("model JSON is always serializable")
    }

    pub fn from_json(doc: &Value) -> Result<Self> {
        let version = doc
            .get("version")
            .and_then(Value::as_u64)
            .ok_or_else(|| Error::Model("missing or non-integer \"version\"".into()))?;
        if version != MODEL_VERSION {
            return Err(Error::UnsupportedVersion(version));
        }
        let sets: Vec<Vec<usize>> = serde_json::from_value(
            doc.get("tree")
                .cloned()
                .ok_or_else(|| Error::Model("missing \"tree\"".into()))?,
        )?;
        let d = sets.iter().flatten().max().map_or(0, |v| v + 1);
        let tree = DimensionTree::validate(d, &sets)?;

        let leaves = doc
            .get("leaf_bases")
            .and_then(Value::as_object)
            .ok_or_else(|| Error::Model("missing \"leaf_bases\"".into()))?;
        let mut leaf_bases = Vec::with_capacity(d);
        for v in 0..d {
            let e = leaves
                .get(&v.to_string())
                .ok_or_else(|| Error::Model(format!("missing leaf basis for variable {v}")))?;
            leaf_bases.push(parse_leaf_basis(v, e)?);
        }

        let tensors_doc = doc
            .get("tensors")
            .and_then(Value::as_object)
            .ok_or_else(|| Error::Model("missing \"tensors\"".into()))?;
        let mut tensors = Vec::with_capacity(tree.len());
        for node in tree.nodes() {
            let label = node_label(&node.vars);
            let e = tensors_doc
                .get(&label)
                .ok_or_else(|| Error::Model(format!("missing tensor for node {label}")))?;
            let shape: [usize; 2] = serde_json::from_value(
                e.get("shape")
                    .cloned()
                    .ok_or_else(|| Error::Model(format!("missing shape for node {label}")))?,
            )?;
            let data: Vec<f64> = serde_json::from_value(
                e.get("data")
                    .cloned()
                    .ok_or_else(|| Error::Model(format!("missing data for node {label}")))?,
            )?;
            if data.len() != shape[0] * shape[1] {
                return Err(Error::ShapeMismatch(format!(
                    "node {label}: {} entries for shape {}x{}",
                    data.len(),
                    shape[0],
                    shape[1]
                )));
            }
            tensors.push(DMatrix::from_row_slice(shape[0], shape[1], &data));
        }
        if let Some(ranks) = doc.get("ranks").and_then(Value::as_object) {
            for (node, t) in tree.nodes().iter().zip(&tensors) {
                let label = node_label(&node.vars);
                if let Some(r) = ranks.get(&label).and_then(Value::as_u64) {
                    if r as usize != t.ncols() {
                        return Err(Error::ShapeMismatch(format!(
                            "node {label}: rank {r} but tensor has {} columns",
                            t.ncols()
                        )));
                    }
                }
            }
        }
        TreeTensorNetwork::new(tree, leaf_bases, tensors)
    }

    pub fn from_json_str(s: &str) -> Result<Self> {
        let doc: Value = serde_json::from_str(s)?;
        Self::from_json(&doc)
    }

    /// Full coefficient tensor over the leaf bases, with the variables in
    /// increasing order and the first variable varying slowest.
    pub fn full_coefficients(&self, cap: usize) -> Result<Vec<f64>> {
        let size = self
            .leaf_bases
            .iter()
            .try_fold(1usize, |acc, b| acc.checked_mul(b.dim()))
            .unwrap_or(usize::MAX);
        if size > cap {
            return Err(Error::CapExceeded { size, cap });
        }
        // Per node: variables in contraction order and a (∏ m) × r matrix.
        let mut parts: Vec<Option<(Vec<usize>, DMatrix<f64>)>> = vec![None; self.tree.len()];
        let mut order = self.tree.nodes_by_decreasing_level();
        order.push(self.tree.root());
        for i in order {
            let node = self.tree.node(i);
            let t = &self.tensors[i];
            if node.is_leaf() {
                parts[i] = Some((node.vars.clone(), t.clone()));
                continue;
            }
            let kids: Vec<(Vec<usize>, DMatrix<f64>)> =
                node.children.iter().map(|&c| parts[c].take().expect("child done")).collect();
            let vars: Vec<usize> = kids.iter().flat_map(|k| k.0.iter().copied()).collect();
            let rows: usize = kids.iter().map(|k| k.1.nrows()).product();
            let mut out = DMatrix::zeros(rows, t.ncols());
            let mut buf = vec![0.0; rows];
            for (ri, row) in t.row_iter().enumerate() {
                // Decompose the mixed-radix row index into child ranks.
                let mut rem = ri;
                let mut idx = vec![0; kids.len()];
                for (c, k) in kids.iter().enumerate().rev() {
                    idx[c] = rem % k.1.ncols();
                    rem /= k.1.ncols();
                }
                let cols: Vec<Vec<f64>> = kids
                    .iter()
                    .zip(&idx)
                    .map(|(k, &j)| k.1.column(j).iter().copied().collect())
                    .collect();
                kron_into(&cols, &mut buf);
                for (c, &coef) in row.iter().enumerate() {
                    if coef != 0.0 {
                        for (o, b) in out.column_mut(c).iter_mut().zip(&buf) {
                            *o += coef * b;
                        }
                    }
                }
            }
            parts[i] = Some((vars, out));
        }
        let (vars, root) = parts[self.tree.root()].take().expect("root done");
        // Permute from contraction order to increasing variable order.
        let dims: Vec<usize> = self.leaf_bases.iter().map(|b| b.dim()).collect();
        let mut full = vec![0.0; size];
        let mut idx = vec![0usize; vars.len()];
        for (p, &value) in root.column(0).iter().enumerate() {
            let mut rem = p;
            for (k, &v) in vars.iter().enumerate().rev() {
                idx[k] = rem % dims[v];
                rem /= dims[v];
            }
            let mut q = 0;
            for v in 0..dims.len() {
                let pos = vars.iter().position(|&w| w == v).expect("all variables present");
                q = q * dims[v] + idx[pos];
            }
            full[q] = value;
        }
        Ok(full)
    }

    /// Rank of the α-matricization of the coefficient tensor: number of
    /// singular values above `tol` times the largest.
    pub fn alpha_matricization_rank(&self, alpha: &[usize], tol: f64, cap: usize) -> Result<usize> {
        let d = self.dim();
        let mut alpha = alpha.to_vec();
        alpha.sort_unstable();
        alpha.dedup();
        if alpha.is_empty() || alpha.len() >= d || alpha.iter().any(|&v| v >= d) {
            return Err(Error::InvalidArgument(format!("{} is not a proper variable subset", node_label(&alpha))));
        }
        let full = self.full_coefficients(cap)?;
        let dims: Vec<usize> = self.leaf_bases.iter().map(|b| b.dim()).collect();
        let rest: Vec<usize> = (0..d).filter(|v| !alpha.contains(v)).collect();
        let rows: usize = alpha.iter().map(|&v| dims[v]).product();
        let cols: usize = rest.iter().map(|&v| dims[v]).product();
        let mut mat = DMatrix::zeros(rows, cols);
        let mut idx = vec![0usize; d];
        for (p, &value) in full.iter().enumerate() {
            let mut rem = p;
            for v in (0..d).rev() {
                idx[v] = rem % dims[v];
                rem /= dims[v];
            }
            let r = alpha.iter().fold(0, |acc, &v| acc * dims[v] + idx[v]);
            let c = rest.iter().fold(0, |acc, &v| acc * dims[v] + idx[v]);
            mat[(r, c)] = value;
        }
        let sv = crate::pca::singular_values(&mat);
        let max = sv.first().copied().unwrap_or(0.0);
        if max == 0.0 {
            return Ok(0);
        }
        Ok(sv.iter().filter(|s| **s > tol * max).count())
    }
}

fn parse_leaf_basis(v: usize, e: &Value) -> Result<PolynomialBasis> {
    let family = e
        .get("family")
        .and_then(Value::as_str)
        .ok_or_else(|| Error::Model(format!("missing family for variable {v}")))?;
    let degree = e
        .get("degree")
        .and_then(Value::as_u64)
        .ok_or_else(|| Error::Model(format!("missing degree for variable {v}")))? as usize;
    match family {
        "hermite" => Ok(PolynomialBasis::hermite(degree)),
        "legendre" => {
            let iv: [f64; 2] = serde_json::from_value(
                e.get("interval")
                    .cloned()
                    .ok_or_else(|| Error::Model(format!("missing interval for variable {v}")))?,
            )?;
            PolynomialBasis::legendre(degree, iv[0], iv[1])
        }
        other => Err(Error::Model(format!("unknown family {other:?} for variable {v}"))),
    }
}

/// Storage 𝒮 = Σ_interior r_α ∏_children r_β + Σ_leaves r_ν m_ν, with root rank 1.
///
/// `ranks` and `leaf_dims` are keyed by sorted variable list and variable.
pub fn storage_complexity(
    tree: &DimensionTree,
    ranks: &BTreeMap<Vec<usize>, usize>,
    leaf_dims: &BTreeMap<usize, usize>,
) -> Result<usize> {
    let rank = |i: usize| -> Result<usize> {
        if i == tree.root() {
            return Ok(1);
        }
        let vars = &tree.node(i).vars;
        ranks
            .get(vars)
            .copied()
            .ok_or_else(|| Error::InvalidArgument(format!("no rank for node {}", node_label(vars))))
    };
    let mut total = 0;
    for (i, node) in tree.nodes().iter().enumerate() {
        if node.is_leaf() {
            let v = node.vars[0];
            let m = leaf_dims
                .get(&v)
                .ok_or_else(|| Error::InvalidArgument(format!("no leaf dimension for variable {v}")))?;
            total += rank(i)? * m;
        } else {
            let mut p = rank(i)?;
            for &c in &node.children {
                p *= rank(c)?;
            }
            total += p;
        }
    }
    Ok(total)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn legendre(p: usize) -> PolynomialBasis {
        PolynomialBasis::legendre(p, -1.0, 1.0).unwrap()
    }

    #[test]
    fn constant_network_evaluates_to_one() {
        let tree = DimensionTree::balanced_binary(3).unwrap();
        let mut tensors = Vec::new();
        for node in tree.nodes() {
            let rows = if node.is_leaf() { 3 } else { 1 };
            let mut t = DMatrix::zeros(rows, 1);
            t[(0, 0)] = 1.0;
            tensors.push(t);
        }
        let net = TreeTensorNetwork::new(tree, vec![legendre(2); 3], tensors).unwrap();
        assert_eq!(net.evaluate(&[0.3, -0.7, 0.9]).unwrap(), 1.0);
        assert!(net.evaluate(&[0.3]).is_err());
    }

    #[test]
    fn product_of_degree_one_legendre() {
        let tree = DimensionTree::balanced_binary(2).unwrap();
        let sel = DMatrix::from_column_slice(2, 1, &[0.0, 1.0]);
        let root = DMatrix::from_element(1, 1, 1.0);
        let mut tensors = vec![DMatrix::zeros(0, 0); 3];
        tensors[tree.root()] = root;
        tensors[tree.leaf_of(0)] = sel.clone();
        tensors[tree.leaf_of(1)] = sel;
        let net = TreeTensorNetwork::new(tree, vec![legendre(1); 2], tensors).unwrap();
        assert_abs_diff_eq!(net.evaluate(&[1.0, 1.0]).unwrap(), 3.0, epsilon = 1e-14);
    }

    #[test]
    fn storage_examples() {
        let tree = DimensionTree::balanced_binary(4).unwrap();
        let mut ranks = BTreeMap::new();
        for n in tree.nodes() {
            ranks.insert(n.vars.clone(), 2);
        }
        let dims: BTreeMap<usize, usize> = (0..4).map(|v| (v, 5)).collect();
        assert_eq!(storage_complexity(&tree, &ranks, &dims).unwrap(), 60);

        let tree = DimensionTree::balanced_binary(2).unwrap();
        let ranks: BTreeMap<_, _> = [(vec![0], 1), (vec![1], 1)].into_iter().collect();
        let dims: BTreeMap<usize, usize> = [(0, 1), (1, 1)].into_iter().collect();
        assert_eq!(storage_complexity(&tree, &ranks, &dims).unwrap(), 3);
        let missing: BTreeMap<_, _> = [(vec![0], 1)].into_iter().collect();
        assert!(storage_complexity(&tree, &missing, &dims).is_err());
    }

    #[test]
    fn version_and_missing_node_errors() {
        let tree = DimensionTree::balanced_binary(2).unwrap();
        let mut tensors = vec![DMatrix::from_element(2, 1, 0.5); 3];
        tensors[tree.root()] = DMatrix::from_element(1, 1, 2.0);
        let net = TreeTensorNetwork::new(tree, vec![legendre(1); 2], tensors).unwrap();
        let mut doc = net.to_json();
        let back = TreeTensorNetwork::from_json(&doc).unwrap();
        assert_eq!(back, net);
        doc["tensors"].as_object_mut().unwrap().remove("{1}");
        let err = TreeTensorNetwork::from_json(&doc).unwrap_err();
        assert!(err.to_string().contains("{1}"), "{err}");
        doc["version"] = json!(2);
        assert!(matches!(TreeTensorNetwork::from_json(&doc), Err(Error::UnsupportedVersion(2))));
    }
}
