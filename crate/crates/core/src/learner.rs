//! Leaves-to-root construction of a tree tensor network from evaluations.

use std::sync::Arc;
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::basis::{PolynomialBasis, ProductMeasure};
use crate::boosted::{draw_stable_sample, greedy_subsample, min_sample_count, Projector, StabilityParams, WeightedSampleSet};
use crate::error::{Error, Result};
use crate::network::TreeTensorNetwork;
use crate::oracle::Oracle;
use crate::pca::{
    adaptive_principal_subspace, assemble_coefficient_matrix, left_singular, loo_errors, numerical_floor,
    project_fiber, rank_for_tolerance, PrincipalSubspace,
};
use crate::rng::{set_tag, stream, TAG_BASIS, TAG_COLUMNS, TAG_PROJECTION, TAG_ROOT};
use crate::space::{FeatureSpace, Subspace};
use crate::tree::DimensionTree;

/// Which constant multiplies the per-level tolerance budgets.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BudgetConstant {
    /// 2(1 + 1/((1−δ)(1−η))), the value used in all experiments.
    Heuristic,
    /// 2(γ + 1) with γ = M / ((1−δ)(1−η^M)).
    Formal,
}

/// How the global tolerance is split between nodes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BudgetRule {
    /// Level-dependent budgets derived from the error bound.
    Scaled,
    /// Every node uses the global tolerance directly.
    Uniform,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LearnerConfig {
    /// Target relative L² error ε.
    pub tolerance: f64,
    pub stability: StabilityParams,
    /// Column budget factor of the adaptive principal subspace estimation.
    pub k_pca: usize,
    pub adaptive_pca: bool,
    /// Select each leaf degree in min_degree..=max degree of the leaf basis.
    pub adaptive_basis: bool,
    pub min_degree: usize,
    /// Levels above this value are budgeted as if at this level.
    pub level_cap: usize,
    pub constant: BudgetConstant,
    pub budget: BudgetRule,
    /// Reuse the sample and column of the basis adaptation in the leaf's
    /// principal subspace estimation.
    pub reuse_adaptation_column: bool,
}

impl Default for LearnerConfig {
    fn default() -> Self {
        LearnerConfig {
            tolerance: 1e-6,
            stability: StabilityParams::default(),
            k_pca: 3,
            adaptive_pca: true,
            adaptive_basis: true,
            min_degree: 1,
            level_cap: 3,
            constant: BudgetConstant::Heuristic,
            budget: BudgetRule::Scaled,
            reuse_adaptation_column: false,
        }
    }
}

impl LearnerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tolerance > 0.0) {
            return Err(Error::InvalidArgument(format!("tolerance {} must be positive", self.tolerance)));
        }
        if self.k_pca == 0 {
            return Err(Error::InvalidArgument("k_pca must be at least 1".into()));
        }
        self.stability.validate()
    }

    /// The quasi-optimality constant C₁ used in the budgets.
    pub fn c1(&self) -> f64 {
        let StabilityParams {
            repetitions,
            delta,
            eta,
            ..
        } = self.stability;
        match self.constant {
            BudgetConstant::Heuristic => 2.0 * (1.0 + 1.0 / ((1.0 - delta) * (1.0 - eta))),
            BudgetConstant::Formal => {
                let m = repetitions as f64;
                let gamma = m / ((1.0 - delta) * (1.0 - eta.powf(m)));
                2.0 * (gamma + 1.0)
            }
        }
    }
}

/// Per-node tolerances for principal subspaces and leaf discretization.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NodeBudget {
    pub pca: f64,
    pub dis: f64,
}

/// Budget of a node at `level` in a tree with `node_count` nodes over d variables.
pub fn budget_at_level(eps: f64, level: usize, node_count: usize, d: usize, config: &LearnerConfig) -> NodeBudget {
    if config.budget == BudgetRule::Uniform {
        return NodeBudget { pca: eps, dis: eps };
    }
    let l = level.min(config.level_cap) as i32;
    let two_c1 = 2.0 * config.c1();
    let pca = eps / (two_c1.powi(l) * (node_count.saturating_sub(1).max(1)) as f64).sqrt();
    let dis = eps / (0.5 * two_c1.powi(l + 1) * d as f64).sqrt();
    NodeBudget { pca, dis }
}

/// Budgets for every node of the tree, indexed like `tree.nodes()`.
pub fn tolerance_budget(eps: f64, tree: &DimensionTree, config: &LearnerConfig) -> Vec<NodeBudget> {
    tree.nodes()
        .iter()
        .map(|n| budget_at_level(eps, n.level, tree.len(), tree.dim(), config))
        .collect()
}

/// |a_last| / ‖a‖, zero for a zero vector.
pub fn trailing_ratio(coefficients: &[f64]) -> f64 {
    let norm = coefficients.iter().map(|c| c * c).sum::<f64>().sqrt();
    match coefficients.last() {
        Some(last) if norm > 0.0 => last.abs() / norm,
        _ => 0.0,
    }
}

#[derive(Clone, Debug)]
pub struct BasisAdaptation {
    pub basis: PolynomialBasis,
    pub coefficients: Vec<f64>,
    pub criterion: f64,
    /// True when no degree met the tolerance and the largest was kept.
    pub exhausted: bool,
    pub evaluations: usize,
    pub sample: WeightedSampleSet,
    pub projector: Projector,
}

/// Smallest degree in `degrees` whose projection of u(·, x_c) has a trailing
/// coefficient ratio at most `tol` (raised to the numerical floor).
pub fn adapt_leaf_basis(
    oracle: &Oracle,
    variable: usize,
    family: PolynomialBasis,
    degrees: std::ops::RangeInclusive<usize>,
    xc: &[f64],
    tol: f64,
    params: &StabilityParams,
    seed: u64,
) -> Result<BasisAdaptation> {
    let mut evaluations = 0;
    let mut last = None;
    let max = *degrees.end();
    for p in degrees {
        let basis = family.with_degree(p);
        let space = FeatureSpace::leaf(variable, basis);
        let (sample, projector) = boosted_projector(&space, params, seed, &[TAG_BASIS, set_tag(&[variable]), p as u64])?;
        let coefficients = project_fiber(oracle, &sample, &projector, xc)?;
        evaluations += sample.len();
        let criterion = trailing_ratio(&coefficients);
        let bound = tol.max(numerical_floor(space.dim(), sample.len()));
        let done = criterion <= bound;
        let result = BasisAdaptation {
            basis,
            coefficients,
            criterion,
            exhausted: !done && p == max,
            evaluations,
            sample,
            projector,
        };
        if done {
            return Ok(result);
        }
        last = Some(result);
    }
    last.ok_or_else(|| Error::InvalidArgument("empty degree range".into()))
}

const SAMPLE_DOUBLINGS: usize = 4;
const ESCALATION_ROUNDS: usize = 3;

/// Stable sample of size max(min_sample_count(m), m), greedily reduced, and its projector.
pub fn boosted_projector(
    space: &FeatureSpace,
    params: &StabilityParams,
    seed: u64,
    tags: &[u64],
) -> Result<(WeightedSampleSet, Projector)> {
    let m = space.dim();
    let mut n = min_sample_count(m, params.delta, params.eta).max(m);
    let mut rng = stream(seed, tags);
    // For large m the count rule can sit too close to m for the criterion to
    // be reachable; after a few short attempts the sample size is doubled.
    let mut attempt = 0;
    let drawn = loop {
        let last = attempt == SAMPLE_DOUBLINGS;
        let rounds = if last { params.max_rounds } else { params.max_rounds.min(ESCALATION_ROUNDS) };
        let p = StabilityParams { max_rounds: rounds, ..*params };
        match draw_stable_sample(space, n, &p, &mut rng) {
            Ok(s) => break s,
            Err(Error::StabilityNotReached { .. }) if !last => {
                n *= 2;
                attempt += 1;
            }
            Err(e) => return Err(e),
        }
    };
    let sample = greedy_subsample(&drawn, params.delta, params.min_kept(m, n));
    let projector = Projector::new(&sample)?;
    Ok((sample, projector))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NodeReport {
    pub vars: Vec<usize>,
    pub level: usize,
    pub rank: usize,
    /// m_α, the dimension of the feature space.
    pub dim: usize,
    /// z_α, projection points after greedy removal.
    pub sample_size: usize,
    /// z_{α^c}, complementary points (columns).
    pub columns: usize,
    /// All evaluations spent at this node, basis adaptation included.
    pub evaluations: u64,
    pub loo_error: Option<f64>,
    /// ‖G − I‖₂ of the projection sample.
    pub certificate: f64,
    pub tolerance: f64,
    /// Tolerance actually used after applying the numerical floor.
    pub effective_tolerance: f64,
    pub tolerance_met: bool,
    pub degenerate: bool,
    /// Selected polynomial degree at a leaf.
    pub degree: Option<usize>,
    pub basis_criterion: Option<f64>,
    pub basis_exhausted: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RootReport {
    pub dim: usize,
    pub sample_size: usize,
    pub certificate: f64,
    pub evaluations: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LearnReport {
    pub tolerance: f64,
    /// Non-root nodes in tree order.
    pub nodes: Vec<NodeReport>,
    pub root: RootReport,
    /// Evaluations spent on the approximation.
    pub n: u64,
    /// Evaluations spent on tree optimization (rank estimation).
    pub n_optim: u64,
    pub n_total: u64,
    pub storage: usize,
    pub degenerate: bool,
    /// Wall-clock seconds; not part of the reproducible content.
    pub wall_time: f64,
}

impl LearnReport {
    /// Copy with timing removed, for reproducibility comparisons.
    pub fn without_timing(&self) -> LearnReport {
        LearnReport {
            wall_time: 0.0,
            ..self.clone()
        }
    }

    pub fn node(&self, vars: &[usize]) -> Option<&NodeReport> {
        self.nodes.iter().find(|n| n.vars == vars)
    }

    pub fn all_tolerances_met(&self) -> bool {
        self.nodes.iter().all(|n| n.tolerance_met && !n.basis_exhausted)
    }
}

/// Inputs shared by every node of one learning run.
pub struct NodeContext<'a> {
    pub oracle: &'a Oracle,
    pub measure: &'a ProductMeasure,
    pub leaf_families: &'a [PolynomialBasis],
    pub config: &'a LearnerConfig,
    pub seed: u64,
}

/// Feature space of a node: a leaf basis or the product of child subspaces.
pub enum NodeInput {
    Leaf(usize),
    Interior(Vec<Arc<Subspace>>),
}

/// Builds the principal subspace of one node.
pub fn build_node(
    ctx: &NodeContext<'_>,
    input: NodeInput,
    level: usize,
    budget: NodeBudget,
) -> Result<(Arc<Subspace>, NodeReport)> {
    let config = ctx.config;
    let params = &config.stability;
    let mut col_rng = match &input {
        NodeInput::Leaf(v) => stream(ctx.seed, &[TAG_COLUMNS, set_tag(&[*v])]),
        NodeInput::Interior(f) => {
            let vars: Vec<usize> = f.iter().flat_map(|s| s.variables().iter().copied()).collect();
            let mut vars = vars;
            vars.sort_unstable();
            stream(ctx.seed, &[TAG_COLUMNS, set_tag(&vars)])
        }
    };
    let mut evaluations: u64 = 0;
    let mut first_column: Option<Vec<f64>> = None;
    let mut degree = None;
    let mut basis_criterion = None;
    let mut basis_exhausted = false;

    let (space, sample, projector) = match input {
        NodeInput::Leaf(v) => {
            let family = ctx.leaf_families[v];
            if config.adaptive_basis {
                let lo = config.min_degree.min(family.degree());
                let xc = ctx.measure.sample(&mut col_rng);
                let ad = adapt_leaf_basis(ctx.oracle, v, family, lo..=family.degree(), &xc, budget.dis, params, ctx.seed)?;
                evaluations += ad.evaluations as u64;
                degree = Some(ad.basis.degree());
                basis_criterion = Some(ad.criterion);
                basis_exhausted = ad.exhausted;
                let space = FeatureSpace::leaf(v, ad.basis);
                if config.reuse_adaptation_column {
                    // The adaptation's last fiber already is a column of this node.
                    evaluations -= ad.sample.len() as u64;
                    first_column = Some(ad.coefficients);
                    (space, ad.sample, ad.projector)
                } else {
                    let (s, p) = boosted_projector(&space, params, ctx.seed, &[TAG_PROJECTION, set_tag(&[v])])?;
                    (space, s, p)
                }
            } else {
                degree = Some(family.degree());
                let space = FeatureSpace::leaf(v, family);
                let (s, p) = boosted_projector(&space, params, ctx.seed, &[TAG_PROJECTION, set_tag(&[v])])?;
                (space, s, p)
            }
        }
        NodeInput::Interior(factors) => {
            let space = FeatureSpace::product(factors)?;
            let (s, p) = boosted_projector(&space, params, ctx.seed, &[TAG_PROJECTION, set_tag(space.variables())])?;
            (space, s, p)
        }
    };

    let m = space.dim();
    let z = sample.len();
    let ps: PrincipalSubspace;
    let effective;
    if config.adaptive_pca {
        effective = budget.pca.max(numerical_floor(m, config.k_pca * m));
        let mut pending = first_column.take();
        ps = adaptive_principal_subspace(m, effective, config.k_pca * m, || {
            if let Some(c) = pending.take() {
                return Ok(c);
            }
            let xc = ctx.measure.sample(&mut col_rng);
            project_fiber(ctx.oracle, &sample, &projector, &xc)
        })?;
    } else {
        effective = budget.pca.max(numerical_floor(m, m));
        let reused = usize::from(first_column.is_some());
        let columns: Vec<Vec<f64>> = (reused..m).map(|_| ctx.measure.sample(&mut col_rng)).collect();
        let fresh = assemble_coefficient_matrix(ctx.oracle, &sample, &projector, &columns)?;
        let a = match first_column.take() {
            Some(c) => {
                let mut a = DMatrix::zeros(m, fresh.ncols() + 1);
                a.set_column(0, &DVector::from_vec(c));
                a.columns_mut(1, fresh.ncols()).copy_from(&fresh);
                a
            }
            None => fresh,
        };
        let (sigma, _) = left_singular(&a);
        let r = rank_for_tolerance(&sigma, effective).min(m);
        let errs = loo_errors(&a);
        let loo = errs.get(r.wrapping_sub(1)).copied();
        ps = PrincipalSubspace::from_matrix(a, r, loo, true);
    }
    evaluations += (z * ps.columns()) as u64;
    let sub = Subspace::new(space, ps.basis.clone())?;
    let report = NodeReport {
        vars: sub.variables().to_vec(),
        level,
        rank: ps.rank,
        dim: m,
        sample_size: z,
        columns: ps.columns(),
        evaluations,
        loo_error: ps.loo_error,
        certificate: sample.criterion(),
        tolerance: budget.pca,
        effective_tolerance: effective,
        tolerance_met: ps.tolerance_met,
        degenerate: ps.degenerate,
        degree,
        basis_criterion,
        basis_exhausted,
    };
    Ok((Arc::new(sub), report))
}

/// Final projection on the product of the root's children.
pub fn build_root(ctx: &NodeContext<'_>, factors: Vec<Arc<Subspace>>) -> Result<(Vec<f64>, RootReport)> {
    let space = FeatureSpace::product(factors)?;
    let d = ctx.oracle.dim();
    let (sample, projector) = boosted_projector(&space, &ctx.config.stability, ctx.seed, &[TAG_ROOT])?;
    let xc = vec![0.0; d];
    let coefficients = project_fiber(ctx.oracle, &sample, &projector, &xc)?;
    let report = RootReport {
        dim: space.dim(),
        sample_size: sample.len(),
        certificate: sample.criterion(),
        evaluations: sample.len() as u64,
    };
    Ok((coefficients, report))
}

/// Product measure of the leaf bases.
pub fn leaf_measure(leaf_families: &[PolynomialBasis]) -> Result<ProductMeasure> {
    ProductMeasure::new(leaf_families.iter().map(|b| b.measure()).collect())
}

/// Learns a network on a fixed tree. `leaf_families[v]` gives the measure of
/// variable v and the (maximal, when adapting) polynomial degree.
pub fn learn(
    oracle: &Oracle,
    tree: &DimensionTree,
    leaf_families: &[PolynomialBasis],
    config: &LearnerConfig,
    seed: u64,
) -> Result<(TreeTensorNetwork, LearnReport)> {
    config.validate()?;
    let start = Instant::now();
    let d = tree.dim();
    if oracle.dim() != d || leaf_families.len() != d {
        return Err(Error::DimensionMismatch {
            expected: d,
            got: if oracle.dim() != d { oracle.dim() } else { leaf_families.len() },
        });
    }
    let measure = leaf_measure(leaf_families)?;
    let ctx = NodeContext {
        oracle,
        measure: &measure,
        leaf_families,
        config,
        seed,
    };
    let budgets = tolerance_budget(config.tolerance, tree, config);
    let calls_before = oracle.calls();

    let mut subspaces: Vec<Option<Arc<Subspace>>> = vec![None; tree.len()];
    let mut reports: Vec<Option<NodeReport>> = vec![None; tree.len()];
    let order = tree.nodes_by_decreasing_level();
    let mut start_idx = 0;
    while start_idx < order.len() {
        // Nodes of one level are independent given the previous levels.
        let level = tree.node(order[start_idx]).level;
        let end = order[start_idx..]
            .iter()
            .position(|&i| tree.node(i).level != level)
            .map_or(order.len(), |p| start_idx + p);
        let batch: Vec<usize> = order[start_idx..end].to_vec();
        let results: Vec<Result<(Arc<Subspace>, NodeReport)>> = batch
            .par_iter()
            .map(|&i| {
                let node = tree.node(i);
                let input = if node.is_leaf() {
                    NodeInput::Leaf(node.vars[0])
                } else {
                    NodeInput::Interior(
                        node.children
                            .iter()
                            .map(|&c| subspaces[c].clone().expect("children processed first"))
                            .collect(),
                    )
                };
                build_node(&ctx, input, node.level, budgets[i]).map_err(|e| e.at_node(&node.vars))
            })
            .collect();
        for (&i, r) in batch.iter().zip(results) {
            let (s, rep) = r?;
            subspaces[i] = Some(s);
            reports[i] = Some(rep);
        }
        start_idx = end;
    }

    let root = tree.node(tree.root());
    let factors: Vec<Arc<Subspace>> = root
        .children
        .iter()
        .map(|&c| subspaces[c].clone().expect("children processed"))
        .collect();
    let (root_coeffs, root_report) = build_root(&ctx, factors).map_err(|e| e.at_node(&root.vars))?;

    let mut tensors = Vec::with_capacity(tree.len());
    let mut leaf_bases = vec![leaf_families[0]; d];
    for (i, node) in tree.nodes().iter().enumerate() {
        if i == tree.root() {
            tensors.push(DMatrix::from_column_slice(root_coeffs.len(), 1, &root_coeffs));
        } else {
            let s = subspaces[i].as_ref().expect("all nodes processed");
            if let FeatureSpace::Leaf { basis, .. } = s.space() {
                leaf_bases[node.vars[0]] = *basis;
            }
            tensors.push(s.coefficients().clone());
        }
    }
    let network = TreeTensorNetwork::new(tree.clone(), leaf_bases, tensors)?;
    let nodes: Vec<NodeReport> = reports.into_iter().flatten().collect();
    let n: u64 = nodes.iter().map(|r| r.evaluations).sum::<u64>() + root_report.evaluations;
    debug_assert_eq!(n, oracle.calls() - calls_before);
    let degenerate = nodes.iter().any(|r| r.degenerate) || root_coeffs.iter().all(|c| *c == 0.0);
    let report = LearnReport {
        tolerance: config.tolerance,
        storage: network.storage(),
        nodes,
        root: root_report,
        n,
        n_optim: 0,
        n_total: n,
        degenerate,
        wall_time: start.elapsed().as_secs_f64(),
    };
    Ok((network, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn heuristic_constant() {
        let c = LearnerConfig::default();
        assert_abs_diff_eq!(c.c1(), 22.2020202020, epsilon = 1e-8);
        let formal = LearnerConfig {
            constant: BudgetConstant::Formal,
            ..LearnerConfig::default()
        };
        assert!(formal.c1() > 2000.0);
    }

    #[test]
    fn budget_examples() {
        let c = LearnerConfig::default();
        let b = budget_at_level(1.0, 1, 11, 6, &c);
        assert_abs_diff_eq!(1.0 / b.pca, (2.0 * c.c1() * 10.0).sqrt(), epsilon = 1e-10);
        assert!((1.0 / b.pca - 21.07).abs() < 0.01);
        assert_eq!(budget_at_level(1.0, 5, 11, 6, &c), budget_at_level(1.0, 3, 11, 6, &c));
    }

    #[test]
    fn trailing_ratio_examples() {
        assert_abs_diff_eq!(trailing_ratio(&[1.0, 0.0, 1e-9]), 1e-9, epsilon = 1e-24);
        assert_eq!(trailing_ratio(&[0.0, 0.0]), 0.0);
    }

    #[test]
    fn rank_one_product_is_recovered() {
        let d = 4;
        let basis = PolynomialBasis::legendre(3, -1.0, 1.0).unwrap();
        let oracle = Oracle::from_fn(d, move |x| x.iter().map(|v| 3f64.sqrt() * v).product());
        let tree = DimensionTree::balanced_binary(d).unwrap();
        let config = LearnerConfig {
            tolerance: 1e-12,
            adaptive_basis: false,
            ..LearnerConfig::default()
        };
        let (net, report) = learn(&oracle, &tree, &vec![basis; d], &config, 1).unwrap();
        assert!(net.ranks().iter().all(|&r| r == 1));
        assert_eq!(report.n, oracle.calls());
        for x in [[0.1, 0.2, -0.3, 0.9], [1.0, 1.0, 1.0, 1.0]] {
            let exact: f64 = x.iter().map(|v| 3f64.sqrt() * v).product();
            assert_abs_diff_eq!(net.evaluate(&x).unwrap(), exact, epsilon = 1e-12);
        }
    }

    #[test]
    fn zero_function_gives_zero_network() {
        let d = 3;
        let basis = PolynomialBasis::legendre(2, -1.0, 1.0).unwrap();
        let oracle = Oracle::from_fn(d, |_| 0.0);
        let tree = DimensionTree::balanced_binary(d).unwrap();
        let config = LearnerConfig {
            adaptive_basis: false,
            ..LearnerConfig::default()
        };
        let (net, report) = learn(&oracle, &tree, &vec![basis; d], &config, 3).unwrap();
        assert!(report.degenerate);
        assert_eq!(net.evaluate(&[0.3, 0.1, -0.5]).unwrap(), 0.0);
    }
}
