//! Tree selection by stochastic pairing of variable groups, driven by cheap
//! estimates of ε-ranks.

use std::collections::{BTreeMap, HashMap};
use std::sync::{Arc, Mutex};
use std::time::Instant;

use nalgebra::DMatrix;
use rand::Rng;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::basis::{PolynomialBasis, ProductMeasure};
use crate::error::{Error, Result};
use crate::learner::{
    budget_at_level, build_node, build_root, leaf_measure, LearnReport, LearnerConfig, NodeContext, NodeInput,
    NodeReport,
};
use crate::network::TreeTensorNetwork;
use crate::oracle::Oracle;
use crate::pca::{left_singular, loo_errors, rank_for_tolerance};
use crate::rng::{set_tag, stream, StreamRng, TAG_PAIRING, TAG_RANK};
use crate::space::{FeatureSpace, Subspace};
use crate::tree::{node_label, DimensionTree};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RankParams {
    /// Coarse tolerance ε_c on the square root of the leave-one-out ratio.
    pub tolerance: f64,
    /// Number of points x_α (rows of the evaluation matrix).
    pub points: usize,
    /// Maximal number of complementary points (columns).
    pub max_columns: usize,
}

impl Default for RankParams {
    fn default() -> Self {
        RankParams {
            tolerance: 1e-2,
            points: 30,
            max_columns: 30,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RankEstimate {
    pub vars: Vec<usize>,
    pub rank: usize,
    pub evaluations: u64,
    pub tolerance: f64,
    /// Set when the column cap was reached before meeting the tolerance.
    pub coarse: bool,
}

/// Estimates the ε_c-rank of u for the split (α, α^c) from raw evaluations.
pub fn estimate_rank<R: Rng + ?Sized>(
    oracle: &Oracle,
    measure: &ProductMeasure,
    alpha: &[usize],
    params: &RankParams,
    rng: &mut R,
) -> Result<RankEstimate> {
    if !(params.tolerance > 0.0) || params.points == 0 || params.max_columns == 0 {
        return Err(Error::InvalidArgument("rank estimation needs a positive tolerance and caps".into()));
    }
    let d = measure.dim();
    let mut alpha = alpha.to_vec();
    alpha.sort_unstable();
    if alpha.is_empty() || alpha.iter().any(|&v| v >= d) {
        return Err(Error::InvalidArgument(format!("{} is not a subset of the variables", node_label(&alpha))));
    }
    let rows: Vec<Vec<f64>> = (0..params.points)
        .map(|_| alpha.iter().map(|&v| measure.marginal(v).sample(rng)).collect())
        .collect();
    let z = rows.len();
    let mut data: Vec<f64> = Vec::new();
    let mut evaluations = 0u64;
    let bound = params.tolerance * params.tolerance;
    loop {
        let xc = measure.sample(rng);
        let points: Vec<Vec<f64>> = rows
            .iter()
            .map(|xa| {
                let mut x = xc.clone();
                for (&v, &xv) in alpha.iter().zip(xa) {
                    x[v] = xv;
                }
                x
            })
            .collect();
        data.extend(oracle.evaluate(&points)?);
        evaluations += z as u64;
        let cols = data.len() / z;
        if cols < 2 {
            if cols >= params.max_columns {
                return Ok(RankEstimate {
                    vars: alpha,
                    rank: 1,
                    evaluations,
                    tolerance: params.tolerance,
                    coarse: true,
                });
            }
            continue;
        }
        let b = DMatrix::from_column_slice(z, cols, &data);
        let errs = loo_errors(&b);
        if let Some(r) = errs.iter().position(|e| *e <= bound) {
            return Ok(RankEstimate {
                vars: alpha,
                rank: r + 1,
                evaluations,
                tolerance: params.tolerance,
                coarse: false,
            });
        }
        if cols >= params.max_columns {
            let (sigma, _) = left_singular(&b);
            return Ok(RankEstimate {
                vars: alpha,
                rank: rank_for_tolerance(&sigma, params.tolerance),
                evaluations,
                tolerance: params.tolerance,
                coarse: true,
            });
        }
    }
}

/// Rank estimates keyed by variable set. Each set is estimated once, with a
/// stream derived from the set itself, so results do not depend on the order
/// of requests.
pub struct RankCache<'a> {
    oracle: &'a Oracle,
    measure: &'a ProductMeasure,
    params: RankParams,
    seed: u64,
    estimates: Mutex<BTreeMap<Vec<usize>, RankEstimate>>,
}

impl<'a> RankCache<'a> {
    pub fn new(oracle: &'a Oracle, measure: &'a ProductMeasure, params: RankParams, seed: u64) -> Self {
        RankCache {
            oracle,
            measure,
            params,
            seed,
            estimates: Mutex::new(BTreeMap::new()),
        }
    }

    pub fn rank(&self, vars: &[usize]) -> Result<usize> {
        let mut key = vars.to_vec();
        key.sort_unstable();
        if let Some(e) = self.estimates.lock().expect("rank cache poisoned").get(&key) {
            return Ok(e.rank);
        }
        let mut rng = stream(self.seed, &[TAG_RANK, set_tag(&key)]);
        let est = estimate_rank(self.oracle, self.measure, &key, &self.params, &mut rng)?;
        let r = est.rank;
        self.estimates.lock().expect("rank cache poisoned").insert(key, est);
        Ok(r)
    }

    /// Evaluations spent on all estimates so far.
    pub fn evaluations(&self) -> u64 {
        self.estimates
            .lock()
            .expect("rank cache poisoned")
            .values()
            .map(|e| e.evaluations)
            .sum()
    }

    pub fn estimates(&self) -> Vec<RankEstimate> {
        self.estimates.lock().expect("rank cache poisoned").values().cloned().collect()
    }
}

/// A pairing of the groups Λ, stored as a permutation of their indices:
/// positions (0,1), (2,3), ... are pairs and an odd last position passes through.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Pairing {
    order: Vec<usize>,
}

impl Pairing {
    pub fn new(order: Vec<usize>) -> Result<Self> {
        let mut sorted = order.clone();
        sorted.sort_unstable();
        if sorted.iter().enumerate().any(|(i, &v)| i != v) {
            return Err(Error::InvalidArgument("pairing order is not a permutation".into()));
        }
        Ok(Pairing { order })
    }

    pub fn random<R: Rng + ?Sized>(count: usize, rng: &mut R) -> Self {
        let mut order: Vec<usize> = (0..count).collect();
        order.shuffle(rng);
        Pairing { order }
    }

    pub fn len(&self) -> usize {
        self.order.len()
    }

    pub fn is_empty(&self) -> bool {
        self.order.is_empty()
    }

    /// Pairs of group indices, each sorted, in a canonical order.
    pub fn pairs(&self) -> Vec<(usize, usize)> {
        let mut out: Vec<(usize, usize)> = self
            .order
            .chunks_exact(2)
            .map(|c| (c[0].min(c[1]), c[0].max(c[1])))
            .collect();
        out.sort_unstable();
        out
    }

    pub fn pass_through(&self) -> Option<usize> {
        if self.order.len() % 2 == 1 {
            self.order.last().copied()
        } else {
            None
        }
    }

    /// Group paired with `g`, if any.
    pub fn partner(&self, g: usize) -> Option<usize> {
        let pos = self.order.iter().position(|&x| x == g)?;
        if pos % 2 == 0 {
            self.order.get(pos + 1).copied()
        } else {
            Some(self.order[pos - 1])
        }
    }

    /// Exchanges the positions of two groups.
    pub fn swapped(&self, a: usize, b: usize) -> Pairing {
        let mut order = self.order.clone();
        let pa = order.iter().position(|&x| x == a).expect("group in pairing");
        let pb = order.iter().position(|&x| x == b).expect("group in pairing");
        order.swap(pa, pb);
        Pairing { order }
    }

    /// Variable set of the parent of group g (its own set when passed through).
    pub fn parent_vars(&self, groups: &[Vec<usize>], g: usize) -> Vec<usize> {
        let mut vars = groups[g].clone();
        if let Some(p) = self.partner(g) {
            vars.extend_from_slice(&groups[p]);
        }
        vars.sort_unstable();
        vars
    }
}

/// Local cost Σ_{pairs β} r_β ∏_{α ⊂ β} r_α; a passed-through group costs nothing.
pub fn pairing_cost(
    groups: &[Vec<usize>],
    pairing: &Pairing,
    mut rank: impl FnMut(&[usize]) -> Result<usize>,
) -> Result<usize> {
    let mut total = 0;
    for (a, b) in pairing.pairs() {
        let mut parent = groups[a].clone();
        parent.extend_from_slice(&groups[b]);
        parent.sort_unstable();
        total += rank(&parent)? * rank(&groups[a])? * rank(&groups[b])?;
    }
    Ok(total)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PairingParams {
    pub gamma1: f64,
    pub gamma2: f64,
    /// Iterations n_P; `None` means 2d.
    pub iterations: Option<usize>,
}

impl Default for PairingParams {
    fn default() -> Self {
        PairingParams {
            gamma1: 6.0,
            gamma2: 6.0,
            iterations: None,
        }
    }
}

/// Draws ν₁ with probability ∝ r_{parent(ν₁)}^γ₁, then ν₂ outside {ν₁, partner(ν₁)}
/// with probability ∝ r_{parent(ν₂)}^γ₂.
pub fn propose_swap<R: Rng + ?Sized>(
    pairing: &Pairing,
    parent_ranks: &[usize],
    gamma1: f64,
    gamma2: f64,
    rng: &mut R,
) -> Result<(usize, usize)> {
    let k = pairing.len();
    if k < 3 {
        return Err(Error::InvalidArgument(format!("a swap needs at least 3 groups, got {k}")));
    }
    let w1: Vec<f64> = parent_ranks.iter().map(|&r| (r as f64).powf(gamma1)).collect();
    let nu1 = draw_index(&w1, rng);
    let partner = pairing.partner(nu1);
    let w2: Vec<f64> = parent_ranks
        .iter()
        .enumerate()
        .map(|(g, &r)| {
            if g == nu1 || Some(g) == partner {
                0.0
            } else {
                (r as f64).powf(gamma2)
            }
        })
        .collect();
    let nu2 = draw_index(&w2, rng);
    Ok((nu1, nu2))
}

/// Selection probabilities of ν₁.
pub fn first_choice_probabilities(parent_ranks: &[usize], gamma1: f64) -> Vec<f64> {
    let w: Vec<f64> = parent_ranks.iter().map(|&r| (r as f64).powf(gamma1)).collect();
    let total: f64 = w.iter().sum();
    w.iter().map(|x| x / total).collect()
}

fn draw_index<R: Rng + ?Sized>(w: &[f64], rng: &mut R) -> usize {
    let total: f64 = w.iter().sum();
    let mut t = rng.random::<f64>() * total;
    let mut last = 0;
    for (i, &x) in w.iter().enumerate() {
        if x > 0.0 {
            last = i;
            if t < x {
                return i;
            }
            t -= x;
        }
    }
    last
}

#[derive(Clone, Debug)]
pub struct PairingOutcome {
    pub pairing: Pairing,
    pub cost: usize,
    pub initial_cost: usize,
    /// Costs of the current pairing after each iteration.
    pub trace: Vec<usize>,
}

/// Stochastic local search over pairings of `groups` (Λ).
pub fn optimize_pairing<R: Rng + ?Sized>(
    groups: &[Vec<usize>],
    cache: &RankCache<'_>,
    params: &PairingParams,
    iterations: usize,
    rng: &mut R,
) -> Result<PairingOutcome> {
    let k = groups.len();
    if k < 2 {
        return Err(Error::InvalidArgument("pairing needs at least 2 groups".into()));
    }
    let rank = |v: &[usize]| cache.rank(v);
    let mut current = Pairing::random(k, rng);
    let mut cost = pairing_cost(groups, &current, rank)?;
    let initial_cost = cost;
    let mut best = (current.clone(), cost);
    let mut trace = Vec::new();
    if k >= 3 {
        for _ in 0..iterations {
            let parent_ranks: Vec<usize> = (0..k)
                .map(|g| cache.rank(&current.parent_vars(groups, g)))
                .collect::<Result<_>>()?;
            let (a, b) = propose_swap(&current, &parent_ranks, params.gamma1, params.gamma2, rng)?;
            let cand = current.swapped(a, b);
            let c = pairing_cost(groups, &cand, rank)?;
            if c <= cost {
                current = cand;
                cost = c;
                if c < best.1 {
                    best = (current.clone(), c);
                }
            }
            trace.push(cost);
        }
    }
    Ok(PairingOutcome {
        pairing: best.0,
        cost: best.1,
        initial_cost,
        trace,
    })
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TreeAdaptationParams {
    pub rank: RankParams,
    pub pairing: PairingParams,
}

/// Level assumed for budgets of nodes built while #Λ groups remain.
fn level_estimate(groups: usize, cap: usize) -> usize {
    let mut l = 0;
    while (1usize << l) < groups {
        l += 1;
    }
    l.min(cap)
}

/// Learns the tree and the network together, pairing groups level by level.
pub fn learn_with_tree_adaptation(
    oracle: &Oracle,
    leaf_families: &[PolynomialBasis],
    config: &LearnerConfig,
    params: &TreeAdaptationParams,
    seed: u64,
) -> Result<(DimensionTree, TreeTensorNetwork, LearnReport)> {
    config.validate()?;
    let start = Instant::now();
    let d = leaf_families.len();
    if d < 2 || oracle.dim() != d {
        return Err(Error::DimensionMismatch {
            expected: d.max(2),
            got: oracle.dim(),
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
    let node_count = 2 * d - 1;
    let cache = RankCache::new(oracle, &measure, params.rank, seed);
    let iterations = params.pairing.iterations.unwrap_or(2 * d);
    let calls_before = oracle.calls();

    let mut built: HashMap<Vec<usize>, (Arc<Subspace>, NodeReport)> = HashMap::new();
    let mut groups: Vec<Vec<usize>> = (0..d).map(|v| vec![v]).collect();
    let mut pending: Vec<(Vec<usize>, NodeInput)> = (0..d).map(|v| (vec![v], NodeInput::Leaf(v))).collect();
    let mut round = 0u64;
    loop {
        let level = level_estimate(groups.len(), config.level_cap);
        let budget = budget_at_level(config.tolerance, level, node_count, d, config);
        for (vars, input) in pending.drain(..) {
            let (s, rep) = build_node(&ctx, input, level, budget).map_err(|e| e.at_node(&vars))?;
            built.insert(vars, (s, rep));
        }
        if groups.len() <= 2 {
            break;
        }
        let mut rng: StreamRng = stream(seed, &[TAG_PAIRING, round]);
        let outcome = optimize_pairing(&groups, &cache, &params.pairing, iterations, &mut rng)?;
        let mut next: Vec<Vec<usize>> = Vec::new();
        for (a, b) in outcome.pairing.pairs() {
            let mut vars = groups[a].clone();
            vars.extend_from_slice(&groups[b]);
            vars.sort_unstable();
            let factors = vec![built[&groups[a]].0.clone(), built[&groups[b]].0.clone()];
            pending.push((vars.clone(), NodeInput::Interior(factors)));
            next.push(vars);
        }
        if let Some(g) = outcome.pairing.pass_through() {
            next.push(groups[g].clone());
        }
        next.sort();
        groups = next;
        round += 1;
    }

    let factors: Vec<Arc<Subspace>> = groups.iter().map(|g| built[g].0.clone()).collect();
    let all: Vec<usize> = (0..d).collect();
    let (root_coeffs, root_report) = build_root(&ctx, factors).map_err(|e| e.at_node(&all))?;

    let mut sets: Vec<Vec<usize>> = built.keys().cloned().collect();
    sets.push(all);
    let tree = DimensionTree::validate(d, &sets)?;
    let mut tensors = Vec::with_capacity(tree.len());
    let mut leaf_bases = leaf_families.to_vec();
    let mut nodes = Vec::with_capacity(tree.len() - 1);
    for (i, node) in tree.nodes().iter().enumerate() {
        if i == tree.root() {
            tensors.push(DMatrix::from_column_slice(root_coeffs.len(), 1, &root_coeffs));
            continue;
        }
        let (s, rep) = &built[&node.vars];
        if let FeatureSpace::Leaf { basis, .. } = s.space() {
            leaf_bases[node.vars[0]] = *basis;
        }
        tensors.push(s.coefficients().clone());
        nodes.push(rep.clone());
    }
    let network = TreeTensorNetwork::new(tree.clone(), leaf_bases, tensors)?;
    let n: u64 = nodes.iter().map(|r| r.evaluations).sum::<u64>() + root_report.evaluations;
    let n_optim = cache.evaluations();
    debug_assert_eq!(n + n_optim, oracle.calls() - calls_before);
    let degenerate = nodes.iter().any(|r| r.degenerate) || root_coeffs.iter().all(|c| *c == 0.0);
    let report = LearnReport {
        tolerance: config.tolerance,
        storage: network.storage(),
        nodes,
        root: root_report,
        n,
        n_optim,
        n_total: n + n_optim,
        degenerate,
        wall_time: start.elapsed().as_secs_f64(),
    };
    Ok((tree, network, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn singletons(k: usize) -> Vec<Vec<usize>> {
        (0..k).map(|v| vec![v]).collect()
    }

    #[test]
    fn cost_example() {
        let groups = singletons(4);
        let p = Pairing::new(vec![0, 1, 2, 3]).unwrap();
        let cost = pairing_cost(&groups, &p, |v| {
            Ok(match v {
                [0, 1] => 3,
                [2, 3] => 2,
                _ => 2,
            })
        })
        .unwrap();
        assert_eq!(cost, 20);
        let ones = pairing_cost(&groups, &p, |_| Ok(1)).unwrap();
        assert_eq!(ones, 2);
    }

    #[test]
    fn odd_pairing_passes_one_group_through() {
        let p = Pairing::new(vec![3, 0, 4, 1, 2]).unwrap();
        assert_eq!(p.pairs(), vec![(0, 3), (1, 4)]);
        assert_eq!(p.pass_through(), Some(2));
        assert_eq!(p.partner(2), None);
        let groups = singletons(5);
        assert_eq!(pairing_cost(&groups, &p, |_| Ok(1)).unwrap(), 2);
    }

    #[test]
    fn swap_selection_probabilities() {
        let probs = first_choice_probabilities(&[3, 3, 1, 1], 1.0);
        assert_abs_diff_eq!(probs[0], 3.0 / 8.0, epsilon = 1e-15);
        let uniform = first_choice_probabilities(&[3, 5, 1, 1], 0.0);
        assert!(uniform.iter().all(|p| (p - 0.25).abs() < 1e-15));
    }

    #[test]
    fn swap_never_picks_partner() {
        let p = Pairing::new(vec![0, 1, 2, 3]).unwrap();
        let mut rng = stream(4, &[]);
        for _ in 0..200 {
            let (a, b) = propose_swap(&p, &[3, 3, 1, 1], 6.0, 6.0, &mut rng).unwrap();
            assert_ne!(a, b);
            assert_ne!(Some(b), p.partner(a));
        }
        let two = Pairing::new(vec![0, 1]).unwrap();
        assert!(propose_swap(&two, &[1, 1], 1.0, 1.0, &mut rng).is_err());
    }

    #[test]
    fn level_estimates() {
        assert_eq!(level_estimate(8, 3), 3);
        assert_eq!(level_estimate(4, 3), 2);
        assert_eq!(level_estimate(2, 3), 1);
        assert_eq!(level_estimate(19, 3), 3);
    }

    #[test]
    fn separable_product_has_rank_one() {
        let measure = ProductMeasure::uniform(4, -1.0, 1.0).unwrap();
        let oracle = Oracle::from_fn(4, |x| (1.0 + x[0] * x[1]) * (2.0 + x[2]) * x[3].exp());
        let est = estimate_rank(&oracle, &measure, &[0, 1], &RankParams::default(), &mut stream(1, &[])).unwrap();
        assert_eq!(est.rank, 1);
        assert_eq!(est.evaluations, oracle.calls());
    }
}
