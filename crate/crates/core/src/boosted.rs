//! Boosted optimal weighted least-squares projection onto a feature space.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::{Rng, SeedableRng};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::StreamRng;
use crate::sampling::{inverse_weight_of, sample_space};
use crate::space::FeatureSpace;

/// Parameters of the stability-selected sampling.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StabilityParams {
    /// Candidate samples drawn per round (M).
    pub repetitions: usize,
    /// Accepted spectral distance between the Gram matrix and the identity.
    pub delta: f64,
    /// Failure probability in the sample-count rule.
    pub eta: f64,
    /// Minimal fraction of the drawn points kept by greedy removal.
    /// `None` keeps at least m points, i.e. the fraction m/n.
    pub keep_fraction: Option<f64>,
    pub max_rounds: usize,
}

impl Default for StabilityParams {
    fn default() -> Self {
        StabilityParams {
            repetitions: 100,
            delta: 0.9,
            eta: 0.01,
            keep_fraction: None,
            max_rounds: 100,
        }
    }
}

impl StabilityParams {
    pub fn validate(&self) -> Result<()> {
        let in_unit = |v: f64| v > 0.0 && v < 1.0;
        if self.repetitions == 0 || self.max_rounds == 0 {
            return Err(Error::InvalidArgument("repetitions and max_rounds must be positive".into()));
        }
        if !in_unit(self.delta) || !in_unit(self.eta) {
            return Err(Error::InvalidArgument(format!(
                "delta and eta must lie in (0,1), got {} and {}",
                self.delta, self.eta
            )));
        }
        if let Some(p) = self.keep_fraction {
            if !(p > 0.0 && p <= 1.0) {
                return Err(Error::InvalidArgument(format!("keep fraction {p} outside (0,1]")));
            }
        }
        Ok(())
    }

    /// Lower bound on the size after greedy removal for a drawn sample of size n.
    pub fn min_kept(&self, m: usize, n: usize) -> usize {
        let z = match self.keep_fraction {
            Some(p) => (p * n as f64).ceil() as usize,
            None => m,
        };
        z.max(m)
    }
}

/// Smallest n with n >= (-δ + (1+δ) ln(1+δ)) m ln(2m/η).
pub fn min_sample_count(m: usize, delta: f64, eta: f64) -> usize {
    let c = -delta + (1.0 + delta) * (1.0 + delta).ln();
    let m = m as f64;
    let bound = c * m * (2.0 * m / eta).ln();
    // Guard against the bound landing a few ulps above an integer.
    (bound - 1e-9).ceil().max(1.0) as usize
}

/// G = (1/z) Σ_i w_i φ(x_i) φ(x_i)^T.
pub fn empirical_gram(features: &DMatrix<f64>, weights: &[f64]) -> DMatrix<f64> {
    let z = features.nrows();
    let m = features.ncols();
    let mut g = DMatrix::zeros(m, m);
    for i in 0..z {
        let row = features.row(i);
        let w = weights[i] / z as f64;
        for a in 0..m {
            let wa = w * row[a];
            for b in a..m {
                g[(a, b)] += wa * row[b];
            }
        }
    }
    for a in 0..m {
        for b in 0..a {
            g[(a, b)] = g[(b, a)];
        }
    }
    g
}

/// Spectral distance ‖G − I‖₂ of a symmetric matrix.
pub fn stability_criterion(gram: &DMatrix<f64>) -> f64 {
    let eig = SymmetricEigen::new(gram.clone());
    eig.eigenvalues.iter().map(|l| (l - 1.0).abs()).fold(0.0, f64::max)
}

/// Points x_α with their optimal weights, basis values and Gram certificate.
#[derive(Clone, Debug)]
pub struct WeightedSampleSet {
    variables: Vec<usize>,
    points: Vec<Vec<f64>>,
    weights: Vec<f64>,
    features: DMatrix<f64>,
    criterion: f64,
}

impl WeightedSampleSet {
    /// Builds a sample from points given in the order of `space.variables()`.
    pub fn from_points(space: &FeatureSpace, points: Vec<Vec<f64>>, weights: Vec<f64>) -> Result<Self> {
        if points.is_empty() || points.len() != weights.len() {
            return Err(Error::ShapeMismatch(format!(
                "{} points with {} weights",
                points.len(),
                weights.len()
            )));
        }
        let m = space.dim();
        let mut features = DMatrix::zeros(points.len(), m);
        for (i, p) in points.iter().enumerate() {
            let phi = space.eval(p)?;
            for j in 0..m {
                features[(i, j)] = phi[j];
            }
        }
        let criterion = stability_criterion(&empirical_gram(&features, &weights));
        Ok(WeightedSampleSet {
            variables: space.variables().to_vec(),
            points,
            weights,
            features,
            criterion,
        })
    }

    /// Draws n i.i.d. points from the optimal measure of `space`.
    pub fn draw<R: Rng + ?Sized>(space: &FeatureSpace, n: usize, rng: &mut R) -> Self {
        let vars = space.variables().to_vec();
        let width = vars.iter().max().map_or(0, |v| v + 1);
        let m = space.dim();
        let mut full = vec![0.0; width];
        let mut points = Vec::with_capacity(n);
        let mut weights = Vec::with_capacity(n);
        let mut features = DMatrix::zeros(n, m);
        let mut phi = vec![0.0; m];
        for i in 0..n {
            sample_space(space, rng, &mut full);
            space.eval_full_into(&full, &mut phi);
            weights.push(1.0 / inverse_weight_of(&phi));
            for j in 0..m {
                features[(i, j)] = phi[j];
            }
            points.push(vars.iter().map(|&v| full[v]).collect());
        }
        let criterion = stability_criterion(&empirical_gram(&features, &weights));
        WeightedSampleSet {
            variables: vars,
            points,
            weights,
            features,
            criterion,
        }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn variables(&self) -> &[usize] {
        &self.variables
    }

    /// Point i as x_α, ordered like `variables()`.
    pub fn point(&self, i: usize) -> &[f64] {
        &self.points[i]
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    /// Basis values, one row per point.
    pub fn features(&self) -> &DMatrix<f64> {
        &self.features
    }

    /// ‖G − I‖₂ of this sample.
    pub fn criterion(&self) -> f64 {
        self.criterion
    }

    pub fn gram(&self) -> DMatrix<f64> {
        empirical_gram(&self.features, &self.weights)
    }

    /// Writes point i into the coordinates of a full d-dimensional point.
    pub fn embed(&self, i: usize, full: &mut [f64]) {
        for (&v, &x) in self.variables.iter().zip(&self.points[i]) {
            full[v] = x;
        }
    }

    fn without(&self, remove: usize) -> WeightedSampleSet {
        let keep: Vec<usize> = (0..self.len()).filter(|&i| i != remove).collect();
        let features = self.features.select_rows(keep.iter());
        let weights: Vec<f64> = keep.iter().map(|&i| self.weights[i]).collect();
        let criterion = stability_criterion(&empirical_gram(&features, &weights));
        WeightedSampleSet {
            variables: self.variables.clone(),
            points: keep.iter().map(|&i| self.points[i].clone()).collect(),
            weights,
            features,
            criterion,
        }
    }
}

/// Best of M candidate n-samples, resampled by rounds until ‖G − I‖₂ ≤ δ.
pub fn draw_stable_sample<R: Rng + ?Sized>(
    space: &FeatureSpace,
    n: usize,
    params: &StabilityParams,
    rng: &mut R,
) -> Result<WeightedSampleSet> {
    params.validate()?;
    if n < space.dim() {
        return Err(Error::InvalidArgument(format!(
            "sample size {n} below the space dimension {}",
            space.dim()
        )));
    }
    let mut best_seen = f64::INFINITY;
    for _ in 0..params.max_rounds {
        // Candidates consume pre-split streams, so the selected sample does
        // not depend on the order in which candidates are evaluated.
        let seeds: Vec<u64> = (0..params.repetitions).map(|_| rng.random()).collect();
        let mut best: Option<WeightedSampleSet> = None;
        for seed in seeds {
            let cand = WeightedSampleSet::draw(space, n, &mut StreamRng::seed_from_u64(seed));
            if best.as_ref().is_none_or(|b| cand.criterion < b.criterion) {
                best = Some(cand);
            }
        }
        let best = best.expect("at least one candidate");
        best_seen = best_seen.min(best.criterion);
        if best.criterion <= params.delta {
            return Ok(best);
        }
    }
    Err(Error::StabilityNotReached {
        space: space.describe(),
        rounds: params.max_rounds,
        best: best_seen,
    })
}

/// Greedily removes the point whose removal gives the smallest ‖G − I‖₂,
/// as long as the result stays within δ and above `z_min` points.
pub fn greedy_subsample(sample: &WeightedSampleSet, delta: f64, z_min: usize) -> WeightedSampleSet {
    let m = sample.features.ncols();
    let floor = z_min.max(m);
    let mut cur = sample.clone();
    while cur.len() > floor {
        let z = cur.len();
        let s = &cur.features.transpose() * DMatrix::from_diagonal(&DVector::from_column_slice(&cur.weights)) * &cur.features;
        let eig = SymmetricEigen::new(s.clone());
        let mut order: Vec<usize> = (0..m).collect();
        order.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]));
        let d: Vec<f64> = order.iter().map(|&k| eig.eigenvalues[k]).collect();
        let u = eig.eigenvectors.select_columns(order.iter());
        let scale = 1.0 / (z - 1) as f64;
        let mut crit = Vec::with_capacity(z);
        for i in 0..z {
            let v = u.transpose() * cur.features.row(i).transpose();
            let (lo, hi) = downdated_extremes(&d, v.as_slice(), cur.weights[i]);
            crit.push(((lo * scale - 1.0).abs()).max((hi * scale - 1.0).abs()));
        }
        let mut best = argmin(&crit);
        let mut next = cur.without(best);
        if (next.criterion - crit[best]).abs() > 1e-8 {
            // The secular estimates lost accuracy; recompute every candidate exactly.
            for (i, c) in crit.iter_mut().enumerate() {
                let mut t = s.clone();
                let row = cur.features.row(i);
                t -= cur.weights[i] * row.transpose() * row;
                *c = stability_criterion(&(t * scale));
            }
            best = argmin(&crit);
            next = cur.without(best);
        }
        if next.criterion > delta {
            break;
        }
        cur = next;
    }
    cur
}

fn argmin(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x < v[best] {
            best = i;
        }
    }
    best
}

/// Smallest and largest eigenvalues of diag(d) − ρ v v^T, d sorted ascending.
///
/// Uses the inertia count: the number of eigenvalues below λ equals
/// #{d_k < λ} plus one when 1 − ρ Σ v_k² / (d_k − λ) is negative.
fn downdated_extremes(d: &[f64], v: &[f64], rho: f64) -> (f64, f64) {
    let m = d.len();
    let norm2: f64 = v.iter().map(|x| x * x).sum();
    let count_below = |lambda: f64| -> usize {
        let mut below = 0;
        let mut g = 1.0;
        for (dk, vk) in d.iter().zip(v) {
            if *dk < lambda {
                below += 1;
            }
            let gap = dk - lambda;
            if gap == 0.0 {
                return below + usize::from(*vk != 0.0);
            }
            g -= rho * vk * vk / gap;
        }
        below + usize::from(g < 0.0)
    };
    let bisect = |mut lo: f64, mut hi: f64, k: usize| -> f64 {
        // Smallest λ with count_below(λ) >= k, i.e. the k-th eigenvalue.
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if mid <= lo || mid >= hi || hi - lo <= 1e-15 * hi.abs().max(lo.abs()).max(1e-300) {
                break;
            }
            if count_below(mid) >= k {
                hi = mid;
            } else {
                lo = mid;
            }
        }
        0.5 * (lo + hi)
    };
    let spread = rho * norm2;
    let pad = 1e-12 * (d[m - 1].abs() + spread) + f64::MIN_POSITIVE;
    let lo = bisect(d[0] - spread - pad, d[0] + pad, 1);
    let hi = if m == 1 {
        lo
    } else {
        bisect(d[m - 2] - pad, d[m - 1] + pad, m)
    };
    (lo, hi)
}

/// Weighted least-squares projector onto a feature space for a fixed sample.
#[derive(Clone, Debug)]
pub struct Projector {
    /// c = solve · values.
    solve: DMatrix<f64>,
}

impl Projector {
    pub fn new(sample: &WeightedSampleSet) -> Result<Self> {
        let z = sample.len();
        let m = sample.features.ncols();
        if z < m {
            return Err(Error::SingularSystem(format!("{z} points for {m} unknowns")));
        }
        let mut a = sample.features.clone();
        for i in 0..z {
            let sw = sample.weights[i].sqrt();
            a.row_mut(i).scale_mut(sw);
        }
        let qr = a.qr();
        let r = qr.r();
        let diag: Vec<f64> = (0..m).map(|k| r[(k, k)].abs()).collect();
        let max = diag.iter().cloned().fold(0.0, f64::max);
        let min = diag.iter().cloned().fold(f64::INFINITY, f64::min);
        if !(min > 1e-12 * max) {
            return Err(Error::SingularSystem(format!("R diagonal ratio {:.3e}", min / max)));
        }
        let mut qt = qr.q().transpose();
        for i in 0..z {
            let sw = sample.weights[i].sqrt();
            qt.column_mut(i).scale_mut(sw);
        }
        let solve = r
            .solve_upper_triangular(&qt)
            .ok_or_else(|| Error::SingularSystem("triangular solve failed".into()))?;
        Ok(Projector { solve })
    }

    pub fn dim(&self) -> usize {
        self.solve.nrows()
    }

    pub fn sample_size(&self) -> usize {
        self.solve.ncols()
    }

    /// Coefficients of the weighted least-squares fit to `values`.
    pub fn project(&self, values: &[f64]) -> Result<Vec<f64>> {
        if values.len() != self.solve.ncols() {
            return Err(Error::DimensionMismatch {
                expected: self.solve.ncols(),
                got: values.len(),
            });
        }
        let v = DVector::from_column_slice(values);
        Ok((&self.solve * v).as_slice().to_vec())
    }
}

/// One-shot projection of values at the sample points.
pub fn project(sample: &WeightedSampleSet, values: &[f64]) -> Result<Vec<f64>> {
    Projector::new(sample)?.project(values)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::basis::PolynomialBasis;
    use crate::quadrature::rule_for_basis;
    use crate::rng::stream;
    use approx::assert_abs_diff_eq;

    fn legendre_space(p: usize) -> FeatureSpace {
        FeatureSpace::leaf(0, PolynomialBasis::legendre(p, -1.0, 1.0).unwrap())
    }

    #[test]
    fn sample_count_rule() {
        assert_eq!(min_sample_count(10, 0.9, 0.01), 25);
        assert_eq!(min_sample_count(1, 0.9, 0.01), 2);
        let mut prev = 0;
        for m in 1..200 {
            let n = min_sample_count(m, 0.9, 0.01);
            assert!(n >= prev);
            prev = n;
        }
    }

    #[test]
    fn quadrature_sample_has_identity_gram() {
        let space = legendre_space(4);
        let basis = PolynomialBasis::legendre(4, -1.0, 1.0).unwrap();
        let rule = rule_for_basis(&basis);
        let z = rule.len() as f64;
        let points = rule.nodes.iter().map(|x| vec![*x]).collect();
        let weights = rule.weights.iter().map(|w| w * z).collect();
        let s = WeightedSampleSet::from_points(&space, points, weights).unwrap();
        assert!(s.criterion() < 1e-12);
    }

    #[test]
    fn constant_space_single_point() {
        let space = legendre_space(0);
        let s = WeightedSampleSet::from_points(&space, vec![vec![0.2]], vec![1.0]).unwrap();
        assert_abs_diff_eq!(s.gram()[(0, 0)], 1.0);
        let sub = greedy_subsample(&s, 0.9, 1);
        assert_eq!(sub.len(), 1);
    }

    #[test]
    fn monte_carlo_gram_converges() {
        let space = legendre_space(4);
        let s = WeightedSampleSet::draw(&space, 100_000, &mut stream(3, &[]));
        assert!(s.criterion() < 0.05, "{}", s.criterion());
    }

    #[test]
    fn stable_sample_and_greedy_keep_certificate() {
        let params = StabilityParams::default();
        for p in [0, 2, 6] {
            let space = legendre_space(p);
            let m = space.dim();
            let n = min_sample_count(m, params.delta, params.eta).max(m);
            let s = draw_stable_sample(&space, n, &params, &mut stream(p as u64, &[])).unwrap();
            assert!(s.criterion() <= 0.9);
            let sub = greedy_subsample(&s, params.delta, params.min_kept(m, n));
            assert!(sub.criterion() <= 0.9);
            assert!(sub.len() >= m);
            let eig = SymmetricEigen::new(sub.gram());
            assert!(eig.eigenvalues.iter().all(|l| *l >= 0.1 && *l <= 1.9));
            if m == 1 {
                assert_eq!(sub.len(), 1);
            }
            let unchanged = greedy_subsample(&s, params.delta, s.len());
            assert_eq!(unchanged.len(), s.len());
        }
    }

    #[test]
    fn secular_extremes_match_exact_eigenvalues() {
        let d = [0.5, 1.0, 1.0, 2.5];
        let v = [0.3, -0.2, 0.0, 0.7];
        let rho = 1.3;
        let (lo, hi) = downdated_extremes(&d, &v, rho);
        let mut a = DMatrix::from_diagonal(&DVector::from_column_slice(&d));
        let vv = DVector::from_column_slice(&v);
        a -= rho * &vv * vv.transpose();
        let eig = SymmetricEigen::new(a);
        let min = eig.eigenvalues.min();
        let max = eig.eigenvalues.max();
        assert_abs_diff_eq!(lo, min, epsilon = 1e-12);
        assert_abs_diff_eq!(hi, max, epsilon = 1e-12);
    }

    #[test]
    fn projection_reproduces_basis_elements() {
        let space = legendre_space(3);
        let params = StabilityParams::default();
        let n = min_sample_count(4, 0.9, 0.01);
        let s = draw_stable_sample(&space, n, &params, &mut stream(1, &[])).unwrap();
        let s = greedy_subsample(&s, 0.9, 4);
        let values: Vec<f64> = (0..s.len()).map(|i| s.features()[(i, 2)]).collect();
        let c = project(&s, &values).unwrap();
        for (j, cj) in c.iter().enumerate() {
            assert_abs_diff_eq!(*cj, if j == 2 { 1.0 } else { 0.0 }, epsilon = 1e-12);
        }
    }

    #[test]
    fn projection_of_cubic_matches_quadrature_oracle() {
        let basis = PolynomialBasis::legendre(1, -1.0, 1.0).unwrap();
        let space = legendre_space(1);
        let rule = rule_for_basis(&basis);
        let z = rule.len() as f64;
        let points: Vec<Vec<f64>> = rule.nodes.iter().map(|x| vec![*x]).collect();
        let weights = rule.weights.iter().map(|w| w * z).collect();
        let s = WeightedSampleSet::from_points(&space, points.clone(), weights).unwrap();
        let values: Vec<f64> = points.iter().map(|p| p[0].powi(3)).collect();
        let c = project(&s, &values).unwrap();
        // Exact L² projection coefficients (f, φ_j) by quadrature.
        let exact: Vec<f64> = (0..2).map(|j| rule.integrate(|x| x.powi(3) * basis.eval(x)[j])).collect();
        assert_abs_diff_eq!(c[0], exact[0], epsilon = 1e-13);
        assert_abs_diff_eq!(c[1], exact[1], epsilon = 1e-13);
        assert_abs_diff_eq!(c[1], 3f64.sqrt() / 5.0, epsilon = 1e-13);
    }

    #[test]
    fn singular_system_is_reported() {
        let space = legendre_space(2);
        let s = WeightedSampleSet::from_points(&space, vec![vec![0.1], vec![0.1], vec![0.1]], vec![1.0; 3]).unwrap();
        assert!(matches!(Projector::new(&s), Err(Error::SingularSystem(_))));
    }
}
