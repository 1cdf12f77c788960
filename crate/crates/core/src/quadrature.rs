//! Gauss quadrature for the built-in marginal measures.

use nalgebra::{DMatrix, SymmetricEigen};

use crate::basis::{MarginalMeasure, PolynomialBasis};

/// Nodes and probability weights (summing to one) of a Gauss rule.
#[derive(Clone, Debug)]
pub struct QuadratureRule {
    pub nodes: Vec<f64>,
    pub weights: Vec<f64>,
}

impl QuadratureRule {
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Integral of `f` against the measure.
    pub fn integrate(&self, mut f: impl FnMut(f64) -> f64) -> f64 {
        self.nodes
            .iter()
            .zip(&self.weights)
            .map(|(&x, &w)| w * f(x))
            .sum()
    }
}

/// Node count used for a basis of the given degree.
pub fn default_node_count(degree: usize) -> usize {
    (2 * degree + 1).max(64)
}

/// n-point Gauss rule for `measure`, exact for polynomials of degree 2n-1.
///
/// Nodes come from the Golub-Welsch eigenproblem; weights are recomputed from
/// the Christoffel function, which keeps tiny Hermite weights accurate.
pub fn gauss_rule(measure: &MarginalMeasure, n: usize) -> QuadratureRule {
    assert!(n >= 1);
    let basis = PolynomialBasis::for_measure(*measure, n - 1);
    let mut jacobi = DMatrix::<f64>::zeros(n, n);
    for k in 1..n {
        let b = basis.recurrence_coefficient(k);
        jacobi[(k, k - 1)] = b;
        jacobi[(k - 1, k)] = b;
    }
    let eig = SymmetricEigen::new(jacobi);
    let mut ts: Vec<f64> = eig.eigenvalues.iter().copied().collect();
    ts.sort_by(|a, b| a.total_cmp(b));

    let mut nodes = Vec::with_capacity(n);
    let mut weights = Vec::with_capacity(n);
    let mut vals = vec![0.0; n];
    for &t in &ts {
        let t = polish_root(&basis, t, n);
        let x = measure.from_standard(t);
        basis.eval_standard_into(t, &mut vals);
        let s: f64 = vals.iter().map(|v| v * v).sum();
        nodes.push(x);
        weights.push(1.0 / s);
    }
    // Renormalize away the last ulps so the rule integrates constants exactly.
    let total: f64 = weights.iter().sum();
    for w in &mut weights {
        *w /= total;
    }
    QuadratureRule { nodes, weights }
}

/// A few Newton steps on p_n(t) = 0, starting from the eigenvalue estimate.
fn polish_root(basis: &PolynomialBasis, mut t: f64, n: usize) -> f64 {
    for _ in 0..3 {
        let (p, dp) = basis.standard_value_and_derivative(n, t);
        if dp == 0.0 || !dp.is_finite() || !p.is_finite() {
            break;
        }
        let step = p / dp;
        if !step.is_finite() || step.abs() > 1e-6 * (1.0 + t.abs()) {
            break;
        }
        t -= step;
    }
    t
}

/// Gauss-Legendre rule on [0, 1] with weights summing to one.
pub fn gauss_legendre_unit(n: usize) -> QuadratureRule {
    // Uniform on [0,1] has density 1, so probability weights are Lebesgue weights.
    gauss_rule(&MarginalMeasure::Uniform { a: 0.0, b: 1.0 }, n)
}

/// Default rule for integrating products of two basis functions.
pub fn rule_for_basis(basis: &PolynomialBasis) -> QuadratureRule {
    gauss_rule(&basis.measure(), default_node_count(basis.degree()))
}
