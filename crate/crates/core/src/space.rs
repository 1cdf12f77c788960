//! Feature spaces: univariate polynomial spaces at the leaves and tensor
//! products of learned subspaces at interior nodes.

use std::sync::Arc;

use nalgebra::DMatrix;

use crate::basis::PolynomialBasis;
use crate::error::{Error, Result};

/// Orthonormal basis {φ_j} of V_α.
#[derive(Clone, Debug)]
pub enum FeatureSpace {
    Leaf { variable: usize, basis: PolynomialBasis },
    /// Product of child subspaces, ordered lexicographically by variable set.
    /// Basis index is mixed-radix with the first factor varying slowest.
    Product { variables: Vec<usize>, factors: Vec<Arc<Subspace>> },
}

impl FeatureSpace {
    pub fn leaf(variable: usize, basis: PolynomialBasis) -> Self {
        FeatureSpace::Leaf { variable, basis }
    }

    /// Tensor product of subspaces on disjoint variable sets.
    pub fn product(mut factors: Vec<Arc<Subspace>>) -> Result<Self> {
        if factors.is_empty() {
            return Err(Error::InvalidArgument("product of zero subspaces".into()));
        }
        factors.sort_by(|a, b| a.variables().cmp(b.variables()));
        let mut variables: Vec<usize> =
            factors.iter().flat_map(|f| f.variables().iter().copied()).collect();
        variables.sort_unstable();
        if variables.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::InvalidArgument("product factors share a variable".into()));
        }
        Ok(FeatureSpace::Product { variables, factors })
    }

    pub fn dim(&self) -> usize {
        match self {
            FeatureSpace::Leaf { basis, .. } => basis.dim(),
            FeatureSpace::Product { factors, .. } => factors.iter().map(|f| f.rank()).product(),
        }
    }

    /// Sorted variables of the space.
    pub fn variables(&self) -> &[usize] {
        match self {
            FeatureSpace::Leaf { variable, .. } => std::slice::from_ref(variable),
            FeatureSpace::Product { variables, .. } => variables,
        }
    }

    pub fn describe(&self) -> String {
        match self {
            FeatureSpace::Leaf { variable, basis } => {
                format!("{} degree {} on variable {variable}", basis.family_name(), basis.degree())
            }
            FeatureSpace::Product { variables, .. } => {
                format!("product space of dimension {} on {}", self.dim(), crate::tree::node_label(variables))
            }
        }
    }

    /// Basis values at a full d-dimensional point (only this space's coordinates are read).
    pub fn eval_full_into(&self, x: &[f64], out: &mut [f64]) {
        match self {
            FeatureSpace::Leaf { variable, basis } => basis.eval_into(x[*variable], out),
            FeatureSpace::Product { factors, .. } => {
                let vals: Vec<Vec<f64>> = factors.iter().map(|f| f.eval_full(x)).collect();
                kron_into(&vals, out);
            }
        }
    }

    pub fn eval_full(&self, x: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.dim()];
        self.eval_full_into(x, &mut out);
        out
    }

    /// Basis values at x_α, given in the order of `variables()`.
    pub fn eval(&self, x_alpha: &[f64]) -> Result<Vec<f64>> {
        let vars = self.variables();
        if x_alpha.len() != vars.len() {
            return Err(Error::DimensionMismatch {
                expected: vars.len(),
                got: x_alpha.len(),
            });
        }
        let d = vars.iter().max().map_or(0, |v| v + 1);
        let mut full = vec![0.0; d];
        for (&v, &xv) in vars.iter().zip(x_alpha) {
            full[v] = xv;
        }
        Ok(self.eval_full(&full))
    }

    /// Leaf polynomial bases reachable from this space, keyed by variable.
    pub fn leaf_bases(&self) -> Vec<(usize, PolynomialBasis)> {
        match self {
            FeatureSpace::Leaf { variable, basis } => vec![(*variable, *basis)],
            FeatureSpace::Product { factors, .. } => {
                let mut out: Vec<_> = factors.iter().flat_map(|f| f.space().leaf_bases()).collect();
                out.sort_by_key(|p| p.0);
                out
            }
        }
    }
}

/// Row-major Kronecker product of vectors (first vector varies slowest).
pub fn kron_into(vals: &[Vec<f64>], out: &mut [f64]) {
    let total: usize = vals.iter().map(|v| v.len()).product();
    debug_assert_eq!(out.len(), total);
    out[0] = 1.0;
    let mut len = 1;
    for v in vals {
        // Expand in place from the back so earlier entries are read before being overwritten.
        for i in (0..len).rev() {
            let a = out[i];
            for (k, &b) in v.iter().enumerate().rev() {
                out[i * v.len() + k] = a * b;
            }
        }
        len *= v.len();
    }
}

/// Span of r orthonormal functions ψ_k = Σ_j C[j,k] φ_j inside a feature space.
#[derive(Clone, Debug)]
pub struct Subspace {
    space: FeatureSpace,
    coefficients: DMatrix<f64>,
}

impl Subspace {
    /// Checks that the coefficient columns are orthonormal to within 1e-8.
    pub fn new(space: FeatureSpace, coefficients: DMatrix<f64>) -> Result<Self> {
        if coefficients.nrows() != space.dim() || coefficients.ncols() == 0 {
            return Err(Error::ShapeMismatch(format!(
                "subspace coefficients are {}x{} for a space of dimension {}",
                coefficients.nrows(),
                coefficients.ncols(),
                space.dim()
            )));
        }
        let gram = coefficients.transpose() * &coefficients;
        for k in 0..gram.nrows() {
            if (gram[(k, k)] - 1.0).abs() > 1e-8 {
                return Err(Error::NotNormalized {
                    index: k,
                    norm: gram[(k, k)],
                });
            }
        }
        Ok(Subspace {
            space,
            coefficients,
        })
    }

    /// The whole feature space as a subspace (identity coefficients).
    pub fn full(space: FeatureSpace) -> Self {
        let m = space.dim();
        Subspace {
            space,
            coefficients: DMatrix::identity(m, m),
        }
    }

    pub fn space(&self) -> &FeatureSpace {
        &self.space
    }

    pub fn coefficients(&self) -> &DMatrix<f64> {
        &self.coefficients
    }

    pub fn rank(&self) -> usize {
        self.coefficients.ncols()
    }

    pub fn variables(&self) -> &[usize] {
        self.space.variables()
    }

    /// (ψ_1(x), ..., ψ_r(x)) at a full point.
    pub fn eval_full(&self, x: &[f64]) -> Vec<f64> {
        let phi = self.space.eval_full(x);
        let mut out = vec![0.0; self.rank()];
        for (k, o) in out.iter_mut().enumerate() {
            *o = self.coefficients.column(k).iter().zip(&phi).map(|(c, p)| c * p).sum();
        }
        out
    }
}
