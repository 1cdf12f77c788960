//! Product probability measures and orthonormal polynomial bases for the leaves.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One-dimensional probability measure.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum MarginalMeasure {
    /// Uniform on [a, b].
    Uniform { a: f64, b: f64 },
    /// Standard normal on the real line.
    Gaussian,
}

impl MarginalMeasure {
    pub fn uniform(a: f64, b: f64) -> Result<Self> {
        if !(a < b) || !a.is_finite() || !b.is_finite() {
            return Err(Error::InvalidInterval { a, b });
        }
        Ok(MarginalMeasure::Uniform { a, b })
    }

    /// Density with respect to Lebesgue measure.
    pub fn pdf(&self, x: f64) -> f64 {
        match *self {
            MarginalMeasure::Uniform { a, b } => {
                if x >= a && x <= b {
                    1.0 / (b - a)
                } else {
                    0.0
                }
            }
            MarginalMeasure::Gaussian => {
                (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt()
            }
        }
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        match *self {
            MarginalMeasure::Uniform { a, b } => a + (b - a) * rng.random::<f64>(),
            MarginalMeasure::Gaussian => rng.sample(StandardNormal),
        }
    }

    /// Maps x to the reference variable of the polynomial family.
    pub fn to_standard(&self, x: f64) -> f64 {
        match *self {
            MarginalMeasure::Uniform { a, b } => (2.0 * x - a - b) / (b - a),
            MarginalMeasure::Gaussian => x,
        }
    }

    pub fn from_standard(&self, t: f64) -> f64 {
        match *self {
            MarginalMeasure::Uniform { a, b } => 0.5 * (a + b) + 0.5 * (b - a) * t,
            MarginalMeasure::Gaussian => t,
        }
    }

    pub fn family_name(&self) -> &'static str {
        match self {
            MarginalMeasure::Uniform { .. } => "legendre",
            MarginalMeasure::Gaussian => "hermite",
        }
    }
}

/// Product of d marginal measures.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProductMeasure {
    marginals: Vec<MarginalMeasure>,
}

impl ProductMeasure {
    pub fn new(marginals: Vec<MarginalMeasure>) -> Result<Self> {
        if marginals.is_empty() {
            return Err(Error::InvalidArgument("a product measure needs d >= 1".into()));
        }
        Ok(ProductMeasure { marginals })
    }

    pub fn uniform(d: usize, a: f64, b: f64) -> Result<Self> {
        Self::new(vec![MarginalMeasure::uniform(a, b)?; d])
    }

    pub fn gaussian(d: usize) -> Result<Self> {
        Self::new(vec![MarginalMeasure::Gaussian; d])
    }

    pub fn dim(&self) -> usize {
        self.marginals.len()
    }

    pub fn marginal(&self, v: usize) -> &MarginalMeasure {
        &self.marginals[v]
    }

    pub fn marginals(&self) -> &[MarginalMeasure] {
        &self.marginals
    }

    /// The measure of the variables in `vars`, in the given order.
    pub fn subset(&self, vars: &[usize]) -> Result<ProductMeasure> {
        let mut out = Vec::with_capacity(vars.len());
        for &v in vars {
            match self.marginals.get(v) {
                Some(m) => out.push(*m),
                None => {
                    return Err(Error::InvalidArgument(format!(
                        "variable {v} outside a {}-dimensional measure",
                        self.dim()
                    )))
                }
            }
        }
        ProductMeasure::new(out)
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        self.marginals.iter().map(|m| m.sample(rng)).collect()
    }

    /// Overwrites the coordinates listed in `vars` with fresh draws.
    pub fn sample_into<R: Rng + ?Sized>(&self, vars: &[usize], x: &mut [f64], rng: &mut R) {
        for &v in vars {
            x[v] = self.marginals[v].sample(rng);
        }
    }
}

/// Orthonormal polynomials of degree 0..=degree with respect to a marginal measure:
/// Legendre for uniform measures, probabilists' Hermite for the Gaussian.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PolynomialBasis {
    measure: MarginalMeasure,
    degree: usize,
}

impl PolynomialBasis {
    pub fn legendre(degree: usize, a: f64, b: f64) -> Result<Self> {
        Ok(PolynomialBasis {
            measure: MarginalMeasure::uniform(a, b)?,
            degree,
        })
    }

    pub fn hermite(degree: usize) -> Self {
        PolynomialBasis {
            measure: MarginalMeasure::Gaussian,
            degree,
        }
    }

    pub fn for_measure(measure: MarginalMeasure, degree: usize) -> Self {
        PolynomialBasis { measure, degree }
    }

    pub fn with_degree(&self, degree: usize) -> Self {
        PolynomialBasis {
            measure: self.measure,
            degree,
        }
    }

    pub fn measure(&self) -> MarginalMeasure {
        self.measure
    }

    pub fn degree(&self) -> usize {
        self.degree
    }

    pub fn dim(&self) -> usize {
        self.degree + 1
    }

    pub fn family_name(&self) -> &'static str {
        self.measure.family_name()
    }

    /// Off-diagonal Jacobi coefficient b_k in t p_k = b_{k+1} p_{k+1} + b_k p_{k-1}.
    pub fn recurrence_coefficient(&self, k: usize) -> f64 {
        let k = k as f64;
        match self.measure {
            MarginalMeasure::Uniform { .. } => k / (4.0 * k * k - 1.0).sqrt(),
            MarginalMeasure::Gaussian => k.sqrt(),
        }
    }

    /// Values of the first `out.len()` polynomials at the reference variable t.
    pub fn eval_standard_into(&self, t: f64, out: &mut [f64]) {
        let n = out.len();
        if n == 0 {
            return;
        }
        out[0] = 1.0;
        if n == 1 {
            return;
        }
        let b1 = self.recurrence_coefficient(1);
        out[1] = t / b1;
        let mut b_prev = b1;
        for k in 1..n - 1 {
            let b_next = self.recurrence_coefficient(k + 1);
            out[k + 1] = (t * out[k] - b_prev * out[k - 1]) / b_next;
            b_prev = b_next;
        }
    }

    /// p_n(t) and its derivative (used to polish quadrature nodes).
    pub fn standard_value_and_derivative(&self, n: usize, t: f64) -> (f64, f64) {
        let (mut p_prev, mut p) = (0.0, 1.0);
        let (mut d_prev, mut d) = (0.0, 0.0);
        let mut b_prev = 0.0;
        for k in 0..n {
            let b_next = self.recurrence_coefficient(k + 1);
            let p_next = (t * p - b_prev * p_prev) / b_next;
            let d_next = (p + t * d - b_prev * d_prev) / b_next;
            p_prev = p;
            p = p_next;
            d_prev = d;
            d = d_next;
            b_prev = b_next;
        }
        (p, d)
    }

    /// Values of all `dim()` basis functions at x, written into `out`.
    pub fn eval_into(&self, x: f64, out: &mut [f64]) {
        let m = self.dim();
        self.eval_standard_into(self.measure.to_standard(x), &mut out[..m]);
    }

    pub fn eval(&self, x: f64) -> Vec<f64> {
        let mut out = vec![0.0; self.dim()];
        self.eval_into(x, &mut out);
        out
    }
}
