//! Black-box functions and the call-counting wrapper used by the learners.

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use crate::error::{Error, Result};

/// A real-valued function of d variables.
pub trait Function: Send + Sync {
    fn dim(&self) -> usize;
    fn eval(&self, x: &[f64]) -> f64;
}

/// Adapts a closure to [`Function`].
pub struct FnFunction<F> {
    d: usize,
    f: F,
}

impl<F: Fn(&[f64]) -> f64 + Send + Sync> FnFunction<F> {
    pub fn new(d: usize, f: F) -> Self {
        FnFunction { d, f }
    }
}

impl<F: Fn(&[f64]) -> f64 + Send + Sync> Function for FnFunction<F> {
    fn dim(&self) -> usize {
        self.d
    }

    fn eval(&self, x: &[f64]) -> f64 {
        (self.f)(x)
    }
}

/// Counts every evaluation; the count is what reports call n.
pub struct Oracle {
    f: Arc<dyn Function>,
    calls: AtomicU64,
}

impl Oracle {
    pub fn new(f: Arc<dyn Function>) -> Self {
        Oracle {
            f,
            calls: AtomicU64::new(0),
        }
    }

    pub fn from_fn(d: usize, f: impl Fn(&[f64]) -> f64 + Send + Sync + 'static) -> Self {
        Oracle::new(Arc::new(FnFunction::new(d, f)))
    }

    pub fn dim(&self) -> usize {
        self.f.dim()
    }

    pub fn calls(&self) -> u64 {
        self.calls.load(Ordering::SeqCst)
    }

    /// Evaluates a batch; a non-finite value fails with its batch index.
    pub fn evaluate(&self, points: &[Vec<f64>]) -> Result<Vec<f64>> {
        self.calls.fetch_add(points.len() as u64, Ordering::SeqCst);
        let d = self.dim();
        let mut out = Vec::with_capacity(points.len());
        for (index, p) in points.iter().enumerate() {
            if p.len() != d {
                return Err(Error::DimensionMismatch { expected: d, got: p.len() });
            }
            let v = self.f.eval(p);
            if !v.is_finite() {
                return Err(Error::Oracle { index });
            }
            out.push(v);
        }
        Ok(out)
    }

    /// Evaluation without counting, for test errors and diagnostics.
    pub fn eval_uncounted(&self, x: &[f64]) -> f64 {
        self.f.eval(x)
    }

    pub fn function(&self) -> &Arc<dyn Function> {
        &self.f
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn counts_every_call() {
        let o = Oracle::from_fn(2, |x| x[0] + x[1]);
        assert_eq!(o.evaluate(&[vec![1.0, 2.0], vec![0.0, 0.0]]).unwrap(), vec![3.0, 0.0]);
        o.evaluate(&[vec![1.0, 1.0]]).unwrap();
        assert_eq!(o.calls(), 3);
        o.eval_uncounted(&[1.0, 1.0]);
        assert_eq!(o.calls(), 3);
    }

    #[test]
    fn non_finite_values_fail_with_index() {
        let o = Oracle::from_fn(1, |x| 1.0 / x[0]);
        let err = o.evaluate(&[vec![1.0], vec![0.0]]).unwrap_err();
        assert!(matches!(err, Error::Oracle { index: 1 }));
    }
}
