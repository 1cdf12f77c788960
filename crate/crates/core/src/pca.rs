//! Empirical principal subspaces: truncated SVD, rank selection and
//! leave-one-out validation of coefficient matrices.

use nalgebra::{DMatrix, DVector};

use crate::boosted::{Projector, WeightedSampleSet};
use crate::error::{Error, Result};
use crate::oracle::Oracle;

/// Relative tolerance below which singular values and leave-one-out errors
/// cannot be resolved in double precision for an m×z matrix.
pub fn numerical_floor(m: usize, z: usize) -> f64 {
    10.0 * m.max(z) as f64 * f64::EPSILON
}

/// Left singular vectors of A sorted by decreasing singular value, with the
/// largest-magnitude entry of each vector made positive.
pub fn left_singular(a: &DMatrix<f64>) -> (Vec<f64>, DMatrix<f64>) {
    let m = a.nrows();
    if a.ncols() == 0 {
        return (Vec::new(), DMatrix::zeros(m, 0));
    }
    let (sigma, u) = faer_svd(a);
    let mut order: Vec<usize> = (0..sigma.len()).collect();
    order.sort_by(|&i, &j| sigma[j].total_cmp(&sigma[i]));
    let sigma: Vec<f64> = order.iter().map(|&i| sigma[i]).collect();
    let mut vecs = u.select_columns(order.iter());
    for mut col in vecs.column_iter_mut() {
        let mut big = 0;
        for i in 0..col.len() {
            if col[i].abs() > col[big].abs() {
                big = i;
            }
        }
        if col[big] < 0.0 {
            col.neg_mut();
        }
    }
    (sigma, vecs)
}

// nalgebra's SVD can return wrong factors for rank-deficient inputs, which
// are the common case here, so the decomposition goes through faer.
fn faer_svd(a: &DMatrix<f64>) -> (Vec<f64>, DMatrix<f64>) {
    let (m, z) = a.shape();
    let k = m.min(z);
    let mat = faer::Mat::<f64>::from_fn(m, z, |i, j| a[(i, j)]);
    match mat.thin_svd() {
        Ok(svd) => {
            let s = svd.S().column_vector();
            let u = svd.U();
            ((0..k).map(|i| s[i]).collect(), DMatrix::from_fn(m, k, |i, j| u[(i, j)]))
        }
        // Only non-finite input fails; fall back to nalgebra.
        Err(_) => {
            let svd = a.clone().svd(true, false);
            (svd.singular_values.iter().copied().collect(), svd.u.expect("requested U"))
        }
    }
}

/// Singular values of A in decreasing order.
pub fn singular_values(a: &DMatrix<f64>) -> Vec<f64> {
    left_singular(a).0
}

/// All singular values and the r leading left singular vectors.
pub fn truncated_svd(a: &DMatrix<f64>, r: usize) -> Result<(Vec<f64>, DMatrix<f64>)> {
    let max = a.nrows().min(a.ncols());
    if r == 0 || r > max {
        return Err(Error::InvalidArgument(format!("rank {r} outside 1..={max}")));
    }
    let (sigma, u) = left_singular(a);
    Ok((sigma, u.columns(0, r).into_owned()))
}

/// Minimal r >= 1 with Σ_{k>r} σ_k² <= ε² Σ_k σ_k².
pub fn rank_for_tolerance(sigma: &[f64], eps: f64) -> usize {
    let total: f64 = sigma.iter().map(|s| s * s).sum();
    if total == 0.0 || sigma.is_empty() {
        return 1;
    }
    let bound = eps * eps * total;
    // Tail sums accumulated from the smallest values for accuracy.
    let mut tail = 0.0;
    let mut r = sigma.len();
    for k in (1..sigma.len()).rev() {
        tail += sigma[k] * sigma[k];
        if tail > bound {
            break;
        }
        r = k;
    }
    r.max(1)
}

/// Leave-one-out errors ℰ(r) for r = 1..=min(m, z−1), as energy ratios.
pub fn loo_errors(a: &DMatrix<f64>) -> Vec<f64> {
    let (m, z) = a.shape();
    if z < 2 {
        return Vec::new();
    }
    let rmax = m.min(z - 1);
    let total: f64 = a.norm_squared();
    let mut err = vec![0.0; rmax];
    if total == 0.0 {
        return err;
    }
    for l in 0..z {
        let rest = a.clone().remove_column(l);
        let (_, u) = left_singular(&rest);
        let mut resid: DVector<f64> = a.column(l).into_owned();
        for (r, e) in err.iter_mut().enumerate() {
            if r < u.ncols() {
                let uk = u.column(r);
                let c = uk.dot(&resid);
                resid.axpy(-c, &uk, 1.0);
            }
            *e += resid.norm_squared();
        }
    }
    err.iter().map(|e| e / total).collect()
}

/// ℰ(r) = Σ_l ‖A_l − V V^T A_l‖² / Σ_l ‖A_l‖² with V from A without column l.
pub fn loo_error(a: &DMatrix<f64>, r: usize) -> Result<f64> {
    let (m, z) = a.shape();
    if z < 2 || r == 0 || r > m.min(z - 1) {
        return Err(Error::InvalidArgument(format!(
            "rank {r} outside 1..=min({m}, {})",
            z.saturating_sub(1)
        )));
    }
    Ok(loo_errors(a)[r - 1])
}

/// Largest sine of the principal angles between two orthonormal column spaces.
pub fn subspace_distance(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    let resid = b - a * (a.transpose() * b);
    let (s, _) = left_singular(&resid);
    s.first().copied().unwrap_or(0.0)
}

#[derive(Clone, Debug)]
pub struct PrincipalSubspace {
    pub rank: usize,
    /// Orthonormal m×r coefficients of the principal functions.
    pub basis: DMatrix<f64>,
    pub singular_values: Vec<f64>,
    /// The assembled coefficient matrix, one column per complementary point.
    pub matrix: DMatrix<f64>,
    /// ℰ at the selected rank, when at least two columns were available.
    pub loo_error: Option<f64>,
    pub tolerance_met: bool,
    /// Set when every column was zero.
    pub degenerate: bool,
}

impl PrincipalSubspace {
    pub fn columns(&self) -> usize {
        self.matrix.ncols()
    }

    /// Subspace spanned by the r leading left singular vectors of `matrix`.
    pub fn from_matrix(matrix: DMatrix<f64>, rank: usize, loo_error: Option<f64>, tolerance_met: bool) -> Self {
        let m = matrix.nrows();
        if matrix.iter().all(|v| *v == 0.0) {
            let mut basis = DMatrix::zeros(m, 1);
            basis[(0, 0)] = 1.0;
            return PrincipalSubspace {
                rank: 1,
                basis,
                singular_values: vec![0.0; m.min(matrix.ncols())],
                matrix,
                loo_error,
                tolerance_met,
                degenerate: true,
            };
        }
        let (sigma, u) = left_singular(&matrix);
        let rank = rank.clamp(1, u.ncols());
        PrincipalSubspace {
            rank,
            basis: u.columns(0, rank).into_owned(),
            singular_values: sigma,
            matrix,
            loo_error,
            tolerance_met,
            degenerate: false,
        }
    }
}

/// Adaptive estimation of a principal subspace: columns are added one at a
/// time until some rank has ℰ(r) <= tol², or until `max_columns` is reached.
///
/// `next_column` returns the coefficients of one projected fiber.
pub fn adaptive_principal_subspace(
    m: usize,
    tol: f64,
    max_columns: usize,
    mut next_column: impl FnMut() -> Result<Vec<f64>>,
) -> Result<PrincipalSubspace> {
    if !(tol > 0.0) {
        return Err(Error::InvalidArgument(format!("tolerance {tol} must be positive")));
    }
    let max_columns = max_columns.max(2);
    let mut data: Vec<f64> = Vec::new();
    loop {
        let col = next_column()?;
        if col.len() != m {
            return Err(Error::DimensionMismatch { expected: m, got: col.len() });
        }
        data.extend_from_slice(&col);
        let z = data.len() / m;
        if z < 2 {
            continue;
        }
        let a = DMatrix::from_column_slice(m, z, &data);
        let errs = loo_errors(&a);
        let bound = tol * tol;
        if let Some(r) = errs.iter().position(|e| *e <= bound) {
            return Ok(PrincipalSubspace::from_matrix(a, r + 1, Some(errs[r]), true));
        }
        if z >= max_columns {
            let (sigma, _) = left_singular(&a);
            let r = rank_for_tolerance(&sigma, tol).min(errs.len());
            return Ok(PrincipalSubspace::from_matrix(a, r, Some(errs[r - 1]), false));
        }
    }
}

/// Coefficient matrix of the projections of u(·, x_c) for each complementary
/// point x_c. Evaluates z·z_c points.
pub fn assemble_coefficient_matrix(
    oracle: &Oracle,
    sample: &WeightedSampleSet,
    projector: &Projector,
    columns: &[Vec<f64>],
) -> Result<DMatrix<f64>> {
    let m = projector.dim();
    let mut a = DMatrix::zeros(m, columns.len());
    for (l, xc) in columns.iter().enumerate() {
        let c = project_fiber(oracle, sample, projector, xc).map_err(|e| match e {
            Error::Oracle { index } => Error::Oracle {
                index: l * sample.len() + index,
            },
            e => e,
        })?;
        a.set_column(l, &DVector::from_vec(c));
    }
    Ok(a)
}

/// Projection coefficients of x_α ↦ u(x_α, x_c) for one complementary point.
pub fn project_fiber(
    oracle: &Oracle,
    sample: &WeightedSampleSet,
    projector: &Projector,
    xc: &[f64],
) -> Result<Vec<f64>> {
    let points: Vec<Vec<f64>> = (0..sample.len())
        .map(|i| {
            let mut x = xc.to_vec();
            sample.embed(i, &mut x);
            x
        })
        .collect();
    let values = oracle.evaluate(&points)?;
    projector.project(&values)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn rank_deficient_matrix_is_spanned() {
        // A rank-2 matrix on which nalgebra 0.35's SVD recomposes with a 2% error.
        let a = DMatrix::from_column_slice(
            4,
            3,
            &[
                0.051263174144001035, -0.24708221280904252, -0.2203661969641547, 0.007175784485317742,
                -0.2952340065474139, -0.46857420684115103, -0.11932756736553854, 0.030811832084694738,
                0.7052560205120084, 0.08148858066022645, -0.476752780337631, -0.03402327672329866,
            ],
        );
        let (sigma, u) = left_singular(&a);
        assert_abs_diff_eq!(sigma[1], 0.593918896, epsilon = 1e-8);
        assert!(sigma[2] < 1e-14);
        let u2 = u.columns(0, 2).into_owned();
        assert!((&a - &u2 * u2.transpose() * &a).norm() < 1e-14);
    }

    #[test]
    fn rank_one_matrix_svd() {
        let a = DVector::from_vec(vec![1.0, 2.0, 2.0]);
        let b = DVector::from_vec(vec![3.0, 4.0]);
        let m = &a * b.transpose();
        let (s, u) = truncated_svd(&m, 1).unwrap();
        assert_abs_diff_eq!(s[0], 15.0, epsilon = 1e-12);
        assert_abs_diff_eq!(s[1], 0.0, epsilon = 1e-12);
        for i in 0..3 {
            assert_abs_diff_eq!(u[(i, 0)], a[i] / 3.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn diagonal_svd_and_range() {
        let m = DMatrix::from_row_slice(2, 2, &[3.0, 0.0, 0.0, 1.0]);
        let (s, u) = truncated_svd(&m, 1).unwrap();
        assert_eq!(s, vec![3.0, 1.0]);
        assert_abs_diff_eq!(u[(0, 0)], 1.0, epsilon = 1e-15);
        assert!(truncated_svd(&m, 3).is_err());
        assert!(truncated_svd(&m, 0).is_err());
    }

    #[test]
    fn rank_for_tolerance_examples() {
        assert_eq!(rank_for_tolerance(&[3.0, 1.0, 0.1], 0.4), 1);
        assert_eq!(rank_for_tolerance(&[3.0, 1.0, 0.1], 0.1), 2);
        assert_eq!(rank_for_tolerance(&[3.0, 1.0, 0.1], 2.0), 1);
        assert_eq!(rank_for_tolerance(&[0.0, 0.0], 0.1), 1);
        assert_eq!(rank_for_tolerance(&[3.0, 1.0, 0.1], 1e-6), 3);
    }

    #[test]
    fn loo_examples() {
        let same = DMatrix::from_row_slice(2, 3, &[1.0, 1.0, 1.0, 2.0, 2.0, 2.0]);
        assert_abs_diff_eq!(loo_error(&same, 1).unwrap(), 0.0, epsilon = 1e-15);
        let id = DMatrix::<f64>::identity(2, 2);
        assert_abs_diff_eq!(loo_error(&id, 1).unwrap(), 1.0, epsilon = 1e-15);
        assert!(loo_error(&id, 2).is_err());
    }

    #[test]
    fn adaptive_on_rank_one_stops_early() {
        let mut k = 0.0;
        let ps = adaptive_principal_subspace(3, 1e-8, 9, || {
            k += 1.0;
            Ok(vec![k, 2.0 * k, -k])
        })
        .unwrap();
        assert_eq!(ps.rank, 1);
        assert!(ps.columns() <= 3);
        assert!(ps.tolerance_met);
    }

    #[test]
    fn adaptive_with_huge_tolerance_uses_two_columns() {
        let mut k = 0;
        let ps = adaptive_principal_subspace(2, 1e300, 6, || {
            k += 1;
            Ok(if k % 2 == 0 { vec![1.0, 0.0] } else { vec![0.0, 1.0] })
        })
        .unwrap();
        assert_eq!((ps.rank, ps.columns()), (1, 2));
    }

    #[test]
    fn zero_matrix_is_degenerate() {
        let ps = adaptive_principal_subspace(3, 1e-3, 9, || Ok(vec![0.0; 3])).unwrap();
        assert!(ps.degenerate);
        assert_eq!(ps.rank, 1);
        assert_eq!(ps.basis[(0, 0)], 1.0);
    }

    #[test]
    fn budget_exhaustion_is_flagged() {
        let mut k = 0;
        let ps = adaptive_principal_subspace(3, 1e-12, 3, || {
            k += 1;
            let mut c = vec![0.0; 3];
            c[k % 3] = 1.0;
            Ok(c)
        })
        .unwrap();
        assert!(!ps.tolerance_met);
        assert_eq!(ps.columns(), 3);
    }
}
