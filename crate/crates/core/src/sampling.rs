//! Optimal sampling density (1/m) Σ φ_j² dμ and exact samplers for it.
//!
//! Leaf spaces are sampled by mixture decomposition plus inverse CDF. Product
//! spaces sample each factor independently; a factor that is itself a product
//! is sampled coordinate by coordinate from conditionals of the squared network.

use std::collections::HashMap;
use std::sync::{Arc, Mutex, OnceLock};

use rand::Rng;

use crate::basis::{MarginalMeasure, PolynomialBasis};
use crate::quadrature::{gauss_legendre_unit, QuadratureRule};
use crate::space::{FeatureSpace, Subspace};

/// The density w^{-1} = (1/m) Σ φ_j² of the optimal sampling measure with respect to μ_α.
#[derive(Clone, Copy, Debug)]
pub struct SamplingDensity<'a> {
    space: &'a FeatureSpace,
}

pub fn density(space: &FeatureSpace) -> SamplingDensity<'_> {
    SamplingDensity { space }
}

impl SamplingDensity<'_> {
    /// w^{-1}(x) at a full d-dimensional point.
    pub fn value_full(&self, x: &[f64]) -> f64 {
        let phi = self.space.eval_full(x);
        inverse_weight_of(&phi)
    }

    /// w(x) at a full d-dimensional point.
    pub fn weight_full(&self, x: &[f64]) -> f64 {
        1.0 / self.value_full(x)
    }

    /// w^{-1}(x_α) with x_α ordered like the space's variables.
    pub fn value(&self, x_alpha: &[f64]) -> crate::Result<f64> {
        Ok(inverse_weight_of(&self.space.eval(x_alpha)?))
    }

    pub fn weight(&self, x_alpha: &[f64]) -> crate::Result<f64> {
        Ok(1.0 / self.value(x_alpha)?)
    }
}

/// (1/m) Σ φ_j² from basis values.
pub fn inverse_weight_of(phi: &[f64]) -> f64 {
    phi.iter().map(|p| p * p).sum::<f64>() / phi.len() as f64
}

/// Tabulated basis values on a composite Gauss-Legendre grid covering the
/// (possibly truncated) support of a marginal measure.
#[derive(Debug)]
pub struct LeafGrid {
    basis: PolynomialBasis,
    lo: f64,
    width: f64,
    cells: usize,
    cell_rule: QuadratureRule,
    /// Measure weights of grid points (quadrature weight times pdf).
    weights: Vec<f64>,
    /// Basis values, row-major (point, j).
    values: Vec<f64>,
}

const GRID_AGREEMENT: f64 = 1e-12;

impl LeafGrid {
    fn build(basis: PolynomialBasis) -> LeafGrid {
        let (lo, hi) = support(&basis);
        let q = basis.degree() + 4;
        let cell_rule = gauss_legendre_unit(q);
        let mut cells = 16;
        let mut grid = LeafGrid::with_cells(basis, lo, hi, cells, &cell_rule);
        // Double the number of cells until the tabulated Gram matrices of two
        // successive resolutions agree.
        loop {
            cells *= 2;
            let finer = LeafGrid::with_cells(basis, lo, hi, cells, &cell_rule);
            let gap = grid
                .gram()
                .iter()
                .zip(finer.gram().iter())
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max);
            grid = finer;
            if gap < GRID_AGREEMENT || cells >= 1 << 14 {
                break;
            }
        }
        grid
    }

    fn with_cells(basis: PolynomialBasis, lo: f64, hi: f64, cells: usize, rule: &QuadratureRule) -> LeafGrid {
        let m = basis.dim();
        let width = (hi - lo) / cells as f64;
        let measure = basis.measure();
        let mut weights = Vec::with_capacity(cells * rule.len());
        let mut values = Vec::with_capacity(cells * rule.len() * m);
        let mut phi = vec![0.0; m];
        for c in 0..cells {
            let c0 = lo + c as f64 * width;
            for (s, w) in rule.nodes.iter().zip(&rule.weights) {
                let x = c0 + s * width;
                weights.push(w * width * measure.pdf(x));
                basis.eval_into(x, &mut phi);
                values.extend_from_slice(&phi);
            }
        }
        LeafGrid {
            basis,
            lo,
            width,
            cells,
            cell_rule: rule.clone(),
            weights,
            values,
        }
    }

    fn gram(&self) -> Vec<f64> {
        let m = self.basis.dim();
        let mut g = vec![0.0; m * m];
        for (p, w) in self.weights.iter().enumerate() {
            let row = &self.values[p * m..(p + 1) * m];
            for i in 0..m {
                for j in 0..m {
                    g[i * m + j] += w * row[i] * row[j];
                }
            }
        }
        g
    }

    pub fn cells(&self) -> usize {
        self.cells
    }

    /// Integral of (Σ_j a_j φ_j)² over [lo, x] against μ, x inside cell `c`.
    fn partial_mass(&self, a: &[f64], c: usize, x: f64, phi: &mut [f64]) -> f64 {
        let c0 = self.lo + c as f64 * self.width;
        let len = x - c0;
        if len <= 0.0 {
            return 0.0;
        }
        let measure = self.basis.measure();
        let mut s = 0.0;
        for (t, w) in self.cell_rule.nodes.iter().zip(&self.cell_rule.weights) {
            let y = c0 + t * len;
            let g = poly_value(&self.basis, a, y, phi);
            s += w * len * measure.pdf(y) * g * g;
        }
        s
    }

    /// One draw from the density (Σ_j a_j φ_j)² / ‖a‖² dμ.
    pub fn sample_squared<R: Rng + ?Sized>(&self, a: &[f64], rng: &mut R) -> f64 {
        let m = self.basis.dim();
        let q = self.cell_rule.len();
        let mut masses = Vec::with_capacity(self.cells);
        let mut total = 0.0;
        for c in 0..self.cells {
            let mut cm = 0.0;
            for p in c * q..(c + 1) * q {
                let row = &self.values[p * m..p * m + a.len()];
                let g: f64 = row.iter().zip(a).map(|(r, x)| r * x).sum();
                cm += self.weights[p] * g * g;
            }
            masses.push(cm);
            total += cm;
        }
        let mut target = rng.random::<f64>() * total;
        let mut cell = self.cells - 1;
        for (c, &cm) in masses.iter().enumerate() {
            if target < cm {
                cell = c;
                break;
            }
            target -= cm;
        }
        let target = target.min(masses[cell]);
        self.invert_in_cell(a, cell, target, masses[cell])
    }

    /// Solves partial_mass(x) = target inside the cell by safeguarded Newton.
    fn invert_in_cell(&self, a: &[f64], cell: usize, target: f64, cell_mass: f64) -> f64 {
        let c0 = self.lo + cell as f64 * self.width;
        let c1 = c0 + self.width;
        if cell_mass <= 0.0 {
            return c0 + 0.5 * self.width;
        }
        let measure = self.basis.measure();
        let mut phi = vec![0.0; self.basis.dim()];
        let (mut lo, mut hi) = (c0, c1);
        let mut x = c0 + (target / cell_mass) * self.width;
        for _ in 0..60 {
            let f = self.partial_mass(a, cell, x, &mut phi) - target;
            if f > 0.0 {
                hi = x;
            } else {
                lo = x;
            }
            let g = poly_value(&self.basis, a, x, &mut phi);
            let dens = g * g * measure.pdf(x);
            let mut next = if dens > 0.0 { x - f / dens } else { f64::NAN };
            if !(next > lo && next < hi) {
                next = 0.5 * (lo + hi);
            }
            if (next - x).abs() <= 1e-15 * (1.0 + x.abs()) || hi - lo <= 1e-15 * (1.0 + x.abs()) {
                return next;
            }
            x = next;
        }
        x
    }
}

fn poly_value(basis: &PolynomialBasis, a: &[f64], x: f64, phi: &mut [f64]) -> f64 {
    basis.eval_into(x, phi);
    phi.iter().zip(a).map(|(p, c)| p * c).sum()
}

/// Interval used for inverse-CDF sampling.
fn support(basis: &PolynomialBasis) -> (f64, f64) {
    match basis.measure() {
        MarginalMeasure::Uniform { a, b } => (a, b),
        MarginalMeasure::Gaussian => {
            // [-10, 10] unless the top-degree density still has visible mass there.
            let mut l: f64 = 10.0;
            let hb = PolynomialBasis::hermite(basis.degree());
            loop {
                let top = hb.eval(l).iter().map(|v| v * v).fold(0.0, f64::max);
                if top * MarginalMeasure::Gaussian.pdf(l) / l < 1e-18 || l >= 40.0 {
                    break (-l, l);
                }
                l += 2.0;
            }
        }
    }
}

/// Shared, lazily built grid for a basis.
pub fn leaf_grid(basis: &PolynomialBasis) -> Arc<LeafGrid> {
    static CACHE: OnceLock<Mutex<HashMap<String, Arc<LeafGrid>>>> = OnceLock::new();
    let key = format!("{:?}", basis);
    let cache = CACHE.get_or_init(|| Mutex::new(HashMap::new()));
    if let Some(g) = cache.lock().expect("grid cache poisoned").get(&key) {
        return g.clone();
    }
    let grid = Arc::new(LeafGrid::build(*basis));
    cache
        .lock()
        .expect("grid cache poisoned")
        .entry(key)
        .or_insert(grid)
        .clone()
}

/// One draw from ρ_ν for a leaf polynomial space: j uniform, then φ_j² dμ.
pub fn sample_leaf<R: Rng + ?Sized>(basis: &PolynomialBasis, rng: &mut R) -> f64 {
    let m = basis.dim();
    let j = rng.random_range(0..m);
    let mut a = vec![0.0; m];
    a[j] = 1.0;
    leaf_grid(basis).sample_squared(&a, rng)
}

/// One draw from the optimal measure of `space`, written into the space's
/// coordinates of the full point `x`.
pub fn sample_space<R: Rng + ?Sized>(space: &FeatureSpace, rng: &mut R, x: &mut [f64]) {
    match space {
        FeatureSpace::Leaf { variable, basis } => x[*variable] = sample_leaf(basis, rng),
        FeatureSpace::Product { factors, .. } => sample_interior(factors, rng, x),
    }
}

/// Independent draws from ρ_β = (1/r_β) Σ_k ψ_k² dμ_β for every factor.
pub fn sample_interior<R: Rng + ?Sized>(factors: &[Arc<Subspace>], rng: &mut R, x: &mut [f64]) {
    for f in factors {
        let k = rng.random_range(0..f.rank());
        sample_basis_function(f, k, rng, x);
    }
}

/// One draw from ψ_k² dμ_β, coordinate by coordinate.
pub fn sample_basis_function<R: Rng + ?Sized>(sub: &Subspace, k: usize, rng: &mut R, x: &mut [f64]) {
    if let FeatureSpace::Leaf { variable, basis } = sub.space() {
        let a: Vec<f64> = sub.coefficients().column(k).iter().copied().collect();
        x[*variable] = leaf_grid(basis).sample_squared(&a, rng);
        return;
    }
    let vars = sub.variables().to_vec();
    let bases: HashMap<usize, PolynomialBasis> = sub.space().leaf_bases().into_iter().collect();
    let mut fixed = vec![false; x.len()];
    for &v in &vars {
        let part = partial(sub, x, &fixed, v, Some(k));
        // part has shape (r, m_v, F); pick the free multi-index with probability
        // proportional to its squared norm, then sample x_v from that polynomial.
        let (jdim, fdim) = (part.j, part.f);
        let row = &part.data[..jdim * fdim];
        let mut norms = vec![0.0; fdim];
        for jj in 0..jdim {
            for (ff, n) in norms.iter_mut().enumerate() {
                let c = row[jj * fdim + ff];
                *n += c * c;
            }
        }
        let total: f64 = norms.iter().sum();
        let mut target = rng.random::<f64>() * total;
        let mut chosen = fdim - 1;
        for (ff, &n) in norms.iter().enumerate() {
            if target < n {
                chosen = ff;
                break;
            }
            target -= n;
        }
        let a: Vec<f64> = (0..jdim).map(|jj| row[jj * fdim + chosen]).collect();
        x[v] = leaf_grid(&bases[&v]).sample_squared(&a, rng);
        fixed[v] = true;
    }
}

/// Partial contraction with index layout [k][j][f]: k the node's basis index,
/// j the open leaf's polynomial index, f the multi-index of integrated-out subtrees.
struct Partial {
    r: usize,
    j: usize,
    f: usize,
    data: Vec<f64>,
}

/// With `only = Some(k)` the result keeps the single basis index k.
fn partial(sub: &Subspace, x: &[f64], fixed: &[bool], open: usize, only: Option<usize>) -> Partial {
    let vars = sub.variables();
    let r = sub.rank();
    let has_open = vars.contains(&open);
    if !has_open && vars.iter().all(|&v| !fixed[v]) {
        // Orthonormal basis of a fully integrated subtree: identity.
        let mut data = vec![0.0; r * r];
        for k in 0..r {
            data[k * r + k] = 1.0;
        }
        return Partial { r, j: 1, f: r, data };
    }
    if !has_open && vars.iter().all(|&v| fixed[v]) {
        return Partial {
            r,
            j: 1,
            f: 1,
            data: sub.eval_full(x),
        };
    }
    let coeffs = sub.coefficients();
    match sub.space() {
        FeatureSpace::Leaf { basis, .. } => {
            // Open leaf: data[k][j] = C[j,k].
            let m = basis.dim();
            let mut data = vec![0.0; r * m];
            for k in 0..r {
                for jj in 0..m {
                    data[k * m + jj] = coeffs[(jj, k)];
                }
            }
            Partial { r, j: m, f: 1, data }
        }
        FeatureSpace::Product { factors, .. } => {
            // Tensor product of the children's partials over (k_prefix, j, f).
            let mut cur = Partial {
                r: 1,
                j: 1,
                f: 1,
                data: vec![1.0],
            };
            for fct in factors {
                let p = partial(fct, x, fixed, open, None);
                let (nr, nj, nf) = (cur.r * p.r, cur.j * p.j, cur.f * p.f);
                let mut data = vec![0.0; nr * nj * nf];
                for k1 in 0..cur.r {
                    for j1 in 0..cur.j {
                        for f1 in 0..cur.f {
                            let a = cur.data[(k1 * cur.j + j1) * cur.f + f1];
                            if a == 0.0 {
                                continue;
                            }
                            for k2 in 0..p.r {
                                let kk = k1 * p.r + k2;
                                for j2 in 0..p.j {
                                    let jj = j1 * p.j + j2;
                                    let base = (kk * nj + jj) * nf + f1 * p.f;
                                    let src = (k2 * p.j + j2) * p.f;
                                    for f2 in 0..p.f {
                                        data[base + f2] = a * p.data[src + f2];
                                    }
                                }
                            }
                        }
                    }
                }
                cur = Partial {
                    r: nr,
                    j: nj,
                    f: nf,
                    data,
                };
            }
            // Contract the product index with the node's coefficients.
            let m = cur.r;
            let jf = cur.j * cur.f;
            let ks = only.map_or(0..r, |k| k..k + 1);
            let r = ks.len();
            let mut data = vec![0.0; r * jf];
            for (row, k) in ks.enumerate() {
                let out = &mut data[row * jf..(row + 1) * jf];
                for i in 0..m {
                    let c = coeffs[(i, k)];
                    if c == 0.0 {
                        continue;
                    }
                    let src = &cur.data[i * jf..(i + 1) * jf];
                    for (o, s) in out.iter_mut().zip(src) {
                        *o += c * s;
                    }
                }
            }
            Partial {
                r,
                j: cur.j,
                f: cur.f,
                data,
            }
        }
    }
}
