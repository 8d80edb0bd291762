//! Dense symmetric-matrix kernel.
//!
//! [`SymMatrix`] stores a symmetric `d x d` matrix and provides the handful of
//! spectral operations the coherence and stability code needs: a sorted
//! eigendecomposition, PSD square roots, Frobenius products and the top
//! eigenvalue. [`RankOneFactor`] is the `weight * v v^T` form used for
//! per-sample Hessians; every quantity computed from factors has a dense
//! counterpart that it must agree with.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::error::{shape_err, Error, Result};

/// Default relative tolerance when clamping round-off negative eigenvalues.
pub const DEFAULT_PSD_TOL: f64 = 1e-10;

/// Above this dimension [`lambda_max`] switches from a full
/// eigendecomposition to Lanczos iteration.
pub const LANCZOS_MIN_DIM: usize = 256;

/// Dense real symmetric matrix. Entries are symmetrized on construction and
/// are always finite.
#[derive(Debug, Clone, PartialEq)]
pub struct SymMatrix {
    inner: DMatrix<f64>,
}

/// Eigendecomposition with eigenvalues sorted in descending order. Column
/// `i` of `vectors` belongs to `values[i]`.
#[derive(Debug, Clone)]
pub struct SymEig {
    pub values: Vec<f64>,
    pub vectors: DMatrix<f64>,
}

impl SymMatrix {
    /// Builds a matrix from `dim * dim` row-major entries. The result is
    /// `(A + A^T) / 2`, so slightly asymmetric input is accepted.
    pub fn from_row_major(dim: usize, entries: &[f64]) -> Result<Self> {
        if dim == 0 {
            return Err(Error::InvalidMatrix("dimension must be positive".into()));
        }
        if entries.len() != dim * dim {
            return Err(shape_err(dim * dim, entries.len()));
        }
        if let Some(bad) = entries.iter().find(|x| !x.is_finite()) {
            return Err(Error::InvalidMatrix(format!("non-finite entry {bad}")));
        }
        let raw = DMatrix::from_row_slice(dim, dim, entries);
        Ok(Self::symmetrized(raw))
    }

    /// Builds a matrix from `f(i, j)`; only the upper triangle is evaluated.
    pub fn from_fn(dim: usize, mut f: impl FnMut(usize, usize) -> f64) -> Result<Self> {
        if dim == 0 {
            return Err(Error::InvalidMatrix("dimension must be positive".into()));
        }
        let mut m = DMatrix::zeros(dim, dim);
        for i in 0..dim {
            for j in i..dim {
                let v = f(i, j);
                if !v.is_finite() {
                    return Err(Error::InvalidMatrix(format!("non-finite entry at ({i}, {j})")));
                }
                m[(i, j)] = v;
                m[(j, i)] = v;
            }
        }
        Ok(Self { inner: m })
    }

    /// Wraps an nalgebra matrix, symmetrizing it.
    pub fn from_dmatrix(m: DMatrix<f64>) -> Result<Self> {
        if m.nrows() != m.ncols() || m.nrows() == 0 {
            return Err(shape_err(
                "square non-empty matrix",
                format!("{}x{}", m.nrows(), m.ncols()),
            ));
        }
        if m.iter().any(|x| !x.is_finite()) {
            return Err(Error::InvalidMatrix("non-finite entry".into()));
        }
        Ok(Self::symmetrized(m))
    }

    fn symmetrized(m: DMatrix<f64>) -> Self {
        let t = m.transpose();
        Self { inner: (m + t) * 0.5 }
    }

    pub fn identity(dim: usize) -> Self {
        Self {
            inner: DMatrix::identity(dim, dim),
        }
    }

    pub fn zeros(dim: usize) -> Self {
        Self {
            inner: DMatrix::zeros(dim, dim),
        }
    }

    pub fn diagonal(diag: &[f64]) -> Self {
        Self {
            inner: DMatrix::from_diagonal(&DVector::from_column_slice(diag)),
        }
    }

    /// `weight * v v^T`.
    pub fn outer(v: &[f64], weight: f64) -> Self {
        let v = DVector::from_column_slice(v);
        Self {
            inner: &v * v.transpose() * weight,
        }
    }

    pub fn dim(&self) -> usize {
        self.inner.nrows()
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.inner[(i, j)]
    }

    pub fn as_dmatrix(&self) -> &DMatrix<f64> {
        &self.inner
    }

    /// Row-major copy of the entries.
    pub fn to_row_major(&self) -> Vec<f64> {
        let d = self.dim();
        let mut out = Vec::with_capacity(d * d);
        for i in 0..d {
            for j in 0..d {
                out.push(self.inner[(i, j)]);
            }
        }
        out
    }

    pub fn scaled(&self, c: f64) -> Self {
        Self { inner: &self.inner * c }
    }

    /// `self += c * other`.
    pub fn add_scaled(&mut self, c: f64, other: &SymMatrix) -> Result<()> {
        self.check_dim(other)?;
        for (a, b) in self.inner.iter_mut().zip(other.inner.iter()) {
            *a += c * b;
        }
        Ok(())
    }

    /// `self += c * v v^T`.
    pub fn add_outer(&mut self, c: f64, v: &[f64]) -> Result<()> {
        let d = self.dim();
        if v.len() != d {
            return Err(shape_err(d, v.len()));
        }
        for j in 0..d {
            let cj = c * v[j];
            if cj == 0.0 {
                continue;
            }
            for (i, vi) in v.iter().enumerate() {
                self.inner[(i, j)] += cj * vi;
            }
        }
        Ok(())
    }

    pub fn trace(&self) -> f64 {
        self.inner.trace()
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.inner.norm()
    }

    pub fn is_finite(&self) -> bool {
        self.inner.iter().all(|x| x.is_finite())
    }

    pub fn mul_vec(&self, v: &[f64]) -> Result<Vec<f64>> {
        if v.len() != self.dim() {
            return Err(shape_err(self.dim(), v.len()));
        }
        let out = &self.inner * DVector::from_column_slice(v);
        Ok(out.as_slice().to_vec())
    }

    /// `v^T A v`.
    pub fn quadratic_form(&self, v: &[f64]) -> Result<f64> {
        let av = self.mul_vec(v)?;
        Ok(dot(&av, v))
    }

    /// `self * x * self`, symmetric whenever `x` is.
    pub fn congruence(&self, x: &SymMatrix) -> Result<SymMatrix> {
        self.check_dim(x)?;
        let prod = &self.inner * &x.inner * &self.inner;
        Ok(Self::symmetrized(prod))
    }

    /// `Tr(A B)` for symmetric `A`, `B`.
    pub fn trace_product(&self, other: &SymMatrix) -> Result<f64> {
        self.check_dim(other)?;
        Ok(self.inner.dot(&other.inner))
    }

    /// `A^2` as a symmetric matrix.
    pub fn square(&self) -> SymMatrix {
        Self::symmetrized(&self.inner * &self.inner)
    }

    /// `A B - B A`; zero iff the two commute.
    pub fn commutator(&self, other: &SymMatrix) -> Result<DMatrix<f64>> {
        self.check_dim(other)?;
        Ok(&self.inner * &other.inner - &other.inner * &self.inner)
    }

    fn check_dim(&self, other: &SymMatrix) -> Result<()> {
        if self.dim() != other.dim() {
            return Err(shape_err(
                format!("{0}x{0}", self.dim()),
                format!("{0}x{0}", other.dim()),
            ));
        }
        Ok(())
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Eigendecomposition of a symmetric matrix, eigenvalues descending.
pub fn sym_eig(m: &SymMatrix) -> Result<SymEig> {
    if !m.is_finite() {
        return Err(Error::InvalidMatrix("non-finite entry".into()));
    }
    let eig = SymmetricEigen::new(m.inner.clone());
    let mut order: Vec<usize> = (0..m.dim()).collect();
    // Ties keep nalgebra's order, so the output is deterministic.
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let values = order.iter().map(|&i| eig.eigenvalues[i]).collect();
    let vectors = DMatrix::from_fn(m.dim(), m.dim(), |r, c| eig.eigenvectors[(r, order[c])]);
    Ok(SymEig { values, vectors })
}

/// Symmetric PSD square root. Eigenvalues in `[-tol * max(1, lambda_max), 0)`
/// are treated as round-off and clamped to zero; anything more negative is
/// rejected.
pub fn psd_sqrt(m: &SymMatrix, tol: f64) -> Result<SymMatrix> {
    let eig = sym_eig(m)?;
    let top = eig.values[0];
    let threshold = tol * top.max(1.0);
    let bottom = *eig.values.last().expect("dim > 0");
    if bottom < -threshold {
        return Err(Error::NotPsd {
            eigenvalue: bottom,
            threshold,
        });
    }
    // Eigenvalues at round-off level would otherwise turn into square roots
    // of order sqrt(eps).
    let floor = 8.0 * eig.values.len() as f64 * f64::EPSILON * top.abs();
    let roots = DVector::from_iterator(
        eig.values.len(),
        eig.values.iter().map(|&l| if l <= floor { 0.0 } else { l.sqrt() }),
    );
    let q = &eig.vectors;
    let r = q * DMatrix::from_diagonal(&roots) * q.transpose();
    Ok(SymMatrix::symmetrized(r))
}

/// `||A B||_F` for the square roots `A`, `B` of two PSD matrices.
pub fn frob_product(a_sqrt: &SymMatrix, b_sqrt: &SymMatrix) -> Result<f64> {
    a_sqrt.check_dim(b_sqrt)?;
    Ok((&a_sqrt.inner * &b_sqrt.inner).norm())
}

/// Largest eigenvalue. Small matrices use [`sym_eig`]; large ones use Lanczos
/// with full reorthogonalization.
pub fn lambda_max(m: &SymMatrix) -> Result<f64> {
    if !m.is_finite() {
        return Err(Error::InvalidMatrix("non-finite entry".into()));
    }
    if m.dim() <= LANCZOS_MIN_DIM {
        return Ok(sym_eig(m)?.values[0]);
    }
    Ok(lanczos_top(&m.inner))
}

fn lanczos_top(a: &DMatrix<f64>) -> f64 {
    let n = a.nrows();
    let scale = a.norm().max(f64::MIN_POSITIVE);
    // Deterministic pseudo-random start vector.
    let mut state = 0x5EED_u64;
    let mut q = DVector::from_fn(n, |_, _| {
        state = crate::seed::splitmix64(state);
        (state >> 11) as f64 / (1u64 << 53) as f64 - 0.5
    });
    q /= q.norm();

    let max_iter = n.min(600);
    let mut basis: Vec<DVector<f64>> = Vec::with_capacity(max_iter);
    let mut alphas: Vec<f64> = Vec::new();
    let mut betas: Vec<f64> = Vec::new();
    let mut best = f64::NEG_INFINITY;

    for j in 0..max_iter {
        let mut w = a * &q;
        let alpha = q.dot(&w);
        w.axpy(-alpha, &q, 1.0);
        if let (Some(prev), Some(&b)) = (basis.last(), betas.last()) {
            w.axpy(-b, prev, 1.0);
        }
        basis.push(q.clone());
        alphas.push(alpha);
        // Full reorthogonalization, applied twice.
        for _ in 0..2 {
            for v in &basis {
                let c = v.dot(&w);
                w.axpy(-c, v, 1.0);
            }
        }
        let beta = w.norm();

        let check = j + 1 == max_iter || beta <= 1e-14 * scale || (j + 1) % 8 == 0;
        if check {
            let k = alphas.len();
            let t = DMatrix::from_fn(k, k, |r, c| {
                if r == c {
                    alphas[r]
                } else if r + 1 == c {
                    betas[r]
                } else if c + 1 == r {
                    betas[c]
                } else {
                    0.0
                }
            });
            let eig = SymmetricEigen::new(t);
            let (idx, &theta) = eig
                .eigenvalues
                .iter()
                .enumerate()
                .max_by(|x, y| x.1.total_cmp(y.1))
                .expect("non-empty");
            best = theta;
            let residual = beta * eig.eigenvectors[(k - 1, idx)].abs();
            if beta <= 1e-14 * scale || residual <= 1e-14 * scale {
                return best;
            }
        }
        betas.push(beta);
        q = w / beta;
    }
    best
}

/// Per-sample Hessian in factored form: `weight * v v^T`.
#[derive(Debug, Clone, PartialEq)]
pub struct RankOneFactor {
    pub vector: Vec<f64>,
    pub weight: f64,
}

impl RankOneFactor {
    pub fn new(vector: Vec<f64>, weight: f64) -> Result<Self> {
        if vector.is_empty() {
            return Err(Error::InvalidMatrix("empty factor vector".into()));
        }
        if !(weight.is_finite() && weight >= 0.0) {
            return Err(Error::InvalidMatrix(format!(
                "factor weight must be finite and >= 0, got {weight}"
            )));
        }
        if vector.iter().any(|x| !x.is_finite()) {
            return Err(Error::InvalidMatrix("non-finite factor entry".into()));
        }
        Ok(Self { vector, weight })
    }

    /// `weight * e_axis e_axis^T` in `dim` dimensions.
    pub fn axis(dim: usize, axis: usize, weight: f64) -> Result<Self> {
        if axis >= dim {
            return Err(shape_err(format!("axis < {dim}"), axis));
        }
        let mut v = vec![0.0; dim];
        v[axis] = 1.0;
        Self::new(v, weight)
    }

    pub fn dim(&self) -> usize {
        self.vector.len()
    }

    pub fn densify(&self) -> SymMatrix {
        SymMatrix::outer(&self.vector, self.weight)
    }

    /// `weight * ||v||^2`, the only nonzero eigenvalue.
    pub fn eigenvalue(&self) -> f64 {
        self.weight * dot(&self.vector, &self.vector)
    }

    /// `H x = weight * <v, x> v`.
    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        let c = self.weight * dot(&self.vector, x);
        self.vector.iter().map(|v| c * v).collect()
    }

    /// `Tr(H_a H_b) = w_a w_b <v_a, v_b>^2`.
    pub fn trace_product(&self, other: &RankOneFactor) -> f64 {
        let c = dot(&self.vector, &other.vector);
        self.weight * other.weight * c * c
    }

    /// `||H_a^{1/2} H_b^{1/2}||_F = sqrt(w_a w_b) |<v_a, v_b>|`.
    pub fn frob_sqrt_product(&self, other: &RankOneFactor) -> f64 {
        (self.weight * other.weight).sqrt() * dot(&self.vector, &other.vector).abs()
    }
}

/// Largest eigenvalue of `sum_i w_i v_i v_i^T`, computed from the small Gram
/// matrix `K_ij = sqrt(w_i w_j) <v_i, v_j>` which shares its nonzero spectrum.
pub fn lowrank_lambda_max(terms: &[(f64, &RankOneFactor)]) -> Result<f64> {
    let k = terms.len();
    if k == 0 {
        return Ok(0.0);
    }
    let kmat = SymMatrix::from_fn(k, |i, j| {
        let (ci, fi) = terms[i];
        let (cj, fj) = terms[j];
        (ci * fi.weight * cj * fj.weight).sqrt() * dot(&fi.vector, &fj.vector)
    })?;
    Ok(sym_eig(&kmat)?.values[0].max(0.0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seed::rng_from_seed;
    use rand::Rng;
    use rand_distr::StandardNormal;

    /// Cyclic Jacobi eigenvalue iteration: an independent dense eigensolver
    /// with no tridiagonalization step.
    #[allow(clippy::needless_range_loop)]
    fn jacobi_eigenvalues(m: &SymMatrix) -> Vec<f64> {
        let n = m.dim();
        let mut a: Vec<Vec<f64>> = (0..n).map(|i| (0..n).map(|j| m.get(i, j)).collect()).collect();
        for _sweep in 0..100 {
            let off: f64 = (0..n)
                .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
                .map(|(i, j)| a[i][j] * a[i][j])
                .sum();
            if off < 1e-30 {
                break;
            }
            for p in 0..n {
                for q in p + 1..n {
                    if a[p][q].abs() < 1e-300 {
                        continue;
                    }
                    let theta = (a[q][q] - a[p][p]) / (2.0 * a[p][q]);
                    let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                    let t = if theta == 0.0 { 1.0 } else { t };
                    let c = 1.0 / (t * t + 1.0).sqrt();
                    let s = t * c;
                    for k in 0..n {
                        let akp = a[k][p];
                        let akq = a[k][q];
                        a[k][p] = c * akp - s * akq;
                        a[k][q] = s * akp + c * akq;
                    }
                    for k in 0..n {
                        let apk = a[p][k];
                        let aqk = a[q][k];
                        a[p][k] = c * apk - s * aqk;
                        a[q][k] = s * apk + c * aqk;
                    }
                }
            }
        }
        let mut ev: Vec<f64> = (0..n).map(|i| a[i][i]).collect();
        ev.sort_by(|x, y| y.total_cmp(x));
        ev
    }

    fn random_sym(dim: usize, seed: u64) -> SymMatrix {
        let mut rng = rng_from_seed(seed);
        let data: Vec<f64> = (0..dim * dim).map(|_| rng.sample(StandardNormal)).collect();
        SymMatrix::from_row_major(dim, &data).unwrap()
    }

    fn random_psd(dim: usize, seed: u64) -> SymMatrix {
        let a = random_sym(dim, seed);
        a.square()
    }

    fn reconstruct(e: &SymEig) -> DMatrix<f64> {
        let lam = DMatrix::from_diagonal(&DVector::from_vec(e.values.clone()));
        &e.vectors * lam * e.vectors.transpose()
    }

    #[test]
    fn construction_symmetrizes() {
        let m = SymMatrix::from_row_major(2, &[1.0, 2.0, 4.0, 3.0]).unwrap();
        assert_eq!(m.get(0, 1), 3.0);
        assert_eq!(m.get(1, 0), 3.0);
    }

    #[test]
    fn non_finite_rejected() {
        let err = SymMatrix::from_row_major(2, &[1.0, f64::NAN, 0.0, 1.0]).unwrap_err();
        assert!(matches!(err, Error::InvalidMatrix(_)));
        assert!(matches!(
            SymMatrix::from_row_major(2, &[1.0, 2.0, 3.0]),
            Err(Error::Shape { .. })
        ));
    }

    #[test]
    fn eig_identity() {
        let e = sym_eig(&SymMatrix::identity(3)).unwrap();
        assert_eq!(e.values, vec![1.0, 1.0, 1.0]);
    }

    #[test]
    fn eig_rank_one_projector() {
        let e = sym_eig(&SymMatrix::outer(&[1.0, 0.0], 1.0)).unwrap();
        assert!((e.values[0] - 1.0).abs() < 1e-15 && e.values[1].abs() < 1e-15);
        assert!((e.vectors[(0, 0)].abs() - 1.0).abs() < 1e-15);
        assert!(e.vectors[(1, 0)].abs() < 1e-15);
    }

    #[test]
    fn eig_matches_jacobi_oracle() {
        for seed in 0..20 {
            let m = random_sym(5, seed);
            let e = sym_eig(&m).unwrap();
            let oracle = jacobi_eigenvalues(&m);
            for (a, b) in e.values.iter().zip(&oracle) {
                assert!((a - b).abs() < 1e-10, "{a} vs {b}");
            }
            let err = (reconstruct(&e) - m.as_dmatrix()).norm();
            assert!(err <= 1e-9 * m.frobenius_norm().max(1.0));
            assert!(e.values.windows(2).all(|w| w[0] >= w[1]));
        }
    }

    #[test]
    fn eig_matches_characteristic_roots_2x2() {
        // [[a, b], [b, c]]: (a+c)/2 +- sqrt(((a-c)/2)^2 + b^2)
        let (a, b, c) = (2.0, -1.5, 0.25);
        let m = SymMatrix::from_row_major(2, &[a, b, b, c]).unwrap();
        let mid = (a + c) / 2.0;
        let rad = (((a - c) / 2.0f64).powi(2) + b * b).sqrt();
        let e = sym_eig(&m).unwrap();
        assert!((e.values[0] - (mid + rad)).abs() < 1e-14);
        assert!((e.values[1] - (mid - rad)).abs() < 1e-14);
    }

    #[test]
    fn eig_is_deterministic() {
        let m = random_sym(7, 3);
        let a = sym_eig(&m).unwrap();
        let b = sym_eig(&m).unwrap();
        assert_eq!(a.values, b.values);
        assert_eq!(a.vectors, b.vectors);
    }

    #[test]
    fn sqrt_cases() {
        let r = psd_sqrt(&SymMatrix::identity(3), DEFAULT_PSD_TOL).unwrap();
        assert!((r.as_dmatrix() - DMatrix::<f64>::identity(3, 3)).norm() < 1e-14);

        let r = psd_sqrt(&SymMatrix::diagonal(&[4.0, 9.0]), DEFAULT_PSD_TOL).unwrap();
        assert!((r.get(0, 0) - 2.0).abs() < 1e-14 && (r.get(1, 1) - 3.0).abs() < 1e-14);
        assert!(r.get(0, 1).abs() < 1e-14);

        // a a^T with ||a|| = 2 has square root a a^T / 2.
        let a = [1.2, -1.6, 0.0];
        let r = psd_sqrt(&SymMatrix::outer(&a, 1.0), DEFAULT_PSD_TOL).unwrap();
        let expected = SymMatrix::outer(&a, 0.5);
        assert!((r.as_dmatrix() - expected.as_dmatrix()).norm() < 1e-12);
    }

    #[test]
    fn sqrt_rejects_indefinite() {
        let err = psd_sqrt(&SymMatrix::diagonal(&[1.0, -0.5]), DEFAULT_PSD_TOL).unwrap_err();
        assert!(matches!(err, Error::NotPsd { .. }));
        // Round-off sized negatives are clamped.
        let r = psd_sqrt(&SymMatrix::diagonal(&[1.0, -1e-13]), DEFAULT_PSD_TOL).unwrap();
        assert_eq!(r.get(1, 1), 0.0);
    }

    #[test]
    fn sqrt_squares_back() {
        for seed in 0..10 {
            let m = random_psd(6, 100 + seed);
            let r = psd_sqrt(&m, DEFAULT_PSD_TOL).unwrap();
            let err = (r.square().as_dmatrix() - m.as_dmatrix()).norm();
            assert!(err <= 1e-8 * m.frobenius_norm().max(1.0));
        }
    }

    #[test]
    fn frob_product_cases() {
        let i4 = SymMatrix::identity(4);
        assert!((frob_product(&i4, &i4).unwrap() - 2.0).abs() < 1e-15);

        let p1 = SymMatrix::outer(&[1.0, 0.0], 1.0);
        let p2 = SymMatrix::outer(&[0.0, 1.0], 1.0);
        assert_eq!(frob_product(&p1, &p2).unwrap(), 0.0);

        assert!(matches!(
            frob_product(&i4, &SymMatrix::identity(3)),
            Err(Error::Shape { .. })
        ));
    }

    #[test]
    fn frob_product_unit_projectors_brute_force() {
        let mut rng = rng_from_seed(9);
        for _ in 0..50 {
            let mut a: Vec<f64> = (0..4).map(|_| rng.sample(StandardNormal)).collect();
            let mut b: Vec<f64> = (0..4).map(|_| rng.sample(StandardNormal)).collect();
            let na = dot(&a, &a).sqrt();
            let nb = dot(&b, &b).sqrt();
            a.iter_mut().for_each(|x| *x /= na);
            b.iter_mut().for_each(|x| *x /= nb);
            let pa = SymMatrix::outer(&a, 1.0);
            let pb = SymMatrix::outer(&b, 1.0);
            // Projectors are their own square roots; brute-force the product.
            let mut sum = 0.0;
            for i in 0..4 {
                for j in 0..4 {
                    let mut s = 0.0;
                    for k in 0..4 {
                        s += pa.get(i, k) * pb.get(k, j);
                    }
                    sum += s * s;
                }
            }
            let got = frob_product(&pa, &pb).unwrap();
            assert!((got - sum.sqrt()).abs() < 1e-12);
            assert!((got - dot(&a, &b).abs()).abs() < 1e-12);
        }
    }

    #[test]
    fn lambda_max_cases() {
        assert!((lambda_max(&SymMatrix::outer(&[1.0, 0.0], 2.0)).unwrap() - 2.0).abs() < 1e-15);
        let ones = SymMatrix::from_fn(6, |_, _| 1.0).unwrap();
        assert!((lambda_max(&ones).unwrap() - 6.0).abs() < 1e-12);
        let m = random_psd(6, 5);
        let e = sym_eig(&m).unwrap();
        assert!((lambda_max(&m).unwrap() - e.values[0]).abs() <= 1e-9 * e.values[0]);
    }

    #[test]
    fn lanczos_agrees_with_dense() {
        for (dim, seed) in [(300, 1u64), (400, 2)] {
            let m = random_psd(dim, seed);
            let dense = sym_eig(&m).unwrap().values[0];
            let lz = lambda_max(&m).unwrap();
            assert!((dense - lz).abs() <= 1e-9 * dense, "{dense} vs {lz}");
        }
        // Nonnegative block-structured matrix with few distinct eigenvalues.
        let big = SymMatrix::from_fn(500, |i, j| if i / 50 == j / 50 { 1.0 } else { 0.01 }).unwrap();
        let dense = sym_eig(&big).unwrap().values[0];
        assert!((lambda_max(&big).unwrap() - dense).abs() <= 1e-9 * dense);
    }

    #[test]
    fn rank_one_matches_dense() {
        let mut rng = rng_from_seed(77);
        for _ in 0..100 {
            let a = RankOneFactor::new(
                (0..5).map(|_| rng.sample(StandardNormal)).collect(),
                rng.random_range(0.1..3.0),
            )
            .unwrap();
            let b = RankOneFactor::new(
                (0..5).map(|_| rng.sample(StandardNormal)).collect(),
                rng.random_range(0.1..3.0),
            )
            .unwrap();
            let dense = frob_product(
                &psd_sqrt(&a.densify(), DEFAULT_PSD_TOL).unwrap(),
                &psd_sqrt(&b.densify(), DEFAULT_PSD_TOL).unwrap(),
            )
            .unwrap();
            let fast = a.frob_sqrt_product(&b);
            assert!((dense - fast).abs() <= 1e-9 * dense.max(1e-12), "{dense} vs {fast}");
            let tr = a.densify().trace_product(&b.densify()).unwrap();
            assert!((tr - a.trace_product(&b)).abs() <= 1e-9 * tr.max(1e-12));
        }
    }

    #[test]
    fn lowrank_lambda_matches_dense() {
        let mut rng = rng_from_seed(8);
        let fs: Vec<RankOneFactor> = (0..3)
            .map(|_| RankOneFactor::new((0..6).map(|_| rng.sample(StandardNormal)).collect(), 0.7).unwrap())
            .collect();
        let terms: Vec<(f64, &RankOneFactor)> = vec![(0.9, &fs[0]), (0.1, &fs[1]), (0.5, &fs[2])];
        let mut dense = SymMatrix::zeros(6);
        for (c, f) in &terms {
            dense.add_scaled(*c, &f.densify()).unwrap();
        }
        let want = lambda_max(&dense).unwrap();
        let got = lowrank_lambda_max(&terms).unwrap();
        assert!((want - got).abs() <= 1e-10 * want);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn frob_product_symmetric(seed in 0u64..1000) {
                let a = psd_sqrt(&random_psd(4, seed), DEFAULT_PSD_TOL).unwrap();
                let b = psd_sqrt(&random_psd(4, seed + 5000), DEFAULT_PSD_TOL).unwrap();
                let ab = frob_product(&a, &b).unwrap();
                let ba = frob_product(&b, &a).unwrap();
                prop_assert!((ab - ba).abs() <= 1e-12 * ab.max(1.0));
            }

            #[test]
            fn lambda_max_homogeneous(seed in 0u64..1000, c in 0.01f64..100.0) {
                let m = random_sym(5, seed);
                let base = lambda_max(&m).unwrap();
                let scaled = lambda_max(&m.scaled(c)).unwrap();
                prop_assert!((scaled - c * base).abs() <= 1e-10 * (c * base.abs()).max(1.0));
            }

            #[test]
            fn sqrt_squares_back_prop(seed in 0u64..1000) {
                let m = random_psd(5, seed);
                let r = psd_sqrt(&m, DEFAULT_PSD_TOL).unwrap();
                let err = (r.square().as_dmatrix() - m.as_dmatrix()).norm();
                prop_assert!(err <= 1e-8 * m.frobenius_norm().max(1.0));
            }
        }
    }
}
