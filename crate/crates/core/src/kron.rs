//! Structured linear algebra for Kronecker products and sums of Kronecker
//! products of SPD matrices.
//!
//! Vectors conformable with `A ⊗ B` (with `A` of size `m×m` and `B` of size
//! `n×n`) use the index map `(i, a) -> i * n + a`, which is the ordering
//! produced by [`nalgebra::Matrix::kronecker`]. Under that map a vector `v`
//! reshapes row-major into an `m×n` matrix `V` and `(A ⊗ B) v = vec(A V Bᵀ)`.

use nalgebra::{Cholesky, DMatrix, DVector};

use crate::error::{Error, Result};

const SYMMETRY_TOL: f64 = 1e-10;

/// A pair of SPD factors representing `left ⊗ right`.
#[derive(Debug, Clone, PartialEq)]
pub struct KronPair {
    left: DMatrix<f64>,
    right: DMatrix<f64>,
}

impl KronPair {
    pub fn new(left: DMatrix<f64>, right: DMatrix<f64>) -> Result<Self> {
        check_symmetric(&left, SYMMETRY_TOL, "Kronecker left factor")?;
        check_symmetric(&right, SYMMETRY_TOL, "Kronecker right factor")?;
        Ok(Self { left, right })
    }

    pub fn left(&self) -> &DMatrix<f64> {
        &self.left
    }

    pub fn right(&self) -> &DMatrix<f64> {
        &self.right
    }

    /// Dimension of the (never materialised) product.
    pub fn dim(&self) -> usize {
        self.left.nrows() * self.right.nrows()
    }

    pub fn dense(&self) -> DMatrix<f64> {
        self.left.kronecker(&self.right)
    }
}

/// `Σ_q left_q ⊗ right_q` with every term sharing the same shapes.
#[derive(Debug, Clone, PartialEq)]
pub struct SumKron {
    terms: Vec<KronPair>,
}

impl SumKron {
    pub fn new(terms: Vec<KronPair>) -> Result<Self> {
        let first = terms
            .first()
            .ok_or_else(|| Error::Precondition("a sum of Kronecker products needs at least one term".into()))?;
        let (m, n) = (first.left.nrows(), first.right.nrows());
        for t in &terms[1..] {
            if t.left.nrows() != m {
                return Err(Error::dim("SumKron left factor", m, t.left.nrows()));
            }
            if t.right.nrows() != n {
                return Err(Error::dim("SumKron right factor", n, t.right.nrows()));
            }
        }
        Ok(Self { terms })
    }

    pub fn terms(&self) -> &[KronPair] {
        &self.terms
    }

    pub fn len(&self) -> usize {
        self.terms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.terms.is_empty()
    }

    /// Sizes `(M_H, M_X)` of the factors.
    pub fn factor_dims(&self) -> (usize, usize) {
        let t = &self.terms[0];
        (t.left.nrows(), t.right.nrows())
    }

    pub fn dim(&self) -> usize {
        self.terms[0].dim()
    }
}

/// Lower-triangular Cholesky factor of `A + jitter_used · I`.
#[derive(Debug, Clone, PartialEq)]
pub struct CholFactor {
    pub l: DMatrix<f64>,
    pub jitter_used: f64,
}

impl CholFactor {
    pub fn dim(&self) -> usize {
        self.l.nrows()
    }

    /// `log det (L Lᵀ)`.
    pub fn logdet(&self) -> f64 {
        2.0 * self.l.diagonal().iter().map(|d| d.ln()).sum::<f64>()
    }

    /// Solves `L x = b`.
    pub fn solve_lower(&self, b: &DVector<f64>) -> DVector<f64> {
        let mut x = b.clone();
        forward_substitute(&self.l, x.as_mut_slice());
        x
    }

    /// Solves `Lᵀ x = b`.
    pub fn solve_upper(&self, b: &DVector<f64>) -> DVector<f64> {
        let mut x = b.clone();
        back_substitute_transposed(&self.l, x.as_mut_slice());
        x
    }

    /// `(L Lᵀ)⁻¹`.
    pub fn inverse(&self) -> DMatrix<f64> {
        let n = self.dim();
        let mut inv = DMatrix::identity(n, n);
        for mut col in inv.column_iter_mut() {
            let s = col.as_mut_slice();
            forward_substitute(&self.l, s);
            back_substitute_transposed(&self.l, s);
        }
        inv
    }
}

/// Geometric jitter escalation used when a Cholesky factorisation fails.
///
/// The first attempt adds nothing. Subsequent attempts add
/// `relative_start · mean(diag A) · growth^k` for `k = 0..max_attempts`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct JitterPolicy {
    pub relative_start: f64,
    pub growth: f64,
    pub max_attempts: usize,
}

impl Default for JitterPolicy {
    fn default() -> Self {
        Self {
            relative_start: 1e-8,
            growth: 10.0,
            max_attempts: 6,
        }
    }
}

pub(crate) fn check_symmetric(a: &DMatrix<f64>, tol: f64, role: &str) -> Result<()> {
    if a.nrows() != a.ncols() {
        return Err(Error::dim(format!("{role} (square)"), a.nrows(), a.ncols()));
    }
    let n = a.nrows();
    for i in 0..n {
        for j in 0..i {
            if (a[(i, j)] - a[(j, i)]).abs() > tol {
                return Err(Error::Precondition(format!(
                    "{role} is not symmetric: |A[{i},{j}] - A[{j},{i}]| = {:e}",
                    (a[(i, j)] - a[(j, i)]).abs()
                )));
            }
        }
    }
    Ok(())
}

/// Cholesky factorisation of a symmetric matrix with jitter escalation.
pub fn jittered_cholesky(a: &DMatrix<f64>, policy: &JitterPolicy, role: &str) -> Result<CholFactor> {
    let scale = a.iter().fold(1.0_f64, |m, v| m.max(v.abs()));
    check_symmetric(a, 1e-8 * scale, role)?;
    if let Some(l) = cholesky_lower(a, 0.0) {
        return Ok(CholFactor { l, jitter_used: 0.0 });
    }
    let n = a.nrows();
    let mean_diag = if n == 0 { 0.0 } else { a.trace() / n as f64 };
    // A non-positive mean diagonal cannot be rescued by relative jitter, but
    // we still run the escalation so the failure report is uniform.
    let base = policy.relative_start * mean_diag.abs().max(f64::MIN_POSITIVE);
    let mut jitter = base;
    for _ in 0..policy.max_attempts {
        if let Some(l) = cholesky_lower(a, jitter) {
            return Ok(CholFactor { l, jitter_used: jitter });
        }
        jitter *= policy.growth;
    }
    Err(Error::Singular {
        role: role.to_string(),
        attempts: policy.max_attempts,
        last_jitter: jitter / policy.growth,
    })
}

/// Factor-wise Cholesky of `left ⊗ right`: `chol(A ⊗ B) = chol(A) ⊗ chol(B)`.
pub fn kron_cholesky(pair: &KronPair, policy: &JitterPolicy) -> Result<(CholFactor, CholFactor)> {
    let lh = jittered_cholesky(&pair.left, policy, "latent-space Gram factor")?;
    let lx = jittered_cholesky(&pair.right, policy, "input-space Gram factor")?;
    Ok((lh, lx))
}

/// `(A ⊗ B) v` for arbitrary (not necessarily square) `A`, `B` via `vec(A V Bᵀ)`.
pub fn kron_matvec_general(a: &DMatrix<f64>, b: &DMatrix<f64>, v: &[f64]) -> Result<DVector<f64>> {
    let (m, n) = (a.ncols(), b.ncols());
    if v.len() != m * n {
        return Err(Error::dim("Kronecker matvec input", m * n, v.len()));
    }
    // V is m×n row-major; nalgebra is column-major so read it as Vᵀ (n×m).
    let vt = DMatrix::from_column_slice(n, m, v);
    // (A V Bᵀ)ᵀ = B Vᵀ Aᵀ
    let rt = b * vt * a.transpose();
    Ok(DVector::from_column_slice(rt.as_slice()))
}

/// `(left ⊗ right) v` without materialising the product.
pub fn kron_matvec(pair: &KronPair, v: &DVector<f64>) -> Result<DVector<f64>> {
    kron_matvec_general(&pair.left, &pair.right, v.as_slice())
}

/// Materialises `Σ_q left_q ⊗ right_q`. Only valid for two or more terms;
/// single-term products must go through the factored path.
pub fn sum_kron_dense(sk: &SumKron) -> Result<DMatrix<f64>> {
    if sk.len() < 2 {
        return Err(Error::Precondition(
            "sum_kron_dense requires Q >= 2; use the factored Kronecker path for Q = 1".into(),
        ));
    }
    Ok(sum_kron_materialise(sk))
}

pub(crate) fn sum_kron_materialise(sk: &SumKron) -> DMatrix<f64> {
    let (m, n) = sk.factor_dims();
    let mut out = DMatrix::zeros(m * n, m * n);
    for t in &sk.terms {
        for i in 0..m {
            for j in 0..m {
                let lij = t.left[(i, j)];
                for a in 0..n {
                    for b in 0..n {
                        out[(i * n + a, j * n + b)] += lij * t.right[(a, b)];
                    }
                }
            }
        }
    }
    out
}

/// `KL(N(m0, Σ0H ⊗ Σ0X) ‖ N(0, I))` evaluated factor-wise.
pub fn kl_whitened_kron(m0: &DVector<f64>, s0h: &DMatrix<f64>, s0x: &DMatrix<f64>) -> Result<f64> {
    let (mh, mx) = (s0h.nrows(), s0x.nrows());
    if m0.len() != mh * mx {
        return Err(Error::dim("whitened mean", mh * mx, m0.len()));
    }
    let ch = Cholesky::new(s0h.clone()).ok_or_else(|| singular("whitened latent covariance"))?;
    let cx = Cholesky::new(s0x.clone()).ok_or_else(|| singular("whitened input covariance"))?;
    let logdet_h = 2.0 * ch.l_dirty().diagonal().iter().map(|d| d.ln()).sum::<f64>();
    let logdet_x = 2.0 * cx.l_dirty().diagonal().iter().map(|d| d.ln()).sum::<f64>();
    let kl = 0.5
        * (s0h.trace() * s0x.trace() - (mh * mx) as f64 + m0.norm_squared()
            - mh as f64 * logdet_x
            - mx as f64 * logdet_h);
    Ok(kl.max(0.0))
}

/// `KL(N(mean_q, cov_q) ‖ N(0, cov_p))` by dense factorisation.
pub fn kl_dense_gaussian(mean_q: &DVector<f64>, cov_q: &DMatrix<f64>, cov_p: &DMatrix<f64>) -> Result<f64> {
    let k = mean_q.len();
    if cov_q.nrows() != k || cov_q.ncols() != k {
        return Err(Error::dim("KL q covariance", k, cov_q.nrows()));
    }
    if cov_p.nrows() != k || cov_p.ncols() != k {
        return Err(Error::dim("KL p covariance", k, cov_p.nrows()));
    }
    let cq = Cholesky::new(cov_q.clone()).ok_or_else(|| singular("KL q covariance"))?;
    let cp = Cholesky::new(cov_p.clone()).ok_or_else(|| singular("KL p covariance"))?;
    let trace = cp.solve(cov_q).trace();
    let maha = mean_q.dot(&cp.solve(mean_q));
    let logdet_p = 2.0 * cp.l_dirty().diagonal().iter().map(|d| d.ln()).sum::<f64>();
    let logdet_q = 2.0 * cq.l_dirty().diagonal().iter().map(|d| d.ln()).sum::<f64>();
    Ok((0.5 * (trace - k as f64 + maha + logdet_p - logdet_q)).max(0.0))
}

fn singular(role: &str) -> Error {
    Error::Singular {
        role: role.to_string(),
        attempts: 1,
        last_jitter: 0.0,
    }
}

/// Left-looking Cholesky of `A + jitter·I`.
///
/// A pivot not exceeding `n·ε·max(diag)` counts as a failure, so numerically
/// singular matrices are reported instead of producing a factor with a
/// vanishing diagonal.
pub(crate) fn cholesky_lower(a: &DMatrix<f64>, jitter: f64) -> Option<DMatrix<f64>> {
    let n = a.nrows();
    let max_diag = (0..n).fold(0.0_f64, |m, i| m.max(a[(i, i)] + jitter));
    if !(max_diag > 0.0) || !max_diag.is_finite() {
        return if n == 0 { Some(DMatrix::zeros(0, 0)) } else { None };
    }
    let tol = n as f64 * f64::EPSILON * max_diag;
    let mut l = DMatrix::<f64>::zeros(n, n);
    let mut col = vec![0.0; n];
    for j in 0..n {
        for i in j..n {
            col[i] = a[(i, j)];
        }
        col[j] += jitter;
        for k in 0..j {
            let ljk = l[(j, k)];
            if ljk != 0.0 {
                let lk = l.column(k);
                let lk = lk.as_slice();
                for i in j..n {
                    col[i] -= ljk * lk[i];
                }
            }
        }
        let pivot = col[j];
        if !(pivot > tol) {
            return None;
        }
        let d = pivot.sqrt();
        let mut lj = l.column_mut(j);
        let lj = lj.as_mut_slice();
        lj[j] = d;
        for i in j + 1..n {
            lj[i] = col[i] / d;
        }
    }
    Some(l)
}

/// In-place `x <- L⁻¹ x` for lower-triangular `L`.
pub(crate) fn forward_substitute(l: &DMatrix<f64>, x: &mut [f64]) {
    let n = l.nrows();
    for k in 0..n {
        let lk = l.column(k);
        let lk = lk.as_slice();
        let xk = x[k] / lk[k];
        x[k] = xk;
        if xk != 0.0 {
            for i in k + 1..n {
                x[i] -= lk[i] * xk;
            }
        }
    }
}

/// In-place `x <- L⁻ᵀ x` for lower-triangular `L`.
pub(crate) fn back_substitute_transposed(l: &DMatrix<f64>, x: &mut [f64]) {
    let n = l.nrows();
    for i in (0..n).rev() {
        let mut s = x[i];
        for k in i + 1..n {
            s -= l[(k, i)] * x[k];
        }
        x[i] = s / l[(i, i)];
    }
}

/// Reverse-mode adjoint of `L = chol(A)`.
///
/// Given `L` and the adjoint `L̄` (only its lower triangle is read), returns the
/// symmetric `Ā` with `dF = ⟨Ā, dA⟩` for every symmetric perturbation `dA`.
pub fn cholesky_backward(l: &DMatrix<f64>, l_bar: &DMatrix<f64>) -> DMatrix<f64> {
    let n = l.nrows();
    let mut lbar = l_bar.clone();
    for j in 0..n {
        for i in 0..j {
            lbar[(i, j)] = 0.0;
        }
    }
    // P = Φ(Lᵀ L̄): lower triangle with halved diagonal.
    let mut p = l.transpose() * &lbar;
    for j in 0..n {
        for i in 0..j {
            p[(i, j)] = 0.0;
        }
        p[(j, j)] *= 0.5;
    }
    // S = L⁻ᵀ P L⁻¹
    for mut col in p.column_iter_mut() {
        back_substitute_transposed(l, col.as_mut_slice());
    }
    let mut s = p.transpose();
    for mut col in s.column_iter_mut() {
        back_substitute_transposed(l, col.as_mut_slice());
    }
    // s now holds (L⁻ᵀ P L⁻¹)ᵀ
    let st = s.transpose();
    (s + st) * 0.5
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_spd(n: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
        let a = DMatrix::from_fn(n, n, |_, _| rng.random_range(-1.0..1.0));
        &a * a.transpose() + DMatrix::identity(n, n) * 0.5
    }

    #[test]
    fn matvec_identity_and_scalar() {
        let p = KronPair::new(DMatrix::identity(2, 2), DMatrix::identity(3, 3)).unwrap();
        let v = DVector::from_iterator(6, (1..=6).map(|x| x as f64));
        assert_eq!(kron_matvec(&p, &v).unwrap(), v);

        let p = KronPair::new(DMatrix::from_element(1, 1, 2.0), DMatrix::from_element(1, 1, 3.0)).unwrap();
        let r = kron_matvec(&p, &DVector::from_element(1, 5.0)).unwrap();
        assert_eq!(r[0], 30.0);
    }

    #[test]
    fn matvec_matches_dense_materialisation() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let p = KronPair::new(random_spd(3, &mut rng), random_spd(4, &mut rng)).unwrap();
        let v = DVector::from_fn(12, |_, _| rng.random_range(-1.0..1.0));
        let dense = p.dense() * &v;
        let fast = kron_matvec(&p, &v).unwrap();
        assert!((dense - fast).amax() < 1e-10);
    }

    #[test]
    fn matvec_rejects_wrong_length() {
        let p = KronPair::new(DMatrix::identity(2, 2), DMatrix::identity(3, 3)).unwrap();
        assert!(matches!(
            kron_matvec(&p, &DVector::zeros(5)),
            Err(Error::Dimension { .. })
        ));
    }

    #[test]
    fn kron_cholesky_examples() {
        let p = KronPair::new(DMatrix::identity(2, 2), DMatrix::identity(3, 3)).unwrap();
        let (lh, lx) = kron_cholesky(&p, &JitterPolicy::default()).unwrap();
        assert_eq!(lh.l, DMatrix::identity(2, 2));
        assert_eq!(lx.l, DMatrix::identity(3, 3));

        let p = KronPair::new(DMatrix::identity(2, 2) * 4.0, DMatrix::identity(2, 2) * 9.0).unwrap();
        let (lh, lx) = kron_cholesky(&p, &JitterPolicy::default()).unwrap();
        assert!((lh.l - DMatrix::identity(2, 2) * 2.0).amax() < 1e-15);
        assert!((lx.l - DMatrix::identity(2, 2) * 3.0).amax() < 1e-15);
    }

    #[test]
    fn kron_cholesky_reconstructs_dense_product() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let p = KronPair::new(random_spd(5, &mut rng), random_spd(5, &mut rng)).unwrap();
        let (lh, lx) = kron_cholesky(&p, &JitterPolicy::default()).unwrap();
        let l = lh.l.kronecker(&lx.l);
        let rec = &l * l.transpose();
        let dense = p.dense();
        assert!((rec - &dense).norm() / dense.norm() < 1e-8);
        // the Kronecker product of the factors is itself lower triangular
        for i in 0..l.nrows() {
            assert!(l[(i, i)] > 0.0);
            for j in i + 1..l.ncols() {
                assert_eq!(l[(i, j)], 0.0);
            }
        }
    }

    #[test]
    fn sum_kron_dense_examples() {
        let t = || KronPair::new(DMatrix::identity(2, 2), DMatrix::identity(2, 2)).unwrap();
        let sk = SumKron::new(vec![t(), t()]).unwrap();
        assert_eq!(sum_kron_dense(&sk).unwrap(), DMatrix::identity(4, 4) * 2.0);

        let single = SumKron::new(vec![t()]).unwrap();
        assert!(matches!(sum_kron_dense(&single), Err(Error::Precondition(_))));
        assert!(SumKron::new(vec![]).is_err());
    }

    #[test]
    fn sum_kron_dense_equals_naive_loop_bitwise() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let terms: Vec<_> = (0..2)
            .map(|_| KronPair::new(random_spd(3, &mut rng), random_spd(2, &mut rng)).unwrap())
            .collect();
        let sk = SumKron::new(terms.clone()).unwrap();
        let fast = sum_kron_dense(&sk).unwrap();
        // naive oracle: explicit double loop over row/column indices, same term order
        let mut naive = DMatrix::zeros(6, 6);
        for r in 0..6 {
            for c in 0..6 {
                let mut acc = 0.0;
                for t in &terms {
                    acc += t.left()[(r / 2, c / 2)] * t.right()[(r % 2, c % 2)];
                }
                naive[(r, c)] = acc;
            }
        }
        assert_eq!(fast, naive);
    }

    #[test]
    fn jitter_policy_examples() {
        let c = jittered_cholesky(&DMatrix::identity(3, 3), &JitterPolicy::default(), "I").unwrap();
        assert_eq!(c.l, DMatrix::identity(3, 3));
        assert_eq!(c.jitter_used, 0.0);

        let a = DMatrix::from_diagonal(&DVector::from_vec(vec![1e-20, 1.0, 1.0]));
        let c = jittered_cholesky(&a, &JitterPolicy::default(), "tiny eigenvalue").unwrap();
        assert!(c.jitter_used > 0.0);
        assert!(c.l[(0, 0)] > 0.0);
        let rec = &c.l * c.l.transpose();
        assert!((rec - &a).amax() <= 1e-6 * a.norm() + c.jitter_used);
    }

    #[test]
    fn jitter_policy_gives_up_on_negative_eigenvalue() {
        // Q diag(-1, 2, 3) Qᵀ with a rotation Q
        let (c, s) = (0.6_f64, 0.8_f64);
        let q = DMatrix::from_row_slice(3, 3, &[c, -s, 0.0, s, c, 0.0, 0.0, 0.0, 1.0]);
        let a = &q * DMatrix::from_diagonal(&DVector::from_vec(vec![-1.0, 2.0, 3.0])) * q.transpose();
        let a = (&a + a.transpose()) * 0.5;
        match jittered_cholesky(&a, &JitterPolicy::default(), "indefinite test matrix") {
            Err(Error::Singular { role, attempts, .. }) => {
                assert_eq!(attempts, 6);
                assert!(role.contains("indefinite"));
            }
            other => panic!("expected singularity error, got {other:?}"),
        }
    }

    #[test]
    fn whitened_kl_examples() {
        let m0 = DVector::zeros(6);
        let kl = kl_whitened_kron(&m0, &DMatrix::identity(2, 2), &DMatrix::identity(3, 3)).unwrap();
        assert!(kl.abs() < 1e-15);
        let mut m0 = DVector::zeros(6);
        m0[0] = 1.0;
        let kl = kl_whitened_kron(&m0, &DMatrix::identity(2, 2), &DMatrix::identity(3, 3)).unwrap();
        assert!((kl - 0.5).abs() < 1e-15);
    }

    #[test]
    fn whitened_kl_matches_dense_kl() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let s0h = random_spd(3, &mut rng);
        let s0x = random_spd(4, &mut rng);
        let m0 = DVector::from_fn(12, |_, _| rng.random_range(-1.0..1.0));
        let fast = kl_whitened_kron(&m0, &s0h, &s0x).unwrap();
        let dense = kl_dense_gaussian(&m0, &s0h.kronecker(&s0x), &DMatrix::identity(12, 12)).unwrap();
        assert!((fast - dense).abs() < 1e-9, "{fast} vs {dense}");
    }

    #[test]
    fn dense_kl_examples() {
        let kl = kl_dense_gaussian(&DVector::zeros(5), &DMatrix::identity(5, 5), &DMatrix::identity(5, 5)).unwrap();
        assert!(kl.abs() < 1e-15);
        let kl = kl_dense_gaussian(
            &DVector::zeros(1),
            &DMatrix::from_element(1, 1, 2.0),
            &DMatrix::identity(1, 1),
        )
        .unwrap();
        assert!((kl - 0.5 * (2.0 - 1.0 + 0.5_f64.ln())).abs() < 1e-15);
        assert!((kl - 0.153426).abs() < 1e-6);
        let bad = DMatrix::from_diagonal(&DVector::from_vec(vec![1.0, -1.0]));
        assert!(matches!(
            kl_dense_gaussian(&DVector::zeros(2), &bad, &DMatrix::identity(2, 2)),
            Err(Error::Singular { .. })
        ));
    }

    #[test]
    fn dense_kl_matches_monte_carlo() {
        use rand_distr::StandardNormal;
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let cov_q = random_spd(3, &mut rng) * 0.5;
        let cov_p = random_spd(3, &mut rng);
        let mean_q = DVector::from_fn(3, |_, _| rng.random_range(-1.0..1.0));
        let kl = kl_dense_gaussian(&mean_q, &cov_q, &cov_p).unwrap();

        let lq = Cholesky::new(cov_q.clone()).unwrap();
        let lp = Cholesky::new(cov_p.clone()).unwrap();
        let log_norm = |x: &DVector<f64>, mean: &DVector<f64>, c: &Cholesky<f64, nalgebra::Dyn>| {
            let d = x - mean;
            let maha = d.dot(&c.solve(&d));
            let logdet = 2.0 * c.l_dirty().diagonal().iter().map(|v| v.ln()).sum::<f64>();
            -0.5 * (maha + logdet + 3.0 * (2.0 * std::f64::consts::PI).ln())
        };
        let zero = DVector::zeros(3);
        let n = 1_000_000;
        let (mut s, mut s2) = (0.0, 0.0);
        let lql = lq.l();
        for _ in 0..n {
            let e = DVector::from_fn(3, |_, _| rng.sample::<f64, _>(StandardNormal));
            let x = &mean_q + &lql * e;
            let r = log_norm(&x, &mean_q, &lq) - log_norm(&x, &zero, &lp);
            s += r;
            s2 += r * r;
        }
        let mean = s / n as f64;
        let se = ((s2 / n as f64 - mean * mean) / n as f64).sqrt();
        assert!((mean - kl).abs() < 3.0 * se, "MC {mean} ± {se} vs {kl}");
    }

    #[test]
    fn cholesky_backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let a = random_spd(4, &mut rng);
        let w = DMatrix::from_fn(4, 4, |i, j| if j <= i { rng.random_range(-1.0..1.0) } else { 0.0 });
        // F(A) = ⟨W, chol(A)⟩
        let f = |a: &DMatrix<f64>| Cholesky::new(a.clone()).unwrap().l().component_mul(&w).sum();
        let l = Cholesky::new(a.clone()).unwrap().l();
        let abar = cholesky_backward(&l, &w);
        let h = 1e-6;
        for i in 0..4 {
            for j in 0..=i {
                let mut ap = a.clone();
                let mut am = a.clone();
                ap[(i, j)] += h;
                am[(i, j)] -= h;
                if i != j {
                    ap[(j, i)] += h;
                    am[(j, i)] -= h;
                }
                let fd = (f(&ap) - f(&am)) / (2.0 * h);
                let an = if i == j { abar[(i, i)] } else { 2.0 * abar[(i, j)] };
                assert!((fd - an).abs() < 1e-7, "({i},{j}): fd {fd} vs {an}");
            }
        }
    }

    #[test]
    fn triangular_helpers_invert() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let a = random_spd(5, &mut rng);
        let c = jittered_cholesky(&a, &JitterPolicy::default(), "a").unwrap();
        let inv = c.inverse();
        assert!((&a * inv - DMatrix::<f64>::identity(5, 5)).amax() < 1e-10);
        let b = DVector::from_fn(5, |i, _| i as f64);
        assert!((&c.l * c.solve_lower(&b) - &b).amax() < 1e-12);
        assert!((c.l.transpose() * c.solve_upper(&b) - &b).amax() < 1e-12);
    }
}
