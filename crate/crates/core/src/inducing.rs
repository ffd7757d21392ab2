//! Inducing points, the whitened posterior `q(u₀) = N(M₀, Σ₀H ⊗ Σ₀X)` and the
//! prior covariance `K_uu = Σ_q K^H_q ⊗ K^X_q`.
//!
//! Inducing values are indexed `(i, a) -> i·M_X + a` with `i` over latent
//! inducing points and `a` over input inducing points.

use nalgebra::{DMatrix, DVector};
use rand::seq::index::sample;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernels::{gram, KernelSpec};
use crate::kron::{
    back_substitute_transposed, forward_substitute, jittered_cholesky, kl_whitened_kron, kron_matvec_general,
    sum_kron_materialise, CholFactor, JitterPolicy, KronPair, SumKron,
};

/// Inducing locations, stored flat.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InducingPoints {
    pub m_x: usize,
    pub q_x: usize,
    /// `M_X · Q_X` values, point-major.
    pub z_x: Vec<f64>,
    pub q: usize,
    pub m_h: usize,
    pub q_h: usize,
    /// `Q · M_H · Q_H` values, ordered `[q][i][dim]`.
    pub z_h: Vec<f64>,
}

impl InducingPoints {
    pub fn new(z_x: Vec<Vec<f64>>, z_h: Vec<Vec<Vec<f64>>>) -> Result<Self> {
        let m_x = z_x.len();
        let q_x = z_x.first().map_or(0, Vec::len);
        let q = z_h.len();
        let m_h = z_h.first().map_or(0, Vec::len);
        let q_h = z_h.first().and_then(|l| l.first()).map_or(0, Vec::len);
        if m_x == 0 || q_x == 0 || q == 0 || m_h == 0 || q_h == 0 {
            return Err(Error::InvalidParameter("inducing sets must be non-empty".into()));
        }
        for z in &z_x {
            if z.len() != q_x {
                return Err(Error::dim("input inducing location", q_x, z.len()));
            }
        }
        for list in &z_h {
            if list.len() != m_h {
                return Err(Error::dim("latent inducing list", m_h, list.len()));
            }
            for z in list {
                if z.len() != q_h {
                    return Err(Error::dim("latent inducing location", q_h, z.len()));
                }
            }
        }
        Ok(Self {
            m_x,
            q_x,
            z_x: z_x.concat(),
            q,
            m_h,
            q_h,
            z_h: z_h.concat().concat(),
        })
    }

    /// `Z_X` as a uniform subsample of `inputs` (distinct indices where there
    /// are enough points), `Z_H[q]` as standard-normal draws or, when
    /// `latent_pool` is given, a subsample of it.
    pub fn init<R: Rng + ?Sized>(
        inputs: &[&[f64]],
        m_x: usize,
        q: usize,
        m_h: usize,
        q_h: usize,
        latent_pool: Option<&[&[f64]]>,
        rng: &mut R,
    ) -> Result<Self> {
        if inputs.is_empty() {
            return Err(Error::Precondition("cannot place input inducing points without training inputs".into()));
        }
        let q_x = inputs[0].len();
        let z_x: Vec<Vec<f64>> = pick(inputs, m_x, rng);
        let z_h = (0..q)
            .map(|_| match latent_pool {
                Some(pool) if !pool.is_empty() => pick(pool, m_h, rng),
                _ => (0..m_h)
                    .map(|_| (0..q_h).map(|_| rng.sample(StandardNormal)).collect())
                    .collect(),
            })
            .collect();
        let ip = Self::new(z_x, z_h)?;
        if ip.q_x != q_x || ip.q_h != q_h {
            return Err(Error::dim("latent pool dimension", q_h, ip.q_h));
        }
        Ok(ip)
    }

    pub fn x(&self, a: usize) -> &[f64] {
        &self.z_x[a * self.q_x..(a + 1) * self.q_x]
    }

    pub fn h(&self, q: usize, i: usize) -> &[f64] {
        let o = (q * self.m_h + i) * self.q_h;
        &self.z_h[o..o + self.q_h]
    }

    pub fn h_offset(&self, q: usize, i: usize) -> usize {
        (q * self.m_h + i) * self.q_h
    }

    pub fn x_list(&self) -> Vec<Vec<f64>> {
        (0..self.m_x).map(|a| self.x(a).to_vec()).collect()
    }

    pub fn h_list(&self, q: usize) -> Vec<Vec<f64>> {
        (0..self.m_h).map(|i| self.h(q, i).to_vec()).collect()
    }

    pub fn dim(&self) -> usize {
        self.m_h * self.m_x
    }
}

fn pick<R: Rng + ?Sized>(pool: &[&[f64]], m: usize, rng: &mut R) -> Vec<Vec<f64>> {
    if m <= pool.len() {
        sample(rng, pool.len(), m).into_iter().map(|i| pool[i].to_vec()).collect()
    } else {
        (0..m).map(|_| pool[rng.random_range(0..pool.len())].to_vec()).collect()
    }
}

/// Lower-triangular factor with a log-parametrised diagonal.
///
/// Packed parameter order is row-major over the lower triangle; diagonal
/// entries hold `log L_ii`.
pub fn tri_pack(l: &DMatrix<f64>) -> Vec<f64> {
    let n = l.nrows();
    let mut p = Vec::with_capacity(n * (n + 1) / 2);
    for i in 0..n {
        for j in 0..i {
            p.push(l[(i, j)]);
        }
        p.push(l[(i, i)].ln());
    }
    p
}

pub fn tri_unpack(p: &[f64], n: usize) -> Result<DMatrix<f64>> {
    if p.len() != n * (n + 1) / 2 {
        return Err(Error::dim("packed triangular factor", n * (n + 1) / 2, p.len()));
    }
    let mut l = DMatrix::zeros(n, n);
    let mut k = 0;
    for i in 0..n {
        for j in 0..i {
            l[(i, j)] = p[k];
            k += 1;
        }
        l[(i, i)] = p[k].exp();
        k += 1;
    }
    Ok(l)
}

/// Maps `∂F/∂L` (lower triangle read) to the gradient in packed parameters.
pub fn tri_pack_grad(l: &DMatrix<f64>, l_bar: &DMatrix<f64>) -> Vec<f64> {
    let n = l.nrows();
    let mut g = Vec::with_capacity(n * (n + 1) / 2);
    for i in 0..n {
        for j in 0..i {
            g.push(l_bar[(i, j)]);
        }
        g.push(l_bar[(i, i)] * l[(i, i)]);
    }
    g
}

#[derive(Debug, Clone, PartialEq)]
pub struct WhitenedPosterior {
    pub m0: DVector<f64>,
    pub l0h: DMatrix<f64>,
    pub l0x: DMatrix<f64>,
}

impl WhitenedPosterior {
    pub fn new(m0: DVector<f64>, l0h: DMatrix<f64>, l0x: DMatrix<f64>) -> Result<Self> {
        let (mh, mx) = (l0h.nrows(), l0x.nrows());
        if !l0h.is_square() || !l0x.is_square() {
            return Err(Error::InvalidParameter("whitened factors must be square".into()));
        }
        if m0.len() != mh * mx {
            return Err(Error::dim("whitened mean", mh * mx, m0.len()));
        }
        for (name, l) in [("L0H", &l0h), ("L0X", &l0x)] {
            let n = l.nrows();
            for i in 0..n {
                if !(l[(i, i)] > 0.0) {
                    return Err(Error::InvalidParameter(format!("{name} diagonal entry {i} is {}", l[(i, i)])));
                }
                for j in i + 1..n {
                    if l[(i, j)] != 0.0 {
                        return Err(Error::InvalidParameter(format!("{name} is not lower triangular")));
                    }
                }
            }
        }
        Ok(Self { m0, l0h, l0x })
    }

    /// `M₀ = 0`, `L0H = scale·I`, `L0X = scale·I`.
    pub fn init(m_h: usize, m_x: usize, scale: f64) -> Self {
        Self {
            m0: DVector::zeros(m_h * m_x),
            l0h: DMatrix::identity(m_h, m_h) * scale,
            l0x: DMatrix::identity(m_x, m_x) * scale,
        }
    }

    pub fn m_h(&self) -> usize {
        self.l0h.nrows()
    }

    pub fn m_x(&self) -> usize {
        self.l0x.nrows()
    }

    pub fn s0h(&self) -> DMatrix<f64> {
        &self.l0h * self.l0h.transpose()
    }

    pub fn s0x(&self) -> DMatrix<f64> {
        &self.l0x * self.l0x.transpose()
    }

    /// `M₀` reshaped row-major to `M_H × M_X`.
    pub fn m0_mat(&self) -> DMatrix<f64> {
        DMatrix::from_row_slice(self.m_h(), self.m_x(), self.m0.as_slice())
    }
}

/// `K_uu` with the Gram of every factor evaluated exactly (no jitter).
pub fn compute_kuu(kernels_h: &[KernelSpec], kernels_x: &[KernelSpec], ip: &InducingPoints) -> Result<SumKron> {
    compute_kuu_with_jitter(kernels_h, kernels_x, ip, 0.0)
}

/// `K_uu` with `jitter·I` added to every factor Gram.
pub fn compute_kuu_with_jitter(
    kernels_h: &[KernelSpec],
    kernels_x: &[KernelSpec],
    ip: &InducingPoints,
    jitter: f64,
) -> Result<SumKron> {
    if kernels_h.len() != ip.q {
        return Err(Error::dim("latent kernels", ip.q, kernels_h.len()));
    }
    if kernels_x.len() != ip.q {
        return Err(Error::dim("input kernels", ip.q, kernels_x.len()));
    }
    let zx = ip.x_list();
    let mut terms = Vec::with_capacity(ip.q);
    for q in 0..ip.q {
        let zh = ip.h_list(q);
        let mut kh = gram(&kernels_h[q], &zh, &zh)?;
        let mut kx = gram(&kernels_x[q], &zx, &zx)?;
        for i in 0..ip.m_h {
            kh[(i, i)] += jitter;
        }
        for a in 0..ip.m_x {
            kx[(a, a)] += jitter;
        }
        terms.push(KronPair::new(kh, kx)?);
    }
    SumKron::new(terms)
}

/// Cholesky factor `L` of `K_uu`: factor-wise for a single term, dense otherwise.
#[derive(Debug, Clone)]
pub enum KuuFactor {
    Factored { lh: CholFactor, lx: CholFactor },
    Dense { l: CholFactor },
}

impl KuuFactor {
    pub fn new(kuu: &SumKron, policy: &JitterPolicy) -> Result<Self> {
        if kuu.len() == 1 {
            let t = &kuu.terms()[0];
            Ok(KuuFactor::Factored {
                lh: jittered_cholesky(t.left(), policy, "latent-space inducing Gram")?,
                lx: jittered_cholesky(t.right(), policy, "input-space inducing Gram")?,
            })
        } else {
            let dense = sum_kron_materialise(kuu);
            Ok(KuuFactor::Dense { l: jittered_cholesky(&dense, policy, "summed inducing covariance")? })
        }
    }

    pub fn dim(&self) -> usize {
        match self {
            KuuFactor::Factored { lh, lx } => lh.dim() * lx.dim(),
            KuuFactor::Dense { l } => l.dim(),
        }
    }

    /// `L⁻¹ v`.
    pub fn solve_lower(&self, v: &[f64]) -> DVector<f64> {
        match self {
            KuuFactor::Factored { lh, lx } => {
                let (mh, mx) = (lh.dim(), lx.dim());
                // rows of Vᵀ are the columns here: solve each M_X block, then across blocks
                let mut w = DMatrix::from_column_slice(mx, mh, v);
                for mut c in w.column_iter_mut() {
                    forward_substitute(&lx.l, c.as_mut_slice());
                }
                let mut wt = w.transpose();
                for mut c in wt.column_iter_mut() {
                    forward_substitute(&lh.l, c.as_mut_slice());
                }
                DVector::from_column_slice(wt.transpose().as_slice())
            }
            KuuFactor::Dense { l } => {
                let mut x = v.to_vec();
                forward_substitute(&l.l, &mut x);
                DVector::from_vec(x)
            }
        }
    }

    /// `L⁻ᵀ v`.
    pub fn solve_upper(&self, v: &[f64]) -> DVector<f64> {
        match self {
            KuuFactor::Factored { lh, lx } => {
                let (mh, mx) = (lh.dim(), lx.dim());
                let mut w = DMatrix::from_column_slice(mx, mh, v);
                for mut c in w.column_iter_mut() {
                    back_substitute_transposed(&lx.l, c.as_mut_slice());
                }
                let mut wt = w.transpose();
                for mut c in wt.column_iter_mut() {
                    back_substitute_transposed(&lh.l, c.as_mut_slice());
                }
                DVector::from_column_slice(wt.transpose().as_slice())
            }
            KuuFactor::Dense { l } => {
                let mut x = v.to_vec();
                back_substitute_transposed(&l.l, &mut x);
                DVector::from_vec(x)
            }
        }
    }

    /// `L v`.
    pub fn mul_lower(&self, v: &[f64]) -> DVector<f64> {
        match self {
            KuuFactor::Factored { lh, lx } => kron_matvec_general(&lh.l, &lx.l, v).expect("conformable by construction"),
            KuuFactor::Dense { l } => &l.l * DVector::from_column_slice(v),
        }
    }

    /// `K_uu⁻¹` materialised; factor-wise for a single term.
    pub fn inverse(&self) -> DMatrix<f64> {
        match self {
            KuuFactor::Factored { lh, lx } => lh.inverse().kronecker(&lx.inverse()),
            KuuFactor::Dense { l } => l.inverse(),
        }
    }

    /// `L` materialised.
    pub fn dense_l(&self) -> DMatrix<f64> {
        match self {
            KuuFactor::Factored { lh, lx } => lh.l.kronecker(&lx.l),
            KuuFactor::Dense { l } => l.l.clone(),
        }
    }

    pub fn jitter_used(&self) -> f64 {
        match self {
            KuuFactor::Factored { lh, lx } => lh.jitter_used.max(lx.jitter_used),
            KuuFactor::Dense { l } => l.jitter_used,
        }
    }
}

/// Covariance of `q(u)`: kept as two factors for a single Kronecker term.
#[derive(Debug, Clone, PartialEq)]
pub enum SigmaU {
    Factored { left: DMatrix<f64>, right: DMatrix<f64> },
    Dense(DMatrix<f64>),
}

impl SigmaU {
    pub fn dense(&self) -> DMatrix<f64> {
        match self {
            SigmaU::Factored { left, right } => left.kronecker(right),
            SigmaU::Dense(s) => s.clone(),
        }
    }
}

/// `M_u = L M₀` and `Σ_u = L (Σ₀H ⊗ Σ₀X) Lᵀ`.
pub fn q_u_moments(wp: &WhitenedPosterior, kuu: &SumKron) -> Result<(DVector<f64>, SigmaU)> {
    let (mh, mx) = kuu.factor_dims();
    if (wp.m_h(), wp.m_x()) != (mh, mx) {
        return Err(Error::dim("whitened posterior size", mh * mx, wp.m_h() * wp.m_x()));
    }
    let factor = KuuFactor::new(kuu, &JitterPolicy::default())?;
    let m_u = factor.mul_lower(wp.m0.as_slice());
    let sigma = match &factor {
        KuuFactor::Factored { lh, lx } => {
            let a = &lh.l * &wp.l0h;
            let b = &lx.l * &wp.l0x;
            SigmaU::Factored { left: &a * a.transpose(), right: &b * b.transpose() }
        }
        KuuFactor::Dense { l } => {
            let c = &l.l * wp.l0h.kronecker(&wp.l0x);
            SigmaU::Dense(&c * c.transpose())
        }
    };
    Ok((m_u, sigma))
}

/// `KL(q(u) ‖ p(u)) = KL(q(u₀) ‖ N(0, I))`, the same for every `Q`.
pub fn kl_u(wp: &WhitenedPosterior) -> Result<f64> {
    kl_whitened_kron(&wp.m0, &wp.s0h(), &wp.s0x())
}

/// Gradient of [`kl_u`] with respect to `M₀`, `L0H`, `L0X` (dense lower-triangular
/// adjoints, before the log-diagonal reparametrisation).
pub fn kl_u_grad(wp: &WhitenedPosterior) -> (DVector<f64>, DMatrix<f64>, DMatrix<f64>) {
    let (mh, mx) = (wp.m_h() as f64, wp.m_x() as f64);
    let tr_h = wp.l0h.norm_squared();
    let tr_x = wp.l0x.norm_squared();
    let mut gh = &wp.l0h * tr_x;
    let mut gx = &wp.l0x * tr_h;
    for i in 0..wp.m_h() {
        gh[(i, i)] -= mx / wp.l0h[(i, i)];
    }
    for a in 0..wp.m_x() {
        gx[(a, a)] -= mh / wp.l0x[(a, a)];
    }
    (wp.m0.clone(), gh, gx)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernels::KernelFamily;
    use crate::kron::{kl_dense_gaussian, kron_cholesky, sum_kron_dense};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_points(n: usize, d: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
        (0..n).map(|_| (0..d).map(|_| rng.random_range(-2.0..2.0)).collect()).collect()
    }

    fn random_lower(n: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
        DMatrix::from_fn(n, n, |i, j| match i.cmp(&j) {
            std::cmp::Ordering::Greater => rng.random_range(-0.5..0.5),
            std::cmp::Ordering::Equal => rng.random_range(0.3..1.5),
            std::cmp::Ordering::Less => 0.0,
        })
    }

    fn random_wp(mh: usize, mx: usize, rng: &mut ChaCha8Rng) -> WhitenedPosterior {
        let m0 = DVector::from_fn(mh * mx, |_, _| rng.random_range(-1.0..1.0));
        WhitenedPosterior::new(m0, random_lower(mh, rng), random_lower(mx, rng)).unwrap()
    }

    fn setup(q: usize, mh: usize, mx: usize, rng: &mut ChaCha8Rng) -> (Vec<KernelSpec>, Vec<KernelSpec>, InducingPoints) {
        let kh = (0..q)
            .map(|_| KernelSpec::new(KernelFamily::SeArd, rng.random_range(0.5..2.0), &[1.3, 0.8], None).unwrap())
            .collect();
        let kx = (0..q)
            .map(|_| KernelSpec::new(KernelFamily::Matern52, rng.random_range(0.5..2.0), &[0.9], None).unwrap())
            .collect();
        let ip = InducingPoints::new(random_points(mx, 1, rng), (0..q).map(|_| random_points(mh, 2, rng)).collect()).unwrap();
        (kh, kx, ip)
    }

    #[test]
    fn single_point_kuu_is_product_of_outputscales() {
        let kh = KernelSpec::new(KernelFamily::SeArd, 2.0, &[1.0], None).unwrap();
        let kx = KernelSpec::new(KernelFamily::Matern32, 3.0, &[1.0], None).unwrap();
        let ip = InducingPoints::new(vec![vec![0.4]], vec![vec![vec![-0.1]]]).unwrap();
        let k = compute_kuu(&[kh], &[kx], &ip).unwrap();
        assert_eq!(k.len(), 1);
        assert!((k.terms()[0].dense()[(0, 0)] - 6.0).abs() < 1e-14);
    }

    #[test]
    fn two_term_kuu_matches_dense_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let (kh, kx, ip) = setup(2, 3, 4, &mut rng);
        let k = compute_kuu(&kh, &kx, &ip).unwrap();
        let zx = ip.x_list();
        let mut oracle = DMatrix::zeros(12, 12);
        for q in 0..2 {
            let zh = ip.h_list(q);
            let a = DMatrix::from_fn(3, 3, |i, j| kh[q].eval(&zh[i], &zh[j]).unwrap());
            let b = DMatrix::from_fn(4, 4, |i, j| kx[q].eval(&zx[i], &zx[j]).unwrap());
            oracle += a.kronecker(&b);
        }
        assert!((sum_kron_dense(&k).unwrap() - oracle).amax() < 1e-14);
    }

    #[test]
    fn factored_inverse_matches_dense_inverse() {
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        let (kh, kx, ip) = setup(1, 4, 4, &mut rng);
        let k = compute_kuu_with_jitter(&kh, &kx, &ip, 1e-6).unwrap();
        let f = KuuFactor::new(&k, &JitterPolicy::default()).unwrap();
        let dense = k.terms()[0].dense();
        let inv = dense.clone().try_inverse().unwrap();
        let rel = (f.inverse() - &inv).norm() / inv.norm();
        assert!(rel < 1e-8, "{rel}");
    }

    #[test]
    fn solves_match_dense_factor() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        for q in [1, 2] {
            let (kh, kx, ip) = setup(q, 3, 4, &mut rng);
            let k = compute_kuu_with_jitter(&kh, &kx, &ip, 1e-6).unwrap();
            let f = KuuFactor::new(&k, &JitterPolicy::default()).unwrap();
            let l = f.dense_l();
            let v: Vec<f64> = (0..12).map(|_| rng.random_range(-1.0..1.0)).collect();
            let vv = DVector::from_column_slice(&v);
            assert!((&l * f.solve_lower(&v) - &vv).amax() < 1e-9);
            assert!((l.transpose() * f.solve_upper(&v) - &vv).amax() < 1e-9);
            assert!((f.mul_lower(&v) - &l * &vv).amax() < 1e-12);
        }
    }

    #[test]
    fn identity_kuu_leaves_moments_unchanged() {
        let k = SumKron::new(vec![KronPair::new(DMatrix::identity(2, 2), DMatrix::identity(3, 3)).unwrap()]).unwrap();
        let m = DVector::from_fn(6, |i, _| i as f64 - 2.0);
        let wp = WhitenedPosterior::new(m.clone(), DMatrix::identity(2, 2), DMatrix::identity(3, 3)).unwrap();
        let (mu, s) = q_u_moments(&wp, &k).unwrap();
        assert_eq!(mu, m);
        assert_eq!(s.dense(), DMatrix::identity(6, 6));
    }

    #[test]
    fn factored_moments_match_dense_formula() {
        let mut rng = ChaCha8Rng::seed_from_u64(24);
        let (kh, kx, ip) = setup(1, 2, 2, &mut rng);
        let k = compute_kuu(&kh, &kx, &ip).unwrap();
        let wp = random_wp(2, 2, &mut rng);
        let (mu, s) = q_u_moments(&wp, &k).unwrap();
        assert!(matches!(s, SigmaU::Factored { .. }));
        let (lh, lx) = kron_cholesky(&k.terms()[0], &JitterPolicy::default()).unwrap();
        let l = lh.l.kronecker(&lx.l);
        let s0 = wp.s0h().kronecker(&wp.s0x());
        assert!((s.dense() - &l * s0 * l.transpose()).amax() < 1e-10);
        assert!((mu - &l * &wp.m0).amax() < 1e-12);
        let zero = WhitenedPosterior::init(2, 2, 0.1);
        assert_eq!(q_u_moments(&zero, &k).unwrap().0, DVector::zeros(4));
    }

    #[test]
    fn kl_u_examples() {
        let wp = WhitenedPosterior::init(3, 2, 1.0);
        assert_eq!(kl_u(&wp).unwrap(), 0.0);
        // scalar case: Σ0H = 2, Σ0X = ½ keeps the trace product at 1 and the logdets cancel
        let wp = WhitenedPosterior::new(
            DVector::from_element(1, 0.0),
            DMatrix::from_element(1, 1, 2f64.sqrt()),
            DMatrix::from_element(1, 1, 0.5f64.sqrt()),
        )
        .unwrap();
        let expected = 0.5 * (2.0 * 0.5 - 1.0 + 0.0 - 0.5f64.ln() - 2f64.ln());
        assert!((kl_u(&wp).unwrap() - expected).abs() < 1e-15);
        assert!(kl_u(&wp).unwrap().abs() < 1e-15);
    }

    #[test]
    fn kl_u_matches_dense_and_is_whitening_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(25);
        for _ in 0..10 {
            let wp = random_wp(3, 3, &mut rng);
            let s0 = wp.s0h().kronecker(&wp.s0x());
            let dense = kl_dense_gaussian(&wp.m0, &s0, &DMatrix::identity(9, 9)).unwrap();
            assert!((kl_u(&wp).unwrap() - dense).abs() < 1e-9);

            let (kh, kx, ip) = setup(1, 3, 3, &mut rng);
            let k = compute_kuu_with_jitter(&kh, &kx, &ip, 1e-6).unwrap();
            let (mu, s) = q_u_moments(&wp, &k).unwrap();
            let kd = k.terms()[0].dense();
            let unwhitened = kl_dense_gaussian(&mu, &s.dense(), &kd).unwrap();
            assert!((kl_u(&wp).unwrap() - unwhitened).abs() < 1e-8 * (1.0 + unwhitened));
        }
    }

    #[test]
    fn kl_u_gradient_matches_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(26);
        let wp = random_wp(2, 3, &mut rng);
        let (gm, gh, gx) = kl_u_grad(&wp);
        let h = 1e-6;
        for k in 0..6 {
            let mut p = wp.clone();
            let mut m = wp.clone();
            p.m0[k] += h;
            m.m0[k] -= h;
            let fd = (kl_u(&p).unwrap() - kl_u(&m).unwrap()) / (2.0 * h);
            assert!((fd - gm[k]).abs() < 1e-6);
        }
        let packed = tri_pack(&wp.l0h);
        let g = tri_pack_grad(&wp.l0h, &gh);
        for k in 0..packed.len() {
            let mut pp = packed.clone();
            pp[k] += h;
            let mut pm = packed.clone();
            pm[k] -= h;
            let mut a = wp.clone();
            a.l0h = tri_unpack(&pp, 2).unwrap();
            let mut b = wp.clone();
            b.l0h = tri_unpack(&pm, 2).unwrap();
            let fd = (kl_u(&a).unwrap() - kl_u(&b).unwrap()) / (2.0 * h);
            assert!((fd - g[k]).abs() < 1e-6 * (1.0 + fd.abs()), "{k}: {fd} vs {}", g[k]);
        }
        let packed = tri_pack(&wp.l0x);
        let g = tri_pack_grad(&wp.l0x, &gx);
        for k in 0..packed.len() {
            let mut pp = packed.clone();
            pp[k] += h;
            let mut pm = packed.clone();
            pm[k] -= h;
            let mut a = wp.clone();
            a.l0x = tri_unpack(&pp, 3).unwrap();
            let mut b = wp.clone();
            b.l0x = tri_unpack(&pm, 3).unwrap();
            let fd = (kl_u(&a).unwrap() - kl_u(&b).unwrap()) / (2.0 * h);
            assert!((fd - g[k]).abs() < 1e-6 * (1.0 + fd.abs()), "{k}: {fd} vs {}", g[k]);
        }
    }

    #[test]
    fn triangular_packing_round_trips() {
        let mut rng = ChaCha8Rng::seed_from_u64(27);
        let l = random_lower(4, &mut rng);
        let back = tri_unpack(&tri_pack(&l), 4).unwrap();
        assert!((back - l).amax() < 1e-15);
        assert!(tri_unpack(&[0.0; 5], 3).is_err());
    }

    #[test]
    fn init_places_points_in_the_data() {
        let mut rng = ChaCha8Rng::seed_from_u64(28);
        let data: Vec<Vec<f64>> = (0..10).map(|i| vec![i as f64]).collect();
        let refs: Vec<&[f64]> = data.iter().map(Vec::as_slice).collect();
        let ip = InducingPoints::init(&refs, 5, 2, 3, 2, None, &mut rng).unwrap();
        let mut xs: Vec<f64> = (0..5).map(|a| ip.x(a)[0]).collect();
        xs.sort_by(f64::total_cmp);
        xs.dedup();
        assert_eq!(xs.len(), 5);
        assert_eq!(ip.z_h.len(), 2 * 3 * 2);
    }
}
