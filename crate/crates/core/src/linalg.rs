//! Dense linear-algebra helpers shared by the solvers.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

/// Thin SVD with singular values sorted in descending order.
pub struct ThinSvd {
    pub u: DMatrix<f64>,
    pub singular_values: DVector<f64>,
    pub v_t: DMatrix<f64>,
}

impl ThinSvd {
    pub fn new(m: &DMatrix<f64>) -> Self {
        let k = m.nrows().min(m.ncols());
        if k == 0 {
            return Self {
                u: DMatrix::zeros(m.nrows(), 0),
                singular_values: DVector::zeros(0),
                v_t: DMatrix::zeros(0, m.ncols()),
            };
        }
        // nalgebra's bidiagonal SVD loses accuracy on some rank-deficient
        // inputs, so the factorization is delegated to faer
        let fm = faer::Mat::<f64>::from_fn(m.nrows(), m.ncols(), |i, j| m[(i, j)]);
        let (u, sv, v_t) = match fm.thin_svd() {
            Ok(svd) => {
                let (fu, fs, fv) = (svd.U(), svd.S(), svd.V());
                (
                    DMatrix::from_fn(m.nrows(), k, |i, j| fu[(i, j)]),
                    DVector::from_fn(k, |i, _| fs[i]),
                    DMatrix::from_fn(k, m.ncols(), |i, j| fv[(j, i)]),
                )
            }
            Err(_) => {
                let svd = m.clone().svd(true, true);
                (svd.u.expect("u requested"), svd.singular_values, svd.v_t.expect("v_t requested"))
            }
        };
        let mut order: Vec<usize> = (0..k).collect();
        order.sort_by(|&a, &b| sv[b].total_cmp(&sv[a]));
        let mut su = DMatrix::zeros(m.nrows(), k);
        let mut svt = DMatrix::zeros(k, m.ncols());
        let mut s = DVector::zeros(k);
        for (dst, &src) in order.iter().enumerate() {
            su.set_column(dst, &u.column(src));
            svt.set_row(dst, &v_t.row(src));
            s[dst] = sv[src];
        }
        Self {
            u: su,
            singular_values: s,
            v_t: svt,
        }
    }

    pub fn largest(&self) -> f64 {
        self.singular_values.iter().copied().fold(0.0, f64::max)
    }

    /// Number of singular values above `rel * sigma_max`.
    pub fn rank(&self, rel: f64) -> usize {
        let cut = rel * self.largest();
        self.singular_values.iter().filter(|&&s| s > cut).count()
    }

    /// Best rank-`k` approximation `U_k Σ_k V_kᵀ`.
    pub fn truncate(&self, k: usize) -> DMatrix<f64> {
        let k = k.min(self.singular_values.len());
        let uk = self.u.columns(0, k);
        let vk = self.v_t.rows(0, k);
        let mut scaled = uk.clone_owned();
        for j in 0..k {
            scaled.column_mut(j).scale_mut(self.singular_values[j]);
        }
        scaled * vk
    }
}

/// Default pseudoinverse cutoff relative to the largest singular value.
pub fn default_cutoff(rows: usize, cols: usize) -> f64 {
    rows.max(cols).max(1) as f64 * f64::EPSILON
}

/// Moore–Penrose pseudoinverse; singular values at or below
/// `max(dim)·eps·σ_max` are treated as zero. Returns the pseudoinverse and the
/// numerical rank.
pub fn pinv(m: &DMatrix<f64>) -> (DMatrix<f64>, usize) {
    let svd = ThinSvd::new(m);
    let cut = default_cutoff(m.nrows(), m.ncols()) * svd.largest();
    let mut out = DMatrix::zeros(m.ncols(), m.nrows());
    let mut rank = 0;
    for j in 0..svd.singular_values.len() {
        let s = svd.singular_values[j];
        if s > cut && s > 0.0 {
            rank += 1;
            out += (svd.v_t.row(j).transpose() / s) * svd.u.column(j).transpose();
        }
    }
    (out, rank)
}

/// Minimum-norm solution of a symmetric positive semidefinite system
/// `G x = b` by eigendecomposition. Eigenvalues at or below `rel·λ_max` are
/// dropped. Returns the solution and the number of retained eigenvalues.
pub fn pinv_solve_psd(g: &DMatrix<f64>, b: &DVector<f64>, rel: f64) -> (DVector<f64>, usize) {
    let n = g.nrows();
    if n == 0 {
        return (DVector::zeros(0), 0);
    }
    let eig = SymmetricEigen::new(g.clone());
    let lmax = eig.eigenvalues.iter().copied().fold(0.0, f64::max);
    pinv_apply_eigen(&eig, b, rel * lmax)
}

pub(crate) fn pinv_apply_eigen(
    eig: &SymmetricEigen<f64, nalgebra::Dyn>,
    b: &DVector<f64>,
    cut: f64,
) -> (DVector<f64>, usize) {
    let mut x = DVector::zeros(b.len());
    let mut rank = 0;
    for j in 0..eig.eigenvalues.len() {
        let l = eig.eigenvalues[j];
        if l > cut && l > 0.0 {
            rank += 1;
            let v = eig.eigenvectors.column(j);
            let coef = v.dot(b) / l;
            x.axpy(coef, &v, 1.0);
        }
    }
    (x, rank)
}

/// Solves a small symmetric positive definite system, refusing when the
/// 2-norm condition number exceeds `max_condition`.
pub fn solve_spd(
    g: &DMatrix<f64>,
    b: &DVector<f64>,
    max_condition: f64,
) -> Result<DVector<f64>, f64> {
    let eig = SymmetricEigen::new(g.clone());
    let lmax = eig.eigenvalues.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lmin = eig.eigenvalues.iter().copied().fold(f64::INFINITY, f64::min);
    if !(lmax > 0.0) || !(lmin > 0.0) {
        return Err(f64::INFINITY);
    }
    let cond = lmax / lmin;
    if !(cond < max_condition) {
        return Err(cond);
    }
    match g.clone().cholesky() {
        Some(ch) => Ok(ch.solve(b)),
        None => Ok(pinv_apply_eigen(&eig, b, 0.0).0),
    }
}

/// Numerical rank with cutoff `rel·σ_max`.
pub fn rank(m: &DMatrix<f64>, rel: f64) -> usize {
    if m.nrows() == 0 || m.ncols() == 0 {
        return 0;
    }
    ThinSvd::new(m).rank(rel)
}

/// Orthonormal basis of the column span (numerical rank with `rel` cutoff).
pub fn orthonormal_basis(m: &DMatrix<f64>, rel: f64) -> DMatrix<f64> {
    let svd = ThinSvd::new(m);
    let r = svd.rank(rel);
    svd.u.columns(0, r).clone_owned()
}

/// Principal angles (radians, ascending) between the column spans of `a` and
/// `b`. Computed from sines so that small angles keep full precision.
pub fn principal_angles(a: &DMatrix<f64>, b: &DMatrix<f64>) -> Vec<f64> {
    let qa = orthonormal_basis(a, 1e-12);
    let qb = orthonormal_basis(b, 1e-12);
    if qa.ncols() == 0 || qb.ncols() == 0 {
        return Vec::new();
    }
    // put the smaller subspace second so that every angle is defined
    let (big, small) = if qa.ncols() >= qb.ncols() { (qa, qb) } else { (qb, qa) };
    let resid = &small - &big * (big.transpose() * &small);
    let svd = ThinSvd::new(&resid);
    let mut angles: Vec<f64> = svd
        .singular_values
        .iter()
        .map(|s| s.clamp(0.0, 1.0).asin())
        .collect();
    angles.resize(small.ncols(), 0.0);
    angles.sort_by(f64::total_cmp);
    angles
}

/// Largest principal angle, or π/2 when the spans have different dimension.
pub fn max_principal_angle(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    let ra = rank(a, 1e-12);
    let rb = rank(b, 1e-12);
    if ra != rb {
        return std::f64::consts::FRAC_PI_2;
    }
    principal_angles(a, b).last().copied().unwrap_or(0.0)
}

/// Kronecker product `a ⊗ b`.
pub fn kron(a: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    let (ar, ac) = a.shape();
    let (br, bc) = b.shape();
    let mut out = DMatrix::zeros(ar * br, ac * bc);
    for j in 0..ac {
        for i in 0..ar {
            let aij = a[(i, j)];
            if aij != 0.0 {
                out.view_mut((i * br, j * bc), (br, bc)).copy_from(&(b * aij));
            }
        }
    }
    out
}

/// Largest absolute entry.
pub fn max_abs(m: &DMatrix<f64>) -> f64 {
    m.iter().fold(0.0, |acc, v| acc.max(v.abs()))
}
