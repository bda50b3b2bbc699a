//! Small numeric helpers shared across the crate.

use nalgebra::{DMatrix, DVector};

/// log(sum(exp(xs))) with max-subtraction for stability.
pub fn logsumexp(xs: &[f64]) -> f64 {
    let m = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return m;
    }
    let s: f64 = xs.iter().map(|x| (x - m).exp()).sum();
    m + s.ln()
}

/// (M + M^T) / 2. Applied after every covariance predict/update to
/// suppress asymmetry drift.
pub fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

/// Moore-Penrose pseudo-inverse of a symmetric PSD matrix via its
/// eigendecomposition. Eigenvalues below `tol * max(1, lambda_max)` are
/// treated as zero. Needed for singular innovation covariances
/// (exact-channel observations with zero observation noise).
pub fn pinv_psd(m: &DMatrix<f64>, tol: f64) -> DMatrix<f64> {
    let n = m.nrows();
    let eig = nalgebra::SymmetricEigen::new(symmetrize(m));
    let lmax = eig.eigenvalues.iter().cloned().fold(0.0_f64, f64::max);
    let cut = tol * lmax.max(1.0);
    let mut inv = DMatrix::zeros(n, n);
    for (i, &l) in eig.eigenvalues.iter().enumerate() {
        if l > cut {
            let v = eig.eigenvectors.column(i);
            inv += v * v.transpose() / l;
        }
    }
    inv
}

/// Square root factor L of a symmetric PSD matrix, L * L^T = M, via
/// eigendecomposition with negative eigenvalues clamped to zero. Works
/// for rank-deficient covariances where Cholesky fails.
pub fn psd_sqrt(m: &DMatrix<f64>) -> DMatrix<f64> {
    let eig = nalgebra::SymmetricEigen::new(symmetrize(m));
    let n = m.nrows();
    let mut l = DMatrix::zeros(n, n);
    for (i, &lam) in eig.eigenvalues.iter().enumerate() {
        let s = lam.max(0.0).sqrt();
        l.column_mut(i).copy_from(&(eig.eigenvectors.column(i) * s));
    }
    l
}

/// Minimum eigenvalue of a symmetric matrix.
pub fn min_eigenvalue(m: &DMatrix<f64>) -> f64 {
    nalgebra::SymmetricEigen::new(symmetrize(m))
        .eigenvalues
        .iter()
        .cloned()
        .fold(f64::INFINITY, f64::min)
}

/// Column-major vectorization.
pub fn vec_of(m: &DMatrix<f64>) -> DVector<f64> {
    DVector::from_column_slice(m.as_slice())
}

/// Inverse of [`vec_of`].
pub fn unvec(v: &DVector<f64>, rows: usize, cols: usize) -> DMatrix<f64> {
    DMatrix::from_column_slice(rows, cols, v.as_slice())
}

/// Block-diagonal of two square matrices.
pub fn blk_diag(a: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    let (na, nb) = (a.nrows(), b.nrows());
    let mut m = DMatrix::zeros(na + nb, na + nb);
    m.view_mut((0, 0), (na, na)).copy_from(a);
    m.view_mut((na, na), (nb, nb)).copy_from(b);
    m
}

/// vec(blk(S, 0_{nu})) for an nx-by-nx matrix S, as used by the gradient
/// recursion's covariance terms.
pub fn vec_blk_upper(s: &DMatrix<f64>, nu: usize) -> DVector<f64> {
    vec_of(&blk_diag(s, &DMatrix::zeros(nu, nu)))
}

/// Dense table over the discrete index (t, d, x_s, u_o, u_s) holding a
/// fixed-length chunk of f64 per entry. Backs the tau, m3 and
/// discrete-gradient tables.
#[derive(Debug, Clone)]
pub struct DiscTable {
    data: Vec<f64>,
    pub n_t: usize,
    pub n_d: usize,
    pub n_xs: usize,
    pub n_uo: usize,
    pub n_us: usize,
    pub chunk: usize,
}

impl DiscTable {
    pub fn zeros(n_t: usize, n_d: usize, n_xs: usize, n_uo: usize, n_us: usize, chunk: usize) -> Self {
        Self {
            data: vec![0.0; n_t * n_d * n_xs * n_uo * n_us * chunk],
            n_t,
            n_d,
            n_xs,
            n_uo,
            n_us,
            chunk,
        }
    }

    #[inline]
    fn offset(&self, t: usize, d: usize, xs: usize, uo: usize, us: usize) -> usize {
        debug_assert!(t < self.n_t && d < self.n_d && xs < self.n_xs && uo < self.n_uo && us < self.n_us);
        ((((t * self.n_d + d) * self.n_xs + xs) * self.n_uo + uo) * self.n_us + us) * self.chunk
    }

    #[inline]
    pub fn get(&self, t: usize, d: usize, xs: usize, uo: usize, us: usize) -> &[f64] {
        let o = self.offset(t, d, xs, uo, us);
        &self.data[o..o + self.chunk]
    }

    #[inline]
    pub fn get_mut(&mut self, t: usize, d: usize, xs: usize, uo: usize, us: usize) -> &mut [f64] {
        let o = self.offset(t, d, xs, uo, us);
        &mut self.data[o..o + self.chunk]
    }

    /// Scalar accessor for chunk == 1 tables.
    #[inline]
    pub fn at(&self, t: usize, d: usize, xs: usize, uo: usize, us: usize) -> f64 {
        debug_assert_eq!(self.chunk, 1);
        self.data[self.offset(t, d, xs, uo, us)]
    }

    #[inline]
    pub fn set(&mut self, t: usize, d: usize, xs: usize, uo: usize, us: usize, v: f64) {
        debug_assert_eq!(self.chunk, 1);
        let o = self.offset(t, d, xs, uo, us);
        self.data[o] = v;
    }
}

/// splitmix64 mix of a base seed and a purpose tag; used to derive
/// independent RNG base seeds for the different stages of a pipeline.
pub fn derive_seed(base: u64, tag: u64) -> u64 {
    let mut z = base ^ tag.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Format a float with 17 significant digits; round-trips f64 exactly.
pub fn fmt_g17(x: f64) -> String {
    format!("{:.16e}", x)
}

/// Quantile of a sample with linear interpolation between order
/// statistics (the numpy default). `q` in [0, 1].
pub fn quantile(xs: &[f64], q: f64) -> f64 {
    assert!(!xs.is_empty(), "quantile of empty sample");
    let mut s = xs.to_vec();
    s.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let pos = q * (s.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    if lo == hi {
        s[lo]
    } else {
        s[lo] + (pos - lo as f64) * (s[hi] - s[lo])
    }
}

pub fn median(xs: &[f64]) -> f64 {
    quantile(xs, 0.5)
}
