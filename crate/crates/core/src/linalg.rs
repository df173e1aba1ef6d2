//! Symmetric positive semi-definite factors and their damped matrix powers.
//!
//! Curvature factors are almost always low rank: `A = h hᵀ / n` has rank at
//! most `n` while living in `M × M`. A [`Factor`] therefore keeps either a
//! thin square root `F` with `X = F Fᵀ` or the dense matrix. Damped powers
//! `(X + ρI)^{-p}` are evaluated from the eigendecomposition of the small Gram
//! matrix `FᵀF = Q Σ Qᵀ`:
//!
//! ```text
//! (X + ρI)^{-p} Y = ρ^{-p} Y + F Q diag(g(σ)) Qᵀ Fᵀ Y,
//! g(σ) = ((σ + ρ)^{-p} - ρ^{-p}) / σ
//! ```
//!
//! which is exact, never forms an `M × M` matrix, and agrees with the dense
//! eigendecomposition route used when the rank reaches the dimension. When
//! `Y = F C` lies in the span of the root (the activation factor applied to
//! the activations themselves), [`PowerOp::apply_span`] needs a single
//! `M`-sized product.

use crate::scalar::Real;
use ndarray::linalg::general_mat_mul;
use ndarray::{concatenate, Array1, Array2, ArrayView2, Axis, Zip};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LinalgError {
    #[error("matrix contains non-finite entries")]
    NonFinite,
    #[error("matrix is not symmetric (relative asymmetry {0:e})")]
    NotSymmetric(f64),
    #[error("damped factor is singular (rho = {rho:e}, smallest eigenvalue {lambda_min:e})")]
    Singular { rho: f64, lambda_min: f64 },
    #[error("negative damping {0:e}")]
    NegativeDamping(f64),
    #[error("{0} failed to converge")]
    Decomposition(&'static str),
    #[error("shape mismatch: {0}")]
    Shape(String),
}

/// Relative asymmetry `max |a_ij - a_ji| / max |a_ij|` (0 for the zero matrix).
pub fn asymmetry<T: Real>(a: &Array2<T>) -> f64 {
    let n = a.nrows();
    let mut scale = 0.0_f64;
    let mut worst = 0.0_f64;
    for i in 0..n {
        for j in 0..n {
            let x = a[[i, j]].to_f64_lossy();
            scale = scale.max(x.abs());
            if j > i {
                worst = worst.max((x - a[[j, i]].to_f64_lossy()).abs());
            }
        }
    }
    if scale == 0.0 {
        0.0
    } else {
        worst / scale
    }
}

fn check_square_symmetric<T: Real>(s: &Array2<T>, tol: f64) -> Result<(), LinalgError> {
    if s.nrows() != s.ncols() {
        return Err(LinalgError::Shape(format!("expected a square matrix, got {:?}", s.shape())));
    }
    if s.iter().any(|x| !x.is_finite()) {
        return Err(LinalgError::NonFinite);
    }
    let asym = asymmetry(s);
    if asym > tol {
        return Err(LinalgError::NotSymmetric(asym));
    }
    Ok(())
}

/// `a b` into a fresh array through the blocked GEMM kernel.
pub fn matmul<T: Real>(a: &ArrayView2<T>, b: &ArrayView2<T>) -> Array2<T> {
    let mut c = Array2::zeros((a.nrows(), b.ncols()));
    general_mat_mul(T::one(), a, b, T::zero(), &mut c);
    c
}

fn eigh_clamped<T: Real>(s: &Array2<T>) -> Result<(Array1<T>, Array2<T>), LinalgError> {
    let (mut w, v) = T::eigh_sym(s).ok_or(LinalgError::Decomposition("symmetric eigendecomposition"))?;
    w.mapv_inplace(|x| x.max(T::zero()));
    Ok((w, v))
}

fn damped_pow<T: Real>(lambda: T, rho: T, p: T) -> T {
    (lambda + rho).powf(-p)
}

/// `(S + ρI)^{-p}` for symmetric PSD `S`.
///
/// Eigenvalues are clamped at zero before shifting by `ρ`. For `p = 1` with a
/// well-conditioned shifted matrix the inverse goes through Cholesky.
pub fn matrix_power<T: Real>(s: &Array2<T>, rho: T, p: T) -> Result<Array2<T>, LinalgError> {
    check_square_symmetric(s, 1e-8)?;
    if rho < T::zero() {
        return Err(LinalgError::NegativeDamping(rho.to_f64_lossy()));
    }
    let n = s.nrows();
    if p == T::zero() {
        return Ok(Array2::eye(n));
    }
    if p == T::one() && well_conditioned(s, rho) {
        let mut shifted = s.clone();
        shifted.diag_mut().mapv_inplace(|d| d + rho);
        if let Some(l) = T::cholesky_lower(&shifted) {
            let y = T::solve_lower(&l, &Array2::eye(n)).ok_or(LinalgError::Decomposition("triangular solve"))?;
            let x = T::solve_lower_transposed(&l, &y).ok_or(LinalgError::Decomposition("triangular solve"))?;
            return Ok(symmetrize(x));
        }
    }
    let (w, v) = eigh_clamped(s)?;
    check_nonsingular(&w, rho, p)?;
    let scale = w.mapv(|x| damped_pow(x, rho, p));
    Ok(symmetrize(scale_cols_then_mul(&v, &scale, &v)))
}

/// Cheap sufficient test: the damping dominates round-off of the diagonal.
fn well_conditioned<T: Real>(s: &Array2<T>, rho: T) -> bool {
    let diag_max = s.diag().iter().fold(T::zero(), |m, &d| m.max(d.abs()));
    rho > T::zero() && rho >= T::lit(1e-8) * diag_max
}

fn check_nonsingular<T: Real>(w: &Array1<T>, rho: T, p: T) -> Result<(), LinalgError> {
    let min = w.iter().fold(T::infinity(), |m, &x| m.min(x));
    if p > T::zero() && !(min + rho > T::zero()) {
        return Err(LinalgError::Singular { rho: rho.to_f64_lossy(), lambda_min: min.to_f64_lossy() });
    }
    Ok(())
}

fn symmetrize<T: Real>(x: Array2<T>) -> Array2<T> {
    let half = T::lit(0.5);
    let t = x.t().to_owned();
    (x + &t) * half
}

/// `a diag(d) bᵀ`.
fn scale_cols_then_mul<T: Real>(a: &Array2<T>, d: &Array1<T>, b: &Array2<T>) -> Array2<T> {
    let mut scaled = a.clone();
    Zip::from(scaled.columns_mut()).and(d).for_each(|mut col, &s| col *= s);
    matmul(&scaled.view(), &b.t())
}

/// Largest, mean, and smallest eigenvalue together with the exact trace.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Spectrum {
    pub lam_max: f64,
    pub lam_mean: f64,
    pub lam_min: f64,
    pub trace: f64,
}

/// A symmetric PSD matrix stored either densely or through a thin square root.
#[derive(Debug, Clone, PartialEq)]
pub enum Factor<T> {
    /// `X = F Fᵀ` with `F` of shape `dim × rank`.
    Thin(Array2<T>),
    Dense(Array2<T>),
}

impl<T: Real> Factor<T> {
    pub fn dim(&self) -> usize {
        match self {
            Factor::Thin(f) => f.nrows(),
            Factor::Dense(x) => x.nrows(),
        }
    }

    /// Number of stored columns for thin factors, the dimension otherwise.
    pub fn stored_rank(&self) -> usize {
        match self {
            Factor::Thin(f) => f.ncols(),
            Factor::Dense(x) => x.nrows(),
        }
    }

    /// Builds `X = F Fᵀ`, switching to dense storage when `F` is not thin.
    pub fn from_root(f: Array2<T>) -> Self {
        if f.ncols() >= f.nrows() {
            Factor::Dense(matmul(&f.view(), &f.t()))
        } else {
            Factor::Thin(f)
        }
    }

    /// Sum of the diagonal, computed without forming the matrix.
    pub fn trace(&self) -> T {
        match self {
            Factor::Thin(f) => f.iter().fold(T::zero(), |s, &x| s + x * x),
            Factor::Dense(x) => x.diag().sum(),
        }
    }

    pub fn to_dense(&self) -> Array2<T> {
        match self {
            Factor::Thin(f) => matmul(&f.view(), &f.t()),
            Factor::Dense(x) => x.clone(),
        }
    }

    /// `α X` for `α ≥ 0`.
    pub fn scaled(&self, alpha: T) -> Self {
        match self {
            Factor::Thin(f) => Factor::Thin(f * alpha.sqrt()),
            Factor::Dense(x) => Factor::Dense(x * alpha),
        }
    }

    /// `X + Y`, concatenating square roots while the result stays thin.
    pub fn add(&self, other: &Factor<T>) -> Result<Self, LinalgError> {
        if self.dim() != other.dim() {
            return Err(LinalgError::Shape(format!("factor dims {} vs {}", self.dim(), other.dim())));
        }
        Ok(match (self, other) {
            (Factor::Thin(a), Factor::Thin(b)) if a.ncols() + b.ncols() < a.nrows() => {
                Factor::Thin(concatenate(Axis(1), &[a.view(), b.view()]).expect("row counts match"))
            }
            _ => {
                let mut x = self.to_dense();
                x += &other.to_dense();
                Factor::Dense(x)
            }
        })
    }

    /// Eigendecomposition in whichever form is cheaper.
    pub fn decompose(&self) -> Result<Decomposed<T>, LinalgError> {
        match self {
            Factor::Thin(f) => {
                if f.iter().any(|x| !x.is_finite()) {
                    return Err(LinalgError::NonFinite);
                }
                let gram = matmul(&f.t(), &f.view());
                let (sigma, q) = eigh_clamped(&gram)?;
                Ok(Decomposed {
                    dim: f.nrows(),
                    trace: self.trace(),
                    kind: DecompKind::Thin { root: f.clone(), gram, sigma, q },
                })
            }
            Factor::Dense(x) => {
                check_square_symmetric(x, 1e-8)?;
                let (w, v) = eigh_clamped(x)?;
                Ok(Decomposed { dim: x.nrows(), trace: self.trace(), kind: DecompKind::Dense { matrix: x.clone(), w, v } })
            }
        }
    }
}

#[derive(Debug, Clone)]
enum DecompKind<T> {
    /// `FᵀF = Q diag(σ) Qᵀ`; the nonzero eigenvalues of `X = F Fᵀ` are `σ`.
    Thin { root: Array2<T>, gram: Array2<T>, sigma: Array1<T>, q: Array2<T> },
    Dense { matrix: Array2<T>, w: Array1<T>, v: Array2<T> },
}

/// Spectral data of a factor, ready to produce damped powers.
#[derive(Debug, Clone)]
pub struct Decomposed<T> {
    dim: usize,
    trace: T,
    kind: DecompKind<T>,
}

impl<T: Real> Decomposed<T> {
    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn spectrum(&self) -> Spectrum {
        let (max, min) = match &self.kind {
            DecompKind::Thin { sigma, .. } => {
                let max = sigma.iter().fold(T::zero(), |m, &x| m.max(x));
                let min = if sigma.len() < self.dim {
                    T::zero()
                } else {
                    sigma.iter().fold(T::infinity(), |m, &x| m.min(x))
                };
                (max, min)
            }
            DecompKind::Dense { w, .. } => (w[w.len() - 1], w[0]),
        };
        let trace = self.trace.to_f64_lossy();
        Spectrum { lam_max: max.to_f64_lossy(), lam_mean: trace / self.dim as f64, lam_min: min.to_f64_lossy(), trace }
    }

    /// The operator `Y ↦ (X + ρI)^{-p} Y`.
    pub fn power(&self, rho: T, p: T) -> Result<PowerOp<T>, LinalgError> {
        if rho < T::zero() || !rho.is_finite() {
            return Err(LinalgError::NegativeDamping(rho.to_f64_lossy()));
        }
        if p == T::zero() {
            return Ok(PowerOp::Identity);
        }
        match &self.kind {
            DecompKind::Thin { root, gram, sigma, q } => {
                if rho == T::zero() && (sigma.len() < self.dim || sigma.iter().any(|&s| s <= T::zero())) {
                    return Err(LinalgError::Singular { rho: 0.0, lambda_min: 0.0 });
                }
                let base = if rho == T::zero() { T::zero() } else { rho.powf(-p) };
                let g = sigma.mapv(|s| thin_gain(s, rho, p));
                let core = scale_cols_then_mul(q, &g, q);
                Ok(PowerOp::LowRank { base, root: root.clone(), gram: gram.clone(), core })
            }
            DecompKind::Dense { matrix, w, v } => {
                check_nonsingular(w, rho, p)?;
                let lo = w[0] + rho;
                let hi = w[w.len() - 1] + rho;
                if p == T::one() && hi / lo < T::lit(1e8) {
                    let mut shifted = matrix.clone();
                    shifted.diag_mut().mapv_inplace(|d| d + rho);
                    if let Some(l) = T::cholesky_lower(&shifted) {
                        return Ok(PowerOp::Cholesky(l));
                    }
                }
                let scale = w.mapv(|x| damped_pow(x, rho, p));
                Ok(PowerOp::Eigen { v: v.clone(), scale })
            }
        }
    }
}

/// `((σ + ρ)^{-p} - ρ^{-p}) / σ`. The `expm1`/`ln_1p` form keeps full relative
/// accuracy when σ is small against ρ.
fn thin_gain<T: Real>(sigma: T, rho: T, p: T) -> T {
    if sigma <= T::zero() {
        return T::zero();
    }
    if rho == T::zero() {
        return (sigma.powf(-p)) / sigma;
    }
    let x = sigma / rho;
    rho.powf(-p) * (-p * x.ln_1p()).exp_m1() / sigma
}

/// A damped matrix power ready to apply.
#[derive(Debug, Clone)]
pub enum PowerOp<T> {
    Identity,
    /// `base · Y + F core Fᵀ Y` with `core = Q diag(g) Qᵀ`.
    LowRank { base: T, root: Array2<T>, gram: Array2<T>, core: Array2<T> },
    /// Lower Cholesky factor of `X + ρI` (power −1).
    Cholesky(Array2<T>),
    /// `v diag(scale) vᵀ`.
    Eigen { v: Array2<T>, scale: Array1<T> },
}

impl<T: Real> PowerOp<T> {
    pub fn apply(&self, y: &Array2<T>) -> Array2<T> {
        match self {
            PowerOp::Identity => y.clone(),
            PowerOp::LowRank { base, root, core, .. } => {
                let proj = matmul(&root.t(), &y.view());
                let coef = matmul(&core.view(), &proj.view());
                let mut out = y * *base;
                general_mat_mul(T::one(), root, &coef, T::one(), &mut out);
                out
            }
            PowerOp::Cholesky(l) => {
                let z = T::solve_lower(l, y).expect("triangular solve with a nonsingular factor");
                T::solve_lower_transposed(l, &z).expect("triangular solve with a nonsingular factor")
            }
            PowerOp::Eigen { v, scale } => {
                let mut coef = matmul(&v.t(), &y.view());
                Zip::from(coef.rows_mut()).and(scale).for_each(|mut row, &g| row *= g);
                matmul(&v.view(), &coef.view())
            }
        }
    }

    /// Applies the operator to `Y = root · c`, where `root` is the square root
    /// the operator was built from (any root for the dense variants).
    pub fn apply_span(&self, root: &Array2<T>, c: &Array2<T>) -> Array2<T> {
        match self {
            PowerOp::LowRank { base, root: own, gram, core } => {
                debug_assert_eq!(own.shape(), root.shape());
                let mut inner = c * *base;
                let gc = matmul(&gram.view(), &c.view());
                general_mat_mul(T::one(), core, &gc, T::one(), &mut inner);
                matmul(&own.view(), &inner.view())
            }
            _ => self.apply(&matmul(&root.view(), &c.view())),
        }
    }

    pub fn is_identity(&self) -> bool {
        matches!(self, PowerOp::Identity)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::array;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn gaussian(rows: usize, cols: usize, seed: u64) -> Array2<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array2::from_shape_fn((rows, cols), |_| StandardNormal.sample(&mut rng))
    }

    #[test]
    fn diagonal_inverse() {
        let s = array![[3.0, 0.0], [0.0, 1.0]];
        let p = matrix_power(&s, 1.0, 1.0).unwrap();
        assert_abs_diff_eq!(p, array![[0.25, 0.0], [0.0, 0.5]], epsilon = 1e-15);
    }

    #[test]
    fn quarter_root_of_scaled_identity() {
        let s = Array2::<f64>::eye(4) * 15.0;
        let p = matrix_power(&s, 1.0, 0.25).unwrap();
        assert_abs_diff_eq!(p, Array2::eye(4) * 0.5, epsilon = 1e-14);
    }

    #[test]
    fn inverse_multiplies_back_to_identity() {
        let f = gaussian(6, 6, 3);
        let s = f.dot(&f.t());
        let p = matrix_power(&s, 0.5, 1.0).unwrap();
        let mut shifted = s.clone();
        shifted.diag_mut().mapv_inplace(|d| d + 0.5);
        assert_abs_diff_eq!(p.dot(&shifted), Array2::eye(6), epsilon = 1e-10);
    }

    #[test]
    fn eigen_and_cholesky_routes_agree() {
        let f = gaussian(5, 5, 4);
        let s = f.dot(&f.t());
        let chol = matrix_power(&s, 0.3, 1.0).unwrap();
        let (w, v) = f64::eigh_sym(&s).unwrap();
        let eig = v.dot(&Array2::from_diag(&w.mapv(|x| 1.0 / (x + 0.3)))).dot(&v.t());
        assert_abs_diff_eq!(chol, eig, epsilon = 1e-10);
    }

    #[test]
    fn rejects_bad_input() {
        let s = array![[1.0, 2.0], [0.0, 1.0]];
        assert!(matches!(matrix_power(&s, 1.0, 1.0), Err(LinalgError::NotSymmetric(_))));
        let nan = array![[f64::NAN, 0.0], [0.0, 1.0]];
        assert_eq!(matrix_power(&nan, 1.0, 1.0), Err(LinalgError::NonFinite));
        let singular = array![[1.0, 0.0], [0.0, 0.0]];
        assert!(matches!(matrix_power(&singular, 0.0, 1.0), Err(LinalgError::Singular { .. })));
    }

    #[test]
    fn zero_power_is_identity() {
        let s = array![[2.0, 1.0], [1.0, 2.0]];
        assert_eq!(matrix_power(&s, 0.0, 0.0).unwrap(), Array2::<f64>::eye(2));
    }

    #[test]
    fn thin_power_matches_dense() {
        for &p in &[1.0, 0.5, 0.25] {
            let f = gaussian(20, 4, 11);
            let y = gaussian(20, 3, 12);
            let thin = Factor::Thin(f.clone()).decompose().unwrap().power(0.7, p).unwrap().apply(&y);
            let dense = matrix_power(&f.dot(&f.t()), 0.7, p).unwrap().dot(&y);
            assert_abs_diff_eq!(thin, dense, epsilon = 1e-11);
        }
    }

    #[test]
    fn span_application_matches_generic() {
        let f = gaussian(30, 5, 21);
        let c = gaussian(5, 4, 22);
        for factor in [Factor::Thin(f.clone()), Factor::Dense(f.dot(&f.t()))] {
            let op = factor.decompose().unwrap().power(0.3, 0.5).unwrap();
            let span = op.apply_span(&f, &c);
            let generic = op.apply(&f.dot(&c));
            assert_abs_diff_eq!(span, generic, epsilon = 1e-11);
        }
    }

    #[test]
    fn thin_spectrum_matches_dense() {
        let f = gaussian(10, 3, 5);
        let thin = Factor::Thin(f.clone()).decompose().unwrap().spectrum();
        let dense = Factor::Dense(f.dot(&f.t())).decompose().unwrap().spectrum();
        assert!((thin.lam_max - dense.lam_max).abs() < 1e-10);
        assert!((thin.trace - dense.trace).abs() < 1e-10);
        assert_eq!(thin.lam_min, 0.0);
        assert!(dense.lam_min.abs() < 1e-10);
    }

    #[test]
    fn thin_zero_damping_is_singular() {
        let f = gaussian(10, 3, 5);
        let d = Factor::Thin(f).decompose().unwrap();
        assert!(matches!(d.power(0.0, 1.0), Err(LinalgError::Singular { .. })));
    }

    #[test]
    fn add_densifies_when_rank_reaches_dim() {
        let a = Factor::Thin(gaussian(4, 2, 1));
        let b = Factor::Thin(gaussian(4, 1, 2));
        let c = a.add(&b).unwrap();
        assert!(matches!(c, Factor::Thin(_)));
        let d = c.add(&b).unwrap();
        assert!(matches!(d, Factor::Dense(_)));
        assert_abs_diff_eq!(d.to_dense(), a.to_dense() + b.to_dense() * 2.0, epsilon = 1e-12);
    }

    proptest::proptest! {
        #[test]
        fn powers_stay_symmetric(seed in 0u64..1000, rho in 0.01f64..10.0, pi in 0usize..3) {
            let p = [1.0, 0.5, 0.25][pi];
            let f = gaussian(5, 3, seed);
            let x = matrix_power(&f.dot(&f.t()), rho, p).unwrap();
            proptest::prop_assert!(asymmetry(&x) < 1e-12);
            let (w, _) = f64::eigh_sym(&x).unwrap();
            proptest::prop_assert!(w[0] > 0.0);
        }
    }
}
