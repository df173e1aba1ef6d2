//! Floating-point abstraction shared by every numeric routine in the crate.
//!
//! `Real` bundles the `num-traits`/`ndarray` bounds with the handful of
//! LAPACK-backed factorizations the optimizers need. The LAPACK calls are
//! routed through `ndarray-linalg` (the eigensolver calls the divide-and-conquer
//! driver directly), implemented once per concrete type so that
//! generic code never has to import that crate's own `Scalar` trait (whose
//! method names collide with `num_traits::Float`).

use ndarray::{Array1, Array2, Axis, NdFloat, ShapeBuilder};
use ndarray_linalg::{Cholesky, Diag, Factorize, Solve, SolveTriangular, UPLO};
use num_traits::{FloatConst, FromPrimitive, ToPrimitive};
use std::fmt::{Debug, Display};
use std::os::raw::c_char;

pub trait Real:
    NdFloat + FloatConst + FromPrimitive + ToPrimitive + Default + Debug + Display + Send + Sync + 'static
{
    /// Short name used in reports and CSV provenance.
    const NAME: &'static str;

    /// Converts an `f64` literal. Every finite `f64` is representable (with
    /// rounding) in both supported types.
    fn lit(x: f64) -> Self;

    fn to_f64_lossy(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }

    /// Symmetric eigendecomposition `a = v diag(w) vᵀ`, eigenvalues ascending.
    /// Only the lower triangle of `a` is read.
    fn eigh_sym(a: &Array2<Self>) -> Option<(Array1<Self>, Array2<Self>)>;

    /// Lower Cholesky factor, or `None` when `a` is not numerically positive definite.
    fn cholesky_lower(a: &Array2<Self>) -> Option<Array2<Self>>;

    /// Solves `l x = b` with `l` lower triangular.
    fn solve_lower(l: &Array2<Self>, b: &Array2<Self>) -> Option<Array2<Self>>;

    /// Solves `lᵀ x = b` with `l` lower triangular.
    fn solve_lower_transposed(l: &Array2<Self>, b: &Array2<Self>) -> Option<Array2<Self>>;

    /// LU solve of a general square system with a matrix right-hand side.
    fn solve_general(a: &Array2<Self>, b: &Array2<Self>) -> Option<Array2<Self>>;
}

macro_rules! impl_real {
    ($t:ty, $name:expr, $syevd:path) => {
        impl Real for $t {
            const NAME: &'static str = $name;

            #[inline]
            fn lit(x: f64) -> Self {
                x as $t
            }

            fn eigh_sym(a: &Array2<Self>) -> Option<(Array1<Self>, Array2<Self>)> {
                let n = a.nrows();
                if n != a.ncols() {
                    return None;
                }
                if n == 0 {
                    return Some((Array1::zeros(0), Array2::zeros((0, 0))));
                }
                // Row-major lower triangle is the column-major upper triangle.
                let mut buf: Vec<Self> = a.iter().copied().collect();
                let mut w = vec![0 as $t; n];
                let ni = n as i32;
                let (jobz, uplo) = (b'V' as c_char, b'U' as c_char);
                let mut info = 0;
                let mut wq = [0 as $t];
                let mut iwq = [0i32];
                unsafe {
                    $syevd(&jobz, &uplo, &ni, buf.as_mut_ptr(), &ni, w.as_mut_ptr(), wq.as_mut_ptr(), &-1, iwq.as_mut_ptr(), &-1, &mut info);
                }
                if info != 0 {
                    return None;
                }
                let lwork = wq[0] as i32;
                let liwork = iwq[0];
                let mut work = vec![0 as $t; lwork.max(1) as usize];
                let mut iwork = vec![0i32; liwork.max(1) as usize];
                unsafe {
                    $syevd(&jobz, &uplo, &ni, buf.as_mut_ptr(), &ni, w.as_mut_ptr(), work.as_mut_ptr(), &lwork, iwork.as_mut_ptr(), &liwork, &mut info);
                }
                if info != 0 {
                    return None;
                }
                let v = Array2::from_shape_vec((n, n).f(), buf).ok()?;
                Some((Array1::from(w), v))
            }

            fn cholesky_lower(a: &Array2<Self>) -> Option<Array2<Self>> {
                a.cholesky(UPLO::Lower).ok()
            }

            fn solve_lower(l: &Array2<Self>, b: &Array2<Self>) -> Option<Array2<Self>> {
                l.solve_triangular(UPLO::Lower, Diag::NonUnit, b).ok()
            }

            fn solve_lower_transposed(l: &Array2<Self>, b: &Array2<Self>) -> Option<Array2<Self>> {
                let u = l.t().to_owned();
                u.solve_triangular(UPLO::Upper, Diag::NonUnit, b).ok()
            }

            fn solve_general(a: &Array2<Self>, b: &Array2<Self>) -> Option<Array2<Self>> {
                let lu = a.factorize().ok()?;
                let mut out = Array2::zeros(b.raw_dim());
                for (j, col) in b.axis_iter(Axis(1)).enumerate() {
                    let x = lu.solve(&col.to_owned()).ok()?;
                    out.column_mut(j).assign(&x);
                }
                Some(out)
            }
        }
    };
}

impl_real!(f32, "f32", lapack_sys::ssyevd_);
impl_real!(f64, "f64", lapack_sys::dsyevd_);
