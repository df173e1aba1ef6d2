//! Measurements: coordinate sizes, log-log slopes, the one-step NNGP
//! reference, spectra and relative weight distance.

use crate::linalg::{Factor, LinalgError, Spectrum};
use crate::network::{NetworkError, Tape, Weights};
use crate::scalar::Real;
use ndarray::{Array2, ArrayBase, Data, Dimension};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DiagError {
    #[error("coordinate size of an empty vector")]
    Empty,
    #[error("slope fit needs at least two points, got {0}")]
    TooFewPoints(usize),
    #[error("slope fit needs positive values, got {value} at M = {width}")]
    NonPositive { width: f64, value: f64 },
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error(transparent)]
    Linalg(#[from] LinalgError),
    #[error(transparent)]
    Network(#[from] NetworkError),
}

/// `sqrt(‖v‖² / len)`. For an `M × n` batch of vectors this is the
/// root-mean-square over all entries, i.e. the per-sample coordinate size
/// averaged in the square.
pub fn coord_size<T: Real, S: Data<Elem = T>, D: Dimension>(v: &ArrayBase<S, D>) -> Result<f64, DiagError> {
    if v.is_empty() {
        return Err(DiagError::Empty);
    }
    let ss = v.iter().fold(0.0_f64, |s, &x| {
        let x = x.to_f64_lossy();
        s + x * x
    });
    Ok((ss / v.len() as f64).sqrt())
}

/// Least squares on `(log₂ M, log₂ value)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SlopeFit {
    pub slope: f64,
    pub intercept: f64,
    /// Root-mean-square residual in log₂ units.
    pub residual: f64,
}

pub fn slope_fit(points: &[(f64, f64)]) -> Result<SlopeFit, DiagError> {
    if points.len() < 2 {
        return Err(DiagError::TooFewPoints(points.len()));
    }
    for &(width, value) in points {
        if !(value > 0.0 && value.is_finite()) || !(width > 0.0) {
            return Err(DiagError::NonPositive { width, value });
        }
    }
    let xs: Vec<f64> = points.iter().map(|p| p.0.log2()).collect();
    let ys: Vec<f64> = points.iter().map(|p| p.1.log2()).collect();
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxx: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
    let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    if sxx == 0.0 {
        return Err(DiagError::TooFewPoints(1));
    }
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let rss: f64 = xs.iter().zip(&ys).map(|(x, y)| (y - intercept - slope * x).powi(2)).sum();
    Ok(SlopeFit { slope, intercept, residual: (rss / n).sqrt() })
}

/// Per-layer coordinate sizes of one run at one probe step.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct CoordProfile {
    pub width: usize,
    pub label: String,
    pub step: usize,
    /// `coord(h_{l,t} − h_{l,0})` for `l = 1..L`, the last entry being the output.
    pub delta_h: Vec<f64>,
    /// `coord(ΔW_l h_{l−1})` of the step that produced this probe, when recorded.
    pub delta_wh: Vec<f64>,
}

/// `coord(h_{l,t} − h_{l,0})` for every hidden layer and the output.
pub fn delta_h_profile<T: Real>(now: &Tape<T>, reference: &Tape<T>) -> Result<Vec<f64>, DiagError> {
    if now.depth() != reference.depth() {
        return Err(DiagError::Shape(format!("depth {} vs {}", now.depth(), reference.depth())));
    }
    let mut out = Vec::with_capacity(now.depth());
    let pairs = now.h.iter().zip(&reference.h).skip(1).chain(std::iter::once((now.output(), reference.output())));
    for (a, b) in pairs {
        if a.shape() != b.shape() {
            return Err(DiagError::Shape(format!("{:?} vs {:?}", a.shape(), b.shape())));
        }
        out.push(coord_size(&(a - b))?);
    }
    Ok(out)
}

/// Kernel-ridge output weights `η · y (hᵀ/n) (h hᵀ/n + ρ I)^{-1}`, shape `C × M`.
///
/// This is what one K-FAC step from a zero output layer produces with the
/// crate's gradient convention (objective `½ · MSE`, `1/n` averaging). The
/// caller folds the output-side factor into `eta`: with `B = I/C` for the
/// output layer, `eta = η · mult² / (1/C + ρ_B)`.
pub fn nngp_reference<T: Real>(h: &Array2<T>, y: &Array2<T>, rho: T, eta: T) -> Result<Array2<T>, DiagError> {
    if h.ncols() != y.ncols() {
        return Err(DiagError::Shape(format!("h has {} samples, y has {}", h.ncols(), y.ncols())));
    }
    let n = T::lit(h.ncols() as f64);
    let mut gram = h.dot(&h.t()) / n;
    gram.diag_mut().mapv_inplace(|d| d + rho);
    // (h hᵀ/n + ρ)^{-1} is symmetric, so solve against (y hᵀ/n)ᵀ.
    let rhs = h.dot(&y.t()) / n;
    let sol = T::solve_general(&gram, &rhs).ok_or(LinalgError::Singular { rho: rho.to_f64_lossy(), lambda_min: f64::NAN })?;
    Ok(sol.t().mapv(|x| x * eta))
}

/// `‖W_t − W_0‖_F / ‖W_0‖_F` per layer; `None` where `W_0 = 0`.
pub fn relative_weight_distance<T: Real>(now: &Weights<T>, init: &Weights<T>) -> Result<Vec<Option<f64>>, DiagError> {
    if now.depth() != init.depth() {
        return Err(DiagError::Shape(format!("depth {} vs {}", now.depth(), init.depth())));
    }
    now.layers
        .iter()
        .zip(&init.layers)
        .map(|(a, b)| {
            if a.w.shape() != b.w.shape() {
                return Err(DiagError::Shape(format!("{:?} vs {:?}", a.w.shape(), b.w.shape())));
            }
            let norm = |x: &Array2<T>| x.iter().fold(0.0_f64, |s, &v| s + v.to_f64_lossy().powi(2)).sqrt();
            let den = norm(&b.w);
            Ok(if den == 0.0 { None } else { Some(norm(&(&a.w - &b.w)) / den) })
        })
        .collect()
}

/// `(λ_max, λ_mean, trace)` and `λ_min` of a symmetric matrix.
pub fn spectrum_summary<T: Real>(x: &Array2<T>) -> Result<Spectrum, DiagError> {
    Ok(Factor::Dense(x.clone()).decompose()?.spectrum())
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{array, Array1};
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    #[test]
    fn coord_size_basics() {
        assert_eq!(coord_size(&Array1::<f64>::ones(37)).unwrap(), 1.0);
        assert_eq!(coord_size(&Array1::<f64>::zeros(5)).unwrap(), 0.0);
        assert_eq!(coord_size(&Array1::<f64>::zeros(0)), Err(DiagError::Empty));
    }

    #[test]
    fn gaussian_coord_size_is_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let v: Array1<f64> = Array1::from_shape_fn(10_000, |_| StandardNormal.sample(&mut rng));
        let c: f64 = coord_size(&v).unwrap();
        assert!((c - 1.0).abs() < 0.05, "{c}");
    }

    #[test]
    fn slope_of_power_laws() {
        let ws = [128.0, 512.0, 2048.0, 8192.0];
        let flat: Vec<_> = ws.iter().map(|&m| (m, 3.0)).collect();
        assert!(slope_fit(&flat).unwrap().slope.abs() < 1e-12);
        let inv: Vec<_> = ws.iter().map(|&m| (m, 5.0 / m)).collect();
        assert!((slope_fit(&inv).unwrap().slope + 1.0).abs() < 1e-12);
        assert!(slope_fit(&[(1.0, 1.0)]).is_err());
        assert!(matches!(slope_fit(&[(1.0, 1.0), (2.0, 0.0)]), Err(DiagError::NonPositive { .. })));
    }

    #[test]
    fn noisy_sqrt_slope() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..20 {
            let pts: Vec<_> = [128.0, 512.0, 2048.0, 8192.0_f64]
                .iter()
                .map(|&m| {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    (m, 2.0 * m.sqrt() * (1.0 + 0.01 * z))
                })
                .collect();
            assert!((slope_fit(&pts).unwrap().slope - 0.5).abs() < 0.05);
        }
    }

    #[test]
    fn nngp_hand_case() {
        let h: Array2<f64> = array![[1.0], [0.0]];
        let w = nngp_reference(&h, &array![[2.0]], 1.0, 1.0).unwrap();
        assert!((w[[0, 0]] - 1.0).abs() < 1e-15 && w[[0, 1]] == 0.0);
        let zero = nngp_reference(&h, &array![[0.0]], 1.0, 1.0).unwrap();
        assert!(zero.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn spectrum_examples() {
        let s = spectrum_summary(&Array2::<f64>::eye(6)).unwrap();
        assert!((s.lam_max - 1.0).abs() < 1e-14 && (s.lam_mean - 1.0).abs() < 1e-14 && s.trace == 6.0);
        let d = spectrum_summary(&Array2::from_diag(&array![1.0, 2.0, 3.0, 4.0])).unwrap();
        assert!((d.lam_max - 4.0).abs() < 1e-14);
        assert_eq!((d.lam_mean, d.trace), (2.5, 10.0));
        assert!(spectrum_summary(&array![[1.0, 2.0], [0.0, 1.0]]).is_err());
    }

    #[test]
    fn trace_equals_eigenvalue_sum() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let f = Array2::from_shape_fn((7, 7), |_| StandardNormal.sample(&mut rng));
        let x: Array2<f64> = f.dot(&f.t());
        let (w, _) = f64::eigh_sym(&x).unwrap();
        assert!((spectrum_summary(&x).unwrap().trace - w.sum()).abs() < 1e-10);
    }

    proptest! {
        #[test]
        fn coord_size_is_homogeneous(v in proptest::collection::vec(-1e3f64..1e3, 1..50), alpha in -8i32..8) {
            // Powers of two keep the scaling exact in floating point.
            let a = 2f64.powi(alpha);
            let v = Array1::from(v);
            let scaled = &v * a;
            prop_assert_eq!(coord_size(&scaled).unwrap(), a.abs() * coord_size(&v).unwrap());
        }
    }
}
