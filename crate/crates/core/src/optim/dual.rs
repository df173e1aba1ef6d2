//! Sample-space evaluations of the preconditioned directions.
//!
//! These are verification paths. Each one returns the effective-weight
//! direction `D` (so that `W ← W − η D`) computed through `n × n` (or
//! `nC × nC`) systems instead of the width-sized factors, and is compared
//! against the production path in the test suites.

use crate::linalg::{matmul, LinalgError};
use crate::network::{flatten_class_major, tile_columns, LossKind, NetworkError, Tape};
use crate::scalar::Real;
use ndarray::{s, Array1, Array2, Axis, Zip};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DualError {
    #[error(transparent)]
    Network(#[from] NetworkError),
    #[error(transparent)]
    Linalg(#[from] LinalgError),
    #[error("the sample-space form needs exponents 0 or 1, got {0}")]
    Exponent(f64),
    #[error("power series needs rho above the top eigenvalue: rho = {rho}, lambda_max = {lam}")]
    SeriesDiverges { rho: f64, lam: f64 },
    #[error("power series did not converge in {0} terms")]
    NoConvergence(usize),
}

fn solve<T: Real>(a: &Array2<T>, b: &Array2<T>) -> Result<Array2<T>, DualError> {
    T::solve_general(a, b).ok_or(DualError::Linalg(LinalgError::Singular { rho: f64::NAN, lambda_min: f64::NAN }))
}

fn shifted<T: Real>(mut a: Array2<T>, rho: T) -> Array2<T> {
    a.diag_mut().mapv_inplace(|d| d + rho);
    a
}

/// Selection matrix `W` with `δ^L = δ^f W`: entry `((k, i), i) = −χ_{k,i} / n`.
fn loss_selector<T: Real>(chi: &Array2<T>) -> Array2<T> {
    let (c, n) = chi.dim();
    let inv_n = T::one() / T::lit(n as f64);
    let mut w = Array2::zeros((n * c, n));
    for k in 0..c {
        for i in 0..n {
            w[[k * n + i, i]] = -chi[[k, i]] * inv_n;
        }
    }
    w
}

/// K-FAC direction through the push-through identity, for `e_A, e_B ∈ {0, 1}`.
///
/// Activation side: `(h hᵀ/n + ρ_A)^{-1} h = h (hᵀh/n + ρ_A)^{-1}`.
/// Output side under MSE: `(δ^f δ^fᵀ/(nC) + ρ_B)^{-1} δ^f W = δ^f (δ^fᵀ δ^f/(nC) + ρ_B)^{-1} W`.
/// Under cross-entropy the root `R` of `B` differs from `δ^f`, so the
/// output side goes through `(R Rᵀ + ρ)^{-1} = (I − R (ρ + RᵀR)^{-1} Rᵀ) / ρ`.
pub fn kfac_push_through<T: Real>(
    tape: &Tape<T>,
    layer: usize,
    e_a: f64,
    e_b: f64,
    rho_a: T,
    rho_b: T,
) -> Result<Array2<T>, DualError> {
    for e in [e_a, e_b] {
        if e != 0.0 && e != 1.0 {
            return Err(DualError::Exponent(e));
        }
    }
    let back = tape.backward_ref()?;
    let h = &tape.h[layer];
    let n = tape.n();
    let nf = T::lit(n as f64);

    let v = if e_a == 1.0 {
        let k = shifted(matmul(&h.t(), &h.view()) / nf, rho_a);
        let right = solve(&k, &Array2::eye(n))?;
        matmul(&h.view(), &right.view())
    } else {
        h.clone()
    };

    let delta = &back.delta_loss[layer];
    let u = if e_b == 1.0 {
        let d = back.delta_out.as_ref().ok_or(NetworkError::NoOutputSignals)?[layer].clone();
        match back.loss_kind {
            LossKind::Mse => {
                let c = back.chi.nrows();
                let k = shifted(matmul(&d.t(), &d.view()) / T::lit((n * c) as f64), rho_b);
                let w = loss_selector(&back.chi);
                let z = solve(&k, &w)?;
                matmul(&d.view(), &z.view())
            }
            LossKind::CrossEntropy => {
                let r = tape.output_factor_root(layer)?;
                let k = shifted(matmul(&r.t(), &r.view()), rho_b);
                let proj = matmul(&r.t(), &delta.view());
                let z = solve(&k, &proj)?;
                (delta - &matmul(&r.view(), &z.view())) / rho_b
            }
        }
    } else {
        delta.clone()
    };
    Ok(matmul(&u.view(), &v.t()))
}

/// Generalized binomial coefficient `binom(−p, k)` sequence.
fn binomial_neg<T: Real>(p: T, k: usize, prev: T) -> T {
    if k == 0 {
        T::one()
    } else {
        prev * (-p - T::lit((k - 1) as f64)) / T::lit(k as f64)
    }
}

/// `ρ^{-p} Σ_k binom(−p, k) (K / ρ)^k` for a square `K` whose spectral radius is below `ρ`.
fn series<T: Real>(k: &Array2<T>, rho: T, p: T, radius: f64) -> Result<Array2<T>, DualError> {
    if radius >= rho.to_f64_lossy() {
        return Err(DualError::SeriesDiverges { rho: rho.to_f64_lossy(), lam: radius });
    }
    let m = k / rho;
    let n = k.nrows();
    let mut term = Array2::<T>::eye(n);
    let mut sum = term.clone();
    let mut coef = T::one();
    let limit = 100_000;
    for j in 1..limit {
        coef = binomial_neg(p, j, coef);
        term = matmul(&term.view(), &m.view());
        let add = &term * coef;
        let size = add.iter().fold(T::zero(), |a, &x| a.max(x.abs()));
        sum += &add;
        let scale = sum.iter().fold(T::zero(), |a, &x| a.max(x.abs()));
        if size <= T::epsilon() * T::lit(0.01) * scale {
            return Ok(sum * rho.powf(-p));
        }
    }
    Err(DualError::NoConvergence(limit))
}

/// Shampoo direction in sample space. With `G = δ hᵀ`, both `L^k G` and
/// `G R^k` equal `δ (K_h K_δ / n)^k hᵀ`, so the direction is
/// `δ S_L S_R hᵀ` with `S_X = ρ_X^{-p} Σ binom(−p, k) (K_h K_δ / (n ρ_X))^k`
/// and `p = e/2`. Valid only while `ρ_L` and `ρ_R` exceed `λ_max(L) = λ_max(R)`.
pub fn shampoo_series<T: Real>(tape: &Tape<T>, layer: usize, e: f64, rho_l: T, rho_r: T) -> Result<Array2<T>, DualError> {
    let back = tape.backward_ref()?;
    let h = &tape.h[layer];
    let delta = &back.delta_loss[layer];
    let nf = T::lit(tape.n() as f64);
    let kk = matmul(&matmul(&h.t(), &h.view()).view(), &matmul(&delta.t(), &delta.view()).view()) / nf;
    // K_h K_δ is similar to a PSD matrix; its eigenvalues are those of L.
    let g = matmul(&delta.view(), &h.t());
    let l = matmul(&g.view(), &g.t()) / nf;
    let (w, _) = T::eigh_sym(&l).ok_or(LinalgError::Decomposition("shampoo oracle"))?;
    let radius = w.iter().fold(0.0_f64, |m, &x| m.max(x.to_f64_lossy()));
    let p = T::lit(e / 2.0);
    let s_l = series(&kk, rho_l, p, radius)?;
    let s_r = series(&kk, rho_r, p, radius)?;
    let core = matmul(&s_l.view(), &s_r.view());
    Ok(matmul(&matmul(&delta.view(), &core.view()).view(), &h.t()))
}

/// Per-layer Jacobian of all `nC` outputs with respect to `vec(W_l)`
/// (row-major), one row per class-major output coordinate.
pub fn layer_jacobian<T: Real>(tape: &Tape<T>, layer: usize) -> Result<Array2<T>, DualError> {
    let back = tape.backward_ref()?;
    let d = &back.delta_out.as_ref().ok_or(NetworkError::NoOutputSignals)?[layer];
    let h = tile_columns(&tape.h[layer], back.chi.nrows());
    let (rows, cols) = (d.nrows(), h.nrows());
    let mut j = Array2::zeros((d.ncols(), rows * cols));
    for (r, mut out) in j.rows_mut().into_iter().enumerate() {
        for a in 0..rows {
            let da = d[[a, r]];
            out.slice_mut(s![a * cols..(a + 1) * cols]).assign(&(&h.column(r) * da));
        }
    }
    Ok(j)
}

/// Layer-wise Gauss-Newton direction from the explicit Jacobian.
///
/// `sample_space`: `−(1/n) Jᵀ (diag(χ²) J Jᵀ / n + ρ)^{-1} χ`.
/// Otherwise the parameter-space form `−(1/n) (Jᵀ diag(χ²) J / n + ρ)^{-1} Jᵀ χ`.
pub fn gauss_newton_explicit<T: Real>(tape: &Tape<T>, layer: usize, rho: T, sample_space: bool) -> Result<Array2<T>, DualError> {
    let back = tape.backward_ref()?;
    let j = layer_jacobian(tape, layer)?;
    let nf = T::lit(tape.n() as f64);
    let chi = flatten_class_major(&back.chi);
    let chi2 = chi.mapv(|x| x * x / nf);
    let chi_col = chi.clone().insert_axis(Axis(1));
    let flat: Array1<T> = if sample_space {
        let mut sys = matmul(&j.view(), &j.t());
        Zip::from(sys.rows_mut()).and(&chi2).for_each(|mut row, &w| row *= w);
        let z = solve(&shifted(sys, rho), &chi_col)?;
        matmul(&j.t(), &z.view()).remove_axis(Axis(1))
    } else {
        let mut dj = j.clone();
        Zip::from(dj.rows_mut()).and(&chi2).for_each(|mut row, &w| row *= w);
        let sys = shifted(matmul(&j.t(), &dj.view()), rho);
        let rhs = matmul(&j.t(), &chi_col.view());
        solve(&sys, &rhs)?.remove_axis(Axis(1))
    };
    let rows = back.delta_out.as_ref().ok_or(NetworkError::NoOutputSignals)?[layer].nrows();
    let cols = tape.h[layer].nrows();
    let d = flat.into_shape_with_order((rows, cols)).map_err(|e| LinalgError::Shape(e.to_string()))?;
    Ok(d * (-T::one() / nf))
}
