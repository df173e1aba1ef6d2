//! Update rules: SGD, the K-FAC family (K-FAC, FOOF), Shampoo and layer-wise
//! Gauss-Newton.
//!
//! Every rule produces, per layer, a preconditioned direction in factored
//! form `D = U Vᵀ` expressed for the effective weight `W = w / M^a`. The
//! stored parameter moves by `w ← w − η · M^{-a} · D`, which keeps the
//! function-space trajectory independent of the `a` exponent.
//!
//! * SGD: `U = δ`, `V = h`.
//! * K-FAC: `U = (B + ρ_B)^{-e_B} δ`, `V = (A + ρ_A)^{-e_A} h`, with
//!   `A = h hᵀ / n` and `B` built from the per-class output signals.
//! * Shampoo: `U = (L + ρ_L)^{-e/2} δ`, `V = (R + ρ_R)^{-e/2} h`, with
//!   `L = G Gᵀ / n` and `R = Gᵀ G / n` for `G = δ hᵀ`.
//! * Gauss-Newton: `U = −(1/n) δ^f diag(χ̃)`, `V = 1_C ⊗ h`, with
//!   `χ̃ = (diag(χ²) J Jᵀ / n + ρ)^{-1} χ` and `J Jᵀ = (δ^fᵀ δ^f) ∘ (1 1ᵀ ⊗ hᵀ h)`.

mod damping;
pub mod dual;

pub use damping::{compute_damping, DampingSpec, DampingStrategy, DampingValues, FactorStats};

use crate::linalg::{matmul, Factor, LinalgError, PowerOp, Spectrum};
use crate::network::{flatten_class_major, tile_columns, LossKind, NetworkError, Tape, Weights};
use crate::param::{exp_to_f64, Family, FamilyExps, Materialized, ParamError};
use crate::scalar::Real;
use ndarray::linalg::general_mat_mul;
use ndarray::{Array1, Array2, Axis, Zip};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum OptimError {
    #[error("layer {layer}: {source}")]
    Linalg { layer: usize, source: LinalgError },
    #[error(transparent)]
    Network(#[from] NetworkError),
    #[error(transparent)]
    Param(#[from] ParamError),
    #[error("damping strategy {strategy} is not defined for {family}")]
    StrategyFamily { strategy: DampingStrategy, family: Family },
    #[error("EMA factor must lie in [0, 1), got {0}")]
    EmaFactor(f64),
    #[error("momentum must be finite and non-negative, got {0}")]
    Momentum(f64),
    #[error("gauss-newton requires the MSE loss")]
    GaussNewtonLoss,
    #[error("materialized constants cover {got} layers, network has {expected}")]
    LayerCount { got: usize, expected: usize },
}

fn at(layer: usize) -> impl Fn(LinalgError) -> OptimError {
    move |source| OptimError::Linalg { layer, source }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum Accumulation {
    #[default]
    None,
    Ema {
        xi: f64,
    },
    Sum,
}

/// How factor powers are evaluated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FactorMode {
    /// Thin spectral evaluation while the factor rank is below its dimension.
    #[default]
    Auto,
    /// Always densify and use the full eigendecomposition or Cholesky.
    Dense,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizerSpec {
    pub family: Family,
    pub exps: FamilyExps,
    pub accumulation: Accumulation,
    pub momentum: f64,
    pub damping: DampingSpec,
    pub factor_mode: FactorMode,
}

impl OptimizerSpec {
    pub fn new(family: Family, damping: DampingSpec) -> Self {
        OptimizerSpec {
            family,
            exps: FamilyExps::default(),
            accumulation: Accumulation::None,
            momentum: 0.0,
            damping,
            factor_mode: FactorMode::Auto,
        }
    }

    pub fn validate(&self) -> Result<(), OptimError> {
        self.exps.effective(self.family)?;
        let ok = match self.damping.strategy {
            DampingStrategy::FixedExponent => true,
            DampingStrategy::KfacHeuristic | DampingStrategy::RescaledTrace => {
                matches!(self.family, Family::Kfac | Family::Foof | Family::Sgd)
            }
            DampingStrategy::MaxEigenvalue => matches!(self.family, Family::Shampoo | Family::Sgd),
        };
        if !ok {
            return Err(OptimError::StrategyFamily { strategy: self.damping.strategy, family: self.family });
        }
        if let Accumulation::Ema { xi } = self.accumulation {
            if !(0.0..1.0).contains(&xi) {
                return Err(OptimError::EmaFactor(xi));
            }
        }
        if !(self.momentum.is_finite() && self.momentum >= 0.0) {
            return Err(OptimError::Momentum(self.momentum));
        }
        Ok(())
    }
}

/// Per-layer diagnostics of one step.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct LayerReport {
    /// Damping of the output-side factor (`B` or `L`).
    pub rho_left: Option<f64>,
    /// Damping of the activation-side factor (`A` or `R`), or the Gauss-Newton damping.
    pub rho_right: Option<f64>,
    pub left: Option<Spectrum>,
    pub right: Option<Spectrum>,
    /// Coordinate size of `ΔW_l h_{l−1}` on the step's batch.
    pub coord_dwh: f64,
    pub fallback: bool,
}

impl LayerReport {
    /// `ρ / ‖X‖₂` for the output-side factor.
    pub fn validity_left(&self) -> Option<f64> {
        Some(self.rho_left? / self.left?.lam_max)
    }

    pub fn validity_right(&self) -> Option<f64> {
        Some(self.rho_right? / self.right?.lam_max)
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct StepReport {
    pub layers: Vec<LayerReport>,
}

impl StepReport {
    pub fn any_fallback(&self) -> bool {
        self.layers.iter().any(|l| l.fallback)
    }
}

/// Preconditioning factors of one layer.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct LayerFactors<T> {
    /// `B_l` (K-FAC family) or `L_l` (Shampoo).
    pub left: Option<Factor<T>>,
    /// `A_{l−1}` (K-FAC family) or `R_{l−1}` (Shampoo).
    pub right: Option<Factor<T>>,
}

/// Running curvature estimate across steps.
#[derive(Debug, Clone, PartialEq)]
pub struct CurvatureState<T> {
    pub mode: Accumulation,
    pub layers: Vec<LayerFactors<T>>,
    pub updates: usize,
}

impl<T: Real> CurvatureState<T> {
    pub fn new(mode: Accumulation, depth: usize) -> Self {
        CurvatureState { mode, layers: vec![LayerFactors { left: None, right: None }; depth], updates: 0 }
    }

    /// Folds one batch estimate in. EMA starts from the first batch; sum
    /// starts from zero, which coincides with the first batch as well.
    pub fn accumulate(&mut self, batch: Vec<LayerFactors<T>>) -> Result<(), OptimError> {
        if let Accumulation::Ema { xi } = self.mode {
            if !(0.0..1.0).contains(&xi) {
                return Err(OptimError::EmaFactor(xi));
            }
        }
        for (l, (state, new)) in self.layers.iter_mut().zip(batch).enumerate() {
            state.left = combine(state.left.take(), new.left, self.mode).map_err(at(l))?;
            state.right = combine(state.right.take(), new.right, self.mode).map_err(at(l))?;
        }
        self.updates += 1;
        Ok(())
    }
}

fn combine<T: Real>(prev: Option<Factor<T>>, new: Option<Factor<T>>, mode: Accumulation) -> Result<Option<Factor<T>>, LinalgError> {
    let (prev, new) = match (prev, new) {
        (_, None) => return Ok(None),
        (None, Some(n)) => return Ok(Some(n)),
        (Some(p), Some(n)) => (p, n),
    };
    Ok(Some(match mode {
        Accumulation::None => new,
        Accumulation::Ema { xi } => prev.scaled(T::lit(xi)).add(&new.scaled(T::lit(1.0 - xi)))?,
        Accumulation::Sum => prev.add(&new)?,
    }))
}

/// Factored preconditioned direction of one layer, `D = U Vᵀ`.
#[derive(Debug, Clone)]
pub struct Direction<T> {
    pub u: Array2<T>,
    pub v: Array2<T>,
    pub bias: Option<Array1<T>>,
}

impl<T: Real> Direction<T> {
    pub fn dense(&self) -> Array2<T> {
        matmul(&self.u.view(), &self.v.t())
    }
}

/// Root of `L = G Gᵀ / n` for `G = a bᵀ`: `a Q diag(√λ) / √n` with `bᵀb = Q diag(λ) Qᵀ`.
fn gram_weighted_root<T: Real>(a: &Array2<T>, b: &Array2<T>, layer: usize) -> Result<Array2<T>, OptimError> {
    let n = T::lit(a.ncols() as f64);
    let k = matmul(&b.t(), &b.view());
    let (w, q) = T::eigh_sym(&k).ok_or(OptimError::Linalg { layer, source: LinalgError::Decomposition("gram eigendecomposition") })?;
    let mut scaled = q;
    let inv_sqrt_n = T::one() / n.sqrt();
    Zip::from(scaled.columns_mut()).and(&w).for_each(|mut col, &lam| col *= lam.max(T::zero()).sqrt() * inv_sqrt_n);
    Ok(matmul(&a.view(), &scaled.view()))
}

fn coord_size_matrix<T: Real>(x: &Array2<T>) -> f64 {
    if x.is_empty() {
        return 0.0;
    }
    let ss = x.iter().fold(0.0_f64, |s, &v| {
        let v = v.to_f64_lossy();
        s + v * v
    });
    (ss / x.len() as f64).sqrt()
}

/// A stateful optimizer for one run.
#[derive(Debug, Clone)]
pub struct Optimizer<T> {
    spec: OptimizerSpec,
    e_a: T,
    e_b: T,
    mat: Materialized,
    curvature: CurvatureState<T>,
    momentum: Vec<Option<Array2<T>>>,
    bias_momentum: Vec<Option<Array1<T>>>,
    steps: usize,
}

impl<T: Real> Optimizer<T> {
    /// `mat` must come from the same table and `ρ′` as `spec`.
    pub fn new(spec: OptimizerSpec, mat: Materialized) -> Result<Self, OptimError> {
        spec.validate()?;
        let (e_a, e_b) = spec.exps.effective(spec.family)?;
        let depth = mat.lr.len();
        Ok(Optimizer {
            e_a: T::lit(exp_to_f64(e_a)),
            e_b: T::lit(exp_to_f64(e_b)),
            curvature: CurvatureState::new(spec.accumulation, depth),
            momentum: vec![None; depth],
            bias_momentum: vec![None; depth],
            steps: 0,
            mat,
            spec,
        })
    }

    pub fn spec(&self) -> &OptimizerSpec {
        &self.spec
    }

    pub fn materialized(&self) -> &Materialized {
        &self.mat
    }

    pub fn curvature(&self) -> &CurvatureState<T> {
        &self.curvature
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    fn kfac_like(&self) -> bool {
        matches!(self.spec.family, Family::Kfac | Family::Foof)
    }

    /// Whether the tape must carry per-class output signals.
    pub fn needs_output_signals(&self) -> bool {
        match self.spec.family {
            Family::GaussNewton => true,
            Family::Kfac | Family::Foof => {
                self.e_b != T::zero() || (self.spec.damping.strategy == DampingStrategy::KfacHeuristic && self.e_a != T::zero())
            }
            _ => false,
        }
    }

    /// Preconditioning power applied to the output side and activation side.
    fn powers(&self) -> (T, T) {
        match self.spec.family {
            Family::Shampoo => (self.e_b / T::lit(2.0), self.e_a / T::lit(2.0)),
            _ => (self.e_b, self.e_a),
        }
    }

    /// Builds the batch factors of every layer that needs them.
    fn batch_factors(&self, tape: &Tape<T>) -> Result<Vec<LayerFactors<T>>, OptimError> {
        let depth = tape.depth();
        let n = T::lit(tape.n() as f64);
        let mut out = Vec::with_capacity(depth);
        let back = tape.backward_ref()?;
        let (p_left, p_right) = self.powers();
        let strategy = self.spec.damping.strategy;
        for l in 0..depth {
            let mut f = LayerFactors { left: None, right: None };
            match self.spec.family {
                Family::Kfac | Family::Foof => {
                    let heuristic = strategy == DampingStrategy::KfacHeuristic && self.e_a != T::zero();
                    if p_right != T::zero() {
                        f.right = Some(Factor::from_root(&tape.h[l] / n.sqrt()));
                    }
                    if p_left != T::zero() || heuristic {
                        f.left = Some(Factor::from_root(tape.output_factor_root(l)?));
                    }
                }
                Family::Shampoo => {
                    let delta = &back.delta_loss[l];
                    let h = &tape.h[l];
                    f.left = Some(Factor::from_root(gram_weighted_root(delta, h, l)?));
                    f.right = Some(Factor::from_root(gram_weighted_root(h, delta, l)?));
                }
                Family::Sgd | Family::GaussNewton => {}
            }
            if self.spec.factor_mode == FactorMode::Dense {
                f.left = f.left.map(|x| Factor::Dense(x.to_dense()));
                f.right = f.right.map(|x| Factor::Dense(x.to_dense()));
            }
            out.push(f);
        }
        Ok(out)
    }

    /// Computes every layer's direction and advances the curvature state,
    /// without touching the weights.
    pub fn directions(&mut self, weights: &Weights<T>, tape: &Tape<T>) -> Result<(Vec<Direction<T>>, StepReport), OptimError> {
        let depth = weights.depth();
        if self.mat.lr.len() != depth {
            return Err(OptimError::LayerCount { got: self.mat.lr.len(), expected: depth });
        }
        let back = tape.backward_ref()?;
        if self.spec.family == Family::GaussNewton {
            if back.loss_kind != LossKind::Mse {
                return Err(OptimError::GaussNewtonLoss);
            }
            return self.gauss_newton_directions(tape);
        }
        let batch = self.batch_factors(tape)?;
        self.curvature.accumulate(batch)?;
        let (p_left, p_right) = self.powers();
        let exact_batch = self.spec.accumulation == Accumulation::None || self.curvature.updates == 1;
        let n = T::lit(tape.n() as f64);

        let mut dirs = Vec::with_capacity(depth);
        let mut report = StepReport { layers: Vec::with_capacity(depth) };
        for l in 0..depth {
            let delta = &back.delta_loss[l];
            let h = &tape.h[l];
            let factors = &self.curvature.layers[l];
            let mut rep = LayerReport::default();

            let decompose = |f: &Option<Factor<T>>, p: T| -> Result<Option<crate::linalg::Decomposed<T>>, OptimError> {
                match f {
                    Some(x) if p != T::zero() => Ok(Some(x.decompose().map_err(at(l))?)),
                    _ => Ok(None),
                }
            };
            let left_dec = decompose(&factors.left, p_left)?;
            let right_dec = decompose(&factors.right, p_right)?;
            rep.left = left_dec.as_ref().map(|d| d.spectrum());
            rep.right = right_dec.as_ref().map(|d| d.spectrum());

            let stats = |f: &Option<Factor<T>>, spec: Option<Spectrum>| {
                f.as_ref().map(|x| FactorStats {
                    trace: x.trace().to_f64_lossy(),
                    dim: x.dim(),
                    lam_max: spec.map(|s| s.lam_max),
                })
            };
            let left_stats = stats(&factors.left, rep.left);
            let right_stats = stats(&factors.right, rep.right);
            let fixed = (self.mat.rho_left[l], self.mat.rho_right[l]);
            let damp = compute_damping(&self.spec.damping, left_stats.as_ref(), right_stats.as_ref(), fixed);
            rep.fallback = damp.fallback;
            rep.rho_left = factors.left.as_ref().and(damp.left);
            rep.rho_right = factors.right.as_ref().and(damp.right);

            let op = |dec: &Option<crate::linalg::Decomposed<T>>, rho: Option<f64>, p: T| -> Result<PowerOp<T>, OptimError> {
                match dec {
                    None => Ok(PowerOp::Identity),
                    Some(d) => {
                        let rho = rho.unwrap_or(0.0);
                        d.power(T::lit(rho), p).map_err(at(l))
                    }
                }
            };
            let left_op = op(&left_dec, damp.left, p_left)?;
            let right_op = op(&right_dec, damp.right, p_right)?;

            let u = left_op.apply(delta);
            let v = match (&right_op, &factors.right) {
                (PowerOp::LowRank { .. }, Some(Factor::Thin(root))) if exact_batch && self.kfac_like() => {
                    // A = (h/√n)(h/√n)ᵀ, so h = root · √n I.
                    let c = Array2::from_diag_elem(tape.n(), n.sqrt());
                    right_op.apply_span(root, &c)
                }
                _ => right_op.apply(h),
            };
            let bias = weights.layers[l].bias.as_ref().map(|_| {
                let g = delta.sum_axis(Axis(1)).insert_axis(Axis(1));
                left_op.apply(&g.to_owned()).remove_axis(Axis(1))
            });
            dirs.push(Direction { u, v, bias });
            report.layers.push(rep);
        }
        Ok((dirs, report))
    }

    fn gauss_newton_directions(&mut self, tape: &Tape<T>) -> Result<(Vec<Direction<T>>, StepReport), OptimError> {
        let back = tape.backward_ref()?;
        let signals = back.delta_out.as_ref().ok_or(NetworkError::NoOutputSignals)?;
        let n = tape.n();
        let c = back.chi.nrows();
        let nf = T::lit(n as f64);
        let chi = flatten_class_major(&back.chi);
        let mut dirs = Vec::with_capacity(tape.depth());
        let mut report = StepReport::default();
        for (l, d) in signals.iter().enumerate() {
            let h = &tape.h[l];
            let rho = self.mat.rho_right[l].unwrap_or(0.0);
            let kd = matmul(&d.t(), &d.view());
            let kh = matmul(&h.t(), &h.view());
            let mut sys = kd;
            for (r, mut row) in sys.rows_mut().into_iter().enumerate() {
                let w = chi[r] * chi[r] / nf;
                let i = r % n;
                for (col, x) in row.iter_mut().enumerate() {
                    *x = *x * kh[[i, col % n]] * w;
                }
            }
            sys.diag_mut().mapv_inplace(|x| x + T::lit(rho));
            let rhs = chi.clone().insert_axis(Axis(1));
            let chi_t = T::solve_general(&sys, &rhs)
                .ok_or(OptimError::Linalg { layer: l, source: LinalgError::Singular { rho, lambda_min: f64::NAN } })?
                .remove_axis(Axis(1));
            let mut u = d.clone();
            let scale = -T::one() / nf;
            Zip::from(u.columns_mut()).and(&chi_t).for_each(|mut col, &x| col *= x * scale);
            let v = tile_columns(h, c);
            let bias = Some(u.sum_axis(Axis(1)));
            dirs.push(Direction { u, v, bias });
            report.layers.push(LayerReport { rho_right: Some(rho), ..Default::default() });
        }
        Ok((dirs, report))
    }

    /// One optimization step: `w ← w − η M^{-a} D` (through the momentum
    /// buffer when `τ > 0`).
    pub fn step(&mut self, weights: &mut Weights<T>, tape: &Tape<T>) -> Result<StepReport, OptimError> {
        let (dirs, mut report) = self.directions(weights, tape)?;
        let tau = T::lit(self.spec.momentum);
        for (l, dir) in dirs.into_iter().enumerate() {
            let layer = &mut weights.layers[l];
            let eta = T::lit(self.mat.lr[l]);
            let mult = layer.multiplier;
            let h = &tape.h[l];
            let dwh = if tau > T::zero() {
                let buf = self.momentum[l].get_or_insert_with(|| Array2::zeros(layer.w.raw_dim()));
                *buf *= tau;
                general_mat_mul(T::one(), &dir.u, &dir.v.t(), T::one(), buf);
                layer.w.scaled_add(-eta * mult, buf);
                matmul(&buf.view(), &h.view()) * (-eta * mult * mult)
            } else {
                general_mat_mul(-eta * mult, &dir.u, &dir.v.t(), T::one(), &mut layer.w);
                let vh = matmul(&dir.v.t(), &h.view());
                matmul(&dir.u.view(), &vh.view()) * (-eta * mult * mult)
            };
            if l < report.layers.len() {
                report.layers[l].coord_dwh = coord_size_matrix(&dwh);
            }
            if let (Some(b), Some(db)) = (layer.bias.as_mut(), dir.bias) {
                let eta_b = T::lit(self.mat.bias_lr);
                if tau > T::zero() {
                    let buf = self.bias_momentum[l].get_or_insert_with(|| Array1::zeros(db.raw_dim()));
                    *buf *= tau;
                    *buf += &db;
                    b.scaled_add(-eta_b, buf);
                } else {
                    b.scaled_add(-eta_b, &db);
                }
            }
        }
        self.steps += 1;
        Ok(report)
    }
}

/// One step of `spec` from fresh curvature state, returning the new weights.
pub fn optimizer_step<T: Real>(
    weights: &Weights<T>,
    tape: &Tape<T>,
    spec: &OptimizerSpec,
    mat: &Materialized,
) -> Result<(Weights<T>, StepReport), OptimError> {
    let mut opt = Optimizer::new(spec.clone(), mat.clone())?;
    let mut w = weights.clone();
    let report = opt.step(&mut w, tape)?;
    Ok((w, report))
}

/// Plain (heavy-ball-free) SGD step with per-layer learning rates.
pub fn sgd_step<T: Real>(weights: &Weights<T>, tape: &Tape<T>, mat: &Materialized) -> Result<Weights<T>, OptimError> {
    let spec = OptimizerSpec::new(Family::Sgd, DampingSpec { strategy: DampingStrategy::FixedExponent, ..Default::default() });
    Ok(optimizer_step(weights, tape, &spec, mat)?.0)
}

pub fn kfac_step<T: Real>(
    weights: &Weights<T>,
    tape: &Tape<T>,
    spec: &OptimizerSpec,
    mat: &Materialized,
) -> Result<(Weights<T>, StepReport), OptimError> {
    debug_assert!(matches!(spec.family, Family::Kfac | Family::Foof));
    optimizer_step(weights, tape, spec, mat)
}

pub fn shampoo_step<T: Real>(
    weights: &Weights<T>,
    tape: &Tape<T>,
    spec: &OptimizerSpec,
    mat: &Materialized,
) -> Result<(Weights<T>, StepReport), OptimError> {
    debug_assert_eq!(spec.family, Family::Shampoo);
    optimizer_step(weights, tape, spec, mat)
}

pub fn gauss_newton_step<T: Real>(
    weights: &Weights<T>,
    tape: &Tape<T>,
    spec: &OptimizerSpec,
    mat: &Materialized,
) -> Result<Weights<T>, OptimError> {
    debug_assert_eq!(spec.family, Family::GaussNewton);
    Ok(optimizer_step(weights, tape, spec, mat)?.0)
}

#[cfg(test)]
mod tests;
