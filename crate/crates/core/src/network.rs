//! Fully-connected network with explicit forward and backward records.
//!
//! Shapes follow the column-sample convention: activations are `M_l × n`,
//! outputs and targets are `C × n`, and per-class output signals are stacked
//! class-major as `M_l × nC` (column `c·n + i` holds class `c` of sample `i`).
//!
//! Gradient convention: the training objective is `(1/2n) Σ ‖y − f‖²` for MSE
//! and the mean negative log-likelihood for cross-entropy, so in both cases
//! `∇_f = −χ / n` with `χ = y − f` or `χ = y − softmax(f)`. The reported MSE
//! value is `(1/n) Σ ‖y − f‖²`.

use crate::linalg::matmul;
use crate::param::Materialized;
use crate::scalar::Real;
use ndarray::{s, Array1, Array2, ArrayView2, Axis, Zip};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NetworkError {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("depth must be at least 2, got {0}")]
    Depth(usize),
    #[error("cross-entropy targets must be one-hot columns (column {0} is not)")]
    NotOneHot(usize),
    #[error("backward pass has not been run on this tape")]
    NoBackward,
    #[error("per-class output signals were not requested in the backward pass")]
    NoOutputSignals,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Tanh,
    Identity,
}

impl Activation {
    fn apply<T: Real>(self, x: T) -> T {
        match self {
            Activation::Relu => x.max(T::zero()),
            Activation::Tanh => x.tanh(),
            Activation::Identity => x,
        }
    }

    /// Derivative expressed through the pre-activation `u` and activation `h`.
    fn derivative<T: Real>(self, u: T, h: T) -> T {
        match self {
            Activation::Relu => {
                if u > T::zero() {
                    T::one()
                } else {
                    T::zero()
                }
            }
            Activation::Tanh => T::one() - h * h,
            Activation::Identity => T::one(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    Mse,
    #[serde(alias = "ce")]
    CrossEntropy,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Architecture {
    pub d_in: usize,
    pub width: usize,
    pub depth: usize,
    pub out_dim: usize,
    pub activation: Activation,
    #[serde(default)]
    pub bias: bool,
}

impl Architecture {
    pub fn validate(&self) -> Result<(), NetworkError> {
        if self.depth < 2 {
            return Err(NetworkError::Depth(self.depth));
        }
        if self.d_in == 0 || self.width == 0 || self.out_dim == 0 {
            return Err(NetworkError::Shape(format!("dimensions must be positive: {self:?}")));
        }
        Ok(())
    }

    /// `(fan_out, fan_in)` of every layer.
    pub fn layer_dims(&self) -> Vec<(usize, usize)> {
        (0..self.depth)
            .map(|l| {
                let fan_in = if l == 0 { self.d_in } else { self.width };
                let fan_out = if l + 1 == self.depth { self.out_dim } else { self.width };
                (fan_out, fan_in)
            })
            .collect()
    }
}

/// One layer: the effective weight is `multiplier · w`.
#[derive(Debug, Clone, PartialEq)]
pub struct Layer<T> {
    pub w: Array2<T>,
    pub bias: Option<Array1<T>>,
    pub multiplier: T,
}

impl<T: Real> Layer<T> {
    pub fn effective(&self) -> Array2<T> {
        &self.w * self.multiplier
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Weights<T> {
    pub activation: Activation,
    pub layers: Vec<Layer<T>>,
}

impl<T: Real> Weights<T> {
    pub fn depth(&self) -> usize {
        self.layers.len()
    }
}

/// Draws i.i.d. Gaussian weights with the materialized standard deviations.
///
/// The stream is a single ChaCha8 sequence consumed layer by layer (weights,
/// then bias), sampled in `f64` and rounded, so `f32` and `f64` networks from
/// the same seed agree up to rounding. With `zero_init_last` the output layer
/// is exactly zero.
pub fn init_weights<T: Real>(
    arch: &Architecture,
    mat: &Materialized,
    zero_init_last: bool,
    seed: u64,
) -> Result<Weights<T>, NetworkError> {
    arch.validate()?;
    if mat.init_std.len() != arch.depth {
        return Err(NetworkError::Shape(format!(
            "parameterization has {} layers, architecture {}",
            mat.init_std.len(),
            arch.depth
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut layers = Vec::with_capacity(arch.depth);
    for (l, (fan_out, fan_in)) in arch.layer_dims().into_iter().enumerate() {
        let last = l + 1 == arch.depth;
        let std = mat.init_std[l];
        let w = if last && zero_init_last {
            Array2::zeros((fan_out, fan_in))
        } else {
            Array2::from_shape_simple_fn((fan_out, fan_in), || {
                let z: f64 = StandardNormal.sample(&mut rng);
                T::lit(z * std)
            })
        };
        let bias = arch.bias.then(|| {
            Array1::from_shape_simple_fn(fan_out, || {
                let z: f64 = StandardNormal.sample(&mut rng);
                T::lit(z * mat.bias_std)
            })
        });
        layers.push(Layer { w, bias, multiplier: T::lit(mat.multiplier[l]) });
    }
    Ok(Weights { activation: arch.activation, layers })
}

/// Signals of the backward pass.
#[derive(Debug, Clone)]
pub struct Backward<T> {
    pub loss_kind: LossKind,
    /// `y − f` (MSE) or `y − softmax(f)` (cross-entropy), `C × n`.
    pub chi: Array2<T>,
    /// Softmax probabilities for cross-entropy.
    pub probs: Option<Array2<T>>,
    /// `∇_{u_l} L` for every layer, `M_l × n`.
    pub delta_loss: Vec<Array2<T>>,
    /// `∇_{u_l} f` per output class, `M_l × nC`, when requested.
    pub delta_out: Option<Vec<Array2<T>>>,
    /// Reported loss value.
    pub loss: T,
}

/// Forward record, plus the backward record once [`Tape::backward`] ran.
#[derive(Debug, Clone)]
pub struct Tape<T> {
    /// `h_0 = X, h_1, …, h_{L−1}`.
    pub h: Vec<Array2<T>>,
    /// `u_1, …, u_L`; the network output is `u_L`.
    pub u: Vec<Array2<T>>,
    pub back: Option<Backward<T>>,
}

pub fn forward<T: Real>(weights: &Weights<T>, x: ArrayView2<T>) -> Result<Tape<T>, NetworkError> {
    let first = &weights.layers[0];
    if x.nrows() != first.w.ncols() {
        return Err(NetworkError::Shape(format!("input has {} rows, network expects {}", x.nrows(), first.w.ncols())));
    }
    let depth = weights.depth();
    let mut h = Vec::with_capacity(depth);
    let mut u = Vec::with_capacity(depth);
    h.push(x.to_owned());
    for (l, layer) in weights.layers.iter().enumerate() {
        let mut ul = matmul(&layer.w.view(), &h[l].view());
        if layer.multiplier != T::one() {
            ul *= layer.multiplier;
        }
        if let Some(b) = &layer.bias {
            ul += &b.view().insert_axis(Axis(1));
        }
        if l + 1 < depth {
            let act = weights.activation;
            h.push(ul.mapv(|v| act.apply(v)));
        }
        u.push(ul);
    }
    Ok(Tape { h, u, back: None })
}

pub fn softmax<T: Real>(f: &Array2<T>) -> Array2<T> {
    let mut p = f.clone();
    for mut col in p.columns_mut() {
        let max = col.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
        col.mapv_inplace(|v| (v - max).exp());
        let sum = col.sum();
        col /= sum;
    }
    p
}

fn check_one_hot<T: Real>(y: &Array2<T>) -> Result<(), NetworkError> {
    for (i, col) in y.columns().into_iter().enumerate() {
        let ones = col.iter().filter(|&&v| v == T::one()).count();
        let zeros = col.iter().filter(|&&v| v == T::zero()).count();
        if ones != 1 || ones + zeros != col.len() {
            return Err(NetworkError::NotOneHot(i));
        }
    }
    Ok(())
}

/// MSE `(1/n) Σ ‖y − f‖²` or cross-entropy `−(1/n) Σ log softmax(f)[label]`.
pub fn loss_eval<T: Real>(f: &Array2<T>, y: &Array2<T>, kind: LossKind) -> Result<T, NetworkError> {
    if f.shape() != y.shape() {
        return Err(NetworkError::Shape(format!("output {:?} vs target {:?}", f.shape(), y.shape())));
    }
    let n = T::lit(f.ncols() as f64);
    match kind {
        LossKind::Mse => {
            let sq = Zip::from(f).and(y).fold(T::zero(), |s, &a, &b| s + (b - a) * (b - a));
            Ok(sq / n)
        }
        LossKind::CrossEntropy => {
            let mut total = T::zero();
            for (fc, yc) in f.columns().into_iter().zip(y.columns()) {
                let max = fc.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
                let lse = fc.iter().fold(T::zero(), |s, &v| s + (v - max).exp()).ln() + max;
                total = total + Zip::from(&fc).and(&yc).fold(T::zero(), |s, &fv, &yv| s + yv * (lse - fv));
            }
            Ok(total / n)
        }
    }
}

/// The objective whose gradient the backward pass returns.
pub fn objective<T: Real>(f: &Array2<T>, y: &Array2<T>, kind: LossKind) -> Result<T, NetworkError> {
    let v = loss_eval(f, y, kind)?;
    Ok(match kind {
        LossKind::Mse => v * T::lit(0.5),
        LossKind::CrossEntropy => v,
    })
}

/// Per-sample output-side Fisher weighting.
#[derive(Debug, Clone, PartialEq)]
pub enum Lambda<T> {
    /// MSE: every block is the identity.
    Identity,
    /// Cross-entropy: `diag(p_i) − p_i p_iᵀ` for each sample.
    Blocks(Vec<Array2<T>>),
}

impl<T: Real> Tape<T> {
    pub fn depth(&self) -> usize {
        self.u.len()
    }

    pub fn n(&self) -> usize {
        self.h[0].ncols()
    }

    pub fn output(&self) -> &Array2<T> {
        self.u.last().expect("depth ≥ 2")
    }

    pub fn backward_ref(&self) -> Result<&Backward<T>, NetworkError> {
        self.back.as_ref().ok_or(NetworkError::NoBackward)
    }

    /// Fills the backward record. Per-class output signals `δ^f` are computed
    /// only when `output_signals` is set, since they cost `C` backward passes.
    pub fn backward(
        &mut self,
        weights: &Weights<T>,
        kind: LossKind,
        y: &Array2<T>,
        output_signals: bool,
    ) -> Result<(), NetworkError> {
        let f = self.output();
        if f.shape() != y.shape() {
            return Err(NetworkError::Shape(format!("output {:?} vs target {:?}", f.shape(), y.shape())));
        }
        let (chi, probs) = match kind {
            LossKind::Mse => (y - f, None),
            LossKind::CrossEntropy => {
                check_one_hot(y)?;
                let p = softmax(f);
                (y - &p, Some(p))
            }
        };
        let loss = loss_eval(f, y, kind)?;
        let n = self.n();
        let inv_n = T::one() / T::lit(n as f64);
        let depth = self.depth();
        let act = weights.activation;

        let (delta_loss, delta_out) = if output_signals {
            let out = self.backprop_output_signals(weights);
            let c = chi.nrows();
            let loss_sig = out
                .iter()
                .map(|d| {
                    let mut acc = Array2::<T>::zeros((d.nrows(), n));
                    for k in 0..c {
                        let block = d.slice(s![.., k * n..(k + 1) * n]);
                        Zip::from(acc.columns_mut())
                            .and(block.columns())
                            .and(chi.row(k))
                            .for_each(|mut a, b, &x| a.scaled_add(-x * inv_n, &b));
                    }
                    acc
                })
                .collect();
            (loss_sig, Some(out))
        } else {
            let mut sig = vec![Array2::zeros((0, 0)); depth];
            sig[depth - 1] = &chi * (-inv_n);
            for l in (0..depth - 1).rev() {
                let next = &weights.layers[l + 1];
                let mut d = matmul(&next.w.t(), &sig[l + 1].view());
                if next.multiplier != T::one() {
                    d *= next.multiplier;
                }
                Zip::from(&mut d).and(&self.u[l]).and(&self.h[l + 1]).for_each(|d, &u, &h| *d = *d * act.derivative(u, h));
                sig[l] = d;
            }
            (sig, None)
        };
        self.back = Some(Backward { loss_kind: kind, chi, probs, delta_loss, delta_out, loss });
        Ok(())
    }

    fn backprop_output_signals(&self, weights: &Weights<T>) -> Vec<Array2<T>> {
        let depth = self.depth();
        let n = self.n();
        let c = self.output().nrows();
        let act = weights.activation;
        let mut out = vec![Array2::zeros((0, 0)); depth];
        let mut top = Array2::<T>::zeros((c, n * c));
        for k in 0..c {
            top.slice_mut(s![k, k * n..(k + 1) * n]).fill(T::one());
        }
        out[depth - 1] = top;
        for l in (0..depth - 1).rev() {
            let next = &weights.layers[l + 1];
            let mut d = matmul(&next.w.t(), &out[l + 1].view());
            if next.multiplier != T::one() {
                d *= next.multiplier;
            }
            for k in 0..c {
                let mut block = d.slice_mut(s![.., k * n..(k + 1) * n]);
                Zip::from(&mut block).and(&self.u[l]).and(&self.h[l + 1]).for_each(|d, &u, &h| *d = *d * act.derivative(u, h));
            }
            out[l] = d;
        }
        out
    }

    /// `∇_{W_l} L = δ_l h_{l−1}ᵀ` with respect to the effective weight.
    pub fn grad(&self, layer: usize) -> Result<Array2<T>, NetworkError> {
        let b = self.backward_ref()?;
        Ok(matmul(&b.delta_loss[layer].view(), &self.h[layer].t()))
    }

    /// `∇_{W_l} L` assembled from the per-class output signals:
    /// `−(1/n) δ^f diag(χ) (1_C ⊗ h)ᵀ`.
    pub fn grad_from_output_signals(&self, layer: usize) -> Result<Array2<T>, NetworkError> {
        let b = self.backward_ref()?;
        let d = b.delta_out.as_ref().ok_or(NetworkError::NoOutputSignals)?;
        let n = self.n();
        let c = b.chi.nrows();
        let chi_flat = flatten_class_major(&b.chi);
        let mut scaled = d[layer].clone();
        Zip::from(scaled.columns_mut()).and(&chi_flat).for_each(|mut col, &x| col *= x);
        let tiled = tile_columns(&self.h[layer], c);
        let g = matmul(&scaled.view(), &tiled.t());
        Ok(g * (-T::one() / T::lit(n as f64)))
    }

    /// `∇_{w_l} L` with respect to the stored parameter (`multiplier · ∇_W L`).
    pub fn param_grad(&self, weights: &Weights<T>, layer: usize) -> Result<Array2<T>, NetworkError> {
        Ok(self.grad(layer)? * weights.layers[layer].multiplier)
    }

    pub fn bias_grad(&self, layer: usize) -> Result<Array1<T>, NetworkError> {
        Ok(self.backward_ref()?.delta_loss[layer].sum_axis(Axis(1)))
    }

    /// Output-side Fisher weighting and the per-class output signals of `layer`.
    pub fn ce_fisher_backward(&self, layer: usize) -> Result<(Array2<T>, Lambda<T>), NetworkError> {
        let b = self.backward_ref()?;
        let d = b.delta_out.as_ref().ok_or(NetworkError::NoOutputSignals)?[layer].clone();
        let lambda = match &b.probs {
            None => Lambda::Identity,
            Some(p) => Lambda::Blocks(
                p.columns()
                    .into_iter()
                    .map(|pi| {
                        let mut blk = -outer(&pi.to_owned(), &pi.to_owned());
                        for (k, &v) in pi.iter().enumerate() {
                            blk[[k, k]] = blk[[k, k]] + v;
                        }
                        blk
                    })
                    .collect(),
            ),
        };
        Ok((d, lambda))
    }

    /// Square root `F` of the output-side factor, `B_l = F Fᵀ`.
    ///
    /// MSE averages over samples and classes, `B = δ^f δ^fᵀ / (nC)`;
    /// cross-entropy uses `B = δ^f Λ δ^fᵀ / n` with the per-sample root
    /// `S_i = diag(√p_i) − p_i √p_iᵀ` of `Λ_i`.
    pub fn output_factor_root(&self, layer: usize) -> Result<Array2<T>, NetworkError> {
        let b = self.backward_ref()?;
        let d = &b.delta_out.as_ref().ok_or(NetworkError::NoOutputSignals)?[layer];
        let n = self.n();
        let c = b.chi.nrows();
        match &b.probs {
            None => Ok(d * (T::one() / T::lit((n * c) as f64).sqrt())),
            Some(p) => {
                let mut root = Array2::<T>::zeros(d.raw_dim());
                let scale = T::one() / T::lit(n as f64).sqrt();
                for i in 0..n {
                    let pi = p.column(i);
                    for k in 0..c {
                        // Column k of S_i: √p_k e_k − p √p_k.
                        let sk = pi[k].sqrt();
                        let mut col = root.column_mut(k * n + i);
                        col.scaled_add(sk * scale, &d.column(k * n + i));
                        for j in 0..c {
                            col.scaled_add(-pi[j] * sk * scale, &d.column(j * n + i));
                        }
                    }
                }
                Ok(root)
            }
        }
    }
}

fn outer<T: Real>(a: &Array1<T>, b: &Array1<T>) -> Array2<T> {
    Array2::from_shape_fn((a.len(), b.len()), |(i, j)| a[i] * b[j])
}

/// `C × n` into a length-`nC` vector, class-major.
pub fn flatten_class_major<T: Real>(x: &Array2<T>) -> Array1<T> {
    Array1::from_iter(x.rows().into_iter().flat_map(|r| r.to_vec()))
}

/// `[h, h, …, h]` with `c` copies side by side, matching class-major columns.
pub fn tile_columns<T: Real>(h: &Array2<T>, c: usize) -> Array2<T> {
    let n = h.ncols();
    let mut out = Array2::zeros((h.nrows(), n * c));
    for k in 0..c {
        out.slice_mut(s![.., k * n..(k + 1) * n]).assign(h);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::param::{materialize, mup_table, Family, FamilyExps, Widths};
    use approx::assert_abs_diff_eq;
    use ndarray::array;

    fn arch(act: Activation, depth: usize) -> Architecture {
        Architecture { d_in: 3, width: 5, depth, out_dim: 2, activation: act, bias: false }
    }

    fn mat(depth: usize, width: usize, sigma: f64) -> Materialized {
        let t = mup_table(Family::Kfac, &FamilyExps::default(), depth).unwrap();
        let p = t.param.with_base(sigma, 1.0);
        materialize(&p, &t.damping, 1.0, Widths { d_in: 3, hidden: width }).unwrap()
    }

    #[test]
    fn zero_variance_gives_zero_network() {
        let a = arch(Activation::Tanh, 3);
        let w = init_weights::<f64>(&a, &mat(3, 5, 0.0), false, 1).unwrap();
        let x = Array2::from_elem((3, 4), 0.7);
        let t = forward(&w, x.view()).unwrap();
        assert!(t.output().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn identity_network_is_identity_map() {
        let w = Weights {
            activation: Activation::Identity,
            layers: vec![
                Layer { w: Array2::eye(3), bias: None, multiplier: 1.0 },
                Layer { w: Array2::eye(3), bias: None, multiplier: 1.0 },
            ],
        };
        let x = array![[1.0, -2.0], [0.5, 3.0], [4.0, 0.0]];
        assert_eq!(forward(&w, x.view()).unwrap().output(), &x);
    }

    #[test]
    fn dead_relu_units_output_zero() {
        let w = Weights {
            activation: Activation::Relu,
            layers: vec![
                Layer { w: Array2::from_elem((2, 2), -1.0), bias: None, multiplier: 1.0 },
                Layer { w: Array2::from_elem((1, 2), 3.0), bias: None, multiplier: 1.0 },
            ],
        };
        let x = array![[1.0, 2.0], [0.5, 0.1]];
        let t = forward(&w, x.view()).unwrap();
        assert!(t.h[1].iter().all(|&v| v == 0.0));
        assert!(t.output().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn init_is_deterministic_and_zero_last() {
        let a = arch(Activation::Relu, 3);
        let m = mat(3, 5, 1.0);
        let w1 = init_weights::<f64>(&a, &m, true, 9).unwrap();
        let w2 = init_weights::<f64>(&a, &m, true, 9).unwrap();
        assert_eq!(w1, w2);
        assert!(w1.layers[2].w.iter().all(|&v| v == 0.0));
        let w3 = init_weights::<f64>(&a, &m, true, 10).unwrap();
        assert_ne!(w1.layers[0].w, w3.layers[0].w);
    }

    #[test]
    fn forward_shape_mismatch() {
        let a = arch(Activation::Relu, 2);
        let w = init_weights::<f64>(&a, &mat(2, 5, 1.0), false, 0).unwrap();
        let x = Array2::zeros((4, 2));
        assert!(matches!(forward(&w, x.view()), Err(NetworkError::Shape(_))));
    }

    #[test]
    fn loss_values() {
        let y = array![[1.0, 0.0], [0.0, 1.0]];
        assert_eq!(loss_eval(&y, &y, LossKind::Mse).unwrap(), 0.0);
        let f = Array2::<f64>::zeros((10, 1));
        let mut yc = Array2::<f64>::zeros((10, 1));
        yc[[3, 0]] = 1.0;
        let ce = loss_eval(&f, &yc, LossKind::CrossEntropy).unwrap();
        assert!((ce - 10f64.ln()).abs() < 1e-14);
    }

    #[test]
    fn perfect_fit_gives_zero_error_and_gradient() {
        let a = arch(Activation::Tanh, 3);
        let w = init_weights::<f64>(&a, &mat(3, 5, 1.0), false, 4).unwrap();
        let x = Array2::from_shape_fn((3, 4), |(i, j)| (i as f64) - 0.3 * j as f64);
        let mut t = forward(&w, x.view()).unwrap();
        let y = t.output().clone();
        t.backward(&w, LossKind::Mse, &y, true).unwrap();
        let b = t.back.as_ref().unwrap();
        assert!(b.chi.iter().all(|&v| v == 0.0));
        for l in 0..3 {
            assert!(t.grad(l).unwrap().iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn output_signals_have_class_pattern_and_agree() {
        let a = arch(Activation::Tanh, 3);
        let w = init_weights::<f64>(&a, &mat(3, 5, 1.0), false, 4).unwrap();
        let x = Array2::from_shape_fn((3, 4), |(i, j)| ((i * 7 + j * 3) % 5) as f64 - 2.0);
        let y = Array2::from_shape_fn((2, 4), |(i, j)| (i + j) as f64 * 0.1);
        let mut t = forward(&w, x.view()).unwrap();
        t.backward(&w, LossKind::Mse, &y, true).unwrap();
        let top = &t.back.as_ref().unwrap().delta_out.as_ref().unwrap()[2];
        assert_eq!(top.row(0).to_vec(), vec![1.0, 1.0, 1.0, 1.0, 0.0, 0.0, 0.0, 0.0]);
        for l in 0..3 {
            assert_abs_diff_eq!(t.grad(l).unwrap(), t.grad_from_output_signals(l).unwrap(), epsilon = 1e-14);
        }
        let mut direct = forward(&w, x.view()).unwrap();
        direct.backward(&w, LossKind::Mse, &y, false).unwrap();
        for l in 0..3 {
            assert_abs_diff_eq!(direct.grad(l).unwrap(), t.grad(l).unwrap(), epsilon = 1e-14);
        }
    }

    #[test]
    fn two_class_fisher_block() {
        let w = Weights {
            activation: Activation::Identity,
            layers: vec![
                Layer { w: Array2::zeros((2, 1)), bias: None, multiplier: 1.0 },
                Layer { w: Array2::zeros((2, 2)), bias: None, multiplier: 1.0 },
            ],
        };
        let x = array![[1.0]];
        let y = array![[1.0], [0.0]];
        let mut t = forward(&w, x.view()).unwrap();
        t.backward(&w, LossKind::CrossEntropy, &y, true).unwrap();
        let (_, lambda) = t.ce_fisher_backward(1).unwrap();
        match lambda {
            Lambda::Blocks(b) => assert_abs_diff_eq!(b[0], array![[0.25, -0.25], [-0.25, 0.25]], epsilon = 1e-15),
            Lambda::Identity => panic!("expected blocks"),
        }
    }

    #[test]
    fn cross_entropy_factor_root_reproduces_lambda() {
        let a = Architecture { d_in: 3, width: 4, depth: 3, out_dim: 3, activation: Activation::Tanh, bias: false };
        let w = init_weights::<f64>(&a, &mat(3, 4, 1.0), false, 2).unwrap();
        let x = Array2::from_shape_fn((3, 5), |(i, j)| ((i * 5 + j * 2) % 7) as f64 / 3.0 - 1.0);
        let mut y = Array2::zeros((3, 5));
        for j in 0..5 {
            y[[j % 3, j]] = 1.0;
        }
        let mut t = forward(&w, x.view()).unwrap();
        t.backward(&w, LossKind::CrossEntropy, &y, true).unwrap();
        for l in 0..3 {
            let root = t.output_factor_root(l).unwrap();
            let (d, lambda) = t.ce_fisher_backward(l).unwrap();
            let blocks = match lambda {
                Lambda::Blocks(b) => b,
                Lambda::Identity => unreachable!(),
            };
            let mut expected = Array2::<f64>::zeros((d.nrows(), d.nrows()));
            for (i, blk) in blocks.iter().enumerate() {
                for k in 0..3 {
                    for j in 0..3 {
                        let dk = d.column(k * 5 + i);
                        let dj = d.column(j * 5 + i);
                        for r in 0..d.nrows() {
                            for s in 0..d.nrows() {
                                expected[[r, s]] += dk[r] * blk[[k, j]] * dj[s] / 5.0;
                            }
                        }
                    }
                }
            }
            assert_abs_diff_eq!(root.dot(&root.t()), expected, epsilon = 1e-13);
        }
    }

    #[test]
    fn rejects_non_one_hot_targets() {
        let a = arch(Activation::Relu, 2);
        let w = init_weights::<f64>(&a, &mat(2, 5, 1.0), false, 0).unwrap();
        let x = Array2::zeros((3, 2));
        let y = array![[0.5, 1.0], [0.5, 0.0]];
        let mut t = forward(&w, x.view()).unwrap();
        assert_eq!(t.backward(&w, LossKind::CrossEntropy, &y, false), Err(NetworkError::NotOneHot(0)));
    }
}
