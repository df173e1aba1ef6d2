//! Width-dependent parameterizations (abc tables) and their materialization.
//!
//! A layer's weight is `W = w / M^a`, its initial entries have standard
//! deviation `σ′ / M^b` and its learning rate is `η′ / M^c`. Curvature
//! factors receive a damping `ρ′ / M^d`. All exponents are exact rationals so
//! the tables can be compared without tolerance.

use num_rational::Ratio;
use num_traits::{ToPrimitive, Zero};
use serde::{Deserialize, Serialize};
use std::fmt;
use std::str::FromStr;
use thiserror::Error;

/// Exact rational exponent.
pub type Exp = Ratio<i64>;

pub fn exp(n: i64, d: i64) -> Exp {
    Ratio::new(n, d)
}

fn exp_int(n: i64) -> Exp {
    Ratio::from_integer(n)
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ParamError {
    #[error("depth must be at least 2, got {0}")]
    DepthTooSmall(usize),
    #[error("unknown optimizer family `{0}`")]
    UnknownFamily(String),
    #[error("unknown parameterization `{0}` (expected sp, mup or ntk)")]
    UnknownScheme(String),
    #[error("exponent {name} = {value} is outside {range}")]
    ExponentRange { name: &'static str, value: Exp, range: &'static str },
    #[error("width must be positive, got {0}")]
    NonPositiveWidth(usize),
    #[error("cannot parse exponent `{0}`")]
    BadExponent(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Family {
    Sgd,
    Kfac,
    Foof,
    Shampoo,
    #[serde(alias = "gauss_newton")]
    GaussNewton,
}

impl Family {
    pub const ALL: [Family; 5] = [Family::Sgd, Family::Kfac, Family::Foof, Family::Shampoo, Family::GaussNewton];

    pub fn name(self) -> &'static str {
        match self {
            Family::Sgd => "sgd",
            Family::Kfac => "kfac",
            Family::Foof => "foof",
            Family::Shampoo => "shampoo",
            Family::GaussNewton => "gauss-newton",
        }
    }
}

impl fmt::Display for Family {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Family {
    type Err = ParamError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "sgd" => Ok(Family::Sgd),
            "kfac" | "k-fac" => Ok(Family::Kfac),
            "foof" => Ok(Family::Foof),
            "shampoo" => Ok(Family::Shampoo),
            "gauss-newton" | "gauss_newton" | "gn" => Ok(Family::GaussNewton),
            other => Err(ParamError::UnknownFamily(other.to_string())),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scheme {
    Sp,
    Mup,
    /// Lazy / NTK-style uniform parameterization.
    Ntk,
}

impl Scheme {
    pub fn name(self) -> &'static str {
        match self {
            Scheme::Sp => "sp",
            Scheme::Mup => "mup",
            Scheme::Ntk => "ntk",
        }
    }
}

impl fmt::Display for Scheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Scheme {
    type Err = ParamError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "sp" => Ok(Scheme::Sp),
            "mup" | "μp" => Ok(Scheme::Mup),
            "ntk" | "lazy" | "up" => Ok(Scheme::Ntk),
            other => Err(ParamError::UnknownScheme(other.to_string())),
        }
    }
}

/// Parses `1/2`, `-1`, or a decimal such as `0.5` into an exact exponent.
pub fn parse_exp(s: &str) -> Result<Exp, ParamError> {
    let s = s.trim();
    let bad = || ParamError::BadExponent(s.to_string());
    if let Some((n, d)) = s.split_once('/') {
        let n: i64 = n.trim().parse().map_err(|_| bad())?;
        let d: i64 = d.trim().parse().map_err(|_| bad())?;
        if d == 0 {
            return Err(bad());
        }
        return Ok(Ratio::new(n, d));
    }
    if let Ok(n) = s.parse::<i64>() {
        return Ok(exp_int(n));
    }
    let x: f64 = s.parse().map_err(|_| bad())?;
    if !x.is_finite() {
        return Err(bad());
    }
    // Decimal inputs are taken at face value up to 1e-9 resolution.
    let scaled = (x * 1e9).round() as i64;
    Ok(Ratio::new(scaled, 1_000_000_000))
}

pub fn exp_to_f64(e: Exp) -> f64 {
    e.to_f64().unwrap_or(f64::NAN)
}

/// Formats a list of exponents as `(0, 1/2, 1)`.
pub fn fmt_exps(v: &[Exp]) -> String {
    let parts: Vec<String> = v.iter().map(|e| e.to_string()).collect();
    format!("({})", parts.join(", "))
}

/// Exponents of one layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LayerExps {
    pub a: Exp,
    pub b: Exp,
    pub c: Exp,
}

/// Damping exponents for each curvature factor, one entry per layer.
///
/// For the K-FAC family `d_a` belongs to the activation factor `A_{l-1}` and
/// `d_b` to the output-side factor `B_l`; a side whose preconditioning
/// exponent is zero carries no damping and is `None`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum DampingExps {
    None,
    Kfac { d_a: Option<Vec<Exp>>, d_b: Option<Vec<Exp>> },
    Shampoo { d_l: Vec<Exp>, d_r: Vec<Exp> },
    GaussNewton { d: Vec<Exp> },
}

impl DampingExps {
    /// Exponent of the activation-side factor (`A` or `R`) of `layer` (0-based).
    pub fn right(&self, layer: usize) -> Option<Exp> {
        match self {
            DampingExps::None => None,
            DampingExps::Kfac { d_a, .. } => d_a.as_ref().map(|v| v[layer]),
            DampingExps::Shampoo { d_r, .. } => Some(d_r[layer]),
            DampingExps::GaussNewton { d } => Some(d[layer]),
        }
    }

    /// Exponent of the output-side factor (`B` or `L`) of `layer` (0-based).
    pub fn left(&self, layer: usize) -> Option<Exp> {
        match self {
            DampingExps::None => None,
            DampingExps::Kfac { d_b, .. } => d_b.as_ref().map(|v| v[layer]),
            DampingExps::Shampoo { d_l, .. } => Some(d_l[layer]),
            DampingExps::GaussNewton { .. } => None,
        }
    }
}

/// A full abc-parameterization: per-layer exponents plus base constants.
#[derive(Debug, Clone, PartialEq)]
pub struct AbcParam {
    pub layers: Vec<LayerExps>,
    pub base_init_std: f64,
    pub base_lr: f64,
}

impl AbcParam {
    pub fn depth(&self) -> usize {
        self.layers.len()
    }

    pub fn a(&self) -> Vec<Exp> {
        self.layers.iter().map(|l| l.a).collect()
    }

    pub fn b(&self) -> Vec<Exp> {
        self.layers.iter().map(|l| l.b).collect()
    }

    pub fn c(&self) -> Vec<Exp> {
        self.layers.iter().map(|l| l.c).collect()
    }

    pub fn with_base(mut self, base_init_std: f64, base_lr: f64) -> Self {
        self.base_init_std = base_init_std;
        self.base_lr = base_lr;
        self
    }

    fn from_bc(b: Vec<Exp>, c: Vec<Exp>) -> Self {
        let layers = b
            .into_iter()
            .zip(c)
            .map(|(b, c)| LayerExps { a: Exp::zero(), b, c })
            .collect();
        AbcParam { layers, base_init_std: 1.0, base_lr: 1.0 }
    }
}

/// A parameterization table: the abc exponents together with damping exponents.
#[derive(Debug, Clone, PartialEq)]
pub struct Table {
    pub param: AbcParam,
    pub damping: DampingExps,
}

/// Preconditioning exponents of an optimizer family.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FamilyExps {
    pub e_a: Exp,
    pub e_b: Exp,
    pub e: Exp,
}

impl Default for FamilyExps {
    fn default() -> Self {
        FamilyExps { e_a: exp_int(1), e_b: exp_int(1), e: exp(1, 2) }
    }
}

impl FamilyExps {
    /// Effective `(e_A, e_B)` for the family, enforcing the declared ranges.
    pub fn effective(&self, family: Family) -> Result<(Exp, Exp), ParamError> {
        let unit = |name, v: Exp| {
            if v < Exp::zero() || v > exp_int(1) {
                Err(ParamError::ExponentRange { name, value: v, range: "[0, 1]" })
            } else {
                Ok(v)
            }
        };
        match family {
            Family::Sgd => Ok((Exp::zero(), Exp::zero())),
            Family::Kfac => Ok((unit("e_A", self.e_a)?, unit("e_B", self.e_b)?)),
            Family::Foof => Ok((exp_int(1), Exp::zero())),
            Family::Shampoo => {
                if self.e <= Exp::zero() || self.e > exp_int(1) {
                    return Err(ParamError::ExponentRange { name: "e", value: self.e, range: "(0, 1]" });
                }
                Ok((self.e, self.e))
            }
            // Gauss-Newton shares K-FAC's abc exponents at e_A = e_B = 1.
            Family::GaussNewton => Ok((exp_int(1), exp_int(1))),
        }
    }
}

fn check_depth(depth: usize) -> Result<(), ParamError> {
    if depth < 2 {
        Err(ParamError::DepthTooSmall(depth))
    } else {
        Ok(())
    }
}

/// `first` for the input layer, `last` for the output layer, `mid` between.
fn per_layer(depth: usize, first: Exp, mid: Exp, last: Exp) -> Vec<Exp> {
    (0..depth)
        .map(|l| {
            if l == 0 {
                first
            } else if l + 1 == depth {
                last
            } else {
                mid
            }
        })
        .collect()
}

fn mup_b(depth: usize) -> Vec<Exp> {
    per_layer(depth, Exp::zero(), exp(1, 2), exp_int(1))
}

fn kfac_damping(depth: usize, e_a: Exp, e_b: Exp) -> DampingExps {
    let d_a = per_layer(depth, Exp::zero(), exp_int(-1), exp_int(-1));
    let d_b = per_layer(depth, exp_int(1), exp_int(1), Exp::zero());
    DampingExps::Kfac {
        d_a: (!e_a.is_zero()).then_some(d_a),
        d_b: (!e_b.is_zero()).then_some(d_b),
    }
}

fn edge_damping(depth: usize) -> Vec<Exp> {
    per_layer(depth, exp_int(1), Exp::zero(), exp_int(-1))
}

/// Damping exponents that keep every factor's damping on the scale of its
/// eigenvalues under μP. They do not depend on the preconditioning exponents.
pub fn damping_exps(family: Family, exps: &FamilyExps, depth: usize) -> Result<DampingExps, ParamError> {
    check_depth(depth)?;
    let (e_a, e_b) = exps.effective(family)?;
    Ok(match family {
        Family::Sgd => DampingExps::None,
        Family::Kfac | Family::Foof => kfac_damping(depth, e_a, e_b),
        Family::Shampoo => DampingExps::Shampoo { d_l: edge_damping(depth), d_r: edge_damping(depth) },
        Family::GaussNewton => DampingExps::GaussNewton { d: edge_damping(depth) },
    })
}

/// Maximal-update parameterization for `family` at depth `depth`.
pub fn mup_table(family: Family, exps: &FamilyExps, depth: usize) -> Result<Table, ParamError> {
    check_depth(depth)?;
    let (e_a, e_b) = exps.effective(family)?;
    let one = exp_int(1);
    let c = match family {
        Family::GaussNewton => vec![Exp::zero(); depth],
        _ => per_layer(depth, e_b - one, e_b - e_a, one - e_a),
    };
    Ok(Table { param: AbcParam::from_bc(mup_b(depth), c), damping: damping_exps(family, exps, depth)? })
}

/// Standard parameterization: unit-order input init, 1/√M elsewhere, width-free learning rates.
pub fn sp_table(depth: usize) -> Result<AbcParam, ParamError> {
    check_depth(depth)?;
    let b = per_layer(depth, Exp::zero(), exp(1, 2), exp(1, 2));
    Ok(AbcParam::from_bc(b, vec![Exp::zero(); depth]))
}

/// Lazy (NTK-style uniform) parameterization.
pub fn lazy_table(family: Family, exps: &FamilyExps, depth: usize) -> Result<Table, ParamError> {
    check_depth(depth)?;
    let (e_a, _) = exps.effective(family)?;
    let one = exp_int(1);
    let b = per_layer(depth, Exp::zero(), exp(1, 2), exp(1, 2));
    let c = per_layer(depth, Exp::zero(), one - e_a, one - e_a);
    Ok(Table { param: AbcParam::from_bc(b, c), damping: damping_exps(family, exps, depth)? })
}

/// Table for a named scheme. SP carries the μP damping exponents so that
/// fixed-exponent damping remains defined under it.
pub fn table_for(scheme: Scheme, family: Family, exps: &FamilyExps, depth: usize) -> Result<Table, ParamError> {
    match scheme {
        Scheme::Mup => mup_table(family, exps, depth),
        Scheme::Ntk => lazy_table(family, exps, depth),
        Scheme::Sp => Ok(Table { param: sp_table(depth)?, damping: damping_exps(family, exps, depth)? }),
    }
}

/// Maps every layer `(a, b, c)` to `(a + k, b - k, c - 2k)`.
pub fn apply_shift(param: &AbcParam, k: Exp) -> AbcParam {
    let two = exp_int(2);
    let layers = param
        .layers
        .iter()
        .map(|l| LayerExps { a: l.a + k, b: l.b - k, c: l.c - two * k })
        .collect();
    AbcParam { layers, base_init_std: param.base_init_std, base_lr: param.base_lr }
}

/// Widths a parameterization is evaluated at.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Widths {
    pub d_in: usize,
    pub hidden: usize,
}

/// Numeric per-layer constants obtained from a parameterization at a width.
#[derive(Debug, Clone, PartialEq)]
pub struct Materialized {
    pub multiplier: Vec<f64>,
    pub init_std: Vec<f64>,
    pub lr: Vec<f64>,
    /// Output-side damping (`ρ_B` or `ρ_L`), when the factor exists.
    pub rho_left: Vec<Option<f64>>,
    /// Activation-side damping (`ρ_A`, `ρ_R`, or the Gauss-Newton `ρ`).
    pub rho_right: Vec<Option<f64>>,
    pub bias_lr: f64,
    pub bias_std: f64,
}

fn pow_neg(m: f64, e: Exp) -> f64 {
    m.powf(-exp_to_f64(e))
}

/// Evaluates exponents at the hidden width. Every exponent, including those of
/// the input layer, refers to the hidden width; the input dimension only
/// enters as the fan-in constant `1/√d_in` on the input layer's init std.
pub fn materialize(
    param: &AbcParam,
    damping: &DampingExps,
    rho_prime: f64,
    widths: Widths,
) -> Result<Materialized, ParamError> {
    if widths.hidden == 0 {
        return Err(ParamError::NonPositiveWidth(widths.hidden));
    }
    if widths.d_in == 0 {
        return Err(ParamError::NonPositiveWidth(widths.d_in));
    }
    let m = widths.hidden as f64;
    let depth = param.depth();
    let mut out = Materialized {
        multiplier: Vec::with_capacity(depth),
        init_std: Vec::with_capacity(depth),
        lr: Vec::with_capacity(depth),
        rho_left: Vec::with_capacity(depth),
        rho_right: Vec::with_capacity(depth),
        bias_lr: param.base_lr * pow_neg(m, param.layers[0].c),
        bias_std: param.base_init_std,
    };
    for (l, e) in param.layers.iter().enumerate() {
        let fan_in = if l == 0 { 1.0 / (widths.d_in as f64).sqrt() } else { 1.0 };
        out.multiplier.push(pow_neg(m, e.a));
        out.init_std.push(param.base_init_std * pow_neg(m, e.b) * fan_in);
        out.lr.push(param.base_lr * pow_neg(m, e.c));
        out.rho_left.push(damping.left(l).map(|d| rho_prime * pow_neg(m, d)));
        out.rho_right.push(damping.right(l).map(|d| rho_prime * pow_neg(m, d)));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn v(xs: &[(i64, i64)]) -> Vec<Exp> {
        xs.iter().map(|&(n, d)| exp(n, d)).collect()
    }

    #[test]
    fn kfac_mup_depth_three() {
        let t = mup_table(Family::Kfac, &FamilyExps::default(), 3).unwrap();
        assert_eq!(t.param.b(), v(&[(0, 1), (1, 2), (1, 1)]));
        assert_eq!(t.param.c(), v(&[(0, 1), (0, 1), (0, 1)]));
        assert_eq!(
            t.damping,
            DampingExps::Kfac { d_a: Some(v(&[(0, 1), (-1, 1), (-1, 1)])), d_b: Some(v(&[(1, 1), (1, 1), (0, 1)])) }
        );
    }

    #[test]
    fn general_kfac_formula() {
        let exps = FamilyExps { e_a: exp(1, 3), e_b: exp(3, 4), e: exp(1, 2) };
        let t = mup_table(Family::Kfac, &exps, 4).unwrap();
        assert_eq!(t.param.c(), v(&[(-1, 4), (5, 12), (5, 12), (2, 3)]));
    }

    #[test]
    fn kfac_without_preconditioning_is_sgd() {
        let zero = FamilyExps { e_a: exp(0, 1), e_b: exp(0, 1), e: exp(1, 2) };
        for depth in 2..6 {
            let k = mup_table(Family::Kfac, &zero, depth).unwrap();
            let s = mup_table(Family::Sgd, &zero, depth).unwrap();
            assert_eq!(k.param, s.param);
            assert_eq!(k.damping, DampingExps::Kfac { d_a: None, d_b: None });
        }
    }

    #[test]
    fn exponent_ranges_are_enforced() {
        let bad = FamilyExps { e_a: exp(3, 2), ..Default::default() };
        assert!(matches!(mup_table(Family::Kfac, &bad, 3), Err(ParamError::ExponentRange { .. })));
        let bad_e = FamilyExps { e: exp(0, 1), ..Default::default() };
        assert!(mup_table(Family::Shampoo, &bad_e, 3).is_err());
        assert_eq!(sp_table(1), Err(ParamError::DepthTooSmall(1)));
    }

    #[test]
    fn shift_examples() {
        let t = mup_table(Family::Kfac, &FamilyExps::default(), 3).unwrap();
        assert_eq!(apply_shift(&t.param, Exp::zero()), t.param);
        let s = apply_shift(&t.param, exp(1, 2));
        assert_eq!(s.layers[2], LayerExps { a: exp(1, 2), b: exp(1, 2), c: exp(-1, 1) });
    }

    #[test]
    fn materialize_examples() {
        let mut p = sp_table(2).unwrap();
        p.layers[1].b = exp(1, 1);
        p.layers[1].c = exp(-1, 1);
        p.base_lr = 0.1;
        let d = DampingExps::GaussNewton { d: v(&[(0, 1), (1, 1)]) };
        let m = materialize(&p, &d, 2.0, Widths { d_in: 4, hidden: 256 }).unwrap();
        assert_eq!(m.init_std[1], 1.0 / 256.0);
        assert_eq!(m.init_std[0], 0.5);
        let m64 = materialize(&p, &d, 2.0, Widths { d_in: 4, hidden: 64 }).unwrap();
        assert!((m64.lr[1] - 6.4).abs() < 1e-12);
        let m100 = materialize(&p, &d, 2.0, Widths { d_in: 4, hidden: 100 }).unwrap();
        assert!((m100.rho_right[1].unwrap() - 0.02).abs() < 1e-15);
        assert!(materialize(&p, &d, 2.0, Widths { d_in: 4, hidden: 0 }).is_err());
    }

    #[test]
    fn parses_exponents() {
        assert_eq!(parse_exp("1/2").unwrap(), exp(1, 2));
        assert_eq!(parse_exp("-1").unwrap(), exp(-1, 1));
        assert_eq!(parse_exp("0.25").unwrap(), exp(1, 4));
        assert!(parse_exp("x").is_err());
        assert!(parse_exp("1/0").is_err());
    }

    proptest::proptest! {
        #[test]
        fn shift_is_invertible(n in -8i64..8, d in 1i64..6, depth in 2usize..7) {
            let k = exp(n, d);
            let p = sp_table(depth).unwrap();
            proptest::prop_assert_eq!(apply_shift(&apply_shift(&p, k), -k), p);
        }

        #[test]
        fn every_mup_table_shares_b(fi in 0usize..5, depth in 2usize..8) {
            let t = mup_table(Family::ALL[fi], &FamilyExps::default(), depth).unwrap();
            let b = t.param.b();
            proptest::prop_assert_eq!(b[0], Exp::zero());
            proptest::prop_assert_eq!(b[depth - 1], exp(1, 1));
            for x in &b[1..depth - 1] {
                proptest::prop_assert_eq!(*x, exp(1, 2));
            }
        }
    }
}
