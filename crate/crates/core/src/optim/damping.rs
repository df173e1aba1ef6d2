//! Damping strategies.

use serde::{Deserialize, Serialize};
use std::fmt;
use std::str::FromStr;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DampingStrategy {
    /// `ρ′ / M^d` with the table's damping exponent.
    FixedExponent,
    /// `ρ_A = sqrt((tr A / dim A) (dim B / tr B) ρ′)` and `ρ_B = 1 / ρ_A`.
    KfacHeuristic,
    /// Trace-proportional damping, `ρ_X = ρ′ tr(X)`, or `ρ′ tr(X) / dim X`
    /// when normalized.
    RescaledTrace,
    /// `ρ′ λ_max(X)`.
    MaxEigenvalue,
}

impl DampingStrategy {
    pub fn name(self) -> &'static str {
        match self {
            DampingStrategy::FixedExponent => "fixed_exponent",
            DampingStrategy::KfacHeuristic => "kfac_heuristic",
            DampingStrategy::RescaledTrace => "rescaled_trace",
            DampingStrategy::MaxEigenvalue => "max_eigenvalue",
        }
    }
}

impl fmt::Display for DampingStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for DampingStrategy {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "fixed_exponent" | "fixed" => Ok(DampingStrategy::FixedExponent),
            "kfac_heuristic" | "heuristic" => Ok(DampingStrategy::KfacHeuristic),
            "rescaled_trace" | "rescaled" => Ok(DampingStrategy::RescaledTrace),
            "max_eigenvalue" | "max_eig" => Ok(DampingStrategy::MaxEigenvalue),
            other => Err(format!("unknown damping strategy `{other}`")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DampingSpec {
    pub strategy: DampingStrategy,
    pub rho_prime: f64,
    /// Divide traces by the factor dimension (rescaled strategy only). The
    /// normalized form falls below the valid damping scale of hidden factors
    /// by one power of width.
    pub normalized: bool,
}

impl Default for DampingSpec {
    fn default() -> Self {
        DampingSpec { strategy: DampingStrategy::RescaledTrace, rho_prime: 1.0, normalized: false }
    }
}

/// What a strategy needs to know about one curvature factor.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FactorStats {
    pub trace: f64,
    pub dim: usize,
    /// Largest eigenvalue, when the factor was decomposed.
    pub lam_max: Option<f64>,
}

/// Damping for the output-side (`B`, `L`) and activation-side (`A`, `R`) factors.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct DampingValues {
    pub left: Option<f64>,
    pub right: Option<f64>,
    /// A degenerate statistic forced the `ρ′ ε` fallback.
    pub fallback: bool,
}

/// Evaluates a strategy on one layer. `fixed` holds the materialized
/// `ρ′ / M^d` values used by the fixed-exponent strategy; a side is only
/// damped when its stats (or fixed value) are present.
pub fn compute_damping(
    spec: &DampingSpec,
    left: Option<&FactorStats>,
    right: Option<&FactorStats>,
    fixed: (Option<f64>, Option<f64>),
) -> DampingValues {
    let rho = spec.rho_prime;
    let floor = rho * f64::EPSILON;
    let usable = |x: f64| x.is_finite() && x > 0.0;
    match spec.strategy {
        DampingStrategy::FixedExponent => DampingValues { left: fixed.0, right: fixed.1, fallback: false },
        DampingStrategy::RescaledTrace => {
            let mut fallback = false;
            let mut side = |s: Option<&FactorStats>| {
                s.map(|s| {
                    let v = if spec.normalized { rho * s.trace / s.dim as f64 } else { rho * s.trace };
                    if usable(v) {
                        v
                    } else {
                        fallback = true;
                        floor
                    }
                })
            };
            let left = side(left);
            let right = side(right);
            DampingValues { left, right, fallback }
        }
        DampingStrategy::KfacHeuristic => {
            let (a, b) = match (right, left) {
                (Some(a), Some(b)) => (a, b),
                _ => return DampingValues { left: left.map(|_| floor), right: right.map(|_| floor), fallback: true },
            };
            let rho_a = ((a.trace / a.dim as f64) * (b.dim as f64 / b.trace) * rho).sqrt();
            if usable(rho_a) && usable(1.0 / rho_a) {
                DampingValues { left: Some(1.0 / rho_a), right: Some(rho_a), fallback: false }
            } else {
                DampingValues { left: Some(floor), right: Some(floor), fallback: true }
            }
        }
        DampingStrategy::MaxEigenvalue => {
            let mut fallback = false;
            let mut side = |s: Option<&FactorStats>| {
                s.map(|s| match s.lam_max.map(|l| rho * l) {
                    Some(v) if usable(v) => v,
                    _ => {
                        fallback = true;
                        floor
                    }
                })
            };
            let left = side(left);
            let right = side(right);
            DampingValues { left, right, fallback }
        }
    }
}
