//! Scalar asset models: dynamics `x⁺ = a·x + d`, state and power boxes,
//! the feasible input interval, and the policy used while a state is
//! outside its box.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One demand-side asset: dynamics, constraints and quadratic utility
/// `v(d, x) = -½·q·d² + (r·x + c)·d`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DerParams {
    /// Dissipation rate, `0 < a ≤ 1`.
    pub a: f64,
    pub x_lo: f64,
    pub x_hi: f64,
    pub d_lo: f64,
    pub d_hi: f64,
    /// Utility curvature, `q > 0`.
    pub q: f64,
    /// State coupling of the marginal utility.
    pub r: f64,
    /// Utility offset.
    pub c: f64,
}

/// Closed interval `[lo, hi]` of admissible consumption for one period.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FeasibleInput {
    pub lo: f64,
    pub hi: f64,
}

impl FeasibleInput {
    pub fn is_empty(&self) -> bool {
        self.lo > self.hi
    }

    pub fn contains(&self, d: f64) -> bool {
        self.lo <= d && d <= self.hi
    }

    pub fn clamp(&self, d: f64) -> f64 {
        clamp(d, self.lo, self.hi)
    }

    pub fn width(&self) -> f64 {
        self.hi - self.lo
    }
}

/// Result of the controllability test.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Controllability {
    pub controllable: bool,
    /// `a·x_lo + d_hi − x_lo`
    pub lower_margin: f64,
    /// `x_hi − a·x_hi − d_lo`
    pub upper_margin: f64,
}

/// Projection of a scalar onto `[lo, hi]`.
///
/// Unlike `f64::clamp` this does not panic when `lo > hi`; callers are
/// expected to have checked non-emptiness.
#[inline]
pub fn clamp(v: f64, lo: f64, hi: f64) -> f64 {
    if v < lo {
        lo
    } else if v > hi {
        hi
    } else {
        v
    }
}

impl DerParams {
    /// Checks the structural invariants (finite values, ordered boxes,
    /// `0 < a ≤ 1`, `q > 0`). Controllability is checked separately.
    pub fn validate(&self) -> Result<()> {
        let fields = [
            ("a", self.a),
            ("x_lo", self.x_lo),
            ("x_hi", self.x_hi),
            ("d_lo", self.d_lo),
            ("d_hi", self.d_hi),
            ("q", self.q),
            ("r", self.r),
            ("c", self.c),
        ];
        for (field, v) in fields {
            if !v.is_finite() {
                return Err(invalid(field, format!("must be finite, got {v}")));
            }
        }
        if !(self.a > 0.0 && self.a <= 1.0) {
            return Err(invalid("a", format!("must satisfy 0 < a <= 1, got {}", self.a)));
        }
        if !(self.x_lo < self.x_hi) {
            return Err(invalid(
                "x_lo",
                format!("must be < x_hi, got [{}, {}]", self.x_lo, self.x_hi),
            ));
        }
        if !(self.d_lo < self.d_hi) {
            return Err(invalid(
                "d_lo",
                format!("must be < d_hi, got [{}, {}]", self.d_lo, self.d_hi),
            ));
        }
        if !(self.q > 0.0) {
            return Err(invalid("q", format!("must be > 0, got {}", self.q)));
        }
        Ok(())
    }

    /// `x` lies in the closed state box.
    pub fn in_box(&self, x: f64) -> bool {
        self.x_lo <= x && x <= self.x_hi
    }

    pub fn check_controllability(&self) -> Controllability {
        let lower_margin = self.a * self.x_lo + self.d_hi - self.x_lo;
        let upper_margin = self.x_hi - self.a * self.x_hi - self.d_lo;
        Controllability {
            controllable: lower_margin > 0.0 && upper_margin > 0.0,
            lower_margin,
            upper_margin,
        }
    }

    /// `(X − a·x) ∩ D` for an in-box state.
    pub fn feasible_input_set(&self, x: f64) -> Result<FeasibleInput> {
        if !self.in_box(x) {
            return Err(Error::OutOfBox {
                x,
                lo: self.x_lo,
                hi: self.x_hi,
            });
        }
        let ax = self.a * x;
        Ok(FeasibleInput {
            lo: self.d_lo.max(self.x_lo - ax),
            hi: self.d_hi.min(self.x_hi - ax),
        })
    }

    pub fn step(&self, x: f64, d: f64) -> f64 {
        self.a * x + d
    }

    /// Full power below the box, minimum power above it.
    pub fn fallback_policy(&self, x: f64) -> Result<f64> {
        if x < self.x_lo {
            Ok(self.d_hi)
        } else if x > self.x_hi {
            Ok(self.d_lo)
        } else {
            Err(Error::InsideBox {
                x,
                lo: self.x_lo,
                hi: self.x_hi,
            })
        }
    }

    /// Distance from `x` to the state box (zero inside).
    pub fn box_distance(&self, x: f64) -> f64 {
        if x < self.x_lo {
            self.x_lo - x
        } else if x > self.x_hi {
            x - self.x_hi
        } else {
            0.0
        }
    }
}

fn invalid(field: &'static str, reason: String) -> Error {
    Error::InvalidParams { field, reason }
}

/// Vector of per-asset energy states.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MarketState {
    pub x: Vec<f64>,
}

impl MarketState {
    pub fn new(x: Vec<f64>) -> Result<Self> {
        if let Some(v) = x.iter().find(|v| !v.is_finite()) {
            return Err(invalid("x", format!("state entries must be finite, got {v}")));
        }
        Ok(Self { x })
    }

    pub fn len(&self) -> usize {
        self.x.len()
    }

    pub fn is_empty(&self) -> bool {
        self.x.is_empty()
    }

    /// Per-entry flag: `x_i ∈ [x_lo_i, x_hi_i]`.
    pub fn in_box(&self, params: &[DerParams]) -> Vec<bool> {
        self.x
            .iter()
            .zip(params)
            .map(|(&x, p)| p.in_box(x))
            .collect()
    }

    pub fn distance(&self, other: &MarketState) -> f64 {
        self.x
            .iter()
            .zip(&other.x)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt()
    }
}
