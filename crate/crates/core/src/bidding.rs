//! Bid curves: each asset's demand as a clamped affine function of price.

use serde::{Deserialize, Serialize};

use crate::der::{DerParams, FeasibleInput};
use crate::error::Result;

/// Immutable snapshot of one asset's bid at a given state.
///
/// The curve is `d(λ) = clamp((r·x + c − λ)/q, Ω.lo, Ω.hi)`: flat at `Ω.hi`
/// for prices up to the upper-saturation threshold, linear with slope `−1/q`
/// in between, and flat at `Ω.lo` beyond the lower-saturation threshold.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BidCurve {
    pub params: DerParams,
    pub x: f64,
    pub omega: FeasibleInput,
    /// Marginal utility at zero consumption, `r·x + c`.
    pub marginal_value: f64,
}

impl BidCurve {
    /// Builds the curve for an in-box state.
    pub fn new(params: &DerParams, x: f64) -> Result<Self> {
        let omega = params.feasible_input_set(x)?;
        Ok(Self {
            params: *params,
            x,
            omega,
            marginal_value: params.r * x + params.c,
        })
    }

    /// Unconstrained demand at zero price, `(r·x + c)/q`.
    pub fn intercept(&self) -> f64 {
        self.marginal_value / self.params.q
    }

    pub fn slope(&self) -> f64 {
        -1.0 / self.params.q
    }

    pub fn bid(&self, price: f64) -> f64 {
        self.omega
            .clamp((self.marginal_value - price) / self.params.q)
    }

    /// `(λ_sat_hi, λ_sat_lo)`: at or below the first price the bid sits at
    /// `Ω.hi`, at or above the second it sits at `Ω.lo`.
    pub fn thresholds(&self) -> (f64, f64) {
        let q = self.params.q;
        (
            self.marginal_value - q * self.omega.hi,
            self.marginal_value - q * self.omega.lo,
        )
    }

    /// Payoff `v(d, x) − λ·d` of consuming `d` at `price`.
    pub fn payoff(&self, d: f64, price: f64) -> f64 {
        -0.5 * self.params.q * d * d + (self.marginal_value - price) * d
    }
}

/// Sum of all bids at `price`, accumulated in slice order.
pub fn aggregate_demand(curves: &[BidCurve], price: f64) -> f64 {
    curves.iter().map(|c| c.bid(price)).sum()
}
