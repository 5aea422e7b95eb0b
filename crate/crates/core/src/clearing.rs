//! Per-period competitive equilibrium.
//!
//! The clearing price is the root of the excess demand
//! `D(λ) − S(λ)`, where `D` is the sum of the bid curves and
//! `S(λ) = (λ − β₂)/β₁` is the supplier's profit-maximizing output. `D` is
//! nonincreasing and `S` strictly increasing, so the root is unique and a
//! plain bisection on `λ` finds it. The same allocation solves the social
//! welfare QP
//!
//! ```text
//! max  −½ dᵀQ̃d + dᵀ(Rx + c̃)   s.t.  d ∈ Ω(x)
//! ```
//!
//! with `Q̃ = diag(q) + β₁·11ᵀ` and `c̃ = c − β₂·1`; [`CoupledQp::solve_projected_gradient`]
//! solves that QP directly and serves as an independent check.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::bidding::{aggregate_demand, BidCurve};
use crate::der::{clamp, DerParams, FeasibleInput, MarketState};
use crate::error::{Error, Result};

/// Quadratic supply cost `c(s) = ½·β₁·s² + β₂·s`; marginal cost `β₁·s + β₂`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SupplyModel {
    pub beta1: f64,
    pub beta2: f64,
}

impl SupplyModel {
    pub fn new(beta1: f64, beta2: f64) -> Result<Self> {
        let sm = Self { beta1, beta2 };
        sm.validate()?;
        Ok(sm)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.beta1.is_finite() && self.beta1 > 0.0) {
            return Err(Error::InvalidParams {
                field: "beta1",
                reason: format!("must be finite and > 0, got {}", self.beta1),
            });
        }
        if !(self.beta2.is_finite() && self.beta2 > 0.0) {
            return Err(Error::InvalidParams {
                field: "beta2",
                reason: format!("must be finite and > 0, got {}", self.beta2),
            });
        }
        Ok(())
    }

    pub fn with_base_price(&self, beta2: f64) -> Self {
        Self { beta2, ..*self }
    }

    /// Profit-maximizing supply at `price`.
    pub fn supply_at(&self, price: f64) -> f64 {
        (price - self.beta2) / self.beta1
    }

    pub fn marginal_cost(&self, supply: f64) -> f64 {
        self.beta1 * supply + self.beta2
    }
}

/// Result of one market clearing.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClearingOutcome {
    pub lambda_star: f64,
    pub d_star: Vec<f64>,
    pub s_star: f64,
    /// `|Σd − s|`
    pub gap: f64,
    pub kkt_residual: f64,
    /// Bisection steps taken.
    pub iterations: usize,
}

impl ClearingOutcome {
    pub fn total_demand(&self) -> f64 {
        self.d_star.iter().sum()
    }
}

/// Default bracket-width tolerance: `1e-10·max(1, |β₂|)`.
pub fn default_tolerance(sm: &SupplyModel) -> f64 {
    1e-10 * sm.beta2.abs().max(1.0)
}

const MAX_EXPANSIONS: usize = 200;

/// Clears the market formed by `curves` against `sm`.
///
/// Bisects on the price until the bracket is at most `tol` wide, then
/// solves the excess-demand equation exactly on the linear pieces active in
/// the bracket; a solution replaces the midpoint only if it stays in the
/// bracket and lowers `|D − S|`.
pub fn clear_market(curves: &[BidCurve], sm: &SupplyModel, tol: f64) -> Result<ClearingOutcome> {
    if curves.is_empty() {
        return Err(Error::EmptyPopulation);
    }
    if !(tol > 0.0) {
        return Err(Error::InvalidParams {
            field: "tol",
            reason: format!("must be > 0, got {tol}"),
        });
    }
    let excess = |price: f64| aggregate_demand(curves, price) - sm.supply_at(price);

    let sum_lo: f64 = curves.iter().map(|c| c.omega.lo).sum();
    let sum_hi: f64 = curves.iter().map(|c| c.omega.hi).sum();
    let mut lo = sm.marginal_cost(sum_lo);
    let mut hi = sm.marginal_cost(sum_hi);
    let mut f_lo = excess(lo);
    let mut f_hi = excess(hi);

    let mut width = (hi - lo).max(1.0);
    let mut n = 0;
    while !(f_lo >= 0.0) && n < MAX_EXPANSIONS && f_lo.is_finite() {
        lo -= width;
        width *= 2.0;
        f_lo = excess(lo);
        n += 1;
    }
    let mut width = (hi - lo).max(1.0);
    let mut n = 0;
    while !(f_hi <= 0.0) && n < MAX_EXPANSIONS && f_hi.is_finite() {
        hi += width;
        width *= 2.0;
        f_hi = excess(hi);
        n += 1;
    }
    if !(f_lo >= 0.0 && f_hi <= 0.0) {
        return Err(Error::BracketFailure {
            lo,
            hi,
            excess_lo: f_lo,
            excess_hi: f_hi,
        });
    }

    let mut iterations = 0;
    let lambda = if f_lo == 0.0 {
        lo
    } else if f_hi == 0.0 {
        hi
    } else {
        loop {
            if hi - lo <= tol {
                break polish(curves, sm, lo, hi);
            }
            let mid = lo + 0.5 * (hi - lo);
            if mid <= lo || mid >= hi {
                break polish(curves, sm, lo, hi);
            }
            iterations += 1;
            let f = excess(mid);
            if f > 0.0 {
                lo = mid;
            } else if f < 0.0 {
                hi = mid;
            } else {
                break mid;
            }
        }
    };

    let d_star: Vec<f64> = curves.iter().map(|c| c.bid(lambda)).collect();
    let s_star = sm.supply_at(lambda);
    let gap = (d_star.iter().sum::<f64>() - s_star).abs();
    let mut outcome = ClearingOutcome {
        lambda_star: lambda,
        d_star,
        s_star,
        gap,
        kkt_residual: 0.0,
        iterations,
    };
    outcome.kkt_residual = kkt_residual(&outcome, curves, sm);
    Ok(outcome)
}

/// Best price in `[lo, hi]` among the midpoint, the endpoints and the exact
/// roots of the excess demand on the pieces active at `lo`, the midpoint
/// and `hi`, each clamped into the bracket. Ranked by `|D − S|`; ties keep
/// the earlier candidate, so the midpoint wins unless beaten.
fn polish(curves: &[BidCurve], sm: &SupplyModel, lo: f64, hi: f64) -> f64 {
    let mid = lo + 0.5 * (hi - lo);
    let abs_excess = |p: f64| (aggregate_demand(curves, p) - sm.supply_at(p)).abs();
    let mut best = (abs_excess(mid), mid);
    for at in [lo, mid, hi] {
        let candidate = clamp(piece_root(curves, sm, at), lo, hi);
        for p in [candidate, at] {
            let f = abs_excess(p);
            if f < best.0 {
                best = (f, p);
            }
        }
    }
    best.1
}

/// Root of the excess demand with every bid frozen on the piece it
/// occupies at price `at`.
fn piece_root(curves: &[BidCurve], sm: &SupplyModel, at: f64) -> f64 {
    // λ·(Σ_int 1/q + 1/β₁) = Σ_int u/q + Σ_sat bound + β₂/β₁
    let mut num = sm.beta2 / sm.beta1;
    let mut den = 1.0 / sm.beta1;
    for c in curves {
        let raw = (c.marginal_value - at) / c.params.q;
        if raw <= c.omega.lo {
            num += c.omega.lo;
        } else if raw >= c.omega.hi {
            num += c.omega.hi;
        } else {
            num += c.marginal_value / c.params.q;
            den += 1.0 / c.params.q;
        }
    }
    num / den
}

/// Largest violation of the welfare-problem optimality conditions.
///
/// Per asset, with `g = (r·x + c) − λ − q·d` the marginal payoff: `|g|` for
/// an interior allocation, `max(0, −g)` at the upper bound, `max(0, g)` at
/// the lower bound, plus any distance of `d` outside Ω. Market-wide terms are
/// `|λ − β₁·s − β₂|` and `|Σd − s|`.
pub fn kkt_residual(outcome: &ClearingOutcome, curves: &[BidCurve], sm: &SupplyModel) -> f64 {
    if outcome.d_star.len() != curves.len() {
        return f64::INFINITY;
    }
    let lambda = outcome.lambda_star;
    let mut worst = (lambda - sm.marginal_cost(outcome.s_star)).abs();
    worst = worst.max((outcome.total_demand() - outcome.s_star).abs());
    for (c, &d) in curves.iter().zip(&outcome.d_star) {
        let omega = c.omega;
        let outside = (omega.lo - d).max(d - omega.hi).max(0.0);
        let g = c.marginal_value - lambda - c.params.q * d;
        let stationarity = if omega.lo == omega.hi {
            0.0
        } else if d >= omega.hi {
            (-g).max(0.0)
        } else if d <= omega.lo {
            g.max(0.0)
        } else {
            g.abs()
        };
        worst = worst.max(outside).max(stationarity);
    }
    worst
}

/// The welfare QP of one period with the rank-one Hessian kept implicit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoupledQp {
    pub q: Vec<f64>,
    pub r: Vec<f64>,
    pub c: Vec<f64>,
    /// Coupling weight of `11ᵀ`; zero gives a decoupled problem.
    pub beta1: f64,
    pub beta2: f64,
}

/// Default size cap of the projected-gradient oracle.
pub const ORACLE_MAX_ASSETS: usize = 50;
const ORACLE_MAX_ITERS: usize = 1_000_000;

impl CoupledQp {
    pub fn new(population: &[DerParams], sm: &SupplyModel) -> Self {
        Self {
            q: population.iter().map(|p| p.q).collect(),
            r: population.iter().map(|p| p.r).collect(),
            c: population.iter().map(|p| p.c).collect(),
            beta1: sm.beta1,
            beta2: sm.beta2,
        }
    }

    pub fn len(&self) -> usize {
        self.q.len()
    }

    pub fn is_empty(&self) -> bool {
        self.q.is_empty()
    }

    /// `Rx + c̃`
    pub fn linear_term(&self, x: &MarketState) -> Result<Vec<f64>> {
        self.check_len(x.len())?;
        Ok(self
            .r
            .iter()
            .zip(&self.c)
            .zip(&x.x)
            .map(|((r, c), x)| r * x + c - self.beta2)
            .collect())
    }

    /// `Q̃⁻¹ b` in O(m) via the Sherman–Morrison formula
    /// `Q̃⁻¹ = Q⁻¹ − β₁ Q⁻¹11ᵀQ⁻¹ / (1 + β₁ Σ 1/q_i)`.
    pub fn solve(&self, b: &[f64]) -> Vec<f64> {
        let w1: f64 = self.q.iter().map(|q| 1.0 / q).sum();
        let y: Vec<f64> = b.iter().zip(&self.q).map(|(b, q)| b / q).collect();
        let shift = self.beta1 * y.iter().sum::<f64>() / (1.0 + self.beta1 * w1);
        y.iter()
            .zip(&self.q)
            .map(|(y, q)| y - shift / q)
            .collect()
    }

    /// `d̂(x) = Q̃⁻¹(Rx + c̃)`
    pub fn unconstrained_maximizer(&self, x: &MarketState) -> Result<Vec<f64>> {
        Ok(self.solve(&self.linear_term(x)?))
    }

    /// `Q̃` as a dense matrix.
    pub fn dense_hessian(&self) -> DMatrix<f64> {
        let m = self.len();
        let mut h = DMatrix::from_element(m, m, self.beta1);
        for (i, q) in self.q.iter().enumerate() {
            h[(i, i)] += q;
        }
        h
    }

    /// `Q̃ d − (Rx + c̃)`, the gradient of the minimization form.
    pub fn gradient(&self, d: &[f64], linear: &[f64]) -> Vec<f64> {
        let total: f64 = d.iter().sum();
        d.iter()
            .zip(&self.q)
            .zip(linear)
            .map(|((d, q), b)| q * d + self.beta1 * total - b)
            .collect()
    }

    /// Minimizes `½ dᵀQ̃d − dᵀ(Rx + c̃)` over the box `omega` by projected
    /// gradient descent with step `1/L`, `L = max q_i + β₁·m`.
    ///
    /// Stops once successive iterates are closer than `1e-12` (or a few ulps
    /// of the iterate norm, whichever is larger).
    pub fn solve_projected_gradient(
        &self,
        x: &MarketState,
        omega: &[FeasibleInput],
    ) -> Result<Vec<f64>> {
        let m = self.len();
        if m > ORACLE_MAX_ASSETS {
            return Err(Error::InvalidParams {
                field: "m",
                reason: format!("oracle is capped at {ORACLE_MAX_ASSETS} assets, got {m}"),
            });
        }
        self.check_len(omega.len())?;
        let linear = self.linear_term(x)?;
        let lipschitz = self.q.iter().cloned().fold(0.0, f64::max) + self.beta1 * m as f64;
        let step = 1.0 / lipschitz;

        let mut z: Vec<f64> = self
            .solve(&linear)
            .iter()
            .zip(omega)
            .map(|(d, o)| o.clamp(*d))
            .collect();
        let mut moved = f64::INFINITY;
        for _ in 0..ORACLE_MAX_ITERS {
            let g = self.gradient(&z, &linear);
            moved = 0.0;
            let mut norm = 0.0;
            for ((zi, gi), o) in z.iter_mut().zip(&g).zip(omega) {
                let next = clamp(*zi - step * gi, o.lo, o.hi);
                moved += (next - *zi) * (next - *zi);
                norm += next * next;
                *zi = next;
            }
            moved = moved.sqrt();
            if moved < 1e-12_f64.max(8.0 * f64::EPSILON * norm.sqrt()) {
                return Ok(z);
            }
        }
        Err(Error::NonConvergence {
            iterations: ORACLE_MAX_ITERS,
            residual: moved,
        })
    }

    fn check_len(&self, got: usize) -> Result<()> {
        if got != self.len() {
            return Err(Error::DimensionMismatch {
                expected: self.len(),
                got,
            });
        }
        Ok(())
    }
}

/// Dense `Q̃⁻¹ b` by Cholesky factorization, for cross-checks on small `m`.
pub fn dense_solve(qp: &CoupledQp, b: &[f64]) -> Option<Vec<f64>> {
    let chol = qp.dense_hessian().cholesky()?;
    let x = chol.solve(&DVector::from_column_slice(b));
    Some(x.iter().copied().collect())
}
