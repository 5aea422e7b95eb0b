//! Contraction certificates for the closed-loop market.
//!
//! For a single asset the closed loop is the scalar map
//! `T(x) = Proj_X[a·x + Proj_D d̂(x)]` with `d̂(x) = (r·x + c − β₂)/(q + β₁)`,
//! and `|a + r/(q + β₁)| < 1` certifies it as a contraction on `X`.
//!
//! With many assets the weighted projection couples the allocations. The
//! inverse Hessian `Q̃⁻¹` is replaced by the diagonal
//! `Λ⁻¹ = Q⁻¹ − ½·β₁w₂/(1 + β₁w₁)·I` (`w_j = Σ q_i^{-j}`), whose spectral
//! error is exactly `ε = ½·β₁w₂/(1 + β₁w₁)`. The resulting decoupled map
//! `T̃(x) = Proj_X[Ax + Proj_D d̃(x)]`, `d̃(x) = Λ⁻¹Rx + Q̃⁻¹c̃`, contracts
//! whenever `|a_i + φ_i r_i| < 1` for every asset.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::clearing::{CoupledQp, SupplyModel};
use crate::der::{clamp, DerParams, MarketState};
use crate::error::{Error, Result};
use crate::rng::{stream, stream_rng, uniform};

/// Verdict and supporting quantities of a stability test.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Certificate {
    /// `a_i + φ_i·r_i` per asset.
    pub margins: Vec<f64>,
    pub phi: Vec<f64>,
    pub certified: bool,
    /// Asset with the largest `|margin|`.
    pub worst_index: usize,
    /// Lipschitz bound on the certified map: per asset `a_i + φ_i r_i` when
    /// `φ_i r_i ≥ 0`, else `max(−a_i − φ_i r_i, a_i)`; the maximum over assets.
    pub contraction_factor: f64,
    pub w1: f64,
    pub w2: f64,
    pub epsilon: f64,
}

/// Diagonal surrogate `Λ⁻¹ = diag(φ)` of `Q̃⁻¹`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LambdaApprox {
    pub phi: Vec<f64>,
    pub w1: f64,
    pub w2: f64,
    /// `½·β₁w₂/(1 + β₁w₁)`
    pub epsilon: f64,
    /// Dense `‖Q̃⁻¹ − Λ⁻¹‖₂`, computed when `m ≤ DENSE_CHECK_MAX`.
    pub dense_error: Option<f64>,
}

/// Largest population for which [`lambda_approx`] also runs the dense check.
pub const DENSE_CHECK_MAX: usize = 50;

fn factor(a: f64, phi_r: f64) -> f64 {
    if phi_r >= 0.0 {
        a + phi_r
    } else {
        (-a - phi_r).max(a)
    }
}

fn argmax_abs(v: &[f64]) -> usize {
    v.iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |best, (i, m)| {
            if m.abs() > best.1 {
                (i, m.abs())
            } else {
                best
            }
        })
        .0
}

/// Single-asset test: margin `a + r/(q + β₁)`.
pub fn certify_single(p: &DerParams, sm: &SupplyModel) -> Certificate {
    let phi = 1.0 / (p.q + sm.beta1);
    let margin = p.a + phi * p.r;
    let w1 = 1.0 / p.q;
    let w2 = w1 * w1;
    Certificate {
        margins: vec![margin],
        phi: vec![phi],
        certified: margin.abs() < 1.0,
        worst_index: 0,
        contraction_factor: factor(p.a, phi * p.r),
        w1,
        w2,
        epsilon: 0.5 * sm.beta1 * w2 / (1.0 + sm.beta1 * w1),
    }
}

pub fn lambda_approx(q: &[f64], beta1: f64) -> Result<LambdaApprox> {
    if q.is_empty() {
        return Err(Error::EmptyPopulation);
    }
    if let Some(bad) = q.iter().find(|q| !(q.is_finite() && **q > 0.0)) {
        return Err(Error::InvalidParams {
            field: "q",
            reason: format!("must be finite and > 0, got {bad}"),
        });
    }
    if !(beta1.is_finite() && beta1 >= 0.0) {
        return Err(Error::InvalidParams {
            field: "beta1",
            reason: format!("must be finite and >= 0, got {beta1}"),
        });
    }
    let w1: f64 = q.iter().map(|q| 1.0 / q).sum();
    let w2: f64 = q.iter().map(|q| 1.0 / (q * q)).sum();
    let epsilon = 0.5 * beta1 * w2 / (1.0 + beta1 * w1);
    let phi = q.iter().map(|q| 1.0 / q - epsilon).collect::<Vec<_>>();
    let dense_error = (q.len() <= DENSE_CHECK_MAX).then(|| dense_approximation_error(q, beta1, &phi));
    Ok(LambdaApprox {
        phi,
        w1,
        w2,
        epsilon,
        dense_error,
    })
}

/// `‖Q̃⁻¹ − diag(phi)‖₂` from an explicit inverse and a symmetric eigensolve.
pub fn dense_approximation_error(q: &[f64], beta1: f64, phi: &[f64]) -> f64 {
    let m = q.len();
    let mut h = DMatrix::from_element(m, m, beta1);
    for (i, qi) in q.iter().enumerate() {
        h[(i, i)] += qi;
    }
    let inv = match h.cholesky() {
        Some(chol) => chol.inverse(),
        None => return f64::NAN,
    };
    let mut diff = inv;
    for (i, p) in phi.iter().enumerate() {
        diff[(i, i)] -= p;
    }
    // enforce exact symmetry before the symmetric eigensolver
    let diff = (&diff + diff.transpose()) * 0.5;
    diff.symmetric_eigenvalues()
        .iter()
        .fold(0.0, |acc: f64, v| acc.max(v.abs()))
}

/// Multi-asset test: margins `a_i + φ_i r_i` with `φ` from [`lambda_approx`].
pub fn certify_multi(population: &[DerParams], sm: &SupplyModel) -> Result<Certificate> {
    let q: Vec<f64> = population.iter().map(|p| p.q).collect();
    let approx = lambda_approx(&q, sm.beta1)?;
    let margins: Vec<f64> = population
        .iter()
        .zip(&approx.phi)
        .map(|(p, phi)| p.a + phi * p.r)
        .collect();
    let contraction_factor = population
        .iter()
        .zip(&approx.phi)
        .map(|(p, phi)| factor(p.a, phi * p.r))
        .fold(0.0, f64::max);
    Ok(Certificate {
        certified: margins.iter().all(|m| m.abs() < 1.0),
        worst_index: argmax_abs(&margins),
        margins,
        phi: approx.phi,
        contraction_factor,
        w1: approx.w1,
        w2: approx.w2,
        epsilon: approx.epsilon,
    })
}

/// Both sides of `a·x + Proj_{(X − a·x) ∩ D}(d) = Proj_X[a·x + Proj_D(d)]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DoubleProjection {
    pub lhs: f64,
    pub rhs: f64,
}

impl DoubleProjection {
    pub fn holds(&self) -> bool {
        self.lhs == self.rhs
    }
}

/// Evaluates both sides of the double-projection identity. The identity
/// needs `(X − a·x) ∩ D` to be nonempty.
pub fn double_projection(
    a: f64,
    x_box: (f64, f64),
    d_box: (f64, f64),
    x: f64,
    d: f64,
) -> DoubleProjection {
    let ax = a * x;
    let lhs = ax + clamp(d, d_box.0.max(x_box.0 - ax), d_box.1.min(x_box.1 - ax));
    let rhs = clamp(ax + clamp(d, d_box.0, d_box.1), x_box.0, x_box.1);
    DoubleProjection { lhs, rhs }
}

/// Exact single-asset closed loop on the state box,
/// `x ↦ Proj_X[a·x + Proj_D((r·x + c − β₂)/(q + β₁))]`.
pub fn single_closed_loop(p: &DerParams, sm: &SupplyModel, x: f64) -> f64 {
    let d_hat = (p.r * x + p.c - sm.beta2) / (p.q + sm.beta1);
    clamp(p.a * x + clamp(d_hat, p.d_lo, p.d_hi), p.x_lo, p.x_hi)
}

/// The decoupled closed loop `T̃` of a population.
#[derive(Debug, Clone)]
pub struct ApproxClosedLoop {
    population: Vec<DerParams>,
    phi: Vec<f64>,
    /// `Q̃⁻¹c̃`
    offset: Vec<f64>,
}

impl ApproxClosedLoop {
    pub fn new(population: &[DerParams], sm: &SupplyModel) -> Result<Self> {
        let q: Vec<f64> = population.iter().map(|p| p.q).collect();
        let approx = lambda_approx(&q, sm.beta1)?;
        let qp = CoupledQp::new(population, sm);
        let zero = MarketState::new(vec![0.0; population.len()])?;
        let offset = qp.unconstrained_maximizer(&zero)?;
        Ok(Self {
            population: population.to_vec(),
            phi: approx.phi,
            offset,
        })
    }

    /// `d̃(x) = Λ⁻¹Rx + Q̃⁻¹c̃`
    pub fn approx_maximizer(&self, x: &[f64]) -> Vec<f64> {
        self.population
            .iter()
            .zip(&self.phi)
            .zip(&self.offset)
            .zip(x)
            .map(|(((p, phi), k), x)| phi * p.r * x + k)
            .collect()
    }

    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        self.approx_maximizer(x)
            .iter()
            .zip(&self.population)
            .zip(x)
            .map(|((d, p), x)| clamp(p.a * x + clamp(*d, p.d_lo, p.d_hi), p.x_lo, p.x_hi))
            .collect()
    }
}

/// Largest observed ratio `‖T(x) − T(y)‖₂ / ‖x − y‖₂` over `pairs` pairs
/// drawn uniformly from the box `[lo, hi]`.
pub fn empirical_contraction<F>(map: F, lo: &[f64], hi: &[f64], pairs: usize, seed: u64) -> f64
where
    F: Fn(&[f64]) -> Vec<f64>,
{
    let mut rng = stream_rng(seed, stream::SAMPLING, 0);
    let draw = |rng: &mut _| -> Vec<f64> {
        lo.iter().zip(hi).map(|(l, h)| uniform(rng, *l, *h)).collect()
    };
    let mut worst: f64 = 0.0;
    for _ in 0..pairs {
        let x = draw(&mut rng);
        let y = draw(&mut rng);
        let den = norm_diff(&x, &y);
        if den == 0.0 {
            continue;
        }
        worst = worst.max(norm_diff(&map(&x), &map(&y)) / den);
    }
    worst
}

fn norm_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        .sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn reference_single(q: f64) -> DerParams {
        DerParams {
            a: 0.95,
            x_lo: 2500.0,
            x_hi: 7500.0,
            d_lo: 0.0,
            d_hi: 500.0,
            q,
            r: -0.095,
            c: 500.0,
        }
    }

    #[test]
    fn single_margins_reproduce_reported_values() {
        let sm = SupplyModel::new(0.04, 20.0).unwrap();
        let cert = certify_single(&reference_single(0.005), &sm);
        assert!((cert.margins[0] + 1.1611).abs() < 1e-4);
        assert!(!cert.certified);

        let cert = certify_single(&reference_single(0.2), &sm);
        assert!((cert.margins[0] - 0.5542).abs() < 1e-4);
        assert!(cert.certified);
        assert_eq!(cert.contraction_factor, 0.95);
    }

    #[test]
    fn decoupled_single_asset() {
        let p = DerParams {
            a: 0.5,
            x_lo: 0.0,
            x_hi: 1.0,
            d_lo: 0.0,
            d_hi: 1.0,
            q: 1.0,
            r: 0.0,
            c: 0.0,
        };
        let cert = certify_single(&p, &SupplyModel::new(1.0, 1.0).unwrap());
        assert_eq!(cert.margins, vec![0.5]);
        assert!(cert.certified);
    }

    #[test]
    fn lambda_approx_two_unit_assets() {
        let approx = lambda_approx(&[1.0, 1.0], 1.0).unwrap();
        assert_eq!((approx.w1, approx.w2), (2.0, 2.0));
        assert!((approx.epsilon - 1.0 / 3.0).abs() < 1e-15);
        for phi in &approx.phi {
            assert!((phi - 2.0 / 3.0).abs() < 1e-15);
        }
        assert!((approx.dense_error.unwrap() - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn lambda_approx_without_coupling() {
        let approx = lambda_approx(&[2.0, 4.0], 0.0).unwrap();
        assert_eq!(approx.phi, vec![0.5, 0.25]);
        assert_eq!(approx.epsilon, 0.0);
    }

    #[test]
    fn lambda_approx_reference_multi() {
        let approx = lambda_approx(&vec![0.005; 100], 0.008).unwrap();
        assert!((approx.w1 - 20_000.0).abs() < 1e-6);
        assert!((approx.w2 - 4.0e6).abs() < 1e-3);
        assert!((approx.epsilon - 16_000.0 / 161.0).abs() < 1e-9);
        assert!((approx.phi[0] - (200.0 - 16_000.0 / 161.0)).abs() < 1e-9);
        assert!((approx.epsilon - 99.38).abs() < 5e-3);
        assert!(approx.dense_error.is_none());
    }

    #[test]
    fn lambda_approx_rejects_bad_input() {
        assert!(lambda_approx(&[], 1.0).is_err());
        assert!(lambda_approx(&[1.0, -1.0], 1.0).is_err());
        assert!(lambda_approx(&[1.0], f64::NAN).is_err());
    }

    #[test]
    fn multi_and_single_agree_on_reported_settings() {
        let sm = SupplyModel::new(0.04, 20.0).unwrap();
        for q in [0.005, 0.2] {
            let p = reference_single(q);
            let single = certify_single(&p, &sm);
            let multi = certify_multi(&[p], &sm).unwrap();
            assert_eq!(single.certified, multi.certified);
            // Λ keeps half of the exact rank-one correction β₁/(q(q + β₁))
            let exact = 1.0 / q - sm.beta1 / (q * (q + sm.beta1));
            let half = 1.0 / q - 0.5 * sm.beta1 / (q * (q + sm.beta1));
            assert!((single.phi[0] - exact).abs() < 1e-9 * exact.abs());
            assert!((multi.phi[0] - half).abs() < 1e-9 * half.abs());
        }
    }

    #[test]
    fn double_projection_examples() {
        let dp = double_projection(1.0, (-1.0, 1.0), (-2.0, 2.0), 0.0, 3.0);
        assert_eq!((dp.lhs, dp.rhs), (1.0, 1.0));
        let dp = double_projection(0.5, (0.0, 10.0), (-2.0, 2.0), 4.0, 1.0);
        assert_eq!((dp.lhs, dp.rhs), (3.0, 3.0));
    }

    #[test]
    fn identity_map_has_unit_ratio() {
        let lo = [0.0, -1.0, 3.0];
        let hi = [1.0, 1.0, 4.0];
        let ratio = empirical_contraction(|x| x.to_vec(), &lo, &hi, 200, 3);
        assert!((ratio - 1.0).abs() < 1e-12);
    }

    #[test]
    fn single_closed_loop_matches_clamped_dynamics() {
        let sm = SupplyModel::new(0.04, 20.0).unwrap();
        let p = reference_single(0.005);
        // d̂(5000) = (−475 + 500 − 20)/0.045 = 111.1…, interior to Ω
        let next = single_closed_loop(&p, &sm, 5000.0);
        assert!((next - (4750.0 + 5.0 / 0.045)).abs() < 1e-9);
    }
}
