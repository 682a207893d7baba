//! Closed forms for the single-bus example: a base-load unit `B`, a peaker
//! `P` and a wind producer `W` serving a fixed demand, with available wind
//! uniform on `[μ - √3σ, μ + √3σ]`.
//!
//! `B` offers at 1 but costs `ε`; `P` offers at `1/ρ` but costs 1. `B` cannot
//! ramp, `P` ramps freely, and wind is free.

use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::market::{Market, MarketError, Participant, ParticipantKind, QuadraticCost, UNLIMITED};
use crate::network::NetworkModel;
use crate::options::Role;
use crate::scenario::{
    make_uniform_grid, uniform_grid_points, weighted_cvar, weighted_mean, weighted_variance,
    ScenarioError,
};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CopperplateError {
    #[error("invalid instance: {0}")]
    Invalid(String),
    #[error("scenario {omega} lies outside [{lo}, {hi}]")]
    OutsideSupport { omega: f64, lo: f64, hi: f64 },
    #[error("(q, K) = ({q}, {k}) is off the line 2q + K = 1/ρ")]
    OffManifold { q: f64, k: f64 },
    #[error("Δ = {delta} is outside the optimal range [{lo}, {hi}]")]
    VolumeOutOfRange { delta: f64, lo: f64, hi: f64 },
    #[error(transparent)]
    Scenario(#[from] ScenarioError),
    #[error(transparent)]
    Market(#[from] MarketError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CopperplateInstance {
    pub mu: f64,
    pub sigma: f64,
    pub rho: f64,
    pub epsilon: f64,
    pub d: f64,
}

impl Default for CopperplateInstance {
    /// μ = 10, σ = 1, ρ = √3/20, ε = 0.5, d = 20.
    fn default() -> Self {
        Self {
            mu: 10.0,
            sigma: 1.0,
            rho: 3f64.sqrt() / 20.0,
            epsilon: 0.5,
            d: 20.0,
        }
    }
}

/// Index of each unit in dispatch arrays.
pub const BASE: usize = 0;
pub const PEAKER: usize = 1;
pub const WIND: usize = 2;

impl CopperplateInstance {
    pub fn new(
        mu: f64,
        sigma: f64,
        rho: f64,
        epsilon: f64,
        d: f64,
    ) -> Result<Self, CopperplateError> {
        let inst = Self {
            mu,
            sigma,
            rho,
            epsilon,
            d,
        };
        inst.validate()?;
        Ok(inst)
    }

    pub fn validate(&self) -> Result<(), CopperplateError> {
        let h = self.half_width();
        let bad = |m: &str| Err(CopperplateError::Invalid(m.into()));
        if !(self.sigma >= 0.0) || !self.mu.is_finite() {
            return bad("sigma must be nonnegative and mu finite");
        }
        if !(self.rho > 0.0 && self.rho <= 1.0) {
            return bad("rho must lie in (0, 1]");
        }
        if !(self.epsilon > 0.0 && self.epsilon < 1.0) {
            return bad("epsilon must lie in (0, 1)");
        }
        if self.mu - h < 0.0 {
            return bad("mu - sqrt(3) sigma must be nonnegative");
        }
        if !(self.d >= self.mu + h) {
            return bad("demand must cover mu + sqrt(3) sigma");
        }
        Ok(())
    }

    /// `√3σ`, the largest wind shortfall.
    pub fn half_width(&self) -> f64 {
        3f64.sqrt() * self.sigma
    }

    pub fn support(&self) -> (f64, f64) {
        (self.mu - self.half_width(), self.mu + self.half_width())
    }

    pub fn peak_price(&self) -> f64 {
        1.0 / self.rho
    }

    fn check_omega(&self, omega: f64) -> Result<(), CopperplateError> {
        let (lo, hi) = self.support();
        let tol = 1e-12 * (1.0 + self.mu.abs());
        if omega < lo - tol || omega > hi + tol {
            return Err(CopperplateError::OutsideSupport { omega, lo, hi });
        }
        Ok(())
    }

    /// The instance as a market on `n` equiprobable grid scenarios, with
    /// participants `B`, `P`, `W` and the demand, in that order.
    pub fn market(&self, n: usize) -> Result<Market, CopperplateError> {
        let set = Arc::new(make_uniform_grid(self.mu, self.sigma, n)?);
        let participants = vec![
            Participant {
                id: "B".into(),
                bus: 0,
                kind: ParticipantKind::Dispatchable {
                    capacity: UNLIMITED,
                    ramp: 0.0,
                },
                offered_cost: QuadraticCost::linear(1.0),
                true_cost: QuadraticCost::linear(self.epsilon),
            },
            Participant {
                id: "P".into(),
                bus: 0,
                kind: ParticipantKind::Dispatchable {
                    capacity: UNLIMITED,
                    ramp: UNLIMITED,
                },
                offered_cost: QuadraticCost::linear(1.0 / self.rho),
                true_cost: QuadraticCost::linear(1.0),
            },
            Participant {
                id: "W".into(),
                bus: 0,
                kind: ParticipantKind::Variable {
                    capacity: self.mu + self.half_width(),
                },
                offered_cost: QuadraticCost::linear(0.0),
                true_cost: QuadraticCost::linear(0.0),
            },
            Participant {
                id: "D".into(),
                bus: 0,
                kind: ParticipantKind::Consumer { demand: self.d },
                offered_cost: QuadraticCost::linear(0.0),
                true_cost: QuadraticCost::linear(0.0),
            },
        ];
        Ok(Market::new(NetworkModel::copperplate(), participants, set)?)
    }
}

/// Forward dispatch `(X_B, X_P, X_W)` and price.
pub fn analytic_forward(inst: &CopperplateInstance) -> ([f64; 3], f64) {
    ([inst.d - inst.mu, 0.0, inst.mu], 1.0)
}

/// Real-time dispatch `(x_B, x_P, x_W)` and price in scenario `omega`. The
/// price is `1/ρ` on the closed interval `ω ≤ μ`.
pub fn analytic_realtime(
    inst: &CopperplateInstance,
    omega: f64,
) -> Result<([f64; 3], f64), CopperplateError> {
    inst.check_omega(omega)?;
    let shortfall = (inst.mu - omega).max(0.0);
    let price = if omega <= inst.mu {
        1.0 / inst.rho
    } else {
        0.0
    };
    Ok(([inst.d - inst.mu, shortfall, omega.min(inst.mu)], price))
}

/// `(π_B, π_P, π_W)` in scenario `omega`.
pub fn analytic_profits(
    inst: &CopperplateInstance,
    omega: f64,
) -> Result<[f64; 3], CopperplateError> {
    inst.check_omega(omega)?;
    let shortfall = (inst.mu - omega).max(0.0);
    Ok([
        (inst.d - inst.mu) * (1.0 - inst.epsilon),
        shortfall * (1.0 / inst.rho - 1.0),
        inst.mu - shortfall / inst.rho,
    ])
}

/// Largest absolute gap between the market solved as a program on `n` grid
/// scenarios and the closed forms, over dispatch, prices and profits.
pub fn oracle_error(inst: &CopperplateInstance, n: usize) -> Result<f64, CopperplateError> {
    let m = inst.market(n)?;
    let out = crate::market::run_market(&m)?;
    let (fwd, price) = analytic_forward(inst);
    let mut err = (out.forward.prices[0] - price).abs();
    for u in 0..3 {
        err = err.max((out.forward.dispatch[u] - fwd[u]).abs());
    }
    for (k, sc) in m.scenarios.scenarios().iter().enumerate() {
        let omega = sc.wind[0];
        let (x, p) = analytic_realtime(inst, omega)?;
        let pi = analytic_profits(inst, omega)?;
        err = err.max((out.realtime[k].prices[0] - p).abs());
        for u in 0..3 {
            err = err.max((out.realtime[k].dispatch[u] - x[u]).abs());
            err = err.max((out.profits[u].values()[k] - pi[u]).abs());
        }
    }
    Ok(err)
}

/// Scenarios in which `W` loses money, `[μ - √3σ, μ(1 - ρ))`, or `None`
/// when `ρ ≥ √3σ/μ`.
pub fn loss_region(inst: &CopperplateInstance) -> Option<(f64, f64)> {
    if inst.rho < inst.half_width() / inst.mu {
        Some((inst.mu - inst.half_width(), inst.mu * (1.0 - inst.rho)))
    } else {
        None
    }
}

/// Baseline variances `(var π_W, var π_P)` under the continuous uniform law.
pub fn baseline_variances(inst: &CopperplateInstance) -> (f64, f64) {
    // (μ - ω)⁺ with ω uniform of half-width h: mean h/4, second moment h²/6.
    let h = inst.half_width();
    let var_shortfall = h * h / 6.0 - h * h / 16.0;
    (
        var_shortfall / (inst.rho * inst.rho),
        var_shortfall * (1.0 / inst.rho - 1.0).powi(2),
    )
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EquilibriumClass {
    /// `2q + K > 1/ρ`: `W` buys nothing.
    NoTrade,
    /// `2q + K = 1/ρ`: `W` is indifferent over `[0, √3σ]`.
    Manifold,
    /// `2q + K < 1/ρ`: `W` buys the maximum, and `P` would rather raise prices.
    NotEquilibrium,
}

/// Class of `(q, K)` and the set `[lo, hi]` of best responses of `W`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BestResponse {
    pub class: EquilibriumClass,
    pub lo: f64,
    pub hi: f64,
}

impl BestResponse {
    pub fn contains(&self, delta: f64, tol: f64) -> bool {
        delta >= self.lo - tol && delta <= self.hi + tol
    }
}

pub fn stackelberg_classify(inst: &CopperplateInstance, q: f64, k: f64) -> BestResponse {
    let h = inst.half_width();
    let gap = 2.0 * q + k - 1.0 / inst.rho;
    let tol = 1e-12 * (1.0 / inst.rho);
    if gap > tol {
        BestResponse {
            class: EquilibriumClass::NoTrade,
            lo: 0.0,
            hi: 0.0,
        }
    } else if gap >= -tol {
        BestResponse {
            class: EquilibriumClass::Manifold,
            lo: 0.0,
            hi: h,
        }
    } else {
        BestResponse {
            class: EquilibriumClass::NotEquilibrium,
            lo: h,
            hi: h,
        }
    }
}

/// `E[Π_W] - E[π_W]` for a bilateral trade, averaged over `n` grid scenarios.
pub fn wind_expected_gain(
    inst: &CopperplateInstance,
    q: f64,
    k: f64,
    delta: f64,
    n: usize,
) -> Result<f64, CopperplateError> {
    let omegas = uniform_grid_points(inst.mu, inst.sigma, n)?;
    let mean_payoff = omegas
        .iter()
        .map(|&w| {
            let p = if w <= inst.mu { 1.0 / inst.rho } else { 0.0 };
            (p - k).max(0.0)
        })
        .sum::<f64>()
        / n as f64;
    Ok(delta * (mean_payoff - q))
}

/// Best response of `W` by exhaustive search over `m` volumes in
/// `[0, √3σ]`; ties go to the smallest volume.
pub fn brute_force_best_response(
    inst: &CopperplateInstance,
    q: f64,
    k: f64,
    m: usize,
    n: usize,
) -> Result<f64, CopperplateError> {
    let h = inst.half_width();
    let mut best = (wind_expected_gain(inst, q, k, 0.0, n)?, 0.0);
    for j in 1..m {
        let delta = h * j as f64 / (m - 1).max(1) as f64;
        let gain = wind_expected_gain(inst, q, k, delta, n)?;
        if gain > best.0 + 1e-12 * (1.0 + best.0.abs()) {
            best = (gain, delta);
        }
    }
    Ok(best.1)
}

/// Variance changes `(var Π_W - var π_W, var Π_P - var π_P)` for a bilateral
/// trade on the line `2q + K = 1/ρ`.
pub fn bilateral_variance_delta(
    inst: &CopperplateInstance,
    q: f64,
    k: f64,
    delta: f64,
) -> Result<(f64, f64), CopperplateError> {
    if (2.0 * q + k - 1.0 / inst.rho).abs() > 1e-9 * (1.0 / inst.rho) {
        return Err(CopperplateError::OffManifold { q, k });
    }
    let h = inst.half_width();
    let w = q * q * delta * (delta - h) - q * k * delta * h / 2.0;
    let p = q * q * delta * (delta - h) - q * (k - 1.0) * delta * h / 2.0;
    Ok((w, p))
}

/// The socially optimal trade at volume `delta`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CentralOptimum {
    pub q: f64,
    pub k: f64,
    pub delta: f64,
    pub delta_min: f64,
    pub delta_max: f64,
    pub aggregate_delta: f64,
}

/// Volumes at which the optimum is attainable with `K ≥ 0`.
pub fn central_volume_range(inst: &CopperplateInstance) -> (f64, f64) {
    let h = inst.half_width();
    (h * (2.0 - inst.rho) / 4.0, h)
}

pub fn central_optimum(
    inst: &CopperplateInstance,
    delta: f64,
) -> Result<CentralOptimum, CopperplateError> {
    let (lo, hi) = central_volume_range(inst);
    let tol = 1e-12 * hi;
    if delta < lo - tol || delta > hi + tol {
        return Err(CopperplateError::VolumeOutOfRange { delta, lo, hi });
    }
    let h = inst.half_width();
    let r = 1.0 / inst.rho;
    let q = h * r / (4.0 * delta) - h / (8.0 * delta);
    let k = r * (2.0 * delta - h) / (2.0 * delta) + h / (4.0 * delta);
    Ok(CentralOptimum {
        q,
        k,
        delta,
        delta_min: lo,
        delta_max: hi,
        aggregate_delta: central_aggregate_delta(inst),
    })
}

/// `-(3σ²/8)(1/ρ - 1/2)²`.
pub fn central_aggregate_delta(inst: &CopperplateInstance) -> f64 {
    -(3.0 * inst.sigma * inst.sigma / 8.0) * (1.0 / inst.rho - 0.5).powi(2)
}

/// Profits of `W` and `P` on `n` grid scenarios with and without a matched
/// trade in which `P` covers every exercise.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProfitProfile {
    pub omega: f64,
    pub wind_before: f64,
    pub wind_after: f64,
    pub peaker_before: f64,
    pub peaker_after: f64,
}

pub fn profit_profiles(
    inst: &CopperplateInstance,
    q: f64,
    k: f64,
    delta: f64,
    n: usize,
) -> Result<Vec<ProfitProfile>, CopperplateError> {
    uniform_grid_points(inst.mu, inst.sigma, n)?
        .into_iter()
        .map(|omega| {
            let [_, pp, pw] = analytic_profits(inst, omega)?;
            let (_, price) = analytic_realtime(inst, omega)?;
            let exercised = if price >= k { delta } else { 0.0 };
            let payoff = (price - k).max(0.0);
            Ok(ProfitProfile {
                omega,
                wind_before: pw,
                wind_after: pw - q * delta + payoff * delta,
                peaker_before: pp,
                peaker_after: pp + q * delta - payoff * exercised,
            })
        })
        .collect()
}

/// Grid variances `(var π, var Π)` of `W` and `P` for the matched trade.
pub fn grid_variances(
    inst: &CopperplateInstance,
    q: f64,
    k: f64,
    delta: f64,
    n: usize,
) -> Result<[(f64, f64); 2], CopperplateError> {
    let rows = profit_profiles(inst, q, k, delta, n)?;
    let w = vec![1.0 / n as f64; n];
    let col = |f: fn(&ProfitProfile) -> f64| -> Vec<f64> { rows.iter().map(f).collect() };
    Ok([
        (
            weighted_variance(&w, &col(|r| r.wind_before)),
            weighted_variance(&w, &col(|r| r.wind_after)),
        ),
        (
            weighted_variance(&w, &col(|r| r.peaker_before)),
            weighted_variance(&w, &col(|r| r.peaker_after)),
        ),
    ])
}

/// Best point found by scanning the line `2q + K = 1/ρ` over `n_q` option
/// prices and `n_delta` volumes, scoring each on `n` grid scenarios.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ManifoldPoint {
    pub q: f64,
    pub k: f64,
    pub delta: f64,
    pub aggregate_delta: f64,
}

pub fn manifold_search(
    inst: &CopperplateInstance,
    n_q: usize,
    n_delta: usize,
    n: usize,
) -> Result<ManifoldPoint, CopperplateError> {
    let r = 1.0 / inst.rho;
    let h = inst.half_width();
    let mut best = ManifoldPoint {
        q: 0.0,
        k: r,
        delta: 0.0,
        aggregate_delta: 0.0,
    };
    for i in 0..n_q {
        let q = 0.5 * r * i as f64 / (n_q - 1).max(1) as f64;
        let k = r - 2.0 * q;
        for j in 1..n_delta {
            let delta = h * j as f64 / (n_delta - 1).max(1) as f64;
            let [(wb, wa), (pb, pa)] = grid_variances(inst, q, k, delta, n)?;
            let agg = (wa - wb) + (pa - pb);
            if agg < best.aggregate_delta {
                best = ManifoldPoint {
                    q,
                    k,
                    delta,
                    aggregate_delta: agg,
                };
            }
        }
    }
    Ok(best)
}

/// Strike at which CVaR acceptability switches for the given `(q, Δ)`, by
/// bisection on `[0, k_max]` over `n` grid scenarios.
///
/// Sellers (`P`) accept strikes at or above the boundary; buyers (`W`) at or
/// below. `None` when the predicate does not change sign on the interval.
pub fn acceptability_boundary(
    inst: &CopperplateInstance,
    alpha: f64,
    role: Role,
    q: f64,
    delta: f64,
    k_max: f64,
    n: usize,
) -> Result<Option<f64>, CopperplateError> {
    let omegas = uniform_grid_points(inst.mu, inst.sigma, n)?;
    let w = vec![1.0 / n as f64; n];
    let mut base = Vec::with_capacity(n);
    let mut price = Vec::with_capacity(n);
    for &o in &omegas {
        let [_, pp, pw] = analytic_profits(inst, o)?;
        let (_, p) = analytic_realtime(inst, o)?;
        base.push(match role {
            Role::Buyer => pw,
            Role::Seller => pp,
        });
        price.push(p);
    }
    let sign = match role {
        Role::Buyer => 1.0,
        Role::Seller => -1.0,
    };
    let margin = |k: f64| -> f64 {
        if alpha == 0.0 {
            let mean_payoff = weighted_mean(
                &w,
                &price.iter().map(|&p| (p - k).max(0.0)).collect::<Vec<_>>(),
            );
            return sign * delta * (mean_payoff - q);
        }
        let before: Vec<f64> = base.iter().map(|v| -v).collect();
        let after: Vec<f64> = base
            .iter()
            .zip(&price)
            .map(|(b, &p)| -(b + sign * ((p - k).max(0.0) - q) * delta))
            .collect();
        weighted_cvar(&w, &before, alpha) - weighted_cvar(&w, &after, alpha)
    };
    // accepted(k) is monotone: buyers accept low strikes, sellers high ones.
    let accepted = |k: f64| margin(k) >= 0.0;
    let (mut lo, mut hi) = (0.0, k_max);
    let (at_lo, at_hi) = (accepted(lo), accepted(hi));
    if at_lo == at_hi {
        return Ok(None);
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if accepted(mid) == at_lo {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo <= 1e-12 * (1.0 + k_max) {
            break;
        }
    }
    Ok(Some(0.5 * (lo + hi)))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn reference() -> CopperplateInstance {
        CopperplateInstance::default()
    }

    #[test]
    fn dispatch_and_prices() {
        let inst = reference();
        assert_eq!(analytic_forward(&inst), ([10.0, 0.0, 10.0], 1.0));
        let (x, p) = analytic_realtime(&inst, 10.0).unwrap();
        assert_eq!(x[PEAKER], 0.0);
        assert!((p - 1.0 / inst.rho).abs() < 1e-12);
        let top = inst.support().1;
        let (x, p) = analytic_realtime(&inst, top).unwrap();
        assert_eq!((x[WIND], p), (10.0, 0.0));
        assert!(analytic_realtime(&inst, 20.0).is_err());
    }

    #[test]
    fn brute_force_follows_classes() {
        let inst = reference();
        let h = inst.half_width();
        assert_eq!(
            brute_force_best_response(&inst, 0.0, 1.0, 101, 40).unwrap(),
            h
        );
        assert_eq!(
            brute_force_best_response(&inst, 6.0, 1.0, 101, 40).unwrap(),
            0.0
        );
        assert_eq!(
            stackelberg_classify(&inst, 6.0, 1.0).class,
            EquilibriumClass::NoTrade
        );
    }

    #[test]
    fn profit_examples() {
        let inst = reference();
        let lo = inst.support().0;
        let [b, p, w] = analytic_profits(&inst, lo).unwrap();
        assert!((b - 5.0).abs() < 1e-12);
        assert!((w + 10.0).abs() < 1e-12);
        assert!((p - (20.0 - 3f64.sqrt())).abs() < 1e-12);
        assert!((p - 18.268).abs() < 1e-3);
    }

    #[test]
    fn loss_region_examples() {
        let inst = reference();
        let (a, b) = loss_region(&inst).unwrap();
        assert!((a - 8.268).abs() < 1e-3 && (b - 9.134).abs() < 1e-3);
        for j in 0..=1000 {
            let o = inst.support().0 + 2.0 * inst.half_width() * j as f64 / 1000.0;
            let w = analytic_profits(&inst, o).unwrap()[WIND];
            assert_eq!(w < 0.0, o >= a && o < b, "omega {o}");
        }
        let calm = CopperplateInstance { rho: 0.5, ..inst };
        assert!(loss_region(&calm).is_none());
    }

    #[test]
    fn classification_examples() {
        let inst = reference();
        assert_eq!(
            stackelberg_classify(&inst, 6.0, 6.0).class,
            EquilibriumClass::NoTrade
        );
        let c = central_optimum(&inst, 3f64.sqrt()).unwrap();
        let br = stackelberg_classify(&inst, c.q, c.k);
        assert_eq!(br.class, EquilibriumClass::Manifold);
        let none = stackelberg_classify(&inst, 0.0, 0.0);
        assert_eq!(none.class, EquilibriumClass::NotEquilibrium);
        assert!((none.lo - inst.half_width()).abs() < 1e-12);
    }

    #[test]
    fn central_optimum_examples() {
        let inst = reference();
        let c = central_optimum(&inst, 3f64.sqrt()).unwrap();
        assert!((c.q - 2.7618).abs() < 1e-4);
        assert!((c.k - 6.0235).abs() < 1e-4);
        assert!((2.0 * c.q + c.k - 1.0 / inst.rho).abs() < 1e-10);
        assert!((c.aggregate_delta + 45.76).abs() < 5e-3);
        assert!((c.delta_min - 0.8285).abs() < 1e-4);
        assert!(central_optimum(&inst, 0.5).is_err());

        // the objective is flat across the optimal range
        let [(wb, wa), (pb, pa)] = grid_variances(&inst, c.q, c.k, c.delta, 400).unwrap();
        for delta in [c.delta_min, 1.2, 1.5] {
            let o = central_optimum(&inst, delta).unwrap();
            let [(wb2, wa2), (pb2, pa2)] = grid_variances(&inst, o.q, o.k, delta, 400).unwrap();
            let a = (wa - wb) + (pa - pb);
            let b = (wa2 - wb2) + (pa2 - pb2);
            assert!((a - b).abs() < 1e-9 * a.abs());
            assert!((a - c.aggregate_delta).abs() < 1e-9 * a.abs());
        }
    }

    #[test]
    fn baseline_variances_match_grid() {
        let inst = reference();
        let (vw, vp) = baseline_variances(&inst);
        let [(wb, _), (pb, _)] = grid_variances(&inst, 0.0, 0.0, 0.0, 100_000).unwrap();
        assert!((vw - wb).abs() < 1e-4 * vw);
        assert!((vp - pb).abs() < 1e-4 * vp);
        assert!((vw - 41.67).abs() < 0.01);
    }

    #[test]
    fn bilateral_deltas() {
        let inst = reference();
        let c = central_optimum(&inst, 3f64.sqrt()).unwrap();
        assert_eq!(
            bilateral_variance_delta(&inst, c.q, c.k, 0.0).unwrap(),
            (0.0, 0.0)
        );
        let (w, p) = bilateral_variance_delta(&inst, c.q, c.k, inst.half_width()).unwrap();
        assert!((w + 1.5 * c.q * c.k).abs() < 1e-9);
        assert!((p + 1.5 * c.q * (c.k - 1.0)).abs() < 1e-9);
        assert!(bilateral_variance_delta(&inst, 1.0, 1.0, 1.0).is_err());
    }

    #[test]
    fn risk_neutral_boundary_is_the_plane() {
        let inst = reference();
        let r = 1.0 / inst.rho;
        for role in [Role::Buyer, Role::Seller] {
            for (q, delta) in [(1.0, 0.5), (3.0, 1.7), (5.0, 1.0)] {
                let k = acceptability_boundary(&inst, 0.0, role, q, delta, r, 400)
                    .unwrap()
                    .unwrap();
                assert!((k - (r - 2.0 * q)).abs() < 1e-9, "{role:?} {q} {delta} {k}");
            }
        }
    }

    #[test]
    fn seller_boundary_falls_with_premium() {
        let inst = reference();
        let r = 1.0 / inst.rho;
        let mut last = f64::INFINITY;
        for i in 0..12 {
            let q = 0.5 * i as f64;
            if let Some(k) =
                acceptability_boundary(&inst, 0.5, Role::Seller, q, 1.0, r, 400).unwrap()
            {
                assert!(k <= last + 1e-9);
                last = k;
            }
        }
        assert!(last.is_finite());
    }

    #[test]
    fn market_round_trip_matches_closed_forms() {
        let inst = reference();
        let m = inst.market(40).unwrap();
        let out = crate::market::run_market(&m).unwrap();
        let (fwd, price) = analytic_forward(&inst);
        for u in 0..3 {
            assert!((out.forward.dispatch[u] - fwd[u]).abs() < 1e-6);
        }
        assert!((out.forward.prices[0] - price).abs() < 1e-6);
        for (k, sc) in m.scenarios.scenarios().iter().enumerate() {
            let omega = sc.wind[0];
            let (x, p) = analytic_realtime(&inst, omega).unwrap();
            let pi = analytic_profits(&inst, omega).unwrap();
            assert!((out.realtime[k].prices[0] - p).abs() < 1e-6);
            for u in 0..3 {
                assert!((out.realtime[k].dispatch[u] - x[u]).abs() < 1e-6);
                assert!((out.profits[u].values()[k] - pi[u]).abs() < 1e-6);
            }
        }
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn wind_delta_nonpositive_on_line(q in 0.0f64..5.77, frac in 0.0f64..1.0) {
                let inst = reference();
                let k = 1.0 / inst.rho - 2.0 * q;
                let (w, _) = bilateral_variance_delta(&inst, q, k, frac * inst.half_width()).unwrap();
                prop_assert!(w <= 1e-12);
            }

            #[test]
            fn central_trade_on_line(rho in 0.05f64..1.0, sigma in 0.1f64..2.0, t in 0.0f64..1.0) {
                let inst = CopperplateInstance::new(10.0, sigma, rho, 0.5, 20.0).unwrap();
                let (lo, hi) = central_volume_range(&inst);
                let c = central_optimum(&inst, lo + t * (hi - lo)).unwrap();
                prop_assert!((2.0 * c.q + c.k - 1.0 / rho).abs() <= 1e-10 * (1.0 / rho));
                prop_assert!(c.k >= -1e-9);
            }
        }
    }
}
