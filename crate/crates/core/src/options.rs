//! Cash-settled call options: payoffs, settlement, acceptability and FTRs.
//!
//! A buyer pays `qΔ` up front and collects `(p - K)⁺Δ` in real time. A seller
//! receives `qΔ` and pays `(p - K)⁺δ`, where `δ ≤ Δ` is the volume the market
//! maker allocates to it. Sellers judge acceptability against the worst case
//! `δ = Δ`.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::scenario::{weighted_cvar, RandomSample, RiskPreference, ScenarioError};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum OptionsError {
    #[error(transparent)]
    Scenario(#[from] ScenarioError),
    #[error("trade (q={q}, K={k}, Δ={delta}) lies outside the declared bounds")]
    OutOfBounds { q: f64, k: f64, delta: f64 },
    #[error("allocation has {found} entries, expected {expected}")]
    AllocationLength { found: usize, expected: usize },
    #[error("allocated volume {value} outside [0, {max}] in scenario {scenario}")]
    AllocationRange {
        scenario: usize,
        value: f64,
        max: f64,
    },
    #[error("bus {0} is out of range")]
    UnknownBus(usize),
    #[error("invalid bounds: {0}")]
    BadBounds(String),
}

/// `(q, K, Δ)`: option price ($/MW), strike ($/MWh) and volume (MW).
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct TradeTriple {
    pub q: f64,
    pub k: f64,
    pub delta: f64,
}

impl TradeTriple {
    pub fn new(q: f64, k: f64, delta: f64) -> Self {
        Self { q, k, delta }
    }

    pub fn zero() -> Self {
        Self::default()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Buyer,
    Seller,
}

/// The box `[0, q̄] × [0, K̄] × [0, Δ̄]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TradeBounds {
    pub q_max: f64,
    pub k_max: f64,
    pub delta_max: f64,
}

impl TradeBounds {
    pub fn new(q_max: f64, k_max: f64, delta_max: f64) -> Result<Self, OptionsError> {
        for (name, v) in [("q_max", q_max), ("k_max", k_max), ("delta_max", delta_max)] {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(OptionsError::BadBounds(format!("{name} = {v}")));
            }
        }
        Ok(Self {
            q_max,
            k_max,
            delta_max,
        })
    }

    pub fn contains(&self, t: &TradeTriple, tol: f64) -> bool {
        t.q >= -tol
            && t.k >= -tol
            && t.delta >= -tol
            && t.q <= self.q_max + tol
            && t.k <= self.k_max + tol
            && t.delta <= self.delta_max + tol
    }

    /// Componentwise intersection.
    pub fn intersect(&self, other: &TradeBounds) -> TradeBounds {
        TradeBounds {
            q_max: self.q_max.min(other.q_max),
            k_max: self.k_max.min(other.k_max),
            delta_max: self.delta_max.min(other.delta_max),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum AcceptMode {
    RiskNeutral,
    Cvar { alpha: f64 },
    BoxOnly,
}

impl AcceptMode {
    pub fn cvar(pref: RiskPreference) -> Self {
        AcceptMode::Cvar {
            alpha: pref.alpha(),
        }
    }
}

/// The trades a participant declares acceptable.
#[derive(Debug, Clone, PartialEq)]
pub struct AcceptabilitySet {
    pub bounds: TradeBounds,
    pub mode: AcceptMode,
    /// Energy-market profit π.
    pub baseline: RandomSample,
    /// The participant's nodal real-time price.
    pub price: RandomSample,
}

impl AcceptabilitySet {
    pub fn new(
        bounds: TradeBounds,
        mode: AcceptMode,
        baseline: RandomSample,
        price: RandomSample,
    ) -> Result<Self, OptionsError> {
        if !baseline.same_set(&price) {
            return Err(ScenarioError::Mismatch.into());
        }
        if let AcceptMode::Cvar { alpha } = mode {
            RiskPreference::new(alpha)?;
        }
        Ok(Self {
            bounds,
            mode,
            baseline,
            price,
        })
    }

    /// Only the zero trade fits.
    pub fn zero_only(baseline: RandomSample, price: RandomSample) -> Result<Self, OptionsError> {
        Self::new(
            TradeBounds::new(0.0, 0.0, 0.0)?,
            AcceptMode::BoxOnly,
            baseline,
            price,
        )
    }
}

/// `(p - K)⁺`.
pub fn option_payoff(p: f64, k: f64) -> f64 {
    (p - k).max(0.0)
}

/// `π - qΔ + (p - K)⁺Δ` per scenario.
pub fn buyer_profit(
    pi: &RandomSample,
    t: &TradeTriple,
    p: &RandomSample,
) -> Result<RandomSample, OptionsError> {
    Ok(pi.zip_with(p, |pi, p| {
        pi - t.q * t.delta + option_payoff(p, t.k) * t.delta
    })?)
}

/// `π + qΔ - (p - K)⁺δ` per scenario. `alloc = None` means the worst case
/// `δ = Δ` in every scenario.
pub fn seller_profit(
    pi: &RandomSample,
    t: &TradeTriple,
    p: &RandomSample,
    alloc: Option<&[f64]>,
) -> Result<RandomSample, OptionsError> {
    if !pi.same_set(p) {
        return Err(ScenarioError::Mismatch.into());
    }
    let n = pi.len();
    if let Some(a) = alloc {
        if a.len() != n {
            return Err(OptionsError::AllocationLength {
                found: a.len(),
                expected: n,
            });
        }
        for (k, &v) in a.iter().enumerate() {
            if !(v >= -1e-12) || v > t.delta * (1.0 + 1e-12) + 1e-12 {
                return Err(OptionsError::AllocationRange {
                    scenario: k,
                    value: v,
                    max: t.delta,
                });
            }
        }
    }
    let values = pi
        .values()
        .iter()
        .zip(p.values())
        .enumerate()
        .map(|(k, (&pi, &p))| {
            let d = alloc.map_or(t.delta, |a| a[k]);
            pi + t.q * t.delta - option_payoff(p, t.k) * d
        })
        .collect();
    Ok(RandomSample::new(pi.set().clone(), values)?)
}

/// Whether a buyer with strike `k` exercises at price `p`. Ties exercise.
pub fn exercises(p: f64, k: f64) -> bool {
    p >= k
}

/// `Σ_r Δ_r·1{p_r ≥ K_r}` in one scenario.
pub fn exercised_volume(buys: &[TradeTriple], prices: &[f64]) -> f64 {
    buys.iter()
        .zip(prices)
        .filter(|(t, &p)| exercises(p, t.k))
        .map(|(t, _)| t.delta)
        .sum()
}

/// The market maker's net cash in one scenario:
/// `Σ_r q_rΔ_r - Σ_g q_gΔ_g - Σ_r (p_r - K_r)⁺Δ_r + Σ_g (p_g - K_g)⁺δ_g`.
pub fn merchandising_surplus(
    buys: &[TradeTriple],
    buy_prices: &[f64],
    sells: &[TradeTriple],
    sell_prices: &[f64],
    alloc: &[f64],
) -> Result<f64, OptionsError> {
    for (found, expected) in [
        (buy_prices.len(), buys.len()),
        (sell_prices.len(), sells.len()),
        (alloc.len(), sells.len()),
    ] {
        if found != expected {
            return Err(OptionsError::AllocationLength { found, expected });
        }
    }
    let fees: f64 = buys.iter().map(|t| t.q * t.delta).sum::<f64>()
        - sells.iter().map(|t| t.q * t.delta).sum::<f64>();
    let paid: f64 = buys
        .iter()
        .zip(buy_prices)
        .map(|(t, &p)| option_payoff(p, t.k) * t.delta)
        .sum();
    let collected: f64 = sells
        .iter()
        .zip(sell_prices)
        .zip(alloc)
        .map(|((t, &p), &d)| option_payoff(p, t.k) * d)
        .sum();
    Ok(fees - paid + collected)
}

/// The option cash flow of a trade with worst-case allocation for sellers.
fn option_cash(set: &AcceptabilitySet, t: &TradeTriple, role: Role) -> Vec<f64> {
    let sign = match role {
        Role::Buyer => 1.0,
        Role::Seller => -1.0,
    };
    set.price
        .values()
        .iter()
        .map(|&p| sign * (option_payoff(p, t.k) - t.q) * t.delta)
        .collect()
}

/// How far inside the acceptable region a trade lies; nonnegative means
/// acceptable. Risk-neutral: `E[Π] - E[π]`. CVaR: `CVaR[-π] - CVaR[-Π]`.
/// Box-only: zero.
pub fn acceptability_margin(
    set: &AcceptabilitySet,
    t: &TradeTriple,
    role: Role,
) -> Result<f64, OptionsError> {
    if !set.bounds.contains(t, 0.0) {
        return Err(OptionsError::OutOfBounds {
            q: t.q,
            k: t.k,
            delta: t.delta,
        });
    }
    Ok(match set.mode {
        AcceptMode::BoxOnly => 0.0,
        AcceptMode::Cvar { alpha } if alpha > 0.0 => {
            let w = set.baseline.weights();
            let cash = option_cash(set, t, role);
            let loss_before: Vec<f64> = set.baseline.values().iter().map(|v| -v).collect();
            let loss_after: Vec<f64> = set
                .baseline
                .values()
                .iter()
                .zip(&cash)
                .map(|(pi, v)| -(pi + v))
                .collect();
            weighted_cvar(w, &loss_before, alpha) - weighted_cvar(w, &loss_after, alpha)
        }
        AcceptMode::RiskNeutral | AcceptMode::Cvar { .. } => {
            let mean_payoff = set
                .price
                .values()
                .iter()
                .zip(set.price.weights())
                .map(|(&p, w)| w * option_payoff(p, t.k))
                .sum::<f64>();
            match role {
                Role::Buyer => t.delta * (mean_payoff - t.q),
                Role::Seller => t.delta * (t.q - mean_payoff),
            }
        }
    })
}

pub fn is_acceptable(
    set: &AcceptabilitySet,
    t: &TradeTriple,
    role: Role,
) -> Result<bool, OptionsError> {
    Ok(acceptability_margin(set, t, role)? >= 0.0)
}

/// `f` MW of transmission rights from bus `from` to bus `to`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FtrPosition {
    pub from: usize,
    pub to: usize,
    pub volume: f64,
}

/// `(p_to - p_from)·f`; may be negative.
pub fn ftr_payoff(pos: &FtrPosition, prices: &[f64]) -> Result<f64, OptionsError> {
    let pa = *prices
        .get(pos.from)
        .ok_or(OptionsError::UnknownBus(pos.from))?;
    let pb = *prices.get(pos.to).ok_or(OptionsError::UnknownBus(pos.to))?;
    Ok((pb - pa) * pos.volume)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scenario::{make_uniform_grid, ScenarioSet};
    use std::sync::Arc;

    fn set(n: usize) -> Arc<ScenarioSet> {
        Arc::new(make_uniform_grid(10.0, 1.0, n).unwrap())
    }

    fn sample(s: &Arc<ScenarioSet>, v: Vec<f64>) -> RandomSample {
        RandomSample::new(s.clone(), v).unwrap()
    }

    #[test]
    fn payoff_examples() {
        assert_eq!(option_payoff(12.0, 10.0), 2.0);
        assert_eq!(option_payoff(8.0, 10.0), 0.0);
        assert_eq!(option_payoff(10.0, 10.0), 0.0);
    }

    #[test]
    fn buyer_examples() {
        let s = set(3);
        let pi = sample(&s, vec![1.0, 2.0, 3.0]);
        let p = sample(&s, vec![5.0, 9.0, 20.0]);
        let same = buyer_profit(&pi, &TradeTriple::new(4.0, 3.0, 0.0), &p).unwrap();
        assert_eq!(same.values(), pi.values());

        let pi = RandomSample::constant(s.clone(), 5.0);
        let p0 = RandomSample::constant(s.clone(), 0.0);
        let b = buyer_profit(&pi, &TradeTriple::new(1.0, 0.0, 2.0), &p0).unwrap();
        assert_eq!(b.values(), &[3.0, 3.0, 3.0]);
    }

    #[test]
    fn seller_examples() {
        let s = set(3);
        let pi = sample(&s, vec![1.0, 2.0, 3.0]);
        let p = sample(&s, vec![5.0, 9.0, 20.0]);
        let t = TradeTriple::new(2.0, 8.0, 3.0);
        let none = seller_profit(&pi, &t, &p, Some(&[0.0; 3])).unwrap();
        assert_eq!(none.values(), &[7.0, 8.0, 9.0]);
        let worst = seller_profit(&pi, &t, &p, None).unwrap();
        let full = seller_profit(&pi, &t, &p, Some(&[3.0; 3])).unwrap();
        assert_eq!(worst, full);
        assert!(seller_profit(&pi, &t, &p, Some(&[4.0, 0.0, 0.0])).is_err());

        // bilateral cancellation with matched trades at a common price
        let exercised: Vec<f64> = p
            .values()
            .iter()
            .map(|&v| if v >= t.k { t.delta } else { 0.0 })
            .collect();
        let g = seller_profit(&pi, &t, &p, Some(&exercised)).unwrap();
        let r = buyer_profit(&pi, &t, &p).unwrap();
        for k in 0..3 {
            let net = r.values()[k] + g.values()[k] - 2.0 * pi.values()[k];
            assert!(net.abs() < 1e-12);
        }
    }

    #[test]
    fn surplus_examples() {
        let z = TradeTriple::zero();
        assert_eq!(
            merchandising_surplus(&[z], &[50.0], &[z], &[50.0], &[0.0]).unwrap(),
            0.0
        );

        let t = TradeTriple::new(3.0, 10.0, 4.0);
        for p in [5.0, 10.0, 25.0] {
            let d = if exercises(p, t.k) { t.delta } else { 0.0 };
            assert!(
                merchandising_surplus(&[t], &[p], &[t], &[p], &[d])
                    .unwrap()
                    .abs()
                    < 1e-12
            );
        }

        // any balanced split between two sellers with common price and strike
        let buy = TradeTriple::new(2.0, 10.0, 8.0);
        let s1 = TradeTriple::new(2.0, 10.0, 3.0);
        let s2 = TradeTriple::new(2.0, 10.0, 5.0);
        for d1 in [0.0, 1.5, 3.0] {
            let d2 = 8.0 - d1;
            if d2 > 5.0 {
                continue;
            }
            let ms = merchandising_surplus(&[buy], &[30.0], &[s1, s2], &[30.0, 30.0], &[d1, d2])
                .unwrap();
            assert!(ms.abs() < 1e-12);
        }
    }

    #[test]
    fn copperplate_risk_neutral_sets() {
        // Price 1/ρ on the lower half of an even grid, zero above.
        let rho = 3f64.sqrt() / 20.0;
        let s = set(400);
        let price = sample(
            &s,
            (0..400)
                .map(|k| if k < 200 { 1.0 / rho } else { 0.0 })
                .collect(),
        );
        let pi = RandomSample::constant(s.clone(), 0.0);
        let bounds = TradeBounds::new(1.0 / rho, 1.0 / rho, 3f64.sqrt()).unwrap();
        let acc = AcceptabilitySet::new(bounds, AcceptMode::RiskNeutral, pi, price).unwrap();
        for (q, k) in [
            (1.0, 5.0),
            (3.0, 6.0),
            (2.0, 7.547),
            (0.5, 11.0),
            (5.0, 0.5),
        ] {
            let t = TradeTriple::new(q, k, 1.0);
            let lhs = k + 2.0 * q;
            if (lhs - 1.0 / rho).abs() < 1e-9 {
                continue;
            }
            assert_eq!(
                is_acceptable(&acc, &t, Role::Seller).unwrap(),
                lhs >= 1.0 / rho
            );
            assert_eq!(
                is_acceptable(&acc, &t, Role::Buyer).unwrap(),
                lhs <= 1.0 / rho
            );
        }
        assert!(is_acceptable(&acc, &TradeTriple::new(5.0, 5.0, 0.0), Role::Buyer).unwrap());
        assert!(matches!(
            is_acceptable(&acc, &TradeTriple::new(50.0, 5.0, 1.0), Role::Buyer),
            Err(OptionsError::OutOfBounds { .. })
        ));
    }

    #[test]
    fn ftr_examples() {
        let f = FtrPosition {
            from: 0,
            to: 1,
            volume: 20.0,
        };
        assert_eq!(ftr_payoff(&f, &[5.0, 8.0]).unwrap(), 60.0);
        assert_eq!(ftr_payoff(&f, &[7.0, 7.0]).unwrap(), 0.0);
        let z = FtrPosition { volume: 0.0, ..f };
        assert_eq!(ftr_payoff(&z, &[5.0, 8.0]).unwrap(), 0.0);
        assert!(ftr_payoff(&FtrPosition { to: 4, ..f }, &[1.0, 2.0]).is_err());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn instance() -> impl Strategy<Value = (Vec<f64>, Vec<f64>)> {
            (2usize..12).prop_flat_map(|n| {
                (
                    prop::collection::vec(-50.0f64..50.0, n),
                    prop::collection::vec(0.0f64..60.0, n),
                )
            })
        }

        fn acc(pi: Vec<f64>, p: Vec<f64>, mode: AcceptMode) -> AcceptabilitySet {
            let s = Arc::new(
                ScenarioSet::equiprobable(vec![
                    crate::scenario::Scenario {
                        wind: vec![],
                        demand: vec![]
                    };
                    pi.len()
                ])
                .unwrap(),
            );
            AcceptabilitySet::new(
                TradeBounds::new(60.0, 60.0, 10.0).unwrap(),
                mode,
                RandomSample::new(s.clone(), pi).unwrap(),
                RandomSample::new(s, p).unwrap(),
            )
            .unwrap()
        }

        proptest! {
            #[test]
            fn conservation_under_uniform_price(p in 0.0f64..60.0, q in 0.0f64..60.0, k in 0.0f64..60.0,
                                                 d1 in 0.0f64..10.0, d2 in 0.0f64..10.0) {
                // two buyers, two sellers with matched total volume
                let buys = [TradeTriple::new(q, k, d1), TradeTriple::new(q, k, d2)];
                let sells = [TradeTriple::new(q, k, d2), TradeTriple::new(q, k, d1)];
                let e = exercised_volume(&buys, &[p, p]);
                let alloc = if e > 0.0 { [d2, d1] } else { [0.0, 0.0] };
                let ms = merchandising_surplus(&buys, &[p, p], &sells, &[p, p], &alloc).unwrap();
                prop_assert!(ms.abs() <= 1e-9 * (1.0 + q * (d1 + d2) + p * (d1 + d2)));
            }

            #[test]
            fn risk_neutral_ignores_volume((pi, p) in instance(), q in 0.0f64..60.0, k in 0.0f64..60.0,
                                            d in 0.01f64..10.0, scale in 0.01f64..1.0) {
                let a = acc(pi, p, AcceptMode::RiskNeutral);
                for role in [Role::Buyer, Role::Seller] {
                    let big = is_acceptable(&a, &TradeTriple::new(q, k, d), role).unwrap();
                    let small = is_acceptable(&a, &TradeTriple::new(q, k, d * scale), role).unwrap();
                    prop_assert_eq!(big, small);
                }
            }

            #[test]
            fn cvar_at_zero_is_risk_neutral((pi, p) in instance(), q in 0.0f64..60.0, k in 0.0f64..60.0, d in 0.0f64..10.0) {
                let rn = acc(pi.clone(), p.clone(), AcceptMode::RiskNeutral);
                let cv = acc(pi, p, AcceptMode::Cvar { alpha: 0.0 });
                let t = TradeTriple::new(q, k, d);
                for role in [Role::Buyer, Role::Seller] {
                    prop_assert_eq!(is_acceptable(&rn, &t, role).unwrap(), is_acceptable(&cv, &t, role).unwrap());
                }
            }

            #[test]
            fn buyer_monotone_in_price_terms((pi, p) in instance(), q in 0.0f64..60.0, k in 0.0f64..60.0,
                                              d in 0.0f64..10.0, dq in 0.0f64..1.0, dk in 0.0f64..1.0,
                                              alpha in 0.0f64..0.95) {
                for mode in [AcceptMode::RiskNeutral, AcceptMode::Cvar { alpha }] {
                    let a = acc(pi.clone(), p.clone(), mode);
                    let t = TradeTriple::new(q, k, d);
                    let cheaper = TradeTriple::new(q * (1.0 - dq), k * (1.0 - dk), d);
                    if acceptability_margin(&a, &t, Role::Buyer).unwrap() >= 1e-9 {
                        prop_assert!(is_acceptable(&a, &cheaper, Role::Buyer).unwrap());
                    }
                }
            }
        }
    }
}
