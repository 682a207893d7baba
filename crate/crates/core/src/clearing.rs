//! Centralized clearing of call options.
//!
//! The market maker chooses one `(q, K, Δ)` per participant and, in every
//! scenario, splits the exercised volume among the sellers. Social clearing
//! minimizes the total variance of participant profits subject to volume
//! balance, acceptability and a zero merchandising surplus in every scenario.
//! `So` does the same with one price and strike shared by everybody. Selfish
//! clearing maximizes the expected surplus instead.
//!
//! The exercise split is eliminated from the search. During the search it is
//! proportional to the sold volumes, with the surplus held at zero by one
//! equality per scenario. In the exact evaluation it is the allocation
//! closest to the proportional one (in a volume-weighted norm) that balances
//! exercise and zeroes the surplus. Payoffs are smoothed with a logistic
//! kink and the constrained problem is solved by an augmented Lagrangian
//! whose inner loop is a projected Newton method on the unit box. Each local
//! result is refined with the exercise pattern held fixed, its premiums are
//! levelled so all risk-neutral margins agree, and it is re-evaluated
//! exactly before it can be returned. The zero trade is always a candidate.

use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::{ClearMode, ClearingSpec, LoadedRun, OptionsRole};
use crate::market::{Market, MarketOutcome};
use crate::options::{
    acceptability_margin, buyer_profit, ftr_payoff, option_payoff, seller_profit, AcceptMode,
    AcceptabilitySet, OptionsError, Role, TradeBounds, TradeTriple,
};
use crate::scenario::{
    weighted_covariance, weighted_cvar, weighted_cvar_weights, weighted_mean, weighted_variance,
    RandomSample, ScenarioError,
};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ClearingError {
    #[error(transparent)]
    Options(#[from] OptionsError),
    #[error(transparent)]
    Scenario(#[from] ScenarioError),
    #[error("exercised volume {demand} exceeds sold volume {supply} in scenario {scenario}")]
    ExerciseExceedsSupply {
        scenario: usize,
        demand: f64,
        supply: f64,
    },
    #[error("{0} trades for {1} participants")]
    TradeCount(usize, usize),
    #[error("participant {0} has no volume bound")]
    MissingVolumeBound(String),
    #[error("invalid clearing setting: {0}")]
    Invalid(String),
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Logistic surrogate of `1{x ≥ 0}`.
pub fn smooth_indicator(x: f64, beta: f64) -> f64 {
    sigmoid(beta * x)
}

/// Surrogate of `x⁺`: `x·σ(βx)`. Always between `min(x, 0)` and `max(x, 0)`.
pub fn smooth_plus(x: f64, beta: f64) -> f64 {
    x * sigmoid(beta * x)
}

/// Derivative of [`smooth_indicator`] with respect to `x`.
pub fn smooth_indicator_deriv(x: f64, beta: f64) -> f64 {
    let e = sigmoid(beta * x);
    beta * e * (1.0 - e)
}

/// Derivative of [`smooth_plus`] with respect to `x`.
pub fn smooth_plus_deriv(x: f64, beta: f64) -> f64 {
    let e = sigmoid(beta * x);
    e + x * beta * e * (1.0 - e)
}

// ---------------------------------------------------------------------------
// Exercise allocation
// ---------------------------------------------------------------------------

/// Which zero-surplus split to pick when several exist.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TieBreak {
    /// Fill sellers in index order, each as far as the others allow.
    LexFirst,
    /// The split closest to the proportional one in the volume-weighted norm.
    Projected,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum AllocationMode {
    /// Aim for a zero surplus.
    Social(TieBreak),
    /// Maximize the surplus.
    Selfish,
}

/// One scenario's split.
#[derive(Debug, Clone, PartialEq)]
pub struct ScenarioAllocation {
    pub delta: Vec<f64>,
    pub ms: f64,
    /// False when a social split could not reach a zero surplus.
    pub attained: bool,
}

/// Greedy split of volume `e` favouring high (`descending`) or low payoffs.
fn greedy_vertex(volumes: &[f64], payoffs: &[f64], e: f64, descending: bool) -> Vec<f64> {
    let mut order: Vec<usize> = (0..volumes.len()).collect();
    order.sort_by(|&a, &b| {
        let c = payoffs[a].total_cmp(&payoffs[b]);
        (if descending { c.reverse() } else { c }).then(a.cmp(&b))
    });
    let mut left = e;
    let mut out = vec![0.0; volumes.len()];
    for g in order {
        let take = volumes[g].min(left).max(0.0);
        out[g] = take;
        left -= take;
    }
    out
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Range of `Σ w_g δ_g` over splits of volume `e` among the given sellers.
fn collection_range(volumes: &[f64], payoffs: &[f64], e: f64) -> (f64, f64) {
    let lo = dot(payoffs, &greedy_vertex(volumes, payoffs, e, false));
    let hi = dot(payoffs, &greedy_vertex(volumes, payoffs, e, true));
    (lo, hi)
}

/// Split the exercised volume among sellers in one scenario.
///
/// `volumes` are the sold `Δ_g`, `payoffs` the `(p_g - K_g)⁺`, `exercised`
/// the volume buyers call, and `target = Σ_r (p_r - K_r)⁺Δ_r - fees` the
/// amount sellers must pay for the surplus to vanish.
pub fn allocate_scenario(
    volumes: &[f64],
    payoffs: &[f64],
    exercised: f64,
    target: f64,
    mode: AllocationMode,
    tol: f64,
) -> Result<ScenarioAllocation, ClearingError> {
    let supply: f64 = volumes.iter().sum();
    if exercised > supply + tol {
        return Err(ClearingError::ExerciseExceedsSupply {
            scenario: 0,
            demand: exercised,
            supply,
        });
    }
    let e = exercised.clamp(0.0, supply);
    let finish = |delta: Vec<f64>, attained: bool| {
        let ms = dot(payoffs, &delta) - target;
        ScenarioAllocation {
            delta,
            ms,
            attained,
        }
    };
    if supply <= 0.0 || e <= 0.0 {
        let zero = vec![0.0; volumes.len()];
        let ms = -target;
        return Ok(ScenarioAllocation {
            delta: zero,
            ms,
            attained: ms.abs() <= tol,
        });
    }
    let tie = match mode {
        AllocationMode::Selfish => {
            return Ok(finish(greedy_vertex(volumes, payoffs, e, true), true))
        }
        AllocationMode::Social(t) => t,
    };
    let low = greedy_vertex(volumes, payoffs, e, false);
    let high = greedy_vertex(volumes, payoffs, e, true);
    let wl = dot(payoffs, &low);
    let wh = dot(payoffs, &high).max(wl);
    let scale = tol.max(1e-12 * (wl.abs() + wh.abs() + target.abs()));
    if target < wl - scale {
        return Ok(finish(low, false));
    }
    if target > wh + scale {
        return Ok(finish(high, false));
    }
    let target = target.clamp(wl, wh);
    match tie {
        TieBreak::Projected => {
            let ratio = e / supply;
            let wbar = dot(volumes, payoffs) / supply;
            let d: f64 = volumes
                .iter()
                .zip(payoffs)
                .map(|(v, w)| v * (w - wbar) * (w - wbar))
                .sum();
            if d > 1e-14 * supply * (1.0 + wbar * wbar) {
                let t = (target - e * wbar) / d;
                let delta: Vec<f64> = volumes
                    .iter()
                    .zip(payoffs)
                    .map(|(v, w)| v * (ratio + t * (w - wbar)))
                    .collect();
                let slack = 1e-12 * supply;
                if delta
                    .iter()
                    .zip(volumes)
                    .all(|(d, v)| *d >= -slack && *d <= v + slack)
                {
                    let delta = delta
                        .iter()
                        .zip(volumes)
                        .map(|(d, v)| d.clamp(0.0, *v))
                        .collect();
                    return Ok(finish(delta, true));
                }
            } else {
                let delta = volumes.iter().map(|v| v * ratio).collect();
                return Ok(finish(delta, true));
            }
            let lambda = if wh > wl {
                (target - wl) / (wh - wl)
            } else {
                0.0
            };
            let delta = low
                .iter()
                .zip(&high)
                .map(|(a, b)| (1.0 - lambda) * a + lambda * b)
                .collect();
            Ok(finish(delta, true))
        }
        TieBreak::LexFirst => Ok(finish(lex_first(volumes, payoffs, e, target), true)),
    }
}

/// Lexicographically largest zero-surplus split, assuming one exists.
fn lex_first(volumes: &[f64], payoffs: &[f64], e: f64, target: f64) -> Vec<f64> {
    let m = volumes.len();
    let mut out = vec![0.0; m];
    let mut e_left = e;
    let mut t_left = target;
    for g in 0..m {
        let rest_v = &volumes[g + 1..];
        let rest_w = &payoffs[g + 1..];
        let rest_supply: f64 = rest_v.iter().sum();
        let feasible = |v: f64| {
            let er = e_left - v;
            if er < -1e-12 || er > rest_supply + 1e-12 * (1.0 + rest_supply) {
                return false;
            }
            let (lo, hi) = collection_range(rest_v, rest_w, er.max(0.0));
            let need = t_left - payoffs[g] * v;
            let slack = 1e-10 * (1.0 + need.abs() + lo.abs() + hi.abs());
            need >= lo - slack && need <= hi + slack
        };
        let top = volumes[g].min(e_left).max(0.0);
        let v = if feasible(top) {
            top
        } else {
            // Any feasible value to start from: the interpolated split is one.
            let (lo_all, hi_all) = collection_range(&volumes[g..], &payoffs[g..], e_left);
            let lambda = if hi_all > lo_all {
                ((t_left - lo_all) / (hi_all - lo_all)).clamp(0.0, 1.0)
            } else {
                0.0
            };
            let a = greedy_vertex(&volumes[g..], &payoffs[g..], e_left, false)[0];
            let b = greedy_vertex(&volumes[g..], &payoffs[g..], e_left, true)[0];
            let mut lo = (1.0 - lambda) * a + lambda * b;
            let mut hi = top;
            for _ in 0..100 {
                let mid = 0.5 * (lo + hi);
                if feasible(mid) {
                    lo = mid;
                } else {
                    hi = mid;
                }
            }
            lo
        };
        out[g] = v;
        e_left -= v;
        t_left -= payoffs[g] * v;
    }
    out
}

/// Allocation in every scenario.
#[derive(Debug, Clone, PartialEq)]
pub struct ExerciseOutcome {
    /// `delta[g][ω]` for each seller.
    pub delta: Vec<Vec<f64>>,
    pub ms: Vec<f64>,
    /// Scenarios where a social split could not zero the surplus.
    pub unattained: Vec<usize>,
}

/// Split exercise among sellers in every scenario. Prices are per participant
/// and per scenario.
pub fn allocate_exercise(
    buys: &[TradeTriple],
    buy_prices: &[&[f64]],
    sells: &[TradeTriple],
    sell_prices: &[&[f64]],
    mode: AllocationMode,
    tol: f64,
) -> Result<ExerciseOutcome, ClearingError> {
    if buys.len() != buy_prices.len() || sells.len() != sell_prices.len() {
        return Err(ClearingError::Invalid(
            "price rows do not match trades".into(),
        ));
    }
    let n = buy_prices
        .iter()
        .chain(sell_prices)
        .map(|p| p.len())
        .next()
        .unwrap_or(0);
    if buy_prices.iter().chain(sell_prices).any(|p| p.len() != n) {
        return Err(ScenarioError::Mismatch.into());
    }
    let fees: f64 = buys.iter().map(|t| t.q * t.delta).sum::<f64>()
        - sells.iter().map(|t| t.q * t.delta).sum::<f64>();
    let volumes: Vec<f64> = sells.iter().map(|t| t.delta).collect();
    let mut delta = vec![vec![0.0; n]; sells.len()];
    let mut ms = vec![0.0; n];
    let mut unattained = Vec::new();
    let mut payoffs = vec![0.0; sells.len()];
    for k in 0..n {
        let mut exercised = 0.0;
        let mut paid = 0.0;
        for (t, p) in buys.iter().zip(buy_prices) {
            if p[k] >= t.k {
                exercised += t.delta;
                paid += option_payoff(p[k], t.k) * t.delta;
            }
        }
        for (g, (t, p)) in sells.iter().zip(sell_prices).enumerate() {
            payoffs[g] = option_payoff(p[k], t.k);
        }
        let a = allocate_scenario(&volumes, &payoffs, exercised, paid - fees, mode, tol).map_err(
            |e| match e {
                ClearingError::ExerciseExceedsSupply { demand, supply, .. } => {
                    ClearingError::ExerciseExceedsSupply {
                        scenario: k,
                        demand,
                        supply,
                    }
                }
                other => other,
            },
        )?;
        for (g, d) in a.delta.iter().enumerate() {
            delta[g][k] = *d;
        }
        ms[k] = a.ms;
        if !a.attained {
            unattained.push(k);
        }
    }
    Ok(ExerciseOutcome {
        delta,
        ms,
        unattained,
    })
}

// ---------------------------------------------------------------------------
// Participants and exact evaluation
// ---------------------------------------------------------------------------

/// A participant of the options market.
#[derive(Debug, Clone, PartialEq)]
pub struct Trader {
    pub id: String,
    pub role: Role,
    /// Holds the energy-market profit π and the nodal price.
    pub acceptability: AcceptabilitySet,
    /// The real-time part of π, `p(x - X) - c(x)`, plus any FTR payoff.
    pub realtime: RandomSample,
}

impl Trader {
    pub fn baseline(&self) -> &RandomSample {
        &self.acceptability.baseline
    }

    pub fn price(&self) -> &RandomSample {
        &self.acceptability.price
    }

    /// Add a cash stream (for example an FTR payoff) to π.
    pub fn with_extra_cash(&self, cash: &RandomSample) -> Result<Trader, ClearingError> {
        let mut out = self.clone();
        out.acceptability.baseline = self.baseline().zip_with(cash, |a, b| a + b)?;
        out.realtime = self.realtime.zip_with(cash, |a, b| a + b)?;
        Ok(out)
    }
}

/// Build the options participants of a loaded run from its market outcome.
/// Missing price and strike bounds default to the highest real-time price.
pub fn traders_from_run(
    run: &LoadedRun,
    outcome: &MarketOutcome,
) -> Result<Vec<Trader>, ClearingError> {
    traders_from_market(&run.market, outcome, &run.roles)
}

/// Build options participants for the given roles of a solved market.
pub fn traders_from_market(
    market: &Market,
    outcome: &MarketOutcome,
    roles: &[OptionsRole],
) -> Result<Vec<Trader>, ClearingError> {
    let peak = outcome
        .realtime
        .iter()
        .flat_map(|r| r.prices.iter().copied())
        .fold(0.0_f64, f64::max);
    roles
        .iter()
        .map(|r| {
            let p = &market.participants[r.participant];
            let spec = &r.acceptability;
            let delta_max = spec
                .delta_max
                .ok_or_else(|| ClearingError::MissingVolumeBound(p.id.clone()))?;
            let bounds = TradeBounds::new(
                spec.q_max.unwrap_or(peak),
                spec.k_max.unwrap_or(peak),
                delta_max,
            )?;
            let set = AcceptabilitySet::new(
                bounds,
                spec.mode.unwrap_or(AcceptMode::RiskNeutral),
                outcome.profits[r.participant].clone(),
                outcome.price_sample(market, r.participant),
            )?;
            Ok(Trader {
                id: p.id.clone(),
                role: r.role,
                acceptability: set,
                realtime: outcome.realtime_component(market, r.participant),
            })
        })
        .collect()
}

/// Fold the run's FTR payoffs `(p_to - p_from)·f` into their holders' profits.
pub fn traders_with_ftr(
    run: &LoadedRun,
    outcome: &MarketOutcome,
    traders: &[Trader],
) -> Result<Vec<Trader>, ClearingError> {
    let mut out = traders.to_vec();
    for (holder, pos) in &run.ftr {
        let j = run
            .roles
            .iter()
            .position(|r| r.participant == *holder)
            .ok_or_else(|| {
                ClearingError::Invalid(format!(
                    "FTR holder {} does not trade options",
                    run.market.participants[*holder].id
                ))
            })?;
        let cash = outcome
            .realtime
            .iter()
            .map(|r| ftr_payoff(pos, &r.prices))
            .collect::<Result<Vec<f64>, _>>()?;
        let cash = RandomSample::new(outcome.scenarios.clone(), cash)?;
        out[j] = out[j].with_extra_cash(&cash)?;
    }
    Ok(out)
}

/// Scales and tolerances derived from the participants.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Tolerances {
    /// Largest absolute price seen by any participant.
    pub price_scale: f64,
    /// Largest volume bound.
    pub delta_scale: f64,
    /// Smoothing sharpness.
    pub beta: f64,
    pub ms_tol: f64,
    pub acc_tol: f64,
    pub eq_tol: f64,
}

impl Tolerances {
    pub fn new(traders: &[Trader], beta: Option<f64>) -> Self {
        let price_scale = traders
            .iter()
            .flat_map(|t| t.price().values().iter().map(|p| p.abs()))
            .fold(0.0_f64, f64::max)
            .max(1e-9);
        let delta_scale = traders
            .iter()
            .map(|t| t.acceptability.bounds.delta_max)
            .fold(0.0_f64, f64::max)
            .max(1e-9);
        let cash = price_scale * delta_scale;
        Self {
            price_scale,
            delta_scale,
            beta: beta.unwrap_or(50.0 / price_scale),
            ms_tol: 1e-4 * cash,
            acc_tol: 1e-6 * cash,
            eq_tol: 1e-6,
        }
    }

    /// Cash scale `max price · Δ̄`.
    pub fn cash_scale(&self) -> f64 {
        self.price_scale * self.delta_scale
    }
}

/// Exact settlement of a set of trades.
#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub trades: Vec<TradeTriple>,
    /// Per participant; empty for buyers.
    pub allocation: Vec<Vec<f64>>,
    pub ms: Vec<f64>,
    pub expected_ms: f64,
    /// Π per participant.
    pub profits: Vec<RandomSample>,
    pub variance_before: Vec<f64>,
    pub variance_after: Vec<f64>,
    /// Acceptability margins; nonnegative means acceptable.
    pub margins: Vec<f64>,
    /// `Σ_g Δ_g - Σ_r Δ_r`.
    pub balance_residual: f64,
    pub unattained: Vec<usize>,
}

impl Evaluation {
    /// `Σ_i (var Π_i - var π_i)`.
    pub fn aggregate_delta(&self) -> f64 {
        self.variance_after
            .iter()
            .zip(&self.variance_before)
            .map(|(a, b)| a - b)
            .sum()
    }

    pub fn max_abs_ms(&self) -> f64 {
        self.ms.iter().fold(0.0_f64, |m, v| m.max(v.abs()))
    }

    pub fn min_margin(&self) -> f64 {
        self.margins.iter().copied().fold(f64::INFINITY, f64::min)
    }
}

fn split_roles(traders: &[Trader]) -> (Vec<usize>, Vec<usize>) {
    let buyers = (0..traders.len())
        .filter(|&i| traders[i].role == Role::Buyer)
        .collect();
    let sellers = (0..traders.len())
        .filter(|&i| traders[i].role == Role::Seller)
        .collect();
    (buyers, sellers)
}

/// Settle `trades` exactly: allocate exercise, compute Π, variances, margins
/// and the surplus in every scenario.
pub fn evaluate_trades(
    traders: &[Trader],
    trades: &[TradeTriple],
    mode: AllocationMode,
    tol: f64,
) -> Result<Evaluation, ClearingError> {
    if trades.len() != traders.len() {
        return Err(ClearingError::TradeCount(trades.len(), traders.len()));
    }
    let (buyers, sellers) = split_roles(traders);
    let buys: Vec<TradeTriple> = buyers.iter().map(|&i| trades[i]).collect();
    let sells: Vec<TradeTriple> = sellers.iter().map(|&i| trades[i]).collect();
    let bp: Vec<&[f64]> = buyers
        .iter()
        .map(|&i| traders[i].price().values())
        .collect();
    let sp: Vec<&[f64]> = sellers
        .iter()
        .map(|&i| traders[i].price().values())
        .collect();
    let out = allocate_exercise(&buys, &bp, &sells, &sp, mode, tol)?;
    let mut allocation = vec![Vec::new(); traders.len()];
    for (g, &i) in sellers.iter().enumerate() {
        allocation[i] = out.delta[g].clone();
    }
    let mut profits = Vec::with_capacity(traders.len());
    let mut margins = Vec::with_capacity(traders.len());
    for (i, tr) in traders.iter().enumerate() {
        let pi = tr.baseline();
        let after = match tr.role {
            Role::Buyer => buyer_profit(pi, &trades[i], tr.price())?,
            Role::Seller => seller_profit(pi, &trades[i], tr.price(), Some(&allocation[i]))?,
        };
        profits.push(after);
        margins.push(acceptability_margin(
            &tr.acceptability,
            &trades[i],
            tr.role,
        )?);
    }
    let w = traders
        .first()
        .map(|t| t.baseline().weights().to_vec())
        .unwrap_or_default();
    let variance_before = traders
        .iter()
        .map(|t| weighted_variance(&w, t.baseline().values()))
        .collect();
    let variance_after = profits
        .iter()
        .map(|p| weighted_variance(&w, p.values()))
        .collect();
    let balance_residual =
        sells.iter().map(|t| t.delta).sum::<f64>() - buys.iter().map(|t| t.delta).sum::<f64>();
    Ok(Evaluation {
        trades: trades.to_vec(),
        allocation,
        expected_ms: weighted_mean(&w, &out.ms),
        ms: out.ms,
        profits,
        variance_before,
        variance_after,
        margins,
        balance_residual,
        unattained: out.unattained,
    })
}

/// Decomposition of a participant's variance change.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VolatilityDiagnostic {
    /// `cov(2A + B, B)`, with `A` the real-time part of π and `B` the option
    /// payoff cash.
    pub covariance: f64,
    /// `var Π - var π`, computed directly.
    pub direct: f64,
    pub reduces: bool,
}

/// Check whether a trade lowers a participant's profit variance.
/// `alloc` is the seller's per-scenario exercised volume.
pub fn volatility_diagnostic(
    trader: &Trader,
    trade: &TradeTriple,
    alloc: Option<&[f64]>,
) -> Result<VolatilityDiagnostic, ClearingError> {
    let w = trader.baseline().weights();
    let a = trader.realtime.values();
    let p = trader.price().values();
    let b: Vec<f64> = match trader.role {
        Role::Buyer => p
            .iter()
            .map(|&p| option_payoff(p, trade.k) * trade.delta)
            .collect(),
        Role::Seller => p
            .iter()
            .enumerate()
            .map(|(k, &p)| -option_payoff(p, trade.k) * alloc.map_or(trade.delta, |d| d[k]))
            .collect(),
    };
    let two_a_b: Vec<f64> = a.iter().zip(&b).map(|(a, b)| 2.0 * a + b).collect();
    let covariance = weighted_covariance(w, &two_a_b, &b);
    let before = weighted_variance(w, trader.baseline().values());
    let after_vals: Vec<f64> = trader
        .baseline()
        .values()
        .iter()
        .zip(&b)
        .map(|(pi, b)| {
            pi + b
                + match trader.role {
                    Role::Buyer => -trade.q * trade.delta,
                    Role::Seller => trade.q * trade.delta,
                }
        })
        .collect();
    let direct = weighted_variance(w, &after_vals) - before;
    let tol = 1e-12 * (1.0 + before);
    Ok(VolatilityDiagnostic {
        covariance,
        direct,
        reduces: covariance < -tol,
    })
}

// ---------------------------------------------------------------------------
// Smoothed model
// ---------------------------------------------------------------------------

/// Map between the unit box the solver sees and per-participant trades.
#[derive(Debug, Clone)]
struct Layout {
    lo: Vec<f64>,
    hi: Vec<f64>,
    q: Vec<usize>,
    k: Vec<usize>,
    d: Vec<usize>,
}

impl Layout {
    fn new(traders: &[Trader], shared: bool, k_box: Option<&[(f64, f64)]>) -> Self {
        let mut lo = Vec::new();
        let mut hi = Vec::new();
        let (mut q, mut k, mut d) = (Vec::new(), Vec::new(), Vec::new());
        let kb = |i: usize, kmax: f64| k_box.map_or((0.0, kmax), |b| b[i]);
        if shared {
            let qmax = traders
                .iter()
                .map(|t| t.acceptability.bounds.q_max)
                .fold(f64::INFINITY, f64::min);
            let kmax = traders
                .iter()
                .map(|t| t.acceptability.bounds.k_max)
                .fold(f64::INFINITY, f64::min);
            lo.push(0.0);
            hi.push(qmax);
            let (a, b) = kb(0, kmax);
            lo.push(a);
            hi.push(b);
            for (i, t) in traders.iter().enumerate() {
                q.push(0);
                k.push(1);
                d.push(2 + i);
                lo.push(0.0);
                hi.push(t.acceptability.bounds.delta_max);
            }
        } else {
            for (i, t) in traders.iter().enumerate() {
                let b = t.acceptability.bounds;
                let (a, c) = kb(i, b.k_max);
                q.push(lo.len());
                lo.push(0.0);
                hi.push(b.q_max);
                k.push(lo.len());
                lo.push(a);
                hi.push(c);
                d.push(lo.len());
                lo.push(0.0);
                hi.push(b.delta_max);
            }
        }
        Self { lo, hi, q, k, d }
    }

    fn dim(&self) -> usize {
        self.lo.len()
    }

    fn value(&self, x: &[f64], v: usize) -> f64 {
        self.lo[v] + x[v] * (self.hi[v] - self.lo[v])
    }

    fn trades(&self, x: &[f64]) -> Vec<TradeTriple> {
        (0..self.q.len())
            .map(|i| {
                TradeTriple::new(
                    self.value(x, self.q[i]),
                    self.value(x, self.k[i]),
                    self.value(x, self.d[i]),
                )
            })
            .collect()
    }

    fn point(&self, trades: &[TradeTriple]) -> Vec<f64> {
        let mut x = vec![0.0; self.dim()];
        let mut set = |v: usize, val: f64| {
            let w = self.hi[v] - self.lo[v];
            x[v] = if w > 0.0 {
                ((val - self.lo[v]) / w).clamp(0.0, 1.0)
            } else {
                0.0
            };
        };
        for (i, t) in trades.iter().enumerate().rev() {
            set(self.q[i], t.q);
            set(self.k[i], t.k);
            set(self.d[i], t.delta);
        }
        x
    }

    /// Gradient with respect to `x` from gradients with respect to each
    /// participant's `(q, K, Δ)`.
    fn pull_back(&self, g: &[[f64; 3]]) -> Vec<f64> {
        let mut out = vec![0.0; self.dim()];
        for (i, gi) in g.iter().enumerate() {
            for (j, v) in [self.q[i], self.k[i], self.d[i]].into_iter().enumerate() {
                out[v] += gi[j] * (self.hi[v] - self.lo[v]);
            }
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Objective {
    Variance,
    Surplus,
}

/// The smoothed (or pattern-fixed) clearing problem in unit-box coordinates.
struct Model<'a> {
    traders: &'a [Trader],
    w: &'a [f64],
    n: usize,
    price: Vec<&'a [f64]>,
    base: Vec<&'a [f64]>,
    buyers: Vec<usize>,
    sellers: Vec<usize>,
    objective: Objective,
    beta: f64,
    /// Fixed exercise pattern `pattern[i][ω]`; smoothing is used when absent.
    pattern: Option<Vec<Vec<bool>>>,
    eps_s: f64,
    dsc: f64,
    msc: f64,
    var_scale: f64,
    acc: Vec<usize>,
    cvar_before: Vec<f64>,
    layout: Layout,
}

/// Forward values needed by the backward pass.
struct Values {
    f: f64,
    eq: Vec<f64>,
    ineq: Vec<f64>,
    trades: Vec<TradeTriple>,
    /// `v[ω·T + i]`: option cash of participant `i`.
    v: Vec<f64>,
    /// `s[ω·T + i]`: smoothed payoff of participant `i`.
    s: Vec<f64>,
}

#[derive(Default)]
struct Local {
    e: Vec<f64>,
    s: Vec<f64>,
    de: Vec<f64>,
    ds: Vec<f64>,
    v: Vec<f64>,
    rho: Vec<f64>,
    delta: Vec<f64>,
    ex: f64,
    se: f64,
    rho0: f64,
    fees: f64,
    paid: f64,
    ms: f64,
}

impl<'a> Model<'a> {
    #[allow(clippy::too_many_arguments)]
    fn new(
        traders: &'a [Trader],
        tol: &Tolerances,
        objective: Objective,
        shared: bool,
        beta: f64,
        pattern: Option<Vec<Vec<bool>>>,
        k_box: Option<&[(f64, f64)]>,
    ) -> Self {
        let (buyers, sellers) = split_roles(traders);
        let w = traders[0].baseline().weights();
        let n = w.len();
        let base: Vec<&[f64]> = traders.iter().map(|t| t.baseline().values()).collect();
        let var_before: f64 = base.iter().map(|b| weighted_variance(w, b)).sum();
        let msc = tol.cash_scale();
        let acc = (0..traders.len())
            .filter(|&i| traders[i].acceptability.mode != AcceptMode::BoxOnly)
            .collect();
        let cvar_before = traders
            .iter()
            .map(|t| match t.acceptability.mode {
                AcceptMode::Cvar { alpha } if alpha > 0.0 => {
                    let loss: Vec<f64> = t.baseline().values().iter().map(|v| -v).collect();
                    weighted_cvar(w, &loss, alpha)
                }
                _ => 0.0,
            })
            .collect();
        Self {
            traders,
            w,
            n,
            price: traders.iter().map(|t| t.price().values()).collect(),
            base,
            buyers,
            sellers,
            objective,
            beta,
            pattern,
            eps_s: 1e-9 * tol.delta_scale,
            dsc: tol.delta_scale,
            msc,
            var_scale: if var_before > 0.0 {
                var_before
            } else {
                msc * msc
            },
            acc,
            cvar_before,
            layout: Layout::new(traders, shared, k_box),
        }
    }

    fn n_eq(&self) -> usize {
        1 + if self.objective == Objective::Variance {
            self.n
        } else {
            0
        }
    }

    fn n_ineq(&self) -> usize {
        self.acc.len()
    }

    fn local(&self, th: &[TradeTriple], k: usize, l: &mut Local) {
        let m = self.traders.len();
        l.e.resize(m, 0.0);
        l.s.resize(m, 0.0);
        l.de.resize(m, 0.0);
        l.ds.resize(m, 0.0);
        l.v.resize(m, 0.0);
        l.rho.resize(self.sellers.len(), 0.0);
        l.delta.resize(self.sellers.len(), 0.0);
        for i in 0..m {
            let u = self.price[i][k] - th[i].k;
            match &self.pattern {
                Some(p) => {
                    let f = if p[i][k] { 1.0 } else { 0.0 };
                    l.e[i] = f;
                    l.s[i] = u * f;
                    l.de[i] = 0.0;
                    l.ds[i] = -f;
                }
                None => {
                    let e = sigmoid(self.beta * u);
                    let de = self.beta * e * (1.0 - e);
                    l.e[i] = e;
                    l.s[i] = u * e;
                    l.de[i] = -de;
                    l.ds[i] = -(e + u * de);
                }
            }
        }
        l.ex = 0.0;
        l.paid = 0.0;
        l.fees = 0.0;
        for &r in &self.buyers {
            let t = &th[r];
            l.v[r] = t.delta * (l.s[r] - t.q);
            l.ex += t.delta * l.e[r];
            l.paid += t.delta * l.s[r];
            l.fees += t.q * t.delta;
        }
        let mut supply = 0.0;
        for &g in &self.sellers {
            let t = &th[g];
            supply += t.delta;
            l.fees -= t.q * t.delta;
        }
        l.se = supply + self.eps_s;
        l.rho0 = l.ex / l.se;
        l.ms = l.fees - l.paid;
        for (j, &g) in self.sellers.iter().enumerate() {
            let t = &th[g];
            l.rho[j] = l.rho0;
            l.delta[j] = t.delta * l.rho[j];
            l.v[g] = t.q * t.delta - l.s[g] * l.delta[j];
            l.ms += l.s[g] * l.delta[j];
        }
    }

    fn forward(&self, x: &[f64]) -> Values {
        let th = self.layout.trades(x);
        let m = self.traders.len();
        let n = self.n;
        let mut v = vec![0.0; n * m];
        let mut s = vec![0.0; n * m];
        let mut eq = vec![0.0; self.n_eq()];
        let mut ineq = vec![0.0; self.n_ineq()];
        let mut ms_mean = 0.0;
        let mut l = Local::default();
        for k in 0..n {
            self.local(&th, k, &mut l);
            v[k * m..(k + 1) * m].copy_from_slice(&l.v);
            s[k * m..(k + 1) * m].copy_from_slice(&l.s);
            ms_mean += self.w[k] * l.ms;
            if self.objective == Objective::Variance {
                eq[1 + k] = l.ms / self.msc;
            }
        }
        eq[0] = (self.sellers.iter().map(|&g| th[g].delta).sum::<f64>()
            - self.buyers.iter().map(|&r| th[r].delta).sum::<f64>())
            / self.dsc;
        for (j, &i) in self.acc.iter().enumerate() {
            ineq[j] = -self.margin(&th, &s, i) / self.msc;
        }
        let f = match self.objective {
            Objective::Surplus => -ms_mean / self.msc,
            Objective::Variance => {
                let mut total = 0.0;
                for i in 0..m {
                    let x: Vec<f64> = (0..n).map(|k| self.base[i][k] + v[k * m + i]).collect();
                    total += weighted_variance(self.w, &x);
                }
                total / self.var_scale
            }
        };
        Values {
            f,
            eq,
            ineq,
            trades: th,
            v,
            s,
        }
    }

    fn sign(&self, i: usize) -> f64 {
        match self.traders[i].role {
            Role::Buyer => 1.0,
            Role::Seller => -1.0,
        }
    }

    /// Worst-case option cash of participant `i` in scenario `k`.
    fn worst_cash(&self, th: &[TradeTriple], s: &[f64], i: usize, k: usize) -> f64 {
        let m = self.traders.len();
        self.sign(i) * th[i].delta * (s[k * m + i] - th[i].q)
    }

    fn margin(&self, th: &[TradeTriple], s: &[f64], i: usize) -> f64 {
        match self.traders[i].acceptability.mode {
            AcceptMode::Cvar { alpha } if alpha > 0.0 => {
                let loss: Vec<f64> = (0..self.n)
                    .map(|k| -(self.base[i][k] + self.worst_cash(th, s, i, k)))
                    .collect();
                self.cvar_before[i] - weighted_cvar(self.w, &loss, alpha)
            }
            _ => (0..self.n)
                .map(|k| self.w[k] * self.worst_cash(th, s, i, k))
                .sum(),
        }
    }

    /// Sensitivity of the margin of `i` to its worst-case cash per scenario.
    fn margin_weights(&self, th: &[TradeTriple], s: &[f64], i: usize) -> Vec<f64> {
        match self.traders[i].acceptability.mode {
            AcceptMode::Cvar { alpha } if alpha > 0.0 => {
                let loss: Vec<f64> = (0..self.n)
                    .map(|k| -(self.base[i][k] + self.worst_cash(th, s, i, k)))
                    .collect();
                weighted_cvar_weights(self.w, &loss, alpha)
            }
            _ => self.w.to_vec(),
        }
    }

    /// Gradient of `bf·f + beq·eq + bineq·ineq` with respect to `x`.
    fn gradient(&self, vals: &Values, bf: f64, beq: &[f64], bineq: &[f64]) -> Vec<f64> {
        let th = &vals.trades;
        let m = self.traders.len();
        let n = self.n;
        let gcount = self.sellers.len();
        let mut gt = vec![[0.0_f64; 3]; m];
        // Balance.
        for &g in &self.sellers {
            gt[g][2] += beq[0] / self.dsc;
        }
        for &r in &self.buyers {
            gt[r][2] -= beq[0] / self.dsc;
        }
        // Acceptability: adjoint on each participant's payoff per scenario.
        let mut bs_acc = vec![0.0; n * m];
        for (j, &i) in self.acc.iter().enumerate() {
            let a = bineq[j];
            if a == 0.0 {
                continue;
            }
            let lw = self.margin_weights(th, &vals.s, i);
            let sg = self.sign(i);
            for k in 0..n {
                let bcash = -a * lw[k] / self.msc;
                let s = vals.s[k * m + i];
                gt[i][2] += bcash * sg * (s - th[i].q);
                gt[i][0] -= bcash * sg * th[i].delta;
                bs_acc[k * m + i] += bcash * sg * th[i].delta;
            }
        }
        // Objective adjoints on the option cash.
        let mut mean = vec![0.0; m];
        if self.objective == Objective::Variance {
            for (i, mi) in mean.iter_mut().enumerate() {
                *mi = (0..n)
                    .map(|k| self.w[k] * (self.base[i][k] + vals.v[k * m + i]))
                    .sum();
            }
        }
        let mut l = Local::default();
        let mut bv = vec![0.0; m];
        let mut bs = vec![0.0; m];
        let mut be = vec![0.0; m];
        let mut bdelta = vec![0.0; gcount];
        let mut brho = vec![0.0; gcount];
        for k in 0..n {
            self.local(th, k, &mut l);
            let mut bms = 0.0;
            match self.objective {
                Objective::Variance => {
                    for i in 0..m {
                        let xk = self.base[i][k] + l.v[i];
                        bv[i] = bf * 2.0 * self.w[k] * (xk - mean[i]) / self.var_scale;
                    }
                }
                Objective::Surplus => {
                    bv.iter_mut().for_each(|b| *b = 0.0);
                    bms -= bf * self.w[k] / self.msc;
                }
            }
            for i in 0..m {
                bs[i] = bs_acc[k * m + i];
                be[i] = 0.0;
            }
            bdelta.iter_mut().for_each(|b| *b = 0.0);
            if self.objective == Objective::Variance {
                bms += beq[1 + k] / self.msc;
            }
            // Seller cash and the surplus.
            let bfees = bms;
            let bpaid = -bms;
            for (j, &g) in self.sellers.iter().enumerate() {
                let t = &th[g];
                gt[g][0] += bv[g] * t.delta;
                gt[g][2] += bv[g] * t.q;
                bs[g] += -bv[g] * l.delta[j] + bms * l.delta[j];
                bdelta[j] += -bv[g] * l.s[g] + bms * l.s[g];
            }
            // δ = Δ·ρ.
            let mut brho0 = 0.0;
            for (j, &g) in self.sellers.iter().enumerate() {
                gt[g][2] += bdelta[j] * l.rho[j];
                brho[j] = bdelta[j] * th[g].delta;
                brho0 += brho[j];
            }
            // ρ = E/Sε.
            let bex = brho0 / l.se;
            let bse = -brho0 * l.ex / (l.se * l.se);
            for &g in &self.sellers {
                let t = &th[g];
                gt[g][2] += bse;
                // fees -= q_g Δ_g
                gt[g][0] -= bfees * t.delta;
                gt[g][2] -= bfees * t.q;
            }
            for &r in &self.buyers {
                let t = &th[r];
                // paid, fees, exercise, buyer cash.
                bs[r] += bpaid * t.delta + bv[r] * t.delta;
                gt[r][2] += bpaid * l.s[r] + bfees * t.q + bex * l.e[r] + bv[r] * (l.s[r] - t.q);
                gt[r][0] += bfees * t.delta - bv[r] * t.delta;
                be[r] += bex * t.delta;
            }
            for i in 0..m {
                gt[i][1] += bs[i] * l.ds[i] + be[i] * l.de[i];
            }
        }
        self.layout.pull_back(&gt)
    }
}

// ---------------------------------------------------------------------------
// Solver
// ---------------------------------------------------------------------------

fn project_unit(x: &mut [f64]) {
    for v in x.iter_mut() {
        *v = v.clamp(0.0, 1.0);
    }
}

fn proj_grad_norm(x: &[f64], g: &[f64]) -> f64 {
    x.iter()
        .zip(g)
        .map(|(xi, gi)| ((xi - gi).clamp(0.0, 1.0) - xi).abs())
        .fold(0.0, f64::max)
}

/// Projected Newton on the unit box. The Hessian comes from central
/// differences of the analytic gradient and is shifted until positive
/// definite on the free variables.
fn newton_box<F>(mut fg: F, x0: &[f64], budget: &mut usize, tol: f64) -> Vec<f64>
where
    F: FnMut(&[f64], bool) -> (f64, Vec<f64>),
{
    let n = x0.len();
    let mut x = x0.to_vec();
    project_unit(&mut x);
    let (mut f, mut g) = fg(&x, true);
    let mut stalled = 0;
    while *budget > 0 {
        if proj_grad_norm(&x, &g) <= tol || stalled >= 5 {
            break;
        }
        *budget -= 1;
        let edge = 1e-12;
        let free: Vec<usize> = (0..n)
            .filter(|&j| !((x[j] <= edge && g[j] > 0.0) || (x[j] >= 1.0 - edge && g[j] < 0.0)))
            .collect();
        let mut step = vec![0.0; n];
        if !free.is_empty() {
            let h = 1e-6;
            let k = free.len();
            let mut hess = nalgebra::DMatrix::<f64>::zeros(k, k);
            for (a, &j) in free.iter().enumerate() {
                let mut xp = x.clone();
                let mut xm = x.clone();
                xp[j] += h;
                xm[j] -= h;
                let gp = fg(&xp, true).1;
                let gm = fg(&xm, true).1;
                for (b, &i) in free.iter().enumerate() {
                    hess[(b, a)] = (gp[i] - gm[i]) / (2.0 * h);
                }
            }
            let hess = (&hess + hess.transpose()) * 0.5;
            let scale = hess.amax().max(1e-12);
            let rhs = nalgebra::DVector::from_iterator(k, free.iter().map(|&j| -g[j]));
            let mut tau = 0.0;
            let d = loop {
                let shifted = &hess + nalgebra::DMatrix::<f64>::identity(k, k) * tau;
                if let Some(ch) = shifted.cholesky() {
                    break Some(ch.solve(&rhs));
                }
                tau = if tau == 0.0 {
                    1e-10 * scale
                } else {
                    tau * 10.0
                };
                if tau > 1e6 * scale {
                    break None;
                }
            };
            match d {
                Some(d) => {
                    for (a, &j) in free.iter().enumerate() {
                        step[j] = d[a];
                    }
                }
                None => {
                    for &j in &free {
                        step[j] = -g[j] / scale;
                    }
                }
            }
        }
        let mut alpha = 1.0;
        let mut accepted = false;
        while alpha > 1e-12 {
            let mut xn: Vec<f64> = (0..n).map(|j| x[j] + alpha * step[j]).collect();
            project_unit(&mut xn);
            let decrease: f64 = (0..n).map(|j| g[j] * (xn[j] - x[j])).sum();
            let fnew = fg(&xn, false).0;
            if fnew <= f + 1e-4 * decrease.min(0.0) && fnew.is_finite() {
                let (fv, gv) = fg(&xn, true);
                let moved = xn.iter().zip(&x).any(|(a, b)| a != b);
                if f - fv <= 1e-13 * (1.0 + f.abs()) {
                    stalled += 1;
                } else {
                    stalled = 0;
                }
                x = xn;
                f = fv;
                g = gv;
                accepted = moved;
                break;
            }
            alpha *= 0.5;
        }
        if !accepted {
            break;
        }
    }
    x
}

/// Newton iterations allowed per augmented Lagrangian subproblem.
const INNER_CAP: usize = 200;

/// Augmented Lagrangian outer loop.
fn alm(
    model: &Model,
    x0: &[f64],
    budget: &mut usize,
    feas_tol: f64,
    opt_tol: f64,
    mu_max: f64,
) -> Vec<f64> {
    let ne = model.n_eq();
    let ni = model.n_ineq();
    let mut lam = vec![0.0; ne];
    let mut nu = vec![0.0; ni];
    let mut mu = 10.0;
    let mut x = x0.to_vec();
    let mut prev = f64::INFINITY;
    let mut eps = 1e-3;
    for _ in 0..60 {
        if *budget == 0 {
            break;
        }
        let fg = |x: &[f64], want: bool| {
            let vals = model.forward(x);
            let mut merit = vals.f;
            let mut beq = vec![0.0; ne];
            let mut bin = vec![0.0; ni];
            for j in 0..ne {
                let h = vals.eq[j];
                merit += lam[j] * h + 0.5 * mu * h * h;
                beq[j] = lam[j] + mu * h;
            }
            for j in 0..ni {
                let p = (nu[j] + mu * vals.ineq[j]).max(0.0);
                merit += (p * p - nu[j] * nu[j]) / (2.0 * mu);
                bin[j] = p;
            }
            let g = if want {
                model.gradient(&vals, 1.0, &beq, &bin)
            } else {
                Vec::new()
            };
            (merit, g)
        };
        let mut inner = (*budget).min(INNER_CAP);
        let before = inner;
        x = newton_box(fg, &x, &mut inner, eps);
        *budget -= before - inner;
        let vals = model.forward(&x);
        let mut inf = 0.0_f64;
        for j in 0..ne {
            inf = inf.max(vals.eq[j].abs());
            lam[j] += mu * vals.eq[j];
        }
        for j in 0..ni {
            inf = inf.max((-vals.ineq[j]).min(nu[j] / mu).abs());
            nu[j] = (nu[j] + mu * vals.ineq[j]).max(0.0);
        }
        if inf <= feas_tol && eps <= opt_tol {
            break;
        }
        if inf > 0.25 * prev {
            if mu >= mu_max {
                break;
            }
            mu *= 10.0;
        }
        prev = inf;
        eps = (eps * 0.1).max(opt_tol);
    }
    x
}

// ---------------------------------------------------------------------------
// Clearing
// ---------------------------------------------------------------------------

/// Solver settings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClearingConfig {
    pub mode: ClearMode,
    /// Smoothing sharpness; defaults to `50 / max price`.
    pub beta: Option<f64>,
    /// Inner iterations allowed per start. Zero skips the search and returns
    /// the zero trade.
    pub max_iterations: usize,
    /// Random starts besides the two fixed ones.
    pub starts: usize,
    pub seed: u64,
    /// Smoothing stages; each sharpens β fourfold.
    pub stages: usize,
    pub tie_break: TieBreak,
}

impl Default for ClearingConfig {
    fn default() -> Self {
        Self {
            mode: ClearMode::Social,
            beta: None,
            max_iterations: 20_000,
            starts: 6,
            seed: 0,
            stages: 3,
            tie_break: TieBreak::Projected,
        }
    }
}

impl From<&ClearingSpec> for ClearingConfig {
    fn from(spec: &ClearingSpec) -> Self {
        let d = Self::default();
        Self {
            mode: spec.mode,
            beta: spec.beta,
            max_iterations: spec.max_iterations.unwrap_or(d.max_iterations),
            starts: spec.starts.unwrap_or(d.starts),
            seed: spec.seed.unwrap_or(d.seed),
            ..d
        }
    }
}

impl ClearingConfig {
    pub fn allocation_mode(&self) -> AllocationMode {
        match self.mode {
            ClearMode::Selfish => AllocationMode::Selfish,
            _ => AllocationMode::Social(self.tie_break),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClearingDiagnostics {
    pub candidates: usize,
    pub accepted: usize,
    /// Index of the chosen candidate; the zero trade is always last.
    pub chosen: usize,
    pub fallback: bool,
    pub iterations: usize,
    pub max_abs_ms: f64,
    pub balance_residual: f64,
    pub min_margin: f64,
    pub unattained: Vec<usize>,
    pub tolerances: Tolerances,
}

/// The outcome of a clearing run.
#[derive(Debug, Clone, PartialEq)]
pub struct ClearingResult {
    pub mode: ClearMode,
    pub ids: Vec<String>,
    pub roles: Vec<Role>,
    pub evaluation: Evaluation,
    /// Total variance after clearing (variance modes) or expected surplus.
    pub objective: f64,
    pub diagnostics: ClearingDiagnostics,
}

impl ClearingResult {
    pub fn trades(&self) -> &[TradeTriple] {
        &self.evaluation.trades
    }

    pub fn aggregate_delta(&self) -> f64 {
        self.evaluation.aggregate_delta()
    }
}

/// Clip trades to their boxes, drop negligible volumes and scale the larger
/// side down so sold and bought volumes match.
fn tidy_trades(traders: &[Trader], trades: &[TradeTriple], dsc: f64) -> Vec<TradeTriple> {
    let mut out: Vec<TradeTriple> = trades
        .iter()
        .zip(traders)
        .map(|(t, tr)| {
            let b = tr.acceptability.bounds;
            let mut d = t.delta.clamp(0.0, b.delta_max);
            if d < 1e-10 * dsc {
                d = 0.0;
            }
            TradeTriple::new(t.q.clamp(0.0, b.q_max), t.k.clamp(0.0, b.k_max), d)
        })
        .collect();
    let (buyers, sellers) = split_roles(traders);
    let sb: f64 = buyers.iter().map(|&i| out[i].delta).sum();
    let ss: f64 = sellers.iter().map(|&i| out[i].delta).sum();
    if sb <= 0.0 || ss <= 0.0 {
        for t in out.iter_mut() {
            t.delta = 0.0;
        }
    } else if ss > sb {
        for &i in &sellers {
            out[i].delta *= sb / ss;
        }
    } else if sb > ss {
        for &i in &buyers {
            out[i].delta *= ss / sb;
        }
    }
    for t in out.iter_mut() {
        if t.delta == 0.0 {
            *t = TradeTriple::zero();
        }
    }
    out
}

/// Reset premiums of risk-neutral participants so their margins all equal the
/// mean margin, or zero when `lift` is set and the mean is negative. Without
/// the lift net fees are unchanged; with it they drop by the deficit.
/// Returns `None` when a premium would leave its box.
fn rebalance_premiums(
    traders: &[Trader],
    trades: &[TradeTriple],
    lift: bool,
) -> Option<Vec<TradeTriple>> {
    let idx: Vec<usize> = (0..traders.len())
        .filter(|&i| {
            trades[i].delta > 0.0 && traders[i].acceptability.mode == AcceptMode::RiskNeutral
        })
        .collect();
    if idx.len() < 2 {
        return None;
    }
    let w = traders[0].baseline().weights();
    let fair = |i: usize| {
        let k = trades[i].k;
        let pay: Vec<f64> = traders[i]
            .price()
            .values()
            .iter()
            .map(|&p| option_payoff(p, k))
            .collect();
        weighted_mean(w, &pay)
    };
    let margin = |i: usize, q: f64| match traders[i].role {
        Role::Buyer => trades[i].delta * (fair(i) - q),
        Role::Seller => trades[i].delta * (q - fair(i)),
    };
    let mut target = idx.iter().map(|&i| margin(i, trades[i].q)).sum::<f64>() / idx.len() as f64;
    if lift {
        target = target.max(0.0);
    }
    let mut out = trades.to_vec();
    for &i in &idx {
        let q = match traders[i].role {
            Role::Buyer => fair(i) - target / trades[i].delta,
            Role::Seller => fair(i) + target / trades[i].delta,
        };
        if !(q >= 0.0 && q <= traders[i].acceptability.bounds.q_max) {
            return None;
        }
        out[i].q = q;
    }
    Some(out)
}

/// Exercise pattern and strike interval on which it stays fixed.
fn pattern_box(
    traders: &[Trader],
    trades: &[TradeTriple],
    shared: bool,
    tol: &Tolerances,
) -> (Vec<Vec<bool>>, Vec<(f64, f64)>) {
    let eta = 1e-9 * tol.price_scale;
    let mut pattern = Vec::with_capacity(traders.len());
    let mut boxes = Vec::with_capacity(traders.len());
    for (tr, t) in traders.iter().zip(trades) {
        let kmax = tr.acceptability.bounds.k_max;
        let p = tr.price().values();
        let below = p
            .iter()
            .copied()
            .filter(|&v| v < t.k)
            .fold(f64::NEG_INFINITY, f64::max);
        let above = p
            .iter()
            .copied()
            .filter(|&v| v >= t.k)
            .fold(f64::INFINITY, f64::min);
        let lo = if below.is_finite() {
            (below + eta).max(0.0)
        } else {
            0.0
        };
        let hi = if above.is_finite() {
            above.min(kmax)
        } else {
            kmax
        };
        let b = if lo <= hi { (lo, hi) } else { (t.k, t.k) };
        pattern.push(p.iter().map(|&v| v >= t.k).collect());
        boxes.push(b);
    }
    if shared {
        let lo = boxes.iter().map(|b| b.0).fold(0.0, f64::max);
        let hi = boxes.iter().map(|b| b.1).fold(f64::INFINITY, f64::min);
        let b = if lo <= hi {
            (lo, hi)
        } else {
            (trades[0].k, trades[0].k)
        };
        boxes = vec![b; traders.len()];
    }
    (pattern, boxes)
}

/// Run the smoothed stages and the pattern refinement from one start.
/// Returns the candidates produced, refined first, and the iterations used.
fn run_start(
    traders: &[Trader],
    cfg: &ClearingConfig,
    tol: &Tolerances,
    x0: &[f64],
) -> (Vec<Vec<TradeTriple>>, usize) {
    let objective = match cfg.mode {
        ClearMode::Selfish => Objective::Surplus,
        _ => Objective::Variance,
    };
    let shared = cfg.mode == ClearMode::So;
    let mut budget = cfg.max_iterations;
    let mut x = x0.to_vec();
    let mut layout = None;
    for stage in 0..cfg.stages.max(1) {
        let beta = tol.beta * 4f64.powi(stage as i32);
        let model = Model::new(traders, tol, objective, shared, beta, None, None);
        x = alm(&model, &x, &mut budget, 1e-4, 1e-4, 1e6);
        layout = Some(model.layout);
    }
    let smooth = layout.expect("at least one stage").trades(&x);
    let mut current = smooth.clone();
    let mut refined = None;
    for _ in 0..3 {
        if budget == 0 {
            break;
        }
        let (pattern, boxes) = pattern_box(traders, &current, shared, tol);
        let model = Model::new(
            traders,
            tol,
            objective,
            shared,
            tol.beta,
            Some(pattern.clone()),
            Some(&boxes),
        );
        let xr = alm(
            &model,
            &model.layout.point(&current),
            &mut budget,
            1e-9,
            1e-6,
            1e8,
        );
        current = model.layout.trades(&xr);
        refined = Some(current.clone());
        if pattern_box(traders, &current, shared, tol).0 == pattern {
            break;
        }
    }
    let out = refined.into_iter().chain([smooth]).collect();
    (out, cfg.max_iterations - budget)
}

/// Nonnegative weights summing to one that best reproduce `target` from the
/// columns, in the weighted least-squares sense after centering. Returns the
/// weights and the residual variance.
fn replicate(w: &[f64], columns: &[&[f64]], target: &[f64]) -> Option<(Vec<f64>, f64)> {
    let m = columns.len();
    if m == 0 || m > 12 {
        return None;
    }
    let center = |x: &[f64]| {
        let mean = weighted_mean(w, x);
        x.iter().map(|v| v - mean).collect::<Vec<f64>>()
    };
    let cols: Vec<Vec<f64>> = columns.iter().map(|c| center(c)).collect();
    let b = center(target);
    let mut best: Option<(Vec<f64>, f64)> = None;
    for mask in 1usize..(1 << m) {
        let idx: Vec<usize> = (0..m).filter(|j| mask & (1 << j) != 0).collect();
        let k = idx.len();
        let mut kkt = nalgebra::DMatrix::<f64>::zeros(k + 1, k + 1);
        let mut rhs = nalgebra::DVector::<f64>::zeros(k + 1);
        for (a, &ia) in idx.iter().enumerate() {
            for (c, &ic) in idx.iter().enumerate() {
                kkt[(a, c)] = cols[ia]
                    .iter()
                    .zip(&cols[ic])
                    .zip(w)
                    .map(|((x, y), wk)| wk * x * y)
                    .sum();
            }
            kkt[(a, k)] = 1.0;
            kkt[(k, a)] = 1.0;
            rhs[a] = cols[ia]
                .iter()
                .zip(&b)
                .zip(w)
                .map(|((x, y), wk)| wk * x * y)
                .sum();
        }
        rhs[k] = 1.0;
        let Some(sol) = kkt.lu().solve(&rhs) else {
            continue;
        };
        if (0..k).any(|a| !(sol[a] >= -1e-12)) {
            continue;
        }
        let mut c = vec![0.0; m];
        for (a, &ia) in idx.iter().enumerate() {
            c[ia] = sol[a].max(0.0);
        }
        let resid: f64 = (0..b.len())
            .map(|t| {
                let r = b[t] - (0..m).map(|j| c[j] * cols[j][t]).sum::<f64>();
                w[t] * r * r
            })
            .sum();
        if best.as_ref().is_none_or(|(_, r)| resid < *r) {
            best = Some((c, resid));
        }
    }
    best
}

/// Starts where each buyer's price is matched by a mix of the sellers'
/// prices, with a common strike and fair premiums.
fn replication_starts(traders: &[Trader], layout: &Layout) -> Vec<Vec<f64>> {
    let (buyers, sellers) = split_roles(traders);
    let w = traders[0].baseline().weights();
    let cols: Vec<&[f64]> = sellers
        .iter()
        .map(|&g| traders[g].price().values())
        .collect();
    let mut singles = Vec::new();
    let mut combined = vec![0.0; traders.len()];
    let mut strike_sum = 0.0;
    for &r in &buyers {
        let Some((c, _)) = replicate(w, &cols, traders[r].price().values()) else {
            continue;
        };
        let mut vol = vec![0.0; traders.len()];
        vol[r] = traders[r].acceptability.bounds.delta_max;
        for (j, &g) in sellers.iter().enumerate() {
            vol[g] = c[j] * vol[r];
        }
        let strike = weighted_mean(w, traders[r].price().values());
        strike_sum += strike;
        for (a, b) in combined.iter_mut().zip(&vol) {
            *a += b;
        }
        singles.push((vol, strike));
    }
    if singles.len() > 1 {
        singles.push((combined, strike_sum / buyers.len() as f64));
    }
    singles
        .into_iter()
        .map(|(mut vol, strike)| {
            let scale = traders
                .iter()
                .zip(&vol)
                .filter(|(_, v)| **v > 0.0)
                .map(|(t, v)| t.acceptability.bounds.delta_max / v)
                .fold(1.0_f64, f64::min);
            vol.iter_mut().for_each(|v| *v *= scale);
            let trades: Vec<TradeTriple> = traders
                .iter()
                .zip(&vol)
                .map(|(t, &d)| {
                    let b = t.acceptability.bounds;
                    let k = strike.clamp(0.0, b.k_max);
                    let fair = weighted_mean(
                        w,
                        &t.price()
                            .values()
                            .iter()
                            .map(|&p| option_payoff(p, k))
                            .collect::<Vec<_>>(),
                    );
                    TradeTriple::new(fair.clamp(0.0, b.q_max), k, d)
                })
                .collect();
            layout.point(&trades)
        })
        .collect()
}

fn start_points(traders: &[Trader], cfg: &ClearingConfig, layout: &Layout) -> Vec<Vec<f64>> {
    let dim = layout.dim();
    let mut zero_volume = vec![0.5; dim];
    for &v in &layout.d {
        zero_volume[v] = 0.0;
    }
    let mut pts = vec![zero_volume, vec![0.5; dim]];
    pts.extend(replication_starts(traders, layout));
    for j in 0..cfg.starts {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(j as u64));
        pts.push((0..dim).map(|_| rng.random::<f64>()).collect());
    }
    pts
}

/// Clear the options market.
pub fn clear(traders: &[Trader], cfg: &ClearingConfig) -> Result<ClearingResult, ClearingError> {
    if traders.is_empty() {
        return Err(ClearingError::Invalid("no options participants".into()));
    }
    let set = traders[0].baseline().set().clone();
    for t in traders {
        if !t.baseline().set().as_ref().eq(set.as_ref()) || !t.price().same_set(t.baseline()) {
            return Err(ScenarioError::Mismatch.into());
        }
    }
    let tol = Tolerances::new(traders, cfg.beta);
    if !(tol.beta > 0.0) || !tol.beta.is_finite() {
        return Err(ClearingError::Invalid(format!("beta = {}", tol.beta)));
    }
    let mode = cfg.allocation_mode();
    let (buyers, sellers) = split_roles(traders);
    let mut candidates: Vec<Vec<TradeTriple>> = Vec::new();
    let mut iterations = 0;
    if cfg.max_iterations > 0 && !buyers.is_empty() && !sellers.is_empty() {
        let layout = Layout::new(traders, cfg.mode == ClearMode::So, None);
        let starts = start_points(traders, cfg, &layout);
        let runs: Vec<(Vec<Vec<TradeTriple>>, usize)> = starts
            .par_iter()
            .map(|x0| run_start(traders, cfg, &tol, x0))
            .collect();
        for (c, it) in runs {
            candidates.extend(c);
            iterations += it;
        }
    }
    let mut candidates: Vec<Vec<TradeTriple>> = candidates
        .iter()
        .map(|c| tidy_trades(traders, c, tol.delta_scale))
        .collect();
    if cfg.mode == ClearMode::Social {
        let extra: Vec<Vec<TradeTriple>> = candidates
            .iter()
            .flat_map(|c| {
                [false, true]
                    .into_iter()
                    .filter_map(|lift| rebalance_premiums(traders, c, lift))
            })
            .collect();
        candidates.extend(extra);
    }
    candidates.push(vec![TradeTriple::zero(); traders.len()]);
    let n_cand = candidates.len();
    let evals: Vec<Option<Evaluation>> = candidates
        .par_iter()
        .map(|c| {
            let trades = c.clone();
            let e = evaluate_trades(traders, &trades, mode, tol.ms_tol).ok()?;
            let ok = e.balance_residual.abs() <= tol.eq_tol
                && e.min_margin() >= -tol.acc_tol
                && (cfg.mode == ClearMode::Selfish || e.max_abs_ms() <= tol.ms_tol);
            ok.then_some(e)
        })
        .collect();
    let score = |e: &Evaluation| match cfg.mode {
        ClearMode::Selfish => -e.expected_ms,
        _ => e.variance_after.iter().sum::<f64>(),
    };
    let mut best: Option<(usize, f64)> = None;
    for (idx, e) in evals.iter().enumerate() {
        let Some(e) = e else { continue };
        let s = score(e);
        let better = match best {
            None => true,
            Some((_, b)) => s < b - 1e-6 * b.abs().max(tol.acc_tol),
        };
        if better {
            best = Some((idx, s));
        }
    }
    let accepted = evals.iter().filter(|e| e.is_some()).count();
    let (chosen, _) = best.expect("the zero trade is always acceptable");
    let evaluation = evals[chosen]
        .clone()
        .expect("chosen candidate was evaluated");
    let objective = match cfg.mode {
        ClearMode::Selfish => evaluation.expected_ms,
        _ => evaluation.variance_after.iter().sum(),
    };
    let diagnostics = ClearingDiagnostics {
        candidates: n_cand,
        accepted,
        chosen,
        fallback: chosen == n_cand - 1,
        iterations,
        max_abs_ms: evaluation.max_abs_ms(),
        balance_residual: evaluation.balance_residual,
        min_margin: evaluation.min_margin(),
        unattained: evaluation.unattained.clone(),
        tolerances: tol,
    };
    Ok(ClearingResult {
        mode: cfg.mode,
        ids: traders.iter().map(|t| t.id.clone()).collect(),
        roles: traders.iter().map(|t| t.role).collect(),
        evaluation,
        objective,
        diagnostics,
    })
}

/// Social clearing.
pub fn clear_social(
    traders: &[Trader],
    cfg: &ClearingConfig,
) -> Result<ClearingResult, ClearingError> {
    clear(
        traders,
        &ClearingConfig {
            mode: ClearMode::Social,
            ..*cfg
        },
    )
}

/// Social clearing with a common price and strike.
pub fn clear_so(traders: &[Trader], cfg: &ClearingConfig) -> Result<ClearingResult, ClearingError> {
    clear(
        traders,
        &ClearingConfig {
            mode: ClearMode::So,
            ..*cfg
        },
    )
}

/// Surplus-maximizing clearing.
pub fn clear_selfish(
    traders: &[Trader],
    cfg: &ClearingConfig,
) -> Result<ClearingResult, ClearingError> {
    clear(
        traders,
        &ClearingConfig {
            mode: ClearMode::Selfish,
            ..*cfg
        },
    )
}

/// The smoothed variance objective and its gradient at a point of the unit
/// box, for checking derivatives. The value is divided by the total variance
/// before trading.
pub fn smoothed_objective(traders: &[Trader], beta: Option<f64>, x: &[f64]) -> (f64, Vec<f64>) {
    let tol = Tolerances::new(traders, beta);
    let model = Model::new(
        traders,
        &tol,
        Objective::Variance,
        false,
        tol.beta,
        None,
        None,
    );
    let vals = model.forward(x);
    let g = model.gradient(
        &vals,
        1.0,
        &vec![0.0; model.n_eq()],
        &vec![0.0; model.n_ineq()],
    );
    (vals.f, g)
}

/// Smoothed objective and all constraints combined with the given weights,
/// for checking derivatives of the full model.
pub fn smoothed_lagrangian(
    traders: &[Trader],
    beta: Option<f64>,
    x: &[f64],
    weights: &[f64],
) -> (f64, Vec<f64>) {
    let tol = Tolerances::new(traders, beta);
    let model = Model::new(
        traders,
        &tol,
        Objective::Variance,
        false,
        tol.beta,
        None,
        None,
    );
    let vals = model.forward(x);
    let ne = model.n_eq();
    let beq: Vec<f64> = (0..ne).map(|j| weights[j % weights.len()]).collect();
    let bin: Vec<f64> = (0..model.n_ineq())
        .map(|j| weights[(ne + j) % weights.len()])
        .collect();
    let value = vals.f + dot(&beq, &vals.eq) + dot(&bin, &vals.ineq);
    (value, model.gradient(&vals, 1.0, &beq, &bin))
}

/// Dimension of the unit-box search space without shared terms.
pub fn search_dimension(traders: &[Trader]) -> usize {
    3 * traders.len()
}

/// Re-evaluate a cleared result against other profit streams, for example
/// after adding FTR payoffs. The trades are kept as they are.
pub fn reevaluate(
    traders: &[Trader],
    result: &ClearingResult,
    cfg: &ClearingConfig,
) -> Result<ClearingResult, ClearingError> {
    let tol = Tolerances::new(traders, cfg.beta);
    let evaluation = evaluate_trades(traders, result.trades(), cfg.allocation_mode(), tol.ms_tol)?;
    let objective = match result.mode {
        ClearMode::Selfish => evaluation.expected_ms,
        _ => evaluation.variance_after.iter().sum(),
    };
    Ok(ClearingResult {
        evaluation,
        objective,
        ..result.clone()
    })
}

/// One row of the variance report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub id: String,
    pub role: Role,
    pub var_before: f64,
    pub var_after: f64,
    pub delta: f64,
    /// `cov(2A + B, B)`, equal to `delta` up to rounding.
    pub covariance: f64,
    /// Whether the variance strictly decreased.
    pub reduces: bool,
}

/// Per-participant variance changes and their diagnostics.
pub fn aggregate_report(
    traders: &[Trader],
    result: &ClearingResult,
) -> Result<Vec<ReportRow>, ClearingError> {
    let ev = &result.evaluation;
    traders
        .iter()
        .enumerate()
        .map(|(i, tr)| {
            let alloc = (tr.role == Role::Seller).then(|| ev.allocation[i].as_slice());
            let diag = volatility_diagnostic(tr, &ev.trades[i], alloc)?;
            Ok(ReportRow {
                id: tr.id.clone(),
                role: tr.role,
                var_before: ev.variance_before[i],
                var_after: ev.variance_after[i],
                delta: ev.variance_after[i] - ev.variance_before[i],
                covariance: diag.covariance,
                reduces: diag.reduces,
            })
        })
        .collect()
}

/// Variance report for a result re-evaluated with FTR payoffs. `var_before`
/// is taken from the plain profits, `var_after` includes options and FTRs.
pub fn ftr_report(
    base: &[Trader],
    with_ftr: &ClearingResult,
) -> Result<Vec<ReportRow>, ClearingError> {
    let ev = &with_ftr.evaluation;
    base.iter()
        .enumerate()
        .map(|(i, tr)| {
            let w = tr.baseline().weights();
            let a = tr.baseline().values();
            let b: Vec<f64> = ev.profits[i]
                .values()
                .iter()
                .zip(a)
                .map(|(after, before)| after - before)
                .collect();
            let two_a_b: Vec<f64> = a.iter().zip(&b).map(|(a, b)| 2.0 * a + b).collect();
            let var_before = weighted_variance(w, a);
            let covariance = weighted_covariance(w, &two_a_b, &b);
            Ok(ReportRow {
                id: tr.id.clone(),
                role: tr.role,
                var_before,
                var_after: ev.variance_after[i],
                delta: ev.variance_after[i] - var_before,
                covariance,
                reduces: covariance < -1e-12 * (1.0 + var_before),
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn smooth_examples() {
        for beta in [0.1, 1.0, 50.0, 1e4] {
            assert_eq!(smooth_indicator(0.0, beta), 0.5);
        }
        assert!((smooth_plus(10.0, 10.0) - 10.0).abs() < 1e-4);
        assert!(smooth_plus(-10.0, 10.0).abs() < 1e-4);
        assert!((smooth_indicator(1.0, 1e6) - 1.0).abs() < 1e-12);
        assert!(smooth_indicator(-1.0, 1e6) < 1e-12);
    }

    #[test]
    fn smooth_derivatives_match_differences() {
        for &x in &[-2.0, -0.3, 0.0, 0.1, 1.7] {
            let h = 1e-6;
            let fd = (smooth_plus(x + h, 3.0) - smooth_plus(x - h, 3.0)) / (2.0 * h);
            assert!((fd - smooth_plus_deriv(x, 3.0)).abs() < 1e-8);
            let fd = (smooth_indicator(x + h, 3.0) - smooth_indicator(x - h, 3.0)) / (2.0 * h);
            assert!((fd - smooth_indicator_deriv(x, 3.0)).abs() < 1e-8);
        }
    }

    const SOCIAL: AllocationMode = AllocationMode::Social(TieBreak::Projected);

    #[test]
    fn single_seller_is_forced() {
        for mode in [
            SOCIAL,
            AllocationMode::Social(TieBreak::LexFirst),
            AllocationMode::Selfish,
        ] {
            let a = allocate_scenario(&[4.0], &[2.5], 3.0, 1.0, mode, 1e-9).unwrap();
            assert_eq!(a.delta, vec![3.0]);
            assert!((a.ms - (7.5 - 1.0)).abs() < 1e-12);
        }
    }

    #[test]
    fn two_uniform_sellers_lex_first() {
        let a = allocate_scenario(
            &[5.0, 5.0],
            &[2.0, 2.0],
            6.0,
            12.0,
            AllocationMode::Social(TieBreak::LexFirst),
            1e-9,
        )
        .unwrap();
        assert!(a.attained);
        assert!((a.delta[0] - 5.0).abs() < 1e-9 && (a.delta[1] - 1.0).abs() < 1e-9);
        assert!(a.ms.abs() < 1e-9);
        let p = allocate_scenario(&[5.0, 5.0], &[2.0, 2.0], 6.0, 12.0, SOCIAL, 1e-9).unwrap();
        assert!((p.delta[0] - 3.0).abs() < 1e-9 && p.ms.abs() < 1e-9);
    }

    #[test]
    fn selfish_collects_the_most() {
        let a = allocate_scenario(
            &[5.0, 5.0],
            &[1.0, 3.0],
            6.0,
            0.0,
            AllocationMode::Selfish,
            1e-9,
        )
        .unwrap();
        assert_eq!(a.delta, vec![1.0, 5.0]);
        assert!((a.ms - 16.0).abs() < 1e-12);
    }

    #[test]
    fn unreachable_target_is_flagged() {
        let a = allocate_scenario(&[5.0, 5.0], &[1.0, 3.0], 6.0, 100.0, SOCIAL, 1e-9).unwrap();
        assert!(!a.attained);
        assert_eq!(a.delta, vec![1.0, 5.0]);
    }

    #[test]
    fn exercise_above_supply_errors() {
        let e = allocate_scenario(&[1.0, 2.0], &[1.0, 1.0], 4.0, 0.0, SOCIAL, 1e-9).unwrap_err();
        assert!(matches!(e, ClearingError::ExerciseExceedsSupply { .. }));
        let buys = [TradeTriple::new(1.0, 5.0, 4.0)];
        let sells = [TradeTriple::new(1.0, 5.0, 3.0)];
        let p = [3.0, 9.0];
        let e = allocate_exercise(&buys, &[&p], &sells, &[&p], SOCIAL, 1e-9).unwrap_err();
        assert!(matches!(
            e,
            ClearingError::ExerciseExceedsSupply { scenario: 1, .. }
        ));
    }

    proptest! {
        #[test]
        fn smooth_plus_is_bracketed(x in -1e3..1e3f64, beta in 1e-3..1e3f64) {
            let s = smooth_plus(x, beta);
            prop_assert!(s >= x.min(0.0) - 1e-12 && s <= x.max(0.0) + 1e-12);
            let i = smooth_indicator(x, beta);
            prop_assert!((0.0..=1.0).contains(&i));
        }

        #[test]
        fn social_split_balances(
            vols in prop::collection::vec(0.1..10.0f64, 1..5),
            pays in prop::collection::vec(0.0..50.0f64, 5),
            frac in 0.0..1.0f64,
            mix in 0.0..1.0f64,
            lex in any::<bool>(),
        ) {
            let m = vols.len();
            let pays = &pays[..m];
            let supply: f64 = vols.iter().sum();
            let e = frac * supply;
            let (lo, hi) = collection_range(&vols, pays, e);
            let target = lo + mix * (hi - lo);
            let tie = if lex { TieBreak::LexFirst } else { TieBreak::Projected };
            let a = allocate_scenario(&vols, pays, e, target, AllocationMode::Social(tie), 1e-9).unwrap();
            prop_assert!(a.attained);
            let sum: f64 = a.delta.iter().sum();
            prop_assert!((sum - e).abs() <= 1e-8 * (1.0 + supply));
            for (d, v) in a.delta.iter().zip(&vols) {
                prop_assert!(*d >= -1e-12 && *d <= v + 1e-9);
            }
            prop_assert!(a.ms.abs() <= 1e-7 * (1.0 + hi.abs()));
        }

        #[test]
        fn selfish_split_dominates(
            vols in prop::collection::vec(0.1..10.0f64, 1..5),
            pays in prop::collection::vec(0.0..50.0f64, 5),
            frac in 0.0..1.0f64,
        ) {
            let m = vols.len();
            let pays = &pays[..m];
            let e = frac * vols.iter().sum::<f64>();
            let s = allocate_scenario(&vols, pays, e, 0.0, AllocationMode::Selfish, 1e-9).unwrap();
            let p = allocate_scenario(&vols, pays, e, 0.0, SOCIAL, 1e-9).unwrap();
            prop_assert!(s.ms >= p.ms - 1e-9);
        }
    }
}
