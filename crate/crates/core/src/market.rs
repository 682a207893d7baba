//! The two-stage benchmark market.
//!
//! The forward stage dispatches against the certainty-equivalent wind forecast
//! and mean demand. Each real-time scenario then re-dispatches around the
//! forward set-points, limited by ramping and realized wind. Prices at both
//! stages are the multipliers of the energy balance, mapped to buses through
//! the line-limit multipliers. Offered costs drive dispatch and prices; true
//! costs drive profits.

use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::network::{NetworkError, NetworkModel};
use crate::qp::{QpError, QuadraticProgram};
use crate::scenario::{RandomSample, ScenarioError, ScenarioSet};

/// Stand-in for an infinite capacity or ramp limit (MW).
pub const UNLIMITED: f64 = 1e9;

fn is_unlimited(x: f64) -> bool {
    x >= 0.5 * UNLIMITED
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MarketError {
    #[error("invalid market data: {0}")]
    Config(String),
    #[error("participant {0} is not a variable producer")]
    NotVariable(String),
    #[error("forward dispatch is infeasible")]
    ForwardInfeasible,
    #[error("real-time dispatch infeasible in scenario {0}")]
    RealtimeInfeasible(usize),
    #[error("{stage} dispatch hit the unlimited-capacity sentinel for {participant}")]
    SentinelBinding { stage: String, participant: String },
    #[error("{stage} solve failed: {source}")]
    Solver {
        stage: String,
        #[source]
        source: QpError,
    },
    #[error("{} scenario(s) failed in real time, first: {}", .0.len(), .0[0])]
    ScenarioFailures(Vec<MarketError>),
    #[error(transparent)]
    Network(#[from] NetworkError),
    #[error(transparent)]
    Scenario(#[from] ScenarioError),
    #[error("multi-period inputs are inconsistent: {0}")]
    Periods(String),
}

/// `a·x² + b·x` with `a ≥ 0`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QuadraticCost {
    #[serde(default)]
    pub a: f64,
    #[serde(default)]
    pub b: f64,
}

impl QuadraticCost {
    pub fn linear(b: f64) -> Self {
        Self { a: 0.0, b }
    }

    pub fn value(&self, x: f64) -> f64 {
        self.a * x * x + self.b * x
    }

    pub fn marginal(&self, x: f64) -> f64 {
        2.0 * self.a * x + self.b
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ParticipantKind {
    Dispatchable {
        capacity: f64,
        ramp: f64,
    },
    /// Wind availability comes from the scenario set: the k-th variable
    /// producer reads wind column k.
    Variable {
        capacity: f64,
    },
    Consumer {
        demand: f64,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Participant {
    pub id: String,
    pub bus: usize,
    pub kind: ParticipantKind,
    pub offered_cost: QuadraticCost,
    pub true_cost: QuadraticCost,
}

impl Participant {
    pub fn is_producer(&self) -> bool {
        !matches!(self.kind, ParticipantKind::Consumer { .. })
    }
}

/// A validated market instance: network, participants and scenarios.
#[derive(Debug, Clone)]
pub struct Market {
    pub network: NetworkModel,
    pub participants: Vec<Participant>,
    pub scenarios: Arc<ScenarioSet>,
    wind_column: Vec<Option<usize>>,
    demand_column: Vec<Option<usize>>,
}

impl Market {
    pub fn new(
        network: NetworkModel,
        participants: Vec<Participant>,
        scenarios: Arc<ScenarioSet>,
    ) -> Result<Self, MarketError> {
        let mut wind_column = Vec::with_capacity(participants.len());
        let mut demand_column = Vec::with_capacity(participants.len());
        let (mut nw, mut nd) = (0, 0);
        if !participants.iter().any(Participant::is_producer) {
            return Err(MarketError::Config("no producers".into()));
        }
        for p in &participants {
            if p.bus >= network.bus_count() {
                return Err(MarketError::Config(format!("{}: bus out of range", p.id)));
            }
            for c in [p.offered_cost, p.true_cost] {
                if !(c.a >= 0.0) || !c.b.is_finite() {
                    return Err(MarketError::Config(format!(
                        "{}: cost must be convex",
                        p.id
                    )));
                }
            }
            match p.kind {
                ParticipantKind::Dispatchable { capacity, ramp } => {
                    if !(capacity >= 0.0) || !(ramp >= 0.0) {
                        return Err(MarketError::Config(format!(
                            "{}: capacity and ramp must be nonnegative",
                            p.id
                        )));
                    }
                    wind_column.push(None);
                    demand_column.push(None);
                }
                ParticipantKind::Variable { capacity } => {
                    if nw >= scenarios.wind_count() {
                        return Err(MarketError::Config(format!(
                            "{}: scenarios carry only {} wind columns",
                            p.id,
                            scenarios.wind_count()
                        )));
                    }
                    if let Some(k) = scenarios
                        .scenarios()
                        .iter()
                        .position(|s| s.wind[nw] > capacity + 1e-9)
                    {
                        return Err(MarketError::Config(format!(
                            "{}: availability {} exceeds capacity {capacity} in scenario {k}",
                            p.id,
                            scenarios.scenario(k).wind[nw]
                        )));
                    }
                    wind_column.push(Some(nw));
                    demand_column.push(None);
                    nw += 1;
                }
                ParticipantKind::Consumer { demand } => {
                    if !(demand >= 0.0) {
                        return Err(MarketError::Config(format!("{}: negative demand", p.id)));
                    }
                    wind_column.push(None);
                    demand_column.push(Some(nd));
                    nd += 1;
                }
            }
        }
        if nw != scenarios.wind_count() {
            return Err(MarketError::Config(format!(
                "{} variable producers but {} wind columns",
                nw,
                scenarios.wind_count()
            )));
        }
        for (k, s) in scenarios.scenarios().iter().enumerate() {
            if !s.demand.is_empty() && s.demand.len() != nd {
                return Err(MarketError::Config(format!(
                    "scenario {k} has {} demand values for {nd} consumers",
                    s.demand.len()
                )));
            }
        }
        Ok(Self {
            network,
            participants,
            scenarios,
            wind_column,
            demand_column,
        })
    }

    pub fn participant_index(&self, id: &str) -> Option<usize> {
        self.participants.iter().position(|p| p.id == id)
    }

    /// Available wind of participant `i` in scenario `k`.
    pub fn availability(&self, i: usize, k: usize) -> Option<f64> {
        self.wind_column[i].map(|c| self.scenarios.scenario(k).wind[c])
    }

    /// Demand of consumer `i` in scenario `k`.
    pub fn demand(&self, i: usize, k: usize) -> Option<f64> {
        let col = self.demand_column[i]?;
        let s = self.scenarios.scenario(k);
        match self.participants[i].kind {
            ParticipantKind::Consumer { demand } => Some(if s.demand.is_empty() {
                demand
            } else {
                s.demand[col]
            }),
            _ => None,
        }
    }

    /// Certainty-equivalent availability of variable producer `i`.
    pub fn surrogate(&self, i: usize) -> Result<f64, MarketError> {
        let p = &self.participants[i];
        let col = self.wind_column[i].ok_or_else(|| MarketError::NotVariable(p.id.clone()))?;
        certainty_surrogate(p, &self.scenarios, col)
    }

    pub fn expected_demand(&self, i: usize) -> Option<f64> {
        self.demand_column[i]?;
        let w = self.scenarios.weights();
        Some(
            (0..self.scenarios.len())
                .map(|k| w[k] * self.demand(i, k).unwrap_or(0.0))
                .sum(),
        )
    }
}

/// Expected availability `E[x̄^ω]` of wind column `column`, clipped to
/// `[0, capacity]`.
pub fn certainty_surrogate(
    p: &Participant,
    s: &ScenarioSet,
    column: usize,
) -> Result<f64, MarketError> {
    let ParticipantKind::Variable { capacity } = p.kind else {
        return Err(MarketError::NotVariable(p.id.clone()));
    };
    if column >= s.wind_count() {
        return Err(MarketError::Config(format!(
            "{}: no wind column {column}",
            p.id
        )));
    }
    let mean: f64 = s
        .scenarios()
        .iter()
        .zip(s.weights())
        .map(|(sc, w)| w * sc.wind[column])
        .sum();
    Ok(mean.clamp(0.0, capacity))
}

/// Dispatch and nodal prices from one stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageDispatch {
    /// MW per participant; zero for consumers.
    pub dispatch: Vec<f64>,
    /// $/MWh per bus.
    pub prices: Vec<f64>,
    pub objective: f64,
    pub dual_objective: f64,
    pub kkt_residual: f64,
}

struct StageInput {
    lower: Vec<f64>,
    upper: Vec<f64>,
    /// Net demand per bus.
    demand: Vec<f64>,
}

fn solve_stage(market: &Market, input: &StageInput) -> Result<StageDispatch, QpError> {
    let net = &market.network;
    let producers: Vec<usize> = (0..market.participants.len())
        .filter(|&i| market.participants[i].is_producer())
        .collect();
    let n = producers.len();
    let mut qp = QuadraticProgram::new(n);
    for (j, &i) in producers.iter().enumerate() {
        let c = market.participants[i].offered_cost;
        qp.hessian[(j, j)] = 2.0 * c.a;
        qp.linear[j] = c.b;
    }
    let total: f64 = input.demand.iter().sum();
    qp.add_equality(&vec![1.0; n], total);

    let h = net.shift_factors();
    for l in 0..net.line_count() {
        let row: Vec<f64> = producers
            .iter()
            .map(|&i| h[(l, market.participants[i].bus)])
            .collect();
        let base: f64 = (0..net.bus_count())
            .map(|b| h[(l, b)] * input.demand[b])
            .sum();
        let cap = net.lines()[l].capacity;
        qp.add_inequality(&row, cap + base);
        let neg: Vec<f64> = row.iter().map(|v| -v).collect();
        qp.add_inequality(&neg, cap - base);
    }
    for (j, &i) in producers.iter().enumerate() {
        let (lo, hi) = (input.lower[i], input.upper[i]);
        let mut e = vec![0.0; n];
        e[j] = 1.0;
        if !is_unlimited(hi) && hi - lo <= 1e-12 * (1.0 + hi.abs()) {
            qp.add_equality(&e, lo);
            continue;
        }
        if !is_unlimited(hi) {
            qp.add_inequality(&e, hi);
        }
        e[j] = -1.0;
        qp.add_inequality(&e, -lo);
    }

    let sol = qp.solve()?;
    let lambda = -sol.eq_duals[0];
    let prices = (0..net.bus_count())
        .map(|b| {
            let congestion: f64 = (0..net.line_count())
                .map(|l| h[(l, b)] * (sol.ineq_duals[2 * l] - sol.ineq_duals[2 * l + 1]))
                .sum();
            lambda - congestion
        })
        .collect();
    let mut dispatch = vec![0.0; market.participants.len()];
    for (j, &i) in producers.iter().enumerate() {
        dispatch[i] = sol.x[j];
    }
    Ok(StageDispatch {
        dispatch,
        prices,
        objective: sol.objective,
        dual_objective: qp.dual_objective(&sol),
        kkt_residual: qp.kkt_residual(&sol),
    })
}

fn check_sentinel(market: &Market, d: &StageDispatch, stage: &str) -> Result<(), MarketError> {
    for (p, &x) in market.participants.iter().zip(&d.dispatch) {
        if is_unlimited(x) {
            return Err(MarketError::SentinelBinding {
                stage: stage.into(),
                participant: p.id.clone(),
            });
        }
    }
    Ok(())
}

fn bus_demand(market: &Market, per_consumer: impl Fn(usize) -> f64) -> Vec<f64> {
    let mut d = vec![0.0; market.network.bus_count()];
    for (i, p) in market.participants.iter().enumerate() {
        if !p.is_producer() {
            d[p.bus] += per_consumer(i);
        }
    }
    d
}

/// Forward dispatch against certainty-equivalent wind and mean demand.
pub fn solve_forward(market: &Market) -> Result<StageDispatch, MarketError> {
    let mut lower = vec![0.0; market.participants.len()];
    let mut upper = vec![0.0; market.participants.len()];
    for (i, p) in market.participants.iter().enumerate() {
        match p.kind {
            ParticipantKind::Dispatchable { capacity, .. } => upper[i] = capacity,
            ParticipantKind::Variable { .. } => upper[i] = market.surrogate(i)?,
            ParticipantKind::Consumer { .. } => lower[i] = 0.0,
        }
    }
    let demand = bus_demand(market, |i| market.expected_demand(i).unwrap_or(0.0));
    let out = solve_stage(
        market,
        &StageInput {
            lower,
            upper,
            demand,
        },
    )
    .map_err(|e| match e {
        QpError::Infeasible => MarketError::ForwardInfeasible,
        other => MarketError::Solver {
            stage: "forward".into(),
            source: other,
        },
    })?;
    check_sentinel(market, &out, "forward")?;
    Ok(out)
}

/// Real-time re-dispatch in scenario `k` around the forward set-points.
pub fn solve_realtime(
    market: &Market,
    forward: &StageDispatch,
    k: usize,
) -> Result<StageDispatch, MarketError> {
    let np = market.participants.len();
    let mut lower = vec![0.0; np];
    let mut upper = vec![0.0; np];
    for (i, p) in market.participants.iter().enumerate() {
        match p.kind {
            ParticipantKind::Dispatchable { capacity, ramp } => {
                let set_point = forward.dispatch[i];
                if is_unlimited(ramp) {
                    upper[i] = capacity;
                } else {
                    lower[i] = (set_point - ramp).max(0.0);
                    upper[i] = if is_unlimited(capacity) {
                        set_point + ramp
                    } else {
                        (set_point + ramp).min(capacity)
                    };
                }
            }
            ParticipantKind::Variable { .. } => {
                upper[i] = market.availability(i, k).unwrap_or(0.0);
            }
            ParticipantKind::Consumer { .. } => {}
        }
    }
    let demand = bus_demand(market, |i| market.demand(i, k).unwrap_or(0.0));
    let stage = format!("real-time (scenario {k})");
    let out = solve_stage(
        market,
        &StageInput {
            lower,
            upper,
            demand,
        },
    )
    .map_err(|e| match e {
        QpError::Infeasible => MarketError::RealtimeInfeasible(k),
        other => MarketError::Solver {
            stage: stage.clone(),
            source: other,
        },
    })?;
    check_sentinel(market, &out, &stage)?;
    Ok(out)
}

/// Both stages and the resulting per-scenario profits.
#[derive(Debug, Clone)]
pub struct MarketOutcome {
    pub forward: StageDispatch,
    pub realtime: Vec<StageDispatch>,
    /// Per participant. Producers: energy-market profit. Consumers: the
    /// negative of their payments.
    pub profits: Vec<RandomSample>,
    pub scenarios: Arc<ScenarioSet>,
}

impl MarketOutcome {
    /// Real-time nodal price faced by participant `i` in each scenario.
    pub fn price_sample(&self, market: &Market, i: usize) -> RandomSample {
        let bus = market.participants[i].bus;
        self.bus_price_sample(bus)
    }

    pub fn bus_price_sample(&self, bus: usize) -> RandomSample {
        RandomSample::new(
            self.scenarios.clone(),
            self.realtime.iter().map(|r| r.prices[bus]).collect(),
        )
        .expect("one real-time result per scenario")
    }

    /// The real-time part of a producer's profit, `p^ω (x^ω - X) - c(x^ω)`.
    pub fn realtime_component(&self, market: &Market, i: usize) -> RandomSample {
        let p = &market.participants[i];
        let set_point = self.forward.dispatch[i];
        RandomSample::new(
            self.scenarios.clone(),
            self.realtime
                .iter()
                .map(|r| {
                    let x = r.dispatch[i];
                    r.prices[p.bus] * (x - set_point) - p.true_cost.value(x)
                })
                .collect(),
        )
        .expect("one real-time result per scenario")
    }
}

/// Solve every scenario, in parallel. Results keep scenario order.
pub fn solve_all_realtime(
    market: &Market,
    forward: &StageDispatch,
) -> Vec<Result<StageDispatch, MarketError>> {
    (0..market.scenarios.len())
        .into_par_iter()
        .map(|k| solve_realtime(market, forward, k))
        .collect()
}

/// Forward solve, all real-time solves, and profits.
pub fn run_market(market: &Market) -> Result<MarketOutcome, MarketError> {
    let forward = solve_forward(market)?;
    let results = solve_all_realtime(market, &forward);
    let mut realtime = Vec::with_capacity(results.len());
    let mut failures = Vec::new();
    for r in results {
        match r {
            Ok(d) => realtime.push(d),
            Err(e) => failures.push(e),
        }
    }
    if !failures.is_empty() {
        return Err(MarketError::ScenarioFailures(failures));
    }
    let profits = compute_profits(market, &forward, &realtime)?;
    Ok(MarketOutcome {
        forward,
        realtime,
        profits,
        scenarios: market.scenarios.clone(),
    })
}

/// Producer profit `P X + p^ω (x^ω - X) - c_true(x^ω)`; consumers get the
/// negative of `P E[d] + p^ω (E[d] - d^ω)`.
pub fn compute_profits(
    market: &Market,
    forward: &StageDispatch,
    realtime: &[StageDispatch],
) -> Result<Vec<RandomSample>, MarketError> {
    if realtime.len() != market.scenarios.len() {
        return Err(MarketError::Config(format!(
            "{} real-time results for {} scenarios",
            realtime.len(),
            market.scenarios.len()
        )));
    }
    market
        .participants
        .iter()
        .enumerate()
        .map(|(i, p)| {
            let fwd_price = forward.prices[p.bus];
            let values: Vec<f64> = if p.is_producer() {
                let set_point = forward.dispatch[i];
                realtime
                    .iter()
                    .map(|r| {
                        let x = r.dispatch[i];
                        fwd_price * set_point + r.prices[p.bus] * (x - set_point)
                            - p.true_cost.value(x)
                    })
                    .collect()
            } else {
                let mean = market.expected_demand(i).unwrap_or(0.0);
                realtime
                    .iter()
                    .enumerate()
                    .map(|(k, r)| {
                        let d = market.demand(i, k).unwrap_or(0.0);
                        -(fwd_price * mean + r.prices[p.bus] * (mean - d))
                    })
                    .collect()
            };
            Ok(RandomSample::new(market.scenarios.clone(), values)?)
        })
        .collect()
}

/// Average price and total profit over `T` ex-post periods.
///
/// `prices[i][t]` and `profits[i][t]` are participant `i`'s samples in period `t`.
pub fn multi_period_aggregate(
    prices: &[Vec<RandomSample>],
    profits: &[Vec<RandomSample>],
) -> Result<Vec<(RandomSample, RandomSample)>, MarketError> {
    if prices.len() != profits.len() {
        return Err(MarketError::Periods("participant counts differ".into()));
    }
    let periods = prices.first().map(Vec::len).unwrap_or(0);
    prices
        .iter()
        .zip(profits)
        .enumerate()
        .map(|(i, (pr, pf))| {
            if pr.is_empty() || pr.len() != periods || pf.len() != periods {
                return Err(MarketError::Periods(format!(
                    "participant {i}: expected {periods} periods (T >= 1) for prices and profits"
                )));
            }
            let sum = |xs: &[RandomSample]| -> Result<RandomSample, MarketError> {
                let mut acc = xs[0].clone();
                for x in &xs[1..] {
                    acc = acc.zip_with(x, |a, b| a + b)?;
                }
                Ok(acc)
            };
            let t = periods as f64;
            Ok((sum(pr)?.map(|v| v / t), sum(pf)?))
        })
        .collect()
}

/// Whether a stage result respects its own bounds and the network polytope.
pub fn dispatch_feasible(
    market: &Market,
    d: &StageDispatch,
    demand: &[f64],
    tol: f64,
) -> Result<bool, MarketError> {
    let mut injection: Vec<f64> = demand.iter().map(|v| -v).collect();
    for (i, p) in market.participants.iter().enumerate() {
        if p.is_producer() {
            injection[p.bus] += d.dispatch[i];
            if d.dispatch[i] < -tol {
                return Ok(false);
            }
        }
    }
    Ok(market.network.injection_feasible(&injection, tol)?)
}

/// Net demand per bus in scenario `k`, or the mean demand with `None`.
pub fn demand_by_bus(market: &Market, k: Option<usize>) -> Vec<f64> {
    match k {
        Some(k) => bus_demand(market, |i| market.demand(i, k).unwrap_or(0.0)),
        None => bus_demand(market, |i| market.expected_demand(i).unwrap_or(0.0)),
    }
}
