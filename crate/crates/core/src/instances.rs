//! Seeded random market instances for property checks.
//!
//! Each instance has one to three buses on a chain, a peaker at every bus so
//! the real-time stage is always feasible, one to three conventional sellers,
//! one or two wind buyers and a fixed load. Acceptability boxes are drawn at
//! random and every options participant is risk neutral.

use std::sync::Arc;

use rand::{Rng, RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::clearing::{traders_from_market, ClearingError, Trader};
use crate::config::{AcceptSpec, OptionsRole};
use crate::market::{
    run_market, Market, MarketError, Participant, ParticipantKind, QuadraticCost, UNLIMITED,
};
use crate::network::{Line, NetworkError, NetworkModel};
use crate::options::{AcceptMode, Role};
use crate::scenario::{sample_independent_uniform, ScenarioError};

#[derive(Debug, thiserror::Error)]
pub enum InstanceError {
    #[error(transparent)]
    Network(#[from] NetworkError),
    #[error(transparent)]
    Scenario(#[from] ScenarioError),
    #[error(transparent)]
    Market(#[from] MarketError),
    #[error(transparent)]
    Clearing(#[from] ClearingError),
}

/// A generated market with its options roles.
#[derive(Debug, Clone)]
pub struct RandomInstance {
    pub seed: u64,
    pub market: Market,
    pub roles: Vec<OptionsRole>,
}

impl RandomInstance {
    /// Solve the market and build the options participants.
    pub fn traders(&self) -> Result<Vec<Trader>, InstanceError> {
        let outcome = run_market(&self.market)?;
        Ok(traders_from_market(&self.market, &outcome, &self.roles)?)
    }
}

fn uniform(rng: &mut impl Rng, lo: f64, hi: f64) -> f64 {
    lo + (hi - lo) * rng.random::<f64>()
}

/// Draw one instance with `n` scenarios.
pub fn random_instance(seed: u64, n: usize) -> Result<RandomInstance, InstanceError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let buses = rng.random_range(1..=3usize);
    let lines: Vec<Line> = (1..buses)
        .map(|b| Line {
            from: b - 1,
            to: b,
            capacity: uniform(&mut rng, 10.0, 40.0),
        })
        .collect();
    let reactances: Vec<f64> = lines.iter().map(|_| uniform(&mut rng, 0.1, 1.0)).collect();
    let network = if buses == 1 {
        NetworkModel::copperplate()
    } else {
        NetworkModel::from_reactances((1..=buses as u32).collect(), lines, &reactances, 0)?
    };

    let mut participants = Vec::new();
    let mut roles = Vec::new();
    for b in 0..buses {
        participants.push(Participant {
            id: format!("peaker{}", b + 1),
            bus: b,
            kind: ParticipantKind::Dispatchable {
                capacity: 1000.0,
                ramp: UNLIMITED,
            },
            offered_cost: QuadraticCost::linear(uniform(&mut rng, 50.0, 80.0)),
            true_cost: QuadraticCost::linear(uniform(&mut rng, 30.0, 50.0)),
        });
    }
    let accept = |rng: &mut ChaCha8Rng| AcceptSpec {
        mode: Some(AcceptMode::RiskNeutral),
        q_max: rng.random_bool(0.5).then(|| uniform(rng, 20.0, 80.0)),
        k_max: rng.random_bool(0.5).then(|| uniform(rng, 20.0, 80.0)),
        delta_max: Some(uniform(rng, 1.0, 20.0)),
    };
    let sellers = rng.random_range(1..=3usize);
    for g in 0..sellers {
        let b = uniform(&mut rng, 15.0, 35.0);
        participants.push(Participant {
            id: format!("g{}", g + 1),
            bus: rng.random_range(0..buses),
            kind: ParticipantKind::Dispatchable {
                capacity: uniform(&mut rng, 30.0, 80.0),
                ramp: uniform(&mut rng, 0.0, 20.0),
            },
            offered_cost: QuadraticCost {
                a: uniform(&mut rng, 0.005, 0.05),
                b,
            },
            true_cost: QuadraticCost::linear(b * uniform(&mut rng, 0.5, 1.0)),
        });
        roles.push(OptionsRole {
            participant: participants.len() - 1,
            role: Role::Seller,
            acceptability: accept(&mut rng),
        });
    }
    let buyers = rng.random_range(1..=2usize);
    let mut mu = Vec::new();
    let mut sigma = Vec::new();
    for r in 0..buyers {
        let m = uniform(&mut rng, 10.0, 30.0);
        let s = uniform(&mut rng, 1.0, m / 3f64.sqrt() * 0.8);
        mu.push(m);
        sigma.push(s);
        participants.push(Participant {
            id: format!("r{}", r + 1),
            bus: rng.random_range(0..buses),
            kind: ParticipantKind::Variable {
                capacity: m + 3f64.sqrt() * s,
            },
            offered_cost: QuadraticCost::linear(0.0),
            true_cost: QuadraticCost::linear(0.0),
        });
        roles.push(OptionsRole {
            participant: participants.len() - 1,
            role: Role::Buyer,
            acceptability: accept(&mut rng),
        });
    }
    participants.push(Participant {
        id: "load".into(),
        bus: rng.random_range(0..buses),
        kind: ParticipantKind::Consumer {
            demand: uniform(&mut rng, 60.0, 150.0),
        },
        offered_cost: QuadraticCost::linear(0.0),
        true_cost: QuadraticCost::linear(0.0),
    });
    let scenarios = sample_independent_uniform(&mu, &sigma, n, seed)?;
    let market = Market::new(network, participants, Arc::new(scenarios))?;
    Ok(RandomInstance {
        seed,
        market,
        roles,
    })
}
