//! Discrete probability spaces and the statistics computed over them.
//!
//! A [`ScenarioSet`] is a finite list of scenarios with probability weights.
//! Every per-scenario quantity in the crate (prices, profits, surpluses) is a
//! [`RandomSample`] tied to one set, and expectation, variance, covariance and
//! CVaR are all weighted sums over that set.

use std::sync::Arc;

use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

const WEIGHT_SUM_TOL: f64 = 1e-12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ScenarioError {
    #[error("scenario set must contain at least one scenario")]
    Empty,
    #[error("weights must be nonnegative and sum to 1 (sum = {0})")]
    BadWeights(f64),
    #[error("negative wind availability {value} in scenario {scenario}")]
    NegativeWind { scenario: usize, value: f64 },
    #[error("scenario {scenario} has {found} wind values, expected {expected}")]
    WindArity {
        scenario: usize,
        found: usize,
        expected: usize,
    },
    #[error("uniform support would go negative: mu - sqrt(3)*sigma = {0}")]
    NegativeSupport(f64),
    #[error("invalid grid parameters: {0}")]
    BadGrid(String),
    #[error("samples belong to different scenario sets")]
    Mismatch,
    #[error("sample has {found} values but the scenario set has {expected} scenarios")]
    Length { found: usize, expected: usize },
    #[error("CVaR level must lie in [0, 1), got {0}")]
    BadAlpha(f64),
}

/// One realization of the uncertain quantities.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    /// Available wind per variable producer (MW), in participant order.
    pub wind: Vec<f64>,
    /// Demand per consumer (MW). Empty means every consumer sits at its nominal demand.
    #[serde(default)]
    pub demand: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScenarioSet {
    scenarios: Vec<Scenario>,
    weights: Vec<f64>,
}

impl ScenarioSet {
    pub fn new(scenarios: Vec<Scenario>, weights: Vec<f64>) -> Result<Self, ScenarioError> {
        if scenarios.is_empty() {
            return Err(ScenarioError::Empty);
        }
        if weights.len() != scenarios.len() {
            return Err(ScenarioError::Length {
                found: weights.len(),
                expected: scenarios.len(),
            });
        }
        let total: f64 = weights.iter().sum();
        if weights.iter().any(|w| !(*w >= 0.0)) || (total - 1.0).abs() > WEIGHT_SUM_TOL {
            return Err(ScenarioError::BadWeights(total));
        }
        let arity = scenarios[0].wind.len();
        for (k, s) in scenarios.iter().enumerate() {
            if s.wind.len() != arity {
                return Err(ScenarioError::WindArity {
                    scenario: k,
                    found: s.wind.len(),
                    expected: arity,
                });
            }
            if let Some(&value) = s.wind.iter().find(|w| !(**w >= 0.0)) {
                return Err(ScenarioError::NegativeWind { scenario: k, value });
            }
        }
        Ok(Self { scenarios, weights })
    }

    /// Equally weighted scenarios.
    pub fn equiprobable(scenarios: Vec<Scenario>) -> Result<Self, ScenarioError> {
        let n = scenarios.len().max(1);
        let weights = vec![1.0 / n as f64; scenarios.len()];
        Self::new(scenarios, weights)
    }

    pub fn len(&self) -> usize {
        self.scenarios.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scenarios.is_empty()
    }

    pub fn scenarios(&self) -> &[Scenario] {
        &self.scenarios
    }

    pub fn scenario(&self, k: usize) -> &Scenario {
        &self.scenarios[k]
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    /// Number of wind columns carried by each scenario.
    pub fn wind_count(&self) -> usize {
        self.scenarios[0].wind.len()
    }

    /// The availability of wind column `j` across scenarios.
    pub fn wind_column(&self, j: usize) -> Vec<f64> {
        self.scenarios.iter().map(|s| s.wind[j]).collect()
    }
}

/// Midpoint points of `[mu - sqrt(3) sigma, mu + sqrt(3) sigma]`, i.e. a uniform
/// law with mean `mu` and standard deviation `sigma`.
pub fn uniform_grid_points(mu: f64, sigma: f64, n: usize) -> Result<Vec<f64>, ScenarioError> {
    if n == 0 {
        return Err(ScenarioError::BadGrid("n must be at least 1".into()));
    }
    if !(sigma >= 0.0) || !mu.is_finite() {
        return Err(ScenarioError::BadGrid(format!("mu={mu}, sigma={sigma}")));
    }
    let half = 3f64.sqrt() * sigma;
    if mu - half < 0.0 {
        return Err(ScenarioError::NegativeSupport(mu - half));
    }
    // Points are placed symmetrically about mu so the sample mean is mu.
    Ok((0..n)
        .map(|k| {
            let offset = half * ((2 * k + 1) as f64 / n as f64 - 1.0);
            mu + offset
        })
        .collect())
}

/// Equally weighted midpoint grid for a single wind producer.
pub fn make_uniform_grid(mu: f64, sigma: f64, n: usize) -> Result<ScenarioSet, ScenarioError> {
    let points = uniform_grid_points(mu, sigma, n)?;
    ScenarioSet::equiprobable(
        points
            .into_iter()
            .map(|w| Scenario {
                wind: vec![w],
                demand: Vec::new(),
            })
            .collect(),
    )
}

/// Midpoint grid over a common quantile: every producer sits at the same
/// quantile of its own uniform law in each scenario (perfectly correlated wind).
pub fn make_correlated_grid(
    mu: &[f64],
    sigma: &[f64],
    n: usize,
) -> Result<ScenarioSet, ScenarioError> {
    if mu.len() != sigma.len() {
        return Err(ScenarioError::BadGrid("mu and sigma lengths differ".into()));
    }
    let columns = mu
        .iter()
        .zip(sigma)
        .map(|(&m, &s)| uniform_grid_points(m, s, n))
        .collect::<Result<Vec<_>, _>>()?;
    let scenarios = (0..n)
        .map(|k| Scenario {
            wind: columns.iter().map(|c| c[k]).collect(),
            demand: Vec::new(),
        })
        .collect();
    ScenarioSet::equiprobable(scenarios)
}

/// Independent uniform draws per producer from a seeded generator.
pub fn sample_independent_uniform(
    mu: &[f64],
    sigma: &[f64],
    n: usize,
    seed: u64,
) -> Result<ScenarioSet, ScenarioError> {
    if mu.len() != sigma.len() || n == 0 {
        return Err(ScenarioError::BadGrid("mu/sigma mismatch or n = 0".into()));
    }
    for (&m, &s) in mu.iter().zip(sigma) {
        uniform_grid_points(m, s, 1)?;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let scenarios = (0..n)
        .map(|_| Scenario {
            wind: mu
                .iter()
                .zip(sigma)
                .map(|(&m, &s)| {
                    let u: f64 = rng.random();
                    m + 3f64.sqrt() * s * (2.0 * u - 1.0)
                })
                .collect(),
            demand: Vec::new(),
        })
        .collect();
    ScenarioSet::equiprobable(scenarios)
}

/// CVaR level. `0` is risk neutral.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RiskPreference {
    alpha: f64,
}

impl RiskPreference {
    pub fn new(alpha: f64) -> Result<Self, ScenarioError> {
        if (0.0..1.0).contains(&alpha) {
            Ok(Self { alpha })
        } else {
            Err(ScenarioError::BadAlpha(alpha))
        }
    }

    pub fn neutral() -> Self {
        Self { alpha: 0.0 }
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }
}

/// A real-valued random variable on a scenario set.
#[derive(Debug, Clone, PartialEq)]
pub struct RandomSample {
    set: Arc<ScenarioSet>,
    values: Vec<f64>,
}

impl RandomSample {
    pub fn new(set: Arc<ScenarioSet>, values: Vec<f64>) -> Result<Self, ScenarioError> {
        if values.len() != set.len() {
            return Err(ScenarioError::Length {
                found: values.len(),
                expected: set.len(),
            });
        }
        Ok(Self { set, values })
    }

    pub fn constant(set: Arc<ScenarioSet>, value: f64) -> Self {
        let values = vec![value; set.len()];
        Self { set, values }
    }

    pub fn set(&self) -> &Arc<ScenarioSet> {
        &self.set
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn weights(&self) -> &[f64] {
        self.set.weights()
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn same_set(&self, other: &RandomSample) -> bool {
        Arc::ptr_eq(&self.set, &other.set) || self.set.weights() == other.set.weights()
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> RandomSample {
        RandomSample {
            set: self.set.clone(),
            values: self.values.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_with(
        &self,
        other: &RandomSample,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<RandomSample, ScenarioError> {
        if !self.same_set(other) {
            return Err(ScenarioError::Mismatch);
        }
        Ok(RandomSample {
            set: self.set.clone(),
            values: self
                .values
                .iter()
                .zip(&other.values)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn expectation(&self) -> f64 {
        weighted_mean(self.weights(), &self.values)
    }

    pub fn variance(&self) -> f64 {
        weighted_covariance(self.weights(), &self.values, &self.values)
    }

    pub fn covariance(&self, other: &RandomSample) -> Result<f64, ScenarioError> {
        if !self.same_set(other) {
            return Err(ScenarioError::Mismatch);
        }
        Ok(weighted_covariance(
            self.weights(),
            &self.values,
            &other.values,
        ))
    }

    /// CVaR of this sample read as a loss.
    pub fn cvar(&self, pref: RiskPreference) -> f64 {
        weighted_cvar(self.weights(), &self.values, pref.alpha())
    }
}

pub fn expectation(x: &RandomSample) -> f64 {
    x.expectation()
}

pub fn variance(x: &RandomSample) -> f64 {
    x.variance()
}

pub fn covariance(x: &RandomSample, y: &RandomSample) -> Result<f64, ScenarioError> {
    x.covariance(y)
}

pub fn cvar(loss: &RandomSample, pref: RiskPreference) -> f64 {
    loss.cvar(pref)
}

pub fn weighted_mean(w: &[f64], x: &[f64]) -> f64 {
    w.iter().zip(x).map(|(a, b)| a * b).sum()
}

/// Two-pass weighted covariance. With `x == y` this is the variance, and it is
/// clamped at zero in that case so round-off never yields a negative variance.
pub fn weighted_covariance(w: &[f64], x: &[f64], y: &[f64]) -> f64 {
    let mx = weighted_mean(w, x);
    let my = weighted_mean(w, y);
    let c: f64 = w
        .iter()
        .zip(x.iter().zip(y))
        .map(|(wk, (a, b))| wk * (a - mx) * (b - my))
        .sum();
    if std::ptr::eq(x, y) {
        c.max(0.0)
    } else {
        c
    }
}

pub fn weighted_variance(w: &[f64], x: &[f64]) -> f64 {
    weighted_covariance(w, x, x)
}

/// Tail average of the largest losses carrying total mass `1 - alpha`.
///
/// The boundary scenario contributes only the fraction of its weight that
/// fits in the tail, which makes the result exact for discrete laws. When the
/// tail is thinner than the heaviest atom the result is the maximum loss.
pub fn weighted_cvar(w: &[f64], loss: &[f64], alpha: f64) -> f64 {
    if alpha == 0.0 {
        return weighted_mean(w, loss);
    }
    let mut order: Vec<usize> = (0..loss.len()).collect();
    order.sort_by(|&a, &b| loss[b].total_cmp(&loss[a]).then(a.cmp(&b)));
    let tail = 1.0 - alpha;
    let mut remaining = tail;
    let mut acc = 0.0;
    for &k in &order {
        if remaining <= 0.0 {
            break;
        }
        let take = w[k].min(remaining);
        acc += take * loss[k];
        remaining -= take;
    }
    acc / tail
}

/// Subgradient of [`weighted_cvar`] with respect to each loss value: the
/// tail weight each scenario receives, divided by `1 - alpha`.
pub fn weighted_cvar_weights(w: &[f64], loss: &[f64], alpha: f64) -> Vec<f64> {
    if alpha == 0.0 {
        return w.to_vec();
    }
    let mut order: Vec<usize> = (0..loss.len()).collect();
    order.sort_by(|&a, &b| loss[b].total_cmp(&loss[a]).then(a.cmp(&b)));
    let tail = 1.0 - alpha;
    let mut remaining = tail;
    let mut out = vec![0.0; loss.len()];
    for &k in &order {
        if remaining <= 0.0 {
            break;
        }
        let take = w[k].min(remaining);
        out[k] = take / tail;
        remaining -= take;
    }
    out
}
