//! JSON run configuration: network, participants, scenarios, clearing and
//! acceptability settings.
//!
//! Paths inside a run config are resolved against the directory holding it.

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::copperplate::{CopperplateError, CopperplateInstance};
use crate::market::{Market, MarketError, Participant, ParticipantKind, QuadraticCost, UNLIMITED};
use crate::network::{Line, NetworkError, NetworkModel};
use crate::options::{AcceptMode, Role};
use crate::scenario::{
    make_correlated_grid, sample_independent_uniform, Scenario, ScenarioError, ScenarioSet,
};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("cannot parse {path}: {source}")]
    Parse {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
    #[error("invalid configuration: {0}")]
    Invalid(String),
    #[error(transparent)]
    Network(#[from] NetworkError),
    #[error(transparent)]
    Scenario(#[from] ScenarioError),
    #[error(transparent)]
    Market(#[from] MarketError),
    #[error(transparent)]
    Copperplate(#[from] CopperplateError),
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T, ConfigError> {
    let text = fs::read_to_string(path).map_err(|source| ConfigError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    serde_json::from_str(&text).map_err(|source| ConfigError::Parse {
        path: path.to_path_buf(),
        source,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LineSpec {
    pub from: u32,
    pub to: u32,
    pub capacity: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reactance: Option<f64>,
    /// One entry per bus, in `buses` order.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub shift_factors: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkSpec {
    pub buses: Vec<u32>,
    /// Defaults to the first bus.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub slack: Option<u32>,
    #[serde(default)]
    pub lines: Vec<LineSpec>,
}

impl NetworkSpec {
    pub fn build(&self) -> Result<NetworkModel, ConfigError> {
        if self.buses.is_empty() {
            return Err(NetworkError::NoBuses.into());
        }
        let index = |id: u32| -> Result<usize, ConfigError> {
            self.buses
                .iter()
                .position(|&b| b == id)
                .ok_or(ConfigError::Network(NetworkError::UnknownBus(id)))
        };
        let mut lines = Vec::with_capacity(self.lines.len());
        for l in &self.lines {
            lines.push(Line {
                from: index(l.from)?,
                to: index(l.to)?,
                capacity: l.capacity,
            });
        }
        let with_x = self.lines.iter().filter(|l| l.reactance.is_some()).count();
        let with_h = self
            .lines
            .iter()
            .filter(|l| l.shift_factors.is_some())
            .count();
        let nb = self.buses.len();
        if with_x == self.lines.len() {
            let x: Vec<f64> = self.lines.iter().filter_map(|l| l.reactance).collect();
            let slack = index(self.slack.unwrap_or(self.buses[0]))?;
            Ok(NetworkModel::from_reactances(
                self.buses.clone(),
                lines,
                &x,
                slack,
            )?)
        } else if with_h == self.lines.len() {
            let mut h = nalgebra::DMatrix::zeros(self.lines.len(), nb);
            for (l, spec) in self.lines.iter().enumerate() {
                let row = spec.shift_factors.as_ref().expect("counted above");
                if row.len() != nb {
                    return Err(NetworkError::ShiftRow {
                        line: l,
                        found: row.len(),
                        expected: nb,
                    }
                    .into());
                }
                for (b, v) in row.iter().enumerate() {
                    h[(l, b)] = *v;
                }
            }
            Ok(NetworkModel::from_shift_factors(
                self.buses.clone(),
                lines,
                h,
            )?)
        } else {
            Err(NetworkError::MixedLineData.into())
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum KindSpec {
    /// Omitted capacity or ramp means unlimited.
    Dispatchable {
        #[serde(default)]
        capacity: Option<f64>,
        #[serde(default)]
        ramp: Option<f64>,
    },
    Variable {
        capacity: f64,
    },
    Consumer {
        demand: f64,
    },
}

/// Per-participant acceptability; missing fields fall back to the run defaults.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct AcceptSpec {
    #[serde(default, flatten, skip_serializing_if = "Option::is_none")]
    pub mode: Option<AcceptMode>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub q_max: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub k_max: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub delta_max: Option<f64>,
}

impl AcceptSpec {
    /// Fields of `self` override those of `base`.
    pub fn over(&self, base: &AcceptSpec) -> AcceptSpec {
        AcceptSpec {
            mode: self.mode.or(base.mode),
            q_max: self.q_max.or(base.q_max),
            k_max: self.k_max.or(base.k_max),
            delta_max: self.delta_max.or(base.delta_max),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParticipantSpec {
    pub id: String,
    pub bus: u32,
    #[serde(flatten)]
    pub kind: KindSpec,
    #[serde(default = "zero_cost")]
    pub offered_cost: QuadraticCost,
    /// Defaults to the offered cost.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub true_cost: Option<QuadraticCost>,
    /// Side taken in the options market, if any.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub role: Option<Role>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub acceptability: Option<AcceptSpec>,
}

fn zero_cost() -> QuadraticCost {
    QuadraticCost::linear(0.0)
}

impl ParticipantSpec {
    pub fn build(&self, net: &NetworkModel) -> Result<Participant, ConfigError> {
        let kind = match self.kind {
            KindSpec::Dispatchable { capacity, ramp } => ParticipantKind::Dispatchable {
                capacity: capacity.unwrap_or(UNLIMITED),
                ramp: ramp.unwrap_or(UNLIMITED),
            },
            KindSpec::Variable { capacity } => ParticipantKind::Variable { capacity },
            KindSpec::Consumer { demand } => ParticipantKind::Consumer { demand },
        };
        Ok(Participant {
            id: self.id.clone(),
            bus: net.bus_index(self.bus)?,
            kind,
            offered_cost: self.offered_cost,
            true_cost: self.true_cost.unwrap_or(self.offered_cost),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WindSpec {
    pub mu: f64,
    pub sigma: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ScenarioSpec {
    /// Equiprobable midpoint grid; all wind columns share the same quantile.
    Grid { wind: Vec<WindSpec>, n: usize },
    /// Independent uniform draws.
    Sampled {
        wind: Vec<WindSpec>,
        n: usize,
        seed: u64,
    },
    Explicit {
        scenarios: Vec<Scenario>,
        #[serde(default)]
        weights: Option<Vec<f64>>,
    },
}

impl ScenarioSpec {
    pub fn build(&self) -> Result<ScenarioSet, ConfigError> {
        let split = |w: &[WindSpec]| -> (Vec<f64>, Vec<f64>) {
            (
                w.iter().map(|s| s.mu).collect(),
                w.iter().map(|s| s.sigma).collect(),
            )
        };
        Ok(match self {
            ScenarioSpec::Grid { wind, n } => {
                let (mu, sigma) = split(wind);
                make_correlated_grid(&mu, &sigma, *n)?
            }
            ScenarioSpec::Sampled { wind, n, seed } => {
                let (mu, sigma) = split(wind);
                sample_independent_uniform(&mu, &sigma, *n, *seed)?
            }
            ScenarioSpec::Explicit { scenarios, weights } => match weights {
                Some(w) => ScenarioSet::new(scenarios.clone(), w.clone())?,
                None => ScenarioSet::equiprobable(scenarios.clone())?,
            },
        })
    }

    /// Replace the scenario count, where the spec has one.
    pub fn with_count(&mut self, count: usize) {
        match self {
            ScenarioSpec::Grid { n, .. } | ScenarioSpec::Sampled { n, .. } => *n = count,
            ScenarioSpec::Explicit { .. } => {}
        }
    }

    pub fn with_seed(&mut self, value: u64) {
        if let ScenarioSpec::Sampled { seed, .. } = self {
            *seed = value;
        }
    }

    pub fn count(&self) -> usize {
        match self {
            ScenarioSpec::Grid { n, .. } | ScenarioSpec::Sampled { n, .. } => *n,
            ScenarioSpec::Explicit { scenarios, .. } => scenarios.len(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClearMode {
    #[default]
    Social,
    So,
    Selfish,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct ClearingSpec {
    #[serde(default)]
    pub mode: ClearMode,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub beta: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_iterations: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub starts: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FtrSpec {
    /// Participant receiving the payoff.
    pub holder: String,
    pub from: u32,
    pub to: u32,
    pub volume: f64,
}

/// Settings for the copperplate report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CopperplateSpec {
    #[serde(flatten)]
    pub instance: CopperplateInstance,
    #[serde(default = "default_alphas")]
    pub alphas: Vec<f64>,
    #[serde(default = "default_grid")]
    pub grid: usize,
}

fn default_alphas() -> Vec<f64> {
    vec![0.0, 0.25, 0.5, 0.75]
}

fn default_grid() -> usize {
    20
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub network: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub participants: Option<PathBuf>,
    /// Replaces `network` and `participants` with the single-bus example.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub copperplate: Option<CopperplateSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scenarios: Option<ScenarioSpec>,
    #[serde(default)]
    pub clearing: ClearingSpec,
    #[serde(default)]
    pub acceptability: AcceptSpec,
    #[serde(default)]
    pub ftr: Vec<FtrSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub out: Option<PathBuf>,
    /// Include consumers in the options market when they declare a role.
    #[serde(default)]
    pub consumers_trade: bool,
}

/// A participant's standing in the options market.
#[derive(Debug, Clone, PartialEq)]
pub struct OptionsRole {
    pub participant: usize,
    pub role: Role,
    pub acceptability: AcceptSpec,
}

/// Everything a run needs, with files loaded.
#[derive(Debug, Clone)]
pub struct LoadedRun {
    pub config: RunConfig,
    pub market: Market,
    pub roles: Vec<OptionsRole>,
    pub ftr: Vec<(usize, crate::options::FtrPosition)>,
}

impl RunConfig {
    pub fn from_file(path: &Path) -> Result<Self, ConfigError> {
        let mut cfg: RunConfig = read_json(path)?;
        let dir = path.parent().unwrap_or(Path::new("."));
        for p in [&mut cfg.network, &mut cfg.participants, &mut cfg.out]
            .into_iter()
            .flatten()
        {
            if p.is_relative() {
                *p = dir.join(&*p);
            }
        }
        Ok(cfg)
    }

    pub fn load(&self) -> Result<LoadedRun, ConfigError> {
        if let Some(cp) = &self.copperplate {
            return self.load_copperplate(cp);
        }
        let net_path = self
            .network
            .as_ref()
            .ok_or_else(|| ConfigError::Invalid("missing network file".into()))?;
        let part_path = self
            .participants
            .as_ref()
            .ok_or_else(|| ConfigError::Invalid("missing participants file".into()))?;
        let net_spec: NetworkSpec = read_json(net_path)?;
        let part_specs: Vec<ParticipantSpec> = read_json(part_path)?;
        let scenarios = self
            .scenarios
            .as_ref()
            .ok_or_else(|| ConfigError::Invalid("missing scenario specification".into()))?;
        self.assemble(net_spec.build()?, &part_specs, scenarios.build()?)
    }

    fn assemble(
        &self,
        net: NetworkModel,
        specs: &[ParticipantSpec],
        set: ScenarioSet,
    ) -> Result<LoadedRun, ConfigError> {
        let mut ids = std::collections::HashSet::new();
        for s in specs {
            if !ids.insert(&s.id) {
                return Err(ConfigError::Invalid(format!(
                    "duplicate participant id {}",
                    s.id
                )));
            }
        }
        let participants = specs
            .iter()
            .map(|s| s.build(&net))
            .collect::<Result<Vec<_>, _>>()?;
        let market = Market::new(net, participants, Arc::new(set))?;
        let roles = specs
            .iter()
            .enumerate()
            .filter_map(|(i, s)| {
                let role = s.role?;
                let consumer = matches!(s.kind, KindSpec::Consumer { .. });
                (!consumer || self.consumers_trade).then(|| OptionsRole {
                    participant: i,
                    role,
                    acceptability: s
                        .acceptability
                        .unwrap_or_default()
                        .over(&self.acceptability),
                })
            })
            .collect();
        let ftr = self
            .ftr
            .iter()
            .map(|f| {
                let holder = market.participant_index(&f.holder).ok_or_else(|| {
                    ConfigError::Invalid(format!("unknown FTR holder {}", f.holder))
                })?;
                if !(f.volume >= 0.0) {
                    return Err(ConfigError::Invalid(
                        "FTR volume must be nonnegative".into(),
                    ));
                }
                Ok((
                    holder,
                    crate::options::FtrPosition {
                        from: market.network.bus_index(f.from)?,
                        to: market.network.bus_index(f.to)?,
                        volume: f.volume,
                    },
                ))
            })
            .collect::<Result<Vec<_>, ConfigError>>()?;
        Ok(LoadedRun {
            config: self.clone(),
            market,
            roles,
            ftr,
        })
    }

    fn load_copperplate(&self, cp: &CopperplateSpec) -> Result<LoadedRun, ConfigError> {
        let inst = cp.instance;
        inst.validate()?;
        let n = self.scenarios.as_ref().map_or(400, ScenarioSpec::count);
        let market = inst.market(n)?;
        let default = AcceptSpec {
            mode: Some(AcceptMode::RiskNeutral),
            q_max: Some(inst.peak_price()),
            k_max: Some(inst.peak_price()),
            delta_max: Some(inst.half_width()),
        };
        let acc = self.acceptability.over(&default);
        let roles = vec![
            OptionsRole {
                participant: crate::copperplate::PEAKER,
                role: Role::Seller,
                acceptability: acc,
            },
            OptionsRole {
                participant: crate::copperplate::WIND,
                role: Role::Buyer,
                acceptability: acc,
            },
        ];
        Ok(LoadedRun {
            config: self.clone(),
            market,
            roles,
            ftr: Vec::new(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_participants() {
        let json = r#"[
            {"id": "g", "bus": 2, "kind": "dispatchable", "capacity": 100, "offered_cost": {"a": 0.01, "b": 40}, "true_cost": {"b": 20}, "role": "seller"},
            {"id": "w", "bus": 1, "kind": "variable", "capacity": 60, "role": "buyer", "acceptability": {"mode": "cvar", "alpha": 0.5}},
            {"id": "d", "bus": 2, "kind": "consumer", "demand": 30}
        ]"#;
        let specs: Vec<ParticipantSpec> = serde_json::from_str(json).unwrap();
        let net = NetworkSpec {
            buses: vec![1, 2],
            slack: None,
            lines: vec![LineSpec {
                from: 1,
                to: 2,
                capacity: 50.0,
                reactance: Some(0.1),
                shift_factors: None,
            }],
        }
        .build()
        .unwrap();
        let g = specs[0].build(&net).unwrap();
        assert_eq!(g.bus, 1);
        assert_eq!(
            g.kind,
            ParticipantKind::Dispatchable {
                capacity: 100.0,
                ramp: UNLIMITED
            }
        );
        assert_eq!(g.true_cost, QuadraticCost::linear(20.0));
        assert_eq!(
            specs[1].acceptability.unwrap().mode,
            Some(AcceptMode::Cvar { alpha: 0.5 })
        );
        assert!(specs[2].role.is_none());
    }

    #[test]
    fn slack_choice_does_not_change_flows() {
        let spec = NetworkSpec {
            buses: vec![1, 2, 3],
            slack: Some(3),
            lines: vec![
                LineSpec {
                    from: 1,
                    to: 2,
                    capacity: 1.0,
                    reactance: Some(0.1),
                    shift_factors: None,
                },
                LineSpec {
                    from: 2,
                    to: 3,
                    capacity: 1.0,
                    reactance: Some(0.2),
                    shift_factors: None,
                },
                LineSpec {
                    from: 1,
                    to: 3,
                    capacity: 1.0,
                    reactance: Some(0.3),
                    shift_factors: None,
                },
            ],
        };
        let a = spec.build().unwrap();
        let b = NetworkSpec {
            slack: None,
            ..spec
        }
        .build()
        .unwrap();
        let y = [1.0, 0.5, -1.5];
        for (x, z) in a
            .line_flows(&y)
            .unwrap()
            .iter()
            .zip(b.line_flows(&y).unwrap())
        {
            assert!((x - z).abs() < 1e-12);
        }
    }

    #[test]
    fn mixed_line_data_rejected() {
        let spec = NetworkSpec {
            buses: vec![1, 2],
            slack: None,
            lines: vec![
                LineSpec {
                    from: 1,
                    to: 2,
                    capacity: 1.0,
                    reactance: Some(0.1),
                    shift_factors: None,
                },
                LineSpec {
                    from: 1,
                    to: 2,
                    capacity: 1.0,
                    reactance: None,
                    shift_factors: Some(vec![1.0, 0.0]),
                },
            ],
        };
        assert!(matches!(
            spec.build(),
            Err(ConfigError::Network(NetworkError::MixedLineData))
        ));
    }

    #[test]
    fn scenario_overrides() {
        let mut s: ScenarioSpec = serde_json::from_str(
            r#"{"kind": "sampled", "wind": [{"mu": 50, "sigma": 5}], "n": 10, "seed": 1}"#,
        )
        .unwrap();
        s.with_count(7);
        s.with_seed(9);
        assert_eq!(s.count(), 7);
        let set = s.build().unwrap();
        assert_eq!(set.len(), 7);
        assert_eq!(set, s.build().unwrap());
    }
}
