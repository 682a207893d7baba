//! CSV and JSON result files.
//!
//! Per-scenario tables are long-format CSV with a header row. Floats are
//! written in their shortest round-trip form, so reading a table back gives
//! the exact values that were written.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::clearing::{ClearingResult, ReportRow};
use crate::market::{Market, MarketOutcome};
use crate::options::{Role, TradeTriple};

#[derive(Debug, Error)]
pub enum IoError {
    #[error("{path}: {source}")]
    Csv {
        path: PathBuf,
        #[source]
        source: csv::Error,
    },
    #[error("{path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
    #[error("{path}: {source}")]
    File {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

/// Write rows as CSV with a header taken from the field names.
pub fn write_table<T: Serialize>(path: &Path, rows: &[T]) -> Result<(), IoError> {
    let err = |source| IoError::Csv {
        path: path.to_path_buf(),
        source,
    };
    let mut w = csv::Writer::from_path(path).map_err(err)?;
    for r in rows {
        w.serialize(r).map_err(err)?;
    }
    w.flush().map_err(|source| IoError::File {
        path: path.to_path_buf(),
        source,
    })
}

pub fn read_table<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>, IoError> {
    let err = |source| IoError::Csv {
        path: path.to_path_buf(),
        source,
    };
    let mut r = csv::Reader::from_path(path).map_err(err)?;
    r.deserialize().map(|row| row.map_err(err)).collect()
}

/// Pretty-printed JSON followed by a newline.
pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), IoError> {
    let file = File::create(path).map_err(|source| IoError::File {
        path: path.to_path_buf(),
        source,
    })?;
    let mut w = BufWriter::new(file);
    serde_json::to_writer_pretty(&mut w, value).map_err(|source| IoError::Json {
        path: path.to_path_buf(),
        source,
    })?;
    writeln!(w)
        .and_then(|_| w.flush())
        .map_err(|source| IoError::File {
            path: path.to_path_buf(),
            source,
        })
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T, IoError> {
    let file = File::open(path).map_err(|source| IoError::File {
        path: path.to_path_buf(),
        source,
    })?;
    serde_json::from_reader(std::io::BufReader::new(file)).map_err(|source| IoError::Json {
        path: path.to_path_buf(),
        source,
    })
}

/// Forward-stage set-points and prices.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForwardReport {
    pub participants: Vec<ForwardEntry>,
    /// Forward price per bus, keyed by bus id.
    pub bus_prices: Vec<BusPrice>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForwardEntry {
    pub id: String,
    pub bus: u32,
    pub dispatch: f64,
    pub price: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BusPrice {
    pub bus: u32,
    pub price: f64,
}

pub fn forward_report(market: &Market, outcome: &MarketOutcome) -> ForwardReport {
    let ids = market.network.bus_ids();
    ForwardReport {
        participants: market
            .participants
            .iter()
            .enumerate()
            .map(|(i, p)| ForwardEntry {
                id: p.id.clone(),
                bus: ids[p.bus],
                dispatch: outcome.forward.dispatch[i],
                price: outcome.forward.prices[p.bus],
            })
            .collect(),
        bus_prices: ids
            .iter()
            .zip(&outcome.forward.prices)
            .map(|(&bus, &price)| BusPrice { bus, price })
            .collect(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RealtimeRow {
    pub scenario: usize,
    pub participant: String,
    pub dispatch: f64,
    pub price: f64,
}

pub fn realtime_rows(market: &Market, outcome: &MarketOutcome) -> Vec<RealtimeRow> {
    outcome
        .realtime
        .iter()
        .enumerate()
        .flat_map(|(k, r)| {
            market
                .participants
                .iter()
                .enumerate()
                .map(move |(i, p)| RealtimeRow {
                    scenario: k,
                    participant: p.id.clone(),
                    dispatch: r.dispatch[i],
                    price: r.prices[p.bus],
                })
        })
        .collect()
}

/// One value of a per-scenario random quantity.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleRow {
    pub scenario: usize,
    pub weight: f64,
    pub participant: String,
    pub value: f64,
}

pub fn profit_rows(market: &Market, outcome: &MarketOutcome) -> Vec<SampleRow> {
    let w = outcome.scenarios.weights();
    (0..w.len())
        .flat_map(|k| {
            market
                .participants
                .iter()
                .zip(&outcome.profits)
                .map(move |(p, s)| SampleRow {
                    scenario: k,
                    weight: w[k],
                    participant: p.id.clone(),
                    value: s.values()[k],
                })
        })
        .collect()
}

/// Profits with options, `Π`, per options participant.
pub fn option_profit_rows(result: &ClearingResult) -> Vec<SampleRow> {
    let ev = &result.evaluation;
    let Some(first) = ev.profits.first() else {
        return Vec::new();
    };
    let w = first.weights();
    (0..w.len())
        .flat_map(|k| {
            result
                .ids
                .iter()
                .zip(&ev.profits)
                .map(move |(id, s)| SampleRow {
                    scenario: k,
                    weight: w[k],
                    participant: id.clone(),
                    value: s.values()[k],
                })
        })
        .collect()
}

/// Group long-format rows back into one column per participant, in order of
/// first appearance. Returns the ids, the weights and the columns.
pub fn columns(rows: &[SampleRow]) -> (Vec<String>, Vec<f64>, Vec<Vec<f64>>) {
    let mut ids: Vec<String> = Vec::new();
    let mut weights = Vec::new();
    let mut cols: Vec<Vec<f64>> = Vec::new();
    for r in rows {
        let j = match ids.iter().position(|id| *id == r.participant) {
            Some(j) => j,
            None => {
                ids.push(r.participant.clone());
                cols.push(Vec::new());
                ids.len() - 1
            }
        };
        if j == 0 {
            weights.push(r.weight);
        }
        cols[j].push(r.value);
    }
    (ids, weights, cols)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TradeEntry {
    pub id: String,
    pub role: Role,
    #[serde(flatten)]
    pub trade: TradeTriple,
}

/// Contents of `trades.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TradesReport {
    pub mode: crate::config::ClearMode,
    pub trades: Vec<TradeEntry>,
    pub objective: f64,
    pub aggregate_delta: f64,
    pub expected_ms: f64,
    pub diagnostics: crate::clearing::ClearingDiagnostics,
}

pub fn trades_report(result: &ClearingResult) -> TradesReport {
    TradesReport {
        mode: result.mode,
        trades: result
            .ids
            .iter()
            .zip(&result.roles)
            .zip(result.trades())
            .map(|((id, &role), &trade)| TradeEntry {
                id: id.clone(),
                role,
                trade,
            })
            .collect(),
        objective: result.objective,
        aggregate_delta: result.aggregate_delta(),
        expected_ms: result.evaluation.expected_ms,
        diagnostics: result.diagnostics.clone(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AllocationRow {
    pub scenario: usize,
    pub seller: String,
    pub delta: f64,
}

pub fn allocation_rows(result: &ClearingResult) -> Vec<AllocationRow> {
    let ev = &result.evaluation;
    let n = ev.ms.len();
    let sellers: Vec<usize> = (0..result.ids.len())
        .filter(|&i| result.roles[i] == Role::Seller)
        .collect();
    (0..n)
        .flat_map(|k| {
            sellers.iter().map(move |&i| AllocationRow {
                scenario: k,
                seller: result.ids[i].clone(),
                delta: ev.allocation[i][k],
            })
        })
        .collect()
}

/// `ms.csv` row. The last row has scenario `expected` and holds `E[MS]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MsRow {
    pub scenario: String,
    pub weight: f64,
    pub ms: f64,
}

pub const EXPECTED_ROW: &str = "expected";

pub fn ms_rows(result: &ClearingResult) -> Vec<MsRow> {
    let ev = &result.evaluation;
    let w = ev
        .profits
        .first()
        .map(|p| p.weights().to_vec())
        .unwrap_or_default();
    ev.ms
        .iter()
        .enumerate()
        .map(|(k, &ms)| MsRow {
            scenario: k.to_string(),
            weight: w.get(k).copied().unwrap_or(0.0),
            ms,
        })
        .chain(std::iter::once(MsRow {
            scenario: EXPECTED_ROW.into(),
            weight: 1.0,
            ms: ev.expected_ms,
        }))
        .collect()
}

/// `variance_report.csv` row; the last row is the total with id `total`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VarianceRow {
    pub participant: String,
    pub role: String,
    pub var_before: f64,
    pub var_after: f64,
    pub delta: f64,
    pub cov_diagnostic: f64,
    pub reduces: bool,
}

pub const TOTAL_ROW: &str = "total";

pub fn variance_rows(report: &[ReportRow]) -> Vec<VarianceRow> {
    let role = |r: Role| match r {
        Role::Buyer => "buyer",
        Role::Seller => "seller",
    };
    let mut rows: Vec<VarianceRow> = report
        .iter()
        .map(|r| VarianceRow {
            participant: r.id.clone(),
            role: role(r.role).into(),
            var_before: r.var_before,
            var_after: r.var_after,
            delta: r.delta,
            cov_diagnostic: r.covariance,
            reduces: r.reduces,
        })
        .collect();
    let sum = |f: fn(&ReportRow) -> f64| report.iter().map(f).sum::<f64>();
    let delta = sum(|r| r.delta);
    rows.push(VarianceRow {
        participant: TOTAL_ROW.into(),
        role: String::new(),
        var_before: sum(|r| r.var_before),
        var_after: sum(|r| r.var_after),
        delta,
        cov_diagnostic: sum(|r| r.covariance),
        reduces: delta < 0.0,
    });
    rows
}

/// One point of an acceptability boundary surface. `k` is empty when the
/// acceptance does not switch inside the strike range.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundaryRow {
    pub alpha: f64,
    pub role: String,
    pub q: f64,
    pub delta: f64,
    pub k: Option<f64>,
}
