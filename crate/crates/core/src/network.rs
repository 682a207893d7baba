//! DC network model: shift factors, line limits and the injection polytope.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NetworkError {
    #[error("injection has {found} entries, network has {expected} buses")]
    Dimension { found: usize, expected: usize },
    #[error("network needs at least one bus")]
    NoBuses,
    #[error("unknown bus id {0}")]
    UnknownBus(u32),
    #[error("line {line}: capacity must be strictly positive, got {capacity}")]
    BadCapacity { line: usize, capacity: f64 },
    #[error("line {0}: reactance must be nonzero and finite")]
    BadReactance(usize),
    #[error("line {line}: shift-factor row has {found} entries, expected {expected}")]
    ShiftRow {
        line: usize,
        found: usize,
        expected: usize,
    },
    #[error("lines must all give reactances or all give shift-factor rows")]
    MixedLineData,
    #[error("susceptance matrix is singular; the network is probably not connected")]
    Disconnected,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Line {
    pub from: usize,
    pub to: usize,
    pub capacity: f64,
}

/// Buses, lines, and the linear map from nodal injections to line flows.
#[derive(Debug, Clone, PartialEq)]
pub struct NetworkModel {
    bus_ids: Vec<u32>,
    lines: Vec<Line>,
    /// lines x buses
    shift_factors: DMatrix<f64>,
}

impl NetworkModel {
    /// A single bus with no lines; the polytope reduces to power balance.
    pub fn copperplate() -> Self {
        Self {
            bus_ids: vec![1],
            lines: Vec::new(),
            shift_factors: DMatrix::zeros(0, 1),
        }
    }

    pub fn from_shift_factors(
        bus_ids: Vec<u32>,
        lines: Vec<Line>,
        shift_factors: DMatrix<f64>,
    ) -> Result<Self, NetworkError> {
        if bus_ids.is_empty() {
            return Err(NetworkError::NoBuses);
        }
        for (l, line) in lines.iter().enumerate() {
            if !(line.capacity > 0.0) {
                return Err(NetworkError::BadCapacity {
                    line: l,
                    capacity: line.capacity,
                });
            }
        }
        if shift_factors.nrows() != lines.len() || shift_factors.ncols() != bus_ids.len() {
            return Err(NetworkError::ShiftRow {
                line: 0,
                found: shift_factors.ncols(),
                expected: bus_ids.len(),
            });
        }
        Ok(Self {
            bus_ids,
            lines,
            shift_factors,
        })
    }

    /// Shift factors from line reactances via the reduced susceptance matrix,
    /// with injections balanced at `slack`.
    pub fn from_reactances(
        bus_ids: Vec<u32>,
        lines: Vec<Line>,
        reactances: &[f64],
        slack: usize,
    ) -> Result<Self, NetworkError> {
        let nb = bus_ids.len();
        if nb == 0 {
            return Err(NetworkError::NoBuses);
        }
        let nl = lines.len();
        let mut bbus = DMatrix::<f64>::zeros(nb, nb);
        for (l, (line, &x)) in lines.iter().zip(reactances).enumerate() {
            if x == 0.0 || !x.is_finite() {
                return Err(NetworkError::BadReactance(l));
            }
            let b = 1.0 / x;
            bbus[(line.from, line.from)] += b;
            bbus[(line.to, line.to)] += b;
            bbus[(line.from, line.to)] -= b;
            bbus[(line.to, line.from)] -= b;
        }
        let keep: Vec<usize> = (0..nb).filter(|&n| n != slack).collect();
        let reduced = DMatrix::from_fn(keep.len(), keep.len(), |i, j| bbus[(keep[i], keep[j])]);
        let inv = if keep.is_empty() {
            DMatrix::zeros(0, 0)
        } else {
            reduced.try_inverse().ok_or(NetworkError::Disconnected)?
        };
        let mut h = DMatrix::<f64>::zeros(nl, nb);
        for (l, (line, &x)) in lines.iter().zip(reactances).enumerate() {
            for (j, &bus) in keep.iter().enumerate() {
                let theta_from = reduced_entry(&keep, &inv, line.from, j);
                let theta_to = reduced_entry(&keep, &inv, line.to, j);
                h[(l, bus)] = (theta_from - theta_to) / x;
            }
        }
        Self::from_shift_factors(bus_ids, lines, h)
    }

    pub fn bus_count(&self) -> usize {
        self.bus_ids.len()
    }

    pub fn bus_ids(&self) -> &[u32] {
        &self.bus_ids
    }

    pub fn bus_index(&self, id: u32) -> Result<usize, NetworkError> {
        self.bus_ids
            .iter()
            .position(|&b| b == id)
            .ok_or(NetworkError::UnknownBus(id))
    }

    pub fn lines(&self) -> &[Line] {
        &self.lines
    }

    pub fn line_count(&self) -> usize {
        self.lines.len()
    }

    pub fn shift_factors(&self) -> &DMatrix<f64> {
        &self.shift_factors
    }

    pub fn limits(&self) -> Vec<f64> {
        self.lines.iter().map(|l| l.capacity).collect()
    }

    pub fn line_flows(&self, y: &[f64]) -> Result<Vec<f64>, NetworkError> {
        if y.len() != self.bus_count() {
            return Err(NetworkError::Dimension {
                found: y.len(),
                expected: self.bus_count(),
            });
        }
        let flows = &self.shift_factors * DVector::from_column_slice(y);
        Ok(flows.iter().copied().collect())
    }

    /// Whether `y` is balanced and every flow is within its limit in either
    /// direction, both up to `tol`.
    pub fn injection_feasible(&self, y: &[f64], tol: f64) -> Result<bool, NetworkError> {
        let flows = self.line_flows(y)?;
        let balance: f64 = y.iter().sum();
        Ok(balance.abs() <= tol
            && flows
                .iter()
                .zip(&self.lines)
                .all(|(f, line)| f.abs() <= line.capacity + tol))
    }
}

fn reduced_entry(keep: &[usize], inv: &DMatrix<f64>, bus: usize, col: usize) -> f64 {
    match keep.iter().position(|&k| k == bus) {
        Some(row) => inv[(row, col)],
        None => 0.0,
    }
}

pub fn line_flows(y: &[f64], net: &NetworkModel) -> Result<Vec<f64>, NetworkError> {
    net.line_flows(y)
}

pub fn injection_feasible(y: &[f64], net: &NetworkModel, tol: f64) -> Result<bool, NetworkError> {
    net.injection_feasible(y, tol)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn two_bus(limit: f64) -> NetworkModel {
        NetworkModel::from_shift_factors(
            vec![1, 2],
            vec![Line {
                from: 0,
                to: 1,
                capacity: limit,
            }],
            DMatrix::from_row_slice(1, 2, &[1.0, 0.0]),
        )
        .unwrap()
    }

    #[test]
    fn zero_injection_gives_zero_flow() {
        let net = two_bus(4.0);
        assert_eq!(net.line_flows(&[0.0, 0.0]).unwrap(), vec![0.0]);
        assert!(net.injection_feasible(&[0.0, 0.0], 1e-9).unwrap());
    }

    #[test]
    fn copperplate_has_no_flows() {
        let net = NetworkModel::copperplate();
        assert!(net.line_flows(&[0.0]).unwrap().is_empty());
        assert!(net.injection_feasible(&[0.0], 1e-9).unwrap());
        assert!(!net.injection_feasible(&[1.0], 1e-9).unwrap());
    }

    #[test]
    fn two_bus_flow_and_limit() {
        let net = two_bus(4.0);
        assert_eq!(net.line_flows(&[5.0, -5.0]).unwrap(), vec![5.0]);
        assert!(!net.injection_feasible(&[5.0, -5.0], 1e-9).unwrap());
        assert!(net.injection_feasible(&[-4.0, 4.0], 1e-9).unwrap());
        assert!(!net.injection_feasible(&[1.0, 1.0], 1e-9).unwrap());
    }

    #[test]
    fn dimension_mismatch() {
        let net = two_bus(4.0);
        assert_eq!(
            net.line_flows(&[1.0]),
            Err(NetworkError::Dimension {
                found: 1,
                expected: 2
            })
        );
    }

    #[test]
    fn reactance_construction_on_a_triangle() {
        // Equal reactances: injecting 1 at bus 0 and withdrawing at the slack
        // sends 2/3 over the direct line and 1/3 around the other two.
        let lines = vec![
            Line {
                from: 0,
                to: 1,
                capacity: 10.0,
            },
            Line {
                from: 0,
                to: 2,
                capacity: 10.0,
            },
            Line {
                from: 2,
                to: 1,
                capacity: 10.0,
            },
        ];
        let net = NetworkModel::from_reactances(vec![1, 2, 3], lines, &[0.1, 0.1, 0.1], 1).unwrap();
        let f = net.line_flows(&[1.0, -1.0, 0.0]).unwrap();
        assert!((f[0] - 2.0 / 3.0).abs() < 1e-12);
        assert!((f[1] - 1.0 / 3.0).abs() < 1e-12);
        assert!((f[2] - 1.0 / 3.0).abs() < 1e-12);
        // Flows of a balanced injection do not depend on the slack choice.
        let other =
            NetworkModel::from_reactances(vec![1, 2, 3], net.lines().to_vec(), &[0.1, 0.1, 0.1], 2)
                .unwrap();
        let g = other.line_flows(&[1.0, -1.0, 0.0]).unwrap();
        for (a, b) in f.iter().zip(&g) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn bad_capacity_rejected() {
        let r = NetworkModel::from_shift_factors(
            vec![1, 2],
            vec![Line {
                from: 0,
                to: 1,
                capacity: 0.0,
            }],
            DMatrix::from_row_slice(1, 2, &[1.0, 0.0]),
        );
        assert!(matches!(r, Err(NetworkError::BadCapacity { .. })));
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn ring() -> NetworkModel {
            let lines = vec![
                Line {
                    from: 0,
                    to: 1,
                    capacity: 3.0,
                },
                Line {
                    from: 1,
                    to: 2,
                    capacity: 2.0,
                },
                Line {
                    from: 2,
                    to: 3,
                    capacity: 4.0,
                },
                Line {
                    from: 3,
                    to: 0,
                    capacity: 1.5,
                },
            ];
            NetworkModel::from_reactances(vec![1, 2, 3, 4], lines, &[0.1, 0.2, 0.15, 0.3], 0)
                .unwrap()
        }

        fn balanced() -> impl Strategy<Value = Vec<f64>> {
            prop::collection::vec(-3.0f64..3.0, 3).prop_map(|mut v| {
                let s: f64 = v.iter().sum();
                v.push(-s);
                v
            })
        }

        proptest! {
            #[test]
            fn convex_combinations_stay_feasible(a in balanced(), b in balanced(), t in 0.0f64..1.0) {
                let net = ring();
                if net.injection_feasible(&a, 1e-9).unwrap() && net.injection_feasible(&b, 1e-9).unwrap() {
                    let c: Vec<f64> = a.iter().zip(&b).map(|(x, y)| t * x + (1.0 - t) * y).collect();
                    prop_assert!(net.injection_feasible(&c, 1e-9).unwrap());
                }
            }

            #[test]
            fn line_order_does_not_matter(y in balanced()) {
                let net = ring();
                let mut lines = net.lines().to_vec();
                lines.reverse();
                let h = net.shift_factors();
                let flipped = DMatrix::from_fn(h.nrows(), h.ncols(), |i, j| h[(h.nrows() - 1 - i, j)]);
                let rev = NetworkModel::from_shift_factors(net.bus_ids().to_vec(), lines, flipped).unwrap();
                prop_assert_eq!(net.injection_feasible(&y, 1e-9).unwrap(), rev.injection_feasible(&y, 1e-9).unwrap());
            }
        }
    }
}
