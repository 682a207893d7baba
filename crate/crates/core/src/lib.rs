//! Two-stage electricity market simulation and options clearing.

pub mod clearing;
pub mod config;
pub mod copperplate;
pub mod instances;
pub mod io;
pub mod market;
pub mod network;
pub mod options;
pub mod qp;
pub mod scenario;
