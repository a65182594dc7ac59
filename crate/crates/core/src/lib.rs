pub mod error;
pub mod grid;
pub mod steady_state;
pub mod channel;
pub mod budget;
pub mod optimizer;
pub mod comsim;
pub mod config;
pub mod cli;
