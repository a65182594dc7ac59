use thiserror::Error;

use crate::grid::BusId;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("line graph is disconnected: bus {0} is unreachable from bus 0")]
    DisconnectedGraph(BusId),

    #[error("nonpositive resistance for {what}: {value} ohm")]
    NonpositiveResistance { what: String, value: f64 },

    #[error("duplicate line between buses {0} and {1}")]
    DuplicateLine(BusId, BusId),

    #[error("grid has no converter-hosting bus")]
    NoConverter,

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("no real positive root at bus {bus} (discriminant {discriminant:.6e})")]
    NoRealRoot { bus: BusId, discriminant: f64 },

    #[error("steady-state solver did not converge in {iterations} iterations (residual {residual:.3e} A)")]
    NonConvergence { iterations: usize, residual: f64 },

    #[error("topology mismatch: {0}")]
    TopologyMismatch(String),

    #[error("singular linear system while building the channel model")]
    SingularSystem,

    #[error("input applied on bus {0} which hosts no converter")]
    InputOnLoadBus(BusId),

    #[error("infeasible budget at bus {bus}: pi^2 - dp_vr^2 = {slack:.6e} W^2")]
    InfeasibleBudget { bus: BusId, slack: f64 },

    #[error("empty search space at bus {bus}: r_max {r_max} < r_nom {r_nom}")]
    EmptySearchSpace { bus: BusId, r_nom: f64, r_max: f64 },

    #[error("parse error at line {line}, column {column}: {message}")]
    Parse {
        line: usize,
        column: usize,
        message: String,
    },

    #[error("schema error: {0}")]
    Schema(String),

    #[error("i/o error: {0}")]
    Io(String),
}

/// Coarse error classes, mapped to process exit codes by the CLI.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorCategory {
    Config,
    Numeric,
    Budget,
}

impl ErrorCategory {
    pub fn exit_code(self) -> i32 {
        match self {
            ErrorCategory::Config => 2,
            ErrorCategory::Numeric => 3,
            ErrorCategory::Budget => 4,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            ErrorCategory::Config => "config",
            ErrorCategory::Numeric => "numeric",
            ErrorCategory::Budget => "budget",
        }
    }
}

impl Error {
    pub fn category(&self) -> ErrorCategory {
        match self {
            Error::NoRealRoot { .. }
            | Error::NonConvergence { .. }
            | Error::SingularSystem => ErrorCategory::Numeric,
            Error::InfeasibleBudget { .. } => ErrorCategory::Budget,
            _ => ErrorCategory::Config,
        }
    }
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}
