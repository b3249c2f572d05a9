use std::fmt;

use thiserror::Error;

/// One rejected configuration key.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfigViolation {
    pub key: String,
    pub message: String,
}

impl ConfigViolation {
    pub fn new(key: impl Into<String>, message: impl Into<String>) -> Self {
        Self {
            key: key.into(),
            message: message.into(),
        }
    }
}

impl fmt::Display for ConfigViolation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.key, self.message)
    }
}

fn join_violations(v: &[ConfigViolation]) -> String {
    v.iter()
        .map(ToString::to_string)
        .collect::<Vec<_>>()
        .join("; ")
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("point {coords:?} in chart {chart} lies outside the chart domain of {manifold}")]
    Domain {
        manifold: String,
        chart: u8,
        coords: Vec<f64>,
    },

    #[error("hypothesis error: {0}")]
    Hypothesis(String),

    #[error("configuration error: {}", join_violations(.0))]
    Config(Vec<ConfigViolation>),

    #[error("chart escape at node {node}: {detail}")]
    ChartEscape { node: usize, detail: String },

    #[error("numerical error: {0}")]
    Numerical(String),

    #[error("internal error: {0}")]
    Internal(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn config(key: &str, message: impl Into<String>) -> Self {
        Error::Config(vec![ConfigViolation::new(key, message)])
    }

    /// Keys named by a configuration error, empty for every other variant.
    pub fn config_keys(&self) -> Vec<&str> {
        match self {
            Error::Config(v) => v.iter().map(|c| c.key.as_str()).collect(),
            _ => Vec::new(),
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
