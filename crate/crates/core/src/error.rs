use std::fmt;

use thiserror::Error;

/// Which half of phase space an update or coefficient acts on.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Side {
    Q,
    P,
}

impl Side {
    pub fn other(self) -> Side {
        match self {
            Side::Q => Side::P,
            Side::P => Side::Q,
        }
    }
}

impl fmt::Display for Side {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Side::Q => write!(f, "q"),
            Side::P => write!(f, "p"),
        }
    }
}

#[derive(Debug, Error)]
pub enum FlowError {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("term order {requested} exceeds flow order {max}")]
    Order { requested: usize, max: usize },

    #[error("non-finite value in {side}-side term k={order}{}", step_suffix(*step))]
    NonFinite {
        side: Side,
        order: usize,
        step: Option<usize>,
    },

    #[error(
        "singular {side}-side order-{order} update at row {row}, component {component}{}",
        step_suffix(*step)
    )]
    Singularity {
        side: Side,
        order: usize,
        row: usize,
        component: usize,
        step: Option<usize>,
    },

    #[error("unsupported: {0}")]
    Unsupported(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("malformed checkpoint: {0}")]
    Checkpoint(String),

    #[error("training diverged at epoch {epoch}")]
    Diverged { epoch: usize },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

fn step_suffix(step: Option<usize>) -> String {
    step.map(|s| format!(" (step {s})")).unwrap_or_default()
}

impl FlowError {
    /// Attaches an integration step index to numeric errors.
    pub fn at_step(self, index: usize) -> Self {
        match self {
            FlowError::NonFinite { side, order, .. } => FlowError::NonFinite {
                side,
                order,
                step: Some(index),
            },
            FlowError::Singularity {
                side,
                order,
                row,
                component,
                ..
            } => FlowError::Singularity {
                side,
                order,
                row,
                component,
                step: Some(index),
            },
            other => other,
        }
    }

    /// True for failures caused by the numerics of a particular sample rather
    /// than by a malformed call.
    pub fn is_numeric(&self) -> bool {
        matches!(
            self,
            FlowError::NonFinite { .. } | FlowError::Singularity { .. } | FlowError::Diverged { .. }
        )
    }
}

pub type Result<T, E = FlowError> = std::result::Result<T, E>;
