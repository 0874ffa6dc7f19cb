use thiserror::Error;

/// Crate-wide error type.
///
/// Variants map one-to-one onto the failure classes of the public
/// operations; callers that need exit-code style triage can use
/// [`Error::is_input_error`] / [`Error::is_smoother_failure`].
#[derive(Debug, Error)]
pub enum Error {
    #[error("schema error: {0}")]
    Schema(String),
    #[error("format error: {0}")]
    Format(String),
    #[error("unit error: {0}")]
    Unit(String),
    #[error("argument error: {0}")]
    Argument(String),
    #[error("window error: {0}")]
    Window(String),
    #[error("divergence: state component {state_index} is not finite{}",
            .step.map(|k| format!(" at step {k}")).unwrap_or_default())]
    Divergence {
        state_index: usize,
        step: Option<usize>,
    },
    #[error("linearization error: {0}")]
    Linearization(String),
    #[error("conditioning error at step {step}: {reason}")]
    Conditioning { step: usize, reason: String },
    #[error("estimation error for component {component}: {reason}")]
    Estimation { component: String, reason: String },
    #[error("geometry error: {0}")]
    Geometry(String),
    #[error("gimbal lock: pitch angle {theta_deg:.2} deg is within 1 deg of +/-90 deg")]
    GimbalLock { theta_deg: f64 },
    #[error("scenario error: {0}")]
    Scenario(String),
    #[error("diagnostics error: {0}")]
    Diagnostics(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error("config error: {0}")]
    Config(String),
}

impl Error {
    /// True for errors caused by bad inputs, files, or configuration.
    pub fn is_input_error(&self) -> bool {
        matches!(
            self,
            Error::Schema(_)
                | Error::Format(_)
                | Error::Unit(_)
                | Error::Argument(_)
                | Error::Window(_)
                | Error::Scenario(_)
                | Error::Io(_)
                | Error::Csv(_)
                | Error::Config(_)
        )
    }

    /// True for numerical failures inside a smoother pass.
    pub fn is_smoother_failure(&self) -> bool {
        matches!(
            self,
            Error::Divergence { .. }
                | Error::Conditioning { .. }
                | Error::Linearization(_)
                | Error::GimbalLock { .. }
                | Error::Geometry(_)
        )
    }
}

pub type Result<T> = std::result::Result<T, Error>;
