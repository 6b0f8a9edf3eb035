use alloc::string::String;

/// Failure classes shared by every solver, sampler and estimator.
///
/// The variants line up with the CLI exit codes: configuration problems
/// are the caller's fault, model and assumption problems are properties of
/// the MDP/policy pair, numerical problems flag a broken identity.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum LdgError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("model error: {0}")]
    Model(String),
    #[error("assumption violated: {0}")]
    Assumption(String),
    #[error("numerical error: {0}")]
    Numerical(String),
    #[error("state error: {0}")]
    State(String),
}

pub type Result<T> = core::result::Result<T, LdgError>;

macro_rules! config_err {
    ($($arg:tt)*) => { $crate::error::LdgError::Config(alloc::format!($($arg)*)) };
}
macro_rules! model_err {
    ($($arg:tt)*) => { $crate::error::LdgError::Model(alloc::format!($($arg)*)) };
}
pub(crate) use config_err;
pub(crate) use model_err;
