use thiserror::Error;

/// Errors raised by the estimation, learning and simulation routines.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("simulation diverged at t = {t}: {reason}")]
    Divergence { t: f64, reason: String },
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn check_finite(label: &str, values: &[f64]) -> Result<()> {
    match values.iter().position(|v| !v.is_finite()) {
        Some(i) => Err(Error::InvalidInput(format!(
            "{label}[{i}] is not finite ({})",
            values[i]
        ))),
        None => Ok(()),
    }
}

pub(crate) fn check_len(label: &str, values: &[f64], expected: usize) -> Result<()> {
    if values.len() != expected {
        return Err(Error::Dimension(format!(
            "{label} has length {}, expected {expected}",
            values.len()
        )));
    }
    Ok(())
}
