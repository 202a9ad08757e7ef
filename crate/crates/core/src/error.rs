//! Error type shared by the whole crate.
//!
//! Every fallible operation returns [`Result`]. Variants are grouped into
//! coarse classes via [`Error::class`] so the CLI can map failures onto its
//! documented exit codes without matching on individual variants.

use thiserror::Error;

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Invalid configuration value or combination (bad dimensions, ratios,
    /// stage-flag combinations, unparsable config files, ...).
    #[error("config: {0}")]
    Config(String),

    /// A required input artifact is absent (file not found, container lacks
    /// an expected tensor or metadata block).
    #[error("missing artifact: {0}")]
    MissingArtifact(String),

    /// Shape mismatch detected before any arithmetic ran.
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    /// Structural consistency violation (malformed mask or plan, container
    /// framing errors, tape misuse such as a second backward pass).
    #[error("consistency: {0}")]
    Consistency(String),

    /// An operation produced NaN or Inf in checked mode, or a training loss
    /// went non-finite.
    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

/// Coarse failure class; the CLI turns this into its exit code.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorClass {
    /// Bad configuration (exit 2).
    Config,
    /// Missing artifact (exit 3).
    MissingArtifact,
    /// Shape or consistency failure (exit 4).
    Consistency,
    /// Numerical failure (exit 5).
    Numerical,
    /// Anything else (exit 1).
    Other,
}

impl Error {
    pub fn class(&self) -> ErrorClass {
        match self {
            Error::Config(_) => ErrorClass::Config,
            Error::MissingArtifact(_) => ErrorClass::MissingArtifact,
            Error::Shape { .. } | Error::Consistency(_) => ErrorClass::Consistency,
            Error::NonFinite(_) => ErrorClass::Numerical,
            Error::Io(e) if e.kind() == std::io::ErrorKind::NotFound => {
                ErrorClass::MissingArtifact
            }
            Error::Io(_) => ErrorClass::Other,
        }
    }

    /// Shorthand used by shape guards all over the crate.
    pub fn shape(op: &'static str, detail: impl Into<String>) -> Error {
        Error::Shape { op, detail: detail.into() }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn classes_map_as_documented() {
        assert_eq!(Error::Config("x".into()).class(), ErrorClass::Config);
        assert_eq!(Error::MissingArtifact("x".into()).class(), ErrorClass::MissingArtifact);
        assert_eq!(Error::shape("op", "d").class(), ErrorClass::Consistency);
        assert_eq!(Error::Consistency("x".into()).class(), ErrorClass::Consistency);
        assert_eq!(Error::NonFinite("op".into()).class(), ErrorClass::Numerical);
        let nf = Error::Io(std::io::Error::new(std::io::ErrorKind::NotFound, "gone"));
        assert_eq!(nf.class(), ErrorClass::MissingArtifact);
        let other = Error::Io(std::io::Error::new(std::io::ErrorKind::PermissionDenied, "no"));
        assert_eq!(other.class(), ErrorClass::Other);
    }
}
