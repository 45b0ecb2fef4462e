//! Error type shared by every module in the crate.

use alloc::string::String;
use core::fmt;

pub type Result<T> = core::result::Result<T, CoarError>;

/// All fallible operations in this crate return one of these.
#[derive(Debug, Clone, PartialEq)]
pub enum CoarError {
    /// A caller violated a precondition (bad shape, unknown word, missing
    /// positions, out-of-range index, ...).
    InvalidArgument(String),
    /// Arithmetic produced a non-finite value. `layer` is the transformer
    /// layer where it was first observed, when known; `last_good_step` is
    /// set when a training loop diverged.
    NumericFailure {
        detail: String,
        layer: Option<usize>,
        last_good_step: Option<usize>,
    },
}

impl CoarError {
    pub fn invalid(msg: impl Into<String>) -> Self {
        CoarError::InvalidArgument(msg.into())
    }

    pub fn numeric(detail: impl Into<String>, layer: Option<usize>) -> Self {
        CoarError::NumericFailure {
            detail: detail.into(),
            layer,
            last_good_step: None,
        }
    }
}

impl fmt::Display for CoarError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CoarError::InvalidArgument(msg) => write!(f, "invalid argument: {msg}"),
            CoarError::NumericFailure {
                detail,
                layer,
                last_good_step,
            } => {
                write!(f, "numeric failure: {detail}")?;
                if let Some(l) = layer {
                    write!(f, " (layer {l})")?;
                }
                if let Some(s) = last_good_step {
                    write!(f, " (last good step {s})")?;
                }
                Ok(())
            }
        }
    }
}

impl core::error::Error for CoarError {}
