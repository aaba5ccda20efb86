//! Error type shared by all pipeline stages.

use alloc::string::String;
use core::fmt;

/// Crate-wide result alias.
pub type Result<T> = core::result::Result<T, Error>;

/// Structured failure modes of the editing pipeline.
#[derive(Debug, Clone, PartialEq)]
pub enum Error {
    /// Tensor shapes do not conform to an op's contraction rules.
    Shape { op: &'static str, detail: String },
    /// Invalid argument or violated data invariant.
    Invalid(String),
    /// A loss or gradient became non-finite.
    NonFinite { context: String, step: Option<usize> },
    /// Training loss diverged to NaN at the given step.
    Diverged { step: usize },
    /// An edit group lacks paraphrases for a language that must be located.
    MissingParaphrases { lang: String },
    /// The located neuron set is empty on every edit layer.
    EmptyLafnSet,
    /// A subject token subsequence was not found in a prompt.
    SubjectNotFound { subject: String, prompt: String },
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::Shape { op, detail } => write!(f, "shape mismatch in {op}: {detail}"),
            Error::Invalid(msg) => write!(f, "invalid input: {msg}"),
            Error::NonFinite { context, step } => match step {
                Some(s) => write!(f, "non-finite value in {context} at step {s}"),
                None => write!(f, "non-finite value in {context}"),
            },
            Error::Diverged { step } => write!(f, "training loss is NaN at step {step}"),
            Error::MissingParaphrases { lang } => {
                write!(f, "no paraphrases available for language '{lang}'")
            }
            Error::EmptyLafnSet => write!(
                f,
                "located neuron set is empty on all edit layers; \
                 decrease beta or use the all-neurons variant"
            ),
            Error::SubjectNotFound { subject, prompt } => {
                write!(f, "subject '{subject}' not found in prompt '{prompt}'")
            }
        }
    }
}

#[cfg(feature = "std")]
impl std::error::Error for Error {}
