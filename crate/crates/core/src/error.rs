//! Error type shared by every module in the crate.

use alloc::string::String;
use core::fmt;

pub type Result<T> = core::result::Result<T, Error>;

#[derive(Debug, Clone, PartialEq)]
pub enum Error {
    /// A tensor extent does not match what the operation requires. `axis`
    /// names the offending axis.
    ShapeMismatch {
        op: &'static str,
        axis: &'static str,
        expected: usize,
        got: usize,
    },
    /// Channel extent is not divisible by the group count.
    NotDivisible {
        op: &'static str,
        channels: usize,
        groups: usize,
    },
    InvalidArgument {
        op: &'static str,
        message: String,
    },
    LabelOutOfRange {
        label: usize,
        classes: usize,
    },
    /// A teacher-probability row does not sum to one.
    TeacherNotNormalized {
        row: usize,
        sum: f64,
    },
    /// Inference-mode normalization requested before any running statistics
    /// were recorded.
    NormStatsMissing,
    /// A cached evaluation was produced against a different parameter
    /// version than the store currently holds.
    StaleCache {
        cached: u64,
        current: u64,
    },
    /// An incremental extension was given a different input than the cached
    /// evaluation it extends.
    InputMismatch,
    BudgetOutOfRange {
        budget: usize,
        depth: usize,
    },
    /// A loss over the full ensemble was given only part of it.
    PartialEnsemble {
        got: usize,
        expected: usize,
    },
    /// The diversity metric needs at least two models.
    TooFewModels {
        got: usize,
    },
    /// A gradient contained NaN or infinity. Carries the parameter name.
    NonFiniteGradient {
        param: String,
    },
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::ShapeMismatch { op, axis, expected, got } => {
                write!(f, "{op}: axis `{axis}` has extent {got}, expected {expected}")
            }
            Error::NotDivisible { op, channels, groups } => {
                write!(f, "{op}: {channels} channels not divisible by {groups} groups")
            }
            Error::InvalidArgument { op, message } => write!(f, "{op}: {message}"),
            Error::LabelOutOfRange { label, classes } => {
                write!(f, "label {label} out of range for {classes} classes")
            }
            Error::TeacherNotNormalized { row, sum } => {
                write!(f, "teacher probabilities in row {row} sum to {sum}, expected 1")
            }
            Error::NormStatsMissing => {
                write!(f, "inference-mode normalization before any running statistics were recorded")
            }
            Error::StaleCache { cached, current } => {
                write!(f, "cached evaluation is stale: parameter version {cached}, store at {current}")
            }
            Error::InputMismatch => {
                write!(f, "extension input differs from the cached evaluation's input")
            }
            Error::BudgetOutOfRange { budget, depth } => {
                write!(f, "budget {budget} out of range for tree depth {depth}")
            }
            Error::PartialEnsemble { got, expected } => {
                write!(f, "loss requires the full ensemble of {expected} models, got {got}")
            }
            Error::TooFewModels { got } => {
                write!(f, "diversity is undefined for {got} model(s); need at least 2")
            }
            Error::NonFiniteGradient { param } => {
                write!(f, "non-finite gradient for parameter `{param}`")
            }
        }
    }
}

impl core::error::Error for Error {}
