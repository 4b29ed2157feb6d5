//! Crate-wide error type and exit-code mapping.

use thiserror::Error;

#[derive(Error, Debug)]
pub enum Error {
    /// Bad user-supplied configuration (unknown key, invalid value, degenerate geometry).
    #[error("config error: {0}")]
    Config(String),

    /// An event stream violates its own invariants.
    #[error("invalid event stream: {0}")]
    InvalidStream(String),

    /// Shape mismatch; `axis` names the offending dimension.
    #[error("dimension error on axis `{axis}`: {detail}")]
    Dimension { axis: &'static str, detail: String },

    /// Trigger square does not fit at the requested location.
    #[error("trigger placement error: {0}")]
    Placement(String),

    /// Binary file format violation, with the byte offset where parsing stopped.
    #[error("format error at byte {offset}: {detail}")]
    Format { offset: u64, detail: String },

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    /// A loss evaluated to NaN/inf during training.
    #[error("training diverged at epoch {epoch}, batch {batch}: {detail}")]
    Diverged {
        epoch: usize,
        batch: usize,
        detail: String,
    },

    /// Non-finite value surfaced outside a training loop.
    #[error("non-finite value: {0}")]
    NonFinite(String),

    /// Misuse of the gradient tape (consumed tape, detached graph, non-scalar loss).
    #[error("tape error: {0}")]
    Tape(String),

    /// ASR is undefined when every test sample already carries the target label.
    #[error("ASR undefined: no test samples with a label other than the target")]
    UndefinedAsr,

    #[error("empty dataset")]
    EmptyDataset,

    /// A self-check failed; the message names the failing check.
    #[error("selfcheck failed: {0}")]
    Selfcheck(String),
}

impl Error {
    /// Process exit code for the CLI: 0 ok, 1 config, 2 runtime, 3 selfcheck.
    pub fn exit_code(&self) -> u8 {
        match self {
            Error::Config(_) => 1,
            Error::Selfcheck(_) => 3,
            _ => 2,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
