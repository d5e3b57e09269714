//! Crate-wide error type.

use thiserror::Error;

/// Errors produced by ingestion, sequence building, training, and I/O.
#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    /// Malformed JSON. `offset` is the byte offset into the input where
    /// parsing failed.
    #[error("json parse error at byte {offset} (line {line}, column {column}): {message}")]
    JsonParse {
        offset: usize,
        line: usize,
        column: usize,
        message: String,
    },

    /// A document violated a structural invariant at ingestion.
    #[error("validation error: {0}")]
    Validation(String),

    /// A caller passed an argument outside an operation's domain.
    #[error("argument error: {0}")]
    Argument(String),

    /// A model or run configuration is internally inconsistent.
    #[error("config error: {0}")]
    Config(String),

    /// A sequence does not fit the model context.
    #[error("context overflow: sequence needs {required} tokens but the limit is {available}")]
    ContextOverflow { required: usize, available: usize },

    /// A numeric computation left the finite range.
    #[error("numeric error: {0}")]
    Numeric(String),

    /// Training diverged (non-finite loss) at the given step.
    #[error("training diverged at step {step}: loss = {loss}")]
    Diverged { step: usize, loss: f64 },

    /// Checkpoint file is not in the expected format.
    #[error("checkpoint format error: {0}")]
    CheckpointFormat(String),

    /// Checkpoint was written by an incompatible version.
    #[error("checkpoint version mismatch: file has {found}, expected {expected}")]
    CheckpointVersion { found: u32, expected: u32 },

    /// Checkpoint tensor shapes do not match the requested configuration.
    #[error("checkpoint shape mismatch for {name}: file has {found:?}, expected {expected:?}")]
    CheckpointShape {
        name: String,
        found: Vec<usize>,
        expected: Vec<usize>,
    },

    /// Checkpoint data ended before all declared tensors were read.
    #[error("checkpoint truncated: expected {expected} bytes of tensor data, found {found}")]
    CheckpointTruncated { expected: usize, found: usize },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// Stable machine-readable discriminant for CLI error reporting.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Io { .. } => "io",
            Error::JsonParse { .. } => "json-parse",
            Error::Validation(_) => "validation",
            Error::Argument(_) => "argument",
            Error::Config(_) => "config",
            Error::ContextOverflow { .. } => "context-overflow",
            Error::Numeric(_) => "numeric",
            Error::Diverged { .. } => "diverged",
            Error::CheckpointFormat(_) => "checkpoint-format",
            Error::CheckpointVersion { .. } => "checkpoint-version",
            Error::CheckpointShape { .. } => "checkpoint-shape",
            Error::CheckpointTruncated { .. } => "checkpoint-truncated",
        }
    }

    pub(crate) fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Convert a serde_json error into [`Error::JsonParse`], recovering the
    /// byte offset from the error's line/column against the original input.
    pub(crate) fn from_json(err: &serde_json::Error, input: &[u8]) -> Self {
        let line = err.line();
        let column = err.column();
        Error::JsonParse {
            offset: byte_offset(input, line, column),
            line,
            column,
            message: err.to_string(),
        }
    }
}

/// Byte offset of (1-based line, 1-based column) in `input`.
fn byte_offset(input: &[u8], line: usize, column: usize) -> usize {
    if line == 0 {
        return 0;
    }
    let mut cur_line = 1usize;
    let mut offset = 0usize;
    for (i, &b) in input.iter().enumerate() {
        if cur_line == line {
            offset = i;
            break;
        }
        if b == b'\n' {
            cur_line += 1;
            offset = i + 1;
        }
    }
    (offset + column.saturating_sub(1)).min(input.len())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn json_error_carries_byte_offset() {
        let input = b"{\"pages\": [\n  {\"width\": oops}\n]}";
        let err = serde_json::from_slice::<serde_json::Value>(input).unwrap_err();
        let converted = Error::from_json(&err, input);
        match converted {
            Error::JsonParse { offset, line, .. } => {
                assert_eq!(line, 2);
                assert_eq!(input[offset], b'o');
            }
            other => panic!("expected JsonParse, got {other:?}"),
        }
    }
}
