use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("parse error at byte {offset}: {message}")]
    Parse { offset: usize, message: String },

    #[error("structural error: {0}")]
    Structural(String),

    #[error("dataset contains no instances")]
    EmptyDataset,

    #[error("no feature vector for instance {instance_id}")]
    MissingFeature { instance_id: u64 },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("unsupported input: {0}")]
    UnsupportedInput(String),

    #[error("could not place a box for class {class_id} in bins (size {size_bin}, pos {pos_bin})")]
    Placement {
        class_id: usize,
        size_bin: usize,
        pos_bin: usize,
    },

    #[error("layout {image_id} lost every entry during recalibration")]
    DegenerateLayout { image_id: u64 },

    #[error("rejected error record: {0}")]
    RejectedRecord(String),

    #[error("record step {got} arrives after step {previous}")]
    Ordering { previous: u64, got: u64 },

    #[error("snapshot belongs to dataset {found}, expected {expected}")]
    Compatibility { expected: String, found: String },

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("image error for {}: {message}", path.display())]
    Image { path: PathBuf, message: String },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Converts a serde_json error into a [`Error::Parse`] carrying a byte
    /// offset into `source`.
    pub(crate) fn json(source: &str, err: serde_json::Error) -> Self {
        Error::Parse {
            offset: byte_offset(source, err.line(), err.column()),
            message: err.to_string(),
        }
    }

    /// Data errors are problems with the content of inputs, as opposed to
    /// filesystem failures.
    pub fn is_io(&self) -> bool {
        matches!(self, Error::Io { .. } | Error::Image { .. })
    }
}

/// serde_json reports 1-based line and column; column counts bytes.
fn byte_offset(source: &str, line: usize, column: usize) -> usize {
    if line == 0 {
        return 0;
    }
    let line_start: usize = source
        .split_inclusive('\n')
        .take(line - 1)
        .map(str::len)
        .sum();
    (line_start + column.saturating_sub(1)).min(source.len())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn offset_counts_bytes_across_lines() {
        let src = "{\n  \"a\": 1,\n  oops\n}";
        let err = serde_json::from_str::<serde_json::Value>(src).unwrap_err();
        match Error::json(src, err) {
            Error::Parse { offset, .. } => assert_eq!(&src[offset..offset + 1], "o"),
            other => panic!("unexpected {other:?}"),
        }
    }
}
