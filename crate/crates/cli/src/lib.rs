//! Pipeline commands behind the `lesiondet` binary. Each command is a plain
//! function so the pipeline can also be driven in-process.

pub mod commands;

use lesiondet::Error;

/// Process exit code for a pipeline error: 2 for invalid arguments, 3 for data
/// errors, 4 for I/O errors.
pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::InvalidArgument(_) | Error::Shape(_) => 2,
        Error::Data(_) | Error::EmptyMask(_) | Error::Format { .. } => 3,
        Error::Io { .. } => 4,
    }
}
