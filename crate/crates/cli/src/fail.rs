use std::fmt;

use vampcf::Error;

pub const USAGE: u8 = 1;
pub const DATA: u8 = 2;
pub const NUMERICAL: u8 = 3;

/// Errors raised by the command layer itself.
#[derive(Debug)]
pub enum Failure {
    Usage(String),
    Data(String),
    Numerical(String),
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Failure::Usage(m) | Failure::Data(m) | Failure::Numerical(m) => f.write_str(m),
        }
    }
}

impl std::error::Error for Failure {}

fn core_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::Domain(_) | Error::VocabMismatch { .. } => USAGE,
        Error::NonFinite { .. } | Error::Evaluation(_) => NUMERICAL,
        Error::Shape(_)
        | Error::Parse { .. }
        | Error::EmptyDataset(_)
        | Error::Bounds { .. }
        | Error::Checkpoint(_)
        | Error::Io { .. }
        | Error::Json(_) => DATA,
    }
}

/// Exit code for an error chain: the first classified cause wins; anything
/// unclassified (plain I/O) counts as a data error.
pub fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if let Some(f) = cause.downcast_ref::<Failure>() {
            return match f {
                Failure::Usage(_) => USAGE,
                Failure::Data(_) => DATA,
                Failure::Numerical(_) => NUMERICAL,
            };
        }
        if let Some(e) = cause.downcast_ref::<Error>() {
            return core_code(e);
        }
    }
    DATA
}
