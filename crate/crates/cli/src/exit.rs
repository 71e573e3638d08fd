use std::fmt;

use mdanet_core::Error;

pub const OK: i32 = 0;
pub const USAGE: i32 = 1;
pub const DATA: i32 = 2;
pub const NUMERICAL: i32 = 3;

/// Bad flags or configuration values.
#[derive(Debug)]
pub struct Usage(pub String);

/// A check that ran to completion and failed, or a non-finite result.
#[derive(Debug)]
pub struct Numerical(pub String);

impl fmt::Display for Usage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl fmt::Display for Numerical {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Usage {}
impl std::error::Error for Numerical {}

/// Exit status for an error, decided by the first classifiable cause.
pub fn code(err: &anyhow::Error) -> i32 {
    for cause in err.chain() {
        if cause.is::<Usage>() {
            return USAGE;
        }
        if cause.is::<Numerical>() {
            return NUMERICAL;
        }
        if let Some(e) = cause.downcast_ref::<Error>() {
            return match e {
                Error::Config(_) => USAGE,
                Error::NonFinite(_) => NUMERICAL,
                Error::Shape { .. } | Error::Data(_) | Error::Format { .. } | Error::Io { .. } | Error::Json(_) => DATA,
            };
        }
    }
    DATA
}
