//! Process exit codes and the error that carries one.

use std::fmt;

pub const EXIT_OK: u8 = 0;
/// Gradient check failed, or any error without a more specific code.
pub const EXIT_VERIFY: u8 = 1;
/// Invalid config, flags or corpus schema.
pub const EXIT_CONFIG: u8 = 2;
/// Checkpoint does not fit the requested configuration.
pub const EXIT_MISMATCH: u8 = 3;
pub const EXIT_IO: u8 = 4;

#[derive(Debug)]
pub struct Failure {
    pub code: u8,
    pub message: String,
}

impl Failure {
    pub fn new(code: u8, message: impl Into<String>) -> Failure {
        Failure {
            code,
            message: message.into(),
        }
    }

    pub fn context(self, ctx: impl fmt::Display) -> Failure {
        Failure {
            code: self.code,
            message: format!("{ctx}: {}", self.message),
        }
    }
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

impl std::error::Error for Failure {}

impl From<dialmem::Error> for Failure {
    fn from(e: dialmem::Error) -> Failure {
        use dialmem::Error::*;
        let code = match &e {
            Io { .. } => EXIT_IO,
            Data(_) | Serde(_) => EXIT_CONFIG,
            _ => EXIT_VERIFY,
        };
        Failure::new(code, e.to_string())
    }
}
