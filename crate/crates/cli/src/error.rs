use std::fmt;

use nfembed::Error;

pub type Result<T> = std::result::Result<T, CliError>;

#[derive(Debug)]
pub enum CliError {
    /// An upstream bundle is absent or of the wrong kind.
    Missing { stage: &'static str, detail: String },
    /// The report set was written but some repeats failed.
    Incomplete { failed: usize, total: usize },
    Core(Error),
}

impl CliError {
    /// 2 usage/config, 3 missing prerequisite, 4 data, 5 internal.
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Missing { .. } => 3,
            CliError::Incomplete { .. } => 5,
            CliError::Core(e) => match e.root() {
                Error::Config(_) | Error::Usage(_) => 2,
                Error::Index(_) => 5,
                _ => 4,
            },
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Missing { stage, detail } => {
                write!(f, "missing {stage} bundle: {detail} (run `nfembed train --stage {stage}` first)")
            }
            CliError::Incomplete { failed, total } => {
                write!(f, "{failed} of {total} repeats failed; the failures are listed in summary.txt")
            }
            CliError::Core(e) => e.fmt(f),
        }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        CliError::Core(e)
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Core(e.into())
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Core(e.into())
    }
}
