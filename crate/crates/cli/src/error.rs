use starbucks_core::Error;
use thiserror::Error as ThisError;

#[derive(Debug, ThisError)]
pub enum CliError {
    #[error("{0}")]
    Config(String),

    #[error("{0}")]
    Data(String),

    #[error("{0}")]
    Numeric(String),

    #[error(transparent)]
    Core(#[from] Error),
}

impl CliError {
    /// `(exit code, kind)` for the one-line error report.
    pub fn classify(&self) -> (i32, &'static str) {
        match self {
            Self::Config(_) => (2, "config"),
            Self::Data(_) => (3, "data"),
            Self::Numeric(_) => (4, "numeric"),
            Self::Core(e) => match e {
                Error::Config(_) | Error::Usage(_) => (2, "config"),
                Error::Training { .. } | Error::Tensor(_) => (4, "numeric"),
                _ => (3, "data"),
            },
        }
    }

    /// Single line: `error<TAB>kind<TAB>message`.
    pub fn report(&self) -> String {
        let (_, kind) = self.classify();
        let message = self.to_string().replace(['\n', '\t'], " ");
        format!("error\t{kind}\t{message}")
    }
}
