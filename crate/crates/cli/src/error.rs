use serde::Serialize;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum ErrorKind {
    Usage,
    Config,
    MissingInput,
    Locked,
    Runtime,
}

#[derive(Debug, Serialize)]
pub struct CliError {
    pub kind: ErrorKind,
    pub message: String,
}

impl CliError {
    pub fn new(kind: ErrorKind, message: impl Into<String>) -> Self {
        CliError { kind, message: message.into() }
    }

    pub fn config(message: impl Into<String>) -> Self {
        Self::new(ErrorKind::Config, message)
    }

    pub fn missing(message: impl Into<String>) -> Self {
        Self::new(ErrorKind::MissingInput, message)
    }

    pub fn runtime(message: impl Into<String>) -> Self {
        Self::new(ErrorKind::Runtime, message)
    }

    pub fn from_io(e: std::io::Error, what: impl std::fmt::Display) -> Self {
        let kind = if e.kind() == std::io::ErrorKind::NotFound { ErrorKind::MissingInput } else { ErrorKind::Runtime };
        Self::new(kind, format!("{what}: {e}"))
    }

    /// Library errors while reading `what`.
    pub fn reading(e: slowdyn::Error, what: impl std::fmt::Display) -> Self {
        match e {
            slowdyn::Error::Io(io) => Self::from_io(io, what),
            other => Self::runtime(format!("{what}: {other}")),
        }
    }

    /// 1 runtime failure, 2 usage or configuration, 3 missing input,
    /// 4 output directory locked.
    pub fn exit_code(&self) -> i32 {
        match self.kind {
            ErrorKind::Usage | ErrorKind::Config => 2,
            ErrorKind::MissingInput => 3,
            ErrorKind::Locked => 4,
            ErrorKind::Runtime => 1,
        }
    }

    /// One-line JSON for stderr.
    pub fn to_json(&self) -> String {
        serde_json::json!({ "error": self }).to_string()
    }
}

impl From<slowdyn::Error> for CliError {
    fn from(e: slowdyn::Error) -> Self {
        match e {
            slowdyn::Error::Io(io) => Self::from_io(io, "i/o"),
            other => Self::runtime(other.to_string()),
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.message)
    }
}

impl std::error::Error for CliError {}

pub type CliResult<T> = Result<T, CliError>;
