use serde::Serialize;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Kind {
    Usage,
    Config,
    MissingArtifact,
    Runtime,
    AlreadyExists,
}

impl Kind {
    pub fn exit_code(self) -> i32 {
        match self {
            Kind::Usage => 2,
            Kind::Config => 3,
            Kind::MissingArtifact => 4,
            Kind::Runtime => 5,
            Kind::AlreadyExists => 6,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct CliError {
    pub kind: Kind,
    pub message: String,
}

impl CliError {
    pub fn new(kind: Kind, message: impl Into<String>) -> Self {
        Self { kind, message: message.into() }
    }

    pub fn config(message: impl Into<String>) -> Self {
        Self::new(Kind::Config, message)
    }

    pub fn missing(message: impl Into<String>) -> Self {
        Self::new(Kind::MissingArtifact, message)
    }

    /// One-line JSON written to stderr on failure.
    pub fn to_line(&self) -> String {
        let body = serde_json::json!({
            "error": {
                "kind": self.kind,
                "code": self.kind.exit_code(),
                "message": self.message,
            }
        });
        body.to_string()
    }
}

impl From<sparkee::Error> for CliError {
    fn from(e: sparkee::Error) -> Self {
        use sparkee::Error as E;
        let kind = match &e {
            E::InvalidConfig(_) | E::InvalidPolicy(_) | E::InvalidSampling(_) | E::Json(_) | E::MissingHead(_) => Kind::Config,
            E::AlreadyExists(_) => Kind::AlreadyExists,
            E::Container(_) => Kind::MissingArtifact,
            E::Io(io) if io.kind() == std::io::ErrorKind::NotFound => Kind::MissingArtifact,
            _ => Kind::Runtime,
        };
        Self::new(kind, e.to_string())
    }
}

pub type CliResult<T> = Result<T, CliError>;
