use std::fmt;

/// Failure categories, each with its own exit code.
#[derive(Debug)]
pub enum CliError {
    MissingInput(String),
    Config(String),
    NonFinite(String),
    Io(String),
    Runtime(String),
}

impl CliError {
    pub fn category(&self) -> &'static str {
        match self {
            CliError::MissingInput(_) => "missing-input",
            CliError::Config(_) => "config",
            CliError::NonFinite(_) => "non-finite",
            CliError::Io(_) => "io",
            CliError::Runtime(_) => "runtime",
        }
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::MissingInput(_) => 3,
            CliError::Config(_) => 4,
            CliError::NonFinite(_) => 5,
            CliError::Io(_) => 6,
            CliError::Runtime(_) => 7,
        }
    }

    fn message(&self) -> &str {
        match self {
            CliError::MissingInput(m)
            | CliError::Config(m)
            | CliError::NonFinite(m)
            | CliError::Io(m)
            | CliError::Runtime(m) => m,
        }
    }
}

impl fmt::Display for CliError {
    /// `error[<category>]: <message>` on one line.
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let msg = self.message().replace(['\n', '\r'], " ");
        write!(f, "error[{}]: {}", self.category(), msg)
    }
}

impl std::error::Error for CliError {}

impl From<lanesplat::io::IoError> for CliError {
    fn from(e: lanesplat::io::IoError) -> Self {
        CliError::Io(e.to_string())
    }
}

impl From<lanesplat::dataset::DatasetError> for CliError {
    fn from(e: lanesplat::dataset::DatasetError) -> Self {
        use lanesplat::dataset::DatasetError;
        match e {
            DatasetError::Invalid(m) => CliError::Runtime(m),
            other => CliError::Io(other.to_string()),
        }
    }
}

impl From<lanesplat::scene::SceneError> for CliError {
    fn from(e: lanesplat::scene::SceneError) -> Self {
        CliError::Io(e.to_string())
    }
}

impl From<lanesplat::trainer::TrainError> for CliError {
    fn from(e: lanesplat::trainer::TrainError) -> Self {
        use lanesplat::trainer::TrainError;
        match e {
            TrainError::Config(m) => CliError::Config(m),
            e @ TrainError::NonFinite { .. } => CliError::NonFinite(e.to_string()),
            TrainError::Io(e) => CliError::Io(e.to_string()),
            other => CliError::Runtime(other.to_string()),
        }
    }
}

impl From<lanesplat::pseudolidar::InitError> for CliError {
    fn from(e: lanesplat::pseudolidar::InitError) -> Self {
        use lanesplat::pseudolidar::InitError;
        match e {
            InitError::Io(e) => CliError::Io(e.to_string()),
            other => CliError::Runtime(other.to_string()),
        }
    }
}

impl From<lanesplat::synthbench::SynthError> for CliError {
    fn from(e: lanesplat::synthbench::SynthError) -> Self {
        CliError::Config(e.to_string())
    }
}

impl From<lanesplat::geometry::GeometryError> for CliError {
    fn from(e: lanesplat::geometry::GeometryError) -> Self {
        CliError::Runtime(e.to_string())
    }
}

impl From<lanesplat::metrics::ShapeMismatch> for CliError {
    fn from(e: lanesplat::metrics::ShapeMismatch) -> Self {
        CliError::Runtime(e.to_string())
    }
}
