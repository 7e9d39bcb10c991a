use spatial_ssl::Error;

/// A command failure with a stable class name and exit code.
#[derive(Debug)]
pub enum Failure {
    Usage(String),
    ConfigUnreadable(String),
    SchemaVersion(String),
    ConfigInvalid(String),
    GradcheckFailed(String),
    Core(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::InvalidConfig(m) => Failure::ConfigInvalid(m),
            other => Failure::Core(other),
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Core(Error::Io(e))
    }
}

impl From<serde_json::Error> for Failure {
    fn from(e: serde_json::Error) -> Self {
        Failure::Core(Error::Json(e))
    }
}

impl From<csv::Error> for Failure {
    fn from(e: csv::Error) -> Self {
        Failure::Core(Error::DatasetFormat(format!("results table: {e}")))
    }
}

impl Failure {
    pub fn class(&self) -> &'static str {
        match self {
            Failure::Usage(_) => "USAGE",
            Failure::ConfigUnreadable(_) => "CONFIG_UNREADABLE",
            Failure::SchemaVersion(_) => "SCHEMA_VERSION",
            Failure::ConfigInvalid(_) => "INVALID_CONFIG",
            Failure::GradcheckFailed(_) => "GRADCHECK_FAILED",
            Failure::Core(e) => e.class(),
        }
    }

    pub fn exit_code(&self) -> i32 {
        match self.class() {
            "USAGE" => 2,
            "CONFIG_UNREADABLE" => 3,
            "SCHEMA_VERSION" => 4,
            "INVALID_CONFIG" => 5,
            "CKPT_NOT_FOUND" => 6,
            "CKPT_FORMAT" => 7,
            "NON_FINITE_LOSS" => 8,
            "GRADCHECK_FAILED" => 9,
            "TASK_MISMATCH" => 10,
            "DATASET_TOO_SMALL" | "DATASET_FORMAT" => 11,
            "SHAPE_MISMATCH" | "INVALID_SCENE" => 12,
            "DEGENERATE_EMBEDDING" | "ZERO_NORM_REGION" => 13,
            "IO" | "JSON" => 14,
            _ => 1,
        }
    }

    pub fn message(&self) -> String {
        let text = match self {
            Failure::Usage(m)
            | Failure::ConfigUnreadable(m)
            | Failure::SchemaVersion(m)
            | Failure::ConfigInvalid(m)
            | Failure::GradcheckFailed(m) => m.clone(),
            Failure::Core(e) => e.to_string(),
        };
        text.replace(['\n', '\r'], " ")
    }
}
