use ldg_core::LdgError;

#[derive(Debug, thiserror::Error)]
pub enum HarnessError {
    #[error(transparent)]
    Core(#[from] LdgError),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("I/O error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("CSV error: {0}")]
    Csv(#[from] csv::Error),
    #[error("{context}: {source}")]
    Context {
        context: String,
        #[source]
        source: Box<HarnessError>,
    },
}

pub type Result<T> = std::result::Result<T, HarnessError>;

impl HarnessError {
    pub fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        HarnessError::Io { path: path.as_ref().display().to_string(), source }
    }

    pub fn context(self, context: impl Into<String>) -> Self {
        HarnessError::Context { context: context.into(), source: Box::new(self) }
    }

    /// 0 is success; 2 configuration, 3 model/assumption/numerical, 4 I/O.
    pub fn exit_code(&self) -> i32 {
        match self {
            HarnessError::Core(LdgError::Config(_)) | HarnessError::Config(_) => 2,
            HarnessError::Core(_) => 3,
            HarnessError::Io { .. } => 4,
            HarnessError::Csv(e) => match e.kind() {
                csv::ErrorKind::Io(_) => 4,
                _ => 2,
            },
            HarnessError::Context { source, .. } => source.exit_code(),
        }
    }
}
