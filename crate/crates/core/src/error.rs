use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("duplicate task event (run_id {run_id}, task_id {task_id})")]
    Conflict { run_id: String, task_id: String },

    #[error("no runs to mine")]
    NoRuns,

    #[error("internal consistency error: {0}")]
    Consistency(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("transport error{}: {message}", if *.retryable { " (retryable)" } else { "" })]
    Transport { retryable: bool, message: String },

    #[error("replay fixture missing for tag {tag} digest {digest}")]
    FixtureMissing { tag: String, digest: String },

    #[error("empty completion for stage {0}")]
    EmptyCompletion(String),

    #[error("distillation failed: {0}")]
    DistillationFailed(String),

    #[error("could not parse feature elicitation completion: {raw}")]
    ElicitationParse { raw: String },

    #[error("could not parse feature extraction completion: {raw}")]
    ExtractionParse { raw: String },

    #[error("could not parse corrective statements: {raw}")]
    DerivationParse { raw: String },

    #[error("no outcome label for run {0}")]
    MissingLabel(String),

    #[error("unknown node {0}")]
    UnknownNode(String),

    #[error("unknown user {0}")]
    UnknownUser(String),

    #[error("no comparative basis: {0}")]
    NoComparativeBasis(String),

    #[error("{stage} stage failed: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error("toml error: {0}")]
    Toml(String),
}

impl Error {
    /// Wraps the error with the pipeline stage it came from.
    pub fn in_stage(self, stage: &'static str) -> Error {
        match self {
            e @ Error::Stage { .. } => e,
            other => Error::Stage {
                stage,
                source: Box::new(other),
            },
        }
    }

    /// The innermost error, skipping stage wrappers.
    pub fn root(&self) -> &Error {
        match self {
            Error::Stage { source, .. } => source.root(),
            other => other,
        }
    }

    pub fn is_gateway(&self) -> bool {
        matches!(
            self.root(),
            Error::Transport { .. } | Error::FixtureMissing { .. }
        )
    }

    pub fn is_retryable(&self) -> bool {
        matches!(self.root(), Error::Transport { retryable: true, .. })
    }
}

impl From<toml::de::Error> for Error {
    fn from(e: toml::de::Error) -> Self {
        Error::Toml(e.to_string())
    }
}

impl From<toml::ser::Error> for Error {
    fn from(e: toml::ser::Error) -> Self {
        Error::Toml(e.to_string())
    }
}
