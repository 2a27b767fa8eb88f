use sim2piano::domain_rand::DrError;
use sim2piano::exec_modes::plant::PlantError;
use sim2piano::experiments::ExperimentError;
use sim2piano::policy::{CheckpointError, PolicyError, TrainError};
use sim2piano::song::SongError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Config(String),
    #[error("{0}")]
    Plant(String),
    #[error("{0}")]
    Numerical(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Config(_) => 3,
            CliError::Plant(_) => 4,
            CliError::Numerical(_) => 5,
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            CliError::Usage(_) => "usage",
            CliError::Config(_) => "config",
            CliError::Plant(_) => "plant",
            CliError::Numerical(_) => "numerical",
        }
    }

    /// `error kind=<kind> code=<n> message="<json-escaped>"` on a single line.
    pub fn line(&self) -> String {
        let message = serde_json::to_string(&self.to_string()).expect("strings serialize");
        format!("error kind={} code={} message={message}", self.kind(), self.exit_code())
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Config(format!("io: {e}"))
    }
}

impl From<SongError> for CliError {
    fn from(e: SongError) -> Self {
        CliError::Config(format!("song: {e}"))
    }
}

impl From<CheckpointError> for CliError {
    fn from(e: CheckpointError) -> Self {
        CliError::Config(format!("checkpoint: {e}"))
    }
}

impl From<DrError> for CliError {
    fn from(e: DrError) -> Self {
        CliError::Config(format!("domain randomization: {e}"))
    }
}

impl From<PlantError> for CliError {
    fn from(e: PlantError) -> Self {
        CliError::Plant(e.to_string())
    }
}

impl From<PolicyError> for CliError {
    fn from(e: PolicyError) -> Self {
        CliError::Numerical(e.to_string())
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::Diverged { .. } | TrainError::Policy(_) => CliError::Numerical(e.to_string()),
            TrainError::Dr(e) => e.into(),
            other => CliError::Config(other.to_string()),
        }
    }
}

impl From<ExperimentError> for CliError {
    fn from(e: ExperimentError) -> Self {
        CliError::Config(e.to_string())
    }
}
