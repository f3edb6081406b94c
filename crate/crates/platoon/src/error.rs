use thiserror::Error;

#[derive(Debug, Error)]
pub enum PlatoonError {
    #[error("topology error: {0}")]
    Topology(String),

    #[error("problem construction error: {0}")]
    Problem(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("engine halted at step {step}: node {node} reported {reason}")]
    EngineHalt { step: usize, node: usize, reason: String },

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}
