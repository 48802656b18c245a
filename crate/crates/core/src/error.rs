use thiserror::Error;

/// Errors surfaced by the simulator and its front ends.
#[derive(Debug, Error)]
pub enum SimError {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("schema error: {0}")]
    Schema(String),

    #[error("event watchdog exceeded: fired {fired} events, limit {limit} (livelocked model?)")]
    Divergence { fired: u64, limit: u64 },

    #[error("metric undefined: no squashed instructions to normalize by")]
    UndefinedMetric,

    #[error("I/O error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl SimError {
    pub fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        SimError::Io {
            path: path.into(),
            source,
        }
    }
}
