//! Library side of the `crl` command: configuration handling and the four
//! verbs, callable without spawning a process.

pub mod commands;
pub mod config;

pub use commands::{
    cmd_eval, cmd_reconstruct, cmd_synth_check, cmd_train, load_data, SynthCheck, TrainSummary, CHECKPOINT_FILE,
    DEFAULT_COUNT, LOG_FILE, LOG_HEADER, TIMING_FILE,
};
pub use config::{ConfigError, Dataset, RunConfig};

/// Tolerance check failed; maps to exit code 1.
#[derive(Debug)]
pub struct ToleranceFailure(pub String);

impl std::fmt::Display for ToleranceFailure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "tolerance check failed\n{}", self.0)
    }
}

impl std::error::Error for ToleranceFailure {}

/// 2 for configuration errors, 1 for everything else.
pub fn exit_code(err: &anyhow::Error) -> u8 {
    let config = err.chain().any(|e| {
        e.is::<ConfigError>() || matches!(e.downcast_ref::<corrmcnn::Error>(), Some(corrmcnn::Error::Config(_)))
    });
    if config {
        2
    } else {
        1
    }
}
