//! Command implementations behind the `hqgae` binary.

pub mod commands;
pub mod config;
pub mod metrics;
pub mod sweep;

use hqgae_core::model::ModelError;

/// Process exit status for an error: 2 when training diverged, 1 otherwise.
pub fn exit_code(e: &anyhow::Error) -> i32 {
    let diverged = e
        .chain()
        .any(|c| matches!(c.downcast_ref::<ModelError>(), Some(ModelError::Diverged { .. })));
    if diverged {
        2
    } else {
        1
    }
}
