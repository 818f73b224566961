//! Command implementations behind the `team` binary.

pub mod classify;
pub mod config;
pub mod run;
pub mod simulate;

pub use config::ConfigError;

/// Exit status for an error: 2 for bad settings, 3 for anything the data
/// or the analysis raised.
pub fn exit_code(err: &anyhow::Error) -> i32 {
    if err
        .chain()
        .any(|e| e.downcast_ref::<ConfigError>().is_some())
    {
        2
    } else {
        3
    }
}
