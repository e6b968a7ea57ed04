#![allow(clippy::neg_cmp_op_on_partial_ord)]

//! Command-line driver: configuration, run directories and the seven
//! experiment commands.

pub mod commands;
pub mod config;
pub mod error;
pub mod output;

pub use commands::{run, Command, RunArgs};
pub use error::{CliError, CliResult};

/// Environment variable capping the worker thread count.
pub const THREADS_ENV: &str = "GEOALIGN_THREADS";

/// Sizes the global thread pool from [`THREADS_ENV`] when set.
pub fn init_thread_pool() -> CliResult<()> {
    let Ok(value) = std::env::var(THREADS_ENV) else {
        return Ok(());
    };
    let bad = |message: String| CliError::Config {
        path: THREADS_ENV.into(),
        message,
    };
    let n: usize = value.trim().parse().map_err(|_| bad(format!("expected a positive integer, got {value:?}")))?;
    if n == 0 {
        return Err(bad("thread count must be positive".into()));
    }
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| bad(e.to_string()))
}
