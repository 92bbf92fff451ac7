//! Command implementations behind the `medctx` binary.

pub mod ablate;
pub mod config;
pub mod dataset;
pub mod eval;
pub mod gradcheck;
pub mod rundir;
pub mod train;

pub use config::RunConfig;

/// Name and version stamped into every artifact.
pub const VERSION: &str = concat!(env!("CARGO_PKG_NAME"), " ", env!("CARGO_PKG_VERSION"));

/// The resolved configuration with a header naming the producing command.
pub fn config_echo(cfg: &RunConfig, command: &str) -> String {
    format!("# {VERSION}: {command}\n{}", cfg.render())
}
