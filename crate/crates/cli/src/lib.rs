//! Reproducible experiment runs for the location-scale Gaussian VAE: data
//! generation, training, evaluation, forecasting and the NLL-versus-MSE
//! ablation, all driven by a TOML run configuration.

pub mod commands;
pub mod config;

pub use commands::{cmd_ablate, cmd_eval, cmd_forecast, cmd_synth, cmd_train, resolve_data};
pub use config::{Overrides, RunConfig};

/// Process exit code for an error: 2 for bad input or configuration,
/// 1 for internal failures.
pub fn exit_code(err: &lsgvae_core::Error) -> i32 {
    if err.is_user_error() {
        2
    } else {
        1
    }
}
