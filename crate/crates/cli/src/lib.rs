//! Command implementations behind the `adps` binary.

pub mod args;
pub mod commands;
pub mod rawmap;
pub mod render;

use anyhow::Result;
use thiserror::Error;

use args::{Cli, Command};

/// A problem with how the tool was invoked rather than with the data.
#[derive(Debug, Error)]
#[error("{0}")]
pub struct UsageError(pub String);

pub const EXIT_USAGE: u8 = 2;
pub const EXIT_RUNTIME: u8 = 3;

/// 2 for usage and configuration errors, 3 for everything else.
pub fn exit_code(err: &anyhow::Error) -> u8 {
    if err.downcast_ref::<UsageError>().is_some() {
        return EXIT_USAGE;
    }
    match err.downcast_ref::<adps_core::Error>() {
        Some(adps_core::Error::Config(_) | adps_core::Error::Divisibility { .. }) => EXIT_USAGE,
        _ => EXIT_RUNTIME,
    }
}

/// Caps rayon's global pool from `ADPS_NUM_THREADS`.
pub fn configure_threads() -> Result<()> {
    let Ok(raw) = std::env::var("ADPS_NUM_THREADS") else {
        return Ok(());
    };
    let n: usize = raw
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| UsageError(format!("ADPS_NUM_THREADS={raw:?} is not a positive integer")))?;
    rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    Ok(())
}

pub fn run(cli: &Cli) -> Result<()> {
    configure_threads()?;
    match &cli.command {
        Command::Train(a) => commands::cmd_train(a),
        Command::Eval(a) => commands::cmd_eval(a),
        Command::Infer(a) => commands::cmd_infer(a),
        Command::SynthPreview(a) => commands::cmd_synth_preview(a),
        Command::Ablate(a) => commands::cmd_ablate(a),
    }
}
