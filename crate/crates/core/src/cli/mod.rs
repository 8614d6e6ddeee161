//! Reproducible experiments: run configuration, the synthetic-run driver and
//! the file-level subcommands behind the `surfloc` binary.

pub mod commands;
pub mod config;
pub mod experiment;

pub use commands::{
    cmd_build_map, cmd_degen_report, cmd_eval, cmd_localize, cmd_simulate, degen_windows, dominant_classification,
    write_localization, DegeneracyWindow, LocalizeInputs, SimulationSummary, DEGENERACY_CSV_HEADER, STATUS_CSV_HEADER,
};
pub use config::{RunConfig, KEYS};
pub use experiment::{run_localizer, run_synthetic, KeyframeError, LocalizationOutput, SyntheticOutcome};

use crate::error::Error;

/// Process exit code for an error: 2 for usage and I/O problems, 1 for
/// algorithmic failures.
pub fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Io { .. } | Error::Parse { .. } | Error::Config(_) | Error::InvalidParameter(_) => 2,
        Error::Frame { source, .. } => exit_code(source),
        _ => 1,
    }
}
