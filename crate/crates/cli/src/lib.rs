//! Experiment harness for the `desk` command: configuration, pipeline stages
//! and report generation.

pub mod config;
pub mod pipeline;
pub mod report;

use desk_core::Error;

pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_DATA: i32 = 3;
pub const EXIT_NONCONVERGENCE: i32 = 4;

pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) | Error::Json(_) => EXIT_CONFIG,
        Error::NonConvergence { .. } => EXIT_NONCONVERGENCE,
        _ => EXIT_DATA,
    }
}
