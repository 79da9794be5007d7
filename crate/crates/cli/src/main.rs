// SPDX-License-Identifier: MIT OR Apache-2.0

//! `svtrace` command-line front end.
//!
//! Every flag can also be set through an environment variable with the
//! `SVT_` prefix, e.g. `SVT_WEIGHTS`, `SVT_N_PROMPTS`, `SVT_WORKERS`.
//! Exit codes: 0 success, 2 usage error, 3 data or consistency error.

mod commands;
mod config;

use std::process::ExitCode;

use clap::Parser;

use crate::config::{Cli, UsageError};

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match commands::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.downcast_ref::<UsageError>().is_some() {
                ExitCode::from(2)
            } else {
                ExitCode::from(3)
            }
        }
    }
}
