//! Command-line front end: reads count panels and centroids, runs the
//! simulator or one of the fitting procedures, and writes flows, parameters
//! and a JSON run report.

pub mod args;
mod commands;
pub mod io;
pub mod report;

use std::time::Instant;

use anyhow::{Context, Result};

pub use args::Cli;
use report::{RunConfig, RunReport};

/// Runs one command and writes its `report.json`, also when the command fails.
pub fn run(cli: &Cli) -> Result<RunReport> {
    let out = cli.command.out_dir();
    std::fs::create_dir_all(out).with_context(|| format!("cannot create output directory {}", out.display()))?;
    let config = RunConfig { command: cli.command.name().to_owned(), out_dir: out.clone(), ..RunConfig::default() };
    let mut report = RunReport::new(config);
    let clock = Instant::now();
    let outcome = commands::execute(&cli.command, &mut report);
    report.wall_seconds = clock.elapsed().as_secs_f64();
    if let Err(err) = &outcome {
        report.error = Some(format!("{err:#}"));
    }
    io::write_json(&out.join("report.json"), &report)?;
    outcome.map(|()| report)
}
