//! File formats, verification suites and the command line for `amam-core`.
//!
//! * [`amtn`]: the AMTN v1 tensor container.
//! * [`params`]: parameter directories (AMTN files plus a JSON manifest).
//! * [`config`], [`detections`], [`report`]: JSON and CSV documents.
//! * [`suite`], [`ablate`]: the `check`, `gradcheck` and `ablate` engines.
//! * [`cli`]: argument parsing and exit-code handling.

pub mod ablate;
pub mod amtn;
pub mod cli;
pub mod config;
pub mod detections;
pub mod format;
pub mod params;
pub mod report;
pub mod suite;

pub use amam_core;
