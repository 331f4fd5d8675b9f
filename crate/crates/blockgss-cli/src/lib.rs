//! Command-line front end pieces for the separation engine: WAV ingest,
//! session runners for both modes, report rendering, and scene output.

pub mod driver;
pub mod report;
pub mod scenes;
pub mod wav;
