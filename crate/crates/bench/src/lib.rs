//! Problem specs, traces, reference oracles and benchmark suites around `ibpd`.

pub mod error;
pub mod oracle;
pub mod reference;
pub mod run;
pub mod spec;
pub mod suites;
pub mod trace;

pub use error::{BenchError, ExitCode};
