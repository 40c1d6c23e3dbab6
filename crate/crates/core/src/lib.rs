pub mod capture;
pub mod editor;
pub mod engine;
pub mod error;
pub mod eval;
pub mod io;
pub mod linalg;
pub mod pipeline;
pub mod probe;

pub use error::{Error, Result};

/// Version stamped into every JSON report.
pub const REPORT_SCHEMA_VERSION: u32 = 1;
