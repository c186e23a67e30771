pub mod calib;
#[cfg(feature = "cli")]
pub mod cli;
pub mod compress;
pub mod eval;
pub mod format;
pub mod linalg;
pub mod recmodel;
