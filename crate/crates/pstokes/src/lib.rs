pub mod checks;
pub mod config;
pub mod experiments;
pub mod io;
pub mod manufactured;

pub use pstokes_core as core;
