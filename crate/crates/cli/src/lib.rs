//! Harness library behind the `tinydet` binary: annotation parsing,
//! synthetic scenes, the toy trainer, sensitivity sweeps and report
//! emission. The binary is a thin argument layer over these modules.

pub mod report;
pub mod scene;
pub mod sweeps;
pub mod train;
pub mod visdrone;
