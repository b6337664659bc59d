//! Selective state-space scanning: the S6 recurrence, four-direction 2-D
//! scanning, and the gated VSS layers built on them.

mod cross;
mod kernel;
mod layers;

pub use cross::{cross_merge, cross_scan, ScanDirection};
pub use kernel::{discretize, scan, selective_scan, ScanMode, SCAN_CHUNK};
pub use layers::{dt_rank, Ss2d, VssBlock, VssLayer, S6, VSS_DEPTH};
