//! Selective state-space scan and the VMBlock built around it.

mod block;
mod order;
mod scan;

pub use block::{depthwise_conv1d, Ssm, VmBlock, VmBlockConfig, VmStack};
pub use order::{featuremap_to_sequence, sequence_to_featuremap, ScanOrder};
pub use scan::{dense_scan_apply, selective_scan};
