//! Ingestion and preprocessing: raw records to windowed grid samples and
//! vehicle-disjoint splits.

pub mod maneuver;
pub mod records;
pub mod samples;
pub mod split;
pub mod store;

pub use maneuver::{label_maneuver, LateralManeuver, LongitudinalManeuver, ManeuverLabel};
pub use records::{cap_lane, downsample, parse_records, RawRecord, Unit};
pub use samples::{build_samples, grid_cell_index, NeighborHistory, TrajectorySample};
pub use split::{split_dataset, DatasetSplit};
