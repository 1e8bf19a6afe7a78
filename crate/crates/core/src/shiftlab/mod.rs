//! Synthetic domains and test streams with controllable shift: mean offset,
//! rotation and scaling of the class-conditional features, target label
//! noise, class imbalance and temporal class correlation.

mod domain;
mod io;
mod stream;

pub use domain::{derive_target, sample_domain, Dataset, DomainSpec, PlaneRotation, ShiftTransform};
pub use io::{load_dataset, read_dataset, save_dataset, write_dataset};
pub use stream::{make_stream, StreamOrder, StreamSpec};
