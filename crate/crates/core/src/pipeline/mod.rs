//! Sequence processing, dataset I/O, synthetic scenes and evaluation.

pub mod config;
pub mod eval;
pub mod io;
pub mod run;
pub mod synth;

pub use config::{DatasetFormat, FailurePolicy, SequenceConfig};
pub use io::{ScanSource, TrajectoryFormat, TrajectoryRecord};
pub use run::{run_mapping, run_sequence, SequenceOutput};
