//! End-to-end training of a small CNN in float or INT8 arithmetic.

pub mod checkpoint;
pub mod config;
pub mod data;
pub mod metrics;
pub mod model;
pub mod trainer;

pub use config::{DatasetSource, LayerSpec, LrSchedule, Mode, ModelSpec, Seeds, TrainConfig};
pub use data::{load_dataset, Dataset};
pub use metrics::{LayerMetrics, MetricsRecord, MetricsWriter};
pub use model::{ConvTrace, Model};
pub use trainer::{train, train_to_dir, TrainOutcome, Trainer};
