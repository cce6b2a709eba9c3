//! Files: synthetic datasets, point clouds, checkpoints and run configs.

mod checkpoint;
mod config;
mod dataset;
mod record;

pub use dataset::{
    generate_cloud, generate_dataset, parse_cloud, read_cloud, sample_seed, surface_point, write_cloud, DataConfig,
    Dataset, ShapeFamily, ShapeSpec, MANIFEST, TORUS_MAJOR, TORUS_MINOR,
};
pub use checkpoint::{Checkpoint, MomentBlock, ParamBlock, Stage, TrainingState, CHECKPOINT_VERSION};
pub use record::RunRecord;
pub use config::{
    FewShotConfig, FinetuneConfig, LossConfig, RunConfig, Stage1Config, Stage2Config, Stage3Config, TrainPlan,
};
