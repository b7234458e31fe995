//! Synthetic-data experiment harness: dataset construction, the voxel
//! classifier built on the fusion modules, training, scoring and ablations.

mod ablation;
mod config;
mod dataset;
mod metrics;
mod model;
mod train;

pub use ablation::{
    delta_chart, group_means, ordering_flags, run_ablation, AblationConfig, OrderingFlags,
};
pub use config::{
    desk_voxels, standard_corruption, DataConfig, ExperimentConfig, Strategy, TrainingConfig,
};
pub use dataset::{
    build_sample, build_samples, generate_bundle, generate_bundles, load_bundles, scene_dirs,
    scene_seed, Dataset, Sample,
};
pub use metrics::{
    evaluate, to_csv, Constant, Metrics, Oracle, Readout, Report, VoxelPredictor, CSV_HEADER,
};
pub use model::{ForwardVars, FusionModel, CONFIG_FILE, DFF_FILE, FUSION_FILE};
pub use train::{class_weights, run_experiment, train_on, TrainOutcome};
