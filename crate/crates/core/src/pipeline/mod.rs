//! Dataset synthesis and loading, training, test-time rendering and evaluation.

pub mod ablation;
pub mod checkpoint;
pub mod config;
pub mod dataset;
pub mod io;
pub mod metrics;
pub mod novel;
pub mod train;

pub use ablation::{ablation_csv, run_ablation, AblationRow, TABLE_VARIANTS};
pub use checkpoint::{load_checkpoint, save_checkpoint};
pub use config::{Modules, RunConfig, Variant};
pub use dataset::{load_dataset, synth_dataset, Dataset, DatasetSpec, Preset};
pub use metrics::{eval_dirs, psnr, MetricsRow};
pub use novel::{render_novel, render_transforms};
pub use train::{train, Model, TrainState, Trainer};
