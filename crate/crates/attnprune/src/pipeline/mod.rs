//! Workflow orchestration: datasets, training phases, and the single-config
//! end-to-end run.

pub mod data;
pub mod run;
pub mod train;

pub use data::{augment, load_cifar10_binary, make_synth_dataset, AugmentCfg, Dataset};
pub use run::{run_all, Manifest, RunConfig};
pub use train::{collect_stats, evaluate, finetune, train_attention, train_base, Accuracy, TrainConfig};
