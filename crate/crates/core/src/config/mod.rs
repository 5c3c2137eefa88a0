//! Run configuration: a YAML subset parsed into validated, default-filled settings.

mod reader;
mod run;
pub mod yaml;

pub use reader::{MapBuilder, Section};
pub use run::{
    AudioConfig, CmvnSetting, DataConfig, LoggingConfig, RunConfig, TestingConfig, TextConfig, TrainingConfig,
    TransferConfig, SEED_ENV,
};
pub use yaml::Value;
