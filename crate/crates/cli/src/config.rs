use std::path::PathBuf;

use floatfuse::calib::CalibParams;
use floatfuse::fusion::FusionParams;
use floatfuse::tof::ToFConfig;
use serde::{Deserialize, Serialize};

/// Everything a run depends on. Command-line flags override the values
/// loaded from `--config`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub bundle: Option<PathBuf>,
    pub rig: Option<PathBuf>,
    pub out: Option<PathBuf>,
    /// Precomputed raw-UW → raw-FM flow used instead of dense matching.
    pub flow: Option<PathBuf>,
    /// Main-camera calibration JSON used instead of calibrating.
    pub calib_file: Option<PathBuf>,
    pub seed: u64,
    /// Worker threads; 0 picks one per core.
    pub threads: usize,
    /// Fuse with the stale main-camera calibration instead of calibrating.
    pub ignore_ois: bool,
    pub tof: ToFConfig,
    pub calib: CalibParams,
    pub fusion: FusionParams,
}

impl PipelineConfig {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(text)
    }
}
