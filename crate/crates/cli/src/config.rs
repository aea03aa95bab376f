//! Resolved run configuration.
//!
//! Values come from three layers, later ones winning: built-in defaults, an
//! optional TOML file passed with `--config`, then command-line flags. The
//! file uses the same layout as the `run_config` echoed into every artifact,
//! so an artifact's echo can be fed back as a config file. Example:
//!
//! ```toml
//! seed = 7
//! threads = 1
//!
//! [stft]
//! frame_len = 512
//! hop = 128
//!
//! [train]
//! epochs = 10
//! batch_size = 4
//! lr = 1e-3
//!
//! [train.arch]
//! kind = "unet"
//! width_multiplier = 2.0
//!
//! [mix]
//! train_snrs = [-10.0, -5.0, 0.0, 5.0, 10.0, 15.0, 20.0]
//! test_snrs = [-7.5, -2.5, 2.5, 7.5, 12.5, 17.5]
//! split_ratios = [0.75, 0.10, 0.15]
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use specunet::data::{DEFAULT_SPLIT_RATIOS, TEST_SNRS_DB, TRAIN_SNRS_DB};
use specunet::dsp::{ResampleQuality, StftConfig};
use specunet::train::TrainConfig;
use specunet::TOOL_VERSION;

use crate::error::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MixSettings {
    pub train_snrs: Vec<f64>,
    pub test_snrs: Vec<f64>,
    pub split_ratios: [f64; 3],
    pub speaker_pattern: Option<String>,
    /// Write only the manifest; mixtures are rendered on demand later.
    pub lazy: bool,
}

impl Default for MixSettings {
    fn default() -> Self {
        Self {
            train_snrs: TRAIN_SNRS_DB.to_vec(),
            test_snrs: TEST_SNRS_DB.to_vec(),
            split_ratios: DEFAULT_SPLIT_RATIOS,
            speaker_pattern: None,
            lazy: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSettings {
    pub utterances: usize,
    pub speakers: usize,
    pub utterance_len: usize,
    pub noise_len: usize,
}

impl Default for SynthSettings {
    fn default() -> Self {
        Self {
            utterances: 40,
            speakers: 8,
            utterance_len: 32_768,
            noise_len: 16_000 * 30,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub tool_version: String,
    /// Subcommand that produced the artifact.
    pub command: String,
    pub seed: u64,
    pub threads: Option<usize>,
    pub stft: StftConfig,
    pub resample: ResampleQuality,
    /// Optimization settings and network architecture.
    pub train: TrainConfig,
    pub mix: MixSettings,
    pub synth: SynthSettings,
    /// Input and output locations of the run, by role.
    pub paths: BTreeMap<String, PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            tool_version: TOOL_VERSION.to_string(),
            command: String::new(),
            seed: 0,
            threads: None,
            stft: StftConfig::default(),
            resample: ResampleQuality::default(),
            train: TrainConfig::default(),
            mix: MixSettings::default(),
            synth: SynthSettings::default(),
            paths: BTreeMap::new(),
        }
    }
}

impl RunConfig {
    /// Defaults overlaid with the optional config file.
    pub fn load(path: Option<&Path>) -> Result<Self, CliError> {
        let Some(path) = path else { return Ok(Self::default()) };
        let text = fs::read_to_string(path)
            .map_err(|e| CliError::usage(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_toml(&text).map_err(|e| CliError::usage(format!("config {}: {e}", path.display())))
    }

    pub fn from_toml(text: &str) -> Result<Self, toml::de::Error> {
        toml::from_str(text)
    }

    /// Stamps the running tool and syncs the shared seed into each section.
    pub fn finish(&mut self, command: &str) {
        self.tool_version = TOOL_VERSION.to_string();
        self.command = command.to_string();
        self.train.seed = self.seed;
    }

    pub fn to_value(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("RunConfig always serializes")
    }
}

/// `{artifact}.run.json` next to the artifact.
pub fn sidecar_path(artifact: &Path) -> PathBuf {
    let mut name = artifact.file_name().unwrap_or_default().to_os_string();
    name.push(".run.json");
    artifact.with_file_name(name)
}

pub fn write_sidecar(artifact: &Path, config: &RunConfig) -> Result<(), CliError> {
    fs::write(sidecar_path(artifact), serde_json::to_string_pretty(config)?)?;
    Ok(())
}

/// Parses "a,b,c" into numbers.
pub fn parse_list(text: &str) -> Result<Vec<f64>, String> {
    text.split(',')
        .map(|t| t.trim().parse::<f64>().map_err(|e| format!("`{t}`: {e}")))
        .collect()
}
