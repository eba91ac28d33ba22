use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::forecaster::{ForecasterConfig, ForecasterSchedule};
use crate::synth::SynthSpec;
use crate::tokenizer::{TokenizerConfig, TokenizerSchedule};
use crate::verify::VerifyOptions;

/// Everything a pipeline run can be configured with. Every table is optional;
/// missing keys take their defaults and unknown keys are rejected.
///
/// ```toml
/// seed = 7
///
/// [synth]
/// grid_hw = [64, 64]
///
/// [tokenizer]
/// codebook_size = 64
///
/// [tokenizer_schedule]
/// steps = 5000
/// revive_dead_after = 200
///
/// [forecaster]
/// context_frames = 4
///
/// [forecaster_schedule]
/// steps = 1000
///
/// [verify]
/// thresholds_mmh = [1.0, 10.0, 50.0]
/// ```
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    /// Single source of randomness; overrides every per-section seed when set.
    pub seed: Option<u64>,
    pub synth: SynthSpec,
    pub tokenizer: TokenizerConfig,
    pub tokenizer_schedule: TokenizerSchedule,
    pub forecaster: ForecasterConfig,
    pub forecaster_schedule: ForecasterSchedule,
    pub verify: VerifyOptions,
}

impl PipelineConfig {
    pub fn from_toml(text: &str, path: &Path) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::config(format!("{}: {}", path.display(), e.message())))
    }

    /// Defaults when `path` is `None`.
    pub fn load(path: Option<&Path>) -> Result<Self> {
        match path {
            None => Ok(Self::default()),
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
                Self::from_toml(&text, p)
            }
        }
    }

    /// Apply a seed to every section (a flag beats the file's top-level seed).
    pub fn apply_seed(&mut self, flag: Option<u64>) {
        if let Some(s) = flag.or(self.seed) {
            self.seed = Some(s);
            self.synth.seed = s;
            self.tokenizer_schedule.seed = s;
            self.forecaster_schedule.seed = s;
            self.verify.seed = s;
        }
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn partial_file_and_seed_override() {
        let text = "seed = 3\n[tokenizer]\ncodebook_size = 32\n[forecaster_schedule]\nsteps = 10\n";
        let mut c = PipelineConfig::from_toml(text, Path::new("x.toml")).unwrap();
        assert_eq!(c.tokenizer.codebook_size, 32);
        assert_eq!(c.tokenizer.alpha, TokenizerConfig::default().alpha);
        c.apply_seed(None);
        assert_eq!(c.forecaster_schedule.seed, 3);
        c.apply_seed(Some(9));
        assert_eq!((c.synth.seed, c.verify.seed, c.seed), (9, 9, Some(9)));
    }

    #[test]
    fn unknown_keys_rejected_and_round_trip() {
        assert!(PipelineConfig::from_toml("[tokenizer]\nbogus = 1\n", Path::new("x")).is_err());
        let c = PipelineConfig::default();
        assert_eq!(PipelineConfig::from_toml(&c.to_toml(), Path::new("x")).unwrap(), c);
    }

    #[test]
    fn readme_example_parses() {
        let readme = include_str!("../../../../README.md");
        let block = readme.split("```toml\n").nth(1).unwrap().split("```").next().unwrap();
        let c = PipelineConfig::from_toml(block, Path::new("README.md")).unwrap();
        assert_eq!(c.tokenizer_schedule.revive_dead_after, Some(200));
    }
}
