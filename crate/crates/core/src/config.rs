//! TOML/JSON configuration file mirroring the model, training, feature and
//! schedule parameters. Unknown keys are rejected everywhere so typos
//! surface instead of silently using defaults.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::audio::stft::StftConfig;
use crate::error::{Error, Result};
use crate::phi::PhiConfig;
use crate::refiner::RefinerConfig;
use crate::train::TrainConfig;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FeatureParams {
    pub fmin_hz: f64,
    pub fmax_hz: f64,
}

impl Default for FeatureParams {
    fn default() -> Self {
        FeatureParams {
            fmin_hz: 0.0,
            fmax_hz: 8000.0,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScheduleParams {
    #[serde(rename = "T")]
    pub t: usize,
    pub beta_lo: f64,
    pub beta_hi: f64,
}

impl Default for ScheduleParams {
    fn default() -> Self {
        ScheduleParams {
            t: 1000,
            beta_lo: 1e-4,
            beta_hi: 5e-3,
        }
    }
}

impl ScheduleParams {
    pub fn build(&self) -> Result<crate::diffusion::TrainingSchedule> {
        crate::diffusion::linear_beta(self.t, self.beta_lo, self.beta_hi)
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CliConfig {
    pub refiner: RefinerConfig,
    pub phi: PhiConfig,
    pub train: TrainConfig,
    pub stft: StftConfig,
    pub features: FeatureParams,
    pub schedule: ScheduleParams,
}

impl CliConfig {
    /// Parses TOML (`.toml`) or JSON (anything else).
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg: CliConfig = if path.extension().is_some_and(|e| e.eq_ignore_ascii_case("toml")) {
            toml::from_str(&text)
                .map_err(|e| Error::InvalidConfig(format!("{}: {e}", path.display())))?
        } else {
            serde_json::from_str(&text)
                .map_err(|e| Error::InvalidConfig(format!("{}: {e}", path.display())))?
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.refiner.validate()?;
        self.phi.validate()?;
        self.stft.validate()?;
        if self.refiner.upsample_product() != self.stft.hop_size {
            return Err(Error::InvalidConfig(format!(
                "refiner upsample product {} must equal stft hop {}",
                self.refiner.upsample_product(),
                self.stft.hop_size
            )));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_are_consistent() {
        let cfg = CliConfig::default();
        cfg.validate().unwrap();
        assert_eq!(cfg.refiner.upsample_product(), 256);
        assert_eq!(cfg.stft.hop_size, 256);
        assert_eq!(cfg.schedule.t, 1000);
    }

    #[test]
    fn toml_round_trip_and_unknown_key_rejection() {
        let dir = std::env::temp_dir().join("diffvox-config-tests");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("c.toml");
        let text = toml::to_string_pretty(&CliConfig::default()).unwrap();
        std::fs::write(&path, &text).unwrap();
        let cfg = CliConfig::load(&path).unwrap();
        assert_eq!(cfg.train.clip_len, 16000);

        // a typo anywhere must be rejected
        std::fs::write(&path, format!("{text}\n[refiner2]\nhidden = 3\n")).unwrap();
        assert!(CliConfig::load(&path).is_err());
        std::fs::write(
            &path,
            text.replace("hidden_channels", "hidden_chanels"),
        )
        .unwrap();
        assert!(CliConfig::load(&path).is_err());
    }

    #[test]
    fn json_accepted_too() {
        let dir = std::env::temp_dir().join("diffvox-config-tests");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("c.json");
        let text = serde_json::to_string_pretty(&CliConfig::default()).unwrap();
        std::fs::write(&path, text).unwrap();
        assert!(CliConfig::load(&path).is_ok());
    }
}
