use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use icm_core::synthgen::{GeneratorConfig, Mode};
use icm_core::trainer::{Ablation, GradcheckConfig, ModelConfig, TrainConfig, BASE_LR};
use serde::{Deserialize, Serialize};

/// File name of the resolved configuration written into every output directory.
pub const RESOLVED_CONFIG: &str = "run_config.toml";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblateConfig {
    /// Number of training seeds, counted up from `train.seed`.
    pub seeds: u64,
}

impl Default for AblateConfig {
    fn default() -> Self {
        Self { seeds: 5 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Root under which commands place their default output directories.
    pub out_root: PathBuf,
    /// Dataset used by `train` and `ablate` when `--data` is not given.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub data_dir: Option<PathBuf>,
    /// Unscaled attention and the unmultiplied base learning rate.
    pub literal_paper: bool,
    pub generator: GeneratorConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub ablate: AblateConfig,
    pub gradcheck: GradcheckConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            out_root: PathBuf::from("icm-out"),
            data_dir: None,
            literal_paper: false,
            generator: GeneratorConfig::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            ablate: AblateConfig::default(),
            gradcheck: GradcheckConfig::default(),
        }
    }
}

/// Values that override the file, already merged from environment and flags.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub mode: Option<Mode>,
    pub ablation: Option<Ablation>,
    pub out_root: Option<PathBuf>,
    pub literal_paper: bool,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        Ok(toml::from_str(text)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        Self::from_toml(&text).with_context(|| format!("parsing config {}", path.display()))
    }

    pub fn to_toml(&self) -> Result<String> {
        Ok(toml::to_string(self)?)
    }

    /// Applies overrides. The seed goes to the generator and to training
    /// alike; each command only uses the one it needs.
    pub fn resolve(mut self, o: &Overrides) -> Result<Self> {
        if let Some(seed) = o.seed {
            self.generator.seed = seed;
            self.train.seed = seed;
        }
        if let Some(mode) = o.mode {
            self.generator.mode = mode;
        }
        if let Some(a) = o.ablation {
            self.train.ablation = a;
        }
        if let Some(root) = &o.out_root {
            self.out_root = root.clone();
        }
        self.literal_paper |= o.literal_paper;
        if self.literal_paper {
            self.model.attention_scaled = false;
            self.train.lr = BASE_LR;
        }
        self.generator.validate()?;
        self.train.validate()?;
        if self.ablate.seeds == 0 {
            bail!("ablate.seeds must be >= 1");
        }
        Ok(self)
    }

    pub fn write_into(&self, dir: &Path) -> Result<()> {
        icm_core::fsutil::write_atomic(&dir.join(RESOLVED_CONFIG), self.to_toml()?.as_bytes())?;
        Ok(())
    }

    pub fn default_data_dir(&self) -> PathBuf {
        self.out_root
            .join(format!("data-{}-s{}", self.generator.mode.name(), self.generator.seed))
    }

    pub fn data_dir(&self) -> PathBuf {
        self.data_dir.clone().unwrap_or_else(|| self.default_data_dir())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_toml() {
        let c = RunConfig::default();
        assert_eq!(RunConfig::from_toml(&c.to_toml().unwrap()).unwrap(), c);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(RunConfig::from_toml("sed = 3").is_err());
        assert!(RunConfig::from_toml("[train]\nlearning_rate = 0.1").is_err());
        assert!(RunConfig::from_toml("[generator]\nnum_videos = 12").is_ok());
    }

    #[test]
    fn overrides_win_over_file_values() {
        let c = RunConfig::from_toml("[train]\nseed = 4\nablation = \"no_iec\"\n[generator]\nmode = \"explicit\"").unwrap();
        let r = c
            .resolve(&Overrides {
                seed: Some(9),
                ablation: Some(Ablation::NoSbm),
                ..Overrides::default()
            })
            .unwrap();
        assert_eq!((r.train.seed, r.generator.seed), (9, 9));
        assert_eq!(r.train.ablation, Ablation::NoSbm);
        assert_eq!(r.generator.mode, Mode::Explicit);
    }

    #[test]
    fn literal_paper_turns_off_desk_scale_changes() {
        let r = RunConfig::default()
            .resolve(&Overrides {
                literal_paper: true,
                ..Overrides::default()
            })
            .unwrap();
        assert!(!r.model.attention_scaled);
        assert_eq!(r.train.lr, 2e-5);
    }

    #[test]
    fn invalid_values_fail_resolution() {
        let c = RunConfig::from_toml("[generator]\nnoise_sigma = -1.0").unwrap();
        assert!(c.resolve(&Overrides::default()).is_err());
    }
}
