//! Run configuration: every externally cited constant lives here with its
//! default, and the whole document round-trips through TOML under a
//! `[defaults]` section that command-line flags override.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::guidance::{AugmentationConfig, GuidanceScales, ModeProbs};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("config parse error: {0}")]
    Parse(String),
    #[error("config validation error: {0}")]
    Validation(String),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Model width; also the latent channel count in the toy setup.
    pub d: usize,
    /// Mock text-embedder width (the production encoder runs at 4096).
    pub d_text: usize,
    pub max_text_tokens: usize,
    /// Latent token grid (t', h, w).
    pub latent: (usize, usize, usize),
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d: 16,
            d_text: 32,
            max_text_tokens: 64,
            latent: (1, 2, 2),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConditioningConfig {
    pub modes: ModeProbs,
    pub augment: AugmentationConfig,
}

impl Default for ConditioningConfig {
    fn default() -> Self {
        Self {
            modes: ModeProbs::default(),
            augment: AugmentationConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurriculumSection {
    pub q: usize,
    pub gamma: f64,
    pub beta: f64,
    /// Rebalancing flattening exponent.
    pub alpha: f64,
}

impl Default for CurriculumSection {
    fn default() -> Self {
        Self {
            q: 5,
            gamma: 8.0,
            beta: 0.05,
            alpha: 0.7,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DistillSection {
    pub shift: f64,
    pub boundary: f64,
    pub ema_decay: f64,
}

impl Default for DistillSection {
    fn default() -> Self {
        Self {
            shift: 10.0,
            boundary: 0.9,
            ema_decay: 0.995,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainSection {
    pub steps: usize,
    pub lr: f64,
    pub batch: usize,
    pub log_every: usize,
}

impl Default for TrainSection {
    fn default() -> Self {
        Self {
            steps: 400,
            lr: 1e-2,
            batch: 8,
            log_every: 25,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AlignmentSection {
    pub min_score_threshold: f64,
    pub small_gap: f64,
    pub beta_dpo: f64,
}

impl Default for AlignmentSection {
    fn default() -> Self {
        Self {
            min_score_threshold: 2.0,
            small_gap: 0.5,
            beta_dpo: 1.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Default, Serialize, Deserialize)]
pub struct PathsSection {
    pub out_dir: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub seed: u64,
    pub model: ModelConfig,
    pub conditioning: ConditioningConfig,
    pub guidance: GuidanceScales,
    pub curriculum: CurriculumSection,
    pub distill: DistillSection,
    pub train: TrainSection,
    pub alignment: AlignmentSection,
    pub paths: PathsSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 11,
            model: ModelConfig::default(),
            conditioning: ConditioningConfig::default(),
            guidance: GuidanceScales::default(),
            curriculum: CurriculumSection::default(),
            distill: DistillSection::default(),
            train: TrainSection::default(),
            alignment: AlignmentSection::default(),
            paths: PathsSection::default(),
        }
    }
}

#[derive(Serialize, Deserialize, Default)]
struct ConfigFile {
    #[serde(default)]
    defaults: RunConfig,
}

impl RunConfig {
    pub fn to_toml_string(&self) -> String {
        toml::to_string_pretty(&ConfigFile {
            defaults: self.clone(),
        })
        .expect("config serialization cannot fail")
    }

    pub fn from_toml_str(text: &str) -> Result<Self, ConfigError> {
        let file: ConfigFile =
            toml::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))?;
        file.defaults.validate()?;
        Ok(file.defaults)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let probs = [
            self.conditioning.modes.hybrid,
            self.conditioning.modes.tag_only,
            self.conditioning.modes.text_only,
            self.conditioning.modes.unconditional,
            self.conditioning.augment.p_drop,
            self.conditioning.augment.p_syn,
            self.conditioning.augment.p_conflict,
        ];
        if probs.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(ConfigError::Validation(
                "probabilities must lie in [0, 1]".into(),
            ));
        }
        if !(0.0..=1.0).contains(&self.curriculum.alpha) {
            return Err(ConfigError::Validation("alpha must lie in [0, 1]".into()));
        }
        if !(0.0 < self.distill.boundary && self.distill.boundary < 1.0) {
            return Err(ConfigError::Validation(
                "expert boundary must lie in (0, 1)".into(),
            ));
        }
        if self.distill.shift <= 0.0 {
            return Err(ConfigError::Validation("shift must be positive".into()));
        }
        if self.guidance.text < 0.0 || self.guidance.tag < 0.0 {
            return Err(ConfigError::Validation(
                "guidance scales must be non-negative".into(),
            ));
        }
        if self.curriculum.q < 2 {
            return Err(ConfigError::Validation(
                "curriculum bucket count must be at least 2".into(),
            ));
        }
        Ok(())
    }
}

impl PartialEq for ModeProbs {
    fn eq(&self, other: &Self) -> bool {
        self.hybrid == other.hybrid
            && self.tag_only == other.tag_only
            && self.text_only == other.text_only
            && self.unconditional == other.unconditional
    }
}

impl PartialEq for AugmentationConfig {
    fn eq(&self, other: &Self) -> bool {
        self.p_drop == other.p_drop
            && self.p_syn == other.p_syn
            && self.p_conflict == other.p_conflict
    }
}

impl PartialEq for GuidanceScales {
    fn eq(&self, other: &Self) -> bool {
        self.text == other.text && self.tag == other.tag
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_carry_the_cited_constants() {
        let c = RunConfig::default();
        assert_eq!(c.conditioning.modes.hybrid, 0.7);
        assert_eq!(c.conditioning.modes.tag_only, 0.1);
        assert_eq!(c.conditioning.modes.text_only, 0.1);
        assert_eq!(c.conditioning.modes.unconditional, 0.1);
        assert_eq!(c.conditioning.augment.p_drop, 0.15);
        assert_eq!(c.conditioning.augment.p_syn, 0.1);
        assert_eq!(c.conditioning.augment.p_conflict, 0.05);
        assert_eq!(c.guidance.text, 5.0);
        assert_eq!(c.guidance.tag, 2.0);
        assert_eq!(c.curriculum.alpha, 0.7);
        assert_eq!(c.distill.shift, 10.0);
        assert_eq!(c.distill.boundary, 0.9);
        assert_eq!(c.distill.ema_decay, 0.995);
        assert_eq!(c.alignment.min_score_threshold, 2.0);
        assert_eq!(c.alignment.small_gap, 0.5);
        c.validate().unwrap();
    }

    #[test]
    fn toml_round_trip_is_identity() {
        let c = RunConfig::default();
        let text = c.to_toml_string();
        assert!(text.contains("[defaults]"));
        let back = RunConfig::from_toml_str(&text).unwrap();
        assert_eq!(c, back);
    }

    #[test]
    fn partial_documents_fill_from_defaults() {
        let c = RunConfig::from_toml_str("[defaults]\nseed = 99\n").unwrap();
        assert_eq!(c.seed, 99);
        assert_eq!(c.guidance.text, 5.0);
    }

    #[test]
    fn invalid_values_are_rejected() {
        let text = "[defaults.conditioning.modes]\nhybrid = 1.4\n";
        assert!(RunConfig::from_toml_str(text).is_err());
        let text = "[defaults.distill]\nboundary = 1.0\n";
        assert!(RunConfig::from_toml_str(text).is_err());
    }
}
