//! The single JSON document that drives every stage.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{FsacError, Result};
use crate::synth::WorldConfig;
use crate::trainer::{ClusterConfig, TrainConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalOptions {
    /// Share of each identity's appearances held out for query and gallery.
    pub gallery_ratio: f64,
    /// Evaluate after every epoch rather than only at the end.
    pub per_epoch: bool,
    /// Seeds used by multi-seed experiments, counted up from the base seed.
    pub n_seeds: usize,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            gallery_ratio: 1.0 / 3.0,
            per_epoch: false,
            n_seeds: 5,
        }
    }
}

impl EvalOptions {
    pub fn validate(&self) -> Result<()> {
        if !(self.gallery_ratio > 0.0 && self.gallery_ratio < 1.0) {
            return Err(FsacError::invalid("gallery_ratio", "must lie strictly between 0 and 1"));
        }
        if self.n_seeds == 0 {
            return Err(FsacError::invalid("n_seeds", "must be >= 1"));
        }
        Ok(())
    }
}

/// Per-stage sections plus one seed. [`PipelineConfig::seeded`] pushes the
/// seed into every stage, so a run depends on nothing else.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub world: Option<WorldConfig>,
    pub cluster: ClusterConfig,
    pub train: TrainConfig,
    pub eval: EvalOptions,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<PathBuf>,
    pub seed: u64,
}

impl PipelineConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| FsacError::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn validate(&self) -> Result<()> {
        if let Some(w) = &self.world {
            w.validate()?;
        }
        self.cluster.validate()?;
        self.train.validate()?;
        self.eval.validate()
    }

    pub fn world_or_default(&self) -> WorldConfig {
        self.world.clone().unwrap_or_default()
    }

    /// Copy with `seed` applied to the world generator and the trainer.
    pub fn seeded(&self, seed: u64) -> Self {
        let mut cfg = self.clone();
        cfg.seed = seed;
        cfg.train.seed = seed;
        if let Some(w) = cfg.world.as_mut() {
            w.seed = seed;
        }
        cfg
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn negative_eta_names_the_field() {
        let cfg: PipelineConfig = serde_json::from_str(r#"{"train": {"st_params": {"sigma": 100, "eta": -1}}}"#).unwrap();
        let err = cfg.validate().unwrap_err();
        assert!(err.to_string().contains("eta"), "{err}");
        assert!(err.is_validation());
    }

    #[test]
    fn unknown_fields_are_rejected() {
        assert!(serde_json::from_str::<PipelineConfig>(r#"{"trian": {}}"#).is_err());
    }

    #[test]
    fn seed_reaches_every_stage() {
        let cfg = PipelineConfig {
            world: Some(WorldConfig::default()),
            ..Default::default()
        }
        .seeded(9);
        assert_eq!((cfg.seed, cfg.train.seed, cfg.world.unwrap().seed), (9, 9, 9));
    }

    #[test]
    fn defaults_round_trip() {
        let cfg = PipelineConfig::default();
        let text = serde_json::to_string(&cfg).unwrap();
        assert_eq!(serde_json::from_str::<PipelineConfig>(&text).unwrap(), cfg);
        cfg.validate().unwrap();
    }
}
