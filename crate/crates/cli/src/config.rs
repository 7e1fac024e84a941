//! The run configuration: one JSON document with a section per module,
//! shipped in two named profiles.
//!
//! `desk` is the tested default — a small model and 128x128 scenes that
//! train on one CPU core in minutes. `paper` is the full-size
//! configuration (stride-8 VGG-style encoder, dilation rates 24/18/12/6,
//! 400-pixel patches); it is shipped for documentation and far exceeds a
//! desk-scale compute budget.
//!
//! A user config file overrides the chosen profile key by key: objects
//! merge recursively, scalars and arrays replace. Unknown keys anywhere
//! are rejected before any compute. The effective configuration is
//! echoed into every run directory as `config.json`.

use std::path::Path;

use serde::{Deserialize, Serialize};

use terraseg_core::data::SceneSpec;
use terraseg_core::infer::InferConfig;
use terraseg_core::model::ModelConfig;
use terraseg_core::train::TrainConfig;
use terraseg_core::{Error, Result};

/// Scene recipe, split sizes, and the patch grid for training.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataSection {
    pub scene: SceneSpec,
    pub train_scenes: usize,
    pub val_scenes: usize,
    pub test_scenes: usize,
    /// Square crop size for training patches.
    pub patch: usize,
    /// Overlap between neighboring crops.
    pub overlap: usize,
}

impl Default for DataSection {
    fn default() -> Self {
        DataSection {
            scene: SceneSpec::desk(),
            train_scenes: 64,
            val_scenes: 16,
            test_scenes: 16,
            patch: 64,
            overlap: 16,
        }
    }
}

/// Scoring protocol: boundary erosion radius and PR-curve resolution.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    /// Ground-truth pixels within this distance of a class boundary are
    /// ignored when scoring; 0 disables erosion.
    pub erosion_radius: usize,
    /// Number of uniform threshold steps for precision/recall curves.
    pub pr_thresholds: usize,
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection { erosion_radius: 3, pr_thresholds: 20 }
    }
}

/// Budget overrides for the six-variant comparison ladder: each ladder
/// row trains with these in place of the main train section's values,
/// keeping the comparative run affordable.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblateSection {
    /// Epochs per ladder row (defaults to the train section's count).
    pub epochs: Option<usize>,
    /// Patch budget per epoch per ladder row.
    pub patches_per_epoch: Option<usize>,
}

/// The whole run configuration. The top-level `seed` drives every
/// random decision of a run (initialization, shuffling, dropout, scene
/// synthesis); the train section's seed is overwritten with it at load.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    /// Checkpoint interval in epochs; the final checkpoint is always
    /// written.
    pub save_every: usize,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub infer: InferConfig,
    pub data: DataSection,
    pub eval: EvalSection,
    pub ablate: AblateSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig::desk()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum Profile {
    Desk,
    Paper,
}

impl RunConfig {
    /// Desk-scale profile: the tested default.
    pub fn desk() -> Self {
        RunConfig {
            seed: 0,
            save_every: 100,
            model: ModelConfig::desk(),
            train: TrainConfig {
                lr0: 0.005,
                lr_drop_factor: 0.2,
                lr_drop_every: 8,
                momentum: 0.9,
                weight_decay: 5e-4,
                batch_size: 4,
                epochs: 12,
                patches_per_epoch: Some(256),
                seed: 0,
                stop_at_accuracy: None,
                accuracy_check_every: 10,
            },
            infer: InferConfig { scales: vec![0.5, 1.0, 1.5], patch: 64 },
            data: DataSection::default(),
            eval: EvalSection::default(),
            ablate: AblateSection { epochs: Some(8), patches_per_epoch: Some(128) },
        }
    }

    /// Full-size profile, kept for documentation. The model is the
    /// published architecture with the class count pinned to the five
    /// classes the scene generator can produce.
    pub fn paper() -> Self {
        RunConfig {
            seed: 0,
            save_every: 20,
            model: ModelConfig { classes: 5, ..ModelConfig::paper() },
            train: TrainConfig::default(),
            infer: InferConfig { scales: vec![0.5, 1.0, 1.5], patch: 400 },
            data: DataSection {
                scene: SceneSpec {
                    height: 2000,
                    width: 2000,
                    buildings: (40, 80),
                    roads: (8, 16),
                    cars: (60, 120),
                    vegetation: (30, 60),
                    noise: 0.02,
                    seed: 0,
                },
                train_scenes: 16,
                val_scenes: 4,
                test_scenes: 16,
                patch: 400,
                overlap: 100,
            },
            eval: EvalSection::default(),
            ablate: AblateSection::default(),
        }
    }

    pub fn for_profile(profile: Profile) -> Self {
        match profile {
            Profile::Desk => RunConfig::desk(),
            Profile::Paper => RunConfig::paper(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.save_every == 0 {
            return Err(Error::Config("save_every must be at least 1".into()));
        }
        self.model.validate()?;
        self.train.validate()?;
        self.data.scene.validate()?;
        if self.data.patch == 0 {
            return Err(Error::Config("data.patch must be at least 1".into()));
        }
        if self.data.overlap >= self.data.patch {
            return Err(Error::Config(format!(
                "data.overlap {} must be smaller than data.patch {}",
                self.data.overlap, self.data.patch
            )));
        }
        if self.eval.pr_thresholds == 0 || self.eval.pr_thresholds > 1000 {
            return Err(Error::Config(format!(
                "eval.pr_thresholds must be in 1..=1000, got {}",
                self.eval.pr_thresholds
            )));
        }
        if self.ablate.epochs == Some(0) {
            return Err(Error::Config("ablate.epochs must be at least 1 when set".into()));
        }
        if self.ablate.patches_per_epoch == Some(0) {
            return Err(Error::Config(
                "ablate.patches_per_epoch must be at least 1 when set".into(),
            ));
        }
        Ok(())
    }
}

/// Recursively merges `over` onto `base`: objects merge key by key,
/// everything else replaces. Keys unknown to the schema survive the
/// merge and are rejected by the typed parse that follows.
fn merge_json(base: &mut serde_json::Value, over: &serde_json::Value) {
    match (base, over) {
        (serde_json::Value::Object(b), serde_json::Value::Object(o)) => {
            for (key, value) in o {
                match b.get_mut(key) {
                    Some(slot) => merge_json(slot, value),
                    None => {
                        b.insert(key.clone(), value.clone());
                    }
                }
            }
        }
        (slot, value) => *slot = value.clone(),
    }
}

/// Builds the effective configuration: profile defaults, then the
/// optional config file merged on top, then the optional seed override.
pub fn load(
    profile: Profile,
    config_path: Option<&Path>,
    seed_override: Option<u64>,
) -> Result<RunConfig> {
    let base = RunConfig::for_profile(profile);
    let mut cfg = match config_path {
        None => base,
        Some(path) => {
            let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            let user: serde_json::Value = serde_json::from_str(&text)
                .map_err(|e| Error::Config(format!("config {}: {e}", path.display())))?;
            let mut merged = serde_json::to_value(&base)?;
            merge_json(&mut merged, &user);
            serde_json::from_value(merged)
                .map_err(|e| Error::Config(format!("config {}: {e}", path.display())))?
        }
    };
    if let Some(seed) = seed_override {
        cfg.seed = seed;
    }
    cfg.train.seed = cfg.seed;
    cfg.validate()?;
    Ok(cfg)
}

/// Creates the run directory and echoes the effective configuration
/// into it for provenance.
pub fn prepare_out(out: &Path, cfg: &RunConfig) -> Result<()> {
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let path = out.join("config.json");
    let json = serde_json::to_string_pretty(cfg)?;
    std::fs::write(&path, json).map_err(|e| Error::io(&path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    #[test]
    fn profiles_validate() {
        RunConfig::desk().validate().expect("desk profile is valid");
        RunConfig::paper().validate().expect("paper profile is valid");
    }

    #[test]
    fn config_file_overrides_merge_key_by_key() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.json");
        let mut f = std::fs::File::create(&path).unwrap();
        write!(f, r#"{{"train": {{"epochs": 3}}, "data": {{"train_scenes": 2}}}}"#).unwrap();

        let cfg = load(Profile::Desk, Some(&path), None).unwrap();
        assert_eq!(cfg.train.epochs, 3);
        assert_eq!(cfg.data.train_scenes, 2);
        // Untouched keys keep the profile's values.
        assert_eq!(cfg.train.batch_size, RunConfig::desk().train.batch_size);
        assert_eq!(cfg.data.patch, 64);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.json");
        std::fs::write(&path, r#"{"train": {"epochz": 3}}"#).unwrap();
        let err = load(Profile::Desk, Some(&path), None).unwrap_err();
        assert!(matches!(err, Error::Config(_)), "typo must be a config error, got {err:?}");
    }

    #[test]
    fn seed_propagates_into_training() {
        let cfg = load(Profile::Desk, None, Some(99)).unwrap();
        assert_eq!(cfg.seed, 99);
        assert_eq!(cfg.train.seed, 99);
    }

    #[test]
    fn paper_profile_matches_generator_classes() {
        let cfg = RunConfig::paper();
        assert_eq!(cfg.model.classes, cfg.data.scene.classes());
    }
}
