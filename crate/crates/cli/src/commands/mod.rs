//! One module per subcommand, plus the helpers they share.

pub mod ablate;
pub mod eval;
pub mod gen_data;
pub mod gradcheck;
pub mod infer;
pub mod train;

use terraseg_core::data::{DatasetManifest, SceneEntry};
use terraseg_core::{Error, Result};

/// Resolves a split name against the manifest.
pub fn split_entries<'a>(manifest: &'a DatasetManifest, split: &str) -> Result<&'a [SceneEntry]> {
    match split {
        "train" => Ok(&manifest.train),
        "val" => Ok(&manifest.val),
        "test" => Ok(&manifest.test),
        other => Err(Error::Config(format!(
            "unknown split {other:?}; expected train, val or test"
        ))),
    }
}

/// Stable artifact names for the i-th scene of a split.
pub fn pred_name(i: usize) -> String {
    format!("pred_{i:04}.pgm")
}

pub fn probs_name(i: usize) -> String {
    format!("probs_{i:04}.tsr")
}

pub fn probs_sidecar_name(i: usize) -> String {
    format!("probs_{i:04}.json")
}
