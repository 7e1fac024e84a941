//! Deterministic run log: every line is printed as it happens and the
//! whole transcript is written into the run directory at the end.
//! Nothing time- or host-dependent ever enters the log, so reruns with
//! the same configuration produce byte-identical files.

use std::path::Path;

use terraseg_core::{Error, Result};

#[derive(Debug, Default)]
pub struct RunLog {
    lines: Vec<String>,
}

impl RunLog {
    pub fn new() -> Self {
        RunLog { lines: Vec::new() }
    }

    /// Records one line and echoes it to stdout.
    pub fn line(&mut self, text: impl Into<String>) {
        let text = text.into();
        println!("{text}");
        self.lines.push(text);
    }

    /// Writes the transcript to `path`.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut text = self.lines.join("\n");
        text.push('\n');
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }
}
