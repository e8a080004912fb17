use std::path::{Path, PathBuf};

use anyhow::Context;
use serde::Serialize;

/// Written next to every output so a run can be repeated exactly.
#[derive(Debug, Serialize)]
pub struct RunManifest<C: Serialize> {
    pub command: &'static str,
    pub version: &'static str,
    pub seed: Option<u64>,
    /// Every option after defaults were filled in.
    pub config: C,
    pub inputs: Vec<PathBuf>,
    /// Stored relative to the output directory, so identical runs into
    /// different directories write identical manifests.
    pub outputs: Vec<PathBuf>,
}

impl<C: Serialize> RunManifest<C> {
    pub fn new(command: &'static str, config: C) -> Self {
        Self {
            command,
            version: env!("CARGO_PKG_VERSION"),
            seed: None,
            config,
            inputs: Vec::new(),
            outputs: Vec::new(),
        }
    }

    pub fn write(&mut self, dir: &Path) -> anyhow::Result<()> {
        for p in &mut self.outputs {
            if let Ok(rel) = p.strip_prefix(dir) {
                *p = rel.to_path_buf();
            }
        }
        let path = dir.join("manifest.json");
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(&path, text + "\n").with_context(|| format!("writing {}", path.display()))
    }
}
