use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rpnn_core::{RunConfig, SceneSpec};
use serde::{Deserialize, Serialize};

/// Record written next to every output of a run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    pub subcommand: String,
    /// Arguments after the program name, as given.
    pub argv: Vec<String>,
    pub config: RunConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scene: Option<SceneSpec>,
    pub inputs: BTreeMap<String, PathBuf>,
    pub outputs: BTreeMap<String, PathBuf>,
    pub seed: u64,
    pub elapsed_seconds: f64,
    pub threads: usize,
    pub version: String,
}

impl RunManifest {
    pub fn new(subcommand: &str, argv: &[String], config: &RunConfig) -> Self {
        RunManifest {
            subcommand: subcommand.to_string(),
            argv: argv.to_vec(),
            config: config.clone(),
            scene: None,
            inputs: BTreeMap::new(),
            outputs: BTreeMap::new(),
            seed: config.seed,
            elapsed_seconds: 0.0,
            threads: rayon::current_num_threads(),
            version: env!("CARGO_PKG_VERSION").to_string(),
        }
    }

    pub fn input(&mut self, name: &str, path: &Path) {
        self.inputs.insert(name.to_string(), path.to_path_buf());
    }

    pub fn output(&mut self, name: &str, path: &Path) {
        self.outputs.insert(name.to_string(), path.to_path_buf());
    }

    pub fn write(&self, path: &Path) -> anyhow::Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text + "\n")?;
        Ok(())
    }

    pub fn read(path: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Ok(serde_json::from_str(&text)?)
    }
}

/// `dir/manifest.json` for directory outputs, `<file>.manifest.json` otherwise.
pub fn manifest_path(out: &Path, is_dir: bool) -> PathBuf {
    if is_dir {
        out.join("manifest.json")
    } else {
        let mut name = out.as_os_str().to_owned();
        name.push(".manifest.json");
        PathBuf::from(name)
    }
}
