//! Artifact bookkeeping for one command invocation: digests of what was
//! read and written, the resolved config, the manifest, and removal of
//! partial outputs when the command fails.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use mmseq::io::write_atomic;
use mmseq::{Error, Result};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use crate::config::RunConfig;

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

pub struct Workspace {
    dir: PathBuf,
    pub cfg: RunConfig,
    command: String,
    inputs: BTreeMap<String, String>,
    outputs: BTreeMap<String, String>,
    /// Extra manifest fields (split sizes, best epoch, ...).
    pub notes: BTreeMap<String, Value>,
}

impl Workspace {
    pub fn run(
        dir: &Path,
        command: &str,
        cfg: RunConfig,
        body: Box<dyn FnOnce(&mut Workspace) -> Result<()> + '_>,
    ) -> Result<()> {
        let mut ws = Workspace {
            dir: dir.to_path_buf(),
            cfg,
            command: command.to_string(),
            inputs: BTreeMap::new(),
            outputs: BTreeMap::new(),
            notes: BTreeMap::new(),
        };
        let start = Instant::now();
        let result = body(&mut ws).and_then(|()| ws.finish(start.elapsed().as_secs_f64()));
        if result.is_err() {
            ws.remove_outputs();
        }
        result
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    pub fn exists(&self, name: &str) -> bool {
        self.path(name).exists()
    }

    pub fn read_bytes(&mut self, name: &str) -> Result<Vec<u8>> {
        let path = self.path(name);
        let bytes = std::fs::read(&path).map_err(|e| {
            Error::Io(std::io::Error::new(e.kind(), format!("{}: {e} (run the stage that produces it first)", path.display())))
        })?;
        self.inputs.insert(name.to_string(), sha256_hex(&bytes));
        Ok(bytes)
    }

    pub fn read(&mut self, name: &str) -> Result<String> {
        let bytes = self.read_bytes(name)?;
        String::from_utf8(bytes).map_err(|_| Error::Validation(format!("{name} is not valid UTF-8")))
    }

    pub fn write(&mut self, name: &str, bytes: &[u8]) -> Result<()> {
        let path = self.path(name);
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent)?;
        }
        // Record first so a failed write is still cleaned up.
        self.outputs.insert(name.to_string(), String::new());
        write_atomic(&path, bytes)?;
        self.outputs.insert(name.to_string(), sha256_hex(bytes));
        log::info!("wrote {}", path.display());
        Ok(())
    }

    fn remove_outputs(&self) {
        for name in self.outputs.keys() {
            let path = self.path(name);
            if path.exists() {
                if let Err(e) = std::fs::remove_file(&path) {
                    log::warn!("could not remove partial output {}: {e}", path.display());
                }
            }
        }
    }

    /// Resolved config and manifest go next to the outputs; wall-clock time
    /// goes to a separate file so manifests stay reproducible.
    fn finish(&mut self, seconds: f64) -> Result<()> {
        let config_name = format!("config_{}.resolved", self.command);
        let resolved = self.cfg.resolved();
        self.write(&config_name, resolved.as_bytes())?;
        let mut id = Sha256::new();
        id.update(self.command.as_bytes());
        id.update(resolved.as_bytes());
        for (k, v) in &self.inputs {
            id.update(k.as_bytes());
            id.update(v.as_bytes());
        }
        let run_id: String = id.finalize().iter().take(8).map(|b| format!("{b:02x}")).collect();
        let manifest = json!({
            "command": self.command,
            "tool_version": env!("CARGO_PKG_VERSION"),
            "run_id": run_id,
            "seed": self.cfg.seed()?,
            "config": config_name,
            "inputs": self.inputs,
            "outputs": self.outputs,
            "notes": self.notes,
        });
        let text = serde_json::to_string_pretty(&manifest).map_err(|e| Error::Validation(e.to_string()))? + "\n";
        self.write(&format!("manifest_{}.json", self.command), text.as_bytes())?;
        let timing = format!("command={}\nseconds={seconds:.3}\n", self.command);
        write_atomic(&self.path(&format!("timing_{}.txt", self.command)), timing.as_bytes())?;
        Ok(())
    }
}
