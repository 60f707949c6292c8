//! Run manifests: what was run, with which settings and inputs.

use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use birads_core::fsio::write_atomic;
use birads_core::{ConfigMap, Error, Result};
use sha2::{Digest, Sha256};

pub const FILE_NAME: &str = "run_manifest.txt";

/// Seconds since the Unix epoch, or `SOURCE_DATE_EPOCH` when it is set.
pub fn timestamp() -> u64 {
    if let Some(t) = std::env::var("SOURCE_DATE_EPOCH").ok().and_then(|v| v.trim().parse().ok()) {
        return t;
    }
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs())
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// SHA-256 of `blob <len>\0<content>`, the object hash git uses.
pub fn blob_hash(content: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(format!("blob {}\0", content.len()).as_bytes());
    h.update(content);
    hex(&h.finalize())
}

/// Hash over `(label, blob hash)` pairs, independent of their order.
pub fn tree_hash(entries: &[(String, String)]) -> String {
    let mut sorted = entries.to_vec();
    sorted.sort();
    let mut h = Sha256::new();
    for (label, hash) in &sorted {
        h.update(format!("{hash} {label}\n").as_bytes());
    }
    hex(&h.finalize())
}

#[derive(Clone, Debug)]
pub struct RunManifest {
    pub command: String,
    pub config: ConfigMap,
    pub seed: Option<u64>,
    inputs: Vec<(String, String)>,
    pub outputs: Vec<PathBuf>,
    pub started: u64,
    pub finished: Option<u64>,
}

impl RunManifest {
    pub fn new(command: &str, config: ConfigMap, seed: Option<u64>) -> Self {
        RunManifest {
            command: command.to_string(),
            config,
            seed,
            inputs: Vec::new(),
            outputs: Vec::new(),
            started: timestamp(),
            finished: None,
        }
    }

    /// Records an input file under `label`.
    pub fn add_input(&mut self, label: &str, path: &Path) -> Result<()> {
        let bytes = std::fs::read(path).map_err(|e| Error::Io {
            path: path.to_path_buf(),
            source: e,
        })?;
        self.inputs.push((label.to_string(), blob_hash(&bytes)));
        Ok(())
    }

    pub fn input_hash(&self) -> String {
        tree_hash(&self.inputs)
    }

    pub fn to_text(&self) -> String {
        let mut out = format!("command={}\n", self.command);
        out.push_str(&format!(
            "seed={}\n",
            self.seed.map_or("none".to_string(), |s| s.to_string())
        ));
        out.push_str(&format!("input_hash={}\n", self.input_hash()));
        out.push_str(&format!("input_files={}\n", self.inputs.len()));
        out.push_str(&format!("started={}\n", self.started));
        match self.finished {
            Some(t) => out.push_str(&format!("finished={t}\nstatus=complete\n")),
            None => out.push_str("status=running\n"),
        }
        for o in &self.outputs {
            out.push_str(&format!("output={}\n", o.display()));
        }
        out.push_str("[config]\n");
        out.push_str(&self.config.to_text());
        out
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        write_atomic(&dir.join(FILE_NAME), self.to_text())
    }

    pub fn finish(&mut self, dir: &Path) -> Result<()> {
        self.finished = Some(timestamp());
        self.write(dir)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn blob_hash_matches_git_object_format() {
        // sha256 of "blob 0\0"
        assert_eq!(
            blob_hash(b""),
            "473a0f4c3be8a93681a267e3b1e9a7dcda1185436fe141f7749120a303721813"
        );
    }

    #[test]
    fn tree_hash_ignores_order() {
        let a = vec![("x".to_string(), blob_hash(b"1")), ("y".to_string(), blob_hash(b"2"))];
        let b = vec![a[1].clone(), a[0].clone()];
        assert_eq!(tree_hash(&a), tree_hash(&b));
        assert_ne!(tree_hash(&a), tree_hash(&a[..1]));
    }
}
