//! Run manifests. A manifest is the effective config plus a [meta] section
//! naming the command and a [artifacts] section hashing every produced
//! file, so a run can be audited and replayed. No timestamps: rerunning a
//! command from its manifest writes a byte-identical manifest.

use std::fs;
use std::path::Path;

use advms::{Error, Result};
use sha2::{Digest, Sha256};

use crate::config::RunConfig;

pub struct Manifest {
    pub command: String,
    /// Extra invocation arguments, e.g. the pool path for attack/eval.
    pub meta: Vec<(String, String)>,
    pub config: RunConfig,
    /// Output-relative artifact path and content hash, sorted by path.
    pub artifacts: Vec<(String, String)>,
}

impl Manifest {
    pub fn new(command: &str, config: &RunConfig) -> Manifest {
        Manifest {
            command: command.to_string(),
            meta: Vec::new(),
            config: config.clone(),
            artifacts: Vec::new(),
        }
    }

    pub fn with_meta(mut self, key: &str, value: &str) -> Manifest {
        self.meta.push((key.to_string(), value.to_string()));
        self
    }

    /// Records `name` with the hash of the file at `dir/name`. CSV reports
    /// are hashed with their wall-time column masked, since elapsed time is
    /// the one value a faithful rerun cannot reproduce.
    pub fn add_artifact(&mut self, dir: &Path, name: &str) -> Result<()> {
        let bytes = fs::read(dir.join(name))?;
        let hash = if name.ends_with(".csv") {
            hash_masked_csv(&bytes)?
        } else {
            hex(&Sha256::digest(&bytes))
        };
        self.artifacts.push((name.to_string(), hash));
        self.artifacts.sort();
        Ok(())
    }

    pub fn emit(&self) -> String {
        let mut s = format!("[meta]\ncommand = {}\n", self.command);
        for (k, v) in &self.meta {
            s.push_str(&format!("{k} = {v}\n"));
        }
        s.push('\n');
        s.push_str(&self.config.emit());
        s.push_str("\n[artifacts]\n");
        for (name, hash) in &self.artifacts {
            s.push_str(&format!("{name} = {hash}\n"));
        }
        s
    }

    /// Writes `<command>.manifest` under `dir` and returns its path.
    pub fn write(&self, dir: &Path) -> Result<std::path::PathBuf> {
        let path = dir.join(format!("{}.manifest", self.command));
        fs::write(&path, self.emit())?;
        Ok(path)
    }
}

/// Hash of a report CSV with the trailing wall-time field of every data row
/// replaced by "-". Malformed rows are an error, not silently hashed.
fn hash_masked_csv(bytes: &[u8]) -> Result<String> {
    let text = std::str::from_utf8(bytes)
        .map_err(|_| Error::Format("report CSV is not UTF-8".into()))?;
    let mut hasher = Sha256::new();
    for (i, line) in text.lines().enumerate() {
        if i == 0 || line.is_empty() {
            hasher.update(line.as_bytes());
        } else {
            let (head, _) = line
                .rsplit_once(',')
                .ok_or_else(|| Error::Format(format!("report CSV row {i} has no fields")))?;
            hasher.update(head.as_bytes());
            hasher.update(b",-");
        }
        hasher.update(b"\n");
    }
    Ok(hex(&hasher.finalize()))
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}
