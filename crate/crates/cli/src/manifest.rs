//! `run.json`: what was run, with which resolved config, on which inputs, and
//! what came out.

use std::collections::BTreeMap;
use std::path::Path;

use objectness::datasetio::write_atomic;
use objectness::{Error, Result};
use serde::Serialize;
use sha2::{Digest, Sha256};
use walkdir::WalkDir;

pub const RUN_MANIFEST: &str = "run.json";

#[derive(Serialize)]
pub struct RunManifest {
    pub tool: &'static str,
    pub version: &'static str,
    pub command: String,
    pub args: Vec<String>,
    pub seed: Option<u64>,
    pub config: serde_json::Value,
    /// sha256 of every input file.
    pub inputs: BTreeMap<String, String>,
    /// sha256 of every file written under the output directory.
    pub outputs: BTreeMap<String, String>,
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::MissingArtifact { path: path.into() },
        _ => Error::Io { path: path.into(), source: e },
    })?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

/// Hashes a file, or `scene.json`/`manifest.json` inside a directory.
pub fn input_hash(path: &Path) -> Result<String> {
    if path.is_dir() {
        for name in ["manifest.json", "scene.json"] {
            let p = path.join(name);
            if p.exists() {
                return sha256_file(&p);
            }
        }
        let mut h = Sha256::new();
        for e in sorted_files(path) {
            h.update(sha256_file(&e)?.as_bytes());
        }
        return Ok(hex::encode(h.finalize()));
    }
    sha256_file(path)
}

fn sorted_files(dir: &Path) -> Vec<std::path::PathBuf> {
    WalkDir::new(dir)
        .sort_by_file_name()
        .into_iter()
        .filter_map(|e| e.ok())
        .filter(|e| e.file_type().is_file())
        .map(|e| e.into_path())
        .collect()
}

impl RunManifest {
    pub fn new(command: &str, seed: Option<u64>, config: serde_json::Value) -> Self {
        RunManifest {
            tool: "objectness",
            version: env!("CARGO_PKG_VERSION"),
            command: command.into(),
            args: std::env::args().skip(1).collect(),
            seed,
            config,
            inputs: BTreeMap::new(),
            outputs: BTreeMap::new(),
        }
    }

    pub fn input(&mut self, label: &str, path: &Path) -> Result<()> {
        self.inputs.insert(format!("{label}:{}", path.display()), input_hash(path)?);
        Ok(())
    }

    /// Records output hashes and writes `run.json` into `out`.
    pub fn finish(mut self, out: &Path) -> Result<()> {
        for f in sorted_files(out) {
            let rel = f.strip_prefix(out).expect("walk stays under root");
            if rel == Path::new(RUN_MANIFEST) {
                continue;
            }
            self.outputs.insert(rel.to_string_lossy().replace('\\', "/"), sha256_file(&f)?);
        }
        let json = serde_json::to_string_pretty(&self).expect("manifest serializes");
        write_atomic(&out.join(RUN_MANIFEST), json.as_bytes())
    }
}
