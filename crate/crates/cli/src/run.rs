//! Run directories: config echo, input content hashes and seeds.

use std::fs;
use std::path::{Path, PathBuf};

use rnsde::config::RunConfig;
use rnsde::numerics::container::{write_tensor, Dtype};
use rnsde::numerics::Tensor;
use rnsde::{Error, Result};
use serde::Serialize;
use sha2::{Digest, Sha256};

#[derive(Serialize)]
struct InputRecord {
    path: String,
    sha256: String,
}

#[derive(Serialize)]
struct Provenance<'a> {
    command: &'a str,
    seeds: &'a [u64],
    /// Hash over the sorted `(path, sha256)` list, in the style of a git tree.
    input_hash: String,
    inputs: Vec<InputRecord>,
    outputs: Vec<String>,
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::MissingDependency(format!("{} not found", path.display())),
        _ => Error::Io(e),
    })?;
    Ok(hex::encode(Sha256::digest(bytes)))
}

pub struct RunDir {
    pub root: PathBuf,
    command: String,
    inputs: Vec<PathBuf>,
    outputs: Vec<String>,
    seeds: Vec<u64>,
}

impl RunDir {
    /// Creates the directory and writes the effective config.
    pub fn create(root: &Path, command: &str, cfg: &RunConfig) -> Result<Self> {
        fs::create_dir_all(root)?;
        fs::write(root.join("config.json"), serde_json::to_string_pretty(cfg)? + "\n")?;
        Ok(Self {
            root: root.to_path_buf(),
            command: command.to_string(),
            inputs: Vec::new(),
            outputs: vec!["config.json".into()],
            seeds: Vec::new(),
        })
    }

    pub fn input(&mut self, path: &Path) {
        self.inputs.push(path.to_path_buf());
    }

    pub fn seeds(&mut self, seeds: &[u64]) {
        self.seeds.extend_from_slice(seeds);
    }

    pub fn path(&mut self, name: &str) -> PathBuf {
        self.outputs.push(name.to_string());
        self.root.join(name)
    }

    pub fn write_json<T: Serialize>(&mut self, name: &str, value: &T) -> Result<()> {
        let p = self.path(name);
        fs::write(p, serde_json::to_string_pretty(value)? + "\n")?;
        Ok(())
    }

    pub fn write_text(&mut self, name: &str, text: &str) -> Result<()> {
        let p = self.path(name);
        fs::write(p, text)?;
        Ok(())
    }

    pub fn write_tensor(&mut self, name: &str, t: &Tensor) -> Result<()> {
        let p = self.path(name);
        write_tensor(&p, t, Dtype::F64)
    }

    pub fn write_png(&mut self, name: &str, t: &Tensor) -> Result<()> {
        let p = self.path(name);
        rnsde::export::write_png(&p, t, 0.0, 1.0)
    }

    /// Writes `provenance.json`.
    pub fn finish(mut self) -> Result<()> {
        let mut records = self
            .inputs
            .iter()
            .map(|p| {
                Ok(InputRecord {
                    path: p.display().to_string(),
                    sha256: sha256_file(p)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        records.sort_by(|a, b| a.path.cmp(&b.path));
        records.dedup_by(|a, b| a.path == b.path);
        let mut h = Sha256::new();
        for r in &records {
            h.update(r.path.as_bytes());
            h.update([0]);
            h.update(r.sha256.as_bytes());
            h.update(b"\n");
        }
        self.outputs.push("provenance.json".into());
        let prov = Provenance {
            command: &self.command,
            seeds: &self.seeds,
            input_hash: hex::encode(h.finalize()),
            inputs: records,
            outputs: self.outputs.clone(),
        };
        fs::write(self.root.join("provenance.json"), serde_json::to_string_pretty(&prov)? + "\n")?;
        Ok(())
    }
}
