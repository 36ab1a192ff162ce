use std::fs::File;
use std::io::{self, Read};
use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

/// Provenance record embedded in every output.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub version: String,
    pub seed: u64,
    pub config: serde_json::Value,
    pub inputs: Vec<InputDigest>,
    /// Not part of the reproducible content.
    pub runtime: Runtime,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct InputDigest {
    pub path: String,
    pub sha256: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Runtime {
    pub wall_clock_seconds: f64,
    pub threads: usize,
}

pub struct ManifestBuilder {
    command: String,
    seed: u64,
    config: serde_json::Value,
    inputs: Vec<InputDigest>,
    started: Instant,
}

impl ManifestBuilder {
    pub fn new(command: &str, seed: u64, config: impl Serialize) -> Self {
        ManifestBuilder {
            command: command.to_string(),
            seed,
            config: serde_json::to_value(config).expect("config serializes"),
            inputs: Vec::new(),
            started: Instant::now(),
        }
    }

    /// Records the digest of a file, or of every file directly inside a
    /// directory in name order.
    pub fn input(&mut self, path: &Path) -> io::Result<()> {
        if path.is_dir() {
            let mut entries: Vec<_> = std::fs::read_dir(path)?
                .map(|e| e.map(|e| e.path()))
                .collect::<io::Result<_>>()?;
            entries.sort();
            for p in entries.into_iter().filter(|p| p.is_file()) {
                self.push_file(&p)?;
            }
            Ok(())
        } else {
            self.push_file(path)
        }
    }

    fn push_file(&mut self, path: &Path) -> io::Result<()> {
        let mut hasher = Sha256::new();
        let mut file = File::open(path)?;
        let mut buf = [0u8; 1 << 16];
        loop {
            let n = file.read(&mut buf)?;
            if n == 0 {
                break;
            }
            hasher.update(&buf[..n]);
        }
        self.inputs.push(InputDigest {
            path: path.display().to_string(),
            sha256: hex::encode(hasher.finalize()),
        });
        Ok(())
    }

    pub fn finish(self) -> RunManifest {
        RunManifest {
            command: self.command,
            version: env!("CARGO_PKG_VERSION").to_string(),
            seed: self.seed,
            config: self.config,
            inputs: self.inputs,
            runtime: Runtime {
                wall_clock_seconds: self.started.elapsed().as_secs_f64(),
                threads: rayon::current_num_threads(),
            },
        }
    }
}
