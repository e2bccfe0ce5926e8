//! Reproduction manifests. A manifest names the command, the resolved
//! configuration and the digest of every input and output file; re-running it
//! with the same binary must reproduce every output digest.

use std::fs::File;
use std::io::Read;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::ExperimentConfig;
use crate::error::{HarnessError, Result};

pub const MANIFEST_FILE: &str = "manifest.json";

/// Inclusive `lo:hi:step` grid of correlation coefficients.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RhoSweep {
    pub lo: f64,
    pub hi: f64,
    pub step: f64,
}

impl RhoSweep {
    pub fn parse(text: &str) -> Result<Self> {
        let parts: Vec<&str> = text.split(':').collect();
        let bad = || HarnessError::Config(format!("rho sweep `{text}` is not lo:hi:step"));
        let [lo, hi, step] = parts.as_slice() else {
            return Err(bad());
        };
        let num = |s: &str| s.trim().parse::<f64>().map_err(|_| bad());
        let sweep = Self {
            lo: num(lo)?,
            hi: num(hi)?,
            step: num(step)?,
        };
        let in_range = |r: f64| (0.0..=1.0).contains(&r);
        if !(in_range(sweep.lo) && in_range(sweep.hi) && sweep.lo <= sweep.hi && sweep.step > 0.0) {
            return Err(HarnessError::Config(format!(
                "rho sweep `{text}` needs 0 <= lo <= hi <= 1 and step > 0"
            )));
        }
        Ok(sweep)
    }

    /// Grid values; the upper end is included when it falls on the grid.
    pub fn values(&self) -> Vec<f64> {
        let n = ((self.hi - self.lo) / self.step + 1e-9).floor() as usize;
        (0..=n).map(|i| (self.lo + i as f64 * self.step).min(self.hi)).collect()
    }
}

/// What a command was asked to do, apart from the configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "command", rename_all = "kebab-case")]
pub enum Task {
    Simulate,
    Train {
        data: Vec<PathBuf>,
        resume: Option<PathBuf>,
    },
    Fuse {
        data: Option<PathBuf>,
    },
    Compare {
        rho_sweep: Option<RhoSweep>,
    },
    Ingest {
        imu: PathBuf,
        dvl: PathBuf,
        truth: Option<PathBuf>,
        metadata: Option<PathBuf>,
    },
}

impl Task {
    pub fn name(&self) -> &'static str {
        match self {
            Task::Simulate => "simulate",
            Task::Train { .. } => "train",
            Task::Fuse { .. } => "fuse",
            Task::Compare { .. } => "compare",
            Task::Ingest { .. } => "ingest",
        }
    }

    /// Files read by the task itself, besides those named in the config.
    /// Dataset directories contribute their canonical files.
    pub fn input_files(&self) -> Vec<PathBuf> {
        let dataset = |d: &Path| {
            [crate::io::IMU_FILE, crate::io::DVL_FILE, crate::io::TRUTH_FILE]
                .into_iter()
                .map(|f| d.join(f))
                .filter(|p| p.exists())
                .collect::<Vec<_>>()
        };
        match self {
            Task::Simulate | Task::Compare { .. } => Vec::new(),
            Task::Train { data, resume } => data
                .iter()
                .flat_map(|d| dataset(d))
                .chain(resume.iter().cloned())
                .collect(),
            Task::Fuse { data } => data.iter().flat_map(|d| dataset(d)).collect(),
            Task::Ingest {
                imu,
                dvl,
                truth,
                metadata,
            } => [Some(imu.clone()), Some(dvl.clone()), truth.clone(), metadata.clone()]
                .into_iter()
                .flatten()
                .collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileDigest {
    pub path: PathBuf,
    pub sha256: String,
}

impl FileDigest {
    pub fn of(path: &Path) -> Result<Self> {
        Ok(Self {
            path: path.to_path_buf(),
            sha256: sha256_file(path)?,
        })
    }
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let mut file = File::open(path).map_err(|e| HarnessError::io(path, e))?;
    let mut hasher = Sha256::new();
    let mut buf = [0u8; 1 << 16];
    loop {
        let n = file.read(&mut buf).map_err(|e| HarnessError::io(path, e))?;
        if n == 0 {
            break;
        }
        hasher.update(&buf[..n]);
    }
    Ok(hasher.finalize().iter().map(|b| format!("{b:02x}")).collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub tool: String,
    pub version: String,
    pub task: Task,
    pub config: ExperimentConfig,
    pub inputs: Vec<FileDigest>,
    /// Paths relative to the output directory.
    pub outputs: Vec<FileDigest>,
}

impl Manifest {
    pub fn new(task: Task, config: ExperimentConfig) -> Result<Self> {
        let mut inputs: Vec<FileDigest> = task
            .input_files()
            .iter()
            .map(|p| FileDigest::of(p))
            .collect::<Result<_>>()?;
        if let Some(p) = config.beamsnet_params_path() {
            inputs.push(FileDigest::of(&p)?);
        }
        Ok(Self {
            tool: env!("CARGO_PKG_NAME").to_string(),
            version: env!("CARGO_PKG_VERSION").to_string(),
            task,
            config,
            inputs,
            outputs: Vec::new(),
        })
    }

    /// Records the digests of `names` inside `out` and writes the manifest.
    pub fn finish(mut self, out: &Path, names: &[String]) -> Result<Self> {
        self.outputs = names
            .iter()
            .map(|n| {
                Ok(FileDigest {
                    path: PathBuf::from(n),
                    sha256: sha256_file(&out.join(n))?,
                })
            })
            .collect::<Result<_>>()?;
        let path = out.join(MANIFEST_FILE);
        let text = serde_json::to_string_pretty(&self).expect("manifest serializes");
        std::fs::write(&path, text + "\n").map_err(|e| HarnessError::io(&path, e))?;
        Ok(self)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| HarnessError::io(path, e))?;
        let manifest: Self =
            serde_json::from_str(&text).map_err(|e| HarnessError::Config(format!("{}: {e}", path.display())))?;
        manifest.config.validate()?;
        Ok(manifest)
    }

    /// Fails when an input file has changed since the manifest was written.
    pub fn check_inputs(&self) -> Result<()> {
        for input in &self.inputs {
            let now = sha256_file(&input.path)?;
            if now != input.sha256 {
                return Err(HarnessError::Data(format!(
                    "input {} changed since the manifest was written",
                    input.path.display()
                )));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sweep_grid_includes_both_ends() {
        let s = RhoSweep::parse("0:0.4:0.1").unwrap();
        let v = s.values();
        assert_eq!(v.len(), 5);
        assert_eq!(v[0], 0.0);
        assert!((v[4] - 0.4).abs() < 1e-12);
        assert_eq!(RhoSweep::parse("0.2:0.2:0.05").unwrap().values(), vec![0.2]);
    }

    #[test]
    fn malformed_sweeps_are_config_errors() {
        for bad in ["0:1", "a:b:c", "0.5:0.1:0.1", "0:1:0", "0:2:0.5"] {
            assert!(matches!(RhoSweep::parse(bad), Err(HarnessError::Config(_))), "{bad}");
        }
    }

    #[test]
    fn sha256_of_known_content() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("abc.txt");
        std::fs::write(&p, "abc").unwrap();
        assert_eq!(
            sha256_file(&p).unwrap(),
            "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"
        );
    }
}
