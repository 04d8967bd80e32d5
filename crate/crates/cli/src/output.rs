//! Atomic file output and the per-run manifest.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::Serialize;

use crate::error::{CliError, CliResult};

/// Writes `bytes` to a sibling temp file, syncs it, then renames it over
/// `path`, so readers never observe a partial file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> CliResult<()> {
    let err = |source| CliError::Output {
        path: path.display().to_string(),
        source,
    };
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
        _ => PathBuf::from("."),
    };
    let name = path
        .file_name()
        .ok_or_else(|| CliError::Usage(format!("{} is not a file path", path.display())))?;
    let tmp = dir.join(format!(".{}.tmp{}", name.to_string_lossy(), std::process::id()));
    let result = (|| {
        let mut f = std::fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
        std::fs::rename(&tmp, path)
    })();
    if result.is_err() {
        let _ = std::fs::remove_file(&tmp);
    }
    result.map_err(err)
}

pub fn json_lines<T: Serialize>(records: &[T]) -> CliResult<Vec<u8>> {
    let mut out = Vec::new();
    for r in records {
        serde_json::to_writer(&mut out, r).map_err(|e| CliError::Usage(e.to_string()))?;
        out.push(b'\n');
    }
    Ok(out)
}

pub fn pretty_json<T: Serialize>(value: &T) -> CliResult<Vec<u8>> {
    let mut v = serde_json::to_vec_pretty(value).map_err(|e| CliError::Usage(e.to_string()))?;
    v.push(b'\n');
    Ok(v)
}

/// Build identifier: crate version plus the commit recorded at build time.
pub fn build_id() -> String {
    format!("{}+{}", env!("CARGO_PKG_VERSION"), option_env!("PMP_GIT_COMMIT").unwrap_or("unknown"))
}

#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub config: serde_json::Value,
    pub seed: u64,
    pub inputs: Vec<String>,
    pub outputs: Vec<String>,
    pub wall_clock_secs: f64,
    pub build_id: String,
}

/// Collects outputs during a command and writes them plus one manifest.
pub struct Run {
    command: String,
    out_dir: PathBuf,
    started: Instant,
    inputs: Vec<String>,
    outputs: Vec<String>,
}

impl Run {
    pub fn start(command: &str, out_dir: &Path) -> CliResult<Self> {
        std::fs::create_dir_all(out_dir).map_err(|source| CliError::Output {
            path: out_dir.display().to_string(),
            source,
        })?;
        Ok(Run {
            command: command.into(),
            out_dir: out_dir.to_path_buf(),
            started: Instant::now(),
            inputs: Vec::new(),
            outputs: Vec::new(),
        })
    }

    pub fn input(&mut self, path: &Path) {
        self.inputs.push(path.display().to_string());
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.out_dir.join(name)
    }

    /// Writes into the output directory.
    pub fn write(&mut self, name: &str, bytes: &[u8]) -> CliResult<PathBuf> {
        let p = self.path(name);
        self.write_to(&p, bytes)?;
        Ok(p)
    }

    /// Writes to an explicit location, possibly outside the output directory.
    pub fn write_to(&mut self, path: &Path, bytes: &[u8]) -> CliResult<()> {
        write_atomic(path, bytes)?;
        log::info!("wrote {}", path.display());
        self.outputs.push(path.display().to_string());
        Ok(())
    }

    pub fn finish<C: Serialize>(self, config: &C, seed: u64) -> CliResult<PathBuf> {
        let manifest = RunManifest {
            command: self.command,
            config: serde_json::to_value(config).map_err(|e| CliError::Usage(e.to_string()))?,
            seed,
            inputs: self.inputs,
            outputs: self.outputs,
            wall_clock_secs: self.started.elapsed().as_secs_f64(),
            build_id: build_id(),
        };
        let p = self.out_dir.join("manifest.json");
        write_atomic(&p, &pretty_json(&manifest)?)?;
        Ok(p)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn atomic_write_replaces_and_leaves_no_temp() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.bin");
        write_atomic(&p, b"one").unwrap();
        write_atomic(&p, b"two").unwrap();
        assert_eq!(std::fs::read(&p).unwrap(), b"two");
        assert_eq!(std::fs::read_dir(dir.path()).unwrap().count(), 1);
    }

    #[test]
    fn unwritable_target_is_output_error() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("missing").join("x.bin");
        assert!(matches!(write_atomic(&p, b"x"), Err(CliError::Output { .. })));
    }
}
