//! Run directories: `<root>/<command>-<timestamp>-seed<seed>`.

use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::error::{CliError, Result};

pub const RUN_ROOT_ENV: &str = "HYBRIDNA_RUN_ROOT";
const DEFAULT_ROOT: &str = "runs";

pub struct RunDir {
    pub path: PathBuf,
}

pub fn run_root(flag: Option<&Path>) -> PathBuf {
    flag.map(Path::to_path_buf)
        .or_else(|| std::env::var_os(RUN_ROOT_ENV).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from(DEFAULT_ROOT))
}

impl RunDir {
    /// Creates a fresh directory; a numeric suffix separates runs started in
    /// the same second.
    pub fn create(root: &Path, command: &str, seed: u64) -> Result<RunDir> {
        std::fs::create_dir_all(root).map_err(|e| CliError::io(root, e))?;
        let stamp = chrono::Local::now().format("%Y%m%d-%H%M%S");
        let base = format!("{command}-{stamp}-seed{seed}");
        for n in 0.. {
            let name = if n == 0 {
                base.clone()
            } else {
                format!("{base}-{n}")
            };
            let path = root.join(name);
            match std::fs::create_dir(&path) {
                Ok(()) => return Ok(RunDir { path }),
                Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => continue,
                Err(e) => return Err(CliError::io(&path, e)),
            }
        }
        unreachable!("unbounded suffix search")
    }

    pub fn file(&self, name: &str) -> PathBuf {
        self.path.join(name)
    }

    pub fn write(&self, name: &str, contents: impl AsRef<[u8]>) -> Result<PathBuf> {
        let path = self.file(name);
        std::fs::write(&path, contents).map_err(|e| CliError::io(&path, e))?;
        Ok(path)
    }

    pub fn write_json<T: Serialize>(&self, name: &str, value: &T) -> Result<PathBuf> {
        let mut text = serde_json::to_string_pretty(value)
            .map_err(|e| CliError::Run(format!("serializing {name}: {e}")))?;
        text.push('\n');
        self.write(name, text)
    }

    /// Writes `config.json` and echoes it to stderr.
    pub fn record_config<T: Serialize>(&self, config: &T) -> Result<()> {
        let path = self.write_json("config.json", config)?;
        eprintln!("run directory: {}", self.path.display());
        eprintln!(
            "resolved config ({}):\n{}",
            path.display(),
            serde_json::to_string_pretty(config).unwrap_or_default()
        );
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_second_runs_get_distinct_directories() {
        let root = tempfile::tempdir().unwrap();
        let a = RunDir::create(root.path(), "bench", 3).unwrap();
        let b = RunDir::create(root.path(), "bench", 3).unwrap();
        assert_ne!(a.path, b.path);
        let name = a.path.file_name().unwrap().to_string_lossy().to_string();
        assert!(
            name.starts_with("bench-") && name.ends_with("-seed3"),
            "{name}"
        );
    }
}
