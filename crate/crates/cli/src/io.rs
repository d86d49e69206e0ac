use std::io::Write;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::Serialize;
use toothlabel::labeling::{LabelMatrix, LabelSummary};

use crate::{runtime, validation, CliError};

/// Flag value, else config value, else a validation error naming the flag.
pub fn require(
    flag: Option<PathBuf>,
    fallback: &Option<PathBuf>,
    name: &str,
) -> Result<PathBuf, CliError> {
    flag.or_else(|| fallback.clone())
        .ok_or_else(|| validation(format!("missing --{name} (no default in config)")))
}

pub fn read_text(path: &Path) -> Result<String, CliError> {
    std::fs::read_to_string(path)
        .map_err(|e| validation(format!("cannot read {}: {e}", path.display())))
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T, CliError> {
    serde_json::from_str(&read_text(path)?)
        .map_err(|e| validation(format!("{}: {e}", path.display())))
}

fn parent_of(path: &Path) -> Result<&Path, CliError> {
    let parent = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    std::fs::create_dir_all(parent)
        .map_err(|e| runtime(format!("cannot create {}: {e}", parent.display())))?;
    Ok(parent)
}

/// Writes to a temporary file next to `path`, then renames it into place.
pub fn write_atomic(path: &Path, contents: &[u8]) -> Result<(), CliError> {
    let parent = parent_of(path)?;
    let fail = |e: std::io::Error| runtime(format!("cannot write {}: {e}", path.display()));
    let mut tmp = tempfile::NamedTempFile::new_in(parent).map_err(fail)?;
    tmp.write_all(contents).map_err(fail)?;
    tmp.flush().map_err(fail)?;
    tmp.persist(path).map_err(|e| fail(e.error))?;
    Ok(())
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let mut text = serde_json::to_string_pretty(value).map_err(runtime)?;
    text.push('\n');
    write_atomic(path, text.as_bytes())
}

/// Builds a directory under a temporary name, then swaps it into place.
pub fn write_dir_atomic<T>(
    target: &Path,
    build: impl FnOnce(&Path) -> Result<T, CliError>,
) -> Result<T, CliError> {
    let parent = parent_of(target)?;
    let staging = tempfile::Builder::new()
        .prefix(".staging-")
        .tempdir_in(parent)
        .map_err(|e| runtime(format!("cannot stage {}: {e}", target.display())))?;
    let out = build(staging.path())?;
    if target.exists() {
        std::fs::remove_dir_all(target)
            .map_err(|e| runtime(format!("cannot replace {}: {e}", target.display())))?;
    }
    let staged = staging.keep();
    std::fs::rename(&staged, target)
        .map_err(|e| runtime(format!("cannot move crops into {}: {e}", target.display())))?;
    Ok(out)
}

/// `labels.jsonl` keeps its vocabulary in `labels.summary.json`.
pub fn summary_path(labels: &Path) -> PathBuf {
    labels.with_extension("summary.json")
}

pub fn load_labels(path: &Path) -> Result<LabelMatrix, CliError> {
    let summary: LabelSummary = read_json(&summary_path(path))?;
    LabelMatrix::from_parts(&read_text(path)?, &summary)
        .map_err(|e| validation(format!("{}: {e}", path.display())))
}

/// Inputs, outputs and parameters of one subcommand invocation.
#[derive(Debug, Serialize)]
pub struct Plan {
    pub command: &'static str,
    pub inputs: Vec<PathBuf>,
    pub outputs: Vec<PathBuf>,
    pub params: serde_json::Value,
}

impl Plan {
    pub fn new(command: &'static str) -> Self {
        Plan {
            command,
            inputs: Vec::new(),
            outputs: Vec::new(),
            params: serde_json::Value::Null,
        }
    }

    pub fn input(mut self, p: &Path) -> Self {
        self.inputs.push(p.to_path_buf());
        self
    }

    pub fn output(mut self, p: &Path) -> Self {
        self.outputs.push(p.to_path_buf());
        self
    }

    pub fn params(mut self, v: serde_json::Value) -> Self {
        self.params = v;
        self
    }

    /// Fails if an input is missing. With `dry_run`, prints the plan and
    /// returns `false` so the caller stops before writing.
    pub fn check(&self, dry_run: bool) -> Result<bool, CliError> {
        if let Some(missing) = self.inputs.iter().find(|p| !p.exists()) {
            return Err(validation(format!(
                "input {} does not exist",
                missing.display()
            )));
        }
        if dry_run {
            println!(
                "{}",
                serde_json::to_string_pretty(self).expect("plan serializes")
            );
            return Ok(false);
        }
        log::info!(
            "{}: {} input(s), {} output(s)",
            self.command,
            self.inputs.len(),
            self.outputs.len()
        );
        Ok(true)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn atomic_write_replaces_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("nested/out.txt");
        write_atomic(&path, b"one").unwrap();
        write_atomic(&path, b"two").unwrap();
        assert_eq!(std::fs::read_to_string(&path).unwrap(), "two");
        assert_eq!(
            std::fs::read_dir(dir.path().join("nested"))
                .unwrap()
                .count(),
            1
        );
    }

    #[test]
    fn failed_directory_build_leaves_target_alone() {
        let dir = tempfile::tempdir().unwrap();
        let target = dir.path().join("crops");
        std::fs::create_dir(&target).unwrap();
        std::fs::write(target.join("keep.txt"), "x").unwrap();
        let result: Result<(), _> = write_dir_atomic(&target, |staging| {
            std::fs::write(staging.join("partial.png"), "y").unwrap();
            Err(runtime("boom"))
        });
        assert!(result.is_err());
        assert!(target.join("keep.txt").exists());
        assert_eq!(std::fs::read_dir(dir.path()).unwrap().count(), 1);
    }

    #[test]
    fn summary_path_sits_next_to_labels() {
        assert_eq!(
            summary_path(Path::new("out/labels.jsonl")),
            PathBuf::from("out/labels.summary.json")
        );
    }
}
