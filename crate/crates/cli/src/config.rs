//! Settings merging: a TOML file supplies values, command-line flags override
//! them, and whatever is still unset falls back to the documented default.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use chrono::Utc;
use serde::de::DeserializeOwned;
use serde::Serialize;

/// Environment variable naming the default output root.
pub const OUT_ENV: &str = "AVMIL_OUT";
/// Output root when neither `--out` nor `AVMIL_OUT` is set.
pub const DEFAULT_OUT: &str = "runs";

/// Overlays the set fields of `flags` onto `file`.
pub fn merge<T: Serialize + DeserializeOwned + Default>(file: Option<&Path>, flags: &T) -> Result<T> {
    let base = match file {
        Some(path) => {
            let text = fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
            toml::from_str::<T>(&text).with_context(|| format!("parsing config {}", path.display()))?
        }
        None => T::default(),
    };
    let mut merged = serde_json::to_value(base)?;
    let serde_json::Value::Object(over) = serde_json::to_value(flags)? else {
        bail!("settings must serialize to a table");
    };
    let target = merged.as_object_mut().expect("settings serialize to a table");
    for (key, value) in over {
        if !value.is_null() {
            target.insert(key, value);
        }
    }
    Ok(serde_json::from_value(merged)?)
}

/// `--out`, else `$AVMIL_OUT`, else `runs`.
pub fn out_root(out: Option<&Path>) -> PathBuf {
    match out {
        Some(p) => p.to_path_buf(),
        None => std::env::var_os(OUT_ENV)
            .map(PathBuf::from)
            .unwrap_or_else(|| PathBuf::from(DEFAULT_OUT)),
    }
}

/// Creates a fresh `<root>/<command>-<UTC timestamp>` directory. Existing
/// directories are never reused; a numeric suffix resolves collisions.
pub fn new_run_dir(root: &Path, command: &str) -> Result<PathBuf> {
    fs::create_dir_all(root).with_context(|| format!("creating {}", root.display()))?;
    let stamp = Utc::now().format("%Y%m%dT%H%M%S%.3fZ");
    for n in 0..1000 {
        let name = match n {
            0 => format!("{command}-{stamp}"),
            n => format!("{command}-{stamp}-{n}"),
        };
        let dir = root.join(name);
        match fs::create_dir(&dir) {
            Ok(()) => return Ok(dir),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => continue,
            Err(e) => return Err(e).with_context(|| format!("creating {}", dir.display())),
        }
    }
    bail!("could not allocate a run directory under {}", root.display())
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    fs::write(path, bytes).with_context(|| format!("writing {}", path.display()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde::Deserialize;

    #[derive(Debug, Default, PartialEq, Serialize, Deserialize)]
    #[serde(default, deny_unknown_fields)]
    struct S {
        a: Option<u32>,
        b: Option<String>,
    }

    #[test]
    fn flags_override_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.toml");
        fs::write(&path, "a = 1\nb = \"file\"\n").unwrap();
        let flags = S {
            a: Some(2),
            b: None,
        };
        let merged = merge(Some(&path), &flags).unwrap();
        assert_eq!(merged, S { a: Some(2), b: Some("file".into()) });
        assert_eq!(merge(None, &flags).unwrap(), flags);
    }

    #[test]
    fn unknown_keys_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.toml");
        fs::write(&path, "c = 1\n").unwrap();
        assert!(merge(Some(&path), &S::default()).is_err());
    }

    #[test]
    fn run_dirs_never_collide() {
        let dir = tempfile::tempdir().unwrap();
        let a = new_run_dir(dir.path(), "train").unwrap();
        let b = new_run_dir(dir.path(), "train").unwrap();
        assert_ne!(a, b);
        assert!(a.is_dir() && b.is_dir());
    }
}
