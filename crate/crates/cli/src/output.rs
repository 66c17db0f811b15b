//! Run directories: timestamped artifacts plus an append-only manifest.

use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use chrono::Local;

use crate::error::{CliError, Result};

pub const MANIFEST: &str = "manifest";

fn write_err(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |source| CliError::Write {
        path: path.to_path_buf(),
        source,
    }
}

pub struct RunDir {
    root: PathBuf,
    stamp: String,
    written: Vec<PathBuf>,
}

impl RunDir {
    pub fn create(root: &Path) -> Result<Self> {
        fs::create_dir_all(root).map_err(write_err(root))?;
        Ok(Self {
            root: root.to_path_buf(),
            stamp: Local::now()
                .format("%Y%m%dT%H%M%S%.3f")
                .to_string()
                .replace('.', "_"),
            written: Vec::new(),
        })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn written(&self) -> &[PathBuf] {
        &self.written
    }

    /// `<root>/<name>_<timestamp>.<ext>`, with a counter when that exists.
    fn fresh(&self, name: &str, ext: &str) -> PathBuf {
        let mut p = self.root.join(format!("{name}_{}.{ext}", self.stamp));
        let mut n = 1;
        while p.exists() {
            p = self.root.join(format!("{name}_{}-{n}.{ext}", self.stamp));
            n += 1;
        }
        p
    }

    pub fn write(&mut self, name: &str, ext: &str, text: &str) -> Result<PathBuf> {
        let p = self.fresh(name, ext);
        fs::write(&p, text).map_err(write_err(&p))?;
        self.written.push(p.clone());
        Ok(p)
    }

    /// Appends one block of `key value` lines, ending with the files written so far.
    pub fn record(&self, entries: &[(&str, String)]) -> Result<()> {
        let p = self.root.join(MANIFEST);
        let mut text = format!("[{}]\n", self.stamp);
        for (k, v) in entries {
            text.push_str(&format!("{k} {v}\n"));
        }
        for f in &self.written {
            let name = f
                .file_name()
                .map(|n| n.to_string_lossy().into_owned())
                .unwrap_or_default();
            text.push_str(&format!("file {name}\n"));
        }
        text.push('\n');
        let mut file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&p)
            .map_err(write_err(&p))?;
        file.write_all(text.as_bytes()).map_err(write_err(&p))
    }
}

/// Shortest text that reads back to the same value; empty for `None`.
pub fn num(v: Option<f64>) -> String {
    v.map(|x| format!("{x}")).unwrap_or_default()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn names_never_collide() {
        let dir = tempfile::tempdir().unwrap();
        let mut run = RunDir::create(&dir.path().join("a/b")).unwrap();
        let p1 = run.write("train", "csv", "x\n").unwrap();
        let p2 = run.write("train", "csv", "y\n").unwrap();
        assert_ne!(p1, p2);
        let name = p1.file_name().unwrap().to_str().unwrap();
        assert!(
            name.starts_with("train_") && name.ends_with(".csv"),
            "{name}"
        );
        run.record(&[("seed", "3".into())]).unwrap();
        run.record(&[("seed", "4".into())]).unwrap();
        let m = fs::read_to_string(dir.path().join("a/b/manifest")).unwrap();
        assert_eq!(m.matches("seed ").count(), 2);
        assert_eq!(m.matches("file train_").count(), 4);
    }

    #[test]
    fn number_text_round_trips() {
        for v in [0.1, 1.0 / 3.0, 1e-300, -2.5e17] {
            assert_eq!(num(Some(v)).parse::<f64>().unwrap(), v);
        }
        assert_eq!(num(None), "");
    }
}
