//! CSV/JSON artifacts and the content-hashed manifest.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::error::Result;

/// Shortest representation that parses back to the same f64; NaN and None become empty fields.
pub fn num(x: f64) -> String {
    if x.is_nan() {
        String::new()
    } else {
        format!("{x}")
    }
}

pub fn opt(x: Option<f64>) -> String {
    x.map(num).unwrap_or_default()
}

/// File name fragment for one (N, delta) cell, e.g. `N24_d3.4`.
pub fn tag(n_atoms: usize, delta: f64) -> String {
    format!("N{n_atoms}_d{delta}")
}

pub fn delta_tag(delta: f64) -> String {
    format!("d{delta}")
}

#[derive(Clone, Debug, Serialize)]
pub struct FileEntry {
    pub sha256: String,
    pub bytes: usize,
}

/// Writes files under one root and remembers their hashes.
#[derive(Debug)]
pub struct ArtifactWriter {
    root: PathBuf,
    files: BTreeMap<String, FileEntry>,
}

impl ArtifactWriter {
    pub fn new(root: &Path) -> Result<Self> {
        std::fs::create_dir_all(root)?;
        Ok(Self { root: root.to_path_buf(), files: BTreeMap::new() })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn write(&mut self, rel: &str, content: &[u8]) -> Result<()> {
        let path = self.root.join(rel);
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir)?;
        }
        std::fs::write(&path, content)?;
        let sha256 = hex::encode(Sha256::digest(content));
        self.files.insert(rel.to_string(), FileEntry { sha256, bytes: content.len() });
        Ok(())
    }

    pub fn csv(&mut self, rel: &str, header: &[&str], rows: impl IntoIterator<Item = Vec<String>>) -> Result<()> {
        let mut out = header.join(",");
        out.push('\n');
        for row in rows {
            debug_assert_eq!(row.len(), header.len());
            let _ = writeln!(out, "{}", row.join(","));
        }
        self.write(rel, out.as_bytes())
    }

    pub fn json(&mut self, rel: &str, value: &impl Serialize) -> Result<()> {
        let mut text = serde_json::to_string_pretty(value).map_err(|e| crate::Error::Config(e.to_string()))?;
        text.push('\n');
        self.write(rel, text.as_bytes())
    }

    pub fn files(&self) -> &BTreeMap<String, FileEntry> {
        &self.files
    }
}
