//! Class mappings and per-frame label files.

use std::collections::HashMap;
use std::path::Path;

use super::bytes::write_file;
use crate::error::{Error, Result};

/// Class names indexed by dense ids `0..C`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClassMapping {
    names: Vec<String>,
    ids: HashMap<String, usize>,
}

impl ClassMapping {
    pub fn new(names: Vec<String>) -> Result<Self> {
        let mut ids = HashMap::with_capacity(names.len());
        for (i, n) in names.iter().enumerate() {
            if n.is_empty() || n.chars().any(char::is_whitespace) {
                return Err(Error::Data(format!("invalid class name {n:?}")));
            }
            if ids.insert(n.clone(), i).is_some() {
                return Err(Error::Data(format!("duplicate class name {n}")));
            }
        }
        Ok(Self { names, ids })
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn name(&self, id: usize) -> Option<&str> {
        self.names.get(id).map(String::as_str)
    }

    pub fn id(&self, name: &str) -> Option<usize> {
        self.ids.get(name).copied()
    }

    /// `"<id> <name>"` per line.
    pub fn to_text(&self) -> String {
        self.names
            .iter()
            .enumerate()
            .map(|(i, n)| format!("{i} {n}\n"))
            .collect()
    }

    pub fn parse(path: &Path, text: &str) -> Result<Self> {
        let mut names = Vec::new();
        for (i, line) in text.lines().enumerate() {
            let err = |msg: String| Error::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                msg,
            };
            if line.trim().is_empty() {
                continue;
            }
            let (id, name) = line
                .trim()
                .split_once(' ')
                .ok_or_else(|| err(format!("expected \"<id> <name>\", got {line:?}")))?;
            let id: usize = id
                .parse()
                .map_err(|_| err(format!("invalid class id {id:?}")))?;
            if id != names.len() {
                return Err(err(format!("class id {id}, expected {}", names.len())));
            }
            let name = name.trim();
            if names.iter().any(|n| n == name) {
                return Err(err(format!("duplicate class name {name}")));
            }
            names.push(name.to_string());
        }
        Self::new(names).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: 0,
            msg: e.to_string(),
        })
    }
}

pub fn read_mapping(path: impl AsRef<Path>) -> Result<ClassMapping> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    ClassMapping::parse(path, &text)
}

pub fn write_mapping(path: impl AsRef<Path>, mapping: &ClassMapping) -> Result<()> {
    write_file(path.as_ref(), mapping.to_text().as_bytes())
}

/// Reads one class name per line. An unknown name is a data error citing its
/// line.
pub fn read_labels(path: impl AsRef<Path>, mapping: &ClassMapping) -> Result<Vec<usize>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_labels(path, &text, mapping)
}

pub(crate) fn parse_labels(path: &Path, text: &str, mapping: &ClassMapping) -> Result<Vec<usize>> {
    text.lines()
        .enumerate()
        .map(|(i, line)| {
            let name = line.trim_end_matches('\r');
            mapping.id(name).ok_or_else(|| {
                Error::Data(format!(
                    "{}:{}: unknown class name {name:?}",
                    path.display(),
                    i + 1
                ))
            })
        })
        .collect()
}

pub fn write_labels(
    path: impl AsRef<Path>,
    labels: &[usize],
    mapping: &ClassMapping,
) -> Result<()> {
    let path = path.as_ref();
    let mut text = String::new();
    for (t, &l) in labels.iter().enumerate() {
        let name = mapping
            .name(l)
            .ok_or_else(|| Error::Data(format!("label {l} at frame {t} has no class name")))?;
        text.push_str(name);
        text.push('\n');
    }
    write_file(path, text.as_bytes())
}
