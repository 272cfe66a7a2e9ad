//! The weight archive container: a text manifest followed by raw
//! little-endian arrays, in one file.
//!
//! Layout (documented byte-exactly in the book's file-formats chapter):
//!
//! ```text
//! lesionseg-archive v1\n
//! meta <key> <value>\n          zero or more; value runs to end of line
//! tensor <name> <dtype> <d0,d1,...>\n
//! ...
//! data\n
//! <raw little-endian IEEE-754 arrays, concatenated in manifest order>
//! ```
//!
//! Names and keys contain no whitespace. The byte stream must end exactly
//! where the manifest says it does; short or long files are rejected.

use std::fs::File;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Element;

pub const FORMAT_VERSION: u32 = 1;
const MAGIC: &str = "lesionseg-archive";

#[derive(Debug)]
pub struct ArchiveEntry {
    pub name: String,
    pub dtype: String,
    pub dims: Vec<usize>,
    pub raw: Vec<u8>,
}

impl ArchiveEntry {
    pub fn numel(&self) -> usize {
        self.dims.iter().product()
    }

    /// Decode the raw bytes as elements of type `E`; the stored dtype must
    /// match exactly.
    pub fn values<E: Element>(&self) -> Result<Vec<E>> {
        if self.dtype != E::DTYPE {
            return Err(Error::Checkpoint(format!(
                "array '{}' has dtype {} but {} was requested",
                self.name,
                self.dtype,
                E::DTYPE
            )));
        }
        Ok(self.raw.chunks_exact(E::BYTE_WIDTH).map(E::read_le_bytes).collect())
    }
}

#[derive(Debug, Default)]
pub struct Archive {
    pub meta: Vec<(String, String)>,
    pub entries: Vec<ArchiveEntry>,
}

impl Archive {
    pub fn new() -> Self {
        Archive::default()
    }

    pub fn push_meta(&mut self, key: impl Into<String>, value: impl Into<String>) {
        let key = key.into();
        let value = value.into();
        debug_assert!(!key.contains(char::is_whitespace), "meta key '{key}' has whitespace");
        debug_assert!(!value.contains('\n'), "meta value for '{key}' has a newline");
        self.meta.push((key, value));
    }

    pub fn meta(&self, key: &str) -> Option<&str> {
        self.meta.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    pub fn require_meta(&self, key: &str) -> Result<&str> {
        self.meta(key)
            .ok_or_else(|| Error::Checkpoint(format!("manifest is missing the '{key}' field")))
    }

    pub fn push_values<E: Element>(&mut self, name: impl Into<String>, dims: &[usize], values: &[E]) {
        let name = name.into();
        debug_assert!(!name.contains(char::is_whitespace), "array name '{name}' has whitespace");
        debug_assert_eq!(dims.iter().product::<usize>(), values.len());
        let mut raw = Vec::with_capacity(values.len() * E::BYTE_WIDTH);
        for v in values {
            v.write_le_bytes(&mut raw);
        }
        self.entries.push(ArchiveEntry { name, dtype: E::DTYPE.into(), dims: dims.to_vec(), raw });
    }

    pub fn entry(&self, name: &str) -> Option<&ArchiveEntry> {
        self.entries.iter().find(|e| e.name == name)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut header = String::new();
        header.push_str(&format!("{MAGIC} v{FORMAT_VERSION}\n"));
        for (k, v) in &self.meta {
            header.push_str(&format!("meta {k} {v}\n"));
        }
        for entry in &self.entries {
            let dims: Vec<String> = entry.dims.iter().map(|d| d.to_string()).collect();
            header.push_str(&format!("tensor {} {} {}\n", entry.name, entry.dtype, dims.join(",")));
        }
        header.push_str("data\n");

        let mut file = File::create(path).map_err(|e| Error::io(path, e))?;
        file.write_all(header.as_bytes()).map_err(|e| Error::io(path, e))?;
        for entry in &self.entries {
            file.write_all(&entry.raw).map_err(|e| Error::io(path, e))?;
        }
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let mut reader = BufReader::new(file);

        let mut line = String::new();
        reader.read_line(&mut line).map_err(|e| Error::io(path, e))?;
        let first = line.trim_end_matches('\n');
        let expected = format!("{MAGIC} v{FORMAT_VERSION}");
        if first != expected {
            return Err(Error::Checkpoint(format!(
                "unsupported archive header '{first}' in {}, this build reads '{expected}'",
                path.display()
            )));
        }

        let mut archive = Archive::new();
        loop {
            line.clear();
            let n = reader.read_line(&mut line).map_err(|e| Error::io(path, e))?;
            if n == 0 {
                return Err(Error::Checkpoint(format!(
                    "truncated archive {}: manifest has no 'data' marker",
                    path.display()
                )));
            }
            let trimmed = line.trim_end_matches('\n');
            if trimmed == "data" {
                break;
            }
            if let Some(rest) = trimmed.strip_prefix("meta ") {
                let (key, value) = rest.split_once(' ').unwrap_or((rest, ""));
                archive.meta.push((key.to_string(), value.to_string()));
            } else if let Some(rest) = trimmed.strip_prefix("tensor ") {
                let parts: Vec<&str> = rest.split(' ').collect();
                if parts.len() != 3 {
                    return Err(Error::Checkpoint(format!("malformed tensor line '{trimmed}'")));
                }
                let dims: Vec<usize> = parts[2]
                    .split(',')
                    .map(|d| {
                        d.parse::<usize>().map_err(|_| {
                            Error::Checkpoint(format!("bad extent '{d}' in line '{trimmed}'"))
                        })
                    })
                    .collect::<Result<_>>()?;
                let width = match parts[1] {
                    "f32" => 4,
                    "f64" => 8,
                    other => {
                        return Err(Error::Checkpoint(format!("unknown dtype '{other}'")));
                    }
                };
                archive.entries.push(ArchiveEntry {
                    name: parts[0].to_string(),
                    dtype: parts[1].to_string(),
                    dims: dims.clone(),
                    raw: vec![0u8; dims.iter().product::<usize>() * width],
                });
            } else {
                return Err(Error::Checkpoint(format!("unrecognized manifest line '{trimmed}'")));
            }
        }

        for i in 0..archive.entries.len() {
            let mut raw = std::mem::take(&mut archive.entries[i].raw);
            reader.read_exact(&mut raw).map_err(|_| {
                Error::Checkpoint(format!(
                    "truncated archive {}: array '{}' is incomplete",
                    path.display(),
                    archive.entries[i].name
                ))
            })?;
            archive.entries[i].raw = raw;
        }
        let mut extra = [0u8; 1];
        if reader.read(&mut extra).map_err(|e| Error::io(path, e))? != 0 {
            return Err(Error::Checkpoint(format!(
                "archive {} has trailing bytes beyond the manifest",
                path.display()
            )));
        }
        Ok(archive)
    }
}
