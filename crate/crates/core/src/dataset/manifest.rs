//! On-disk dataset description.
//!
//! ```text
//! # comments allowed
//! seed = 7
//! window = 256
//! stream = dev0_day1.iq, 0, day1
//! stream = dev1_day1.iq, 1, day1
//! ```
//!
//! Stream paths are relative to the manifest's directory.

use std::fs;
use std::path::{Path, PathBuf};

use indexmap::IndexMap;

use crate::error::{Error, Result};
use crate::signal::{read_iq, IqStream};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StreamEntry {
    pub path: PathBuf,
    pub device: usize,
    pub condition: String,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Manifest {
    pub meta: IndexMap<String, String>,
    pub streams: Vec<StreamEntry>,
}

impl Manifest {
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (k, v) in &self.meta {
            s.push_str(&format!("{k} = {v}\n"));
        }
        for e in &self.streams {
            s.push_str(&format!(
                "stream = {}, {}, {}\n",
                e.path.display(),
                e.device,
                e.condition
            ));
        }
        s
    }

    pub fn parse(text: &str, path: &Path) -> Result<Self> {
        let mut m = Manifest::default();
        for (line, k, v) in crate::kv::entries(text, path)? {
            if k == "stream" {
                let parts: Vec<&str> = v.split(',').map(str::trim).collect();
                let [p, d, c] = parts[..] else {
                    return Err(Error::format(
                        path,
                        format!("line {line}: expected `stream = path, device, condition`"),
                    ));
                };
                let device = d
                    .parse()
                    .map_err(|_| Error::format(path, format!("line {line}: bad device `{d}`")))?;
                m.streams.push(StreamEntry {
                    path: PathBuf::from(p),
                    device,
                    condition: c.to_string(),
                });
            } else if m.meta.insert(k.clone(), v).is_some() {
                return Err(Error::format(path, format!("line {line}: duplicate key `{k}`")));
            }
        }
        Ok(m)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, path)
    }

    /// Loads every listed stream, checking its sidecar against the entry.
    pub fn load_streams(&self, manifest_path: &Path) -> Result<Vec<IqStream>> {
        let base = manifest_path.parent().unwrap_or(Path::new("."));
        self.streams
            .iter()
            .map(|e| {
                let p = base.join(&e.path);
                let s = read_iq(&p)?;
                if s.device != e.device || s.condition != e.condition {
                    return Err(Error::format(
                        &p,
                        format!(
                            "sidecar says dev{}/{}, manifest says dev{}/{}",
                            s.device, s.condition, e.device, e.condition
                        ),
                    ));
                }
                Ok(s)
            })
            .collect()
    }
}
