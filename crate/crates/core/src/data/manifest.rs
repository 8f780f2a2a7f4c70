use std::collections::HashSet;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Split {
    #[default]
    Train,
    Val,
    Test,
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::Dataset(format!("unknown split `{other}`"))),
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ManifestEntry {
    pub id: String,
    pub image: PathBuf,
    pub mask: PathBuf,
}

/// Tab-separated `id<TAB>image<TAB>mask` lines. Blank lines and `#` comments
/// are skipped; a `# split=<train|val|test>` comment sets the split tag.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct DatasetManifest {
    pub entries: Vec<ManifestEntry>,
    pub split: Split,
}

impl DatasetManifest {
    /// Parses manifest text. Relative paths are joined onto `base` when given.
    pub fn parse(text: &str, base: Option<&Path>) -> Result<Self> {
        let mut manifest = DatasetManifest::default();
        let mut ids = HashSet::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim_end_matches('\r');
            if line.trim().is_empty() {
                continue;
            }
            if let Some(comment) = line.strip_prefix('#') {
                if let Some(tag) = comment.trim().strip_prefix("split=") {
                    manifest.split = tag.trim().parse()?;
                }
                continue;
            }
            let fields: Vec<&str> = line.split('\t').collect();
            let [id, image, mask] = fields[..] else {
                return Err(Error::Dataset(format!(
                    "manifest line {}: expected 3 tab-separated fields, found {}",
                    lineno + 1,
                    fields.len()
                )));
            };
            if id.is_empty() || image.is_empty() || mask.is_empty() {
                return Err(Error::Dataset(format!("manifest line {}: empty field", lineno + 1)));
            }
            if !ids.insert(id.to_string()) {
                return Err(Error::Dataset(format!("manifest line {}: duplicate id {id}", lineno + 1)));
            }
            let resolve = |p: &str| match base {
                Some(b) if Path::new(p).is_relative() => b.join(p),
                _ => PathBuf::from(p),
            };
            manifest.entries.push(ManifestEntry {
                id: id.to_string(),
                image: resolve(image),
                mask: resolve(mask),
            });
        }
        Ok(manifest)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, path.parent())
    }

    /// Serialises with paths made relative to `base` where possible.
    pub fn to_text(&self, base: Option<&Path>) -> String {
        let mut out = format!("# split={}\n", self.split);
        let rel = |p: &Path| -> String {
            base.and_then(|b| p.strip_prefix(b).ok())
                .unwrap_or(p)
                .to_string_lossy()
                .into_owned()
        };
        for e in &self.entries {
            out.push_str(&format!("{}\t{}\t{}\n", e.id, rel(&e.image), rel(&e.mask)));
        }
        out
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_text(path.parent())).map_err(|e| Error::io(path, e))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn check_paths(&self) -> Result<()> {
        for e in &self.entries {
            for p in [&e.image, &e.mask] {
                if !p.is_file() {
                    return Err(Error::data(p, format!("listed for sample {} but not found", e.id)));
                }
            }
        }
        Ok(())
    }
}
