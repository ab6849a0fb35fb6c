//! Dataset manifests: one tab-separated record per subject.
//!
//! ```text
//! # lrp3d-manifest v1
//! @classes	term,preterm
//! @dims	32,24,24
//! subject_id	label	path	mask
//! sub-000	term	sub-000.nii	sub-000_mask.nii
//! sub-001	-	sub-001.nii	-
//! ```
//!
//! The first line is fixed. `@key<TAB>value` lines carry metadata, other
//! lines starting with `#` and blank lines are ignored, and the column
//! header must precede the records. `-` marks a missing label or mask.
//! Relative paths are resolved against the manifest's directory.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rayon::prelude::*;

use super::nifti::read_nifti;
use super::preprocess::{center_fit, preprocess, PreprocessConfig};
use super::Volume;
use crate::error::{Error, Result};
use crate::layers::default_class_names;
use crate::trainer::{Dataset, Sample};

pub const MANIFEST_MAGIC: &str = "# lrp3d-manifest v1";
const COLUMNS: &str = "subject_id\tlabel\tpath\tmask";
const MISSING: &str = "-";

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestEntry {
    pub subject_id: String,
    pub label: Option<String>,
    pub path: PathBuf,
    pub mask: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Manifest {
    pub class_names: Vec<String>,
    /// `@key` lines other than `@classes`, in key order.
    pub metadata: BTreeMap<String, String>,
    pub entries: Vec<ManifestEntry>,
    /// Directory that relative paths are resolved against.
    pub base_dir: PathBuf,
}

fn check_field(what: &str, value: &str) -> Result<()> {
    if value.is_empty() || value.contains(['\t', '\n', '\r']) {
        return Err(Error::Config(format!(
            "{what} `{value}` is empty or contains tabs or newlines"
        )));
    }
    Ok(())
}

impl Manifest {
    pub fn new(class_names: Vec<String>) -> Self {
        Self {
            class_names,
            metadata: BTreeMap::new(),
            entries: Vec::new(),
            base_dir: PathBuf::from("."),
        }
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut lines = text.lines().enumerate();
        match lines.next() {
            Some((_, l)) if l.trim_end() == MANIFEST_MAGIC => {}
            _ => {
                return Err(Error::parse(
                    "manifest",
                    format!("first line must be `{MANIFEST_MAGIC}`"),
                ))
            }
        }
        let mut m = Self::new(default_class_names());
        let mut header_seen = false;
        for (i, raw) in lines {
            let line = raw.trim_end_matches('\r');
            let lineno = i + 1;
            if line.trim().is_empty() || line.starts_with('#') {
                continue;
            }
            if let Some(meta) = line.strip_prefix('@') {
                let (key, value) = meta.split_once('\t').ok_or_else(|| {
                    Error::parse(format!("manifest line {lineno}"), "metadata needs `@key<TAB>value`")
                })?;
                if key == "classes" {
                    m.class_names = value.split(',').map(|s| s.trim().to_string()).collect();
                    if m.class_names.len() < 2 || m.class_names.iter().any(String::is_empty) {
                        return Err(Error::parse(
                            format!("manifest line {lineno}"),
                            "need at least two class names",
                        ));
                    }
                } else {
                    m.metadata.insert(key.to_string(), value.to_string());
                }
                continue;
            }
            if !header_seen {
                if line != COLUMNS {
                    return Err(Error::parse(
                        format!("manifest line {lineno}"),
                        format!("expected the column header `{}`", COLUMNS.replace('\t', "<TAB>")),
                    ));
                }
                header_seen = true;
                continue;
            }
            let fields: Vec<&str> = line.split('\t').collect();
            let [id, label, path, mask] = fields[..] else {
                return Err(Error::parse(
                    format!("manifest line {lineno}"),
                    format!("expected 4 tab-separated fields, found {}", fields.len()),
                ));
            };
            let optional = |v: &str| (v != MISSING).then(|| v.to_string());
            m.entries.push(ManifestEntry {
                subject_id: id.to_string(),
                label: optional(label),
                path: PathBuf::from(path),
                mask: optional(mask).map(PathBuf::from),
            });
        }
        m.validate()?;
        Ok(m)
    }

    pub fn validate(&self) -> Result<()> {
        let mut seen = std::collections::HashSet::new();
        for e in &self.entries {
            check_field("subject id", &e.subject_id)?;
            if !seen.insert(&e.subject_id) {
                return Err(Error::Config(format!("subject `{}` is listed twice", e.subject_id)));
            }
            if let Some(l) = &e.label {
                if !self.class_names.contains(l) {
                    return Err(Error::Config(format!(
                        "subject `{}` has label `{l}`, not one of {:?}",
                        e.subject_id, self.class_names
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn to_text(&self) -> Result<String> {
        self.validate()?;
        let mut out = format!("{MANIFEST_MAGIC}\n@classes\t{}\n", self.class_names.join(","));
        for (k, v) in &self.metadata {
            check_field("metadata key", k)?;
            check_field("metadata value", v)?;
            out.push_str(&format!("@{k}\t{v}\n"));
        }
        out.push_str(COLUMNS);
        out.push('\n');
        for e in &self.entries {
            let path = e.path.to_string_lossy();
            check_field("path", &path)?;
            let mask = e.mask.as_ref().map(|p| p.to_string_lossy().into_owned());
            if let Some(mp) = &mask {
                check_field("mask path", mp)?;
            }
            out.push_str(&format!(
                "{}\t{}\t{}\t{}\n",
                e.subject_id,
                e.label.as_deref().unwrap_or(MISSING),
                path,
                mask.as_deref().unwrap_or(MISSING)
            ));
        }
        Ok(out)
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut m = Self::parse(&text)?;
        m.base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok(m)
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_text()?).map_err(|e| Error::io(path, e))
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    pub fn label_index(&self, entry: &ManifestEntry) -> Option<usize> {
        entry
            .label
            .as_ref()
            .and_then(|l| self.class_names.iter().position(|c| c == l))
    }

    /// Reads every volume (and mask) in parallel; the manifest id wins over
    /// the one stored in the file.
    pub fn load_volumes(&self) -> Result<Vec<Volume>> {
        self.entries
            .par_iter()
            .map(|e| {
                let mut v = read_nifti(self.resolve(&e.path))?;
                v.subject_id = e.subject_id.clone();
                match &e.mask {
                    Some(mp) => {
                        let mask = read_nifti(self.resolve(mp))?;
                        v.with_mask(mask.into_data())
                    }
                    None => Ok(v),
                }
            })
            .collect()
    }

    /// Loads and preprocesses every subject. A `@ground_truth` entry is
    /// attached as the dataset's discriminative mask.
    pub fn load_dataset(&self, cfg: &PreprocessConfig) -> Result<Dataset> {
        if self.entries.is_empty() {
            return Err(Error::Config("manifest lists no subjects".into()));
        }
        let volumes = self.load_volumes()?;
        let inputs: Vec<_> = volumes.par_iter().map(|v| preprocess(v, cfg)).collect::<Result<_>>()?;
        let samples = inputs
            .into_iter()
            .zip(&self.entries)
            .map(|(input, e)| Sample {
                input,
                label: self.label_index(e),
                subject_id: e.subject_id.clone(),
            })
            .collect();
        let data = Dataset::new(samples, self.class_names.clone())?;
        match self.metadata.get("ground_truth") {
            Some(p) => {
                let gt = read_nifti(self.resolve(Path::new(p)))?;
                let [d, h, w] = cfg.target_dims;
                data.with_discriminative_mask(center_fit(gt.data(), cfg.target_dims)?.reshape(&[1, d, h, w])?)
            }
            None => Ok(data),
        }
    }
}
