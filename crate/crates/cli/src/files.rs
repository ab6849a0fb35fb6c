//! Shared helpers for the files the commands read and write.

use std::collections::HashMap;
use std::path::{Path, PathBuf};

use lrp3d::layers::ModelConfig;
use lrp3d::trainer::Prediction;
use lrp3d::volume::{Manifest, PreprocessConfig};

use crate::error::{io_error, CliError, CliResult};

pub fn write_text(path: &Path, text: &str) -> CliResult<()> {
    std::fs::write(path, text).map_err(|e| io_error(path, e))
}

pub fn create_dir(path: &Path) -> CliResult<()> {
    std::fs::create_dir_all(path).map_err(|e| io_error(path, e))
}

/// `dir/model.bin` + `history.csv` → `dir/model.history.csv`
pub fn sibling(path: &Path, suffix: &str) -> PathBuf {
    let stem = path
        .file_stem()
        .map_or_else(|| "out".into(), |s| s.to_string_lossy().into_owned());
    path.with_file_name(format!("{stem}.{suffix}"))
}

/// Subject id made safe for use in a file name.
pub fn file_id(subject_id: &str) -> String {
    subject_id
        .chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() || matches!(c, '.' | '_' | '-') {
                c
            } else {
                '_'
            }
        })
        .collect()
}

pub fn relevance_path(dir: &Path, subject_id: &str) -> PathBuf {
    dir.join(format!("{}_relevance.nii", file_id(subject_id)))
}

pub fn sidecar_path(dir: &Path, subject_id: &str) -> PathBuf {
    dir.join(format!("{}_relevance.txt", file_id(subject_id)))
}

pub fn parse_dims(s: &str) -> Result<[usize; 3], String> {
    let parts: Vec<&str> = s.split(',').map(str::trim).collect();
    if parts.len() != 3 {
        return Err(format!("expected D,H,W, got `{s}`"));
    }
    let mut dims = [0usize; 3];
    for (d, p) in dims.iter_mut().zip(&parts) {
        *d = p.parse().map_err(|_| format!("`{p}` is not a size"))?;
        if *d == 0 {
            return Err("sizes must be positive".into());
        }
    }
    Ok(dims)
}

/// Preprocessing that produces inputs for `config`.
pub fn preprocess_for(config: &ModelConfig) -> CliResult<PreprocessConfig> {
    match config.input_shape.as_slice() {
        &[1, d, h, w] => Ok(PreprocessConfig {
            target_dims: [d, h, w],
            ..Default::default()
        }),
        other => Err(CliError::Data(format!(
            "model input shape {other:?} is not a single-channel volume"
        ))),
    }
}

pub fn check_classes(config: &ModelConfig, manifest: &Manifest) -> CliResult<()> {
    if config.class_names != manifest.class_names {
        return Err(CliError::Data(format!(
            "model classes {:?} differ from manifest classes {:?}",
            config.class_names, manifest.class_names
        )));
    }
    Ok(())
}

pub fn class_index(config: &ModelConfig, name: &str) -> CliResult<usize> {
    config
        .class_index(name)
        .ok_or_else(|| CliError::Usage(format!("unknown class `{name}`; classes are {:?}", config.class_names)))
}

/// `subject_id,label,predicted,prob.<class>...` with `-` for a missing label.
pub fn predictions_csv(preds: &[Prediction], class_names: &[String]) -> String {
    let mut out = String::from("subject_id,label,predicted");
    for c in class_names {
        out.push_str(&format!(",prob.{c}"));
    }
    out.push('\n');
    for p in preds {
        let label = p.label.map_or("-", |l| class_names[l].as_str());
        out.push_str(&format!("{},{},{}", p.subject_id, label, class_names[p.predicted]));
        for v in &p.probs {
            out.push_str(&format!(",{v}"));
        }
        out.push('\n');
    }
    out
}

/// Predicted class name per subject from a predictions report.
pub fn read_predicted(path: &Path) -> CliResult<HashMap<String, String>> {
    let text = std::fs::read_to_string(path).map_err(|e| io_error(path, e))?;
    let mut lines = text.lines();
    let header = lines.next().unwrap_or_default();
    if !header.starts_with("subject_id,label,predicted") {
        return Err(CliError::Data(format!(
            "{} is not a predictions report",
            path.display()
        )));
    }
    let mut out = HashMap::new();
    for (i, line) in lines.enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() < 3 {
            return Err(CliError::Data(format!("{}:{}: too few fields", path.display(), i + 2)));
        }
        out.insert(fields[0].to_string(), fields[2].to_string());
    }
    Ok(out)
}

/// `key = value` lines, blank lines and `#` comments skipped.
pub fn parse_key_values(text: &str) -> HashMap<String, String> {
    text.lines()
        .filter(|l| !l.trim().is_empty() && !l.starts_with('#'))
        .filter_map(|l| l.split_once(" = "))
        .map(|(k, v)| (k.trim().to_string(), v.trim().to_string()))
        .collect()
}
