//! Submission CSV: `id,label` or `id,label_1,label_3`, LF line endings.

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::path::Path;

use abuse_detect_core::corpus::LabelKey;
use abuse_detect_core::{Error, Result};

/// Column name for a head: `label` for single-head runs, `label_N` otherwise.
pub fn column_names(heads: &[LabelKey]) -> Vec<String> {
    if heads.len() == 1 {
        vec!["label".into()]
    } else {
        heads.iter().map(|k| format!("label_{}", k.number())).collect()
    }
}

/// Label key a column refers to; a bare `label` means question 1.
pub fn column_key(name: &str) -> Result<LabelKey> {
    match name {
        "label" => Ok(LabelKey::Q1),
        other => other
            .strip_prefix("label_")
            .ok_or_else(|| Error::Config(format!("unexpected column `{other}`")))?
            .parse(),
    }
}

pub fn render(ids: &[String], heads: &[LabelKey], labels: &[Vec<u8>]) -> Result<String> {
    let mut out = String::from("id");
    for c in column_names(heads) {
        out.push(',');
        out.push_str(&c);
    }
    out.push('\n');
    for (i, id) in ids.iter().enumerate() {
        if id.contains([',', '"', '\n', '\r']) || id != id.trim() {
            return Err(Error::DataIntegrity(format!(
                "id `{id}` cannot be written to the submission file"
            )));
        }
        out.push_str(id);
        for head in labels {
            out.push(',');
            out.push_str(&head[i].to_string());
        }
        out.push('\n');
    }
    Ok(out)
}

pub fn write(path: &Path, ids: &[String], heads: &[LabelKey], labels: &[Vec<u8>]) -> Result<()> {
    let text = render(ids, heads, labels)?;
    fs::write(path, text).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

/// Labels keyed by column name, then by id (in file order).
#[derive(Debug, PartialEq)]
pub struct LabelTable {
    pub ids: Vec<String>,
    pub columns: BTreeMap<String, Vec<u8>>,
}

pub fn read(path: &Path) -> Result<LabelTable> {
    let location = |line: u64| format!("{}:{line}", path.display());
    let mut reader = csv::Reader::from_path(path).map_err(|e| Error::Parse {
        location: path.display().to_string(),
        message: e.to_string(),
    })?;
    let headers = reader
        .headers()
        .map_err(|e| Error::Parse {
            location: location(1),
            message: e.to_string(),
        })?
        .clone();
    if headers.get(0) != Some("id") || headers.len() < 2 {
        return Err(Error::Schema {
            path: path.display().to_string(),
            column: "id".into(),
        });
    }
    let names: Vec<String> = headers.iter().skip(1).map(str::to_string).collect();
    for n in &names {
        column_key(n)?;
    }
    let mut ids = Vec::new();
    let mut seen = HashSet::new();
    let mut columns: BTreeMap<String, Vec<u8>> = names.iter().map(|n| (n.clone(), Vec::new())).collect();
    for record in reader.records() {
        let record = record.map_err(|e| Error::Parse {
            location: path.display().to_string(),
            message: e.to_string(),
        })?;
        let line = record.position().map_or(0, |p| p.line());
        let id = record[0].to_string();
        if !seen.insert(id.clone()) {
            return Err(Error::DataIntegrity(format!("{}: duplicate id {id}", location(line))));
        }
        for (name, cell) in names.iter().zip(record.iter().skip(1)) {
            let v = match cell.trim() {
                "0" => 0,
                "1" => 1,
                other => {
                    return Err(Error::Parse {
                        location: location(line),
                        message: format!("label `{other}` in column {name} is not 0 or 1"),
                    })
                }
            };
            columns.get_mut(name).expect("known column").push(v);
        }
        ids.push(id);
    }
    Ok(LabelTable { ids, columns })
}
