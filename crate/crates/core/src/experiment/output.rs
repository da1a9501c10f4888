use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::error::Result;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TablePaths {
    pub csv: PathBuf,
    pub json: PathBuf,
}

/// Writes `rows` to `<dir>/<name>.csv` and a JSON array mirror
/// `<dir>/<name>.json`.
pub fn write_table<T: Serialize>(dir: &Path, name: &str, rows: &[T]) -> Result<TablePaths> {
    std::fs::create_dir_all(dir)?;
    let csv_path = dir.join(format!("{name}.csv"));
    let json_path = dir.join(format!("{name}.json"));
    let mut w = csv::Writer::from_path(&csv_path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    let mut json = serde_json::to_string_pretty(rows)?;
    json.push('\n');
    std::fs::write(&json_path, json)?;
    Ok(TablePaths {
        csv: csv_path,
        json: json_path,
    })
}
