//! Trace corpus on disk: one `sample_NNNNN.json` [`TraceRecord`] per sample.

use std::path::{Path, PathBuf};

use super::TraceRecord;
use crate::error::{invalid, Result};

pub fn write_corpus(dir: &Path, records: &[TraceRecord]) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir)?;
    records
        .iter()
        .enumerate()
        .map(|(i, r)| {
            let path = dir.join(format!("sample_{i:05}.json"));
            std::fs::write(&path, serde_json::to_vec(r)?)?;
            Ok(path)
        })
        .collect()
}

/// Reads every `*.json` record in `dir`, in file-name order.
pub fn read_corpus(dir: &Path) -> Result<Vec<TraceRecord>> {
    let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "json"))
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(invalid(format!("no trace records in {}", dir.display())));
    }
    paths
        .iter()
        .map(|p| {
            let rec: TraceRecord = serde_json::from_slice(&std::fs::read(p)?)?;
            rec.validate()?;
            Ok(rec)
        })
        .collect()
}
