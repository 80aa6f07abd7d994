use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::CliError;

/// Named output files held in memory until the whole run has succeeded.
#[derive(Debug, Default)]
pub struct Artifacts {
    files: Vec<(String, Vec<u8>)>,
}

fn runtime(e: impl std::fmt::Display) -> CliError {
    CliError::Runtime(e.to_string())
}

pub fn json_bytes<T: Serialize + ?Sized>(value: &T) -> Result<Vec<u8>, CliError> {
    let mut bytes = serde_json::to_vec_pretty(value).map_err(runtime)?;
    bytes.push(b'\n');
    Ok(bytes)
}

impl Artifacts {
    pub fn names(&self) -> Vec<String> {
        self.files.iter().map(|(n, _)| n.clone()).collect()
    }

    pub fn add(&mut self, name: &str, bytes: Vec<u8>) {
        self.files.push((name.to_string(), bytes));
    }

    pub fn json<T: Serialize + ?Sized>(&mut self, name: &str, value: &T) -> Result<(), CliError> {
        let bytes = json_bytes(value)?;
        self.add(name, bytes);
        Ok(())
    }

    /// CSV with a header taken from the row type's field names.
    pub fn csv<T: Serialize>(&mut self, name: &str, rows: impl IntoIterator<Item = T>) -> Result<(), CliError> {
        let mut w = csv::Writer::from_writer(Vec::new());
        for row in rows {
            w.serialize(row).map_err(runtime)?;
        }
        self.add(name, w.into_inner().map_err(runtime)?);
        Ok(())
    }

    /// CSV with an explicit header and pre-formatted cells.
    pub fn csv_records(&mut self, name: &str, header: &[String], rows: &[Vec<String>]) -> Result<(), CliError> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(header).map_err(runtime)?;
        for row in rows {
            w.write_record(row).map_err(runtime)?;
        }
        self.add(name, w.into_inner().map_err(runtime)?);
        Ok(())
    }

    /// Writes every file into `dir`. On any failure the files written so far
    /// (and `dir`, if this call created it and it is empty) are removed.
    pub fn persist(&self, dir: &Path) -> Result<Vec<PathBuf>, CliError> {
        let created = !dir.exists();
        let io = |path: &Path, source| CliError::Io { path: path.to_path_buf(), source };
        fs::create_dir_all(dir).map_err(|e| io(dir, e))?;
        let mut written = Vec::new();
        for (name, bytes) in &self.files {
            let path = dir.join(name);
            if let Err(e) = fs::write(&path, bytes) {
                for p in &written {
                    let _ = fs::remove_file(p);
                }
                let _ = fs::remove_file(&path);
                if created {
                    let _ = fs::remove_dir(dir);
                }
                return Err(io(&path, e));
            }
            written.push(path);
        }
        Ok(written)
    }
}

pub fn fmt_f64(v: f64) -> String {
    v.to_string()
}

pub fn fmt_opt(v: Option<f64>) -> String {
    v.map(fmt_f64).unwrap_or_default()
}
