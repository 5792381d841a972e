//! Text artifacts. Every file starts with one header line naming the artifact
//! version, the config hash and the seed.

use std::fmt::{Display, Write as _};
use std::path::Path;

use crate::config::ExperimentConfig;
use crate::error::{CliError, CliResult};

pub const ARTIFACT_VERSION: &str = concat!("nodule-cli ", env!("CARGO_PKG_VERSION"));

pub fn header(config: &ExperimentConfig) -> String {
    format!("# {ARTIFACT_VERSION} config_sha256={} seed={}\n", config.hash(), config.seed)
}

/// Ordered `key = value` lines.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Record {
    lines: Vec<(String, String)>,
}

impl Record {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, key: impl Into<String>, value: impl Display) -> &mut Self {
        self.lines.push((key.into(), value.to_string()));
        self
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.lines.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    pub fn render(&self) -> String {
        let mut out = String::new();
        for (k, v) in &self.lines {
            let _ = writeln!(out, "{k} = {v}");
        }
        out
    }
}

pub fn fmt_f64(v: f64) -> String {
    format!("{v:.6}")
}

pub fn write_artifact(path: &Path, config: &ExperimentConfig, body: &str) -> CliResult<()> {
    std::fs::write(path, header(config) + body).map_err(|e| CliError::io(path, e))
}

pub fn ensure_dir(dir: &Path) -> CliResult<()> {
    std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))
}

/// Last comma-separated field of each data row. `#` lines and one leading
/// non-numeric row (a column header) are skipped.
pub fn read_column(path: &Path) -> CliResult<Vec<f64>> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    let mut values = Vec::new();
    let mut first = true;
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let field = line.rsplit(',').next().unwrap_or("").trim();
        match field.parse::<f64>() {
            Ok(v) => values.push(v),
            Err(_) if first => {}
            Err(_) => {
                return Err(CliError::Data(format!(
                    "{}: line {}: `{field}` is not a number",
                    path.display(),
                    n + 1
                )))
            }
        }
        first = false;
    }
    if values.is_empty() {
        return Err(CliError::Data(format!("{}: no values", path.display())));
    }
    Ok(values)
}

pub fn read_labels(path: &Path) -> CliResult<Vec<u8>> {
    read_column(path)?
        .into_iter()
        .map(|v| {
            if v == 0.0 || v == 1.0 {
                Ok(v as u8)
            } else {
                Err(CliError::Data(format!("{}: label {v} is not 0 or 1", path.display())))
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn column_reader_skips_headers() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("s.csv");
        std::fs::write(&p, "# header\nid,score\n0,0.5\n1,0.25\n").unwrap();
        assert_eq!(read_column(&p).unwrap(), vec![0.5, 0.25]);
        std::fs::write(&p, "id,label\n0,1\n1,2\n").unwrap();
        assert!(read_labels(&p).is_err());
        std::fs::write(&p, "0.1\nbad\n").unwrap();
        assert!(read_column(&p).is_err());
    }

    #[test]
    fn header_names_hash_and_seed() {
        let c = ExperimentConfig::default();
        let h = header(&c);
        assert!(h.starts_with("# nodule-cli "));
        assert!(h.contains(&c.hash()));
        assert!(h.trim_end().ends_with("seed=0"));
    }
}
