//! On-disk formats: headerless CSV matrices and versioned JSON documents.
//!
//! Floats are written with Rust's shortest round-trip formatting, so reading
//! an artifact back yields bit-identical values.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::surrogate::SurrogateBundle;

pub const SCHEMA_VERSION: u32 = 1;

pub const DOE_FILE: &str = "doe.csv";
pub const TEMPERATURE_FILE: &str = "T.csv";
pub const STRESS_FILE: &str = "S.csv";
pub const BUNDLE_FILE: &str = "bundle.json";
pub const TRAINING_REPORT_FILE: &str = "training.json";
pub const OPTIMIZE_FILE: &str = "optimize.json";
pub const HISTORY_FILE: &str = "optimize_history.csv";
pub const VALIDATION_FILE: &str = "validation.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Document<T> {
    schema_version: u32,
    kind: String,
    data: T,
}

fn ensure_parent(path: &Path) -> Result<()> {
    match path.parent() {
        Some(dir) if !dir.as_os_str().is_empty() => fs::create_dir_all(dir).map_err(|e| Error::io(dir, e)),
        _ => Ok(()),
    }
}

fn read_to_string(path: &Path, hint: &str) -> Result<String> {
    fs::read_to_string(path).map_err(|e| {
        if e.kind() == std::io::ErrorKind::NotFound {
            Error::MissingArtifact {
                path: path.to_path_buf(),
                hint: hint.to_string(),
            }
        } else {
            Error::io(path, e)
        }
    })
}

/// Writes `rows` as comma-separated values, one row per line, no header.
pub fn write_csv<R: AsRef<[f64]>>(path: &Path, rows: &[R]) -> Result<()> {
    ensure_parent(path)?;
    let mut out = String::new();
    for row in rows {
        let mut first = true;
        for v in row.as_ref() {
            if !first {
                out.push(',');
            }
            first = false;
            out.push_str(&v.to_string());
        }
        out.push('\n');
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(out.as_bytes()).map_err(|e| Error::io(path, e))
}

/// Reads a headerless numeric CSV; all rows must have the same width.
pub fn read_csv(path: &Path, hint: &str) -> Result<Vec<Vec<f64>>> {
    let text = read_to_string(path, hint)?;
    let malformed = |reason: String| Error::Malformed {
        what: path.display().to_string(),
        reason,
    };
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let row = line
            .split(',')
            .map(|t| {
                t.trim()
                    .parse::<f64>()
                    .map_err(|e| malformed(format!("line {}: {t:?}: {e}", lineno + 1)))
            })
            .collect::<Result<Vec<f64>>>()?;
        if let Some(first) = rows.first() {
            if first.len() != row.len() {
                return Err(malformed(format!(
                    "line {} has {} columns, expected {}",
                    lineno + 1,
                    row.len(),
                    first.len()
                )));
            }
        }
        rows.push(row);
    }
    Ok(rows)
}

/// Writes `data` wrapped in a `{schema_version, kind, data}` envelope.
pub fn write_json<T: Serialize>(path: &Path, kind: &str, data: &T) -> Result<()> {
    ensure_parent(path)?;
    let doc = Document {
        schema_version: SCHEMA_VERSION,
        kind: kind.to_string(),
        data,
    };
    let mut text = serde_json::to_string_pretty(&doc)?;
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Reads a document written by [`write_json`], checking version and kind.
pub fn read_json<T: DeserializeOwned>(path: &Path, kind: &str, hint: &str) -> Result<T> {
    let text = read_to_string(path, hint)?;
    let doc: Document<T> = serde_json::from_str(&text).map_err(|e| Error::Malformed {
        what: path.display().to_string(),
        reason: e.to_string(),
    })?;
    if doc.schema_version != SCHEMA_VERSION {
        return Err(Error::Malformed {
            what: path.display().to_string(),
            reason: format!(
                "schema version {} is not supported (expected {SCHEMA_VERSION})",
                doc.schema_version
            ),
        });
    }
    if doc.kind != kind {
        return Err(Error::Malformed {
            what: path.display().to_string(),
            reason: format!("expected a {kind} document, found {}", doc.kind),
        });
    }
    Ok(doc.data)
}

pub fn save_bundle(path: &Path, b: &SurrogateBundle) -> Result<()> {
    write_json(path, "surrogate-bundle", b)
}

pub fn load_bundle(path: &Path) -> Result<SurrogateBundle> {
    let mut b: SurrogateBundle = read_json(path, "surrogate-bundle", "run `train` first")?;
    b.restore();
    b.validate().map_err(|e| Error::Malformed {
        what: path.display().to_string(),
        reason: e.to_string(),
    })?;
    Ok(b)
}

/// Plain sample file: numbers separated by whitespace, commas or newlines.
pub fn read_samples(path: &Path) -> Result<Vec<f64>> {
    let text = read_to_string(path, "expected a file of numeric samples")?;
    text.split(|c: char| c.is_whitespace() || c == ',')
        .filter(|t| !t.is_empty())
        .map(|t| {
            t.parse::<f64>().map_err(|e| Error::Malformed {
                what: path.display().to_string(),
                reason: format!("{t:?}: {e}"),
            })
        })
        .collect()
}

pub fn artifact(dir: &Path, name: &str) -> PathBuf {
    dir.join(name)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn csv_roundtrip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.csv");
        let rows = vec![vec![0.1, 1.0 / 3.0, -2.5e-300], vec![1e22, f64::MIN_POSITIVE, 7.0]];
        write_csv(&p, &rows).unwrap();
        assert_eq!(read_csv(&p, "").unwrap(), rows);
    }

    #[test]
    fn ragged_csv_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("bad.csv");
        fs::write(&p, "1,2\n3\n").unwrap();
        assert!(matches!(read_csv(&p, ""), Err(Error::Malformed { .. })));
        fs::write(&p, "1,x\n").unwrap();
        assert!(matches!(read_csv(&p, ""), Err(Error::Malformed { .. })));
    }

    #[test]
    fn missing_file_is_reported_as_artifact() {
        let err = read_csv(Path::new("/nonexistent/T.csv"), "run simulate").unwrap_err();
        assert!(matches!(err, Error::MissingArtifact { .. }));
        assert!(err.to_string().contains("run simulate"));
    }

    #[test]
    fn json_envelope_checks_kind_and_version() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.json");
        write_json(&p, "numbers", &vec![1.5, 2.5]).unwrap();
        assert_eq!(read_json::<Vec<f64>>(&p, "numbers", "").unwrap(), vec![1.5, 2.5]);
        assert!(read_json::<Vec<f64>>(&p, "other", "").is_err());
        let text = fs::read_to_string(&p)
            .unwrap()
            .replace("\"schema_version\": 1", "\"schema_version\": 99");
        fs::write(&p, text).unwrap();
        assert!(read_json::<Vec<f64>>(&p, "numbers", "").is_err());
    }

    #[test]
    fn sample_file_parsing() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("s.txt");
        fs::write(&p, "1 2\n3,4\n\n5\n").unwrap();
        assert_eq!(read_samples(&p).unwrap(), vec![1.0, 2.0, 3.0, 4.0, 5.0]);
    }
}
