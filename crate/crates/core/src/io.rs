//! CSV/JSON plumbing shared by the pipeline stages.
//!
//! CSV files are UTF-8, comma separated, RFC-4180 quoted, with a header row.
//! Output files start with one `#` comment line carrying provenance; readers
//! skip `#` lines. Missing numbers are written as `NA`.

use std::fs;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::geo::Point;

pub const TOOL_VERSION: &str = concat!("geosae ", env!("CARGO_PKG_VERSION"));

/// Stamp embedded in every output artifact.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, serde::Deserialize)]
pub struct Provenance {
    pub tool_version: String,
    pub config_hash: String,
    pub master_seed: u64,
}

impl Provenance {
    pub fn new(config_hash: impl Into<String>, master_seed: u64) -> Self {
        Self {
            tool_version: TOOL_VERSION.to_owned(),
            config_hash: config_hash.into(),
            master_seed,
        }
    }

    fn comment_line(&self) -> String {
        format!(
            "# {} config_hash={} master_seed={}\n",
            self.tool_version, self.config_hash, self.master_seed
        )
    }
}

/// Serde adapter writing non-finite floats as `NA` and reading `NA`/empty as NaN.
pub mod na_float {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_finite() {
            s.serialize_f64(*v)
        } else {
            s.serialize_str("NA")
        }
    }

    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Raw {
        Num(f64),
        Text(String),
        Null(()),
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        match Raw::deserialize(d)? {
            Raw::Num(v) => Ok(v),
            Raw::Null(()) => Ok(f64::NAN),
            Raw::Text(s) => {
                let t = s.trim();
                if t.is_empty() || t.eq_ignore_ascii_case("na") || t.eq_ignore_ascii_case("nan") {
                    Ok(f64::NAN)
                } else {
                    t.parse::<f64>().map_err(serde::de::Error::custom)
                }
            }
        }
    }
}

pub fn read_csv<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let mut rdr = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| csv_error(path, e))?;
    let mut out = Vec::new();
    for rec in rdr.deserialize() {
        out.push(rec.map_err(|e| csv_error(path, e))?);
    }
    Ok(out)
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    let line = e.position().map(|p| p.line());
    match (line, e.into_kind()) {
        (_, csv::ErrorKind::Io(io)) => Error::io(path, io),
        (Some(line), kind) => Error::parse(path, format!("line {line}: {kind:?}")),
        (None, kind) => Error::parse(path, format!("{kind:?}")),
    }
}

/// Serializes rows to CSV bytes (with provenance comment when given).
pub fn csv_bytes<T: Serialize>(rows: &[T], provenance: Option<&Provenance>) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    if let Some(p) = provenance {
        buf.extend_from_slice(p.comment_line().as_bytes());
    }
    {
        let mut w = csv::WriterBuilder::new().has_headers(true).from_writer(&mut buf);
        for r in rows {
            w.serialize(r)
                .map_err(|e| Error::InvalidInput(format!("CSV serialization: {e}")))?;
        }
        w.flush().map_err(|e| Error::io("<buffer>", e))?;
    }
    Ok(buf)
}

/// Pretty JSON with a trailing newline.
pub fn json_bytes<T: Serialize>(value: &T) -> Result<Vec<u8>> {
    let mut v = serde_json::to_vec_pretty(value)
        .map_err(|e| Error::InvalidInput(format!("JSON serialization: {e}")))?;
    v.push(b'\n');
    Ok(v)
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::parse(path, e.to_string()))
}

/// Files staged in memory and written only once everything has been computed.
#[derive(Debug, Default)]
pub struct OutputSet {
    files: Vec<(PathBuf, Vec<u8>)>,
}

impl OutputSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, relative: impl Into<PathBuf>, bytes: Vec<u8>) {
        self.files.push((relative.into(), bytes));
    }

    pub fn add_csv<T: Serialize>(&mut self, relative: &str, rows: &[T], p: &Provenance) -> Result<()> {
        self.add(relative, csv_bytes(rows, Some(p))?);
        Ok(())
    }

    pub fn add_json<T: Serialize>(&mut self, relative: &str, value: &T) -> Result<()> {
        self.add(relative, json_bytes(value)?);
        Ok(())
    }

    pub fn paths(&self) -> impl Iterator<Item = &Path> {
        self.files.iter().map(|(p, _)| p.as_path())
    }

    pub fn get(&self, relative: &str) -> Option<&[u8]> {
        self.files
            .iter()
            .find(|(p, _)| p == Path::new(relative))
            .map(|(_, b)| b.as_slice())
    }

    pub fn write_all(&self, dir: &Path) -> Result<Vec<PathBuf>> {
        let mut written = Vec::with_capacity(self.files.len());
        for (rel, bytes) in &self.files {
            let path = dir.join(rel);
            if let Some(parent) = path.parent() {
                fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
            }
            fs::write(&path, bytes).map_err(|e| Error::io(&path, e))?;
            written.push(path);
        }
        Ok(written)
    }
}

/// Point-supported observation `x, y, value`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, serde::Deserialize)]
pub struct GridRow {
    pub x: f64,
    pub y: f64,
    pub value: f64,
}

pub fn read_grid_csv(path: &Path) -> Result<(Vec<Point>, Vec<f64>)> {
    let rows: Vec<GridRow> = read_csv(path)?;
    if rows.is_empty() {
        return Err(Error::parse(path, "grid file has no rows"));
    }
    for (k, r) in rows.iter().enumerate() {
        if !(r.x.is_finite() && r.y.is_finite() && r.value.is_finite()) {
            return Err(Error::parse(path, format!("row {}: non-finite value", k + 1)));
        }
    }
    Ok((
        rows.iter().map(|r| Point::new(r.x, r.y)).collect(),
        rows.iter().map(|r| r.value).collect(),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde::Deserialize;

    #[derive(Debug, Serialize, Deserialize, PartialEq)]
    struct Row {
        id: String,
        #[serde(with = "na_float")]
        v: f64,
    }

    #[test]
    fn csv_roundtrip_with_provenance_and_na() {
        let rows = vec![
            Row { id: "a,b".into(), v: 1.5 },
            Row { id: "c".into(), v: f64::NAN },
        ];
        let p = Provenance::new("abc", 42);
        let bytes = csv_bytes(&rows, Some(&p)).unwrap();
        let text = String::from_utf8(bytes.clone()).unwrap();
        assert!(text.starts_with("# geosae"));
        assert!(text.contains("\"a,b\",1.5"));
        assert!(text.contains("c,NA"));
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("r.csv");
        fs::write(&path, bytes).unwrap();
        let back: Vec<Row> = read_csv(&path).unwrap();
        assert_eq!(back[0], rows[0]);
        assert!(back[1].v.is_nan());
    }

    #[test]
    fn bad_csv_reports_line() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("g.csv");
        fs::write(&path, "x,y,value\n1,2,3\n1,oops,3\n").unwrap();
        let err = read_grid_csv(&path).unwrap_err().to_string();
        assert!(err.contains("line 3"), "{err}");
    }
}
