use std::io::Read;
use std::path::Path;

use super::{canonical_name, FeatureKind, Record, Value};
use crate::error::{Error, Result};

/// Column entry of a schema file: `name,kind[,min,max]`.
#[derive(Clone, Debug, PartialEq)]
pub struct SchemaEntry {
    pub name: String,
    pub kind: FeatureKind,
    pub range: Option<(f64, f64)>,
}

#[derive(Clone, Debug)]
pub struct CsvTable {
    pub header: Vec<String>,
    pub rows: Vec<Record>,
}

fn is_missing(cell: &str) -> bool {
    let c = cell.trim();
    c.is_empty()
        || c.eq_ignore_ascii_case("na")
        || c.eq_ignore_ascii_case("n/a")
        || c.eq_ignore_ascii_case("null")
        || c.eq_ignore_ascii_case("nan")
}

/// Read an RFC 4180 style CSV whose first row is the header.
pub fn read_csv<R: Read>(reader: R) -> Result<CsvTable> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
    let header: Vec<String> = rdr
        .headers()
        .map_err(|e| csv_error(&e))?
        .iter()
        .map(|h| h.trim().to_string())
        .collect();
    if header.is_empty() || header.iter().all(|h| h.is_empty()) {
        return Err(Error::Ingest("CSV header is empty".into()));
    }
    let mut rows = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| csv_error(&e))?;
        rows.push(
            rec.iter()
                .map(|c| (!is_missing(c)).then(|| Value::Text(c.trim().to_string())))
                .collect(),
        );
    }
    Ok(CsvTable { header, rows })
}

fn csv_error(e: &csv::Error) -> Error {
    match e.kind() {
        csv::ErrorKind::UnequalLengths { pos, expected_len, len } => Error::Ingest(format!(
            "line {}: expected {expected_len} fields, found {len}",
            pos.as_ref().map(|p| p.line()).unwrap_or(0)
        )),
        _ => match e.position() {
            Some(p) => Error::Ingest(format!("line {}: {e}", p.line())),
            None => Error::Ingest(e.to_string()),
        },
    }
}

/// A column is numeric when every non-missing value parses as a decimal number.
pub fn infer_schema(table: &CsvTable) -> Vec<(String, FeatureKind)> {
    table
        .header
        .iter()
        .enumerate()
        .map(|(col, name)| {
            let numeric = table.rows.iter().all(|r| match &r[col] {
                Some(Value::Text(s)) => s.parse::<f64>().is_ok(),
                _ => true,
            });
            let kind = if numeric { FeatureKind::Numeric } else { FeatureKind::Categorical };
            (name.clone(), kind)
        })
        .collect()
}

/// Parse a schema file. Blank lines and lines starting with `#` are ignored.
pub fn read_schema_file(path: &Path) -> Result<Vec<SchemaEntry>> {
    let text = std::fs::read_to_string(path)?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let parts: Vec<&str> = line.split(',').map(str::trim).collect();
        let err = |msg: &str| Error::Ingest(format!("schema line {}: {msg}", i + 1));
        if out.is_empty() && parts.len() >= 2 && parts[0].eq_ignore_ascii_case("name") && parts[1].eq_ignore_ascii_case("kind") {
            continue;
        }
        let (name, kind, range) = match parts.as_slice() {
            [name, kind] => (*name, kind.parse()?, None),
            [name, kind, lo, hi] => {
                let lo: f64 = lo.parse().map_err(|_| err("invalid range minimum"))?;
                let hi: f64 = hi.parse().map_err(|_| err("invalid range maximum"))?;
                (*name, kind.parse()?, Some((lo, hi)))
            }
            _ => return Err(err("expected `name,kind` or `name,kind,min,max`")),
        };
        if name.is_empty() {
            return Err(err("empty column name"));
        }
        out.push(SchemaEntry { name: name.to_string(), kind, range });
    }
    Ok(out)
}

impl CsvTable {
    /// Reorder the columns to follow `schema`. Columns missing from the
    /// table are an error; extra table columns are dropped.
    pub fn project(&self, schema: &[SchemaEntry]) -> Result<Vec<Record>> {
        let idx: Vec<usize> = schema
            .iter()
            .map(|e| {
                let canon = canonical_name(&e.name);
                self.header
                    .iter()
                    .position(|h| canonical_name(h) == canon)
                    .ok_or_else(|| Error::Ingest(format!("schema column `{}` not in CSV header", e.name)))
            })
            .collect::<Result<_>>()?;
        Ok(self
            .rows
            .iter()
            .map(|r| idx.iter().map(|&i| r[i].clone()).collect())
            .collect())
    }
}
