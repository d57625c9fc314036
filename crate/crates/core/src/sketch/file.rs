use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{infer_schema, ingest_table, read_csv, read_schema_file, DatasetSketch, IngestOptions};
use crate::error::{Error, Result};

pub const SKETCH_FORMAT: &str = "fitsearch-sketch";
pub const SKETCH_FORMAT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Envelope<S> {
    format: String,
    version: u32,
    sketch: S,
}

impl DatasetSketch {
    pub fn to_json(&self) -> Result<String> {
        let env = Envelope { format: SKETCH_FORMAT.into(), version: SKETCH_FORMAT_VERSION, sketch: self };
        serde_json::to_string(&env).map_err(|e| Error::Invalid(e.to_string()))
    }

    /// Parse a sketch file and check its structural invariants.
    pub fn from_json(text: &str) -> Result<Self> {
        let env: Envelope<serde_json::Value> =
            serde_json::from_str(text).map_err(|e| Error::Corruption(format!("sketch file: {e}")))?;
        if env.format != SKETCH_FORMAT {
            return Err(Error::Format(format!("not a sketch file (format `{}`)", env.format)));
        }
        if env.version != SKETCH_FORMAT_VERSION {
            return Err(Error::Format(format!("sketch format version {} is not supported", env.version)));
        }
        let sketch: DatasetSketch =
            serde_json::from_value(env.sketch).map_err(|e| Error::Corruption(format!("sketch file: {e}")))?;
        sketch.validate()?;
        Ok(sketch)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        f.write_all(self.to_json()?.as_bytes())?;
        f.write_all(b"\n")?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut text = String::new();
        std::fs::File::open(path)?.read_to_string(&mut text)?;
        Self::from_json(&text)
    }
}

/// Sketch a CSV file. Without a schema file every column is kept and its
/// kind is inferred; with one, only the listed columns are kept and declared
/// ranges are added to `opts`.
pub fn sketch_csv_file(
    dataset_id: &str,
    csv_path: &Path,
    schema_path: Option<&Path>,
    opts: &IngestOptions,
) -> Result<DatasetSketch> {
    let table = read_csv(std::fs::File::open(csv_path)?)?;
    let mut opts = opts.clone();
    let (rows, schema) = match schema_path {
        Some(p) => {
            let entries = read_schema_file(p)?;
            for e in &entries {
                if let Some(r) = e.range {
                    opts.ranges.insert(super::canonical_name(&e.name), r);
                }
            }
            let rows = table.project(&entries)?;
            (rows, entries.into_iter().map(|e| (e.name, e.kind)).collect())
        }
        None => {
            let schema = infer_schema(&table);
            (table.rows, schema)
        }
    };
    ingest_table(dataset_id, &rows, &schema, &opts)
}
