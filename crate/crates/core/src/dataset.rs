//! Persona dataset files: CSV (with header) or JSONL, one entry per row.
//!
//! Columns are matched case-insensitively after trimming. `id` is optional
//! and synthesized as `row-N` (1-based data row) when absent. Unknown
//! columns are ignored.

use std::collections::HashMap;
use std::fmt;
use std::fs::File;
use std::io::{self, BufRead, BufReader, Read, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PersonaEntry {
    pub id: String,
    pub demographics: String,
    pub difficulties: String,
    pub query: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Field {
    Demographics,
    Difficulties,
    Query,
}

impl Field {
    pub const ALL: [Field; 3] = [Field::Demographics, Field::Difficulties, Field::Query];

    pub fn name(self) -> &'static str {
        match self {
            Field::Demographics => "demographics",
            Field::Difficulties => "difficulties",
            Field::Query => "query",
        }
    }

    fn aliases(self) -> &'static [&'static str] {
        match self {
            Field::Demographics => &["demographics", "demographic"],
            Field::Difficulties => &["difficulties", "difficulty"],
            Field::Query => &["query", "queries", "queries (advice seeking)"],
        }
    }

    fn matches(self, column: &str) -> bool {
        let c = column.trim().to_lowercase();
        self.aliases().contains(&c.as_str())
    }
}

impl fmt::Display for Field {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl PersonaEntry {
    pub fn field(&self, field: Field) -> &str {
        match field {
            Field::Demographics => &self.demographics,
            Field::Difficulties => &self.difficulties,
            Field::Query => &self.query,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DatasetFormat {
    Csv,
    Jsonl,
}

impl DatasetFormat {
    /// Guesses the format from the file extension.
    pub fn from_path(path: &Path) -> Option<Self> {
        match path.extension()?.to_str()?.to_ascii_lowercase().as_str() {
            "csv" => Some(Self::Csv),
            "jsonl" | "ndjson" => Some(Self::Jsonl),
            _ => None,
        }
    }
}

impl FromStr for DatasetFormat {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "csv" => Ok(Self::Csv),
            "jsonl" => Ok(Self::Jsonl),
            other => Err(format!("unknown dataset format `{other}` (expected csv or jsonl)")),
        }
    }
}

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("dataset file not found: {0}")]
    NotFound(PathBuf),
    #[error("reading {path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error("CSV header is missing the `{0}` column")]
    MissingColumn(Field),
    #[error("row {row}: missing or empty field `{field}`")]
    MissingField { row: usize, field: String },
    #[error("row {row}: {message}")]
    Malformed { row: usize, message: String },
    #[error("row {row}: duplicate id `{id}` (first seen in row {first_row})")]
    DuplicateId { id: String, row: usize, first_row: usize },
}

/// Loads a dataset, returning entries in file order.
pub fn load_dataset(path: &Path, format: DatasetFormat) -> Result<Vec<PersonaEntry>, DatasetError> {
    read(path, format, Mode::Strict)
}

/// Like [`load_dataset`] but keeps empty fields and duplicate ids so that
/// [`validate_dataset`] can report all of them. Only unreadable or
/// unparsable files fail.
pub fn load_dataset_lenient(path: &Path, format: DatasetFormat) -> Result<Vec<PersonaEntry>, DatasetError> {
    read(path, format, Mode::Lenient)
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum Mode {
    Strict,
    Lenient,
}

fn read(path: &Path, format: DatasetFormat, mode: Mode) -> Result<Vec<PersonaEntry>, DatasetError> {
    let file = File::open(path).map_err(|e| match e.kind() {
        io::ErrorKind::NotFound => DatasetError::NotFound(path.to_path_buf()),
        _ => DatasetError::Io {
            path: path.to_path_buf(),
            source: e,
        },
    })?;
    match format {
        DatasetFormat::Csv => csv_rows(file, mode),
        DatasetFormat::Jsonl => jsonl_rows(BufReader::new(file), mode),
    }
}

pub fn parse_csv<R: Read>(reader: R) -> Result<Vec<PersonaEntry>, DatasetError> {
    csv_rows(reader, Mode::Strict)
}

pub fn parse_jsonl<R: BufRead>(reader: R) -> Result<Vec<PersonaEntry>, DatasetError> {
    jsonl_rows(reader, Mode::Strict)
}

fn csv_rows<R: Read>(reader: R, mode: Mode) -> Result<Vec<PersonaEntry>, DatasetError> {
    let mut rdr = csv::ReaderBuilder::new().flexible(true).from_reader(reader);
    let headers = rdr
        .headers()
        .map_err(|e| DatasetError::Malformed {
            row: 0,
            message: e.to_string(),
        })?
        .clone();

    let find = |f: Field| headers.iter().position(|h| f.matches(h));
    let mut columns = Vec::with_capacity(3);
    for f in Field::ALL {
        columns.push((f, find(f).ok_or(DatasetError::MissingColumn(f))?));
    }
    let id_col = headers.iter().position(|h| h.trim().eq_ignore_ascii_case("id"));

    let mut rows = Vec::new();
    for (i, record) in rdr.records().enumerate() {
        let row = i + 1;
        let record = record.map_err(|e| DatasetError::Malformed {
            row,
            message: e.to_string(),
        })?;
        let mut values: HashMap<Field, String> = HashMap::new();
        for &(f, col) in &columns {
            values.insert(f, record.get(col).unwrap_or("").to_string());
        }
        let id = id_col.and_then(|c| record.get(c)).map(str::to_string);
        rows.push((row, id, values));
    }
    build_entries(rows, mode)
}

fn jsonl_rows<R: BufRead>(reader: R, mode: Mode) -> Result<Vec<PersonaEntry>, DatasetError> {
    let mut rows = Vec::new();
    let mut row = 0;
    for line in reader.lines() {
        let line = line.map_err(|e| DatasetError::Malformed {
            row: row + 1,
            message: e.to_string(),
        })?;
        if line.trim().is_empty() {
            continue;
        }
        row += 1;
        let value: serde_json::Value = serde_json::from_str(&line).map_err(|e| DatasetError::Malformed {
            row,
            message: e.to_string(),
        })?;
        let obj = value.as_object().ok_or_else(|| DatasetError::Malformed {
            row,
            message: "expected a JSON object".into(),
        })?;

        let mut values = HashMap::new();
        let mut id = None;
        for (k, v) in obj {
            let text = match v {
                serde_json::Value::String(s) => s.clone(),
                serde_json::Value::Number(n) => n.to_string(),
                serde_json::Value::Null => continue,
                _ => {
                    if Field::ALL.iter().any(|f| f.matches(k)) || k.trim().eq_ignore_ascii_case("id") {
                        return Err(DatasetError::Malformed {
                            row,
                            message: format!("field `{k}` must be a string"),
                        });
                    }
                    continue;
                }
            };
            if k.trim().eq_ignore_ascii_case("id") {
                id = Some(text);
            } else if let Some(f) = Field::ALL.iter().find(|f| f.matches(k)) {
                values.insert(*f, text);
            }
        }
        rows.push((row, id, values));
    }
    build_entries(rows, mode)
}

fn build_entries(
    rows: Vec<(usize, Option<String>, HashMap<Field, String>)>,
    mode: Mode,
) -> Result<Vec<PersonaEntry>, DatasetError> {
    let mut seen: HashMap<String, usize> = HashMap::new();
    let mut entries = Vec::with_capacity(rows.len());
    for (row, id, mut values) in rows {
        let mut take = |f: Field| -> Result<String, DatasetError> {
            let v = values.remove(&f).unwrap_or_default();
            let v = v.trim();
            if v.is_empty() && mode == Mode::Strict {
                Err(DatasetError::MissingField {
                    row,
                    field: f.name().to_string(),
                })
            } else {
                Ok(v.to_string())
            }
        };
        let demographics = take(Field::Demographics)?;
        let difficulties = take(Field::Difficulties)?;
        let query = take(Field::Query)?;
        let id = match id.as_deref().map(str::trim) {
            Some(s) if !s.is_empty() => s.to_string(),
            _ => format!("row-{row}"),
        };
        if let (Some(&first_row), Mode::Strict) = (seen.get(&id), mode) {
            return Err(DatasetError::DuplicateId { id, row, first_row });
        }
        seen.insert(id.clone(), row);
        entries.push(PersonaEntry {
            id,
            demographics,
            difficulties,
            query,
        });
    }
    Ok(entries)
}

pub fn write_dataset<W: Write>(writer: W, entries: &[PersonaEntry], format: DatasetFormat) -> io::Result<()> {
    match format {
        DatasetFormat::Csv => {
            let mut w = csv::Writer::from_writer(writer);
            w.write_record(["id", "demographics", "difficulties", "query"])?;
            for e in entries {
                w.write_record([&e.id, &e.demographics, &e.difficulties, &e.query])?;
            }
            w.flush()
        }
        DatasetFormat::Jsonl => {
            let mut w = writer;
            for e in entries {
                serde_json::to_writer(&mut w, e)?;
                w.write_all(b"\n")?;
            }
            w.flush()
        }
    }
}

/// SHA-256 over the canonical JSONL serialization of the entries.
pub fn dataset_hash(entries: &[PersonaEntry]) -> String {
    let mut buf = Vec::new();
    write_dataset(&mut buf, entries, DatasetFormat::Jsonl).expect("writing to memory");
    hex::encode(Sha256::digest(&buf))
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Violation {
    DuplicateId { id: String, indices: Vec<usize> },
    EmptyField { index: usize, id: String, field: Field },
    EmptyId { index: usize },
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::DuplicateId { id, indices } => {
                write!(f, "duplicate id `{id}` at entries {indices:?}")
            }
            Violation::EmptyField { index, id, field } => {
                write!(f, "entry {index} (`{id}`): field `{field}` is empty")
            }
            Violation::EmptyId { index } => write!(f, "entry {index}: empty id"),
        }
    }
}

/// Lists every invariant violation; an empty list means the dataset is valid.
/// Indices are 0-based positions in `entries`.
pub fn validate_dataset(entries: &[PersonaEntry]) -> Vec<Violation> {
    let mut violations = Vec::new();
    let mut by_id: Vec<(&str, Vec<usize>)> = Vec::new();
    for (index, e) in entries.iter().enumerate() {
        if e.id.trim().is_empty() {
            violations.push(Violation::EmptyId { index });
        }
        for field in Field::ALL {
            if e.field(field).trim().is_empty() {
                violations.push(Violation::EmptyField {
                    index,
                    id: e.id.clone(),
                    field,
                });
            }
        }
        match by_id.iter_mut().find(|(id, _)| *id == e.id) {
            Some((_, idx)) => idx.push(index),
            None => by_id.push((&e.id, vec![index])),
        }
    }
    violations.extend(
        by_id
            .into_iter()
            .filter(|(_, idx)| idx.len() > 1)
            .map(|(id, indices)| Violation::DuplicateId {
                id: id.to_string(),
                indices,
            }),
    );
    violations
}
