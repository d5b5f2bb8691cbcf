//! Logit records stored as JSON Lines.
//!
//! ```text
//! {"format":"caia-logits/1","num_classes":3}
//! {"tuple_id":"t0","value":"female","logits":[0.1,-2.0,1.5]}
//! ```
//!
//! Rows are matched by `(tuple_id, value)`, never by position.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{ImageQuery, ModelMetadata, Oracle};
use crate::error::{Error, Result};

pub const LOGIT_FILE_FORMAT: &str = "caia-logits/1";

#[derive(Serialize, Deserialize)]
struct Header {
    format: String,
    num_classes: usize,
}

#[derive(Serialize, Deserialize)]
struct Record<'a> {
    #[serde(borrow)]
    tuple_id: std::borrow::Cow<'a, str>,
    #[serde(borrow)]
    value: std::borrow::Cow<'a, str>,
    logits: std::borrow::Cow<'a, [f64]>,
}

#[derive(Debug)]
pub struct FileOracle {
    path: PathBuf,
    num_classes: usize,
    records: HashMap<(String, String), Vec<f64>>,
}

impl FileOracle {
    pub fn open(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let mut lines = BufReader::new(file).lines();
        let header_line = match lines.next() {
            Some(line) => line.map_err(|e| Error::io(path, e))?,
            None => return Err(Error::Config(format!("{}: missing header", path.display()))),
        };
        let header: Header = serde_json::from_str(&header_line)
            .map_err(|e| Error::Config(format!("{}: bad header line: {e}", path.display())))?;
        if header.format != LOGIT_FILE_FORMAT {
            return Err(Error::Config(format!(
                "{}: format `{}`, expected `{LOGIT_FILE_FORMAT}`",
                path.display(),
                header.format
            )));
        }
        let mut records = HashMap::new();
        for (n, line) in lines.enumerate() {
            let line = line.map_err(|e| Error::io(path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            let lineno = n + 2;
            let rec: Record = serde_json::from_str(&line)
                .map_err(|e| Error::malformed_file(path, format!("line {lineno}: {e}")))?;
            if rec.logits.len() != header.num_classes {
                return Err(Error::malformed_file(
                    path,
                    format!(
                        "line {lineno}: {} logits, header declares {} classes",
                        rec.logits.len(),
                        header.num_classes
                    ),
                ));
            }
            let key = (rec.tuple_id.into_owned(), rec.value.into_owned());
            if records.contains_key(&key) {
                return Err(Error::malformed_file(
                    path,
                    format!("line {lineno}: duplicate record ({}, {})", key.0, key.1),
                ));
            }
            records.insert(key, rec.logits.into_owned());
        }
        Ok(Self {
            path: path.to_path_buf(),
            num_classes: header.num_classes,
            records,
        })
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }
}

impl Oracle for FileOracle {
    fn metadata(&self) -> Result<ModelMetadata> {
        Ok(ModelMetadata {
            num_classes: self.num_classes,
            name: format!("{LOGIT_FILE_FORMAT}:{}", self.path.display()),
            input_size: [0, 0],
        })
    }

    fn fetch_rows(&self, queries: &[ImageQuery]) -> Result<Vec<Result<Vec<f64>>>> {
        Ok(queries
            .iter()
            .map(|q| {
                let key = q.key();
                self.records
                    .get(&key)
                    .cloned()
                    .ok_or_else(|| Error::MissingRecords(vec![key]))
            })
            .collect())
    }
}

/// Streams logit records into a file in the format [`FileOracle`] reads.
pub struct LogitFileWriter {
    path: PathBuf,
    num_classes: usize,
    out: BufWriter<File>,
}

impl LogitFileWriter {
    pub fn create(path: impl AsRef<Path>, num_classes: usize) -> Result<Self> {
        let path = path.as_ref().to_path_buf();
        let file = File::create(&path).map_err(|e| Error::io(&path, e))?;
        let mut w = Self {
            path,
            num_classes,
            out: BufWriter::new(file),
        };
        let header = Header {
            format: LOGIT_FILE_FORMAT.to_string(),
            num_classes,
        };
        w.write_json(&header)?;
        Ok(w)
    }

    pub fn write(&mut self, tuple_id: &str, value: &str, logits: &[f64]) -> Result<()> {
        super::check_logit_row(logits, self.num_classes)?;
        let rec = Record {
            tuple_id: tuple_id.into(),
            value: value.into(),
            logits: logits.into(),
        };
        self.write_json(&rec)
    }

    pub fn finish(mut self) -> Result<()> {
        self.out.flush().map_err(|e| Error::io(&self.path, e))
    }

    fn write_json<T: Serialize>(&mut self, v: &T) -> Result<()> {
        serde_json::to_writer(&mut self.out, v)
            .map_err(|e| Error::io(&self.path, std::io::Error::other(e)))?;
        self.out
            .write_all(b"\n")
            .map_err(|e| Error::io(&self.path, e))
    }
}
