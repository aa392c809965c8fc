//! Line-delimited JSON files: one record per line, blank lines ignored.

use std::fs::File;
use std::io::{self, BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum JsonlError {
    #[error("cannot access {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: io::Error,
    },
    #[error("{path} line {line}: {message}")]
    Record { path: String, line: usize, message: String },
}

pub fn read_jsonl<T: DeserializeOwned>(path: impl AsRef<Path>) -> Result<Vec<T>, JsonlError> {
    let path = path.as_ref();
    let name = path.display().to_string();
    let io = |source| JsonlError::Io {
        path: name.clone(),
        source,
    };
    let reader = BufReader::new(File::open(path).map_err(io)?);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line.map_err(io)?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| JsonlError::Record {
            path: name.clone(),
            line: i + 1,
            message: e.to_string(),
        })?);
    }
    Ok(out)
}

pub fn parse_jsonl_str<T: DeserializeOwned>(text: &str) -> Result<Vec<T>, JsonlError> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| JsonlError::Record {
                path: "<memory>".into(),
                line: i + 1,
                message: e.to_string(),
            })
        })
        .collect()
}

/// Serializes one record as a single line including the trailing newline.
pub fn to_jsonl_line<T: Serialize>(record: &T) -> String {
    let mut line = serde_json::to_string(record).expect("records serialize to JSON");
    line.push('\n');
    line
}

pub fn write_jsonl<'a, T: Serialize + 'a>(
    path: impl AsRef<Path>,
    records: impl IntoIterator<Item = &'a T>,
) -> Result<usize, JsonlError> {
    let path = path.as_ref();
    let io = |source| JsonlError::Io {
        path: path.display().to_string(),
        source,
    };
    let mut out = BufWriter::new(File::create(path).map_err(io)?);
    let mut n = 0;
    for r in records {
        out.write_all(to_jsonl_line(r).as_bytes()).map_err(io)?;
        n += 1;
    }
    out.flush().map_err(io)?;
    Ok(n)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_and_line_numbers() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.jsonl");
        let rows = vec![vec![1, 2], vec![], vec![3]];
        assert_eq!(write_jsonl(&path, &rows).unwrap(), 3);
        assert_eq!(read_jsonl::<Vec<i32>>(&path).unwrap(), rows);

        std::fs::write(&path, "[1]\n\n{oops\n").unwrap();
        match read_jsonl::<Vec<i32>>(&path).unwrap_err() {
            JsonlError::Record { line, .. } => assert_eq!(line, 3),
            e => panic!("unexpected {e}"),
        }
        assert!(matches!(
            read_jsonl::<Vec<i32>>(dir.path().join("missing")),
            Err(JsonlError::Io { .. })
        ));
        assert_eq!(parse_jsonl_str::<u8>("1\n 2\n").unwrap(), [1, 2]);
    }
}
