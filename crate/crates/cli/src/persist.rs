//! On-disk formats: pretty JSON documents, one trajectory record per line,
//! CSV tables and sha256 content hashes.

use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::Path;

use datamix::mdp::TrajectoryRecord;
use datamix::sampler::TrajectorySet;
use datamix::{Error, Result};
use serde::de::DeserializeOwned;
use serde::Serialize;
use sha2::{Digest, Sha256};

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn file_sha256(path: &Path) -> Result<String> {
    Ok(sha256_hex(&fs::read(path).map_err(|e| Error::io(path, e))?))
}

/// Writes through a sibling temporary file so readers never see a torn file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn to_json<T: Serialize>(value: &T) -> Vec<u8> {
    let mut bytes = serde_json::to_vec_pretty(value).expect("artifact serializes");
    bytes.push(b'\n');
    bytes
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    write_atomic(path, &to_json(value))
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_slice(&bytes).map_err(|e| Error::Data(format!("{}: {e}", path.display())))
}

pub fn trajectories_jsonl(records: &[TrajectoryRecord]) -> Vec<u8> {
    let mut out = Vec::new();
    for r in records {
        serde_json::to_writer(&mut out, r).expect("record serializes");
        out.push(b'\n');
    }
    out
}

pub fn write_trajectories(path: &Path, set: &TrajectorySet) -> Result<()> {
    write_atomic(path, &trajectories_jsonl(&set.trajectories))
}

/// Reads a line-delimited trajectory file. Blank lines are skipped; a
/// malformed line is a data error naming its line number.
pub fn read_trajectories(path: &Path) -> Result<TrajectorySet> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut trajectories = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let r: TrajectoryRecord =
            serde_json::from_str(line).map_err(|e| Error::Data(format!("{} line {}: {e}", path.display(), i + 1)))?;
        trajectories.push(r);
    }
    Ok(TrajectorySet { trajectories })
}

/// Appends one record and flushes it to disk.
pub fn append_trajectory(path: &Path, record: &TrajectoryRecord) -> Result<()> {
    let mut f = OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    let mut line = serde_json::to_vec(record).expect("record serializes");
    line.push(b'\n');
    f.write_all(&line)
        .and_then(|_| f.sync_data())
        .map_err(|e| Error::io(path, e))
}

/// Identity of a trajectory regardless of its feedback: start, actions and
/// provenance.
pub fn record_key(record: &TrajectoryRecord) -> String {
    let bare = TrajectoryRecord {
        feedback: Vec::new(),
        ..record.clone()
    };
    sha256_hex(&serde_json::to_vec(&bare).expect("record serializes"))
}

/// A CSV table held in memory until written.
#[derive(Clone, Debug, PartialEq)]
pub struct Table {
    pub header: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl Table {
    pub fn new<S: Into<String>>(header: impl IntoIterator<Item = S>) -> Self {
        Self {
            header: header.into_iter().map(Into::into).collect(),
            rows: Vec::new(),
        }
    }

    pub fn push(&mut self, row: Vec<String>) {
        debug_assert_eq!(row.len(), self.header.len());
        self.rows.push(row);
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(&self.header).expect("in-memory write");
        for r in &self.rows {
            w.write_record(r).expect("in-memory write");
        }
        w.into_inner().expect("in-memory flush")
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes())
    }

    pub fn read(path: &Path) -> Result<Self> {
        let mut r = csv::Reader::from_path(path).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
        let header = r
            .headers()
            .map_err(|e| Error::Data(format!("{}: {e}", path.display())))?
            .iter()
            .map(String::from)
            .collect();
        let rows = r
            .records()
            .map(|rec| {
                rec.map(|rec| rec.iter().map(String::from).collect())
                    .map_err(|e| Error::Data(format!("{}: {e}", path.display())))
            })
            .collect::<Result<_>>()?;
        Ok(Self { header, rows })
    }
}

/// Shortest text that parses back to the same `f64`.
pub fn num(x: f64) -> String {
    format!("{x}")
}

#[cfg(test)]
mod tests {
    use super::*;
    use datamix::mdp::{validate_distribution, FeedbackVector, Provenance};

    fn record() -> TrajectoryRecord {
        TrajectoryRecord {
            start: validate_distribution(vec![0.1, 0.9], 2).unwrap(),
            actions: vec![validate_distribution(vec![1.0 / 3.0, 2.0 / 3.0], 2).unwrap()],
            feedback: vec![
                FeedbackVector::raw(vec![-4.1, -4.2]),
                FeedbackVector::raw(vec![-0.1 - 0.2, -4.0]),
            ],
            provenance: Provenance {
                seed: 3,
                tier: 100,
                config_hash: "ab".into(),
            },
        }
    }

    #[test]
    fn trajectories_round_trip_exactly() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("t.jsonl");
        let set = TrajectorySet {
            trajectories: vec![record(), record()],
        };
        write_trajectories(&p, &set).unwrap();
        let back = read_trajectories(&p).unwrap();
        assert_eq!(back, set);
        assert_eq!(trajectories_jsonl(&back.trajectories), fs::read(&p).unwrap());
    }

    #[test]
    fn malformed_line_is_a_data_error() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("t.jsonl");
        let mut bytes = trajectories_jsonl(&[record()]);
        bytes.extend_from_slice(b"{\"start\": [0.5, 0.6]}\n");
        fs::write(&p, bytes).unwrap();
        let e = read_trajectories(&p).unwrap_err();
        assert!(e.to_string().contains("line 2"), "{e}");
        assert_eq!(e.exit_code(), 3);
    }

    #[test]
    fn record_key_ignores_feedback() {
        let a = record();
        let mut b = a.clone();
        b.feedback.clear();
        assert_eq!(record_key(&a), record_key(&b));
        b.provenance.tier = 1;
        assert_ne!(record_key(&a), record_key(&b));
    }

    #[test]
    fn append_then_read() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("progress.jsonl");
        append_trajectory(&p, &record()).unwrap();
        append_trajectory(&p, &record()).unwrap();
        assert_eq!(read_trajectories(&p).unwrap().len(), 2);
    }

    #[test]
    fn table_round_trip_and_number_format() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.csv");
        let mut t = Table::new(["a", "b"]);
        t.push(vec![num(0.1 + 0.2), num(-4.0)]);
        t.write(&p).unwrap();
        let back = Table::read(&p).unwrap();
        assert_eq!(back, t);
        assert_eq!(back.rows[0][0].parse::<f64>().unwrap(), 0.1 + 0.2);
        assert_eq!(back.rows[0][1], "-4");
    }
}
