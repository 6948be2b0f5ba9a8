//! JSON-lines training logs. One object per line, steps strictly increasing.

use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{EatError, Result};

/// One pre-training step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainRecord {
    pub step: u64,
    pub l_u: f64,
    pub l_f: f64,
    pub l_ufo: f64,
    pub lr: f64,
    pub tau: f64,
    pub grad_norm: f64,
    /// Zero under the determinism flag.
    pub wall_ms: u64,
}

/// One fine-tuning step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FinetuneRecord {
    pub step: u64,
    pub loss: f64,
    /// Fraction of the batch whose argmax matches the argmax of its target.
    pub batch_accuracy: f64,
    pub lr: f64,
    pub grad_norm: f64,
    pub prediction_mode: String,
    pub wall_ms: u64,
}

pub trait Stepped {
    fn step(&self) -> u64;
}

impl Stepped for TrainRecord {
    fn step(&self) -> u64 {
        self.step
    }
}

impl Stepped for FinetuneRecord {
    fn step(&self) -> u64 {
        self.step
    }
}

/// Appends records to a file, flushing after each line.
pub struct RecordWriter {
    path: PathBuf,
    out: BufWriter<File>,
    last: Option<u64>,
}

impl RecordWriter {
    pub fn create(path: &Path) -> Result<Self> {
        let file = File::create(path).map_err(|e| EatError::io(path, e))?;
        Ok(Self {
            path: path.to_path_buf(),
            out: BufWriter::new(file),
            last: None,
        })
    }

    /// Opens for appending after `last_step`, e.g. when resuming.
    pub fn append(path: &Path, last_step: Option<u64>) -> Result<Self> {
        let file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(|e| EatError::io(path, e))?;
        Ok(Self {
            path: path.to_path_buf(),
            out: BufWriter::new(file),
            last: last_step,
        })
    }

    pub fn write<R: Serialize + Stepped>(&mut self, record: &R) -> Result<()> {
        if self.last.is_some_and(|l| record.step() <= l) {
            return Err(EatError::Invalid(format!(
                "record step {} does not follow {}",
                record.step(),
                self.last.unwrap_or(0)
            )));
        }
        let line = serde_json::to_string(record).map_err(|e| EatError::Invalid(e.to_string()))?;
        let io = |e| EatError::io(&self.path, e);
        writeln!(self.out, "{line}").map_err(io)?;
        self.out.flush().map_err(io)?;
        self.last = Some(record.step());
        Ok(())
    }
}

pub fn read_records<R: DeserializeOwned>(path: &Path) -> Result<Vec<R>> {
    let file = File::open(path).map_err(|e| EatError::io(path, e))?;
    BufReader::new(file)
        .lines()
        .enumerate()
        .filter(|(_, l)| l.as_ref().map_or(true, |l| !l.trim().is_empty()))
        .map(|(i, line)| {
            let line = line.map_err(|e| EatError::io(path, e))?;
            serde_json::from_str(&line).map_err(|e| EatError::Data(format!("{}:{}: {e}", path.display(), i + 1)))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(step: u64) -> TrainRecord {
        TrainRecord {
            step,
            l_u: 0.1,
            l_f: 0.2,
            l_ufo: 0.3,
            lr: 1e-4 / 3.0,
            tau: 0.999,
            grad_norm: 1.5,
            wall_ms: 0,
        }
    }

    #[test]
    fn round_trip_and_order() {
        let d = tempfile::tempdir().unwrap();
        let p = d.path().join("log.jsonl");
        let mut w = RecordWriter::create(&p).unwrap();
        w.write(&rec(1)).unwrap();
        w.write(&rec(2)).unwrap();
        assert!(w.write(&rec(2)).is_err());
        drop(w);
        let mut w = RecordWriter::append(&p, Some(2)).unwrap();
        w.write(&rec(3)).unwrap();
        drop(w);
        let back: Vec<TrainRecord> = read_records(&p).unwrap();
        assert_eq!(back, vec![rec(1), rec(2), rec(3)]);
        let text = std::fs::read_to_string(&p).unwrap();
        assert_eq!(text.lines().count(), 3);
        assert!(text.starts_with("{\"step\":1,\"l_u\":0.1,"));
    }
}
