use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RecordKind {
    Step,
    Epoch,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub kind: RecordKind,
    pub step: u64,
    pub epoch: u64,
    pub lr: f64,
    pub train_loss: f64,
    pub test_acc: Option<f64>,
    pub wall_ms: f64,
    /// curvature state bytes per parameter block
    pub state_bytes: Vec<usize>,
}

/// Append-only JSON-lines writer; every record is flushed on write.
pub struct MetricsWriter {
    out: BufWriter<File>,
    last_step: Option<u64>,
}

impl MetricsWriter {
    pub fn create(path: &Path) -> Result<Self> {
        Ok(MetricsWriter {
            out: BufWriter::new(File::create(path)?),
            last_step: None,
        })
    }

    pub fn append(path: &Path) -> Result<Self> {
        let f = OpenOptions::new().create(true).append(true).open(path)?;
        Ok(MetricsWriter {
            out: BufWriter::new(f),
            last_step: None,
        })
    }

    pub fn write(&mut self, r: &MetricsRecord) -> Result<()> {
        if let Some(last) = self.last_step {
            if r.step < last {
                return Err(Error::Contract(format!(
                    "metrics step went backwards: {} after {last}",
                    r.step
                )));
            }
        }
        self.last_step = Some(r.step);
        serde_json::to_writer(&mut self.out, r)?;
        self.out.write_all(b"\n")?;
        self.out.flush()?;
        Ok(())
    }
}

pub fn read_metrics(path: &Path) -> Result<Vec<MetricsRecord>> {
    let f = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    let mut offset = 0u64;
    for line in f.lines() {
        let line = line?;
        if !line.trim().is_empty() {
            out.push(
                serde_json::from_str(&line)
                    .map_err(|e| Error::parse(offset, format!("bad metrics line: {e}")))?,
            );
        }
        offset += line.len() as u64 + 1;
    }
    Ok(out)
}
