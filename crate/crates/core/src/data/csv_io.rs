use std::path::Path;

use super::Dataset;
use crate::error::{Error, Result};
use crate::nn::Targets;
use crate::tensor::Tensor;

/// Reads a headed numeric CSV. The `label` column becomes class labels when
/// every entry is a non-negative integer, otherwise a regression target.
pub fn load_csv(path: &Path, label: &str) -> Result<Dataset> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(csv_err)?;
    let headers = rdr.headers().map_err(csv_err)?.clone();
    let label_col = headers
        .iter()
        .position(|h| h == label)
        .ok_or_else(|| Error::Config(format!("CSV has no column named {label:?}")))?;
    let width = headers.len() - 1;
    let mut x = Vec::new();
    let mut y = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(csv_err)?;
        let offset = rec.position().map_or(0, |p| p.byte());
        if rec.len() != headers.len() {
            return Err(Error::parse(
                offset,
                format!("expected {} fields, found {}", headers.len(), rec.len()),
            ));
        }
        for (i, field) in rec.iter().enumerate() {
            let v: f64 = field.parse().map_err(|_| {
                Error::parse(offset, format!("field {i} ({field:?}) is not a number"))
            })?;
            if i == label_col {
                y.push(v);
            } else {
                x.push(v);
            }
        }
    }
    let n = y.len();
    let x = Tensor::new(vec![n, width], x)?;
    if y.iter().all(|v| *v >= 0.0 && v.fract() == 0.0 && *v < 1e6) {
        let labels: Vec<usize> = y.iter().map(|v| *v as usize).collect();
        let classes = labels.iter().max().map_or(0, |m| m + 1);
        Dataset::new(x, Targets::Classes(labels), classes)
    } else {
        Dataset::new(x, Targets::Values(Tensor::new(vec![n, 1], y)?), 1)
    }
}

fn csv_err(e: csv::Error) -> Error {
    let offset = e.position().map_or(0, |p| p.byte());
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::Io(io),
        other => Error::parse(offset, format!("{other:?}")),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn classes_and_values() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.csv");
        std::fs::write(&p, "f1,label,f2\n0.5,1,2\n-1,0,3e-1\n").unwrap();
        let ds = load_csv(&p, "label").unwrap();
        assert_eq!(ds.x.data(), &[0.5, 2.0, -1.0, 0.3]);
        assert_eq!(ds.y, Targets::Classes(vec![1, 0]));
        std::fs::write(&p, "f1,t\n1,0.25\n2,-1\n").unwrap();
        let ds = load_csv(&p, "t").unwrap();
        assert!(matches!(ds.y, Targets::Values(_)));
    }

    #[test]
    fn bad_rows() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.csv");
        std::fs::write(&p, "a,b\n1,x\n").unwrap();
        assert!(matches!(load_csv(&p, "b"), Err(Error::Parse { .. })));
        std::fs::write(&p, "a,b\n1,2\n").unwrap();
        assert!(matches!(load_csv(&p, "c"), Err(Error::Config(_))));
        std::fs::write(&p, "a,b\n1,2,3\n").unwrap();
        assert!(load_csv(&p, "b").is_err());
    }
}
