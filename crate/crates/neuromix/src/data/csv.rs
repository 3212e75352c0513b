//! CSV vector datasets: comma separated, optional header row; when a header
//! is present and its last column is named `label`, that column becomes the
//! ground-truth labels.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

use super::{DataKind, Dataset};

pub fn load_csv(path: &Path) -> Result<Dataset> {
    let file = File::open(path)
        .map_err(|e| Error::data(format!("cannot open {}: {e}", path.display())))?;
    let reader = BufReader::new(file);

    let mut samples = Vec::new();
    let mut labels: Option<Vec<usize>> = None;
    let mut columns: Option<usize> = None;
    let mut has_label_col = false;
    let mut header_seen = false;

    for (idx, line) in reader.lines().enumerate() {
        let line_no = idx + 1;
        let line = line.map_err(|e| Error::data(format!("line {line_no}: {e}")))?;
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() {
            continue;
        }
        let cells: Vec<&str> = line.split(',').map(str::trim).collect();

        if columns.is_none() && !header_seen {
            // A first row with any non-numeric cell is a header.
            if cells.iter().any(|c| c.parse::<f64>().is_err()) {
                header_seen = true;
                has_label_col = cells
                    .last()
                    .map(|c| c.eq_ignore_ascii_case("label"))
                    .unwrap_or(false);
                columns = Some(cells.len());
                if has_label_col {
                    labels = Some(Vec::new());
                }
                continue;
            }
        }
        let expect = *columns.get_or_insert(cells.len());
        if cells.len() != expect {
            return Err(Error::data(format!(
                "line {line_no}: expected {expect} columns, got {}",
                cells.len()
            )));
        }
        let dim = expect - usize::from(has_label_col);
        let mut row = Vec::with_capacity(dim);
        for (c, cell) in cells.iter().take(dim).enumerate() {
            let v: f64 = cell.parse().map_err(|_| {
                Error::data(format!("line {line_no}: non-numeric cell {:?} in column {}", cell, c + 1))
            })?;
            row.push(v);
        }
        if has_label_col {
            let cell = cells[expect - 1];
            let v: f64 = cell
                .parse()
                .map_err(|_| Error::data(format!("line {line_no}: non-numeric label {cell:?}")))?;
            if v < 0.0 || v.fract() != 0.0 {
                return Err(Error::data(format!(
                    "line {line_no}: label {cell:?} is not a non-negative integer"
                )));
            }
            labels.as_mut().expect("label column present").push(v as usize);
        }
        samples.push(Tensor::new(vec![dim], row)?);
    }
    if samples.is_empty() {
        return Err(Error::data(format!("{}: no data rows", path.display())));
    }
    Dataset::new(samples, labels, DataKind::Vector)
}

/// Writes a vector dataset; values use the shortest round-trip decimal form.
pub fn save_csv(path: &Path, dataset: &Dataset) -> Result<()> {
    if dataset.kind() != DataKind::Vector {
        return Err(Error::data("save_csv: only vector datasets"));
    }
    let file = File::create(path)
        .map_err(|e| Error::data(format!("cannot create {}: {e}", path.display())))?;
    let mut out = BufWriter::new(file);
    let dim = dataset.sample_shape()[0];
    let mut header: Vec<String> = (0..dim).map(|i| format!("x{i}")).collect();
    if dataset.labels().is_some() {
        header.push("label".to_string());
    }
    writeln!(out, "{}", header.join(","))?;
    for (i, s) in dataset.samples().iter().enumerate() {
        let mut cells: Vec<String> = s.data().iter().map(|v| format!("{v}")).collect();
        if let Some(labels) = dataset.labels() {
            cells.push(labels[i].to_string());
        }
        writeln!(out, "{}", cells.join(","))?;
    }
    out.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write_tmp(content: &str) -> tempfile::NamedTempFile {
        use std::io::Write as _;
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(content.as_bytes()).unwrap();
        f
    }

    #[test]
    fn loads_plain_rows() {
        let f = write_tmp("0,0\n1,1\n2,2\n");
        let d = load_csv(f.path()).unwrap();
        assert_eq!(d.len(), 3);
        assert_eq!(d.sample_shape(), &[2]);
        assert!(d.labels().is_none());
    }

    #[test]
    fn header_with_label_column() {
        let f = write_tmp("x,y,label\n0.5,1.5,0\n2.5,3.5,1\n");
        let d = load_csv(f.path()).unwrap();
        assert_eq!(d.len(), 2);
        assert_eq!(d.sample_shape(), &[2]);
        assert_eq!(d.labels().unwrap(), &[0, 1]);
        assert_eq!(d.sample(1).data(), &[2.5, 3.5]);
    }

    #[test]
    fn ragged_row_reports_line_number() {
        let f = write_tmp("1,2\n3\n");
        match load_csv(f.path()) {
            Err(Error::Data(msg)) => assert!(msg.contains("line 2"), "{msg}"),
            other => panic!("expected data error, got {other:?}"),
        }
    }

    #[test]
    fn non_numeric_cell_reports_line_number() {
        let f = write_tmp("1,2\n3,oops\n");
        match load_csv(f.path()) {
            Err(Error::Data(msg)) => assert!(msg.contains("line 2"), "{msg}"),
            other => panic!("expected data error, got {other:?}"),
        }
    }

    #[test]
    fn empty_file_is_error() {
        let f = write_tmp("");
        assert!(load_csv(f.path()).is_err());
    }

    #[test]
    fn round_trip_preserves_values() {
        let samples = vec![
            Tensor::new(vec![2], vec![0.1 + 0.2, -1.0 / 3.0]).unwrap(),
            Tensor::new(vec![2], vec![1e-300, 12345.6789012345678]).unwrap(),
        ];
        let d = Dataset::new(samples, Some(vec![3, 7]), DataKind::Vector).unwrap();
        let f = tempfile::NamedTempFile::new().unwrap();
        save_csv(f.path(), &d).unwrap();
        let back = load_csv(f.path()).unwrap();
        for (a, b) in d.samples().iter().zip(back.samples()) {
            for (x, y) in a.data().iter().zip(b.data()) {
                assert!((x - y).abs() <= 1e-12 * x.abs().max(1.0));
            }
        }
        assert_eq!(back.labels().unwrap(), &[3, 7]);
    }
}
