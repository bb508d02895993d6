//! Feature tables with header `x_0,…,x_{d−1},y,a`.

use std::fmt::Write as _;
use std::path::Path;

use super::{GroupedDataset, Split};
use crate::error::{Error, Result};
use crate::matrix::Matrix;

pub fn load_csv(path: &Path, split: Split) -> Result<GroupedDataset> {
    let text = std::fs::read_to_string(path)?;
    parse_csv(&text, &path.display().to_string(), split)
}

pub(crate) fn parse_csv(text: &str, name: &str, split: Split) -> Result<GroupedDataset> {
    let err = |line: usize, message: String| Error::Csv {
        path: name.to_string(),
        line,
        message,
    };
    let mut lines = text
        .lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.trim_end_matches('\r')));
    let (_, header) = lines
        .next()
        .ok_or_else(|| err(1, "missing header".into()))?;
    let columns: Vec<&str> = header.split(',').map(str::trim).collect();
    let width = columns.len();
    if width < 3 || columns[width - 2] != "y" || columns[width - 1] != "a" {
        return Err(err(1, "header must be x_0,...,x_{d-1},y,a".into()));
    }
    let d = width - 2;
    for (j, c) in columns[..d].iter().enumerate() {
        if *c != format!("x_{j}") {
            return Err(err(1, format!("expected column x_{j}, found `{c}`")));
        }
    }

    let mut data = Vec::new();
    let mut labels = Vec::new();
    let mut attributes = Vec::new();
    for (line, raw) in lines {
        if raw.trim().is_empty() {
            continue;
        }
        let cells: Vec<&str> = raw.split(',').map(str::trim).collect();
        if cells.len() != width {
            return Err(err(
                line,
                format!("expected {width} columns, found {}", cells.len()),
            ));
        }
        for (j, cell) in cells[..d].iter().enumerate() {
            let v: f64 = cell
                .parse()
                .map_err(|_| err(line, format!("x_{j}: `{cell}` is not a number")))?;
            data.push(v);
        }
        let label = |name: &str, cell: &str| -> Result<usize> {
            let v: f64 = cell
                .parse()
                .map_err(|_| err(line, format!("{name}: `{cell}` is not a number")))?;
            if v < 0.0 || v.fract() != 0.0 {
                return Err(err(
                    line,
                    format!("{name}: `{cell}` is not a nonnegative integer"),
                ));
            }
            Ok(v as usize)
        };
        labels.push(label("y", cells[d])?);
        attributes.push(label("a", cells[d + 1])?);
    }
    let n = labels.len();
    let classes = labels.iter().max().map_or(1, |m| m + 1);
    let attribute_values = attributes.iter().max().map_or(1, |m| m + 1);
    GroupedDataset::new(
        Matrix::from_vec(n, d, data)?,
        labels,
        attributes,
        classes,
        attribute_values,
        split,
    )
}

/// Floats are written in shortest round-trip form.
pub fn save_csv(data: &GroupedDataset, path: &Path) -> Result<()> {
    let mut out = String::new();
    for j in 0..data.dim() {
        let _ = write!(out, "x_{j},");
    }
    out.push_str("y,a\n");
    for i in 0..data.len() {
        for v in data.features().row(i) {
            let _ = write!(out, "{v},");
        }
        let _ = writeln!(out, "{},{}", data.labels()[i], data.attributes()[i]);
    }
    std::fs::write(path, out)?;
    Ok(())
}
