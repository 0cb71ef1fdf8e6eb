use std::path::Path;

use rand::Rng;

use crate::diffable::Tensor;
use crate::error::{DifError, Result};

pub const COVARIATE_PREFIX: &str = "w_";

/// Points read from CSV, with covariate columns (names starting `w_`)
/// split off into `omega`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub x_names: Vec<String>,
    pub w_names: Vec<String>,
    pub x: Tensor,
    pub omega: Option<Tensor>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.x.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.x.rows() == 0
    }

    pub fn covariate_dim(&self) -> usize {
        self.w_names.len()
    }

    pub fn select(&self, rows: &[usize]) -> Dataset {
        Dataset {
            x_names: self.x_names.clone(),
            w_names: self.w_names.clone(),
            x: self.x.select_rows(rows),
            omega: self.omega.as_ref().map(|w| w.select_rows(rows)),
        }
    }

    /// Rows drawn uniformly with replacement.
    pub fn resample<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Tensor {
        if self.is_empty() {
            return Tensor::zeros(0, self.x.cols());
        }
        let rows: Vec<usize> = (0..n).map(|_| rng.random_range(0..self.len())).collect();
        self.x.select_rows(&rows)
    }
}

pub fn load_csv_dataset(path: &Path) -> Result<Dataset> {
    let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_path(path)?;
    let headers: Vec<String> = reader.headers()?.iter().map(str::to_string).collect();
    if headers.is_empty() || headers.iter().any(String::is_empty) {
        return Err(DifError::Parse("CSV header must name every column".into()));
    }
    let is_w: Vec<bool> = headers.iter().map(|h| h.starts_with(COVARIATE_PREFIX)).collect();
    let x_names: Vec<String> = headers.iter().zip(&is_w).filter(|(_, w)| !**w).map(|(h, _)| h.clone()).collect();
    let w_names: Vec<String> = headers.iter().zip(&is_w).filter(|(_, w)| **w).map(|(h, _)| h.clone()).collect();
    if x_names.is_empty() {
        return Err(DifError::Parse("CSV has no data columns".into()));
    }
    let (mut xs, mut ws) = (Vec::new(), Vec::new());
    let mut n = 0;
    for (line, record) in reader.records().enumerate() {
        let record = record.map_err(|e| DifError::Parse(format!("CSV row {}: {e}", line + 2)))?;
        for (col, (cell, w)) in record.iter().zip(&is_w).enumerate() {
            let v: f64 = cell.parse().map_err(|_| {
                DifError::Parse(format!(
                    "CSV row {}, column {:?}: not a number: {cell:?}",
                    line + 2,
                    headers[col]
                ))
            })?;
            if *w {
                ws.push(v);
            } else {
                xs.push(v);
            }
        }
        n += 1;
    }
    let omega = (!w_names.is_empty()).then(|| Tensor::new(n, w_names.len(), ws));
    Ok(Dataset {
        x: Tensor::new(n, x_names.len(), xs),
        x_names,
        w_names,
        omega,
    })
}

/// Writes covariate columns first, then data columns, with default names
/// `w_0..` and `x0..` when `names` is `None`.
pub fn write_csv_dataset(path: &Path, x: &Tensor, omega: Option<&Tensor>) -> Result<()> {
    let p = omega.map_or(0, Tensor::cols);
    if let Some(w) = omega {
        if w.rows() != x.rows() {
            return Err(DifError::DimensionMismatch {
                expected: x.rows(),
                got: w.rows(),
            });
        }
    }
    let mut writer = csv::Writer::from_path(path)?;
    let header: Vec<String> = (0..p)
        .map(|j| format!("{COVARIATE_PREFIX}{j}"))
        .chain((0..x.cols()).map(|j| format!("x{j}")))
        .collect();
    writer.write_record(&header)?;
    for i in 0..x.rows() {
        let row: Vec<String> = omega
            .map(|w| w.row_slice(i).to_vec())
            .unwrap_or_default()
            .iter()
            .chain(x.row_slice(i))
            .map(f64::to_string)
            .collect();
        writer.write_record(&row)?;
    }
    writer.flush()?;
    Ok(())
}
