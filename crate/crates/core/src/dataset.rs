//! Observation time series and the plain-text CSV format used by the CLI.
//!
//! The CSV layout is a header `t,y1,...,yK` followed by one row per
//! observation time. Values are written with Rust's shortest round-trip
//! formatting so a file can be re-read bit-exactly.

use std::io::{Read, Write};
use std::path::Path;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{OdinError, Result};
use crate::kernel::validate_grid;

/// Values known only because the data were simulated.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    /// Noise-free states at the observation times, `N x K`.
    pub states: DMatrix<f64>,
    pub theta: Vec<f64>,
    pub x0: Vec<f64>,
    /// Per-state noise standard deviation used to corrupt `states`.
    pub noise_sigma: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimeSeriesDataset {
    pub t: Vec<f64>,
    /// Noisy observations, `N x K`, one column per state.
    pub y: DMatrix<f64>,
    pub truth: Option<GroundTruth>,
}

impl TimeSeriesDataset {
    pub fn new(t: Vec<f64>, y: DMatrix<f64>) -> Result<Self> {
        validate_grid(&t)?;
        if y.nrows() != t.len() {
            return Err(OdinError::Input(format!(
                "{} observation rows for {} time points",
                y.nrows(),
                t.len()
            )));
        }
        if y.ncols() == 0 {
            return Err(OdinError::Input("dataset has no states".into()));
        }
        if y.iter().any(|v| !v.is_finite()) {
            return Err(OdinError::Input("observations must be finite".into()));
        }
        Ok(Self { t, y, truth: None })
    }

    pub fn with_truth(mut self, truth: GroundTruth) -> Self {
        self.truth = Some(truth);
        self
    }

    pub fn n_times(&self) -> usize {
        self.t.len()
    }

    pub fn n_states(&self) -> usize {
        self.y.ncols()
    }

    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        let mut header = String::from("t");
        for k in 1..=self.n_states() {
            header.push_str(&format!(",y{k}"));
        }
        writeln!(w, "{header}")?;
        for (i, t) in self.t.iter().enumerate() {
            let mut row = format!("{t:?}");
            for k in 0..self.n_states() {
                row.push_str(&format!(",{:?}", self.y[(i, k)]));
            }
            writeln!(w, "{row}")?;
        }
        Ok(())
    }

    pub fn read_csv<R: Read>(r: R) -> Result<Self> {
        let mut reader = csv::ReaderBuilder::new().has_headers(true).from_reader(r);
        let headers = reader
            .headers()
            .map_err(|e| OdinError::Format(e.to_string()))?
            .clone();
        let k = headers.len().saturating_sub(1);
        if headers.get(0).map(str::trim) != Some("t") || k == 0 {
            return Err(OdinError::Format(
                "expected header `t,y1,...,yK`".into(),
            ));
        }
        for (j, name) in headers.iter().skip(1).enumerate() {
            if name.trim() != format!("y{}", j + 1) {
                return Err(OdinError::Format(format!(
                    "column {} should be named y{}, found `{name}`",
                    j + 2,
                    j + 1
                )));
            }
        }
        let mut t = Vec::new();
        let mut values = Vec::new();
        for (line, rec) in reader.records().enumerate() {
            let rec = rec.map_err(|e| OdinError::Format(e.to_string()))?;
            if rec.len() != k + 1 {
                return Err(OdinError::Format(format!(
                    "row {} has {} fields, expected {}",
                    line + 2,
                    rec.len(),
                    k + 1
                )));
            }
            let parse = |s: &str| {
                s.trim()
                    .parse::<f64>()
                    .map_err(|e| OdinError::Format(format!("row {}: `{s}`: {e}", line + 2)))
            };
            t.push(parse(&rec[0])?);
            for j in 1..=k {
                values.push(parse(&rec[j])?);
            }
        }
        let n = t.len();
        let y = DMatrix::from_row_slice(n, k, &values);
        Self::new(t, y)
    }

    pub fn save_csv(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path)?;
        self.write_csv(std::io::BufWriter::new(file))
    }

    pub fn load_csv(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path)?;
        Self::read_csv(std::io::BufReader::new(file))
    }
}
