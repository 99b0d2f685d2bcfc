//! Plain-text signal and label files, and measurement sets assembled from
//! them.

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{read_matrix_bin, write_matrix_bin};
use crate::seeds::derive_seed;
use crate::sensing::{make_gaussian, make_pixel_mask, read_mask_lists, Measurement, MeasurementSet};

/// Signals as headerless CSV, one signal per row.
pub fn read_signals(path: &Path) -> Result<Vec<DVector<f64>>> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(false)
        .trim(csv::Trim::All)
        .from_reader(BufReader::new(File::open(path)?));
    let mut out: Vec<DVector<f64>> = Vec::new();
    for (row, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let v = rec
            .iter()
            .map(|t| t.parse::<f64>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| Error::Format(format!("{}: row {}: {e}", path.display(), row + 1)))?;
        if let Some(first) = out.first() {
            if first.len() != v.len() {
                return Err(Error::DimensionMismatch {
                    index: row,
                    detail: format!("row has {} values, expected {}", v.len(), first.len()),
                });
            }
        }
        out.push(DVector::from_vec(v));
    }
    if out.is_empty() {
        return Err(Error::Format(format!("{}: no signals", path.display())));
    }
    Ok(out)
}

pub fn write_signals(path: &Path, signals: &[DVector<f64>]) -> Result<()> {
    let mut wtr = csv::WriterBuilder::new()
        .has_headers(false)
        .from_writer(BufWriter::new(File::create(path)?));
    for x in signals {
        wtr.write_record(x.iter().map(|v| v.to_string()))?;
    }
    wtr.flush()?;
    Ok(())
}

/// `signal_id,block_id` rows.
pub fn write_labels(path: &Path, labels: &[usize]) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(BufWriter::new(File::create(path)?));
    wtr.write_record(["signal_id", "block_id"])?;
    for (i, l) in labels.iter().enumerate() {
        wtr.write_record([i.to_string(), l.to_string()])?;
    }
    wtr.flush()?;
    Ok(())
}

pub fn read_masks(path: &Path) -> Result<Vec<Vec<usize>>> {
    read_mask_lists(BufReader::new(File::open(path)?))
}

/// Keeps the entries of each row listed in the matching mask line.
pub fn masked_measurements(signals: &[DVector<f64>], masks: &[Vec<usize>]) -> Result<MeasurementSet> {
    if signals.len() != masks.len() {
        return Err(Error::DimensionMismatch {
            index: signals.len().min(masks.len()),
            detail: format!("{} signals but {} mask lines", signals.len(), masks.len()),
        });
    }
    let n = signals[0].len();
    let items = signals
        .iter()
        .zip(masks)
        .map(|(x, ids)| Measurement::observe(make_pixel_mask(n, ids)?, x))
        .collect::<Result<Vec<_>>>()?;
    MeasurementSet::from_vec(n, items)
}

pub fn full_measurements(signals: &[DVector<f64>]) -> Result<MeasurementSet> {
    let all: Vec<usize> = (0..signals[0].len()).collect();
    masked_measurements(signals, &vec![all; signals.len()])
}

/// Independent `m × n` Gaussian sensing per signal, seeded by `(seed, i)`.
pub fn gaussian_measurements(signals: &[DVector<f64>], m: usize, seed: u64) -> Result<MeasurementSet> {
    let n = signals[0].len();
    let items = signals
        .iter()
        .enumerate()
        .map(|(i, x)| Measurement::observe(make_gaussian(m, n, derive_seed(seed, &[i as u64]))?, x))
        .collect::<Result<Vec<_>>>()?;
    MeasurementSet::from_vec(n, items)
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
struct MatrixHeader {
    rows: usize,
    cols: usize,
}

/// Dense matrix as column-major little-endian `f64` plus a `{rows, cols}`
/// JSON sidecar.
pub fn save_matrix(m: &DMatrix<f64>, bin_path: &Path, json_path: &Path) -> Result<()> {
    write_matrix_bin(m, bin_path)?;
    let mut w = BufWriter::new(File::create(json_path)?);
    serde_json::to_writer_pretty(
        &mut w,
        &MatrixHeader {
            rows: m.nrows(),
            cols: m.ncols(),
        },
    )?;
    w.flush()?;
    Ok(())
}

pub fn load_matrix(bin_path: &Path, json_path: &Path) -> Result<DMatrix<f64>> {
    let h: MatrixHeader = serde_json::from_reader(BufReader::new(File::open(json_path)?))?;
    read_matrix_bin(bin_path, h.rows, h.cols)
}
