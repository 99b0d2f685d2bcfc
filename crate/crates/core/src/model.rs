//! Core domain types: the block dictionary, one-block-sparse codes, the
//! global least-squares objective and the equivalence relation between
//! solutions.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{contract, Error, Result};
use crate::linalg;
use crate::sensing::{Measurement, MeasurementSet};

/// Default principal-angle tolerance for [`equivalent_solutions`].
pub const DEFAULT_EQUIVALENCE_TOL: f64 = 1e-6;

/// Tolerance on `‖D[ℓ]ᵀD[ℓ] − I‖_max` for an orthonormal block.
pub const ORTHONORMAL_TOL: f64 = 1e-10;

/// An `n × r` atom matrix partitioned into disjoint column blocks.
///
/// Blocks are explicit column-index lists, so merging blocks never moves
/// atoms. Atoms that belong to no block are allowed.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockDictionary {
    atoms: DMatrix<f64>,
    blocks: Vec<Vec<usize>>,
    k_max: usize,
}

impl BlockDictionary {
    pub fn new(atoms: DMatrix<f64>, blocks: Vec<Vec<usize>>, k_max: usize) -> Result<Self> {
        let (n, r) = atoms.shape();
        if k_max == 0 {
            return contract("k_max must be positive");
        }
        if atoms.iter().any(|v| !v.is_finite()) {
            return contract("dictionary atoms must be finite");
        }
        let mut owner = vec![usize::MAX; r];
        for (l, cols) in blocks.iter().enumerate() {
            if cols.is_empty() || cols.len() > n {
                return contract(format!("block {l} has size {} outside [1, n={n}]", cols.len()));
            }
            if cols.len() > k_max {
                return contract(format!("block {l} has size {} > k_max={k_max}", cols.len()));
            }
            for &c in cols {
                if c >= r {
                    return contract(format!("block {l} references column {c} >= r={r}"));
                }
                if owner[c] != usize::MAX {
                    return contract(format!("column {c} is shared by blocks {} and {l}", owner[c]));
                }
                owner[c] = l;
            }
        }
        Ok(Self { atoms, blocks, k_max })
    }

    /// Every atom in its own block.
    pub fn singletons(atoms: DMatrix<f64>, k_max: usize) -> Result<Self> {
        let blocks = (0..atoms.ncols()).map(|c| vec![c]).collect();
        Self::new(atoms, blocks, k_max)
    }

    /// Consecutive blocks of the given sizes.
    pub fn from_block_sizes(atoms: DMatrix<f64>, sizes: &[usize], k_max: usize) -> Result<Self> {
        let mut blocks = Vec::with_capacity(sizes.len());
        let mut start = 0;
        for &k in sizes {
            blocks.push((start..start + k).collect());
            start += k;
        }
        Self::new(atoms, blocks, k_max)
    }

    /// Stacks orthonormal (or arbitrary) block matrices side by side.
    pub fn from_blocks(blocks: &[DMatrix<f64>], k_max: usize) -> Result<Self> {
        let n = blocks.first().map(|b| b.nrows()).unwrap_or(0);
        let r: usize = blocks.iter().map(|b| b.ncols()).sum();
        let mut atoms = DMatrix::zeros(n, r);
        let mut sizes = Vec::with_capacity(blocks.len());
        let mut start = 0;
        for (l, b) in blocks.iter().enumerate() {
            if b.nrows() != n {
                return Err(Error::DimensionMismatch {
                    index: l,
                    detail: format!("block has {} rows, expected {n}", b.nrows()),
                });
            }
            atoms.columns_mut(start, b.ncols()).copy_from(b);
            sizes.push(b.ncols());
            start += b.ncols();
        }
        Self::from_block_sizes(atoms, &sizes, k_max)
    }

    pub fn n(&self) -> usize {
        self.atoms.nrows()
    }

    pub fn r(&self) -> usize {
        self.atoms.ncols()
    }

    pub fn k_max(&self) -> usize {
        self.k_max
    }

    pub fn num_blocks(&self) -> usize {
        self.blocks.len()
    }

    pub fn atoms(&self) -> &DMatrix<f64> {
        &self.atoms
    }

    pub fn blocks(&self) -> &[Vec<usize>] {
        &self.blocks
    }

    pub fn block_cols(&self, l: usize) -> &[usize] {
        &self.blocks[l]
    }

    pub fn block_size(&self, l: usize) -> usize {
        self.blocks[l].len()
    }

    /// `D[ℓ]` as a dense `n × k_ℓ` matrix.
    pub fn block(&self, l: usize) -> DMatrix<f64> {
        self.atoms.select_columns(self.blocks[l].iter())
    }

    pub fn set_block(&mut self, l: usize, block: &DMatrix<f64>) -> Result<()> {
        let cols = &self.blocks[l];
        if block.shape() != (self.n(), cols.len()) {
            return Err(Error::DimensionMismatch {
                index: l,
                detail: format!("block is {:?}, expected {:?}", block.shape(), (self.n(), cols.len())),
            });
        }
        for (c, &col) in cols.iter().enumerate() {
            self.atoms.set_column(col, &block.column(c));
        }
        Ok(())
    }

    /// Same atoms under a different partition.
    pub fn with_blocks(&self, blocks: Vec<Vec<usize>>) -> Result<Self> {
        Self::new(self.atoms.clone(), blocks, self.k_max)
    }

    /// `‖D[ℓ]ᵀD[ℓ] − I‖_max`.
    pub fn orthonormality_error(&self, l: usize) -> f64 {
        let b = self.block(l);
        let g = b.tr_mul(&b) - DMatrix::identity(b.ncols(), b.ncols());
        linalg::max_abs(&g)
    }

    pub fn is_orthonormal(&self) -> bool {
        (0..self.num_blocks()).all(|l| self.orthonormality_error(l) <= ORTHONORMAL_TOL)
    }

    /// Writes the atoms as little-endian column-major `f64` and a JSON
    /// sidecar `{n, r, k_max, blocks}`.
    pub fn save(&self, bin_path: &Path, json_path: &Path) -> Result<()> {
        write_matrix_bin(&self.atoms, bin_path)?;
        let header = DictionaryHeader {
            n: self.n(),
            r: self.r(),
            k_max: self.k_max,
            blocks: self.blocks.clone(),
        };
        let f = BufWriter::new(File::create(json_path)?);
        serde_json::to_writer_pretty(f, &header)?;
        Ok(())
    }

    pub fn load(bin_path: &Path, json_path: &Path) -> Result<Self> {
        let header: DictionaryHeader = serde_json::from_reader(BufReader::new(File::open(json_path)?))?;
        let atoms = read_matrix_bin(bin_path, header.n, header.r)?;
        Self::new(atoms, header.blocks, header.k_max)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct DictionaryHeader {
    pub n: usize,
    pub r: usize,
    pub k_max: usize,
    pub blocks: Vec<Vec<usize>>,
}

/// Writes a matrix as raw little-endian column-major `f64`.
pub fn write_matrix_bin(m: &DMatrix<f64>, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for v in m.as_slice() {
        w.write_all(&v.to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_matrix_bin(path: &Path, rows: usize, cols: usize) -> Result<DMatrix<f64>> {
    let mut bytes = Vec::new();
    File::open(path)?.read_to_end(&mut bytes)?;
    if bytes.len() != rows * cols * 8 {
        return Err(Error::Format(format!(
            "{}: expected {} bytes for a {rows}x{cols} matrix, found {}",
            path.display(),
            rows * cols * 8,
            bytes.len()
        )));
    }
    let data: Vec<f64> = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
        .collect();
    Ok(DMatrix::from_vec(rows, cols, data))
}

/// A one-block-sparse coefficient vector.
///
/// Only the active block's coefficients are stored; [`BlockSparseCode::to_dense`]
/// expands to the full length-`r` vector, which is zero outside the active
/// block's columns.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockSparseCode {
    active_block: Option<usize>,
    coefficients: DVector<f64>,
}

impl BlockSparseCode {
    pub fn new(block: usize, coefficients: DVector<f64>) -> Self {
        Self {
            active_block: Some(block),
            coefficients,
        }
    }

    pub fn unassigned() -> Self {
        Self {
            active_block: None,
            coefficients: DVector::zeros(0),
        }
    }

    pub fn active_block(&self) -> Option<usize> {
        self.active_block
    }

    /// `s_i[ℓ]` for the active block (empty when unassigned).
    pub fn block_coefficients(&self) -> &DVector<f64> {
        &self.coefficients
    }

    pub fn to_dense(&self, dict: &BlockDictionary) -> DVector<f64> {
        let mut out = DVector::zeros(dict.r());
        if let Some(l) = self.active_block {
            for (c, &col) in dict.block_cols(l).iter().enumerate() {
                out[col] = self.coefficients[c];
            }
        }
        out
    }

    /// Checks one-block sparsity of a dense length-`r` vector.
    pub fn from_dense(dict: &BlockDictionary, dense: &DVector<f64>) -> Result<Self> {
        if dense.len() != dict.r() {
            return contract(format!("code has length {}, expected r={}", dense.len(), dict.r()));
        }
        let mut active = None;
        for l in 0..dict.num_blocks() {
            if dict.block_cols(l).iter().any(|&c| dense[c] != 0.0) {
                if active.is_some() {
                    return contract("code uses more than one block");
                }
                active = Some(l);
            }
        }
        let in_blocks: std::collections::HashSet<usize> = dict.blocks().iter().flatten().copied().collect();
        if (0..dict.r()).any(|c| !in_blocks.contains(&c) && dense[c] != 0.0) {
            return contract("code uses an atom outside every block");
        }
        Ok(match active {
            None => Self::unassigned(),
            Some(l) => Self::new(
                l,
                DVector::from_iterator(dict.block_size(l), dict.block_cols(l).iter().map(|&c| dense[c])),
            ),
        })
    }

    fn check(&self, dict: &BlockDictionary, index: usize) -> Result<()> {
        if let Some(l) = self.active_block {
            if l >= dict.num_blocks() {
                return Err(Error::DimensionMismatch {
                    index,
                    detail: format!("active block {l} >= L={}", dict.num_blocks()),
                });
            }
            if self.coefficients.len() != dict.block_size(l) {
                return Err(Error::DimensionMismatch {
                    index,
                    detail: format!(
                        "code has {} coefficients but block {l} has {} atoms",
                        self.coefficients.len(),
                        dict.block_size(l)
                    ),
                });
            }
        }
        Ok(())
    }

    /// `D s`.
    pub fn reconstruct(&self, dict: &BlockDictionary) -> DVector<f64> {
        match self.active_block {
            None => DVector::zeros(dict.n()),
            Some(l) => {
                let mut x = DVector::zeros(dict.n());
                for (c, &col) in dict.block_cols(l).iter().enumerate() {
                    x.axpy(self.coefficients[c], &dict.atoms().column(col), 1.0);
                }
                x
            }
        }
    }
}

/// A length-`n` signal with finite entries.
#[derive(Debug, Clone, PartialEq)]
pub struct Signal(DVector<f64>);

impl Signal {
    pub fn new(values: DVector<f64>) -> Result<Self> {
        if values.iter().any(|v| !v.is_finite()) {
            return contract("signal contains non-finite values");
        }
        Ok(Self(values))
    }

    pub fn values(&self) -> &DVector<f64> {
        &self.0
    }

    pub fn into_inner(self) -> DVector<f64> {
        self.0
    }
}

/// Squared residual `‖y − A D s‖²` of one measurement.
pub fn residual_sq(meas: &Measurement, dict: &BlockDictionary, code: &BlockSparseCode) -> f64 {
    match code.active_block() {
        None => meas.y.norm_squared(),
        Some(l) => {
            let ad = meas.sensor.project_columns(dict.atoms(), dict.block_cols(l));
            (&meas.y - ad * code.block_coefficients()).norm_squared()
        }
    }
}

fn check_pair(meas: &Measurement, dict: &BlockDictionary, code: &BlockSparseCode, i: usize) -> Result<()> {
    if meas.sensor.n() != dict.n() {
        return Err(Error::DimensionMismatch {
            index: i,
            detail: format!("sensor n={} but dictionary n={}", meas.sensor.n(), dict.n()),
        });
    }
    code.check(dict, i)
}

/// The global objective `Σ_i ‖y_i − A_i D s_i‖²`.
pub fn objective(measurements: &MeasurementSet, dict: &BlockDictionary, codes: &[BlockSparseCode]) -> Result<f64> {
    if codes.len() != measurements.len() {
        return Err(Error::DimensionMismatch {
            index: codes.len().min(measurements.len()),
            detail: format!("{} codes for {} measurements", codes.len(), measurements.len()),
        });
    }
    let mut total = 0.0;
    for (i, (meas, code)) in measurements.iter().zip(codes).enumerate() {
        check_pair(meas, dict, code, i)?;
        total += residual_sq(meas, dict, code);
    }
    Ok(total)
}

/// Residual of one block, `Σ_{i∈ω_ℓ} ‖y_i − A_i D[ℓ] s_i[ℓ]‖²`, over the
/// supplied `(measurement, code)` pairs, all of which must be active on `block`.
pub fn per_block_objective(
    dict: &BlockDictionary,
    block: usize,
    items: &[(&Measurement, &BlockSparseCode)],
) -> Result<f64> {
    let mut total = 0.0;
    for (i, (meas, code)) in items.iter().enumerate() {
        if code.active_block() != Some(block) {
            return contract(format!(
                "item {i} is active on block {:?}, not block {block}",
                code.active_block()
            ));
        }
        check_pair(meas, dict, code, i)?;
        total += residual_sq(meas, dict, code);
    }
    Ok(total)
}

/// Per-block objectives for a full set of codes, plus the residual of
/// unassigned signals in the last slot.
pub fn objective_by_block(
    measurements: &MeasurementSet,
    dict: &BlockDictionary,
    codes: &[BlockSparseCode],
) -> Result<Vec<f64>> {
    let mut groups: Vec<Vec<(&Measurement, &BlockSparseCode)>> = vec![Vec::new(); dict.num_blocks()];
    let mut unassigned = 0.0;
    for (meas, code) in measurements.iter().zip(codes) {
        match code.active_block() {
            Some(l) if l < groups.len() => groups[l].push((meas, code)),
            Some(l) => {
                return contract(format!("code active on block {l} >= L={}", dict.num_blocks()));
            }
            None => unassigned += meas.y.norm_squared(),
        }
    }
    let mut out = Vec::with_capacity(groups.len() + 1);
    for (l, g) in groups.iter().enumerate() {
        out.push(per_block_objective(dict, l, g)?);
    }
    out.push(unassigned);
    Ok(out)
}

/// Whether two solutions belong to the same equivalence class: a block
/// permutation plus per-block invertible transforms mapping one onto the
/// other.
///
/// Blocks are matched greedily by equal size and principal angles `≤ tol`;
/// the reconstructions `D s_i` must then agree to `tol` relative to their norm,
/// and signals must sit on matched spans.
pub fn equivalent_solutions(
    dict_a: &BlockDictionary,
    codes_a: &[BlockSparseCode],
    dict_b: &BlockDictionary,
    codes_b: &[BlockSparseCode],
    tol: f64,
) -> bool {
    if dict_a.n() != dict_b.n() || codes_a.len() != codes_b.len() || dict_a.num_blocks() != dict_b.num_blocks() {
        return false;
    }
    let mut sizes_a: Vec<usize> = (0..dict_a.num_blocks()).map(|l| dict_a.block_size(l)).collect();
    let mut sizes_b: Vec<usize> = (0..dict_b.num_blocks()).map(|l| dict_b.block_size(l)).collect();
    sizes_a.sort_unstable();
    sizes_b.sort_unstable();
    if sizes_a != sizes_b {
        return false;
    }
    let blocks_a: Vec<DMatrix<f64>> = (0..dict_a.num_blocks()).map(|l| dict_a.block(l)).collect();
    let blocks_b: Vec<DMatrix<f64>> = (0..dict_b.num_blocks()).map(|l| dict_b.block(l)).collect();
    let same_span = |la: usize, lb: usize| {
        blocks_a[la].ncols() == blocks_b[lb].ncols() && linalg::max_principal_angle(&blocks_a[la], &blocks_b[lb]) <= tol
    };
    let mut used = vec![false; blocks_b.len()];
    for la in 0..blocks_a.len() {
        match (0..blocks_b.len()).find(|&lb| !used[lb] && same_span(la, lb)) {
            Some(lb) => used[lb] = true,
            None => return false,
        }
    }
    for (ca, cb) in codes_a.iter().zip(codes_b) {
        let xa = ca.reconstruct(dict_a);
        let xb = cb.reconstruct(dict_b);
        let scale = xa.norm().max(xb.norm()).max(1.0);
        if (&xa - &xb).norm() > tol * scale {
            return false;
        }
        if let (Some(la), Some(lb)) = (ca.active_block(), cb.active_block()) {
            if xa.norm() > tol && !same_span(la, lb) {
                return false;
            }
        }
    }
    true
}
