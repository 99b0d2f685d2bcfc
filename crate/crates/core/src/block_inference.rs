//! Block inference: one-block matching pursuit (BOMP with a single active
//! block) and sparse agglomerative clustering (SAC) of atoms into blocks.

use std::collections::BTreeSet;
use std::io::Write;

use log::debug;
use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::linalg;
use crate::model::{BlockDictionary, BlockSparseCode};
use crate::sensing::{Measurement, MeasurementSet};

/// Gram matrices with a larger condition number are treated as singular.
pub const MAX_GRAM_CONDITION: f64 = 1e12;

/// Default SAC merge threshold on the Jaccard score.
pub const DEFAULT_SAC_THRESHOLD: f64 = 0.1;

/// Default fraction of signal energy a block must explain to count as used.
pub const DEFAULT_USAGE_ENERGY: f64 = 0.01;

/// Outcome of fitting one measurement against the dictionary.
#[derive(Debug, Clone)]
pub struct BlockChoice {
    pub block: usize,
    pub coefficients: DVector<f64>,
    /// `‖y − A D[ℓ] s‖₂`.
    pub residual: f64,
    /// Blocks whose Gram matrix was singular or ill-conditioned.
    pub skipped: Vec<usize>,
}

/// Least-squares fit of `y` on `A D[ℓ]`; `None` when the Gram matrix is
/// singular.
pub fn fit_block(meas: &Measurement, dict: &BlockDictionary, l: usize) -> Option<(DVector<f64>, f64)> {
    let ad = meas.sensor.project_columns(dict.atoms(), dict.block_cols(l));
    if ad.nrows() < ad.ncols() {
        return None;
    }
    let gram = ad.tr_mul(&ad);
    let rhs = ad.tr_mul(&meas.y);
    let s = linalg::solve_spd(&gram, &rhs, MAX_GRAM_CONDITION).ok()?;
    let res = (&meas.y - &ad * &s).norm();
    Some((s, res))
}

/// Assigns one measurement to the block with the smallest least-squares
/// residual (exhaustive over blocks; ties go to the smaller index).
pub fn bomp_assign_one(meas: &Measurement, dict: &BlockDictionary) -> Result<BlockChoice> {
    let mut best: Option<BlockChoice> = None;
    let mut skipped = Vec::new();
    for l in 0..dict.num_blocks() {
        match fit_block(meas, dict, l) {
            None => skipped.push(l),
            Some((s, res)) => {
                if best.as_ref().is_none_or(|b| res < b.residual) {
                    best = Some(BlockChoice {
                        block: l,
                        coefficients: s,
                        residual: res,
                        skipped: Vec::new(),
                    });
                }
            }
        }
    }
    match best {
        None => Err(Error::NoFeasibleBlock { signal: 0 }),
        Some(mut b) => {
            b.skipped = skipped;
            Ok(b)
        }
    }
}

/// Per-signal active block and residual.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct BlockAssignment {
    pub blocks: Vec<usize>,
    pub residuals: Vec<f64>,
}

impl BlockAssignment {
    pub fn len(&self) -> usize {
        self.blocks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.blocks.is_empty()
    }

    /// `ω_ℓ` for every block.
    pub fn members(&self, num_blocks: usize) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); num_blocks];
        for (i, &l) in self.blocks.iter().enumerate() {
            if l < num_blocks {
                out[l].push(i);
            }
        }
        out
    }

    /// CSV `signal_id,block_id,residual`.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(w);
        wtr.write_record(["signal_id", "block_id", "residual"])?;
        for (i, (&l, &r)) in self.blocks.iter().zip(&self.residuals).enumerate() {
            wtr.write_record([i.to_string(), l.to_string(), r.to_string()])?;
        }
        wtr.flush()?;
        Ok(())
    }

    pub fn read_csv<R: std::io::Read>(r: R) -> Result<Self> {
        let mut rdr = csv::Reader::from_reader(r);
        let mut blocks = Vec::new();
        let mut residuals = Vec::new();
        for (row, rec) in rdr.records().enumerate() {
            let rec = rec?;
            let parse = |k: usize| -> Result<&str> {
                rec.get(k)
                    .ok_or_else(|| Error::Format(format!("assignment row {row}: missing field {k}")))
            };
            let id: usize = parse(0)?.parse().map_err(|_| Error::Format(format!("assignment row {row}: bad id")))?;
            if id != row {
                return Err(Error::Format(format!("assignment row {row}: signal ids must be consecutive")));
            }
            blocks.push(parse(1)?.parse().map_err(|_| Error::Format(format!("assignment row {row}: bad block")))?);
            residuals.push(parse(2)?.parse().map_err(|_| Error::Format(format!("assignment row {row}: bad residual")))?);
        }
        Ok(Self { blocks, residuals })
    }
}

/// [`bomp_assign_one`] for every measurement, in parallel, keeping
/// per-signal failures.
pub fn bomp_assign_each(measurements: &MeasurementSet, dict: &BlockDictionary) -> Vec<Result<BlockChoice>> {
    measurements
        .as_slice()
        .par_iter()
        .enumerate()
        .map(|(i, m)| {
            bomp_assign_one(m, dict).map_err(|e| match e {
                Error::NoFeasibleBlock { .. } => Error::NoFeasibleBlock { signal: i },
                other => other,
            })
        })
        .collect()
}

/// Assigns every measurement to its best block.
pub fn bomp_assign_all(
    measurements: &MeasurementSet,
    dict: &BlockDictionary,
) -> Result<(BlockAssignment, Vec<BlockSparseCode>)> {
    let mut blocks = Vec::with_capacity(measurements.len());
    let mut residuals = Vec::with_capacity(measurements.len());
    let mut codes = Vec::with_capacity(measurements.len());
    let mut skipped = 0usize;
    for res in bomp_assign_each(measurements, dict) {
        let choice = res?;
        skipped += choice.skipped.len();
        blocks.push(choice.block);
        residuals.push(choice.residual);
        codes.push(BlockSparseCode::new(choice.block, choice.coefficients));
    }
    if skipped > 0 {
        debug!("bomp: skipped {skipped} (signal, block) pairs with singular Gram matrices");
    }
    Ok((BlockAssignment { blocks, residuals }, codes))
}

/// Usage set of every block: the signals that spend at least
/// `energy_fraction` of their energy on it in a greedy multi-block
/// least-squares fit using at most `max_atoms` atoms.
///
/// Blocks are added one at a time by largest projection energy of the current
/// residual, and all selected blocks are refitted jointly after each step.
pub fn usage_sets(
    measurements: &MeasurementSet,
    dict: &BlockDictionary,
    max_atoms: usize,
    energy_fraction: f64,
) -> Vec<BTreeSet<usize>> {
    let used: Vec<Vec<usize>> = measurements
        .as_slice()
        .par_iter()
        .map(|m| greedy_usage(m, dict, max_atoms, energy_fraction))
        .collect();
    let mut out = vec![BTreeSet::new(); dict.num_blocks()];
    for (i, blocks) in used.into_iter().enumerate() {
        for l in blocks {
            out[l].insert(i);
        }
    }
    out
}

fn greedy_usage(meas: &Measurement, dict: &BlockDictionary, max_atoms: usize, energy_fraction: f64) -> Vec<usize> {
    let energy = meas.y.norm_squared();
    if energy == 0.0 {
        return Vec::new();
    }
    let budget = max_atoms.min(meas.sensor.m());
    let projected: Vec<DMatrix<f64>> = (0..dict.num_blocks())
        .map(|l| meas.sensor.project_columns(dict.atoms(), dict.block_cols(l)))
        .collect();
    let mut selected: Vec<usize> = Vec::new();
    let mut used_atoms = 0;
    let mut residual = meas.y.clone();
    let mut coefs = DVector::zeros(0);
    loop {
        if residual.norm_squared() <= 1e-12 * energy {
            break;
        }
        let mut best: Option<(usize, f64)> = None;
        for (l, ad) in projected.iter().enumerate() {
            if selected.contains(&l) || used_atoms + ad.ncols() > budget {
                continue;
            }
            let gram = ad.tr_mul(ad);
            let rhs = ad.tr_mul(&residual);
            if let Ok(s) = linalg::solve_spd(&gram, &rhs, MAX_GRAM_CONDITION) {
                let gain = rhs.dot(&s);
                if best.is_none_or(|(_, g)| gain > g) {
                    best = Some((l, gain));
                }
            }
        }
        let Some((l, _)) = best else { break };
        selected.push(l);
        used_atoms += projected[l].ncols();
        let joint = stack_columns(&selected, &projected);
        let gram = joint.tr_mul(&joint);
        let rhs = joint.tr_mul(&meas.y);
        coefs = linalg::pinv_solve_psd(&gram, &rhs, 1e-12).0;
        residual = &meas.y - &joint * &coefs;
    }
    let mut out = Vec::new();
    let mut offset = 0;
    for &l in &selected {
        let k = projected[l].ncols();
        let part = projected[l].clone() * coefs.rows(offset, k);
        if part.norm_squared() >= energy_fraction * energy {
            out.push(l);
        }
        offset += k;
    }
    out
}

fn stack_columns(selected: &[usize], projected: &[DMatrix<f64>]) -> DMatrix<f64> {
    let rows = projected[selected[0]].nrows();
    let total: usize = selected.iter().map(|&l| projected[l].ncols()).sum();
    let mut out = DMatrix::zeros(rows, total);
    let mut c = 0;
    for &l in selected {
        let k = projected[l].ncols();
        out.columns_mut(c, k).copy_from(&projected[l]);
        c += k;
    }
    out
}

/// SAC settings.
#[derive(Debug, Clone, Copy)]
pub struct SacConfig {
    pub k_max: usize,
    /// Pairs merge only while their Jaccard score exceeds this value.
    pub threshold: f64,
}

/// Result of agglomeration.
#[derive(Debug, Clone)]
pub struct SacOutcome {
    pub dict: BlockDictionary,
    /// For every input block: (output block, offset of its atoms inside it).
    pub mapping: Vec<(usize, usize)>,
    pub merges: usize,
}

impl SacOutcome {
    /// Re-indexes codes to the merged blocks; coefficients of a merged-in
    /// block are padded with zeros for the other atoms.
    pub fn remap_codes(&self, codes: &[BlockSparseCode]) -> Vec<BlockSparseCode> {
        codes
            .iter()
            .map(|c| match c.active_block() {
                None => c.clone(),
                Some(l) => {
                    let (nl, off) = self.mapping[l];
                    let mut s = DVector::zeros(self.dict.block_size(nl));
                    s.rows_mut(off, c.block_coefficients().len()).copy_from(c.block_coefficients());
                    BlockSparseCode::new(nl, s)
                }
            })
            .collect()
    }
}

#[derive(Clone)]
struct BitSet(Vec<u64>);

impl BitSet {
    fn from_set(set: &BTreeSet<usize>, words: usize) -> Self {
        let mut v = vec![0u64; words];
        for &i in set {
            v[i / 64] |= 1 << (i % 64);
        }
        Self(v)
    }

    fn jaccard(&self, other: &Self) -> f64 {
        let mut inter = 0u32;
        let mut uni = 0u32;
        for (a, b) in self.0.iter().zip(&other.0) {
            inter += (a & b).count_ones();
            uni += (a | b).count_ones();
        }
        if uni == 0 {
            0.0
        } else {
            inter as f64 / uni as f64
        }
    }

    fn union_with(&mut self, other: &Self) {
        for (a, b) in self.0.iter_mut().zip(&other.0) {
            *a |= b;
        }
    }
}

/// Jaccard index `|A ∩ B| / |A ∪ B|` (zero for two empty sets).
pub fn jaccard(a: &BTreeSet<usize>, b: &BTreeSet<usize>) -> f64 {
    let inter = a.intersection(b).count();
    let uni = a.len() + b.len() - inter;
    if uni == 0 {
        0.0
    } else {
        inter as f64 / uni as f64
    }
}

/// Greedy agglomeration: repeatedly merge the pair of blocks with the most
/// similar usage sets among pairs whose combined size fits in `k_max`, until
/// no pair scores above the threshold. Atoms are never moved.
pub fn sac_merge(dict: &BlockDictionary, usage: &[BTreeSet<usize>], config: SacConfig) -> Result<SacOutcome> {
    let nb = dict.num_blocks();
    if usage.len() != nb {
        return Err(Error::DimensionMismatch {
            index: usage.len().min(nb),
            detail: format!("{} usage sets for {nb} blocks", usage.len()),
        });
    }
    let max_id = usage.iter().filter_map(|s| s.iter().next_back()).copied().max().unwrap_or(0);
    let words = max_id / 64 + 1;
    let mut sets: Vec<Option<BitSet>> = usage.iter().map(|s| Some(BitSet::from_set(s, words))).collect();
    let mut cols: Vec<Vec<usize>> = dict.blocks().to_vec();
    // members[b] = original blocks folded into b, with their offsets
    let mut members: Vec<Vec<(usize, usize)>> = (0..nb).map(|l| vec![(l, 0)]).collect();
    let k_max = config.k_max.min(dict.k_max()).min(dict.n());

    let fits = |a: usize, b: usize, cols: &[Vec<usize>]| cols[a].len() + cols[b].len() <= k_max;
    let mut score = DMatrix::from_element(nb, nb, f64::NEG_INFINITY);
    for a in 0..nb {
        for b in a + 1..nb {
            if fits(a, b, &cols) {
                score[(a, b)] = sets[a].as_ref().unwrap().jaccard(sets[b].as_ref().unwrap());
            }
        }
    }
    let mut merges = 0;
    loop {
        let mut best: Option<(usize, usize, f64)> = None;
        for a in 0..nb {
            if sets[a].is_none() {
                continue;
            }
            for b in a + 1..nb {
                let s = score[(a, b)];
                if sets[b].is_some() && s > config.threshold && best.is_none_or(|(_, _, bs)| s > bs) {
                    best = Some((a, b, s));
                }
            }
        }
        let Some((a, b, _)) = best else { break };
        let sb = sets[b].take().unwrap();
        sets[a].as_mut().unwrap().union_with(&sb);
        let offset = cols[a].len();
        let moved = std::mem::take(&mut cols[b]);
        cols[a].extend(moved);
        let folded: Vec<(usize, usize)> = std::mem::take(&mut members[b])
            .into_iter()
            .map(|(l, o)| (l, o + offset))
            .collect();
        members[a].extend(folded);
        merges += 1;
        for c in 0..nb {
            score[(b.min(c), b.max(c))] = f64::NEG_INFINITY;
            if c == a || sets[c].is_none() {
                continue;
            }
            let (lo, hi) = (a.min(c), a.max(c));
            score[(lo, hi)] = if fits(a, c, &cols) {
                sets[a].as_ref().unwrap().jaccard(sets[c].as_ref().unwrap())
            } else {
                f64::NEG_INFINITY
            };
        }
    }
    let mut mapping = vec![(0, 0); nb];
    let mut new_blocks = Vec::new();
    for b in 0..nb {
        if sets[b].is_some() {
            let idx = new_blocks.len();
            for &(l, off) in &members[b] {
                mapping[l] = (idx, off);
            }
            new_blocks.push(std::mem::take(&mut cols[b]));
        }
    }
    Ok(SacOutcome {
        dict: dict.with_blocks(new_blocks)?,
        mapping,
        merges,
    })
}
