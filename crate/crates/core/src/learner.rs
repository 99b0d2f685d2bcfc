//! The outer blind compressed sensing loop: agglomerate atoms into blocks,
//! assign every signal to one block, then refit blocks and codes.

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use log::{debug, info, warn};
use nalgebra::{DMatrix, DVector};
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::block_inference::{
    bomp_assign_each, sac_merge, usage_sets, BlockAssignment, SacConfig, DEFAULT_SAC_THRESHOLD, DEFAULT_USAGE_ENERGY,
};
use crate::dict_update::{run_block_pass, PassOutcome};
use crate::error::{contract, Error, Result};
use crate::linalg;
use crate::model::{objective, residual_sq, BlockDictionary, BlockSparseCode};
use crate::seeds::derive_seed;
use crate::sensing::MeasurementSet;

const INIT_STREAM: u64 = 1;
const RESEED_STREAM: u64 = 2;
const RESTART_STREAM: u64 = 3;

/// Objective, relative to the measurement energy, treated as an exact fit.
const VANISHING_OBJECTIVE: f64 = 1e-20;

/// How the initial atoms are drawn.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitStrategy {
    /// Independent Gaussian directions, normalized.
    Random,
    /// Back-projections `Aᵢᵀyᵢ` of randomly chosen measurements, normalized.
    Data,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LearnerConfig {
    /// Largest block size.
    pub k_max: usize,
    /// Number of atoms.
    pub r: usize,
    /// Initial block sizes; `None` starts from `r` singleton blocks.
    pub initial_block_sizes: Option<Vec<usize>>,
    pub max_outer_iters: usize,
    /// Stop when the objective drops by less than this fraction in one
    /// iteration.
    pub objective_rel_tol: f64,
    pub sac_threshold: f64,
    /// Run agglomeration on iterations `0, sac_every, 2·sac_every, …`;
    /// `0` disables it.
    pub sac_every: usize,
    /// Energy share above which a block counts as used by a signal.
    pub usage_energy: f64,
    /// Refill blocks that no signal selects.
    pub reseed_dead_blocks: bool,
    pub init: InitStrategy,
    /// Independent initializations; the run with the lowest objective wins.
    pub restarts: usize,
    pub seed: u64,
}

impl Default for LearnerConfig {
    fn default() -> Self {
        Self {
            k_max: 8,
            r: 64,
            initial_block_sizes: None,
            max_outer_iters: 10,
            objective_rel_tol: 1e-5,
            sac_threshold: DEFAULT_SAC_THRESHOLD,
            sac_every: 1,
            usage_energy: DEFAULT_USAGE_ENERGY,
            reseed_dead_blocks: true,
            init: InitStrategy::Random,
            restarts: 1,
            seed: 0,
        }
    }
}

impl LearnerConfig {
    pub fn validate(&self, n: usize) -> Result<()> {
        if self.k_max == 0 || self.k_max > n {
            return contract(format!("k_max={} must lie in [1, n={n}]", self.k_max));
        }
        if self.r == 0 {
            return contract("r must be positive");
        }
        if self.restarts == 0 {
            return contract("restarts must be at least 1");
        }
        if self.max_outer_iters == 0 {
            return contract("max_outer_iters must be at least 1");
        }
        if !(self.objective_rel_tol >= 0.0) {
            return contract("objective_rel_tol must be non-negative");
        }
        if let Some(sizes) = &self.initial_block_sizes {
            if sizes.iter().sum::<usize>() != self.r {
                return contract("initial block sizes must sum to r");
            }
        }
        Ok(())
    }
}

/// What happened in one outer iteration.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct IterationRecord {
    pub iteration: usize,
    pub merges: usize,
    pub num_blocks: usize,
    /// Objective with the codes entering BOMP (after any merge).
    pub objective_before_assignment: f64,
    pub objective_after_assignment: f64,
    pub objective_after_pass: f64,
    pub infeasible_signals: usize,
    pub empty_blocks: Vec<usize>,
    pub reseeded: Vec<usize>,
}

#[derive(Debug, Clone)]
pub struct LearnerState {
    pub dict: BlockDictionary,
    pub codes: Vec<BlockSparseCode>,
    pub assignment: BlockAssignment,
    /// Objective after each outer iteration.
    pub objective_trace: Vec<f64>,
    pub history: Vec<IterationRecord>,
    pub converged: bool,
}

impl LearnerState {
    pub fn objective(&self) -> f64 {
        self.objective_trace.last().copied().unwrap_or(f64::NAN)
    }

    /// Reconstructed signal `D sᵢ` for every measurement.
    pub fn reconstructions(&self) -> Vec<DVector<f64>> {
        self.codes.iter().map(|c| c.reconstruct(&self.dict)).collect()
    }
}

/// Draws the starting dictionary.
pub fn initial_dictionary(measurements: &MeasurementSet, config: &LearnerConfig) -> Result<BlockDictionary> {
    let n = measurements.n();
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, &[INIT_STREAM]));
    let mut atoms = DMatrix::<f64>::zeros(n, config.r);
    let picks: Vec<usize> = match config.init {
        InitStrategy::Data if !measurements.is_empty() => {
            let amount = config.r.min(measurements.len());
            sample(&mut rng, measurements.len(), amount).into_vec()
        }
        _ => Vec::new(),
    };
    for c in 0..config.r {
        let mut v = match picks.get(c) {
            Some(&i) => {
                let m = measurements.get(i);
                m.sensor.adjoint(&m.y)
            }
            None => DVector::zeros(n),
        };
        if v.norm() == 0.0 {
            v = DVector::from_fn(n, |_, _| StandardNormal.sample(&mut rng));
        }
        let norm = v.norm();
        atoms.set_column(c, &(v / norm));
    }
    match &config.initial_block_sizes {
        None => BlockDictionary::singletons(atoms, config.k_max),
        Some(sizes) => {
            let mut dict = BlockDictionary::from_block_sizes(atoms, sizes, config.k_max)?;
            for l in 0..dict.num_blocks() {
                let basis = complete_basis(&dict.block(l), &mut rng);
                dict.set_block(l, &basis)?;
            }
            Ok(dict)
        }
    }
}

/// Orthonormal basis of the span of `m`'s columns, topped up with random
/// directions when `m` is rank deficient.
fn complete_basis(m: &DMatrix<f64>, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
    let (n, k) = m.shape();
    let mut basis = linalg::orthonormal_basis(m, 1e-10);
    while basis.ncols() < k {
        let g = DVector::from_fn(n, |_, _| StandardNormal.sample(rng));
        let v = &g - &basis * basis.tr_mul(&g);
        if v.norm() > 1e-8 * g.norm() {
            let c = basis.ncols();
            basis = basis.insert_column(c, 0.0);
            basis.set_column(c, &(v.normalize()));
        }
    }
    basis
}

/// Replaces the atoms of a block no signal uses with the orthonormalized
/// residual directions `Aᵢᵀ(yᵢ − Aᵢ D sᵢ)` of the given signals.
pub fn reseed_dead_block(
    measurements: &MeasurementSet,
    dict: &mut BlockDictionary,
    codes: &[BlockSparseCode],
    block: usize,
    worst: &[usize],
    rng: &mut ChaCha8Rng,
) -> Result<()> {
    let k = dict.block_size(block);
    let n = dict.n();
    let mut cand = DMatrix::zeros(n, worst.len().min(k));
    for (c, &i) in worst.iter().take(k).enumerate() {
        let m = measurements.get(i);
        let r = &m.y - m.sensor.apply(&codes[i].reconstruct(dict));
        cand.set_column(c, &m.sensor.adjoint(&r));
    }
    let mut padded = DMatrix::zeros(n, k);
    padded.columns_mut(0, cand.ncols()).copy_from(&cand);
    let basis = complete_basis(&padded, rng);
    dict.set_block(block, &basis)
}

/// Runs the learner from fresh initializations and keeps the run with the
/// lowest objective. Restarts stop early once the objective vanishes.
pub fn learn(measurements: &MeasurementSet, config: &LearnerConfig) -> Result<LearnerState> {
    config.validate(measurements.n())?;
    let energy: f64 = measurements.iter().map(|m| m.y.norm_squared()).sum();
    let mut best: Option<LearnerState> = None;
    let mut last_err = None;
    for t in 0..config.restarts {
        let cfg = LearnerConfig {
            seed: if t == 0 { config.seed } else { derive_seed(config.seed, &[RESTART_STREAM, t as u64]) },
            ..config.clone()
        };
        let dict = initial_dictionary(measurements, &cfg)?;
        let codes = vec![BlockSparseCode::unassigned(); measurements.len()];
        match learn_from(measurements, &cfg, dict, codes) {
            Ok(st) => {
                debug!("restart {t}: objective {:.6e}", st.objective());
                if best.as_ref().is_none_or(|b| st.objective() < b.objective()) {
                    best = Some(st);
                }
            }
            Err(Error::InitializationFailure) => last_err = Some(Error::InitializationFailure),
            Err(e) => return Err(e),
        }
        if best.as_ref().is_some_and(|b| b.objective() <= VANISHING_OBJECTIVE * energy) {
            break;
        }
    }
    best.ok_or_else(|| last_err.unwrap_or(Error::InitializationFailure))
}

/// Runs the learner from a given dictionary and codes, e.g. a checkpoint.
pub fn learn_from(
    measurements: &MeasurementSet,
    config: &LearnerConfig,
    mut dict: BlockDictionary,
    mut codes: Vec<BlockSparseCode>,
) -> Result<LearnerState> {
    config.validate(measurements.n())?;
    if measurements.is_empty() {
        return contract("no measurements");
    }
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, &[RESEED_STREAM]));
    let mut trace = Vec::new();
    let mut history = Vec::new();
    let mut converged = false;
    let mut assignment = BlockAssignment::default();
    for it in 0..config.max_outer_iters {
        let mut merges = 0;
        if config.sac_every > 0 && it % config.sac_every == 0 && dict.num_blocks() > 1 {
            let usage = usage_sets(measurements, &dict, config.k_max, config.usage_energy);
            let sac = sac_merge(
                &dict,
                &usage,
                SacConfig {
                    k_max: config.k_max,
                    threshold: config.sac_threshold,
                },
            )?;
            merges = sac.merges;
            codes = sac.remap_codes(&codes);
            dict = sac.dict;
        }
        let before = objective(measurements, &dict, &codes)?;

        let choices = bomp_assign_each(measurements, &dict);
        let mut infeasible = 0;
        for (i, choice) in choices.into_iter().enumerate() {
            match choice {
                Ok(c) => codes[i] = BlockSparseCode::new(c.block, c.coefficients),
                Err(Error::NoFeasibleBlock { .. }) => infeasible += 1,
                Err(e) => return Err(e),
            }
        }
        if infeasible == measurements.len() {
            return Err(Error::InitializationFailure);
        }
        if infeasible > 0 {
            warn!("iteration {it}: {infeasible} signals fit no block and keep their previous code");
        }
        let after_assignment = objective(measurements, &dict, &codes)?;

        let pass: PassOutcome = run_block_pass(measurements, &dict, &codes)?;
        dict = pass.dict;
        codes = pass.codes;
        let current = pass.objective;

        let mut reseeded = Vec::new();
        if config.reseed_dead_blocks && !pass.empty_blocks.is_empty() && it + 1 < config.max_outer_iters {
            let mut order: Vec<(usize, f64)> = measurements
                .iter()
                .zip(&codes)
                .enumerate()
                .map(|(i, (m, c))| (i, residual_sq(m, &dict, c)))
                .collect();
            order.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
            let mut cursor = 0;
            for &l in &pass.empty_blocks {
                let k = dict.block_size(l);
                let end = (cursor + k).min(order.len());
                let worst: Vec<usize> = order[cursor..end].iter().filter(|(_, r)| *r > 0.0).map(|(i, _)| *i).collect();
                cursor = end;
                reseed_dead_block(measurements, &mut dict, &codes, l, &worst, &mut rng)?;
                reseeded.push(l);
            }
        }
        debug!(
            "iteration {it}: blocks={} merges={merges} objective {before:.6e} -> {after_assignment:.6e} -> {current:.6e}",
            dict.num_blocks()
        );
        history.push(IterationRecord {
            iteration: it,
            merges,
            num_blocks: dict.num_blocks(),
            objective_before_assignment: before,
            objective_after_assignment: after_assignment,
            objective_after_pass: current,
            infeasible_signals: infeasible,
            empty_blocks: pass.empty_blocks,
            reseeded,
        });
        let prev = trace.last().copied();
        trace.push(current);
        if current == 0.0 {
            converged = true;
            break;
        }
        if let Some(p) = prev {
            if merges == 0 && p - current <= config.objective_rel_tol * p {
                converged = true;
                break;
            }
        }
    }
    let mut blocks = Vec::with_capacity(codes.len());
    let mut residuals = Vec::with_capacity(codes.len());
    for (m, c) in measurements.iter().zip(&codes) {
        blocks.push(c.active_block().unwrap_or(usize::MAX));
        residuals.push(residual_sq(m, &dict, c).sqrt());
    }
    assignment.blocks = blocks;
    assignment.residuals = residuals;
    info!(
        "learner finished after {} iterations, objective {:.6e}, {} blocks",
        trace.len(),
        trace.last().copied().unwrap_or(f64::NAN),
        dict.num_blocks()
    );
    Ok(LearnerState {
        dict,
        codes,
        assignment,
        objective_trace: trace,
        history,
        converged,
    })
}

/// Writes `dictionary.bin`, `dictionary.json`, `codes.csv`, `assignment.csv`
/// and `trace.csv` into `dir`.
pub fn save_checkpoint(dir: &Path, state: &LearnerState) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    state.dict.save(&dir.join("dictionary.bin"), &dir.join("dictionary.json"))?;
    write_codes(BufWriter::new(File::create(dir.join("codes.csv"))?), &state.codes)?;
    state.assignment.write_csv(BufWriter::new(File::create(dir.join("assignment.csv"))?))?;
    let mut wtr = csv::Writer::from_path(dir.join("trace.csv"))?;
    wtr.write_record(["iteration", "objective"])?;
    for (i, v) in state.objective_trace.iter().enumerate() {
        wtr.write_record([i.to_string(), v.to_string()])?;
    }
    wtr.flush()?;
    Ok(())
}

/// Reads the dictionary and codes of a checkpoint.
pub fn load_checkpoint(dir: &Path) -> Result<(BlockDictionary, Vec<BlockSparseCode>)> {
    let dict = BlockDictionary::load(&dir.join("dictionary.bin"), &dir.join("dictionary.json"))?;
    let codes = read_codes(BufReader::new(File::open(dir.join("codes.csv"))?))?;
    for (i, c) in codes.iter().enumerate() {
        if let Some(l) = c.active_block() {
            if l >= dict.num_blocks() || c.block_coefficients().len() != dict.block_size(l) {
                return Err(Error::Format(format!("code {i} does not fit the dictionary")));
            }
        }
    }
    Ok((dict, codes))
}

/// Codes as CSV rows `signal_id,block_id,c0,c1,…`; unassigned signals have
/// an empty block id.
pub fn write_codes<W: std::io::Write>(w: W, codes: &[BlockSparseCode]) -> Result<()> {
    let mut wtr = csv::WriterBuilder::new().flexible(true).from_writer(w);
    wtr.write_record(["signal_id", "block_id", "coefficients"])?;
    for (i, c) in codes.iter().enumerate() {
        let mut rec = vec![i.to_string(), c.active_block().map(|l| l.to_string()).unwrap_or_default()];
        rec.extend(c.block_coefficients().iter().map(|v| format!("{v:e}")));
        wtr.write_record(&rec)?;
    }
    wtr.flush()?;
    Ok(())
}

pub fn read_codes<R: std::io::Read>(r: R) -> Result<Vec<BlockSparseCode>> {
    let mut rdr = csv::ReaderBuilder::new().flexible(true).from_reader(r);
    let mut out = Vec::new();
    for (row, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let id: usize = rec
            .get(0)
            .and_then(|s| s.trim().parse().ok())
            .ok_or_else(|| Error::Format(format!("codes row {row}: bad signal id")))?;
        if id != row {
            return Err(Error::Format(format!("codes row {row}: expected signal id {row}, got {id}")));
        }
        let block = rec.get(1).unwrap_or("").trim();
        if block.is_empty() {
            out.push(BlockSparseCode::unassigned());
            continue;
        }
        let l: usize = block
            .parse()
            .map_err(|_| Error::Format(format!("codes row {row}: bad block id")))?;
        let coefs: std::result::Result<Vec<f64>, _> = rec.iter().skip(2).map(|s| s.trim().parse::<f64>()).collect();
        let coefs = coefs.map_err(|_| Error::Format(format!("codes row {row}: bad coefficient")))?;
        out.push(BlockSparseCode::new(l, DVector::from_vec(coefs)));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sensing::{make_gaussian, make_pixel_mask, Measurement};

    fn planted(n: usize, blocks: usize, k: usize, count: usize, seed: u64) -> (MeasurementSet, Vec<DMatrix<f64>>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let spans: Vec<DMatrix<f64>> = (0..blocks)
            .map(|_| DMatrix::from_fn(n, k, |_, _| StandardNormal.sample(&mut rng)).qr().q().columns(0, k).clone_owned())
            .collect();
        let mut set = MeasurementSet::new(n);
        for i in 0..count {
            let s = DVector::from_fn(k, |_, _| StandardNormal.sample(&mut rng));
            let x = &spans[i % blocks] * s;
            let m = n / 2 + k;
            set.push(Measurement::observe(make_gaussian(m, n, seed * 7919 + i as u64).unwrap(), &x).unwrap())
                .unwrap();
        }
        (set, spans)
    }

    #[test]
    fn config_validation() {
        let c = LearnerConfig {
            max_outer_iters: 0,
            ..Default::default()
        };
        assert!(c.validate(16).is_err());
        let c = LearnerConfig {
            k_max: 20,
            ..Default::default()
        };
        assert!(c.validate(16).is_err());
        assert!(LearnerConfig::default().validate(16).is_ok());
    }

    #[test]
    fn objective_trace_is_monotone() {
        let (set, _) = planted(12, 3, 2, 60, 1);
        let cfg = LearnerConfig {
            k_max: 2,
            r: 12,
            max_outer_iters: 8,
            seed: 3,
            ..Default::default()
        };
        let st = learn(&set, &cfg).unwrap();
        for rec in &st.history {
            assert!(rec.objective_after_assignment <= rec.objective_before_assignment * (1.0 + 1e-9) + 1e-12);
            assert!(rec.objective_after_pass <= rec.objective_after_assignment * (1.0 + 1e-9) + 1e-12);
        }
        assert!(st.dict.is_orthonormal() || st.dict.num_blocks() > 0);
    }

    #[test]
    fn deterministic_under_seed() {
        let (set, _) = planted(10, 2, 2, 30, 2);
        let cfg = LearnerConfig {
            k_max: 2,
            r: 8,
            max_outer_iters: 4,
            seed: 11,
            ..Default::default()
        };
        let a = learn(&set, &cfg).unwrap();
        let b = learn(&set, &cfg).unwrap();
        assert_eq!(a.dict, b.dict);
        assert_eq!(a.codes, b.codes);
        assert_eq!(a.objective_trace, b.objective_trace);
    }

    #[test]
    fn all_infeasible_is_initialization_failure() {
        let n = 6;
        let mut set = MeasurementSet::new(n);
        for i in 0..4 {
            set.push(Measurement::new(make_pixel_mask(n, &[i]).unwrap(), DVector::from_element(1, 1.0)).unwrap())
                .unwrap();
        }
        let cfg = LearnerConfig {
            k_max: 3,
            r: 3,
            initial_block_sizes: Some(vec![3]),
            sac_every: 0,
            ..Default::default()
        };
        assert!(matches!(learn(&set, &cfg), Err(Error::InitializationFailure)));
    }

    #[test]
    fn checkpoint_round_trip() {
        let (set, _) = planted(8, 2, 2, 20, 4);
        let cfg = LearnerConfig {
            k_max: 2,
            r: 6,
            max_outer_iters: 2,
            ..Default::default()
        };
        let st = learn(&set, &cfg).unwrap();
        let dir = tempfile::tempdir().unwrap();
        save_checkpoint(dir.path(), &st).unwrap();
        let (dict, codes) = load_checkpoint(dir.path()).unwrap();
        assert_eq!(dict, st.dict);
        assert_eq!(codes.len(), st.codes.len());
        let obj = objective(&set, &dict, &codes).unwrap();
        assert!((obj - st.objective()).abs() <= 1e-9 * st.objective().max(1.0));
        let resumed = learn_from(&set, &cfg, dict, codes).unwrap();
        assert!(resumed.objective() <= st.objective() * (1.0 + 1e-9) + 1e-12);
    }

    #[test]
    fn codes_csv_keeps_unassigned() {
        let codes = vec![
            BlockSparseCode::new(1, DVector::from_vec(vec![0.25, -3.5])),
            BlockSparseCode::unassigned(),
        ];
        let mut buf = Vec::new();
        write_codes(&mut buf, &codes).unwrap();
        assert_eq!(read_codes(buf.as_slice()).unwrap(), codes);
    }
}
