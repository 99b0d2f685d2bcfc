//! Planted union-of-subspaces data, the observation-fraction phase
//! transition experiment, and an exhaustive rank-test clustering used as a
//! ground-truth oracle.

use std::io::Write;

use itertools::Itertools;
use log::{info, warn};
use nalgebra::{DMatrix, DVector};
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{contract, Error, Result};
use crate::imaging::{extract_patches, psnr_from_mse, GrayImage, PatchGrid};
use crate::learner::{learn, LearnerConfig};
use crate::linalg::{self, ThinSvd};
use crate::model::{BlockDictionary, BlockSparseCode};
use crate::seeds::derive_seed;
use crate::sensing::{make_pixel_mask, Measurement, MeasurementSet};

/// Largest signal count accepted by [`rank_clustering_oracle`].
pub const ORACLE_MAX_SIGNALS: usize = 12;

/// Ground truth for synthetic experiments. Signals are stored block by block:
/// the first `counts[0]` belong to block 0, and so on.
#[derive(Debug, Clone)]
pub struct PlantedModel {
    pub dict: BlockDictionary,
    pub codes: Vec<BlockSparseCode>,
    pub signals: Vec<DVector<f64>>,
    pub counts: Vec<usize>,
    pub seed: u64,
}

impl PlantedModel {
    pub fn n(&self) -> usize {
        self.dict.n()
    }

    /// True block of every signal.
    pub fn labels(&self) -> Vec<usize> {
        self.counts.iter().enumerate().flat_map(|(l, &c)| std::iter::repeat_n(l, c)).collect()
    }

    /// Fully observed measurements (`A_i = I`).
    pub fn full_measurements(&self) -> Result<MeasurementSet> {
        let n = self.n();
        let all: Vec<usize> = (0..n).collect();
        let items = self
            .signals
            .iter()
            .map(|x| Measurement::observe(make_pixel_mask(n, &all)?, x))
            .collect::<Result<Vec<_>>>()?;
        MeasurementSet::from_vec(n, items)
    }

    /// Pixel-mask measurements keeping exactly `round(fraction·n)` entries of
    /// every signal, drawn independently per signal.
    pub fn mask_measurements(&self, fraction: f64, seed: u64) -> Result<MeasurementSet> {
        if !(fraction > 0.0 && fraction <= 1.0) {
            return contract(format!("observed fraction {fraction} outside (0, 1]"));
        }
        let n = self.n();
        let m = ((fraction * n as f64).round() as usize).clamp(1, n);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let items = self
            .signals
            .iter()
            .map(|x| {
                let mut ids = sample(&mut rng, n, m).into_vec();
                ids.sort_unstable();
                Measurement::observe(make_pixel_mask(n, &ids)?, x)
            })
            .collect::<Result<Vec<_>>>()?;
        MeasurementSet::from_vec(n, items)
    }

    /// `max − min` over all signal entries, used as the PSNR peak.
    pub fn dynamic_range(&self) -> f64 {
        let (lo, hi) = self
            .signals
            .iter()
            .flat_map(|x| x.iter())
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
        hi - lo
    }
}

/// Orthonormalized Gaussian blocks with `counts[ℓ]` signals each and i.i.d.
/// standard normal coefficients.
pub fn generate_planted(n: usize, block_sizes: &[usize], counts: &[usize], seed: u64) -> Result<PlantedModel> {
    if block_sizes.is_empty() {
        return contract("at least one block is required");
    }
    if block_sizes.len() != counts.len() {
        return Err(Error::DimensionMismatch {
            index: block_sizes.len().min(counts.len()),
            detail: format!("{} block sizes but {} counts", block_sizes.len(), counts.len()),
        });
    }
    for (l, (&k, &c)) in block_sizes.iter().zip(counts).enumerate() {
        if k == 0 || k > n {
            return contract(format!("block {l}: size {k} must lie in 1..={n}"));
        }
        if c < k + 1 {
            return contract(format!("block {l}: {c} signals, richness needs at least {}", k + 1));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut blocks = Vec::with_capacity(block_sizes.len());
    for &k in block_sizes {
        let g = DMatrix::from_fn(n, k, |_, _| StandardNormal.sample(&mut rng));
        blocks.push(g.qr().q().columns(0, k).clone_owned());
    }
    let k_max = *block_sizes.iter().max().unwrap();
    let dict = BlockDictionary::from_blocks(&blocks, k_max)?;
    let mut codes = Vec::new();
    let mut signals = Vec::new();
    for (l, &c) in counts.iter().enumerate() {
        for _ in 0..c {
            let s = DVector::from_fn(block_sizes[l], |_, _| StandardNormal.sample(&mut rng));
            signals.push(&blocks[l] * &s);
            codes.push(BlockSparseCode::new(l, s));
        }
    }
    Ok(PlantedModel {
        dict,
        codes,
        signals,
        counts: counts.to_vec(),
        seed,
    })
}

/// Union-of-subspaces approximation of an image: non-overlapping `p × p`
/// tiles are clustered by the learner under full observation, and each
/// cluster is replaced by its best rank-`k` approximation. Blocks that
/// attract at most `k` tiles are dropped together with their tiles.
pub fn truncated_image_model(img: &GrayImage, p: usize, k: usize, learner: &LearnerConfig) -> Result<PlantedModel> {
    let grid = PatchGrid::new(img.height(), img.width(), p, p)?;
    let (patches, _) = extract_patches(img, &grid)?;
    let n = p * p;
    let all: Vec<usize> = (0..n).collect();
    let items = patches
        .iter()
        .map(|x| Measurement::observe(make_pixel_mask(n, &all)?, x))
        .collect::<Result<Vec<_>>>()?;
    let set = MeasurementSet::from_vec(n, items)?;
    let state = learn(&set, learner)?;
    let members = state.assignment.members(state.dict.num_blocks());
    let (mut blocks, mut codes, mut signals, mut counts) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
    for ids in members.iter().filter(|ids| ids.len() > k) {
        let x = DMatrix::from_columns(&ids.iter().map(|&i| patches[i].clone()).collect::<Vec<_>>());
        let svd = ThinSvd::new(&x);
        if svd.rank(1e-10) < k {
            continue;
        }
        let u = svd.u.columns(0, k).clone_owned();
        let l = blocks.len();
        for j in 0..x.ncols() {
            let s = u.transpose() * x.column(j);
            signals.push(&u * &s);
            codes.push(BlockSparseCode::new(l, s));
        }
        counts.push(ids.len());
        blocks.push(u);
    }
    if blocks.is_empty() {
        return contract(format!("no cluster has more than {k} tiles"));
    }
    info!("truncated image model: {} blocks, {} signals", blocks.len(), signals.len());
    Ok(PlantedModel {
        dict: BlockDictionary::from_blocks(&blocks, k)?,
        codes,
        signals,
        counts,
        seed: learner.seed,
    })
}

#[derive(Debug, Clone)]
pub struct PhaseConfig {
    pub fractions: Vec<f64>,
    pub trials: usize,
    pub threshold_db: f64,
    /// Learner settings; `seed` is replaced per trial.
    pub learner: LearnerConfig,
    pub seed: u64,
}

impl PhaseConfig {
    /// Fractions 0.1, 0.2, …, 0.9 with ten trials and a 40 dB threshold.
    pub fn standard(learner: LearnerConfig, seed: u64) -> Self {
        Self {
            fractions: (1..=9).map(|i| i as f64 / 10.0).collect(),
            trials: 10,
            threshold_db: 40.0,
            learner,
            seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialRecord {
    pub fraction: f64,
    pub trial: usize,
    pub psnr_db: f64,
    pub success: bool,
    /// Why the learner produced no estimate.
    pub reason: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PhaseTable {
    pub trials: Vec<TrialRecord>,
    /// `(fraction, success frequency)` in the order of the configured fractions.
    pub summary: Vec<(f64, f64)>,
}

impl PhaseTable {
    pub fn frequency(&self, fraction: f64) -> Option<f64> {
        self.summary.iter().find(|(f, _)| (f - fraction).abs() < 1e-12).map(|&(_, v)| v)
    }

    /// Spearman correlation between fraction and frequency.
    pub fn trend(&self) -> f64 {
        let (f, v): (Vec<f64>, Vec<f64>) = self.summary.iter().copied().unzip();
        spearman(&f, &v)
    }

    pub fn write_trials_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["fraction", "trial", "psnr_db", "success", "reason"])?;
        for t in &self.trials {
            out.write_record([
                t.fraction.to_string(),
                t.trial.to_string(),
                t.psnr_db.to_string(),
                u8::from(t.success).to_string(),
                t.reason.clone().unwrap_or_default(),
            ])?;
        }
        out.flush()?;
        Ok(())
    }

    pub fn write_summary_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["fraction", "frequency"])?;
        for (f, v) in &self.summary {
            out.write_record([f.to_string(), v.to_string()])?;
        }
        out.flush()?;
        Ok(())
    }

    /// Whitespace-separated columns for plotting.
    pub fn write_gnuplot<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "# fraction frequency")?;
        for (f, v) in &self.summary {
            writeln!(w, "{f} {v}")?;
        }
        Ok(())
    }
}

/// PSNR of the learner's reconstructions against the planted signals, with
/// the planted dynamic range as peak.
pub fn reconstruction_psnr(model: &PlantedModel, estimates: &[DVector<f64>]) -> f64 {
    let count: usize = model.signals.iter().map(|x| x.len()).sum();
    let sq: f64 = model.signals.iter().zip(estimates).map(|(x, e)| (x - e).norm_squared()).sum();
    psnr_from_mse(sq / count as f64, model.dynamic_range())
}

/// Runs the learner on freshly masked copies of `model` for every fraction
/// and trial. Each trial draws its masks and learner seed from
/// `(seed, fraction index, trial)`, so results do not depend on scheduling.
pub fn phase_transition(model: &PlantedModel, config: &PhaseConfig) -> Result<PhaseTable> {
    if config.trials == 0 {
        return contract("at least one trial per fraction is required");
    }
    if let Some(f) = config.fractions.iter().find(|&&f| !(f > 0.0 && f <= 1.0)) {
        return contract(format!("observed fraction {f} outside (0, 1]"));
    }
    let jobs: Vec<(usize, usize)> = (0..config.fractions.len()).cartesian_product(0..config.trials).collect();
    let trials: Vec<TrialRecord> = jobs
        .par_iter()
        .map(|&(fi, trial)| {
            let fraction = config.fractions[fi];
            let base = derive_seed(config.seed, &[fi as u64, trial as u64]);
            let outcome = model.mask_measurements(fraction, derive_seed(base, &[0])).and_then(|set| {
                let cfg = LearnerConfig {
                    seed: derive_seed(base, &[1]),
                    ..config.learner.clone()
                };
                learn(&set, &cfg)
            });
            let (psnr_db, reason) = match outcome {
                Ok(state) => (reconstruction_psnr(model, &state.reconstructions()), None),
                Err(e) => (f64::NEG_INFINITY, Some(e.to_string())),
            };
            let success = psnr_db > config.threshold_db;
            info!("fraction {fraction} trial {trial}: {psnr_db:.2} dB");
            TrialRecord {
                fraction,
                trial,
                psnr_db,
                success,
                reason,
            }
        })
        .collect();
    let summary = config
        .fractions
        .iter()
        .enumerate()
        .map(|(fi, &f)| {
            let hits = trials[fi * config.trials..(fi + 1) * config.trials].iter().filter(|t| t.success).count();
            (f, hits as f64 / config.trials as f64)
        })
        .collect();
    Ok(PhaseTable { trials, summary })
}

fn average_ranks(v: &[f64]) -> Vec<f64> {
    let order: Vec<usize> = (0..v.len()).sorted_by(|&a, &b| v[a].total_cmp(&v[b])).collect();
    let mut ranks = vec![0.0; v.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && v[order[j + 1]] == v[order[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0;
        for &o in &order[i..=j] {
            ranks[o] = avg;
        }
        i = j + 1;
    }
    ranks
}

/// Spearman rank correlation with average ranks for ties. A constant input
/// carries no trend and yields 0.
pub fn spearman(x: &[f64], y: &[f64]) -> f64 {
    assert_eq!(x.len(), y.len(), "spearman needs paired samples");
    let (rx, ry) = (average_ranks(x), average_ranks(y));
    let mean = |r: &[f64]| r.iter().sum::<f64>() / r.len() as f64;
    let (mx, my) = (mean(&rx), mean(&ry));
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in rx.iter().zip(&ry) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        0.0
    } else {
        sxy / (sxx * syy).sqrt()
    }
}

/// Clusters signals by exhaustive rank tests: any `k + 1` signals whose
/// matrix has rank at most `k` are put in one cluster. Labels are numbered
/// by first appearance.
pub fn rank_clustering_oracle(signals: &[DVector<f64>], k: usize) -> Result<Vec<usize>> {
    let count = signals.len();
    if count > ORACLE_MAX_SIGNALS {
        return Err(Error::TooLarge(format!(
            "rank clustering oracle takes at most {ORACLE_MAX_SIGNALS} signals, got {count}"
        )));
    }
    if count == 0 {
        return Ok(Vec::new());
    }
    let n = signals[0].len();
    if k >= n {
        warn!("k = {k} ≥ n = {n}: every subset is rank deficient, returning one cluster");
        return Ok(vec![0; count]);
    }
    let mut parent: Vec<usize> = (0..count).collect();
    fn find(parent: &mut [usize], i: usize) -> usize {
        let mut r = i;
        while parent[r] != r {
            r = parent[r];
        }
        parent[i] = r;
        r
    }
    for subset in (0..count).combinations(k + 1) {
        let m = DMatrix::from_columns(&subset.iter().map(|&i| signals[i].clone()).collect::<Vec<_>>());
        if linalg::rank(&m, 1e-8) <= k {
            let root = find(&mut parent, subset[0]);
            for &i in &subset[1..] {
                let r = find(&mut parent, i);
                parent[r] = root;
            }
        }
    }
    let mut labels = vec![usize::MAX; count];
    let mut next = 0;
    let mut seen = std::collections::HashMap::new();
    for (i, label) in labels.iter_mut().enumerate() {
        let root = find(&mut parent, i);
        *label = *seen.entry(root).or_insert_with(|| {
            next += 1;
            next - 1
        });
    }
    Ok(labels)
}

/// Whether two labelings induce the same partition.
pub fn same_partition(a: &[usize], b: &[usize]) -> bool {
    a.len() == b.len()
        && (0..a.len()).tuple_combinations().all(|(i, j)| (a[i] == a[j]) == (b[i] == b[j]))
}
