//! Computable versions of the identifiability and convergence conditions:
//! spark, coherence, the incoherence parameter of a low-rank matrix, the
//! completion sample bound, the coupon-collector bound, and checkers that
//! evaluate every condition on a concrete instance.

use std::collections::BTreeMap;

use itertools::Itertools;
use nalgebra::DMatrix;
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::block_inference::BlockAssignment;
use crate::error::{contract, Error, Result};
use crate::linalg::{self, ThinSvd};
use crate::model::{BlockDictionary, BlockSparseCode, ORTHONORMAL_TOL};
use crate::sensing::{build_union, MeasurementSet, SensingKind, UnionMatrix};

/// Relative singular-value cutoff for the rank tests in this module.
pub const RANK_TOL: f64 = 1e-10;

/// Default largest subset size searched by [`spark`].
pub const DEFAULT_MAX_SUBSET: usize = 6;

/// Subsets beyond this count are sampled in the non-degeneracy test.
pub const MAX_EXHAUSTIVE_SUBSETS: usize = 10_000;

/// Spark of a matrix, or a lower bound when the search was cut short.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Spark {
    Exact(usize),
    /// No dependent subset of size `≤ searched` exists.
    Above(usize),
}

impl Spark {
    /// Whether `spark > bound` is established.
    pub fn exceeds(&self, bound: usize) -> Option<bool> {
        match *self {
            Spark::Exact(s) => Some(s > bound),
            Spark::Above(s) if s >= bound => Some(true),
            Spark::Above(_) => None,
        }
    }
}

/// Smallest number of linearly dependent columns, searched exhaustively up
/// to `max_subset` columns. A matrix with full column rank whose every subset
/// was searched has spark `r + 1`.
pub fn spark(m: &DMatrix<f64>, max_subset: usize) -> Spark {
    let r = m.ncols();
    let cut = RANK_TOL * ThinSvd::new(m).largest();
    let rank = linalg::rank(m, RANK_TOL);
    // any rank+1 columns are dependent
    let limit = max_subset.min(rank + 1).min(r);
    for size in 1..=limit {
        for subset in (0..r).combinations(size) {
            let cols = m.select_columns(&subset);
            let dependent = if cut == 0.0 {
                true
            } else {
                ThinSvd::new(&cols).singular_values.iter().filter(|&&s| s > cut).count() < size
            };
            if dependent {
                return Spark::Exact(size);
            }
        }
    }
    if limit == r {
        Spark::Exact(r + 1)
    } else {
        Spark::Above(limit)
    }
}

/// `(n/k)·max_{u,v} (z_uᵀ e_v)²` for an orthonormal `n × k` basis.
pub fn coherence(basis: &DMatrix<f64>) -> Result<f64> {
    let (n, k) = basis.shape();
    if k == 0 || n == 0 {
        return contract("basis must be nonempty");
    }
    let err = linalg::max_abs(&(basis.tr_mul(basis) - DMatrix::identity(k, k)));
    if err > ORTHONORMAL_TOL {
        return contract(format!("basis columns are not orthonormal (deviation {err:.3e})"));
    }
    let peak = basis.iter().map(|v| v * v).fold(0.0, f64::max);
    Ok(n as f64 / k as f64 * peak)
}

/// Incoherence parameters of a rank-`k` matrix.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Incoherence {
    pub mu0: f64,
    pub mu1: f64,
    pub mu: f64,
}

/// `μ₀` = larger coherence of the rank-`k` column and row spaces, `μ₁` =
/// `max|UVᵀ|·√(M₁M₂/k)`, and `μ = max(μ₁², μ₀)`.
pub fn mu_ell(y: &DMatrix<f64>, k: usize) -> Result<Incoherence> {
    let (m1, m2) = y.shape();
    let svd = ThinSvd::new(y);
    let rank = svd.rank(RANK_TOL);
    if k == 0 || k > rank {
        return Err(Error::RankDeficient { rank, expected: k });
    }
    let u = svd.u.columns(0, k).clone_owned();
    let v = svd.v_t.rows(0, k).transpose();
    let mu0 = coherence(&u)?.max(coherence(&v)?);
    let mu1 = linalg::max_abs(&(&u * v.transpose())) * ((m1 * m2) as f64 / k as f64).sqrt();
    Ok(Incoherence {
        mu0,
        mu1,
        mu: (mu1 * mu1).max(mu0),
    })
}

/// Observed entries sufficient for exact completion,
/// `⌈32 μ k (M₁+M₂) β ln(2M₂)⌉`, and the success probability lower bound
/// `1 − 6 ln(M₂)(M₁+M₂)^{2−2β} − M₂^{2−2√β}` clamped to `[0, 1]`.
pub fn completion_sample_bound(mu: f64, k: usize, m1: usize, m2: usize, beta: f64) -> Result<(u64, f64)> {
    if !(beta > 1.0) {
        return contract(format!("beta={beta} must exceed 1"));
    }
    if !(mu > 0.0) || k == 0 || m1 == 0 || m2 == 0 {
        return contract("mu, k, M1 and M2 must be positive");
    }
    let (m1f, m2f) = (m1 as f64, m2 as f64);
    let required = (32.0 * mu * k as f64 * (m1f + m2f) * beta * (2.0 * m2f).ln()).ceil();
    let p = 1.0 - 6.0 * m2f.ln() * (m1f + m2f).powf(2.0 - 2.0 * beta) - m2f.powf(2.0 - 2.0 * beta.sqrt());
    Ok((required as u64, p.clamp(0.0, 1.0)))
}

/// `min(1, n(1 − 1/n)^draws)`: probability bound that some of `n`
/// coordinates is never drawn.
pub fn coupon_collector_bound(n: u64, draws: u64) -> f64 {
    if n == 0 {
        return 0.0;
    }
    let nf = n as f64;
    let miss = if n == 1 {
        if draws == 0 {
            1.0
        } else {
            0.0
        }
    } else {
        (draws as f64 * (-1.0 / nf).ln_1p()).exp()
    };
    (nf * miss).min(1.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Status {
    Pass,
    Fail,
    /// The check could not be completed within its search bound.
    Unverified,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Condition {
    pub name: String,
    /// Block the condition refers to, when it is per block.
    pub block: Option<usize>,
    pub status: Status,
    pub detail: String,
    pub values: BTreeMap<String, f64>,
}

/// Outcome of a condition check.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConditionReport {
    pub conditions: Vec<Condition>,
    /// No condition failed.
    pub overall: bool,
    /// Every condition was decided.
    pub verified: bool,
}

impl ConditionReport {
    fn from_conditions(conditions: Vec<Condition>) -> Self {
        let overall = conditions.iter().all(|c| c.status != Status::Fail);
        let verified = conditions.iter().all(|c| c.status != Status::Unverified);
        Self {
            conditions,
            overall,
            verified,
        }
    }

    pub fn failed(&self) -> impl Iterator<Item = &Condition> {
        self.conditions.iter().filter(|c| c.status == Status::Fail)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

fn condition(name: &str, block: Option<usize>, status: Status, detail: String, values: &[(&str, f64)]) -> Condition {
    Condition {
        name: name.to_string(),
        block,
        status,
        detail,
        values: values.iter().map(|(k, v)| (k.to_string(), *v)).collect(),
    }
}

fn pass_fail(ok: bool) -> Status {
    if ok {
        Status::Pass
    } else {
        Status::Fail
    }
}

#[derive(Debug, Clone, Copy)]
pub struct CheckOptions {
    pub max_subset: usize,
    /// Constant of the `β·k·n·ln n` sample requirement for row-subset sensing.
    pub beta: f64,
    pub seed: u64,
}

impl Default for CheckOptions {
    fn default() -> Self {
        Self {
            max_subset: DEFAULT_MAX_SUBSET,
            beta: 2.0,
            seed: 0,
        }
    }
}

fn spark_condition(effective: &DMatrix<f64>, k_max: usize, opts: &CheckOptions) -> Condition {
    // k < spark/2 for every block iff spark > 2·k_max, so subsets up to
    // 2·k_max decide it
    let bound = 2 * k_max;
    let sp = spark(effective, opts.max_subset.min(bound));
    let (status, detail, value) = match (sp, sp.exceeds(bound)) {
        (Spark::Exact(s), Some(ok)) => (pass_fail(ok), format!("spark = {s}, need > {bound}"), s as f64),
        (Spark::Above(s), Some(_)) => (Status::Pass, format!("spark > {s} ≥ {bound}"), s as f64 + 1.0),
        (Spark::Above(s), None) => (
            Status::Unverified,
            format!("no dependent subset of size ≤ {s}; need spark > {bound} (raise max_subset)"),
            s as f64 + 1.0,
        ),
        (Spark::Exact(_), None) => unreachable!("exact spark always decides"),
    };
    condition("spark", None, status, detail, &[("spark_lower_bound", value), ("required_above", bound as f64)])
}

/// Evaluates the uniqueness conditions on a dictionary and codes:
/// (i) `k_ℓ < spark(ÃD)/2`, (ii) `|ω_ℓ| > k_ℓ`, and (iii) every `k_ℓ`
/// codes of block `ℓ` are linearly independent. `Ã` defaults to the
/// identity.
pub fn check_dl_uniqueness(
    dict: &BlockDictionary,
    codes: &[BlockSparseCode],
    union: Option<&UnionMatrix>,
    opts: &CheckOptions,
) -> Result<ConditionReport> {
    let effective = match union {
        Some(u) if u.n() != dict.n() => {
            return Err(Error::DimensionMismatch {
                index: 0,
                detail: format!("union has n={}, dictionary n={}", u.n(), dict.n()),
            })
        }
        Some(u) => &u.rows * dict.atoms(),
        None => dict.atoms().clone(),
    };
    let k_max = (0..dict.num_blocks()).map(|l| dict.block_size(l)).max().unwrap_or(0);
    let mut conds = vec![spark_condition(&effective, k_max, opts)];
    let mut groups: Vec<Vec<usize>> = vec![Vec::new(); dict.num_blocks()];
    for (i, c) in codes.iter().enumerate() {
        if let Some(l) = c.active_block() {
            if l >= groups.len() {
                return contract(format!("code {i} is active on block {l} >= L={}", groups.len()));
            }
            groups[l].push(i);
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    for (l, members) in groups.iter().enumerate() {
        let k = dict.block_size(l);
        let count = members.len();
        conds.push(condition(
            "richness",
            Some(l),
            pass_fail(count > k),
            format!("|ω| = {count}, need > {k}"),
            &[("signals", count as f64), ("block_size", k as f64)],
        ));
        let code_mat = DMatrix::from_columns(&members.iter().map(|&i| codes[i].block_coefficients().clone()).collect::<Vec<_>>());
        let (status, detail, tested) = non_degeneracy(&code_mat, k, &mut rng);
        conds.push(condition(
            "non_degeneracy",
            Some(l),
            status,
            detail,
            &[("subsets_tested", tested as f64)],
        ));
    }
    Ok(ConditionReport::from_conditions(conds))
}

fn binomial(n: usize, k: usize) -> Option<usize> {
    let k = k.min(n - k.min(n));
    let mut acc: usize = 1;
    for i in 0..k {
        acc = acc.checked_mul(n - i)? / (i + 1);
    }
    Some(acc)
}

fn non_degeneracy(codes: &DMatrix<f64>, k: usize, rng: &mut ChaCha8Rng) -> (Status, String, usize) {
    let count = codes.ncols();
    if count < k {
        return (Status::Fail, format!("only {count} signals for a block of size {k}"), 0);
    }
    let full = |idx: &[usize]| linalg::rank(&codes.select_columns(idx), RANK_TOL) == k;
    match binomial(count, k) {
        Some(total) if total <= MAX_EXHAUSTIVE_SUBSETS => {
            for subset in (0..count).combinations(k) {
                if !full(&subset) {
                    return (Status::Fail, format!("signals {subset:?} are degenerate"), total);
                }
            }
            (Status::Pass, format!("all {total} subsets of size {k} have full rank"), total)
        }
        _ => {
            for _ in 0..MAX_EXHAUSTIVE_SUBSETS {
                let mut subset = sample(rng, count, k).into_vec();
                subset.sort_unstable();
                if !full(&subset) {
                    return (Status::Fail, format!("signals {subset:?} are degenerate"), MAX_EXHAUSTIVE_SUBSETS);
                }
            }
            (
                Status::Pass,
                format!("{MAX_EXHAUSTIVE_SUBSETS} sampled subsets of size {k} have full rank"),
                MAX_EXHAUSTIVE_SUBSETS,
            )
        }
    }
}

/// Evaluates the convergence conditions of the alternating least-squares
/// learner for every block of an assignment: (i) the spark condition on
/// `ÃD`, (ii) `|ω_ℓ| ≥ n`, (iii) `|Ω_ℓ| ≥ k_ℓ n` for Gaussian sensing or
/// `≥ β k_ℓ n ln n` for row-subset sensing, (iv) `m_i ≥ k_ℓ`, and
/// `rank(Γ_ℓ) = n` for the stacked sensing rows of the block.
pub fn sampling_conditions_check(
    measurements: &MeasurementSet,
    dict: &BlockDictionary,
    assignment: &BlockAssignment,
    opts: &CheckOptions,
) -> Result<ConditionReport> {
    let n = measurements.n();
    if dict.n() != n {
        return Err(Error::DimensionMismatch {
            index: 0,
            detail: format!("dictionary n={} but measurements n={n}", dict.n()),
        });
    }
    if assignment.len() != measurements.len() {
        return Err(Error::DimensionMismatch {
            index: assignment.len().min(measurements.len()),
            detail: format!("{} assignments for {} measurements", assignment.len(), measurements.len()),
        });
    }
    let union = build_union(measurements.iter().map(|m| &m.sensor))?;
    let k_max = (0..dict.num_blocks()).map(|l| dict.block_size(l)).max().unwrap_or(0);
    let mut conds = vec![spark_condition(&(&union.rows * dict.atoms()), k_max, opts)];
    let members = assignment.members(dict.num_blocks());
    let nf = n as f64;
    for (l, ids) in members.iter().enumerate() {
        let k = dict.block_size(l);
        conds.push(condition(
            "signals_per_block",
            Some(l),
            pass_fail(ids.len() >= n),
            format!("|ω| = {}, need ≥ n = {n}", ids.len()),
            &[("signals", ids.len() as f64), ("n", nf)],
        ));
        let observed: usize = ids.iter().map(|&i| measurements.get(i).sensor.m()).sum();
        let gaussian = ids
            .iter()
            .all(|&i| measurements.get(i).sensor.kind() == SensingKind::Gaussian);
        let required = if gaussian {
            (k * n) as f64
        } else {
            opts.beta * k as f64 * nf * nf.ln()
        };
        let mut values = vec![("observed", observed as f64), ("required", required)];
        let effective_beta = observed as f64 / (nf * nf.ln());
        if !gaussian && n > 1 {
            values.push(("beta_effective", effective_beta));
            values.push(("probability_lower_bound", (1.0 - nf.powf(1.0 - effective_beta)).max(0.0)));
        }
        conds.push(condition(
            "observed_entries",
            Some(l),
            pass_fail(observed as f64 >= required),
            if gaussian {
                format!("|Ω| = {observed}, need ≥ k·n = {required}")
            } else {
                format!("|Ω| = {observed}, need ≥ β·k·n·ln n = {required:.1} (β = {})", opts.beta)
            },
            &values,
        ));
        let short: Vec<usize> = ids
            .iter()
            .copied()
            .filter(|&i| measurements.get(i).sensor.m() < k)
            .collect();
        conds.push(condition(
            "measurements_per_signal",
            Some(l),
            pass_fail(short.is_empty()),
            if short.is_empty() {
                format!("every signal has m ≥ {k}")
            } else {
                format!("signals {short:?} have m < {k}")
            },
            &[("violations", short.len() as f64)],
        ));
        let gamma_rank = if ids.is_empty() {
            0
        } else {
            build_union(ids.iter().map(|&i| &measurements.get(i).sensor))?.rank()
        };
        conds.push(condition(
            "stacked_rank",
            Some(l),
            pass_fail(gamma_rank == n),
            format!("rank(Γ) = {gamma_rank}, need {n}"),
            &[("rank", gamma_rank as f64), ("n", nf)],
        ));
    }
    Ok(ConditionReport::from_conditions(conds))
}
