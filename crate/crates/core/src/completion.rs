//! Nuclear-norm matrix completion of a clustered observation matrix by
//! singular value thresholding, and its factorization into a block and codes.

use log::warn;
use nalgebra::DMatrix;

use crate::error::{contract, Error, Result};
use crate::linalg::{self, ThinSvd};
use crate::sensing::{ObservationMatrix, UnionMatrix};

/// Residual growth over its running minimum that counts as divergence.
const DIVERGENCE_FACTOR: f64 = 10.0;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SvtConfig {
    /// Shrinkage threshold on singular values.
    pub tau: f64,
    /// Step size.
    pub delta: f64,
    pub max_iters: usize,
    /// Stop once `‖P_Ω(Y − M)‖_F / ‖P_Ω(M)‖_F` drops below this.
    pub tol: f64,
}

impl SvtConfig {
    /// The usual schedule `τ = 5·√(MN)`, `δ = 1.2·MN/|Ω|`.
    pub fn standard(rows: usize, cols: usize, observed: usize) -> Self {
        Self {
            tau: 5.0 * ((rows * cols) as f64).sqrt(),
            delta: 1.2 * (rows * cols) as f64 / observed.max(1) as f64,
            max_iters: 3000,
            tol: 1e-6,
        }
    }

    fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return contract("tau must be positive");
        }
        if !(self.delta > 0.0 && self.delta.is_finite()) {
            return contract("delta must be positive");
        }
        if !(self.tol >= 0.0) {
            return contract("tol must be non-negative");
        }
        Ok(())
    }
}

/// `U·max(Σ − τ, 0)·Vᵀ`, the proximal operator of `τ‖·‖_*`.
pub fn shrink_singular_values(z: &DMatrix<f64>, tau: f64) -> DMatrix<f64> {
    let mut svd = ThinSvd::new(z);
    svd.singular_values.apply(|s| *s = (*s - tau).max(0.0));
    let keep = svd.singular_values.iter().filter(|&&s| s > 0.0).count();
    svd.truncate(keep)
}

#[derive(Debug, Clone)]
pub struct SvtOutcome {
    pub completed: DMatrix<f64>,
    pub iterations: usize,
    /// Final relative residual on `Ω`.
    pub residual: f64,
    pub converged: bool,
    /// Rows of the observation matrix with no observed entry.
    pub missing_rows: Vec<usize>,
}

/// Singular value thresholding: `Y ← shrink(X, τ)`, `X ← X + δ·P_Ω(M − Y)`,
/// starting from `X = 0`, until the relative residual on `Ω` falls below
/// `tol`. Returns the last `Y`.
pub fn svt_complete(obs: &ObservationMatrix, config: &SvtConfig) -> Result<SvtOutcome> {
    config.validate()?;
    if obs.is_empty() {
        return contract("no observed entries");
    }
    let missing_rows = obs.missing_rows();
    if !missing_rows.is_empty() {
        warn!(
            "{} rows have no observed entry; completion has no recovery guarantee",
            missing_rows.len()
        );
    }
    let entries: Vec<((usize, usize), f64)> = obs.entries.iter().map(|(&k, &v)| (k, v)).collect();
    let norm_m = entries.iter().map(|(_, v)| v * v).sum::<f64>().sqrt();
    let mut x = DMatrix::zeros(obs.rows, obs.cols);
    let mut y = DMatrix::zeros(obs.rows, obs.cols);
    let mut best = f64::INFINITY;
    let mut residual = f64::INFINITY;
    let mut iterations = 0;
    let mut converged = false;
    if norm_m == 0.0 {
        return Ok(SvtOutcome {
            completed: y,
            iterations,
            residual: 0.0,
            converged: true,
            missing_rows,
        });
    }
    for it in 1..=config.max_iters {
        y = shrink_singular_values(&x, config.tau);
        iterations = it;
        let mut sq = 0.0;
        for &((u, v), m) in &entries {
            let r = m - y[(u, v)];
            sq += r * r;
            x[(u, v)] += config.delta * r;
        }
        residual = sq.sqrt() / norm_m;
        if residual < config.tol {
            converged = true;
            break;
        }
        best = best.min(residual);
        if it > 1 && residual > DIVERGENCE_FACTOR * best {
            return Err(Error::Divergence { iteration: it, residual });
        }
    }
    if !converged {
        warn!("SVT stopped after {iterations} iterations with residual {residual:.3e}");
    }
    Ok(SvtOutcome {
        completed: y,
        iterations,
        residual,
        converged,
        missing_rows,
    })
}

/// Factors a completed `M × |ω|` matrix in union-row coordinates: maps it to
/// signal space with `X̂ = Ã⁺Ŷ` and keeps the rank-`k` truncated SVD,
/// `D = U_k` and `S = Σ_k V_kᵀ`.
pub fn factor_completed(y_hat: &DMatrix<f64>, union: &UnionMatrix, k: usize) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    if y_hat.nrows() != union.m() {
        return Err(Error::DimensionMismatch {
            index: 0,
            detail: format!("completed matrix has {} rows, union has {}", y_hat.nrows(), union.m()),
        });
    }
    let n = union.n();
    let rank = union.rank();
    if rank < n {
        return Err(Error::RankDeficient { rank, expected: n });
    }
    let (pinv, _) = linalg::pinv(&union.rows);
    let x_hat = pinv * y_hat;
    if k == 0 || k > x_hat.nrows().min(x_hat.ncols()) {
        return contract(format!("k={k} outside [1, {}]", x_hat.nrows().min(x_hat.ncols())));
    }
    let svd = ThinSvd::new(&x_hat);
    let d = svd.u.columns(0, k).clone_owned();
    let mut s = svd.v_t.rows(0, k).clone_owned();
    for j in 0..k {
        s.row_mut(j).scale_mut(svd.singular_values[j]);
    }
    Ok((d, s))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sensing::{assemble_observation, build_union, make_orthobasis_subset, make_pixel_mask, Measurement};
    use approx::assert_relative_eq;
    use nalgebra::DVector;
    use proptest::prelude::*;
    use rand::seq::index::sample;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn randn(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
        DMatrix::from_fn(rows, cols, |_, _| StandardNormal.sample(rng))
    }

    fn nuclear(m: &DMatrix<f64>) -> f64 {
        ThinSvd::new(m).singular_values.sum()
    }

    #[test]
    fn shrink_examples() {
        let z = DMatrix::from_diagonal(&DVector::from_vec(vec![3.0, 1.0]));
        assert_relative_eq!(shrink_singular_values(&z, 2.0), DMatrix::from_diagonal(&DVector::from_vec(vec![1.0, 0.0])), epsilon = 1e-12);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let g = randn(5, 7, &mut rng);
        assert_relative_eq!(shrink_singular_values(&g, 0.0), g, epsilon = 1e-10);
        let big = ThinSvd::new(&g).largest();
        assert_eq!(shrink_singular_values(&g, big), DMatrix::zeros(5, 7));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]
        #[test]
        fn shrink_reduces_nuclear_norm(seed in 0u64..10_000, tau in 0.0f64..3.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let g = randn(6, 4, &mut rng);
            let out = shrink_singular_values(&g, tau);
            let sin = ThinSvd::new(&g).singular_values;
            let sout = ThinSvd::new(&out).singular_values;
            for (a, b) in sout.iter().zip(sin.iter()) {
                prop_assert!(*a <= *b + 1e-10);
            }
            let rank = sout.iter().filter(|&&s| s > 1e-10).count();
            prop_assert!(nuclear(&out) <= nuclear(&g) - tau * rank as f64 + 1e-9);
        }
    }

    fn observe(m: &DMatrix<f64>, fraction: f64, seed: u64) -> ObservationMatrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let total = m.nrows() * m.ncols();
        let count = (fraction * total as f64).round() as usize;
        let mut obs = ObservationMatrix::new(m.nrows(), m.ncols());
        for idx in sample(&mut rng, total, count) {
            let (u, v) = (idx % m.nrows(), idx / m.nrows());
            obs.insert(u, v, m[(u, v)]).unwrap();
        }
        obs
    }

    #[test]
    fn fully_observed_rank_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let m = randn(8, 1, &mut rng) * randn(1, 10, &mut rng);
        let obs = observe(&m, 1.0, 3);
        let cfg = SvtConfig {
            tau: 1e-3,
            delta: 1.0,
            max_iters: 100,
            tol: 1e-12,
        };
        let out = svt_complete(&obs, &cfg).unwrap();
        assert!((&out.completed - &m).norm() <= 1e-6 * m.norm());
    }

    #[test]
    fn standard_schedule_recovers_rank_two() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let m = randn(60, 2, &mut rng) * randn(2, 200, &mut rng);
        let obs = observe(&m, 0.4, 5);
        let cfg = SvtConfig::standard(60, 200, obs.len());
        let out = svt_complete(&obs, &cfg).unwrap();
        assert!(out.converged);
        let err = (&out.completed - &m).norm() / m.norm();
        assert!(err < 1e-3, "relative error {err}");
    }

    #[test]
    fn missing_row_is_reported() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let m = randn(5, 1, &mut rng) * randn(1, 6, &mut rng);
        let mut obs = ObservationMatrix::new(5, 6);
        for u in 0..4 {
            for v in 0..6 {
                obs.insert(u, v, m[(u, v)]).unwrap();
            }
        }
        let out = svt_complete(&obs, &SvtConfig::standard(5, 6, obs.len())).unwrap();
        assert_eq!(out.missing_rows, vec![4]);
    }

    #[test]
    fn large_step_diverges() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let m = randn(20, 2, &mut rng) * randn(2, 30, &mut rng);
        let obs = observe(&m, 0.5, 8);
        let cfg = SvtConfig {
            tau: 1.0,
            delta: 50.0,
            max_iters: 500,
            tol: 1e-12,
        };
        assert!(matches!(svt_complete(&obs, &cfg), Err(Error::Divergence { .. })));
    }

    #[test]
    fn rejects_bad_config() {
        let obs = observe(&DMatrix::from_element(2, 2, 1.0), 1.0, 0);
        let cfg = SvtConfig {
            tau: 0.0,
            ..SvtConfig::standard(2, 2, 4)
        };
        assert!(svt_complete(&obs, &cfg).is_err());
        assert!(svt_complete(&ObservationMatrix::new(2, 2), &SvtConfig::standard(2, 2, 1)).is_err());
    }

    fn identity_union(n: usize) -> UnionMatrix {
        let full = make_pixel_mask(n, &(0..n).collect::<Vec<_>>()).unwrap();
        build_union([&full]).unwrap()
    }

    #[test]
    fn factor_identity_exact_rank() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let y = randn(6, 2, &mut rng) * randn(2, 9, &mut rng);
        let (d, s) = factor_completed(&y, &identity_union(6), 2).unwrap();
        assert!((&d * &s - &y).norm() <= 1e-10);
        assert!(linalg::max_abs(&(d.tr_mul(&d) - DMatrix::identity(2, 2))) <= 1e-12);
        let (d6, s6) = factor_completed(&y, &identity_union(6), 6).unwrap();
        assert!((&d6 * &s6 - &y).norm() <= 1e-10);
    }

    #[test]
    fn factor_residual_nonincreasing_in_k() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let y = randn(5, 8, &mut rng);
        let mut prev = f64::INFINITY;
        for k in 1..=5 {
            let (d, s) = factor_completed(&y, &identity_union(5), k).unwrap();
            let r = (&d * &s - &y).norm();
            assert!(r <= prev + 1e-12);
            prev = r;
        }
    }

    #[test]
    fn factor_orthobasis_union_recovers_span() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let n = 8;
        let d_true = randn(n, 2, &mut rng).qr().q().columns(0, 2).clone_owned();
        let x = &d_true * randn(2, 12, &mut rng);
        let pool = UnionMatrix::random_orthobasis(n, 12).unwrap();
        let sensors: Vec<_> = (0..12)
            .map(|i| make_orthobasis_subset(&pool, &[(i % n), ((i + 3) % n), ((i + 5) % n)]).unwrap())
            .collect();
        let meas: Vec<Measurement> = sensors
            .iter()
            .enumerate()
            .map(|(i, s)| Measurement::observe(s.clone(), &x.column(i).clone_owned()).unwrap())
            .collect();
        let union = build_union(sensors.iter()).unwrap();
        assert_eq!(union.m(), n);
        // complete exactly from the known product, then factor
        let y_full = &union.rows * &x;
        let (d, _) = factor_completed(&y_full, &union, 2).unwrap();
        assert!(linalg::max_principal_angle(&d, &d_true) < 1e-6);
        let refs: Vec<&Measurement> = meas.iter().collect();
        let obs = assemble_observation(&refs, &union).unwrap();
        assert_eq!(obs.len(), 36);
    }

    #[test]
    fn factor_rejects_rank_deficient_union() {
        let part = make_pixel_mask(4, &[0, 1, 2]).unwrap();
        let union = build_union([&part]).unwrap();
        assert!(matches!(
            factor_completed(&DMatrix::zeros(3, 4), &union, 1),
            Err(Error::RankDeficient { rank: 3, expected: 4 })
        ));
    }
}
