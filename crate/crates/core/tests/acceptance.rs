//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! nonzero if any fails. Pass criterion numbers as arguments to run a subset:
//! `cargo test --test acceptance -- 3 5`.

use std::path::Path;
use std::time::{Duration, Instant};

use itertools::Itertools;
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use proptest::test_runner::{Config as ProptestConfig, RngAlgorithm, TestCaseError, TestRng, TestRunner};
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;

use blindcs::block_inference::bomp_assign_all;
use blindcs::completion::{factor_completed, svt_complete, SvtConfig};
use blindcs::dict_update::{build_kron_system, run_block_pass, update_dictionary_block, update_dictionary_block_normal};
use blindcs::files::{full_measurements, gaussian_measurements};
use blindcs::imaging::{inpaint, make_random_mask, psnr, tile_mean_fill, zero_fill, GrayImage, InpaintConfig};
use blindcs::learner::{initial_dictionary, learn, LearnerConfig};
use blindcs::linalg::max_principal_angle;
use blindcs::model::{objective, objective_by_block, BlockDictionary, BlockSparseCode};
use blindcs::seeds::derive_seed;
use blindcs::sensing::{assemble_observation, build_union, make_gaussian, make_pixel_mask, Measurement, MeasurementSet};
use blindcs::synth::{generate_planted, phase_transition, rank_clustering_oracle, same_partition, PhaseConfig};
use blindcs::theory::{coherence, coupon_collector_bound, mu_ell, spark, completion_sample_bound, Spark};

type Outcome = Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn no_increase(prev: f64, next: f64, what: &str) -> Result<(), String> {
    ensure(next <= prev + 1e-9 * prev, || format!("{what}: {prev:.6e} -> {next:.6e}"))
}

fn gaussian_block(n: usize, k: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
    DMatrix::from_fn(n, k, |_, _| StandardNormal.sample(rng))
}

fn monotone_instance(seed: u64) -> Result<(), String> {
    let e = |err: blindcs::Error| err.to_string();
    let model = generate_planted(16, &[2; 4], &[64; 4], seed).map_err(e)?;
    let set = gaussian_measurements(&model.signals, 8, derive_seed(seed, &[1])).map_err(e)?;
    let config = LearnerConfig {
        k_max: 2,
        r: 8,
        max_outer_iters: 6,
        seed: derive_seed(seed, &[2]),
        ..Default::default()
    };

    // BOMP followed by one block pass, step by step
    let mut dict = initial_dictionary(&set, &config).map_err(e)?;
    let mut codes = vec![BlockSparseCode::unassigned(); set.len()];
    for it in 0..config.max_outer_iters {
        let before = objective(&set, &dict, &codes).map_err(e)?;
        let (_, assigned) = bomp_assign_all(&set, &dict).map_err(e)?;
        let after_bomp = objective(&set, &dict, &assigned).map_err(e)?;
        no_increase(before, after_bomp, &format!("iteration {it} BOMP"))?;
        let pass = run_block_pass(&set, &dict, &assigned).map_err(e)?;
        let mut prev = after_bomp;
        for st in &pass.steps {
            let what = format!("iteration {it} block {}", st.block);
            no_increase(prev, st.before, &what)?;
            no_increase(st.before, st.after_dictionary, &format!("{what} dictionary"))?;
            no_increase(st.after_dictionary, st.after_orthogonalize, &format!("{what} orthogonalize"))?;
            no_increase(st.after_orthogonalize, st.after_coefficients, &format!("{what} coefficients"))?;
            prev = st.after_coefficients;
        }
        no_increase(prev, pass.objective, &format!("iteration {it} pass"))?;
        dict = pass.dict;
        codes = pass.codes;
    }

    // the full learner, including merges and re-seeding
    let state = learn(&set, &config).map_err(e)?;
    for (i, h) in state.history.iter().enumerate() {
        no_increase(h.objective_before_assignment, h.objective_after_assignment, "learner BOMP")?;
        no_increase(h.objective_after_assignment, h.objective_after_pass, "learner pass")?;
        if i > 0 && h.merges == 0 {
            no_increase(state.history[i - 1].objective_after_pass, h.objective_before_assignment, "learner carry")?;
        }
    }
    Ok(())
}

fn criterion_1() -> Outcome {
    let config = ProptestConfig {
        cases: 50,
        failure_persistence: None,
        ..ProptestConfig::default()
    };
    let mut runner = TestRunner::new_with_rng(config, TestRng::deterministic_rng(RngAlgorithm::ChaCha));
    runner
        .run(&any::<u64>(), |seed| monotone_instance(seed).map_err(TestCaseError::fail))
        .map_err(|e| e.to_string())?;
    Ok("50 instances, every BOMP and block-pass step nonincreasing".into())
}

fn criterion_2() -> Outcome {
    let mut worst_res: f64 = 0.0;
    let mut worst_angle: f64 = 0.0;
    for seed in 0..5u64 {
        let model = generate_planted(16, &[2; 4], &[64; 4], seed).map_err(|e| e.to_string())?;
        let set = full_measurements(&model.signals).map_err(|e| e.to_string())?;
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[5]));
        let blocks: Vec<DMatrix<f64>> = (0..4).map(|_| gaussian_block(16, 2, &mut rng)).collect();
        let start = BlockDictionary::from_blocks(&blocks, 2).map_err(|e| e.to_string())?;
        let codes: Vec<BlockSparseCode> = model
            .labels()
            .into_iter()
            .map(|l| BlockSparseCode::new(l, DVector::from_fn(2, |_, _| StandardNormal.sample(&mut rng))))
            .collect();
        let pass = run_block_pass(&set, &start, &codes).map_err(|e| e.to_string())?;
        let per_block = objective_by_block(&set, &pass.dict, &pass.codes).map_err(|e| e.to_string())?;
        worst_res = per_block.iter().copied().fold(worst_res, f64::max);
        for l in 0..4 {
            worst_angle = worst_angle.max(max_principal_angle(&pass.dict.block(l), &model.dict.block(l)));
        }
    }
    ensure(worst_res < 1e-8 && worst_angle < 1e-6, || {
        format!("residual {worst_res:.3e}, angle {worst_angle:.3e}")
    })?;
    Ok(format!("max block residual {worst_res:.2e}, max principal angle {worst_angle:.2e}"))
}

fn criterion_3() -> Outcome {
    let (n, k) = (32usize, 4usize);
    let errors: Vec<Result<f64, String>> = (0..10u64)
        .into_par_iter()
        .map(|seed| {
            let model = generate_planted(n, &[k; 3], &[256; 3], seed).map_err(|e| e.to_string())?;
            let set = model.mask_measurements(0.5, derive_seed(seed, &[1])).map_err(|e| e.to_string())?;
            // per-block sample requirement 2·k·n·ln n and m_i ≥ k
            let per_block = set.iter().take(256).map(|m| m.y.len()).sum::<usize>() as f64;
            ensure(per_block >= 2.0 * (k * n) as f64 * (n as f64).ln(), || "too few samples".into())?;
            ensure(set.iter().all(|m| m.y.len() >= k), || "m_i < k".into())?;
            let cfg = LearnerConfig {
                k_max: k,
                r: 3 * k,
                max_outer_iters: 50,
                restarts: 5,
                seed: derive_seed(seed, &[2]),
                ..Default::default()
            };
            let state = learn(&set, &cfg).map_err(|e| e.to_string())?;
            let rec = state.reconstructions();
            let num: f64 = rec.iter().zip(&model.signals).map(|(a, b)| (a - b).norm_squared()).sum();
            let den: f64 = model.signals.iter().map(|x| x.norm_squared()).sum();
            Ok((num / den).sqrt())
        })
        .collect();
    let ok = errors.iter().filter(|e| matches!(e, Ok(v) if *v < 1e-3)).count();
    let shown = errors
        .iter()
        .map(|e| match e {
            Ok(v) => format!("{v:.1e}"),
            Err(s) => format!("error({s})"),
        })
        .join(" ");
    ensure(ok >= 8, || format!("{ok}/10 recovered: {shown}"))?;
    Ok(format!("{ok}/10 seeds below 1e-3 relative error: {shown}"))
}

fn criterion_4() -> Outcome {
    let (m1, m2, k) = (60usize, 200usize, 2usize);
    let results: Vec<Result<(f64, u64, usize), String>> = (0..10u64)
        .into_par_iter()
        .map(|seed| {
            let e = |err: blindcs::Error| err.to_string();
            let model = generate_planted(m1, &[k], &[m2], seed).map_err(e)?;
            let y = DMatrix::from_columns(&model.signals);
            let mu = mu_ell(&y, k).map_err(e)?;
            let (required, _) = completion_sample_bound(mu.mu, k, m1, m2, 2.0).map_err(e)?;
            let cap = (0.6 * (m1 * m2) as f64).floor() as usize;
            let count = (required as usize).min(cap);
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[3]));
            let mut rows: Vec<Vec<usize>> = vec![Vec::new(); m2];
            for idx in sample(&mut rng, m1 * m2, count) {
                rows[idx / m1].push(idx % m1);
            }
            let meas = rows
                .iter_mut()
                .zip(&model.signals)
                .map(|(r, x)| {
                    r.sort_unstable();
                    Measurement::observe(make_pixel_mask(m1, r)?, x)
                })
                .collect::<blindcs::Result<Vec<_>>>()
                .map_err(e)?;
            let refs: Vec<&Measurement> = meas.iter().collect();
            let union = build_union(meas.iter().map(|m| &m.sensor)).map_err(e)?;
            let obs = assemble_observation(&refs, &union).map_err(e)?;
            let out = svt_complete(&obs, &SvtConfig::standard(obs.rows, obs.cols, obs.len())).map_err(e)?;
            let (d, _) = factor_completed(&out.completed, &union, k).map_err(e)?;
            Ok((max_principal_angle(&d, &model.dict.block(0)), required, count))
        })
        .collect();
    let ok = results.iter().filter(|r| matches!(r, Ok((a, _, _)) if *a < 1e-3)).count();
    let (bound, used) = results
        .iter()
        .flatten()
        .map(|&(_, b, c)| (b, c))
        .next()
        .unwrap_or((0, 0));
    let angles = results
        .iter()
        .map(|r| match r {
            Ok((a, _, _)) => format!("{a:.1e}"),
            Err(s) => format!("error({s})"),
        })
        .join(" ");
    ensure(ok >= 9, || format!("{ok}/10 recovered: {angles}"))?;
    Ok(format!(
        "{ok}/10 seeds, bound {bound} entries capped to {used} of {}; angles {angles}",
        m1 * m2
    ))
}

fn criterion_5() -> Outcome {
    let mut lines = Vec::new();
    for k in [4usize, 8] {
        let model = generate_planted(32, &[k; 3], &[256; 3], 11).map_err(|e| e.to_string())?;
        let learner = LearnerConfig {
            k_max: k,
            r: 3 * k,
            max_outer_iters: 50,
            restarts: 5,
            ..Default::default()
        };
        let table = phase_transition(&model, &PhaseConfig::standard(learner, 5)).map_err(|e| e.to_string())?;
        let hi = table.frequency(0.7).unwrap_or(f64::NAN);
        let lo = table.frequency(0.1).unwrap_or(f64::NAN);
        let trend = table.trend();
        let curve = table.summary.iter().map(|(_, v)| format!("{v:.1}")).join(" ");
        ensure(hi >= 0.9 && lo <= 0.1 && trend >= 0.0, || {
            format!("k={k}: f(0.7)={hi} f(0.1)={lo} spearman={trend:.3} [{curve}]")
        })?;
        lines.push(format!("k={k}: [{curve}] spearman {trend:.2}"));
    }
    Ok(lines.join("; "))
}

fn criterion_6() -> Outcome {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/data/camera_crop128.pgm");
    let img = GrayImage::load(&path).map_err(|e| e.to_string())?;
    let mask = make_random_mask(img.height(), img.width(), 0.5, 7).map_err(|e| e.to_string())?;
    let observed = img.observe(&mask).map_err(|e| e.to_string())?;
    let cfg = InpaintConfig {
        learner: LearnerConfig {
            k_max: 8,
            r: 128,
            seed: 1,
            ..Default::default()
        },
        ..Default::default()
    };
    let out = inpaint(&observed, &cfg).map_err(|e| e.to_string())?;
    let ours = psnr(&img, &out.image, 255.0).map_err(|e| e.to_string())?;
    let zf = psnr(&img, &zero_fill(&observed), 255.0).map_err(|e| e.to_string())?;
    let tm = psnr(&img, &tile_mean_fill(&observed, 8).map_err(|e| e.to_string())?, 255.0).map_err(|e| e.to_string())?;
    let detail = format!("{ours:.2} dB vs zero-fill {zf:.2} dB and tile-mean {tm:.2} dB");
    ensure(ours >= zf + 6.0 && ours >= tm + 3.0, || detail.clone())?;
    Ok(detail)
}

/// Smallest dependent column subset by Gram determinants.
fn brute_spark(m: &DMatrix<f64>) -> usize {
    for size in 1..=m.ncols() {
        for cols in (0..m.ncols()).combinations(size) {
            let sub = m.select_columns(&cols);
            if (sub.transpose() * &sub).determinant().abs() < 1e-12 {
                return size;
            }
        }
    }
    m.ncols() + 1
}

fn criterion_7() -> Outcome {
    let close = |a: f64, b: f64| (a - b).abs() <= 1e-12 * b.abs().max(1e-300);

    let (req, p) = completion_sample_bound(1.0, 2, 64, 100, 2.0).map_err(|e| e.to_string())?;
    let direct = (32.0 * 1.0 * 2.0 * (64.0 + 100.0) * 2.0 * (200f64).ln()).ceil() as u64;
    let p_direct = (1.0 - 6.0 * 100f64.ln() * 164f64.powf(2.0 - 4.0) - 100f64.powf(2.0 - 2.0 * 2f64.sqrt())).clamp(0.0, 1.0);
    ensure(req == direct && close(p, p_direct), || format!("sample bound {req} vs {direct}, p {p} vs {p_direct}"))?;

    ensure(coupon_collector_bound(1, 5) == 0.0 && coupon_collector_bound(7, 0) == 1.0, || "coupon edge cases".into())?;
    let draws = (2.0 * 64.0 * 64f64.ln()).ceil() as u64;
    let cb = coupon_collector_bound(64, draws);
    ensure(close(cb, 64.0 * (1.0 - 1.0 / 64.0f64).powf(draws as f64)) && cb <= 1.0 / 64.0, || {
        format!("coupon bound {cb}")
    })?;

    let n = 64;
    let mut e1 = DMatrix::zeros(n, 1);
    e1[(0, 0)] = 1.0;
    let flat = DMatrix::from_element(n, 1, 1.0 / (n as f64).sqrt());
    ensure(close(coherence(&e1).unwrap(), n as f64) && close(coherence(&flat).unwrap(), 1.0), || {
        "coherence examples".into()
    })?;
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let basis = gaussian_block(n, 4, &mut rng).qr().q().columns(0, 4).clone_owned();
    let mut brute: f64 = 0.0;
    for u in 0..4 {
        for v in 0..n {
            brute = brute.max(basis[(v, u)] * basis[(v, u)]);
        }
    }
    let c = coherence(&basis).unwrap();
    ensure(close(c, n as f64 / 4.0 * brute), || format!("coherence {c} vs {}", n as f64 / 4.0 * brute))?;

    let eye = DMatrix::<f64>::identity(3, 3);
    let dep = DMatrix::from_column_slice(2, 3, &[1.0, 0.0, 0.0, 1.0, 1.0, 1.0]);
    let dup = DMatrix::from_column_slice(3, 3, &[1.0, 2.0, 3.0, 0.0, 1.0, 0.0, 1.0, 2.0, 3.0]);
    for (m, want) in [(&eye, 4), (&dep, 3), (&dup, 2)] {
        let got = spark(m, 6);
        ensure(got == Spark::Exact(want) && brute_spark(m) == want, || format!("spark {got:?}, expected {want}"))?;
    }
    Ok(format!("sample bound {req}, coupon {cb:.6}, coherence {c:.4}, spark 4/3/2"))
}

fn criterion_8() -> Outcome {
    let shapes = [(6usize, 2usize, 2usize, 5usize), (5, 1, 3, 4), (8, 3, 2, 6), (7, 2, 3, 4)];
    for seed in 0..20u64 {
        let (n, k, blocks, count) = shapes[seed as usize % shapes.len()];
        let model = generate_planted(n, &vec![k; blocks], &vec![count; blocks], seed).map_err(|e| e.to_string())?;
        let set = full_measurements(&model.signals).map_err(|e| e.to_string())?;
        let (assignment, _) = bomp_assign_all(&set, &model.dict).map_err(|e| e.to_string())?;
        let oracle = rank_clustering_oracle(&model.signals, k).map_err(|e| e.to_string())?;
        ensure(same_partition(&assignment.blocks, &oracle), || format!("seed {seed}: BOMP and oracle disagree"))?;
        ensure(same_partition(&oracle, &model.labels()), || format!("seed {seed}: oracle misses the planted labels"))?;
    }
    Ok("20/20 instances agree".into())
}

fn criterion_9() -> Outcome {
    let mut worst: f64 = 0.0;
    for seed in 0..20u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[9]));
        let n = 4 + (seed as usize % 5);
        let k = 1 + (seed as usize % 3);
        let count = 4 * n;
        let dict = BlockDictionary::from_blocks(&[gaussian_block(n, k, &mut rng), gaussian_block(n, 2, &mut rng)], 3)
            .map_err(|e| e.to_string())?;
        let mut items = Vec::new();
        let mut codes = Vec::new();
        for i in 0..count {
            let m = k + (i % (n - k + 1));
            let sensor = if seed % 2 == 0 {
                let mut ids = sample(&mut rng, n, m).into_vec();
                ids.sort_unstable();
                make_pixel_mask(n, &ids)
            } else {
                make_gaussian(m, n, derive_seed(seed, &[i as u64]))
            }
            .map_err(|e| e.to_string())?;
            let y = DVector::from_fn(m, |_, _| StandardNormal.sample(&mut rng));
            items.push(Measurement::new(sensor, y).map_err(|e| e.to_string())?);
            let l = usize::from(i % 4 == 3);
            codes.push(BlockSparseCode::new(l, DVector::from_fn(dict.block_size(l), |_, _| StandardNormal.sample(&mut rng))));
        }
        let set = MeasurementSet::from_vec(n, items).map_err(|e| e.to_string())?;
        let dense = update_dictionary_block(&build_kron_system(&set, &codes, 0, k, n).map_err(|e| e.to_string())?);
        let normal = update_dictionary_block_normal(&set, &codes, 0, k, n).map_err(|e| e.to_string())?;
        ensure(dense.is_full_rank(), || format!("system {seed} is rank deficient"))?;
        let rel = (&dense.block - &normal.block).norm() / dense.block.norm();
        worst = worst.max(rel);
    }
    ensure(worst <= 1e-8, || format!("max relative difference {worst:.3e}"))?;
    Ok(format!("20 systems, max relative difference {worst:.2e}"))
}

fn main() {
    let criteria: [(&str, u64, fn() -> Outcome); 9] = [
        ("monotone objective", 120, criterion_1),
        ("full-observation limit", 30, criterion_2),
        ("planted blind recovery", 600, criterion_3),
        ("completion at the sample bound", 300, criterion_4),
        ("phase transition", 1200, criterion_5),
        ("inpainting against baselines", 1800, criterion_6),
        ("formula calculators", 60, criterion_7),
        ("clustering oracle agreement", 60, criterion_8),
        ("normal-equation dictionary update", 60, criterion_9),
    ];
    let selected: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let mut failed = 0;
    for (i, (name, limit, run)) in criteria.iter().enumerate() {
        let id = i + 1;
        if !selected.is_empty() && !selected.contains(&id) {
            continue;
        }
        let start = Instant::now();
        let outcome = run();
        let elapsed = start.elapsed();
        let outcome = outcome.and_then(|detail| {
            if elapsed <= Duration::from_secs(*limit) {
                Ok(detail)
            } else {
                Err(format!("{detail}; took {elapsed:.1?}, limit {limit} s"))
            }
        });
        match outcome {
            Ok(detail) => println!("PASS {id} {name}: {detail} ({elapsed:.1?})"),
            Err(detail) => {
                failed += 1;
                println!("FAIL {id} {name}: {detail} ({elapsed:.1?})");
            }
        }
    }
    if failed > 0 {
        std::process::exit(1);
    }
}
