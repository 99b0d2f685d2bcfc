//! Command-line front end.
//!
//! Exit codes: 0 success, 2 usage error, 3 I/O or file format error,
//! 4 invalid input, 5 numerical failure.

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, CommandFactory, Parser, Subcommand, ValueEnum};
use log::{info, LevelFilter};
use nalgebra::DMatrix;
use serde_json::json;

use blindcs::block_inference::BlockAssignment;
use blindcs::completion::{svt_complete, SvtConfig};
use blindcs::files;
use blindcs::imaging::{
    finite_or_none, inpaint, load_mask, make_random_mask, mask_from_tile_lists, psnr, psnr_over, save_mask,
    tile_mean_fill, zero_fill, GrayImage, ImageMetrics, InpaintConfig, InpaintMethod,
};
use blindcs::learner::{
    learn, learn_from, load_checkpoint, read_codes, save_checkpoint, write_codes, InitStrategy, LearnerConfig,
};
use blindcs::model::BlockDictionary;
use blindcs::sensing::{build_union, write_mask_lists, ObservationMatrix};
use blindcs::synth::{generate_planted, phase_transition, truncated_image_model, PhaseConfig};
use blindcs::theory::{check_dl_uniqueness, sampling_conditions_check, CheckOptions};
use blindcs::{Error, Result};

#[derive(Parser, Debug)]
#[command(name = "blindcs", version, about = "Blind compressed sensing over a union of subspaces")]
#[command(args_override_self = true)]
struct Cli {
    /// Master seed for every random choice.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// Worker threads (0: one per core). Results do not depend on it.
    #[arg(long, global = true, default_value_t = 0)]
    threads: usize,
    #[arg(long, global = true, default_value = ".")]
    output_dir: PathBuf,
    /// off, error, warn, info, debug or trace.
    #[arg(long, global = true, default_value = "warn")]
    log_level: LevelFilter,
    /// File of `key=value` lines supplying flag defaults; command-line flags
    /// take precedence.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Fill in missing pixels of a grayscale image.
    Inpaint(InpaintArgs),
    /// Learn a block dictionary from masked or compressed signals.
    Learn(LearnArgs),
    /// Generate planted union-of-subspaces data.
    Synth(SynthArgs),
    /// Success frequency of the learner against the observed fraction.
    Phase(PhaseArgs),
    /// Check the uniqueness and sampling conditions for a dictionary.
    CheckConditions(CheckArgs),
    /// Singular value thresholding matrix completion.
    Complete(CompleteArgs),
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum InitArg {
    Random,
    Data,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum MethodArg {
    Als,
    Svt,
}

#[derive(Args, Debug)]
struct LearnerArgs {
    #[arg(long, default_value_t = 8)]
    k_max: usize,
    /// Total number of atoms.
    #[arg(long, default_value_t = 256)]
    r: usize,
    #[arg(long, default_value_t = 10)]
    iters: usize,
    /// Stop when the relative objective decrease falls below this.
    #[arg(long, default_value_t = 1e-5)]
    tol: f64,
    #[arg(long, default_value_t = blindcs::block_inference::DEFAULT_SAC_THRESHOLD)]
    sac_threshold: f64,
    #[arg(long, default_value_t = 1)]
    sac_every: usize,
    #[arg(long, default_value_t = 1)]
    restarts: usize,
    #[arg(long, value_enum, default_value_t = InitArg::Random)]
    init: InitArg,
}

impl LearnerArgs {
    fn config(&self, seed: u64) -> LearnerConfig {
        LearnerConfig {
            k_max: self.k_max,
            r: self.r,
            max_outer_iters: self.iters,
            objective_rel_tol: self.tol,
            sac_threshold: self.sac_threshold,
            sac_every: self.sac_every,
            restarts: self.restarts,
            init: match self.init {
                InitArg::Random => InitStrategy::Random,
                InitArg::Data => InitStrategy::Data,
            },
            seed,
            ..Default::default()
        }
    }
}

#[derive(Args, Debug)]
#[command(group = clap::ArgGroup::new("mask_source").required(true).args(["mask_fraction", "mask", "mask_lists"]))]
struct InpaintArgs {
    /// 8-bit grayscale PGM or PNG.
    #[arg(long)]
    image: PathBuf,
    /// Observe this fraction of pixels, chosen at random.
    #[arg(long)]
    mask_fraction: Option<f64>,
    /// Mask image (PBM); white pixels are observed.
    #[arg(long)]
    mask: Option<PathBuf>,
    /// Per-tile observed index lists, one line per non-overlapping tile.
    #[arg(long)]
    mask_lists: Option<PathBuf>,
    /// Ground truth for PSNR. Defaults to the input when the mask is
    /// generated.
    #[arg(long)]
    reference: Option<PathBuf>,
    #[arg(long, default_value_t = 8)]
    patch: usize,
    /// Spacing of the training patches.
    #[arg(long, default_value_t = 1)]
    train_stride: usize,
    #[arg(long, value_enum, default_value_t = MethodArg::Als)]
    method: MethodArg,
    /// Copy observed pixels into the output.
    #[arg(long, num_args = 0..=1, default_missing_value = "true", default_value_t = false)]
    keep_observed: bool,
    /// Output image name inside the output directory (.png or .pgm).
    #[arg(long, default_value = "inpainted.png")]
    output: String,
    #[command(flatten)]
    learner: LearnerArgs,
}

#[derive(Args, Debug)]
#[command(group = clap::ArgGroup::new("sensing").args(["masks", "mask_fraction", "gaussian"]))]
struct LearnArgs {
    /// Headerless CSV, one signal per row. Unobserved entries are ignored.
    #[arg(long)]
    signals: PathBuf,
    /// Observed indices per signal, one line per signal.
    #[arg(long)]
    masks: Option<PathBuf>,
    /// Observe this fraction of every signal at random.
    #[arg(long)]
    mask_fraction: Option<f64>,
    /// Sense every signal with its own m × n Gaussian matrix.
    #[arg(long, value_name = "M")]
    gaussian: Option<usize>,
    /// Continue from a checkpoint directory.
    #[arg(long)]
    resume: Option<PathBuf>,
    #[command(flatten)]
    learner: LearnerArgs,
}

#[derive(Args, Debug)]
struct SynthArgs {
    #[arg(long, default_value_t = 32)]
    n: usize,
    /// Comma-separated block sizes.
    #[arg(long, value_delimiter = ',', default_value = "4,4,4")]
    block_sizes: Vec<usize>,
    /// Signals per block: one value for all blocks or one per block.
    #[arg(long, value_delimiter = ',', default_value = "256")]
    counts: Vec<usize>,
    /// Also write random masks observing this fraction of every signal.
    #[arg(long)]
    mask_fraction: Option<f64>,
}

#[derive(Args, Debug)]
struct PhaseArgs {
    #[arg(long, default_value_t = 32)]
    n: usize,
    #[arg(long, value_delimiter = ',', default_value = "4,4,4")]
    block_sizes: Vec<usize>,
    #[arg(long, value_delimiter = ',', default_value = "256")]
    counts: Vec<usize>,
    #[arg(long, value_delimiter = ',', default_value = "0.1,0.2,0.3,0.4,0.5,0.6,0.7,0.8,0.9")]
    fractions: Vec<f64>,
    #[arg(long, default_value_t = 10)]
    trials: usize,
    #[arg(long, default_value_t = 40.0)]
    threshold_db: f64,
    #[arg(long, default_value_t = 50)]
    iters: usize,
    #[arg(long, default_value_t = 5)]
    restarts: usize,
    /// Atoms for the learner; defaults to the sum of the block sizes.
    #[arg(long)]
    r: Option<usize>,
    /// Use a rank-truncated union-of-subspaces approximation of this image
    /// instead of planted data.
    #[arg(long)]
    image: Option<PathBuf>,
    #[arg(long, default_value_t = 8)]
    patch: usize,
    /// Block dimension for the image approximation.
    #[arg(long, default_value_t = 4)]
    k: usize,
}

#[derive(Args, Debug)]
struct CheckArgs {
    /// Dictionary binary; its JSON sidecar has the same stem.
    #[arg(long)]
    dictionary: PathBuf,
    #[arg(long)]
    codes: PathBuf,
    /// Signals and masks for the sampling conditions.
    #[arg(long, requires = "masks")]
    signals: Option<PathBuf>,
    #[arg(long, requires = "signals")]
    masks: Option<PathBuf>,
    #[arg(long, default_value_t = blindcs::theory::DEFAULT_MAX_SUBSET)]
    max_subset: usize,
    #[arg(long, default_value_t = 2.0)]
    beta: f64,
}

#[derive(Args, Debug)]
struct CompleteArgs {
    /// Coordinate-list text: optional `# rows cols` header, then `u v value`.
    #[arg(long)]
    observations: PathBuf,
    /// Dense ground truth (headerless CSV, one matrix row per line).
    #[arg(long)]
    truth: Option<PathBuf>,
    #[arg(long)]
    tau: Option<f64>,
    #[arg(long)]
    delta: Option<f64>,
    #[arg(long, default_value_t = 3000)]
    max_iters: usize,
    #[arg(long, default_value_t = 1e-6)]
    tol: f64,
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Io(_) | Error::Csv(_) | Error::Json(_) | Error::Image(_) | Error::Format(_) => 3,
        Error::DimensionMismatch { .. } | Error::Contract(_) | Error::TooLarge(_) => 4,
        Error::NoFeasibleBlock { .. }
        | Error::EmptyBlock { .. }
        | Error::RankDeficient { .. }
        | Error::IllConditioned { .. }
        | Error::InitializationFailure
        | Error::Divergence { .. } => 5,
    }
}

fn flag_name(arg: &str) -> Option<&str> {
    let name = arg.strip_prefix("--")?;
    Some(name.split_once('=').map_or(name, |(k, _)| k))
}

/// `key=value` lines as `--key=value` arguments, skipping keys already given
/// in `argv`. Blank lines and `#` comments are ignored.
fn config_arguments(path: &Path, argv: &[String]) -> std::result::Result<Vec<String>, String> {
    let text = std::fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
    let mut out = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let t = line.trim();
        if t.is_empty() || t.starts_with('#') {
            continue;
        }
        let (key, value) = t
            .split_once('=')
            .ok_or_else(|| format!("{}:{}: expected key=value", path.display(), lineno + 1))?;
        let key = key.trim().trim_start_matches("--");
        if !argv.iter().any(|a| flag_name(a) == Some(key)) {
            out.push(format!("--{key}={}", value.trim()));
        }
    }
    Ok(out)
}

/// Parses the command line, first splicing in the `--config` file's entries
/// right after the subcommand name.
fn parse_cli() -> Cli {
    let argv: Vec<String> = std::env::args().collect();
    let config = argv.iter().enumerate().find_map(|(i, a)| match a.strip_prefix("--config") {
        Some("") => argv.get(i + 1).cloned(),
        Some(rest) => rest.strip_prefix('=').map(str::to_owned),
        None => None,
    });
    let cmd = Cli::command();
    let names: Vec<String> = cmd.get_subcommands().map(|c| c.get_name().to_owned()).collect();
    let (Some(config), Some(pos)) = (config, argv.iter().position(|a| names.contains(a))) else {
        return Cli::parse_from(argv);
    };
    let extra = config_arguments(Path::new(&config), &argv).unwrap_or_else(|msg| {
        Cli::command().error(clap::error::ErrorKind::Io, msg).exit();
    });
    let mut merged = argv[..=pos].to_vec();
    merged.extend(extra);
    merged.extend_from_slice(&argv[pos + 1..]);
    Cli::parse_from(merged)
}

fn check_fraction(f: f64) -> Result<()> {
    if f > 0.0 && f <= 1.0 {
        Ok(())
    } else {
        Err(Error::Contract(format!("observed fraction {f} outside (0, 1]")))
    }
}

fn write_json(path: &Path, value: &serde_json::Value) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    serde_json::to_writer_pretty(&mut w, value)?;
    writeln!(w)?;
    w.flush()?;
    Ok(())
}

fn cmd_inpaint(a: &InpaintArgs, seed: u64, out: &Path) -> Result<()> {
    let input = GrayImage::load(&a.image)?;
    let (h, w) = (input.height(), input.width());
    let (mask, mut reference) = if let Some(f) = a.mask_fraction {
        check_fraction(f)?;
        (make_random_mask(h, w, f, seed)?, Some(input.clone()))
    } else if let Some(path) = &a.mask {
        (load_mask(path, h, w)?, None)
    } else {
        let lists = files::read_masks(a.mask_lists.as_ref().expect("mask source group is required"))?;
        (mask_from_tile_lists(&lists, h, w, a.patch)?, None)
    };
    if let Some(path) = &a.reference {
        reference = Some(GrayImage::load(path)?);
    }
    let observed = input.observe(&mask)?;
    let cfg = InpaintConfig {
        patch: a.patch,
        train_stride: a.train_stride,
        learner: a.learner.config(seed),
        method: match a.method {
            MethodArg::Als => InpaintMethod::Als,
            MethodArg::Svt => InpaintMethod::Svt,
        },
        keep_observed: a.keep_observed,
    };
    let outcome = inpaint(&observed, &cfg)?;
    outcome.image.save(&out.join(&a.output))?;
    zero_fill(&observed).save(&out.join("observed.png"))?;
    save_mask(&out.join("mask.pbm"), &mask, h, w)?;
    outcome.dict.save(&out.join("dictionary.bin"), &out.join("dictionary.json"))?;

    let (mut p, mut pm, mut zf, mut tm) = (None, None, None, None);
    if let Some(reference) = &reference {
        let missing: Vec<bool> = mask.iter().map(|&o| !o).collect();
        p = finite_or_none(psnr(reference, &outcome.image, 255.0)?);
        if missing.iter().any(|&m| m) {
            pm = finite_or_none(psnr_over(reference, &outcome.image, 255.0, Some(&missing))?);
        }
        zf = finite_or_none(psnr(reference, &zero_fill(&observed), 255.0)?);
        tm = finite_or_none(psnr(reference, &tile_mean_fill(&observed, a.patch)?, 255.0)?);
    }
    let metrics = ImageMetrics {
        psnr_db: p,
        psnr_missing_db: pm,
        observed_fraction: observed.observed_count() as f64 / (h * w) as f64,
        k_max: a.learner.k_max,
        r: a.learner.r,
        num_blocks: outcome.dict.num_blocks(),
        iterations: outcome.iterations,
        method: cfg.method,
        zero_fill_psnr_db: zf,
        tile_mean_psnr_db: tm,
    };
    let value = serde_json::to_value(&metrics)?;
    write_json(&out.join("metrics.json"), &value)?;
    println!("{}", serde_json::to_string(&value)?);
    Ok(())
}

fn cmd_learn(a: &LearnArgs, seed: u64, out: &Path) -> Result<()> {
    let signals = files::read_signals(&a.signals)?;
    let set = if let Some(path) = &a.masks {
        files::masked_measurements(&signals, &files::read_masks(path)?)?
    } else if let Some(f) = a.mask_fraction {
        check_fraction(f)?;
        let n = signals[0].len();
        let masks: Vec<Vec<usize>> = (0..signals.len())
            .map(|i| {
                let m = make_random_mask(1, n, f, blindcs::seeds::derive_seed(seed, &[7, i as u64]))?;
                Ok((0..n).filter(|&j| m[j]).collect())
            })
            .collect::<Result<_>>()?;
        write_mask_lists(BufWriter::new(File::create(out.join("masks.txt"))?), &masks)?;
        files::masked_measurements(&signals, &masks)?
    } else if let Some(m) = a.gaussian {
        files::gaussian_measurements(&signals, m, blindcs::seeds::derive_seed(seed, &[8]))?
    } else {
        files::full_measurements(&signals)?
    };
    let cfg = a.learner.config(seed);
    let state = match &a.resume {
        Some(dir) => {
            let (dict, codes) = load_checkpoint(dir)?;
            learn_from(&set, &cfg, dict, codes)?
        }
        None => learn(&set, &cfg)?,
    };
    save_checkpoint(out, &state)?;
    let rec = state.reconstructions();
    files::write_signals(&out.join("reconstructions.csv"), &rec)?;
    let num: f64 = rec.iter().zip(&signals).map(|(r, x)| (r - x).norm_squared()).sum();
    let den: f64 = signals.iter().map(|x| x.norm_squared()).sum();
    let value = json!({
        "objective": state.objective(),
        "iterations": state.objective_trace.len(),
        "converged": state.converged,
        "L": state.dict.num_blocks(),
        "block_sizes": (0..state.dict.num_blocks()).map(|l| state.dict.block_size(l)).collect::<Vec<_>>(),
        "unassigned": state.codes.iter().filter(|c| c.active_block().is_none()).count(),
        "relative_error_vs_input": if den > 0.0 { (num / den).sqrt() } else { 0.0 },
    });
    write_json(&out.join("learn.json"), &value)?;
    println!("{}", serde_json::to_string(&value)?);
    Ok(())
}

fn broadcast_counts(counts: &[usize], blocks: usize) -> Result<Vec<usize>> {
    match counts.len() {
        1 => Ok(vec![counts[0]; blocks]),
        c if c == blocks => Ok(counts.to_vec()),
        c => Err(Error::Contract(format!("{c} counts for {blocks} blocks"))),
    }
}

fn cmd_synth(a: &SynthArgs, seed: u64, out: &Path) -> Result<()> {
    let counts = broadcast_counts(&a.counts, a.block_sizes.len())?;
    let model = generate_planted(a.n, &a.block_sizes, &counts, seed)?;
    files::write_signals(&out.join("signals.csv"), &model.signals)?;
    files::write_labels(&out.join("labels.csv"), &model.labels())?;
    model.dict.save(&out.join("dictionary.bin"), &out.join("dictionary.json"))?;
    write_codes(BufWriter::new(File::create(out.join("codes.csv"))?), &model.codes)?;
    if let Some(f) = a.mask_fraction {
        check_fraction(f)?;
        let set = model.mask_measurements(f, blindcs::seeds::derive_seed(seed, &[9]))?;
        let masks: Vec<Vec<usize>> = set.iter().map(|m| m.sensor.row_ids().to_vec()).collect();
        write_mask_lists(BufWriter::new(File::create(out.join("masks.txt"))?), &masks)?;
    }
    info!("wrote {} signals to {}", model.signals.len(), out.display());
    Ok(())
}

fn cmd_phase(a: &PhaseArgs, seed: u64, out: &Path) -> Result<()> {
    let (model, k_max, r) = match &a.image {
        Some(path) => {
            let img = GrayImage::load(path)?;
            let learner = LearnerConfig {
                k_max: a.k,
                r: a.r.unwrap_or(256),
                seed,
                ..Default::default()
            };
            let model = truncated_image_model(&img, a.patch, a.k, &learner)?;
            let r = a.r.unwrap_or(model.dict.r());
            (model, a.k, r)
        }
        None => {
            let counts = broadcast_counts(&a.counts, a.block_sizes.len())?;
            let model = generate_planted(a.n, &a.block_sizes, &counts, seed)?;
            let k_max = a.block_sizes.iter().copied().max().unwrap_or(1);
            (model, k_max, a.r.unwrap_or(a.block_sizes.iter().sum()))
        }
    };
    let cfg = PhaseConfig {
        fractions: a.fractions.clone(),
        trials: a.trials,
        threshold_db: a.threshold_db,
        learner: LearnerConfig {
            k_max,
            r,
            max_outer_iters: a.iters,
            restarts: a.restarts,
            ..Default::default()
        },
        seed,
    };
    let table = phase_transition(&model, &cfg)?;
    table.write_trials_csv(BufWriter::new(File::create(out.join("phase_trials.csv"))?))?;
    table.write_summary_csv(BufWriter::new(File::create(out.join("phase_summary.csv"))?))?;
    table.write_gnuplot(BufWriter::new(File::create(out.join("phase.dat"))?))?;
    let value = json!({
        "summary": table.summary.iter().map(|(f, v)| json!({"fraction": f, "frequency": v})).collect::<Vec<_>>(),
        "spearman": table.trend(),
    });
    write_json(&out.join("phase.json"), &value)?;
    println!("{}", serde_json::to_string(&value)?);
    Ok(())
}

fn cmd_check(a: &CheckArgs, seed: u64, out: &Path) -> Result<()> {
    let dict = BlockDictionary::load(&a.dictionary, &a.dictionary.with_extension("json"))?;
    let codes = read_codes(BufReader::new(File::open(&a.codes)?))?;
    let opts = CheckOptions {
        max_subset: a.max_subset,
        beta: a.beta,
        seed,
    };
    let (dl, prop) = match (&a.signals, &a.masks) {
        (Some(sp), Some(mp)) => {
            let set = files::masked_measurements(&files::read_signals(sp)?, &files::read_masks(mp)?)?;
            let union = build_union(set.iter().map(|m| &m.sensor))?;
            let assignment = BlockAssignment {
                blocks: codes.iter().map(|c| c.active_block().unwrap_or(usize::MAX)).collect(),
                residuals: vec![0.0; codes.len()],
            };
            (
                check_dl_uniqueness(&dict, &codes, Some(&union), &opts)?,
                Some(sampling_conditions_check(&set, &dict, &assignment, &opts)?),
            )
        }
        _ => (check_dl_uniqueness(&dict, &codes, None, &opts)?, None),
    };
    let overall = dl.overall && prop.as_ref().is_none_or(|p| p.overall);
    let verified = dl.verified && prop.as_ref().is_none_or(|p| p.verified);
    let value = json!({
        "dl_uniqueness": dl,
        "sampling_conditions": prop,
        "overall": overall,
        "verified": verified,
    });
    write_json(&out.join("conditions.json"), &value)?;
    println!("{}", serde_json::to_string_pretty(&value)?);
    Ok(())
}

fn cmd_complete(a: &CompleteArgs, out: &Path) -> Result<()> {
    let obs = ObservationMatrix::read_coo(BufReader::new(File::open(&a.observations)?))?;
    let standard = SvtConfig::standard(obs.rows, obs.cols, obs.len());
    let cfg = SvtConfig {
        tau: a.tau.unwrap_or(standard.tau),
        delta: a.delta.unwrap_or(standard.delta),
        max_iters: a.max_iters,
        tol: a.tol,
    };
    let outcome = svt_complete(&obs, &cfg)?;
    files::save_matrix(&outcome.completed, &out.join("completed.bin"), &out.join("completed.json"))?;
    let relative_error = match &a.truth {
        Some(path) => {
            let rows = files::read_signals(path)?;
            let truth = DMatrix::from_fn(rows.len(), rows[0].len(), |i, j| rows[i][j]);
            if truth.shape() != outcome.completed.shape() {
                return Err(Error::DimensionMismatch {
                    index: 0,
                    detail: format!("truth is {:?}, completion is {:?}", truth.shape(), outcome.completed.shape()),
                });
            }
            Some((&outcome.completed - &truth).norm() / truth.norm())
        }
        None => None,
    };
    let value = json!({
        "iterations": outcome.iterations,
        "residual": outcome.residual,
        "converged": outcome.converged,
        "tau": cfg.tau,
        "delta": cfg.delta,
        "missing_rows": outcome.missing_rows,
        "relative_error": relative_error,
    });
    write_json(&out.join("metrics.json"), &value)?;
    println!("{}", serde_json::to_string(&value)?);
    Ok(())
}

fn run(cli: &Cli) -> Result<()> {
    std::fs::create_dir_all(&cli.output_dir)?;
    let out = cli.output_dir.as_path();
    match &cli.command {
        Command::Inpaint(a) => cmd_inpaint(a, cli.seed, out),
        Command::Learn(a) => cmd_learn(a, cli.seed, out),
        Command::Synth(a) => cmd_synth(a, cli.seed, out),
        Command::Phase(a) => cmd_phase(a, cli.seed, out),
        Command::CheckConditions(a) => cmd_check(a, cli.seed, out),
        Command::Complete(a) => cmd_complete(a, out),
    }
}

fn main() -> ExitCode {
    let cli = parse_cli();
    env_logger::Builder::new().filter_level(cli.log_level).format_timestamp(None).init();
    if cli.threads > 0 {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(cli.threads).build_global() {
            eprintln!("error: cannot start {} threads: {e}", cli.threads);
            return ExitCode::from(4);
        }
    }
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
