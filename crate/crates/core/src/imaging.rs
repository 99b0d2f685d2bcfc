//! Grayscale images as collections of overlapping patches: patch extraction
//! and overlap-averaging reconstruction, random pixel masks, PSNR, and the
//! inpainting pipeline that senses disjoint tiles and reconstructs from every
//! overlapping patch.

use std::path::Path;

use log::{info, warn};
use nalgebra::DVector;
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::block_inference::bomp_assign_each;
use crate::completion::{factor_completed, svt_complete, SvtConfig};
use crate::error::{contract, Error, Result};
use crate::learner::{learn, LearnerConfig, LearnerState};
use crate::model::{BlockDictionary, BlockSparseCode};
use crate::sensing::{assemble_observation, build_union, make_pixel_mask, Measurement, MeasurementSet};

/// A grayscale image with intensities in `[0, 255]`, stored row-major, and an
/// optional observation mask. Unobserved pixels hold 0.
#[derive(Debug, Clone, PartialEq)]
pub struct GrayImage {
    height: usize,
    width: usize,
    pixels: Vec<f64>,
    mask: Option<Vec<bool>>,
}

impl GrayImage {
    pub fn new(height: usize, width: usize, pixels: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 {
            return contract("image dimensions must be positive");
        }
        if pixels.len() != height * width {
            return Err(Error::DimensionMismatch {
                index: 0,
                detail: format!("{} pixels for a {height}x{width} image", pixels.len()),
            });
        }
        if let Some(bad) = pixels.iter().position(|v| !(0.0..=255.0).contains(v)) {
            return contract(format!("pixel {bad} has intensity {} outside [0, 255]", pixels[bad]));
        }
        Ok(Self {
            height,
            width,
            pixels,
            mask: None,
        })
    }

    pub fn constant(height: usize, width: usize, value: f64) -> Result<Self> {
        Self::new(height, width, vec![value; height * width])
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn pixels(&self) -> &[f64] {
        &self.pixels
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.pixels[row * self.width + col]
    }

    pub fn mask(&self) -> Option<&[bool]> {
        self.mask.as_deref()
    }

    pub fn is_observed(&self, row: usize, col: usize) -> bool {
        self.mask.as_ref().is_none_or(|m| m[row * self.width + col])
    }

    /// Copy of the image seen through `mask`: unobserved pixels are zeroed.
    pub fn observe(&self, mask: &[bool]) -> Result<Self> {
        if mask.len() != self.pixels.len() {
            return Err(Error::DimensionMismatch {
                index: 0,
                detail: format!("mask has {} entries for {} pixels", mask.len(), self.pixels.len()),
            });
        }
        let pixels = self
            .pixels
            .iter()
            .zip(mask)
            .map(|(&v, &o)| if o { v } else { 0.0 })
            .collect();
        Ok(Self {
            height: self.height,
            width: self.width,
            pixels,
            mask: Some(mask.to_vec()),
        })
    }

    pub fn observed_count(&self) -> usize {
        self.mask.as_ref().map_or(self.pixels.len(), |m| m.iter().filter(|&&o| o).count())
    }

    /// Reads an 8-bit grayscale PGM or PNG (other formats are converted to
    /// 8-bit luma).
    pub fn load(path: &Path) -> Result<Self> {
        let img = image::open(path)?.to_luma8();
        let (w, h) = img.dimensions();
        Self::new(h as usize, w as usize, img.into_raw().into_iter().map(f64::from).collect())
    }

    /// Writes PGM or PNG according to the extension; intensities are rounded.
    pub fn save(&self, path: &Path) -> Result<()> {
        let raw: Vec<u8> = self.pixels.iter().map(|v| v.round().clamp(0.0, 255.0) as u8).collect();
        let img = image::GrayImage::from_raw(self.width as u32, self.height as u32, raw)
            .ok_or_else(|| Error::Format("image buffer size mismatch".into()))?;
        let pnm = path
            .extension()
            .and_then(|e| e.to_str())
            .is_some_and(|e| e.eq_ignore_ascii_case("pgm"));
        if pnm {
            // the generic path would pick PAM for this extension
            use image::codecs::pnm::{PnmEncoder, PnmSubtype, SampleEncoding};
            use image::ImageEncoder;
            let file = std::io::BufWriter::new(std::fs::File::create(path)?);
            PnmEncoder::new(file)
                .with_subtype(PnmSubtype::Graymap(SampleEncoding::Binary))
                .write_image(img.as_raw(), self.width as u32, self.height as u32, image::ExtendedColorType::L8)?;
        } else {
            img.save(path)?;
        }
        Ok(())
    }

    /// Top-left `height × width` corner.
    pub fn crop(&self, height: usize, width: usize) -> Self {
        let mut pixels = Vec::with_capacity(height * width);
        for r in 0..height {
            pixels.extend_from_slice(&self.pixels[r * self.width..r * self.width + width]);
        }
        let mask = self.mask.as_ref().map(|m| {
            let mut out = Vec::with_capacity(height * width);
            for r in 0..height {
                out.extend_from_slice(&m[r * self.width..r * self.width + width]);
            }
            out
        });
        Self {
            height,
            width,
            pixels,
            mask,
        }
    }

    /// Mirror-pads (without repeating the edge pixel) to the given size; the
    /// mask is padded the same way.
    fn reflect_pad(&self, height: usize, width: usize) -> Self {
        let src = |i: usize, len: usize| -> usize {
            if len == 1 {
                return 0;
            }
            let period = 2 * (len - 1);
            let j = i % period;
            if j < len {
                j
            } else {
                period - j
            }
        };
        let mut pixels = Vec::with_capacity(height * width);
        let mut mask = self.mask.as_ref().map(|_| Vec::with_capacity(height * width));
        for r in 0..height {
            let sr = src(r, self.height);
            for c in 0..width {
                let sc = src(c, self.width);
                pixels.push(self.get(sr, sc));
                if let (Some(out), Some(m)) = (mask.as_mut(), self.mask.as_ref()) {
                    out.push(m[sr * self.width + sc]);
                }
            }
        }
        Self {
            height,
            width,
            pixels,
            mask,
        }
    }
}

/// Positions of `p × p` patches on an image.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchGrid {
    pub height: usize,
    pub width: usize,
    pub p: usize,
    pub stride: usize,
    /// Top-left corners `(row, col)`, row-major.
    pub origins: Vec<(usize, usize)>,
    /// Number of patches covering each pixel, row-major.
    pub counts: Vec<u32>,
}

fn axis_origins(len: usize, p: usize, stride: usize) -> Vec<usize> {
    let mut out: Vec<usize> = (0..=len - p).step_by(stride).collect();
    if *out.last().unwrap() != len - p {
        out.push(len - p);
    }
    out
}

impl PatchGrid {
    /// Patches every `stride` pixels along each axis; the last row and column
    /// of patches are pinned to the border so every pixel is covered.
    pub fn new(height: usize, width: usize, p: usize, stride: usize) -> Result<Self> {
        if p == 0 || stride == 0 {
            return contract("patch size and stride must be positive");
        }
        if p > height.min(width) {
            return contract(format!("patch size {p} exceeds image {height}x{width}"));
        }
        let rows = axis_origins(height, p, stride);
        let cols = axis_origins(width, p, stride);
        let origins: Vec<(usize, usize)> = rows.iter().flat_map(|&r| cols.iter().map(move |&c| (r, c))).collect();
        let mut counts = vec![0u32; height * width];
        for &(r0, c0) in &origins {
            for r in r0..r0 + p {
                for c in c0..c0 + p {
                    counts[r * width + c] += 1;
                }
            }
        }
        Ok(Self {
            height,
            width,
            p,
            stride,
            origins,
            counts,
        })
    }

    /// Signal dimension `p²`.
    pub fn n(&self) -> usize {
        self.p * self.p
    }

    pub fn len(&self) -> usize {
        self.origins.len()
    }

    pub fn is_empty(&self) -> bool {
        self.origins.is_empty()
    }

    /// Image position of entry `j` of a column-major patch vector at `origin`.
    pub fn pixel_of(&self, origin: (usize, usize), j: usize) -> (usize, usize) {
        (origin.0 + j % self.p, origin.1 + j / self.p)
    }
}

/// Column-major patch vectors and, per patch, the observed entries.
pub fn extract_patches(img: &GrayImage, grid: &PatchGrid) -> Result<(Vec<DVector<f64>>, Vec<Vec<usize>>)> {
    if img.height != grid.height || img.width != grid.width {
        return Err(Error::DimensionMismatch {
            index: 0,
            detail: format!(
                "grid is {}x{} but image is {}x{}",
                grid.height, grid.width, img.height, img.width
            ),
        });
    }
    let n = grid.n();
    Ok(grid
        .origins
        .par_iter()
        .map(|&o| {
            let mut v = DVector::zeros(n);
            let mut observed = Vec::new();
            for j in 0..n {
                let (r, c) = grid.pixel_of(o, j);
                v[j] = img.get(r, c);
                if img.is_observed(r, c) {
                    observed.push(j);
                }
            }
            (v, observed)
        })
        .unzip())
}

/// Averages overlapping patch estimates into an image clamped to `[0, 255]`.
pub fn reconstruct_image(estimates: &[DVector<f64>], grid: &PatchGrid) -> Result<GrayImage> {
    let raw = average_patches(estimates, grid)?;
    GrayImage::new(grid.height, grid.width, raw.into_iter().map(|v| v.clamp(0.0, 255.0)).collect())
}

/// Unclamped overlap average.
pub fn average_patches(estimates: &[DVector<f64>], grid: &PatchGrid) -> Result<Vec<f64>> {
    if estimates.len() != grid.len() {
        return Err(Error::DimensionMismatch {
            index: estimates.len().min(grid.len()),
            detail: format!("{} estimates for {} patches", estimates.len(), grid.len()),
        });
    }
    let n = grid.n();
    if let Some(i) = estimates.iter().position(|e| e.len() != n) {
        return Err(Error::DimensionMismatch {
            index: i,
            detail: format!("estimate has length {}, expected {n}", estimates.len()),
        });
    }
    let (w, p) = (grid.width, grid.p);
    // patches sharing an origin row touch only rows r0..r0+p: accumulate each
    // such band separately, then merge bands in a fixed order
    let mut bands: Vec<(usize, Vec<usize>)> = Vec::new();
    for (idx, &(r0, _)) in grid.origins.iter().enumerate() {
        match bands.last_mut() {
            Some((r, ids)) if *r == r0 => ids.push(idx),
            _ => bands.push((r0, vec![idx])),
        }
    }
    let partial: Vec<(usize, Vec<f64>)> = bands
        .par_iter()
        .map(|(r0, ids)| {
            let mut acc = vec![0.0; p * w];
            for &idx in ids {
                let (_, c0) = grid.origins[idx];
                let e = &estimates[idx];
                for j in 0..n {
                    acc[(j % p) * w + c0 + j / p] += e[j];
                }
            }
            (*r0, acc)
        })
        .collect();
    let mut sum = vec![0.0; grid.height * w];
    for (r0, acc) in partial {
        for (k, v) in acc.into_iter().enumerate() {
            sum[r0 * w + k] += v;
        }
    }
    for (i, s) in sum.iter_mut().enumerate() {
        let c = grid.counts[i];
        if c == 0 {
            return contract(format!("pixel {i} is covered by no patch"));
        }
        *s /= c as f64;
    }
    Ok(sum)
}

/// Disjoint sensing tiles and the overlapping reconstruction grid of an image.
#[derive(Debug, Clone)]
pub struct SensingPartition {
    /// Image size after reflect-padding to multiples of `p`.
    pub padded_height: usize,
    pub padded_width: usize,
    /// Non-overlapping tiles on the padded image.
    pub tiles: PatchGrid,
    /// Overlapping patches on the padded image.
    pub reconstruction: PatchGrid,
}

pub fn sensing_partition(height: usize, width: usize, p: usize, stride: usize) -> Result<SensingPartition> {
    if p == 0 {
        return contract("patch size must be positive");
    }
    let ph = height.div_ceil(p) * p;
    let pw = width.div_ceil(p) * p;
    Ok(SensingPartition {
        padded_height: ph,
        padded_width: pw,
        tiles: PatchGrid::new(ph, pw, p, p)?,
        reconstruction: PatchGrid::new(ph, pw, p, stride)?,
    })
}

/// `10·log₁₀(peak² / MSE)` over all pixels; `+∞` for identical images.
pub fn psnr(reference: &GrayImage, estimate: &GrayImage, peak: f64) -> Result<f64> {
    psnr_over(reference, estimate, peak, None)
}

/// PSNR restricted to pixels where `select` is true.
pub fn psnr_over(reference: &GrayImage, estimate: &GrayImage, peak: f64, select: Option<&[bool]>) -> Result<f64> {
    if reference.height != estimate.height || reference.width != estimate.width {
        return Err(Error::DimensionMismatch {
            index: 0,
            detail: format!(
                "{}x{} vs {}x{}",
                reference.height, reference.width, estimate.height, estimate.width
            ),
        });
    }
    let mut sq = 0.0;
    let mut count = 0usize;
    for (i, (a, b)) in reference.pixels.iter().zip(&estimate.pixels).enumerate() {
        if select.is_none_or(|s| s[i]) {
            sq += (a - b) * (a - b);
            count += 1;
        }
    }
    if count == 0 {
        return contract("no pixels selected for PSNR");
    }
    Ok(psnr_from_mse(sq / count as f64, peak))
}

pub fn psnr_from_mse(mse: f64, peak: f64) -> f64 {
    if mse == 0.0 {
        f64::INFINITY
    } else {
        10.0 * (peak * peak / mse).log10()
    }
}

/// Exactly `round(fraction·H·W)` observed pixels drawn uniformly without
/// replacement.
pub fn make_random_mask(height: usize, width: usize, fraction: f64, seed: u64) -> Result<Vec<bool>> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return contract(format!("observed fraction {fraction} outside (0, 1]"));
    }
    let total = height * width;
    let count = ((fraction * total as f64).round() as usize).min(total);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut mask = vec![false; total];
    for i in sample(&mut rng, total, count) {
        mask[i] = true;
    }
    Ok(mask)
}

/// Reads a PBM (or any image) mask: light pixels are observed.
pub fn load_mask(path: &Path, height: usize, width: usize) -> Result<Vec<bool>> {
    let img = image::open(path)?.to_luma8();
    let (w, h) = img.dimensions();
    if (h as usize, w as usize) != (height, width) {
        return Err(Error::DimensionMismatch {
            index: 0,
            detail: format!("mask is {h}x{w}, image is {height}x{width}"),
        });
    }
    // the decoder maps PBM bits to 0 (black) and 1 (white)
    let mut magic = [0u8; 2];
    std::io::Read::read_exact(&mut std::fs::File::open(path)?, &mut magic)?;
    let threshold = if matches!(&magic, b"P1" | b"P4") { 0 } else { 127 };
    Ok(img.into_raw().into_iter().map(|v| v > threshold).collect())
}

/// Writes a binary PBM mask; observed pixels are white.
pub fn save_mask(path: &Path, mask: &[bool], height: usize, width: usize) -> Result<()> {
    use image::codecs::pnm::{PnmEncoder, PnmSubtype, SampleEncoding};
    use image::ImageEncoder;
    if mask.len() != height * width {
        return Err(Error::DimensionMismatch {
            index: 0,
            detail: format!("mask has {} entries for {height}x{width}", mask.len()),
        });
    }
    // the encoder takes 1 as white
    let raw: Vec<u8> = mask.iter().map(|&o| u8::from(o)).collect();
    let file = std::io::BufWriter::new(std::fs::File::create(path)?);
    PnmEncoder::new(file)
        .with_subtype(PnmSubtype::Bitmap(SampleEncoding::Binary))
        .write_image(&raw, width as u32, height as u32, image::ExtendedColorType::L8)?;
    Ok(())
}

/// Mask from per-tile index lists (one line per non-overlapping tile,
/// row-major over tiles, column-major indices inside each tile).
pub fn mask_from_tile_lists(lists: &[Vec<usize>], height: usize, width: usize, p: usize) -> Result<Vec<bool>> {
    let part = sensing_partition(height, width, p, p)?;
    if lists.len() != part.tiles.len() {
        return Err(Error::DimensionMismatch {
            index: lists.len().min(part.tiles.len()),
            detail: format!("{} mask lines for {} tiles", lists.len(), part.tiles.len()),
        });
    }
    let mut mask = vec![false; height * width];
    for (t, ids) in lists.iter().enumerate() {
        for &j in ids {
            if j >= p * p {
                return Err(Error::Format(format!("tile {t}: index {j} >= {}", p * p)));
            }
            let (r, c) = part.tiles.pixel_of(part.tiles.origins[t], j);
            if r < height && c < width {
                mask[r * width + c] = true;
            }
        }
    }
    Ok(mask)
}

/// Per-tile index lists of a mask; the inverse of [`mask_from_tile_lists`]
/// on images whose sides are multiples of `p`.
pub fn tile_lists_from_mask(mask: &[bool], height: usize, width: usize, p: usize) -> Result<Vec<Vec<usize>>> {
    let part = sensing_partition(height, width, p, p)?;
    Ok(part
        .tiles
        .origins
        .iter()
        .map(|&o| {
            (0..p * p)
                .filter(|&j| {
                    let (r, c) = part.tiles.pixel_of(o, j);
                    r < height && c < width && mask[r * width + c]
                })
                .collect()
        })
        .collect())
}

fn observed_mean(img: &GrayImage) -> f64 {
    let (mut sum, mut count) = (0.0, 0usize);
    for r in 0..img.height {
        for c in 0..img.width {
            if img.is_observed(r, c) {
                sum += img.get(r, c);
                count += 1;
            }
        }
    }
    if count == 0 {
        0.0
    } else {
        sum / count as f64
    }
}

/// Baseline that leaves unobserved pixels at zero.
pub fn zero_fill(observed: &GrayImage) -> GrayImage {
    GrayImage {
        mask: None,
        ..observed.clone()
    }
}

/// Baseline that fills unobserved pixels of every `p × p` tile with the mean
/// of its observed pixels (the global observed mean for empty tiles).
pub fn tile_mean_fill(observed: &GrayImage, p: usize) -> Result<GrayImage> {
    let global = observed_mean(observed);
    let mut out = zero_fill(observed);
    for r0 in (0..observed.height).step_by(p) {
        for c0 in (0..observed.width).step_by(p) {
            let (r1, c1) = ((r0 + p).min(observed.height), (c0 + p).min(observed.width));
            let (mut sum, mut count) = (0.0, 0usize);
            for r in r0..r1 {
                for c in c0..c1 {
                    if observed.is_observed(r, c) {
                        sum += observed.get(r, c);
                        count += 1;
                    }
                }
            }
            let fill = if count == 0 { global } else { sum / count as f64 };
            for r in r0..r1 {
                for c in c0..c1 {
                    if !observed.is_observed(r, c) {
                        out.pixels[r * observed.width + c] = fill;
                    }
                }
            }
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InpaintMethod {
    /// Alternating least squares over blocks.
    Als,
    /// Per-cluster singular value thresholding after one learner iteration.
    Svt,
}

#[derive(Debug, Clone)]
pub struct InpaintConfig {
    pub patch: usize,
    /// Spacing of the patches used for learning; reconstruction always uses
    /// every overlapping patch.
    pub train_stride: usize,
    pub learner: LearnerConfig,
    pub method: InpaintMethod,
    /// Copy observed pixels into the output unchanged. Always done when no
    /// pixel is missing.
    pub keep_observed: bool,
}

impl Default for InpaintConfig {
    fn default() -> Self {
        Self {
            patch: 8,
            train_stride: 1,
            learner: LearnerConfig {
                r: 256,
                k_max: 8,
                ..Default::default()
            },
            method: InpaintMethod::Als,
            keep_observed: false,
        }
    }
}

#[derive(Debug, Clone)]
pub struct InpaintOutcome {
    pub image: GrayImage,
    pub dict: BlockDictionary,
    pub iterations: usize,
    pub objective: f64,
    /// Reconstruction patches with no feasible block, filled with their
    /// observed mean.
    pub fallback_patches: usize,
}

/// Metrics file contents. Infinite PSNR is written as `null`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ImageMetrics {
    pub psnr_db: Option<f64>,
    pub psnr_missing_db: Option<f64>,
    pub observed_fraction: f64,
    pub k_max: usize,
    pub r: usize,
    #[serde(rename = "L")]
    pub num_blocks: usize,
    pub iterations: usize,
    pub method: InpaintMethod,
    pub zero_fill_psnr_db: Option<f64>,
    pub tile_mean_psnr_db: Option<f64>,
}

pub fn finite_or_none(v: f64) -> Option<f64> {
    v.is_finite().then_some(v)
}

fn patch_measurements(values: &[DVector<f64>], observed: &[Vec<usize>], n: usize) -> Result<Vec<Option<Measurement>>> {
    values
        .par_iter()
        .zip(observed)
        .map(|(v, ids)| {
            if ids.is_empty() {
                return Ok(None);
            }
            let sensor = make_pixel_mask(n, ids)?;
            let y = DVector::from_iterator(ids.len(), ids.iter().map(|&j| v[j]));
            Ok(Some(Measurement::new(sensor, y)?))
        })
        .collect()
}

/// Learns a block dictionary from the observed pixels and reconstructs the
/// full image from every overlapping patch.
pub fn inpaint(observed: &GrayImage, config: &InpaintConfig) -> Result<InpaintOutcome> {
    let p = config.patch;
    let n = p * p;
    if observed.observed_count() == 0 {
        return contract("no observed pixels");
    }
    let part = sensing_partition(observed.height, observed.width, p, 1)?;
    let padded = observed.reflect_pad(part.padded_height, part.padded_width);
    let recon_grid = &part.reconstruction;
    let train_grid = PatchGrid::new(part.padded_height, part.padded_width, p, config.train_stride)?;

    let (train_vals, train_obs) = extract_patches(&padded, &train_grid)?;
    let train: Vec<Measurement> = patch_measurements(&train_vals, &train_obs, n)?.into_iter().flatten().collect();
    let training = MeasurementSet::from_vec(n, train)?;
    info!(
        "inpainting {}x{}: {} training patches, {} reconstruction patches",
        observed.height,
        observed.width,
        training.len(),
        recon_grid.len()
    );

    let (dict, iterations, objective) = match config.method {
        InpaintMethod::Als => {
            let st = learn(&training, &config.learner)?;
            (st.dict.clone(), st.objective_trace.len(), st.objective())
        }
        InpaintMethod::Svt => {
            let warm = LearnerConfig {
                max_outer_iters: 1,
                ..config.learner.clone()
            };
            let st = learn(&training, &warm)?;
            let dict = svt_refine(&training, &st)?;
            (dict, 1, st.objective())
        }
    };

    let (recon_vals, recon_obs) = extract_patches(&padded, recon_grid)?;
    let recon_meas = patch_measurements(&recon_vals, &recon_obs, n)?;
    let fill = observed_mean(&padded);
    let feasible: Vec<Measurement> = recon_meas.iter().flatten().cloned().collect();
    let choices = bomp_assign_each(&MeasurementSet::from_vec(n, feasible)?, &dict);
    let mut choice_iter = choices.into_iter();
    let mut fallback = 0usize;
    let mut estimates = Vec::with_capacity(recon_grid.len());
    for (idx, meas) in recon_meas.iter().enumerate() {
        let est = match meas {
            None => {
                fallback += 1;
                DVector::from_element(n, fill)
            }
            Some(m) => match choice_iter.next().expect("one choice per feasible patch") {
                Ok(c) => BlockSparseCode::new(c.block, c.coefficients).reconstruct(&dict),
                Err(_) => {
                    fallback += 1;
                    let mean = m.y.mean();
                    DVector::from_element(n, mean)
                }
            },
        };
        debug_assert_eq!(est.len(), n, "patch {idx}");
        estimates.push(est);
    }
    if fallback > 0 {
        warn!("{fallback} patches fit no block and were filled with an observed mean");
    }
    let full = reconstruct_image(&estimates, recon_grid)?;
    let mut image = full.crop(observed.height, observed.width);
    image.mask = None;
    // with nothing missing the input is returned as is
    if config.keep_observed || observed.observed_count() == observed.pixels.len() {
        for i in 0..image.pixels.len() {
            if observed.mask.as_ref().is_none_or(|m| m[i]) {
                image.pixels[i] = observed.pixels[i];
            }
        }
    }
    Ok(InpaintOutcome {
        image,
        dict,
        iterations,
        objective,
        fallback_patches: fallback,
    })
}

/// Replaces every block with the factorization of its SVT-completed cluster
/// matrix. Blocks whose cluster cannot be completed keep their atoms.
fn svt_refine(training: &MeasurementSet, st: &LearnerState) -> Result<BlockDictionary> {
    let mut dict = st.dict.clone();
    let members = st.assignment.members(dict.num_blocks());
    for (l, ids) in members.iter().enumerate() {
        if ids.is_empty() {
            continue;
        }
        let k = dict.block_size(l);
        let meas: Vec<&Measurement> = ids.iter().map(|&i| training.get(i)).collect();
        let union = build_union(meas.iter().map(|m| &m.sensor))?;
        if union.rank() < training.n() {
            warn!("block {l}: union of sensing rows has rank {} < n; keeping learned atoms", union.rank());
            continue;
        }
        let obs = assemble_observation(&meas, &union)?;
        let cfg = SvtConfig::standard(obs.rows, obs.cols, obs.len());
        let completed = match svt_complete(&obs, &cfg) {
            Ok(out) => out.completed,
            Err(e) => {
                warn!("block {l}: {e}; keeping learned atoms");
                continue;
            }
        };
        let (d, _) = factor_completed(&completed, &union, k.min(completed.ncols()))?;
        if d.ncols() == k {
            dict.set_block(l, &d)?;
        }
    }
    Ok(dict)
}
