//! Per-signal sensing matrices, the union of their rows, and the partially
//! observed matrix assembled from a group of measurements.

use std::collections::{BTreeMap, HashMap};
use std::io::{BufRead, Write};

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{contract, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SensingKind {
    PixelMask,
    Gaussian,
    OrthobasisRows,
}

/// An `m × n` sensing operator.
///
/// Pixel masks are stored implicitly by their selected identity rows; the
/// other kinds keep their dense rows.
#[derive(Debug, Clone)]
pub struct SensingMatrix {
    n: usize,
    kind: SensingKind,
    row_ids: Vec<usize>,
    dense: Option<DMatrix<f64>>,
}

impl SensingMatrix {
    pub fn n(&self) -> usize {
        self.n
    }

    pub fn m(&self) -> usize {
        match &self.dense {
            Some(d) => d.nrows(),
            None => self.row_ids.len(),
        }
    }

    pub fn kind(&self) -> SensingKind {
        self.kind
    }

    /// Selected pool rows (empty for Gaussian sensors).
    pub fn row_ids(&self) -> &[usize] {
        &self.row_ids
    }

    /// Dense `m × n` rows.
    pub fn rows(&self) -> DMatrix<f64> {
        match &self.dense {
            Some(d) => d.clone(),
            None => {
                let mut out = DMatrix::zeros(self.row_ids.len(), self.n);
                for (j, &id) in self.row_ids.iter().enumerate() {
                    out[(j, id)] = 1.0;
                }
                out
            }
        }
    }

    /// `A x`.
    pub fn apply(&self, x: &DVector<f64>) -> DVector<f64> {
        match &self.dense {
            Some(d) => d * x,
            None => DVector::from_iterator(self.row_ids.len(), self.row_ids.iter().map(|&i| x[i])),
        }
    }

    /// `A D[cols]`, the sensed version of a column subset of `atoms`.
    pub fn project_columns(&self, atoms: &DMatrix<f64>, cols: &[usize]) -> DMatrix<f64> {
        match &self.dense {
            Some(d) => {
                let mut out = DMatrix::zeros(d.nrows(), cols.len());
                for (c, &col) in cols.iter().enumerate() {
                    out.set_column(c, &(d * atoms.column(col)));
                }
                out
            }
            None => DMatrix::from_fn(self.row_ids.len(), cols.len(), |j, c| {
                atoms[(self.row_ids[j], cols[c])]
            }),
        }
    }

    /// `A M` for a dense `n × k` matrix.
    pub fn apply_matrix(&self, m: &DMatrix<f64>) -> DMatrix<f64> {
        match &self.dense {
            Some(d) => d * m,
            None => DMatrix::from_fn(self.row_ids.len(), m.ncols(), |j, c| m[(self.row_ids[j], c)]),
        }
    }

    /// `Aᵀ y`.
    pub fn adjoint(&self, y: &DVector<f64>) -> DVector<f64> {
        match &self.dense {
            Some(d) => d.tr_mul(y),
            None => {
                let mut out = DVector::zeros(self.n);
                for (j, &i) in self.row_ids.iter().enumerate() {
                    out[i] += y[j];
                }
                out
            }
        }
    }

    /// `AᵀA`.
    pub fn gram(&self) -> DMatrix<f64> {
        match &self.dense {
            Some(d) => d.tr_mul(d),
            None => {
                let mut out = DMatrix::zeros(self.n, self.n);
                for &i in &self.row_ids {
                    out[(i, i)] += 1.0;
                }
                out
            }
        }
    }

    /// True when `AᵀA` is diagonal, i.e. the sensor selects coordinates.
    pub fn selects_coordinates(&self) -> bool {
        self.dense.is_none()
    }
}

fn check_ids(ids: &[usize], bound: usize, what: &str) -> Result<()> {
    if ids.is_empty() {
        return contract(format!("{what}: empty row selection"));
    }
    let mut sorted = ids.to_vec();
    sorted.sort_unstable();
    for w in sorted.windows(2) {
        if w[0] == w[1] {
            return contract(format!("{what}: duplicate index {}", w[0]));
        }
    }
    if let Some(&bad) = sorted.iter().find(|&&i| i >= bound) {
        return contract(format!("{what}: index {bad} out of range [0, {bound})"));
    }
    Ok(())
}

/// Rows `e_{observed[j]}ᵀ` of the `n × n` identity.
pub fn make_pixel_mask(n: usize, observed: &[usize]) -> Result<SensingMatrix> {
    check_ids(observed, n, "pixel mask")?;
    if observed.windows(2).any(|w| w[0] >= w[1]) {
        return contract("pixel mask: observed indices must be strictly increasing");
    }
    Ok(SensingMatrix {
        n,
        kind: SensingKind::PixelMask,
        row_ids: observed.to_vec(),
        dense: None,
    })
}

/// I.i.d. standard normal `m × n` matrix from a seeded generator.
pub fn make_gaussian(m: usize, n: usize, seed: u64) -> Result<SensingMatrix> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    gaussian_from_rng(m, n, &mut rng)
}

pub fn gaussian_from_rng<R: rand::Rng + ?Sized>(m: usize, n: usize, rng: &mut R) -> Result<SensingMatrix> {
    if m == 0 || n == 0 {
        return contract("gaussian sensor needs m >= 1 and n >= 1");
    }
    // fill row by row so that a prefix of rows does not depend on m
    let mut d = DMatrix::zeros(m, n);
    for i in 0..m {
        for j in 0..n {
            d[(i, j)] = StandardNormal.sample(rng);
        }
    }
    Ok(SensingMatrix {
        n,
        kind: SensingKind::Gaussian,
        row_ids: Vec::new(),
        dense: Some(d),
    })
}

/// Selects rows of a pool, stored in ascending id order.
pub fn make_orthobasis_subset(pool: &UnionMatrix, row_ids: &[usize]) -> Result<SensingMatrix> {
    check_ids(row_ids, pool.m(), "orthobasis subset")?;
    let mut ids = row_ids.to_vec();
    ids.sort_unstable();
    let mut d = DMatrix::zeros(ids.len(), pool.n());
    for (j, &id) in ids.iter().enumerate() {
        d.set_row(j, &pool.rows.row(id));
    }
    Ok(SensingMatrix {
        n: pool.n(),
        kind: SensingKind::OrthobasisRows,
        row_ids: ids,
        dense: Some(d),
    })
}

/// Identity of a union row.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum RowId {
    /// Row `e_id` of the identity.
    Pixel(usize),
    /// Row `id` of an orthobasis pool.
    Pool(usize),
    /// Gaussian row, numbered by first appearance.
    Synthetic(usize),
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
enum RowKey {
    Pixel(usize),
    Pool(usize),
    Bits(Vec<u64>),
}

/// Deduplicated stack of sensing rows, `M × n`.
#[derive(Debug, Clone)]
pub struct UnionMatrix {
    pub rows: DMatrix<f64>,
    pub provenance: Vec<RowId>,
    index: HashMap<RowKey, usize>,
}

impl UnionMatrix {
    /// Treats the rows of `rows` as a pool with ids `0..M`.
    pub fn from_pool(rows: DMatrix<f64>) -> Self {
        let provenance = (0..rows.nrows()).map(RowId::Pool).collect();
        let index = (0..rows.nrows()).map(|i| (RowKey::Pool(i), i)).collect();
        Self {
            rows,
            provenance,
            index,
        }
    }

    /// A random orthonormal basis of `ℝⁿ` used as a row pool.
    pub fn random_orthobasis(n: usize, seed: u64) -> Result<Self> {
        let g = make_gaussian(n, n, seed)?.rows();
        let q = g.qr().q();
        Ok(Self::from_pool(q))
    }

    pub fn m(&self) -> usize {
        self.rows.nrows()
    }

    pub fn n(&self) -> usize {
        self.rows.ncols()
    }

    fn key_for(sensor: &SensingMatrix, j: usize) -> RowKey {
        match sensor.kind {
            SensingKind::PixelMask => RowKey::Pixel(sensor.row_ids[j]),
            SensingKind::OrthobasisRows => RowKey::Pool(sensor.row_ids[j]),
            SensingKind::Gaussian => {
                let d = sensor.dense.as_ref().expect("gaussian rows are dense");
                RowKey::Bits(d.row(j).iter().map(|v| v.to_bits()).collect())
            }
        }
    }

    /// Union row holding row `j` of `sensor`, if present.
    pub fn locate(&self, sensor: &SensingMatrix, j: usize) -> Option<usize> {
        self.index.get(&Self::key_for(sensor, j)).copied()
    }

    /// Numerical rank of the stacked rows.
    pub fn rank(&self) -> usize {
        crate::linalg::rank(&self.rows, 1e-10)
    }
}

/// Union of the distinct rows of all sensors.
///
/// Pooled kinds are deduplicated by id and ordered by ascending id (pixel rows
/// first, then pool rows); Gaussian rows are compared bitwise and kept in
/// first-appearance order after the pooled rows.
pub fn build_union<'a, I>(sensors: I) -> Result<UnionMatrix>
where
    I: IntoIterator<Item = &'a SensingMatrix>,
{
    let mut n = None;
    let mut pixel: BTreeMap<usize, ()> = BTreeMap::new();
    let mut pool: BTreeMap<usize, DVector<f64>> = BTreeMap::new();
    let mut gauss: Vec<(Vec<u64>, DVector<f64>)> = Vec::new();
    let mut seen_gauss: HashMap<Vec<u64>, ()> = HashMap::new();
    for (idx, s) in sensors.into_iter().enumerate() {
        match n {
            None => n = Some(s.n),
            Some(n0) if n0 != s.n => {
                return Err(Error::DimensionMismatch {
                    index: idx,
                    detail: format!("sensor has n={} but earlier sensors have n={n0}", s.n),
                })
            }
            _ => {}
        }
        match s.kind {
            SensingKind::PixelMask => {
                for &id in &s.row_ids {
                    pixel.insert(id, ());
                }
            }
            SensingKind::OrthobasisRows => {
                let d = s.dense.as_ref().expect("pool rows are dense");
                for (j, &id) in s.row_ids.iter().enumerate() {
                    pool.entry(id).or_insert_with(|| d.row(j).transpose());
                }
            }
            SensingKind::Gaussian => {
                let d = s.dense.as_ref().expect("gaussian rows are dense");
                for j in 0..d.nrows() {
                    let bits: Vec<u64> = d.row(j).iter().map(|v| v.to_bits()).collect();
                    if seen_gauss.insert(bits.clone(), ()).is_none() {
                        gauss.push((bits, d.row(j).transpose()));
                    }
                }
            }
        }
    }
    let n = n.ok_or_else(|| Error::Contract("build_union needs at least one sensor".into()))?;
    let total = pixel.len() + pool.len() + gauss.len();
    let mut rows = DMatrix::zeros(total, n);
    let mut provenance = Vec::with_capacity(total);
    let mut index = HashMap::with_capacity(total);
    let mut u = 0;
    for &id in pixel.keys() {
        rows[(u, id)] = 1.0;
        provenance.push(RowId::Pixel(id));
        index.insert(RowKey::Pixel(id), u);
        u += 1;
    }
    for (&id, row) in &pool {
        rows.set_row(u, &row.transpose());
        provenance.push(RowId::Pool(id));
        index.insert(RowKey::Pool(id), u);
        u += 1;
    }
    for (g, (bits, row)) in gauss.into_iter().enumerate() {
        rows.set_row(u, &row.transpose());
        provenance.push(RowId::Synthetic(g));
        index.insert(RowKey::Bits(bits), u);
        u += 1;
    }
    Ok(UnionMatrix {
        rows,
        provenance,
        index,
    })
}

/// A single observation `y = A x`.
#[derive(Debug, Clone)]
pub struct Measurement {
    pub sensor: SensingMatrix,
    pub y: DVector<f64>,
}

impl Measurement {
    pub fn new(sensor: SensingMatrix, y: DVector<f64>) -> Result<Self> {
        if sensor.m() != y.len() {
            return contract(format!("measurement has {} values but sensor has {} rows", y.len(), sensor.m()));
        }
        if y.iter().any(|v| !v.is_finite()) {
            return contract("measurement contains non-finite values");
        }
        Ok(Self { sensor, y })
    }

    /// Senses `x` exactly.
    pub fn observe(sensor: SensingMatrix, x: &DVector<f64>) -> Result<Self> {
        if x.len() != sensor.n() {
            return contract(format!("signal has length {} but sensor expects {}", x.len(), sensor.n()));
        }
        let y = sensor.apply(x);
        Self::new(sensor, y)
    }
}

/// Observed vectors paired with their sensors, all over the same ambient
/// dimension `n`.
#[derive(Debug, Clone)]
pub struct MeasurementSet {
    n: usize,
    items: Vec<Measurement>,
}

impl MeasurementSet {
    pub fn new(n: usize) -> Self {
        Self { n, items: Vec::new() }
    }

    pub fn from_vec(n: usize, items: Vec<Measurement>) -> Result<Self> {
        let mut set = Self::new(n);
        for m in items {
            set.push(m)?;
        }
        Ok(set)
    }

    pub fn push(&mut self, m: Measurement) -> Result<()> {
        if m.sensor.n() != self.n {
            return Err(Error::DimensionMismatch {
                index: self.items.len(),
                detail: format!("sensor has n={} but the set has n={}", m.sensor.n(), self.n),
            });
        }
        self.items.push(m);
        Ok(())
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn get(&self, i: usize) -> &Measurement {
        &self.items[i]
    }

    pub fn iter(&self) -> std::slice::Iter<'_, Measurement> {
        self.items.iter()
    }

    pub fn as_slice(&self) -> &[Measurement] {
        &self.items
    }

    /// Total number of observed values `Σ m_i`.
    pub fn observed_count(&self) -> usize {
        self.items.iter().map(|m| m.sensor.m()).sum()
    }
}

/// Sparse `M × |ω|` matrix of observed entries `P_Ω(Y)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ObservationMatrix {
    pub rows: usize,
    pub cols: usize,
    pub entries: BTreeMap<(usize, usize), f64>,
}

impl ObservationMatrix {
    pub fn new(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            entries: BTreeMap::new(),
        }
    }

    /// The observed index set `Ω`.
    pub fn omega(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.entries.keys().copied()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn insert(&mut self, u: usize, v: usize, value: f64) -> Result<()> {
        if u >= self.rows || v >= self.cols {
            return contract(format!("entry ({u}, {v}) outside {}x{}", self.rows, self.cols));
        }
        if !value.is_finite() {
            return contract(format!("entry ({u}, {v}) is not finite"));
        }
        self.entries.insert((u, v), value);
        Ok(())
    }

    /// Dense matrix with unobserved entries set to zero.
    pub fn zero_filled(&self) -> DMatrix<f64> {
        let mut out = DMatrix::zeros(self.rows, self.cols);
        for (&(u, v), &val) in &self.entries {
            out[(u, v)] = val;
        }
        out
    }

    /// Rows with no observed entry.
    pub fn missing_rows(&self) -> Vec<usize> {
        let mut seen = vec![false; self.rows];
        for &(u, _) in self.entries.keys() {
            seen[u] = true;
        }
        (0..self.rows).filter(|&u| !seen[u]).collect()
    }

    /// Columns with no observed entry.
    pub fn missing_cols(&self) -> Vec<usize> {
        let mut seen = vec![false; self.cols];
        for &(_, v) in self.entries.keys() {
            seen[v] = true;
        }
        (0..self.cols).filter(|&v| !seen[v]).collect()
    }

    /// Coordinate-list text: a `# rows cols` header, then `u v value` lines.
    pub fn write_coo<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "# {} {}", self.rows, self.cols)?;
        for (&(u, v), &val) in &self.entries {
            writeln!(w, "{u} {v} {val}")?;
        }
        Ok(())
    }

    /// Parses coordinate-list text. Without a header, the dimensions are the
    /// largest indices plus one.
    pub fn read_coo<R: BufRead>(r: R) -> Result<Self> {
        let mut dims: Option<(usize, usize)> = None;
        let mut triples = Vec::new();
        for (lineno, line) in r.lines().enumerate() {
            let line = line?;
            let t = line.trim();
            if t.is_empty() {
                continue;
            }
            if let Some(rest) = t.strip_prefix('#') {
                let nums: Vec<usize> = rest.split_whitespace().filter_map(|s| s.parse().ok()).collect();
                if nums.len() == 2 && dims.is_none() {
                    dims = Some((nums[0], nums[1]));
                }
                continue;
            }
            let parts: Vec<&str> = t.split_whitespace().collect();
            if parts.len() != 3 {
                return Err(Error::Format(format!("line {}: expected `u v value`", lineno + 1)));
            }
            let bad = |_| Error::Format(format!("line {}: cannot parse `{t}`", lineno + 1));
            let u: usize = parts[0].parse().map_err(|e: std::num::ParseIntError| bad(e.to_string()))?;
            let v: usize = parts[1].parse().map_err(|e: std::num::ParseIntError| bad(e.to_string()))?;
            let val: f64 = parts[2].parse().map_err(|e: std::num::ParseFloatError| bad(e.to_string()))?;
            triples.push((u, v, val));
        }
        let (rows, cols) = dims.unwrap_or_else(|| {
            let r = triples.iter().map(|t| t.0 + 1).max().unwrap_or(0);
            let c = triples.iter().map(|t| t.1 + 1).max().unwrap_or(0);
            (r, c)
        });
        let mut out = Self::new(rows, cols);
        for (u, v, val) in triples {
            out.insert(u, v, val)?;
        }
        Ok(out)
    }
}

/// Builds `P_Ω(Y_ω)`: column `v` holds measurement `v` placed at the union
/// rows of its sensor.
pub fn assemble_observation(measurements: &[&Measurement], union: &UnionMatrix) -> Result<ObservationMatrix> {
    let mut out = ObservationMatrix::new(union.m(), measurements.len());
    for (v, meas) in measurements.iter().enumerate() {
        for j in 0..meas.sensor.m() {
            let u = union.locate(&meas.sensor, j).ok_or_else(|| {
                Error::Contract(format!(
                    "row {j} of measurement {v} is not in the union matrix (built from a different ensemble?)"
                ))
            })?;
            out.insert(u, v, meas.y[j])?;
        }
    }
    Ok(out)
}

/// Reads the mask format: one line per signal, space-separated observed
/// indices.
pub fn read_mask_lists<R: BufRead>(r: R) -> Result<Vec<Vec<usize>>> {
    let mut out = Vec::new();
    for (lineno, line) in r.lines().enumerate() {
        let line = line?;
        let mut ids = Vec::new();
        for tok in line.split_whitespace() {
            ids.push(
                tok.parse::<usize>()
                    .map_err(|e| Error::Format(format!("mask line {}: {e}", lineno + 1)))?,
            );
        }
        out.push(ids);
    }
    Ok(out)
}

pub fn write_mask_lists<W: Write>(mut w: W, masks: &[Vec<usize>]) -> Result<()> {
    for ids in masks {
        let line: Vec<String> = ids.iter().map(|i| i.to_string()).collect();
        writeln!(w, "{}", line.join(" "))?;
    }
    Ok(())
}
