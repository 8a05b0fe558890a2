//! Labeled domain-image datasets.
//!
//! Binary layout (all little-endian):
//!
//! ```text
//! header (32 bytes)
//!   0  magic  "SFDG"
//!   4  u32    format version
//!   8  u32    flags (bit 0: pixels standardized)
//!  12  u32    image height
//!  16  u32    image width
//!  20  u32    reserved, zero
//!  24  u64    record count
//! record (height·width·2·4 + 3·8 + 8 bytes)
//!   f32[h·w]  top-layer image, row-major
//!   f32[h·w]  bottom-layer image, row-major
//!   f64 ×3    theta (deg), J (meV), D (meV)
//!   u64       solver seed
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rand::distributions::{Distribution, Uniform};
use rand::seq::SliceRandom;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::lattice::{
    build_superlattice, commensurate_indices_in_range, CouplingProfile, LatticeError, LatticeGraph,
    Layer, MoireIndex, ANGLE_RANGE_TOLERANCE_DEG,
};
use crate::seeds;
use crate::spinsim::{
    ground_state, HamiltonianParams, Rasterizer, SolverSettings, SpinConfig, SpinError,
    IMAGE_PIXELS, IMAGE_SIDE,
};

pub const MAGIC: &[u8; 4] = b"SFDG";
pub const FORMAT_VERSION: u32 = 1;
pub const HEADER_BYTES: usize = 32;
pub const RECORD_BYTES: usize = 2 * IMAGE_PIXELS * 4 + 3 * 8 + 8;
/// Length of the flattened input vector of one record (both layers).
pub const FEATURES: usize = 2 * IMAGE_PIXELS;

const FLAG_STANDARDIZED: u32 = 1;

/// Per-layer `|<S_z>|` above which a state counts as ferromagnetic.
pub const FM_THRESHOLD: f64 = 0.99;

/// Cap on the held-out test split.
pub const MAX_TEST_RECORDS: usize = 20_000;
pub const TEST_FRACTION: f64 = 0.12;

#[derive(Debug, Error)]
pub enum DataError {
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error("bad magic bytes")]
    BadMagic,
    #[error("unsupported format version {0}")]
    BadVersion(u32),
    #[error("truncated dataset: expected {expected} bytes, found {found}")]
    Truncated { expected: usize, found: usize },
    #[error("image dimensions {0}x{1} are not supported")]
    BadDimensions(u32, u32),
    #[error("record {index} violates an invariant: {reason}")]
    InvalidRecord { index: usize, reason: String },
    #[error("degenerate data: pixel variance is zero")]
    Degenerate,
    #[error("dataset is already standardized")]
    AlreadyStandardized,
    #[error("pool of {pool} records cannot supply {requested}")]
    PoolTooSmall { pool: usize, requested: usize },
    #[error("invalid split size {0}: must be a positive multiple of 8")]
    BadSplitSize(usize),
    #[error("gave up after {draws} draws with only {kept} usable records")]
    DrawBudgetExhausted { draws: usize, kept: usize },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Lattice(#[from] LatticeError),
    #[error(transparent)]
    Spin(#[from] SpinError),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

/// Sampling ranges for the Hamiltonian parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ParamRanges {
    pub theta_deg: (f64, f64),
    pub exchange: (f64, f64),
    pub anisotropy: (f64, f64),
}

impl Default for ParamRanges {
    fn default() -> Self {
        Self {
            theta_deg: (1.01, 3.89),
            exchange: (1.0, 10.0),
            anisotropy: (0.01, 0.3),
        }
    }
}

impl ParamRanges {
    fn check(&self, labels: &Labels) -> Result<(), String> {
        let (t0, t1) = self.theta_deg;
        if !(labels.theta_deg >= t0 - ANGLE_RANGE_TOLERANCE_DEG
            && labels.theta_deg <= t1 + ANGLE_RANGE_TOLERANCE_DEG)
        {
            return Err(format!("theta {} outside [{t0}, {t1}]", labels.theta_deg));
        }
        let inside = |v: f64, (lo, hi): (f64, f64)| v >= lo && v <= hi;
        if !inside(labels.exchange, self.exchange) {
            return Err(format!("J {} outside {:?}", labels.exchange, self.exchange));
        }
        if !inside(labels.anisotropy, self.anisotropy) {
            return Err(format!(
                "D {} outside {:?}",
                labels.anisotropy, self.anisotropy
            ));
        }
        Ok(())
    }

    fn contains_range(&self, inner: &ParamRanges) -> bool {
        let within = |(a, b): (f64, f64), (lo, hi): (f64, f64)| a >= lo && b <= hi && a <= b;
        within(inner.exchange, self.exchange) && within(inner.anisotropy, self.anisotropy)
    }
}

/// The regressed Hamiltonian parameter.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Target {
    #[serde(rename = "theta")]
    Theta,
    #[serde(rename = "J")]
    Exchange,
    #[serde(rename = "D")]
    Anisotropy,
}

impl Target {
    pub fn as_str(self) -> &'static str {
        match self {
            Target::Theta => "theta",
            Target::Exchange => "J",
            Target::Anisotropy => "D",
        }
    }

    /// Label min-max normalized over its canonical sampling range.
    pub fn normalized(self, labels: &Labels) -> f32 {
        let r = ParamRanges::default();
        let (v, (lo, hi)) = match self {
            Target::Theta => (labels.theta_deg, r.theta_deg),
            Target::Exchange => (labels.exchange, r.exchange),
            Target::Anisotropy => (labels.anisotropy, r.anisotropy),
        };
        ((v - lo) / (hi - lo)) as f32
    }
}

impl std::str::FromStr for Target {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "theta" | "θ" => Ok(Target::Theta),
            "J" | "j" => Ok(Target::Exchange),
            "D" | "d" => Ok(Target::Anisotropy),
            other => Err(format!("unknown target {other:?}; expected theta, J or D")),
        }
    }
}

impl std::fmt::Display for Target {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Labels {
    pub theta_deg: f64,
    pub exchange: f64,
    pub anisotropy: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ParamSample {
    pub m: MoireIndex,
    pub exchange: f64,
    pub anisotropy: f64,
}

impl ParamSample {
    pub fn theta_deg(&self) -> f64 {
        self.m.angle_deg()
    }

    pub fn labels(&self) -> Labels {
        Labels {
            theta_deg: self.theta_deg(),
            exchange: self.exchange,
            anisotropy: self.anisotropy,
        }
    }

    pub fn hamiltonian(&self) -> HamiltonianParams {
        HamiltonianParams {
            exchange: self.exchange,
            anisotropy: self.anisotropy,
        }
    }
}

/// Endless, seeded stream of parameter draws.
pub struct ParamSampler {
    rng: ChaCha8Rng,
    choices: Vec<MoireIndex>,
    exchange: Uniform<f64>,
    anisotropy: Uniform<f64>,
}

impl ParamSampler {
    pub fn new(seed: u64, choices: &[MoireIndex], ranges: &ParamRanges) -> Result<Self, DataError> {
        if choices.is_empty() {
            return Err(DataError::Config("no moiré indices to sample from".into()));
        }
        Ok(Self {
            rng: ChaCha8Rng::seed_from_u64(seed),
            choices: choices.to_vec(),
            exchange: Uniform::new_inclusive(ranges.exchange.0, ranges.exchange.1),
            anisotropy: Uniform::new_inclusive(ranges.anisotropy.0, ranges.anisotropy.1),
        })
    }
}

impl Iterator for ParamSampler {
    type Item = ParamSample;

    fn next(&mut self) -> Option<ParamSample> {
        let m = *self.choices.choose(&mut self.rng)?;
        let exchange = self.exchange.sample(&mut self.rng);
        let anisotropy = self.anisotropy.sample(&mut self.rng);
        Some(ParamSample {
            m,
            exchange,
            anisotropy,
        })
    }
}

/// `count` draws over the commensurate angles in the canonical θ range.
pub fn sample_params(seed: u64, count: usize) -> Result<Vec<ParamSample>, DataError> {
    let r = ParamRanges::default();
    let choices = commensurate_indices_in_range(r.theta_deg.0, r.theta_deg.1)?;
    Ok(ParamSampler::new(seed, &choices, &r)?.take(count).collect())
}

/// True iff both layers are uniformly magnetized out of plane.
pub fn is_ferromagnetic(graph: &LatticeGraph, s: &SpinConfig) -> bool {
    [Layer::Top, Layer::Bottom]
        .into_iter()
        .all(|layer| s.mean_sz(graph.layer_range(layer)).abs() > FM_THRESHOLD)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SampleRecord {
    /// Top image followed by bottom image; this is also the network input.
    pub pixels: Vec<f32>,
    pub labels: Labels,
    pub seed: u64,
}

impl SampleRecord {
    pub fn top(&self) -> &[f32] {
        &self.pixels[..IMAGE_PIXELS]
    }

    pub fn bottom(&self) -> &[f32] {
        &self.pixels[IMAGE_PIXELS..]
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Dataset {
    pub records: Vec<SampleRecord>,
    pub standardized: bool,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PixelStats {
    pub mean: f64,
    pub std: f64,
}

impl PixelStats {
    /// Global mean and (population) standard deviation over every pixel.
    pub fn compute<'a>(
        records: impl IntoIterator<Item = &'a SampleRecord>,
    ) -> Result<Self, DataError> {
        let (mut n, mut sum, mut sum_sq) = (0usize, 0.0f64, 0.0f64);
        for r in records {
            for &p in &r.pixels {
                let p = f64::from(p);
                sum += p;
                sum_sq += p * p;
            }
            n += r.pixels.len();
        }
        if n == 0 {
            return Err(DataError::Degenerate);
        }
        let mean = sum / n as f64;
        let var = (sum_sq / n as f64 - mean * mean).max(0.0);
        let std = var.sqrt();
        if !(std > 1e-12) {
            return Err(DataError::Degenerate);
        }
        Ok(Self { mean, std })
    }
}

/// Standardize with statistics taken from `dataset` itself.
pub fn standardize(dataset: &mut Dataset) -> Result<PixelStats, DataError> {
    if dataset.standardized {
        return Err(DataError::AlreadyStandardized);
    }
    let stats = PixelStats::compute(&dataset.records)?;
    apply_standardization(dataset, &stats)?;
    Ok(stats)
}

/// Standardize with externally supplied (train-set) statistics.
pub fn apply_standardization(dataset: &mut Dataset, stats: &PixelStats) -> Result<(), DataError> {
    if dataset.standardized {
        return Err(DataError::AlreadyStandardized);
    }
    if !(stats.std > 0.0) {
        return Err(DataError::Degenerate);
    }
    let (mean, inv) = (stats.mean, 1.0 / stats.std);
    for r in &mut dataset.records {
        for p in &mut r.pixels {
            *p = ((f64::from(*p) - mean) * inv) as f32;
        }
    }
    dataset.standardized = true;
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    /// Records drawn from the pool; divisible by 8.
    pub n_total: usize,
    pub seed: u64,
}

impl SplitSpec {
    pub fn train_size(&self) -> usize {
        self.n_total / 8 * 7
    }
}

/// Draw `n_total` ids without replacement, then split 7/8 train, 1/8 validation.
pub fn make_split(pool: &[usize], spec: &SplitSpec) -> Result<(Vec<usize>, Vec<usize>), DataError> {
    if spec.n_total == 0 || !spec.n_total.is_multiple_of(8) {
        return Err(DataError::BadSplitSize(spec.n_total));
    }
    if pool.len() < spec.n_total {
        return Err(DataError::PoolTooSmall {
            pool: pool.len(),
            requested: spec.n_total,
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let picked: Vec<usize> = rand::seq::index::sample(&mut rng, pool.len(), spec.n_total)
        .into_iter()
        .map(|k| pool[k])
        .collect();
    let n_train = spec.train_size();
    let validation = picked[n_train..].to_vec();
    let mut train = picked;
    train.truncate(n_train);
    Ok((train, validation))
}

/// Held-out test ids plus the remaining training pool.
#[derive(Debug, Clone, PartialEq)]
pub struct TestSplit {
    pub test: Vec<usize>,
    pub pool: Vec<usize>,
}

pub fn test_split_size(records: usize) -> usize {
    MAX_TEST_RECORDS.min((TEST_FRACTION * records as f64).floor() as usize)
}

/// Carve the fixed test split once per master seed.
pub fn carve_test_split(records: usize, seed: u64) -> TestSplit {
    let mut ids: Vec<usize> = (0..records).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seeds::derive(seed, 0x7e57));
    ids.shuffle(&mut rng);
    let n_test = test_split_size(records);
    let pool = ids.split_off(n_test);
    let mut test = ids;
    test.sort_unstable();
    let mut pool = pool;
    pool.sort_unstable();
    TestSplit { test, pool }
}

pub fn write_dataset(path: &Path, dataset: &Dataset) -> Result<(), DataError> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_all(&FORMAT_VERSION.to_le_bytes())?;
    let flags = if dataset.standardized {
        FLAG_STANDARDIZED
    } else {
        0
    };
    w.write_all(&flags.to_le_bytes())?;
    w.write_all(&(IMAGE_SIDE as u32).to_le_bytes())?;
    w.write_all(&(IMAGE_SIDE as u32).to_le_bytes())?;
    w.write_all(&0u32.to_le_bytes())?;
    w.write_all(&(dataset.records.len() as u64).to_le_bytes())?;
    let mut buf = Vec::with_capacity(RECORD_BYTES);
    for r in &dataset.records {
        buf.clear();
        for p in &r.pixels {
            buf.extend_from_slice(&p.to_le_bytes());
        }
        for v in [r.labels.theta_deg, r.labels.exchange, r.labels.anisotropy] {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        buf.extend_from_slice(&r.seed.to_le_bytes());
        w.write_all(&buf)?;
    }
    w.flush()?;
    Ok(())
}

fn le_u32(b: &[u8], at: usize) -> u32 {
    u32::from_le_bytes(b[at..at + 4].try_into().unwrap())
}

fn le_u64(b: &[u8], at: usize) -> u64 {
    u64::from_le_bytes(b[at..at + 8].try_into().unwrap())
}

fn le_f64(b: &[u8], at: usize) -> f64 {
    f64::from_le_bytes(b[at..at + 8].try_into().unwrap())
}

pub fn read_dataset(path: &Path) -> Result<Dataset, DataError> {
    decode_dataset(&fs::read(path)?)
}

pub fn decode_dataset(bytes: &[u8]) -> Result<Dataset, DataError> {
    if bytes.len() < HEADER_BYTES {
        return Err(DataError::Truncated {
            expected: HEADER_BYTES,
            found: bytes.len(),
        });
    }
    if &bytes[..4] != MAGIC {
        return Err(DataError::BadMagic);
    }
    let version = le_u32(bytes, 4);
    if version != FORMAT_VERSION {
        return Err(DataError::BadVersion(version));
    }
    let standardized = le_u32(bytes, 8) & FLAG_STANDARDIZED != 0;
    let (h, w) = (le_u32(bytes, 12), le_u32(bytes, 16));
    if h as usize != IMAGE_SIDE || w as usize != IMAGE_SIDE {
        return Err(DataError::BadDimensions(h, w));
    }
    let count = le_u64(bytes, 24) as usize;
    let expected = HEADER_BYTES + count * RECORD_BYTES;
    if bytes.len() != expected {
        return Err(DataError::Truncated {
            expected,
            found: bytes.len(),
        });
    }
    let ranges = ParamRanges::default();
    let records = bytes[HEADER_BYTES..]
        .chunks_exact(RECORD_BYTES)
        .enumerate()
        .map(|(index, chunk)| {
            let pixels: Vec<f32> = chunk[..FEATURES * 4]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            let at = FEATURES * 4;
            let labels = Labels {
                theta_deg: le_f64(chunk, at),
                exchange: le_f64(chunk, at + 8),
                anisotropy: le_f64(chunk, at + 16),
            };
            let seed = le_u64(chunk, at + 24);
            let invalid = |reason: String| DataError::InvalidRecord { index, reason };
            ranges.check(&labels).map_err(invalid)?;
            if standardized {
                if pixels.iter().any(|p| !p.is_finite()) {
                    return Err(invalid("non-finite pixel".into()));
                }
            } else if pixels.iter().any(|p| !(-1.0..=1.0).contains(p)) {
                return Err(invalid("pixel outside [-1, 1]".into()));
            }
            Ok(SampleRecord {
                pixels,
                labels,
                seed,
            })
        })
        .collect::<Result<Vec<_>, _>>()?;
    Ok(Dataset {
        records,
        standardized,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationConfig {
    pub count: usize,
    pub seed: u64,
    pub m_choices: Vec<MoireIndex>,
    pub ranges: ParamRanges,
    pub profile: CouplingProfile,
    pub solver: SolverSettings,
    /// Abort once this many draws have been spent without reaching `count`.
    #[serde(default)]
    pub max_draws: Option<usize>,
    /// Draws evaluated per parallel batch; does not affect results.
    #[serde(skip, default = "default_batch")]
    pub batch: usize,
}

fn default_batch() -> usize {
    64
}

impl GenerationConfig {
    /// Canonical ranges restricted to a single moiré index.
    pub fn at_index(count: usize, seed: u64, m: MoireIndex) -> Self {
        Self {
            count,
            seed,
            m_choices: vec![m],
            ranges: ParamRanges::default(),
            profile: CouplingProfile::default(),
            solver: SolverSettings::default(),
            max_draws: None,
            batch: default_batch(),
        }
    }

    fn validate(&self) -> Result<(), DataError> {
        if self.count == 0 {
            return Err(DataError::Config("count must be at least 1".into()));
        }
        let canonical = ParamRanges::default();
        if !canonical.contains_range(&self.ranges) {
            return Err(DataError::Config(format!(
                "sampling ranges {:?} exceed the canonical ranges",
                self.ranges
            )));
        }
        let allowed = commensurate_indices_in_range(canonical.theta_deg.0, canonical.theta_deg.1)?;
        if let Some(m) = self.m_choices.iter().find(|m| !allowed.contains(m)) {
            return Err(DataError::Config(format!(
                "moiré index {} has angle {:.3} deg outside the canonical range",
                m.get(),
                m.angle_deg()
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LabelStats {
    pub min: f64,
    pub max: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub format_version: u32,
    pub record_count: usize,
    pub generation_seed: u64,
    /// Raw-pixel statistics of the generated records.
    pub pixel_stats: PixelStats,
    pub label_stats: BTreeMap<String, LabelStats>,
    pub draws: usize,
    pub fm_excluded: usize,
    pub nonconverged_dropped: usize,
    pub config: GenerationConfig,
    pub data_sha256: String,
}

impl DatasetManifest {
    pub fn path_for(data: &Path) -> PathBuf {
        data.with_extension("json")
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("manifest serializes")
    }

    pub fn sha256(&self) -> String {
        hex_digest(self.to_json().as_bytes())
    }
}

pub fn hex_digest(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

enum DrawOutcome {
    Kept(SampleRecord),
    Ferromagnetic,
    Unconverged,
}

struct IndexGeometry {
    graph: LatticeGraph,
    top: Rasterizer,
    bottom: Rasterizer,
}

fn simulate_draw(
    geometry: &IndexGeometry,
    sample: &ParamSample,
    settings: &SolverSettings,
    seed: u64,
) -> Result<DrawOutcome, DataError> {
    let params = sample.hamiltonian();
    let cfg = settings.config(&params, geometry.graph.site_count(), seed);
    let gs = ground_state(&geometry.graph, &params, &cfg)?;
    if !gs.converged {
        return Ok(DrawOutcome::Unconverged);
    }
    if is_ferromagnetic(&geometry.graph, &gs.config) {
        return Ok(DrawOutcome::Ferromagnetic);
    }
    let mut pixels = vec![0.0f32; FEATURES];
    let (top, bottom) = pixels.split_at_mut(IMAGE_PIXELS);
    geometry.top.render_into(&gs.config, top);
    geometry.bottom.render_into(&gs.config, bottom);
    Ok(DrawOutcome::Kept(SampleRecord {
        pixels,
        labels: sample.labels(),
        seed,
    }))
}

/// Run ground-state searches until `count` non-FM, converged records exist,
/// then write the dataset to `out` and its manifest next to it.
///
/// Draws are evaluated in parallel batches but accepted strictly in draw
/// order, so the output does not depend on the thread count.
pub fn generate_dataset(
    cfg: &GenerationConfig,
    out: &Path,
) -> Result<(Dataset, DatasetManifest), DataError> {
    cfg.validate()?;
    let mut geometry: BTreeMap<MoireIndex, Arc<IndexGeometry>> = BTreeMap::new();
    for &m in &cfg.m_choices {
        let graph = build_superlattice(m, &cfg.profile)?;
        let top = Rasterizer::new(&graph, Layer::Top);
        let bottom = Rasterizer::new(&graph, Layer::Bottom);
        geometry.insert(m, Arc::new(IndexGeometry { graph, top, bottom }));
    }
    let mut sampler = ParamSampler::new(cfg.seed, &cfg.m_choices, &cfg.ranges)?;
    let mut records = Vec::with_capacity(cfg.count);
    let (mut draws, mut fm_excluded, mut nonconverged) = (0usize, 0usize, 0usize);
    let batch = cfg.batch.max(1);
    while records.len() < cfg.count {
        if cfg.max_draws.is_some_and(|cap| draws >= cap) {
            return Err(DataError::DrawBudgetExhausted {
                draws,
                kept: records.len(),
            });
        }
        let jobs: Vec<(usize, ParamSample)> = (0..batch)
            .map(|k| (draws + k, sampler.next().expect("sampler is endless")))
            .collect();
        let outcomes: Vec<Result<DrawOutcome, DataError>> = jobs
            .par_iter()
            .map(|(index, sample)| {
                let seed = seeds::derive(cfg.seed, *index as u64);
                simulate_draw(&geometry[&sample.m], sample, &cfg.solver, seed)
            })
            .collect();
        for outcome in outcomes {
            if records.len() == cfg.count || cfg.max_draws.is_some_and(|cap| draws >= cap) {
                break;
            }
            draws += 1;
            match outcome? {
                DrawOutcome::Kept(r) => records.push(r),
                DrawOutcome::Ferromagnetic => fm_excluded += 1,
                DrawOutcome::Unconverged => nonconverged += 1,
            }
        }
        log::info!(
            "generated {}/{} records ({draws} draws, {fm_excluded} FM, {nonconverged} unconverged)",
            records.len(),
            cfg.count
        );
    }
    if nonconverged > 0 {
        log::warn!("dropped {nonconverged} unconverged samples");
    }
    let dataset = Dataset {
        records,
        standardized: false,
    };
    write_dataset(out, &dataset)?;
    let manifest = DatasetManifest {
        format_version: FORMAT_VERSION,
        record_count: dataset.len(),
        generation_seed: cfg.seed,
        pixel_stats: PixelStats::compute(&dataset.records).unwrap_or(PixelStats {
            mean: 0.0,
            std: 0.0,
        }),
        label_stats: label_stats(&dataset),
        draws,
        fm_excluded,
        nonconverged_dropped: nonconverged,
        config: cfg.clone(),
        data_sha256: hex_digest(&fs::read(out)?),
    };
    fs::write(DatasetManifest::path_for(out), manifest.to_json())?;
    Ok((dataset, manifest))
}

fn label_stats(dataset: &Dataset) -> BTreeMap<String, LabelStats> {
    let mut out = BTreeMap::new();
    let fields: [(&str, fn(&Labels) -> f64); 3] = [
        ("theta", |l| l.theta_deg),
        ("J", |l| l.exchange),
        ("D", |l| l.anisotropy),
    ];
    for (name, get) in fields {
        let values = dataset.records.iter().map(|r| get(&r.labels));
        let min = values.clone().fold(f64::INFINITY, f64::min);
        let max = values.fold(f64::NEG_INFINITY, f64::max);
        out.insert(name.to_string(), LabelStats { min, max });
    }
    out
}
