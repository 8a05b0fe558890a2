//! Manifest-driven training grids, the results store, and report emission.
//!
//! A grid is the product `architecture × N_D × seed`. Every cell draws a
//! train/validation split from the non-test pool, trains one network and
//! records its test MSE. The store is a directory:
//!
//! ```text
//! manifest.json   copy of the experiment manifest
//! results.csv     one row per completed cell, canonical order
//! failures.csv    cells that errored (retried on resume)
//! timings.csv     wall time per cell, kept apart so results stay reproducible
//! external.csv    ingested rows from other training pipelines
//! status.json     completion state
//! ```

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fs::{self, OpenOptions};
use std::io;
use std::path::{Path, PathBuf};
use std::sync::mpsc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::datagen::{
    apply_standardization, carve_test_split, make_split, read_dataset, DataError, PixelStats,
    SplitSpec, Target, FEATURES,
};
use crate::mlp::{train, MlpError, MlpSpec, Samples, TrainConfig, PRECISION_FLOOR};
use crate::scalestats::{fit_log_linear, fit_power_law, summarize, StatsError};
use crate::seeds;

/// Environment variable capping worker threads.
pub const THREADS_ENV: &str = "SCALING_FORGE_THREADS";

pub const RESULTS_FILE: &str = "results.csv";
pub const FAILURES_FILE: &str = "failures.csv";
pub const TIMINGS_FILE: &str = "timings.csv";
pub const EXTERNAL_FILE: &str = "external.csv";
pub const STATUS_FILE: &str = "status.json";
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("invalid manifest: {0}")]
    Manifest(String),
    #[error("store at {path} was produced by manifest {found}, not {expected}")]
    ForeignStore {
        path: PathBuf,
        expected: String,
        found: String,
    },
    #[error("empty results store")]
    EmptyStore,
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Mlp(#[from] MlpError),
    #[error(transparent)]
    Stats(#[from] StatsError),
    #[error("thread pool: {0}")]
    Pool(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Architecture {
    pub n_l: usize,
    pub n_n: usize,
}

impl Architecture {
    pub fn spec(&self) -> Result<MlpSpec, MlpError> {
        MlpSpec::new(FEATURES, self.n_l, self.n_n)
    }
}

/// Inclusive bounds selecting which points enter the power-law fits.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct FitRanges {
    #[serde(default)]
    pub n_d_min: Option<usize>,
    #[serde(default)]
    pub n_d_max: Option<usize>,
    #[serde(default)]
    pub n_m_min: Option<usize>,
    #[serde(default)]
    pub n_m_max: Option<usize>,
    /// Leave out cells whose geometric-mean loss is at the precision floor.
    #[serde(default)]
    pub exclude_floor: bool,
}

impl FitRanges {
    fn within(v: usize, lo: Option<usize>, hi: Option<usize>) -> bool {
        lo.is_none_or(|lo| v >= lo) && hi.is_none_or(|hi| v <= hi)
    }

    pub fn admits(&self, n_d: usize, n_m: usize, geo_mean: f64) -> bool {
        Self::within(n_d, self.n_d_min, self.n_d_max)
            && Self::within(n_m, self.n_m_min, self.n_m_max)
            && !(self.exclude_floor && geo_mean <= PRECISION_FLOOR)
    }
}

/// Optional replacements for the default training protocol.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingOverrides {
    #[serde(default)]
    pub max_epochs: Option<usize>,
    #[serde(default)]
    pub patience: Option<usize>,
    #[serde(default)]
    pub batch_size: Option<usize>,
    #[serde(default)]
    pub lr0: Option<f64>,
    #[serde(default)]
    pub lr_decay: Option<f64>,
}

impl TrainingOverrides {
    pub fn config(&self, seed: u64) -> TrainConfig {
        let d = TrainConfig::default();
        TrainConfig {
            lr0: self.lr0.unwrap_or(d.lr0),
            lr_decay: self.lr_decay.unwrap_or(d.lr_decay),
            max_epochs: self.max_epochs.unwrap_or(d.max_epochs),
            patience: self.patience.unwrap_or(d.patience),
            batch_size: self.batch_size.unwrap_or(d.batch_size),
            adam: d.adam,
            seed,
        }
    }
}

fn default_seeds() -> usize {
    20
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentManifest {
    /// Dataset file; relative paths resolve against the manifest's directory.
    pub dataset: PathBuf,
    pub target: Target,
    pub architectures: Vec<Architecture>,
    /// Records drawn per cell (train + validation), each divisible by 8.
    pub dataset_sizes: Vec<usize>,
    #[serde(default = "default_seeds")]
    pub seeds_per_cell: usize,
    pub master_seed: u64,
    #[serde(default)]
    pub fit: FitRanges,
    /// Worker limit; does not affect results and is excluded from the hash.
    #[serde(default)]
    pub parallelism: Option<usize>,
    #[serde(default)]
    pub training: TrainingOverrides,
    #[serde(skip)]
    pub base_dir: Option<PathBuf>,
}

impl ExperimentManifest {
    pub fn load(path: &Path) -> Result<Self, HarnessError> {
        let mut m: Self = serde_json::from_str(&fs::read_to_string(path)?)?;
        m.base_dir = path.parent().map(Path::to_path_buf);
        m.validate()?;
        Ok(m)
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        let bad = |m: String| Err(HarnessError::Manifest(m));
        if self.architectures.is_empty() || self.dataset_sizes.is_empty() {
            return bad("architectures and dataset_sizes must be non-empty".into());
        }
        if self.seeds_per_cell == 0 {
            return bad("seeds_per_cell must be at least 1".into());
        }
        if let Some(n) = self.dataset_sizes.iter().find(|&&n| n == 0 || n % 8 != 0) {
            return bad(format!("dataset size {n} is not a positive multiple of 8"));
        }
        for a in &self.architectures {
            a.spec()?;
        }
        let unique: BTreeSet<_> = self.architectures.iter().collect();
        if unique.len() != self.architectures.len() {
            return bad("duplicate architecture".into());
        }
        let unique: BTreeSet<_> = self.dataset_sizes.iter().collect();
        if unique.len() != self.dataset_sizes.len() {
            return bad("duplicate dataset size".into());
        }
        if self.parallelism == Some(0) {
            return bad("parallelism must be at least 1".into());
        }
        self.training.config(0).validate()?;
        Ok(())
    }

    pub fn dataset_path(&self) -> PathBuf {
        match &self.base_dir {
            Some(base) if self.dataset.is_relative() => base.join(&self.dataset),
            _ => self.dataset.clone(),
        }
    }

    /// Short content hash identifying the experiment.
    pub fn hash(&self) -> String {
        let canonical = Self {
            parallelism: None,
            base_dir: None,
            ..self.clone()
        };
        let json = serde_json::to_string(&canonical).expect("manifest serializes");
        crate::datagen::hex_digest(json.as_bytes())[..16].to_string()
    }

    /// Every cell in canonical order: architecture, then size, then seed.
    pub fn cells(&self) -> Vec<CellKey> {
        let mut out = Vec::new();
        for &arch in &self.architectures {
            for &n_d in &self.dataset_sizes {
                for seed in 0..self.seeds_per_cell as u64 {
                    out.push(CellKey { arch, n_d, seed });
                }
            }
        }
        out
    }

    fn split_seed(&self, cell: &CellKey) -> u64 {
        seeds::derive_all(self.master_seed, &[0x5b11, cell.n_d as u64, cell.seed])
    }

    fn train_seed(&self, cell: &CellKey) -> u64 {
        let a = cell.arch;
        seeds::derive_all(
            self.master_seed,
            &[
                0x7a1,
                a.n_l as u64,
                a.n_n as u64,
                cell.n_d as u64,
                cell.seed,
            ],
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct CellKey {
    pub arch: Architecture,
    pub n_d: usize,
    pub seed: u64,
}

/// One trained network's outcome. Fields unknown for ingested rows are empty.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub manifest_hash: String,
    pub target: String,
    pub arch_id: String,
    pub n_l: Option<usize>,
    pub n_n: Option<usize>,
    #[serde(rename = "N_M")]
    pub n_m: usize,
    #[serde(rename = "N_D")]
    pub n_d: usize,
    pub n_train: Option<usize>,
    pub seed: u64,
    pub test_mse: f64,
    pub best_epoch: Option<usize>,
    pub epochs_run: Option<usize>,
    pub at_floor: bool,
}

/// Identity of a record within a store.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct RecordKey {
    pub target: String,
    pub arch_id: String,
    pub n_d: usize,
    pub seed: u64,
}

impl RunRecord {
    pub fn key(&self) -> RecordKey {
        RecordKey {
            target: self.target.clone(),
            arch_id: self.arch_id.clone(),
            n_d: self.n_d,
            seed: self.seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct FailureRow {
    manifest_hash: String,
    arch_id: String,
    #[serde(rename = "N_D")]
    n_d: usize,
    seed: u64,
    error: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct TimingRow {
    arch_id: String,
    #[serde(rename = "N_D")]
    n_d: usize,
    seed: u64,
    wall_time_s: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GridState {
    Complete,
    Partial,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridStatus {
    pub manifest_hash: String,
    pub state: GridState,
    pub total_cells: usize,
    pub completed: usize,
    pub failed: usize,
    /// Cells run in this invocation.
    pub ran: usize,
}

/// Records of a store directory.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ResultsStore {
    pub records: Vec<RunRecord>,
}

fn read_rows<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>, HarnessError> {
    if !path.exists() {
        return Ok(Vec::new());
    }
    let mut reader = csv::Reader::from_path(path)?;
    Ok(reader.deserialize().collect::<Result<Vec<T>, _>>()?)
}

impl ResultsStore {
    /// Grid results plus ingested external rows.
    pub fn load(dir: &Path) -> Result<Self, HarnessError> {
        let mut records: Vec<RunRecord> = read_rows(&dir.join(RESULTS_FILE))?;
        records.extend(read_rows::<RunRecord>(&dir.join(EXTERNAL_FILE))?);
        Ok(Self { records })
    }

    pub fn keys(&self) -> HashSet<RecordKey> {
        self.records.iter().map(RunRecord::key).collect()
    }
}

/// Appends serde rows to a CSV file, writing the header only when new.
struct CsvAppender {
    writer: csv::Writer<fs::File>,
}

impl CsvAppender {
    fn open(path: &Path, header: &[&str]) -> Result<Self, HarnessError> {
        let fresh = !path.exists() || fs::metadata(path)?.len() == 0;
        let file = OpenOptions::new().create(true).append(true).open(path)?;
        let mut writer = csv::WriterBuilder::new()
            .has_headers(false)
            .from_writer(file);
        if fresh {
            writer.write_record(header)?;
            writer.flush()?;
        }
        Ok(Self { writer })
    }

    fn append<T: Serialize>(&mut self, row: &T) -> Result<(), HarnessError> {
        self.writer.serialize(row)?;
        self.writer.flush()?;
        Ok(())
    }
}

const RESULT_HEADER: [&str; 13] = [
    "manifest_hash",
    "target",
    "arch_id",
    "n_l",
    "n_n",
    "N_M",
    "N_D",
    "n_train",
    "seed",
    "test_mse",
    "best_epoch",
    "epochs_run",
    "at_floor",
];

#[derive(Debug, Clone, Default)]
pub struct GridOptions {
    /// Worker threads; further capped by the manifest and `SCALING_FORGE_THREADS`.
    pub threads: Option<usize>,
    /// Run at most this many pending cells, then stop as if interrupted.
    pub max_cells: Option<usize>,
}

/// Thread count after applying every configured cap.
pub fn effective_threads(manifest: &ExperimentManifest, requested: Option<usize>) -> usize {
    let env = std::env::var(THREADS_ENV)
        .ok()
        .and_then(|v| v.trim().parse::<usize>().ok())
        .filter(|&n| n > 0);
    let available = std::thread::available_parallelism().map_or(1, |n| n.get());
    [requested, manifest.parallelism, env]
        .into_iter()
        .flatten()
        .fold(available, usize::min)
        .max(1)
}

/// Standardized inputs and normalized targets shared by every cell.
struct GridData {
    inputs: Vec<Vec<f32>>,
    targets: Vec<f32>,
    test: Vec<usize>,
    pool: Vec<usize>,
}

impl GridData {
    fn load(manifest: &ExperimentManifest) -> Result<Self, HarnessError> {
        let mut dataset = read_dataset(&manifest.dataset_path())?;
        if dataset.standardized {
            return Err(HarnessError::Manifest(
                "dataset is already standardized; the grid needs raw pixels".into(),
            ));
        }
        let split = carve_test_split(dataset.len(), manifest.master_seed);
        let largest = *manifest.dataset_sizes.iter().max().expect("validated");
        if split.pool.len() < largest || split.test.is_empty() {
            return Err(HarnessError::Manifest(format!(
                "dataset of {} records leaves a pool of {} for N_D up to {largest}",
                dataset.len(),
                split.pool.len()
            )));
        }
        let stats = PixelStats::compute(split.pool.iter().map(|&i| &dataset.records[i]))?;
        apply_standardization(&mut dataset, &stats)?;
        let targets = dataset
            .records
            .iter()
            .map(|r| manifest.target.normalized(&r.labels))
            .collect();
        let inputs = dataset.records.into_iter().map(|r| r.pixels).collect();
        Ok(Self {
            inputs,
            targets,
            test: split.test,
            pool: split.pool,
        })
    }

    fn samples(&self, ids: &[usize]) -> Samples<'_, f32> {
        Samples {
            inputs: ids.iter().map(|&i| self.inputs[i].as_slice()).collect(),
            targets: ids.iter().map(|&i| self.targets[i]).collect(),
        }
    }
}

fn run_cell(
    manifest: &ExperimentManifest,
    hash: &str,
    data: &GridData,
    test: &Samples<'_, f32>,
    cell: &CellKey,
) -> Result<(RunRecord, f64), HarnessError> {
    let spec = cell.arch.spec()?;
    let split = SplitSpec {
        n_total: cell.n_d,
        seed: manifest.split_seed(cell),
    };
    let (train_ids, val_ids) = make_split(&data.pool, &split)?;
    let cfg = manifest.training.config(manifest.train_seed(cell));
    let (_, report) = train(
        spec,
        &data.samples(&train_ids),
        &data.samples(&val_ids),
        Some(test),
        &cfg,
    )?;
    let test_mse = report.test_mse.expect("test set supplied");
    let record = RunRecord {
        manifest_hash: hash.to_string(),
        target: manifest.target.to_string(),
        arch_id: spec.arch_id(),
        n_l: Some(spec.n_l),
        n_n: Some(spec.n_n),
        n_m: spec.param_count(),
        n_d: cell.n_d,
        n_train: Some(train_ids.len()),
        seed: cell.seed,
        test_mse,
        best_epoch: Some(report.best_epoch),
        epochs_run: Some(report.epochs_run),
        at_floor: report.at_precision_floor(),
    };
    Ok((record, report.wall_time_s))
}

/// Run every pending cell of the manifest into the store at `out`.
///
/// Cells already present in `results.csv` are skipped. Rows are written in
/// canonical cell order whatever the thread count, so a fresh run of the
/// same manifest reproduces `results.csv` byte for byte.
pub fn run_grid(
    manifest: &ExperimentManifest,
    out: &Path,
    opts: &GridOptions,
) -> Result<GridStatus, HarnessError> {
    manifest.validate()?;
    fs::create_dir_all(out)?;
    let hash = manifest.hash();
    let results_path = out.join(RESULTS_FILE);
    let existing: Vec<RunRecord> = read_rows(&results_path)?;
    if let Some(r) = existing.iter().find(|r| r.manifest_hash != hash) {
        return Err(HarnessError::ForeignStore {
            path: out.to_path_buf(),
            expected: hash,
            found: r.manifest_hash.clone(),
        });
    }
    fs::write(
        out.join(MANIFEST_FILE),
        serde_json::to_string_pretty(manifest)?,
    )?;
    let done: HashSet<RecordKey> = existing.iter().map(RunRecord::key).collect();
    let all_cells = manifest.cells();
    let target = manifest.target.to_string();
    let mut pending: Vec<CellKey> = all_cells
        .iter()
        .filter(|c| {
            let arch_id = c.arch.spec().map(|s| s.arch_id()).unwrap_or_default();
            !done.contains(&RecordKey {
                target: target.clone(),
                arch_id,
                n_d: c.n_d,
                seed: c.seed,
            })
        })
        .copied()
        .collect();
    if let Some(cap) = opts.max_cells {
        pending.truncate(cap);
    }

    let mut failed = 0;
    if !pending.is_empty() {
        let data = GridData::load(manifest)?;
        let test = data.samples(&data.test);
        let threads = effective_threads(manifest, opts.threads);
        log::info!(
            "running {} of {} cells on {threads} thread(s)",
            pending.len(),
            all_cells.len()
        );
        let mut results = CsvAppender::open(&results_path, &RESULT_HEADER)?;
        let mut failures = CsvAppender::open(
            &out.join(FAILURES_FILE),
            &["manifest_hash", "arch_id", "N_D", "seed", "error"],
        )?;
        let mut timings = CsvAppender::open(
            &out.join(TIMINGS_FILE),
            &["arch_id", "N_D", "seed", "wall_time_s"],
        )?;
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .map_err(|e| HarnessError::Pool(e.to_string()))?;
        let (tx, rx) = mpsc::channel();
        let write_result: Result<(), HarnessError> = pool.in_place_scope(|scope| {
            for (index, cell) in pending.iter().enumerate() {
                let tx = tx.clone();
                let (data, test, hash) = (&data, &test, &hash);
                scope.spawn(move |_| {
                    let outcome = run_cell(manifest, hash, data, test, cell);
                    let _ = tx.send((index, outcome));
                });
            }
            drop(tx);
            // Reorder buffer: emit rows strictly in pending order.
            let mut buffer = BTreeMap::new();
            let mut next = 0;
            for (index, outcome) in rx {
                buffer.insert(index, outcome);
                while let Some(outcome) = buffer.remove(&next) {
                    let cell = &pending[next];
                    let arch_id = format!("l{}n{}", cell.arch.n_l, cell.arch.n_n);
                    match outcome {
                        Ok((record, wall)) => {
                            results.append(&record)?;
                            timings.append(&TimingRow {
                                arch_id,
                                n_d: cell.n_d,
                                seed: cell.seed,
                                wall_time_s: wall,
                            })?;
                        }
                        Err(e) => {
                            log::warn!(
                                "cell {arch_id} N_D={} seed={} failed: {e}",
                                cell.n_d,
                                cell.seed
                            );
                            failed += 1;
                            failures.append(&FailureRow {
                                manifest_hash: hash.clone(),
                                arch_id,
                                n_d: cell.n_d,
                                seed: cell.seed,
                                error: e.to_string(),
                            })?;
                        }
                    }
                    next += 1;
                }
            }
            Ok(())
        });
        write_result?;
    }

    let completed = read_rows::<RunRecord>(&results_path)?.len();
    let status = GridStatus {
        manifest_hash: hash,
        state: if completed == all_cells.len() {
            GridState::Complete
        } else {
            GridState::Partial
        },
        total_cells: all_cells.len(),
        completed,
        failed,
        ran: pending.len(),
    };
    fs::write(
        out.join(STATUS_FILE),
        serde_json::to_string_pretty(&status)?,
    )?;
    Ok(status)
}

/// Minimal schema accepted from external training pipelines.
#[derive(Debug, Clone, Deserialize)]
struct ExternalRow {
    target: String,
    arch_id: String,
    #[serde(rename = "N_M")]
    n_m: usize,
    #[serde(rename = "N_D")]
    n_d: usize,
    seed: u64,
    test_mse: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Rejection {
    /// 1-based line number in the source file (header is line 1).
    pub line: u64,
    pub reason: String,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct IngestReport {
    pub accepted: Vec<RunRecord>,
    pub rejected: Vec<Rejection>,
}

/// Validate an external CSV with columns `target, arch_id, N_M, N_D, seed,
/// test_mse`. Rows whose key already exists in `store` or earlier in the
/// file are rejected as conflicts.
pub fn ingest_external(
    csv_path: &Path,
    store: &ResultsStore,
) -> Result<IngestReport, HarnessError> {
    let mut reader = csv::Reader::from_path(csv_path)?;
    let mut seen = store.keys();
    let mut report = IngestReport::default();
    let header = reader.headers()?.clone();
    for raw in reader.records() {
        let raw = match raw {
            Ok(r) => r,
            Err(e) => {
                let line = e.position().map_or(0, |p| p.line());
                report.rejected.push(Rejection {
                    line,
                    reason: format!("malformed row: {e}"),
                });
                continue;
            }
        };
        let line = raw.position().map_or(0, |p| p.line());
        let row: ExternalRow = match raw.deserialize(Some(&header)) {
            Ok(r) => r,
            Err(e) => {
                report.rejected.push(Rejection {
                    line,
                    reason: format!("malformed row: {e}"),
                });
                continue;
            }
        };
        let mut reject = |reason: String| report.rejected.push(Rejection { line, reason });
        if row.target.parse::<Target>().is_err() {
            reject(format!("unknown target {:?}", row.target));
            continue;
        }
        if !(row.test_mse > 0.0 && row.test_mse.is_finite()) {
            reject(format!("test_mse {} must be positive", row.test_mse));
            continue;
        }
        if row.n_m == 0 || row.n_d == 0 || row.arch_id.is_empty() {
            reject("N_M, N_D and arch_id must be non-empty".into());
            continue;
        }
        let record = RunRecord {
            manifest_hash: "external".into(),
            target: row.target,
            arch_id: row.arch_id,
            n_l: None,
            n_n: None,
            n_m: row.n_m,
            n_d: row.n_d,
            n_train: None,
            seed: row.seed,
            test_mse: row.test_mse,
            best_epoch: None,
            epochs_run: None,
            at_floor: row.test_mse < PRECISION_FLOOR,
        };
        if !seen.insert(record.key()) {
            reject(format!(
                "duplicate cell ({}, {}, N_D={}, seed={})",
                record.target, record.arch_id, record.n_d, record.seed
            ));
            continue;
        }
        report.accepted.push(record);
    }
    Ok(report)
}

/// Append accepted external records to the store's `external.csv`.
pub fn append_external(dir: &Path, records: &[RunRecord]) -> Result<(), HarnessError> {
    fs::create_dir_all(dir)?;
    let mut out = CsvAppender::open(&dir.join(EXTERNAL_FILE), &RESULT_HEADER)?;
    for r in records {
        out.append(r)?;
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CellSummary {
    pub target: String,
    pub arch_id: String,
    #[serde(rename = "N_M")]
    pub n_m: usize,
    #[serde(rename = "N_D")]
    pub n_d: usize,
    pub n: usize,
    pub arith_mean: f64,
    pub arith_se: f64,
    pub geo_mean: f64,
    pub geo_se: f64,
    pub median: f64,
    pub mad: f64,
    /// Fewer than two realizations: dispersion is undefined.
    pub too_few: bool,
    pub in_fit: bool,
}

/// Power-law exponent of one curve.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ExponentRow {
    pub target: String,
    /// Architecture for α_D rows, dataset size for α_M rows.
    pub curve: String,
    /// N_M for α_D rows, N_D for α_M rows.
    pub at: usize,
    pub alpha: f64,
    pub alpha_err: Option<f64>,
    pub log_prefactor: f64,
    pub r_squared: f64,
    pub n_points: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LogFitRow {
    pub target: String,
    /// `alpha_D_vs_N_M` or `alpha_M_vs_N_D`.
    pub relation: String,
    pub a: f64,
    pub a_err: Option<f64>,
    pub b: f64,
    pub b_err: Option<f64>,
    pub n_points: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct Report {
    pub cells: Vec<CellSummary>,
    pub alpha_d: Vec<ExponentRow>,
    pub alpha_m: Vec<ExponentRow>,
    pub log_fits: Vec<LogFitRow>,
    pub warnings: Vec<String>,
}

fn exponent_row(
    target: &str,
    curve: String,
    at: usize,
    points: &[(f64, f64)],
    mask: &[bool],
    warnings: &mut Vec<String>,
) -> Option<ExponentRow> {
    match fit_power_law(points, Some(mask)) {
        Ok(f) => Some(ExponentRow {
            target: target.to_string(),
            curve,
            at,
            alpha: f.alpha,
            alpha_err: f.alpha_err,
            log_prefactor: f.log_prefactor,
            r_squared: f.r_squared,
            n_points: f.n_points,
        }),
        Err(e) => {
            warnings.push(format!("{target} {curve}: no power-law fit ({e})"));
            None
        }
    }
}

/// Summaries and fits computed from store records; pure.
pub fn build_report(records: &[RunRecord], fit: &FitRanges) -> Result<Report, HarnessError> {
    if records.is_empty() {
        return Err(HarnessError::EmptyStore);
    }
    let mut groups: BTreeMap<(String, usize, String, usize), Vec<f64>> = BTreeMap::new();
    for r in records {
        groups
            .entry((r.target.clone(), r.n_m, r.arch_id.clone(), r.n_d))
            .or_default()
            .push(r.test_mse);
    }
    let mut report = Report::default();
    for ((target, n_m, arch_id, n_d), losses) in &groups {
        let s = summarize(losses)?;
        if s.n < 2 {
            report.warnings.push(format!(
                "{target} {arch_id} N_D={n_d}: only {} realization",
                s.n
            ));
        }
        report.cells.push(CellSummary {
            target: target.clone(),
            arch_id: arch_id.clone(),
            n_m: *n_m,
            n_d: *n_d,
            n: s.n,
            arith_mean: s.arith.value,
            arith_se: s.arith.err,
            geo_mean: s.geo.value,
            geo_se: s.geo.err,
            median: s.median.value,
            mad: s.median.err,
            too_few: s.n < 2,
            in_fit: fit.admits(*n_d, *n_m, s.geo.value),
        });
    }

    let targets: BTreeSet<&str> = report.cells.iter().map(|c| c.target.as_str()).collect();
    let mut warnings = Vec::new();
    for target in targets {
        let cells: Vec<&CellSummary> = report.cells.iter().filter(|c| c.target == target).collect();

        let archs: BTreeSet<(usize, &str)> =
            cells.iter().map(|c| (c.n_m, c.arch_id.as_str())).collect();
        let mut alpha_d = Vec::new();
        for (n_m, arch) in archs {
            let curve: Vec<&&CellSummary> = cells.iter().filter(|c| c.arch_id == arch).collect();
            let points: Vec<(f64, f64)> =
                curve.iter().map(|c| (c.n_d as f64, c.geo_mean)).collect();
            let mask: Vec<bool> = curve.iter().map(|c| c.in_fit).collect();
            if let Some(row) =
                exponent_row(target, arch.to_string(), n_m, &points, &mask, &mut warnings)
            {
                alpha_d.push(row);
            }
        }

        let sizes: BTreeSet<usize> = cells.iter().map(|c| c.n_d).collect();
        let mut alpha_m = Vec::new();
        for n_d in sizes {
            let curve: Vec<&&CellSummary> = cells.iter().filter(|c| c.n_d == n_d).collect();
            if curve.len() < 2 {
                continue;
            }
            let points: Vec<(f64, f64)> =
                curve.iter().map(|c| (c.n_m as f64, c.geo_mean)).collect();
            let mask: Vec<bool> = curve.iter().map(|c| c.in_fit).collect();
            if let Some(row) = exponent_row(
                target,
                format!("N_D={n_d}"),
                n_d,
                &points,
                &mask,
                &mut warnings,
            ) {
                alpha_m.push(row);
            }
        }

        for (relation, rows) in [("alpha_D_vs_N_M", &alpha_d), ("alpha_M_vs_N_D", &alpha_m)] {
            if rows.len() < 2 {
                continue;
            }
            let points: Vec<(f64, f64)> = rows.iter().map(|r| (r.at as f64, r.alpha)).collect();
            match fit_log_linear(&points) {
                Ok(f) => report.log_fits.push(LogFitRow {
                    target: target.to_string(),
                    relation: relation.to_string(),
                    a: f.a,
                    a_err: f.a_err,
                    b: f.b,
                    b_err: f.b_err,
                    n_points: f.n_points,
                }),
                Err(e) => warnings.push(format!("{target} {relation}: no log fit ({e})")),
            }
        }
        report.alpha_d.extend(alpha_d);
        report.alpha_m.extend(alpha_m);
    }
    report.warnings.extend(warnings);
    Ok(report)
}

fn write_csv<T: Serialize>(path: &Path, rows: &[T], header: &[&str]) -> Result<(), HarnessError> {
    let mut w = csv::WriterBuilder::new()
        .has_headers(!rows.is_empty())
        .from_path(path)?;
    if rows.is_empty() {
        w.write_record(header)?;
    }
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

fn file_stem(s: &str) -> String {
    s.chars()
        .map(|c| if c.is_ascii_alphanumeric() { c } else { '_' })
        .collect()
}

/// Write tables, per-curve gnuplot data and a plotting stub into `out`.
pub fn write_report(report: &Report, out: &Path) -> Result<Vec<PathBuf>, HarnessError> {
    fs::create_dir_all(out)?;
    let mut written = Vec::new();
    let mut table = |name: &str, f: &dyn Fn(&Path) -> Result<(), HarnessError>| {
        let p = out.join(name);
        f(&p)?;
        written.push(p);
        Ok::<(), HarnessError>(())
    };
    table("cells.csv", &|p| write_csv(p, &report.cells, &["target"]))?;
    let exp_header = [
        "target",
        "curve",
        "at",
        "alpha",
        "alpha_err",
        "log_prefactor",
        "r_squared",
        "n_points",
    ];
    table("alpha_d.csv", &|p| {
        write_csv(p, &report.alpha_d, &exp_header)
    })?;
    table("alpha_m.csv", &|p| {
        write_csv(p, &report.alpha_m, &exp_header)
    })?;
    table("log_fits.csv", &|p| {
        write_csv(
            p,
            &report.log_fits,
            &["target", "relation", "a", "a_err", "b", "b_err", "n_points"],
        )
    })?;

    let mut plot = String::from(
        "set logscale xy\nset xlabel 'N_D'\nset ylabel 'geometric-mean test MSE'\nset key outside\n",
    );
    let mut series = Vec::new();
    for fit in &report.alpha_d {
        let name = format!(
            "curve_{}_{}.dat",
            file_stem(&fit.target),
            file_stem(&fit.curve)
        );
        let mut dat = format!(
            "# {} {}: alpha_D = {:.6} r2 = {:.6}\n# N_D geo_mean geo_se fit in_fit\n",
            fit.target, fit.curve, fit.alpha, fit.r_squared
        );
        for c in report
            .cells
            .iter()
            .filter(|c| c.target == fit.target && c.arch_id == fit.curve)
        {
            let line = (fit.log_prefactor - fit.alpha * (c.n_d as f64).ln()).exp();
            dat.push_str(&format!(
                "{} {:e} {:e} {:e} {}\n",
                c.n_d,
                c.geo_mean,
                c.geo_se,
                line,
                u8::from(c.in_fit)
            ));
        }
        fs::write(out.join(&name), dat)?;
        series.push(format!(
            "'{name}' using 1:2:3 with yerrorbars title '{} {}', '{name}' using 1:4 with lines notitle",
            fit.target, fit.curve
        ));
        written.push(out.join(&name));
    }
    if !series.is_empty() {
        plot.push_str("plot ");
        plot.push_str(&series.join(", \\\n     "));
        plot.push('\n');
    }
    fs::write(out.join("curves.gp"), plot)?;
    written.push(out.join("curves.gp"));
    if !report.warnings.is_empty() {
        fs::write(out.join("warnings.txt"), report.warnings.join("\n") + "\n")?;
        written.push(out.join("warnings.txt"));
    }
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn manifest() -> ExperimentManifest {
        ExperimentManifest {
            dataset: "data.sfdg".into(),
            target: Target::Exchange,
            architectures: vec![
                Architecture { n_l: 3, n_n: 4 },
                Architecture { n_l: 3, n_n: 16 },
            ],
            dataset_sizes: vec![256, 512, 1024],
            seeds_per_cell: 5,
            master_seed: 1,
            fit: FitRanges::default(),
            parallelism: None,
            training: TrainingOverrides::default(),
            base_dir: Some("/data".into()),
        }
    }

    #[test]
    fn grid_cardinality_and_order() {
        let m = manifest();
        let cells = m.cells();
        assert_eq!(cells.len(), 30);
        assert!(cells.windows(2).all(|w| w[0] < w[1]));
        assert_eq!(m.dataset_path(), PathBuf::from("/data/data.sfdg"));
    }

    #[test]
    fn hash_ignores_parallelism_only() {
        let m = manifest();
        let mut p = m.clone();
        p.parallelism = Some(3);
        p.base_dir = None;
        assert_eq!(m.hash(), p.hash());
        let mut s = m.clone();
        s.master_seed = 2;
        assert_ne!(m.hash(), s.hash());
    }

    #[test]
    fn manifest_validation() {
        let mut m = manifest();
        m.dataset_sizes.push(100);
        assert!(m.validate().is_err());
        let mut m = manifest();
        m.seeds_per_cell = 0;
        assert!(m.validate().is_err());
        let json = r#"{"dataset":"d","target":"theta","architectures":[{"n_l":1,"n_n":4}],
                       "dataset_sizes":[256],"master_seed":3}"#;
        let m: ExperimentManifest = serde_json::from_str(json).unwrap();
        assert_eq!(m.seeds_per_cell, 20);
        assert_eq!(m.target, Target::Theta);
    }

    #[test]
    fn split_and_training_seeds_are_distinct() {
        let m = manifest();
        let cells = m.cells();
        let split: HashSet<u64> = cells.iter().map(|c| m.split_seed(c)).collect();
        let train: HashSet<u64> = cells.iter().map(|c| m.train_seed(c)).collect();
        // splits are shared across architectures, training seeds are not
        assert_eq!(split.len(), 15);
        assert_eq!(train.len(), 30);
    }

    #[test]
    fn thread_caps() {
        let mut m = manifest();
        m.parallelism = Some(1);
        assert_eq!(effective_threads(&m, Some(8)), 1);
    }
}
