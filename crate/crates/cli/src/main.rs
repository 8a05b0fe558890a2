use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};

use scaling_forge::datagen::{
    apply_standardization, carve_test_split, generate_dataset, make_split, read_dataset,
    GenerationConfig, PixelStats, SplitSpec, Target,
};
use scaling_forge::harness::{
    append_external, build_report, ingest_external, run_grid, write_report, ExperimentManifest,
    FitRanges, GridOptions, GridState, ResultsStore, THREADS_ENV,
};
use scaling_forge::lattice::{CouplingProfile, MoireIndex};
use scaling_forge::mlp::{train, MlpSpec, Samples, TrainConfig};

const EXIT_PARTIAL: u8 = 2;

#[derive(Parser)]
#[command(
    name = "scaling-forge",
    version,
    about = "Magnetic-domain datasets and neural scaling-law grids"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate ground states and write a labeled image dataset.
    Generate {
        #[arg(long)]
        count: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Moiré index or inclusive range, e.g. `8` or `8..32`.
        #[arg(long, default_value = "8")]
        m_range: String,
        #[arg(long)]
        out: PathBuf,
        /// Interlayer coupling strength (meV).
        #[arg(long, default_value_t = 1.0)]
        j_perp_scale: f64,
        /// Worker threads (results do not depend on this).
        #[arg(long, env = THREADS_ENV)]
        threads: Option<usize>,
    },
    /// Run (or resume) a training grid described by a manifest.
    Grid {
        #[arg(long)]
        manifest: PathBuf,
        /// Results store directory.
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        threads: Option<usize>,
        /// Stop after this many pending cells.
        #[arg(long)]
        max_cells: Option<usize>,
    },
    /// Merge loss records produced by an external pipeline into a store.
    Ingest {
        #[arg(long)]
        store: PathBuf,
        #[arg(long)]
        csv: PathBuf,
    },
    /// Summaries, exponent tables and plot data from a results store.
    Report {
        #[arg(long)]
        store: PathBuf,
        /// Manifest supplying fit ranges; defaults to the store's copy.
        #[arg(long)]
        manifest: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train one network and print its training report as JSON.
    Train {
        /// Hidden layers and width, e.g. `3,16`.
        #[arg(long)]
        spec: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "J")]
        target: Target,
        /// Records drawn for train + validation; defaults to the whole pool.
        #[arg(long)]
        n_total: Option<usize>,
        #[arg(long)]
        max_epochs: Option<usize>,
        /// Write the best-validation weights here.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
}

fn parse_m_range(s: &str) -> Result<Vec<MoireIndex>> {
    let (lo, hi) = match s.split_once("..") {
        Some((a, b)) => (
            a.trim().parse::<u32>()?,
            b.trim_start_matches('=').trim().parse::<u32>()?,
        ),
        None => {
            let m = s.trim().parse::<u32>()?;
            (m, m)
        }
    };
    if lo > hi {
        bail!("empty moiré index range {s}");
    }
    (lo..=hi)
        .map(|m| MoireIndex::new(m).map_err(Into::into))
        .collect()
}

fn parse_spec(s: &str) -> Result<(usize, usize)> {
    let (l, n) = s
        .split_once(',')
        .with_context(|| format!("expected n_l,n_n, got {s:?}"))?;
    Ok((l.trim().parse()?, n.trim().parse()?))
}

fn run(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Command::Generate {
            count,
            seed,
            m_range,
            out,
            j_perp_scale,
            threads,
        } => {
            if let Some(n) = threads {
                rayon::ThreadPoolBuilder::new()
                    .num_threads(n)
                    .build_global()
                    .ok();
            }
            let cfg = GenerationConfig {
                m_choices: parse_m_range(&m_range)?,
                profile: CouplingProfile {
                    j_perp_scale,
                    ..CouplingProfile::default()
                },
                ..GenerationConfig::at_index(count, seed, MoireIndex::new(8)?)
            };
            let (_, manifest) = generate_dataset(&cfg, &out)?;
            eprintln!(
                "wrote {} records to {} ({} draws, {} FM excluded, {} unconverged dropped)",
                manifest.record_count,
                out.display(),
                manifest.draws,
                manifest.fm_excluded,
                manifest.nonconverged_dropped
            );
            Ok(ExitCode::SUCCESS)
        }
        Command::Grid {
            manifest,
            out,
            threads,
            max_cells,
        } => {
            let m = ExperimentManifest::load(&manifest)
                .with_context(|| format!("loading {}", manifest.display()))?;
            let status = run_grid(&m, &out, &GridOptions { threads, max_cells })
                .with_context(|| format!("grid over {}", m.dataset_path().display()))?;
            println!("{}", serde_json::to_string_pretty(&status)?);
            Ok(match status.state {
                GridState::Complete => ExitCode::SUCCESS,
                GridState::Partial => ExitCode::from(EXIT_PARTIAL),
            })
        }
        Command::Ingest { store, csv } => {
            let existing = ResultsStore::load(&store)?;
            let report = ingest_external(&csv, &existing)?;
            append_external(&store, &report.accepted)?;
            for r in &report.rejected {
                eprintln!("{}:{}: {}", csv.display(), r.line, r.reason);
            }
            eprintln!(
                "ingested {} records, rejected {}",
                report.accepted.len(),
                report.rejected.len()
            );
            Ok(if report.rejected.is_empty() {
                ExitCode::SUCCESS
            } else {
                ExitCode::from(EXIT_PARTIAL)
            })
        }
        Command::Report {
            store,
            manifest,
            out,
        } => {
            let manifest_path = manifest.unwrap_or_else(|| store.join("manifest.json"));
            let fit = if manifest_path.exists() {
                ExperimentManifest::load(&manifest_path)?.fit
            } else {
                FitRanges::default()
            };
            let records = ResultsStore::load(&store)?.records;
            let report = build_report(&records, &fit)?;
            for w in &report.warnings {
                log::warn!("{w}");
            }
            for path in write_report(&report, &out)? {
                println!("{}", path.display());
            }
            Ok(ExitCode::SUCCESS)
        }
        Command::Train {
            spec,
            seed,
            data,
            target,
            n_total,
            max_epochs,
            checkpoint,
        } => {
            let (n_l, n_n) = parse_spec(&spec)?;
            let mut dataset =
                read_dataset(&data).with_context(|| format!("reading {}", data.display()))?;
            let split = carve_test_split(dataset.len(), seed);
            let stats = PixelStats::compute(split.pool.iter().map(|&i| &dataset.records[i]))?;
            apply_standardization(&mut dataset, &stats)?;
            let n_total = n_total.unwrap_or(split.pool.len() / 8 * 8);
            let (train_ids, val_ids) = make_split(&split.pool, &SplitSpec { n_total, seed })?;
            let samples = |ids: &[usize]| Samples {
                inputs: ids
                    .iter()
                    .map(|&i| dataset.records[i].pixels.as_slice())
                    .collect(),
                targets: ids
                    .iter()
                    .map(|&i| target.normalized(&dataset.records[i].labels))
                    .collect(),
            };
            let mut cfg = TrainConfig {
                seed,
                ..TrainConfig::default()
            };
            if let Some(e) = max_epochs {
                cfg.max_epochs = e;
            }
            let spec = MlpSpec::new(scaling_forge::datagen::FEATURES, n_l, n_n)?;
            let (model, report) = train(
                spec,
                &samples(&train_ids),
                &samples(&val_ids),
                Some(&samples(&split.test)),
                &cfg,
            )?;
            if let Some(path) = checkpoint {
                model.save(&path)?;
            }
            println!("{}", serde_json::to_string_pretty(&report)?);
            Ok(ExitCode::SUCCESS)
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
