//! Acceptance criteria, one line per criterion.
//!
//! Runs as a plain binary (`harness = false`) so that the long experiments
//! execute once, sequentially, with their timings reported. Exits non-zero
//! if any criterion fails.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{Duration, Instant};

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use scaling_forge::datagen::{
    generate_dataset, hex_digest, DatasetManifest, GenerationConfig, Target,
};
use scaling_forge::harness::{
    build_report, run_grid, Architecture, ExperimentManifest, FitRanges, GridOptions, GridState,
    ResultsStore, TrainingOverrides, RESULTS_FILE,
};
use scaling_forge::lattice::{build_superlattice, CouplingProfile, Layer, MoireIndex};
use scaling_forge::mlp::{MlpModel, MlpSpec};
use scaling_forge::scalestats::{fit_log_linear, fit_power_law, spearman, summarize};
use scaling_forge::seeds;
use scaling_forge::spinsim::{
    effective_field, energy, ground_state, HamiltonianParams, SolverConfig, SpinConfig,
};

const MASTER_SEED: u64 = 0x5eed;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

fn run(id: &str, name: &str, budget: Duration, f: impl FnOnce() -> Outcome) -> bool {
    let start = Instant::now();
    let o = f();
    let took = start.elapsed();
    let in_time = took <= budget;
    let pass = o.pass && in_time;
    println!(
        "{id} {} {name}: {}; {:.3}s (budget {:.3}s{})",
        if pass { "PASS" } else { "FAIL" },
        o.detail,
        took.as_secs_f64(),
        budget.as_secs_f64(),
        if in_time { "" } else { ", exceeded" }
    );
    pass
}

fn c1_param_count() -> Outcome {
    let cases = [((3, 4), 80_049), ((3, 512), 10_766_337), ((3, 16), 320_577)];
    let mut ok = true;
    let mut got = Vec::new();
    for ((l, n), want) in cases {
        let count = MlpSpec::images(l, n).unwrap().param_count();
        ok &= count == want;
        got.push(format!("({l},{n})={count}"));
    }
    outcome(ok, got.join(" "))
}

fn c2_power_law() -> Outcome {
    let sizes: Vec<f64> = (0..10)
        .map(|k| 256.0 * 2f64.powf(k as f64 * 0.75))
        .collect();
    let mut worst = 0.0f64;
    for alpha in [0.8, 1.5, 2.3] {
        let pts: Vec<(f64, f64)> = sizes.iter().map(|&n| (n, 10.0 * n.powf(-alpha))).collect();
        let f = fit_power_law(&pts, None).unwrap();
        worst = worst.max((f.alpha - alpha).abs());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(MASTER_SEED);
    let trials = 200;
    let mut covered = 0;
    for _ in 0..trials {
        let pts: Vec<(f64, f64)> = sizes
            .iter()
            .map(|&n| {
                let z: f64 = rng.sample(StandardNormal);
                (n, 10.0 * n.powf(-1.5) * (0.1 * z).exp())
            })
            .collect();
        let f = fit_power_law(&pts, None).unwrap();
        if (f.alpha - 1.5).abs() <= 3.0 * f.alpha_err.unwrap() {
            covered += 1;
        }
    }
    let coverage = covered as f64 / trials as f64;
    outcome(
        worst < 1e-10 && coverage >= 0.99,
        format!("noiseless max |dα| = {worst:.1e} (tol 1e-10); 3σ coverage {covered}/{trials} = {coverage:.3} (need ≥ 0.99)"),
    )
}

fn c3_log_linear() -> Outcome {
    let n_d: Vec<f64> = (0..8).map(|k| 224.0 * 2f64.powi(k)).collect();
    let n_m: Vec<f64> = [4, 8, 16, 32, 64, 128, 256, 512]
        .iter()
        .map(|&n| MlpSpec::images(3, n).unwrap().param_count() as f64)
        .collect();
    let mut worst = 0.0f64;
    for (xs, a, b) in [(&n_d, 0.151, -0.59), (&n_m, 0.184, -1.17)] {
        let pts: Vec<(f64, f64)> = xs.iter().map(|&n| (n, a * n.ln() + b)).collect();
        let f = fit_log_linear(&pts).unwrap();
        worst = worst.max((f.a - a).abs()).max((f.b - b).abs());
    }
    outcome(
        worst < 1e-12,
        format!("max coefficient error {worst:.1e} (tol 1e-12)"),
    )
}

fn c4_geomean() -> Outcome {
    let mut losses = vec![1.0; 19];
    losses.push(100.0);
    let r = summarize(&losses).unwrap();
    let geo_err = (r.geo.value - 100f64.powf(1.0 / 20.0)).abs();
    let arith_err = (r.arith.value - 5.95).abs();
    outcome(
        geo_err < 1e-9 && arith_err < 1e-9,
        format!(
            "geo {:.12} (err {geo_err:.1e}), arith {:.12} (err {arith_err:.1e}), tol 1e-9",
            r.geo.value, r.arith.value
        ),
    )
}

fn c5_spin_oracle() -> Outcome {
    let m = MoireIndex::new(8).unwrap();
    let bilayer = build_superlattice(m, &CouplingProfile::decoupled()).unwrap();
    let g = bilayer.single_layer(Layer::Top);
    let p = HamiltonianParams {
        exchange: 2.0,
        anisotropy: 0.2,
    };
    let n = g.site_count();
    let exact = -p.exchange * g.intra_bonds.len() as f64 - p.anisotropy * n as f64;
    let runs = 20;
    let mut hits = 0;
    let mut worst = 0.0f64;
    for k in 0..runs {
        let cfg = SolverConfig::for_system(&p, n, seeds::derive(MASTER_SEED, k));
        let gs = ground_state(&g, &p, &cfg).unwrap();
        let mz = gs.config.mean_sz(0..n).abs();
        let rel = ((gs.energy - exact) / exact).abs();
        worst = worst.max(rel);
        if mz > 0.999 && rel < 1e-3 {
            hits += 1;
        }
    }
    outcome(
        hits * 100 >= 95 * runs,
        format!("{hits}/{runs} runs ferromagnetic at E0 = {exact} meV (worst rel. energy error {worst:.1e})"),
    )
}

fn c6_gradients() -> Outcome {
    // network: analytic vs central differences in double precision
    let spec = MlpSpec::new(50, 2, 8).unwrap();
    let model = MlpModel::<f64>::init(spec, MASTER_SEED).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(MASTER_SEED);
    let rows: Vec<Vec<f64>> = (0..6)
        .map(|_| (0..50).map(|_| rng.sample(StandardNormal)).collect())
        .collect();
    let xs: Vec<&[f64]> = rows.iter().map(|r| r.as_slice()).collect();
    let ys: Vec<f64> = (0..6).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let (_, grad) = model.loss_and_grad(&xs, &ys).unwrap();
    let h = 1e-6;
    let mut mlp_worst = 0.0f64;
    for k in 0..grad.len() {
        let mut plus = model.clone();
        plus.params_mut()[k] += h;
        let mut minus = model.clone();
        minus.params_mut()[k] -= h;
        let fd = (plus.loss_and_grad(&xs, &ys).unwrap().0
            - minus.loss_and_grad(&xs, &ys).unwrap().0)
            / (2.0 * h);
        let rel = (fd - grad[k]).abs() / fd.abs().max(grad[k].abs()).max(1e-6);
        mlp_worst = mlp_worst.max(rel);
    }

    // spins: the tangential field equals minus the derivative of E along rotations
    let g = build_superlattice(MoireIndex::new(3).unwrap(), &CouplingProfile::default()).unwrap();
    let p = HamiltonianParams {
        exchange: 3.0,
        anisotropy: 0.25,
    };
    let s = SpinConfig::random(g.site_count(), &mut rng);
    let step = 1e-4;
    let mut spin_worst = 0.0f64;
    for i in (0..g.site_count()).step_by(7) {
        let si = s.spins()[i];
        let h_i = effective_field(&g, &p, &s, i).unwrap();
        let helper = if si[0].abs() < 0.9 {
            [1.0, 0.0, 0.0]
        } else {
            [0.0, 1.0, 0.0]
        };
        let t1 = unit(cross(si, helper));
        let t2 = cross(si, t1);
        let (mut analytic, mut numeric) = ([0.0; 2], [0.0; 2]);
        for (k, t) in [t1, t2].into_iter().enumerate() {
            let rotated = |eps: f64| {
                let mut c = s.clone();
                c.set(
                    i,
                    std::array::from_fn(|a| eps.cos() * si[a] + eps.sin() * t[a]),
                );
                energy(&g, &p, &c).unwrap()
            };
            numeric[k] = -(rotated(step) - rotated(-step)) / (2.0 * step);
            analytic[k] = (0..3).map(|a| h_i[a] * t[a]).sum();
        }
        let diff = ((numeric[0] - analytic[0]).powi(2) + (numeric[1] - analytic[1]).powi(2)).sqrt();
        let scale = (analytic[0].powi(2) + analytic[1].powi(2)).sqrt();
        spin_worst = spin_worst.max(diff / scale);
    }
    outcome(
        mlp_worst < 1e-4 && spin_worst < 1e-5,
        format!("MLP worst rel {mlp_worst:.1e} (tol 1e-4); effective field worst rel {spin_worst:.1e} (tol 1e-5)"),
    )
}

fn cross(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

fn unit(v: [f64; 3]) -> [f64; 3] {
    let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
    [v[0] / n, v[1] / n, v[2] / n]
}

fn work_dir() -> PathBuf {
    let dir = Path::new(env!("CARGO_TARGET_TMPDIR")).join("acceptance");
    fs::create_dir_all(&dir).unwrap();
    dir
}

/// The m = 8 corpus, regenerated unless a cached copy matches its manifest.
fn corpus() -> PathBuf {
    let cfg = GenerationConfig::at_index(2400, MASTER_SEED, MoireIndex::new(8).unwrap());
    let path = work_dir().join("m8_2400.sfdg");
    let cached = fs::read_to_string(DatasetManifest::path_for(&path))
        .ok()
        .and_then(|s| serde_json::from_str::<DatasetManifest>(&s).ok())
        .filter(|m| m.config == cfg)
        .filter(|m| fs::read(&path).is_ok_and(|b| hex_digest(&b) == m.data_sha256));
    if cached.is_none() {
        let start = Instant::now();
        let (_, m) = generate_dataset(&cfg, &path).unwrap();
        eprintln!(
            "   generated {} records in {:.0}s ({} draws, {} FM excluded, {} unconverged)",
            m.record_count,
            start.elapsed().as_secs_f64(),
            m.draws,
            m.fm_excluded,
            m.nonconverged_dropped
        );
    }
    path
}

fn fresh_dir(name: &str) -> PathBuf {
    let dir = work_dir().join(name);
    if dir.exists() {
        fs::remove_dir_all(&dir).unwrap();
    }
    dir
}

fn c7_scaling(data: &Path) -> Outcome {
    let sizes = vec![128, 256, 512, 1024, 2048];
    let manifest = ExperimentManifest {
        dataset: data.to_path_buf(),
        target: Target::Exchange,
        architectures: vec![
            Architecture { n_l: 3, n_n: 4 },
            Architecture { n_l: 3, n_n: 16 },
        ],
        dataset_sizes: sizes.clone(),
        seeds_per_cell: 5,
        master_seed: MASTER_SEED,
        fit: FitRanges::default(),
        parallelism: None,
        training: TrainingOverrides::default(),
        base_dir: None,
    };
    let store = fresh_dir("c7_store");
    let status = run_grid(&manifest, &store, &GridOptions::default()).unwrap();
    if status.state != GridState::Complete {
        return outcome(false, format!("grid incomplete: {status:?}"));
    }
    let records = ResultsStore::load(&store).unwrap().records;
    let report = build_report(&records, &manifest.fit).unwrap();
    let mut pass = true;
    let mut parts = Vec::new();
    let mut alphas = Vec::new();
    for arch in ["l3n4", "l3n16"] {
        let cells: Vec<_> = report.cells.iter().filter(|c| c.arch_id == arch).collect();
        let n: Vec<f64> = cells.iter().map(|c| c.n_d as f64).collect();
        let geo: Vec<f64> = cells.iter().map(|c| c.geo_mean).collect();
        let rho = spearman(&n, &geo).unwrap();
        let fit = report.alpha_d.iter().find(|r| r.curve == arch).unwrap();
        let sigma = fit.alpha_err.unwrap();
        pass &= rho <= -0.9 && fit.alpha > 0.0 && fit.alpha > 2.0 * sigma;
        parts.push(format!(
            "{arch}: geo [{}] rho {rho:.2} alpha {:.3}±{sigma:.3}",
            geo.iter()
                .map(|g| format!("{g:.2e}"))
                .collect::<Vec<_>>()
                .join(" "),
            fit.alpha
        ));
        alphas.push((fit.alpha, sigma));
    }
    let trend = alphas[1].0 >= alphas[0].0 - alphas[1].1.max(alphas[0].1);
    pass &= trend;
    parts.push(format!("alpha16 ≥ alpha4 − σ: {trend}"));
    outcome(pass, parts.join("; "))
}

fn c8_determinism(data: &Path) -> Outcome {
    let manifest = ExperimentManifest {
        dataset: data.to_path_buf(),
        target: Target::Exchange,
        architectures: vec![
            Architecture { n_l: 1, n_n: 4 },
            Architecture { n_l: 2, n_n: 8 },
        ],
        dataset_sizes: vec![64, 128],
        seeds_per_cell: 3,
        master_seed: MASTER_SEED,
        fit: FitRanges::default(),
        parallelism: Some(1),
        training: TrainingOverrides::default(),
        base_dir: None,
    };
    let mut files = Vec::new();
    for run in ["c8_a", "c8_b"] {
        let dir = fresh_dir(run);
        let status = run_grid(&manifest, &dir, &GridOptions::default()).unwrap();
        if status.state != GridState::Complete {
            return outcome(false, format!("grid incomplete: {status:?}"));
        }
        files.push(fs::read(dir.join(RESULTS_FILE)).unwrap());
    }
    let rows = files[0].iter().filter(|&&b| b == b'\n').count() - 1;
    outcome(
        files[0] == files[1] && rows == 12,
        format!(
            "{rows} rows, sha256 {} vs {}",
            &hex_digest(&files[0])[..16],
            &hex_digest(&files[1])[..16]
        ),
    )
}

fn main() -> ExitCode {
    let mut all = true;
    all &= run(
        "C1",
        "parameter count",
        Duration::from_millis(1),
        c1_param_count,
    );
    all &= run(
        "C2",
        "power-law fit oracle",
        Duration::from_secs(5),
        c2_power_law,
    );
    all &= run(
        "C3",
        "log-linear fit oracle",
        Duration::from_secs(1),
        c3_log_linear,
    );
    all &= run(
        "C4",
        "geometric-mean robustness",
        Duration::from_millis(1),
        c4_geomean,
    );
    all &= run(
        "C5",
        "spin-physics oracle",
        Duration::from_secs(120),
        c5_spin_oracle,
    );
    all &= run(
        "C6",
        "gradient checks",
        Duration::from_secs(30),
        c6_gradients,
    );
    let data = std::cell::OnceCell::new();
    all &= run(
        "C7",
        "desk-scale scaling experiment",
        Duration::from_secs(7200),
        || c7_scaling(data.get_or_init(corpus)),
    );
    all &= run(
        "C8",
        "end-to-end determinism",
        Duration::from_secs(1200),
        || c8_determinism(data.get_or_init(corpus)),
    );
    if all {
        println!("acceptance: all criteria passed");
        ExitCode::SUCCESS
    } else {
        println!("acceptance: some criteria FAILED");
        ExitCode::FAILURE
    }
}
