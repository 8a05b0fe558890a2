use scaling_forge::datagen::{
    generate_dataset, is_ferromagnetic, read_dataset, DataError, DatasetManifest, GenerationConfig,
    ParamRanges, ParamSampler, HEADER_BYTES, RECORD_BYTES,
};
use scaling_forge::lattice::{build_superlattice, CouplingProfile, MoireIndex};
use scaling_forge::seeds;
use scaling_forge::spinsim::{ground_state, SolverSettings};

fn m8() -> MoireIndex {
    MoireIndex::new(8).unwrap()
}

#[test]
fn generation_meets_count_and_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = GenerationConfig::at_index(100, 2024, m8());
    let a = dir.path().join("a.sfdg");
    let b = dir.path().join("b.sfdg");
    let (ds, manifest) = generate_dataset(&cfg, &a).unwrap();
    assert_eq!(ds.len(), 100);
    assert_eq!(manifest.record_count, 100);
    assert_eq!(
        manifest.draws,
        100 + manifest.fm_excluded + manifest.nonconverged_dropped
    );
    assert!(manifest.pixel_stats.std > 0.0);
    assert_eq!(
        std::fs::metadata(&a).unwrap().len() as usize,
        HEADER_BYTES + 100 * RECORD_BYTES
    );
    assert_eq!(read_dataset(&a).unwrap(), ds);

    let mut threaded = cfg.clone();
    threaded.batch = 7;
    generate_dataset(&threaded, &b).unwrap();
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    let ma = std::fs::read(DatasetManifest::path_for(&a)).unwrap();
    let mb = std::fs::read(DatasetManifest::path_for(&b)).unwrap();
    assert_eq!(ma, mb);
}

#[test]
fn weak_frustration_and_strong_anisotropy_favour_ferromagnets() {
    let ranges = ParamRanges {
        anisotropy: (0.25, 0.3),
        ..ParamRanges::default()
    };
    let draws: Vec<_> = ParamSampler::new(11, &[m8()], &ranges)
        .unwrap()
        .take(12)
        .collect();
    let settings = SolverSettings::default();
    let fm_fraction = |profile: CouplingProfile| {
        let g = build_superlattice(m8(), &profile).unwrap();
        let fm = draws
            .iter()
            .enumerate()
            .filter(|(k, d)| {
                let params = d.hamiltonian();
                let cfg = settings.config(&params, g.site_count(), seeds::derive(11, *k as u64));
                let gs = ground_state(&g, &params, &cfg).unwrap();
                is_ferromagnetic(&g, &gs.config)
            })
            .count();
        fm as f64 / draws.len() as f64
    };
    let weak = fm_fraction(CouplingProfile {
        j_perp_scale: 0.05,
        ..CouplingProfile::default()
    });
    let strong = fm_fraction(CouplingProfile::default());
    assert!(weak > strong, "weak {weak} strong {strong}");
    assert!(weak > 0.5);
}

#[test]
fn draw_budget_is_enforced() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = GenerationConfig::at_index(5, 1, m8());
    cfg.profile.j_perp_scale = 0.0;
    cfg.ranges.anisotropy = (0.25, 0.3);
    cfg.max_draws = Some(8);
    cfg.batch = 4;
    match generate_dataset(&cfg, &dir.path().join("x.sfdg")) {
        Err(DataError::DrawBudgetExhausted { draws, .. }) => assert_eq!(draws, 8),
        other => panic!(
            "expected budget error, got {:?}",
            other.map(|(d, _)| d.len())
        ),
    }
}
