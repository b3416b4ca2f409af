use std::fs;
use std::path::{Path, PathBuf};

use advreg::dataset::*;
use advreg::sim::PhantomConfig;
use advreg::transform::AffineRanges;
use advreg::volume::Grid3;

fn tree(root: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(root).unwrap().to_path_buf(), fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

fn small_phantoms() -> PhantomConfig {
    PhantomConfig { grid_n: 16, spacing: 4.0, ..PhantomConfig::default() }
}

#[test]
fn phantom_datasets_are_bit_deterministic() {
    let t = tempfile::tempdir().unwrap();
    let cfg = small_phantoms();
    write_phantom_dataset(&t.path().join("a"), 3, 21, &cfg, false).unwrap();
    write_phantom_dataset(&t.path().join("b"), 3, 21, &cfg, false).unwrap();
    write_phantom_dataset(&t.path().join("c"), 3, 22, &cfg, false).unwrap();
    let a = tree(&t.path().join("a"));
    assert_eq!(a, tree(&t.path().join("b")));
    assert_ne!(a, tree(&t.path().join("c")));
    assert!(write_phantom_dataset(&t.path().join("a"), 3, 21, &cfg, false).is_err());

    let cases = load_cases(&t.path().join("a")).unwrap();
    assert_eq!(cases.len(), 3);
    assert!(cases.iter().all(|c| c.grid().shape() == [16; 3]));
}

#[test]
fn simulation_datasets_are_bit_deterministic() {
    let t = tempfile::tempdir().unwrap();
    let grid = Grid3::centered(16, 4.0).unwrap();
    let spec = SimSetSpec {
        patients: 2,
        per_patient: 2,
        seed: 5,
        surrogate: Default::default(),
        train_grid: grid,
        augment: AffineRanges::default_for(&grid),
    };
    let pool = fixed_gland_pool(&[], &grid, &spec.surrogate, 5);
    let sa = write_sim_dataset(&t.path().join("a"), &spec, &pool, false).unwrap();
    let sb = write_sim_dataset(&t.path().join("b"), &spec, &pool, false).unwrap();
    assert_eq!(sa, sb);
    assert_eq!(tree(&t.path().join("a")), tree(&t.path().join("b")));

    let (fields, stats) = load_sims(&t.path().join("a")).unwrap();
    let (mem, mem_stats) = build_sim_set(&spec, &pool).unwrap();
    assert_eq!(fields, mem);
    assert_eq!(stats, mem_stats);
}
