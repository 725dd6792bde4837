use nlperim::experiments::{self, ExperimentConfig, ExperimentId};
use nlperim::grid::{load_set, save_set};
use nlperim::gridgeom::best_halfspace_fit;
use nlperim::mincut::minimize;
use nlperim::stability::flatness_certificate;
use nlperim::{build_weights, DomainMask, Grid, GridSet, KernelSpec};

fn scratch_dir(name: &str) -> std::path::PathBuf {
    let d = std::env::temp_dir().join(format!("nlperim-{name}-{}", std::process::id()));
    std::fs::create_dir_all(&d).unwrap();
    d
}

#[test]
fn full_exterior_gives_full_minimizer() {
    let g = Grid::cube(2, 24, 1.0 / 12.0).unwrap();
    let k = KernelSpec::fractional(2, 0.5).build().unwrap();
    let w = build_weights(&k, &[24, 24], g.h, 6.0).unwrap();
    let res = minimize(&DomainMask::ball(GridSet::full(&g), &[0.0, 0.0], 0.8), &w).unwrap();
    assert_eq!(res.e_min, GridSet::full(&g));
    assert_eq!(res.energy, 0.0);
}

#[test]
fn halfplane_data_gives_a_flat_minimizer() {
    let g = Grid::cube(2, 40, 1.0 / 16.0).unwrap();
    let k = KernelSpec::fractional(2, 0.5).build().unwrap();
    let w = build_weights(&k, &[40, 40], g.h, 8.0).unwrap();
    let data = GridSet::halfspace(&g, &[0.0, 1.0], 0.0);
    let res = minimize(&DomainMask::ball(data.clone(), &[0.0, 0.0], 1.0), &w).unwrap();
    assert_eq!(res.e_min, data);
    let b1 = DomainMask::ball(GridSet::empty(&g), &[0.0, 0.0], 0.9);
    assert_eq!(best_halfspace_fit(&res.e_min, &b1, 90).unwrap().symdiff, 0.0);
    let cert = flatness_certificate(&res.e_min, &b1, 90).unwrap();
    assert_eq!(cert.symdiff, 0.0);
}

#[test]
fn minimizer_survives_a_file_round_trip() {
    let g = Grid::cube(2, 20, 0.1).unwrap();
    let e = GridSet::ball(&g, &[0.2, -0.1], 0.6);
    let dir = scratch_dir("roundtrip");
    save_set(&e, &dir.join("blob")).unwrap();
    let back = load_set(&dir.join("blob.pbm")).unwrap();
    assert_eq!(back, e);
    assert_eq!(back.grid, e.grid);
    std::fs::remove_dir_all(dir).ok();
}

#[test]
fn experiment_writes_manifest_with_hashes() {
    let mut c = ExperimentConfig::default_for(ExperimentId::Bitmap);
    c.rhos = vec![1.0 / 16.0, 1.0 / 32.0, 1.0 / 64.0, 1.0 / 128.0];
    let out = experiments::run(&c).unwrap();
    let dir = scratch_dir("manifest");
    let files = experiments::write_outputs(&dir, &c, &out).unwrap();
    assert_eq!(files.len(), 3);
    let m: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&files[2]).unwrap()).unwrap();
    assert_eq!(m["config_sha256"].as_str().unwrap().len(), 64);
    assert!(m["files"]["bitmap.csv"].is_string());
    assert_eq!(std::fs::read_to_string(&files[0]).unwrap(), out.csv);
    std::fs::remove_dir_all(dir).ok();
}

#[test]
fn config_json_round_trips() {
    for id in ExperimentId::ALL {
        let c = ExperimentConfig::default_for(id);
        c.validate().unwrap();
        let back: ExperimentConfig = serde_json::from_str(&serde_json::to_string(&c).unwrap()).unwrap();
        assert_eq!(back, c);
    }
}
