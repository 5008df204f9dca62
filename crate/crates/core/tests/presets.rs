use std::path::Path;

use spatial_causal::experiment::ExperimentConfig;

#[test]
fn every_preset_loads_and_validates() {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    let mut seen = 0;
    for entry in std::fs::read_dir(&dir).unwrap() {
        let path = entry.unwrap().path();
        if path.extension().is_some_and(|e| e == "toml") {
            let cfg = ExperimentConfig::load(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
            cfg.validate().unwrap();
            assert_eq!(cfg.hash().len(), 64);
            seen += 1;
        }
    }
    assert!(seen >= 6, "{seen} presets");
}

#[test]
fn full_scale_widens_grid_patches() {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    let text = std::fs::read_to_string(dir.join("grid_cnn_mlp.toml")).unwrap();
    let small = ExperimentConfig::from_toml(&text).unwrap();
    let full = ExperimentConfig::from_toml(&text.replace("full_scale = false", "full_scale = true")).unwrap();
    assert!(full.data.grid.d_s > small.data.grid.d_s);
    assert_eq!(full.data.grid.d_s, 51);
    assert_ne!(full.hash(), small.hash());
}
