use proptest::prelude::*;
use spatial_causal::dataset::SpatialDataset;
use spatial_causal::effects::{
    balancing_weights, draw_neighbourhoods, effect_error, estimate_effects_dose, estimate_effects_observed, fit_gps,
    marginal_density, treatment_grid, MarginalDensity,
};
use spatial_causal::gp::{InducingSet, KernelSpec, NystromMap};
use spatial_causal::model::{build_model, ConfounderKind, Geometry, InterferenceKind, ModelConfig};
use spatial_causal::par::Exec;
use spatial_causal::raster::{self, split_indices, split_sizes, Grid, Manifest};
use spatial_causal::tensor::{finite_diff_check, Tensor};

fn dataset(t: Vec<f64>, x: Vec<f64>) -> SpatialDataset {
    let n = t.len();
    let mut patches = Vec::with_capacity(3 * n);
    for i in 0..n {
        patches.push(if i > 0 { t[i - 1] } else { 0.0 });
        patches.push(0.0);
        patches.push(if i + 1 < n { t[i + 1] } else { 0.0 });
    }
    SpatialDataset {
        coord_dim: 1,
        coords: (0..n).map(|i| i as f64 / (n - 1) as f64).collect(),
        m: 1,
        t,
        patch_rows: 1,
        patch_cols: 3,
        patches: vec![patches],
        x_dim: 1,
        x,
        y: vec![None; n],
        treatment_names: vec!["t".into()],
        cells: None,
    }
}

fn units() -> impl Strategy<Value = (Vec<f64>, Vec<f64>)> {
    (6usize..30).prop_flat_map(|n| (prop::collection::vec(-2.0..2.0f64, n), prop::collection::vec(-1.0..1.0f64, n)))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn grid_round_trip_is_bit_exact(
        rows in 1usize..6,
        cols in 1usize..6,
        channels in 1usize..3,
        seed in any::<u64>(),
        origin in -1e3..1e3f64,
        res in 1e-3..10.0f64,
    ) {
        let n = rows * cols * channels;
        let data: Vec<f64> = (0..n as u64)
            .map(|k| f64::from_bits(seed.wrapping_mul(6364136223846793005).wrapping_add(k.wrapping_mul(1442695040888963407))))
            .collect();
        let geom = raster::Geometry { rows, cols, origin_x: origin, origin_y: -origin, resolution: res };
        let g = Grid::new(geom, channels, data).unwrap();
        let back = Grid::from_bytes(&g.to_bytes().unwrap()).unwrap();
        prop_assert_eq!(back.geometry(), g.geometry());
        let bits = |g: &Grid| g.data.iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        prop_assert_eq!(bits(&back), bits(&g));
    }

    #[test]
    fn truncated_grids_are_rejected(cut in 1usize..40) {
        let geom = raster::Geometry { rows: 2, cols: 2, origin_x: 0.0, origin_y: 0.0, resolution: 1.0 };
        let bytes = Grid::filled(geom, 1, 1.5).unwrap().to_bytes().unwrap();
        let cut = cut.min(bytes.len() - 1);
        let err = Grid::from_bytes(&bytes[..bytes.len() - cut]).unwrap_err();
        prop_assert_eq!(err.code(), "format");
    }

    #[test]
    fn splits_partition_units(n in 5usize..400, seed in any::<u64>()) {
        let r = [0.6, 0.2, 0.2];
        let sizes = split_sizes(n, &r).unwrap();
        prop_assert_eq!(sizes.iter().sum::<usize>(), n);
        prop_assert!(sizes.iter().all(|&s| s >= 1));
        let parts = split_indices(n, &r, seed).unwrap();
        let mut all: Vec<usize> = parts.iter().flatten().copied().collect();
        all.sort_unstable();
        prop_assert_eq!(all, (0..n).collect::<Vec<_>>());
        if n % 5 == 0 {
            prop_assert_eq!(sizes, [3 * n / 5, n / 5, n / 5]);
        }
    }

    #[test]
    fn normalized_weights_average_one((t, x) in units()) {
        let ds = dataset(t, x);
        let w = balancing_weights(&ds, 0, &fit_gps(&ds, 0).unwrap(), &marginal_density(&ds, 0).unwrap(), Exec::Sequential).unwrap();
        let mean = w.normalized.iter().sum::<f64>() / ds.n() as f64;
        prop_assert!((mean - 1.0).abs() < 1e-9);
        prop_assert!(w.raw.iter().all(|v| *v > 0.0 && v.is_finite()));
    }

    #[test]
    fn kde_integrates_to_one(samples in prop::collection::vec(-5.0..5.0f64, 2..60)) {
        prop_assume!(samples.iter().any(|v| *v != samples[0]));
        let md = MarginalDensity::fit(samples.clone()).unwrap();
        let lo = samples.iter().copied().fold(f64::INFINITY, f64::min) - 10.0 * md.bandwidth;
        let hi = samples.iter().copied().fold(f64::NEG_INFINITY, f64::max) + 10.0 * md.bandwidth;
        let steps = 4000;
        let h = (hi - lo) / steps as f64;
        let integral: f64 = (0..steps).map(|k| md.density(lo + (k as f64 + 0.5) * h)).sum::<f64>() * h;
        prop_assert!((integral - 1.0).abs() < 0.01, "{}", integral);
    }

    #[test]
    fn effects_are_additive((t, x) in units(), seed in 0u64..1000, weighted in any::<bool>()) {
        let ds = dataset(t, x);
        let mc = ModelConfig {
            interference: InterferenceKind::Mlp { width: 5, depth: 2 },
            confounder: ConfounderKind::Linear,
            gp: None,
        };
        let model = build_model(&mc, Geometry::of(&ds), &ds.coords, seed).unwrap();
        let w = balancing_weights(&ds, 0, &fit_gps(&ds, 0).unwrap(), &marginal_density(&ds, 0).unwrap(), Exec::Sequential).unwrap();
        let w = weighted.then_some(&w);
        let o = estimate_effects_observed(&model, &ds, 0, w, Exec::Sequential).unwrap();
        prop_assert!((o.te - o.de[0] - o.ie[0]).abs() < 1e-9);
        let grid = treatment_grid(&ds, 0, 7).unwrap();
        let draws = draw_neighbourhoods(ds.n(), 6, seed);
        let d = estimate_effects_dose(&model, &ds, 0, w, &grid, &draws, Exec::Sequential).unwrap();
        prop_assert!((d.te - d.de_mean() - d.ie_mean()).abs() < 1e-9);
        let e = effect_error(&d, &d).unwrap();
        prop_assert_eq!((e.de, e.ie, e.te), (0.0, 0.0, 0.0));
    }

    #[test]
    fn parallel_and_sequential_estimates_agree((t, x) in units(), seed in 0u64..1000) {
        let ds = dataset(t, x);
        let mc = ModelConfig {
            interference: InterferenceKind::Mlp { width: 4, depth: 1 },
            confounder: ConfounderKind::Mlp { width: 4, depth: 1 },
            gp: None,
        };
        let model = build_model(&mc, Geometry::of(&ds), &ds.coords, seed).unwrap();
        let grid = treatment_grid(&ds, 0, 5).unwrap();
        let draws = draw_neighbourhoods(ds.n(), 4, seed);
        let a = estimate_effects_dose(&model, &ds, 0, None, &grid, &draws, Exec::Sequential).unwrap();
        let b = estimate_effects_dose(&model, &ds, 0, None, &grid, &draws, Exec::Parallel).unwrap();
        prop_assert_eq!(a, b);
        prop_assert_eq!(model.predict_all(&ds, Exec::Sequential).unwrap(), model.predict_all(&ds, Exec::Parallel).unwrap());
    }

    #[test]
    fn nested_inducing_sets_shrink_the_residual_trace(
        pts in prop::collection::vec(0.0..1.0f64, 16),
        q in 1usize..7,
    ) {
        let coords: Vec<f64> = pts.clone();
        let k = KernelSpec::rbf(1.0, 0.3, 1e-6);
        let trace = |q: usize| {
            let map = NystromMap::build(InducingSet { dim: 2, points: pts[..2 * q].to_vec() }, k).unwrap();
            let approx = map.approx_gram(&coords).unwrap();
            let n = coords.len() / 2;
            (0..n).map(|i| 1.0 - approx[i * n + i]).sum::<f64>()
        };
        prop_assert!(trace(q + 1) <= trace(q) + 1e-9);
    }

    #[test]
    fn random_matmul_gradients(r in 1usize..5, c in 1usize..5, k in 1usize..5, seed in any::<u64>()) {
        let val = |i: usize, s: u64| ((i as u64).wrapping_mul(2654435761).wrapping_add(s) % 2000) as f64 / 1000.0 - 1.0;
        let a = Tensor::new(&[r, k], (0..r * k).map(|i| val(i, seed)).collect()).unwrap().with_grad();
        let b = Tensor::new(&[k, c], (0..k * c).map(|i| val(i, seed / 3 + 7)).collect()).unwrap().with_grad();
        let rep = finite_diff_check(|t, v| {
            let m = t.matmul(v[0], v[1])?;
            let e = t.elu(m)?;
            let sq = t.mul(e, e)?;
            t.sum(sq)
        }, &[a, b], 1e-4).unwrap();
        prop_assert!(rep.passed, "{:?}", rep);
    }

    #[test]
    fn manifest_toml_round_trip(d in 0usize..20, seed in 0..=i64::MAX as u64, m in 1usize..4) {
        let d_s = 2 * d + 1;
        let mut text = format!("confounder = \"x.grd\"\noutcome = \"y.grd\"\nd_s = {d_s}\n\n[treatment]\n");
        for i in 1..=m {
            text.push_str(&format!("{i} = \"t{i}.grd\"\n"));
        }
        text.push_str(&format!("\n[split]\nseed = {seed}\nratios = [0.6, 0.2, 0.2]\n"));
        let man = Manifest::from_toml(&text).unwrap();
        prop_assert_eq!(man.treatment_paths().unwrap().len(), m);
        prop_assert_eq!(Manifest::from_toml(&man.to_toml().unwrap()).unwrap(), man);
    }
}
