//! Acceptance criteria 1–10, one pass/fail line each.
//!
//! Runs without the libtest harness so the lines always reach stdout.
//! Exits nonzero when any criterion fails.

use std::collections::BTreeMap;
use std::time::{Duration, Instant};

use rand::Rng;
use spatial_causal::catalog::{run_catalog, GRADCHECK_TOLERANCE};
use spatial_causal::dataset::SpatialDataset;
use spatial_causal::effects::{
    balancing_weights, draw_neighbourhoods, estimate_effects_dose, estimate_effects_observed, fit_gps,
    marginal_density, treatment_grid, BalancingWeights, EffectErrors, MarginalDensity,
};
use spatial_causal::experiment::{estimate, fit, generate, partitions, ExperimentConfig, LoadedData, Pipeline};
use spatial_causal::gp::{select_inducing, GpSampler, InducingStrategy, KernelSpec, NystromMap};
use spatial_causal::model::{build_model, train, ConfounderKind, Geometry, InterferenceKind, ModelConfig, Overrides, TrainConfig};
use spatial_causal::par::Exec;
use spatial_causal::raster::{
    self, ndvi, onehot_landcover, rasterize_points, split_sizes, Grid, Point, NLCD_CODES,
};
use spatial_causal::rng;
use spatial_causal::tensor::OptimizerKind;
use spatial_causal::Result;

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

fn within_budget(start: Instant, budget: Duration) -> (bool, String) {
    let t = start.elapsed();
    (t < budget, format!("{:.1}s of {}s", t.as_secs_f64(), budget.as_secs()))
}

// 1. Gradient correctness.
fn gradients() -> Result<Outcome> {
    let start = Instant::now();
    let mut worst = (0.0f64, "");
    let mut kinds = 0;
    let mut all = true;
    for seed in 0..5 {
        let entries = run_catalog(seed)?;
        kinds = entries.len();
        for e in entries {
            all &= e.report.passed;
            if e.report.max_rel_error >= worst.0 {
                worst = (e.report.max_rel_error, e.name);
            }
        }
    }
    let (fast, t) = within_budget(start, Duration::from_secs(60));
    Ok(outcome(
        all && fast && kinds >= 10,
        format!(
            "{kinds} op kinds x 5 seeds, worst rel error {:.2e} ({}) vs {GRADCHECK_TOLERANCE:e}, {t}",
            worst.0, worst.1
        ),
    ))
}

fn uniform_points(n: usize, dim: usize, seed: u64) -> Vec<f64> {
    let mut r = rng::stream(seed, "acceptance-points");
    (0..n * dim).map(|_| r.random_range(0.0..1.0)).collect()
}

fn gauss_jordan_inverse(a: &[f64], n: usize) -> Vec<f64> {
    let mut m = a.to_vec();
    let mut inv = vec![0.0; n * n];
    for i in 0..n {
        inv[i * n + i] = 1.0;
    }
    for c in 0..n {
        let p = (c..n).max_by(|&i, &j| m[i * n + c].abs().total_cmp(&m[j * n + c].abs())).unwrap();
        for k in 0..n {
            m.swap(c * n + k, p * n + k);
            inv.swap(c * n + k, p * n + k);
        }
        let d = m[c * n + c];
        for k in 0..n {
            m[c * n + k] /= d;
            inv[c * n + k] /= d;
        }
        for r in 0..n {
            if r != c {
                let f = m[r * n + c];
                for k in 0..n {
                    m[r * n + k] -= f * m[c * n + k];
                    inv[r * n + k] -= f * inv[c * n + k];
                }
            }
        }
    }
    inv
}

// 2. Nyström exactness.
fn nystrom() -> Result<Outcome> {
    let kernels = [KernelSpec::rbf(1.0, 0.5, 0.5), KernelSpec::exponential(1.0, 0.2, 0.1)];
    let n = 200;
    let coords = uniform_points(n, 2, 2);
    let mut full_err = 0.0f64;
    let mut low_err = 0.0f64;
    for k in kernels {
        let inducing = select_inducing(&coords, 2, n, InducingStrategy::Subsample, 0)?;
        let map = NystromMap::build(inducing, k)?;
        let approx = map.approx_gram(&coords)?;
        let mut exact = k.gram(&coords, 2);
        for i in 0..n {
            exact[i * n + i] += k.noise;
        }
        full_err = full_err.max(approx.iter().zip(&exact).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max));

        let pts = uniform_points(60, 2, 3);
        let inducing = select_inducing(&pts, 2, 25, InducingStrategy::Grid, 0)?;
        let q = inducing.len();
        let map = NystromMap::build(inducing.clone(), k)?;
        let approx = map.approx_gram(&pts)?;
        let npts = pts.len() / 2;
        let mut kq = k.gram(&inducing.points, 2);
        for j in 0..q {
            kq[j * q + j] += k.noise;
        }
        let kinv = gauss_jordan_inverse(&kq, q);
        let knq: Vec<f64> = (0..npts)
            .flat_map(|i| (0..q).map(move |j| (i, j)))
            .map(|(i, j)| k.eval(&pts[2 * i..2 * i + 2], inducing.point(j)).unwrap())
            .collect();
        for i in 0..npts {
            for j in 0..npts {
                let mut v = 0.0;
                for a in 0..q {
                    for b in 0..q {
                        v += knq[i * q + a] * kinv[a * q + b] * knq[j * q + b];
                    }
                }
                low_err = low_err.max((approx[i * npts + j] - v).abs());
            }
        }
    }
    Ok(outcome(
        full_err < 1e-8 && low_err < 1e-10,
        format!("full rank max err {full_err:.2e} (< 1e-8), q = 25 vs dense oracle {low_err:.2e} (< 1e-10)"),
    ))
}

// 3. GP sampler fidelity.
fn sampler() -> Result<Outcome> {
    let start = Instant::now();
    let coords = uniform_points(10, 2, 4);
    let k = KernelSpec::rbf(1.0, 1.0, 0.1);
    let s = GpSampler::new(&coords, 2, &k)?;
    let mut r = rng::stream(5, "acceptance-sampler");
    let draws = 5000;
    let mut cov = vec![0.0; 100];
    for _ in 0..draws {
        let v = s.draw(&mut r);
        for i in 0..10 {
            for j in 0..10 {
                cov[i * 10 + j] += v[i] * v[j] / draws as f64;
            }
        }
    }
    let mut target = k.gram(&coords, 2);
    for i in 0..10 {
        target[i * 10 + i] += k.noise;
    }
    let worst = cov.iter().zip(&target).map(|(c, t)| ((c - t) / t).abs()).fold(0.0, f64::max);
    let (fast, t) = within_budget(start, Duration::from_secs(60));
    Ok(outcome(worst <= 0.10 && fast, format!("worst relative covariance error {:.3} (<= 0.10), {t}", worst)))
}

const LINE_BASE: &str = r#"
[data]
kind = "line_graph"
[model]
interference = { kind = "linear" }
confounder = { kind = "linear" }
[train]
lr = 0.001
epochs = 2000
[effects]
mode = "dose"
weights = "on"
[run]
seeds = [0, 1, 2, 3, 4]
"#;

fn mean_errors(rows: &[EffectErrors]) -> EffectErrors {
    let n = rows.len() as f64;
    EffectErrors {
        de: rows.iter().map(|e| e.de).sum::<f64>() / n,
        ie: rows.iter().map(|e| e.ie).sum::<f64>() / n,
        te: rows.iter().map(|e| e.te).sum::<f64>() / n,
    }
}

// 4. Line-graph ordering of the three model families.
fn line_graph_ordering() -> Result<Outcome> {
    let start = Instant::now();
    let cfg = ExperimentConfig::from_toml(LINE_BASE)?;
    let gp = spatial_causal::model::GpConfig {
        kernel: KernelSpec::rbf(1.0, 0.5, 0.5),
        q: 50,
        strategy: InducingStrategy::Grid,
        train_lengthscale: false,
    };
    let models = [
        ("linear", ModelConfig { interference: InterferenceKind::Linear, confounder: ConfounderKind::Linear, gp: None }),
        ("linear+U", ModelConfig { interference: InterferenceKind::Linear, confounder: ConfounderKind::Linear, gp: Some(gp) }),
        (
            "nn+U",
            ModelConfig {
                interference: InterferenceKind::Mlp { width: 64, depth: 2 },
                confounder: ConfounderKind::Mlp { width: 64, depth: 2 },
                gp: Some(gp),
            },
        ),
    ];
    let mut errs: BTreeMap<&str, Vec<EffectErrors>> = BTreeMap::new();
    for &seed in &cfg.run.seeds {
        let data = LoadedData::from(generate(&cfg.data, seed)?);
        let parts = partitions(&cfg, &data)?;
        for (name, mc) in &models {
            let (model, _) = fit(&cfg, mc, &parts, seed, Exec::Parallel)?;
            let v = estimate(&cfg.effects, &model, &data.dataset, data.truth.as_ref(), seed, Exec::Parallel)?;
            errs.entry(name).or_default().push(v[0].errors.expect("generated data has ground truth"));
        }
    }
    let lin = mean_errors(&errs["linear"]);
    let lin_u = mean_errors(&errs["linear+U"]);
    let nn = mean_errors(&errs["nn+U"]);
    let te_ratio = nn.te / lin.te;
    let ie_ratio = nn.ie / lin.ie;
    let cut = 1.0 - lin_u.te / lin.te;
    let (fast, t) = within_budget(start, Duration::from_secs(15 * 60));
    Ok(outcome(
        te_ratio <= 0.5 && ie_ratio <= 0.5 && cut >= 0.3 && fast,
        format!(
            "TE lin {:.3} lin+U {:.3} nn+U {:.3}; IE lin {:.3} nn+U {:.3}; TE ratio {te_ratio:.2} (<= 0.5), \
             IE ratio {ie_ratio:.2} (<= 0.5), U cut {:.0}% (>= 30%), {t}",
            lin.te,
            lin_u.te,
            nn.te,
            lin.ie,
            nn.ie,
            100.0 * cut
        ),
    ))
}

const GRID_BASE: &str = r#"
[data]
kind = "grid"
[model]
interference = { kind = "cnn", channels = 8, depth = 3, kernel_size = 3 }
confounder = { kind = "mlp", width = 128, depth = 2 }
[train]
lr = 0.001
epochs = 40
batch_size = 64
validation = true
[effects]
mode = "dose"
weights = "both"
[run]
seeds = [0, 1, 2]
"#;

// 5. Balancing weights on the semi-synthetic grid.
fn grid_weights() -> Result<Outcome> {
    let start = Instant::now();
    let cfg = ExperimentConfig::from_toml(GRID_BASE)?;
    let mut wins = 0;
    let mut pairs = Vec::new();
    for &seed in &cfg.run.seeds {
        let data = LoadedData::from(generate(&cfg.data, seed)?);
        let parts = partitions(&cfg, &data)?;
        let (model, _) = fit(&cfg, &cfg.model, &parts, seed, Exec::Parallel)?;
        let v = estimate(&cfg.effects, &model, &data.dataset, data.truth.as_ref(), seed, Exec::Parallel)?;
        let ie = |w: bool| v.iter().find(|x| x.weighted == w).and_then(|x| x.errors).expect("both variants").ie;
        let (u, w) = (ie(false), ie(true));
        wins += (w < u) as usize;
        pairs.push(format!("{w:.4}/{u:.4}"));
    }
    let (fast, t) = within_budget(start, Duration::from_secs(30 * 60));
    Ok(outcome(
        wins >= 2 && fast,
        format!("weighted/unweighted IE error per seed {}; {wins} of 3 strictly lower (>= 2), {t}", pairs.join(" ")),
    ))
}

/// Noiseless linear data on a line: `y = α t + Σ_k w_k t̄_k + γᵀx + b`.
fn linear_fixture(n: usize, alpha: f64, seed: u64) -> (SpatialDataset, Vec<f64>) {
    let mut r = rng::stream(seed, "linear-fixture");
    let t: Vec<f64> = (0..n).map(|_| r.random_range(-1.0..1.0)).collect();
    let x: Vec<f64> = (0..2 * n).map(|_| r.random_range(-1.0..1.0)).collect();
    let (w, gamma, b) = ([0.3, 0.0, -0.2], [0.5, -0.7], 0.25);
    let mut patches = Vec::with_capacity(3 * n);
    for i in 0..n {
        patches.push(if i > 0 { t[i - 1] } else { 0.0 });
        patches.push(0.0);
        patches.push(if i + 1 < n { t[i + 1] } else { 0.0 });
    }
    let y: Vec<Option<f64>> = (0..n)
        .map(|i| {
            let p = &patches[3 * i..3 * i + 3];
            Some(alpha * t[i] + (0..3).map(|k| w[k] * p[k]).sum::<f64>() + gamma[0] * x[2 * i] + gamma[1] * x[2 * i + 1] + b)
        })
        .collect();
    let ds = SpatialDataset {
        coord_dim: 1,
        coords: (0..n).map(|i| i as f64 / (n - 1) as f64).collect(),
        m: 1,
        t,
        patch_rows: 1,
        patch_cols: 3,
        patches: vec![patches],
        x_dim: 2,
        x,
        y,
        treatment_names: vec!["t".into()],
        cells: None,
    };
    (ds, vec![alpha])
}

/// Least-squares coefficient on `t` over `[t, t̄_left, t̄_right, x, 1]`.
fn ols_alpha(ds: &SpatialDataset) -> f64 {
    let n = ds.n();
    let p = 6;
    let rows: Vec<[f64; 6]> = (0..n)
        .map(|i| {
            let q = ds.patch(0, i);
            [ds.t[i], q[0], q[2], ds.x[2 * i], ds.x[2 * i + 1], 1.0]
        })
        .collect();
    let mut xtx = vec![0.0; p * p];
    let mut xty = vec![0.0; p];
    for (i, r) in rows.iter().enumerate() {
        for a in 0..p {
            xty[a] += r[a] * ds.y[i].unwrap();
            for b in 0..p {
                xtx[a * p + b] += r[a] * r[b];
            }
        }
    }
    let inv = gauss_jordan_inverse(&xtx, p);
    (0..p).map(|b| inv[b] * xty[b]).sum()
}

// 6. Linear recovery.
fn linear_recovery() -> Result<Outcome> {
    let alpha = 0.8;
    let (ds, _) = linear_fixture(300, alpha, 6);
    let mc = ModelConfig {
        interference: InterferenceKind::Linear,
        confounder: ConfounderKind::Linear,
        gp: None,
    };
    let mut model = build_model(&mc, Geometry::of(&ds), &ds.coords, 6)?;
    let tc = TrainConfig {
        optimizer: Some(OptimizerKind::adam(0.01)),
        ..TrainConfig::new(0.01, 3000, 0, 6)
    };
    train(&mut model, &ds, None, &tc, Exec::Parallel)?;
    let fitted = model.alphas()[0];
    let ols = ols_alpha(&ds);
    let grid = treatment_grid(&ds, 0, 21)?;
    let draws = draw_neighbourhoods(ds.n(), 32, 6);
    let r = estimate_effects_dose(&model, &ds, 0, None, &grid, &draws, Exec::Parallel)?;
    let slope_err = grid
        .iter()
        .zip(&r.de)
        .map(|(t, d)| (d - fitted * t).abs())
        .fold(0.0, f64::max);
    Ok(outcome(
        (fitted - alpha).abs() <= 0.05 && (fitted - ols).abs() <= 1e-3 && slope_err < 1e-12,
        format!(
            "alpha fitted {fitted:.5} truth {alpha} OLS {ols:.5}; |fit - OLS| {:.1e} (<= 1e-3); max |DE(t) - alpha t| {slope_err:.1e}",
            (fitted - ols).abs()
        ),
    ))
}

// 7. Estimator identities.
fn identities() -> Result<Outcome> {
    let cfg = ExperimentConfig::from_toml(&(LINE_BASE.replace("epochs = 2000", "epochs = 200") + "\n"))?;
    let mut cfg = cfg;
    cfg.data.line_graph.n = 60;
    cfg.model = ModelConfig {
        interference: InterferenceKind::Mlp { width: 16, depth: 2 },
        confounder: ConfounderKind::Mlp { width: 16, depth: 2 },
        gp: Some(spatial_causal::model::GpConfig {
            kernel: KernelSpec::rbf(1.0, 0.5, 0.5),
            q: 8,
            strategy: InducingStrategy::Grid,
            train_lengthscale: false,
        }),
    };
    let data = LoadedData::from(generate(&cfg.data, 7)?);
    let ds = &data.dataset;
    let (model, _) = fit(&cfg, &cfg.model, &partitions(&cfg, &data)?, 7, Exec::Parallel)?;
    let gps = fit_gps(ds, 0)?;
    let md = marginal_density(ds, 0)?;
    let w = balancing_weights(ds, 0, &gps, &md, Exec::Parallel)?;

    let mut additivity = 0.0f64;
    let grid = treatment_grid(ds, 0, 21)?;
    let draws = draw_neighbourhoods(ds.n(), 32, 7);
    for weights in [None, Some(&w)] {
        let o = estimate_effects_observed(&model, ds, 0, weights, Exec::Parallel)?;
        additivity = additivity.max((o.te - o.de[0] - o.ie[0]).abs());
        let d = estimate_effects_dose(&model, ds, 0, weights, &grid, &draws, Exec::Parallel)?;
        additivity = additivity.max((d.te - d.de_mean() - d.ie_mean()).abs());
    }

    // identical GPS and marginal densities give unit raw weights
    let n = ds.n();
    let flat = BalancingWeights {
        m: 0,
        raw: vec![1.0; n],
        normalized: vec![1.0; n],
        gps_density: (0..n).map(|i| md.density(ds.t[i])).collect(),
        positivity_violations: Vec::new(),
    };
    let same = estimate_effects_dose(&model, ds, 0, Some(&flat), &grid, &draws, Exec::Parallel)?
        == spatial_causal::effects::EffectReport {
            weighted: true,
            ..estimate_effects_dose(&model, ds, 0, None, &grid, &draws, Exec::Parallel)?
        }
        && estimate_effects_observed(&model, ds, 0, Some(&flat), Exec::Parallel)?.te
            == estimate_effects_observed(&model, ds, 0, None, Exec::Parallel)?.te;

    // exhaustive sums through counterfactual predictions on 8 units
    let small = ds.subset(&(0..8).collect::<Vec<_>>());
    let sw = balancing_weights(&small, 0, &fit_gps(&small, 0)?, &marginal_density(&small, 0)?, Exec::Sequential)?;
    let sgrid = treatment_grid(&small, 0, 4)?;
    let sdraws: Vec<usize> = (0..8).collect();
    let est = estimate_effects_dose(&model, &small, 0, Some(&sw), &sgrid, &sdraws, Exec::Sequential)?;
    let zero = vec![0.0; small.patch_len()];
    let wsum: f64 = sw.normalized.iter().sum();
    let mut brute = 0.0f64;
    for (g, &t) in sgrid.iter().enumerate() {
        let (mut de, mut ie) = (0.0, 0.0);
        for i in 0..8 {
            let y = |t: Option<f64>, patch: Option<&[f64]>| -> Result<f64> {
                let ov = Overrides {
                    t: t.map(|v| vec![(0, v)]).unwrap_or_default(),
                    patch: patch.map(|p| vec![(0, p)]).unwrap_or_default(),
                };
                Ok(model.predict(&small, i, &ov)?.y)
            };
            de += sw.normalized[i] * (y(Some(t), None)? - y(Some(0.0), None)?);
            let mut acc = 0.0;
            for &b in &sdraws {
                acc += y(Some(t), Some(small.patch(0, b)))? - y(Some(t), Some(&zero))?;
            }
            ie += sw.normalized[i] * acc / sdraws.len() as f64;
        }
        brute = brute.max((de / wsum - est.de[g]).abs()).max((ie / wsum - est.ie[g]).abs());
    }
    Ok(outcome(
        additivity <= 1e-9 && same && brute <= 1e-9,
        format!("max |TE - DE - IE| {additivity:.1e}; flat weights bitwise equal: {same}; brute-force gap on 8 units {brute:.1e}"),
    ))
}

// 8. Weight hygiene.
fn weight_hygiene() -> Result<Outcome> {
    let cfg = ExperimentConfig::from_toml(LINE_BASE)?;
    let ds = generate(&cfg.data, 8)?.dataset;
    let w = balancing_weights(&ds, 0, &fit_gps(&ds, 0)?, &marginal_density(&ds, 0)?, Exec::Parallel)?;
    let mean_gap = (w.normalized.iter().sum::<f64>() / ds.n() as f64 - 1.0).abs();

    let md = marginal_density(&ds, 0)?;
    let integral = trapezoid(&md, ds.t.iter().copied().fold(f64::INFINITY, f64::min), ds.t.iter().copied().fold(f64::NEG_INFINITY, f64::max));

    // treatment nearly determined by x with one unit far off its mean
    let mut fixture = ds.subset(&(0..100).collect::<Vec<_>>());
    for i in 0..fixture.n() {
        fixture.t[i] = 2.0 * fixture.x[i * fixture.x_dim] + 1e-4 * ((i % 7) as f64 - 3.0);
    }
    fixture.t[17] += 5.0;
    let fw = balancing_weights(&fixture, 0, &fit_gps(&fixture, 0)?, &marginal_density(&fixture, 0)?, Exec::Sequential)?;
    let fires = fw.positivity_violations.contains(&17);
    Ok(outcome(
        mean_gap <= 1e-9 && (integral - 1.0).abs() <= 0.01 && fires,
        format!(
            "weight mean gap {mean_gap:.1e} (<= 1e-9); KDE integral {integral:.5} (1 +- 0.01); positivity flags {:?}",
            fw.positivity_violations
        ),
    ))
}

fn trapezoid(md: &MarginalDensity, lo: f64, hi: f64) -> f64 {
    let pad = 10.0 * md.bandwidth;
    let (a, b) = (lo - pad, hi + pad);
    let steps = 20_000;
    let h = (b - a) / steps as f64;
    (0..=steps)
        .map(|k| {
            let v = md.density(a + k as f64 * h);
            if k == 0 || k == steps {
                0.5 * v
            } else {
                v
            }
        })
        .sum::<f64>()
        * h
}

// 9. Data plumbing.
fn plumbing() -> Result<Outcome> {
    let geom = raster::Geometry {
        rows: 5,
        cols: 7,
        origin_x: -3.0,
        origin_y: 10.0,
        resolution: 0.5,
    };
    let mut r = rng::stream(9, "acceptance-grid");
    let mut data: Vec<f64> = (0..2 * 35).map(|_| r.random_range(-1e6..1e6)).collect();
    data[4] = f64::NAN;
    data[9] = -0.0;
    let g = Grid::new(geom, 2, data)?;
    let back = Grid::from_bytes(&g.to_bytes()?)?;
    let bits = |g: &Grid| g.data.iter().map(|v| v.to_bits()).collect::<Vec<_>>();
    let round_trip = back.geometry() == g.geometry() && back.channels == 2 && bits(&back) == bits(&g);

    let unit = raster::Geometry {
        rows: 2,
        cols: 2,
        origin_x: 0.0,
        origin_y: 0.0,
        resolution: 1.0,
    };
    let pts = [
        Point { x: 0.2, y: 0.2, value: 1.0 },
        Point { x: 0.7, y: 0.9, value: 4.0 },
        Point { x: 1.5, y: 1.5, value: -2.0 },
        Point { x: 5.0, y: 5.0, value: 9.0 },
    ];
    let ras = rasterize_points(&pts, unit)?;
    let c00 = ras.grid.get(0, 0, 0);
    let rasterized = c00 == 2.5 && ras.grid.get(0, 1, 1) == -2.0 && ras.grid.get(0, 0, 1).is_nan() && ras.dropped == 1;

    let nir = Grid::new(unit, 1, vec![0.5, 0.3, 0.0, 0.75])?;
    let red = Grid::new(unit, 1, vec![0.1, 0.3, 0.0, 0.25])?;
    let nd = ndvi(&nir, &red)?;
    let ndvi_ok = nd.data[0] == (0.5 - 0.1) / (0.5 + 0.1) && nd.data[1] == 0.0 && nd.data[2].is_nan() && nd.data[3] == 0.5;

    let codes: Vec<f64> = NLCD_CODES.iter().map(|&c| c as f64).collect();
    let cg = Grid::new(
        raster::Geometry {
            rows: 1,
            cols: codes.len(),
            origin_x: 0.0,
            origin_y: 0.0,
            resolution: 1.0,
        },
        1,
        codes,
    )?;
    let (hot, unknown) = onehot_landcover(&cg)?;
    let onehot_ok = unknown == 0
        && hot.channels == 15
        && (0..15).all(|c| (0..15).all(|col| hot.get(c, 0, col) == if c == col { 1.0 } else { 0.0 }))
        && NLCD_CODES == [11, 21, 22, 23, 24, 31, 41, 42, 43, 52, 71, 81, 82, 90, 95];

    let splits = [100, 250, 3000].iter().all(|&n| {
        let s = split_sizes(n, &[0.6, 0.2, 0.2]).unwrap();
        s == [3 * n / 5, n / 5, n / 5]
    });
    Ok(outcome(
        round_trip && rasterized && ndvi_ok && onehot_ok && splits,
        format!("grid round trip {round_trip}; rasterize {rasterized}; NDVI {ndvi_ok}; one-hot order {onehot_ok}; 6:2:2 sizes {splits}"),
    ))
}

// 10. End-to-end determinism.
fn determinism() -> Result<Outcome> {
    let text = LINE_BASE
        .replace("epochs = 2000", "epochs = 100")
        .replace("weights = \"on\"", "weights = \"both\"")
        .replace("seeds = [0, 1, 2, 3, 4]", "seeds = [10, 11]")
        .replace("[model]", "[data.line_graph]\nn = 120\n[model]");
    let mut files = Vec::new();
    let root = tempfile::tempdir()?;
    for k in 0..2 {
        let mut cfg = ExperimentConfig::from_toml(&text)?;
        cfg.run.out = root.path().join(format!("run{k}"));
        let p = Pipeline::new(cfg, Exec::Parallel);
        let mut per_seed = Vec::new();
        for &s in p.seeds() {
            p.gen(s)?;
            p.train(s)?;
            per_seed.push((s, p.effects(s)?));
        }
        p.write_errors(&per_seed)?;
        let mut bytes = Vec::new();
        for &s in p.seeds() {
            for w in [false, true] {
                bytes.push(std::fs::read(p.layout.effects_csv(s, w))?);
            }
            bytes.push(std::fs::read(p.layout.run_dir(s).join("loss.csv"))?);
        }
        for w in [false, true] {
            bytes.push(std::fs::read(p.layout.errors_csv(w))?);
        }
        files.push(bytes);
    }
    Ok(outcome(
        files[0] == files[1],
        format!("{} CSV files compared byte for byte across two runs", files[0].len()),
    ))
}

fn main() {
    let criteria: [(&str, fn() -> Result<Outcome>); 10] = [
        ("gradient correctness", gradients),
        ("Nystrom exactness", nystrom),
        ("GP sampler fidelity", sampler),
        ("line-graph model ordering", line_graph_ordering),
        ("grid balancing-weight pattern", grid_weights),
        ("linear recovery", linear_recovery),
        ("estimator identities", identities),
        ("weight hygiene", weight_hygiene),
        ("data plumbing", plumbing),
        ("end-to-end determinism", determinism),
    ];
    let only: Option<Vec<usize>> = std::env::var("ACCEPTANCE_ONLY")
        .ok()
        .map(|v| v.split(',').filter_map(|s| s.trim().parse().ok()).collect());
    let mut failed = Vec::new();
    for (k, (name, f)) in criteria.iter().enumerate() {
        let id = k + 1;
        if only.as_ref().is_some_and(|o| !o.contains(&id)) {
            continue;
        }
        let start = Instant::now();
        let (pass, detail) = match f() {
            Ok(o) => (o.pass, o.detail),
            Err(e) => (false, format!("error: {e}")),
        };
        let verdict = if pass { "PASS" } else { "FAIL" };
        println!("criterion {id:>2} {verdict} {name}: {detail} [{:.1}s]", start.elapsed().as_secs_f64());
        if !pass {
            failed.push(id);
        }
    }
    if !failed.is_empty() {
        println!("failed criteria: {failed:?}");
        std::process::exit(1);
    }
}
