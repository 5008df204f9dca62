//! Seeded experiment runs: generation, training, effect estimation,
//! evaluation and reporting.
//!
//! On-disk layout under the output directory:
//!
//! ```text
//! data/seed-<s>/   manifest.toml, *.grd, truth.gtr
//! runs/seed-<s>/   model.sck, loss.csv, effects_<variant>.csv, metrics.json
//! errors_<variant>.csv, report.json
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dataset::SpatialDataset;
use crate::effects::{
    balancing_weights, draw_neighbourhoods, effect_error, estimate_effects_dose, estimate_effects_observed, fit_gps,
    marginal_density, treatment_grid, EffectErrors, EffectMode, EffectReport, EFFECTS_CSV_HEADER,
};
use crate::error::{config_err, data_err, Result};
use crate::model::{build_model, evaluate, train, Geometry, LossTrace, ModelConfig, SpatialModel, TrainConfig};
use crate::par::Exec;
use crate::raster::{self, Manifest, SplitSpec};
use crate::synthgen::{gen_grid, gen_line_graph, Generated, GridConfig, GroundTruth, LineGraphConfig};
use crate::tensor::OptimizerKind;

/// Border-to-border patch side used when `full_scale` is set.
pub const FULL_SCALE_D_S: usize = 51;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataKind {
    LineGraph,
    Grid,
    Manifest,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub kind: DataKind,
    /// Restores the full patch side on generated grids.
    #[serde(default)]
    pub full_scale: bool,
    #[serde(default)]
    pub line_graph: LineGraphConfig,
    #[serde(default)]
    pub grid: GridConfig,
    /// Required for `kind = "manifest"`; relative to the config file.
    #[serde(default)]
    pub manifest: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    #[serde(default)]
    pub optimizer: Option<OptimizerKind>,
    pub lr: f64,
    pub epochs: usize,
    /// `0` means full batch.
    #[serde(default)]
    pub batch_size: usize,
    #[serde(default = "default_patience")]
    pub patience: usize,
    /// Train on the train split with early stopping on the validation
    /// split; otherwise train on every unit.
    #[serde(default)]
    pub validation: bool,
}

fn default_patience() -> usize {
    20
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WeightsSetting {
    On,
    Off,
    #[default]
    Both,
}

impl WeightsSetting {
    /// Variants to estimate, unweighted first.
    pub fn variants(self) -> &'static [bool] {
        match self {
            WeightsSetting::On => &[true],
            WeightsSetting::Off => &[false],
            WeightsSetting::Both => &[false, true],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EffectsConfig {
    pub mode: EffectMode,
    #[serde(default = "default_grid_size")]
    pub grid_size: usize,
    #[serde(default = "default_draws")]
    pub draws: usize,
    #[serde(default)]
    pub weights: WeightsSetting,
}

fn default_grid_size() -> usize {
    21
}

fn default_draws() -> usize {
    32
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seeds: Vec<u64>,
    #[serde(default = "default_out")]
    pub out: PathBuf,
}

fn default_out() -> PathBuf {
    PathBuf::from("out")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub data: DataConfig,
    pub model: ModelConfig,
    pub train: TrainSection,
    pub effects: EffectsConfig,
    pub run: RunConfig,
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let de = toml::Deserializer::new(text);
        let mut cfg: ExperimentConfig = serde_path_to_error::deserialize(de)
            .map_err(|e| config_err!("key `{}`: {}", e.path(), e.inner().message()))?;
        if cfg.data.full_scale {
            cfg.data.grid.d_s = FULL_SCALE_D_S;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads a config file; relative paths inside it resolve against its
    /// directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| config_err!("{}: {e}", path.display()))?;
        let mut cfg = Self::from_toml(&text)?;
        let dir = path.parent().unwrap_or(Path::new(""));
        if let Some(m) = &mut cfg.data.manifest {
            if m.is_relative() {
                *m = dir.join(&*m);
            }
        }
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        match self.data.kind {
            DataKind::LineGraph => self.data.line_graph.validate()?,
            DataKind::Grid => self.data.grid.validate()?,
            DataKind::Manifest if self.data.manifest.is_none() => {
                return Err(config_err!("key `data.manifest`: required for manifest data"))
            }
            DataKind::Manifest => {}
        }
        if self.run.seeds.is_empty() {
            return Err(config_err!("key `run.seeds`: at least one seed is required"));
        }
        if !(self.train.lr > 0.0) {
            return Err(config_err!("key `train.lr`: must be positive"));
        }
        if self.effects.grid_size == 0 || self.effects.draws == 0 {
            return Err(config_err!("key `effects`: grid_size and draws must be positive"));
        }
        Ok(())
    }

    pub fn train_config(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            optimizer: self.train.optimizer,
            lr: self.train.lr,
            epochs: self.train.epochs,
            batch_size: self.train.batch_size,
            seed,
            patience: self.train.patience,
        }
    }

    /// SHA-256 of the canonical JSON form with the output directory left
    /// out, as lowercase hex.
    pub fn hash(&self) -> String {
        let mut v = serde_json::to_value(self).expect("config serializes");
        v["run"]["out"] = serde_json::Value::Null;
        let digest = Sha256::digest(serde_json::to_string(&v).expect("json serializes").as_bytes());
        format!("{digest:x}")
    }
}

/// Paths of every artifact under an output root.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Layout {
    pub root: PathBuf,
}

impl Layout {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn data_dir(&self, seed: u64) -> PathBuf {
        self.root.join("data").join(format!("seed-{seed}"))
    }

    pub fn run_dir(&self, seed: u64) -> PathBuf {
        self.root.join("runs").join(format!("seed-{seed}"))
    }

    pub fn truth(&self, seed: u64) -> PathBuf {
        self.data_dir(seed).join("truth.gtr")
    }

    pub fn checkpoint(&self, seed: u64) -> PathBuf {
        self.run_dir(seed).join("model.sck")
    }

    pub fn effects_csv(&self, seed: u64, weighted: bool) -> PathBuf {
        self.run_dir(seed).join(format!("effects_{}.csv", variant_name(weighted)))
    }

    pub fn errors_csv(&self, weighted: bool) -> PathBuf {
        self.root.join(format!("errors_{}.csv", variant_name(weighted)))
    }
}

pub fn variant_name(weighted: bool) -> &'static str {
    if weighted {
        "weighted"
    } else {
        "unweighted"
    }
}

/// Generates the synthetic dataset for `seed`.
pub fn generate(data: &DataConfig, seed: u64) -> Result<Generated> {
    match data.kind {
        DataKind::LineGraph => gen_line_graph(&LineGraphConfig { seed, ..data.line_graph }),
        DataKind::Grid => gen_grid(&GridConfig { seed, ..data.grid }, None),
        DataKind::Manifest => Err(config_err!("manifest data is read, not generated")),
    }
}

/// Writes generated grids, a manifest and the ground-truth sidecar.
pub fn write_generated(g: &Generated, dir: &Path, seed: u64) -> Result<()> {
    let manifest = Manifest {
        treatment: BTreeMap::from([("1".to_string(), PathBuf::from("treatment.grd"))]),
        confounder: "confounder.grd".into(),
        outcome: "outcome.grd".into(),
        d_s: g.grids.d_s,
        boundary: g.grids.boundary,
        split: SplitSpec {
            seed,
            ..SplitSpec::default()
        },
    };
    raster::write_grids(
        dir,
        std::slice::from_ref(&g.grids.treatment),
        &g.grids.confounder,
        &g.grids.outcome,
        &manifest,
    )?;
    fs::write(dir.join("truth.gtr"), g.truth.to_bytes()?)?;
    Ok(())
}

/// A dataset plus what is known about how it was made.
#[derive(Debug, Clone)]
pub struct LoadedData {
    pub dataset: SpatialDataset,
    pub truth: Option<GroundTruth>,
    pub split: SplitSpec,
}

impl From<Generated> for LoadedData {
    fn from(g: Generated) -> Self {
        Self {
            dataset: g.dataset,
            truth: Some(g.truth),
            split: SplitSpec::default(),
        }
    }
}

pub fn load_data(cfg: &ExperimentConfig, layout: &Layout, seed: u64) -> Result<LoadedData> {
    let path = match (&cfg.data.kind, &cfg.data.manifest) {
        (DataKind::Manifest, Some(p)) => p.clone(),
        _ => layout.data_dir(seed).join("manifest.toml"),
    };
    let manifest = Manifest::load(&path)?;
    let dataset = raster::extract_units(&manifest)?;
    let truth_path = layout.truth(seed);
    let truth = if cfg.data.kind != DataKind::Manifest && truth_path.exists() {
        Some(GroundTruth::from_bytes(&fs::read(&truth_path)?)?)
    } else {
        None
    };
    Ok(LoadedData {
        dataset,
        truth,
        split: manifest.split,
    })
}

/// Train and evaluation subsets under the configured protocol.
pub fn partitions(cfg: &ExperimentConfig, data: &LoadedData) -> Result<Partitions> {
    if !cfg.train.validation {
        return Ok(Partitions {
            train: data.dataset.clone(),
            val: None,
            test: data.dataset.clone(),
        });
    }
    let (train, val, test) = raster::split_dataset(&data.dataset, &data.split.ratios, data.split.seed)?;
    Ok(Partitions {
        train,
        val: Some(val),
        test,
    })
}

#[derive(Debug, Clone)]
pub struct Partitions {
    pub train: SpatialDataset,
    pub val: Option<SpatialDataset>,
    pub test: SpatialDataset,
}

pub fn fit(
    cfg: &ExperimentConfig,
    model_cfg: &ModelConfig,
    parts: &Partitions,
    seed: u64,
    exec: Exec,
) -> Result<(SpatialModel, LossTrace)> {
    let ds = &parts.train;
    let mut model = build_model(model_cfg, Geometry::of(ds), &ds.coords, seed)?;
    let trace = train(&mut model, ds, parts.val.as_ref(), &cfg.train_config(seed), exec)?;
    Ok((model, trace))
}

/// Effect reports for one estimator variant, one per treatment.
#[derive(Debug, Clone, PartialEq)]
pub struct VariantEffects {
    pub weighted: bool,
    pub reports: Vec<EffectReport>,
    /// Errors against ground truth for treatment 0, when known.
    pub errors: Option<EffectErrors>,
}

impl VariantEffects {
    pub fn to_csv(&self) -> String {
        let mut out = String::from(EFFECTS_CSV_HEADER);
        out.push('\n');
        for r in &self.reports {
            for row in r.csv_rows() {
                out.push_str(&row);
                out.push('\n');
            }
        }
        out
    }
}

fn check_compatible(model: &SpatialModel, ds: &SpatialDataset) -> Result<()> {
    let (g, d) = (model.geometry(), Geometry::of(ds));
    if g != d {
        return Err(config_err!(
            "checkpoint built for M = {}, patch {}x{}, but data has M = {}, patch {}x{}",
            g.m,
            g.patch_rows,
            g.patch_cols,
            d.m,
            d.patch_rows,
            d.patch_cols
        ));
    }
    Ok(())
}

fn surface_effects<S: crate::effects::OutcomeSurface + ?Sized>(
    surface: &S,
    ds: &SpatialDataset,
    m: usize,
    effects: &EffectsConfig,
    weights: Option<&crate::effects::BalancingWeights>,
    seed: u64,
    exec: Exec,
) -> Result<EffectReport> {
    match effects.mode {
        EffectMode::Observed => estimate_effects_observed(surface, ds, m, weights, exec),
        EffectMode::Dose => {
            let grid = treatment_grid(ds, m, effects.grid_size)?;
            let draws = draw_neighbourhoods(ds.n(), effects.draws, seed);
            estimate_effects_dose(surface, ds, m, weights, &grid, &draws, exec)
        }
    }
}

/// Estimates effects on every unit of `ds` for each configured variant.
pub fn estimate(
    effects: &EffectsConfig,
    model: &SpatialModel,
    ds: &SpatialDataset,
    truth: Option<&GroundTruth>,
    seed: u64,
    exec: Exec,
) -> Result<Vec<VariantEffects>> {
    check_compatible(model, ds)?;
    let oracle = truth
        .map(|t| surface_effects(t, ds, 0, effects, None, seed, exec))
        .transpose()?;
    let mut weights = Vec::with_capacity(ds.m);
    if effects.weights.variants().contains(&true) {
        for m in 0..ds.m {
            let gps = fit_gps(ds, m)?;
            let marginal = marginal_density(ds, m)?;
            weights.push(balancing_weights(ds, m, &gps, &marginal, exec)?);
        }
    }
    let mut out = Vec::new();
    for &weighted in effects.weights.variants() {
        let reports = (0..ds.m)
            .map(|m| surface_effects(model, ds, m, effects, weighted.then(|| &weights[m]), seed, exec))
            .collect::<Result<Vec<_>>>()?;
        let errors = oracle.as_ref().map(|o| effect_error(&reports[0], o)).transpose()?;
        out.push(VariantEffects {
            weighted,
            reports,
            errors,
        });
    }
    Ok(out)
}

/// Everything one seed produces.
#[derive(Debug, Clone)]
pub struct SeedOutcome {
    pub seed: u64,
    pub model: SpatialModel,
    pub trace: LossTrace,
    pub effects: Vec<VariantEffects>,
    pub metrics: BTreeMap<String, f64>,
}

/// Trains, estimates and evaluates one seed in memory.
pub fn run_seed(cfg: &ExperimentConfig, data: &LoadedData, seed: u64, exec: Exec) -> Result<SeedOutcome> {
    let parts = partitions(cfg, data)?;
    let (model, trace) = fit(cfg, &cfg.model, &parts, seed, exec)?;
    let effects = estimate(&cfg.effects, &model, &data.dataset, data.truth.as_ref(), seed, exec)?;
    let metrics = evaluate(&model, &parts.test, exec)?;
    Ok(SeedOutcome {
        seed,
        model,
        trace,
        effects,
        metrics,
    })
}

/// Mean and sample standard deviation; the deviation is 0 for one value.
pub fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    if v.len() < 2 {
        return (mean, 0.0);
    }
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

pub const ERRORS_CSV_HEADER: &str = "seed,de_err,ie_err,te_err";

/// Per-seed rows followed by a `summary` row of `mean±std` cells.
pub fn errors_csv(rows: &[(u64, EffectErrors)]) -> String {
    let mut out = format!("{ERRORS_CSV_HEADER}\n");
    for (s, e) in rows {
        out.push_str(&format!("{s},{:.17e},{:.17e},{:.17e}\n", e.de, e.ie, e.te));
    }
    if !rows.is_empty() {
        let cell = |f: fn(&EffectErrors) -> f64| {
            let (m, s) = mean_std(&rows.iter().map(|(_, e)| f(e)).collect::<Vec<_>>());
            format!("{m:.6}±{s:.6}")
        };
        out.push_str(&format!("summary,{},{},{}\n", cell(|e| e.de), cell(|e| e.ie), cell(|e| e.te)));
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedReport {
    pub seed: u64,
    pub metrics: BTreeMap<String, f64>,
    pub epochs_run: usize,
    pub best_epoch: usize,
    pub final_train_mse: f64,
    /// Keyed by variant name.
    pub errors: BTreeMap<String, EffectErrors>,
    pub wall_clock_secs: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorSummary {
    pub mean: EffectErrors,
    pub std: EffectErrors,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub config_hash: String,
    pub seeds: Vec<SeedReport>,
    pub summary: BTreeMap<String, ErrorSummary>,
    pub wall_clock_secs: f64,
}

impl RunReport {
    pub fn new(config_hash: String, seeds: Vec<SeedReport>, wall_clock_secs: f64) -> Self {
        let mut summary = BTreeMap::new();
        let names: Vec<String> = seeds.iter().flat_map(|s| s.errors.keys().cloned()).collect();
        for name in names {
            if summary.contains_key(&name) {
                continue;
            }
            let es: Vec<EffectErrors> = seeds.iter().filter_map(|s| s.errors.get(&name).copied()).collect();
            let col = |f: fn(&EffectErrors) -> f64| mean_std(&es.iter().map(f).collect::<Vec<_>>());
            let (de, ie, te) = (col(|e| e.de), col(|e| e.ie), col(|e| e.te));
            summary.insert(
                name,
                ErrorSummary {
                    mean: EffectErrors {
                        de: de.0,
                        ie: ie.0,
                        te: te.0,
                    },
                    std: EffectErrors {
                        de: de.1,
                        ie: ie.1,
                        te: te.1,
                    },
                },
            );
        }
        Self {
            config_hash,
            seeds,
            summary,
            wall_clock_secs,
        }
    }
}

fn write_json<T: Serialize>(path: &Path, v: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(v).map_err(|e| data_err!("json: {e}"))?;
    fs::write(path, text + "\n")?;
    Ok(())
}

/// Disk-backed pipeline stages over the seeds of one config.
#[derive(Debug, Clone)]
pub struct Pipeline {
    pub cfg: ExperimentConfig,
    pub layout: Layout,
    pub exec: Exec,
}

impl Pipeline {
    pub fn new(cfg: ExperimentConfig, exec: Exec) -> Self {
        let layout = Layout::new(cfg.run.out.clone());
        Self { cfg, layout, exec }
    }

    pub fn seeds(&self) -> &[u64] {
        &self.cfg.run.seeds
    }

    pub fn gen(&self, seed: u64) -> Result<()> {
        if self.cfg.data.kind == DataKind::Manifest {
            log::info!("manifest data needs no generation");
            return Ok(());
        }
        let g = generate(&self.cfg.data, seed)?;
        write_generated(&g, &self.layout.data_dir(seed), seed)
    }

    pub fn train(&self, seed: u64) -> Result<LossTrace> {
        let data = load_data(&self.cfg, &self.layout, seed)?;
        let parts = partitions(&self.cfg, &data)?;
        let (model, trace) = fit(&self.cfg, &self.cfg.model, &parts, seed, self.exec)?;
        let dir = self.layout.run_dir(seed);
        fs::create_dir_all(&dir)?;
        fs::write(self.layout.checkpoint(seed), model.to_bytes()?)?;
        fs::write(dir.join("loss.csv"), trace.to_csv())?;
        Ok(trace)
    }

    fn load_model(&self, seed: u64) -> Result<SpatialModel> {
        SpatialModel::from_bytes(&fs::read(self.layout.checkpoint(seed))?)
    }

    /// Writes the effect CSVs for `seed` and returns its variants.
    pub fn effects(&self, seed: u64) -> Result<Vec<VariantEffects>> {
        let data = load_data(&self.cfg, &self.layout, seed)?;
        let model = self.load_model(seed)?;
        let variants = estimate(&self.cfg.effects, &model, &data.dataset, data.truth.as_ref(), seed, self.exec)?;
        fs::create_dir_all(self.layout.run_dir(seed))?;
        for v in &variants {
            fs::write(self.layout.effects_csv(seed, v.weighted), v.to_csv())?;
        }
        Ok(variants)
    }

    /// Writes the across-seed error tables for whichever variants have
    /// ground truth.
    pub fn write_errors(&self, per_seed: &[(u64, Vec<VariantEffects>)]) -> Result<()> {
        for &weighted in self.cfg.effects.weights.variants() {
            let rows: Vec<(u64, EffectErrors)> = per_seed
                .iter()
                .filter_map(|(s, vs)| vs.iter().find(|v| v.weighted == weighted).and_then(|v| v.errors).map(|e| (*s, e)))
                .collect();
            if !rows.is_empty() {
                fs::create_dir_all(&self.layout.root)?;
                fs::write(self.layout.errors_csv(weighted), errors_csv(&rows))?;
            }
        }
        Ok(())
    }

    pub fn eval(&self, seed: u64) -> Result<BTreeMap<String, f64>> {
        let data = load_data(&self.cfg, &self.layout, seed)?;
        let model = self.load_model(seed)?;
        let parts = partitions(&self.cfg, &data)?;
        check_compatible(&model, &parts.test)?;
        let metrics = evaluate(&model, &parts.test, self.exec)?;
        fs::create_dir_all(self.layout.run_dir(seed))?;
        write_json(&self.layout.run_dir(seed).join("metrics.json"), &metrics)?;
        Ok(metrics)
    }

    /// Runs every stage for every seed and writes `report.json`.
    pub fn run_all(&self) -> Result<RunReport> {
        let start = std::time::Instant::now();
        let mut per_seed = Vec::new();
        let mut reports = Vec::new();
        for &seed in self.seeds() {
            let t0 = std::time::Instant::now();
            self.gen(seed)?;
            let trace = self.train(seed)?;
            let variants = self.effects(seed)?;
            let metrics = self.eval(seed)?;
            let errors = variants
                .iter()
                .filter_map(|v| v.errors.map(|e| (variant_name(v.weighted).to_string(), e)))
                .collect();
            reports.push(SeedReport {
                seed,
                metrics,
                epochs_run: trace.epochs.len(),
                best_epoch: trace.best_epoch,
                final_train_mse: trace.epochs.last().map_or(f64::NAN, |e| e.train_mse),
                errors,
                wall_clock_secs: t0.elapsed().as_secs_f64(),
            });
            per_seed.push((seed, variants));
        }
        self.write_errors(&per_seed)?;
        let report = RunReport::new(self.cfg.hash(), reports, start.elapsed().as_secs_f64());
        write_json(&self.layout.root.join("report.json"), &report)?;
        Ok(report)
    }
}
