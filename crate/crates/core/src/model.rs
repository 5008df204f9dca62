//! Additive spatial outcome model
//!
//! `ŷ = Σ_m α_m t_m + Σ_m f_m(t̄_m) + g(x) + U(s)`
//!
//! with one interference network `f_m` per treatment, a confounder network
//! `g`, and an optional inducing-point GP term `U`.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::codec::{Reader, Writer};
use crate::dataset::SpatialDataset;
use crate::error::{config_err, contract_err, data_err, dim_err, numeric_err, Error, Result};
use crate::gp::{select_inducing, GpTerm, InducingSet, InducingStrategy, KernelFamily, KernelSpec, NystromMap};
use crate::nets::{CnnSpec, MlpSpec, NetSpec, Network, UnetSpec};
use crate::par::{self, Exec};
use crate::rng;
use crate::tensor::{Optimizer, OptimizerKind, Tape, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum InterferenceKind {
    /// No interference term.
    None,
    /// Trainable weighted sum of the patch.
    Linear,
    Mlp { width: usize, depth: usize },
    Cnn { channels: usize, depth: usize, kernel_size: usize },
    Unet { depth: usize, padding: usize, base_channels: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ConfounderKind {
    Linear,
    Mlp { width: usize, depth: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GpConfig {
    pub kernel: KernelSpec,
    pub q: usize,
    pub strategy: InducingStrategy,
    #[serde(default)]
    pub train_lengthscale: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub interference: InterferenceKind,
    pub confounder: ConfounderKind,
    #[serde(default)]
    pub gp: Option<GpConfig>,
}

/// Input geometry a model is built for.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Geometry {
    pub m: usize,
    pub x_dim: usize,
    pub coord_dim: usize,
    pub patch_rows: usize,
    pub patch_cols: usize,
}

impl Geometry {
    pub fn of(ds: &SpatialDataset) -> Self {
        Self {
            m: ds.m,
            x_dim: ds.x_dim,
            coord_dim: ds.coord_dim,
            patch_rows: ds.patch_rows,
            patch_cols: ds.patch_cols,
        }
    }

    fn patch_len(&self) -> usize {
        self.patch_rows * self.patch_cols
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SpatialModel {
    geom: Geometry,
    alphas: Tensor,
    interference: Vec<Option<Network>>,
    confounder: Network,
    gp: Option<GpTerm>,
    sigma_eps: f64,
}

/// Counterfactual replacements applied to one unit's inputs.
#[derive(Debug, Clone, Default)]
pub struct Overrides<'a> {
    pub t: Vec<(usize, f64)>,
    pub patch: Vec<(usize, &'a [f64])>,
}

/// Prediction split into its additive parts.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Prediction {
    pub y: f64,
    pub direct: f64,
    pub interference: f64,
    pub confounder: f64,
    pub gp: f64,
}

fn interference_spec(kind: InterferenceKind, g: &Geometry) -> Option<NetSpec> {
    let side = g.patch_rows.max(g.patch_cols);
    match kind {
        InterferenceKind::None => None,
        InterferenceKind::Linear => Some(NetSpec::LinearInterference {
            rows: g.patch_rows,
            cols: g.patch_cols,
        }),
        InterferenceKind::Mlp { width, depth } => Some(NetSpec::Mlp(MlpSpec {
            in_dim: g.patch_len(),
            out_dim: 1,
            width,
            depth,
        })),
        InterferenceKind::Cnn {
            channels,
            depth,
            kernel_size,
        } => Some(NetSpec::Cnn(CnnSpec {
            in_channels: 1,
            channels,
            depth,
            kernel_size,
            input_side: side.max(kernel_size),
        })),
        InterferenceKind::Unet {
            depth,
            padding,
            base_channels,
        } => Some(NetSpec::Unet(UnetSpec {
            in_channels: 1,
            depth,
            padding,
            base_channels,
            input_side: side,
        })),
    }
}

/// Builds an untrained model for `geom`. Networks get seeds derived from
/// `seed` so that each component is reproducible on its own.
pub fn build_model(config: &ModelConfig, geom: Geometry, coords: &[f64], seed: u64) -> Result<SpatialModel> {
    if geom.m == 0 || geom.x_dim == 0 || geom.coord_dim == 0 || geom.patch_len() == 0 {
        return Err(config_err!("model geometry must be positive: {geom:?}"));
    }
    let mut interference = Vec::with_capacity(geom.m);
    for m in 0..geom.m {
        let net = match interference_spec(config.interference, &geom) {
            Some(spec) => Some(Network::build(spec, seed.wrapping_add(1000 + m as u64)).map_err(as_config)?),
            None => None,
        };
        interference.push(net);
    }
    let conf_spec = match config.confounder {
        ConfounderKind::Linear => NetSpec::LinearMap { in_dim: geom.x_dim },
        ConfounderKind::Mlp { width, depth } => NetSpec::Mlp(MlpSpec {
            in_dim: geom.x_dim,
            out_dim: 1,
            width,
            depth,
        }),
    };
    let confounder = Network::build(conf_spec, seed.wrapping_add(2000)).map_err(as_config)?;
    let gp = match &config.gp {
        Some(g) => {
            let ind = select_inducing(coords, geom.coord_dim, g.q, g.strategy, seed.wrapping_add(3000))?;
            Some(GpTerm::new(NystromMap::build(ind, g.kernel)?, g.train_lengthscale))
        }
        None => None,
    };
    Ok(SpatialModel {
        geom,
        alphas: Tensor::zeros(&[geom.m, 1]).with_grad(),
        interference,
        confounder,
        gp,
        sigma_eps: 0.0,
    })
}

fn as_config(e: Error) -> Error {
    match e {
        Error::Config(_) => e,
        other => config_err!("{other}"),
    }
}

/// Bound tape handles of every parameter.
struct Bound {
    alpha: Var,
    inter: Vec<Option<Vec<Var>>>,
    conf: Vec<Var>,
    gp: Vec<Var>,
}

/// Inputs of a batch of units, gathered into contiguous buffers.
struct Batch {
    n: usize,
    t: Vec<f64>,
    patches: Vec<Vec<f64>>,
    x: Vec<f64>,
    coords: Vec<f64>,
    z: Option<Vec<f64>>,
    y: Vec<f64>,
}

impl SpatialModel {
    pub fn geometry(&self) -> Geometry {
        self.geom
    }

    pub fn alphas(&self) -> &[f64] {
        self.alphas.data()
    }

    pub fn set_alphas(&mut self, a: &[f64]) -> Result<()> {
        if a.len() != self.geom.m {
            return Err(dim_err!("{} coefficients for M = {}", a.len(), self.geom.m));
        }
        self.alphas.data_mut().copy_from_slice(a);
        Ok(())
    }

    pub fn interference_net(&self, m: usize) -> Option<&Network> {
        self.interference.get(m).and_then(Option::as_ref)
    }

    pub fn interference_net_mut(&mut self, m: usize) -> Option<&mut Network> {
        self.interference.get_mut(m).and_then(Option::as_mut)
    }

    pub fn confounder_net(&self) -> &Network {
        &self.confounder
    }

    pub fn confounder_net_mut(&mut self) -> &mut Network {
        &mut self.confounder
    }

    pub fn gp_term(&self) -> Option<&GpTerm> {
        self.gp.as_ref()
    }

    pub fn gp_term_mut(&mut self) -> Option<&mut GpTerm> {
        self.gp.as_mut()
    }

    pub fn sigma_eps(&self) -> f64 {
        self.sigma_eps
    }

    /// Sets coefficients, network parameters and GP weights to zero.
    pub fn zero(&mut self) {
        self.alphas.data_mut().iter_mut().for_each(|v| *v = 0.0);
        for n in self.interference.iter_mut().flatten() {
            n.zero();
        }
        self.confounder.zero();
        if let Some(gp) = &mut self.gp {
            let q = gp.map().q();
            gp.set_weights(&vec![0.0; q]).expect("length q");
        }
    }

    pub fn param_count(&self) -> usize {
        self.params().iter().map(|p| p.len()).sum()
    }

    fn params(&self) -> Vec<&Tensor> {
        let mut v = vec![&self.alphas];
        for n in self.interference.iter().flatten() {
            v.extend(n.params());
        }
        v.extend(self.confounder.params());
        if let Some(gp) = &self.gp {
            v.extend(gp.params());
        }
        v
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut v = vec![&mut self.alphas];
        for n in self.interference.iter_mut().flatten() {
            v.extend(n.params_mut().iter_mut());
        }
        v.extend(self.confounder.params_mut().iter_mut());
        if let Some(gp) = &mut self.gp {
            v.extend(gp.params_mut());
        }
        v
    }

    fn bind<'p>(&'p self, tape: &mut Tape<'p>) -> Bound {
        Bound {
            alpha: tape.leaf(&self.alphas),
            inter: self.interference.iter().map(|n| n.as_ref().map(|n| n.bind(tape))).collect(),
            conf: self.confounder.bind(tape),
            gp: self.gp.as_ref().map(|g| g.bind(tape)).unwrap_or_default(),
        }
    }

    fn check(&self, ds: &SpatialDataset) -> Result<()> {
        let g = Geometry::of(ds);
        if g != self.geom {
            return Err(dim_err!("dataset geometry {g:?} does not match model {:?}", self.geom));
        }
        Ok(())
    }

    fn gather(&self, ds: &SpatialDataset, idx: &[usize], z_all: Option<&[f64]>) -> Batch {
        let q = self.gp.as_ref().map_or(0, |g| g.map().q());
        Batch {
            n: idx.len(),
            t: idx.iter().flat_map(|&i| (0..ds.m).map(move |m| ds.treatment(i, m))).collect(),
            patches: (0..ds.m)
                .map(|m| idx.iter().flat_map(|&i| ds.patch(m, i).iter().copied()).collect())
                .collect(),
            x: idx.iter().flat_map(|&i| ds.x_row(i).iter().copied()).collect(),
            coords: idx.iter().flat_map(|&i| ds.coord(i).iter().copied()).collect(),
            z: z_all.map(|z| idx.iter().flat_map(|&i| z[i * q..(i + 1) * q].iter().copied()).collect()),
            y: idx.iter().map(|&i| ds.y[i].unwrap_or(0.0)).collect(),
        }
    }

    fn forward(&self, tape: &mut Tape<'_>, b: &Bound, batch: &Batch) -> Result<Var> {
        let g = &self.geom;
        let t = tape.constant(batch.t.clone(), &[batch.n, g.m])?;
        let mut y = tape.matmul(t, b.alpha)?;
        for m in 0..g.m {
            if let (Some(net), Some(p)) = (&self.interference[m], &b.inter[m]) {
                let patch = tape.constant(batch.patches[m].clone(), &[batch.n, 1, g.patch_rows, g.patch_cols])?;
                let f = net.forward(tape, p, patch)?;
                y = tape.add(y, f)?;
            }
        }
        let x = tape.constant(batch.x.clone(), &[batch.n, g.x_dim])?;
        let gx = self.confounder.forward(tape, &b.conf, x)?;
        y = tape.add(y, gx)?;
        if let Some(gp) = &self.gp {
            let u = match &batch.z {
                Some(z) => {
                    let zv = tape.constant(z.clone(), &[batch.n, gp.map().q()])?;
                    gp.forward_features(tape, &b.gp, zv)?
                }
                None => gp.forward(tape, &b.gp, &batch.coords)?,
            };
            y = tape.add(y, u)?;
        }
        Ok(y)
    }

    /// Interference contribution `f_m(patch)` for `count` patches laid out
    /// back to back.
    pub fn interference_values(&self, m: usize, patches: &[f64], exec: Exec) -> Result<Vec<f64>> {
        let k = self.geom.patch_len();
        if patches.len() % k != 0 {
            return Err(dim_err!("patch buffer of {} values is not a multiple of {k}", patches.len()));
        }
        let count = patches.len() / k;
        let Some(net) = self.interference_net(m) else {
            return Ok(vec![0.0; count]);
        };
        let (r, c) = (self.geom.patch_rows, self.geom.patch_cols);
        let chunks = par::chunks(count, EVAL_CHUNK);
        let parts = par::map_slice(exec, &chunks, |rg| {
            net.eval(&patches[rg.start * k..rg.end * k], &[rg.len(), 1, r, c])
        });
        Ok(parts.into_iter().collect::<Result<Vec<_>>>()?.concat())
    }

    /// `g(x_i)` for every unit of `ds`.
    pub fn confounder_values(&self, ds: &SpatialDataset, exec: Exec) -> Result<Vec<f64>> {
        self.check(ds)?;
        let d = ds.x_dim;
        let parts = par::map_slice(exec, &par::chunks(ds.n(), EVAL_CHUNK), |rg| {
            self.confounder.eval(&ds.x[rg.start * d..rg.end * d], &[rg.len(), d])
        });
        Ok(parts.into_iter().collect::<Result<Vec<_>>>()?.concat())
    }

    /// `U(s_i)` for every unit (zeros without a GP term).
    pub fn gp_values(&self, ds: &SpatialDataset, exec: Exec) -> Result<Vec<f64>> {
        match &self.gp {
            Some(gp) => gp.values(&ds.coords, exec),
            None => Ok(vec![0.0; ds.n()]),
        }
    }

    /// Prediction for one unit with optional counterfactual inputs. The
    /// dataset is not modified.
    pub fn predict(&self, ds: &SpatialDataset, unit: usize, ov: &Overrides<'_>) -> Result<Prediction> {
        self.check(ds)?;
        if unit >= ds.n() {
            return Err(dim_err!("unit {unit} out of range for {} units", ds.n()));
        }
        let g = &self.geom;
        let mut direct = 0.0;
        let mut interference = 0.0;
        for m in 0..g.m {
            let t = ov.t.iter().rev().find(|(k, _)| *k == m).map_or(ds.treatment(unit, m), |(_, v)| *v);
            direct += self.alphas.data()[m] * t;
            let patch = ov.patch.iter().rev().find(|(k, _)| *k == m).map_or(ds.patch(m, unit), |(_, p)| p);
            if patch.len() != g.patch_len() {
                return Err(dim_err!("override patch of {} values, expected {}", patch.len(), g.patch_len()));
            }
            if self.interference[m].is_some() {
                interference += self.interference_values(m, patch, Exec::Sequential)?[0];
            }
        }
        let confounder = self.confounder.eval(ds.x_row(unit), &[1, g.x_dim])?[0];
        let gp = match &self.gp {
            Some(t) => t.value(ds.coord(unit))?,
            None => 0.0,
        };
        Ok(Prediction {
            y: direct + interference + confounder + gp,
            direct,
            interference,
            confounder,
            gp,
        })
    }

    /// Predictions at observed inputs for all units.
    pub fn predict_all(&self, ds: &SpatialDataset, exec: Exec) -> Result<Vec<f64>> {
        self.check(ds)?;
        let mut y = self.confounder_values(ds, exec)?;
        let u = self.gp_values(ds, exec)?;
        for m in 0..ds.m {
            let f = self.interference_values(m, &ds.patches[m], exec)?;
            let a = self.alphas.data()[m];
            for i in 0..ds.n() {
                y[i] += a * ds.treatment(i, m) + f[i];
            }
        }
        y.iter_mut().zip(u).for_each(|(v, u)| *v += u);
        Ok(y)
    }
}

const EVAL_CHUNK: usize = 256;
const TRAIN_CHUNK: usize = 32;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    /// Explicit optimizer; `None` picks SGD with momentum 0.99 without a GP
    /// term and Adam with one, both at `lr`.
    #[serde(default)]
    pub optimizer: Option<OptimizerKind>,
    pub lr: f64,
    pub epochs: usize,
    /// `0` means full batch.
    #[serde(default)]
    pub batch_size: usize,
    pub seed: u64,
    #[serde(default = "default_patience")]
    pub patience: usize,
}

fn default_patience() -> usize {
    20
}

impl TrainConfig {
    pub fn new(lr: f64, epochs: usize, batch_size: usize, seed: u64) -> Self {
        Self {
            optimizer: None,
            lr,
            epochs,
            batch_size,
            seed,
            patience: default_patience(),
        }
    }

    pub fn optimizer_for(&self, model: &SpatialModel) -> OptimizerKind {
        self.optimizer.unwrap_or(if model.gp.is_some() {
            OptimizerKind::adam(self.lr)
        } else {
            OptimizerKind::sgd(self.lr, 0.99)
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochLoss {
    pub epoch: usize,
    pub train_mse: f64,
    pub val_mse: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossTrace {
    pub epochs: Vec<EpochLoss>,
    /// Epoch whose parameters were kept (last epoch without validation).
    pub best_epoch: usize,
    pub stopped_early: bool,
}

impl LossTrace {
    /// `epoch,train_mse,val_mse` with an empty field when no validation set.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("epoch,train_mse,val_mse\n");
        for e in &self.epochs {
            let v = e.val_mse.map(|v| format!("{v:.17e}")).unwrap_or_default();
            s.push_str(&format!("{},{:.17e},{}\n", e.epoch, e.train_mse, v));
        }
        s
    }
}

/// Minimizes mean squared error over units with observed `y`.
///
/// Each batch is split into fixed chunks of units whose gradients are
/// summed in chunk order, so results do not depend on `exec`.
pub fn train(
    model: &mut SpatialModel,
    ds: &SpatialDataset,
    val: Option<&SpatialDataset>,
    cfg: &TrainConfig,
    exec: Exec,
) -> Result<LossTrace> {
    model.check(ds)?;
    if let Some(v) = val {
        model.check(v)?;
    }
    if cfg.epochs == 0 {
        return Err(contract_err!("training needs at least one epoch"));
    }
    if !(cfg.lr > 0.0) {
        return Err(contract_err!("learning rate must be positive"));
    }
    let mut units = ds.observed();
    if units.is_empty() {
        return Err(data_err!("no units with an observed outcome"));
    }
    let val_units = val.map(|v| v.observed()).filter(|u| !u.is_empty());
    let mut opt = Optimizer::new(cfg.optimizer_for(model));
    let mut rng = rng::stream(cfg.seed, "shuffle");
    let bs = if cfg.batch_size == 0 { units.len() } else { cfg.batch_size.min(units.len()) };
    let mut z_cache = feature_cache(model, ds, exec)?;

    let mut trace = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(f64, usize, SpatialModel)> = None;
    let mut since_best = 0;
    let mut stopped_early = false;
    for epoch in 1..=cfg.epochs {
        units.shuffle(&mut rng);
        let mut sse = 0.0;
        for batch_idx in units.chunks(bs) {
            let chunks = par::chunks(batch_idx.len(), TRAIN_CHUNK);
            let model_ref: &SpatialModel = model;
            let z_ref = z_cache.as_deref();
            let results = par::map_slice(exec, &chunks, |rg| {
                chunk_grads(model_ref, ds, &batch_idx[rg.clone()], z_ref, batch_idx.len())
            });
            let mut params = model.params_mut();
            params.iter_mut().for_each(|p| p.zero_grad());
            for r in results {
                let (chunk_sse, grads) = r.map_err(|e| at_epoch(e, epoch))?;
                sse += chunk_sse;
                for (p, g) in params.iter_mut().zip(&grads) {
                    if let Some(g) = g {
                        p.accumulate_grad(g).map_err(|e| at_epoch(e, epoch))?;
                    }
                }
            }
            for p in params.iter_mut() {
                if p.requires_grad() && p.grad().is_none() {
                    let zeros = vec![0.0; p.len()];
                    p.accumulate_grad(&zeros)?;
                }
            }
            opt.step(&mut params).map_err(|e| at_epoch(e, epoch))?;
            if let Some(gp) = &mut model.gp {
                if gp.trains_lengthscale() {
                    gp.refresh().map_err(|e| at_epoch(e, epoch))?;
                    z_cache = None;
                }
            }
        }
        let train_mse = sse / units.len() as f64;
        if !train_mse.is_finite() {
            return Err(numeric_err!("training diverged at epoch {epoch}"));
        }
        let val_mse = match (&val_units, val) {
            (Some(vu), Some(v)) => Some(mse_on(model, v, vu, exec).map_err(|e| at_epoch(e, epoch))?),
            _ => None,
        };
        trace.push(EpochLoss {
            epoch,
            train_mse,
            val_mse,
        });
        if let Some(vm) = val_mse {
            if best.as_ref().is_none_or(|(b, _, _)| vm < *b) {
                best = Some((vm, epoch, model.clone()));
                since_best = 0;
            } else {
                since_best += 1;
                if since_best >= cfg.patience {
                    stopped_early = true;
                    break;
                }
            }
        }
    }
    let best_epoch = match best {
        Some((_, e, m)) => {
            *model = m;
            e
        }
        None => trace.len(),
    };
    let train_units = ds.observed();
    let pred = model.predict_all(ds, exec)?;
    let resid: Vec<f64> = train_units.iter().map(|&i| ds.y[i].unwrap() - pred[i]).collect();
    model.sigma_eps = std_dev(&resid);
    Ok(LossTrace {
        epochs: trace,
        best_epoch,
        stopped_early,
    })
}

fn at_epoch(e: Error, epoch: usize) -> Error {
    match e {
        Error::Numeric(msg) => numeric_err!("epoch {epoch}: {msg}"),
        other => other,
    }
}

fn feature_cache(model: &SpatialModel, ds: &SpatialDataset, exec: Exec) -> Result<Option<Vec<f64>>> {
    match &model.gp {
        Some(gp) if !gp.trains_lengthscale() => Ok(Some(gp.map().features(&ds.coords, exec)?)),
        _ => Ok(None),
    }
}

type ChunkGrads = (f64, Vec<Option<Vec<f64>>>);

fn chunk_grads(model: &SpatialModel, ds: &SpatialDataset, idx: &[usize], z: Option<&[f64]>, batch_len: usize) -> Result<ChunkGrads> {
    let batch = model.gather(ds, idx, z);
    let mut tape = Tape::new();
    let bound = model.bind(&mut tape);
    let pred = model.forward(&mut tape, &bound, &batch)?;
    let y = tape.constant(batch.y.clone(), &[batch.n, 1])?;
    let mse = tape.mse(pred, y)?;
    let loss = tape.scale(mse, batch.n as f64 / batch_len as f64)?;
    let sse = tape.value(mse)[0] * batch.n as f64;
    let grads = tape.backward(loss)?;
    let mut vars = vec![bound.alpha];
    for p in bound.inter.iter().flatten() {
        vars.extend(p);
    }
    vars.extend(&bound.conf);
    vars.extend(&bound.gp);
    Ok((sse, vars.iter().map(|v| grads.get(*v).map(<[f64]>::to_vec)).collect()))
}

fn mse_on(model: &SpatialModel, ds: &SpatialDataset, units: &[usize], exec: Exec) -> Result<f64> {
    let pred = model.predict_all(ds, exec)?;
    Ok(units.iter().map(|&i| (ds.y[i].unwrap() - pred[i]).powi(2)).sum::<f64>() / units.len() as f64)
}

fn std_dev(v: &[f64]) -> f64 {
    if v.len() < 2 {
        return 0.0;
    }
    let mean = v.iter().sum::<f64>() / v.len() as f64;
    (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (v.len() - 1) as f64).sqrt()
}

/// Linear-interpolation percentile (`p` in `[0, 100]`) of unsorted data.
pub fn percentile(values: &[f64], p: f64) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    if v.len() == 1 {
        return v[0];
    }
    let pos = p / 100.0 * (v.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    v[lo] + (v[hi] - v[lo]) * (pos - lo as f64)
}

/// R² and MAE of `pred` against `y`. R² is absent when `y` is constant and
/// the residuals are not all zero.
pub fn r2_mae(y: &[f64], pred: &[f64]) -> (Option<f64>, f64) {
    let n = y.len() as f64;
    let mean = y.iter().sum::<f64>() / n;
    let ss_tot: f64 = y.iter().map(|v| (v - mean).powi(2)).sum();
    let ss_res: f64 = y.iter().zip(pred).map(|(a, b)| (a - b).powi(2)).sum();
    let mae = y.iter().zip(pred).map(|(a, b)| (a - b).abs()).sum::<f64>() / n;
    let r2 = if ss_tot > 0.0 {
        Some(1.0 - ss_res / ss_tot)
    } else if ss_res == 0.0 {
        Some(1.0)
    } else {
        None
    };
    (r2, mae)
}

/// R² and MAE overall and in three bands of treatment 1 split at its 30th
/// and 70th percentiles. Keys: `r2_*`, `mae_*` for `low`, `mid`, `high`,
/// `all`; empty bands are omitted.
pub fn evaluate(model: &SpatialModel, ds: &SpatialDataset, exec: Exec) -> Result<BTreeMap<String, f64>> {
    let units = ds.observed();
    if units.is_empty() {
        return Err(data_err!("no units with an observed outcome"));
    }
    let pred = model.predict_all(ds, exec)?;
    Ok(stratified_metrics(ds, &units, &pred))
}

pub fn stratified_metrics(ds: &SpatialDataset, units: &[usize], pred: &[f64]) -> BTreeMap<String, f64> {
    let t: Vec<f64> = units.iter().map(|&i| ds.treatment(i, 0)).collect();
    let p30 = percentile(&t, 30.0);
    let p70 = percentile(&t, 70.0);
    let mut out = BTreeMap::new();
    let bands: [(&str, Box<dyn Fn(f64) -> bool>); 4] = [
        ("low", Box::new(move |v| v < p30)),
        ("mid", Box::new(move |v| (p30..=p70).contains(&v))),
        ("high", Box::new(move |v| v > p70)),
        ("all", Box::new(|_| true)),
    ];
    for (name, keep) in bands {
        let sel: Vec<usize> = units.iter().copied().filter(|&i| keep(ds.treatment(i, 0))).collect();
        if sel.is_empty() {
            continue;
        }
        let y: Vec<f64> = sel.iter().map(|&i| ds.y[i].unwrap()).collect();
        let p: Vec<f64> = sel.iter().map(|&i| pred[i]).collect();
        let (r2, mae) = r2_mae(&y, &p);
        if let Some(r2) = r2 {
            out.insert(format!("r2_{name}"), r2);
        }
        out.insert(format!("mae_{name}"), mae);
    }
    out
}

// Checkpoint: "SCK1" | u32 M, x_dim, coord_dim, patch_rows, patch_cols |
// f64 vec alphas | per treatment u8 flag (+ NET1 block) | NET1 confounder |
// u8 gp flag (+ u8 family, f64 sigma, l, noise, u8 train_l, u32 dim,
// f64 vec inducing points, f64 vec weights) | f64 sigma_eps
impl SpatialModel {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut w = Writer::new();
        w.bytes(b"SCK1");
        let g = &self.geom;
        for d in [g.m, g.x_dim, g.coord_dim, g.patch_rows, g.patch_cols] {
            w.dim(d)?;
        }
        w.f64_vec(self.alphas.data());
        for net in &self.interference {
            match net {
                Some(n) => {
                    w.u8(1);
                    n.encode(&mut w)?;
                }
                None => w.u8(0),
            }
        }
        self.confounder.encode(&mut w)?;
        match &self.gp {
            Some(gp) => {
                w.u8(1);
                let k = gp.map().kernel();
                w.u8(match k.family {
                    KernelFamily::Rbf => 0,
                    KernelFamily::Exponential => 1,
                });
                w.f64(k.sigma);
                w.f64(k.lengthscale);
                w.f64(k.noise);
                w.u8(gp.trains_lengthscale() as u8);
                w.dim(gp.map().dim())?;
                w.f64_vec(&gp.map().inducing().points);
                w.f64_vec(gp.weights().data());
            }
            None => w.u8(0),
        }
        w.f64(self.sigma_eps);
        Ok(w.into_inner())
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        let mut r = Reader::new(buf);
        r.magic(b"SCK1")?;
        let geom = Geometry {
            m: r.dim("M")?,
            x_dim: r.dim("x_dim")?,
            coord_dim: r.dim("coord_dim")?,
            patch_rows: r.dim("patch_rows")?,
            patch_cols: r.dim("patch_cols")?,
        };
        let at = r.offset();
        let alphas = r.f64_vec()?;
        if alphas.len() != geom.m {
            return Err(Error::Format {
                offset: at,
                message: format!("{} coefficients for M = {}", alphas.len(), geom.m),
            });
        }
        let mut interference = Vec::with_capacity(geom.m);
        for _ in 0..geom.m {
            interference.push(match r.u8()? {
                0 => None,
                1 => Some(Network::decode(&mut r)?),
                f => return Err(r.error(format!("bad interference flag {f}"))),
            });
        }
        let confounder = Network::decode(&mut r)?;
        let gp = match r.u8()? {
            0 => None,
            1 => {
                let family = match r.u8()? {
                    0 => KernelFamily::Rbf,
                    1 => KernelFamily::Exponential,
                    f => return Err(r.error(format!("bad kernel family {f}"))),
                };
                let kernel = KernelSpec {
                    family,
                    sigma: r.f64()?,
                    lengthscale: r.f64()?,
                    noise: r.f64()?,
                };
                let train_l = r.u8()? == 1;
                let dim = r.dim("inducing dim")?;
                let points = r.f64_vec()?;
                let weights = r.f64_vec()?;
                let map = NystromMap::build(InducingSet { dim, points }, kernel)?;
                let mut term = GpTerm::new(map, train_l);
                term.set_weights(&weights).map_err(|e| r.error(e.to_string()))?;
                Some(term)
            }
            f => return Err(r.error(format!("bad gp flag {f}"))),
        };
        let sigma_eps = r.f64()?;
        r.finish()?;
        let mut a = Tensor::zeros(&[geom.m, 1]).with_grad();
        a.data_mut().copy_from_slice(&alphas);
        Ok(SpatialModel {
            geom,
            alphas: a,
            interference,
            confounder,
            gp,
            sigma_eps,
        })
    }
}
