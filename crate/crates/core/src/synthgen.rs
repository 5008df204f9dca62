//! Synthetic and semi-synthetic data with known potential outcomes.
//!
//! Two generators share one [`GroundTruth`] representation:
//!
//! * a line graph of `N` nodes with a two-node neighbourhood, where the
//!   unobserved confounder drives both treatment and outcome, and
//! * a raster grid with a `d_S × d_S` distance-weighted neighbourhood and a
//!   spline response to the weighted neighbourhood sum.
//!
//! Both write their data through [`crate::raster`], so a generated dataset
//! equals the one extracted from the files it was saved to.

use std::f64::consts::PI;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::codec::{Reader, Writer};
use crate::dataset::SpatialDataset;
use crate::effects::{draw_neighbourhoods, estimate_effects_dose, EffectReport, OutcomeSurface};
use crate::error::{config_err, contract_err, data_err, dim_err, Result};
use crate::gp::{GpSampler, KernelSpec};
use crate::linalg::{cholesky_jittered, lower_mul_vec};
use crate::model::Overrides;
use crate::nets::{MlpSpec, NetSpec, Network};
use crate::par::Exec;
use crate::raster::{self, Boundary, Geometry, Grid};
use crate::rng;

const RANDOM_FN_WIDTH: usize = 64;
const RANDOM_FN_DEPTH: usize = 2;
const RANDOM_FN_BIAS: f64 = 0.1;

/// A frozen randomly initialized ReLU network `R^in_dim → R`.
#[derive(Debug, Clone, PartialEq)]
pub struct RandomFn {
    net: Network,
}

impl RandomFn {
    fn from_rng(r: &mut ChaCha8Rng, in_dim: usize) -> Self {
        let spec = NetSpec::Mlp(MlpSpec {
            in_dim,
            out_dim: 1,
            width: RANDOM_FN_WIDTH,
            depth: RANDOM_FN_DEPTH,
        });
        let shapes = spec.param_shapes();
        let values = shapes
            .iter()
            .map(|s| {
                let count: usize = s.iter().product();
                if s.len() == 2 {
                    // LeCun scaling
                    let sd = (1.0 / s[0] as f64).sqrt();
                    (0..count).map(|_| sd * Distribution::<f64>::sample(&StandardNormal, r)).collect()
                } else {
                    (0..count).map(|_| r.random_range(-RANDOM_FN_BIAS..RANDOM_FN_BIAS)).collect()
                }
            })
            .collect();
        Self {
            net: Network::from_params(spec, values).expect("random function shapes are consistent"),
        }
    }

    pub fn in_dim(&self) -> usize {
        match self.net.spec() {
            NetSpec::Mlp(s) => s.in_dim,
            _ => unreachable!("random functions are MLPs"),
        }
    }

    pub fn network(&self) -> &Network {
        &self.net
    }

    /// Values at `rows` inputs laid out back to back.
    pub fn eval_rows(&self, inputs: &[f64]) -> Result<Vec<f64>> {
        let d = self.in_dim();
        if inputs.len() % d != 0 {
            return Err(dim_err!("{} inputs for dimension {d}", inputs.len()));
        }
        if inputs.is_empty() {
            return Ok(Vec::new());
        }
        self.net.eval(inputs, &[inputs.len() / d, d])
    }

    pub fn eval(&self, x: &[f64]) -> Result<f64> {
        Ok(self.eval_rows(x)?[0])
    }
}

/// Frozen random function for `seed`.
pub fn random_fn(seed: u64, in_dim: usize) -> RandomFn {
    RandomFn::from_rng(&mut rng::stream(seed, "random-fn"), in_dim)
}

/// Natural cubic interpolating spline with linear extension past its ends.
#[derive(Debug, Clone, PartialEq)]
pub struct SplineFn {
    knots: Vec<f64>,
    values: Vec<f64>,
    /// Second derivatives at the knots; zero at both ends.
    second: Vec<f64>,
}

impl SplineFn {
    pub fn new(knots: Vec<f64>, values: Vec<f64>) -> Result<Self> {
        let n = knots.len();
        if n < 2 || values.len() != n {
            return Err(dim_err!("spline needs at least two knots with one value each"));
        }
        if knots.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(contract_err!("spline knots must be strictly increasing"));
        }
        let mut second = vec![0.0; n];
        if n > 2 {
            // tridiagonal system for interior second derivatives
            let m = n - 2;
            let h: Vec<f64> = knots.windows(2).map(|w| w[1] - w[0]).collect();
            let mut diag = vec![0.0; m];
            let mut rhs = vec![0.0; m];
            for i in 0..m {
                diag[i] = 2.0 * (h[i] + h[i + 1]);
                rhs[i] = 6.0 * ((values[i + 2] - values[i + 1]) / h[i + 1] - (values[i + 1] - values[i]) / h[i]);
            }
            for i in 1..m {
                let f = h[i] / diag[i - 1];
                diag[i] -= f * h[i];
                rhs[i] -= f * rhs[i - 1];
            }
            second[m] = rhs[m - 1] / diag[m - 1];
            for i in (0..m - 1).rev() {
                second[i + 1] = (rhs[i] - h[i + 1] * second[i + 2]) / diag[i];
            }
        }
        Ok(Self { knots, values, second })
    }

    pub fn knots(&self) -> &[f64] {
        &self.knots
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    fn segment(&self, x: f64) -> usize {
        let n = self.knots.len();
        self.knots[1..n - 1].partition_point(|k| *k <= x)
    }

    fn end_slope(&self, left: bool) -> f64 {
        let n = self.knots.len();
        if left {
            self.derivative(self.knots[0])
        } else {
            self.derivative(self.knots[n - 1])
        }
    }

    pub fn eval(&self, x: f64) -> f64 {
        let n = self.knots.len();
        if x < self.knots[0] {
            return self.values[0] + self.end_slope(true) * (x - self.knots[0]);
        }
        if x > self.knots[n - 1] {
            return self.values[n - 1] + self.end_slope(false) * (x - self.knots[n - 1]);
        }
        let i = self.segment(x);
        let (x0, x1) = (self.knots[i], self.knots[i + 1]);
        let h = x1 - x0;
        let a = (x1 - x) / h;
        let b = (x - x0) / h;
        a * self.values[i]
            + b * self.values[i + 1]
            + ((a * a * a - a) * self.second[i] + (b * b * b - b) * self.second[i + 1]) * h * h / 6.0
    }

    /// First derivative, taken from the segment to the right at knots.
    pub fn derivative(&self, x: f64) -> f64 {
        let n = self.knots.len();
        let xc = x.clamp(self.knots[0], self.knots[n - 1]);
        let i = self.segment(xc);
        let (x0, x1) = (self.knots[i], self.knots[i + 1]);
        let h = x1 - x0;
        let a = (x1 - xc) / h;
        let b = (xc - x0) / h;
        (self.values[i + 1] - self.values[i]) / h - (3.0 * a * a - 1.0) * h / 6.0 * self.second[i]
            + (3.0 * b * b - 1.0) * h / 6.0 * self.second[i + 1]
    }

    /// Second derivative; zero outside the knot range.
    pub fn second_derivative(&self, x: f64) -> f64 {
        let n = self.knots.len();
        if x < self.knots[0] || x > self.knots[n - 1] {
            return 0.0;
        }
        let i = self.segment(x);
        let (x0, x1) = (self.knots[i], self.knots[i + 1]);
        let h = x1 - x0;
        ((x1 - x) * self.second[i] + (x - x0) * self.second[i + 1]) / h
    }
}

pub const SPLINE_KNOTS: usize = 8;

/// Spline through [`SPLINE_KNOTS`] evenly spaced knots on `domain` with
/// values drawn uniformly from `[-1, 1)`.
pub fn spline_fn(seed: u64, domain: (f64, f64)) -> Result<SplineFn> {
    let (lo, hi) = domain;
    if !(hi > lo) {
        return Err(contract_err!("spline domain must be a non-empty interval"));
    }
    let mut r = rng::stream(seed, "spline");
    let knots = (0..SPLINE_KNOTS)
        .map(|k| lo + (hi - lo) * k as f64 / (SPLINE_KNOTS - 1) as f64)
        .collect();
    let values = (0..SPLINE_KNOTS).map(|_| r.random_range(-1.0..1.0)).collect();
    SplineFn::new(knots, values)
}

#[derive(Debug, Clone, PartialEq)]
pub enum TruthInterference {
    /// `f_T(w ⊙ T̄)` on the tap entries.
    Net(RandomFn),
    /// `f_T(Σ w · T̄)`.
    Spline(SplineFn),
}

/// The generating outcome model of a synthetic dataset.
///
/// `Y = β t + f_T(taps of the patch, weighted) + f_X(x) + U + ε`, where `U`
/// and `ε` are the realized per-unit draws.
#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruth {
    pub beta: f64,
    pub patch_rows: usize,
    pub patch_cols: usize,
    pub taps: Vec<usize>,
    pub tap_weights: Vec<f64>,
    pub f_t: TruthInterference,
    pub f_x: RandomFn,
    pub u: Vec<f64>,
    pub eps: Vec<f64>,
    /// Source pixels of the units `u` and `eps` belong to.
    pub cells: Vec<(usize, usize)>,
}

impl GroundTruth {
    fn patch_len(&self) -> usize {
        self.patch_rows * self.patch_cols
    }

    fn unit_slot(&self, ds: &SpatialDataset, unit: usize) -> Result<usize> {
        let cell = ds
            .cells
            .as_ref()
            .and_then(|c| c.get(unit))
            .ok_or_else(|| contract_err!("dataset has no source cell for unit {unit}"))?;
        self.cells
            .binary_search(cell)
            .map_err(|_| contract_err!("unit at {cell:?} was not produced by this ground truth"))
    }

    fn interference_of(&self, patches: &[f64]) -> Result<Vec<f64>> {
        let k = self.patch_len();
        if patches.len() % k != 0 {
            return Err(dim_err!("patch buffer of {} values is not a multiple of {k}", patches.len()));
        }
        let count = patches.len() / k;
        match &self.f_t {
            TruthInterference::Net(f) => {
                let mut inputs = Vec::with_capacity(count * self.taps.len());
                for p in patches.chunks_exact(k) {
                    inputs.extend(self.taps.iter().zip(&self.tap_weights).map(|(&j, w)| w * p[j]));
                }
                f.eval_rows(&inputs)
            }
            TruthInterference::Spline(s) => Ok(patches
                .chunks_exact(k)
                .map(|p| s.eval(self.taps.iter().zip(&self.tap_weights).map(|(&j, w)| w * p[j]).sum()))
                .collect()),
        }
    }

    /// Outcome of every unit at its observed inputs.
    pub fn outcomes(&self, ds: &SpatialDataset) -> Result<Vec<f64>> {
        self.check(ds)?;
        let f = self.interference_of(&ds.patches[0])?;
        let g = self.f_x.eval_rows(&ds.x)?;
        (0..ds.n())
            .map(|i| {
                let s = self.unit_slot(ds, i)?;
                Ok(self.beta * ds.treatment(i, 0) + f[i] + g[i] + self.u[s] + self.eps[s])
            })
            .collect()
    }

    fn check(&self, ds: &SpatialDataset) -> Result<()> {
        if ds.m != 1 || ds.patch_rows != self.patch_rows || ds.patch_cols != self.patch_cols {
            return Err(contract_err!("dataset geometry does not match the ground truth"));
        }
        if ds.x_dim != self.f_x.in_dim() {
            return Err(dim_err!("confounder dimension {} for a truth expecting {}", ds.x_dim, self.f_x.in_dim()));
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut w = Writer::new();
        w.bytes(b"GTR1");
        w.f64(self.beta);
        w.dim(self.patch_rows)?;
        w.dim(self.patch_cols)?;
        w.u64(self.taps.len() as u64);
        for &t in &self.taps {
            w.dim(t)?;
        }
        w.f64s(&self.tap_weights);
        match &self.f_t {
            TruthInterference::Net(f) => {
                w.u8(0);
                f.net.encode(&mut w)?;
            }
            TruthInterference::Spline(s) => {
                w.u8(1);
                w.f64_vec(&s.knots);
                w.f64_vec(&s.values);
            }
        }
        self.f_x.net.encode(&mut w)?;
        w.f64_vec(&self.u);
        w.f64_vec(&self.eps);
        w.u64(self.cells.len() as u64);
        for &(r, c) in &self.cells {
            w.dim(r)?;
            w.dim(c)?;
        }
        Ok(w.into_inner())
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        let mut r = Reader::new(buf);
        r.magic(b"GTR1")?;
        let beta = r.f64()?;
        let patch_rows = r.dim("patch rows")?;
        let patch_cols = r.dim("patch cols")?;
        let ntaps = r.u64()? as usize;
        if ntaps > patch_rows * patch_cols {
            return Err(r.error("more taps than patch cells"));
        }
        let taps = (0..ntaps).map(|_| r.u32().map(|v| v as usize)).collect::<Result<Vec<_>>>()?;
        if taps.iter().any(|&t| t >= patch_rows * patch_cols) {
            return Err(r.error("tap index outside the patch"));
        }
        let tap_weights = r.f64s(ntaps)?;
        let f_t = match r.u8()? {
            0 => TruthInterference::Net(RandomFn {
                net: Network::decode(&mut r)?,
            }),
            1 => {
                let at = r.offset();
                let knots = r.f64_vec()?;
                let values = r.f64_vec()?;
                TruthInterference::Spline(SplineFn::new(knots, values).map_err(|e| crate::Error::Format {
                    offset: at,
                    message: e.to_string(),
                })?)
            }
            t => return Err(r.error(format!("unknown interference tag {t}"))),
        };
        let f_x = RandomFn {
            net: Network::decode(&mut r)?,
        };
        if !matches!(f_x.net.spec(), NetSpec::Mlp(_)) {
            return Err(r.error("confounder function must be an MLP"));
        }
        if let TruthInterference::Net(f) = &f_t {
            if !matches!(f.net.spec(), NetSpec::Mlp(s) if s.in_dim == ntaps) {
                return Err(r.error("interference function does not match the taps"));
            }
        }
        let u = r.f64_vec()?;
        let eps = r.f64_vec()?;
        let nc = r.u64()? as usize;
        if nc != u.len() || nc != eps.len() {
            return Err(r.error("per-unit arrays differ in length"));
        }
        let mut cells = Vec::with_capacity(nc);
        for _ in 0..nc {
            cells.push((r.u32()? as usize, r.u32()? as usize));
        }
        r.finish()?;
        Ok(Self {
            beta,
            patch_rows,
            patch_cols,
            taps,
            tap_weights,
            f_t,
            f_x,
            u,
            eps,
            cells,
        })
    }
}

impl OutcomeSurface for GroundTruth {
    fn treatments(&self) -> usize {
        1
    }

    fn direct(&self, _m: usize, t: f64) -> f64 {
        self.beta * t
    }

    fn interference(&self, _m: usize, _unit: usize, patches: &[f64], _exec: Exec) -> Result<Vec<f64>> {
        self.interference_of(patches)
    }

    fn outcome(&self, ds: &SpatialDataset, unit: usize, ov: &Overrides<'_>) -> Result<f64> {
        self.check(ds)?;
        if unit >= ds.n() {
            return Err(dim_err!("unit {unit} out of range for {} units", ds.n()));
        }
        let t = ov.t.iter().rev().find(|(k, _)| *k == 0).map_or(ds.treatment(unit, 0), |(_, v)| *v);
        let patch = ov.patch.iter().rev().find(|(k, _)| *k == 0).map_or(ds.patch(0, unit), |(_, p)| p);
        let f = self.interference_of(patch)?[0];
        let g = self.f_x.eval(ds.x_row(unit))?;
        let s = self.unit_slot(ds, unit)?;
        Ok(self.beta * t + f + g + self.u[s] + self.eps[s])
    }
}

/// Ground-truth dose-response effects with uniform weights, using the same
/// grid and draw protocol as the fitted-model estimator.
pub fn oracle_effects(
    truth: &GroundTruth,
    ds: &SpatialDataset,
    m: usize,
    t_grid: &[f64],
    draws: usize,
    seed: u64,
) -> Result<EffectReport> {
    let d = draw_neighbourhoods(ds.n(), draws, seed);
    estimate_effects_dose(truth, ds, m, None, t_grid, &d, Exec::Sequential)
}

/// Rasters a generator wrote its dataset from.
#[derive(Debug, Clone, PartialEq)]
pub struct GeneratedGrids {
    pub treatment: Grid,
    pub confounder: Grid,
    pub outcome: Grid,
    pub d_s: usize,
    pub boundary: Boundary,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Generated {
    pub dataset: SpatialDataset,
    pub truth: GroundTruth,
    pub grids: GeneratedGrids,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LineGraphConfig {
    pub n: usize,
    pub x_dim: usize,
    pub sigma_x: f64,
    pub sigma_d: f64,
    pub sigma_l: f64,
    pub noise_sd: f64,
    /// Set per run rather than read from config files.
    #[serde(skip)]
    pub seed: u64,
}

impl Default for LineGraphConfig {
    fn default() -> Self {
        Self {
            n: 500,
            x_dim: 4,
            sigma_x: 1.0,
            sigma_d: 0.5,
            sigma_l: 0.5,
            noise_sd: 0.1,
            seed: 0,
        }
    }
}

impl LineGraphConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n < 3 || self.x_dim == 0 {
            return Err(config_err!("line graph needs n >= 3 and x_dim >= 1"));
        }
        if !(self.sigma_x > 0.0 && self.sigma_d > 0.0 && self.sigma_l > 0.0 && self.noise_sd >= 0.0) {
            return Err(config_err!("line graph scales must be positive"));
        }
        Ok(())
    }
}

/// `D_ij = exp(−|s_i − s_j| / (2σ_l²)) / (σ_d √(2π))`.
pub fn line_covariance(s: &[f64], sigma_d: f64, sigma_l: f64) -> Vec<f64> {
    let n = s.len();
    let pre = 1.0 / (sigma_d * (2.0 * PI).sqrt());
    let mut d = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            d[i * n + j] = pre * (-(s[i] - s[j]).abs() / (2.0 * sigma_l * sigma_l)).exp();
        }
    }
    d
}

const LINE_JITTER: f64 = 1e-10;

pub fn gen_line_graph(cfg: &LineGraphConfig) -> Result<Generated> {
    cfg.validate()?;
    let n = cfg.n;
    let geom = Geometry {
        rows: 1,
        cols: n,
        origin_x: -0.5 / (n - 1) as f64,
        origin_y: 0.0,
        resolution: 1.0 / (n - 1) as f64,
    };
    let s: Vec<f64> = (0..n).map(|c| geom.pixel_center(0, c).0).collect();
    let d = line_covariance(&s, cfg.sigma_d, cfg.sigma_l);
    let (chol, _) = cholesky_jittered(&d, n, LINE_JITTER)?;
    let mut ru = rng::stream(cfg.seed, "line-u");
    let e: Vec<f64> = (0..n).map(|_| StandardNormal.sample(&mut ru)).collect();
    let u = lower_mul_vec(&chol, n, &e);

    let mut rx = rng::stream(cfg.seed, "line-x");
    let x: Vec<f64> = (0..n * cfg.x_dim).map(|_| cfg.sigma_x * Distribution::<f64>::sample(&StandardNormal, &mut rx)).collect();

    let mut rn = rng::stream(cfg.seed, "line-nets");
    let g = RandomFn::from_rng(&mut rn, cfg.x_dim + 1);
    let f_t = RandomFn::from_rng(&mut rn, 2);
    let f_x = RandomFn::from_rng(&mut rn, cfg.x_dim);
    let beta: f64 = rng::stream(cfg.seed, "line-beta").random_range(0.0..1.0);

    let mut xu = Vec::with_capacity(n * (cfg.x_dim + 1));
    for i in 0..n {
        xu.extend_from_slice(&x[i * cfg.x_dim..(i + 1) * cfg.x_dim]);
        xu.push(u[i]);
    }
    let t = g.eval_rows(&xu)?;

    let mut rnoise = rng::stream(cfg.seed, "line-noise");
    let eps: Vec<f64> = (0..n).map(|_| cfg.noise_sd * Distribution::<f64>::sample(&StandardNormal, &mut rnoise)).collect();

    // all nodes are equally spaced, so every unit shares the neighbour weight
    let w = d[1];
    let truth = GroundTruth {
        beta,
        patch_rows: 1,
        patch_cols: 3,
        taps: vec![0, 2],
        tap_weights: vec![w, w],
        f_t: TruthInterference::Net(f_t),
        f_x,
        u,
        eps,
        cells: (0..n).map(|c| (0, c)).collect(),
    };
    let treatment = Grid::new(geom, 1, t)?;
    let mut xdata = vec![0.0; n * cfg.x_dim];
    for i in 0..n {
        for k in 0..cfg.x_dim {
            xdata[k * n + i] = x[i * cfg.x_dim + k];
        }
    }
    let confounder = Grid::new(geom, cfg.x_dim, xdata)?;
    finish(truth, treatment, confounder, Grid::filled(geom, 1, 0.0)?, 3, Boundary::ZeroFill)
}

fn finish(
    truth: GroundTruth,
    treatment: Grid,
    confounder: Grid,
    mut outcome: Grid,
    d_s: usize,
    boundary: Boundary,
) -> Result<Generated> {
    let mut ds = raster::extract_units_from(
        std::slice::from_ref(&treatment),
        &confounder,
        &outcome,
        d_s,
        boundary,
        vec!["t".into()],
    )?;
    if ds.cells.as_deref() != Some(&truth.cells[..]) {
        return Err(data_err!("generated units do not match the sampled cells"));
    }
    let y = truth.outcomes(&ds)?;
    for (i, &(r, c)) in truth.cells.iter().enumerate() {
        outcome.set(0, r, c, y[i]);
    }
    ds.y = y.into_iter().map(Some).collect();
    Ok(Generated {
        dataset: ds,
        truth,
        grids: GeneratedGrids {
            treatment,
            confounder,
            outcome,
            d_s,
            boundary,
        },
    })
}

/// Stand-in land-cover classes and their additive effect on the treatment.
pub const STAND_IN_CLASSES: [(u16, f64); 5] = [(11, -0.9), (21, -0.3), (41, 0.7), (71, 0.2), (82, 0.4)];
const STAND_IN_QUANTILES: [f64; 4] = [0.1, 0.3, 0.6, 0.8];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GridConfig {
    pub rows: usize,
    pub cols: usize,
    pub d_s: usize,
    pub sigma_l: f64,
    pub beta: f64,
    /// Spacing between sampled unit pixels.
    pub stride: usize,
    pub u_kernel: KernelSpec,
    /// Coarse lattice side for the stand-in fields.
    pub field_lattice: usize,
    pub field_lengthscale: f64,
    /// Set per run rather than read from config files.
    #[serde(skip)]
    pub seed: u64,
}

impl Default for GridConfig {
    fn default() -> Self {
        Self {
            rows: 256,
            cols: 256,
            d_s: 25,
            sigma_l: 10.0,
            beta: -4.0,
            stride: 4,
            u_kernel: KernelSpec::exponential(1.0, 0.1, 1e-6),
            field_lattice: 32,
            field_lengthscale: 0.15,
            seed: 0,
        }
    }
}

impl GridConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_s == 0 || self.d_s % 2 == 0 {
            return Err(config_err!("d_s must be odd, got {}", self.d_s));
        }
        if self.stride == 0 || self.field_lattice < 2 {
            return Err(config_err!("stride must be >= 1 and field_lattice >= 2"));
        }
        if !(self.sigma_l > 0.0 && self.field_lengthscale > 0.0) {
            return Err(config_err!("grid length scales must be positive"));
        }
        self.u_kernel.validate().map_err(|e| config_err!("u_kernel: {e}"))
    }

    pub fn geometry(&self) -> Geometry {
        Geometry {
            rows: self.rows,
            cols: self.cols,
            origin_x: 0.0,
            origin_y: 0.0,
            resolution: 1.0 / self.rows.max(self.cols) as f64,
        }
    }
}

/// Unnormalized `exp(−d_kl / σ_l)` over a `d_s × d_s` patch, row-major.
pub fn raw_patch_weights(d_s: usize, sigma_l: f64) -> Vec<f64> {
    let c = (d_s / 2) as f64;
    let mut w = Vec::with_capacity(d_s * d_s);
    for k in 0..d_s {
        for l in 0..d_s {
            let d = ((k as f64 - c).powi(2) + (l as f64 - c).powi(2)).sqrt();
            w.push((-d / sigma_l).exp());
        }
    }
    w
}

/// Patch weights with the centre set to zero and the rest summing to one.
pub fn patch_weights(d_s: usize, sigma_l: f64) -> Vec<f64> {
    let mut w = raw_patch_weights(d_s, sigma_l);
    w[(d_s / 2) * d_s + d_s / 2] = 0.0;
    let z: f64 = w.iter().sum();
    w.iter_mut().for_each(|v| *v /= z);
    w
}

/// Bilinear interpolation of a `side × side` lattice spanning `[0,1]²` at
/// the pixel centres of `geom`.
fn upsample(lattice: &[f64], side: usize, geom: Geometry) -> Vec<f64> {
    let extent = geom.resolution * geom.rows.max(geom.cols) as f64;
    let mut out = Vec::with_capacity(geom.rows * geom.cols);
    let step = extent / (side - 1) as f64;
    for r in 0..geom.rows {
        for c in 0..geom.cols {
            let (x, y) = geom.pixel_center(r, c);
            let fx = ((x - geom.origin_x) / step).clamp(0.0, (side - 1) as f64);
            let fy = ((y - geom.origin_y) / step).clamp(0.0, (side - 1) as f64);
            let (i0, j0) = ((fy as usize).min(side - 2), (fx as usize).min(side - 2));
            let (ty, tx) = (fy - i0 as f64, fx - j0 as f64);
            let v = |i: usize, j: usize| lattice[i * side + j];
            out.push(
                (1.0 - ty) * ((1.0 - tx) * v(i0, j0) + tx * v(i0, j0 + 1))
                    + ty * ((1.0 - tx) * v(i0 + 1, j0) + tx * v(i0 + 1, j0 + 1)),
            );
        }
    }
    out
}

/// Synthetic treatment and land-cover class fields.
pub fn stand_in_fields(cfg: &GridConfig) -> Result<(Grid, Grid)> {
    cfg.validate()?;
    let side = cfg.field_lattice;
    let lattice: Vec<f64> = (0..side * side)
        .flat_map(|k| {
            let (i, j) = (k / side, k % side);
            [j as f64 / (side - 1) as f64, i as f64 / (side - 1) as f64]
        })
        .collect();
    let sampler = GpSampler::new(&lattice, 2, &KernelSpec::rbf(1.0, cfg.field_lengthscale, 1e-6))?;
    let mut r = rng::stream(cfg.seed, "stand-in-fields");
    let zt = sampler.draw(&mut r);
    let zc = sampler.draw(&mut r);
    let geom = cfg.geometry();
    let zt = upsample(&zt, side, geom);
    let zc = upsample(&zc, side, geom);

    let mut sorted = zc.clone();
    sorted.sort_by(f64::total_cmp);
    let cuts: Vec<f64> = STAND_IN_QUANTILES
        .iter()
        .map(|q| sorted[((sorted.len() - 1) as f64 * q) as usize])
        .collect();
    let class_of = |v: f64| cuts.iter().filter(|c| v > **c).count();
    let codes: Vec<f64> = zc.iter().map(|&v| f64::from(STAND_IN_CLASSES[class_of(v)].0)).collect();
    let t: Vec<f64> = zt
        .iter()
        .zip(&zc)
        .map(|(&a, &b)| (0.7 * a + STAND_IN_CLASSES[class_of(b)].1).tanh())
        .collect();
    Ok((Grid::new(geom, 1, t)?, Grid::new(geom, 1, codes)?))
}

/// Grid generator. Without fields, [`stand_in_fields`] supplies them;
/// `fields` is `(treatment, land-cover class codes)`.
pub fn gen_grid(cfg: &GridConfig, fields: Option<(Grid, Grid)>) -> Result<Generated> {
    cfg.validate()?;
    let (treatment, classes) = match fields {
        Some(f) => f,
        None => stand_in_fields(cfg)?,
    };
    if !treatment.same_geometry(&classes) || treatment.channels != 1 {
        return Err(data_err!("treatment and land-cover fields must share a single-channel geometry"));
    }
    let geom = treatment.geometry();
    let half = cfg.d_s / 2;
    if geom.rows < cfg.d_s || geom.cols < cfg.d_s {
        return Err(data_err!("grid {}x{} is smaller than d_s = {}", geom.rows, geom.cols, cfg.d_s));
    }
    let (confounder, _) = raster::onehot_landcover(&classes)?;
    let mut outcome = Grid::filled(geom, 1, f64::NAN)?;
    let mut cells = Vec::new();
    for r in (half..geom.rows - half).step_by(cfg.stride) {
        for c in (half..geom.cols - half).step_by(cfg.stride) {
            let ok = !treatment.get(0, r, c).is_nan() && (0..confounder.channels).all(|k| !confounder.get(k, r, c).is_nan());
            if ok {
                outcome.set(0, r, c, 0.0);
                cells.push((r, c));
            }
        }
    }
    if cells.is_empty() {
        return Err(data_err!("no eligible unit pixels"));
    }
    let coords: Vec<f64> = cells
        .iter()
        .flat_map(|&(r, c)| {
            let (x, y) = geom.pixel_center(r, c);
            [x, y]
        })
        .collect();
    let sampler = GpSampler::new(&coords, 2, &cfg.u_kernel)?;
    let u = sampler.draw(&mut rng::stream(cfg.seed, "grid-u"));
    let w = patch_weights(cfg.d_s, cfg.sigma_l);
    let center = half * cfg.d_s + half;
    let taps: Vec<usize> = (0..cfg.d_s * cfg.d_s).filter(|&k| k != center).collect();
    let tap_weights = taps.iter().map(|&k| w[k]).collect();
    let truth = GroundTruth {
        beta: cfg.beta,
        patch_rows: cfg.d_s,
        patch_cols: cfg.d_s,
        taps,
        tap_weights,
        f_t: TruthInterference::Spline(spline_fn(cfg.seed, (-1.0, 1.0))?),
        f_x: RandomFn::from_rng(&mut rng::stream(cfg.seed, "grid-fx"), confounder.channels),
        eps: vec![0.0; cells.len()],
        u,
        cells,
    };
    finish(truth, treatment, confounder, outcome, cfg.d_s, Boundary::Exclude)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn spline_interpolates_and_is_natural() {
        let s = spline_fn(3, (-1.0, 1.0)).unwrap();
        for (k, v) in s.knots().iter().zip(s.values()) {
            assert!((s.eval(*k) - v).abs() < 1e-14);
        }
        assert!(s.second_derivative(-1.0).abs() < 1e-12);
        assert!(s.second_derivative(1.0).abs() < 1e-12);
        for &k in &s.knots()[1..SPLINE_KNOTS - 1] {
            let h = 1e-7;
            let left = (s.eval(k) - s.eval(k - h)) / h;
            let right = (s.eval(k + h) - s.eval(k)) / h;
            assert!((left - right).abs() < 1e-5, "derivative jump at {k}");
        }
    }

    #[test]
    fn two_knot_spline_is_linear() {
        let s = SplineFn::new(vec![0.0, 2.0], vec![1.0, 5.0]).unwrap();
        assert_eq!(s.eval(1.0), 3.0);
        assert_eq!(s.eval(3.0), 7.0);
    }

    #[test]
    fn random_fn_determinism() {
        let a = random_fn(1, 3);
        let b = random_fn(1, 3);
        let c = random_fn(2, 3);
        let probe = [0.3, -1.2, 4.0];
        assert_eq!(a.eval(&probe).unwrap(), b.eval(&probe).unwrap());
        assert_ne!(a.eval(&probe).unwrap(), c.eval(&probe).unwrap());
        assert!(a.eval(&[10.0, -10.0, 10.0]).unwrap().is_finite());
    }

    #[test]
    fn weight_matrix_examples() {
        let raw = raw_patch_weights(3, 10.0);
        assert!((raw[1] - (-0.1f64).exp()).abs() < 1e-15);
        let w = patch_weights(51, 10.0);
        assert_eq!(w[25 * 51 + 25], 0.0);
        assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn line_covariance_prefactor() {
        let d = line_covariance(&[0.0, 0.5], 0.5, 0.5);
        assert!((d[0] - 0.797_884_560_802_865_4).abs() < 1e-15);
        assert_eq!(d[1], d[2]);
    }
}
