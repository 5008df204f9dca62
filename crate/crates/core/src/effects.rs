//! Propensity-score balancing weights and direct / indirect / total effects.
//!
//! All estimators contrast outcome predictions at counterfactual inputs:
//! own treatment set to zero for the direct effect, the neighbourhood patch
//! set to zeros for the indirect effect, both for the total effect. Unit
//! contributions are averaged with self-normalized weights,
//! `Σ w_i Δ_i / Σ w_i`.

use std::f64::consts::PI;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::SpatialDataset;
use crate::error::{contract_err, data_err, dim_err, Result};
use crate::linalg::{cholesky, cholesky_solve};
use crate::model::{Overrides, SpatialModel};
use crate::par::{self, Exec};
use crate::rng;

pub const SIGMA_FLOOR: f64 = 1e-6;
pub const POSITIVITY_FLOOR: f64 = 1e-12;
const RIDGE: f64 = 1e-8;

fn normal_log_pdf(t: f64, mean: f64, sd: f64) -> f64 {
    let z = (t - mean) / sd;
    -0.5 * z * z - sd.ln() - 0.5 * (2.0 * PI).ln()
}

/// Conditional Gaussian model of one treatment given `[x; s]`.
#[derive(Debug, Clone, PartialEq)]
pub struct GpsModel {
    pub m: usize,
    /// Coefficients on `x`, then `s`, then the intercept.
    pub coef: Vec<f64>,
    pub sigma: f64,
    pub ridge_used: bool,
}

fn design_row(ds: &SpatialDataset, i: usize) -> Vec<f64> {
    let mut r = Vec::with_capacity(ds.x_dim + ds.coord_dim + 1);
    r.extend_from_slice(ds.x_row(i));
    r.extend_from_slice(ds.coord(i));
    r.push(1.0);
    r
}

/// Least-squares fit of `t_m` on `[x; s; 1]`.
pub fn fit_gps(ds: &SpatialDataset, m: usize) -> Result<GpsModel> {
    if m >= ds.m {
        return Err(dim_err!("treatment {m} out of range for M = {}", ds.m));
    }
    let p = ds.x_dim + ds.coord_dim + 1;
    let n = ds.n();
    if n < p + 1 {
        return Err(data_err!("GPS fit needs at least {} units, got {n}", p + 1));
    }
    let mut xtx = vec![0.0; p * p];
    let mut xty = vec![0.0; p];
    for i in 0..n {
        let r = design_row(ds, i);
        let t = ds.treatment(i, m);
        for a in 0..p {
            xty[a] += r[a] * t;
            for b in 0..=a {
                xtx[a * p + b] += r[a] * r[b];
            }
        }
    }
    for a in 0..p {
        for b in a + 1..p {
            xtx[a * p + b] = xtx[b * p + a];
        }
    }
    let (l, ridge_used) = match cholesky(&xtx, p) {
        Ok(l) => (l, false),
        Err(_) => {
            log::warn!("GPS design for treatment {m} is rank deficient; adding ridge {RIDGE:e}");
            let mut r = xtx.clone();
            for a in 0..p {
                r[a * p + a] += RIDGE;
            }
            (cholesky(&r, p)?, true)
        }
    };
    let coef = cholesky_solve(&l, p, &xty);
    let ssr: f64 = (0..n)
        .map(|i| {
            let fit: f64 = design_row(ds, i).iter().zip(&coef).map(|(a, b)| a * b).sum();
            (ds.treatment(i, m) - fit).powi(2)
        })
        .sum();
    let dof = n.saturating_sub(p).max(1);
    let sigma = (ssr / dof as f64).sqrt().max(SIGMA_FLOOR);
    Ok(GpsModel {
        m,
        coef,
        sigma,
        ridge_used,
    })
}

impl GpsModel {
    pub fn mean(&self, ds: &SpatialDataset, i: usize) -> f64 {
        design_row(ds, i).iter().zip(&self.coef).map(|(a, b)| a * b).sum()
    }

    pub fn log_density(&self, ds: &SpatialDataset, i: usize, t: f64) -> f64 {
        normal_log_pdf(t, self.mean(ds, i), self.sigma)
    }

    pub fn density(&self, ds: &SpatialDataset, i: usize, t: f64) -> f64 {
        self.log_density(ds, i, t).exp()
    }
}

/// Gaussian kernel density estimate of a treatment's marginal.
#[derive(Debug, Clone, PartialEq)]
pub struct MarginalDensity {
    pub samples: Vec<f64>,
    pub bandwidth: f64,
}

/// Silverman's rule `h = 1.06 σ̂ N^{-1/5}`.
pub fn silverman_bandwidth(samples: &[f64]) -> f64 {
    let n = samples.len() as f64;
    let mean = samples.iter().sum::<f64>() / n;
    let var = samples.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    1.06 * var.sqrt() * n.powf(-0.2)
}

pub fn marginal_density(ds: &SpatialDataset, m: usize) -> Result<MarginalDensity> {
    if m >= ds.m {
        return Err(dim_err!("treatment {m} out of range for M = {}", ds.m));
    }
    MarginalDensity::fit(ds.treatment_column(m))
}

impl MarginalDensity {
    pub fn fit(samples: Vec<f64>) -> Result<Self> {
        if samples.len() < 2 || samples.iter().all(|v| *v == samples[0]) {
            return Err(data_err!("kernel density needs at least two distinct treatment values"));
        }
        let bandwidth = silverman_bandwidth(&samples);
        Ok(Self { samples, bandwidth })
    }

    pub fn with_bandwidth(samples: Vec<f64>, bandwidth: f64) -> Result<Self> {
        if samples.is_empty() || !(bandwidth > 0.0) {
            return Err(contract_err!("kernel density needs samples and a positive bandwidth"));
        }
        Ok(Self { samples, bandwidth })
    }

    pub fn density(&self, t: f64) -> f64 {
        let h = self.bandwidth;
        let s: f64 = self.samples.iter().map(|v| (-0.5 * ((t - v) / h).powi(2)).exp()).sum();
        s / (self.samples.len() as f64 * h * (2.0 * PI).sqrt())
    }
}

/// Per-unit balancing weights for one treatment.
#[derive(Debug, Clone, PartialEq)]
pub struct BalancingWeights {
    pub m: usize,
    pub raw: Vec<f64>,
    pub normalized: Vec<f64>,
    pub gps_density: Vec<f64>,
    /// Units whose GPS density fell below [`POSITIVITY_FLOOR`].
    pub positivity_violations: Vec<usize>,
}

/// `raw_i = f_T(t_i) / f_{T|X,s}(t_i | x_i, s_i)`, `normalized = raw / mean(raw)`.
pub fn balancing_weights(
    ds: &SpatialDataset,
    m: usize,
    gps: &GpsModel,
    marginal: &MarginalDensity,
    exec: Exec,
) -> Result<BalancingWeights> {
    let n = ds.n();
    let parts = par::map_range(exec, n, |i| {
        let t = ds.treatment(i, m);
        let lg = gps.log_density(ds, i, t);
        let fm = marginal.density(t);
        (lg, fm)
    });
    let mut raw = Vec::with_capacity(n);
    let mut gps_density = Vec::with_capacity(n);
    let mut violations = Vec::new();
    for (i, (lg, fm)) in parts.into_iter().enumerate() {
        let g = lg.exp();
        if g < POSITIVITY_FLOOR {
            violations.push(i);
        }
        gps_density.push(g);
        let w = (fm.ln() - lg).clamp(-700.0, 700.0).exp();
        raw.push(w);
    }
    if !violations.is_empty() {
        log::warn!(
            "positivity: GPS density below {POSITIVITY_FLOOR:e} at {} unit(s), first index {}",
            violations.len(),
            violations[0]
        );
    }
    let mean = raw.iter().sum::<f64>() / n as f64;
    let normalized = raw.iter().map(|w| w / mean).collect();
    Ok(BalancingWeights {
        m,
        raw,
        normalized,
        gps_density,
        positivity_violations: violations,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WeightDiagnostics {
    pub min_gps_density: f64,
    pub ess: f64,
    pub n: usize,
    pub low_ess: bool,
}

/// Effective sample size `(Σw)² / Σw²`.
pub fn ess(w: &[f64]) -> f64 {
    let s: f64 = w.iter().sum();
    let s2: f64 = w.iter().map(|v| v * v).sum();
    s * s / s2
}

pub fn weight_diagnostics(w: &BalancingWeights) -> WeightDiagnostics {
    let e = ess(&w.raw);
    let n = w.raw.len();
    WeightDiagnostics {
        min_gps_density: w.gps_density.iter().copied().fold(f64::INFINITY, f64::min),
        ess: e,
        n,
        low_ess: e < 0.1 * n as f64,
    }
}

/// An additive outcome surface that effects can be evaluated on.
pub trait OutcomeSurface: Sync {
    fn treatments(&self) -> usize;

    /// Own-treatment term of treatment `m` at value `t`.
    fn direct(&self, m: usize, t: f64) -> f64;

    /// Interference term of treatment `m` for `unit`, evaluated at each of
    /// the patches laid out back to back.
    fn interference(&self, m: usize, unit: usize, patches: &[f64], exec: Exec) -> Result<Vec<f64>>;

    /// True when `interference` ignores `unit`.
    fn interference_unit_invariant(&self) -> bool {
        true
    }

    /// Full outcome of `unit` with optional overrides; used for checks.
    fn outcome(&self, ds: &SpatialDataset, unit: usize, ov: &Overrides<'_>) -> Result<f64>;

    /// Whether the surface carries a spatial GP term.
    fn has_gp_term(&self) -> bool {
        false
    }
}

impl OutcomeSurface for SpatialModel {
    fn treatments(&self) -> usize {
        self.geometry().m
    }

    fn direct(&self, m: usize, t: f64) -> f64 {
        self.alphas()[m] * t
    }

    fn interference(&self, m: usize, _unit: usize, patches: &[f64], exec: Exec) -> Result<Vec<f64>> {
        self.interference_values(m, patches, exec)
    }

    fn outcome(&self, ds: &SpatialDataset, unit: usize, ov: &Overrides<'_>) -> Result<f64> {
        Ok(self.predict(ds, unit, ov)?.y)
    }

    fn has_gp_term(&self) -> bool {
        self.gp_term().is_some()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EffectMode {
    Observed,
    Dose,
}

impl EffectMode {
    pub fn as_str(self) -> &'static str {
        match self {
            EffectMode::Observed => "observed",
            EffectMode::Dose => "dose",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EffectReport {
    pub m: usize,
    pub mode: EffectMode,
    /// Empty in observed mode.
    pub t_grid: Vec<f64>,
    /// One value per grid point (a single value in observed mode).
    pub de: Vec<f64>,
    pub ie: Vec<f64>,
    pub te: f64,
    pub weighted: bool,
    pub gp_term: bool,
    pub draws: usize,
}

impl EffectReport {
    /// Grid average of the direct-effect curve.
    pub fn de_mean(&self) -> f64 {
        self.de.iter().sum::<f64>() / self.de.len() as f64
    }

    pub fn ie_mean(&self) -> f64 {
        self.ie.iter().sum::<f64>() / self.ie.len() as f64
    }

    /// Rows for the effects CSV, without header.
    pub fn csv_rows(&self) -> Vec<String> {
        let w = self.weighted as u8;
        let mode = self.mode.as_str();
        let t_at = |g: usize| match self.mode {
            EffectMode::Observed => String::new(),
            EffectMode::Dose => format!("{:.17e}", self.t_grid[g]),
        };
        let mut rows = Vec::new();
        for (kind, curve) in [("DE", &self.de), ("IE", &self.ie)] {
            for (g, v) in curve.iter().enumerate() {
                rows.push(format!("{},{mode},{kind},{},{v:.17e},{w}", self.m, t_at(g)));
            }
        }
        rows.push(format!("{},{mode},TE,,{:.17e},{w}", self.m, self.te));
        rows
    }
}

pub const EFFECTS_CSV_HEADER: &str = "treatment_index,mode,effect_type,t_value,estimate,weighted";

fn weights_or_uniform(n: usize, weights: Option<&BalancingWeights>) -> Result<Vec<f64>> {
    match weights {
        Some(w) if w.normalized.len() != n => Err(dim_err!("{} weights for {n} units", w.normalized.len())),
        Some(w) => Ok(w.normalized.clone()),
        None => Ok(vec![1.0; n]),
    }
}

fn weighted_mean(w: &[f64], v: &[f64]) -> f64 {
    let num: f64 = w.iter().zip(v).map(|(a, b)| a * b).sum();
    num / w.iter().sum::<f64>()
}

/// Effects at the observed assignments.
pub fn estimate_effects_observed<S: OutcomeSurface + ?Sized>(
    surface: &S,
    ds: &SpatialDataset,
    m: usize,
    weights: Option<&BalancingWeights>,
    exec: Exec,
) -> Result<EffectReport> {
    if m >= ds.m || m >= surface.treatments() {
        return Err(dim_err!("treatment {m} out of range"));
    }
    let n = ds.n();
    let w = weights_or_uniform(n, weights)?;
    let k = ds.patch_len();
    let zero = vec![0.0; k];
    let d0 = surface.direct(m, 0.0);
    let de: Vec<f64> = (0..n).map(|i| surface.direct(m, ds.treatment(i, m)) - d0).collect();
    let (f_obs, f_zero) = if surface.interference_unit_invariant() {
        let f_obs = surface.interference(m, 0, &ds.patches[m], exec)?;
        let f0 = surface.interference(m, 0, &zero, exec)?[0];
        (f_obs, vec![f0; n])
    } else {
        let pairs = par::try_map_range(exec, n, |i| -> Result<(f64, f64)> {
            let mut both = ds.patch(m, i).to_vec();
            both.extend_from_slice(&zero);
            let f = surface.interference(m, i, &both, Exec::Sequential)?;
            Ok((f[0], f[1]))
        })?;
        pairs.into_iter().unzip()
    };
    let ie: Vec<f64> = f_obs.iter().zip(&f_zero).map(|(a, b)| a - b).collect();
    let te: Vec<f64> = de.iter().zip(&ie).map(|(a, b)| a + b).collect();
    Ok(EffectReport {
        m,
        mode: EffectMode::Observed,
        t_grid: Vec::new(),
        de: vec![weighted_mean(&w, &de)],
        ie: vec![weighted_mean(&w, &ie)],
        te: weighted_mean(&w, &te),
        weighted: weights.is_some(),
        gp_term: surface.has_gp_term(),
        draws: 0,
    })
}

/// `size` evenly spaced values over `[min, max]` of observed `t_m`.
pub fn treatment_grid(ds: &SpatialDataset, m: usize, size: usize) -> Result<Vec<f64>> {
    if size == 0 {
        return Err(contract_err!("treatment grid must have at least one point"));
    }
    let col = ds.treatment_column(m);
    let lo = col.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = col.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if size == 1 {
        return Ok(vec![0.5 * (lo + hi)]);
    }
    Ok((0..size).map(|g| lo + (hi - lo) * g as f64 / (size - 1) as f64).collect())
}

/// Unit indices of `b` neighbourhood draws, uniform with replacement.
pub fn draw_neighbourhoods(n: usize, b: usize, seed: u64) -> Vec<usize> {
    let mut r = rng::stream(seed, "neighbourhood-draws");
    (0..b).map(|_| r.random_range(0..n)).collect()
}

/// Dose-response effects over `t_grid` with neighbourhoods taken from the
/// dataset patches at `draws` (unit indices).
///
/// `DE(t) = avg_i [ŷ_i(t, t̄_i) − ŷ_i(0, t̄_i)]`,
/// `IE(t) = avg_i (1/B) Σ_b [ŷ_i(t, t̄_b) − ŷ_i(t, 0)]`, and `TE` is the grid
/// average of `avg_i (1/B) Σ_b [ŷ_i(t, t̄_b) − ŷ_i(0, 0)]`.
pub fn estimate_effects_dose<S: OutcomeSurface + ?Sized>(
    surface: &S,
    ds: &SpatialDataset,
    m: usize,
    weights: Option<&BalancingWeights>,
    t_grid: &[f64],
    draws: &[usize],
    exec: Exec,
) -> Result<EffectReport> {
    if t_grid.is_empty() {
        return Err(contract_err!("empty treatment grid"));
    }
    if draws.is_empty() {
        return Err(contract_err!("need at least one neighbourhood draw"));
    }
    if m >= ds.m || m >= surface.treatments() {
        return Err(dim_err!("treatment {m} out of range"));
    }
    let n = ds.n();
    if let Some(&bad) = draws.iter().find(|&&b| b >= n) {
        return Err(dim_err!("draw index {bad} out of range for {n} units"));
    }
    let col = ds.treatment_column(m);
    let lo = col.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = col.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !(lo..=hi).contains(&0.0) {
        log::warn!("zero baseline lies outside the observed range [{lo}, {hi}] of treatment {m}");
    }
    let w = weights_or_uniform(n, weights)?;
    let k = ds.patch_len();
    let mut drawn: Vec<f64> = Vec::with_capacity(draws.len() * k);
    for &b in draws {
        drawn.extend_from_slice(ds.patch(m, b));
    }
    let zero = vec![0.0; k];
    // per-unit mean over draws of f(t̄_b) − f(0)
    let ie_unit: Vec<f64> = if surface.interference_unit_invariant() {
        let f = surface.interference(m, 0, &drawn, exec)?;
        let f0 = surface.interference(m, 0, &zero, exec)?[0];
        let v = f.iter().map(|x| x - f0).sum::<f64>() / draws.len() as f64;
        vec![v; n]
    } else {
        par::try_map_range(exec, n, |i| -> Result<f64> {
            let mut buf = drawn.clone();
            buf.extend_from_slice(&zero);
            let f = surface.interference(m, i, &buf, Exec::Sequential)?;
            let f0 = f[draws.len()];
            Ok(f[..draws.len()].iter().map(|x| x - f0).sum::<f64>() / draws.len() as f64)
        })?
    };
    let d0 = surface.direct(m, 0.0);
    let ie_mean = weighted_mean(&w, &ie_unit);
    let mut de = Vec::with_capacity(t_grid.len());
    let mut ie = Vec::with_capacity(t_grid.len());
    for &t in t_grid {
        let dt = surface.direct(m, t) - d0;
        de.push(weighted_mean(&w, &vec![dt; n]));
        ie.push(ie_mean);
    }
    let g = t_grid.len() as f64;
    let te = de.iter().sum::<f64>() / g + ie.iter().sum::<f64>() / g;
    Ok(EffectReport {
        m,
        mode: EffectMode::Dose,
        t_grid: t_grid.to_vec(),
        de,
        ie,
        te,
        weighted: weights.is_some(),
        gp_term: surface.has_gp_term(),
        draws: draws.len(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EffectErrors {
    pub de: f64,
    pub ie: f64,
    pub te: f64,
}

/// Mean absolute curve difference for DE and IE, absolute difference for TE.
pub fn effect_error(report: &EffectReport, oracle: &EffectReport) -> Result<EffectErrors> {
    if report.mode != oracle.mode || report.m != oracle.m {
        return Err(contract_err!("effect reports differ in mode or treatment"));
    }
    if report.t_grid.len() != oracle.t_grid.len()
        || report.t_grid.iter().zip(&oracle.t_grid).any(|(a, b)| (a - b).abs() > 1e-12 * a.abs().max(1.0))
        || report.de.len() != oracle.de.len()
        || report.ie.len() != oracle.ie.len()
    {
        return Err(contract_err!("effect reports use different treatment grids"));
    }
    let mad = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum::<f64>() / a.len() as f64;
    Ok(EffectErrors {
        de: mad(&report.de, &oracle.de),
        ie: mad(&report.ie, &oracle.ie),
        te: (report.te - oracle.te).abs(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn report(de: Vec<f64>, ie: Vec<f64>, te: f64) -> EffectReport {
        EffectReport {
            m: 0,
            mode: EffectMode::Dose,
            t_grid: (0..de.len()).map(|i| i as f64).collect(),
            de,
            ie,
            te,
            weighted: false,
            gp_term: false,
            draws: 1,
        }
    }

    #[test]
    fn error_metric_examples() {
        let a = report(vec![1.0, 2.0, 3.0], vec![0.0; 3], 1.0);
        let b = report(vec![1.0, 3.0, 5.0], vec![0.0; 3], 1.5);
        let e = effect_error(&a, &b).unwrap();
        assert_eq!(e.de, 1.0);
        assert_eq!(e.te, 0.5);
        assert_eq!(effect_error(&a, &a).unwrap(), EffectErrors { de: 0.0, ie: 0.0, te: 0.0 });
        let c = report(vec![1.5, 2.5, 3.5], vec![0.0; 3], 1.0);
        assert_eq!(effect_error(&a, &c).unwrap().de, 0.5);
        let short = report(vec![1.0, 2.0], vec![0.0; 2], 1.0);
        assert!(matches!(effect_error(&a, &short), Err(crate::Error::Contract(_))));
    }

    #[test]
    fn ess_examples() {
        assert_eq!(ess(&[1.0; 7]), 7.0);
        assert_eq!(ess(&[0.0, 0.0, 5.0]), 1.0);
        assert!((ess(&[1.0, 1.0, 2.0]) - 16.0 / 6.0).abs() < 1e-15);
    }

    #[test]
    fn single_kernel_density() {
        let md = MarginalDensity::with_bandwidth(vec![0.0], 0.7).unwrap();
        assert!((md.density(0.0) - 1.0 / (0.7 * (2.0 * PI).sqrt())).abs() < 1e-15);
        assert!(MarginalDensity::fit(vec![2.0, 2.0, 2.0]).is_err());
    }

    #[test]
    fn weight_ratio() {
        // raw weight is marginal / gps evaluated in log space
        let w: f64 = (0.2f64.ln() - 0.4f64.ln()).exp();
        assert!((w - 0.5).abs() < 1e-15);
    }
}
