//! Covariance kernels, the inducing-point feature map, and exact GP draws.
//!
//! The low-rank term uses `z(s) = L⁻¹ k_q(s)` where `L Lᵀ = K_q + εI`, so
//! that `z(s_i)ᵀ z(s_j) = k_q(s_i)ᵀ (K_q + εI)⁻¹ k_q(s_j)`. The nugget `ε`
//! also enters a cross-covariance entry whenever a data coordinate coincides
//! exactly with an inducing point; with the inducing set equal to the data
//! this makes `Z Zᵀ = K + εI`.

use rand::seq::index;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{contract_err, dim_err, Result};
use crate::linalg::{cholesky_jittered, lower_mul_vec, solve_lower};
use crate::par::{self, Exec};
use crate::rng;
use crate::tensor::{Tape, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KernelFamily {
    Rbf,
    Exponential,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KernelSpec {
    pub family: KernelFamily,
    pub sigma: f64,
    pub lengthscale: f64,
    /// Diagonal jitter; never applied by [`KernelSpec::eval`].
    pub noise: f64,
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

impl KernelSpec {
    pub fn rbf(sigma: f64, lengthscale: f64, noise: f64) -> Self {
        Self {
            family: KernelFamily::Rbf,
            sigma,
            lengthscale,
            noise,
        }
    }

    pub fn exponential(sigma: f64, lengthscale: f64, noise: f64) -> Self {
        Self {
            family: KernelFamily::Exponential,
            sigma,
            lengthscale,
            noise,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.sigma > 0.0) || !(self.lengthscale > 0.0) || !(self.noise >= 0.0) {
            return Err(contract_err!("kernel needs sigma > 0, lengthscale > 0, noise >= 0: {self:?}"));
        }
        Ok(())
    }

    pub fn eval(&self, a: &[f64], b: &[f64]) -> Result<f64> {
        if a.len() != b.len() {
            return Err(dim_err!("kernel inputs of dimension {} and {}", a.len(), b.len()));
        }
        Ok(self.of_sq_dist(sq_dist(a, b)))
    }

    fn of_sq_dist(&self, d2: f64) -> f64 {
        let s2 = self.sigma * self.sigma;
        match self.family {
            KernelFamily::Rbf => s2 * (-d2 / (2.0 * self.lengthscale * self.lengthscale)).exp(),
            KernelFamily::Exponential => s2 * (-d2.sqrt() / self.lengthscale).exp(),
        }
    }

    /// `∂k / ∂ln l` at squared distance `d2`.
    fn dlogl_of_sq_dist(&self, d2: f64) -> f64 {
        let k = self.of_sq_dist(d2);
        let l = self.lengthscale;
        match self.family {
            KernelFamily::Rbf => k * d2 / (l * l),
            KernelFamily::Exponential => k * d2.sqrt() / l,
        }
    }

    /// Gram matrix of `n` points of dimension `dim`, without jitter.
    pub fn gram(&self, coords: &[f64], dim: usize) -> Vec<f64> {
        let n = coords.len() / dim;
        let mut k = vec![0.0; n * n];
        for i in 0..n {
            let a = &coords[i * dim..(i + 1) * dim];
            for j in 0..=i {
                let v = self.of_sq_dist(sq_dist(a, &coords[j * dim..(j + 1) * dim]));
                k[i * n + j] = v;
                k[j * n + i] = v;
            }
        }
        k
    }
}

/// How inducing points are chosen.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InducingStrategy {
    /// Uniform lattice over the bounding box: `q` points in 1-D,
    /// `⌈√q⌉²` points in 2-D.
    Grid,
    /// Uniform sample of distinct data coordinates without replacement.
    Subsample,
}

#[derive(Debug, Clone, PartialEq)]
pub struct InducingSet {
    pub dim: usize,
    pub points: Vec<f64>,
}

impl InducingSet {
    pub fn len(&self) -> usize {
        self.points.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn point(&self, j: usize) -> &[f64] {
        &self.points[j * self.dim..(j + 1) * self.dim]
    }
}

fn dedup_points(coords: &[f64], dim: usize) -> Vec<f64> {
    let mut seen = std::collections::HashSet::new();
    let mut out = Vec::new();
    for p in coords.chunks(dim) {
        let key: Vec<u64> = p.iter().map(|v| (v + 0.0).to_bits()).collect();
        if seen.insert(key) {
            out.extend_from_slice(p);
        }
    }
    out
}

pub fn select_inducing(
    coords: &[f64],
    dim: usize,
    q: usize,
    strategy: InducingStrategy,
    seed: u64,
) -> Result<InducingSet> {
    if q < 1 {
        return Err(contract_err!("need at least one inducing point"));
    }
    if dim == 0 || coords.is_empty() || coords.len() % dim != 0 {
        return Err(dim_err!("coordinates of length {} are not a multiple of dimension {dim}", coords.len()));
    }
    let points = match strategy {
        InducingStrategy::Grid => {
            let mut lo = vec![f64::INFINITY; dim];
            let mut hi = vec![f64::NEG_INFINITY; dim];
            for p in coords.chunks(dim) {
                for d in 0..dim {
                    lo[d] = lo[d].min(p[d]);
                    hi[d] = hi[d].max(p[d]);
                }
            }
            let per_axis = if dim == 1 { q } else { (q as f64).sqrt().ceil() as usize };
            let axis = |d: usize| -> Vec<f64> {
                if per_axis == 1 {
                    vec![0.5 * (lo[d] + hi[d])]
                } else {
                    (0..per_axis)
                        .map(|i| lo[d] + (hi[d] - lo[d]) * i as f64 / (per_axis - 1) as f64)
                        .collect()
                }
            };
            let axes: Vec<Vec<f64>> = (0..dim).map(axis).collect();
            let total = per_axis.pow(dim as u32);
            let mut pts = Vec::with_capacity(total * dim);
            for flat in 0..total {
                let mut rem = flat;
                let mut p = vec![0.0; dim];
                for d in (0..dim).rev() {
                    p[d] = axes[d][rem % per_axis];
                    rem /= per_axis;
                }
                pts.extend(p);
            }
            dedup_points(&pts, dim)
        }
        InducingStrategy::Subsample => {
            let unique = dedup_points(coords, dim);
            let n = unique.len() / dim;
            if q > n {
                return Err(contract_err!("{q} inducing points requested from {n} distinct coordinates"));
            }
            let mut rng = rng::stream(seed, "inducing");
            let mut idx = index::sample(&mut rng, n, q).into_vec();
            idx.sort_unstable();
            idx.iter().flat_map(|&i| unique[i * dim..(i + 1) * dim].iter().copied()).collect()
        }
    };
    Ok(InducingSet { dim, points })
}

/// Inducing-point feature map `z(s) = L⁻¹ k_q(s)`.
#[derive(Debug, Clone, PartialEq)]
pub struct NystromMap {
    inducing: InducingSet,
    kernel: KernelSpec,
    chol: Vec<f64>,
    jitter: f64,
}

const FEATURE_CHUNK: usize = 256;

impl NystromMap {
    pub fn build(inducing: InducingSet, kernel: KernelSpec) -> Result<Self> {
        kernel.validate()?;
        if inducing.is_empty() {
            return Err(contract_err!("empty inducing set"));
        }
        let q = inducing.len();
        let kq = kernel.gram(&inducing.points, inducing.dim);
        let (chol, jitter) = cholesky_jittered(&kq, q, kernel.noise)?;
        Ok(Self {
            inducing,
            kernel,
            chol,
            jitter,
        })
    }

    pub fn q(&self) -> usize {
        self.inducing.len()
    }

    pub fn dim(&self) -> usize {
        self.inducing.dim
    }

    pub fn kernel(&self) -> &KernelSpec {
        &self.kernel
    }

    pub fn inducing(&self) -> &InducingSet {
        &self.inducing
    }

    /// Lower factor of `K_q + εI` (row-major `q x q`).
    pub fn chol_factor(&self) -> &[f64] {
        &self.chol
    }

    /// Jitter actually added to the inducing Gram matrix.
    pub fn jitter(&self) -> f64 {
        self.jitter
    }

    /// `k_q(s)` including the nugget at coincident points, as `q x n`.
    fn cross_t(&self, coords: &[f64]) -> Vec<f64> {
        let d = self.dim();
        let n = coords.len() / d;
        let q = self.q();
        let mut k = vec![0.0; q * n];
        for j in 0..q {
            let u = self.inducing.point(j);
            for i in 0..n {
                let d2 = sq_dist(&coords[i * d..(i + 1) * d], u);
                k[j * n + i] = self.kernel.of_sq_dist(d2) + if d2 == 0.0 { self.jitter } else { 0.0 };
            }
        }
        k
    }

    fn check_coords(&self, coords: &[f64]) -> Result<usize> {
        if coords.len() % self.dim() != 0 {
            return Err(dim_err!("coordinates of length {} for dimension {}", coords.len(), self.dim()));
        }
        Ok(coords.len() / self.dim())
    }

    fn features_block(&self, coords: &[f64]) -> Vec<f64> {
        let n = coords.len() / self.dim();
        let q = self.q();
        let mut zt = self.cross_t(coords);
        solve_lower(&self.chol, q, &mut zt, n);
        transpose(&zt, q, n)
    }

    /// Feature rows `Z` as a row-major `n x q` matrix.
    pub fn features(&self, coords: &[f64], exec: Exec) -> Result<Vec<f64>> {
        let n = self.check_coords(coords)?;
        let d = self.dim();
        let blocks = par::map_slice(exec, &par::chunks(n, FEATURE_CHUNK), |r| {
            self.features_block(&coords[r.start * d..r.end * d])
        });
        Ok(blocks.concat())
    }

    /// `(Z, ∂Z/∂ln l)`, both `n x q`.
    pub fn features_with_dlogl(&self, coords: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
        let n = self.check_coords(coords)?;
        let (q, d) = (self.q(), self.dim());
        let mut zt = self.cross_t(coords);
        solve_lower(&self.chol, q, &mut zt, n);
        let mut dkt = vec![0.0; q * n];
        for j in 0..q {
            let u = self.inducing.point(j);
            for i in 0..n {
                dkt[j * n + i] = self.kernel.dlogl_of_sq_dist(sq_dist(&coords[i * d..(i + 1) * d], u));
            }
        }
        let mut dkq = vec![0.0; q * q];
        for a in 0..q {
            for b in 0..q {
                dkq[a * q + b] = self.kernel.dlogl_of_sq_dist(sq_dist(self.inducing.point(a), self.inducing.point(b)));
            }
        }
        // A = L⁻¹ dK_q L⁻ᵀ, then Φ(A): lower triangle with halved diagonal
        solve_lower(&self.chol, q, &mut dkq, q);
        let mut a = transpose(&dkq, q, q);
        solve_lower(&self.chol, q, &mut a, q);
        for r in 0..q {
            for c in 0..q {
                a[r * q + c] = match c.cmp(&r) {
                    std::cmp::Ordering::Less => a[r * q + c],
                    std::cmp::Ordering::Equal => 0.5 * a[r * q + c],
                    std::cmp::Ordering::Greater => 0.0,
                };
            }
        }
        solve_lower(&self.chol, q, &mut dkt, n);
        let mut dzt = dkt;
        crate::tensor::gemm(q, q, n, -1.0, &a, false, &zt, false, 1.0, &mut dzt);
        Ok((transpose(&zt, q, n), transpose(&dzt, q, n)))
    }

    /// Low-rank Gram approximation `Z Zᵀ` at `coords`.
    pub fn approx_gram(&self, coords: &[f64]) -> Result<Vec<f64>> {
        let z = self.features(coords, Exec::Sequential)?;
        let n = coords.len() / self.dim();
        let q = self.q();
        let mut out = vec![0.0; n * n];
        crate::tensor::gemm(n, q, n, 1.0, &z, false, &z, true, 0.0, &mut out);
        Ok(out)
    }

    pub fn with_lengthscale(&self, lengthscale: f64) -> Result<Self> {
        let mut k = self.kernel;
        k.lengthscale = lengthscale;
        NystromMap::build(self.inducing.clone(), k)
    }
}

fn transpose(a: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut t = vec![0.0; a.len()];
    for r in 0..rows {
        for c in 0..cols {
            t[c * rows + r] = a[r * cols + c];
        }
    }
    t
}

/// `U(s) = wᵀ z(s)` with trainable `w` and optionally trainable `ln l`.
#[derive(Debug, Clone, PartialEq)]
pub struct GpTerm {
    map: NystromMap,
    weights: Tensor,
    log_lengthscale: Option<Tensor>,
}

impl GpTerm {
    pub fn new(map: NystromMap, train_lengthscale: bool) -> Self {
        let q = map.q();
        let log_lengthscale = train_lengthscale.then(|| Tensor::scalar(map.kernel.lengthscale.ln()).with_grad());
        Self {
            map,
            weights: Tensor::zeros(&[q, 1]).with_grad(),
            log_lengthscale,
        }
    }

    pub fn map(&self) -> &NystromMap {
        &self.map
    }

    pub fn weights(&self) -> &Tensor {
        &self.weights
    }

    pub fn set_weights(&mut self, w: &[f64]) -> Result<()> {
        if w.len() != self.map.q() {
            return Err(dim_err!("GP weights of length {} for q = {}", w.len(), self.map.q()));
        }
        self.weights.data_mut().copy_from_slice(w);
        Ok(())
    }

    pub fn trains_lengthscale(&self) -> bool {
        self.log_lengthscale.is_some()
    }

    /// Trainable tensors: weights, then `ln l` when enabled.
    pub fn params(&self) -> Vec<&Tensor> {
        let mut v = vec![&self.weights];
        v.extend(self.log_lengthscale.as_ref());
        v
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut v = vec![&mut self.weights];
        v.extend(self.log_lengthscale.as_mut());
        v
    }

    /// Rebuilds the feature map after `ln l` has been updated.
    pub fn refresh(&mut self) -> Result<()> {
        if let Some(t) = &self.log_lengthscale {
            let l = t.data()[0].exp();
            if l != self.map.kernel.lengthscale {
                self.map = self.map.with_lengthscale(l)?;
            }
        }
        Ok(())
    }

    pub fn bind<'p>(&'p self, tape: &mut Tape<'p>) -> Vec<Var> {
        self.params().into_iter().map(|p| tape.leaf(p)).collect()
    }

    /// `[B, 1]` values at `coords` given precomputed features `z` (`B x q`).
    pub fn forward_features(&self, tape: &mut Tape<'_>, p: &[Var], z: Var) -> Result<Var> {
        tape.matmul(z, p[0])
    }

    /// `[B, 1]` values at `coords`, differentiable in `w` and, when
    /// enabled, in `ln l`.
    pub fn forward(&self, tape: &mut Tape<'_>, p: &[Var], coords: &[f64]) -> Result<Var> {
        let n = self.map.check_coords(coords)?;
        let q = self.map.q();
        let z = if self.log_lengthscale.is_some() {
            let (z, dz) = self.map.features_with_dlogl(coords)?;
            tape.scalar_dependent(z, &[n, q], p[1], dz)?
        } else {
            let z = self.map.features(coords, Exec::Sequential)?;
            tape.constant(z, &[n, q])?
        };
        tape.matmul(z, p[0])
    }

    pub fn values(&self, coords: &[f64], exec: Exec) -> Result<Vec<f64>> {
        let z = self.map.features(coords, exec)?;
        let q = self.map.q();
        let w = self.weights.data();
        Ok(z.chunks(q).map(|row| row.iter().zip(w).map(|(a, b)| a * b).sum()).collect())
    }

    pub fn value(&self, s: &[f64]) -> Result<f64> {
        Ok(self.values(s, Exec::Sequential)?[0])
    }
}

/// Reusable exact sampler of a zero-mean GP at fixed coordinates.
#[derive(Debug, Clone)]
pub struct GpSampler {
    n: usize,
    chol: Vec<f64>,
    jitter: f64,
}

impl GpSampler {
    pub fn new(coords: &[f64], dim: usize, kernel: &KernelSpec) -> Result<Self> {
        kernel.validate()?;
        if dim == 0 || coords.len() % dim != 0 || coords.is_empty() {
            return Err(dim_err!("coordinates of length {} for dimension {dim}", coords.len()));
        }
        let n = coords.len() / dim;
        let k = kernel.gram(coords, dim);
        let (chol, jitter) = cholesky_jittered(&k, n, kernel.noise)?;
        Ok(Self { n, chol, jitter })
    }

    pub fn jitter(&self) -> f64 {
        self.jitter
    }

    pub fn draw<R: rand::Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        let e: Vec<f64> = (0..self.n).map(|_| StandardNormal.sample(rng)).collect();
        lower_mul_vec(&self.chol, self.n, &e)
    }
}

/// One exact draw from `N(0, K + εI)` at `coords`.
pub fn sample_gp(coords: &[f64], dim: usize, kernel: &KernelSpec, seed: u64) -> Result<Vec<f64>> {
    let sampler = GpSampler::new(coords, dim, kernel)?;
    Ok(sampler.draw(&mut rng::stream(seed, "gp-sample")))
}
