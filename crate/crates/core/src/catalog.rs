//! Finite-difference checks over every differentiable op kind.

use rand::Rng;

use crate::error::Result;
use crate::gp::{select_inducing, GpTerm, InducingStrategy, KernelSpec, NystromMap};
use crate::nets::{CnnSpec, MlpSpec, NetSpec, Network, UnetSpec};
use crate::rng;
use crate::tensor::{finite_diff_check, GradReport, Tape, Tensor, Var};

pub const GRADCHECK_TOLERANCE: f64 = 1e-4;

#[derive(Debug, Clone, PartialEq)]
pub struct CatalogEntry {
    pub name: &'static str,
    pub report: GradReport,
}

type Check = fn(u64) -> Result<GradReport>;

fn random(seed: u64, role: &str, shape: &[usize]) -> Tensor {
    let mut r = rng::stream(seed, role);
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| r.random_range(-1.0..1.0)).collect()).expect("shape matches data")
}

fn param(seed: u64, role: &str, shape: &[usize]) -> Tensor {
    random(seed, role, shape).with_grad()
}

/// Weighted sum with fixed random coefficients, so every output coordinate
/// contributes a distinct gradient.
fn project(t: &mut Tape<'_>, v: Var, seed: u64) -> Result<Var> {
    let shape = t.shape(v).to_vec();
    let n: usize = shape.iter().product();
    let c = random(seed, "projection", &[n]).data().to_vec();
    let c = t.constant(c, &shape)?;
    let p = t.mul(v, c)?;
    t.sum(p)
}

fn check<F>(f: F, params: &[Tensor], seed: u64) -> Result<GradReport>
where
    F: Fn(&mut Tape<'_>, &[Var]) -> Result<Var>,
{
    finite_diff_check(|t, v| { let out = f(t, v)?; project(t, out, seed) }, params, GRADCHECK_TOLERANCE)
}

fn matmul(seed: u64) -> Result<GradReport> {
    check(|t, v| t.matmul(v[0], v[1]), &[param(seed, "a", &[3, 4]), param(seed, "b", &[4, 2])], seed)
}

fn mlp_layer(seed: u64) -> Result<GradReport> {
    let ps = [param(seed, "x", &[4, 3]), param(seed, "w", &[3, 5]), param(seed, "b", &[5])];
    check(
        |t, v| {
            let h = t.matmul(v[0], v[1])?;
            let h = t.bias_add(h, v[2])?;
            t.relu(h)
        },
        &ps,
        seed,
    )
}

fn elementwise(seed: u64) -> Result<GradReport> {
    let ps = [param(seed, "a", &[2, 6]), param(seed, "b", &[2, 6])];
    check(
        |t, v| {
            let s = t.sub(v[0], v[1])?;
            let e = t.elu(s)?;
            let m = t.mul(e, v[1])?;
            let a = t.add(m, v[0])?;
            t.scale(a, 0.7)
        },
        &ps,
        seed,
    )
}

fn conv2d(seed: u64) -> Result<GradReport> {
    let ps = [param(seed, "x", &[1, 2, 4, 4]), param(seed, "w", &[2, 2, 3, 3])];
    check(|t, v| t.conv2d(v[0], v[1], 1), &ps, seed)
}

fn maxpool(seed: u64) -> Result<GradReport> {
    check(|t, v| t.maxpool2(v[0]), &[param(seed, "x", &[1, 2, 4, 4])], seed)
}

fn upsample(seed: u64) -> Result<GradReport> {
    check(|t, v| t.upsample2(v[0]), &[param(seed, "x", &[2, 1, 2, 3])], seed)
}

fn concat(seed: u64) -> Result<GradReport> {
    let ps = [param(seed, "a", &[1, 2, 3, 3]), param(seed, "b", &[1, 1, 3, 3])];
    check(|t, v| t.concat(v[0], v[1]), &ps, seed)
}

fn pad_crop(seed: u64) -> Result<GradReport> {
    check(
        |t, v| {
            let p = t.pad2d(v[0], [1, 0, 2, 1])?;
            t.crop2d(p, 0, 1, 4, 4)
        },
        &[param(seed, "x", &[1, 2, 3, 3])],
        seed,
    )
}

fn center_pool(seed: u64) -> Result<GradReport> {
    check(
        |t, v| {
            let c = t.center(v[0])?;
            let g = t.global_avg_pool(v[0])?;
            let g = t.reshape(g, &[2, 1])?;
            t.add(c, g)
        },
        &[param(seed, "x", &[2, 1, 3, 5])],
        seed,
    )
}

fn losses(seed: u64) -> Result<GradReport> {
    let ps = [param(seed, "p", &[6, 1]), param(seed, "y", &[6, 1])];
    finite_diff_check(
        |t, v| {
            let a = t.mse(v[0], v[1])?;
            let m = t.mean(v[0])?;
            t.add(a, m)
        },
        &ps,
        GRADCHECK_TOLERANCE,
    )
}

fn network(spec: NetSpec, seed: u64, input: &[usize]) -> Result<GradReport> {
    let net = Network::build(spec, seed)?;
    // nonzero biases so the check exercises them
    let mut params: Vec<Tensor> = net.params().to_vec();
    for (k, p) in params.iter_mut().enumerate() {
        let noise = random(seed, &format!("perturb-{k}"), p.shape());
        p.data_mut().iter_mut().zip(noise.data()).for_each(|(a, b)| *a += 0.1 * b);
    }
    let net = Network::from_params(spec, params.iter().map(|p| p.data().to_vec()).collect())?;
    let x = random(seed, "input", input);
    let mut all = params;
    all.push(x.with_grad());
    check(
        |t, v| {
            let (p, x) = v.split_at(v.len() - 1);
            net.forward(t, p, x[0])
        },
        &all,
        seed,
    )
}

fn mlp(seed: u64) -> Result<GradReport> {
    let spec = NetSpec::Mlp(MlpSpec {
        in_dim: 3,
        out_dim: 2,
        width: 6,
        depth: 2,
    });
    network(spec, seed, &[4, 3])
}

fn cnn(seed: u64) -> Result<GradReport> {
    let spec = NetSpec::Cnn(CnnSpec {
        in_channels: 1,
        channels: 3,
        depth: 2,
        kernel_size: 3,
        input_side: 5,
    });
    network(spec, seed, &[2, 1, 5, 5])
}

fn unet(seed: u64) -> Result<GradReport> {
    let spec = NetSpec::Unet(UnetSpec {
        in_channels: 1,
        depth: 1,
        padding: 1,
        base_channels: 2,
        input_side: 5,
    });
    network(spec, seed, &[1, 1, 5, 5])
}

fn linear_interference(seed: u64) -> Result<GradReport> {
    network(NetSpec::LinearInterference { rows: 3, cols: 3 }, seed, &[4, 1, 3, 3])
}

fn linear_map(seed: u64) -> Result<GradReport> {
    network(NetSpec::LinearMap { in_dim: 4 }, seed, &[5, 4])
}

fn gp_coords(seed: u64) -> Vec<f64> {
    let mut r = rng::stream(seed, "gp-coords");
    (0..12).map(|_| r.random_range(0.0..1.0)).collect()
}

fn gp_weights(seed: u64) -> Result<GradReport> {
    let coords = gp_coords(seed);
    let inducing = select_inducing(&coords, 2, 4, InducingStrategy::Grid, seed)?;
    let mut term = GpTerm::new(NystromMap::build(inducing, KernelSpec::rbf(1.0, 0.4, 0.1))?, false);
    term.set_weights(random(seed, "w", &[4]).data())?;
    let w = term.weights().clone();
    check(|t, v| term.forward(t, v, &coords), &[w], seed)
}

fn gp_lengthscale(seed: u64) -> Result<GradReport> {
    let coords = gp_coords(seed);
    let inducing = select_inducing(&coords, 2, 4, InducingStrategy::Grid, seed)?;
    let base = KernelSpec::exponential(1.0, 0.4, 0.1);
    let w = param(seed, "w", &[4, 1]);
    let logl = Tensor::scalar(0.4f64.ln()).with_grad();
    check(
        |t, v| {
            let kernel = KernelSpec {
                lengthscale: t.value(v[1])[0].exp(),
                ..base
            };
            let map = NystromMap::build(inducing.clone(), kernel)?;
            let (z, dz) = map.features_with_dlogl(&coords)?;
            let z = t.scalar_dependent(z, &[6, map.q()], v[1], dz)?;
            t.matmul(z, v[0])
        },
        &[w, logl],
        seed,
    )
}

/// Every catalogued op kind in a fixed order.
pub const CATALOG: [(&str, Check); 17] = [
    ("matmul", matmul),
    ("mlp_layer", mlp_layer),
    ("elementwise", elementwise),
    ("conv2d", conv2d),
    ("maxpool2", maxpool),
    ("upsample2", upsample),
    ("concat", concat),
    ("pad_crop", pad_crop),
    ("center_pool", center_pool),
    ("losses", losses),
    ("mlp", mlp),
    ("cnn", cnn),
    ("unet", unet),
    ("linear_interference", linear_interference),
    ("linear_map", linear_map),
    ("gp_weights", gp_weights),
    ("gp_lengthscale", gp_lengthscale),
];

pub fn run_catalog(seed: u64) -> Result<Vec<CatalogEntry>> {
    CATALOG
        .iter()
        .map(|(name, f)| Ok(CatalogEntry { name, report: f(seed)? }))
        .collect()
}
