//! Network architectures used for the interference and confounder terms.
//!
//! All networks map a batch to a `[B, out]` output. Flat networks (MLP and
//! the two linear maps) take `[B, d]`; convolutional ones take
//! `[B, C, H, W]`. [`Network::forward`] reshapes between the two layouts so a
//! neighbourhood patch can be fed to either.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::codec::{Reader, Writer};
use crate::error::{config_err, contract_err, dim_err, Result};
use crate::rng;
use crate::tensor::{Tape, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MlpSpec {
    pub in_dim: usize,
    pub out_dim: usize,
    pub width: usize,
    pub depth: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CnnSpec {
    pub in_channels: usize,
    pub channels: usize,
    pub depth: usize,
    pub kernel_size: usize,
    pub input_side: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UnetSpec {
    pub in_channels: usize,
    pub depth: usize,
    pub padding: usize,
    pub base_channels: usize,
    pub input_side: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum NetSpec {
    Mlp(MlpSpec),
    Cnn(CnnSpec),
    Unet(UnetSpec),
    /// `Σ w_kl · patch_kl` over a `rows × cols` patch, no bias.
    LinearInterference { rows: usize, cols: usize },
    /// `γᵀx + b`.
    LinearMap { in_dim: usize },
}

fn conv_params(cin: usize, cout: usize, k: usize) -> usize {
    cout * cin * k * k + cout
}

impl NetSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |what: &str| Err(config_err!("invalid network spec: {what} ({self:?})"));
        match *self {
            NetSpec::Mlp(s) => {
                if s.in_dim == 0 || s.out_dim == 0 {
                    return bad("input and output dimensions must be positive");
                }
                if s.width == 0 || s.depth == 0 {
                    return bad("width and depth must be at least 1");
                }
            }
            NetSpec::Cnn(s) => {
                if s.in_channels == 0 || s.channels == 0 || s.depth == 0 {
                    return bad("channels and depth must be at least 1");
                }
                if s.kernel_size == 0 || s.kernel_size % 2 == 0 {
                    return bad("kernel size must be a positive odd integer");
                }
                if s.input_side < s.kernel_size {
                    return Err(dim_err!("input side {} smaller than kernel {}", s.input_side, s.kernel_size));
                }
            }
            NetSpec::Unet(s) => {
                if s.in_channels == 0 || s.base_channels == 0 || s.depth == 0 || s.input_side == 0 {
                    return bad("channels, depth and input side must be at least 1");
                }
                if s.input_side % 2 == 0 {
                    return Err(contract_err!("U-Net input side {} must be odd for centre reduction", s.input_side));
                }
            }
            NetSpec::LinearInterference { rows, cols } => {
                if rows == 0 || cols == 0 {
                    return bad("patch shape must be positive");
                }
            }
            NetSpec::LinearMap { in_dim } => {
                if in_dim == 0 {
                    return bad("input dimension must be positive");
                }
            }
        }
        Ok(())
    }

    /// Parameter shapes in storage order.
    pub fn param_shapes(&self) -> Vec<Vec<usize>> {
        let mut out = Vec::new();
        match *self {
            NetSpec::Mlp(s) => {
                let mut fan_in = s.in_dim;
                for _ in 0..s.depth {
                    out.push(vec![fan_in, s.width]);
                    out.push(vec![s.width]);
                    fan_in = s.width;
                }
                out.push(vec![s.width, s.out_dim]);
                out.push(vec![s.out_dim]);
            }
            NetSpec::Cnn(s) => {
                let mut cin = s.in_channels;
                for _ in 0..s.depth {
                    out.push(vec![s.channels, cin, s.kernel_size, s.kernel_size]);
                    out.push(vec![s.channels]);
                    cin = s.channels;
                }
                out.push(vec![s.channels, 1]);
                out.push(vec![1]);
            }
            NetSpec::Unet(s) => {
                for (cin, cout) in unet_convs(&s) {
                    out.push(vec![cout, cin, s.kernel(), s.kernel()]);
                    out.push(vec![cout]);
                }
                out.push(vec![1, s.base_channels, 1, 1]);
                out.push(vec![1]);
            }
            NetSpec::LinearInterference { rows, cols } => out.push(vec![rows * cols, 1]),
            NetSpec::LinearMap { in_dim } => {
                out.push(vec![in_dim, 1]);
                out.push(vec![1]);
            }
        }
        out
    }

    /// Closed-form parameter count.
    pub fn param_count(&self) -> usize {
        match *self {
            NetSpec::Mlp(s) => {
                s.in_dim * s.width + s.width + (s.depth - 1) * (s.width * s.width + s.width) + s.width * s.out_dim + s.out_dim
            }
            NetSpec::Cnn(s) => {
                conv_params(s.in_channels, s.channels, s.kernel_size)
                    + (s.depth - 1) * conv_params(s.channels, s.channels, s.kernel_size)
                    + s.channels
                    + 1
            }
            NetSpec::Unet(s) => {
                unet_convs(&s).iter().map(|&(i, o)| conv_params(i, o, s.kernel())).sum::<usize>() + s.base_channels + 1
            }
            NetSpec::LinearInterference { rows, cols } => rows * cols,
            NetSpec::LinearMap { in_dim } => in_dim + 1,
        }
    }

    fn is_spatial(&self) -> bool {
        matches!(self, NetSpec::Cnn(_) | NetSpec::Unet(_))
    }

    fn tag(&self) -> u8 {
        match self {
            NetSpec::Mlp(_) => 0,
            NetSpec::Cnn(_) => 1,
            NetSpec::Unet(_) => 2,
            NetSpec::LinearInterference { .. } => 3,
            NetSpec::LinearMap { .. } => 4,
        }
    }

    fn fields(&self) -> Vec<usize> {
        match *self {
            NetSpec::Mlp(s) => vec![s.in_dim, s.out_dim, s.width, s.depth],
            NetSpec::Cnn(s) => vec![s.in_channels, s.channels, s.depth, s.kernel_size, s.input_side],
            NetSpec::Unet(s) => vec![s.in_channels, s.depth, s.padding, s.base_channels, s.input_side],
            NetSpec::LinearInterference { rows, cols } => vec![rows, cols],
            NetSpec::LinearMap { in_dim } => vec![in_dim],
        }
    }
}

impl UnetSpec {
    pub fn kernel(&self) -> usize {
        2 * self.padding + 1
    }

    fn channels(&self, level: usize) -> usize {
        self.base_channels << level
    }
}

/// `(in, out)` channels of every 3x3-style conv in storage order: encoder
/// pairs, bottleneck pair, then decoder pairs from deepest to shallowest.
fn unet_convs(s: &UnetSpec) -> Vec<(usize, usize)> {
    let mut v = Vec::new();
    let mut cin = s.in_channels;
    for l in 0..s.depth {
        let c = s.channels(l);
        v.push((cin, c));
        v.push((c, c));
        cin = c;
    }
    let cb = s.channels(s.depth);
    v.push((cin, cb));
    v.push((cb, cb));
    let mut up = cb;
    for l in (0..s.depth).rev() {
        let c = s.channels(l);
        v.push((up + c, c));
        v.push((c, c));
        up = c;
    }
    v
}

/// A network: its spec plus parameters in [`NetSpec::param_shapes`] order.
#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    spec: NetSpec,
    params: Vec<Tensor>,
}

impl Network {
    /// Glorot-uniform weights, zero biases.
    pub fn build(spec: NetSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut rng = rng::stream(seed, "net-init");
        let params = spec
            .param_shapes()
            .into_iter()
            .map(|shape| {
                let n: usize = shape.iter().product();
                let data = if shape.len() == 1 {
                    vec![0.0; n]
                } else {
                    let (fan_in, fan_out) = fans(&shape);
                    let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
                    (0..n).map(|_| rng.random_range(-a..a)).collect()
                };
                Tensor::new(&shape, data).map(Tensor::with_grad)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { spec, params })
    }

    /// Wraps explicit parameter values, checking their shapes.
    pub fn from_params(spec: NetSpec, values: Vec<Vec<f64>>) -> Result<Self> {
        spec.validate()?;
        let shapes = spec.param_shapes();
        if shapes.len() != values.len() {
            return Err(dim_err!("expected {} parameter tensors, got {}", shapes.len(), values.len()));
        }
        let params = shapes
            .iter()
            .zip(values)
            .map(|(s, v)| Tensor::new(s, v).map(Tensor::with_grad))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { spec, params })
    }

    pub fn spec(&self) -> &NetSpec {
        &self.spec
    }

    pub fn params(&self) -> &[Tensor] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor] {
        &mut self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(Tensor::len).sum()
    }

    pub fn zero(&mut self) {
        for p in &mut self.params {
            p.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
    }

    /// Records the parameters as tape leaves.
    pub fn bind<'p>(&'p self, tape: &mut Tape<'p>) -> Vec<Var> {
        self.params.iter().map(|p| tape.leaf(p)).collect()
    }

    /// Output `[B, out_dim]` (`out_dim = 1` for all but MLPs).
    pub fn forward(&self, tape: &mut Tape<'_>, p: &[Var], x: Var) -> Result<Var> {
        if p.len() != self.params.len() {
            return Err(contract_err!("network bound with {} parameters, expected {}", p.len(), self.params.len()));
        }
        let x = self.adapt_input(tape, x)?;
        match self.spec {
            NetSpec::Mlp(s) => mlp_forward(tape, p, s.depth, x),
            NetSpec::Cnn(s) => {
                let mut h = x;
                for l in 0..s.depth {
                    h = tape.conv2d(h, p[2 * l], s.kernel_size / 2)?;
                    h = tape.bias_add(h, p[2 * l + 1])?;
                    h = tape.relu(h)?;
                }
                let g = tape.global_avg_pool(h)?;
                let o = tape.matmul(g, p[2 * s.depth])?;
                tape.bias_add(o, p[2 * s.depth + 1])
            }
            NetSpec::Unet(_) => {
                let map = self.forward_map(tape, p, x)?;
                unet_reduce(tape, map)
            }
            NetSpec::LinearInterference { .. } => tape.matmul(x, p[0]),
            NetSpec::LinearMap { .. } => {
                let o = tape.matmul(x, p[0])?;
                tape.bias_add(o, p[1])
            }
        }
    }

    /// Full U-Net output map `[B, 1, H, W]` with the input's spatial size.
    pub fn forward_map(&self, tape: &mut Tape<'_>, p: &[Var], x: Var) -> Result<Var> {
        let NetSpec::Unet(s) = self.spec else {
            return Err(contract_err!("forward_map is defined for U-Nets only"));
        };
        let x = self.adapt_input(tape, x)?;
        let [_, _, h, w] = <[usize; 4]>::try_from(tape.shape(x)).unwrap();
        let mult = 1usize << s.depth;
        let (hp, wp) = (h.div_ceil(mult) * mult, w.div_ceil(mult) * mult);
        let (top, left) = ((hp - h) / 2, (wp - w) / 2);
        let mut cur = tape.pad2d(x, [top, hp - h - top, left, wp - w - left])?;
        let mut k = 0;
        let conv = |tape: &mut Tape<'_>, h: Var, k: &mut usize| -> Result<Var> {
            let c = tape.conv2d(h, p[2 * *k], s.padding)?;
            let c = tape.bias_add(c, p[2 * *k + 1])?;
            *k += 1;
            tape.relu(c)
        };
        let mut skips = Vec::with_capacity(s.depth);
        for _ in 0..s.depth {
            cur = conv(tape, cur, &mut k)?;
            cur = conv(tape, cur, &mut k)?;
            skips.push(cur);
            cur = tape.maxpool2(cur)?;
        }
        cur = conv(tape, cur, &mut k)?;
        cur = conv(tape, cur, &mut k)?;
        for skip in skips.into_iter().rev() {
            cur = tape.upsample2(cur)?;
            cur = tape.concat(cur, skip)?;
            cur = conv(tape, cur, &mut k)?;
            cur = conv(tape, cur, &mut k)?;
        }
        let head = tape.conv2d(cur, p[2 * k], 0)?;
        let head = tape.bias_add(head, p[2 * k + 1])?;
        tape.crop2d(head, top, left, h, w)
    }

    fn adapt_input(&self, tape: &mut Tape<'_>, x: Var) -> Result<Var> {
        let shape = tape.shape(x).to_vec();
        let b = shape[0];
        let features: usize = shape[1..].iter().product();
        match self.spec {
            NetSpec::Cnn(CnnSpec { in_channels: c, .. }) | NetSpec::Unet(UnetSpec { in_channels: c, .. }) => {
                if shape.len() == 4 {
                    if shape[1] != c {
                        return Err(dim_err!("expected {c} input channels, got {shape:?}"));
                    }
                    return Ok(x);
                }
                let side = ((features / c) as f64).sqrt().round() as usize;
                if side * side * c != features {
                    return Err(dim_err!("cannot view input {shape:?} as {c} square channels"));
                }
                tape.reshape(x, &[b, c, side, side])
            }
            _ => {
                let want = match self.spec {
                    NetSpec::Mlp(s) => s.in_dim,
                    NetSpec::LinearInterference { rows, cols } => rows * cols,
                    NetSpec::LinearMap { in_dim } => in_dim,
                    _ => unreachable!(),
                };
                if features != want {
                    return Err(dim_err!("network expects {want} input features, got {shape:?}"));
                }
                if shape.len() == 2 {
                    Ok(x)
                } else {
                    tape.reshape(x, &[b, features])
                }
            }
        }
    }

    /// Forward pass without gradient bookkeeping beyond a throwaway tape.
    pub fn eval(&self, input: &[f64], shape: &[usize]) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let p = self.bind(&mut tape);
        let x = tape.constant_ref(input, shape)?;
        let y = self.forward(&mut tape, &p, x)?;
        Ok(tape.value(y).to_vec())
    }

    pub fn is_spatial(&self) -> bool {
        self.spec.is_spatial()
    }

    /// `NET1` | u8 kind | u32 spec fields | u64 parameter count | f64 values.
    pub fn encode(&self, w: &mut Writer) -> Result<()> {
        w.bytes(b"NET1");
        w.u8(self.spec.tag());
        for f in self.spec.fields() {
            w.dim(f)?;
        }
        w.u64(self.param_count() as u64);
        for p in &self.params {
            w.f64s(p.data());
        }
        Ok(())
    }

    pub fn decode(r: &mut Reader<'_>) -> Result<Self> {
        r.magic(b"NET1")?;
        let tag_at = r.offset();
        let tag = r.u8()?;
        let n_fields = match tag {
            0 => 4,
            1 | 2 => 5,
            3 => 2,
            4 => 1,
            t => {
                return Err(crate::Error::Format {
                    offset: tag_at,
                    message: format!("unknown network kind {t}"),
                })
            }
        };
        let f = (0..n_fields)
            .map(|_| r.u32().map(|v| v as usize))
            .collect::<Result<Vec<_>>>()?;
        let spec = match tag {
            0 => NetSpec::Mlp(MlpSpec {
                in_dim: f[0],
                out_dim: f[1],
                width: f[2],
                depth: f[3],
            }),
            1 => NetSpec::Cnn(CnnSpec {
                in_channels: f[0],
                channels: f[1],
                depth: f[2],
                kernel_size: f[3],
                input_side: f[4],
            }),
            2 => NetSpec::Unet(UnetSpec {
                in_channels: f[0],
                depth: f[1],
                padding: f[2],
                base_channels: f[3],
                input_side: f[4],
            }),
            3 => NetSpec::LinearInterference { rows: f[0], cols: f[1] },
            _ => NetSpec::LinearMap { in_dim: f[0] },
        };
        spec.validate().map_err(|e| r.error(e.to_string()))?;
        let count_at = r.offset();
        let count = r.u64()? as usize;
        if count != spec.param_count() {
            return Err(crate::Error::Format {
                offset: count_at,
                message: format!("parameter count {count} does not match spec ({})", spec.param_count()),
            });
        }
        let values = spec
            .param_shapes()
            .iter()
            .map(|s| r.f64s(s.iter().product()))
            .collect::<Result<Vec<_>>>()?;
        Network::from_params(spec, values)
    }
}

fn fans(shape: &[usize]) -> (usize, usize) {
    match *shape {
        [i, o] => (i, o),
        [co, ci, kh, kw] => (ci * kh * kw, co * kh * kw),
        _ => (shape[0], shape[0]),
    }
}

fn mlp_forward(tape: &mut Tape<'_>, p: &[Var], depth: usize, x: Var) -> Result<Var> {
    let mut h = x;
    for l in 0..depth {
        h = tape.matmul(h, p[2 * l])?;
        h = tape.bias_add(h, p[2 * l + 1])?;
        h = tape.relu(h)?;
    }
    let o = tape.matmul(h, p[2 * depth])?;
    tape.bias_add(o, p[2 * depth + 1])
}

/// Centre pixel of a `[B, 1, H, W]` map as `[B, 1]`; `H` and `W` must be odd.
pub fn unet_reduce(tape: &mut Tape<'_>, map: Var) -> Result<Var> {
    tape.center(map)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mlp(i: usize, o: usize, w: usize, d: usize) -> NetSpec {
        NetSpec::Mlp(MlpSpec {
            in_dim: i,
            out_dim: o,
            width: w,
            depth: d,
        })
    }

    #[test]
    fn mlp_param_count() {
        let spec = mlp(4, 1, 256, 3);
        let by_layer = (4 * 256 + 256) + 2 * (256 * 256 + 256) + (256 + 1);
        assert_eq!(by_layer, 133_121);
        assert_eq!(spec.param_count(), by_layer);
        assert_eq!(Network::build(spec, 0).unwrap().param_count(), by_layer);
    }

    #[test]
    fn param_counts_match_shapes() {
        let specs = [
            mlp(3, 2, 5, 2),
            NetSpec::Cnn(CnnSpec {
                in_channels: 2,
                channels: 4,
                depth: 3,
                kernel_size: 3,
                input_side: 9,
            }),
            NetSpec::Unet(UnetSpec {
                in_channels: 1,
                depth: 3,
                padding: 1,
                base_channels: 2,
                input_side: 51,
            }),
            NetSpec::LinearInterference { rows: 3, cols: 5 },
            NetSpec::LinearMap { in_dim: 7 },
        ];
        for s in specs {
            let from_shapes: usize = s.param_shapes().iter().map(|v| v.iter().product::<usize>()).sum();
            assert_eq!(s.param_count(), from_shapes, "{s:?}");
        }
    }

    #[test]
    fn invalid_specs_rejected() {
        assert!(Network::build(mlp(4, 1, 0, 3), 0).is_err());
        assert!(Network::build(mlp(4, 1, 8, 0), 0).is_err());
        let small = NetSpec::Cnn(CnnSpec {
            in_channels: 1,
            channels: 2,
            depth: 1,
            kernel_size: 5,
            input_side: 3,
        });
        assert!(matches!(Network::build(small, 0), Err(crate::Error::Dimension(_))));
    }

    #[test]
    fn seeded_build_is_deterministic() {
        let a = Network::build(mlp(4, 1, 16, 2), 9).unwrap();
        let b = Network::build(mlp(4, 1, 16, 2), 9).unwrap();
        let c = Network::build(mlp(4, 1, 16, 2), 10).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn cnn_zero_input_gives_zero() {
        let spec = NetSpec::Cnn(CnnSpec {
            in_channels: 1,
            channels: 4,
            depth: 2,
            kernel_size: 3,
            input_side: 7,
        });
        let net = Network::build(spec, 1).unwrap();
        let out = net.eval(&[0.0; 2 * 49], &[2, 1, 7, 7]).unwrap();
        assert_eq!(out, vec![0.0, 0.0]);
    }

    #[test]
    fn unet_shape_preserved() {
        for side in [16, 24, 51] {
            let spec = NetSpec::Unet(UnetSpec {
                in_channels: 1,
                depth: 3,
                padding: 1,
                base_channels: 2,
                input_side: 51,
            });
            let net = Network::build(spec, 3).unwrap();
            let x = vec![0.1; side * side];
            let mut tape = Tape::new();
            let p = net.bind(&mut tape);
            let xv = tape.constant_ref(&x, &[1, 1, side, side]).unwrap();
            let m = net.forward_map(&mut tape, &p, xv).unwrap();
            assert_eq!(tape.shape(m), &[1, 1, side, side]);
        }
    }

    #[test]
    fn centre_reduction() {
        let mut tape = Tape::new();
        let m = tape.constant((1..=9).map(f64::from).collect(), &[1, 1, 3, 3]).unwrap();
        let c = unet_reduce(&mut tape, m).unwrap();
        assert_eq!(tape.value(c), &[5.0]);
        let big: Vec<f64> = (0..51 * 51).map(f64::from).collect();
        let m = tape.constant(big, &[1, 1, 51, 51]).unwrap();
        let c = unet_reduce(&mut tape, m).unwrap();
        assert_eq!(tape.value(c), &[(25 * 51 + 25) as f64]);
        let even = tape.constant(vec![1.0; 4], &[1, 1, 2, 2]).unwrap();
        assert!(matches!(unet_reduce(&mut tape, even), Err(crate::Error::Contract(_))));
    }

    #[test]
    fn linear_interference_one_hot() {
        let spec = NetSpec::LinearInterference { rows: 2, cols: 2 };
        let mut w = vec![0.0; 4];
        w[2] = 1.0;
        let net = Network::from_params(spec, vec![w]).unwrap();
        let out = net.eval(&[3.0, 4.0, 5.0, 6.0], &[1, 1, 2, 2]).unwrap();
        assert_eq!(out, vec![5.0]);
        let zero = Network::from_params(spec, vec![vec![0.0; 4]]).unwrap();
        assert_eq!(zero.eval(&[3.0, 4.0, 5.0, 6.0], &[1, 4]).unwrap(), vec![0.0]);
    }

    #[test]
    fn codec_round_trip() {
        let nets = [
            Network::build(mlp(3, 1, 4, 2), 5).unwrap(),
            Network::build(
                NetSpec::Unet(UnetSpec {
                    in_channels: 1,
                    depth: 2,
                    padding: 1,
                    base_channels: 2,
                    input_side: 9,
                }),
                5,
            )
            .unwrap(),
        ];
        for net in nets {
            let mut w = Writer::new();
            net.encode(&mut w).unwrap();
            let buf = w.into_inner();
            let mut r = Reader::new(&buf);
            assert_eq!(Network::decode(&mut r).unwrap(), net);
            r.finish().unwrap();
        }
    }
}
