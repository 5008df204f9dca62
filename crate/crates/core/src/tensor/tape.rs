//! Reverse-mode tape over whole-tensor operations.
//!
//! Nodes are appended in evaluation order, so the node index is already a
//! topological order and `backward` simply walks the tape from the loss
//! towards the leaves. Leaves may borrow parameter storage for the lifetime
//! of the tape; intermediate values are owned.

use std::borrow::Cow;

use super::{gemm, numel, Tensor};
use crate::error::{contract_err, dim_err, numeric_err, Result};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

type CustomBackward<'p> = Box<dyn Fn(&[&[f64]], &[f64], &[f64]) -> Vec<Vec<f64>> + 'p>;

enum Op<'p> {
    Leaf,
    MatMul(Var, Var),
    AddBias(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Elu(Var),
    Conv2d {
        x: Var,
        w: Var,
        padding: usize,
        cols: Vec<f64>,
    },
    MaxPool2 {
        x: Var,
        argmax: Vec<usize>,
    },
    Upsample2(Var),
    Concat(Var, Var),
    Pad2d {
        x: Var,
        pad: [usize; 4],
    },
    Crop2d {
        x: Var,
        top: usize,
        left: usize,
    },
    Center(Var),
    GlobalAvgPool(Var),
    Reshape(Var),
    Sum(Var),
    Mean(Var),
    Mse(Var, Var),
    ScalarJacobian {
        param: Var,
        jac: Vec<f64>,
    },
    Custom {
        name: String,
        inputs: Vec<Var>,
        backward: CustomBackward<'p>,
    },
}

impl Op<'_> {
    fn name(&self) -> &str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul(..) => "matmul",
            Op::AddBias(..) => "bias_add",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::Relu(_) => "relu",
            Op::Elu(_) => "elu",
            Op::Conv2d { .. } => "conv2d",
            Op::MaxPool2 { .. } => "maxpool2",
            Op::Upsample2(_) => "upsample2",
            Op::Concat(..) => "concat",
            Op::Pad2d { .. } => "pad2d",
            Op::Crop2d { .. } => "crop2d",
            Op::Center(_) => "center",
            Op::GlobalAvgPool(_) => "global_avg_pool",
            Op::Reshape(_) => "reshape",
            Op::Sum(_) => "sum",
            Op::Mean(_) => "mean",
            Op::Mse(..) => "mse",
            Op::ScalarJacobian { .. } => "scalar_jacobian",
            Op::Custom { name, .. } => name,
        }
    }
}

struct Node<'p> {
    value: Cow<'p, [f64]>,
    shape: Vec<usize>,
    op: Op<'p>,
    requires_grad: bool,
}

/// Recorded computation graph. Confined to one thread.
#[derive(Default)]
pub struct Tape<'p> {
    nodes: Vec<Node<'p>>,
}

/// Gradients of a scalar with respect to the leaves of a tape.
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// Gradient for a leaf; `None` when the leaf does not require grad or
    /// is unreachable from the loss.
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }
}

fn conv_out(side: usize, k: usize, pad: usize) -> Option<usize> {
    (side + 2 * pad + 1).checked_sub(k)
}

impl<'p> Tape<'p> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    /// Name of the op that produced `v`.
    pub fn op_name(&self, v: Var) -> &str {
        self.nodes[v.0].op.name()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Cow<'p, [f64]>, shape: Vec<usize>, op: Op<'p>, grad: bool) -> Result<Var> {
        debug_assert_eq!(value.len(), numel(&shape));
        if let Some(i) = value.iter().position(|v| !v.is_finite()) {
            return Err(numeric_err!("{} produced a non-finite value at index {i}", op.name()));
        }
        self.nodes.push(Node {
            value,
            shape,
            op,
            requires_grad: grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn rg(&self, vs: &[Var]) -> bool {
        vs.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Borrows a tensor as a leaf. Gradient tracking follows the tensor's flag.
    pub fn leaf(&mut self, t: &'p Tensor) -> Var {
        self.push(Cow::Borrowed(t.data()), t.shape().to_vec(), Op::Leaf, t.requires_grad())
            .expect("tensor leaves hold finite values")
    }

    /// Leaf from owned data that never receives a gradient.
    pub fn constant(&mut self, data: Vec<f64>, shape: &[usize]) -> Result<Var> {
        if numel(shape) != data.len() || shape.is_empty() {
            return Err(dim_err!("constant of shape {shape:?} given {} values", data.len()));
        }
        self.push(Cow::Owned(data), shape.to_vec(), Op::Leaf, false)
    }

    /// Leaf borrowing a slice that never receives a gradient.
    pub fn constant_ref(&mut self, data: &'p [f64], shape: &[usize]) -> Result<Var> {
        if numel(shape) != data.len() || shape.is_empty() {
            return Err(dim_err!("constant of shape {shape:?} given {} values", data.len()));
        }
        self.push(Cow::Borrowed(data), shape.to_vec(), Op::Leaf, false)
    }

    fn same_shape(&self, a: Var, b: Var, op: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(dim_err!("{op}: shapes {:?} and {:?} differ", self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    fn dims4(&self, x: Var, op: &str) -> Result<[usize; 4]> {
        match *self.shape(x) {
            [b, c, h, w] => Ok([b, c, h, w]),
            ref s => Err(dim_err!("{op}: expected [batch, channels, h, w], got {s:?}")),
        }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = match *self.shape(a) {
            [m, k] => (m, k),
            ref s => return Err(dim_err!("matmul: left operand must be 2-D, got {s:?}")),
        };
        let (k2, n) = match *self.shape(b) {
            [k2, n] => (k2, n),
            ref s => return Err(dim_err!("matmul: right operand must be 2-D, got {s:?}")),
        };
        if k != k2 {
            return Err(dim_err!("matmul: inner dimensions {k} and {k2} differ"));
        }
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, 1.0, self.value(a), false, self.value(b), false, 0.0, &mut out);
        let g = self.rg(&[a, b]);
        self.push(Cow::Owned(out), vec![m, n], Op::MatMul(a, b), g)
    }

    /// Adds `b` along axis 1 of `x` (features of a `[B, n]` matrix or
    /// channels of a `[B, C, H, W]` map).
    pub fn bias_add(&mut self, x: Var, b: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() < 2 || self.shape(b) != [xs[1]] {
            return Err(dim_err!("bias_add: bias {:?} does not match axis 1 of {xs:?}", self.shape(b)));
        }
        let inner: usize = xs[2..].iter().product();
        let c = xs[1];
        let bv = self.value(b);
        let mut out = self.value(x).to_vec();
        for (i, chunk) in out.chunks_mut(inner).enumerate() {
            let bias = bv[i % c];
            chunk.iter_mut().for_each(|v| *v += bias);
        }
        let g = self.rg(&[x, b]);
        self.push(Cow::Owned(out), xs, Op::AddBias(x, b), g)
    }

    fn zip_with(&mut self, a: Var, b: Var, op: Op<'p>, f: impl Fn(f64, f64) -> f64) -> Result<Var> {
        self.same_shape(a, b, op.name())?;
        let out: Vec<f64> = self.value(a).iter().zip(self.value(b)).map(|(x, y)| f(*x, *y)).collect();
        let g = self.rg(&[a, b]);
        let shape = self.shape(a).to_vec();
        self.push(Cow::Owned(out), shape, op, g)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, Op::Mul(a, b), |x, y| x * y)
    }

    fn map(&mut self, x: Var, op: Op<'p>, f: impl Fn(f64) -> f64) -> Result<Var> {
        let out: Vec<f64> = self.value(x).iter().map(|v| f(*v)).collect();
        let g = self.rg(&[x]);
        let shape = self.shape(x).to_vec();
        self.push(Cow::Owned(out), shape, op, g)
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        self.map(x, Op::Scale(x, c), |v| c * v)
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.map(x, Op::Relu(x), |v| v.max(0.0))
    }

    pub fn elu(&mut self, x: Var) -> Result<Var> {
        self.map(x, Op::Elu(x), |v| if v > 0.0 { v } else { v.exp_m1() })
    }

    /// Stride-1 convolution with zero padding. `x` is `[B, C, H, W]`,
    /// `w` is `[C_out, C, k, k]`; no bias.
    pub fn conv2d(&mut self, x: Var, w: Var, padding: usize) -> Result<Var> {
        let [bn, c, h, wd] = self.dims4(x, "conv2d")?;
        let (co, k) = match *self.shape(w) {
            [co, ci, k, k2] if ci == c && k == k2 => (co, k),
            ref s => return Err(dim_err!("conv2d: kernel {s:?} incompatible with input channels {c}")),
        };
        let (ho, wo) = match (conv_out(h, k, padding), conv_out(wd, k, padding)) {
            (Some(a), Some(b)) if a > 0 && b > 0 => (a, b),
            _ => return Err(dim_err!("conv2d: input {h}x{wd} smaller than kernel {k} with padding {padding}")),
        };
        let rows = c * k * k;
        let hw = ho * wo;
        let xv = self.value(x);
        let wv = self.value(w);
        let mut cols = vec![0.0; bn * rows * hw];
        let mut out = vec![0.0; bn * co * hw];
        for b in 0..bn {
            let xb = &xv[b * c * h * wd..(b + 1) * c * h * wd];
            let cb = &mut cols[b * rows * hw..(b + 1) * rows * hw];
            im2col(xb, c, h, wd, k, padding, ho, wo, cb);
            gemm(co, rows, hw, 1.0, wv, false, cb, false, 0.0, &mut out[b * co * hw..(b + 1) * co * hw]);
        }
        let g = self.rg(&[x, w]);
        self.push(
            Cow::Owned(out),
            vec![bn, co, ho, wo],
            Op::Conv2d { x, w, padding, cols },
            g,
        )
    }

    /// 2x2 max pooling with stride 2; trailing odd rows/columns are dropped.
    pub fn maxpool2(&mut self, x: Var) -> Result<Var> {
        let [bn, c, h, w] = self.dims4(x, "maxpool2")?;
        let (ho, wo) = (h / 2, w / 2);
        if ho == 0 || wo == 0 {
            return Err(dim_err!("maxpool2: input {h}x{w} too small"));
        }
        let xv = self.value(x);
        let mut out = Vec::with_capacity(bn * c * ho * wo);
        let mut argmax = Vec::with_capacity(bn * c * ho * wo);
        for plane in 0..bn * c {
            let base = plane * h * w;
            for i in 0..ho {
                for j in 0..wo {
                    let mut best = base + 2 * i * w + 2 * j;
                    for (di, dj) in [(0, 1), (1, 0), (1, 1)] {
                        let idx = base + (2 * i + di) * w + 2 * j + dj;
                        if xv[idx] > xv[best] {
                            best = idx;
                        }
                    }
                    out.push(xv[best]);
                    argmax.push(best);
                }
            }
        }
        let g = self.rg(&[x]);
        self.push(Cow::Owned(out), vec![bn, c, ho, wo], Op::MaxPool2 { x, argmax }, g)
    }

    /// Nearest-neighbour upsampling by a factor of two.
    pub fn upsample2(&mut self, x: Var) -> Result<Var> {
        let [bn, c, h, w] = self.dims4(x, "upsample2")?;
        let xv = self.value(x);
        let (h2, w2) = (2 * h, 2 * w);
        let mut out = vec![0.0; bn * c * h2 * w2];
        for plane in 0..bn * c {
            for i in 0..h2 {
                for j in 0..w2 {
                    out[plane * h2 * w2 + i * w2 + j] = xv[plane * h * w + (i / 2) * w + j / 2];
                }
            }
        }
        let g = self.rg(&[x]);
        self.push(Cow::Owned(out), vec![bn, c, h2, w2], Op::Upsample2(x), g)
    }

    /// Concatenates along axis 1.
    pub fn concat(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        if sa.len() < 2 || sa.len() != sb.len() || sa[0] != sb[0] || sa[2..] != sb[2..] {
            return Err(dim_err!("concat: shapes {sa:?} and {sb:?} incompatible"));
        }
        let inner: usize = sa[2..].iter().product();
        let (na, nb) = (sa[1] * inner, sb[1] * inner);
        let av = self.value(a);
        let bv = self.value(b);
        let mut out = Vec::with_capacity(sa[0] * (na + nb));
        for i in 0..sa[0] {
            out.extend_from_slice(&av[i * na..(i + 1) * na]);
            out.extend_from_slice(&bv[i * nb..(i + 1) * nb]);
        }
        let mut shape = sa.clone();
        shape[1] += sb[1];
        let g = self.rg(&[a, b]);
        self.push(Cow::Owned(out), shape, Op::Concat(a, b), g)
    }

    /// Zero padding of the spatial axes: `[top, bottom, left, right]`.
    pub fn pad2d(&mut self, x: Var, pad: [usize; 4]) -> Result<Var> {
        let [bn, c, h, w] = self.dims4(x, "pad2d")?;
        let (h2, w2) = (h + pad[0] + pad[1], w + pad[2] + pad[3]);
        let xv = self.value(x);
        let mut out = vec![0.0; bn * c * h2 * w2];
        for plane in 0..bn * c {
            for i in 0..h {
                let src = &xv[plane * h * w + i * w..plane * h * w + (i + 1) * w];
                let dst = plane * h2 * w2 + (i + pad[0]) * w2 + pad[2];
                out[dst..dst + w].copy_from_slice(src);
            }
        }
        let g = self.rg(&[x]);
        self.push(Cow::Owned(out), vec![bn, c, h2, w2], Op::Pad2d { x, pad }, g)
    }

    /// Extracts the spatial window `[top..top+rows, left..left+cols]`.
    pub fn crop2d(&mut self, x: Var, top: usize, left: usize, rows: usize, cols: usize) -> Result<Var> {
        let [bn, c, h, w] = self.dims4(x, "crop2d")?;
        if rows == 0 || cols == 0 || top + rows > h || left + cols > w {
            return Err(dim_err!("crop2d: window {rows}x{cols} at ({top},{left}) exceeds {h}x{w}"));
        }
        let xv = self.value(x);
        let mut out = Vec::with_capacity(bn * c * rows * cols);
        for plane in 0..bn * c {
            for i in top..top + rows {
                let s = plane * h * w + i * w + left;
                out.extend_from_slice(&xv[s..s + cols]);
            }
        }
        let g = self.rg(&[x]);
        self.push(Cow::Owned(out), vec![bn, c, rows, cols], Op::Crop2d { x, top, left }, g)
    }

    /// Centre pixel of each odd-sided map: `[B, C, H, W] -> [B, C]`.
    pub fn center(&mut self, x: Var) -> Result<Var> {
        let [bn, c, h, w] = self.dims4(x, "center")?;
        if h % 2 == 0 || w % 2 == 0 {
            return Err(contract_err!("center: map side {h}x{w} must be odd"));
        }
        let xv = self.value(x);
        let off = (h / 2) * w + w / 2;
        let out: Vec<f64> = (0..bn * c).map(|p| xv[p * h * w + off]).collect();
        let g = self.rg(&[x]);
        self.push(Cow::Owned(out), vec![bn, c], Op::Center(x), g)
    }

    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let [bn, c, h, w] = self.dims4(x, "global_avg_pool")?;
        let hw = (h * w) as f64;
        let out: Vec<f64> = self.value(x).chunks(h * w).map(|p| p.iter().sum::<f64>() / hw).collect();
        let g = self.rg(&[x]);
        self.push(Cow::Owned(out), vec![bn, c], Op::GlobalAvgPool(x), g)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        if numel(shape) != numel(self.shape(x)) {
            return Err(dim_err!("reshape: {:?} into {shape:?}", self.shape(x)));
        }
        let out = self.value(x).to_vec();
        let g = self.rg(&[x]);
        self.push(Cow::Owned(out), shape.to_vec(), Op::Reshape(x), g)
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s: f64 = self.value(x).iter().sum();
        let g = self.rg(&[x]);
        self.push(Cow::Owned(vec![s]), vec![1], Op::Sum(x), g)
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x);
        let s = v.iter().sum::<f64>() / v.len() as f64;
        let g = self.rg(&[x]);
        self.push(Cow::Owned(vec![s]), vec![1], Op::Mean(x), g)
    }

    /// Mean of squared differences over all elements.
    pub fn mse(&mut self, pred: Var, target: Var) -> Result<Var> {
        self.same_shape(pred, target, "mse")?;
        let (p, t) = (self.value(pred), self.value(target));
        let s = p.iter().zip(t).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / p.len() as f64;
        let g = self.rg(&[pred, target]);
        self.push(Cow::Owned(vec![s]), vec![1], Op::Mse(pred, target), g)
    }

    /// Records `value`, which depends on the one-element `param` through the
    /// elementwise Jacobian column `jac = d value / d param`.
    pub fn scalar_dependent(&mut self, value: Vec<f64>, shape: &[usize], param: Var, jac: Vec<f64>) -> Result<Var> {
        if numel(self.shape(param)) != 1 {
            return Err(dim_err!("scalar_dependent: parameter must hold one value"));
        }
        if value.len() != numel(shape) || jac.len() != value.len() {
            return Err(dim_err!("scalar_dependent: value/jacobian do not match shape {shape:?}"));
        }
        let g = self.rg(&[param]);
        self.push(Cow::Owned(value), shape.to_vec(), Op::ScalarJacobian { param, jac }, g)
    }

    /// Records a user-defined op. `backward(inputs, output, grad_out)` must
    /// return one gradient buffer per input.
    pub fn custom<F>(&mut self, name: &str, inputs: &[Var], value: Vec<f64>, shape: &[usize], backward: F) -> Result<Var>
    where
        F: Fn(&[&[f64]], &[f64], &[f64]) -> Vec<Vec<f64>> + 'p,
    {
        if value.len() != numel(shape) {
            return Err(dim_err!("{name}: value does not match shape {shape:?}"));
        }
        let g = self.rg(inputs);
        self.push(
            Cow::Owned(value),
            shape.to_vec(),
            Op::Custom {
                name: name.to_string(),
                inputs: inputs.to_vec(),
                backward: Box::new(backward),
            },
            g,
        )
    }

    /// Gradients of the scalar `loss` with respect to every leaf.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if numel(self.shape(loss)) != 1 {
            return Err(contract_err!("backward called on non-scalar of shape {:?}", self.shape(loss)));
        }
        let n = self.nodes.len();
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; n];
        if !self.nodes[loss.0].requires_grad {
            return Ok(Gradients { grads });
        }
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(node, &g, &mut grads)?;
        }
        for (i, g) in grads.iter().enumerate() {
            if let Some(g) = g {
                if let Some(j) = g.iter().position(|v| !v.is_finite()) {
                    return Err(numeric_err!("non-finite gradient at node {i}, index {j}"));
                }
            }
        }
        Ok(Gradients { grads })
    }

    fn backprop_node(&self, node: &Node<'p>, g: &[f64], grads: &mut [Option<Vec<f64>>]) -> Result<()> {
        let nodes = &self.nodes;
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
            if nodes[v.0].requires_grad {
                let len = nodes[v.0].value.len();
                let buf = grads[v.0].get_or_insert_with(|| vec![0.0; len]);
                f(buf);
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = (nodes[a.0].shape[0], nodes[a.0].shape[1]);
                let n = nodes[b.0].shape[1];
                let av = &nodes[a.0].value;
                let bv = &nodes[b.0].value;
                acc(*a, &mut |da| gemm(m, n, k, 1.0, g, false, bv, true, 1.0, da));
                acc(*b, &mut |db| gemm(k, m, n, 1.0, av, true, g, false, 1.0, db));
            }
            Op::AddBias(x, b) => {
                let xs = &nodes[x.0].shape;
                let inner: usize = xs[2..].iter().product();
                let c = xs[1];
                acc(*x, &mut |dx| dx.iter_mut().zip(g).for_each(|(d, v)| *d += v));
                acc(*b, &mut |db| {
                    for (i, chunk) in g.chunks(inner).enumerate() {
                        db[i % c] += chunk.iter().sum::<f64>();
                    }
                });
            }
            Op::Add(a, b) => {
                acc(*a, &mut |d| d.iter_mut().zip(g).for_each(|(d, v)| *d += v));
                acc(*b, &mut |d| d.iter_mut().zip(g).for_each(|(d, v)| *d += v));
            }
            Op::Sub(a, b) => {
                acc(*a, &mut |d| d.iter_mut().zip(g).for_each(|(d, v)| *d += v));
                acc(*b, &mut |d| d.iter_mut().zip(g).for_each(|(d, v)| *d -= v));
            }
            Op::Mul(a, b) => {
                let av = &nodes[a.0].value;
                let bv = &nodes[b.0].value;
                acc(*a, &mut |d| {
                    for ((d, gv), y) in d.iter_mut().zip(g).zip(bv.iter()) {
                        *d += gv * y;
                    }
                });
                acc(*b, &mut |d| {
                    for ((d, gv), x) in d.iter_mut().zip(g).zip(av.iter()) {
                        *d += gv * x;
                    }
                });
            }
            Op::Scale(x, c) => acc(*x, &mut |d| d.iter_mut().zip(g).for_each(|(d, v)| *d += c * v)),
            Op::Relu(x) => {
                let out = &node.value;
                acc(*x, &mut |d| {
                    for ((d, gv), o) in d.iter_mut().zip(g).zip(out.iter()) {
                        if *o > 0.0 {
                            *d += gv;
                        }
                    }
                });
            }
            Op::Elu(x) => {
                let out = &node.value;
                let xv = &nodes[x.0].value;
                acc(*x, &mut |d| {
                    for (((d, gv), o), xi) in d.iter_mut().zip(g).zip(out.iter()).zip(xv.iter()) {
                        *d += if *xi > 0.0 { *gv } else { gv * (o + 1.0) };
                    }
                });
            }
            Op::Conv2d { x, w, padding, cols } => {
                let [bn, c, h, wd] = <[usize; 4]>::try_from(nodes[x.0].shape.as_slice()).unwrap();
                let (co, k) = (nodes[w.0].shape[0], nodes[w.0].shape[2]);
                let (ho, wo) = (node.shape[2], node.shape[3]);
                let rows = c * k * k;
                let hw = ho * wo;
                acc(*w, &mut |dw| {
                    for b in 0..bn {
                        let gb = &g[b * co * hw..(b + 1) * co * hw];
                        let cb = &cols[b * rows * hw..(b + 1) * rows * hw];
                        gemm(co, hw, rows, 1.0, gb, false, cb, true, 1.0, dw);
                    }
                });
                let wv = &nodes[w.0].value;
                acc(*x, &mut |dx| {
                    let mut dcols = vec![0.0; rows * hw];
                    for b in 0..bn {
                        let gb = &g[b * co * hw..(b + 1) * co * hw];
                        gemm(rows, co, hw, 1.0, wv, true, gb, false, 0.0, &mut dcols);
                        col2im(&dcols, c, h, wd, k, *padding, ho, wo, &mut dx[b * c * h * wd..(b + 1) * c * h * wd]);
                    }
                });
            }
            Op::MaxPool2 { x, argmax } => acc(*x, &mut |d| {
                for (gv, &i) in g.iter().zip(argmax) {
                    d[i] += gv;
                }
            }),
            Op::Upsample2(x) => {
                let [_, _, h, w] = <[usize; 4]>::try_from(nodes[x.0].shape.as_slice()).unwrap();
                let (h2, w2) = (2 * h, 2 * w);
                acc(*x, &mut |d| {
                    for (plane, gp) in g.chunks(h2 * w2).enumerate() {
                        for i in 0..h2 {
                            for j in 0..w2 {
                                d[plane * h * w + (i / 2) * w + j / 2] += gp[i * w2 + j];
                            }
                        }
                    }
                });
            }
            Op::Concat(a, b) => {
                let sa = &nodes[a.0].shape;
                let inner: usize = sa[2..].iter().product();
                let na = sa[1] * inner;
                let nb = nodes[b.0].shape[1] * inner;
                acc(*a, &mut |d| {
                    for i in 0..sa[0] {
                        let src = &g[i * (na + nb)..i * (na + nb) + na];
                        d[i * na..(i + 1) * na].iter_mut().zip(src).for_each(|(d, v)| *d += v);
                    }
                });
                acc(*b, &mut |d| {
                    for i in 0..sa[0] {
                        let src = &g[i * (na + nb) + na..(i + 1) * (na + nb)];
                        d[i * nb..(i + 1) * nb].iter_mut().zip(src).for_each(|(d, v)| *d += v);
                    }
                });
            }
            Op::Pad2d { x, pad } => {
                let [_, _, h, w] = <[usize; 4]>::try_from(nodes[x.0].shape.as_slice()).unwrap();
                let (h2, w2) = (node.shape[2], node.shape[3]);
                acc(*x, &mut |d| {
                    for (plane, gp) in g.chunks(h2 * w2).enumerate() {
                        for i in 0..h {
                            let s = (i + pad[0]) * w2 + pad[2];
                            let dst = &mut d[plane * h * w + i * w..plane * h * w + (i + 1) * w];
                            dst.iter_mut().zip(&gp[s..s + w]).for_each(|(d, v)| *d += v);
                        }
                    }
                });
            }
            Op::Crop2d { x, top, left } => {
                let [_, _, h, w] = <[usize; 4]>::try_from(nodes[x.0].shape.as_slice()).unwrap();
                let (rows, cols) = (node.shape[2], node.shape[3]);
                acc(*x, &mut |d| {
                    for (plane, gp) in g.chunks(rows * cols).enumerate() {
                        for i in 0..rows {
                            let s = plane * h * w + (i + top) * w + left;
                            d[s..s + cols].iter_mut().zip(&gp[i * cols..(i + 1) * cols]).for_each(|(d, v)| *d += v);
                        }
                    }
                });
            }
            Op::Center(x) => {
                let [_, _, h, w] = <[usize; 4]>::try_from(nodes[x.0].shape.as_slice()).unwrap();
                let off = (h / 2) * w + w / 2;
                acc(*x, &mut |d| {
                    for (p, gv) in g.iter().enumerate() {
                        d[p * h * w + off] += gv;
                    }
                });
            }
            Op::GlobalAvgPool(x) => {
                let [_, _, h, w] = <[usize; 4]>::try_from(nodes[x.0].shape.as_slice()).unwrap();
                let hw = h * w;
                acc(*x, &mut |d| {
                    for (p, gv) in g.iter().enumerate() {
                        let share = gv / hw as f64;
                        d[p * hw..(p + 1) * hw].iter_mut().for_each(|d| *d += share);
                    }
                });
            }
            Op::Reshape(x) => acc(*x, &mut |d| d.iter_mut().zip(g).for_each(|(d, v)| *d += v)),
            Op::Sum(x) => acc(*x, &mut |d| d.iter_mut().for_each(|d| *d += g[0])),
            Op::Mean(x) => {
                let n = nodes[x.0].value.len() as f64;
                acc(*x, &mut |d| d.iter_mut().for_each(|d| *d += g[0] / n));
            }
            Op::Mse(p, t) => {
                let pv = &nodes[p.0].value;
                let tv = &nodes[t.0].value;
                let scale = 2.0 * g[0] / pv.len() as f64;
                acc(*p, &mut |d| {
                    for ((d, a), b) in d.iter_mut().zip(pv.iter()).zip(tv.iter()) {
                        *d += scale * (a - b);
                    }
                });
                acc(*t, &mut |d| {
                    for ((d, a), b) in d.iter_mut().zip(pv.iter()).zip(tv.iter()) {
                        *d -= scale * (a - b);
                    }
                });
            }
            Op::ScalarJacobian { param, jac } => {
                let s: f64 = g.iter().zip(jac).map(|(a, b)| a * b).sum();
                acc(*param, &mut |d| d[0] += s);
            }
            Op::Custom { name, inputs, backward } => {
                let ins: Vec<&[f64]> = inputs.iter().map(|v| &*nodes[v.0].value).collect();
                let gs = backward(&ins, &node.value, g);
                if gs.len() != inputs.len() {
                    return Err(contract_err!("{name}: backward returned {} gradients for {} inputs", gs.len(), inputs.len()));
                }
                for (v, gi) in inputs.iter().zip(gs) {
                    if gi.len() != nodes[v.0].value.len() {
                        return Err(dim_err!("{name}: gradient length mismatch"));
                    }
                    acc(*v, &mut |d| d.iter_mut().zip(&gi).for_each(|(d, x)| *d += x));
                }
            }
        }
        Ok(())
    }
}

#[allow(clippy::too_many_arguments)]
fn im2col(x: &[f64], c: usize, h: usize, w: usize, k: usize, pad: usize, ho: usize, wo: usize, cols: &mut [f64]) {
    let hw = ho * wo;
    for ci in 0..c {
        for ki in 0..k {
            for kj in 0..k {
                let row = (ci * k + ki) * k + kj;
                let out = &mut cols[row * hw..(row + 1) * hw];
                // valid output columns: 0 <= oj + kj - pad < w
                let j0 = pad.saturating_sub(kj);
                let j1 = (w + pad).saturating_sub(kj).min(wo);
                for oi in 0..ho {
                    let ii = oi + ki;
                    if ii < pad || ii - pad >= h || j0 >= j1 {
                        continue;
                    }
                    let src_row = &x[ci * h * w + (ii - pad) * w..];
                    let dst = &mut out[oi * wo..(oi + 1) * wo];
                    for oj in j0..j1 {
                        dst[oj] = src_row[oj + kj - pad];
                    }
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn col2im(cols: &[f64], c: usize, h: usize, w: usize, k: usize, pad: usize, ho: usize, wo: usize, dx: &mut [f64]) {
    let hw = ho * wo;
    for ci in 0..c {
        for ki in 0..k {
            for kj in 0..k {
                let row = (ci * k + ki) * k + kj;
                let src = &cols[row * hw..(row + 1) * hw];
                let j0 = pad.saturating_sub(kj);
                let j1 = (w + pad).saturating_sub(kj).min(wo);
                for oi in 0..ho {
                    let ii = oi + ki;
                    if ii < pad || ii - pad >= h || j0 >= j1 {
                        continue;
                    }
                    let base = ci * h * w + (ii - pad) * w;
                    for oj in j0..j1 {
                        dx[base + oj + kj - pad] += src[oi * wo + oj];
                    }
                }
            }
        }
    }
}
