use crate::autodiff::kernels;
use crate::autodiff::params::{ParamId, ParamStore};
use crate::error::{Error, Result};
use crate::fourier::{self, Dft2Plan, Direction};
use crate::tensor::{Real, Tensor};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Recorded primitive with everything its vector-Jacobian product needs.
#[derive(Debug)]
enum Op<T: Real> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    AddScalar(Var),
    Square(Var),
    Sqrt(Var),
    Sum(Var),
    Mean(Var),
    LeakyRelu(Var, T),
    Sigmoid(Var, T),
    Magnitude(Var),
    Dft2(Var, Direction),
    Shift(Var, bool),
    Renormalize {
        x: Var,
        alpha: f64,
        mean: f64,
    },
    Expand {
        x: Var,
        axis: usize,
        len: usize,
    },
    MulChannels(Var, Var),
    Conv2d {
        x: Var,
        weight: Var,
        bias: Var,
    },
    AvgPool2(Var),
    Upsample2(Var),
    Concat(Var, Var),
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Tensor<T>,
        inv_std: Vec<T>,
        batch_stats: bool,
    },
}

impl<T: Real> Op<T> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add(..) => "add",
            Op::Sub(..) => "subtract",
            Op::Mul(..) => "multiply",
            Op::Scale(..) => "scale",
            Op::AddScalar(..) => "add-scalar",
            Op::Square(..) => "square",
            Op::Sqrt(..) => "sqrt",
            Op::Sum(..) => "sum",
            Op::Mean(..) => "mean",
            Op::LeakyRelu(..) => "leaky-relu",
            Op::Sigmoid(..) => "sigmoid",
            Op::Magnitude(..) => "magnitude",
            Op::Dft2(_, Direction::Forward) => "dft2",
            Op::Dft2(_, Direction::Inverse) => "idft2",
            Op::Shift(..) => "shift",
            Op::Renormalize { .. } => "renormalize",
            Op::Expand { .. } => "expand",
            Op::MulChannels(..) => "mul-channels",
            Op::Conv2d { .. } => "conv2d",
            Op::AvgPool2(..) => "avg-pool2",
            Op::Upsample2(..) => "upsample2",
            Op::Concat(..) => "concat",
            Op::BatchNorm { .. } => "batch-norm",
        }
    }
}

#[derive(Debug)]
struct Node<T: Real> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Batch statistics observed by a training-mode batch-norm node.
#[derive(Clone, Debug)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

/// Define-by-run tape. Every op evaluates eagerly and appends a node, so
/// node order is a topological order and backward is a single reverse sweep.
#[derive(Debug)]
pub struct Graph<T: Real> {
    nodes: Vec<Node<T>>,
    bindings: Vec<(ParamId, Var)>,
    check_finite: bool,
    parallel: bool,
    magnitude_eps: f64,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Stabilizer inside the magnitude square root.
pub const MAGNITUDE_EPS: f64 = 1e-12;

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            bindings: Vec::new(),
            check_finite: cfg!(debug_assertions),
            parallel: false,
            magnitude_eps: MAGNITUDE_EPS,
        }
    }

    /// Fail with [`Error::NonFinite`] as soon as an op produces NaN or Inf.
    pub fn with_finite_checks(mut self, on: bool) -> Self {
        self.check_finite = on;
        self
    }

    /// Run per-sample work of the image ops on the rayon pool.
    pub fn with_parallel(mut self, on: bool) -> Self {
        self.parallel = on;
        self
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn node(&self, v: Var) -> Result<&Node<T>> {
        self.nodes.get(v.0).ok_or(Error::UnknownNode(v.0))
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Result<Var> {
        let id = self.nodes.len();
        if self.check_finite && !value.is_finite() {
            return Err(Error::NonFinite { op: op.name(), node: id });
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(id))
    }

    fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// A value that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    /// A free input whose gradient can be read from [`Gradients`].
    pub fn input(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, true)
    }

    /// A leaf bound to a stored parameter; [`Graph::backpropagate`] writes its
    /// gradient back into the store.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        let v = self.leaf(store.value(id).clone(), true);
        self.bindings.push((id, v));
        v
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(Error::shape(
                op,
                format!("node {} has shape {:?}, node {} has {:?}", a.0, sa, b.0, sb),
            ));
        }
        Ok(())
    }

    fn image_dims(&self, op: &'static str, v: Var) -> Result<(usize, usize, usize, usize)> {
        let s = self.shape(v);
        if s.len() != 4 {
            return Err(Error::shape(
                op,
                format!("node {} must be [N, C, H, W], got {:?}", v.0, s),
            ));
        }
        Ok(kernels::dims4(s))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let value = self.value(a).zip_map(self.value(b), |x, y| x + y)?;
        self.push(value, Op::Add(a, b), &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("subtract", a, b)?;
        let value = self.value(a).zip_map(self.value(b), |x, y| x - y)?;
        self.push(value, Op::Sub(a, b), &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("multiply", a, b)?;
        let value = self.value(a).zip_map(self.value(b), |x, y| x * y)?;
        self.push(value, Op::Mul(a, b), &[a, b])
    }

    pub fn scale(&mut self, a: Var, c: T) -> Result<Var> {
        let value = self.value(a).map(|x| x * c);
        self.push(value, Op::Scale(a, c), &[a])
    }

    pub fn add_scalar(&mut self, a: Var, c: T) -> Result<Var> {
        let value = self.value(a).map(|x| x + c);
        self.push(value, Op::AddScalar(a), &[a])
    }

    pub fn square(&mut self, a: Var) -> Result<Var> {
        let value = self.value(a).map(|x| x * x);
        self.push(value, Op::Square(a), &[a])
    }

    pub fn sqrt(&mut self, a: Var) -> Result<Var> {
        let value = self.value(a).map(|x| x.sqrt());
        self.push(value, Op::Sqrt(a), &[a])
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let value = Tensor::scalar(T::of(self.value(a).sum_f64()));
        self.push(value, Op::Sum(a), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let value = Tensor::scalar(T::of(self.value(a).mean_f64()));
        self.push(value, Op::Mean(a), &[a])
    }

    pub fn leaky_relu(&mut self, a: Var, negative_slope: T) -> Result<Var> {
        let value = self
            .value(a)
            .map(|x| if x > T::zero() { x } else { negative_slope * x });
        self.push(value, Op::LeakyRelu(a, negative_slope), &[a])
    }

    /// `1 / (1 + exp(-slope * x))`.
    pub fn sigmoid(&mut self, a: Var, slope: T) -> Result<Var> {
        let value = self.value(a).map(|x| sigmoid(slope * x));
        self.push(value, Op::Sigmoid(a, slope), &[a])
    }

    /// `sqrt(re² + im² + eps)` over the channel pair of `[.., 2, H, W]`;
    /// the channel axis is kept with length 1.
    pub fn magnitude(&mut self, a: Var) -> Result<Var> {
        let (h, w) = fourier::complex_dims(self.shape(a))?;
        let plane = h * w;
        let eps = T::of(self.magnitude_eps);
        let src = self.value(a);
        let mut shape = src.shape().to_vec();
        let ch = shape.len() - 3;
        shape[ch] = 1;
        let mut data = Vec::with_capacity(src.len() / 2);
        for image in src.data().chunks(2 * plane) {
            let (re, im) = image.split_at(plane);
            data.extend(re.iter().zip(im).map(|(&x, &y)| (x * x + y * y + eps).sqrt()));
        }
        let value = Tensor::new(shape, data)?;
        self.push(value, Op::Magnitude(a), &[a])
    }

    pub fn dft2(&mut self, a: Var) -> Result<Var> {
        let value = fourier::dft2(self.value(a))?;
        self.push(value, Op::Dft2(a, Direction::Forward), &[a])
    }

    pub fn idft2(&mut self, a: Var) -> Result<Var> {
        let value = fourier::idft2(self.value(a))?;
        self.push(value, Op::Dft2(a, Direction::Inverse), &[a])
    }

    /// `ifftshift` over the last two axes (DC-centered to uncentered layout).
    pub fn ifftshift(&mut self, a: Var) -> Result<Var> {
        let value = fourier::ifftshift(self.value(a))?;
        self.push(value, Op::Shift(a, true), &[a])
    }

    /// `fftshift` over the last two axes.
    pub fn fftshift(&mut self, a: Var) -> Result<Var> {
        let value = fourier::fftshift(self.value(a))?;
        self.push(value, Op::Shift(a, false), &[a])
    }

    /// Rescales probabilities so their mean is exactly `alpha`: a plain scale
    /// when the current mean is at least `alpha`, otherwise a scale of the
    /// complement `1 - p`.
    pub fn renormalize(&mut self, a: Var, alpha: f64) -> Result<Var> {
        if !(alpha > 0.0 && alpha < 1.0) {
            return Err(Error::invalid(format!("alpha must lie in (0, 1), got {alpha}")));
        }
        let p = self.value(a);
        let mean = p.mean_f64();
        let value = if mean >= alpha {
            let f = T::of(alpha / mean);
            p.map(|x| f * x)
        } else {
            let f = T::of((1.0 - alpha) / (1.0 - mean));
            p.map(|x| T::one() - f * (T::one() - x))
        };
        self.push(value, Op::Renormalize { x: a, alpha, mean }, &[a])
    }

    /// Inserts a new axis of length `len` at position `axis`, repeating the
    /// input along it.
    pub fn expand(&mut self, a: Var, axis: usize, len: usize) -> Result<Var> {
        let src = self.value(a);
        if axis > src.shape().len() || len == 0 {
            return Err(Error::shape(
                "expand",
                format!("cannot insert axis {axis} of length {len} into {:?}", src.shape()),
            ));
        }
        let mut shape = src.shape().to_vec();
        shape.insert(axis, len);
        let inner: usize = src.shape()[axis..].iter().product();
        let mut data = Vec::with_capacity(src.len() * len);
        for chunk in src.data().chunks(inner.max(1)) {
            for _ in 0..len {
                data.extend_from_slice(chunk);
            }
        }
        let value = Tensor::new(shape, data)?;
        self.push(value, Op::Expand { x: a, axis, len }, &[a])
    }

    /// Multiplies `[N, C, H, W]` by a per-sample `[N, H, W]` grid shared
    /// across channels.
    pub fn mul_channels(&mut self, x: Var, m: Var) -> Result<Var> {
        let (n, c, h, w) = self.image_dims("mul-channels", x)?;
        if self.shape(m) != [n, h, w] {
            return Err(Error::shape(
                "mul-channels",
                format!(
                    "node {} must be [{n}, {h}, {w}] to mask node {}, got {:?}",
                    m.0,
                    x.0,
                    self.shape(m)
                ),
            ));
        }
        let hw = h * w;
        let mut value = self.value(x).clone();
        let mask = self.value(m).data();
        for s in 0..n {
            for ci in 0..c {
                let off = (s * c + ci) * hw;
                for (v, &mv) in value.data_mut()[off..off + hw].iter_mut().zip(&mask[s * hw..]) {
                    *v *= mv;
                }
            }
        }
        self.push(value, Op::MulChannels(x, m), &[x, m])
    }

    /// 3×3 convolution (cross-correlation), stride 1, zero same-padding.
    pub fn conv2d(&mut self, x: Var, weight: Var, bias: Var) -> Result<Var> {
        let (_, cin, _, _) = self.image_dims("conv2d", x)?;
        let ws = self.shape(weight);
        if ws.len() != 4 || ws[1] != cin || ws[2] != 3 || ws[3] != 3 {
            return Err(Error::shape(
                "conv2d",
                format!(
                    "kernel node {} must be [Cout, {cin}, 3, 3], got {:?}",
                    weight.0, ws
                ),
            ));
        }
        if self.shape(bias) != [ws[0]] {
            return Err(Error::shape(
                "conv2d",
                format!("bias node {} must be [{}], got {:?}", bias.0, ws[0], self.shape(bias)),
            ));
        }
        let value = kernels::conv2d_forward(
            self.value(x),
            self.value(weight),
            self.value(bias),
            self.parallel,
        );
        self.push(value, Op::Conv2d { x, weight, bias }, &[x, weight, bias])
    }

    pub fn avg_pool2(&mut self, x: Var) -> Result<Var> {
        let (_, _, h, w) = self.image_dims("avg-pool2", x)?;
        if h % 2 != 0 || w % 2 != 0 {
            return Err(Error::shape(
                "avg-pool2",
                format!("node {} has odd spatial size {h}×{w}", x.0),
            ));
        }
        let value = kernels::avg_pool2_forward(self.value(x));
        self.push(value, Op::AvgPool2(x), &[x])
    }

    /// Nearest-neighbour ×2 upsampling.
    pub fn upsample2(&mut self, x: Var) -> Result<Var> {
        self.image_dims("upsample2", x)?;
        let value = kernels::upsample2_forward(self.value(x));
        self.push(value, Op::Upsample2(x), &[x])
    }

    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let (na, _, ha, wa) = self.image_dims("concat", a)?;
        let (nb, _, hb, wb) = self.image_dims("concat", b)?;
        if (na, ha, wa) != (nb, hb, wb) {
            return Err(Error::shape(
                "concat",
                format!(
                    "nodes {} {:?} and {} {:?} differ outside the channel axis",
                    a.0,
                    self.shape(a),
                    b.0,
                    self.shape(b)
                ),
            ));
        }
        let value = kernels::concat_channels(self.value(a), self.value(b));
        self.push(value, Op::Concat(a, b), &[a, b])
    }

    fn check_norm_params(&self, x: Var, gamma: Var, beta: Var) -> Result<usize> {
        let (_, c, _, _) = self.image_dims("batch-norm", x)?;
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(Error::shape(
                "batch-norm",
                format!("scale/shift nodes {}/{} must be [{c}]", gamma.0, beta.0),
            ));
        }
        Ok(c)
    }

    /// Training-mode batch normalization over the batch and spatial axes.
    /// Returns the observed statistics for running-average bookkeeping.
    pub fn batch_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<(Var, BatchStats)> {
        self.check_norm_params(x, gamma, beta)?;
        let (mean, var) = kernels::channel_stats(self.value(x));
        let (value, xhat, inv_std) =
            kernels::batch_norm_apply(self.value(x), self.value(gamma), self.value(beta), &mean, &var, eps);
        let op = Op::BatchNorm {
            x,
            gamma,
            beta,
            xhat,
            inv_std,
            batch_stats: true,
        };
        let out = self.push(value, op, &[x, gamma, beta])?;
        Ok((out, BatchStats { mean, var }))
    }

    /// Evaluation-mode batch normalization with fixed statistics.
    pub fn batch_norm_fixed(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        stats: &BatchStats,
        eps: f64,
    ) -> Result<Var> {
        let c = self.check_norm_params(x, gamma, beta)?;
        if stats.mean.len() != c || stats.var.len() != c {
            return Err(Error::shape("batch-norm", format!("running statistics must have {c} channels")));
        }
        let (value, xhat, inv_std) = kernels::batch_norm_apply(
            self.value(x),
            self.value(gamma),
            self.value(beta),
            &stats.mean,
            &stats.var,
            eps,
        );
        let op = Op::BatchNorm {
            x,
            gamma,
            beta,
            xhat,
            inv_std,
            batch_stats: false,
        };
        self.push(value, op, &[x, gamma, beta])
    }

    /// Reverse sweep from `output` seeded with `seed`.
    pub fn backward(&self, output: Var, seed: Tensor<T>) -> Result<Gradients<T>> {
        let out = self.node(output)?;
        if out.value.shape() != seed.shape() {
            return Err(Error::shape(
                "backward",
                format!(
                    "seed shape {:?} does not match output node {} shape {:?}",
                    seed.shape(),
                    output.0,
                    out.value.shape()
                ),
            ));
        }
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; output.0 + 1];
        grads[output.0] = Some(seed);
        for id in (0..=output.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &self.nodes[id];
            if node.requires_grad {
                self.propagate(node, &g, &mut grads)?;
            }
            grads[id] = Some(g);
        }
        Ok(Gradients { grads })
    }

    /// Backward from a single-element output with seed 1.
    pub fn backward_scalar(&self, output: Var) -> Result<Gradients<T>> {
        let shape = self.node(output)?.value.shape().to_vec();
        if shape.iter().product::<usize>() != 1 {
            return Err(Error::shape(
                "backward",
                format!("output node {} is not a scalar: {:?}", output.0, shape),
            ));
        }
        self.backward(output, Tensor::ones(&shape))
    }

    /// Backward pass that adds every bound parameter's gradient into `store`.
    /// Parameters that do not reach `output` receive zeros.
    pub fn backpropagate(&self, output: Var, seed: Tensor<T>, store: &mut ParamStore<T>) -> Result<Gradients<T>> {
        let grads = self.backward(output, seed)?;
        for &(id, v) in &self.bindings {
            if let Some(g) = grads.get(v) {
                store.get_mut(id).grad.add_assign(g);
            }
        }
        Ok(grads)
    }

    /// Parameters bound into this graph, in binding order.
    pub fn bindings(&self) -> &[(ParamId, Var)] {
        &self.bindings
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn propagate(&self, node: &Node<T>, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) -> Result<()> {
        let mut send = |v: Var, t: Tensor<T>| accumulate(grads, v, t);
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                if self.needs(*a) {
                    send(*a, g.clone());
                }
                if self.needs(*b) {
                    send(*b, g.clone());
                }
            }
            Op::Sub(a, b) => {
                if self.needs(*a) {
                    send(*a, g.clone());
                }
                if self.needs(*b) {
                    send(*b, g.map(|v| -v));
                }
            }
            Op::Mul(a, b) => {
                if self.needs(*a) {
                    send(*a, g.zip_map(self.value(*b), |x, y| x * y)?);
                }
                if self.needs(*b) {
                    send(*b, g.zip_map(self.value(*a), |x, y| x * y)?);
                }
            }
            Op::Scale(a, c) => send(*a, g.map(|v| v * *c)),
            Op::AddScalar(a) => send(*a, g.clone()),
            Op::Square(a) => {
                let two = T::of(2.0);
                send(*a, g.zip_map(self.value(*a), |gv, x| two * x * gv)?);
            }
            Op::Sqrt(a) => {
                let half = T::of(0.5);
                send(*a, g.zip_map(&node.value, |gv, y| half * gv / y)?);
            }
            Op::Sum(a) => send(*a, Tensor::full(self.shape(*a), g.data()[0])),
            Op::Mean(a) => {
                let n = self.value(*a).len() as f64;
                send(*a, Tensor::full(self.shape(*a), T::of(g.data()[0].as_f64() / n)));
            }
            Op::LeakyRelu(a, slope) => {
                let d = g.zip_map(self.value(*a), |gv, x| if x > T::zero() { gv } else { *slope * gv })?;
                send(*a, d);
            }
            Op::Sigmoid(a, slope) => {
                let d = g.zip_map(&node.value, |gv, y| gv * *slope * y * (T::one() - y))?;
                send(*a, d);
            }
            Op::Magnitude(a) => {
                let x = self.value(*a);
                let (h, w) = fourier::complex_dims(x.shape())?;
                let plane = h * w;
                let mut d = Tensor::zeros(x.shape());
                for (i, image) in d.data_mut().chunks_mut(2 * plane).enumerate() {
                    let src = &x.data()[i * 2 * plane..(i + 1) * 2 * plane];
                    let gm = &g.data()[i * plane..(i + 1) * plane];
                    let mag = &node.value.data()[i * plane..(i + 1) * plane];
                    for p in 0..plane {
                        let r = gm[p] / mag[p];
                        image[p] = r * src[p];
                        image[plane + p] = r * src[plane + p];
                    }
                }
                send(*a, d);
            }
            Op::Dft2(a, dir) => {
                // Unitary: the adjoint of the forward transform is the inverse.
                let adjoint = match dir {
                    Direction::Forward => Direction::Inverse,
                    Direction::Inverse => Direction::Forward,
                };
                let (h, w) = fourier::complex_dims(g.shape())?;
                let mut d = g.clone();
                Dft2Plan::new(h, w, adjoint).apply_batch(d.data_mut());
                send(*a, d);
            }
            Op::Shift(a, inverse) => {
                let d = if *inverse {
                    fourier::fftshift(g)?
                } else {
                    fourier::ifftshift(g)?
                };
                send(*a, d);
            }
            Op::Renormalize { x, alpha, mean } => {
                let p = self.value(*x);
                let n = p.len() as f64;
                let d = if mean >= alpha {
                    // y = (alpha / mean) p
                    let dot: f64 = g.data().iter().zip(p.data()).map(|(a, b)| a.as_f64() * b.as_f64()).sum();
                    let f = T::of(alpha / mean);
                    let c = T::of(alpha * dot / (mean * mean * n));
                    g.map(|gv| f * gv - c)
                } else {
                    // y = 1 - ((1 - alpha) / (1 - mean)) (1 - p)
                    let dot: f64 = g
                        .data()
                        .iter()
                        .zip(p.data())
                        .map(|(a, b)| a.as_f64() * (1.0 - b.as_f64()))
                        .sum();
                    let f = T::of((1.0 - alpha) / (1.0 - mean));
                    let c = T::of((1.0 - alpha) * dot / ((1.0 - mean) * (1.0 - mean) * n));
                    g.map(|gv| f * gv - c)
                };
                send(*x, d);
            }
            Op::Expand { x, axis, len } => {
                let src_shape = self.shape(*x);
                let inner: usize = src_shape[*axis..].iter().product::<usize>().max(1);
                let mut d = Tensor::zeros(src_shape);
                for (o, dst) in d.data_mut().chunks_mut(inner).enumerate() {
                    for r in 0..*len {
                        let chunk = &g.data()[(o * len + r) * inner..][..inner];
                        for (a, &b) in dst.iter_mut().zip(chunk) {
                            *a += b;
                        }
                    }
                }
                send(*x, d);
            }
            Op::MulChannels(x, m) => {
                let (n, c, h, w) = kernels::dims4(self.shape(*x));
                let hw = h * w;
                let mask = self.value(*m).data();
                if self.needs(*x) {
                    let mut d = g.clone();
                    for s in 0..n {
                        for ci in 0..c {
                            let off = (s * c + ci) * hw;
                            for (v, &mv) in d.data_mut()[off..off + hw].iter_mut().zip(&mask[s * hw..]) {
                                *v *= mv;
                            }
                        }
                    }
                    send(*x, d);
                }
                if self.needs(*m) {
                    let xv = self.value(*x).data();
                    let mut d = Tensor::zeros(self.shape(*m));
                    for s in 0..n {
                        let dst = &mut d.data_mut()[s * hw..(s + 1) * hw];
                        for ci in 0..c {
                            let off = (s * c + ci) * hw;
                            for p in 0..hw {
                                dst[p] += g.data()[off + p] * xv[off + p];
                            }
                        }
                    }
                    send(*m, d);
                }
            }
            Op::Conv2d { x, weight, bias } => {
                let grads = kernels::conv2d_backward(
                    self.value(*x),
                    self.value(*weight),
                    g,
                    self.needs(*x),
                    self.parallel,
                );
                if let Some(gx) = grads.input {
                    send(*x, gx);
                }
                if self.needs(*weight) {
                    send(*weight, grads.weight);
                }
                if self.needs(*bias) {
                    send(*bias, grads.bias);
                }
            }
            Op::AvgPool2(x) => send(*x, kernels::avg_pool2_backward(g, self.shape(*x))),
            Op::Upsample2(x) => send(*x, kernels::upsample2_backward(g, self.shape(*x))),
            Op::Concat(a, b) => {
                let (ga, gb) = kernels::split_channels(g, self.shape(*a)[1]);
                if self.needs(*a) {
                    send(*a, ga);
                }
                if self.needs(*b) {
                    send(*b, gb);
                }
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats,
            } => {
                let grads = kernels::batch_norm_backward(g, xhat, self.value(*gamma), inv_std, *batch_stats);
                if self.needs(*x) {
                    send(*x, grads.input);
                }
                if self.needs(*gamma) {
                    send(*gamma, grads.gamma);
                }
                if self.needs(*beta) {
                    send(*beta, grads.beta);
                }
            }
        }
        Ok(())
    }
}

fn accumulate<T: Real>(grads: &mut [Option<Tensor<T>>], v: Var, t: Tensor<T>) {
    match &mut grads[v.0] {
        Some(existing) => existing.add_assign(&t),
        slot => *slot = Some(t),
    }
}

pub(crate) fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

/// Result of a reverse sweep: one optional gradient per node.
#[derive(Debug)]
pub struct Gradients<T: Real> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Gradients<T> {
    /// Gradient of the output with respect to `v`, if `v` reaches it.
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Like [`Gradients::get`] but returns zeros shaped like `v` when unreachable.
    pub fn get_or_zeros(&self, graph: &Graph<T>, v: Var) -> Tensor<T> {
        self.get(v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(graph.shape(v)))
    }
}
