//! The fixed layer menu with explicit forward and backward passes.
//!
//! Activations use NCHW layout (`[batch, channels, height, width]`) for the
//! convolutional kinds and `[batch, features]` for `Linear`. Every forward
//! call in [`Mode::Train`] returns a [`Cache`] holding exactly what the
//! matching backward call needs; [`Mode::Eval`] retains nothing and mutates
//! nothing.

use indexmap::IndexMap;
use rand::Rng;

use crate::error::{Error, Result};
use crate::nn::real::{gemm, Trans};
use crate::nn::{Real, Tensor};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Conv2dSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: (usize, usize),
    pub stride: (usize, usize),
    pub padding: (usize, usize),
    pub bias: bool,
}

impl Conv2dSpec {
    pub fn new(in_channels: usize, out_channels: usize, kernel: (usize, usize)) -> Self {
        Self {
            in_channels,
            out_channels,
            kernel,
            stride: (1, 1),
            padding: (0, 0),
            bias: false,
        }
    }

    pub fn stride(mut self, stride: (usize, usize)) -> Self {
        self.stride = stride;
        self
    }

    pub fn padding(mut self, padding: (usize, usize)) -> Self {
        self.padding = padding;
        self
    }

    pub fn with_bias(mut self) -> Self {
        self.bias = true;
        self
    }

    /// `floor((in + 2·pad − kernel) / stride) + 1` per spatial axis, or
    /// `None` when the kernel does not fit.
    pub fn output_hw(&self, h: usize, w: usize) -> Option<(usize, usize)> {
        let axis = |n: usize, k: usize, s: usize, p: usize| {
            let padded = n + 2 * p;
            (padded >= k).then(|| (padded - k) / s + 1)
        };
        Some((
            axis(h, self.kernel.0, self.stride.0, self.padding.0)?,
            axis(w, self.kernel.1, self.stride.1, self.padding.1)?,
        ))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum LayerKind {
    Conv2d(Conv2dSpec),
    BatchNorm {
        channels: usize,
        eps: f64,
        momentum: f64,
    },
    Relu,
    Linear {
        in_features: usize,
        out_features: usize,
        bias: bool,
    },
    Concat,
    AvgPool {
        kernel: (usize, usize),
        stride: (usize, usize),
    },
    GlobalAvgPool,
}

impl LayerKind {
    pub fn batchnorm(channels: usize) -> Self {
        LayerKind::BatchNorm {
            channels,
            eps: BN_EPS,
            momentum: BN_MOMENTUM,
        }
    }

    pub fn linear(in_features: usize, out_features: usize) -> Self {
        LayerKind::Linear {
            in_features,
            out_features,
            bias: true,
        }
    }

    pub fn avgpool(kernel: (usize, usize)) -> Self {
        LayerKind::AvgPool {
            kernel,
            stride: kernel,
        }
    }

    pub fn tag(&self) -> &'static str {
        match self {
            LayerKind::Conv2d(_) => "conv2d",
            LayerKind::BatchNorm { .. } => "batchnorm",
            LayerKind::Relu => "relu",
            LayerKind::Linear { .. } => "linear",
            LayerKind::Concat => "concat",
            LayerKind::AvgPool { .. } => "avgpool",
            LayerKind::GlobalAvgPool => "globalavgpool",
        }
    }

    /// Parameter names and shapes implied by the hyperparameters.
    pub fn param_shapes(&self) -> Vec<(&'static str, Vec<usize>)> {
        match *self {
            LayerKind::Conv2d(c) => {
                let mut v = vec![(
                    "weight",
                    vec![c.out_channels, c.in_channels, c.kernel.0, c.kernel.1],
                )];
                if c.bias {
                    v.push(("bias", vec![c.out_channels]));
                }
                v
            }
            LayerKind::BatchNorm { channels, .. } => {
                vec![("weight", vec![channels]), ("bias", vec![channels])]
            }
            LayerKind::Linear {
                in_features,
                out_features,
                bias,
            } => {
                let mut v = vec![("weight", vec![out_features, in_features])];
                if bias {
                    v.push(("bias", vec![out_features]));
                }
                v
            }
            _ => Vec::new(),
        }
    }

    pub fn buffer_shapes(&self) -> Vec<(&'static str, Vec<usize>)> {
        match *self {
            LayerKind::BatchNorm { channels, .. } => vec![
                ("running_mean", vec![channels]),
                ("running_var", vec![channels]),
                ("tracked", vec![1]),
            ],
            _ => Vec::new(),
        }
    }
}

/// Values retained by a training-mode forward pass.
#[derive(Debug, Clone)]
pub enum Cache<T: Real> {
    Conv2d { x: Tensor<T> },
    BatchNorm { xhat: Tensor<T>, inv_std: Vec<T> },
    Relu { active: Vec<bool>, shape: Vec<usize> },
    Linear { x: Tensor<T> },
    Concat { channels: Vec<usize>, shape: Vec<usize> },
    AvgPool { in_shape: Vec<usize> },
    GlobalAvgPool { in_shape: Vec<usize> },
    /// Produced by eval-mode forward; not differentiable.
    Eval,
}

impl<T: Real> Cache<T> {
    fn tag(&self) -> &'static str {
        match self {
            Cache::Conv2d { .. } => "conv2d",
            Cache::BatchNorm { .. } => "batchnorm",
            Cache::Relu { .. } => "relu",
            Cache::Linear { .. } => "linear",
            Cache::Concat { .. } => "concat",
            Cache::AvgPool { .. } => "avgpool",
            Cache::GlobalAvgPool { .. } => "globalavgpool",
            Cache::Eval => "eval",
        }
    }
}

pub type NamedTensors<T> = IndexMap<String, Tensor<T>>;

#[derive(Debug, Clone, PartialEq)]
pub struct Layer<T: Real = f64> {
    pub name: String,
    pub kind: LayerKind,
    pub params: NamedTensors<T>,
    pub buffers: NamedTensors<T>,
}

impl<T: Real> Layer<T> {
    /// Builds a layer with fan-in scaled uniform weights (bound
    /// `sqrt(6 / fan_in)`), zero biases, unit batchnorm scale and zero shift.
    pub fn new(name: impl Into<String>, kind: LayerKind, rng: &mut impl Rng) -> Self {
        let fan_in = match kind {
            LayerKind::Conv2d(c) => c.in_channels * c.kernel.0 * c.kernel.1,
            LayerKind::Linear { in_features, .. } => in_features,
            _ => 1,
        };
        let bound = (6.0 / fan_in as f64).sqrt();
        let is_bn = matches!(kind, LayerKind::BatchNorm { .. });
        let mut params = IndexMap::new();
        for (pname, shape) in kind.param_shapes() {
            let t = match (pname, is_bn) {
                ("weight", true) => Tensor::full(&shape, T::one()),
                ("weight", false) => {
                    Tensor::from_fn(&shape, |_| T::lit(rng.random_range(-bound..bound)))
                }
                _ => Tensor::zeros(&shape),
            };
            params.insert(pname.to_string(), t);
        }
        let mut buffers = IndexMap::new();
        for (bname, shape) in kind.buffer_shapes() {
            let fill = if bname == "running_var" { T::one() } else { T::zero() };
            buffers.insert(bname.to_string(), Tensor::full(&shape, fill));
        }
        Self {
            name: name.into(),
            kind,
            params,
            buffers,
        }
    }

    pub fn param_count(&self) -> usize {
        self.params.values().map(Tensor::len).sum()
    }

    fn param(&self, name: &str) -> &Tensor<T> {
        &self.params[name]
    }

    fn single<'a>(&self, xs: &[&'a Tensor<T>]) -> Result<&'a Tensor<T>> {
        match xs {
            [x] => Ok(x),
            _ => Err(Error::invalid(format!(
                "{} `{}` takes one input, got {}",
                self.kind.tag(),
                self.name,
                xs.len()
            ))),
        }
    }

    fn context(&self) -> String {
        format!("{} `{}`", self.kind.tag(), self.name)
    }

    pub fn forward(&mut self, xs: &[&Tensor<T>], mode: Mode) -> Result<(Tensor<T>, Cache<T>)> {
        let kind = self.kind.clone();
        let (y, cache) = match kind {
            LayerKind::Conv2d(spec) => self.conv_forward(spec, self.single(xs)?)?,
            LayerKind::BatchNorm { channels, eps, momentum } => {
                self.bn_forward(channels, eps, momentum, self.single(xs)?, mode)?
            }
            LayerKind::Relu => relu_forward(self.single(xs)?),
            LayerKind::Linear { in_features, .. } => {
                self.linear_forward(in_features, self.single(xs)?)?
            }
            LayerKind::Concat => concat_forward(xs, &self.context())?,
            LayerKind::AvgPool { kernel, stride } => {
                avgpool_forward(self.single(xs)?, kernel, stride, &self.context())?
            }
            LayerKind::GlobalAvgPool => gap_forward(self.single(xs)?, &self.context())?,
        };
        let cache = if mode == Mode::Eval { Cache::Eval } else { cache };
        Ok((y, cache))
    }

    /// Returns the input gradients (one per forward input) and the parameter
    /// gradients keyed by local parameter name.
    pub fn backward(
        &self,
        cache: &Cache<T>,
        dy: &Tensor<T>,
    ) -> Result<(Vec<Tensor<T>>, NamedTensors<T>)> {
        if cache.tag() != self.kind.tag() {
            return Err(Error::InvalidCache(format!(
                "{} cache passed to {}",
                cache.tag(),
                self.context()
            )));
        }
        let mut grads = IndexMap::new();
        let dxs = match (&self.kind, cache) {
            (LayerKind::Conv2d(spec), Cache::Conv2d { x }) => {
                let (dx, dw, db) = self.conv_backward(*spec, x, dy)?;
                grads.insert("weight".to_string(), dw);
                if let Some(db) = db {
                    grads.insert("bias".to_string(), db);
                }
                vec![dx]
            }
            (LayerKind::BatchNorm { .. }, Cache::BatchNorm { xhat, inv_std }) => {
                let (dx, dg, db) = self.bn_backward(xhat, inv_std, dy)?;
                grads.insert("weight".to_string(), dg);
                grads.insert("bias".to_string(), db);
                vec![dx]
            }
            (LayerKind::Relu, Cache::Relu { active, shape }) => {
                dy.expect_shape(shape, &self.context())?;
                let data = dy
                    .data()
                    .iter()
                    .zip(active)
                    .map(|(&g, &a)| if a { g } else { T::zero() })
                    .collect();
                vec![Tensor::new(shape.clone(), data)?]
            }
            (LayerKind::Linear { .. }, Cache::Linear { x }) => {
                let (dx, dw, db) = self.linear_backward(x, dy)?;
                grads.insert("weight".to_string(), dw);
                if let Some(db) = db {
                    grads.insert("bias".to_string(), db);
                }
                vec![dx]
            }
            (LayerKind::Concat, Cache::Concat { channels, shape }) => {
                dy.expect_shape(shape, &self.context())?;
                split_channels(dy, channels)?
            }
            (LayerKind::AvgPool { kernel, stride }, Cache::AvgPool { in_shape }) => {
                vec![avgpool_backward(dy, in_shape, *kernel, *stride)?]
            }
            (LayerKind::GlobalAvgPool, Cache::GlobalAvgPool { in_shape }) => {
                vec![gap_backward(dy, in_shape, &self.context())?]
            }
            _ => unreachable!("cache tag checked above"),
        };
        Ok((dxs, grads))
    }

    fn conv_forward(&self, spec: Conv2dSpec, x: &Tensor<T>) -> Result<(Tensor<T>, Cache<T>)> {
        let ctx = self.context();
        x.expect_rank(4, &ctx)?;
        let (n, c, h, w) = (x.dim(0), x.dim(1), x.dim(2), x.dim(3));
        if c != spec.in_channels {
            return Err(Error::Shape {
                axis: 1,
                expected: spec.in_channels,
                actual: c,
                context: ctx,
            });
        }
        let (ho, wo) = spec.output_hw(h, w).ok_or_else(|| Error::Shape {
            axis: if h + 2 * spec.padding.0 < spec.kernel.0 { 2 } else { 3 },
            expected: spec.kernel.1,
            actual: w,
            context: format!("{ctx}: kernel larger than padded input"),
        })?;
        let cout = spec.out_channels;
        let k = c * spec.kernel.0 * spec.kernel.1;
        let p = ho * wo;
        let weight = self.param("weight").data();
        let mut y = vec![T::zero(); n * cout * p];
        let direct = is_pointwise(&spec);
        let mut col = if direct { Vec::new() } else { vec![T::zero(); k * p] };
        for b in 0..n {
            let xb = &x.data()[b * c * h * w..(b + 1) * c * h * w];
            let cols: &[T] = if direct {
                xb
            } else {
                im2col(xb, c, h, w, &spec, ho, wo, &mut col);
                &col
            };
            let yb = &mut y[b * cout * p..(b + 1) * cout * p];
            gemm(cout, k, p, T::one(), weight, Trans::No, cols, Trans::No, T::zero(), yb);
            if spec.bias {
                let bias = self.param("bias").data();
                for (o, row) in yb.chunks_exact_mut(p).enumerate() {
                    row.iter_mut().for_each(|v| *v += bias[o]);
                }
            }
        }
        Ok((
            Tensor::new(vec![n, cout, ho, wo], y)?,
            Cache::Conv2d { x: x.clone() },
        ))
    }

    fn conv_backward(
        &self,
        spec: Conv2dSpec,
        x: &Tensor<T>,
        dy: &Tensor<T>,
    ) -> Result<(Tensor<T>, Tensor<T>, Option<Tensor<T>>)> {
        let (n, c, h, w) = (x.dim(0), x.dim(1), x.dim(2), x.dim(3));
        let (ho, wo) = spec
            .output_hw(h, w)
            .ok_or_else(|| Error::InvalidCache(format!("{}: cached input", self.context())))?;
        let cout = spec.out_channels;
        dy.expect_shape(&[n, cout, ho, wo], &self.context())?;
        let k = c * spec.kernel.0 * spec.kernel.1;
        let p = ho * wo;
        let weight = self.param("weight").data();
        let mut dw = vec![T::zero(); cout * k];
        let mut dx = vec![T::zero(); n * c * h * w];
        let direct = is_pointwise(&spec);
        let mut col = if direct { Vec::new() } else { vec![T::zero(); k * p] };
        let mut dcol = if direct { Vec::new() } else { vec![T::zero(); k * p] };
        for b in 0..n {
            let xb = &x.data()[b * c * h * w..(b + 1) * c * h * w];
            let dyb = &dy.data()[b * cout * p..(b + 1) * cout * p];
            let dxb = &mut dx[b * c * h * w..(b + 1) * c * h * w];
            if direct {
                gemm(cout, p, k, T::one(), dyb, Trans::No, xb, Trans::Yes, T::one(), &mut dw);
                gemm(k, cout, p, T::one(), weight, Trans::Yes, dyb, Trans::No, T::zero(), dxb);
            } else {
                im2col(xb, c, h, w, &spec, ho, wo, &mut col);
                gemm(cout, p, k, T::one(), dyb, Trans::No, &col, Trans::Yes, T::one(), &mut dw);
                gemm(k, cout, p, T::one(), weight, Trans::Yes, dyb, Trans::No, T::zero(), &mut dcol);
                col2im(&dcol, c, h, w, &spec, ho, wo, dxb);
            }
        }
        let db = spec.bias.then(|| {
            let mut db = vec![T::zero(); cout];
            for yb in dy.data().chunks_exact(cout * p) {
                for (o, row) in yb.chunks_exact(p).enumerate() {
                    db[o] += row.iter().copied().sum::<T>();
                }
            }
            Tensor::new(vec![cout], db)
        });
        Ok((
            Tensor::new(x.shape().to_vec(), dx)?,
            Tensor::new(self.param("weight").shape().to_vec(), dw)?,
            db.transpose()?,
        ))
    }

    fn bn_forward(
        &mut self,
        channels: usize,
        eps: f64,
        momentum: f64,
        x: &Tensor<T>,
        mode: Mode,
    ) -> Result<(Tensor<T>, Cache<T>)> {
        let ctx = self.context();
        let (n, c, inner) = bn_layout(x, &ctx)?;
        if c != channels {
            return Err(Error::Shape {
                axis: 1,
                expected: channels,
                actual: c,
                context: ctx,
            });
        }
        let gamma = self.param("weight").data().to_vec();
        let beta = self.param("bias").data().to_vec();
        let eps = T::lit(eps);
        let mut y = vec![T::zero(); x.len()];
        let xd = x.data();
        match mode {
            Mode::Eval => {
                if self.buffers["tracked"].data()[0] <= T::zero() {
                    return Err(Error::UninitializedStatistics(self.name.clone()));
                }
                let rm = self.buffers["running_mean"].data();
                let rv = self.buffers["running_var"].data();
                for ch in 0..c {
                    let scale = gamma[ch] / (rv[ch] + eps).sqrt();
                    let shift = beta[ch] - rm[ch] * scale;
                    for b in 0..n {
                        let o = (b * c + ch) * inner;
                        for i in o..o + inner {
                            y[i] = xd[i] * scale + shift;
                        }
                    }
                }
                Ok((Tensor::new(x.shape().to_vec(), y)?, Cache::Eval))
            }
            Mode::Train => {
                let m = n * inner;
                let mf = T::lit(m as f64);
                let mut xhat = vec![T::zero(); x.len()];
                let mut inv_std = vec![T::zero(); c];
                let mut means = vec![T::zero(); c];
                let mut vars = vec![T::zero(); c];
                for ch in 0..c {
                    let mut sum = T::zero();
                    for b in 0..n {
                        let o = (b * c + ch) * inner;
                        sum += xd[o..o + inner].iter().copied().sum::<T>();
                    }
                    let mean = sum / mf;
                    let mut sq = T::zero();
                    for b in 0..n {
                        let o = (b * c + ch) * inner;
                        sq += xd[o..o + inner]
                            .iter()
                            .map(|&v| (v - mean) * (v - mean))
                            .sum::<T>();
                    }
                    let var = sq / mf;
                    let istd = T::one() / (var + eps).sqrt();
                    for b in 0..n {
                        let o = (b * c + ch) * inner;
                        for i in o..o + inner {
                            let xh = (xd[i] - mean) * istd;
                            xhat[i] = xh;
                            y[i] = gamma[ch] * xh + beta[ch];
                        }
                    }
                    inv_std[ch] = istd;
                    means[ch] = mean;
                    vars[ch] = if m > 1 {
                        var * mf / T::lit((m - 1) as f64)
                    } else {
                        var
                    };
                }
                let mom = T::lit(momentum);
                let keep = T::one() - mom;
                let rm = self.buffers.get_mut("running_mean").expect("bn buffer");
                rm.data_mut()
                    .iter_mut()
                    .zip(&means)
                    .for_each(|(r, &v)| *r = keep * *r + mom * v);
                let rv = self.buffers.get_mut("running_var").expect("bn buffer");
                rv.data_mut()
                    .iter_mut()
                    .zip(&vars)
                    .for_each(|(r, &v)| *r = keep * *r + mom * v);
                self.buffers.get_mut("tracked").expect("bn buffer").data_mut()[0] += T::one();
                Ok((
                    Tensor::new(x.shape().to_vec(), y)?,
                    Cache::BatchNorm {
                        xhat: Tensor::new(x.shape().to_vec(), xhat)?,
                        inv_std,
                    },
                ))
            }
        }
    }

    fn bn_backward(
        &self,
        xhat: &Tensor<T>,
        inv_std: &[T],
        dy: &Tensor<T>,
    ) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
        let ctx = self.context();
        dy.expect_shape(xhat.shape(), &ctx)?;
        let (n, c, inner) = bn_layout(dy, &ctx)?;
        let gamma = self.param("weight").data();
        let m = T::lit((n * inner) as f64);
        let (xh, g) = (xhat.data(), dy.data());
        let mut dx = vec![T::zero(); dy.len()];
        let mut dgamma = vec![T::zero(); c];
        let mut dbeta = vec![T::zero(); c];
        for ch in 0..c {
            let (mut sum_g, mut sum_gx) = (T::zero(), T::zero());
            for b in 0..n {
                let o = (b * c + ch) * inner;
                for i in o..o + inner {
                    sum_g += g[i];
                    sum_gx += g[i] * xh[i];
                }
            }
            dgamma[ch] = sum_gx;
            dbeta[ch] = sum_g;
            let k = gamma[ch] * inv_std[ch] / m;
            for b in 0..n {
                let o = (b * c + ch) * inner;
                for i in o..o + inner {
                    dx[i] = k * (m * g[i] - sum_g - xh[i] * sum_gx);
                }
            }
        }
        Ok((
            Tensor::new(dy.shape().to_vec(), dx)?,
            Tensor::new(vec![c], dgamma)?,
            Tensor::new(vec![c], dbeta)?,
        ))
    }

    fn linear_forward(&self, in_features: usize, x: &Tensor<T>) -> Result<(Tensor<T>, Cache<T>)> {
        let ctx = self.context();
        x.expect_rank(2, &ctx)?;
        if x.dim(1) != in_features {
            return Err(Error::Shape {
                axis: 1,
                expected: in_features,
                actual: x.dim(1),
                context: ctx,
            });
        }
        let w = self.param("weight");
        let (n, out) = (x.dim(0), w.dim(0));
        let mut y = vec![T::zero(); n * out];
        gemm(n, in_features, out, T::one(), x.data(), Trans::No, w.data(), Trans::Yes, T::zero(), &mut y);
        if let Some(b) = self.params.get("bias") {
            for row in y.chunks_exact_mut(out) {
                row.iter_mut().zip(b.data()).for_each(|(v, &bb)| *v += bb);
            }
        }
        Ok((Tensor::new(vec![n, out], y)?, Cache::Linear { x: x.clone() }))
    }

    fn linear_backward(
        &self,
        x: &Tensor<T>,
        dy: &Tensor<T>,
    ) -> Result<(Tensor<T>, Tensor<T>, Option<Tensor<T>>)> {
        let w = self.param("weight");
        let (n, inf, out) = (x.dim(0), x.dim(1), w.dim(0));
        dy.expect_shape(&[n, out], &self.context())?;
        let mut dw = vec![T::zero(); out * inf];
        gemm(out, n, inf, T::one(), dy.data(), Trans::Yes, x.data(), Trans::No, T::zero(), &mut dw);
        let mut dx = vec![T::zero(); n * inf];
        gemm(n, out, inf, T::one(), dy.data(), Trans::No, w.data(), Trans::No, T::zero(), &mut dx);
        let db = if self.params.contains_key("bias") {
            let mut db = vec![T::zero(); out];
            for row in dy.data().chunks_exact(out) {
                db.iter_mut().zip(row).for_each(|(d, &g)| *d += g);
            }
            Some(Tensor::new(vec![out], db)?)
        } else {
            None
        };
        Ok((
            Tensor::new(vec![n, inf], dx)?,
            Tensor::new(vec![out, inf], dw)?,
            db,
        ))
    }
}

fn is_pointwise(spec: &Conv2dSpec) -> bool {
    spec.kernel == (1, 1) && spec.stride == (1, 1) && spec.padding == (0, 0)
}

fn bn_layout<T: Real>(x: &Tensor<T>, ctx: &str) -> Result<(usize, usize, usize)> {
    match x.rank() {
        2 => Ok((x.dim(0), x.dim(1), 1)),
        4 => Ok((x.dim(0), x.dim(1), x.dim(2) * x.dim(3))),
        r => Err(Error::Rank {
            expected: 4,
            actual: r,
            context: ctx.to_string(),
        }),
    }
}

/// Unfolds one `[c, h, w]` sample into a `[c·kh·kw, ho·wo]` patch matrix.
#[allow(clippy::too_many_arguments)]
fn im2col<T: Real>(
    x: &[T],
    c: usize,
    h: usize,
    w: usize,
    spec: &Conv2dSpec,
    ho: usize,
    wo: usize,
    col: &mut [T],
) {
    let (kh, kw) = spec.kernel;
    let (sh, sw) = spec.stride;
    let (ph, pw) = spec.padding;
    let p = ho * wo;
    for ch in 0..c {
        let plane = &x[ch * h * w..(ch + 1) * h * w];
        for ki in 0..kh {
            for kj in 0..kw {
                let row = (ch * kh + ki) * kw + kj;
                let dst = &mut col[row * p..(row + 1) * p];
                for oh in 0..ho {
                    let d = &mut dst[oh * wo..(oh + 1) * wo];
                    let ih = (oh * sh + ki) as isize - ph as isize;
                    if ih < 0 || ih >= h as isize {
                        d.fill(T::zero());
                        continue;
                    }
                    let src = &plane[ih as usize * w..(ih as usize + 1) * w];
                    if sw == 1 {
                        // valid ow satisfy 0 <= ow + kj - pw < w
                        let lo = pw.saturating_sub(kj).min(wo);
                        let hi = (w + pw).saturating_sub(kj).min(wo).max(lo);
                        d[..lo].fill(T::zero());
                        let off = lo + kj - pw;
                        d[lo..hi].copy_from_slice(&src[off..off + hi - lo]);
                        d[hi..].fill(T::zero());
                    } else {
                        for (ow, v) in d.iter_mut().enumerate() {
                            let iw = (ow * sw + kj) as isize - pw as isize;
                            *v = if iw >= 0 && (iw as usize) < w {
                                src[iw as usize]
                            } else {
                                T::zero()
                            };
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters patch gradients back into `dx`.
#[allow(clippy::too_many_arguments)]
fn col2im<T: Real>(
    dcol: &[T],
    c: usize,
    h: usize,
    w: usize,
    spec: &Conv2dSpec,
    ho: usize,
    wo: usize,
    dx: &mut [T],
) {
    let (kh, kw) = spec.kernel;
    let (sh, sw) = spec.stride;
    let (ph, pw) = spec.padding;
    let p = ho * wo;
    dx.fill(T::zero());
    for ch in 0..c {
        let plane = &mut dx[ch * h * w..(ch + 1) * h * w];
        for ki in 0..kh {
            for kj in 0..kw {
                let row = (ch * kh + ki) * kw + kj;
                let src = &dcol[row * p..(row + 1) * p];
                for oh in 0..ho {
                    let ih = (oh * sh + ki) as isize - ph as isize;
                    if ih < 0 || ih >= h as isize {
                        continue;
                    }
                    let s = &src[oh * wo..(oh + 1) * wo];
                    let d = &mut plane[ih as usize * w..(ih as usize + 1) * w];
                    if sw == 1 {
                        let lo = pw.saturating_sub(kj).min(wo);
                        let hi = (w + pw).saturating_sub(kj).min(wo).max(lo);
                        let off = lo + kj - pw;
                        d[off..off + hi - lo]
                            .iter_mut()
                            .zip(&s[lo..hi])
                            .for_each(|(a, &g)| *a += g);
                    } else {
                        for (ow, &g) in s.iter().enumerate() {
                            let iw = (ow * sw + kj) as isize - pw as isize;
                            if iw >= 0 && (iw as usize) < w {
                                d[iw as usize] += g;
                            }
                        }
                    }
                }
            }
        }
    }
}

fn relu_forward<T: Real>(x: &Tensor<T>) -> (Tensor<T>, Cache<T>) {
    let active: Vec<bool> = x.data().iter().map(|&v| v > T::zero()).collect();
    let y = x.map(|v| if v > T::zero() { v } else { T::zero() });
    (
        y,
        Cache::Relu {
            active,
            shape: x.shape().to_vec(),
        },
    )
}

fn concat_forward<T: Real>(xs: &[&Tensor<T>], ctx: &str) -> Result<(Tensor<T>, Cache<T>)> {
    let first = xs
        .first()
        .ok_or_else(|| Error::invalid(format!("{ctx}: no inputs")))?;
    let rank = first.rank();
    if rank != 2 && rank != 4 {
        return Err(Error::Rank {
            expected: 4,
            actual: rank,
            context: ctx.to_string(),
        });
    }
    let n = first.dim(0);
    let inner: usize = first.shape()[2..].iter().product();
    let mut channels = Vec::with_capacity(xs.len());
    for x in xs {
        x.expect_rank(rank, ctx)?;
        for axis in (0..rank).filter(|&a| a != 1) {
            if x.dim(axis) != first.dim(axis) {
                return Err(Error::Shape {
                    axis,
                    expected: first.dim(axis),
                    actual: x.dim(axis),
                    context: ctx.to_string(),
                });
            }
        }
        channels.push(x.dim(1));
    }
    let total: usize = channels.iter().sum();
    let mut data = Vec::with_capacity(n * total * inner);
    for b in 0..n {
        for (x, &c) in xs.iter().zip(&channels) {
            data.extend_from_slice(&x.data()[b * c * inner..(b + 1) * c * inner]);
        }
    }
    let mut shape = first.shape().to_vec();
    shape[1] = total;
    let y = Tensor::new(shape.clone(), data)?;
    Ok((y, Cache::Concat { channels, shape }))
}

/// Concatenates along axis 1 (channels); all other axes must agree.
pub fn concat_channels<T: Real>(xs: &[&Tensor<T>]) -> Result<Tensor<T>> {
    concat_forward(xs, "concat").map(|(y, _)| y)
}

/// Splits a tensor along axis 1 into pieces of the given channel counts.
pub fn split_channels<T: Real>(x: &Tensor<T>, channels: &[usize]) -> Result<Vec<Tensor<T>>> {
    let n = x.dim(0);
    let total = x.dim(1);
    if channels.iter().sum::<usize>() != total {
        return Err(Error::Shape {
            axis: 1,
            expected: channels.iter().sum(),
            actual: total,
            context: "split_channels".into(),
        });
    }
    let inner: usize = x.shape()[2..].iter().product();
    let mut parts: Vec<Vec<T>> = channels
        .iter()
        .map(|&c| Vec::with_capacity(n * c * inner))
        .collect();
    for b in 0..n {
        let mut off = b * total * inner;
        for (part, &c) in parts.iter_mut().zip(channels) {
            part.extend_from_slice(&x.data()[off..off + c * inner]);
            off += c * inner;
        }
    }
    parts
        .into_iter()
        .zip(channels)
        .map(|(data, &c)| {
            let mut shape = x.shape().to_vec();
            shape[1] = c;
            Tensor::new(shape, data)
        })
        .collect()
}

fn avgpool_forward<T: Real>(
    x: &Tensor<T>,
    kernel: (usize, usize),
    stride: (usize, usize),
    ctx: &str,
) -> Result<(Tensor<T>, Cache<T>)> {
    x.expect_rank(4, ctx)?;
    let (n, c, h, w) = (x.dim(0), x.dim(1), x.dim(2), x.dim(3));
    for (axis, size, k) in [(2, h, kernel.0), (3, w, kernel.1)] {
        if size < k {
            return Err(Error::Shape {
                axis,
                expected: k,
                actual: size,
                context: format!("{ctx}: pooling window larger than input"),
            });
        }
    }
    let ho = (h - kernel.0) / stride.0 + 1;
    let wo = (w - kernel.1) / stride.1 + 1;
    let norm = T::lit(1.0 / (kernel.0 * kernel.1) as f64);
    let mut y = vec![T::zero(); n * c * ho * wo];
    for (plane, out) in x.data().chunks_exact(h * w).zip(y.chunks_exact_mut(ho * wo)) {
        for oh in 0..ho {
            for ow in 0..wo {
                let mut s = T::zero();
                for ki in 0..kernel.0 {
                    let r = (oh * stride.0 + ki) * w + ow * stride.1;
                    s += plane[r..r + kernel.1].iter().copied().sum::<T>();
                }
                out[oh * wo + ow] = s * norm;
            }
        }
    }
    Ok((
        Tensor::new(vec![n, c, ho, wo], y)?,
        Cache::AvgPool {
            in_shape: x.shape().to_vec(),
        },
    ))
}

fn avgpool_backward<T: Real>(
    dy: &Tensor<T>,
    in_shape: &[usize],
    kernel: (usize, usize),
    stride: (usize, usize),
) -> Result<Tensor<T>> {
    let (n, c, h, w) = (in_shape[0], in_shape[1], in_shape[2], in_shape[3]);
    let ho = (h - kernel.0) / stride.0 + 1;
    let wo = (w - kernel.1) / stride.1 + 1;
    dy.expect_shape(&[n, c, ho, wo], "avgpool backward")?;
    let norm = T::lit(1.0 / (kernel.0 * kernel.1) as f64);
    let mut dx = vec![T::zero(); n * c * h * w];
    for (plane, g) in dx.chunks_exact_mut(h * w).zip(dy.data().chunks_exact(ho * wo)) {
        for oh in 0..ho {
            for ow in 0..wo {
                let v = g[oh * wo + ow] * norm;
                for ki in 0..kernel.0 {
                    let r = (oh * stride.0 + ki) * w + ow * stride.1;
                    plane[r..r + kernel.1].iter_mut().for_each(|d| *d += v);
                }
            }
        }
    }
    Tensor::new(in_shape.to_vec(), dx)
}

fn gap_forward<T: Real>(x: &Tensor<T>, ctx: &str) -> Result<(Tensor<T>, Cache<T>)> {
    x.expect_rank(4, ctx)?;
    let (n, c) = (x.dim(0), x.dim(1));
    let inner = x.dim(2) * x.dim(3);
    let norm = T::lit(1.0 / inner as f64);
    let y: Vec<T> = x
        .data()
        .chunks_exact(inner)
        .map(|p| p.iter().copied().sum::<T>() * norm)
        .collect();
    Ok((
        Tensor::new(vec![n, c], y)?,
        Cache::GlobalAvgPool {
            in_shape: x.shape().to_vec(),
        },
    ))
}

fn gap_backward<T: Real>(dy: &Tensor<T>, in_shape: &[usize], ctx: &str) -> Result<Tensor<T>> {
    dy.expect_shape(&in_shape[..2], ctx)?;
    let inner = in_shape[2] * in_shape[3];
    let norm = T::lit(1.0 / inner as f64);
    let mut dx = Vec::with_capacity(dy.len() * inner);
    for &g in dy.data() {
        dx.extend(std::iter::repeat_n(g * norm, inner));
    }
    Tensor::new(in_shape.to_vec(), dx)
}
