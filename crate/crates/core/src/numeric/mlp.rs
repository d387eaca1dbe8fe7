//! Dense feed-forward networks with exact reverse-mode gradients.

use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2, Axis, Zip};
use rand::Rng;

use super::gaussian::DiagGaussian;
use super::params::Params;
use super::scalar::Scalar;
use crate::error::{Error, Result};

pub const DEFAULT_LOG_STD_MIN: f64 = -10.0;
pub const DEFAULT_LOG_STD_MAX: f64 = 2.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Tanh,
}

impl Activation {
    fn apply<T: Scalar>(self, x: T) -> T {
        match self {
            Activation::Relu => x.max(T::zero()),
            Activation::Tanh => x.tanh(),
        }
    }

    /// Derivative expressed through the activation output.
    fn derivative_from_output<T: Scalar>(self, y: T) -> T {
        match self {
            Activation::Relu => {
                if y > T::zero() {
                    T::one()
                } else {
                    T::zero()
                }
            }
            Activation::Tanh => T::one() - y * y,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Head {
    /// Raw affine output.
    Linear,
    /// Output of width `2k`: mean in the first `k` columns, log-std in the rest.
    GaussianTwoHead,
}

/// One affine layer, `y = W x + b` with `W` stored `[out × in]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Dense<T> {
    pub weight: Array2<T>,
    pub bias: Array1<T>,
}

impl<T: Scalar> Dense<T> {
    pub fn zeros(input: usize, output: usize) -> Self {
        Dense {
            weight: Array2::zeros((output, input)),
            bias: Array1::zeros(output),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.weight.ncols()
    }

    pub fn output_dim(&self) -> usize {
        self.weight.nrows()
    }
}

/// Gradient block with the same layout as the network it was computed for.
#[derive(Clone, Debug, PartialEq)]
pub struct MlpGrads<T> {
    pub layers: Vec<Dense<T>>,
}

impl<T: Scalar> MlpGrads<T> {
    pub fn zeros_like(net: &Mlp<T>) -> Self {
        MlpGrads {
            layers: net
                .layers
                .iter()
                .map(|l| Dense::zeros(l.input_dim(), l.output_dim()))
                .collect(),
        }
    }

    /// `self += other · scale`
    pub fn add_scaled(&mut self, other: &MlpGrads<T>, scale: T) {
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            a.weight.scaled_add(scale, &b.weight);
            a.bias.scaled_add(scale, &b.bias);
        }
    }
}

/// Multi-layer perceptron: hidden layers share one activation, the head is
/// either linear or a diagonal-Gaussian two-head split.
#[derive(Clone, Debug, PartialEq)]
pub struct Mlp<T> {
    pub layers: Vec<Dense<T>>,
    pub activation: Activation,
    pub head: Head,
    pub log_std_min: T,
    pub log_std_max: T,
}

/// Activations recorded during a batched forward pass, consumed by
/// [`Mlp::backward`].
pub struct Trace<T> {
    /// Input to every layer; `inputs[0]` is the network input.
    inputs: Vec<Array2<T>>,
}

impl<T: Scalar> Mlp<T> {
    /// Builds a network from layer widths `[in, h1, .., out]`.
    ///
    /// With a Gaussian head `out` is the distribution dimension and the final
    /// layer is `2·out` wide. Weights use a uniform fan-in initialization; the
    /// last layer is scaled down so fresh networks produce small outputs.
    pub fn new<R: Rng + ?Sized>(sizes: &[usize], head: Head, rng: &mut R) -> Result<Self> {
        if sizes.len() < 2 || sizes.iter().any(|&n| n == 0) {
            return Err(Error::Config(format!("invalid layer sizes {sizes:?}")));
        }
        let n = sizes.len() - 1;
        let mut layers = Vec::with_capacity(n);
        for i in 0..n {
            let fan_in = sizes[i];
            let out = if i + 1 == n && head == Head::GaussianTwoHead {
                2 * sizes[i + 1]
            } else {
                sizes[i + 1]
            };
            let mut bound = 1.0 / (fan_in as f64).sqrt();
            if i + 1 == n {
                bound *= 0.1;
            }
            let weight =
                Array2::from_shape_fn((out, fan_in), |_| T::lit(rng.gen_range(-bound..bound)));
            let bias = Array1::from_shape_fn(out, |_| T::lit(rng.gen_range(-bound..bound)));
            layers.push(Dense { weight, bias });
        }
        Self::from_layers(layers, head)
    }

    /// Validates and wraps explicit layers.
    pub fn from_layers(layers: Vec<Dense<T>>, head: Head) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::Config("network needs at least one layer".into()));
        }
        for (i, l) in layers.iter().enumerate() {
            if l.bias.len() != l.output_dim() {
                return Err(Error::Config(format!("layer {i}: bias width mismatch")));
            }
            if i > 0 && layers[i - 1].output_dim() != l.input_dim() {
                return Err(Error::Config(format!(
                    "layer {i}: input width {} does not chain from {}",
                    l.input_dim(),
                    layers[i - 1].output_dim()
                )));
            }
        }
        let out = layers.last().map(Dense::output_dim).unwrap_or(0);
        if head == Head::GaussianTwoHead && out % 2 != 0 {
            return Err(Error::Config(
                "gaussian head needs an even output width".into(),
            ));
        }
        Ok(Mlp {
            layers,
            activation: Activation::Relu,
            head,
            log_std_min: T::lit(DEFAULT_LOG_STD_MIN),
            log_std_max: T::lit(DEFAULT_LOG_STD_MAX),
        })
    }

    pub fn with_log_std_bounds(mut self, min: T, max: T) -> Self {
        self.log_std_min = min;
        self.log_std_max = max;
        self
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].input_dim()
    }

    /// Width of the raw output layer.
    pub fn raw_output_dim(&self) -> usize {
        self.layers.last().map(Dense::output_dim).unwrap_or(0)
    }

    /// Width of the semantic output (distribution dimension for Gaussian heads).
    pub fn output_dim(&self) -> usize {
        match self.head {
            Head::Linear => self.raw_output_dim(),
            Head::GaussianTwoHead => self.raw_output_dim() / 2,
        }
    }

    /// Layer widths `[in, h1, .., raw_out]`.
    pub fn sizes(&self) -> Vec<usize> {
        let mut v = vec![self.input_dim()];
        v.extend(self.layers.iter().map(Dense::output_dim));
        v
    }

    pub fn is_finite(&self) -> bool {
        self.slices()
            .iter()
            .all(|s| s.iter().all(|x| x.is_finite()))
    }

    fn check_input(&self, width: usize) -> Result<()> {
        if width != self.input_dim() {
            return Err(Error::Dimension {
                what: "network input",
                expected: self.input_dim(),
                got: width,
            });
        }
        Ok(())
    }

    /// Raw output for a single input vector.
    pub fn forward(&self, input: ArrayView1<T>) -> Result<Array1<T>> {
        self.check_input(input.len())?;
        let mut x = input.to_owned();
        let last = self.layers.len() - 1;
        for (i, l) in self.layers.iter().enumerate() {
            let mut z = l.weight.dot(&x);
            z += &l.bias;
            if i < last {
                z.mapv_inplace(|v| self.activation.apply(v));
            }
            x = z;
        }
        Ok(x)
    }

    /// Distribution for a single input; requires a Gaussian head.
    pub fn forward_gaussian(&self, input: ArrayView1<T>) -> Result<DiagGaussian<T>> {
        self.require_gaussian()?;
        let raw = self.forward(input)?;
        let k = self.output_dim();
        let mean = raw.slice(s![..k]).to_owned();
        let log_std = raw
            .slice(s![k..])
            .mapv(|v| v.max(self.log_std_min).min(self.log_std_max));
        DiagGaussian::new(mean, log_std)
    }

    fn require_gaussian(&self) -> Result<()> {
        if self.head != Head::GaussianTwoHead {
            return Err(Error::Config(
                "network does not have a gaussian head".into(),
            ));
        }
        Ok(())
    }

    /// Raw outputs for a batch (`rows` = samples).
    pub fn forward_batch(&self, input: ArrayView2<T>) -> Result<Array2<T>> {
        Ok(self.forward_train(input)?.0)
    }

    /// Batched forward pass that keeps what [`Mlp::backward`] needs.
    pub fn forward_train(&self, input: ArrayView2<T>) -> Result<(Array2<T>, Trace<T>)> {
        self.check_input(input.ncols())?;
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut x = input.to_owned();
        let last = self.layers.len() - 1;
        for (i, l) in self.layers.iter().enumerate() {
            let mut z = x.dot(&l.weight.t());
            z += &l.bias;
            if i < last {
                z.mapv_inplace(|v| self.activation.apply(v));
            }
            inputs.push(x);
            x = z;
        }
        Ok((x, Trace { inputs }))
    }

    /// Reverse pass: given `dL/d(raw output)` per row, returns parameter
    /// gradients (summed over rows) and `dL/d(input)`.
    pub fn backward(&self, trace: &Trace<T>, grad_out: ArrayView2<T>) -> (MlpGrads<T>, Array2<T>) {
        let mut grads = Vec::with_capacity(self.layers.len());
        let mut delta = grad_out.to_owned();
        for (i, l) in self.layers.iter().enumerate().rev() {
            let x = &trace.inputs[i];
            // `dot` on a transposed view may return column-major storage.
            let weight = delta.t().dot(x).as_standard_layout().into_owned();
            let bias = delta.sum_axis(Axis(0));
            let mut dx = delta.dot(&l.weight);
            if i > 0 {
                // x is the activated output of layer i-1.
                let act = self.activation;
                Zip::from(&mut dx)
                    .and(x)
                    .for_each(|d, &y| *d = *d * act.derivative_from_output(y));
            }
            grads.push(Dense { weight, bias });
            delta = dx;
        }
        grads.reverse();
        (MlpGrads { layers: grads }, delta)
    }

    /// Splits a raw Gaussian-head batch output into `(mean, clamped log_std)`.
    pub fn split_gaussian(&self, raw: &Array2<T>) -> (Array2<T>, Array2<T>) {
        let k = self.output_dim();
        let mean = raw.slice(s![.., ..k]).to_owned();
        let log_std = raw
            .slice(s![.., k..])
            .mapv(|v| v.max(self.log_std_min).min(self.log_std_max));
        (mean, log_std)
    }

    /// Assembles `dL/d(raw output)` from gradients w.r.t. mean and clamped
    /// log-std. Coordinates whose raw log-std sits outside the clamp receive
    /// zero gradient.
    pub fn gaussian_output_grad(
        &self,
        raw: &Array2<T>,
        d_mean: ArrayView2<T>,
        d_log_std: ArrayView2<T>,
    ) -> Array2<T> {
        let k = self.output_dim();
        let mut g = Array2::zeros(raw.raw_dim());
        g.slice_mut(s![.., ..k]).assign(&d_mean);
        let (lo, hi) = (self.log_std_min, self.log_std_max);
        Zip::from(g.slice_mut(s![.., k..]))
            .and(raw.slice(s![.., k..]))
            .and(d_log_std)
            .for_each(|g, &r, &d| *g = if r < lo || r > hi { T::zero() } else { d });
        g
    }

    /// Gradient of the batch-mean of a per-sample loss over raw outputs.
    ///
    /// `loss(row, output)` returns the sample loss and its gradient w.r.t.
    /// the raw output row. A non-finite sample loss aborts with the index of
    /// the offending row.
    pub fn loss_gradients<F>(&self, inputs: ArrayView2<T>, mut loss: F) -> Result<(T, MlpGrads<T>)>
    where
        F: FnMut(usize, ArrayView1<T>) -> (T, Array1<T>),
    {
        let n = inputs.nrows();
        if n == 0 {
            return Err(Error::Config("empty batch".into()));
        }
        let (out, trace) = self.forward_train(inputs)?;
        let mut grad_out = Array2::zeros(out.raw_dim());
        let mut total = T::zero();
        let scale = T::one() / T::lit(n as f64);
        for (i, row) in out.rows().into_iter().enumerate() {
            let (l, g) = loss(i, row);
            if !l.is_finite() {
                return Err(Error::NonFinite {
                    what: "loss",
                    index: i,
                });
            }
            total = total + l;
            grad_out.row_mut(i).assign(&(g * scale));
        }
        let (grads, _) = self.backward(&trace, grad_out.view());
        Ok((total * scale, grads))
    }
}

impl<T: Scalar> Params<T> for Mlp<T> {
    fn slices(&self) -> Vec<&[T]> {
        dense_slices(&self.layers)
    }

    fn slices_mut(&mut self) -> Vec<&mut [T]> {
        dense_slices_mut(&mut self.layers)
    }
}

impl<T: Scalar> Params<T> for MlpGrads<T> {
    fn slices(&self) -> Vec<&[T]> {
        dense_slices(&self.layers)
    }

    fn slices_mut(&mut self) -> Vec<&mut [T]> {
        dense_slices_mut(&mut self.layers)
    }
}

fn dense_slices<T: Scalar>(layers: &[Dense<T>]) -> Vec<&[T]> {
    let mut v = Vec::with_capacity(layers.len() * 2);
    for l in layers {
        v.push(l.weight.as_slice().expect("standard layout"));
        v.push(l.bias.as_slice().expect("standard layout"));
    }
    v
}

fn dense_slices_mut<T: Scalar>(layers: &mut [Dense<T>]) -> Vec<&mut [T]> {
    let mut v = Vec::with_capacity(layers.len() * 2);
    for l in layers {
        v.push(l.weight.as_slice_mut().expect("standard layout"));
        v.push(l.bias.as_slice_mut().expect("standard layout"));
    }
    v
}
