//! Feed-forward layers: embedding lookup, dropout variants, 1-D
//! convolution, dense, global average pooling and softmax cross-entropy.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::param::{glorot_uniform, Parameter};
use super::tensor::{gemm, MatMut, MatRef, Scalar, Tensor};
use crate::embeddings::EmbeddingTable;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Linear,
    #[default]
    Relu,
    Tanh,
}

impl Activation {
    pub fn apply<T: Scalar>(self, x: T) -> T {
        match self {
            Activation::Linear => x,
            Activation::Relu => x.max(T::zero()),
            Activation::Tanh => x.tanh(),
        }
    }

    /// Derivative expressed through the activation's output.
    pub fn derivative_from_output<T: Scalar>(self, y: T) -> T {
        match self {
            Activation::Linear => T::one(),
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

/// Row lookup into the frozen table: `B x L` indices to `B x L x D`.
pub fn embedding_forward<T: Scalar>(
    indices: &[u32],
    batch: usize,
    seq_len: usize,
    table: &EmbeddingTable,
) -> Result<Tensor<T>> {
    if indices.len() != batch * seq_len {
        return Err(Error::Shape(format!(
            "{} indices for a {batch}x{seq_len} batch",
            indices.len()
        )));
    }
    let dim = table.dim();
    let mut out = Vec::with_capacity(indices.len() * dim);
    for &i in indices {
        let i = i as usize;
        if i >= table.rows() {
            return Err(Error::Bounds {
                index: i,
                rows: table.rows(),
            });
        }
        out.extend(table.row(i).iter().map(|&x| T::widen_f32(x)));
    }
    Tensor::new(vec![batch, seq_len, dim], out)
}

/// Inverted-dropout keep mask: entries are 0 or `1 / (1 - rate)`.
#[derive(Clone, Debug, PartialEq)]
pub struct DropoutMask<T> {
    pub keep: Vec<T>,
    pub rate: f64,
    /// Reused across timesteps when set.
    pub variational: bool,
}

impl<T: Scalar> DropoutMask<T> {
    pub fn sample<R: Rng + ?Sized>(len: usize, rate: f64, variational: bool, rng: &mut R) -> Self {
        assert!((0.0..1.0).contains(&rate), "dropout rate {rate} outside [0, 1)");
        let scale = T::lit(1.0 / (1.0 - rate));
        let keep = (0..len)
            .map(|_| if rng.random::<f64>() < rate { T::zero() } else { scale })
            .collect();
        DropoutMask {
            keep,
            rate,
            variational,
        }
    }

    /// Mask only when dropout is active (training with a positive rate).
    pub fn maybe<R: Rng + ?Sized>(len: usize, rate: f64, variational: bool, train: bool, rng: &mut R) -> Option<Self> {
        (train && rate > 0.0).then(|| Self::sample(len, rate, variational, rng))
    }
}

/// Drops whole `(batch, channel)` feature maps across every timestep of a
/// `B x L x C` input.
pub fn spatial_dropout1d<T: Scalar, R: Rng + ?Sized>(
    input: &Tensor<T>,
    rate: f64,
    train: bool,
    rng: &mut R,
) -> Result<(Tensor<T>, Option<DropoutMask<T>>)> {
    input.expect_rank(3, "spatial dropout input")?;
    let (b, l, c) = (input.shape()[0], input.shape()[1], input.shape()[2]);
    let Some(mask) = DropoutMask::maybe(b * c, rate, true, train, rng) else {
        return Ok((input.clone(), None));
    };
    let mut out = input.clone();
    apply_channel_mask(out.data_mut(), &mask.keep, b, l, c);
    Ok((out, Some(mask)))
}

pub fn spatial_dropout1d_backward<T: Scalar>(grad: &Tensor<T>, mask: Option<&DropoutMask<T>>) -> Tensor<T> {
    let mut g = grad.clone();
    if let Some(mask) = mask {
        let s = grad.shape();
        apply_channel_mask(g.data_mut(), &mask.keep, s[0], s[1], s[2]);
    }
    g
}

/// Multiplies a `B x L x C` buffer by a `B x C` mask broadcast over time.
pub(crate) fn apply_channel_mask<T: Scalar>(data: &mut [T], keep: &[T], b: usize, l: usize, c: usize) {
    for bi in 0..b {
        let m = &keep[bi * c..(bi + 1) * c];
        for row in data[bi * l * c..(bi + 1) * l * c].chunks_exact_mut(c) {
            row.iter_mut().zip(m).for_each(|(x, &k)| *x *= k);
        }
    }
}

/// Standard elementwise inverted dropout.
pub fn dropout<T: Scalar, R: Rng + ?Sized>(
    input: &Tensor<T>,
    rate: f64,
    train: bool,
    rng: &mut R,
) -> (Tensor<T>, Option<DropoutMask<T>>) {
    let Some(mask) = DropoutMask::maybe(input.len(), rate, false, train, rng) else {
        return (input.clone(), None);
    };
    let mut out = input.clone();
    out.data_mut().iter_mut().zip(&mask.keep).for_each(|(x, &k)| *x *= k);
    (out, Some(mask))
}

pub fn dropout_backward<T: Scalar>(grad: &Tensor<T>, mask: Option<&DropoutMask<T>>) -> Tensor<T> {
    let mut g = grad.clone();
    if let Some(mask) = mask {
        g.data_mut().iter_mut().zip(&mask.keep).for_each(|(x, &k)| *x *= k);
    }
    g
}

/// Valid (unpadded) cross-correlation over time.
#[derive(Clone, Debug, PartialEq)]
pub struct Conv1d<T> {
    /// `k x C_in x C_out`
    pub kernel: Parameter<T>,
    /// `C_out`
    pub bias: Parameter<T>,
    pub activation: Activation,
}

#[derive(Clone, Debug)]
pub struct Conv1dCache<T> {
    input: Tensor<T>,
    output: Tensor<T>,
}

impl<T: Scalar> Conv1dCache<T> {
    pub fn input_shape(&self) -> &[usize] {
        self.input.shape()
    }

    pub fn output_shape(&self) -> &[usize] {
        self.output.shape()
    }
}

impl<T: Scalar> Conv1d<T> {
    pub fn new<R: Rng + ?Sized>(
        kernel_size: usize,
        c_in: usize,
        c_out: usize,
        activation: Activation,
        rng: &mut R,
    ) -> Self {
        let kernel = glorot_uniform(
            &[kernel_size, c_in, c_out],
            kernel_size * c_in,
            kernel_size * c_out,
            rng,
        );
        Conv1d {
            kernel: Parameter::new(kernel),
            bias: Parameter::new(Tensor::zeros(&[c_out])),
            activation,
        }
    }

    pub fn kernel_size(&self) -> usize {
        self.kernel.shape()[0]
    }

    pub fn in_channels(&self) -> usize {
        self.kernel.shape()[1]
    }

    pub fn out_channels(&self) -> usize {
        self.kernel.shape()[2]
    }

    pub fn forward(&self, input: &Tensor<T>) -> Result<(Tensor<T>, Conv1dCache<T>)> {
        input.expect_rank(3, "conv1d input")?;
        let (b, l, c_in) = (input.shape()[0], input.shape()[1], input.shape()[2]);
        let (k, c_out) = (self.kernel_size(), self.out_channels());
        if c_in != self.in_channels() {
            return Err(Error::Shape(format!(
                "conv1d expects {} input channels, got {c_in}",
                self.in_channels()
            )));
        }
        if l < k {
            return Err(Error::Shape(format!("conv1d input length {l} shorter than kernel {k}")));
        }
        let lo = l - k + 1;
        let mut out = Tensor::zeros(&[b, lo, c_out]);
        for row in out.data_mut().chunks_exact_mut(c_out) {
            row.copy_from_slice(self.bias.value.data());
        }
        let w = MatRef::new(self.kernel.value.data(), k * c_in, c_out);
        for bi in 0..b {
            // Each output step reads a contiguous window of k*c_in values.
            let windows = MatRef::strided(input.data(), bi * l * c_in, lo, k * c_in, c_in, 1);
            let dst = MatMut::strided(out.data_mut(), bi * lo * c_out, lo, c_out, c_out, 1);
            gemm(T::one(), windows, w, T::one(), dst);
        }
        let act = self.activation;
        out.data_mut().iter_mut().for_each(|x| *x = act.apply(*x));
        let cache = Conv1dCache {
            input: input.clone(),
            output: out.clone(),
        };
        Ok((out, cache))
    }

    /// Accumulates kernel/bias gradients and returns the input gradient.
    pub fn backward(&mut self, cache: &Conv1dCache<T>, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
        grad_out.expect_shape(cache.output.shape(), "conv1d output gradient")?;
        let (b, l, c_in) = (cache.input.shape()[0], cache.input.shape()[1], cache.input.shape()[2]);
        let (k, c_out) = (self.kernel_size(), self.out_channels());
        let lo = l - k + 1;
        let act = self.activation;
        let mut delta = grad_out.clone();
        delta
            .data_mut()
            .iter_mut()
            .zip(cache.output.data())
            .for_each(|(g, &y)| *g *= act.derivative_from_output(y));

        let gb = self.bias.grad.data_mut();
        for row in delta.data().chunks_exact(c_out) {
            gb.iter_mut().zip(row).for_each(|(a, &d)| *a += d);
        }
        let mut grad_in = Tensor::zeros(&[b, l, c_in]);
        for bi in 0..b {
            let windows = MatRef::strided(cache.input.data(), bi * l * c_in, lo, k * c_in, c_in, 1);
            let d = MatRef::strided(delta.data(), bi * lo * c_out, lo, c_out, c_out, 1);
            gemm(
                T::one(),
                windows.t(),
                d,
                T::one(),
                MatMut::new(self.kernel.grad.data_mut(), k * c_in, c_out),
            );
            for j in 0..k {
                let w_j = MatRef::strided(self.kernel.value.data(), j * c_in * c_out, c_in, c_out, c_out, 1);
                let dst = MatMut::strided(grad_in.data_mut(), (bi * l + j) * c_in, lo, c_in, c_in, 1);
                gemm(T::one(), d, w_j.t(), T::one(), dst);
            }
        }
        Ok(grad_in)
    }
}

/// Affine map over the trailing axis, applied row by row.
#[derive(Clone, Debug, PartialEq)]
pub struct Dense<T> {
    /// `D_in x D_out`
    pub weight: Parameter<T>,
    /// `D_out`
    pub bias: Parameter<T>,
    pub activation: Activation,
}

#[derive(Clone, Debug)]
pub struct DenseCache<T> {
    input: Tensor<T>,
    output: Tensor<T>,
}

impl<T: Scalar> DenseCache<T> {
    pub fn input_shape(&self) -> &[usize] {
        self.input.shape()
    }

    pub fn output_shape(&self) -> &[usize] {
        self.output.shape()
    }
}

impl<T: Scalar> Dense<T> {
    pub fn new<R: Rng + ?Sized>(d_in: usize, d_out: usize, activation: Activation, rng: &mut R) -> Self {
        Dense {
            weight: Parameter::new(glorot_uniform(&[d_in, d_out], d_in, d_out, rng)),
            bias: Parameter::new(Tensor::zeros(&[d_out])),
            activation,
        }
    }

    pub fn in_features(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn out_features(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn forward(&self, input: &Tensor<T>) -> Result<(Tensor<T>, DenseCache<T>)> {
        let (d_in, d_out) = (self.in_features(), self.out_features());
        if input.shape().last() != Some(&d_in) {
            return Err(Error::Shape(format!(
                "dense expects trailing dimension {d_in}, got shape {:?}",
                input.shape()
            )));
        }
        let n = input.len() / d_in;
        let mut shape = input.shape().to_vec();
        *shape.last_mut().unwrap() = d_out;
        let mut out = Tensor::zeros(&shape);
        for row in out.data_mut().chunks_exact_mut(d_out) {
            row.copy_from_slice(self.bias.value.data());
        }
        gemm(
            T::one(),
            MatRef::new(input.data(), n, d_in),
            MatRef::new(self.weight.value.data(), d_in, d_out),
            T::one(),
            MatMut::new(out.data_mut(), n, d_out),
        );
        let act = self.activation;
        out.data_mut().iter_mut().for_each(|x| *x = act.apply(*x));
        let cache = DenseCache {
            input: input.clone(),
            output: out.clone(),
        };
        Ok((out, cache))
    }

    pub fn backward(&mut self, cache: &DenseCache<T>, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
        grad_out.expect_shape(cache.output.shape(), "dense output gradient")?;
        let (d_in, d_out) = (self.in_features(), self.out_features());
        let n = cache.input.len() / d_in;
        let act = self.activation;
        let mut delta = grad_out.clone();
        delta
            .data_mut()
            .iter_mut()
            .zip(cache.output.data())
            .for_each(|(g, &y)| *g *= act.derivative_from_output(y));
        let gb = self.bias.grad.data_mut();
        for row in delta.data().chunks_exact(d_out) {
            gb.iter_mut().zip(row).for_each(|(a, &d)| *a += d);
        }
        let d = MatRef::new(delta.data(), n, d_out);
        gemm(
            T::one(),
            MatRef::new(cache.input.data(), n, d_in).t(),
            d,
            T::one(),
            MatMut::new(self.weight.grad.data_mut(), d_in, d_out),
        );
        let mut grad_in = Tensor::zeros(cache.input.shape());
        gemm(
            T::one(),
            d,
            MatRef::new(self.weight.value.data(), d_in, d_out).t(),
            T::zero(),
            MatMut::new(grad_in.data_mut(), n, d_in),
        );
        Ok(grad_in)
    }
}

/// Mean over the time axis: `B x L x C` to `B x C`.
pub fn global_avg_pool1d<T: Scalar>(input: &Tensor<T>) -> Result<Tensor<T>> {
    input.expect_rank(3, "global average pool input")?;
    let (b, l, c) = (input.shape()[0], input.shape()[1], input.shape()[2]);
    if l == 0 {
        return Err(Error::Shape("global average pool over an empty sequence".into()));
    }
    let inv = T::one() / T::lit(l as f64);
    let mut out = Tensor::zeros(&[b, c]);
    for bi in 0..b {
        let acc = &mut out.data_mut()[bi * c..(bi + 1) * c];
        for row in input.data()[bi * l * c..(bi + 1) * l * c].chunks_exact(c) {
            acc.iter_mut().zip(row).for_each(|(a, &x)| *a += x);
        }
        acc.iter_mut().for_each(|a| *a *= inv);
    }
    Ok(out)
}

/// Spreads `grad / L` over every timestep.
pub fn global_avg_pool1d_backward<T: Scalar>(grad: &Tensor<T>, seq_len: usize) -> Tensor<T> {
    let (b, c) = (grad.shape()[0], grad.shape()[1]);
    let inv = T::one() / T::lit(seq_len as f64);
    let mut out = Tensor::zeros(&[b, seq_len, c]);
    for bi in 0..b {
        let g = &grad.data()[bi * c..(bi + 1) * c];
        for row in out.data_mut()[bi * seq_len * c..(bi + 1) * seq_len * c].chunks_exact_mut(c) {
            row.iter_mut().zip(g).for_each(|(o, &x)| *o = x * inv);
        }
    }
    out
}

/// Row-wise softmax of a `B x C` tensor.
pub fn softmax<T: Scalar>(logits: &Tensor<T>) -> Tensor<T> {
    let c = *logits.shape().last().unwrap();
    let mut out = logits.clone();
    for row in out.data_mut().chunks_exact_mut(c) {
        let max = row.iter().fold(T::neg_infinity(), |m, &x| m.max(x));
        let mut sum = T::zero();
        for x in row.iter_mut() {
            *x = (*x - max).exp();
            sum += *x;
        }
        row.iter_mut().for_each(|x| *x = *x / sum);
    }
    out
}

/// Mean categorical cross-entropy over the batch and its logit gradient
/// `(p - y) / B`.
pub fn softmax_cross_entropy<T: Scalar>(logits: &Tensor<T>, onehot: &Tensor<T>) -> Result<(T, Tensor<T>)> {
    logits.expect_rank(2, "logits")?;
    onehot.expect_shape(logits.shape(), "one-hot targets")?;
    let (b, c) = (logits.shape()[0], logits.shape()[1]);
    let tol = T::lit(1e-6);
    for (i, row) in onehot.data().chunks_exact(c).enumerate() {
        let sum: T = row.iter().copied().sum();
        if row.iter().any(|&y| y < T::zero()) || (sum - T::one()).abs() > tol {
            return Err(Error::DataIntegrity(format!("target row {i} is not a distribution")));
        }
    }
    let inv_b = T::one() / T::lit(b as f64);
    let mut loss = T::zero();
    let mut grad = Tensor::zeros(&[b, c]);
    for ((z, y), g) in logits
        .data()
        .chunks_exact(c)
        .zip(onehot.data().chunks_exact(c))
        .zip(grad.data_mut().chunks_exact_mut(c))
    {
        let max = z.iter().fold(T::neg_infinity(), |m, &x| m.max(x));
        let log_sum = z.iter().map(|&x| (x - max).exp()).sum::<T>().ln() + max;
        for j in 0..c {
            let log_p = z[j] - log_sum;
            loss -= y[j] * log_p;
            g[j] = (log_p.exp() - y[j]) * inv_b;
        }
    }
    Ok((loss * inv_b, grad))
}

pub fn one_hot<T: Scalar>(labels: &[u8], classes: usize) -> Result<Tensor<T>> {
    let mut out = Tensor::zeros(&[labels.len(), classes]);
    for (i, &y) in labels.iter().enumerate() {
        if y as usize >= classes {
            return Err(Error::DataIntegrity(format!("label {y} outside 0..{classes}")));
        }
        out.data_mut()[i * classes + y as usize] = T::one();
    }
    Ok(out)
}
