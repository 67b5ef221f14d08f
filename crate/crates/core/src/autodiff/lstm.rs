//! LSTM cell, single-direction scan with backpropagation through time, and
//! the bidirectional wrapper.
//!
//! Gate layout along the `4H` axis is `[i | f | g | o]`:
//!
//! ```text
//! i = sigmoid(x W_i + h U_i + b_i)     f = sigmoid(x W_f + h U_f + b_f)
//! g = tanh(x W_g + h U_g + b_g)        o = sigmoid(x W_o + h U_o + b_o)
//! c' = f * c + i * g                   h' = o * tanh(c')
//! ```
//!
//! Input dropout and recurrent dropout are variational: one mask per
//! sequence, shared by every timestep and gate.

use rand::Rng;

use super::layers::DropoutMask;
use super::param::{glorot_uniform, orthogonal, Parameter};
use super::tensor::{gemm, MatMut, MatRef, Scalar, Tensor};
use crate::error::{Error, Result};

fn sigmoid<T: Scalar>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

#[derive(Clone, Debug, PartialEq)]
pub struct LstmParams<T> {
    /// `4H x D_in`
    pub w: Parameter<T>,
    /// `4H x H`
    pub u: Parameter<T>,
    /// `4H`
    pub b: Parameter<T>,
}

impl<T: Scalar> LstmParams<T> {
    /// Glorot input weights, orthogonal recurrent weights, zero biases with
    /// the forget-gate bias set to 1.
    pub fn new<R: Rng + ?Sized>(input_dim: usize, hidden: usize, rng: &mut R) -> Self {
        let w = glorot_uniform(&[4 * hidden, input_dim], input_dim, 4 * hidden, rng);
        let u = orthogonal(4 * hidden, hidden, rng);
        let mut b = Tensor::zeros(&[4 * hidden]);
        b.data_mut()[hidden..2 * hidden].iter_mut().for_each(|x| *x = T::one());
        LstmParams {
            w: Parameter::new(w),
            u: Parameter::new(u),
            b: Parameter::new(b),
        }
    }

    pub fn hidden(&self) -> usize {
        self.u.shape()[1]
    }

    pub fn input_dim(&self) -> usize {
        self.w.shape()[1]
    }

    pub fn parameters_mut(&mut self) -> [&mut Parameter<T>; 3] {
        [&mut self.w, &mut self.u, &mut self.b]
    }
}

/// Activated gates and new state for one step. `gates` holds the
/// pre-activations on entry.
fn cell_step<T: Scalar>(gates: &mut [T], c_prev: &[T], c: &mut [T], tanh_c: &mut [T], h: &mut [T], hidden: usize) {
    let four_h = 4 * hidden;
    for (bi, g) in gates.chunks_exact_mut(four_h).enumerate() {
        let (gi, rest) = g.split_at_mut(hidden);
        let (gf, rest) = rest.split_at_mut(hidden);
        let (gg, go) = rest.split_at_mut(hidden);
        let row = bi * hidden..(bi + 1) * hidden;
        for (j, k) in row.enumerate() {
            gi[j] = sigmoid(gi[j]);
            gf[j] = sigmoid(gf[j]);
            gg[j] = gg[j].tanh();
            go[j] = sigmoid(go[j]);
            c[k] = gf[j] * c_prev[k] + gi[j] * gg[j];
            tanh_c[k] = c[k].tanh();
            h[k] = go[j] * tanh_c[k];
        }
    }
}

/// Adds `h_masked U^T` to the pre-activations in `gates`.
fn add_recurrent<T: Scalar>(gates: &mut [T], h_masked: &[T], u: &Tensor<T>, batch: usize, hidden: usize) {
    gemm(
        T::one(),
        MatRef::new(h_masked, batch, hidden),
        MatRef::new(u.data(), 4 * hidden, hidden).t(),
        T::one(),
        MatMut::new(gates, batch, 4 * hidden),
    );
}

fn masked<T: Scalar>(h: &[T], mask: Option<&DropoutMask<T>>) -> Vec<T> {
    match mask {
        Some(m) => h.iter().zip(&m.keep).map(|(&x, &k)| x * k).collect(),
        None => h.to_vec(),
    }
}

/// One LSTM step for a batch: `x_t` is `B x D`, states are `B x H`.
/// Recurrent dropout (when given) multiplies `h_prev` before every gate.
pub fn lstm_cell_forward<T: Scalar>(
    x_t: &Tensor<T>,
    h_prev: &Tensor<T>,
    c_prev: &Tensor<T>,
    params: &LstmParams<T>,
    rec_mask: Option<&DropoutMask<T>>,
) -> Result<(Tensor<T>, Tensor<T>)> {
    x_t.expect_rank(2, "lstm cell input")?;
    let (b, d) = (x_t.shape()[0], x_t.shape()[1]);
    let h = params.hidden();
    if d != params.input_dim() {
        return Err(Error::Shape(format!(
            "lstm cell expects input dim {}, got {d}",
            params.input_dim()
        )));
    }
    h_prev.expect_shape(&[b, h], "lstm h_prev")?;
    c_prev.expect_shape(&[b, h], "lstm c_prev")?;
    let mut gates = Vec::with_capacity(b * 4 * h);
    for _ in 0..b {
        gates.extend_from_slice(params.b.value.data());
    }
    gemm(
        T::one(),
        MatRef::new(x_t.data(), b, d),
        MatRef::new(params.w.value.data(), 4 * h, d).t(),
        T::one(),
        MatMut::new(&mut gates, b, 4 * h),
    );
    add_recurrent(&mut gates, &masked(h_prev.data(), rec_mask), &params.u.value, b, h);
    let mut c = Tensor::zeros(&[b, h]);
    let mut tanh_c = vec![T::zero(); b * h];
    let mut h_out = Tensor::zeros(&[b, h]);
    cell_step(
        &mut gates,
        c_prev.data(),
        c.data_mut(),
        &mut tanh_c,
        h_out.data_mut(),
        h,
    );
    Ok((h_out, c))
}

/// Stored activations of one direction's scan, indexed by step (not time).
#[derive(Clone, Debug)]
pub struct LstmCache<T> {
    batch: usize,
    seq_len: usize,
    reverse: bool,
    /// `B x L x D` input after input dropout.
    x: Tensor<T>,
    in_mask: Option<DropoutMask<T>>,
    rec_mask: Option<DropoutMask<T>>,
    /// Per step, `B x 4H` activated gates.
    gates: Vec<Vec<T>>,
    /// Per step, `B x H`.
    c: Vec<Vec<T>>,
    tanh_c: Vec<Vec<T>>,
    /// Per step, the masked previous hidden state fed to `U`.
    h_in: Vec<Vec<T>>,
}

impl<T: Scalar> LstmParams<T> {
    fn time(seq_len: usize, step: usize, reverse: bool) -> usize {
        if reverse {
            seq_len - 1 - step
        } else {
            step
        }
    }

    /// Runs the cell over `B x L x D`, right-to-left when `reverse`, and
    /// returns every hidden state as `B x L x H` (in time order).
    pub fn scan(
        &self,
        input: &Tensor<T>,
        reverse: bool,
        in_mask: Option<DropoutMask<T>>,
        rec_mask: Option<DropoutMask<T>>,
    ) -> Result<(Tensor<T>, LstmCache<T>)> {
        input.expect_rank(3, "lstm input")?;
        let (b, l, d) = (input.shape()[0], input.shape()[1], input.shape()[2]);
        let h = self.hidden();
        if d != self.input_dim() {
            return Err(Error::Shape(format!(
                "lstm expects input dim {}, got {d}",
                self.input_dim()
            )));
        }
        let mut x = input.clone();
        if let Some(m) = &in_mask {
            super::layers::apply_channel_mask(x.data_mut(), &m.keep, b, l, d);
        }
        // Input projections for all timesteps at once: (B*L) x 4H.
        let mut xw = vec![T::zero(); b * l * 4 * h];
        for row in xw.chunks_exact_mut(4 * h) {
            row.copy_from_slice(self.b.value.data());
        }
        gemm(
            T::one(),
            MatRef::new(x.data(), b * l, d),
            MatRef::new(self.w.value.data(), 4 * h, d).t(),
            T::one(),
            MatMut::new(&mut xw, b * l, 4 * h),
        );

        let mut out = Tensor::zeros(&[b, l, h]);
        let mut cache = LstmCache {
            batch: b,
            seq_len: l,
            reverse,
            x,
            in_mask,
            rec_mask,
            gates: Vec::with_capacity(l),
            c: Vec::with_capacity(l),
            tanh_c: Vec::with_capacity(l),
            h_in: Vec::with_capacity(l),
        };
        let zeros = vec![T::zero(); b * h];
        let mut h_prev = zeros.clone();
        for step in 0..l {
            let t = Self::time(l, step, reverse);
            let mut gates = Vec::with_capacity(b * 4 * h);
            for bi in 0..b {
                let r = (bi * l + t) * 4 * h;
                gates.extend_from_slice(&xw[r..r + 4 * h]);
            }
            let h_in = masked(&h_prev, cache.rec_mask.as_ref());
            add_recurrent(&mut gates, &h_in, &self.u.value, b, h);
            let c_prev = cache.c.last().unwrap_or(&zeros);
            let mut c = vec![T::zero(); b * h];
            let mut tanh_c = vec![T::zero(); b * h];
            let mut h_new = vec![T::zero(); b * h];
            cell_step(&mut gates, c_prev, &mut c, &mut tanh_c, &mut h_new, h);
            for bi in 0..b {
                let dst = (bi * l + t) * h;
                out.data_mut()[dst..dst + h].copy_from_slice(&h_new[bi * h..(bi + 1) * h]);
            }
            cache.gates.push(gates);
            cache.c.push(c);
            cache.tanh_c.push(tanh_c);
            cache.h_in.push(h_in);
            h_prev = h_new;
        }
        Ok((out, cache))
    }

    /// Backpropagation through time. Accumulates into `w`, `u`, `b` grads
    /// and returns the gradient with respect to the (pre-dropout) input.
    pub fn scan_backward(&mut self, cache: &LstmCache<T>, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
        let (b, l) = (cache.batch, cache.seq_len);
        let h = self.hidden();
        let d = self.input_dim();
        grad_out.expect_shape(&[b, l, h], "lstm output gradient")?;
        let four_h = 4 * h;
        let mut d_gates_all = vec![T::zero(); b * l * four_h];
        let mut dh_next = vec![T::zero(); b * h];
        let mut dc_next = vec![T::zero(); b * h];
        let mut d_gates = vec![T::zero(); b * four_h];
        let zeros = vec![T::zero(); b * h];
        let one = T::one();

        for step in (0..l).rev() {
            let t = Self::time(l, step, cache.reverse);
            let gates = &cache.gates[step];
            let tanh_c = &cache.tanh_c[step];
            let c_prev = if step == 0 { &zeros } else { &cache.c[step - 1] };
            for bi in 0..b {
                let g_row = &gates[bi * four_h..(bi + 1) * four_h];
                let dg_row = &mut d_gates[bi * four_h..(bi + 1) * four_h];
                let go = (bi * l + t) * h;
                for j in 0..h {
                    let k = bi * h + j;
                    let (i_g, f_g, g_g, o_g) = (g_row[j], g_row[h + j], g_row[2 * h + j], g_row[3 * h + j]);
                    let dh = grad_out.data()[go + j] + dh_next[k];
                    let tc = tanh_c[k];
                    let d_o = dh * tc;
                    let dc = dh * o_g * (one - tc * tc) + dc_next[k];
                    let d_i = dc * g_g;
                    let d_g = dc * i_g;
                    let d_f = dc * c_prev[k];
                    dc_next[k] = dc * f_g;
                    dg_row[j] = d_i * i_g * (one - i_g);
                    dg_row[h + j] = d_f * f_g * (one - f_g);
                    dg_row[2 * h + j] = d_g * (one - g_g * g_g);
                    dg_row[3 * h + j] = d_o * o_g * (one - o_g);
                }
                let dst = (bi * l + t) * four_h;
                d_gates_all[dst..dst + four_h].copy_from_slice(dg_row);
            }
            let dg = MatRef::new(&d_gates, b, four_h);
            gemm(
                one,
                dg.t(),
                MatRef::new(&cache.h_in[step], b, h),
                one,
                MatMut::new(self.u.grad.data_mut(), four_h, h),
            );
            gemm(
                one,
                dg,
                MatRef::new(self.u.value.data(), four_h, h),
                T::zero(),
                MatMut::new(&mut dh_next, b, h),
            );
            if let Some(m) = &cache.rec_mask {
                dh_next.iter_mut().zip(&m.keep).for_each(|(x, &k)| *x *= k);
            }
        }

        let dg = MatRef::new(&d_gates_all, b * l, four_h);
        gemm(
            one,
            dg.t(),
            MatRef::new(cache.x.data(), b * l, d),
            one,
            MatMut::new(self.w.grad.data_mut(), four_h, d),
        );
        let gb = self.b.grad.data_mut();
        for row in d_gates_all.chunks_exact(four_h) {
            gb.iter_mut().zip(row).for_each(|(a, &x)| *a += x);
        }
        let mut grad_in = Tensor::zeros(&[b, l, d]);
        gemm(
            one,
            dg,
            MatRef::new(self.w.value.data(), four_h, d),
            T::zero(),
            MatMut::new(grad_in.data_mut(), b * l, d),
        );
        if let Some(m) = &cache.in_mask {
            super::layers::apply_channel_mask(grad_in.data_mut(), &m.keep, b, l, d);
        }
        Ok(grad_in)
    }
}

/// Forward and backward LSTMs over the same input with outputs
/// concatenated per timestep as `[forward | backward]`.
#[derive(Clone, Debug, PartialEq)]
pub struct BiLstm<T> {
    pub forward: LstmParams<T>,
    pub backward: LstmParams<T>,
    pub dropout: f64,
    pub recurrent_dropout: f64,
}

#[derive(Clone, Debug)]
pub struct BiLstmCache<T> {
    forward: LstmCache<T>,
    backward: LstmCache<T>,
}

impl<T: Scalar> BiLstm<T> {
    pub fn new<R: Rng + ?Sized>(
        input_dim: usize,
        hidden: usize,
        dropout: f64,
        recurrent_dropout: f64,
        rng: &mut R,
    ) -> Self {
        BiLstm {
            forward: LstmParams::new(input_dim, hidden, rng),
            backward: LstmParams::new(input_dim, hidden, rng),
            dropout,
            recurrent_dropout,
        }
    }

    pub fn hidden(&self) -> usize {
        self.forward.hidden()
    }

    /// `B x L x D` to `B x L x 2H` (all timesteps returned).
    pub fn forward<R: Rng + ?Sized>(
        &self,
        input: &Tensor<T>,
        train: bool,
        rng: &mut R,
    ) -> Result<(Tensor<T>, BiLstmCache<T>)> {
        input.expect_rank(3, "bilstm input")?;
        let (b, l, d) = (input.shape()[0], input.shape()[1], input.shape()[2]);
        let h = self.hidden();
        let mut run = |params: &LstmParams<T>, reverse: bool| {
            let in_mask = DropoutMask::maybe(b * d, self.dropout, true, train, rng);
            let rec_mask = DropoutMask::maybe(b * h, self.recurrent_dropout, true, train, rng);
            params.scan(input, reverse, in_mask, rec_mask)
        };
        let (out_f, cache_f) = run(&self.forward, false)?;
        let (out_b, cache_b) = run(&self.backward, true)?;
        let mut out = Tensor::zeros(&[b, l, 2 * h]);
        for ((dst, f), bk) in out
            .data_mut()
            .chunks_exact_mut(2 * h)
            .zip(out_f.data().chunks_exact(h))
            .zip(out_b.data().chunks_exact(h))
        {
            dst[..h].copy_from_slice(f);
            dst[h..].copy_from_slice(bk);
        }
        Ok((
            out,
            BiLstmCache {
                forward: cache_f,
                backward: cache_b,
            },
        ))
    }

    pub fn backward(&mut self, cache: &BiLstmCache<T>, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
        let (b, l) = (cache.forward.batch, cache.forward.seq_len);
        let h = self.hidden();
        grad_out.expect_shape(&[b, l, 2 * h], "bilstm output gradient")?;
        let mut g_f = Tensor::zeros(&[b, l, h]);
        let mut g_b = Tensor::zeros(&[b, l, h]);
        for ((src, f), bk) in grad_out
            .data()
            .chunks_exact(2 * h)
            .zip(g_f.data_mut().chunks_exact_mut(h))
            .zip(g_b.data_mut().chunks_exact_mut(h))
        {
            f.copy_from_slice(&src[..h]);
            bk.copy_from_slice(&src[h..]);
        }
        let mut grad_in = self.forward.scan_backward(&cache.forward, &g_f)?;
        grad_in.add_assign(&self.backward.scan_backward(&cache.backward, &g_b)?);
        Ok(grad_in)
    }

    pub fn parameters_mut(&mut self) -> Vec<&mut Parameter<T>> {
        let mut v: Vec<&mut Parameter<T>> = self.forward.parameters_mut().into();
        v.extend(self.backward.parameters_mut());
        v
    }
}
