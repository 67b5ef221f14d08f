//! Central finite-difference checks for every parameterized layer.
//!
//! Each check builds a random instance at `f64`, takes the scalar loss
//! `sum(r * y)` for a random weight tensor `r` (so upstream gradient equals
//! `r`), and compares analytic gradients against `(L(x+e) - L(x-e)) / 2e`
//! for every input and parameter entry.

use abuse_detect_core::autodiff::{
    one_hot, softmax_cross_entropy, Activation, BiLstm, Conv1d, Dense, DropoutMask, LstmParams, Parameter, Tensor,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const EPS: f64 = 1e-5;

/// Entries whose analytic and numeric values both sit below this are
/// compared on an absolute scale. Roundoff in the central difference at
/// `EPS` is around `1e-11`, which would dominate a relative measure on
/// gradients near `1e-7`.
pub const FLOOR: f64 = 1e-6;

pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(FLOOR)
}

fn rand_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

fn weighted(y: &Tensor<f64>, r: &Tensor<f64>) -> f64 {
    y.data().iter().zip(r.data()).map(|(a, b)| a * b).sum()
}

/// Perturbs every entry of the tensor selected by `slot` and returns the
/// worst relative error against `analytic`.
fn sweep<M: Clone>(
    model: &M,
    analytic: &Tensor<f64>,
    slot: impl Fn(&mut M) -> &mut Tensor<f64>,
    loss: impl Fn(&M) -> f64,
) -> f64 {
    let mut worst = 0.0f64;
    for i in 0..analytic.len() {
        let mut plus = model.clone();
        slot(&mut plus).data_mut()[i] += EPS;
        let mut minus = model.clone();
        slot(&mut minus).data_mut()[i] -= EPS;
        let numeric = (loss(&plus) - loss(&minus)) / (2.0 * EPS);
        worst = worst.max(rel_err(analytic.data()[i], numeric));
    }
    worst
}

fn pick_activation(rng: &mut ChaCha8Rng) -> Activation {
    // ReLU is excluded: its kink makes central differences unreliable.
    if rng.random_bool(0.5) {
        Activation::Tanh
    } else {
        Activation::Linear
    }
}

pub fn conv1d(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let act = pick_activation(&mut rng);
    let mut conv: Conv1d<f64> = Conv1d::new(2, 3, 4, act, &mut rng);
    conv.bias.value = rand_tensor(&[4], &mut rng);
    let x = rand_tensor(&[2, 5, 3], &mut rng);
    let r = rand_tensor(&[2, 4, 4], &mut rng);

    let (_, cache) = conv.forward(&x).unwrap();
    let mut grads = conv.clone();
    let dx = grads.backward(&cache, &r).unwrap();

    let state = (conv, x);
    let loss = |s: &(Conv1d<f64>, Tensor<f64>)| weighted(&s.0.forward(&s.1).unwrap().0, &r);
    [
        sweep(&state, &dx, |s| &mut s.1, loss),
        sweep(&state, &grads.kernel.grad, |s| &mut s.0.kernel.value, loss),
        sweep(&state, &grads.bias.grad, |s| &mut s.0.bias.value, loss),
    ]
    .into_iter()
    .fold(0.0, f64::max)
}

pub fn dense(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let act = pick_activation(&mut rng);
    let mut dense: Dense<f64> = Dense::new(4, 3, act, &mut rng);
    dense.bias.value = rand_tensor(&[3], &mut rng);
    let x = rand_tensor(&[2, 5, 4], &mut rng);
    let r = rand_tensor(&[2, 5, 3], &mut rng);

    let (_, cache) = dense.forward(&x).unwrap();
    let mut grads = dense.clone();
    let dx = grads.backward(&cache, &r).unwrap();

    let state = (dense, x);
    let loss = |s: &(Dense<f64>, Tensor<f64>)| weighted(&s.0.forward(&s.1).unwrap().0, &r);
    [
        sweep(&state, &dx, |s| &mut s.1, loss),
        sweep(&state, &grads.weight.grad, |s| &mut s.0.weight.value, loss),
        sweep(&state, &grads.bias.grad, |s| &mut s.0.bias.value, loss),
    ]
    .into_iter()
    .fold(0.0, f64::max)
}

fn lstm_params(params: &mut LstmParams<f64>, which: usize) -> &mut Parameter<f64> {
    match which {
        0 => &mut params.w,
        1 => &mut params.u,
        _ => &mut params.b,
    }
}

/// Unidirectional scan with fixed variational masks; `seq_len = 2` covers
/// one cell step from a zero state and one from a nonzero state.
fn lstm_scan(seed: u64, seq_len: usize, reverse: bool, masked: bool) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (b, d, h) = (2, 3, 5);
    let mut p: LstmParams<f64> = LstmParams::new(d, h, &mut rng);
    p.b.value = rand_tensor(&[4 * h], &mut rng);
    let x = rand_tensor(&[b, seq_len, d], &mut rng);
    let r = rand_tensor(&[b, seq_len, h], &mut rng);
    let in_mask = masked.then(|| DropoutMask::sample(b * d, 0.3, true, &mut rng));
    let rec_mask = masked.then(|| DropoutMask::sample(b * h, 0.3, true, &mut rng));

    let (_, cache) = p.scan(&x, reverse, in_mask.clone(), rec_mask.clone()).unwrap();
    let mut grads = p.clone();
    let dx = grads.scan_backward(&cache, &r).unwrap();

    let state = (p, x);
    let loss = |s: &(LstmParams<f64>, Tensor<f64>)| {
        weighted(
            &s.0.scan(&s.1, reverse, in_mask.clone(), rec_mask.clone()).unwrap().0,
            &r,
        )
    };
    let mut worst = sweep(&state, &dx, |s| &mut s.1, loss);
    for which in 0..3 {
        let g = lstm_params(&mut grads, which).grad.clone();
        worst = worst.max(sweep(&state, &g, |s| &mut lstm_params(&mut s.0, which).value, loss));
    }
    worst
}

pub fn lstm_cell(seed: u64) -> f64 {
    lstm_scan(seed, 2, false, false).max(lstm_scan(seed, 2, false, true))
}

/// Full bidirectional BPTT on `B=2, L=4, C=3, H=5` in train mode; the
/// dropout masks are replayed by reseeding the generator.
pub fn bilstm(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut bi: BiLstm<f64> = BiLstm::new(3, 5, 0.2, 0.2, &mut rng);
    bi.forward.b.value = rand_tensor(&[20], &mut rng);
    bi.backward.b.value = rand_tensor(&[20], &mut rng);
    let x = rand_tensor(&[2, 4, 3], &mut rng);
    let r = rand_tensor(&[2, 4, 10], &mut rng);
    let mask_seed = rng.random::<u64>();
    let run = |m: &BiLstm<f64>, x: &Tensor<f64>| m.forward(x, true, &mut ChaCha8Rng::seed_from_u64(mask_seed)).unwrap();

    let (_, cache) = run(&bi, &x);
    let mut grads = bi.clone();
    let dx = grads.backward(&cache, &r).unwrap();
    let analytic: Vec<Tensor<f64>> = grads.parameters_mut().into_iter().map(|p| p.grad.clone()).collect();

    let state = (bi, x);
    let loss = |s: &(BiLstm<f64>, Tensor<f64>)| weighted(&run(&s.0, &s.1).0, &r);
    let mut worst = sweep(&state, &dx, |s| &mut s.1, loss);
    for (k, g) in analytic.iter().enumerate() {
        worst = worst.max(sweep(
            &state,
            g,
            |s| &mut s.0.parameters_mut().into_iter().nth(k).unwrap().value,
            loss,
        ));
    }
    worst
}

pub fn softmax_ce(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let classes = 2 + (seed as usize % 3);
    let logits = rand_tensor(&[4, classes], &mut rng).map(|v| v * 3.0);
    let labels: Vec<u8> = (0..4).map(|_| rng.random_range(0..classes as u8)).collect();
    let y = one_hot::<f64>(&labels, classes).unwrap();
    let (_, grad) = softmax_cross_entropy(&logits, &y).unwrap();
    sweep(&logits, &grad, |l| l, |l| softmax_cross_entropy(l, &y).unwrap().0)
}
