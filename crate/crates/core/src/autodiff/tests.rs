use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::embeddings::EmbeddingTable;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

#[test]
fn conv_matches_naive_loops() {
    let mut r = rng(11);
    let conv: Conv1d<f64> = Conv1d::new(2, 4, 3, Activation::Linear, &mut r);
    let mut conv = conv;
    conv.bias.value = random(&[3], &mut r);
    let x = random(&[2, 3, 4], &mut r);
    let (y, _) = conv.forward(&x).unwrap();
    assert_eq!(y.shape(), &[2, 2, 3]);
    let w = conv.kernel.value.data();
    for b in 0..2 {
        for t in 0..2 {
            for o in 0..3 {
                let mut acc = conv.bias.value.data()[o];
                for j in 0..2 {
                    for c in 0..4 {
                        acc += x.data()[(b * 3 + t + j) * 4 + c] * w[(j * 4 + c) * 3 + o];
                    }
                }
                assert!((y.data()[(b * 2 + t) * 3 + o] - acc).abs() <= 1e-10);
            }
        }
    }
}

#[test]
fn conv_all_ones_and_length() {
    let mut conv: Conv1d<f64> = Conv1d::new(2, 5, 1, Activation::Linear, &mut rng(0));
    conv.kernel.value.fill(1.0);
    let (y, _) = conv.forward(&Tensor::filled(&[1, 100, 5], 1.0)).unwrap();
    assert_eq!(y.shape(), &[1, 99, 1]);
    assert!(y.data().iter().all(|&v| v == 10.0));
    assert!(matches!(
        conv.forward(&Tensor::zeros(&[1, 1, 5])),
        Err(crate::Error::Shape(_))
    ));
}

#[test]
fn conv_backward_linear_in_grad() {
    let mut r = rng(5);
    let base: Conv1d<f64> = Conv1d::new(2, 3, 4, Activation::Linear, &mut r);
    let x = random(&[2, 5, 3], &mut r);
    let (_, cache) = base.forward(&x).unwrap();
    let g1 = random(&[2, 4, 4], &mut r);
    let g2 = random(&[2, 4, 4], &mut r);
    let mut sum = g1.clone();
    sum.add_assign(&g2);

    let run = |g: &Tensor<f64>| {
        let mut c = base.clone();
        let dx = c.backward(&cache, g).unwrap();
        (dx, c.kernel.grad, c.bias.grad)
    };
    let (dx1, dk1, db1) = run(&g1);
    let (dx2, dk2, db2) = run(&g2);
    let (dxs, dks, dbs) = run(&sum);
    for (s, (a, b)) in [(dxs, (dx1, dx2)), (dks, (dk1, dk2)), (dbs, (db1, db2))] {
        let mut expect = a;
        expect.add_assign(&b);
        assert!(max_abs_diff(s.data(), expect.data()) < 1e-12);
    }
    let (dx0, dk0, db0) = run(&Tensor::zeros(&[2, 4, 4]));
    assert!(dx0.data().iter().chain(dk0.data()).chain(db0.data()).all(|&v| v == 0.0));
}

#[test]
fn dense_identity_and_shapes() {
    let mut d: Dense<f64> = Dense::new(3, 3, Activation::Linear, &mut rng(1));
    d.weight.value = Tensor::from_fn(&[3, 3], |i| if i % 4 == 0 { 1.0 } else { 0.0 });
    let x = random(&[2, 4, 3], &mut rng(2));
    assert_eq!(d.forward(&x).unwrap().0, x);

    let d: Dense<f32> = Dense::new(256, 128, Activation::Relu, &mut rng(1));
    let (y, _) = d.forward(&Tensor::zeros(&[2, 99, 256])).unwrap();
    assert_eq!(y.shape(), &[2, 99, 128]);
    assert!(d.forward(&Tensor::zeros(&[2, 99, 255])).is_err());
}

#[test]
fn relu_derivative_masks_negative_side() {
    let mut d: Dense<f64> = Dense::new(1, 1, Activation::Relu, &mut rng(0));
    d.weight.value.fill(1.0);
    let x = Tensor::new(vec![2, 1], vec![-2.0, 3.0]).unwrap();
    let (y, cache) = d.forward(&x).unwrap();
    assert_eq!(y.data(), &[0.0, 3.0]);
    let dx = d.backward(&cache, &Tensor::filled(&[2, 1], 1.0)).unwrap();
    assert_eq!(dx.data(), &[0.0, 1.0]);
}

/// Direct scalar transcription of the cell equations.
// Index loops on purpose: this oracle must not share code shape with the GEMM path.
#[allow(clippy::needless_range_loop)]
fn scalar_cell(x: &[f64], h: &[f64], c: &[f64], p: &LstmParams<f64>) -> (Vec<f64>, Vec<f64>) {
    let hd = p.hidden();
    let d = p.input_dim();
    let sig = |z: f64| 1.0 / (1.0 + (-z).exp());
    let pre = |gate: usize, j: usize| {
        let row = gate * hd + j;
        let mut z = p.b.value.data()[row];
        for k in 0..d {
            z += p.w.value.data()[row * d + k] * x[k];
        }
        for k in 0..hd {
            z += p.u.value.data()[row * hd + k] * h[k];
        }
        z
    };
    let mut h_new = vec![0.0; hd];
    let mut c_new = vec![0.0; hd];
    for j in 0..hd {
        let (i, f, g, o) = (sig(pre(0, j)), sig(pre(1, j)), pre(2, j).tanh(), sig(pre(3, j)));
        c_new[j] = f * c[j] + i * g;
        h_new[j] = o * c_new[j].tanh();
    }
    (h_new, c_new)
}

#[test]
fn lstm_cell_matches_scalar_loops() {
    let mut r = rng(3);
    let mut p: LstmParams<f64> = LstmParams::new(4, 3, &mut r);
    p.b.value = random(&[12], &mut r);
    let x = random(&[2, 4], &mut r);
    let h = random(&[2, 3], &mut r);
    let c = random(&[2, 3], &mut r);
    let (h1, c1) = lstm_cell_forward(&x, &h, &c, &p, None).unwrap();
    for b in 0..2 {
        let (hs, cs) = scalar_cell(
            &x.data()[b * 4..b * 4 + 4],
            &h.data()[b * 3..b * 3 + 3],
            &c.data()[b * 3..b * 3 + 3],
            &p,
        );
        assert!(max_abs_diff(&h1.data()[b * 3..b * 3 + 3], &hs) <= 1e-12);
        assert!(max_abs_diff(&c1.data()[b * 3..b * 3 + 3], &cs) <= 1e-12);
    }
}

#[test]
fn lstm_cell_zero_weights_gives_zero_state() {
    let mut p: LstmParams<f64> = LstmParams::new(3, 4, &mut rng(0));
    for param in p.parameters_mut() {
        param.value.fill(0.0);
    }
    let x = random(&[2, 3], &mut rng(1));
    let (h, _) = lstm_cell_forward(&x, &Tensor::zeros(&[2, 4]), &Tensor::zeros(&[2, 4]), &p, None).unwrap();
    assert!(h.data().iter().all(|&v| v == 0.0));
}

#[test]
fn lstm_cell_output_bounded() {
    let mut r = rng(9);
    let mut p: LstmParams<f64> = LstmParams::new(3, 4, &mut r);
    p.w.value = p.w.value.map(|v| v * 50.0);
    let x = random(&[3, 3], &mut r).map(|v| v * 100.0);
    let c = random(&[3, 4], &mut r).map(|v| v * 100.0);
    let (h, _) = lstm_cell_forward(&x, &Tensor::zeros(&[3, 4]), &c, &p, None).unwrap();
    assert!(h.data().iter().all(|v| v.abs() <= 1.0));
}

#[test]
fn scan_step_equals_cell() {
    let mut r = rng(4);
    let p: LstmParams<f64> = LstmParams::new(3, 5, &mut r);
    let x = random(&[2, 4, 3], &mut r);
    let (out, _) = p.scan(&x, false, None, None).unwrap();
    let mut h = Tensor::zeros(&[2, 5]);
    let mut c = Tensor::zeros(&[2, 5]);
    for t in 0..4 {
        let xt = Tensor::from_fn(&[2, 3], |i| x.data()[((i / 3) * 4 + t) * 3 + i % 3]);
        let (h2, c2) = lstm_cell_forward(&xt, &h, &c, &p, None).unwrap();
        for b in 0..2 {
            let got = &out.data()[(b * 4 + t) * 5..(b * 4 + t) * 5 + 5];
            assert!(max_abs_diff(got, &h2.data()[b * 5..b * 5 + 5]) < 1e-14);
        }
        h = h2;
        c = c2;
    }
}

#[test]
fn bilstm_channels_and_reversal_symmetry() {
    let mut r = rng(6);
    let big: BiLstm<f32> = BiLstm::new(4, 128, 0.1, 0.1, &mut r);
    let (y, _) = big.forward(&Tensor::zeros(&[1, 3, 4]), false, &mut r).unwrap();
    assert_eq!(y.shape(), &[1, 3, 256]);

    let mut bi: BiLstm<f64> = BiLstm::new(3, 4, 0.0, 0.0, &mut r);
    bi.backward = bi.forward.clone();
    let (b, l, d, h) = (2, 5, 3, 4);
    let x = random(&[b, l, d], &mut r);
    let x_rev = Tensor::from_fn(&[b, l, d], |i| {
        let (bi_, t, c) = (i / (l * d), (i / d) % l, i % d);
        x.data()[(bi_ * l + (l - 1 - t)) * d + c]
    });
    let (y, _) = bi.forward(&x, false, &mut r).unwrap();
    let (y_rev, _) = bi.forward(&x_rev, false, &mut r).unwrap();
    for bb in 0..b {
        for t in 0..l {
            let fwd_of_rev = &y_rev.data()[(bb * l + t) * 2 * h..(bb * l + t) * 2 * h + h];
            let tr = l - 1 - t;
            let bwd_of_orig = &y.data()[(bb * l + tr) * 2 * h + h..(bb * l + tr) * 2 * h + 2 * h];
            assert!(max_abs_diff(fwd_of_rev, bwd_of_orig) < 1e-14);
        }
    }
}

#[test]
fn pooling_cases() {
    let x = Tensor::from_fn(&[2, 3, 2], |i| [1.5, -2.0][i % 2]);
    let y = global_avg_pool1d(&x).unwrap();
    assert_eq!(y.data(), &[1.5, -2.0, 1.5, -2.0]);
    let one = random(&[2, 1, 3], &mut rng(0));
    assert_eq!(global_avg_pool1d(&one).unwrap().data(), one.data());
    let two = Tensor::new(vec![1, 2, 1], vec![1.0, 3.0]).unwrap();
    assert_eq!(global_avg_pool1d(&two).unwrap().data(), &[2.0]);
    let g = global_avg_pool1d_backward(&Tensor::new(vec![1, 1], vec![4.0]).unwrap(), 2);
    assert_eq!(g.data(), &[2.0, 2.0]);
}

#[test]
fn dropout_identity_cases() {
    let x = random(&[4, 5, 6], &mut rng(0));
    let mut r = rng(1);
    assert_eq!(spatial_dropout1d(&x, 0.5, false, &mut r).unwrap().0, x);
    assert_eq!(spatial_dropout1d(&x, 0.0, true, &mut r).unwrap().0, x);
    assert_eq!(dropout(&x, 0.5, false, &mut r).0, x);
    assert_eq!(dropout(&x, 0.0, true, &mut r).0, x);
}

#[test]
fn spatial_dropout_drops_whole_channels() {
    let x = Tensor::<f64>::filled(&[3, 7, 8], 1.0);
    let (y, mask) = spatial_dropout1d(&x, 0.5, true, &mut rng(2)).unwrap();
    let mask = mask.unwrap();
    assert!(mask.keep.contains(&0.0));
    for b in 0..3 {
        for c in 0..8 {
            let col: Vec<f64> = (0..7).map(|t| y.data()[(b * 7 + t) * 8 + c]).collect();
            let k = mask.keep[b * 8 + c];
            assert!(col.iter().all(|&v| v == k));
            assert!(k == 0.0 || k == 2.0);
        }
    }
}

#[test]
fn dropout_preserves_expectation() {
    let trials = 100_000;
    let mut r = rng(7);
    let x = Tensor::<f64>::filled(&[trials], 1.0);
    let (y, _) = dropout(&x, 0.1, true, &mut r);
    let mean = y.data().iter().sum::<f64>() / trials as f64;
    assert!((mean - 1.0).abs() < 0.01, "{mean}");
    let xs = Tensor::<f64>::filled(&[trials / 10, 2, 10], 1.0);
    let (ys, _) = spatial_dropout1d(&xs, 0.2, true, &mut r).unwrap();
    let mean = ys.data().iter().sum::<f64>() / ys.len() as f64;
    assert!((mean - 1.0).abs() < 0.01, "{mean}");
}

#[test]
fn cross_entropy_anchors() {
    let logits = Tensor::<f64>::zeros(&[3, 2]);
    let y = one_hot::<f64>(&[0, 1, 1], 2).unwrap();
    let (loss, _) = softmax_cross_entropy(&logits, &y).unwrap();
    assert!((loss - std::f64::consts::LN_2).abs() < 1e-12);

    let logits = Tensor::new(vec![1, 2], vec![0.0, 20.0]).unwrap();
    let (loss, _) = softmax_cross_entropy(&logits, &one_hot::<f64>(&[1], 2).unwrap()).unwrap();
    assert!(loss < 1e-8);

    let bad = Tensor::new(vec![1, 2], vec![1.0, 1.0]).unwrap();
    assert!(softmax_cross_entropy(&logits, &bad).is_err());
    assert!(one_hot::<f64>(&[2], 2).is_err());
}

#[test]
fn softmax_rows_are_distributions() {
    let z = random(&[5, 3], &mut rng(1)).map(|v| v * 30.0);
    let p = softmax(&z);
    for row in p.data().chunks(3) {
        assert!(row.iter().all(|&v| v >= 0.0));
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
    }
}

#[test]
fn embedding_lookup_rules() {
    let table = EmbeddingTable::from_matrix(3, 2, vec![0.0, 0.0, 0.0, 0.0, 0.5, -1.0]).unwrap();
    let y: Tensor<f64> = embedding_forward(&[2, 0, 2, 0], 2, 2, &table).unwrap();
    assert_eq!(y.data(), &[0.5, -1.0, 0.0, 0.0, 0.5, -1.0, 0.0, 0.0]);
    assert!(matches!(
        embedding_forward::<f64>(&[3], 1, 1, &table),
        Err(crate::Error::Bounds { index: 3, rows: 3 })
    ));
}
