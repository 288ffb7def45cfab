mod common;

use common::{max_abs_diff, naive_conv, naive_pool, rng, uniform};
use pfnas::autograd::{Conv2dConfig, PoolConfig, PoolKind, Tape, Tensor};
use rand::Rng;

fn conv(x: &Tensor<f64>, k: &Tensor<f64>, cfg: Conv2dConfig) -> Tensor<f64> {
    let mut t = Tape::<f64>::new();
    let (a, b) = (t.constant(x.clone()), t.constant(k.clone()));
    let y = t.conv2d(a, b, cfg).unwrap();
    t.value(y).clone()
}

fn pool(x: &Tensor<f64>, cfg: PoolConfig) -> Tensor<f64> {
    let mut t = Tape::<f64>::new();
    let a = t.constant(x.clone());
    let y = t.pool2d(a, cfg).unwrap();
    t.value(y).clone()
}

#[test]
fn conv_of_ones_sums_nine() {
    let x = Tensor::full(&[1, 1, 3, 3], 1.0);
    let k = Tensor::full(&[1, 1, 3, 3], 1.0);
    let y = conv(&x, &k, Conv2dConfig::new(1, 1, 1, 1));
    assert_eq!(y.data()[4], 9.0);
}

#[test]
fn delta_kernel_is_identity() {
    let x = uniform(&mut rng(1), &[2, 1, 5, 4], -1.0, 1.0);
    let mut k = Tensor::zeros(&[1, 1, 3, 3]);
    k.data_mut()[4] = 1.0;
    assert_eq!(conv(&x, &k, Conv2dConfig::new(1, 1, 1, 1)), x);
}

#[test]
fn conv_matches_nested_loops() {
    let r = &mut rng(2);
    for (s, p, d, g) in [
        (1, 0, 1, 1),
        (1, 1, 1, 1),
        (2, 1, 1, 1),
        (1, 2, 2, 3),
        (2, 2, 1, 3),
        (1, 1, 1, 1),
    ] {
        let x = uniform(r, &[2, 3, 8, 8], -1.0, 1.0);
        let f = if g == 1 { 4 } else { 6 };
        let k = uniform(r, &[f, 3 / g, 3, 3], -1.0, 1.0);
        let got = conv(&x, &k, Conv2dConfig::new(s, p, d, g));
        let want = naive_conv(&x, &k, s, p, d, g);
        assert_eq!(got.shape(), want.shape());
        assert!(max_abs_diff(got.data(), want.data()) < 1e-12);
    }
}

#[test]
fn separable_conv_equals_two_stage_oracle() {
    let r = &mut rng(3);
    let c = 4;
    let x = uniform(r, &[2, c, 7, 7], -1.0, 1.0);
    let dw = uniform(r, &[c, 1, 5, 5], -1.0, 1.0);
    let pw = uniform(r, &[6, c, 1, 1], -1.0, 1.0);
    let mut t = Tape::<f64>::new();
    let (a, b, e) = (t.constant(x.clone()), t.constant(dw.clone()), t.constant(pw.clone()));
    let mid = t.conv2d(a, b, Conv2dConfig::new(2, 2, 1, c)).unwrap();
    let y = t.conv2d(mid, e, Conv2dConfig::default()).unwrap();
    // stage one: each channel with its own filter
    let mut stage = Vec::new();
    for ch in 0..c {
        let xc: Vec<f64> = (0..2)
            .flat_map(|n| x.data()[(n * c + ch) * 49..][..49].to_vec())
            .collect();
        let xc = Tensor::new(vec![2, 1, 7, 7], xc).unwrap();
        let kc = Tensor::new(vec![1, 1, 5, 5], dw.data()[ch * 25..][..25].to_vec()).unwrap();
        stage.push(naive_conv(&xc, &kc, 2, 2, 1, 1));
    }
    let plane = 16;
    let mut joined = vec![0.0; 2 * c * plane];
    for (ch, s) in stage.iter().enumerate() {
        for n in 0..2 {
            joined[(n * c + ch) * plane..][..plane].copy_from_slice(&s.data()[n * plane..][..plane]);
        }
    }
    let joined = Tensor::new(vec![2, c, 4, 4], joined).unwrap();
    let want = naive_conv(&joined, &pw, 1, 0, 1, 1);
    assert!(max_abs_diff(t.value(y).data(), want.data()) < 1e-12);
}

#[test]
fn pooling_matches_window_loops() {
    let r = &mut rng(4);
    for (kind, stride, pad) in [
        (PoolKind::Max, 1, 1),
        (PoolKind::Max, 2, 1),
        (PoolKind::Avg, 1, 1),
        (PoolKind::Avg, 2, 0),
        (PoolKind::Max, 2, 0),
    ] {
        let x = uniform(r, &[2, 3, 7, 6], -1.0, 1.0);
        let got = pool(&x, PoolConfig::new(kind, 3, stride, pad));
        let want = naive_pool(&x, kind == PoolKind::Max, 3, stride, pad);
        assert_eq!(got.shape(), want.shape());
        assert!(max_abs_diff(got.data(), want.data()) < 1e-12);
    }
}

#[test]
fn avg_pool_of_constant_is_constant_inside() {
    let x = Tensor::full(&[1, 1, 5, 5], 0.7);
    let y = pool(&x, PoolConfig::new(PoolKind::Avg, 3, 1, 1));
    // interior windows see no padding
    for i in 1..4 {
        for j in 1..4 {
            assert!((y.data()[i * 5 + j] - 0.7).abs() < 1e-15);
        }
    }
    // corners count padding in the divisor
    assert!((y.data()[0] - 0.7 * 4.0 / 9.0).abs() < 1e-15);
}

#[test]
fn max_pool_on_increasing_row_takes_last_in_window() {
    let x = Tensor::new(vec![1, 1, 1, 6], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
    let y = pool(&x, PoolConfig::new(PoolKind::Max, 3, 1, 1));
    assert_eq!(y.data(), &[2.0, 3.0, 4.0, 5.0, 6.0, 6.0][..]);
}

#[test]
fn max_pool_gradient_goes_to_first_of_ties() {
    let mut t = Tape::<f64>::new();
    let x = t.leaf(Tensor::full(&[1, 1, 3, 3], 1.0), true);
    let y = t.pool2d(x, PoolConfig::new(PoolKind::Max, 3, 1, 0)).unwrap();
    let s = t.sum(y).unwrap();
    let g = t.backward(s).unwrap();
    let mut want = [0.0; 9];
    want[0] = 1.0;
    assert_eq!(g.get(x).unwrap().data(), &want[..]);
}

#[test]
fn batch_norm_examples() {
    // per channel: values with mean 0 and unit variance already
    let v = [1.0, -1.0, 1.0, -1.0];
    let x = Tensor::new(vec![2, 1, 1, 2], v.to_vec()).unwrap();
    let mut t = Tape::<f64>::new();
    let a = t.constant(x.clone());
    let y = t.batch_norm(a, 1e-5).unwrap();
    assert!(max_abs_diff(t.value(y).data(), x.data()) < 1e-5);

    let c = Tensor::full(&[3, 2, 2, 2], 4.2);
    let b = t.constant(c);
    let z = t.batch_norm(b, 1e-5).unwrap();
    assert!(t.value(z).data().iter().all(|&v| v.abs() < 1e-9));
}

#[test]
fn cross_entropy_examples() {
    let mut t = Tape::<f64>::new();
    let u = t.constant(Tensor::zeros(&[3, 10]));
    let l = t.cross_entropy(u, &[0, 4, 9]).unwrap();
    assert!((t.value(l).data()[0] - 10f64.ln()).abs() < 1e-12);

    let mut sat = vec![0.0; 4];
    sat[2] = 1e4;
    let s = t.constant(Tensor::new(vec![1, 4], sat).unwrap());
    let l = t.cross_entropy(s, &[2]).unwrap();
    assert!(t.value(l).data()[0] < 1e-12);

    let r = &mut rng(5);
    let logits = uniform(r, &[6, 7], -3.0, 3.0);
    let labels: Vec<usize> = (0..6).map(|_| r.random_range(0..7)).collect();
    let v = t.constant(logits.clone());
    let l = t.cross_entropy(v, &labels).unwrap();
    let direct: f64 = logits
        .data()
        .chunks(7)
        .zip(&labels)
        .map(|(row, &y)| {
            let z: f64 = row.iter().map(|v| v.exp()).sum();
            -(row[y].exp() / z).ln()
        })
        .sum::<f64>()
        / 6.0;
    assert!((t.value(l).data()[0] - direct).abs() < 1e-12);

    assert!(t.cross_entropy(v, &[0, 0, 0, 0, 0, 7]).is_err());
}

#[test]
fn square_derivative_and_unused_parameter() {
    let mut t = Tape::<f64>::new();
    let x = t.leaf(Tensor::scalar(3.0), true);
    let unused = t.leaf(Tensor::scalar(-2.0), true);
    let frozen = t.leaf(Tensor::scalar(5.0), false);
    let sq = t.mul(x, x).unwrap();
    let y = t.add(sq, frozen).unwrap();
    let g = t.backward(y).unwrap();
    assert_eq!(g.get(x).unwrap().data(), &[6.0]);
    assert!(g.get(unused).is_none_or(|g| g.data() == [0.0]));
    assert!(g.get(frozen).is_none());
}

#[test]
fn non_scalar_root_is_rejected() {
    let mut t = Tape::<f64>::new();
    let x = t.leaf(Tensor::zeros(&[2]), true);
    assert!(t.backward(x).is_err());
}

#[test]
fn forward_is_deterministic() {
    let r = &mut rng(6);
    let x = uniform(r, &[2, 3, 8, 8], -1.0, 1.0);
    let k = uniform(r, &[4, 3, 3, 3], -1.0, 1.0);
    let a = conv(&x, &k, Conv2dConfig::new(1, 1, 1, 1));
    let b = conv(&x, &k, Conv2dConfig::new(1, 1, 1, 1));
    assert!(a.data().iter().zip(b.data()).all(|(p, q)| p.to_bits() == q.to_bits()));
}
