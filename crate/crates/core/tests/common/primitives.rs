//! One finite-difference case generator per differentiable primitive.

use pfnas::autograd::{Conv2dConfig, PoolConfig, PoolKind, Tape, Tensor, Var};
use rand::Rng;

use super::{away_from_zero, gradcheck, rng, uniform, well_separated};

pub const H: f64 = 1e-3;

type Case = fn(u64) -> f64;

fn check(inputs: &[Tensor<f64>], seed: u64, build: &dyn Fn(&mut Tape<f64>, &[Var]) -> Var) -> f64 {
    gradcheck(inputs, build, seed, H)
}

fn add(seed: u64) -> f64 {
    let r = &mut rng(seed);
    let ins = [uniform(r, &[2, 3, 4], -1.0, 1.0), uniform(r, &[2, 3, 4], -1.0, 1.0)];
    check(&ins, seed, &|t, v| t.add(v[0], v[1]).unwrap())
}

fn mul(seed: u64) -> f64 {
    let r = &mut rng(seed);
    let ins = [uniform(r, &[3, 5], -1.0, 1.0), uniform(r, &[3, 5], -1.0, 1.0)];
    check(&ins, seed, &|t, v| t.mul(v[0], v[1]).unwrap())
}

fn scale(seed: u64) -> f64 {
    let r = &mut rng(seed);
    let f = r.random_range(-2.0..2.0);
    let ins = [uniform(r, &[4, 3], -1.0, 1.0)];
    check(&ins, seed, &move |t, v| t.scale(v[0], f).unwrap())
}

fn relu(seed: u64) -> f64 {
    let r = &mut rng(seed);
    let ins = [away_from_zero(r, &[2, 3, 3, 3], 0.01)];
    check(&ins, seed, &|t, v| t.relu(v[0]).unwrap())
}

fn sum(seed: u64) -> f64 {
    let r = &mut rng(seed);
    let ins = [uniform(r, &[2, 2, 3], -1.0, 1.0)];
    check(&ins, seed, &|t, v| t.sum(v[0]).unwrap())
}

fn reshape(seed: u64) -> f64 {
    let r = &mut rng(seed);
    let ins = [uniform(r, &[2, 6], -1.0, 1.0)];
    check(&ins, seed, &|t, v| t.reshape(v[0], &[3, 4]).unwrap())
}

fn conv2d(seed: u64) -> f64 {
    let r = &mut rng(seed);
    // (stride, padding, dilation, groups)
    let configs = [
        (1, 1, 1, 1),
        (2, 1, 1, 1),
        (1, 2, 2, 4),
        (2, 0, 1, 2),
        (1, 2, 1, 4),
        (2, 2, 2, 1),
    ];
    let (s, p, d, g) = configs[seed as usize % configs.len()];
    let k = (if seed.is_multiple_of(2) { 3 } else { 5 }).min(3 + p);
    let ins = [
        uniform(r, &[2, 4, 6, 6], -1.0, 1.0),
        uniform(r, &[4, 4 / g, k, k], -1.0, 1.0),
    ];
    check(&ins, seed, &move |t, v| {
        t.conv2d(v[0], v[1], Conv2dConfig::new(s, p, d, g)).unwrap()
    })
}

fn pool(seed: u64, kind: PoolKind) -> f64 {
    let r = &mut rng(seed);
    let stride = 1 + (seed as usize % 2);
    let padding = seed as usize % 2;
    let input = if kind == PoolKind::Max {
        well_separated(r, &[2, 2, 5, 5])
    } else {
        uniform(r, &[2, 2, 5, 5], -1.0, 1.0)
    };
    check(&[input], seed, &move |t, v| {
        t.pool2d(v[0], PoolConfig::new(kind, 3, stride, padding)).unwrap()
    })
}

fn max_pool(seed: u64) -> f64 {
    pool(seed, PoolKind::Max)
}

fn avg_pool(seed: u64) -> f64 {
    pool(seed, PoolKind::Avg)
}

fn batch_norm(seed: u64) -> f64 {
    let r = &mut rng(seed);
    let ins = [uniform(r, &[3, 2, 3, 3], -1.0, 1.0)];
    check(&ins, seed, &|t, v| t.batch_norm(v[0], 1e-5).unwrap())
}

fn subsample(seed: u64) -> f64 {
    let r = &mut rng(seed);
    let ins = [uniform(r, &[2, 2, 5, 4], -1.0, 1.0)];
    check(&ins, seed, &|t, v| t.subsample(v[0], 2).unwrap())
}

fn concat_channels(seed: u64) -> f64 {
    let r = &mut rng(seed);
    let ins = [
        uniform(r, &[2, 1, 3, 3], -1.0, 1.0),
        uniform(r, &[2, 3, 3, 3], -1.0, 1.0),
        uniform(r, &[2, 2, 3, 3], -1.0, 1.0),
    ];
    check(&ins, seed, &|t, v| t.concat_channels(v).unwrap())
}

fn global_avg_pool(seed: u64) -> f64 {
    let r = &mut rng(seed);
    let ins = [uniform(r, &[2, 3, 4, 3], -1.0, 1.0)];
    check(&ins, seed, &|t, v| t.global_avg_pool(v[0]).unwrap())
}

fn linear(seed: u64) -> f64 {
    let r = &mut rng(seed);
    let ins = [
        uniform(r, &[3, 5], -1.0, 1.0),
        uniform(r, &[4, 5], -1.0, 1.0),
        uniform(r, &[4], -1.0, 1.0),
    ];
    if seed.is_multiple_of(2) {
        check(&ins, seed, &|t, v| t.linear(v[0], v[1], Some(v[2])).unwrap())
    } else {
        check(&ins[..2], seed, &|t, v| t.linear(v[0], v[1], None).unwrap())
    }
}

fn cross_entropy(seed: u64) -> f64 {
    let r = &mut rng(seed);
    let labels: Vec<usize> = (0..4).map(|_| r.random_range(0..5)).collect();
    let ins = [uniform(r, &[4, 5], -1.0, 1.0)];
    check(&ins, seed, &move |t, v| t.cross_entropy(v[0], &labels).unwrap())
}

pub const CASES: [(&str, Case); 17] = [
    ("add", add),
    ("mul", mul),
    ("scale", scale),
    ("relu", relu),
    ("sum", sum),
    ("reshape", reshape),
    ("conv2d", conv2d),
    ("max_pool2d", max_pool),
    ("avg_pool2d", avg_pool),
    ("batch_norm", batch_norm),
    ("subsample", subsample),
    ("concat_channels", concat_channels),
    ("global_avg_pool", global_avg_pool),
    ("linear", linear),
    ("cross_entropy", cross_entropy),
    ("conv2d_depthwise", |s| conv2d(s * 6 + 2)),
    ("conv2d_strided", |s| conv2d(s * 6 + 1)),
];

/// Worst relative error per primitive over `instances` seeded draws.
pub fn run_all(instances: u64) -> Vec<(&'static str, f64)> {
    CASES
        .iter()
        .map(|(name, case)| (*name, (0..instances).map(case).fold(0.0, f64::max)))
        .collect()
}
