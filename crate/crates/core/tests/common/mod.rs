//! Gradient checks and forward-equivalence checks against the f64 oracles.
#![allow(dead_code)]

pub mod oracle;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tokcomp::tensor::{Graph, LstmWeights, Tensor, Var};
use tokcomp::train::Confusion;

/// Central-difference step.
pub const STEP: f64 = 1e-3;
pub const GRAD_TOL: f64 = 1e-4;
pub const SEEDS: [u64; 5] = [1, 2, 3, 4, 5];
pub const ORACLE_TOL: f64 = 1e-6;

type Forward = Box<dyn Fn(&mut Graph, &[Var]) -> Var>;
type Oracle = Box<dyn Fn(&[Vec<f64>]) -> Vec<f64>>;

pub struct GradCase {
    pub op: &'static str,
    pub inputs: Vec<Tensor>,
    pub forward: Forward,
    pub oracle: Oracle,
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f32, hi: f32) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}

/// Values bounded away from zero so ReLU kinks stay out of the difference stencil.
fn away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let m = rng.random_range(0.05f32..1.0);
            if rng.random::<bool>() {
                m
            } else {
                -m
            }
        })
        .collect();
    Tensor::new(shape, data).unwrap()
}

/// Pooling pairs whose members differ by at least 0.05.
fn distinct_pairs(rng: &mut ChaCha8Rng, c: usize, t: usize) -> Tensor {
    let mut data = Vec::with_capacity(c * t);
    for _ in 0..c * t / 2 {
        let a = rng.random_range(-1.0f32..1.0);
        let gap = rng.random_range(0.05f32..0.5);
        if rng.random::<bool>() {
            data.extend([a, a + gap]);
        } else {
            data.extend([a + gap, a]);
        }
    }
    Tensor::new(&[c, t], data).unwrap()
}

fn lstm_weights(vars: &[Var], first: usize) -> LstmWeights {
    LstmWeights {
        w_ih: vars[first],
        w_hh: vars[first + 1],
        bias: vars[first + 2],
    }
}

fn dropout_scale(seed: u64, n: usize, p: f32) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            if rng.random::<f32>() < p {
                0.0
            } else {
                1.0 / (1.0 - f64::from(p))
            }
        })
        .collect()
}

/// One case per differentiable graph op, with inputs drawn from `seed`.
pub fn grad_cases(seed: u64) -> Vec<GradCase> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut cases = Vec::new();

    for (op, k) in [("conv1d_k5", 5usize), ("conv1d_k3", 3), ("conv1d_k1", 1)] {
        let (c_in, t, c_out) = (3, 8, 4);
        cases.push(GradCase {
            op,
            inputs: vec![
                uniform(&mut rng, &[c_in, t], -1.0, 1.0),
                uniform(&mut rng, &[c_out, c_in, k], -1.0, 1.0),
                uniform(&mut rng, &[c_out], -1.0, 1.0),
            ],
            forward: Box::new(|g, v| g.conv1d(v[0], v[1], v[2]).unwrap()),
            oracle: Box::new(move |x| oracle::conv1d(&x[0], c_in, t, &x[1], c_out, k, &x[2])),
        });
    }

    cases.push(GradCase {
        op: "maxpool2",
        inputs: vec![distinct_pairs(&mut rng, 3, 8)],
        forward: Box::new(|g, v| g.maxpool2(v[0]).unwrap()),
        oracle: Box::new(|x| oracle::maxpool2(&x[0], 3, 8)),
    });

    cases.push(GradCase {
        op: "upsample2",
        inputs: vec![
            uniform(&mut rng, &[3, 4], -1.0, 1.0),
            uniform(&mut rng, &[3, 2, 2], -1.0, 1.0),
        ],
        forward: Box::new(|g, v| g.upsample2(v[0], v[1]).unwrap()),
        oracle: Box::new(|x| oracle::upsample2(&x[0], 3, 4, &x[1], 2)),
    });

    cases.push(GradCase {
        op: "concat_channels",
        inputs: vec![
            uniform(&mut rng, &[2, 5], -1.0, 1.0),
            uniform(&mut rng, &[3, 5], -1.0, 1.0),
        ],
        forward: Box::new(|g, v| g.concat_channels(v[0], v[1]).unwrap()),
        oracle: Box::new(|x| x[0].iter().chain(&x[1]).copied().collect()),
    });

    cases.push(GradCase {
        op: "relu",
        inputs: vec![away_from_zero(&mut rng, &[3, 6])],
        forward: Box::new(|g, v| g.relu(v[0])),
        oracle: Box::new(|x| oracle::relu(&x[0])),
    });

    let drop_seed = rng.random::<u64>();
    cases.push(GradCase {
        op: "dropout",
        inputs: vec![uniform(&mut rng, &[3, 6], -1.0, 1.0)],
        forward: Box::new(move |g, v| {
            g.dropout(v[0], 0.5, true, &mut ChaCha8Rng::seed_from_u64(drop_seed))
                .unwrap()
        }),
        oracle: Box::new(move |x| {
            let s = dropout_scale(drop_seed, x[0].len(), 0.5);
            x[0].iter().zip(&s).map(|(a, b)| a * b).collect()
        }),
    });

    cases.push(GradCase {
        op: "token_softmax_head",
        inputs: vec![
            uniform(&mut rng, &[4, 6], -1.0, 1.0),
            uniform(&mut rng, &[2, 4], -1.0, 1.0),
        ],
        forward: Box::new(|g, v| g.token_softmax_head(v[0], v[1]).unwrap()),
        oracle: Box::new(|x| oracle::softmax_head(&x[0], 4, 6, &x[1], 2)),
    });

    let t = 6;
    let labels: Vec<u8> = (0..t).map(|_| rng.random_range(0..2u8)).collect();
    let mut pad: Vec<u8> = (0..t).map(|_| rng.random_range(0..2u8)).collect();
    pad[0] = 1;
    let (l2, p2) = (labels.clone(), pad.clone());
    cases.push(GradCase {
        op: "masked_cross_entropy",
        inputs: vec![uniform(&mut rng, &[2, t], 0.1, 1.0)],
        forward: Box::new(move |g, v| g.masked_cross_entropy(v[0], &labels, &pad).unwrap()),
        oracle: Box::new(move |x| vec![oracle::masked_nll(&x[0], t, &l2, &p2)]),
    });

    let (n, h) = (3, 4);
    let lstm_inputs = |rng: &mut ChaCha8Rng| {
        vec![
            uniform(rng, &[n], -1.0, 1.0),
            uniform(rng, &[h], -1.0, 1.0),
            uniform(rng, &[h], -1.0, 1.0),
            uniform(rng, &[4 * h, n], -0.5, 0.5),
            uniform(rng, &[4 * h, h], -0.5, 0.5),
            uniform(rng, &[4 * h], -0.5, 0.5),
        ]
    };
    for (op, which) in [("lstm_cell_h", 0usize), ("lstm_cell_c", 1)] {
        cases.push(GradCase {
            op,
            inputs: lstm_inputs(&mut rng),
            forward: Box::new(move |g, v| {
                let (hv, cv) = g.lstm_cell(v[0], v[1], v[2], lstm_weights(v, 3)).unwrap();
                [hv, cv][which]
            }),
            oracle: Box::new(move |x| {
                let (hv, cv) = oracle::lstm_cell(&x[0], &x[1], &x[2], &x[3], &x[4], &x[5]);
                [hv, cv][which].clone()
            }),
        });
    }

    cases.push(GradCase {
        op: "select_row",
        inputs: vec![uniform(&mut rng, &[3, 4], -1.0, 1.0)],
        forward: Box::new(|g, v| g.select_row(v[0], 1).unwrap()),
        oracle: Box::new(|x| x[0][4..8].to_vec()),
    });

    for (op, reverse) in [("lstm_sequence_fwd", false), ("lstm_sequence_rev", true)] {
        let t = 5;
        cases.push(GradCase {
            op,
            inputs: vec![
                uniform(&mut rng, &[n, t], -1.0, 1.0),
                uniform(&mut rng, &[4 * h, n], -0.5, 0.5),
                uniform(&mut rng, &[4 * h, h], -0.5, 0.5),
                uniform(&mut rng, &[4 * h], -0.5, 0.5),
            ],
            forward: Box::new(move |g, v| g.lstm_sequence(v[0], lstm_weights(v, 1), reverse).unwrap()),
            oracle: Box::new(move |x| oracle::lstm_sequence(&x[0], n, t, &x[1], &x[2], &x[3], reverse)),
        });
    }
    cases
}

fn norm(v: impl Iterator<Item = f64>) -> f64 {
    v.map(|x| x * x).sum::<f64>().sqrt()
}

/// `‖a − b‖ / max(‖a‖, ‖b‖)`, or 0 when both vanish.
pub fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let scale = norm(a.iter().copied()).max(norm(b.iter().copied()));
    if scale < 1e-12 {
        return 0.0;
    }
    norm(a.iter().zip(b).map(|(x, y)| x - y)) / scale
}

/// Worst relative error, over all inputs of the case, between the graph's
/// gradient and central differences of the f64 oracle.
pub fn grad_check(case: &GradCase, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9);
    let mut g = Graph::new();
    let vars: Vec<Var> = case
        .inputs
        .iter()
        .map(|t| g.input(t.clone().with_requires_grad(true)))
        .collect();
    let out = (case.forward)(&mut g, &vars);
    let weights: Vec<f32> = (0..g.value(out).len()).map(|_| rng.random_range(-1.0..1.0)).collect();
    let grads = g.backward_with(out, &weights).unwrap();

    let mut xs: Vec<Vec<f64>> = case
        .inputs
        .iter()
        .map(|t| t.data().iter().map(|&v| f64::from(v)).collect())
        .collect();
    let loss = |xs: &[Vec<f64>]| -> f64 {
        (case.oracle)(xs)
            .iter()
            .zip(&weights)
            .map(|(o, &w)| o * f64::from(w))
            .sum()
    };
    let mut worst = 0.0f64;
    for (i, v) in vars.iter().enumerate() {
        let analytic: Vec<f64> = match grads.get(*v) {
            Some(g) => g.iter().map(|&x| f64::from(x)).collect(),
            None => vec![0.0; xs[i].len()],
        };
        let mut numeric = Vec::with_capacity(xs[i].len());
        for j in 0..xs[i].len() {
            let orig = xs[i][j];
            xs[i][j] = orig + STEP;
            let up = loss(&xs);
            xs[i][j] = orig - STEP;
            let down = loss(&xs);
            xs[i][j] = orig;
            numeric.push((up - down) / (2.0 * STEP));
        }
        worst = worst.max(rel_err(&analytic, &numeric));
    }
    worst
}

/// `(op, worst relative error over all seeds)` for every op.
pub fn grad_check_all() -> Vec<(&'static str, f64)> {
    let mut worst: Vec<(&'static str, f64)> = Vec::new();
    for &seed in &SEEDS {
        for case in grad_cases(seed) {
            let err = grad_check(&case, seed);
            match worst.iter_mut().find(|(op, _)| *op == case.op) {
                Some(w) => w.1 = w.1.max(err),
                None => worst.push((case.op, err)),
            }
        }
    }
    worst
}

fn max_scaled_diff(got: &[f32], want: &[f64]) -> f64 {
    assert_eq!(got.len(), want.len());
    got.iter()
        .zip(want)
        .map(|(&a, &b)| (f64::from(a) - b).abs() / b.abs().max(1.0))
        .fold(0.0, f64::max)
}

fn to64(t: &Tensor) -> Vec<f64> {
    t.data().iter().map(|&v| f64::from(v)).collect()
}

pub struct OracleResult {
    pub op: &'static str,
    pub instances: usize,
    /// Largest `|got − want| / max(1, |want|)`; 0 means exact.
    pub max_err: f64,
}

/// Forward outputs of conv1d, upsample2 and the softmax head, and the F1
/// metric, compared with the oracles on `n` random small instances each.
pub fn oracle_equivalence(n: usize, seed: u64) -> Vec<OracleResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut conv = 0.0f64;
    let mut up = 0.0f64;
    let mut soft = 0.0f64;
    let mut f1 = 0.0f64;
    for _ in 0..n {
        let c_in = rng.random_range(1..=4);
        let c_out = rng.random_range(1..=4);
        let t = rng.random_range(1..=12);
        let k = [1, 3, 5][rng.random_range(0..3)];
        let x = uniform(&mut rng, &[c_in, t], -1.0, 1.0);
        let w = uniform(&mut rng, &[c_out, c_in, k], -1.0, 1.0);
        let b = uniform(&mut rng, &[c_out], -1.0, 1.0);
        let mut g = Graph::new();
        let (xv, wv, bv) = (g.input(x.clone()), g.input(w.clone()), g.input(b.clone()));
        let y = g.conv1d(xv, wv, bv).unwrap();
        let want = oracle::conv1d(&to64(&x), c_in, t, &to64(&w), c_out, k, &to64(&b));
        conv = conv.max(max_scaled_diff(g.value(y).data(), &want));

        let wu = uniform(&mut rng, &[c_in, c_out, 2], -1.0, 1.0);
        let wuv = g.input(wu.clone());
        let y = g.upsample2(xv, wuv).unwrap();
        let want = oracle::upsample2(&to64(&x), c_in, t, &to64(&wu), c_out);
        up = up.max(max_scaled_diff(g.value(y).data(), &want));

        let classes = rng.random_range(2..=3);
        let wh = uniform(&mut rng, &[classes, c_in], -2.0, 2.0);
        let whv = g.input(wh.clone());
        let y = g.token_softmax_head(xv, whv).unwrap();
        let want = oracle::softmax_head(&to64(&x), c_in, t, &to64(&wh), classes);
        soft = soft.max(max_scaled_diff(g.value(y).data(), &want));

        let len = rng.random_range(1..=64);
        let pred: Vec<u8> = (0..len).map(|_| rng.random_range(0..2u8)).collect();
        let truth: Vec<u8> = (0..len).map(|_| rng.random_range(0..2u8)).collect();
        let pad: Vec<u8> = (0..len).map(|_| u8::from(rng.random_bool(0.8))).collect();
        let c = Confusion::from_masks(&pred, &truth, &pad);
        let (p, r, f, a) = oracle::prf(&pred, &truth, &pad);
        let got = [c.precision(), c.recall(), c.f1(), c.accuracy()];
        let want = [p, r, f, a];
        let exact = got.iter().zip(&want).all(|(x, y)| x.to_bits() == y.to_bits());
        if !exact {
            f1 = f1.max(
                got.iter()
                    .zip(&want)
                    .map(|(x, y)| (x - y).abs())
                    .fold(f64::MIN_POSITIVE, f64::max),
            );
        }
    }
    vec![
        OracleResult {
            op: "conv1d",
            instances: n,
            max_err: conv,
        },
        OracleResult {
            op: "upsample2",
            instances: n,
            max_err: up,
        },
        OracleResult {
            op: "softmax_head",
            instances: n,
            max_err: soft,
        },
        OracleResult {
            op: "f1_metric",
            instances: n,
            max_err: f1,
        },
    ]
}
